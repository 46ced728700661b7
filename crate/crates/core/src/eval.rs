//! Scoring a checkpoint at packet and flow level, and exporting embeddings.
//!
//! Precision and recall of a class with no predicted (or no true) samples
//! are 0, and such classes still count in the macro averages.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2};
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetFlow};
use crate::ingest::Split;
use crate::model::{infer_flows, InferenceOutput, ModelError, ModelParams};
use crate::ErrorClass;

/// Flows per forward chunk during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint has {model} classes, dataset has {dataset}")]
    ClassMismatch { model: usize, dataset: usize },
    #[error("split has no flows")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub fn class(&self) -> ErrorClass {
        match self {
            EvalError::ClassMismatch { .. } | EvalError::EmptySplit => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Flow,
    Packet,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Flow => "flow",
            Level::Packet => "packet",
        })
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flow" => Ok(Level::Flow),
            "packet" => Ok(Level::Packet),
            _ => Err(format!("unknown level {s:?} (expected flow or packet)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSelection {
    Flow,
    Packet,
    Both,
}

impl LevelSelection {
    pub fn levels(self) -> Vec<Level> {
        match self {
            LevelSelection::Flow => vec![Level::Flow],
            LevelSelection::Packet => vec![Level::Packet],
            LevelSelection::Both => vec![Level::Flow, Level::Packet],
        }
    }
}

impl FromStr for LevelSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flow" => Ok(LevelSelection::Flow),
            "packet" => Ok(LevelSelection::Packet),
            "both" => Ok(LevelSelection::Both),
            _ => Err(format!("unknown level {s:?} (expected flow, packet or both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub level: Level,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    #[serde(rename = "class")]
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(level: Level, names: &[String], confusion: Vec<Vec<u64>>) -> Self {
        let c = names.len();
        assert!(confusion.len() == c && confusion.iter().all(|r| r.len() == c));
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let support: u64 = confusion[k].iter().sum();
                let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    name: names[k].clone(),
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        Self {
            level,
            accuracy: ratio(correct, total),
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            confusion,
            per_class,
        }
    }

    pub fn from_predictions(level: Level, names: &[String], truth: &[usize], predicted: &[usize]) -> Self {
        assert_eq!(truth.len(), predicted.len());
        let c = names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(level, names, confusion)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} level ({} samples)", self.level, self.total())?;
        writeln!(
            f,
            "  accuracy {:.4}  precision {:.4}  recall {:.4}  macro-F1 {:.4}",
            self.accuracy, self.macro_precision, self.macro_recall, self.macro_f1
        )?;
        writeln!(f, "  {:<24} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for m in &self.per_class {
            writeln!(
                f,
                "  {:<24} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.name, m.precision, m.recall, m.f1, m.support
            )?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a [MetricsReport],
}

/// TOML document with one `[[report]]` table per level.
pub fn reports_to_toml(reports: &[MetricsReport]) -> String {
    toml::to_string(&ReportFile { report: reports }).expect("metrics serialize to TOML")
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.rows().into_iter().map(argmax).collect()
}

/// Anchor-view outputs and true labels for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub output: InferenceOutput,
    pub flow_truth: Vec<usize>,
    pub packet_truth: Vec<usize>,
}

impl Predictions {
    pub fn flow_predictions(&self) -> Vec<usize> {
        argmax_rows(self.output.flow_logits.view())
    }

    pub fn packet_predictions(&self) -> Vec<usize> {
        argmax_rows(self.output.packet_logits.view())
    }

    pub fn truth(&self, level: Level) -> &[usize] {
        match level {
            Level::Flow => &self.flow_truth,
            Level::Packet => &self.packet_truth,
        }
    }

    pub fn predicted(&self, level: Level) -> Vec<usize> {
        match level {
            Level::Flow => self.flow_predictions(),
            Level::Packet => self.packet_predictions(),
        }
    }

    pub fn embeddings(&self, level: Level) -> ArrayView2<'_, f64> {
        match level {
            Level::Flow => self.output.flow_embeddings.view(),
            Level::Packet => self.output.packet_embeddings.view(),
        }
    }
}

/// Runs the model over a split with no augmentation and no dropout.
pub fn predict(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<Predictions, EvalError> {
    if params.dims().classes != dataset.num_classes() {
        return Err(EvalError::ClassMismatch {
            model: params.dims().classes,
            dataset: dataset.num_classes(),
        });
    }
    let flows: Vec<&DatasetFlow> = dataset.flows.iter().filter(|f| f.split == split).collect();
    if flows.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let output = infer_flows(params, &flows, EVAL_CHUNK)?;
    let flow_truth = flows.iter().map(|f| f.label as usize).collect();
    let packet_truth = flows
        .iter()
        .flat_map(|f| std::iter::repeat(f.label as usize).take(f.graphs.len()))
        .collect();
    Ok(Predictions {
        output,
        flow_truth,
        packet_truth,
    })
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    levels: LevelSelection,
) -> Result<Vec<MetricsReport>, EvalError> {
    let preds = predict(params, dataset, split)?;
    Ok(levels
        .levels()
        .into_iter()
        .map(|level| {
            MetricsReport::from_predictions(level, &dataset.label_names, preds.truth(level), &preds.predicted(level))
        })
        .collect())
}

/// Writes one tab-separated row per sample in dataset order: the label
/// name, then the embedding (`f` for flows, `p` for packets). Returns the
/// number of rows.
pub fn export_embeddings(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    level: Level,
    out: &mut dyn Write,
) -> Result<usize, EvalError> {
    let preds = predict(params, dataset, split)?;
    let emb = preds.embeddings(level);
    for (row, &label) in emb.rows().into_iter().zip(preds.truth(level)) {
        let mut line = dataset.label_names[label].clone();
        for v in row {
            line.push('\t');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(emb.nrows())
}
