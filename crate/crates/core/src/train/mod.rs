//! One training run for both task levels.
//!
//! Each optimizer step averages the gradients of `grad_accumulation`
//! micro-batches of `batch_size` flows. Flows are reshuffled every epoch.
//! Augmentation and dropout draw from streams derived from
//! `(seed, epoch, micro-batch)`, which makes runs reproducible and lets a
//! saved [`TrainState`] continue bit for bit.

pub mod config;
pub mod objective;
pub mod optim;
pub mod state;

use std::io::Write;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataset::Dataset;
use crate::ingest::Split;
use crate::losses::{LossError, LossTerms};
use crate::model::{ModelError, ModelParams, ParamGrads};
use crate::rng::{derive_seed, stream};
use crate::ErrorClass;

pub use config::TrainConfig;
pub use objective::{evaluate_objective, AugmentedViews, FlowInput, ObjectiveOutput, ObjectiveSettings, TrainBatch};
pub use optim::{lr_at, Adam};
pub use state::{BestSnapshot, TrainState, STATE_MAGIC, STATE_VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {0:?} has no training flows")]
    MissingLabel(String),
    #[error("training split is empty")]
    EmptyTrainingSet,
    #[error("dataset was built with PMI window {dataset}, configuration asks for {config}")]
    WindowMismatch { dataset: usize, config: usize },
    #[error("model has {model} classes, dataset has {dataset}")]
    ClassMismatch { model: usize, dataset: usize },
    #[error("contrastive terms are enabled but the batch has no augmented views")]
    MissingViews,
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

impl TrainError {
    pub fn class(&self) -> ErrorClass {
        match self {
            TrainError::MissingLabel(_)
            | TrainError::EmptyTrainingSet
            | TrainError::WindowMismatch { .. }
            | TrainError::ClassMismatch { .. }
            | TrainError::Config(_) => ErrorClass::Data,
            _ => ErrorClass::Runtime,
        }
    }
}

/// One optimizer step as written to the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: u64,
    pub lr: f64,
    /// Means over the step's micro-batches.
    pub terms: LossTerms,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step\tlr\tpcls\tfcls\tpcl\tfcl\ttotal";

impl StepRecord {
    pub fn tsv(&self) -> String {
        let t = &self.terms;
        format!(
            "{}\t{:e}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.lr, t.packet_cls, t.flow_cls, t.packet_cl, t.flow_cl, self.total
        )
    }
}

pub struct Trainer<'d> {
    dataset: &'d Dataset,
    train_flows: Vec<usize>,
    settings: ObjectiveSettings,
    state: TrainState,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        let dims = config.model_dims(dataset.num_classes());
        let params = ModelParams::init(dims, derive_seed(config.seed, &[0x9a]))?;
        Self::resume(dataset, TrainState::fresh(config, params))
    }

    pub fn resume(dataset: &'d Dataset, state: TrainState) -> Result<Self, TrainError> {
        let cfg = &state.config;
        cfg.validate().map_err(TrainError::Config)?;
        if dataset.pmi_window as usize != cfg.pmi_window {
            return Err(TrainError::WindowMismatch {
                dataset: dataset.pmi_window as usize,
                config: cfg.pmi_window,
            });
        }
        if state.params.dims().classes != dataset.num_classes() {
            return Err(TrainError::ClassMismatch {
                model: state.params.dims().classes,
                dataset: dataset.num_classes(),
            });
        }
        let train_flows = dataset.indices(Split::Train);
        if train_flows.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        for (label, name) in dataset.label_names.iter().enumerate() {
            if !train_flows.iter().any(|&i| dataset.flows[i].label as usize == label) {
                return Err(TrainError::MissingLabel(name.clone()));
            }
        }
        let settings = ObjectiveSettings {
            weights: cfg.weights,
            switches: cfg.switches,
            temperature: cfg.temperature,
            label_smoothing: cfg.label_smoothing,
            unsupervised_cl: cfg.use_unsupervised_cl,
            gnn_dropout: cfg.gnn_dropout,
            lstm_dropout: cfg.lstm_dropout,
        };
        Ok(Self {
            dataset,
            train_flows,
            settings,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn micro_batches_per_epoch(&self) -> usize {
        self.train_flows.len().div_ceil(self.config().batch_size)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.micro_batches_per_epoch().div_ceil(self.config().grad_accumulation) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config().epochs as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch as usize >= self.config().epochs
    }

    fn epoch_order(&self, epoch: u32) -> Vec<usize> {
        let mut order = self.train_flows.clone();
        order.shuffle(&mut stream(self.config().seed, &[0x5f, epoch as u64]));
        order
    }

    fn micro_batch(&self, order: &[usize], epoch: u32, index: u32) -> TrainBatch<'d> {
        let cfg = self.config();
        let cap = cfg.flow_len_cap;
        let start = index as usize * cfg.batch_size;
        let end = (start + cfg.batch_size).min(order.len());
        let flows: Vec<FlowInput<'d>> = order[start..end]
            .iter()
            .map(|&i| {
                let f = &self.dataset.flows[i];
                FlowInput {
                    label: f.label as usize,
                    graphs: &f.graphs[..f.graphs.len().min(cap)],
                }
            })
            .collect();
        let path = [epoch as u64, index as u64];
        let views = self.settings.needs_views().then(|| {
            let mut rng = stream(derive_seed(cfg.seed, &[0xa6]), &path);
            AugmentedViews::sample(&flows, &cfg.augment, &mut rng)
        });
        TrainBatch {
            flows,
            views,
            dropout_seed: derive_seed(derive_seed(cfg.seed, &[0xd7]), &path),
        }
    }

    /// Runs one optimizer step; `None` once every epoch is done.
    pub fn step(&mut self) -> Result<Option<StepRecord>, TrainError> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch);
        let per_epoch = self.micro_batches_per_epoch() as u32;
        let step = self.state.step + 1;

        let mut grads = ParamGrads::zeros_like(&self.state.params);
        let mut terms = LossTerms::default();
        let mut total = 0.0;
        let mut count = 0usize;
        while count < self.config().grad_accumulation && self.state.micro_batch < per_epoch {
            let batch = self.micro_batch(&order, epoch, self.state.micro_batch);
            let out = evaluate_objective(&self.state.params, &batch, &self.settings, true).map_err(|e| match e {
                TrainError::Loss(LossError::NonFinite(term)) => TrainError::Divergence {
                    step,
                    reason: format!("{term} loss is NaN"),
                },
                TrainError::Model(ModelError::NonFiniteGradient { param }) => TrainError::Divergence {
                    step,
                    reason: format!("non-finite gradient for {param}"),
                },
                other => other,
            })?;
            grads.add_assign(out.grads.as_ref().expect("gradient requested"));
            terms.packet_cls += out.terms.packet_cls;
            terms.flow_cls += out.terms.flow_cls;
            terms.packet_cl += out.terms.packet_cl;
            terms.flow_cl += out.terms.flow_cl;
            total += out.total;
            count += 1;
            self.state.micro_batch += 1;
        }
        let n = count as f64;
        grads.scale(1.0 / n);
        let lr = lr_at(step, self.total_steps(), self.config());
        self.state.adam.update(&mut self.state.params, &grads, lr);
        if !self.state.params.is_finite() {
            return Err(TrainError::Divergence {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        self.state.step = step;
        let record = StepRecord {
            step,
            lr,
            terms: LossTerms {
                packet_cls: terms.packet_cls / n,
                flow_cls: terms.flow_cls / n,
                packet_cl: terms.packet_cl / n,
                flow_cl: terms.flow_cl / n,
            },
            total: total / n,
        };
        self.state.epoch_loss_sum += record.total;
        self.state.epoch_loss_steps += 1;
        if self.state.micro_batch >= per_epoch {
            let mean = self.state.epoch_loss_sum / self.state.epoch_loss_steps as f64;
            if self.state.best.map_or(true, |b| mean < b.loss) {
                self.state.best = Some(BestSnapshot { step, loss: mean });
            }
            self.state.epoch_loss_sum = 0.0;
            self.state.epoch_loss_steps = 0;
            self.state.epoch += 1;
            self.state.micro_batch = 0;
            log::info!("epoch {} done, mean loss {mean:.5}", self.state.epoch);
        }
        Ok(Some(record))
    }

    /// Trains to the end, writing one log line per step when `log` is set.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<(), TrainError> {
        if let Some(w) = log.as_deref_mut() {
            if self.state.step == 0 {
                writeln!(w, "{LOG_HEADER}")?;
            }
        }
        while let Some(record) = self.step()? {
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", record.tsv())?;
            }
        }
        Ok(())
    }
}

/// Trains a fresh model to completion.
pub fn train(dataset: &Dataset, config: TrainConfig) -> Result<TrainState, TrainError> {
    let mut trainer = Trainer::new(dataset, config)?;
    trainer.run(None)?;
    Ok(trainer.into_state())
}
