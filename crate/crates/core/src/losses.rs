//! Training losses: supervised and unsupervised contrastive losses over
//! paired views, label-smoothed cross-entropy, and the weighted total.
//!
//! The contrastive losses return the plain sum over all `2N` anchors; the
//! trainer divides by `2N` itself.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("embedding {index} is not unit-norm (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },
    #[error("contrastive batch needs an even number of at least 4 embeddings, got {0}")]
    BatchSize(usize),
    #[error("{embeddings} embeddings but {labels} labels")]
    LabelCount { embeddings: usize, labels: usize },
    #[error("views {0} and {1} of the same sample carry different labels")]
    PairLabel(usize, usize),
    #[error("label smoothing must lie in [0, 1), got {0}")]
    Smoothing(f64),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
}

const NORM_TOLERANCE: f64 = 1e-6;

/// `2N` unit-norm embeddings: rows `0..N` are one view, rows `N..2N` the
/// other, with row `i` and row `i + N` coming from the same sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, temperature: f64) -> Result<Self, LossError> {
        if !(temperature > 0.0) {
            return Err(LossError::Temperature(temperature));
        }
        let rows = embeddings.nrows();
        if rows < 4 || rows % 2 != 0 {
            return Err(LossError::BatchSize(rows));
        }
        if labels.len() != rows {
            return Err(LossError::LabelCount {
                embeddings: rows,
                labels: labels.len(),
            });
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(LossError::ZeroNorm(i));
            }
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(LossError::NotNormalized { index: i, norm });
            }
        }
        let n = rows / 2;
        for i in 0..n {
            if labels[i] != labels[i + n] {
                return Err(LossError::PairLabel(i, i + n));
            }
        }
        Ok(Self {
            embeddings,
            labels,
            temperature,
        })
    }

    /// Normalizes every row first; fails on zero rows.
    pub fn normalized(mut embeddings: Array2<f64>, labels: Vec<usize>, temperature: f64) -> Result<Self, LossError> {
        for (i, mut row) in embeddings.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 {
                return Err(LossError::ZeroNorm(i));
            }
            row /= norm;
        }
        Self::new(embeddings, labels, temperature)
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of the other view of the same sample.
    pub fn partner(&self, i: usize) -> usize {
        let n = self.len() / 2;
        if i < n {
            i + n
        } else {
            i - n
        }
    }

    fn supervised_positives(&self) -> Vec<Vec<usize>> {
        (0..self.len())
            .map(|i| {
                (0..self.len())
                    .filter(|&m| m != i && self.labels[m] == self.labels[i])
                    .collect()
            })
            .collect()
    }

    fn pair_positives(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| vec![self.partner(i)]).collect()
    }
}

/// Value and gradient w.r.t. the embeddings of the contrastive sum with the
/// given positive sets.
fn contrastive(batch: &ContrastiveBatch, positives: &[Vec<usize>], want_grad: bool) -> (f64, Option<Array2<f64>>) {
    let z = &batch.embeddings;
    let tau = batch.temperature;
    let n = z.nrows();
    let sim = z.dot(&z.t()) / tau;

    let mut loss = 0.0;
    let mut coeff = want_grad.then(|| Array2::<f64>::zeros((n, n)));
    for i in 0..n {
        let row = sim.row(i);
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let lse = max + denom.ln();

        let pos = &positives[i];
        if pos.is_empty() {
            continue;
        }
        let inv = 1.0 / pos.len() as f64;
        let sum: f64 = pos.iter().map(|&m| row[m] - lse).sum();
        loss += -inv * sum;

        if let Some(a) = coeff.as_mut() {
            for k in 0..n {
                if k != i {
                    a[[i, k]] = (row[k] - lse).exp();
                }
            }
            for &m in pos {
                a[[i, m]] -= inv;
            }
        }
    }

    let grad = coeff.map(|a| {
        let a = a / tau;
        a.dot(z) + a.t().dot(z)
    });
    (loss, grad)
}

/// Supervised contrastive loss: every other embedding with the same label is
/// a positive.
pub fn supcon_loss(batch: &ContrastiveBatch) -> f64 {
    contrastive(batch, &batch.supervised_positives(), false).0
}

/// Contrastive loss whose only positive is the other view of the sample.
pub fn unsup_con_loss(batch: &ContrastiveBatch) -> f64 {
    contrastive(batch, &batch.pair_positives(), false).0
}

/// Loss value and its gradient w.r.t. the (normalized) embeddings.
pub fn contrastive_loss_with_grad(batch: &ContrastiveBatch, supervised: bool) -> (f64, Array2<f64>) {
    let pos = if supervised {
        batch.supervised_positives()
    } else {
        batch.pair_positives()
    };
    let (loss, grad) = contrastive(batch, &pos, true);
    (loss, grad.expect("gradient requested"))
}

/// Cross-entropy against the smoothed target `(1 - eps) * onehot + eps / C`.
pub fn cross_entropy(logits: &[f64], label: usize, smoothing: f64) -> Result<f64, LossError> {
    cross_entropy_with_grad(logits, label, smoothing).map(|(l, _)| l)
}

pub fn cross_entropy_with_grad(logits: &[f64], label: usize, smoothing: f64) -> Result<(f64, Vec<f64>), LossError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(LossError::Smoothing(smoothing));
    }
    let classes = logits.len();
    if label >= classes {
        return Err(LossError::Label { label, classes });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let off = smoothing / classes as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(classes);
    for (c, &l) in logits.iter().enumerate() {
        let q = if c == label { 1.0 - smoothing + off } else { off };
        let log_p = l - lse;
        if q > 0.0 {
            loss -= q * log_p;
        }
        grad.push(log_p.exp() - q);
    }
    Ok((loss, grad))
}

/// Weights of the contrastive terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

/// Which terms take part in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub packet_cls: bool,
    pub flow_cls: bool,
    pub packet_cl: bool,
    pub flow_cl: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            packet_cls: true,
            flow_cls: true,
            packet_cl: true,
            flow_cl: true,
        }
    }
}

/// The four loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub packet_cls: f64,
    pub flow_cls: f64,
    pub packet_cl: f64,
    pub flow_cl: f64,
}

/// `pcls + fcls + alpha * pcl + beta * fcl`, with disabled terms counted as 0.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, on: &LossSwitches) -> Result<f64, LossError> {
    let parts = [
        ("packet_cls", terms.packet_cls, 1.0, on.packet_cls),
        ("flow_cls", terms.flow_cls, 1.0, on.flow_cls),
        ("packet_cl", terms.packet_cl, weights.alpha, on.packet_cl),
        ("flow_cl", terms.flow_cl, weights.beta, on.flow_cl),
    ];
    let mut total = 0.0;
    for (name, value, weight, enabled) in parts {
        if !enabled {
            continue;
        }
        if !value.is_finite() {
            return Err(LossError::NonFinite(name));
        }
        total += weight * value;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(v: &[[f64; 2]]) -> Array2<f64> {
        let mut a = Array2::zeros((v.len(), 2));
        for (i, r) in v.iter().enumerate() {
            let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
            a[[i, 0]] = r[0] / n;
            a[[i, 1]] = r[1] / n;
        }
        a
    }

    #[test]
    fn identical_embeddings_give_closed_form() {
        let z = Array2::from_elem((6, 3), 1.0 / 3f64.sqrt());
        let b = ContrastiveBatch::new(z, vec![0, 1, 1, 0, 1, 1], 0.07).unwrap();
        let expected = 6.0 * 5f64.ln();
        assert!((supcon_loss(&b) - expected).abs() < 1e-9);
        assert!((unsup_con_loss(&b) - expected).abs() < 1e-9);
    }

    #[test]
    fn unique_labels_reduce_exactly() {
        let z = unit(&[[1.0, 0.2], [0.3, 1.0], [0.9, -0.4], [-0.2, 1.0]]);
        let b = ContrastiveBatch::new(z, vec![0, 1, 0, 1], 0.07).unwrap();
        assert_eq!(supcon_loss(&b), unsup_con_loss(&b));
    }

    #[test]
    fn colinear_positive_beats_orthogonal() {
        let colinear = unit(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        let orthogonal = unit(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]);
        let a = ContrastiveBatch::new(colinear, vec![0, 1, 0, 1], 0.5).unwrap();
        let b = ContrastiveBatch::new(orthogonal, vec![0, 1, 0, 1], 0.5).unwrap();
        assert!(unsup_con_loss(&a) < unsup_con_loss(&b));
    }

    #[test]
    fn batch_validation() {
        let z = unit(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(
            ContrastiveBatch::new(z.clone(), vec![0, 1, 0, 1], 0.0),
            Err(LossError::Temperature(0.0))
        );
        assert_eq!(
            ContrastiveBatch::new(z.clone(), vec![0, 1, 1, 1], 0.1),
            Err(LossError::PairLabel(0, 2))
        );
        assert!(matches!(
            ContrastiveBatch::new(z.clone() * 2.0, vec![0, 1, 0, 1], 0.1),
            Err(LossError::NotNormalized { index: 0, .. })
        ));
        let mut zero = z.clone();
        zero.row_mut(3).fill(0.0);
        assert_eq!(
            ContrastiveBatch::new(zero, vec![0, 1, 0, 1], 0.1),
            Err(LossError::ZeroNorm(3))
        );
        assert_eq!(
            ContrastiveBatch::new(z.slice(ndarray::s![..2, ..]).to_owned(), vec![0, 0], 0.1),
            Err(LossError::BatchSize(2))
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = array![[0.3, -1.2, 0.5], [1.0, 0.1, -0.3], [0.2, 0.9, 0.8], [-0.7, 0.4, 0.1], [0.5, 0.5, -0.5], [0.1, -0.2, 1.0]];
        let labels = vec![0, 1, 0, 0, 1, 0];
        for supervised in [true, false] {
            // Differentiate through row normalization by hand-composing: the
            // loss gradient is w.r.t. the normalized rows, so perturb those.
            let b = ContrastiveBatch::normalized(z.clone(), labels.clone(), 0.3).unwrap();
            let (_, g) = contrastive_loss_with_grad(&b, supervised);
            let base = b.embeddings().to_owned();
            let h = 1e-6;
            for i in 0..base.nrows() {
                for j in 0..base.ncols() {
                    let eval = |delta: f64| {
                        let mut e = base.clone();
                        e[[i, j]] += delta;
                        let raw = ContrastiveBatch {
                            embeddings: e,
                            labels: labels.clone(),
                            temperature: 0.3,
                        };
                        contrastive_loss_with_grad(&raw, supervised).0
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!((fd - g[[i, j]]).abs() < 1e-6, "{supervised} {i} {j}: {fd} vs {}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.3, 0.3, 0.3], 1, 0.0).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1e3, 0.0], 0, 0.0).unwrap() < 1e-12);
        // C = 3, eps = 0.01: q = [0.01/3, 0.99 + 0.01/3, 0.01/3]
        let logits = [1.0, 2.0, 0.5];
        let lse = (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        let off = 0.01 / 3.0;
        let expected = -(off * (1.0 - lse) + (0.99 + off) * (2.0 - lse) + off * (0.5 - lse));
        assert!((cross_entropy(&logits, 1, 0.01).unwrap() - expected).abs() < 1e-12);
        assert_eq!(cross_entropy(&logits, 1, 1.0), Err(LossError::Smoothing(1.0)));
        assert_eq!(
            cross_entropy(&logits, 3, 0.0),
            Err(LossError::Label { label: 3, classes: 3 })
        );
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (_, g) = cross_entropy_with_grad(&[0.1, -2.0, 3.0, 0.4], 2, 0.1).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[2] < 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let t = LossTerms {
            packet_cls: 1.0,
            flow_cls: 2.0,
            packet_cl: 3.0,
            flow_cl: 4.0,
        };
        let on = LossSwitches::default();
        let w = LossWeights { alpha: 1.0, beta: 0.5 };
        assert_eq!(total_loss(&t, &w, &on).unwrap(), 8.0);
        let w0 = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(&t, &w0, &on).unwrap(), 3.0);
        let off = LossSwitches {
            flow_cl: false,
            ..on
        };
        assert_eq!(total_loss(&t, &w, &off).unwrap(), 6.0);
        let nan = LossTerms {
            packet_cl: f64::NAN,
            ..t
        };
        assert_eq!(total_loss(&nan, &w, &on), Err(LossError::NonFinite("packet_cl")));
    }

    #[test]
    fn alpha_derivative_is_the_packet_term() {
        let t = LossTerms {
            packet_cls: 0.7,
            flow_cls: 1.3,
            packet_cl: 2.9,
            flow_cl: 0.4,
        };
        let on = LossSwitches::default();
        let at = |a: f64| total_loss(&t, &LossWeights { alpha: a, beta: 0.5 }, &on).unwrap();
        let h = 1e-3;
        assert!(((at(0.5 + h) - at(0.5 - h)) / (2.0 * h) - t.packet_cl).abs() < 1e-9);
    }
}
