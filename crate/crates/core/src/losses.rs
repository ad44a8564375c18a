//! Classification, supervised-contrastive and entropy objectives.
//!
//! The two training losses are fused tape ops: the forward pass computes the
//! scalar and its gradient in closed form, and the tape only scales that
//! gradient during the reverse sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("degenerate contrastive batch: no anchor has a positive")]
    DegenerateBatch,
    #[error("negative probability {value} at row {row}")]
    NegativeProbability { row: usize, value: f64 },
    #[error("invalid loss input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the supervised-contrastive term (λ).
    pub contrastive_weight: f64,
    /// Softmax temperature of the contrastive term (τ).
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            contrastive_weight: 0.5,
            temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(LossError::Invalid(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.contrastive_weight >= 0.0) {
            return Err(LossError::Invalid(format!(
                "contrastive_weight must be >= 0, got {}",
                self.contrastive_weight
            )));
        }
        Ok(())
    }
}

/// Row metadata for a batch of (possibly augmented) views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewBatch {
    labels: Vec<usize>,
    image_ids: Vec<usize>,
}

impl ViewBatch {
    /// Rows sharing an image id must share a label.
    pub fn new(labels: Vec<usize>, image_ids: Vec<usize>) -> Result<Self> {
        if labels.len() != image_ids.len() {
            return Err(LossError::Invalid(format!(
                "{} labels for {} image ids",
                labels.len(),
                image_ids.len()
            )));
        }
        let mut seen = std::collections::HashMap::new();
        for (&id, &l) in image_ids.iter().zip(&labels) {
            if *seen.entry(id).or_insert(l) != l {
                return Err(LossError::Invalid(format!(
                    "views of image {id} carry different labels"
                )));
            }
        }
        Ok(Self { labels, image_ids })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_ids(&self) -> &[usize] {
        &self.image_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`, via log-sum-exp.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let [n, k] = dims2(tape.value(logits))?;
    if labels.len() != n {
        return Err(LossError::Invalid(format!("{n} rows but {} labels", labels.len())));
    }
    let x = tape.value(logits).data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(LossError::LabelOutOfRange {
                row: i,
                label,
                classes: k,
            });
        }
        let row = &x[i * k..(i + 1) * k];
        let (top, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        // ln Σ exp(v − m) = ln(1 + rest); ln_1p keeps tiny losses exact.
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top)
            .map(|(_, v)| (v - m).exp())
            .sum();
        let tail = rest.ln_1p();
        let lse = m + tail;
        loss += (m - row[label]) + tail;
        for j in 0..k {
            grad[i * k + j] = (row[j] - lse).exp() / n as f64;
        }
        grad[i * k + label] -= 1.0 / n as f64;
    }
    Ok(tape.scalar_fn(logits, loss / n as f64, grad)?)
}

/// Supervised contrastive loss over L2-normalized embeddings. Positives of
/// anchor `i` are all other rows with the same class label; anchors without
/// a positive are left out of the mean.
pub fn supcon_loss(tape: &mut Tape, embeddings: Var, batch: &ViewBatch, tau: f64) -> Result<Var> {
    let [m, f] = dims2(tape.value(embeddings))?;
    if batch.len() != m {
        return Err(LossError::Invalid(format!("{m} embeddings but {} labels", batch.len())));
    }
    if m < 2 {
        return Err(LossError::Invalid("contrastive loss needs at least two rows".into()));
    }
    if !(tau > 0.0) {
        return Err(LossError::Invalid(format!("temperature must be > 0, got {tau}")));
    }
    let z = tape.value(embeddings).data();
    let labels = batch.labels();

    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            sim[i * m + j] = z[i * f..(i + 1) * f]
                .iter()
                .zip(&z[j * f..(j + 1) * f])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / tau;
        }
    }

    let anchors: Vec<usize> = (0..m)
        .filter(|&i| (0..m).any(|p| p != i && labels[p] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(LossError::DegenerateBatch);
    }
    let v = anchors.len() as f64;

    let mut loss = 0.0;
    // d loss / d sim[i][a]
    let mut dsim = vec![0.0; m * m];
    for &i in &anchors {
        let row = &sim[i * m..(i + 1) * m];
        let mx = (0..m)
            .filter(|&a| a != i)
            .map(|a| row[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = mx
            + (0..m)
                .filter(|&a| a != i)
                .map(|a| (row[a] - mx).exp())
                .sum::<f64>()
                .ln();
        let positives: Vec<usize> = (0..m).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let np = positives.len() as f64;
        loss += positives.iter().map(|&p| lse - row[p]).sum::<f64>() / np;
        for a in (0..m).filter(|&a| a != i) {
            dsim[i * m + a] += (row[a] - lse).exp() / v;
        }
        for &p in &positives {
            dsim[i * m + p] -= 1.0 / (np * v);
        }
    }

    let mut grad = vec![0.0; m * f];
    for i in 0..m {
        for a in 0..m {
            let d = dsim[i * m + a];
            if d == 0.0 {
                continue;
            }
            for k in 0..f {
                grad[i * f + k] += d * z[a * f + k] / tau;
                grad[a * f + k] += d * z[i * f + k] / tau;
            }
        }
    }
    Ok(tape.scalar_fn(embeddings, loss / v, grad)?)
}

/// `cross_entropy + λ·supcon`. With λ = 0 the contrastive term is not
/// evaluated at all.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    embeddings: Var,
    batch: &ViewBatch,
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let ce = cross_entropy(tape, logits, batch.labels())?;
    if config.contrastive_weight == 0.0 {
        return Ok(ce);
    }
    let sc = supcon_loss(tape, embeddings, batch, config.temperature)?;
    let weighted = tape.scale(sc, config.contrastive_weight);
    Ok(tape.add(ce, weighted)?)
}

/// Mean Shannon entropy (natural log) of the rows of a probability matrix,
/// with `0·ln 0 = 0`.
pub fn prediction_entropy(probs: &Tensor) -> Result<f64> {
    let [n, k] = dims2(probs)?;
    let mut total = 0.0;
    for (row_i, row) in probs.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(LossError::Invalid(format!("row {row_i} sums to {s}, not 1")));
        }
        for &p in row {
            if p < 0.0 {
                return Err(LossError::NegativeProbability { row: row_i, value: p });
            }
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    Ok(total / n as f64)
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        &[a, b] => Ok([a, b]),
        s => Err(LossError::Invalid(format!("expected a 2-d tensor, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new(vec![rows.len(), k], rows.concat()).unwrap()
    }

    #[test]
    fn cross_entropy_of_even_logits_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[&[0.0, 0.0]]));
        let l = cross_entropy(&mut tape, x, &[0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_large_margin_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[&[10.0, -10.0]]));
        let l = cross_entropy(&mut tape, x, &[0]).unwrap();
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((tape.value(l).item() - expected).abs() < 1e-15);
        assert!((tape.value(l).item() - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.param(t2(&[&[0.0, 0.0]]));
        assert!(matches!(
            cross_entropy(&mut tape, x, &[2]),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn supcon_single_pair_is_zero() {
        let mut tape = Tape::new();
        let z = tape.param(t2(&[&[0.6, 0.8], &[0.6, 0.8]]));
        let b = ViewBatch::new(vec![1, 1], vec![0, 0]).unwrap();
        let l = supcon_loss(&mut tape, z, &b, 0.3).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn supcon_without_positives_is_degenerate() {
        let mut tape = Tape::new();
        let z = tape.param(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = ViewBatch::new(vec![0, 1], vec![0, 1]).unwrap();
        assert_eq!(
            supcon_loss(&mut tape, z, &b, 1.0).unwrap_err(),
            LossError::DegenerateBatch
        );
    }

    #[test]
    fn view_batch_rejects_mixed_labels_per_image() {
        assert!(ViewBatch::new(vec![0, 1], vec![5, 5]).is_err());
    }

    #[test]
    fn zero_weight_total_equals_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.param(t2(&[&[0.3, -0.2], &[1.0, 0.5]]));
        let z = tape.param(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = ViewBatch::new(vec![0, 1], vec![0, 1]).unwrap();
        let cfg = LossConfig {
            contrastive_weight: 0.0,
            temperature: 0.1,
        };
        // degenerate contrastive batch is fine because the term is skipped
        let total = total_loss(&mut tape, logits, z, &b, &cfg).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[0, 1]).unwrap();
        assert_eq!(tape.value(total).item(), tape.value(ce).item());
    }

    #[test]
    fn entropy_reference_values() {
        let h = |p: &[f64]| prediction_entropy(&t2(&[p])).unwrap();
        assert!((h(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(h(&[1.0, 0.0]), 0.0);
        assert!((h(&[0.9, 0.1]) - 0.325083).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_negative_probability() {
        assert!(matches!(
            prediction_entropy(&t2(&[&[1.5, -0.5]])),
            Err(LossError::NegativeProbability { .. })
        ));
    }
}
