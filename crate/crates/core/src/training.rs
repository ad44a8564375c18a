//! Per-fold training loop and entropy-based checkpoint selection.
//!
//! After every epoch the model is scored on the labelled source validation
//! set (accuracy) and on the unlabelled target validation set (mean
//! prediction entropy). [`select_checkpoint`] then keeps the epoch with the
//! lowest target entropy among those whose source accuracy clears the
//! threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Domain, FoldSplit};
use crate::gin::{augment_views, GinConfig, GinError};
use crate::losses::{prediction_entropy, total_loss, LossConfig, LossError, ViewBatch};
use crate::metrics::{report_from_scores, MetricsReport, StatsError};
use crate::network::{Checkpoint, Model, NetConfig, NetworkError, NormKind};
use crate::rng::RngStream;
use crate::tensor::{Sgd, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("fold data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gin(#[from] GinError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Original images per mini-batch (before view expansion).
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    /// GIN augmentation; `None` disables it.
    #[serde(default)]
    pub gin: Option<GinConfig>,
    pub norm_kind: NormKind,
    /// Feed the un-augmented image alongside its GIN views.
    pub include_original_view: bool,
    pub selection_threshold: f64,
    /// Experiment runs overwrite this with a per-fold seed.
    #[serde(default)]
    pub seed: u64,
    /// Label of the GIN random stream; other streams do not depend on it.
    #[serde(default = "default_gin_stream")]
    pub gin_stream: String,
}

fn default_gin_stream() -> String {
    "gin".into()
}

impl TrainConfig {
    /// Batch norm, no augmentation, cross-entropy only.
    pub fn baseline(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            loss: LossConfig {
                contrastive_weight: 0.0,
                ..LossConfig::default()
            },
            gin: None,
            norm_kind: NormKind::Batch,
            include_original_view: true,
            selection_threshold: 0.65,
            seed,
            gin_stream: default_gin_stream(),
        }
    }

    /// Instance norm, GIN views and the supervised contrastive term.
    pub fn proposed(seed: u64) -> Self {
        Self {
            loss: LossConfig::default(),
            gin: Some(GinConfig::default()),
            norm_kind: NormKind::Instance,
            ..Self::baseline(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.selection_threshold > 0.0 && self.selection_threshold < 1.0) {
            return bad(format!(
                "selection_threshold must lie in (0, 1), got {}",
                self.selection_threshold
            ));
        }
        self.loss.validate()?;
        if let Some(g) = &self.gin {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub source_val_accuracy: f64,
    pub target_val_entropy: f64,
    /// Index into [`FoldRun::checkpoints`].
    pub checkpoint: usize,
}

/// How often the augmentation and contrastive code paths ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathCounters {
    pub gin_views: usize,
    pub supcon_evaluations: usize,
    pub optimizer_steps: usize,
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub logs: Vec<EpochLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub counters: PathCounters,
    pub model: Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Position in the log list.
    pub index: usize,
    /// No epoch reached the threshold; the most accurate one was taken.
    pub fallback: bool,
}

/// Among epochs with `source_val_accuracy ≥ threshold`, the one with the
/// lowest target-validation entropy (earliest on ties). Falls back to the
/// most accurate epoch (earliest on ties) when none qualifies.
pub fn select_checkpoint(logs: &[EpochLog], threshold: f64) -> Option<Selection> {
    let qualified = logs
        .iter()
        .enumerate()
        .filter(|(_, l)| l.source_val_accuracy >= threshold)
        .fold(None::<(usize, f64)>, |best, (i, l)| match best {
            Some((_, e)) if e <= l.target_val_entropy => best,
            _ => Some((i, l.target_val_entropy)),
        });
    if let Some((index, _)) = qualified {
        return Some(Selection { index, fallback: false });
    }
    logs.iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, l)| match best {
            Some((_, a)) if a >= l.source_val_accuracy => best,
            _ => Some((i, l.source_val_accuracy)),
        })
        .map(|(index, _)| Selection { index, fallback: true })
}

const EVAL_CHUNK: usize = 8;

fn batch_tensor(cohort: &Cohort, subjects: &[u32], domain: Domain) -> Result<(Tensor, Vec<u8>)> {
    let mut parts = Vec::with_capacity(subjects.len());
    let mut labels = Vec::with_capacity(subjects.len());
    for &s in subjects {
        let r = cohort
            .get(s, domain)
            .ok_or_else(|| TrainError::Data(format!("no {} record for subject {s}", domain.as_str())))?;
        parts.push(r.volume.to_tensor());
        labels.push(r.label);
    }
    Ok((Tensor::stack(&parts)?, labels))
}

/// Class-1 probabilities for `subjects` in inference mode, evaluated in
/// chunks of `chunk` volumes.
pub fn predict_scores(
    model: &Model,
    cohort: &Cohort,
    subjects: &[u32],
    domain: Domain,
    chunk: usize,
) -> Result<(Vec<f64>, Vec<u8>, Vec<f64>)> {
    let mut scores = Vec::with_capacity(subjects.len());
    let mut labels = Vec::with_capacity(subjects.len());
    let mut probs_all = Vec::with_capacity(subjects.len() * 2);
    for ids in subjects.chunks(chunk.max(1)) {
        let (x, l) = batch_tensor(cohort, ids, domain)?;
        let probs = model.predict_proba(&x)?;
        let k = probs.shape()[1];
        scores.extend(probs.data().chunks(k).map(|r| r[1]));
        probs_all.extend_from_slice(probs.data());
        labels.extend(l);
    }
    Ok((scores, labels, probs_all))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub subjects: Vec<u32>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub report: MetricsReport,
}

/// Inference-mode evaluation without augmentation. A subject is predicted
/// as a case when its class-1 probability exceeds 0.5.
pub fn evaluate(model: &Model, cohort: &Cohort, subjects: &[u32], domain: Domain) -> Result<Evaluation> {
    let (scores, labels, _) = predict_scores(model, cohort, subjects, domain, EVAL_CHUNK)?;
    let report = report_from_scores(&scores, &labels)?;
    Ok(Evaluation {
        subjects: subjects.to_vec(),
        scores,
        labels,
        report,
    })
}

fn source_val_accuracy(model: &Model, cohort: &Cohort, subjects: &[u32]) -> Result<f64> {
    let (scores, labels, _) = predict_scores(model, cohort, subjects, Domain::Source, EVAL_CHUNK)?;
    let correct = scores
        .iter()
        .zip(&labels)
        .filter(|(&s, &l)| u8::from(s > 0.5) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn target_val_entropy(model: &Model, cohort: &Cohort, subjects: &[u32], k: usize) -> Result<f64> {
    let (_, _, probs) = predict_scores(model, cohort, subjects, Domain::Target, EVAL_CHUNK)?;
    let t = Tensor::new(vec![subjects.len(), k], probs)?;
    Ok(prediction_entropy(&t)?)
}

/// One classifier mini-batch: every image followed by its GIN views.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub input: Tensor,
    pub batch: ViewBatch,
    pub gin_views: usize,
}

/// Expands `subjects` (source domain) into the rows the classifier sees in
/// `epoch`: the original (when kept) and then the views of each image, all
/// sharing its label and image id. Views come from the stream
/// `<gin_stream>/epoch<e>/image<subject>` under the training seed.
pub fn build_batch(cohort: &Cohort, subjects: &[u32], train: &TrainConfig, epoch: usize) -> Result<TrainBatch> {
    let gin_root = RngStream::new(train.seed, train.gin_stream.clone());
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut image_ids = Vec::new();
    let mut gin_views = 0;
    for &s in subjects {
        let rec = cohort
            .get(s, Domain::Source)
            .ok_or_else(|| TrainError::Data(format!("no source record for subject {s}")))?;
        let x = rec.volume.to_tensor();
        let mut push = |t: Tensor| {
            rows.push(t);
            labels.push(rec.label as usize);
            image_ids.push(s as usize);
        };
        match &train.gin {
            Some(cfg) => {
                let views = augment_views(&x, &gin_root.derive(format!("epoch{epoch}/image{s}")), cfg)?;
                gin_views += views.len();
                if train.include_original_view {
                    push(x);
                }
                for v in views {
                    push(v.volume);
                }
            }
            None => push(x),
        }
    }
    Ok(TrainBatch {
        input: Tensor::stack(&rows)?,
        batch: ViewBatch::new(labels, image_ids)?,
        gin_views,
    })
}

/// Trains one model on the fold's source-train subjects and logs the two
/// selection signals after every epoch. Target-domain labels are never read.
pub fn train_fold(fold: &FoldSplit, cohort: &Cohort, net: &NetConfig, train: &TrainConfig) -> Result<FoldRun> {
    train.validate()?;
    for (role, ids) in [
        ("source_train", &fold.source_train),
        ("source_val", &fold.source_val),
        ("target_val", &fold.target_val),
    ] {
        if ids.is_empty() {
            return Err(TrainError::Data(format!("fold {}: {role} is empty", fold.fold_index)));
        }
    }
    let net = NetConfig {
        norm_kind: train.norm_kind,
        ..net.clone()
    };
    let mut model = Model::build(&net, &mut RngStream::new(train.seed, "init"))?;
    let mut sgd = Sgd::new(train.lr, train.momentum)?;
    let shuffle_root = RngStream::new(train.seed, "shuffle");

    let mut counters = PathCounters::default();
    let mut logs = Vec::with_capacity(train.epochs);
    let mut checkpoints = Vec::with_capacity(train.epochs);
    let mut order = fold.source_train.clone();

    for epoch in 0..train.epochs {
        order.clone_from(&fold.source_train);
        shuffle_root.derive(format!("epoch{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for ids in order.chunks(train.batch_size) {
            let TrainBatch {
                input,
                batch,
                gin_views,
            } = build_batch(cohort, ids, train, epoch)?;
            counters.gin_views += gin_views;
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let out = model.forward(&mut tape, x, true)?;
            let loss = total_loss(&mut tape, out.logits, out.embedding, &batch, &train.loss)?;
            if train.loss.contrastive_weight > 0.0 {
                counters.supcon_evaluations += 1;
            }
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            let mut grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = out.params.iter().map(|&p| grads.take(p)).collect();
            sgd.step(model.params_mut(), &g)?;
            model.update_running_stats(&out.batch_stats);
            counters.optimizer_steps += 1;
            loss_sum += value;
            batches += 1;
        }
        let acc = source_val_accuracy(&model, cohort, &fold.source_val)?;
        let ent = target_val_entropy(&model, cohort, &fold.target_val, net.num_classes)?;
        if !ent.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        checkpoints.push(model.snapshot());
        logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            source_val_accuracy: acc,
            target_val_entropy: ent,
            checkpoint: checkpoints.len() - 1,
        });
    }
    Ok(FoldRun {
        logs,
        checkpoints,
        counters,
        model,
    })
}
