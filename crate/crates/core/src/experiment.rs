//! Experiment orchestration behind the command-line tool: cohort
//! generation, cross-validated training of both configurations, summary
//! tables and the paired comparison.
//!
//! Results tree written by [`cmd_run`]:
//!
//! ```text
//! <output_dir>/
//!   cohort/manifest.csv, cohort/volumes/*.dgv      (cmd_generate)
//!   folds.csv, folds.sha256
//!   <model>/summary.csv
//!   <model>/fold<k>/epochs.csv
//!   <model>/fold<k>/checkpoints/epoch<e>.ckpt
//!   <model>/fold<k>/selected.ckpt, selection.csv
//!   <model>/fold<k>/metrics.csv
//!   <model>/fold<k>/confusion_<split>.{txt,csv}, scores_<split>.csv
//!   comparison.csv, comparison_metrics.csv       (both models)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{
    generate_cohort, load_volume, make_folds, read_manifest, save_volume, write_cohort, write_pgm_center_slice, Cohort,
    CohortError, CohortSpec, Domain, FoldSplit, Volume, VolumeIoError,
};
use crate::gin::{augment_views, GinConfig, GinError};
use crate::metrics::{mean_std, paired_t_one_sided, MetricsReport, PairedTTest, StatsError};
use crate::network::{write_checkpoint, BlockSpec, NetConfig, NetworkError, NormKind};
use crate::rng::RngStream;
use crate::training::{
    evaluate, select_checkpoint, train_fold, EpochLog, Evaluation, Selection, TrainConfig, TrainError,
};

pub const SCHEMA_VERSION: u32 = 1;
/// Fallback for `output_dir` when the config file leaves it out.
pub const OUTPUT_DIR_ENV: &str = "KNEEDG_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "kneedg-out";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{model} fold {fold} diverged at epoch {epoch}")]
    Divergence {
        model: ModelKind,
        fold: usize,
        epoch: usize,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ExperimentError {
    /// Process exit code: 2 config, 3 data or I/O, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Divergence { .. } => 4,
        }
    }
}

impl From<CohortError> for ExperimentError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Config(m) => Self::Config(format!("cohort: {m}")),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<VolumeIoError> for ExperimentError {
    fn from(e: VolumeIoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<StatsError> for ExperimentError {
    fn from(e: StatsError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<GinError> for ExperimentError {
    fn from(e: GinError) -> Self {
        Self::Config(format!("gin: {e}"))
    }
}

impl From<NetworkError> for ExperimentError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Config(m) => Self::Config(format!("net: {m}")),
            other => Self::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Data(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Baseline,
    Proposed,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Baseline, ModelKind::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Proposed => "proposed",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The `--model` choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Both,
    Only(ModelKind),
}

impl ModelChoice {
    pub fn kinds(self) -> Vec<ModelKind> {
        match self {
            Self::Both => ModelKind::ALL.to_vec(),
            Self::Only(k) => vec![k],
        }
    }
}

impl FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "both" => Ok(Self::Both),
            "baseline" => Ok(Self::Only(ModelKind::Baseline)),
            "proposed" => Ok(Self::Only(ModelKind::Proposed)),
            _ => Err(format!("unknown model {s:?} (expected both, baseline or proposed)")),
        }
    }
}

/// Evaluation splits in table order.
pub const SPLITS: [(&str, Domain); 4] = [
    ("source_val", Domain::Source),
    ("target_val", Domain::Target),
    ("source_test", Domain::Source),
    ("target_test", Domain::Target),
];

fn split_subjects<'a>(fold: &'a FoldSplit, split: &str) -> &'a [u32] {
    match split {
        "source_val" => &fold.source_val,
        "target_val" => &fold.target_val,
        "source_test" => &fold.source_test,
        "target_test" => &fold.target_test,
        _ => unreachable!("unknown split {split}"),
    }
}

/// TOML experiment description. See `configs/synthetic.toml` for a
/// complete example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub n_folds: usize,
    /// Source-validation subjects per fold (whole pairs).
    pub source_val_size: usize,
    /// Falls back to `$KNEEDG_OUTPUT_DIR`, then `./kneedg-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub cohort: CohortSpec,
    pub net: NetConfig,
    pub baseline: TrainConfig,
    pub proposed: TrainConfig,
}

impl ExperimentConfig {
    /// Seven folds over the default synthetic cohort with a network sized
    /// for a single CPU core.
    pub fn synthetic(master_seed: u64) -> Self {
        let cohort = CohortSpec {
            seed: master_seed,
            ..CohortSpec::default()
        };
        let [s, h, w] = cohort.volume_dims;
        let net = NetConfig {
            input_shape: [1, s, h, w],
            stem_channels: 4,
            stem_stride: 2,
            n_residual_blocks: 2,
            channel_schedule: vec![
                BlockSpec { channels: 8, stride: 1 },
                BlockSpec {
                    channels: 16,
                    stride: 2,
                },
            ],
            ..NetConfig::default()
        };
        let epochs = 25;
        Self {
            schema_version: SCHEMA_VERSION,
            master_seed,
            n_folds: 7,
            source_val_size: 20,
            output_dir: None,
            cohort,
            net,
            baseline: TrainConfig {
                epochs,
                ..TrainConfig::baseline(0)
            },
            proposed: TrainConfig {
                epochs,
                ..TrainConfig::proposed(0)
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.n_folds < 3 {
            return bad(format!("n_folds must be >= 3, got {}", self.n_folds));
        }
        if self.source_val_size < 2 {
            return bad(format!("source_val_size must be >= 2, got {}", self.source_val_size));
        }
        self.cohort.validate()?;
        self.net.validate()?;
        let [c, s, h, w] = self.net.input_shape;
        if c != 1 || [s, h, w] != self.cohort.volume_dims {
            return bad(format!(
                "net.input_shape {:?} does not match cohort.volume_dims {:?} with one channel",
                self.net.input_shape, self.cohort.volume_dims
            ));
        }
        for (name, t) in [("baseline", &self.baseline), ("proposed", &self.proposed)] {
            t.validate()
                .map_err(|e| ExperimentError::Config(format!("{name}: {e}")))?;
        }
        let b = &self.baseline;
        if b.norm_kind != NormKind::Batch || b.gin.is_some() || b.loss.contrastive_weight != 0.0 {
            return bad("baseline must use batch norm, no gin section and contrastive_weight = 0".into());
        }
        let p = &self.proposed;
        if p.norm_kind != NormKind::Instance || p.gin.is_none() || !(p.loss.contrastive_weight > 0.0) {
            return bad("proposed must use instance norm, a gin section and contrastive_weight > 0".into());
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.output_dir().join("cohort")
    }

    fn train_config(&self, model: ModelKind) -> &TrainConfig {
        match model {
            ModelKind::Baseline => &self.baseline,
            ModelKind::Proposed => &self.proposed,
        }
    }

    /// Training seed of fold `f`, shared by both models.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        RngStream::new(self.master_seed, format!("fold{fold}/train")).next_u64()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub manifest: PathBuf,
    pub rows: usize,
    /// SHA-256 over the manifest and every volume file, in manifest order.
    pub digest: String,
}

/// Digest of a cohort directory as written by [`cmd_generate`].
pub fn cohort_digest(manifest: &Path) -> Result<String> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = fs::read(manifest).map_err(io_err(manifest))?;
    let mut h = Sha256::new();
    h.update(&text);
    let mut rdr = csv::Reader::from_reader(text.as_slice());
    for row in rdr.records() {
        let row = row.map_err(csv_err(manifest))?;
        let rel = row
            .get(4)
            .ok_or_else(|| ExperimentError::Data(format!("{}: short manifest row", manifest.display())))?;
        let path = base.join(rel);
        h.update(fs::read(&path).map_err(io_err(&path))?);
    }
    Ok(hex(&h.finalize()))
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateOutcome> {
    cfg.validate()?;
    let records = generate_cohort(&cfg.cohort)?;
    let manifest = write_cohort(&cfg.cohort_dir(), &records)?;
    Ok(GenerateOutcome {
        digest: cohort_digest(&manifest)?,
        rows: records.len(),
        manifest,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub models: ModelChoice,
    /// `None` runs every fold.
    pub folds: Option<Vec<usize>>,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            models: ModelChoice::Both,
            folds: None,
            jobs: 1,
        }
    }
}

/// One trained (model, fold) job.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub model: ModelKind,
    pub fold: usize,
    pub selection: Selection,
    pub logs: Vec<EpochLog>,
    /// One evaluation per entry of [`SPLITS`].
    pub evaluations: Vec<Evaluation>,
}

impl FoldResult {
    pub fn report(&self, split: &str) -> &MetricsReport {
        let i = SPLITS.iter().position(|(s, _)| *s == split).expect("known split");
        &self.evaluations[i].report
    }

    /// Share of subjects predicted as class 0 on `split`.
    pub fn class0_rate(&self, split: &str) -> f64 {
        let cm = &self.report(split).confusion;
        (cm.tn + cm.fn_) as f64 / cm.total() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SplitComparison {
    pub split: &'static str,
    pub baseline: (f64, f64),
    pub proposed: (f64, f64),
    /// `None` with fewer than two paired folds.
    pub test: Option<PairedTTest>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub fold_digest: String,
    pub results: Vec<FoldResult>,
    pub failures: Vec<ExperimentError>,
    /// Present when both models ran.
    pub comparison: Option<Vec<SplitComparison>>,
}

impl RunOutcome {
    pub fn results_for(&self, model: ModelKind) -> impl Iterator<Item = &FoldResult> {
        self.results.iter().filter(move |r| r.model == model)
    }
}

fn load_cohort(cfg: &ExperimentConfig) -> Result<Cohort> {
    let manifest = cfg.cohort_dir().join("manifest.csv");
    if !manifest.is_file() {
        return Err(ExperimentError::Data(format!(
            "no cohort at {} (run `generate` first)",
            manifest.display()
        )));
    }
    let cohort = Cohort::new(read_manifest(&manifest)?)?;
    let [_, s, h, w] = cfg.net.input_shape;
    match cohort.volume_dims() {
        Some(d) if d == [s, h, w] => Ok(cohort),
        d => Err(ExperimentError::Data(format!(
            "cohort volumes are {d:?}, net.input_shape expects {:?}",
            [s, h, w]
        ))),
    }
}

fn folds_csv(folds: &[FoldSplit]) -> String {
    let mut out = String::from("fold,role,subject_id\n");
    for f in folds {
        for (role, ids) in f.roles() {
            for id in ids {
                let _ = writeln!(out, "{},{role},{id}", f.fold_index);
            }
        }
    }
    out
}

/// Writes the fold file, or checks an existing one against it so that
/// separate baseline and proposed runs consume identical folds.
fn pin_folds(out: &Path, folds: &[FoldSplit]) -> Result<String> {
    let text = folds_csv(folds);
    let digest = hex(&Sha256::digest(text.as_bytes()));
    let path = out.join("folds.csv");
    if path.exists() {
        let existing = fs::read_to_string(&path).map_err(io_err(&path))?;
        if existing != text {
            return Err(ExperimentError::Data(format!(
                "{} was written for different folds (digest {} vs {digest}); use a fresh output_dir",
                path.display(),
                hex(&Sha256::digest(existing.as_bytes()))
            )));
        }
    } else {
        fs::write(&path, &text).map_err(io_err(&path))?;
    }
    let dpath = out.join("folds.sha256");
    fs::write(&dpath, format!("{digest}  folds.csv\n")).map_err(io_err(&dpath))?;
    Ok(digest)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn run_job(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    fold: &FoldSplit,
    model: ModelKind,
    out: &Path,
) -> Result<FoldResult> {
    let f = fold.fold_index;
    let train = TrainConfig {
        seed: cfg.fold_seed(f),
        ..cfg.train_config(model).clone()
    };
    let run = train_fold(fold, cohort, &cfg.net, &train).map_err(|e| match e {
        TrainError::Divergence { epoch } => ExperimentError::Divergence { model, fold: f, epoch },
        TrainError::Config(m) => ExperimentError::Config(format!("{model}: {m}")),
        other => ExperimentError::Data(format!("{model} fold {f}: {other}")),
    })?;

    let dir = out.join(model.as_str()).join(format!("fold{f}"));
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let net = run.model.config().clone();
    let encode = |i: usize| {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, &run.checkpoints[i]).expect("in-memory write");
        buf
    };

    let mut epochs = String::from("epoch,train_loss,src_val_acc,tgt_val_entropy,checkpoint_path\n");
    for log in &run.logs {
        let rel = format!("checkpoints/epoch{:03}.ckpt", log.epoch);
        write_file(&dir.join(&rel), encode(log.checkpoint))?;
        let _ = writeln!(
            epochs,
            "{},{},{},{},{rel}",
            log.epoch,
            fmt_f(log.train_loss),
            fmt_f(log.source_val_accuracy),
            fmt_f(log.target_val_entropy)
        );
    }
    write_file(&dir.join("epochs.csv"), epochs)?;

    let selection = select_checkpoint(&run.logs, train.selection_threshold)
        .ok_or_else(|| ExperimentError::Data(format!("{model} fold {f}: no epochs logged")))?;
    let chosen = &run.logs[selection.index];
    write_file(&dir.join("selected.ckpt"), encode(chosen.checkpoint))?;
    write_file(
        &dir.join("selection.csv"),
        format!(
            "epoch,fallback,threshold\n{},{},{}\n",
            chosen.epoch, selection.fallback, train.selection_threshold
        ),
    )?;

    let mut model_at = run.model;
    model_at.restore(&run.checkpoints[chosen.checkpoint])?;
    let mut metrics = String::from("fold,split,accuracy,precision,recall,f1,roc_auc,tn,fp,fn,tp\n");
    let mut evaluations = Vec::with_capacity(SPLITS.len());
    for (split, domain) in SPLITS {
        let ev = evaluate(&model_at, cohort, split_subjects(fold, split), domain)
            .map_err(|e| ExperimentError::Data(format!("{model} fold {f} {split}: {e}")))?;
        let r = &ev.report;
        let c = &r.confusion;
        let _ = writeln!(
            metrics,
            "{f},{split},{},{},{},{},{},{},{},{},{}",
            fmt_f(r.accuracy),
            fmt_f(r.precision),
            fmt_f(r.recall),
            fmt_f(r.f1),
            fmt_f(r.roc_auc),
            c.tn,
            c.fp,
            c.fn_,
            c.tp
        );
        write_file(&dir.join(format!("confusion_{split}.txt")), c.to_grid())?;
        write_file(
            &dir.join(format!("confusion_{split}.csv")),
            format!("actual,pred_0,pred_1\n0,{},{}\n1,{},{}\n", c.tn, c.fp, c.fn_, c.tp),
        )?;
        let mut scores = String::from("subject_id,label,score\n");
        for ((s, l), p) in ev.subjects.iter().zip(&ev.labels).zip(&ev.scores) {
            let _ = writeln!(scores, "{s},{l},{}", fmt_f(*p));
        }
        write_file(&dir.join(format!("scores_{split}.csv")), scores)?;
        evaluations.push(ev);
    }
    write_file(&dir.join("metrics.csv"), metrics)?;

    Ok(FoldResult {
        model,
        fold: f,
        selection,
        logs: run.logs,
        evaluations,
    })
}

fn pm(values: &[f64]) -> Option<(f64, f64)> {
    mean_std(values).ok()
}

fn fmt_pm(v: Option<(f64, f64)>) -> String {
    v.map_or_else(|| "NA".into(), |(m, s)| format!("{m:.4} ± {s:.4}"))
}

fn write_summary(out: &Path, model: ModelKind, results: &[&FoldResult]) -> Result<()> {
    let mut s = String::from("fold,source_val,target_val,source_test,target_test,selected_epoch,fallback\n");
    for r in results {
        let _ = write!(s, "{}", r.fold);
        for (split, _) in SPLITS {
            let _ = write!(s, ",{}", fmt_f(r.report(split).accuracy));
        }
        let sel = &r.logs[r.selection.index];
        let _ = writeln!(s, ",{},{}", sel.epoch, r.selection.fallback);
    }
    let _ = write!(s, "mean ± std");
    for (split, _) in SPLITS {
        let acc: Vec<f64> = results.iter().map(|r| r.report(split).accuracy).collect();
        let _ = write!(s, ",{}", fmt_pm(pm(&acc)));
    }
    s.push_str(",,\n");
    let dir = out.join(model.as_str());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(&dir.join("summary.csv"), s)
}

fn paired<'a>(results: &'a [FoldResult]) -> Vec<(&'a FoldResult, &'a FoldResult)> {
    let mut pairs: Vec<_> = results
        .iter()
        .filter(|r| r.model == ModelKind::Baseline)
        .filter_map(|b| {
            results
                .iter()
                .find(|p| p.model == ModelKind::Proposed && p.fold == b.fold)
                .map(|p| (b, p))
        })
        .collect();
    pairs.sort_by_key(|(b, _)| b.fold);
    pairs
}

/// Paired accuracy comparison per split over folds where both models
/// finished.
pub fn compare(results: &[FoldResult]) -> Vec<SplitComparison> {
    let pairs = paired(results);
    SPLITS
        .iter()
        .map(|&(split, _)| {
            let b: Vec<f64> = pairs.iter().map(|(b, _)| b.report(split).accuracy).collect();
            let p: Vec<f64> = pairs.iter().map(|(_, p)| p.report(split).accuracy).collect();
            let nan = (f64::NAN, f64::NAN);
            SplitComparison {
                split,
                baseline: pm(&b).unwrap_or(nan),
                proposed: pm(&p).unwrap_or(nan),
                test: paired_t_one_sided(&b, &p).ok(),
            }
        })
        .collect()
}

fn write_comparison(out: &Path, results: &[FoldResult], cmp: &[SplitComparison]) -> Result<()> {
    let mut s = String::from("split,baseline_mean,baseline_std,proposed_mean,proposed_std,t,df,p_one_sided\n");
    for c in cmp {
        let (t, df, p) = c.test.map_or(("NA".into(), "NA".into(), "NA".into()), |t| {
            (fmt_f(t.t), t.df.to_string(), format!("{:.6e}", t.p))
        });
        let _ = writeln!(
            s,
            "{},{},{},{},{},{t},{df},{p}",
            c.split,
            fmt_f(c.baseline.0),
            fmt_f(c.baseline.1),
            fmt_f(c.proposed.0),
            fmt_f(c.proposed.1)
        );
    }
    write_file(&out.join("comparison.csv"), s)?;

    // Test-split precision / recall / F1 / AUC, mean ± std per model.
    let pairs = paired(results);
    let mut m = String::from("split,metric,baseline,proposed\n");
    for split in ["source_test", "target_test"] {
        let metrics: [(&str, fn(&MetricsReport) -> f64); 4] = [
            ("precision", |r| r.precision),
            ("recall", |r| r.recall),
            ("f1", |r| r.f1),
            ("roc_auc", |r| r.roc_auc),
        ];
        for (name, get) in metrics {
            let b: Vec<f64> = pairs.iter().map(|(b, _)| get(b.report(split))).collect();
            let p: Vec<f64> = pairs.iter().map(|(_, p)| get(p.report(split))).collect();
            let _ = writeln!(m, "{split},{name},{},{}", fmt_pm(pm(&b)), fmt_pm(pm(&p)));
        }
    }
    write_file(&out.join("comparison_metrics.csv"), m)
}

/// Trains and evaluates the selected (model, fold) jobs on a pool of
/// `jobs` worker threads. A diverging job is reported in
/// [`RunOutcome::failures`] while the others complete; any other error
/// aborts the run.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    use rayon::prelude::*;

    cfg.validate()?;
    if opts.jobs == 0 {
        return Err(ExperimentError::Config("--jobs must be >= 1".into()));
    }
    let cohort = load_cohort(cfg)?;
    let folds = make_folds(
        cohort.records(),
        cfg.n_folds,
        cfg.source_val_size,
        &mut RngStream::new(cfg.master_seed, "folds"),
    )?;
    let selected: Vec<usize> = match &opts.folds {
        None => (0..cfg.n_folds).collect(),
        Some(list) => {
            if let Some(bad) = list.iter().find(|&&f| f >= cfg.n_folds) {
                return Err(ExperimentError::Config(format!(
                    "fold {bad} out of range (n_folds = {})",
                    cfg.n_folds
                )));
            }
            let mut l = list.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let fold_digest = pin_folds(&out, &folds)?;

    let jobs: Vec<(ModelKind, usize)> = opts
        .models
        .kinds()
        .into_iter()
        .flat_map(|m| selected.iter().map(move |&f| (m, f)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<FoldResult>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, f)| run_job(cfg, &cohort, &folds[f], m, &out))
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(e @ ExperimentError::Divergence { .. }) => failures.push(e),
            Err(e) => return Err(e),
        }
    }
    for m in opts.models.kinds() {
        let rs: Vec<&FoldResult> = results.iter().filter(|r| r.model == m).collect();
        write_summary(&out, m, &rs)?;
    }
    let comparison = (opts.models == ModelChoice::Both).then(|| compare(&results));
    if let Some(c) = &comparison {
        write_comparison(&out, &results, c)?;
    }
    Ok(RunOutcome {
        fold_digest,
        results,
        failures,
        comparison,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    /// Column suffix shared by `baseline_<name>` and `proposed_<name>`.
    pub name: String,
    pub test: PairedTTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaperStats {
    pub columns: Vec<ColumnStats>,
    pub pairs: Vec<PairStats>,
}

/// Mean ± sample std of every numeric column, plus a one-sided paired t-test
/// for every `baseline_<x>` / `proposed_<x>` column pair.
pub fn paper_stats_from_reader(rdr: impl std::io::Read, origin: &Path) -> Result<PaperStats> {
    let mut rdr = csv::Reader::from_reader(rdr);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err(origin))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| ExperimentError::Data(format!("{}: ragged input: {e}", origin.display())))?;
        for (i, cell) in row.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                ExperimentError::Data(format!(
                    "{}: row {} column {}: {cell:?} is not a number",
                    origin.display(),
                    line + 1,
                    headers[i]
                ))
            })?;
            cols[i].push(v);
        }
    }
    let columns = headers
        .iter()
        .zip(&cols)
        .map(|(name, v)| {
            let (mean, std) = mean_std(v)?;
            Ok(ColumnStats {
                name: name.clone(),
                mean,
                std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let find = |name: &str| headers.iter().position(|h| h == name);
    let mut pairs = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if let Some(suffix) = h.strip_prefix("baseline_") {
            if let Some(j) = find(&format!("proposed_{suffix}")) {
                pairs.push(PairStats {
                    name: suffix.to_string(),
                    test: paired_t_one_sided(&cols[i], &cols[j])?,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(ExperimentError::Data(format!(
            "{}: no baseline_<x>/proposed_<x> column pairs",
            origin.display()
        )));
    }
    Ok(PaperStats { columns, pairs })
}

pub fn cmd_paper_stats(csv_path: &Path) -> Result<PaperStats> {
    let f = fs::File::open(csv_path).map_err(io_err(csv_path))?;
    paper_stats_from_reader(f, csv_path)
}

impl std::fmt::Display for PaperStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.columns {
            writeln!(f, "{:<24} {:.4} ± {:.4}", c.name, c.mean, c.std)?;
        }
        for p in &self.pairs {
            writeln!(
                f,
                "{:<24} t = {:.4}  df = {}  p (one-sided) = {:.4e}",
                p.name, p.test.t, p.test.df, p.test.p
            )?;
        }
        Ok(())
    }
}

/// Writes `k` GIN views of the volume at `volume` into `out_dir` as
/// `view<v>.dgv` plus `view<v>.pgm` center slices, the original's center
/// slice, and `alphas.csv`. Returns the blending coefficients.
pub fn cmd_augment_preview(volume: &Path, k: usize, seed: u64, out_dir: &Path, gin: &GinConfig) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(ExperimentError::Config("k must be >= 1".into()));
    }
    let cfg = GinConfig {
        views_per_image: k,
        ..gin.clone()
    };
    let vol = load_volume(volume)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let views = augment_views(&vol.to_tensor(), &RngStream::new(seed, "preview"), &cfg)?;
    write_pgm_center_slice(&vol, &out_dir.join("original.pgm"))?;
    let alpha_path = out_dir.join("alphas.csv");
    let mut alphas = BufWriter::new(fs::File::create(&alpha_path).map_err(io_err(&alpha_path))?);
    writeln!(alphas, "view,alpha").map_err(io_err(&alpha_path))?;
    let mut out = Vec::with_capacity(k);
    for (v, view) in views.iter().enumerate() {
        let vv = Volume::from_tensor(&view.volume)?;
        save_volume(&vv, &out_dir.join(format!("view{v}.dgv")))?;
        write_pgm_center_slice(&vv, &out_dir.join(format!("view{v}.pgm")))?;
        writeln!(alphas, "{v},{}", view.alpha).map_err(io_err(&alpha_path))?;
        out.push(view.alpha);
    }
    alphas.flush().map_err(io_err(&alpha_path))?;
    Ok(out)
}
