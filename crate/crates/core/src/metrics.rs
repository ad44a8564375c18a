//! Binary classification metrics and the cross-fold paired t-test.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("value {value} at index {index} is not a binary label")]
    NotBinary { index: usize, value: u8 },
    #[error("ROC AUC is undefined when only one class is present")]
    UndefinedAuc,
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// Two-row text grid, rows = true class, columns = predicted class.
    pub fn to_grid(&self) -> String {
        let w = [self.tn, self.fp, self.fn_, self.tp]
            .iter()
            .map(|v| v.to_string().len())
            .max()
            .unwrap_or(1)
            .max(6);
        format!(
            "{:>8} {:>w$} {:>w$}\n{:>8} {:>w$} {:>w$}\n{:>8} {:>w$} {:>w$}\n",
            "true\\pred",
            "0",
            "1",
            "0",
            self.tn,
            self.fp,
            "1",
            self.fn_,
            self.tp,
            w = w
        )
    }
}

fn check_binary(values: &[u8]) -> Result<()> {
    match values.iter().position(|&v| v > 1) {
        Some(index) => Err(StatsError::NotBinary {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(StatsError::LengthMismatch(preds.len(), labels.len()));
    }
    check_binary(preds)?;
    check_binary(labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (l, p) {
            (0, 0) => cm.tn += 1,
            (0, _) => cm.fp += 1,
            (_, 0) => cm.fn_ += 1,
            _ => cm.tp += 1,
        }
    }
    Ok(cm)
}

/// Which ratios hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<BasicMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, dp) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, dr) = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, df) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    Ok(BasicMetrics {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            f1: df,
        },
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting ½.
/// Uses mid-ranks, O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::LengthMismatch(scores.len(), labels.len()));
    }
    check_binary(labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(StatsError::TooFew {
            needed: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    /// One-sided p-value for the alternative "proposed > baseline".
    pub p: f64,
    pub mean_diff: f64,
}

/// One-sided paired t-test of `proposed > baseline`.
///
/// When all differences are equal (zero variance, up to a relative 1e-12
/// rounding allowance) `t` is ±∞ or 0 and `p`
/// takes its limit: 0 for a positive mean difference, 1 for a negative one,
/// 0.5 when every difference is zero.
pub fn paired_t_one_sided(baseline: &[f64], proposed: &[f64]) -> Result<PairedTTest> {
    if baseline.len() != proposed.len() {
        return Err(StatsError::LengthMismatch(baseline.len(), proposed.len()));
    }
    let d: Vec<f64> = proposed.iter().zip(baseline).map(|(p, b)| p - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (mean, sd) = mean_std(&d)?;
    let n = d.len();
    let df = n - 1;
    // Rounding leaves a residual spread when every difference is "the same"
    // decimal; anything below this is treated as zero variance.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 1e-12 * scale {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(PairedTTest {
            t,
            df,
            p,
            mean_diff: mean,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(PairedTTest {
        t,
        df,
        p: student_t_sf(t, df as f64),
        mean_diff: mean,
    })
}

/// Student-t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    1.0 - student_t_sf(t, df)
}

/// Upper tail `P(T > t)`, evaluated without cancellation for large `t`:
/// `P(T > t) = ½·I_{ν/(ν+t²)}(ν/2, ½)` for `t ≥ 0`.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let x = df / (df + t * t);
    let half_tail = 0.5 * regularized_incomplete_beta(x, df / 2.0, 0.5);
    if t >= 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

/// Regularized incomplete beta `I_x(a, b)` by the modified Lentz continued
/// fraction, using the symmetry `I_x(a,b) = 1 − I_{1−x}(b,a)` to stay in the
/// fast-converging region.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), accurate to
/// roughly 1e-15 relative for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Confusion matrix plus the scalar metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub roc_auc: f64,
    pub degenerate: Degenerate,
}

/// Threshold at 0.5 (a tie predicts class 0) and compute every metric.
pub fn report_from_scores(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    let cm = confusion(&preds, labels)?;
    let m = basic_metrics(&cm)?;
    Ok(MetricsReport {
        confusion: cm,
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        roc_auc: roc_auc(scores, labels)?,
        degenerate: m.degenerate,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "acc {:.4}  prec {:.4}  rec {:.4}  f1 {:.4}  auc {:.4}",
            self.accuracy, self.precision, self.recall, self.f1, self.roc_auc
        )
    }
}
