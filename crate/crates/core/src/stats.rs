//! ROC/AUC, paired bootstrap evaluation and one-way ANOVA.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::seqdata::{bootstrap_indices, LabeledDataset};

pub const DEFAULT_BOOTSTRAP_TRIALS: usize = 30;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CI_METHOD: &str = "per-group t-interval, 95%";

/// ROC curve from `(0, 0)` to `(1, 1)`, one point per distinct threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Threshold producing each point; the first is `+inf`.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for (t, (fpr, tpr)) in self.thresholds.iter().zip(&self.points) {
            let _ = writeln!(out, "{t},{fpr},{tpr}");
        }
        out
    }
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Stats(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Stats(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats("AUC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// ROC curve and trapezoidal AUC.
///
/// Areas are accumulated in integer counts and divided once, so the
/// result equals the Mann-Whitney statistic (ties worth one half) exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(RocCurve, f64)> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp_prev, fp_prev) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp_prev) * (tp + tp_prev);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(threshold);
    }
    let auc = twice_area as f64 / (2 * pos * neg) as f64;
    Ok((RocCurve { points, thresholds }, auc))
}

pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    roc_auc(scores, labels).map(|(_, a)| a)
}

/// AUC over the examples at `indices` (repeats allowed).
pub fn auc_at(scores: &[f64], labels: &[u8], indices: &[usize]) -> Result<f64> {
    let s: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
    let y: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    auc(&s, &y)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than 2 values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub model: String,
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl BootstrapResult {
    fn from_aucs(model: String, aucs: Vec<f64>) -> Self {
        Self {
            mean: mean(&aucs),
            std: sample_std(&aucs),
            model,
            aucs,
        }
    }
}

/// Paired bootstrap over precomputed scores: trial `t` draws
/// `bootstrap_indices(labels, seed + t)` and every model is scored on that
/// same resample.
pub fn bootstrap_auc_from_scores(
    scores: &[(String, Vec<f64>)],
    labels: &[u8],
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<BootstrapResult>> {
    if trials < 2 {
        return Err(Error::Config(format!(
            "need at least 2 bootstrap trials, got {trials}"
        )));
    }
    if let Some((name, s)) = scores.iter().find(|(_, s)| s.len() != labels.len()) {
        return Err(Error::Stats(format!(
            "model {name} has {} scores for {} labels",
            s.len(),
            labels.len()
        )));
    }
    let run_trial = |t: usize| -> Result<Vec<f64>> {
        let idx = bootstrap_indices(labels, seed.wrapping_add(t as u64))?;
        scores
            .iter()
            .map(|(_, s)| auc_at(s, labels, &idx))
            .collect()
    };
    let per_trial: Vec<Vec<f64>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            (0..trials)
                .into_par_iter()
                .map(run_trial)
                .collect::<Result<_>>()
        })?
    } else {
        (0..trials).map(run_trial).collect::<Result<_>>()?
    };
    Ok(scores
        .iter()
        .enumerate()
        .map(|(m, (name, _))| {
            BootstrapResult::from_aucs(name.clone(), per_trial.iter().map(|t| t[m]).collect())
        })
        .collect())
}

/// Scores every model once on `testset`, then runs the paired bootstrap.
pub fn bootstrap_auc(
    models: &[&dyn SequenceModel],
    testset: &LabeledDataset,
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<BootstrapResult>> {
    let scores = models
        .iter()
        .map(|m| Ok((m.model_id().to_string(), m.score_all(testset.sequences())?)))
        .collect::<Result<Vec<_>>>()?;
    bootstrap_auc_from_scores(&scores, testset.labels(), trials, seed, jobs)
}

// ---------------------------------------------------------------------------
// Special functions

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// CDF of the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_cdf(x: f64, d1: u64, d2: u64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let (d1, d2) = (d1 as f64, d2 as f64);
    regularized_incomplete_beta(d1 * x / (d1 * x + d2), d1 / 2.0, d2 / 2.0)
}

/// Upper tail `1 - f_cdf`, evaluated through the complementary beta so
/// small p-values keep their precision.
pub fn f_sf(x: f64, d1: u64, d2: u64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let (d1, d2) = (d1 as f64, d2 as f64);
    regularized_incomplete_beta(d2 / (d2 + d1 * x), d2 / 2.0, d1 / 2.0)
}

/// Student-t CDF via `T^2 ~ F(1, df)`.
pub fn t_cdf(t: f64, df: u64) -> f64 {
    let half = 0.5 * f_cdf(t * t, 1, df);
    if t >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

/// Student-t quantile by bisection on [`t_cdf`].
pub fn t_quantile(p: f64, df: u64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be in (0, 1)");
    if p < 0.5 {
        return -t_quantile(1.0 - p, df);
    }
    let mut hi = 1.0;
    while t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------------------------------------------------------------------------
// ANOVA

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// Zero within-group variance and distinct means.
    UnequalMeans,
    /// Zero within-group variance and identical means.
    EqualMeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnovaResult {
    pub f: f64,
    pub p_value: f64,
    pub df_between: u64,
    pub df_within: u64,
    pub ss_between: f64,
    pub ss_within: f64,
    pub groups: Vec<GroupSummary>,
    pub degenerate: Option<Degeneracy>,
}

/// `mean +- t_{0.975, n-1} * s / sqrt(n)`.
pub fn t_interval(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, m);
    }
    let half = t_quantile(0.975, values.len() as u64 - 1) * sample_std(values)
        / (values.len() as f64).sqrt();
    (m - half, m + half)
}

pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::Stats(format!(
            "ANOVA needs at least 2 groups, got {k}"
        )));
    }
    if let Some(g) = groups.iter().position(|g| g.len() < 2) {
        return Err(Error::Stats(format!("group {g} has fewer than 2 values")));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Stats(
            "ANOVA input contains non-finite values".into(),
        ));
    }
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let all_means_equal = means.iter().all(|&m| m == means[0]);
    let ss_between = if all_means_equal {
        0.0
    } else {
        groups
            .iter()
            .zip(&means)
            .map(|(g, m)| g.len() as f64 * (m - grand).powi(2))
            .sum()
    };
    let ss_within: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    let df_between = (k - 1) as u64;
    let df_within = (n_total - k) as u64;

    let (f, p_value, degenerate) = if ss_within == 0.0 {
        if all_means_equal {
            (0.0, 1.0, Some(Degeneracy::EqualMeans))
        } else {
            (f64::INFINITY, 0.0, Some(Degeneracy::UnequalMeans))
        }
    } else {
        let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
        (f, f_sf(f, df_between, df_within), None)
    };

    let groups = groups
        .iter()
        .map(|g| {
            let (ci_low, ci_high) = t_interval(g);
            GroupSummary {
                n: g.len(),
                mean: mean(g),
                std: sample_std(g),
                ci_low,
                ci_high,
            }
        })
        .collect();
    Ok(AnovaResult {
        f,
        p_value,
        df_between,
        df_within,
        ss_between,
        ss_within,
        groups,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Report documents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub path: String,
    pub sha256: String,
    pub aucs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub ci95: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaSummary {
    /// `None` encodes `+inf` (zero within-group variance, distinct means).
    pub f_statistic: Option<f64>,
    pub p_value: f64,
    pub df_between: u64,
    pub df_within: u64,
    pub significant: bool,
    pub degenerate: Option<Degeneracy>,
    pub groups: Vec<NamedGroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedGroupSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: GroupSummary,
}

/// Significance threshold for the ANOVA p-value.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

impl AnovaSummary {
    pub fn from_result(result: &AnovaResult, names: &[String]) -> Self {
        Self {
            f_statistic: result.f.is_finite().then_some(result.f),
            p_value: result.p_value,
            df_between: result.df_between,
            df_within: result.df_within,
            significant: result.p_value < SIGNIFICANCE_LEVEL,
            degenerate: result.degenerate,
            groups: names
                .iter()
                .zip(&result.groups)
                .map(|(n, g)| NamedGroupSummary {
                    name: n.clone(),
                    summary: g.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub testset: String,
    pub testset_sha256: String,
    pub trials: usize,
    pub seed: u64,
    pub ci_method: String,
    pub models: Vec<ModelReport>,
    pub anova: Option<AnovaSummary>,
}
