//! Ranking-dependent and ranking-independent evaluation.
//!
//! `average_precision` is the non-interpolated form: instances are ranked by
//! confidence and each true positive at rank `i` contributes `precision@i / N`.
//! Ties in confidence keep input order, so every report is reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};
use crate::oks::{dist_sq, GroundTruthInstance, PredictedInstance};

pub const COCO_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Sum of `precision@i / N` over true positives.
    #[default]
    Exact,
    /// COCO-style 101-point interpolated precision envelope.
    Interpolated101,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub pck_tau: f64,
    pub ause_steps: usize,
    pub bins: usize,
    pub ap_mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: COCO_THRESHOLDS.to_vec(),
            pck_tau: 0.5,
            ause_steps: 20,
            bins: 10,
            ap_mode: ApMode::Exact,
        }
    }
}

impl EvalConfig {
    pub fn with_thresholds(thresholds: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            thresholds,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(domain("at least one OKS threshold is required"));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(domain("thresholds must lie in (0,1)"));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("thresholds must be strictly increasing"));
        }
        if !(self.pck_tau > 0.0) {
            return Err(domain("pck_tau must be positive"));
        }
        if self.ause_steps < 2 {
            return Err(domain("ause_steps must be at least 2"));
        }
        if self.bins < 2 {
            return Err(domain("reliability curves need at least 2 bins"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub map: f64,
    pub per_threshold: Vec<f64>,
    /// One point per rank and threshold, thresholds in config order.
    pub pr_points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsificationPoint {
    pub fraction_removed: f64,
    pub remaining_error: f64,
    pub oracle_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sparsification {
    pub ause: f64,
    pub points: Vec<SparsificationPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_center: f64,
    pub mean_conf: f64,
    pub mean_oks: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Instances without visible keypoints, left out of every metric.
    pub excluded: usize,
    pub map: f64,
    pub mar: f64,
    pub per_threshold_ap: Vec<f64>,
    pub pr_points: Vec<PrPoint>,
    pub ause: f64,
    pub sparsification: Vec<SparsificationPoint>,
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
    pub reliability: Vec<ReliabilityBin>,
    pub reliability_deviation: f64,
}

fn check_unit_interval(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(domain(format!("{what} value {v} outside [0,1]"))),
        None => Ok(()),
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(domain(format!("{what} value {v} is not finite"))),
        None => Ok(()),
    }
}

/// Indices ordered by descending confidence; equal confidences keep input order.
pub fn rank_by_confidence(conf: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]));
    order
}

pub fn average_recall(oks: &[f64], cfg: &EvalConfig) -> Result<f64> {
    if oks.is_empty() {
        return Err(domain("average recall of an empty set"));
    }
    check_unit_interval("OKS", oks)?;
    let n = oks.len() as f64;
    let total: f64 = cfg
        .thresholds
        .iter()
        .map(|&t| oks.iter().filter(|&&c| c > t).count() as f64 / n)
        .sum();
    Ok(total / cfg.thresholds.len() as f64)
}

pub fn average_precision(oks: &[f64], conf: &[f64], cfg: &EvalConfig) -> Result<ApResult> {
    check_len("confidences", oks.len(), conf.len())?;
    if oks.is_empty() {
        return Err(domain("average precision of an empty set"));
    }
    check_unit_interval("OKS", oks)?;
    check_finite("confidence", conf)?;
    let order = rank_by_confidence(conf);
    let n = oks.len() as f64;

    let mut per_threshold = Vec::with_capacity(cfg.thresholds.len());
    let mut pr_points = Vec::with_capacity(cfg.thresholds.len() * oks.len());
    for &t in &cfg.thresholds {
        let mut tp = 0usize;
        let mut ap = 0.0;
        let mut curve = Vec::with_capacity(oks.len());
        for (rank, &i) in order.iter().enumerate() {
            let hit = oks[i] > t;
            if hit {
                tp += 1;
            }
            let precision = tp as f64 / (rank + 1) as f64;
            if hit {
                ap += precision / n;
            }
            curve.push(PrPoint {
                threshold: t,
                recall: tp as f64 / n,
                precision,
            });
        }
        if cfg.ap_mode == ApMode::Interpolated101 {
            ap = interpolated_ap(&curve);
        }
        per_threshold.push(ap);
        pr_points.extend(curve);
    }
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(ApResult {
        map,
        per_threshold,
        pr_points,
    })
}

fn interpolated_ap(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = curve.partition_point(|p| p.recall < target);
        if idx < curve.len() {
            total += envelope[idx];
        }
    }
    total / 101.0
}

/// Fraction of visible keypoints whose error, normalised by `norm`, is at most `tau`.
pub fn pck(
    pred: &PredictedInstance,
    gt: &GroundTruthInstance,
    norm: f64,
    tau: f64,
) -> Result<f64> {
    if !(norm > 0.0 && tau > 0.0) {
        return Err(domain("PCK needs positive normaliser and threshold"));
    }
    check_len("predicted keypoints", gt.keypoints.len(), pred.keypoints.len())?;
    check_len("visibility", gt.keypoints.len(), gt.visibility.len())?;
    let mut visible = 0usize;
    let mut correct = 0usize;
    for k in 0..gt.keypoints.len() {
        if gt.visibility[k] {
            visible += 1;
            if dist_sq(pred.keypoints[k], gt.keypoints[k]).sqrt() / norm <= tau {
                correct += 1;
            }
        }
    }
    if visible == 0 {
        return Err(Error::NotEvaluable);
    }
    Ok(correct as f64 / visible as f64)
}

fn removal_curve(errors: &[f64], order: &[usize], steps: usize) -> Vec<f64> {
    // `order` is most-trusted first; removal starts from its tail.
    let n = errors.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, &idx) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + errors[idx];
    }
    (0..steps)
        .map(|s| {
            let removed = s * n / steps;
            let kept = n - removed;
            prefix[kept] / kept as f64
        })
        .collect()
}

/// Area between the confidence-ordered sparsification curve and the
/// error-ordered oracle curve, as a left Riemann sum over `steps` fractions.
pub fn ause(errors: &[f64], conf: &[f64], steps: usize) -> Result<Sparsification> {
    check_len("confidences", errors.len(), conf.len())?;
    if errors.len() < 2 {
        return Err(domain("AUSE needs at least two samples"));
    }
    if steps < 2 {
        return Err(domain("AUSE needs at least two steps"));
    }
    check_finite("error", errors)?;
    check_finite("confidence", conf)?;
    let by_conf = rank_by_confidence(conf);
    let neg_err: Vec<f64> = errors.iter().map(|e| -e).collect();
    let by_err = rank_by_confidence(&neg_err);
    let curve = removal_curve(errors, &by_conf, steps);
    let oracle = removal_curve(errors, &by_err, steps);

    let points: Vec<SparsificationPoint> = (0..steps)
        .map(|s| SparsificationPoint {
            fraction_removed: s as f64 / steps as f64,
            remaining_error: curve[s],
            oracle_error: oracle[s],
        })
        .collect();
    let area = points
        .iter()
        .map(|p| (p.remaining_error - p.oracle_error).max(0.0))
        .sum::<f64>()
        / steps as f64;
    Ok(Sparsification { ause: area, points })
}

/// Product-moment correlation. Zero variance in either series is a
/// [`Error::Degenerate`] result.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len("paired series", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(domain("correlation needs at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Equal-width bins over confidence in [0,1]; empty bins are omitted.
pub fn reliability_curve(conf: &[f64], oks: &[f64], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_len("OKS values", conf.len(), oks.len())?;
    if bins < 2 {
        return Err(domain("reliability curves need at least 2 bins"));
    }
    check_finite("confidence", conf)?;
    let mut sum_conf = vec![0.0; bins];
    let mut sum_oks = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&c, &o) in conf.iter().zip(oks) {
        let c = c.clamp(0.0, 1.0);
        let b = ((c * bins as f64) as usize).min(bins - 1);
        sum_conf[b] += c;
        sum_oks[b] += o;
        count[b] += 1;
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| ReliabilityBin {
            bin_center: (b as f64 + 0.5) / bins as f64,
            mean_conf: sum_conf[b] / count[b] as f64,
            mean_oks: sum_oks[b] / count[b] as f64,
            count: count[b],
        })
        .collect())
}

/// Mean absolute gap between confidence and OKS over populated bins.
pub fn reliability_deviation(curve: &[ReliabilityBin]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve
        .iter()
        .map(|b| (b.mean_conf - b.mean_oks).abs())
        .sum::<f64>()
        / curve.len() as f64
}

/// All metrics for one set of (OKS, confidence) pairs.
pub fn evaluate(oks: &[f64], conf: &[f64], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let ap = average_precision(oks, conf, cfg)?;
    let mar = average_recall(oks, cfg)?;
    let errors: Vec<f64> = oks.iter().map(|o| 1.0 - o).collect();
    let sparse = ause(&errors, conf, cfg.ause_steps)?;
    let pearson = match pearson(conf, oks) {
        Ok(r) => Some(r),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let reliability = reliability_curve(conf, oks, cfg.bins)?;
    Ok(EvalReport {
        n: oks.len(),
        excluded: 0,
        map: ap.map,
        mar,
        per_threshold_ap: ap.per_threshold,
        pr_points: ap.pr_points,
        ause: sparse.ause,
        sparsification: sparse.points,
        pearson,
        reliability_deviation: reliability_deviation(&reliability),
        reliability,
    })
}
