//! Confidence modes, dataset evaluation and the commands behind the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccnet::{forward, train, training_samples_from_pairs, CalibHead, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{self, HeadFile, Pair};
use crate::oks::{aggregate_soft, aggregate_threshold, instance_oks_subset, KeypointSpec, DEFAULT_TAU_S};
use crate::ranking::{evaluate, EvalConfig, EvalReport};
use crate::sim::{split_indices, synth_benchmark, SynthConfig};
use crate::theory::{rescore, rle_confidence_clamped, sigma_from_maxval, DEFAULT_L_TILDE};

/// Where instance confidences come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    /// Keypoint scores as given (heatmap maxima).
    #[default]
    HeatmapMax,
    /// `1 - sigma / regression_unit` from the `sigma` field.
    Rle,
    Constant,
    /// Expected OKS `l^2 / (sigma^2 + l^2)` with `l` from the instance area.
    Rescored,
    /// The realised instance OKS.
    Oracle,
    /// Calibration head applied to the per-keypoint features.
    Ccnet,
}

impl ConfidenceMode {
    pub const ALL: [ConfidenceMode; 6] = [
        ConfidenceMode::HeatmapMax,
        ConfidenceMode::Rle,
        ConfidenceMode::Constant,
        ConfidenceMode::Rescored,
        ConfidenceMode::Oracle,
        ConfidenceMode::Ccnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfidenceMode::HeatmapMax => "heatmap-max",
            ConfidenceMode::Rle => "rle",
            ConfidenceMode::Constant => "constant",
            ConfidenceMode::Rescored => "rescored",
            ConfidenceMode::Oracle => "oracle",
            ConfidenceMode::Ccnet => "ccnet",
        }
    }
}

impl fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConfidenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown confidence mode `{s}`")))
    }
}

/// Keypoint-to-instance aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of scores above `tau_s`.
    #[default]
    Threshold,
    /// Visibility-weighted mean. Modes without a visibility estimate use unit weights.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaSource {
    /// Ground-truth area.
    #[default]
    Gt,
    /// The prediction's `area` field.
    Pred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    /// The `sigma` field when present, else inversion of the keypoint score.
    #[default]
    Auto,
    Field,
    Maxval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ConfidenceMode,
    pub aggregation: Aggregation,
    pub tau_s: f64,
    pub l_tilde: f64,
    pub area_source: AreaSource,
    pub sigma_source: SigmaSource,
    /// Pixels per regression output unit for the `rle` mode.
    pub regression_unit: f64,
    /// Keypoint indices to evaluate; all when unset.
    pub subset: Option<Vec<usize>>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: ConfidenceMode::HeatmapMax,
            aggregation: Aggregation::Threshold,
            tau_s: DEFAULT_TAU_S,
            l_tilde: DEFAULT_L_TILDE,
            area_source: AreaSource::Gt,
            sigma_source: SigmaSource::Auto,
            regression_unit: 10.0,
            subset: None,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, spec: &KeypointSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.tau_s) {
            return bad(format!("tau_s must lie in [0, 1), got {}", self.tau_s));
        }
        if !(self.l_tilde > 0.0 && self.regression_unit > 0.0) {
            return bad("l_tilde and regression_unit must be positive".into());
        }
        if let Some(s) = &self.subset {
            if s.is_empty() || s.iter().any(|k| *k >= spec.count()) {
                return bad(format!("subset must list keypoints in 0..{}", spec.count()));
            }
        }
        self.eval.validate().map_err(|e| Error::Config(e.to_string()))
    }

    fn in_subset(&self, k: usize) -> bool {
        self.subset.as_ref().is_none_or(|s| s.contains(&k))
    }
}

fn sigmas(pair: &Pair, run: &RunConfig) -> Result<Vec<f64>> {
    let from_scores = || -> Result<Vec<f64>> {
        pair.pred
            .kp_scores
            .iter()
            .map(|&s| {
                if s > 0.0 {
                    sigma_from_maxval(s, run.l_tilde)
                } else {
                    Ok(f64::INFINITY)
                }
            })
            .collect()
    };
    match (run.sigma_source, &pair.pred.sigma) {
        (SigmaSource::Maxval, _) | (SigmaSource::Auto, None) => from_scores(),
        (_, Some(s)) => Ok(s.clone()),
        (SigmaSource::Field, None) => Err(Error::Config(format!(
            "prediction {} has no `sigma` field",
            pair.id
        ))),
    }
}

fn area(pair: &Pair, run: &RunConfig) -> Result<f64> {
    match run.area_source {
        AreaSource::Gt => Ok(pair.gt.area),
        AreaSource::Pred => pair.pred_area.ok_or_else(|| {
            Error::Config(format!("prediction {} has no `area` field", pair.id))
        }),
    }
}

/// Expected-OKS keypoint scores and the sigmas they were computed from.
pub fn rescored_keypoints(pair: &Pair, spec: &KeypointSpec, run: &RunConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let sig = sigmas(pair, run)?;
    let scales = spec.scales(area(pair, run)?)?;
    let scores = sig
        .iter()
        .zip(&scales)
        .map(|(&s, &l)| if s.is_finite() { rescore(s, l, 0.0) } else { Ok(0.0) })
        .collect::<Result<Vec<_>>>()?;
    Ok((scores, sig))
}

/// Keypoint scores and visibility weights under the configured mode.
pub fn keypoint_scores(
    pair: &Pair,
    spec: &KeypointSpec,
    run: &RunConfig,
    head: Option<&CalibHead>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = spec.count();
    let ones = vec![1.0; k];
    match run.mode {
        ConfidenceMode::HeatmapMax => Ok((pair.pred.kp_scores.clone(), ones)),
        ConfidenceMode::Constant | ConfidenceMode::Oracle => Ok((ones.clone(), ones)),
        ConfidenceMode::Rle => {
            let sig = pair.pred.sigma.as_ref().ok_or_else(|| {
                Error::Config(format!("rle mode: prediction {} has no `sigma` field", pair.id))
            })?;
            let s = sig.iter().map(|s| rle_confidence_clamped(s / run.regression_unit)).collect();
            Ok((s, ones))
        }
        ConfidenceMode::Rescored => Ok((rescored_keypoints(pair, spec, run)?.0, ones)),
        ConfidenceMode::Ccnet => {
            let head = head.ok_or_else(|| Error::Config("ccnet mode needs a head file".into()))?;
            let feats = pair.features.as_ref().ok_or_else(|| {
                Error::Config(format!("ccnet mode: prediction {} has no `features`", pair.id))
            })?;
            forward(feats, head).map_err(|e| Error::Config(format!("prediction {}: {e}", pair.id)))
        }
    }
}

fn aggregate(scores: &[f64], weights: &[f64], run: &RunConfig) -> Result<f64> {
    match run.aggregation {
        Aggregation::Threshold => {
            let picked: Vec<f64> = (0..scores.len())
                .filter(|&k| run.in_subset(k))
                .map(|k| scores[k])
                .collect();
            aggregate_threshold(&picked, run.tau_s)
        }
        Aggregation::Soft => Ok(aggregate_soft(scores, weights, run.subset.as_deref())?.value),
    }
}

/// Instance confidence under the configured mode.
pub fn instance_confidence(
    pair: &Pair,
    spec: &KeypointSpec,
    run: &RunConfig,
    head: Option<&CalibHead>,
) -> Result<f64> {
    match run.mode {
        ConfidenceMode::Constant => Ok(1.0),
        ConfidenceMode::Oracle => instance_oks_subset(&pair.pred, &pair.gt, spec, run.subset.as_deref()),
        _ => {
            let (s, w) = keypoint_scores(pair, spec, run, head)?;
            aggregate(&s, &w, run)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Ids of the evaluated instances, in input order.
    pub ids: Vec<u64>,
    pub oks: Vec<f64>,
    pub conf: Vec<f64>,
}

/// OKS and confidence per pair, then the full metric report. Instances with no
/// visible keypoint in the evaluated subset are counted in `excluded`.
pub fn evaluate_pairs(
    pairs: &[Pair],
    spec: &KeypointSpec,
    run: &RunConfig,
    head: Option<&CalibHead>,
) -> Result<Evaluation> {
    run.validate(spec)?;
    let rows: Vec<Option<(u64, f64, f64)>> = pairs
        .par_iter()
        .map(|pair| match instance_oks_subset(&pair.pred, &pair.gt, spec, run.subset.as_deref()) {
            Ok(oks) => Ok(Some((pair.id, oks, instance_confidence(pair, spec, run, head)?))),
            Err(Error::NotEvaluable) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(u64, f64, f64)> = rows.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Config("no instance has a visible keypoint in the evaluated subset".into()));
    }
    let ids = kept.iter().map(|r| r.0).collect();
    let oks: Vec<f64> = kept.iter().map(|r| r.1).collect();
    let conf: Vec<f64> = kept.iter().map(|r| r.2).collect();
    let mut report = evaluate(&oks, &conf, &run.eval)?;
    report.excluded = pairs.len() - kept.len();
    Ok(Evaluation { report, ids, oks, conf })
}

/// Replaces keypoint scores with expected-OKS rescoring and records the sigmas
/// used, so rescoring the output again is a no-op. Geometry is untouched.
pub fn rescore_pairs(pairs: &[Pair], spec: &KeypointSpec, run: &RunConfig) -> Result<Vec<Pair>> {
    run.validate(spec)?;
    pairs
        .par_iter()
        .map(|pair| {
            let (scores, sig) = rescored_keypoints(pair, spec, run)?;
            let weights = vec![1.0; scores.len()];
            let mut out = pair.clone();
            out.pred.instance_conf = aggregate(&scores, &weights, run)?;
            out.pred.kp_scores = scores;
            out.pred.sigma = Some(sig.iter().map(|s| if s.is_finite() { *s } else { f64::MAX }).collect());
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibOutcome {
    pub head: CalibHead,
    pub train_ids: Vec<u64>,
    pub held_out_ids: Vec<u64>,
    pub before: Evaluation,
    pub after: Evaluation,
}

/// Trains a head on a seeded split of `pairs` and evaluates the held-out part
/// with `run.mode` before and with the head after.
pub fn train_calibration(
    pairs: &[Pair],
    spec: &KeypointSpec,
    run: &RunConfig,
    cfg: &TrainConfig,
    train_fraction: f64,
) -> Result<CalibOutcome> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (train_idx, test_idx) = split_indices(pairs.len(), train_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let (train_pairs, test_pairs) = (pick(&train_idx), pick(&test_idx));
    if train_pairs.is_empty() || test_pairs.is_empty() {
        return Err(Error::Config("train/held-out split leaves an empty side".into()));
    }
    let samples = training_samples_from_pairs(&train_pairs, spec)?;
    let head = train(&samples, cfg)?;

    let before_run = RunConfig {
        mode: if run.mode == ConfidenceMode::Ccnet { ConfidenceMode::HeatmapMax } else { run.mode },
        ..run.clone()
    };
    let after_run = RunConfig {
        mode: ConfidenceMode::Ccnet,
        aggregation: Aggregation::Soft,
        ..run.clone()
    };
    let before = evaluate_pairs(&test_pairs, spec, &before_run, None)?;
    let after = evaluate_pairs(&test_pairs, spec, &after_run, Some(&head))?;
    if before.report.mar.to_bits() != after.report.mar.to_bits() || before.oks != after.oks {
        return Err(Error::Tolerance(format!(
            "mAR changed under calibration: {} -> {}",
            before.report.mar, after.report.mar
        )));
    }
    Ok(CalibOutcome {
        head,
        train_ids: train_pairs.iter().map(|p| p.id).collect(),
        held_out_ids: test_pairs.iter().map(|p| p.id).collect(),
        before,
        after,
    })
}

/// Per-instance OKS and confidence, for inspection alongside the report.
pub fn scores_csv(eval: &Evaluation) -> String {
    let mut out = String::from("id,oks,confidence\n");
    for ((id, o), c) in eval.ids.iter().zip(&eval.oks).zip(&eval.conf) {
        out.push_str(&format!("{id},{o},{c}\n"));
    }
    out
}

pub fn cmd_eval(
    gt: &Path,
    pred: &Path,
    spec: &KeypointSpec,
    run: &RunConfig,
    head: Option<&Path>,
    out: &Path,
) -> Result<EvalReport> {
    run.validate(spec)?;
    let pairs = io::load_dataset(gt, pred, spec)?;
    let head = match head {
        Some(p) => Some(io::read_head(p)?.head()?),
        None if run.mode == ConfidenceMode::Ccnet => {
            return Err(Error::Config("ccnet mode needs --head".into()))
        }
        None => None,
    };
    let eval = evaluate_pairs(&pairs, spec, run, head.as_ref())?;
    io::write_report(out, "", &eval.report)?;
    io::write_atomic(&out.join("scores.csv"), scores_csv(&eval).as_bytes())?;
    Ok(eval.report)
}

pub fn cmd_rescore(gt: &Path, pred: &Path, spec: &KeypointSpec, run: &RunConfig, out_file: &Path) -> Result<usize> {
    let pairs = io::load_dataset(gt, pred, spec)?;
    let rescored = rescore_pairs(&pairs, spec, run)?;
    let records: Vec<_> = rescored.iter().map(io::pred_record).collect();
    io::write_records(out_file, &records)?;
    Ok(records.len())
}

/// Writes `gt.json` and `pred.json` for a synthetic benchmark.
pub fn cmd_synth(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<usize> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let bench = synth_benchmark(cfg, seed)?;
    let pairs = io::benchmark_pairs(&bench);
    let gt: Vec<_> = pairs.iter().map(|p| io::gt_record(p.id, &p.gt)).collect();
    let pred: Vec<_> = pairs.iter().map(io::pred_record).collect();
    io::write_records(&out.join("gt.json"), &gt)?;
    io::write_records(&out.join("pred.json"), &pred)?;
    Ok(pairs.len())
}

/// Before/after metrics on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSummary {
    pub train_instances: usize,
    pub held_out_instances: usize,
    pub before_mode: ConfidenceMode,
    pub map_before: f64,
    pub map_after: f64,
    pub mar_before: f64,
    pub mar_after: f64,
    pub ause_before: f64,
    pub ause_after: f64,
    pub pearson_before: Option<f64>,
    pub pearson_after: Option<f64>,
    pub reliability_deviation_before: f64,
    pub reliability_deviation_after: f64,
}

impl CalibSummary {
    pub fn new(outcome: &CalibOutcome, before_mode: ConfidenceMode) -> Self {
        let (b, a) = (&outcome.before.report, &outcome.after.report);
        CalibSummary {
            train_instances: outcome.train_ids.len(),
            held_out_instances: outcome.held_out_ids.len(),
            before_mode,
            map_before: b.map,
            map_after: a.map,
            mar_before: b.mar,
            mar_after: a.mar,
            ause_before: b.ause,
            ause_after: a.ause,
            pearson_before: b.pearson,
            pearson_after: a.pearson,
            reliability_deviation_before: b.reliability_deviation,
            reliability_deviation_after: a.reliability_deviation,
        }
    }
}

/// Trains a head on the dataset's `features`, then writes `head.json`,
/// `before_*` and `after_*` reports and `calibration.json`.
pub fn cmd_train_calib(
    gt: &Path,
    pred: &Path,
    spec: &KeypointSpec,
    run: &RunConfig,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<CalibSummary> {
    run.validate(spec)?;
    let pairs = io::load_dataset(gt, pred, spec)?;
    if pairs.iter().any(|p| p.features.is_none()) {
        return Err(Error::Config("train-calib needs `features` on every prediction".into()));
    }
    let outcome = train_calibration(&pairs, spec, run, cfg, TRAIN_FRACTION)?;
    let before_mode = if run.mode == ConfidenceMode::Ccnet { ConfidenceMode::HeatmapMax } else { run.mode };
    io::write_json(&out.join("head.json"), &HeadFile::new(&outcome.head, cfg))?;
    io::write_report(out, "before_", &outcome.before.report)?;
    io::write_report(out, "after_", &outcome.after.report)?;
    let summary = CalibSummary::new(&outcome, before_mode);
    io::write_json(&out.join("calibration.json"), &summary)?;
    Ok(summary)
}

/// Share of instances used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.8;
