//! Object keypoint similarity and keypoint-to-instance confidence aggregation.
//!
//! OKS scores a predicted pose against its annotation as a visibility-weighted
//! mean of Gaussian envelopes `exp(-d_k^2 / (2 l_k^2))`, where the per-keypoint
//! scale is `l_k = sqrt(var_k * area)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, domain, Error, Result};

pub type Point = [f64; 2];

#[inline]
pub fn dist_sq(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Default threshold for [`aggregate_threshold`].
pub const DEFAULT_TAU_S: f64 = 0.2;

/// Standard deviations of the 17 COCO person keypoints, in COCO order
/// (nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles).
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

pub const COCO_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Per-keypoint falloff constants `var_k`.
///
/// `var_k` multiplies the instance area, so `l_k^2 = var_k * area`. The COCO
/// evaluator writes the same envelope with `kappa_k = 2 sigma_k`, hence
/// `var_k = (2 sigma_k)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKeypointSpec", into = "RawKeypointSpec")]
pub struct KeypointSpec {
    falloff: Vec<f64>,
    names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawKeypointSpec {
    falloff: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl TryFrom<RawKeypointSpec> for KeypointSpec {
    type Error = Error;

    fn try_from(raw: RawKeypointSpec) -> Result<Self> {
        let spec = KeypointSpec::new(raw.falloff)?;
        match raw.names {
            Some(names) => spec.with_names(names),
            None => Ok(spec),
        }
    }
}

impl From<KeypointSpec> for RawKeypointSpec {
    fn from(spec: KeypointSpec) -> Self {
        RawKeypointSpec {
            falloff: spec.falloff,
            names: spec.names,
        }
    }
}

impl KeypointSpec {
    pub fn new(falloff: Vec<f64>) -> Result<Self> {
        if falloff.is_empty() {
            return Err(domain("keypoint spec needs at least one keypoint"));
        }
        if let Some(bad) = falloff.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(domain(format!("falloff constant must be positive, got {bad}")));
        }
        Ok(Self {
            falloff,
            names: None,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        check_len("keypoint names", self.count(), names.len())?;
        self.names = Some(names);
        Ok(self)
    }

    /// The 17 COCO person keypoints.
    pub fn coco() -> Self {
        Self {
            falloff: COCO_SIGMAS.iter().map(|s| (2.0 * s) * (2.0 * s)).collect(),
            names: Some(COCO_NAMES.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn count(&self) -> usize {
        self.falloff.len()
    }

    pub fn falloff(&self) -> &[f64] {
        &self.falloff
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    /// OKS length scales `l_k` for an instance of the given area.
    pub fn scales(&self, area: f64) -> Result<Vec<f64>> {
        self.falloff.iter().map(|&v| falloff_scale(v, area)).collect()
    }
}

impl Default for KeypointSpec {
    fn default() -> Self {
        Self::coco()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub keypoints: Vec<Point>,
    pub visibility: Vec<bool>,
    pub area: f64,
}

impl GroundTruthInstance {
    pub fn validate(&self, spec: &KeypointSpec) -> Result<()> {
        check_len("ground-truth keypoints", spec.count(), self.keypoints.len())?;
        check_len("ground-truth visibility", spec.count(), self.visibility.len())?;
        if !(self.area.is_finite() && self.area > 0.0) {
            return Err(domain(format!("area must be positive, got {}", self.area)));
        }
        Ok(())
    }

    pub fn num_visible(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub keypoints: Vec<Point>,
    pub kp_scores: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub instance_conf: f64,
}

impl PredictedInstance {
    pub fn validate(&self, spec: &KeypointSpec) -> Result<()> {
        check_len("predicted keypoints", spec.count(), self.keypoints.len())?;
        check_len("keypoint scores", spec.count(), self.kp_scores.len())?;
        if let Some(s) = self.kp_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(domain(format!("keypoint score {s} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&self.instance_conf) {
            return Err(domain(format!(
                "instance confidence {} outside [0,1]",
                self.instance_conf
            )));
        }
        if let Some(sigma) = &self.sigma {
            check_len("keypoint sigmas", spec.count(), sigma.len())?;
            if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
                return Err(domain(format!("sigma must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}

/// `l_k = sqrt(var_k * area)`.
pub fn falloff_scale(var_k: f64, area: f64) -> Result<f64> {
    if !(var_k > 0.0 && area > 0.0) {
        return Err(domain(format!(
            "falloff scale needs var_k > 0 and area > 0, got ({var_k}, {area})"
        )));
    }
    Ok((var_k * area).sqrt())
}

pub fn keypoint_oks(p_hat: Point, p: Point, l: f64) -> Result<f64> {
    if !(l > 0.0) {
        return Err(domain(format!("OKS scale must be positive, got {l}")));
    }
    Ok((-dist_sq(p_hat, p) / (2.0 * (l * l))).exp())
}

/// Per-keypoint OKS for every keypoint, visible or not.
pub fn keypoint_oks_all(
    pred: &PredictedInstance,
    gt: &GroundTruthInstance,
    spec: &KeypointSpec,
) -> Result<Vec<f64>> {
    check_len("predicted keypoints", spec.count(), pred.keypoints.len())?;
    gt.validate(spec)?;
    let scales = spec.scales(gt.area)?;
    pred.keypoints
        .iter()
        .zip(&gt.keypoints)
        .zip(scales)
        .map(|((&ph, &p), l)| keypoint_oks(ph, p, l))
        .collect()
}

pub fn instance_oks(
    pred: &PredictedInstance,
    gt: &GroundTruthInstance,
    spec: &KeypointSpec,
) -> Result<f64> {
    instance_oks_subset(pred, gt, spec, None)
}

/// Instance OKS restricted to a keypoint subset (whole-body part evaluation).
/// Keypoints outside the subset get zero weight.
pub fn instance_oks_subset(
    pred: &PredictedInstance,
    gt: &GroundTruthInstance,
    spec: &KeypointSpec,
    subset: Option<&[usize]>,
) -> Result<f64> {
    let per_kp = keypoint_oks_all(pred, gt, spec)?;
    let mask = subset_mask(spec.count(), subset)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..spec.count() {
        if gt.visibility[k] && mask[k] {
            num += per_kp[k];
            den += 1.0;
        }
    }
    if den == 0.0 {
        return Err(Error::NotEvaluable);
    }
    Ok(num / den)
}

pub(crate) fn subset_mask(count: usize, subset: Option<&[usize]>) -> Result<Vec<bool>> {
    match subset {
        None => Ok(vec![true; count]),
        Some(idx) => {
            if idx.is_empty() {
                return Err(domain("keypoint subset must be nonempty"));
            }
            let mut mask = vec![false; count];
            for &k in idx {
                if k >= count {
                    return Err(domain(format!(
                        "keypoint index {k} out of range for {count} keypoints"
                    )));
                }
                mask[k] = true;
            }
            Ok(mask)
        }
    }
}

/// Mean of the scores strictly above `tau_s`. When no score passes, the mean of
/// all scores is returned so every instance stays rankable.
pub fn aggregate_threshold(kp_scores: &[f64], tau_s: f64) -> Result<f64> {
    if kp_scores.is_empty() {
        return Err(domain("cannot aggregate an empty score list"));
    }
    let (sum, n) = kp_scores
        .iter()
        .filter(|&&s| s > tau_s)
        .fold((0.0, 0usize), |(acc, n), &s| (acc + s, n + 1));
    if n > 0 {
        Ok(sum / n as f64)
    } else {
        Ok(kp_scores.iter().sum::<f64>() / kp_scores.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftAggregate {
    pub value: f64,
    /// Set when the visibility weights sum to zero; `value` is then 0.
    pub degenerate: bool,
}

/// Visibility-weighted mean `sum v_k s_k / sum v_k` over `subset` (all keypoints by default).
pub fn aggregate_soft(
    kp_scores: &[f64],
    kp_vis: &[f64],
    subset: Option<&[usize]>,
) -> Result<SoftAggregate> {
    check_len("visibility weights", kp_scores.len(), kp_vis.len())?;
    if kp_scores.is_empty() {
        return Err(domain("cannot aggregate an empty score list"));
    }
    let mask = subset_mask(kp_scores.len(), subset)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..kp_scores.len() {
        if mask[k] {
            num += kp_vis[k] * kp_scores[k];
            den += kp_vis[k];
        }
    }
    if den <= 0.0 {
        return Ok(SoftAggregate {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(SoftAggregate {
        value: num / den,
        degenerate: false,
    })
}
