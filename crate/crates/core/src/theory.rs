//! Closed-form expected OKS and the confidences heatmap and regression
//! estimators converge to under isotropic Gaussian annotation noise
//! `p ~ N(mu, sigma^2 I)`.
//!
//! Every function here has a Monte-Carlo counterpart in [`crate::sim`]; the
//! acceptance suite checks the two against each other.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::oks::{dist_sq, Point};

/// Default standard deviation of rendered training heatmaps, in heatmap pixels.
pub const DEFAULT_L_TILDE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationModel {
    pub mu: Point,
    pub sigma: f64,
}

impl AnnotationModel {
    pub fn new(mu: Point, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(domain(format!("annotation sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { mu, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorParams {
    pub l_tilde: f64,
    pub delta_hat: f64,
    pub o_hat: Option<f64>,
    pub b_hat: Option<f64>,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            l_tilde: DEFAULT_L_TILDE,
            delta_hat: 0.0,
            o_hat: None,
            b_hat: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be positive, got {v}")))
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("{name} must be nonnegative, got {v}")))
    }
}

/// `E_p[exp(-|p_hat - p|^2 / 2l^2)] = l^2/(s^2+l^2) exp(-|p_hat - mu|^2 / 2(s^2+l^2))`.
pub fn expected_oks(p_hat: Point, model: &AnnotationModel, l: f64) -> Result<f64> {
    positive("OKS scale", l)?;
    Ok(envelope(model.sigma, l, dist_sq(p_hat, model.mu)))
}

#[inline]
fn envelope(sigma: f64, l: f64, delta_sq: f64) -> f64 {
    let l2 = l * l;
    let total = sigma * sigma + l2;
    (l2 / total) * (-delta_sq / (2.0 * total)).exp()
}

/// Expected OKS of a prediction sitting on the annotation mean: `l^2/(s^2+l^2)`.
pub fn oracle_score(sigma: f64, l: f64) -> Result<f64> {
    positive("OKS scale", l)?;
    nonneg("sigma", sigma)?;
    Ok(envelope(sigma, l, 0.0))
}

/// Peak of the MSE-optimal heatmap: `l~^2/(s^2+l~^2)`.
pub fn heatmap_confidence(sigma: f64, l_tilde: f64) -> Result<f64> {
    positive("heatmap std", l_tilde)?;
    nonneg("sigma", sigma)?;
    Ok(envelope(sigma, l_tilde, 0.0))
}

/// `1 - sigma`. Negative for `sigma > 1`; see [`rle_confidence_clamped`].
pub fn rle_confidence(sigma: f64) -> f64 {
    1.0 - sigma
}

pub fn rle_confidence_clamped(sigma: f64) -> f64 {
    rle_confidence(sigma).clamp(0.0, 1.0)
}

/// Inverts [`heatmap_confidence`]: `sigma = l~ sqrt(1/s - 1)`, zero for `s >= 1`.
pub fn sigma_from_maxval(s_det: f64, l_tilde: f64) -> Result<f64> {
    positive("heatmap std", l_tilde)?;
    if !(s_det > 0.0) {
        return Err(domain(format!("heatmap maximum must be positive, got {s_det}")));
    }
    if s_det >= 1.0 {
        return Ok(0.0);
    }
    Ok(l_tilde * (1.0 / s_det - 1.0).sqrt())
}

/// Closed-form rescoring with the expected-OKS envelope. With `delta_hat = 0`
/// this is [`oracle_score`].
pub fn rescore(sigma: f64, l: f64, delta_hat: f64) -> Result<f64> {
    positive("OKS scale", l)?;
    nonneg("sigma", sigma)?;
    nonneg("prediction offset", delta_hat)?;
    Ok(envelope(sigma, l, delta_hat * delta_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionOptimum {
    pub sigma_star: f64,
    pub score: f64,
}

/// NLL optimum of a Gaussian regression head whose mean is stuck at
/// `mu + delta`: `sigma*^2 = sigma^2 + |delta|^2 / 2`.
pub fn imperfect_regression(sigma: f64, delta_hat: f64) -> Result<RegressionOptimum> {
    nonneg("sigma", sigma)?;
    nonneg("prediction offset", delta_hat)?;
    let sigma_star = (sigma * sigma + 0.5 * delta_hat * delta_hat).sqrt();
    Ok(RegressionOptimum {
        sigma_star,
        score: 1.0 - sigma_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionOptimum {
    /// Optimal squared width of the fitted heatmap.
    pub sigma_star_sq: f64,
    /// Optimal heatmap scale, i.e. the detection confidence.
    pub o_star: f64,
    /// `2 l~^2 / (s~^2 + sigma*^2)`: the scale without the misalignment decay
    /// `exp(-delta^2 / 2(s~^2 + sigma*^2))`. Upper bound on `o_star`, equal at zero offset.
    pub o_star_undamped: f64,
}

/// MSE optimum of a scaled Gaussian heatmap `o exp(-|m - p_hat|^2 / 2 s^2)`
/// centred at an offset prediction, fitted to the expected rendered heatmap.
///
/// With `s~^2 = sigma^2 + l~^2`:
/// `sigma*^2 = sqrt(s~^4 + delta^4/4) + delta^2/2` and
/// `o* = 2 l~^2 / (s~^2 + sigma*^2) * exp(-delta^2 / 2(s~^2 + sigma*^2))`.
pub fn imperfect_detection(sigma: f64, l_tilde: f64, delta_hat: f64) -> Result<DetectionOptimum> {
    positive("heatmap std", l_tilde)?;
    nonneg("sigma", sigma)?;
    nonneg("prediction offset", delta_hat)?;
    let lt2 = l_tilde * l_tilde;
    let s2 = sigma * sigma + lt2;
    let d2 = delta_hat * delta_hat;
    let sigma_star_sq = (s2 * s2 + d2 * d2 / 4.0).sqrt() + d2 / 2.0;
    let total = s2 + sigma_star_sq;
    let o_star_undamped = 2.0 * lt2 / total;
    Ok(DetectionOptimum {
        sigma_star_sq,
        o_star: o_star_undamped * (-d2 / (2.0 * total)).exp(),
        o_star_undamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceOptimum {
    pub b_star: f64,
    pub score: f64,
}

/// Laplace-likelihood head fitted to Gaussian noise: `b* = sqrt(2/pi) sigma`.
pub fn laplace_misspec(sigma: f64) -> Result<LaplaceOptimum> {
    nonneg("sigma", sigma)?;
    let b_star = (2.0 / std::f64::consts::PI).sqrt() * sigma;
    Ok(LaplaceOptimum {
        b_star,
        score: 1.0 - b_star,
    })
}

/// A keypoint described by its annotation noise and OKS scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyKeypoint {
    pub sigma: f64,
    pub l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisorderedPair {
    pub first: NoisyKeypoint,
    pub second: NoisyKeypoint,
}

/// Two keypoints with nearly equal annotation noise where the heatmap peak
/// prefers `first` but the expected OKS prefers `second`, because the OKS
/// scale `l` differs between them while `l~` does not.
pub fn misordered_pair(sigma: f64, l_tilde: f64) -> Result<MisorderedPair> {
    positive("sigma", sigma)?;
    positive("heatmap std", l_tilde)?;
    let first = NoisyKeypoint { sigma, l: sigma };
    let sigma2 = sigma * 1.05;
    let second = NoisyKeypoint {
        sigma: sigma2,
        l: 4.0 * sigma2,
    };
    debug_assert!(heatmap_confidence(first.sigma, l_tilde)? > heatmap_confidence(second.sigma, l_tilde)?);
    debug_assert!(oracle_score(first.sigma, first.l)? < oracle_score(second.sigma, second.l)?);
    Ok(MisorderedPair { first, second })
}
