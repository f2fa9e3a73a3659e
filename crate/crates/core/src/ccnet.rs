//! Post-hoc calibration head.
//!
//! One fully connected layer maps keypoint `k`'s feature vector to a
//! confidence logit (row `k`) and a visibility logit (row `K + k`); both pass
//! through the logistic function. Training minimises
//!
//! `sum_k v_k (s_hat_k - s_k)^2 + lambda * sum_k BCE(v_hat_k, v_k)`
//!
//! averaged over instances, where `s_k` is the realised keypoint OKS. Only the
//! head changes, so predicted keypoint locations and hence mAR are untouched.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::io::Pair;
use crate::oks::{aggregate_soft, keypoint_oks, KeypointSpec};
use crate::sim::{stream_rng, SynthBenchmark};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibHead {
    pub keypoints: usize,
    pub feature_dim: usize,
    /// `2K x F`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl CalibHead {
    pub fn zeros(keypoints: usize, feature_dim: usize) -> Result<Self> {
        if keypoints == 0 || feature_dim == 0 {
            return Err(domain("head dimensions must be positive"));
        }
        Ok(CalibHead {
            keypoints,
            feature_dim,
            weights: vec![0.0; 2 * keypoints * feature_dim],
            bias: vec![0.0; 2 * keypoints],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 || self.feature_dim == 0 {
            return Err(domain("head dimensions must be positive"));
        }
        crate::error::check_len("head weights", 2 * self.keypoints * self.feature_dim, self.weights.len())?;
        crate::error::check_len("head bias", 2 * self.keypoints, self.bias.len())?;
        if self.weights.iter().chain(&self.bias).any(|w| !w.is_finite()) {
            return Err(domain("head parameters must be finite"));
        }
        Ok(())
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn params_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|w| w.is_finite())
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.feature_dim..(r + 1) * self.feature_dim]
    }

    /// Confidence and visibility logits.
    fn logits(&self, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.keypoints;
        if features.len() != k {
            return Err(domain(format!(
                "head expects {k} feature vectors, got {}",
                features.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.len() != self.feature_dim) {
            return Err(domain(format!(
                "head expects feature dimension {}, got {}",
                self.feature_dim,
                f.len()
            )));
        }
        let dot = |r: usize, x: &[f64]| -> f64 {
            self.row(r).iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.bias[r]
        };
        let z = (0..k).map(|i| dot(i, &features[i])).collect();
        let u = (0..k).map(|i| dot(k + i, &features[i])).collect();
        Ok((z, u))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logits beyond this saturate the logistic to exactly 0 or 1 in double precision.
const LOGIT_LIMIT: f64 = 36.0;

fn squash(x: f64) -> f64 {
    sigmoid(x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT))
}

/// Calibrated keypoint confidences and visibilities, each in `(0, 1)`.
pub fn forward(features: &[Vec<f64>], head: &CalibHead) -> Result<(Vec<f64>, Vec<f64>)> {
    let (z, u) = head.logits(features)?;
    Ok((
        z.into_iter().map(squash).collect(),
        u.into_iter().map(squash).collect(),
    ))
}

/// Instance confidence: visibility-weighted mean of the calibrated scores.
pub fn instance_confidence(
    features: &[Vec<f64>],
    head: &CalibHead,
    subset: Option<&[usize]>,
) -> Result<f64> {
    let (s, v) = forward(features, head)?;
    Ok(aggregate_soft(&s, &v, subset)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceLoss {
    #[default]
    Mse,
    /// Binary cross-entropy against the soft OKS target.
    CrossEntropy,
}

fn bce(p: f64, y: f64) -> f64 {
    let mut out = 0.0;
    if y > 0.0 {
        out -= y * p.ln();
    }
    if y < 1.0 {
        out -= (1.0 - y) * (1.0 - p).ln();
    }
    out
}

/// Per-instance calibration loss. Invisible keypoints carry no confidence term.
pub fn loss(
    s_hat: &[f64],
    v_hat: &[f64],
    s: &[f64],
    v: &[bool],
    lambda_vis: f64,
    kind: ConfidenceLoss,
) -> Result<f64> {
    let k = s_hat.len();
    crate::error::check_len("visibility predictions", k, v_hat.len())?;
    crate::error::check_len("OKS targets", k, s.len())?;
    crate::error::check_len("visibility labels", k, v.len())?;
    if !(lambda_vis >= 0.0) {
        return Err(domain(format!("lambda_vis must be >= 0, got {lambda_vis}")));
    }
    let mut total = 0.0;
    for i in 0..k {
        let vi = if v[i] { 1.0 } else { 0.0 };
        let conf = match kind {
            ConfidenceLoss::Mse => (s_hat[i] - s[i]).powi(2),
            ConfidenceLoss::CrossEntropy => bce(s_hat[i], s[i]),
        };
        total += vi * conf + lambda_vis * bce(v_hat[i], vi);
    }
    Ok(total)
}

/// Features with per-keypoint OKS targets and visibility labels for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub visibility: Vec<bool>,
}

/// Training samples for the listed benchmark instances.
pub fn training_samples(bench: &SynthBenchmark, indices: &[usize]) -> Result<Vec<TrainSample>> {
    indices
        .iter()
        .map(|&i| {
            let inst = bench
                .instances
                .get(i)
                .ok_or_else(|| domain(format!("instance index {i} out of range")))?;
            sample_from(
                &bench.config.spec,
                &inst.features,
                &inst.pred.keypoints,
                &inst.gt.keypoints,
                &inst.gt.visibility,
                inst.gt.area,
            )
        })
        .collect()
}

/// Training samples from aligned pairs; every prediction must carry features.
pub fn training_samples_from_pairs(pairs: &[Pair], spec: &KeypointSpec) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .map(|p| {
            let feats = p
                .features
                .as_ref()
                .ok_or_else(|| Error::Config(format!("prediction {} has no `features`", p.id)))?;
            sample_from(spec, feats, &p.pred.keypoints, &p.gt.keypoints, &p.gt.visibility, p.gt.area)
        })
        .collect()
}

/// Builds a training sample from predicted and annotated geometry.
pub fn sample_from(
    spec: &KeypointSpec,
    features: &[Vec<f64>],
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    visibility: &[bool],
    area: f64,
) -> Result<TrainSample> {
    let scales = spec.scales(area)?;
    let targets = (0..spec.count())
        .map(|k| keypoint_oks(pred[k], gt[k], scales[k]))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainSample {
        features: features.to_vec(),
        targets,
        visibility: visibility.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_vis: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_step_epochs` epochs.
    pub lr_step_epochs: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: ConfidenceLoss,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_vis: 2e-2,
            epochs: 2,
            learning_rate: 0.05,
            lr_step_epochs: 1,
            lr_decay: 0.5,
            batch_size: 16,
            seed: 0,
            loss: ConfidenceLoss::Mse,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_vis >= 0.0 && self.lambda_vis.is_finite()) {
            return Err(domain("lambda_vis must be >= 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(domain("epochs, batch_size and lr_step_epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(domain("learning_rate must be > 0 and lr_decay in (0, 1]"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(domain("Adam parameters out of range"));
        }
        Ok(())
    }
}

/// Mean loss over `batch` and its gradient, laid out as weights then bias.
pub fn batch_loss_grad(
    head: &CalibHead,
    batch: &[TrainSample],
    lambda_vis: f64,
    kind: ConfidenceLoss,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(domain("empty batch"));
    }
    let (k, f) = (head.keypoints, head.feature_dim);
    let nw = head.weights.len();
    let mut grad = vec![0.0; head.param_count()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        crate::error::check_len("OKS targets", k, sample.targets.len())?;
        crate::error::check_len("visibility labels", k, sample.visibility.len())?;
        let (z, u) = head.logits(&sample.features)?;
        for i in 0..k {
            let vi = if sample.visibility[i] { 1.0 } else { 0.0 };
            let s = sample.targets[i];
            let sh = sigmoid(z[i]);
            let (conf_loss, dz) = match kind {
                ConfidenceLoss::Mse => (
                    vi * (sh - s).powi(2),
                    vi * 2.0 * (sh - s) * sh * (1.0 - sh),
                ),
                ConfidenceLoss::CrossEntropy => (
                    vi * (softplus(z[i]) - s * z[i]),
                    vi * (sh - s),
                ),
            };
            let vis_loss = lambda_vis * (softplus(u[i]) - vi * u[i]);
            let du = lambda_vis * (sigmoid(u[i]) - vi);
            total += scale * (conf_loss + vis_loss);

            let x = &sample.features[i];
            for (r, d) in [(i, dz), (k + i, du)] {
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[r * f..(r + 1) * f];
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += scale * d * xj;
                }
                grad[nw + r] += scale * d;
            }
        }
    }
    Ok((total, grad))
}

fn set_param(head: &mut CalibHead, idx: usize, value: f64) {
    let nw = head.weights.len();
    if idx < nw {
        head.weights[idx] = value;
    } else {
        head.bias[idx - nw] = value;
    }
}

fn get_param(head: &CalibHead, idx: usize) -> f64 {
    let nw = head.weights.len();
    if idx < nw {
        head.weights[idx]
    } else {
        head.bias[idx - nw]
    }
}

/// Mean calibration loss over the samples.
pub fn mean_loss(head: &CalibHead, batch: &[TrainSample], cfg: &TrainConfig) -> Result<f64> {
    Ok(batch_loss_grad(head, batch, cfg.lambda_vis, cfg.loss)?.0)
}

/// Adam with step decay over shuffled mini-batches. Zero-initialised and
/// single-threaded, so the result depends only on the data and `cfg`.
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<CalibHead> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| domain("no training samples"))?;
    let k = first.features.len();
    let f = first.features.first().map_or(0, |x| x.len());
    let mut head = CalibHead::zeros(k, f)?;
    let p = head.param_count();
    let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_step_epochs) as i32);
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i].clone()));
            let last_good = head.clone();
            let (l, grad) = batch_loss_grad(&head, &batch, cfg.lambda_vis, cfg.loss)?;
            t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for j in 0..p {
                let g = grad[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
                let w = get_param(&head, j);
                set_param(&mut head, j, w - update);
            }
            if !l.is_finite() || !head.params_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(last_good),
                });
            }
        }
    }
    Ok(head)
}

/// Finite-difference step used by [`analytic_grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Largest deviation between the analytic gradient and central differences,
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`, over all parameters.
pub fn analytic_grad_check(head: &CalibHead, batch: &[TrainSample], cfg: &TrainConfig) -> Result<f64> {
    head.validate()?;
    let (_, grad) = batch_loss_grad(head, batch, cfg.lambda_vis, cfg.loss)?;
    let mut probe = head.clone();
    let mut worst: f64 = 0.0;
    for (j, &a) in grad.iter().enumerate() {
        let w = get_param(head, j);
        set_param(&mut probe, j, w + GRAD_CHECK_STEP);
        let up = mean_loss(&probe, batch, cfg)?;
        set_param(&mut probe, j, w - GRAD_CHECK_STEP);
        let down = mean_loss(&probe, batch, cfg)?;
        set_param(&mut probe, j, w);
        let n = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let dev = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Analytic gradient only; exposed for tests and diagnostics.
pub fn gradient(head: &CalibHead, batch: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    Ok(batch_loss_grad(head, batch, cfg.lambda_vis, cfg.loss)?.1)
}
