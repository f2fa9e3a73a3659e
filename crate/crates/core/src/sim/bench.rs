use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stream_rng;
use crate::error::{domain, Result};
use crate::oks::{
    aggregate_threshold, dist_sq, GroundTruthInstance, KeypointSpec, Point, PredictedInstance,
    DEFAULT_TAU_S,
};
use crate::theory::{heatmap_confidence, rle_confidence_clamped, DEFAULT_L_TILDE};

/// Heuristic confidence reported by the simulated estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Heatmap maximum `l~^2 / (sigma^2 + l~^2)`.
    Heatmap,
    /// `1 - sigma / regression_unit`, clamped to `[0, 1]`; also emits `sigma`.
    Regression,
}

/// Distribution of the prediction `p_hat` around the true location `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionError {
    /// `p_hat ~ N(mu, sigma^2)`, independent of the annotation.
    Sampled,
    /// `|p_hat - mu| = delta` in a uniformly random direction.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub instances: usize,
    pub spec: KeypointSpec,
    /// Per-instance annotation std in pixels, log-uniform.
    pub sigma_range: (f64, f64),
    /// Per-keypoint std is the instance std times `U(1 - spread, 1 + spread)`.
    pub keypoint_spread: f64,
    /// Instance area in square pixels, log-uniform.
    pub area_range: (f64, f64),
    pub visibility_rate: f64,
    /// Std multiplier for keypoints that are not visible.
    pub occluded_sigma_factor: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub l_tilde: f64,
    pub score_mode: ScoreMode,
    /// Pixels per regression output unit.
    pub regression_unit: f64,
    pub prediction_error: PredictionError,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 2000,
            spec: KeypointSpec::coco(),
            sigma_range: (0.5, 4.0),
            keypoint_spread: 0.5,
            area_range: (48.0 * 48.0, 320.0 * 320.0),
            visibility_rate: 0.8,
            occluded_sigma_factor: 2.0,
            feature_dim: 16,
            feature_noise: 0.1,
            l_tilde: DEFAULT_L_TILDE,
            score_mode: ScoreMode::Heatmap,
            regression_unit: 10.0,
            prediction_error: PredictionError::Sampled,
        }
    }
}

/// Latent channels mixed into the feature vectors.
const LATENT: usize = 5;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && hi >= lo && hi.is_finite() {
                Ok(())
            } else {
                Err(domain(format!("{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")))
            }
        };
        if self.instances == 0 {
            return Err(domain("benchmark needs at least one instance"));
        }
        range("sigma_range", self.sigma_range)?;
        range("area_range", self.area_range)?;
        if !(0.0..1.0).contains(&self.keypoint_spread) {
            return Err(domain("keypoint_spread must lie in [0, 1)"));
        }
        if !(self.visibility_rate > 0.0 && self.visibility_rate <= 1.0) {
            return Err(domain("visibility_rate must lie in (0, 1]"));
        }
        if !(self.occluded_sigma_factor > 0.0 && self.occluded_sigma_factor.is_finite()) {
            return Err(domain("occluded_sigma_factor must be positive"));
        }
        if self.feature_dim < LATENT {
            return Err(domain(format!("feature_dim must be at least {LATENT}")));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(domain("feature_noise must be non-negative"));
        }
        if !(self.l_tilde > 0.0 && self.regression_unit > 0.0) {
            return Err(domain("l_tilde and regression_unit must be positive"));
        }
        if let PredictionError::Fixed(d) = self.prediction_error {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(domain("fixed prediction offset must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub id: u64,
    pub gt: GroundTruthInstance,
    pub pred: PredictedInstance,
    /// One `feature_dim` vector per keypoint.
    pub features: Vec<Vec<f64>>,
    /// True annotation std per keypoint.
    pub sigma: Vec<f64>,
    /// `|p_hat - mu|` per keypoint.
    pub delta_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub config: SynthConfig,
    pub seed: u64,
    pub instances: Vec<SynthInstance>,
}

const MIX_STREAM: u64 = u64::MAX;

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Generates a benchmark whose every instance depends only on `(config, seed, index)`.
///
/// Features are a fixed random linear mixing of five per-keypoint latents:
/// the logit of the realised keypoint OKS, `ln sigma`, `ln l`, `delta / l` and
/// visibility, plus `feature_noise` white noise. With zero noise the mixing is
/// invertible, so the features determine the realised OKS exactly.
pub fn synth_benchmark(config: &SynthConfig, seed: u64) -> Result<SynthBenchmark> {
    config.validate()?;
    let mut mix_rng = stream_rng(seed, MIX_STREAM);
    let scale = 1.0 / (LATENT as f64).sqrt();
    let mix: Vec<[f64; LATENT]> = (0..config.feature_dim)
        .map(|_| std::array::from_fn(|_| normal(&mut mix_rng) * scale))
        .collect();
    let instances = (0..config.instances)
        .into_par_iter()
        .map(|i| make_instance(config, &mix, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthBenchmark {
        config: config.clone(),
        seed,
        instances,
    })
}

fn make_instance(
    cfg: &SynthConfig,
    mix: &[[f64; LATENT]],
    seed: u64,
    index: usize,
) -> Result<SynthInstance> {
    let mut rng = stream_rng(seed, index as u64);
    let k = cfg.spec.count();
    let area = log_uniform(&mut rng, cfg.area_range);
    let side = area.sqrt();
    let center = [
        side + rng.random::<f64>() * 1000.0,
        side + rng.random::<f64>() * 1000.0,
    ];
    let sigma_inst = log_uniform(&mut rng, cfg.sigma_range);
    let scales = cfg.spec.scales(area)?;

    let mut visibility: Vec<bool> = (0..k)
        .map(|_| rng.random::<f64>() < cfg.visibility_rate)
        .collect();
    if !visibility.iter().any(|v| *v) {
        visibility[rng.random_range(0..k)] = true;
    }

    let mut gt_kps = Vec::with_capacity(k);
    let mut pred_kps = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    let mut delta_hat = Vec::with_capacity(k);
    let mut kp_scores = Vec::with_capacity(k);
    let mut features = Vec::with_capacity(k);
    for kp in 0..k {
        let mu: Point = [
            center[0] + side * (rng.random::<f64>() - 0.5),
            center[1] + side * (rng.random::<f64>() - 0.5),
        ];
        let spread = 1.0 + cfg.keypoint_spread * (2.0 * rng.random::<f64>() - 1.0);
        let occl = if visibility[kp] { 1.0 } else { cfg.occluded_sigma_factor };
        let s = sigma_inst * spread * occl;
        let p = [mu[0] + s * normal(&mut rng), mu[1] + s * normal(&mut rng)];
        let p_hat = match cfg.prediction_error {
            PredictionError::Sampled => [mu[0] + s * normal(&mut rng), mu[1] + s * normal(&mut rng)],
            PredictionError::Fixed(d) => {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                [mu[0] + d * theta.cos(), mu[1] + d * theta.sin()]
            }
        };
        let l = scales[kp];
        let d = dist_sq(p_hat, mu).sqrt();
        let realised = (-dist_sq(p_hat, p) / (2.0 * (l * l))).exp();

        kp_scores.push(match cfg.score_mode {
            ScoreMode::Heatmap => heatmap_confidence(s, cfg.l_tilde)?,
            ScoreMode::Regression => rle_confidence_clamped(s / cfg.regression_unit),
        });
        let latent = [
            logit(realised) / 4.0,
            s.ln(),
            l.ln() / 2.0 - 1.0,
            d / l,
            if visibility[kp] { 0.5 } else { -0.5 },
        ];
        let f: Vec<f64> = mix
            .iter()
            .map(|row| {
                let clean: f64 = row.iter().zip(&latent).map(|(a, z)| a * z).sum();
                clean + cfg.feature_noise * normal(&mut rng)
            })
            .collect();
        features.push(f);
        gt_kps.push(p);
        pred_kps.push(p_hat);
        sigma.push(s);
        delta_hat.push(d);
    }
    let instance_conf = aggregate_threshold(&kp_scores, DEFAULT_TAU_S)?;
    let pred_sigma = match cfg.score_mode {
        ScoreMode::Regression => Some(sigma.clone()),
        ScoreMode::Heatmap => None,
    };
    Ok(SynthInstance {
        id: index as u64 + 1,
        gt: GroundTruthInstance {
            keypoints: gt_kps,
            visibility,
            area,
        },
        pred: PredictedInstance {
            keypoints: pred_kps,
            kp_scores,
            sigma: pred_sigma,
            instance_conf,
        },
        features,
        sigma,
        delta_hat,
    })
}

const SPLIT_STREAM: u64 = u64::MAX - 1;

/// Seeded shuffle split into `(train, held_out)` index lists, each sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(domain(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let mut train = idx[..cut].to_vec();
    let mut test = idx[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oks::instance_oks;
    use crate::ranking::{average_precision, EvalConfig};
    use nalgebra::DMatrix;

    fn small(noise: f64) -> SynthConfig {
        SynthConfig {
            instances: 200,
            feature_noise: noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_independent_of_count() {
        let cfg = small(0.1);
        let a = synth_benchmark(&cfg, 3).unwrap();
        assert_eq!(a, synth_benchmark(&cfg, 3).unwrap());
        let fewer = synth_benchmark(&SynthConfig { instances: 50, ..cfg.clone() }, 3).unwrap();
        assert_eq!(&a.instances[..50], &fewer.instances[..]);
        assert_ne!(a.instances, synth_benchmark(&cfg, 4).unwrap().instances);
    }

    #[test]
    fn instances_are_well_formed() {
        let cfg = small(0.1);
        let b = synth_benchmark(&cfg, 0).unwrap();
        for inst in &b.instances {
            inst.gt.validate(&cfg.spec).unwrap();
            inst.pred.validate(&cfg.spec).unwrap();
            assert!(inst.gt.num_visible() >= 1);
            assert!(inst.gt.area >= cfg.area_range.0 && inst.gt.area <= cfg.area_range.1);
            assert!(inst.features.iter().all(|f| f.len() == cfg.feature_dim));
            assert!(inst.pred.sigma.is_none());
        }
        let reg = synth_benchmark(&SynthConfig { score_mode: ScoreMode::Regression, ..cfg }, 0).unwrap();
        assert!(reg.instances.iter().all(|i| i.pred.sigma.as_ref() == Some(&i.sigma)));
    }

    #[test]
    fn noiseless_features_determine_oks() {
        let cfg = small(0.0);
        let b = synth_benchmark(&cfg, 1).unwrap();
        let rows: Vec<(Vec<f64>, f64)> = b
            .instances
            .iter()
            .flat_map(|inst| {
                let scales = cfg.spec.scales(inst.gt.area).unwrap();
                (0..cfg.spec.count()).map(move |k| {
                    let l = scales[k];
                    let s = (-dist_sq(inst.pred.keypoints[k], inst.gt.keypoints[k]) / (2.0 * l * l)).exp();
                    (inst.features[k].clone(), s)
                })
            })
            .filter(|(_, s)| *s > 1e-5 && *s < 1.0 - 1e-5)
            .collect();
        let x = DMatrix::from_fn(rows.len(), cfg.feature_dim, |r, c| rows[r].0[c]);
        let y = nalgebra::DVector::from_fn(rows.len(), |r, _| logit(rows[r].1));
        let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        let fitted = &x * w;
        let worst = fitted
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "worst residual {worst}");
    }

    #[test]
    fn fixed_offset_mode() {
        let cfg = SynthConfig {
            prediction_error: PredictionError::Fixed(1.5),
            ..small(0.1)
        };
        let b = synth_benchmark(&cfg, 2).unwrap();
        for inst in &b.instances {
            assert!(inst.delta_hat.iter().all(|d| (d - 1.5).abs() < 1e-9));
        }
    }

    #[test]
    fn oracle_beats_heuristic() {
        let cfg = small(0.1);
        let b = synth_benchmark(&cfg, 0).unwrap();
        let oks: Vec<f64> = b
            .instances
            .iter()
            .map(|i| instance_oks(&i.pred, &i.gt, &cfg.spec).unwrap())
            .collect();
        let heur: Vec<f64> = b.instances.iter().map(|i| i.pred.instance_conf).collect();
        let ec = EvalConfig::default();
        let oracle = average_precision(&oks, &oks, &ec).unwrap().map;
        let h = average_precision(&oks, &heur, &ec).unwrap().map;
        assert!(oracle >= h);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_benchmark(&SynthConfig { instances: 0, ..SynthConfig::default() }, 0).is_err());
        assert!(synth_benchmark(&SynthConfig { sigma_range: (2.0, 1.0), ..SynthConfig::default() }, 0).is_err());
        assert!(synth_benchmark(&SynthConfig { feature_dim: 3, ..SynthConfig::default() }, 0).is_err());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let (train, test) = split_indices(100, 0.8, 5).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let mut all = [train.clone(), test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.8, 5).unwrap(), (train, test));
        assert!(split_indices(10, 1.0, 0).is_err());
    }
}
