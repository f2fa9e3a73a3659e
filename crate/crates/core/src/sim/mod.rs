//! Monte-Carlo simulation of annotation noise.
//!
//! All randomness comes from ChaCha8 streams: a 64-bit seed picks the key and
//! each block of [`CHUNK`] draws gets its own stream id. Work on different
//! chunks can therefore run on any number of threads, and the partial results
//! are always combined in chunk order, so outputs depend only on the seed.

mod bench;
mod heatmap;
mod nll;

pub use bench::{
    split_indices, synth_benchmark, PredictionError, ScoreMode, SynthBenchmark, SynthConfig,
    SynthInstance,
};
pub use heatmap::{
    fit_fixed_center, fit_gaussian, mse_optimal_heatmap, render_heatmap, Containment,
    FixedCenterFit, GaussianFit, Grid, Heatmap,
};
pub use nll::{fit_nll_gaussian, fit_nll_laplace, sample_laplace, LaplaceFit, NormalFit};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::oks::{dist_sq, Point};
use crate::theory::AnnotationModel;

/// Draws per RNG stream.
pub const CHUNK: usize = 1 << 14;

/// Smallest sample count accepted by the Monte-Carlo estimators.
pub const MIN_MC_SAMPLES: usize = 1000;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `n` draws into `(chunk index, length)` pairs.
pub(crate) fn chunks(n: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    let count = n.div_ceil(CHUNK);
    (0..count)
        .into_par_iter()
        .map(move |c| (c, CHUNK.min(n - c * CHUNK)))
}

#[inline]
pub(crate) fn gaussian_point(rng: &mut ChaCha8Rng, model: &AnnotationModel) -> Point {
    use rand::Rng;
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    [model.mu[0] + model.sigma * zx, model.mu[1] + model.sigma * zy]
}

/// `n` i.i.d. draws from `N(mu, sigma^2 I)`.
pub fn sample_keypoints(model: &AnnotationModel, n: usize, seed: u64) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    let parts: Vec<Vec<Point>> = chunks(n)
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c as u64);
            (0..len).map(|_| gaussian_point(&mut rng, model)).collect()
        })
        .collect();
    Ok(parts.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Running mean and sum of squared deviations (Chan et al. pairwise update).
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    pub(crate) fn merge(self, other: Moments) -> Moments {
        if self.n == 0.0 {
            return other;
        }
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n / n,
            m2: self.m2 + other.m2 + delta * delta * self.n * other.n / n,
        }
    }

    pub(crate) fn estimate(&self) -> McEstimate {
        let var = if self.n > 1.0 { self.m2 / (self.n - 1.0) } else { 0.0 };
        McEstimate {
            estimate: self.mean,
            std_error: (var / self.n).sqrt(),
            n: self.n as usize,
        }
    }
}

/// Sample mean and standard error of the keypoint OKS of `p_hat` over
/// annotations drawn from `model`.
pub fn mc_expected_oks(
    p_hat: Point,
    model: &AnnotationModel,
    l: f64,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(l > 0.0) {
        return Err(domain(format!("OKS scale must be positive, got {l}")));
    }
    if n < MIN_MC_SAMPLES {
        return Err(domain(format!(
            "Monte-Carlo estimate needs at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    let two_l2 = 2.0 * (l * l);
    let parts: Vec<Moments> = chunks(n)
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c as u64);
            let mut m = Moments::default();
            for _ in 0..len {
                let p = gaussian_point(&mut rng, model);
                m.push((-dist_sq(p_hat, p) / two_l2).exp());
            }
            m
        })
        .collect();
    Ok(parts
        .into_iter()
        .fold(Moments::default(), Moments::merge)
        .estimate())
}
