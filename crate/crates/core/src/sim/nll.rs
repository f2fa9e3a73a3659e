use rand::distr::Open01;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{chunks, stream_rng};
use crate::error::{domain, Result};
use crate::oks::Point;

/// Isotropic Gaussian maximum-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalFit {
    pub p_hat: Point,
    pub sigma_hat: f64,
}

/// Product-Laplace maximum-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub p_hat: Point,
    pub b_hat: f64,
}

fn check_samples(samples: &[Point]) -> Result<()> {
    if samples.len() < 2 {
        return Err(domain(format!(
            "likelihood fit needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(domain("samples must be finite"));
    }
    Ok(())
}

/// Running mean; exact when every sample is equal.
fn mean(samples: &[Point]) -> Point {
    let mut m = [0.0, 0.0];
    for (k, p) in samples.iter().enumerate() {
        let n = (k + 1) as f64;
        m[0] += (p[0] - m[0]) / n;
        m[1] += (p[1] - m[1]) / n;
    }
    m
}

/// Minimises the Gaussian NLL. With `p_hat_fixed` only the std is fitted,
/// which gives the imperfect-regression optimum `sigma^2 + |delta|^2 / 2`.
pub fn fit_nll_gaussian(samples: &[Point], p_hat_fixed: Option<Point>) -> Result<NormalFit> {
    check_samples(samples)?;
    let p_hat = p_hat_fixed.unwrap_or_else(|| mean(samples));
    let ss: f64 = samples
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - p_hat[0], p[1] - p_hat[1]);
            dx * dx + dy * dy
        })
        .sum();
    Ok(NormalFit {
        p_hat,
        sigma_hat: (ss / (2.0 * samples.len() as f64)).sqrt(),
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    let n = xs.len();
    let mid = n / 2;
    let (_, hi, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        return hi;
    }
    let lo = xs[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lo + (hi - lo) / 2.0
}

/// Minimises the NLL of `exp(-|x|/b - |y|/b) / (4 b^2)`: per-axis median and
/// `b = sum |p - p_hat|_1 / (2n)`.
pub fn fit_nll_laplace(samples: &[Point], p_hat_fixed: Option<Point>) -> Result<LaplaceFit> {
    check_samples(samples)?;
    let p_hat = p_hat_fixed.unwrap_or_else(|| {
        [
            median(samples.iter().map(|p| p[0]).collect()),
            median(samples.iter().map(|p| p[1]).collect()),
        ]
    });
    let l1: f64 = samples
        .iter()
        .map(|p| (p[0] - p_hat[0]).abs() + (p[1] - p_hat[1]).abs())
        .sum();
    Ok(LaplaceFit {
        p_hat,
        b_hat: l1 / (2.0 * samples.len() as f64),
    })
}

/// `n` draws with independent Laplace(center_i, b) coordinates.
pub fn sample_laplace(center: Point, b: f64, n: usize, seed: u64) -> Result<Vec<Point>> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(domain(format!("Laplace scale must be non-negative, got {b}")));
    }
    if n == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
        -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    };
    let parts: Vec<Vec<Point>> = chunks(n)
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c as u64);
            (0..len)
                .map(|_| {
                    let x = draw(&mut rng);
                    let y = draw(&mut rng);
                    [center[0] + x, center[1] + y]
                })
                .collect()
        })
        .collect();
    Ok(parts.concat())
}
