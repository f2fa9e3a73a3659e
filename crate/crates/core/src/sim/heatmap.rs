use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{chunks, gaussian_point, stream_rng, MIN_MC_SAMPLES};
use crate::error::{domain, Error, Result};
use crate::oks::Point;
use crate::theory::AnnotationModel;

/// Pixel lattice: pixel `(i, j)` sits at `origin + pitch * (i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub origin: Point,
    pub pitch: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            width: 64,
            height: 48,
            origin: [0.0, 0.0],
            pitch: 1.0,
        }
    }
}

impl Grid {
    /// A `width x height` grid of the given pitch whose middle lands on `center`.
    pub fn centered(center: Point, width: usize, height: usize, pitch: f64) -> Self {
        Grid {
            width,
            height,
            origin: [
                center[0] - pitch * (width as f64 - 1.0) / 2.0,
                center[1] - pitch * (height as f64 - 1.0) / 2.0,
            ],
            pitch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(domain("grid dimensions must be positive"));
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return Err(domain(format!("grid pitch must be positive, got {}", self.pitch)));
        }
        if !(self.origin[0].is_finite() && self.origin[1].is_finite()) {
            return Err(domain("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + self.pitch * i as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + self.pitch * j as f64
    }

    fn contains(&self, p: Point) -> bool {
        let x1 = self.x(self.width - 1);
        let y1 = self.y(self.height - 1);
        p[0] >= self.origin[0] && p[0] <= x1 && p[1] >= self.origin[1] && p[1] <= y1
    }

    /// `exp(-(x_i - c)^2 / (2 s2))` along x.
    fn profile_x(&self, c: f64, s2: f64, out: &mut [f64]) {
        for (i, g) in out.iter_mut().enumerate() {
            let d = self.x(i) - c;
            *g = (-(d * d) / (2.0 * s2)).exp();
        }
    }

    fn profile_y(&self, c: f64, s2: f64, out: &mut [f64]) {
        for (j, g) in out.iter_mut().enumerate() {
            let d = self.y(j) - c;
            *g = (-(d * d) / (2.0 * s2)).exp();
        }
    }
}

/// Row-major grid of non-negative values, `values[j * width + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        crate::error::check_len("heatmap values", grid.width * grid.height, values.len())?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(domain("heatmap values must be finite and non-negative"));
        }
        Ok(Heatmap { grid, values })
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.width + i]
    }

    /// Peak value and its pixel; the first pixel in row-major order wins ties.
    pub fn argmax(&self) -> (f64, usize, usize) {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, &v) in self.values.iter().enumerate() {
            if v > best.0 {
                best = (v, k);
            }
        }
        (best.0, best.1 % self.grid.width, best.1 / self.grid.width)
    }

    pub fn max(&self) -> f64 {
        self.argmax().0
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(mut self, k: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(domain(format!("scale factor must be non-negative, got {k}")));
        }
        self.values.iter_mut().for_each(|v| *v *= k);
        Ok(self)
    }
}

/// How much of a rendered Gaussian fits on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Containment {
    Contained,
    /// Border pixels exceed `1e-6` of the peak.
    BorderTruncated,
    CenterOutside,
}

const BORDER_TOLERANCE: f64 = 1e-6;

/// Unit-peak isotropic Gaussian of std `l_tilde` centred on `center`.
pub fn render_heatmap(center: Point, l_tilde: f64, grid: &Grid) -> Result<(Heatmap, Containment)> {
    if !(l_tilde > 0.0 && l_tilde.is_finite()) {
        return Err(domain(format!("heatmap std must be positive, got {l_tilde}")));
    }
    if !(center[0].is_finite() && center[1].is_finite()) {
        return Err(domain("heatmap center must be finite"));
    }
    grid.validate()?;
    let (w, h) = (grid.width, grid.height);
    let s2 = l_tilde * l_tilde;
    let mut gx = vec![0.0; w];
    let mut gy = vec![0.0; h];
    grid.profile_x(center[0], s2, &mut gx);
    grid.profile_y(center[1], s2, &mut gy);
    let mut values = vec![0.0; w * h];
    for (j, row) in values.chunks_exact_mut(w).enumerate() {
        for (v, g) in row.iter_mut().zip(&gx) {
            *v = gy[j] * g;
        }
    }

    let status = if !grid.contains(center) {
        Containment::CenterOutside
    } else {
        let peak = fmax(&gx) * fmax(&gy);
        let rows = gy[0].max(gy[h - 1]) * fmax(&gx);
        let cols = gx[0].max(gx[w - 1]) * fmax(&gy);
        if rows.max(cols) > BORDER_TOLERANCE * peak {
            Containment::BorderTruncated
        } else {
            Containment::Contained
        }
    };
    Ok((Heatmap { grid: *grid, values }, status))
}

fn fmax(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Pixel-wise mean of heatmaps rendered at `n` annotation draws: the target a
/// heatmap regressor trained with MSE converges to.
pub fn mse_optimal_heatmap(
    model: &AnnotationModel,
    l_tilde: f64,
    grid: &Grid,
    n: usize,
    seed: u64,
) -> Result<Heatmap> {
    if !(l_tilde > 0.0 && l_tilde.is_finite()) {
        return Err(domain(format!("heatmap std must be positive, got {l_tilde}")));
    }
    if n < MIN_MC_SAMPLES {
        return Err(domain(format!(
            "Monte-Carlo heatmap needs at least {MIN_MC_SAMPLES} samples, got {n}"
        )));
    }
    grid.validate()?;
    let (w, h) = (grid.width, grid.height);
    let s2 = l_tilde * l_tilde;
    let parts: Vec<Vec<f64>> = chunks(n)
        .map(|(c, len)| {
            let mut rng = stream_rng(seed, c as u64);
            let mut acc = vec![0.0; w * h];
            let mut gx = vec![0.0; w];
            let mut gy = vec![0.0; h];
            for _ in 0..len {
                let p = gaussian_point(&mut rng, model);
                grid.profile_x(p[0], s2, &mut gx);
                grid.profile_y(p[1], s2, &mut gy);
                for (j, row) in acc.chunks_exact_mut(w).enumerate() {
                    let a = gy[j];
                    if a == 0.0 {
                        continue;
                    }
                    for (v, g) in row.iter_mut().zip(&gx) {
                        *v += a * g;
                    }
                }
            }
            acc
        })
        .collect();
    let mut values = vec![0.0; w * h];
    for part in parts {
        for (v, p) in values.iter_mut().zip(part) {
            *v += p;
        }
    }
    let inv = 1.0 / n as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    Ok(Heatmap { grid: *grid, values })
}

/// Best-fit scaled isotropic Gaussian `scale * exp(-|m - mean|^2 / (2 sigma_fit^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Point,
    pub sigma_fit: f64,
    pub scale: f64,
}

const FIT_FLOOR: f64 = 0.01;
const MIN_FIT_PIXELS: usize = 9;

/// Weighted least squares on log-values over pixels above 1% of the peak,
/// weights `h^2`. Falls back to moment matching when fewer than 9 pixels
/// qualify or the log-quadratic is not concave.
pub fn fit_gaussian(hm: &Heatmap) -> Result<GaussianFit> {
    let (peak, pi, pj) = hm.argmax();
    if !(peak > 0.0) {
        return Err(Error::Degenerate("heatmap has no positive mass".into()));
    }
    let g = &hm.grid;
    let (x0, y0) = (g.x(pi), g.y(pj));
    let mut a = Matrix4::<f64>::zeros();
    let mut b = Vector4::<f64>::zeros();
    let mut used = 0;
    for j in 0..g.height {
        for i in 0..g.width {
            let v = hm.get(i, j);
            if v <= FIT_FLOOR * peak {
                continue;
            }
            used += 1;
            let (u, t) = ((g.x(i) - x0) / g.pitch, (g.y(j) - y0) / g.pitch);
            let phi = Vector4::new(1.0, u, t, u * u + t * t);
            let w = v * v;
            a += w * phi * phi.transpose();
            b += w * v.ln() * phi;
        }
    }
    if used >= MIN_FIT_PIXELS {
        if let Some(theta) = a.cholesky().map(|c| c.solve(&b)) {
            if theta[3] < 0.0 {
                let s2 = -1.0 / (2.0 * theta[3]);
                let (mu, mv) = (theta[1] * s2, theta[2] * s2);
                let scale = (theta[0] + (mu * mu + mv * mv) / (2.0 * s2)).exp();
                if scale.is_finite() && scale > 0.0 {
                    return Ok(GaussianFit {
                        mean: [x0 + mu * g.pitch, y0 + mv * g.pitch],
                        sigma_fit: s2.sqrt() * g.pitch,
                        scale,
                    });
                }
            }
        }
    }
    Ok(moment_fit(hm, peak))
}

fn moment_fit(hm: &Heatmap, peak: f64) -> GaussianFit {
    let g = &hm.grid;
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for j in 0..g.height {
        for i in 0..g.width {
            let v = hm.get(i, j);
            m0 += v;
            mx += v * g.x(i);
            my += v * g.y(j);
        }
    }
    let mean = [mx / m0, my / m0];
    let mut m2 = 0.0;
    for j in 0..g.height {
        for i in 0..g.width {
            let (dx, dy) = (g.x(i) - mean[0], g.y(j) - mean[1]);
            m2 += hm.get(i, j) * (dx * dx + dy * dy);
        }
    }
    let s2 = m2 / (2.0 * m0);
    let scale = if s2 > 0.0 {
        m0 * g.pitch * g.pitch / (2.0 * std::f64::consts::PI * s2)
    } else {
        peak
    };
    GaussianFit {
        mean,
        sigma_fit: s2.sqrt(),
        scale,
    }
}

/// Least-squares fit of `scale * exp(-|m - center|^2 / (2 sigma_sq))` with the
/// center held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedCenterFit {
    pub scale: f64,
    pub sigma_sq: f64,
    /// Sum of squared residuals at the optimum.
    pub residual: f64,
}

/// Minimises the pixel MSE over `(scale, sigma_sq)`. For each `sigma_sq` the
/// optimal scale is linear, `sum(g h) / sum(g^2)`; the remaining 1-D profile is
/// scanned on a log grid and refined by golden-section search.
pub fn fit_fixed_center(hm: &Heatmap, center: Point) -> Result<FixedCenterFit> {
    if !(hm.max() > 0.0) {
        return Err(Error::Degenerate("heatmap has no positive mass".into()));
    }
    let g = &hm.grid;
    let hh: f64 = hm.values.iter().map(|v| v * v).sum();
    let mut gx = vec![0.0; g.width];
    let mut gy = vec![0.0; g.height];
    let mut profile = |log_s2: f64| -> (f64, f64) {
        let s2 = log_s2.exp();
        g.profile_x(center[0], s2, &mut gx);
        g.profile_y(center[1], s2, &mut gy);
        let gg = gx.iter().map(|v| v * v).sum::<f64>() * gy.iter().map(|v| v * v).sum::<f64>();
        let mut gh = 0.0;
        for (j, row) in hm.values.chunks_exact(g.width).enumerate() {
            let r: f64 = row.iter().zip(&gx).map(|(h, x)| h * x).sum();
            gh += gy[j] * r;
        }
        let scale = gh / gg;
        (hh - gh * gh / gg, scale)
    };

    let span = g.pitch * (g.width.max(g.height) as f64);
    let (lo, hi) = ((1e-2 * g.pitch * g.pitch).ln(), (span * span).ln());
    const SCAN: usize = 200;
    let step = (hi - lo) / SCAN as f64;
    let mut best = (f64::INFINITY, 0);
    for k in 0..=SCAN {
        let r = profile(lo + step * k as f64).0;
        if r < best.0 {
            best = (r, k);
        }
    }
    let mut a = lo + step * best.1.saturating_sub(1) as f64;
    let mut b = lo + step * (best.1 + 1).min(SCAN) as f64;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (profile(c).0, profile(d).0);
    for _ in 0..200 {
        if (b - a).abs() < 1e-14 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = profile(c).0;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = profile(d).0;
        }
    }
    let x = (a + b) / 2.0;
    let (residual, scale) = profile(x);
    Ok(FixedCenterFit {
        scale,
        sigma_sq: x.exp(),
        residual: residual.max(0.0),
    })
}
