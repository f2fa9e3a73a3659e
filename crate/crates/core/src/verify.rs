//! Closed form against Monte Carlo, check by check.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::sim::{
    fit_fixed_center, fit_gaussian, fit_nll_gaussian, fit_nll_laplace, mc_expected_oks,
    mse_optimal_heatmap, sample_keypoints, sample_laplace, Grid,
};
use crate::theory::{
    expected_oks, heatmap_confidence, imperfect_detection, imperfect_regression, laplace_misspec,
    AnnotationModel, DEFAULT_L_TILDE,
};

pub const GRID_SIGMAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 4.0];
pub const GRID_SCALES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const GRID_OFFSETS: [f64; 3] = [0.0, 1.0, 2.0];
pub const SWEEP_SIGMAS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub mc_samples: usize,
    pub heatmap_samples: usize,
    pub nll_samples: usize,
    pub l_tilde: f64,
    /// Annotation std for the imperfect-detection sweep.
    pub detection_sigma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            mc_samples: 1_000_000,
            heatmap_samples: 100_000,
            nll_samples: 1_000_000,
            l_tilde: DEFAULT_L_TILDE,
            detection_sigma: 1.0,
        }
    }
}

/// How `deviation` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    /// `|observed - expected|` in Monte-Carlo standard errors.
    StdErrors,
    /// `|observed / expected - 1|`.
    Relative,
    /// 1 when the sequence is strictly decreasing, else 0.
    Monotone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub group: String,
    pub case: String,
    pub observed: f64,
    pub expected: f64,
    pub measure: Measure,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn relative(group: &str, case: String, observed: f64, expected: f64, tolerance: f64) -> Self {
        let deviation = (observed / expected - 1.0).abs();
        Check {
            group: group.into(),
            case,
            observed,
            expected,
            measure: Measure::Relative,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub maxval: f64,
    pub maxval_closed_form: f64,
    pub fitted_std: f64,
    pub std_closed_form: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub checks: Vec<Check>,
    pub sweep: Vec<SweepRow>,
}

impl SimReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("group,case,observed,expected,measure,deviation,tolerance,result\n");
        for c in &self.checks {
            let measure = match c.measure {
                Measure::StdErrors => "std-errors",
                Measure::Relative => "relative",
                Measure::Monotone => "monotone",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.group,
                c.case,
                c.observed,
                c.expected,
                measure,
                c.deviation,
                c.tolerance,
                if c.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("sigma,maxval,maxval_closed_form,fitted_std,std_closed_form\n");
        for r in &self.sweep {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.sigma, r.maxval, r.maxval_closed_form, r.fitted_std, r.std_closed_form
            ));
        }
        out
    }
}

fn sub_seed(seed: u64, group: u64, case: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(group << 32)
        .wrapping_add(case)
}

/// Monte-Carlo expected OKS against the closed form on the full
/// `(sigma, l, delta)` grid, within 3 standard errors.
pub fn expected_oks_grid(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut case = 0;
    for &sigma in &GRID_SIGMAS {
        for &l in &GRID_SCALES {
            for &delta in &GRID_OFFSETS {
                let model = AnnotationModel::new([0.0, 0.0], sigma)?;
                let p_hat = [delta, 0.0];
                let mc = mc_expected_oks(p_hat, &model, l, n, sub_seed(seed, 1, case))?;
                let cf = expected_oks(p_hat, &model, l)?;
                let gap = (mc.estimate - cf).abs();
                let deviation = if gap == 0.0 { 0.0 } else { gap / mc.std_error };
                out.push(Check {
                    group: "expected-oks".into(),
                    case: format!("sigma={sigma} l={l} delta={delta}"),
                    observed: mc.estimate,
                    expected: cf,
                    measure: Measure::StdErrors,
                    deviation,
                    tolerance: 3.0,
                    pass: deviation <= 3.0,
                });
                case += 1;
            }
        }
    }
    Ok(out)
}

/// Centre of the default grid, on a pixel.
pub const HEATMAP_CENTER: [f64; 2] = [32.0, 24.0];

/// MSE-optimal heatmap peak and fitted width against `l~^2 / (sigma^2 + l~^2)`
/// and `sqrt(sigma^2 + l~^2)`, within 2%.
pub fn heatmap_checks(sigmas: &[f64], l_tilde: f64, n: usize, seed: u64) -> Result<(Vec<Check>, Vec<SweepRow>)> {
    let grid = Grid::default();
    let mut checks = Vec::new();
    let mut sweep = Vec::new();
    for (i, &sigma) in sigmas.iter().enumerate() {
        let model = AnnotationModel::new(HEATMAP_CENTER, sigma)?;
        let hm = mse_optimal_heatmap(&model, l_tilde, &grid, n, sub_seed(seed, 2, i as u64))?;
        let fit = fit_gaussian(&hm)?;
        let row = SweepRow {
            sigma,
            maxval: hm.max(),
            maxval_closed_form: heatmap_confidence(sigma, l_tilde)?,
            fitted_std: fit.sigma_fit,
            std_closed_form: (sigma * sigma + l_tilde * l_tilde).sqrt(),
        };
        checks.push(Check::relative("heatmap-maxval", format!("sigma={sigma}"), row.maxval, row.maxval_closed_form, 0.02));
        checks.push(Check::relative("heatmap-std", format!("sigma={sigma}"), row.fitted_std, row.std_closed_form, 0.02));
        sweep.push(row);
    }
    Ok((checks, sweep))
}

/// Likelihood optima: free Gaussian, Gaussian with the mean held off-centre,
/// Laplace on Gaussian data and Laplace on Laplace data.
pub fn nll_checks(n: usize, seed: u64) -> Result<Vec<Check>> {
    let sigma = 1.0;
    let model = AnnotationModel::new([0.0, 0.0], sigma)?;
    let pts = sample_keypoints(&model, n, sub_seed(seed, 3, 0))?;
    let mut out = vec![Check::relative(
        "nll-gaussian",
        format!("sigma={sigma}"),
        fit_nll_gaussian(&pts, None)?.sigma_hat,
        sigma,
        0.02,
    )];
    for delta in [0.5, 1.0, 2.0, 3.0] {
        let off = delta / 2f64.sqrt();
        let fit = fit_nll_gaussian(&pts, Some([off, off]))?;
        let target = imperfect_regression(sigma, delta)?.sigma_star;
        out.push(Check::relative(
            "nll-imperfect-regression",
            format!("sigma={sigma} delta={delta}"),
            fit.sigma_hat * fit.sigma_hat,
            target * target,
            0.02,
        ));
    }
    out.push(Check::relative(
        "nll-laplace-misspecified",
        format!("sigma={sigma}"),
        fit_nll_laplace(&pts, Some([0.0, 0.0]))?.b_hat,
        laplace_misspec(sigma)?.b_star,
        0.01,
    ));
    let b = 1.3;
    let lap = sample_laplace([0.0, 0.0], b, n, sub_seed(seed, 3, 1))?;
    out.push(Check::relative(
        "nll-laplace",
        format!("b={b}"),
        fit_nll_laplace(&lap, None)?.b_hat,
        b,
        0.01,
    ));
    Ok(out)
}

/// Offsets of the imperfect-detection sweep.
pub fn detection_offsets() -> Vec<f64> {
    (0..=12).map(|i| i as f64 * 0.25).collect()
}

/// Scaled Gaussian fitted by least squares around an offset centre on the
/// Monte-Carlo MSE-optimal heatmap, against the closed-form optimum; the
/// fitted scale must fall strictly with the offset.
pub fn detection_checks(sigma: f64, l_tilde: f64, n: usize, seed: u64) -> Result<Vec<Check>> {
    let model = AnnotationModel::new(HEATMAP_CENTER, sigma)?;
    let hm = mse_optimal_heatmap(&model, l_tilde, &Grid::default(), n, sub_seed(seed, 4, 0))?;
    let mut out = Vec::new();
    let mut scales = Vec::new();
    for delta in detection_offsets() {
        let fit = fit_fixed_center(&hm, [HEATMAP_CENTER[0] + delta, HEATMAP_CENTER[1]])?;
        let cf = imperfect_detection(sigma, l_tilde, delta)?;
        out.push(Check::relative("detection-scale", format!("delta={delta}"), fit.scale, cf.o_star, 0.01));
        out.push(Check::relative("detection-width", format!("delta={delta}"), fit.sigma_sq, cf.sigma_star_sq, 0.01));
        scales.push(fit.scale);
    }
    let monotone = scales.windows(2).all(|w| w[1] < w[0]);
    out.push(Check {
        group: "detection-monotone".into(),
        case: format!("sigma={sigma}"),
        observed: if monotone { 1.0 } else { 0.0 },
        expected: 1.0,
        measure: Measure::Monotone,
        deviation: if monotone { 0.0 } else { 1.0 },
        tolerance: 0.0,
        pass: monotone,
    });
    Ok(out)
}

pub fn run_suite(cfg: &SimConfig) -> Result<SimReport> {
    let mut checks = expected_oks_grid(cfg.mc_samples, cfg.seed)?;
    let (hm, sweep) = heatmap_checks(&SWEEP_SIGMAS, cfg.l_tilde, cfg.heatmap_samples, cfg.seed)?;
    checks.extend(hm);
    checks.extend(nll_checks(cfg.nll_samples, cfg.seed)?);
    checks.extend(detection_checks(cfg.detection_sigma, cfg.l_tilde, cfg.heatmap_samples, cfg.seed)?);
    Ok(SimReport { checks, sweep })
}

/// Runs the suite and writes `simulate.csv` and `sigma_sweep.csv`. The report
/// is returned even when checks fail; callers decide how to surface that.
pub fn cmd_simulate(cfg: &SimConfig, out: &Path) -> Result<SimReport> {
    if !(cfg.l_tilde > 0.0 && cfg.detection_sigma >= 0.0) {
        return Err(Error::Config("l_tilde must be positive and detection_sigma non-negative".into()));
    }
    let report = run_suite(cfg).map_err(|e| match e {
        Error::Domain(m) => Error::Config(m),
        other => other,
    })?;
    io::write_atomic(&out.join("simulate.csv"), report.table_csv().as_bytes())?;
    io::write_atomic(&out.join("sigma_sweep.csv"), report.sweep_csv().as_bytes())?;
    Ok(report)
}
