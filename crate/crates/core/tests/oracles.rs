//! Closed forms checked against direct numerical quadrature and 1-D minimisation.

use approx::assert_relative_eq;
use posecal::theory::{
    expected_oks, heatmap_confidence, imperfect_detection, imperfect_regression, laplace_misspec,
    rescore, AnnotationModel,
};

const NODES: usize = 4001;

/// Trapezoid rule of `f` against a centred normal density with std `sigma`.
fn normal_expectation(sigma: f64, f: impl Fn(f64) -> f64) -> f64 {
    let half = 12.0 * sigma;
    let h = 2.0 * half / (NODES - 1) as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    (0..NODES)
        .map(|i| {
            let x = -half + h * i as f64;
            let w = if i == 0 || i == NODES - 1 { 0.5 } else { 1.0 };
            w * norm * (-x * x / (2.0 * sigma * sigma)).exp() * f(x)
        })
        .sum::<f64>()
        * h
}

/// `E|x|` for a centred normal via Simpson's rule on the half line.
fn normal_abs_moment(sigma: f64) -> f64 {
    let m = 4000;
    let h = 12.0 * sigma / m as f64;
    let f = |x: f64| x * (-x * x / (2.0 * sigma * sigma)).exp();
    let mut acc = f(0.0) + f(12.0 * sigma);
    for i in 1..m {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(h * i as f64);
    }
    2.0 * acc * h / 3.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn golden_min(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

#[test]
fn expected_oks_matches_quadrature() {
    for sigma in [0.3, 1.0, 2.5] {
        for l in [0.7, 2.0, 9.0] {
            for (dx, dy) in [(0.0, 0.0), (1.5, 0.0), (-0.8, 2.2)] {
                let gx = normal_expectation(sigma, |x| (-(dx - x) * (dx - x) / (2.0 * l * l)).exp());
                let gy = normal_expectation(sigma, |y| (-(dy - y) * (dy - y) / (2.0 * l * l)).exp());
                let model = AnnotationModel::new([0.0, 0.0], sigma).unwrap();
                let cf = expected_oks([dx, dy], &model, l).unwrap();
                assert_relative_eq!(cf, gx * gy, max_relative = 1e-9);
                let delta = (dx * dx + dy * dy).sqrt();
                assert_relative_eq!(rescore(sigma, l, delta).unwrap(), gx * gy, max_relative = 1e-9);
            }
        }
    }
}

#[test]
fn heatmap_peak_matches_quadrature() {
    for sigma in [0.5, 1.0, 2.0, 3.0] {
        let lt = 2.0;
        let axis = normal_expectation(sigma, |x| (-x * x / (2.0 * lt * lt)).exp());
        assert_relative_eq!(heatmap_confidence(sigma, lt).unwrap(), axis * axis, max_relative = 1e-9);
    }
}

#[test]
fn gaussian_nll_optimum_under_offset() {
    let sigma = 1.3;
    for delta in [0.0, 0.5, 1.0, 2.0, 3.0] {
        let (dx, dy) = (delta * 0.6, delta * 0.8);
        let sq = normal_expectation(sigma, |x| (x - dx) * (x - dx)) + normal_expectation(sigma, |y| (y - dy) * (y - dy));
        let s = golden_min(1e-3, 20.0, |s| 2.0 * s.ln() + sq / (2.0 * s * s));
        assert_relative_eq!(imperfect_regression(sigma, delta).unwrap().sigma_star, s, max_relative = 1e-7);
    }
}

#[test]
fn laplace_nll_optimum_on_gaussian_noise() {
    for sigma in [0.4, 1.0, 2.7] {
        let abs = 2.0 * normal_abs_moment(sigma);
        let b = golden_min(1e-3, 20.0, |b| 2.0 * b.ln() + abs / b);
        assert_relative_eq!(laplace_misspec(sigma).unwrap().b_star, b, max_relative = 1e-7);
    }
}

/// Least-squares fit of `o exp(-|m - (delta,0)|^2 / 2 s2)` to the expected heatmap
/// `(lt^2/st2) exp(-|m|^2 / 2 st2)` over a fine planar grid.
fn detection_fit(sigma: f64, lt: f64, delta: f64) -> (f64, f64) {
    let st2 = sigma * sigma + lt * lt;
    let (h, half) = (0.05, 30.0);
    let n = (2.0 * half / h) as usize + 1;
    let coords: Vec<f64> = (0..n).map(|i| -half + h * i as f64).collect();
    let target_x: Vec<f64> = coords.iter().map(|x| (-x * x / (2.0 * st2)).exp()).collect();
    let amp = lt * lt / st2;
    // Both surfaces factor over axes, so the planar inner products do too.
    let project = |s2: f64| {
        let gx: Vec<f64> = coords.iter().map(|x| (-(x - delta) * (x - delta) / (2.0 * s2)).exp()).collect();
        let gy: Vec<f64> = coords.iter().map(|y| (-y * y / (2.0 * s2)).exp()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let tg = amp * dot(&target_x, &gx) * dot(&target_x, &gy);
        let gg = dot(&gx, &gx) * dot(&gy, &gy);
        (tg / gg, tg * tg / gg)
    };
    let s2 = golden_min(0.5, 100.0, |s2| -project(s2).1);
    (project(s2).0, s2)
}

#[test]
fn detection_optimum_matches_direct_fit() {
    for (sigma, lt) in [(1.0, 2.0), (0.5, 1.5), (2.0, 2.0)] {
        for delta in [0.0, 0.75, 1.5, 3.0] {
            let (o, s2) = detection_fit(sigma, lt, delta);
            let cf = imperfect_detection(sigma, lt, delta).unwrap();
            assert_relative_eq!(cf.o_star, o, max_relative = 1e-6);
            assert_relative_eq!(cf.sigma_star_sq, s2, max_relative = 1e-6);
        }
    }
}

#[test]
fn frozen_reference_values() {
    let d = imperfect_detection(0.0, 2.0, 2f64.sqrt()).unwrap();
    assert_relative_eq!(d.o_star, 0.785856926589236, max_relative = 1e-12);
    assert_relative_eq!(heatmap_confidence(1.0, 2.0).unwrap(), 0.8, max_relative = 1e-15);
    assert_relative_eq!(laplace_misspec(1.0).unwrap().b_star, 0.7978845608028654, max_relative = 1e-15);
}
