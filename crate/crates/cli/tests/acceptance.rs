//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posecal::ccnet::{analytic_grad_check, train, training_samples, CalibHead, TrainConfig};
use posecal::io::benchmark_pairs;
use posecal::pipeline::{evaluate_pairs, train_calibration, ConfidenceMode, RunConfig, TRAIN_FRACTION};
use posecal::ranking::{average_precision, EvalConfig};
use posecal::sim::{
    fit_fixed_center, fit_gaussian, fit_nll_gaussian, fit_nll_laplace, mc_expected_oks,
    mse_optimal_heatmap, sample_keypoints, synth_benchmark, Grid, SynthConfig,
};
use posecal::theory::{expected_oks, imperfect_detection, laplace_misspec, AnnotationModel};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = posecal::Result<Outcome>;
type Criterion = (&'static str, Box<dyn FnOnce() -> Check>);

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let mut out = f()?;
    let took = start.elapsed();
    out.detail.push_str(&format!("; {:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs()));
    out.pass &= took < limit;
    Ok(out)
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn expected_oks_grid() -> Check {
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    let mut seed = 1000;
    for sigma in [0.0, 0.5, 1.0, 2.0, 4.0] {
        for l in [1.0, 2.0, 4.0, 8.0, 16.0] {
            for delta in [0.0, 1.0, 2.0] {
                let model = AnnotationModel::new([0.0, 0.0], sigma)?;
                let mc = mc_expected_oks([delta, 0.0], &model, l, 1_000_000, seed)?;
                let cf = expected_oks([delta, 0.0], &model, l)?;
                let gap = (mc.estimate - cf).abs();
                let z = if gap == 0.0 { 0.0 } else { gap / mc.std_error };
                worst = worst.max(z);
                if z > 3.0 {
                    fails += 1;
                }
                seed += 1;
            }
        }
    }
    Ok(Outcome {
        pass: fails == 0,
        detail: format!("75 grid points, {fails} outside 3 SE, worst {worst:.3} SE"),
    })
}

fn heatmap_derivation() -> Check {
    let grid = Grid::default();
    let lt = 2.0;
    let (mut worst_max, mut worst_std) = (0.0f64, 0.0f64);
    for (i, sigma) in [0.5, 1.0, 2.0, 3.0].into_iter().enumerate() {
        let model = AnnotationModel::new([32.0, 24.0], sigma)?;
        let hm = mse_optimal_heatmap(&model, lt, &grid, 100_000, 2000 + i as u64)?;
        let fit = fit_gaussian(&hm)?;
        worst_max = worst_max.max(rel(hm.max(), lt * lt / (sigma * sigma + lt * lt)));
        worst_std = worst_std.max(rel(fit.sigma_fit, (sigma * sigma + lt * lt).sqrt()));
    }
    Ok(Outcome {
        pass: worst_max <= 0.02 && worst_std <= 0.02,
        detail: format!(
            "worst maxval error {:.3}%, worst fitted-std error {:.3}% (limit 2%)",
            100.0 * worst_max,
            100.0 * worst_std
        ),
    })
}

fn nll_optima() -> Check {
    let sigma = 1.0;
    let model = AnnotationModel::new([0.0, 0.0], sigma)?;
    let pts = sample_keypoints(&model, 1_000_000, 3000)?;
    let gauss = rel(fit_nll_gaussian(&pts, None)?.sigma_hat, sigma);
    let mut imperfect: f64 = 0.0;
    for delta in [0.5, 1.0, 2.0, 3.0] {
        let off = delta / 2f64.sqrt();
        let s = fit_nll_gaussian(&pts, Some([off, off]))?.sigma_hat;
        imperfect = imperfect.max(rel(s * s, sigma * sigma + delta * delta / 2.0));
    }
    let laplace = rel(fit_nll_laplace(&pts, Some([0.0, 0.0]))?.b_hat, laplace_misspec(sigma)?.b_star);
    Ok(Outcome {
        pass: gauss <= 0.02 && imperfect <= 0.02 && laplace <= 0.01,
        detail: format!(
            "sigma {:.3}% (2%), imperfect sigma^2 {:.3}% (2%), Laplace b {:.3}% (1%)",
            100.0 * gauss,
            100.0 * imperfect,
            100.0 * laplace
        ),
    })
}

fn imperfect_detection_sweep() -> Check {
    let (sigma, lt) = (1.0, 2.0);
    let center = [32.0, 24.0];
    let model = AnnotationModel::new(center, sigma)?;
    let hm = mse_optimal_heatmap(&model, lt, &Grid::default(), 100_000, 4000)?;
    let (mut worst_o, mut worst_s) = (0.0f64, 0.0f64);
    let mut scales = Vec::new();
    let mut cf_scales = Vec::new();
    for i in 0..=12 {
        let delta = 0.25 * i as f64;
        let fit = fit_fixed_center(&hm, [center[0] + delta, center[1]])?;
        let cf = imperfect_detection(sigma, lt, delta)?;
        worst_o = worst_o.max(rel(fit.scale, cf.o_star));
        worst_s = worst_s.max(rel(fit.sigma_sq, cf.sigma_star_sq));
        scales.push(fit.scale);
        cf_scales.push(cf.o_star);
    }
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let monotone = decreasing(&scales) && decreasing(&cf_scales);
    Ok(Outcome {
        pass: worst_o <= 0.01 && worst_s <= 0.01 && monotone,
        detail: format!(
            "13 offsets in [0,3]: worst o* error {:.3}%, worst sigma*^2 error {:.3}% (1%), o* decreasing: {monotone}",
            100.0 * worst_o,
            100.0 * worst_s
        ),
    })
}

/// Literal mAP evaluated without sorting: each instance's rank is the number of
/// instances that beat it (higher confidence, or equal confidence and lower index).
fn brute_force_map(oks: &[f64], conf: &[f64], thresholds: &[f64]) -> f64 {
    let n = oks.len();
    let before = |a: usize, b: usize| conf[a] > conf[b] || (conf[a] == conf[b] && a < b);
    let rank: Vec<usize> = (0..n).map(|j| (0..n).filter(|&i| before(i, j)).count()).collect();
    let mut total = 0.0;
    for &t in thresholds {
        let mut terms = vec![None; n];
        for j in 0..n {
            if oks[j] > t {
                let hits_up_to = 1 + (0..n).filter(|&i| oks[i] > t && before(i, j)).count();
                terms[rank[j]] = Some(hits_up_to as f64 / (rank[j] + 1) as f64);
            }
        }
        let mut ap = 0.0;
        for p in terms.into_iter().flatten() {
            ap += p / n as f64;
        }
        total += ap;
    }
    total / thresholds.len() as f64
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn map_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let cfg = EvalConfig::default();
    let levels = [0.0, 0.3, 0.5, 0.55, 0.72, 0.9, 0.95, 1.0];
    let (mut mismatches, mut not_max) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let oks: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<bool>() {
                    levels[rng.random_range(0..levels.len())]
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 3.0).collect();
        let map = average_precision(&oks, &conf, &cfg)?.map;
        if map != brute_force_map(&oks, &conf, &cfg.thresholds) {
            mismatches += 1;
        }
        let oracle = average_precision(&oks, &oks, &cfg)?.map;
        let mut best = f64::NEG_INFINITY;
        for perm in permutations(n) {
            let c: Vec<f64> = perm.iter().map(|&r| (n - r) as f64).collect();
            best = best.max(average_precision(&oks, &c, &cfg)?.map);
        }
        if oracle != best {
            not_max += 1;
        }
    }
    Ok(Outcome {
        pass: mismatches == 0 && not_max == 0,
        detail: format!("1000 sets: {mismatches} brute-force mismatches, {not_max} oracle rankings below the permutation maximum"),
    })
}

fn table_ordering() -> Check {
    let cfg = SynthConfig::default();
    let bench = synth_benchmark(&cfg, 0)?;
    let pairs = benchmark_pairs(&bench);
    let modes = [
        ConfidenceMode::Constant,
        ConfidenceMode::HeatmapMax,
        ConfidenceMode::Rescored,
        ConfidenceMode::Oracle,
    ];
    let mut maps = Vec::new();
    let mut mars = Vec::new();
    for mode in modes {
        let run = RunConfig { mode, ..RunConfig::default() };
        let r = evaluate_pairs(&pairs, &cfg.spec, &run, None)?.report;
        maps.push(r.map);
        mars.push(r.mar.to_bits());
    }
    let ordered = maps[0] < maps[1] && maps[1] < maps[2] && maps[2] <= maps[3];
    let same_mar = mars.iter().all(|m| *m == mars[0]);
    Ok(Outcome {
        pass: ordered && same_mar,
        detail: format!(
            "N={} mAP constant {:.4} < heatmap {:.4} < rescored {:.4} <= oracle {:.4}; mAR {:.4} identical: {same_mar}",
            pairs.len(),
            maps[0],
            maps[1],
            maps[2],
            maps[3],
            f64::from_bits(mars[0])
        ),
    })
}

fn ccnet_end_to_end() -> Check {
    let cfg = SynthConfig::default();
    let pairs = benchmark_pairs(&synth_benchmark(&cfg, 0)?);
    let train_cfg = TrainConfig::default();
    let out = train_calibration(&pairs, &cfg.spec, &RunConfig::default(), &train_cfg, TRAIN_FRACTION)?;
    let (b, a) = (&out.before.report, &out.after.report);
    let pearson_up = match (b.pearson, a.pearson) {
        (Some(pb), Some(pa)) => pa > pb,
        _ => false,
    };
    let pass = train_cfg.epochs <= 5
        && a.map > b.map
        && a.ause < b.ause
        && pearson_up
        && a.reliability_deviation < b.reliability_deviation
        && a.mar.to_bits() == b.mar.to_bits();
    Ok(Outcome {
        pass,
        detail: format!(
            "{} epochs, {} held out: mAP {:.4}->{:.4}, AUSE {:.5}->{:.5}, Pearson {:.4}->{:.4}, reliability {:.4}->{:.4}, mAR {:.4} bit-identical: {}",
            train_cfg.epochs,
            out.held_out_ids.len(),
            b.map,
            a.map,
            b.ause,
            a.ause,
            b.pearson.unwrap_or(f64::NAN),
            a.pearson.unwrap_or(f64::NAN),
            b.reliability_deviation,
            a.reliability_deviation,
            b.mar,
            a.mar.to_bits() == b.mar.to_bits()
        ),
    })
}

fn gradient_check() -> Check {
    let cfg = SynthConfig { instances: 40, ..SynthConfig::default() };
    let bench = synth_benchmark(&cfg, 7)?;
    let idx: Vec<usize> = (0..cfg.instances).collect();
    let samples = training_samples(&bench, &idx)?;
    let tc = TrainConfig::default();
    let trained = train(&samples, &tc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8000);
    let mut random = CalibHead::zeros(cfg.spec.count(), cfg.feature_dim)?;
    random.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    random.bias.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
    let mut worst: f64 = 0.0;
    for head in [&trained, &random] {
        for batch in samples.chunks(8).take(2) {
            worst = worst.max(analytic_grad_check(head, batch, &tc)?);
        }
    }
    Ok(Outcome {
        pass: worst < 1e-5,
        detail: format!("max relative deviation {worst:.3e} over {} parameters (limit 1e-5)", 2 * 17 * 16 + 34),
    })
}

fn run_cli(args: &[&str]) -> std::io::Result<std::process::Output> {
    Command::new(env!("CARGO_BIN_EXE_posecal")).args(args).output()
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.flatten()
                .filter(|e| e.path().is_file())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| posecal::Error::Config(e.to_string()))?;
    let root = tmp.path();
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut failed = Vec::new();
    for rep in ["a", "b"] {
        let d = root.join(rep);
        let s = |p: &str| d.join(p).to_string_lossy().into_owned();
        let (gt, pred) = (s("data/gt.json"), s("data/pred.json"));
        let runs: Vec<Vec<String>> = vec![
            vec!["synth".into(), "--seed".into(), "3".into(), "--instances".into(), "300".into(), "--out".into(), s("data")],
            vec!["eval".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--mode".into(), "heatmap-max".into(), "--out".into(), s("eval_heatmap")],
            vec!["eval".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--mode".into(), "constant".into(), "--out".into(), s("eval_constant")],
            vec!["eval".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--mode".into(), "rescored".into(), "--out".into(), s("eval_rescored")],
            vec!["eval".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--mode".into(), "oracle".into(), "--subset".into(), "9,10".into(), "--out".into(), s("eval_oracle")],
            vec!["rescore".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--out".into(), s("rescored/pred.json")],
            vec!["train-calib".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--seed".into(), "1".into(), "--out".into(), s("calib")],
            vec!["eval".into(), "--gt".into(), gt.clone(), "--pred".into(), pred.clone(), "--mode".into(), "ccnet".into(), "--head".into(), s("calib/head.json"), "--out".into(), s("eval_ccnet")],
            vec!["simulate".into(), "--seed".into(), "2".into(), "--mc-samples".into(), "20000".into(), "--heatmap-samples".into(), "50000".into(), "--nll-samples".into(), "200000".into(), "--out".into(), s("simulate")],
        ];
        for args in runs {
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = run_cli(&argv).map_err(|e| posecal::Error::Config(e.to_string()))?;
            let stdout = String::from_utf8_lossy(&out.stdout).replace(d.to_string_lossy().as_ref(), "<out>");
            if !out.status.success() {
                failed.push(format!("{} ({})", args[0], out.status));
            }
            if rep == "b" {
                let stdout_a = root.join(format!("a_stdout_{compared}"));
                if std::fs::read(&stdout_a).ok().as_deref() != Some(stdout.as_bytes()) {
                    differing.push(format!("{} stdout", args[0]));
                }
            } else {
                std::fs::write(root.join(format!("a_stdout_{compared}")), stdout.as_bytes()).ok();
            }
            compared += 1;
        }
        compared = 0;
    }
    let mut files = 0;
    for sub in ["data", "eval_heatmap", "eval_constant", "eval_rescored", "eval_oracle", "rescored", "calib", "eval_ccnet", "simulate"] {
        let (a, b) = (dir_files(&root.join("a").join(sub)), dir_files(&root.join("b").join(sub)));
        if a.is_empty() || a != b {
            differing.push(sub.to_string());
        }
        files += a.len();
    }
    Ok(Outcome {
        pass: differing.is_empty() && failed.is_empty(),
        detail: format!(
            "5 commands, 9 invocations, {files} output files compared; differing: {differing:?}; failed: {failed:?}"
        ),
    })
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("closed-form fidelity", Box::new(|| timed(Duration::from_secs(60), expected_oks_grid))),
        ("heatmap derivation", Box::new(|| timed(Duration::from_secs(30), heatmap_derivation))),
        ("NLL optima", Box::new(nll_optima)),
        ("imperfect-detection formula", Box::new(imperfect_detection_sweep)),
        ("mAP correctness", Box::new(map_correctness)),
        ("confidence-mode ordering", Box::new(|| timed(Duration::from_secs(10), table_ordering))),
        ("calibration head end to end", Box::new(|| timed(Duration::from_secs(60), ccnet_end_to_end))),
        ("gradient check", Box::new(gradient_check)),
        ("CLI determinism", Box::new(cli_determinism)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!("criterion {} {:<30} {}  {}", i + 1, name, if pass { "PASS" } else { "FAIL" }, detail);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
