use posecal::Error;
use posecal::io::{benchmark_pairs, load_dataset};
use posecal::pipeline::{cmd_synth, evaluate_pairs, rescore_pairs, ConfidenceMode, RunConfig};
use posecal::sim::{synth_benchmark, SynthConfig};

#[test]
fn disk_roundtrip_reproduces_in_memory_evaluation() {
    let cfg = SynthConfig { instances: 150, ..SynthConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmd_synth(&cfg, 5, dir.path()).unwrap(), 150);
    let loaded = load_dataset(&dir.path().join("gt.json"), &dir.path().join("pred.json"), &cfg.spec).unwrap();
    let direct = benchmark_pairs(&synth_benchmark(&cfg, 5).unwrap());
    for mode in ConfidenceMode::ALL {
        let run = RunConfig { mode, ..RunConfig::default() };
        if matches!(mode, ConfidenceMode::Ccnet | ConfidenceMode::Rle) {
            assert!(matches!(evaluate_pairs(&loaded, &cfg.spec, &run, None), Err(Error::Config(_))));
            continue;
        }
        let a = evaluate_pairs(&loaded, &cfg.spec, &run, None).unwrap();
        let b = evaluate_pairs(&direct, &cfg.spec, &run, None).unwrap();
        assert_eq!(a.report, b.report, "{mode}");
    }
}

#[test]
fn rescored_scores_reach_rescored_mode() {
    let cfg = SynthConfig { instances: 80, ..SynthConfig::default() };
    let pairs = benchmark_pairs(&synth_benchmark(&cfg, 9).unwrap());
    let run = RunConfig::default();
    let rescored = rescore_pairs(&pairs, &cfg.spec, &run).unwrap();
    let via_mode = RunConfig { mode: ConfidenceMode::Rescored, ..RunConfig::default() };
    let a = evaluate_pairs(&rescored, &cfg.spec, &run, None).unwrap();
    let b = evaluate_pairs(&pairs, &cfg.spec, &via_mode, None).unwrap();
    assert_eq!(a.conf, b.conf);
    assert_eq!(rescore_pairs(&rescored, &cfg.spec, &run).unwrap(), rescored);
}
