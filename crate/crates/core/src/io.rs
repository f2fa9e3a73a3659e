//! Instance files, weight files and CSV curves.
//!
//! Ground truth and predictions are JSON arrays with one record per line:
//!
//! ```text
//! gt:   {"id": 1, "area": 9216.0, "keypoints": [x, y, v, ...]}
//! pred: {"id": 1, "keypoints": [x, y, s, ...], "sigma": [...], "score": 0.8}
//! ```
//!
//! `v > 0` marks a labelled keypoint. Predictions may also carry `area` (the
//! predicted box area) and `features` (one vector per keypoint). Every file is
//! written through a temporary file in the target directory and renamed into
//! place.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ccnet::{CalibHead, TrainConfig};
use crate::error::{io_err, Error, Result};
use crate::oks::{aggregate_threshold, GroundTruthInstance, KeypointSpec, PredictedInstance, DEFAULT_TAU_S};
use crate::ranking::{EvalReport, PrPoint, ReliabilityBin, SparsificationPoint};
use crate::sim::SynthBenchmark;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub id: u64,
    pub area: f64,
    pub keypoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredRecord {
    pub id: u64,
    pub keypoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

/// An aligned ground-truth/prediction pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: u64,
    pub gt: GroundTruthInstance,
    pub pred: PredictedInstance,
    pub pred_area: Option<f64>,
    pub features: Option<Vec<Vec<f64>>>,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        parse_err(
            format!("{}:{}:{}", path.display(), e.line(), e.column()),
            e.to_string(),
        )
    })
}

pub fn read_spec(path: &Path) -> Result<KeypointSpec> {
    read_json(path)
}

pub fn read_gt_records(path: &Path) -> Result<Vec<GtRecord>> {
    read_json(path)
}

pub fn read_pred_records(path: &Path) -> Result<Vec<PredRecord>> {
    read_json(path)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// A JSON array with one compact record per line.
pub fn records_json<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::from("[\n");
    for (i, r) in records.iter().enumerate() {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Config(format!("cannot serialise record: {e}")))?;
        out.push_str(&line);
        out.push_str(if i + 1 < records.len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n");
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_atomic(path, records_json(records)?.as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialise {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

fn triples(values: &[f64], k: usize, loc: &str, field: &str) -> Result<Vec<[f64; 3]>> {
    if values.len() != 3 * k {
        return Err(parse_err(
            loc,
            format!("field `{field}` has {} values, expected {} (3 x {k} keypoints)", values.len(), 3 * k),
        ));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(parse_err(loc, format!("field `{field}` holds non-finite value {v}")));
    }
    Ok(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn located(loc: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Domain(m) => parse_err(loc, m),
        Error::Shape { what, expected, got } => {
            parse_err(loc, format!("{what}: expected {expected} values, got {got}"))
        }
        other => other,
    }
}

pub fn gt_instance(rec: &GtRecord, spec: &KeypointSpec, file: &str) -> Result<GroundTruthInstance> {
    let loc = format!("{file}: id {}", rec.id);
    let t = triples(&rec.keypoints, spec.count(), &loc, "keypoints")?;
    let gt = GroundTruthInstance {
        keypoints: t.iter().map(|c| [c[0], c[1]]).collect(),
        visibility: t.iter().map(|c| c[2] > 0.0).collect(),
        area: rec.area,
    };
    gt.validate(spec).map_err(located(&loc))?;
    Ok(gt)
}

pub fn pred_instance(rec: &PredRecord, spec: &KeypointSpec, file: &str) -> Result<PredictedInstance> {
    let loc = format!("{file}: id {}", rec.id);
    let t = triples(&rec.keypoints, spec.count(), &loc, "keypoints")?;
    let kp_scores: Vec<f64> = t.iter().map(|c| c[2]).collect();
    let instance_conf = match rec.score {
        Some(s) => s,
        None => aggregate_threshold(&kp_scores, DEFAULT_TAU_S).map_err(located(&loc))?,
    };
    let pred = PredictedInstance {
        keypoints: t.iter().map(|c| [c[0], c[1]]).collect(),
        kp_scores,
        sigma: rec.sigma.clone(),
        instance_conf,
    };
    pred.validate(spec).map_err(located(&loc))?;
    if let Some(a) = rec.area {
        if !(a > 0.0 && a.is_finite()) {
            return Err(parse_err(loc, format!("field `area` must be positive, got {a}")));
        }
    }
    if let Some(f) = &rec.features {
        if f.len() != spec.count() {
            return Err(parse_err(
                loc,
                format!("field `features` has {} vectors, expected {}", f.len(), spec.count()),
            ));
        }
        let dim = f.first().map_or(0, |v| v.len());
        if dim == 0 || f.iter().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(parse_err(loc, "field `features` must hold equal-length finite vectors"));
        }
    }
    Ok(pred)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a u64>, file: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(parse_err(file, format!("duplicate id {id}")));
        }
    }
    Ok(())
}

fn id_list(ids: &[u64]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(" and {} more", ids.len() - SHOWN));
    }
    s
}

/// Pairs every ground-truth record with the prediction of the same id, in
/// ground-truth order.
pub fn align(
    gt: &[GtRecord],
    pred: &[PredRecord],
    spec: &KeypointSpec,
    gt_file: &str,
    pred_file: &str,
) -> Result<Vec<Pair>> {
    check_unique(gt.iter().map(|r| &r.id), gt_file)?;
    check_unique(pred.iter().map(|r| &r.id), pred_file)?;
    let by_id: HashMap<u64, &PredRecord> = pred.iter().map(|r| (r.id, r)).collect();
    let gt_ids: HashSet<u64> = gt.iter().map(|r| r.id).collect();
    let unknown: Vec<u64> = pred.iter().map(|r| r.id).filter(|id| !gt_ids.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(Error::Alignment(format!(
            "predictions with unknown ids: {}",
            id_list(&unknown)
        )));
    }
    let missing: Vec<u64> = gt.iter().map(|r| r.id).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Alignment(format!(
            "ground-truth ids without predictions: {}",
            id_list(&missing)
        )));
    }
    let pairs = gt
        .iter()
        .map(|g| {
            let p = by_id[&g.id];
            Ok(Pair {
                id: g.id,
                gt: gt_instance(g, spec, gt_file)?,
                pred: pred_instance(p, spec, pred_file)?,
                pred_area: p.area,
                features: p.features.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = pairs.iter().find_map(|p| p.features.as_ref()) {
        let dim = first[0].len();
        if let Some(bad) = pairs
            .iter()
            .find(|p| p.features.as_ref().is_some_and(|f| f[0].len() != dim))
        {
            return Err(parse_err(
                format!("{pred_file}: id {}", bad.id),
                format!("feature dimension differs from {dim}"),
            ));
        }
    }
    Ok(pairs)
}

pub fn load_dataset(gt_path: &Path, pred_path: &Path, spec: &KeypointSpec) -> Result<Vec<Pair>> {
    let gt = read_gt_records(gt_path)?;
    let pred = read_pred_records(pred_path)?;
    align(
        &gt,
        &pred,
        spec,
        &gt_path.display().to_string(),
        &pred_path.display().to_string(),
    )
}

pub fn gt_record(id: u64, gt: &GroundTruthInstance) -> GtRecord {
    GtRecord {
        id,
        area: gt.area,
        keypoints: gt
            .keypoints
            .iter()
            .zip(&gt.visibility)
            .flat_map(|(p, v)| [p[0], p[1], if *v { 2.0 } else { 0.0 }])
            .collect(),
    }
}

pub fn pred_record(pair: &Pair) -> PredRecord {
    PredRecord {
        id: pair.id,
        keypoints: pair
            .pred
            .keypoints
            .iter()
            .zip(&pair.pred.kp_scores)
            .flat_map(|(p, s)| [p[0], p[1], *s])
            .collect(),
        sigma: pair.pred.sigma.clone(),
        score: Some(pair.pred.instance_conf),
        area: pair.pred_area,
        features: pair.features.clone(),
    }
}

/// The benchmark as aligned pairs; predicted area is left unset.
pub fn benchmark_pairs(bench: &SynthBenchmark) -> Vec<Pair> {
    bench
        .instances
        .iter()
        .map(|inst| Pair {
            id: inst.id,
            gt: inst.gt.clone(),
            pred: inst.pred.clone(),
            pred_area: None,
            features: Some(inst.features.clone()),
        })
        .collect()
}

/// Calibration head with the configuration it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadFile {
    pub keypoints: usize,
    pub feature_dim: usize,
    /// `2K x F`, row-major: `K` confidence rows, then `K` visibility rows.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub config: TrainConfig,
}

impl HeadFile {
    pub fn new(head: &CalibHead, config: &TrainConfig) -> Self {
        HeadFile {
            keypoints: head.keypoints,
            feature_dim: head.feature_dim,
            weights: head.weights.clone(),
            bias: head.bias.clone(),
            config: config.clone(),
        }
    }

    pub fn head(&self) -> Result<CalibHead> {
        let head = CalibHead {
            keypoints: self.keypoints,
            feature_dim: self.feature_dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        };
        head.validate()?;
        Ok(head)
    }
}

pub fn read_head(path: &Path) -> Result<HeadFile> {
    let file: HeadFile = read_json(path)?;
    file.head().map_err(located(&path.display().to_string()))?;
    Ok(file)
}

fn csv(header: &str, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub fn pr_csv(points: &[PrPoint]) -> String {
    csv(
        "threshold,recall,precision",
        points
            .iter()
            .map(|p| vec![p.threshold.to_string(), p.recall.to_string(), p.precision.to_string()]),
    )
}

pub fn sparsification_csv(points: &[SparsificationPoint]) -> String {
    csv(
        "fraction_removed,remaining_error,oracle_error",
        points.iter().map(|p| {
            vec![
                p.fraction_removed.to_string(),
                p.remaining_error.to_string(),
                p.oracle_error.to_string(),
            ]
        }),
    )
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    csv(
        "bin_center,mean_conf,mean_oks,count",
        bins.iter().map(|b| {
            vec![
                b.bin_center.to_string(),
                b.mean_conf.to_string(),
                b.mean_oks.to_string(),
                b.count.to_string(),
            ]
        }),
    )
}

/// `<prefix>report.json`, `<prefix>pr_curve.csv`, `<prefix>sparsification.csv`
/// and `<prefix>reliability.csv` in `dir`.
pub fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(format!("{prefix}report.json")), report)?;
    write_atomic(&dir.join(format!("{prefix}pr_curve.csv")), pr_csv(&report.pr_points).as_bytes())?;
    write_atomic(
        &dir.join(format!("{prefix}sparsification.csv")),
        sparsification_csv(&report.sparsification).as_bytes(),
    )?;
    write_atomic(
        &dir.join(format!("{prefix}reliability.csv")),
        reliability_csv(&report.reliability).as_bytes(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synth_benchmark, SynthConfig};

    fn spec3() -> KeypointSpec {
        KeypointSpec::new(vec![0.01, 0.02, 0.03]).unwrap()
    }

    fn gt(id: u64) -> GtRecord {
        GtRecord { id, area: 100.0, keypoints: vec![1.0, 2.0, 2.0, 3.0, 4.0, 2.0, 5.0, 6.0, 0.0] }
    }

    fn pred(id: u64) -> PredRecord {
        PredRecord {
            id,
            keypoints: vec![1.0, 2.0, 0.9, 3.5, 4.0, 0.8, 5.0, 6.0, 0.1],
            sigma: None,
            score: None,
            area: None,
            features: None,
        }
    }

    #[test]
    fn three_matching_instances() {
        let g = [gt(1), gt(2), gt(3)];
        let p = [pred(3), pred(1), pred(2)];
        let pairs = align(&g, &p, &spec3(), "gt", "pred").unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.iter().map(|p| p.id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(pairs[0].gt.visibility, vec![true, true, false]);
        assert!((pairs[0].pred.instance_conf - 0.85).abs() < 1e-15);
    }

    #[test]
    fn unknown_prediction_id_is_named() {
        let err = align(&[gt(1)], &[pred(1), pred(42)], &spec3(), "gt", "pred").unwrap_err();
        match err {
            Error::Alignment(m) => assert!(m.contains("42"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            align(&[gt(1), gt(2)], &[pred(1)], &spec3(), "gt", "pred"),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn keypoint_count_mismatch_is_a_parse_error() {
        let spec = KeypointSpec::new(vec![0.01, 0.02]).unwrap();
        match align(&[gt(1)], &[pred(1)], &spec, "gt.json", "pred.json") {
            Err(Error::Parse { location, message }) => {
                assert_eq!(location, "gt.json: id 1");
                assert!(message.contains("keypoints"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut bad = pred(1);
        bad.keypoints[2] = 1.5;
        assert!(matches!(align(&[gt(1)], &[bad], &spec3(), "g", "p"), Err(Error::Parse { .. })));
        assert!(matches!(align(&[gt(1), gt(1)], &[pred(1)], &spec3(), "g", "p"), Err(Error::Parse { .. })));
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        std::fs::write(&path, "[\n{\"id\": 1, \"area\": 1.0, \"keypoints\": [1, 2]},\n{\"id\": 2, \"area\": }\n]").unwrap();
        match read_gt_records(&path) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with(":3:19"), "{location}"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "[{\"id\": 1, \"area\": 1.0, \"keypoints\": [], \"extra\": 1}]").unwrap();
        assert!(matches!(read_gt_records(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn benchmark_roundtrips_through_files() {
        let cfg = SynthConfig { instances: 30, ..SynthConfig::default() };
        let bench = synth_benchmark(&cfg, 1).unwrap();
        let pairs = benchmark_pairs(&bench);
        let dir = tempfile::tempdir().unwrap();
        let (gp, pp) = (dir.path().join("gt.json"), dir.path().join("pred.json"));
        let g: Vec<GtRecord> = pairs.iter().map(|p| gt_record(p.id, &p.gt)).collect();
        let p: Vec<PredRecord> = pairs.iter().map(pred_record).collect();
        write_records(&gp, &g).unwrap();
        write_records(&pp, &p).unwrap();
        let loaded = load_dataset(&gp, &pp, &cfg.spec).unwrap();
        assert_eq!(loaded, pairs);
        let again = records_json(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&pp).unwrap(), again);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn csv_layout() {
        let s = pr_csv(&[PrPoint { threshold: 0.5, recall: 0.25, precision: 1.0 }]);
        assert_eq!(s, "threshold,recall,precision\n0.5,0.25,1\n");
    }
}
