//! Evaluation, the ablation grid and the run configuration file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::argmax;
use crate::data::{Dataset, Split, Stream, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::build_period_prediction;
use crate::grouper::{hex_digest, pretrain_grouper, GrouperConfig, GrouperModel, PretrainReport};
use crate::trainer::{train_mode, Groupers, JointModel, Mode, ModelSet, TrainConfig};

pub const CONFIG_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;
pub const CSV_SCHEMA: u32 = 1;
/// Column order of the ablation CSV.
pub const CSV_HEADER: &str = "schema_version,row_type,mode,seed,accuracy,std,runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub periods: usize,
    /// Test videos whose per-period scores are kept in the report.
    pub trace_videos: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            periods: 12,
            trace_videos: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: Mode::standard_grid().iter().map(Mode::to_string).collect(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a run needs; serialised as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub schema_version: u32,
    pub data: SyntheticConfig,
    pub grouper: GrouperConfig,
    /// One grouper for both streams instead of one per stream.
    pub shared_grouper: bool,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            schema_version: CONFIG_SCHEMA,
            data: SyntheticConfig::default(),
            grouper: GrouperConfig::default(),
            shared_grouper: false,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA {
            return Err(Error::config(format!(
                "config schema {} is not supported (expected {CONFIG_SCHEMA})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex_digest(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Per-period scores of one test video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub video: usize,
    pub label: usize,
    pub anchors: Vec<usize>,
    /// Combined score vector of each period.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub accuracy: f64,
    pub videos: usize,
    pub periods: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    pub traces: Vec<Trace>,
    pub model_fingerprints: Vec<String>,
    pub data_seed: u64,
    pub train_seed: u64,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grouper: Option<GrouperConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grouper_hashes: Vec<String>,
}

/// Each model's score vector for every period of `video`, indexed
/// `[period][model]`, plus the anchor times.
pub fn period_vectors(
    set: &ModelSet,
    ds: &Dataset,
    video: usize,
    periods: usize,
) -> Result<(Vec<usize>, Vec<Vec<Vec<f64>>>)> {
    let first = set
        .models
        .first()
        .ok_or_else(|| Error::config("no models to evaluate"))?;
    if set.models.iter().any(|m| m.classes != first.classes) {
        return Err(Error::config("models disagree on the class count"));
    }
    let anchors = first.timing().uniform_anchors(ds.frames(), periods);
    let vectors = anchors
        .iter()
        .map(|&t| {
            set.models
                .iter()
                .map(|m| m.period_scores(ds, video, t))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((anchors, vectors))
}

/// Combined score of one period: the per-model vectors summed.
pub fn combine_models(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut iter = per_model.iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::config("no model scores"))?
        .clone();
    iter.try_fold(first, |acc, v| build_period_prediction(&acc, v))
}

/// Scores every test video over `periods` uniformly spaced periods; the
/// class with the largest summed score is the video's prediction.
pub fn evaluate(set: &ModelSet, ds: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    if eval.periods == 0 {
        return Err(Error::config("evaluation needs at least one period"));
    }
    let first = set
        .models
        .first()
        .ok_or_else(|| Error::config("no models to evaluate"))?;
    if first.classes != ds.classes() {
        return Err(Error::config(format!(
            "models have {} classes, dataset has {}",
            first.classes,
            ds.classes()
        )));
    }
    let test = ds.ids(Split::Test);
    let per_video = test
        .par_iter()
        .map(|&v| {
            let (anchors, vectors) = period_vectors(set, ds, v, eval.periods)?;
            let combined = vectors
                .iter()
                .map(|pm| combine_models(pm))
                .collect::<Result<Vec<_>>>()?;
            Ok((anchors, combined))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ds.classes();
    let mut confusion = vec![vec![0usize; n]; n];
    let mut predictions = Vec::with_capacity(test.len());
    let mut correct = 0;
    let mut traces = Vec::new();
    for (&v, (anchors, combined)) in test.iter().zip(per_video) {
        let mut total = vec![0.0; n];
        for s in &combined {
            for (t, x) in total.iter_mut().zip(s) {
                *t += x;
            }
        }
        let label = ds.info(v)?.label;
        let pred = argmax(&total);
        confusion[label][pred] += 1;
        correct += (pred == label) as usize;
        predictions.push(pred);
        if eval.trace_videos.contains(&v) {
            traces.push(Trace {
                video: v,
                label,
                anchors,
                scores: combined,
            });
        }
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA,
        mode: set.mode,
        accuracy: correct as f64 / test.len().max(1) as f64,
        videos: test.len(),
        periods: eval.periods,
        confusion,
        predictions,
        traces,
        model_fingerprints: set.models.iter().map(JointModel::fingerprint).collect(),
        data_seed: ds.config().seed,
        train_seed: first.config.seed,
        data: ds.config().clone(),
        train: first.config.clone(),
        grouper: None,
        grouper_hashes: Vec::new(),
    })
}

/// Pre-trains and freezes the groupers a configuration asks for.
pub fn build_groupers(
    ds: &Dataset,
    cfg: &GrouperConfig,
    shared: bool,
    seed: u64,
) -> Result<(Groupers, Vec<PretrainReport>)> {
    if shared {
        let (m, r) = pretrain_grouper(ds, Stream::Appearance, cfg, seed)?;
        Ok((Groupers::shared(m)?, vec![r]))
    } else {
        let (a, ra) = pretrain_grouper(ds, Stream::Appearance, cfg, seed)?;
        let (m, rm) = pretrain_grouper(ds, Stream::Motion, cfg, seed)?;
        Ok((Groupers::per_stream(a, m)?, vec![ra, rm]))
    }
}

pub fn save_groupers(groupers: &[&GrouperModel], dir: &Path) -> Result<()> {
    for (i, g) in groupers.iter().enumerate() {
        g.save(&dir.join(grouper_file(i, groupers.len())))?;
    }
    Ok(())
}

pub fn grouper_file(index: usize, count: usize) -> String {
    if count == 1 {
        "grouper_shared.ckpt".into()
    } else {
        format!("grouper_{}.ckpt", Stream::BOTH[index].name())
    }
}

/// Loads groupers written by [`save_groupers`] for this configuration.
pub fn load_groupers(dir: &Path, cfg: &HarnessConfig) -> Result<Groupers> {
    let shape = cfg.data.frame_shape();
    let n = cfg.data.classes;
    if cfg.shared_grouper {
        let m = GrouperModel::load(&dir.join(grouper_file(0, 1)), shape, n, &cfg.grouper)?;
        Groupers::shared(m)
    } else {
        let a = GrouperModel::load(&dir.join(grouper_file(0, 2)), shape, n, &cfg.grouper)?;
        let m = GrouperModel::load(&dir.join(grouper_file(1, 2)), shape, n, &cfg.grouper)?;
        Groupers::per_stream(a, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAggregate {
    pub mode: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub aggregates: Vec<GridAggregate>,
    /// Requested modes that were not recognised and were skipped.
    pub unknown: Vec<String>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{CSV_SCHEMA},run,{},{},{:.6},,1",
                r.mode, r.seed, r.accuracy
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "{CSV_SCHEMA},aggregate,{},all,{:.6},{:.6},{}",
                a.mode, a.mean, a.std, a.runs
            );
        }
        out
    }

    pub fn aggregate(&self, mode: &str) -> Option<&GridAggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn aggregate_rows(rows: &[GridRow]) -> Vec<GridAggregate> {
    let mut by_mode: Vec<(String, Vec<f64>)> = Vec::new();
    for r in rows {
        match by_mode.iter_mut().find(|(m, _)| *m == r.mode) {
            Some((_, v)) => v.push(r.accuracy),
            None => by_mode.push((r.mode.clone(), vec![r.accuracy])),
        }
    }
    by_mode
        .into_iter()
        .map(|(mode, v)| {
            let (mean, std) = mean_std(&v);
            GridAggregate {
                mode,
                mean,
                std,
                runs: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunRecord {
    schema_version: u32,
    mode: String,
    seed: u64,
    fingerprint: String,
    accuracy: f64,
}

fn run_fingerprint(cfg: &HarnessConfig, mode: &Mode, seed: u64) -> Result<String> {
    let desc = serde_json::json!({
        "data": cfg.data,
        "grouper": cfg.grouper,
        "shared_grouper": cfg.shared_grouper,
        "train": cfg.train,
        "periods": cfg.eval.periods,
        "mode": mode.to_string(),
        "seed": seed,
    });
    Ok(hex_digest(serde_json::to_string(&desc)?.as_bytes()))
}

/// Per-seed training configuration used by the grid.
pub fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..train.clone()
    }
}

/// Trains and evaluates every `(mode, seed)` on one dataset and writes
/// `ablation.csv` to `out_dir`. Finished runs are recorded under
/// `out_dir/runs` and reused on a rerun with the same configuration.
/// Unknown mode names are skipped and reported in the result.
pub fn run_ablation_grid(cfg: &HarnessConfig, ds: &Dataset, out_dir: &Path) -> Result<GridResult> {
    let mut modes = Vec::new();
    let mut unknown = Vec::new();
    for name in &cfg.ablation.modes {
        match name.parse::<Mode>() {
            Ok(m) => modes.push(m),
            Err(_) => unknown.push(name.clone()),
        }
    }
    if cfg.ablation.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut groupers: BTreeMap<u64, Groupers> = BTreeMap::new();
    let mut rows = Vec::new();
    for mode in &modes {
        for &seed in &cfg.ablation.seeds {
            let fp = run_fingerprint(cfg, mode, seed)?;
            let run_dir = out_dir
                .join("runs")
                .join(mode.to_string())
                .join(format!("seed{seed}"));
            let record_path = run_dir.join("result.json");
            if let Ok(text) = fs::read_to_string(&record_path) {
                if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
                    if rec.fingerprint == fp && rec.schema_version == REPORT_SCHEMA {
                        rows.push(GridRow {
                            mode: rec.mode,
                            seed,
                            accuracy: rec.accuracy,
                        });
                        continue;
                    }
                }
            }
            let gr = if mode.needs_grouper() {
                if !groupers.contains_key(&seed) {
                    let (g, _) = build_groupers(ds, &cfg.grouper, cfg.shared_grouper, seed)?;
                    groupers.insert(seed, g);
                }
                groupers.get(&seed)
            } else {
                None
            };
            let (set, _) = train_mode(ds, gr, *mode, &seeded(&cfg.train, seed), Some(&run_dir))?;
            let report = evaluate(&set, ds, &cfg.eval)?;
            let rec = RunRecord {
                schema_version: REPORT_SCHEMA,
                mode: mode.to_string(),
                seed,
                fingerprint: fp,
                accuracy: report.accuracy,
            };
            write_json(&run_dir.join("report.json"), &report)?;
            write_json(&record_path, &rec)?;
            rows.push(GridRow {
                mode: rec.mode,
                seed,
                accuracy: rec.accuracy,
            });
        }
    }
    let aggregates = aggregate_rows(&rows);
    let result = GridResult {
        rows,
        aggregates,
        unknown,
    };
    let path = out_dir.join("ablation.csv");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(&path, result.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Directory layout of a CLI workspace.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn groupers(&self) -> PathBuf {
        self.root.join("groupers")
    }

    pub fn models(&self, mode: &Mode) -> PathBuf {
        self.root.join("models").join(mode.to_string())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}
