//! On-disk formats: dataset bundles (meta.json + data.csv + optional truth.json),
//! model.json, the per-iteration metrics CSV and the experiment config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::AdaptConfig;
use crate::amht::FitReport;
use crate::datagen::GenConfig;
use crate::dp::PrivacyLedger;
use crate::error::{LrsError, Result};
use crate::model::{common_dim, GroundTruth, ModelState, PrivacyConfig, SolverConfig, TaskDataset};
use crate::rank1::Rank1Config;

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub d: usize,
    #[serde(default)]
    pub r: Option<usize>,
    pub t: usize,
    /// Rows per task when every task has the same count.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetMeta {
    pub fn describe(datasets: &[TaskDataset]) -> Result<Self> {
        let d = common_dim(datasets)?;
        let m0 = datasets[0].m();
        Ok(DatasetMeta {
            format_version: FORMAT_VERSION,
            d,
            r: None,
            t: datasets.len(),
            m: datasets.iter().all(|ds| ds.m() == m0).then_some(m0),
            sigma: None,
            seed: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub datasets: Vec<TaskDataset>,
    pub truth: Option<GroundTruth>,
}

fn io_err(path: &Path, e: std::io::Error) -> LrsError {
    LrsError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn json_err(path: &Path, e: serde_json::Error) -> LrsError {
    LrsError::format(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| json_err(path, e))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Header `task,y,x1..xd`.
pub fn data_header(d: usize) -> Vec<String> {
    let mut h = vec!["task".to_string(), "y".to_string()];
    h.extend((1..=d).map(|j| format!("x{j}")));
    h
}

/// 17 significant digits, enough for an exact round trip.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_dataset(dir: &Path, datasets: &[TaskDataset], meta: &DatasetMeta, truth: Option<&GroundTruth>) -> Result<()> {
    let d = common_dim(datasets)?;
    if meta.d != d || meta.t != datasets.len() {
        return Err(LrsError::Config(format!(
            "meta says d={}, t={} but data has d={d}, t={}",
            meta.d,
            meta.t,
            datasets.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join(META_FILE), meta)?;

    let path = dir.join(DATA_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(data_header(d)).map_err(|e| csv_err(&path, e))?;
    let mut rec = Vec::with_capacity(d + 2);
    for (i, ds) in datasets.iter().enumerate() {
        for j in 0..ds.m() {
            rec.clear();
            rec.push(i.to_string());
            rec.push(fmt_f64(ds.y[j]));
            rec.extend(ds.x.row(j).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    if let Some(gt) = truth {
        write_truth(&dir.join(TRUTH_FILE), gt)?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> LrsError {
    let location = match e.position() {
        Some(p) => format!("{} line {}", path.display(), p.line()),
        None => path.display().to_string(),
    };
    LrsError::format(location, e.to_string())
}

pub fn read_dataset(dir: &Path) -> Result<DatasetBundle> {
    let meta: DatasetMeta = read_json(&dir.join(META_FILE))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(LrsError::format(
            dir.join(META_FILE).display().to_string(),
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    let path = dir.join(DATA_FILE);
    let datasets = read_samples(&path, meta.d, meta.t)?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() { Some(read_truth(&truth_path)?) } else { None };
    Ok(DatasetBundle { meta, datasets, truth })
}

fn read_samples(path: &Path, d: usize, t: usize) -> Result<Vec<TaskDataset>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let expected = data_header(d);
    let found: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect();
    if found != expected {
        let missing: Vec<&String> = expected.iter().filter(|c| !found.contains(c)).collect();
        let extra: Vec<&String> = found.iter().filter(|c| !expected.contains(c)).collect();
        let detail = match (missing.first(), extra.is_empty()) {
            (Some(col), _) => format!("missing column {col}"),
            (None, false) => format!("unexpected columns {extra:?}"),
            (None, true) => "columns out of order".to_string(),
        };
        return Err(LrsError::format(
            format!("{} header", path.display()),
            format!("{detail}; expected header: {}", expected.join(",")),
        ));
    }

    let mut rows: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new(); t];
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != expected.len() {
            return Err(LrsError::format(
                format!("{} row {line}", path.display()),
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let at = |col: usize| format!("{} row {line}, column {}", path.display(), expected[col]);
        let task: usize = rec[0].trim().parse().map_err(|_| LrsError::format(at(0), format!("not a task index: {:?}", &rec[0])))?;
        if task >= t {
            return Err(LrsError::format(at(0), format!("task {task} out of range for t = {t}")));
        }
        let mut vals = Vec::with_capacity(d + 1);
        for col in 1..expected.len() {
            let v: f64 = rec[col]
                .trim()
                .parse()
                .map_err(|_| LrsError::format(at(col), format!("not a number: {:?}", &rec[col])))?;
            vals.push(v);
        }
        let y = vals.remove(0);
        rows[task].push((y, vals));
    }

    rows.into_iter()
        .enumerate()
        .map(|(i, task_rows)| {
            if task_rows.is_empty() {
                return Err(LrsError::format(path.display().to_string(), format!("task {i} has no rows")));
            }
            let m = task_rows.len();
            let x = DMatrix::from_fn(m, d, |j, c| task_rows[j].1[c]);
            let y = DVector::from_iterator(m, task_rows.iter().map(|(y, _)| *y));
            TaskDataset::new(x, y)
        })
        .collect()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(LrsError::format(what.to_string(), format!("row {i} has {} entries, expected {cols}", r.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthFile {
    d: usize,
    r: usize,
    t: usize,
    u_star: Vec<Vec<f64>>,
    w_star: Vec<Vec<f64>>,
    /// d rows, t columns.
    b_star: Vec<Vec<f64>>,
    sigma: f64,
    k: usize,
    zeta: usize,
}

pub fn write_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_json(
        path,
        &TruthFile {
            d: gt.d(),
            r: gt.r(),
            t: gt.t(),
            u_star: to_rows(&gt.u_star),
            w_star: to_rows(&gt.w_star),
            b_star: to_rows(&gt.b_star),
            sigma: gt.sigma,
            k: gt.k,
            zeta: gt.zeta,
        },
    )
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let f: TruthFile = read_json(path)?;
    let loc = path.display().to_string();
    let check = |rows: usize, want: usize, name: &str| {
        if rows == want {
            Ok(())
        } else {
            Err(LrsError::format(loc.clone(), format!("{name} has {rows} rows, expected {want}")))
        }
    };
    check(f.u_star.len(), f.d, "u_star")?;
    check(f.w_star.len(), f.t, "w_star")?;
    check(f.b_star.len(), f.d, "b_star")?;
    Ok(GroundTruth {
        u_star: from_rows(&f.u_star, f.r, &loc)?,
        w_star: from_rows(&f.w_star, f.r, &loc)?,
        b_star: from_rows(&f.b_star, f.t, &loc)?,
        sigma: f.sigma,
        k: f.k,
        zeta: f.zeta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub task: usize,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    d: usize,
    r: usize,
    t: usize,
    k: usize,
    iteration: usize,
    u: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    b: Vec<Triplet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ledger: Option<PrivacyLedger>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub state: ModelState,
    pub k: usize,
    pub ledger: Option<PrivacyLedger>,
}

pub fn write_model(path: &Path, model: &SavedModel) -> Result<()> {
    let s = &model.state;
    let mut b = Vec::new();
    for task in 0..s.t() {
        for index in 0..s.d() {
            let value = s.b[(index, task)];
            if value != 0.0 {
                b.push(Triplet { task, index, value });
            }
        }
    }
    write_json(
        path,
        &ModelFile {
            version: FORMAT_VERSION,
            d: s.d(),
            r: s.r(),
            t: s.t(),
            k: model.k,
            iteration: s.iteration,
            u: to_rows(&s.u),
            w: to_rows(&s.w),
            b,
            ledger: model.ledger.clone(),
        },
    )
}

pub fn read_model(path: &Path) -> Result<SavedModel> {
    let f: ModelFile = read_json(path)?;
    let loc = path.display().to_string();
    if f.version != FORMAT_VERSION {
        return Err(LrsError::format(loc, format!("unsupported model version {}", f.version)));
    }
    if f.u.len() != f.d || f.w.len() != f.t {
        return Err(LrsError::format(loc, format!("u has {} rows and w {} rows for d={}, t={}", f.u.len(), f.w.len(), f.d, f.t)));
    }
    let mut b = DMatrix::zeros(f.d, f.t);
    for (n, tr) in f.b.iter().enumerate() {
        if tr.task >= f.t || tr.index >= f.d {
            return Err(LrsError::format(loc, format!("b entry {n} at (task {}, index {}) is out of range", tr.task, tr.index)));
        }
        b[(tr.index, tr.task)] = tr.value;
    }
    Ok(SavedModel {
        state: ModelState { u: from_rows(&f.u, f.r, &loc)?, w: from_rows(&f.w, f.r, &loc)?, b, iteration: f.iteration },
        k: f.k,
        ledger: f.ledger,
    })
}

pub const METRICS_HEADER: [&str; 6] = ["iteration", "train_mse", "subspace_dist", "max_nnz", "delta", "wall_ms"];

/// Optional or non-finite values are written as empty fields.
fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => v.to_string(),
        _ => String::new(),
    }
}

pub fn write_metrics(path: &Path, report: &FitReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
    for rec in &report.records {
        w.write_record([
            rec.iteration.to_string(),
            fmt_opt(Some(rec.train_mse)),
            fmt_opt(rec.subspace_dist),
            rec.max_nnz.to_string(),
            fmt_opt(Some(rec.delta)),
            format!("{:.3}", rec.wall_ms),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// How `fit-dp` picks clip levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// From the planted model when truth.json exists, otherwise from data quantiles.
    #[default]
    Auto,
    /// Use the a1, a2, a3, aw values of the privacy section as given.
    Manual,
    Truth,
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Dotted config path, e.g. `privacy.epsilon`.
    pub param: String,
    pub values: Vec<Value>,
    /// Command run at each grid point: `fit`, `fit-dp` or `fit-rank1`.
    pub command: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { param: "privacy.epsilon".into(), values: Vec::new(), command: "fit-dp".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    /// One run per seed; `gen.seed` is replaced by each entry.
    pub seeds: Vec<u64>,
    pub baselines: bool,
    /// Fresh samples per task drawn for test RMSE (0 disables).
    pub test_m: usize,
    pub noise_seed: u64,
    pub clip_mode: ClipMode,
    pub gen: GenConfig,
    pub solver: SolverConfig,
    pub privacy: PrivacyConfig,
    pub rank1: Rank1Config,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("out"),
            seeds: vec![0],
            baselines: true,
            test_m: 100,
            noise_seed: 1,
            clip_mode: ClipMode::Auto,
            gen: GenConfig::default(),
            solver: SolverConfig { r: 2, k: 5, ..Default::default() },
            privacy: PrivacyConfig::default(),
            rank1: Rank1Config::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| LrsError::format(format!("{origin}:{}:{}", e.line(), e.column()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| LrsError::Config(format!("override {assignment:?} is not of the form path=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set_value(path.trim(), value)
    }

    pub fn set_value(&mut self, path: &str, value: Value) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).map_err(|e| LrsError::Config(e.to_string()))?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| LrsError::Config(format!("unknown config key {path:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| LrsError::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Cross-section invariants on top of each section's own checks.
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.solver.validate()?;
        self.privacy.validate()?;
        self.rank1.validate()?;
        self.adapt.validate()?;
        let d = self.gen.d;
        for (name, v) in [("solver.k", self.solver.k), ("rank1.k", self.rank1.k), ("adapt.k", self.adapt.k)] {
            if v > d {
                return Err(LrsError::Config(format!("k <= d violated: {name} = {v} > gen.d = {d}")));
            }
        }
        if self.solver.r > d {
            return Err(LrsError::Config(format!("r <= d violated: solver.r = {} > gen.d = {d}", self.solver.r)));
        }
        if self.seeds.is_empty() {
            return Err(LrsError::Config("seeds must list at least one seed".into()));
        }
        Ok(())
    }
}
