//! `lrs`: generate planted data, fit, privately fit, adapt, evaluate and sweep.
//!
//! Every command reads one experiment config (`--config`, JSON) with `--set path=value`
//! overrides applied on top. Exit status is 1 for usage, config and file errors and 2 for
//! numerical failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};

use lrs::adapt::{adapt_new_task, NewTaskTruth};
use lrs::amht::{fit, FitReport};
use lrs::datagen::{gen_ground_truth, gen_samples};
use lrs::dp::{calibrate_noise, default_clip_levels, fit_private, zcdp_to_epsilon, ClipSource, PrivacyLedger};
use lrs::eval::{baseline_full_finetune, baseline_rep_only, baseline_single, recovery_errors, rmse, rmse_shared, rmse_theta};
use lrs::io::{read_dataset, read_model, write_dataset, write_metrics, write_model, ClipMode, DatasetMeta, ExperimentConfig, SavedModel};
use lrs::rank1::{fit_rank1, Rank1Fit};
use lrs::{GroundTruth, LrsError, ModelState, PrivacyConfig, TaskDataset};

const MODEL_FILE: &str = "model.json";
const METRICS_FILE: &str = "metrics.csv";
const TEST_SEED_SALT: u64 = 0x7e57_5eed;

#[derive(Parser)]
#[command(name = "lrs", version, about = "Low-rank plus sparse multi-task regression")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

/// Accepted before and after the subcommand; later overrides win.
#[derive(Args, Default)]
struct Shared {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set solver.k=3`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a planted model and its samples into a dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Alternating minimization with hard thresholding.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Shared vector plus sparse corrections, started from zero.
    FitRank1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Private fit with a zCDP ledger.
    FitDp {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Fit every task of a dataset against the frozen subspace of a saved model.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        shared: Shared,
    },
    /// Score a saved model on its data, fresh samples and the baselines.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Vary one config field and write one averaged CSV row per value.
    Sweep {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
}

impl Command {
    fn shared(&self) -> &Shared {
        match self {
            Command::Gen { shared, .. }
            | Command::Fit { shared, .. }
            | Command::FitRank1 { shared, .. }
            | Command::FitDp { shared, .. }
            | Command::Adapt { shared, .. }
            | Command::Eval { shared, .. }
            | Command::Sweep { shared, .. } => shared,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("LRS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: LRS_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(cli: &Cli) -> lrs::Result<ExperimentConfig> {
    let inner = cli.command.shared();
    let mut cfg = match inner.config.as_ref().or(cli.shared.config.as_ref()) {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in cli.shared.overrides.iter().chain(&inner.overrides) {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> lrs::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { out, .. } => cmd_gen(&cfg, out),
        Command::Fit { data, out, .. } => cmd_fit(&cfg, data, out),
        Command::FitRank1 { data, out, .. } => cmd_fit_rank1(&cfg, data, out),
        Command::FitDp { data, out, .. } => cmd_fit_dp(&cfg, data, out),
        Command::Adapt { data, model, out, .. } => cmd_adapt(&cfg, data, model, out.as_deref()),
        Command::Eval { data, model, .. } => cmd_eval(&cfg, data, model),
        Command::Sweep { out, .. } => cmd_sweep(&cfg, out),
    }
}

fn create_dir(dir: &Path) -> lrs::Result<()> {
    Ok(fs::create_dir_all(dir)?)
}

fn planted(cfg: &ExperimentConfig, seed: u64) -> lrs::Result<(GroundTruth, Vec<TaskDataset>)> {
    let gen = lrs::datagen::GenConfig { seed, ..cfg.gen.clone() };
    let gt = gen_ground_truth(&gen)?;
    let data = gen_samples(&gt, gen.m, seed)?;
    Ok((gt, data))
}

fn held_out(gt: &GroundTruth, m: usize, seed: u64) -> lrs::Result<Vec<TaskDataset>> {
    gen_samples(gt, m, seed ^ TEST_SEED_SALT)
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> lrs::Result<()> {
    let seed = cfg.seeds[0];
    let (gt, data) = planted(cfg, seed)?;
    let meta = DatasetMeta {
        r: Some(cfg.gen.r),
        m: Some(cfg.gen.m),
        sigma: Some(cfg.gen.sigma),
        seed: Some(seed),
        ..DatasetMeta::describe(&data)?
    };
    create_dir(out)?;
    write_dataset(out, &data, &meta, Some(&gt))?;
    println!("wrote {} tasks of {} samples (d = {}) to {}", data.len(), cfg.gen.m, cfg.gen.d, out.display());
    Ok(())
}

fn save_fit(out: &Path, model: &SavedModel, report: &FitReport) -> lrs::Result<()> {
    create_dir(out)?;
    write_model(&out.join(MODEL_FILE), model)?;
    write_metrics(&out.join(METRICS_FILE), report)
}

fn print_fit(state: &ModelState, report: &FitReport, data: &[TaskDataset], truth: Option<&GroundTruth>) -> lrs::Result<()> {
    let mut line = format!("{} iterations, train RMSE {:.4e}", report.records.len(), rmse(state, data)?);
    if let Some(gt) = truth {
        let e = recovery_errors(state, gt)?;
        line += &format!(", subspace distance {:.3e}, max b error {:.3e}", e.subspace_dist, e.b_sup_err);
    }
    println!("{line}");
    Ok(())
}

fn cmd_fit(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> lrs::Result<()> {
    let bundle = read_dataset(data_dir)?;
    let (state, report) = fit(&bundle.datasets, &cfg.solver, None, bundle.truth.as_ref())?;
    print_fit(&state, &report, &bundle.datasets, bundle.truth.as_ref())?;
    save_fit(out, &SavedModel { state, k: cfg.solver.k, ledger: None }, &report)
}

/// The shared vector as a unit direction with per-task weight ‖u‖.
fn rank1_state(fit: &Rank1Fit, iteration: usize) -> ModelState {
    let (d, t) = fit.b.shape();
    let norm = fit.u.norm();
    let mut u = DMatrix::zeros(d, 1);
    if norm > 0.0 {
        u.set_column(0, &(&fit.u / norm));
    } else {
        u[(0, 0)] = 1.0;
    }
    ModelState { u, w: DMatrix::from_element(t, 1, norm), b: fit.b.clone(), iteration }
}

fn cmd_fit_rank1(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> lrs::Result<()> {
    let bundle = read_dataset(data_dir)?;
    let result = fit_rank1(&bundle.datasets, &cfg.rank1, bundle.truth.as_ref())?;
    let state = rank1_state(&result, result.report.records.len());
    let truth = bundle.truth.as_ref().filter(|gt| gt.r() == 1);
    print_fit(&state, &result.report, &bundle.datasets, truth)?;
    save_fit(out, &SavedModel { state, k: cfg.rank1.k, ledger: None }, &result.report)
}

/// Privacy settings with σ and clip levels resolved for this dataset.
fn resolve_privacy(cfg: &ExperimentConfig, data: &[TaskDataset], truth: Option<&GroundTruth>) -> lrs::Result<PrivacyConfig> {
    let mut pcfg = cfg.privacy.clone();
    if pcfg.sigma_dp == 0.0 {
        pcfg.sigma_dp = calibrate_noise(pcfg.epsilon, pcfg.delta)?;
    }
    let m = data.iter().map(|ds| ds.m()).max().unwrap_or(0);
    let levels = match (cfg.clip_mode, truth) {
        (ClipMode::Manual, _) => None,
        (ClipMode::Truth | ClipMode::Auto, Some(gt)) => {
            Some(default_clip_levels(ClipSource::Truth { gt, m, iters: pcfg.planned_iters })?)
        }
        (ClipMode::Truth, None) => {
            return Err(LrsError::Config("clip_mode = truth needs truth.json next to the data".into()))
        }
        (ClipMode::Data | ClipMode::Auto, _) => {
            let (pilot, _) = fit(data, &cfg.solver, None, None)?;
            Some(default_clip_levels(ClipSource::Data { datasets: data, pilot: &pilot, quantile: 0.999 })?)
        }
    };
    if let Some(levels) = levels {
        levels.apply_to(&mut pcfg);
    }
    Ok(pcfg)
}

fn print_releases(ledger: &PrivacyLedger, delta: f64) -> lrs::Result<()> {
    let mut rho = 0.0;
    for release in &ledger.releases {
        rho += release.rho;
        println!(
            "release {:>3}: rho {:.4e}, total rho {:.4e}, epsilon {:.4} at delta {delta:e}",
            release.iteration,
            release.rho,
            rho,
            zcdp_to_epsilon(rho, delta)?
        );
    }
    Ok(())
}

fn cmd_fit_dp(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> lrs::Result<()> {
    let bundle = read_dataset(data_dir)?;
    let pcfg = resolve_privacy(cfg, &bundle.datasets, bundle.truth.as_ref())?;
    println!(
        "sigma_dp {:.4}, clips a1 {:.3} a2 {:.3} a3 {:.3} aw {:.3}",
        pcfg.sigma_dp, pcfg.a1, pcfg.a2, pcfg.a3, pcfg.aw
    );
    let (state, report, ledger) =
        fit_private(&bundle.datasets, &cfg.solver, &pcfg, None, bundle.truth.as_ref(), cfg.noise_seed)?;
    print_releases(&ledger, pcfg.delta)?;
    print_fit(&state, &report, &bundle.datasets, bundle.truth.as_ref())?;
    save_fit(out, &SavedModel { state, k: cfg.solver.k, ledger: Some(ledger) }, &report)
}

fn cmd_adapt(cfg: &ExperimentConfig, data_dir: &Path, model_dir: &Path, out: Option<&Path>) -> lrs::Result<()> {
    let bundle = read_dataset(data_dir)?;
    let model = read_model(&model_dir.join(MODEL_FILE))?;
    let u = &model.state.u;
    let mut tasks = Vec::new();
    for (i, ds) in bundle.datasets.iter().enumerate() {
        let truth = bundle.truth.as_ref().map(|gt| NewTaskTruth::from_ground_truth(gt, i)).transpose()?;
        let fitted = adapt_new_task(ds, u, &cfg.adapt, truth.as_ref())?;
        if let Some(gap) = fitted.gap {
            println!("task {i}: gap {gap:.4e}");
        }
        tasks.push(json!({
            "task": i,
            "w": fitted.w.as_slice(),
            "b": fitted.b.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, v)| json!([j, v])).collect::<Vec<_>>(),
            "gap": fitted.gap,
        }));
    }
    let gaps: Vec<f64> = tasks.iter().filter_map(|t| t["gap"].as_f64()).collect();
    if !gaps.is_empty() {
        println!("mean gap {:.4e} over {} tasks", gaps.iter().sum::<f64>() / gaps.len() as f64, gaps.len());
    }
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&json!({ "tasks": tasks })).expect("json values serialize");
        fs::write(path, text)?;
    }
    Ok(())
}

/// Train and test scores of one fitted state, plus baselines when asked.
fn score(
    cfg: &ExperimentConfig,
    state: &ModelState,
    data: &[TaskDataset],
    truth: Option<&GroundTruth>,
    seed: u64,
) -> lrs::Result<Map<String, Value>> {
    let mut out = Map::new();
    out.insert("train_rmse".into(), json!(rmse(state, data)?));
    let Some(gt) = truth else { return Ok(out) };
    if gt.t() == state.t() && gt.d() == state.d() {
        let e = recovery_errors(state, gt)?;
        out.insert("subspace_dist".into(), json!(e.subspace_dist));
        out.insert("b_sup_err".into(), json!(e.b_sup_err));
        out.insert("support_precision".into(), json!(e.support_precision));
        out.insert("support_recall".into(), json!(e.support_recall));
    }
    if cfg.test_m == 0 {
        return Ok(out);
    }
    let test = held_out(gt, cfg.test_m, seed)?;
    out.insert("test_rmse".into(), json!(rmse_theta(&state.theta_matrix(), &test)?));
    if cfg.baselines {
        out.insert("single_test_rmse".into(), json!(rmse_shared(&baseline_single(data, None)?, &test)?));
        out.insert("finetune_test_rmse".into(), json!(rmse_theta(&baseline_full_finetune(data, None)?, &test)?));
        let rep = baseline_rep_only(data, &cfg.solver)?;
        out.insert("rep_only_test_rmse".into(), json!(rmse_theta(&rep.theta_matrix(), &test)?));
    }
    Ok(out)
}

fn cmd_eval(cfg: &ExperimentConfig, data_dir: &Path, model_dir: &Path) -> lrs::Result<()> {
    let bundle = read_dataset(data_dir)?;
    let model = read_model(&model_dir.join(MODEL_FILE))?;
    let seed = bundle.meta.seed.unwrap_or(cfg.seeds[0]);
    let mut scores = score(cfg, &model.state, &bundle.datasets, bundle.truth.as_ref(), seed)?;
    if let Some(ledger) = &model.ledger {
        scores.insert("rho".into(), json!(ledger.rho_total));
        scores.insert("epsilon".into(), json!(ledger.epsilon_at(cfg.privacy.delta)?));
    }
    println!("{}", serde_json::to_string_pretty(&scores).expect("json values serialize"));
    Ok(())
}

const SWEEP_METRICS: [&str; 4] = ["train_rmse", "test_rmse", "subspace_dist", "b_sup_err"];

fn sweep_point(cfg: &ExperimentConfig, seed: u64) -> lrs::Result<Map<String, Value>> {
    let (gt, data) = planted(cfg, seed)?;
    let state = match cfg.sweep.command.as_str() {
        "fit" => fit(&data, &cfg.solver, None, Some(&gt))?.0,
        "fit-rank1" => {
            let result = fit_rank1(&data, &cfg.rank1, Some(&gt))?;
            rank1_state(&result, result.report.records.len())
        }
        "fit-dp" => {
            let pcfg = resolve_privacy(cfg, &data, Some(&gt))?;
            fit_private(&data, &cfg.solver, &pcfg, None, Some(&gt), cfg.noise_seed)?.0
        }
        other => {
            return Err(LrsError::Config(format!(
                "sweep.command must be fit, fit-rank1 or fit-dp, got {other:?}"
            )))
        }
    };
    let no_baselines = ExperimentConfig { baselines: false, ..cfg.clone() };
    score(&no_baselines, &state, &data, Some(&gt), seed)
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> lrs::Result<()> {
    if cfg.sweep.values.is_empty() {
        return Err(LrsError::Config("sweep.values is empty".into()));
    }
    let mut rows = vec![format!("{},seeds,{}", cfg.sweep.param, SWEEP_METRICS.join(","))];
    for value in &cfg.sweep.values {
        let mut point = cfg.clone();
        point.set_value(&cfg.sweep.param, value.clone())?;
        point.validate()?;
        let runs = point
            .seeds
            .iter()
            .map(|&seed| sweep_point(&point, seed))
            .collect::<lrs::Result<Vec<_>>>()?;
        let cells: Vec<String> = SWEEP_METRICS
            .iter()
            .map(|name| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(*name).and_then(Value::as_f64)).collect();
                if vals.len() == runs.len() {
                    format!("{:e}", vals.iter().sum::<f64>() / vals.len() as f64)
                } else {
                    String::new()
                }
            })
            .collect();
        let label = match value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        println!("{} = {label}: {}", cfg.sweep.param, cells.join(", "));
        rows.push(format!("{label},{},{}", runs.len(), cells.join(",")));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(fs::write(out, rows.join("\n") + "\n")?)
}
