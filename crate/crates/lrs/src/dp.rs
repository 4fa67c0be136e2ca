//! Private U updates under user-level zCDP in the billboard model.
//!
//! Only U is released. Per-user w⁽ⁱ⁾ and b⁽ⁱ⁾ stay local, so the noise goes into the two
//! aggregates that form the U system: the Kronecker-structured Gram A and the right side V.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amht::{fit_with, FitReport, TaskStats};
use crate::datagen::measure_incoherence;
use crate::error::{LrsError, Result};
use crate::model::{common_dim, Batching, GroundTruth, ModelState, PrivacyConfig, SolverConfig, TaskDataset};
use crate::numerics::{clip_scalar, clip_vector, qr_orthonormalize, solve_dense, GramBlock, StructuredSystem};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(LrsError::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// σ_DP = 2√(ln(1/δ) + ε)/ε, or the √(8 ln(1/δ))/ε branch when ε ≤ ln(1/δ) and it is smaller.
pub fn calibrate_noise(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(LrsError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    let log_inv = (1.0 / delta).ln();
    let general = 2.0 * (log_inv + epsilon).sqrt() / epsilon;
    if epsilon <= log_inv {
        Ok(general.min(calibrate_noise_tight(epsilon, delta)?))
    } else {
        Ok(general)
    }
}

/// √(8 ln(1/δ))/ε; sound only for ε ≤ ln(1/δ).
pub fn calibrate_noise_tight(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(LrsError::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    check_delta(delta)?;
    Ok((8.0 * (1.0 / delta).ln()).sqrt() / epsilon)
}

/// ε = ρ + 2√(ρ ln(1/δ)) for ρ-zCDP.
pub fn zcdp_to_epsilon(rho: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(rho >= 0.0) {
        return Err(LrsError::Domain(format!("rho must be nonnegative, got {rho}")));
    }
    Ok(rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt())
}

/// ε of the whole run with ρ = 1/σ_DP².
pub fn accountant_epsilon(sigma_dp: f64, delta: f64) -> Result<f64> {
    if !(sigma_dp > 0.0) {
        return Err(LrsError::Domain(format!("sigma_dp must be positive, got {sigma_dp}")));
    }
    zcdp_to_epsilon(1.0 / (sigma_dp * sigma_dp), delta)
}

/// Standard deviations (σ₁, σ₂) of the noise added to the A and V sums.
pub fn noise_stds(cfg: &PrivacyConfig, m: usize) -> (f64, f64) {
    let scale = m as f64 * (cfg.planned_iters as f64).sqrt() * cfg.sigma_dp;
    (
        scale * cfg.a1 * cfg.a1 * cfg.aw * cfg.aw,
        scale * cfg.a1 * (cfg.a2 + cfg.a3) * cfg.aw,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Release {
    pub iteration: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub planned: usize,
    pub sigma_dp: f64,
    pub releases: Vec<Release>,
    pub rho_total: f64,
}

impl PrivacyLedger {
    pub fn new(planned: usize, sigma_dp: f64) -> Self {
        PrivacyLedger { planned, sigma_dp, releases: Vec::new(), rho_total: 0.0 }
    }

    /// ρ charged per release: 1/(L σ_DP²).
    pub fn rho_per_release(&self) -> f64 {
        1.0 / (self.planned as f64 * self.sigma_dp * self.sigma_dp)
    }

    pub fn record(&mut self, iteration: usize) -> Result<Release> {
        if self.releases.len() >= self.planned {
            return Err(LrsError::PrivacyBudgetMismatch {
                planned: self.planned,
                attempted: self.releases.len() + 1,
            });
        }
        let rel = Release { iteration, rho: self.rho_per_release() };
        self.releases.push(rel);
        self.rho_total += rel.rho;
        Ok(rel)
    }

    pub fn epsilon_at(&self, delta: f64) -> Result<f64> {
        zcdp_to_epsilon(self.rho_total, delta)
    }
}

/// Clipped per-user contributions to A and V.
struct ClippedTask {
    gram: DMatrix<f64>,
    w_outer: DMatrix<f64>,
    rhs: DMatrix<f64>,
}

fn clip_task(ds: &TaskDataset, w: &DVector<f64>, b: &DVector<f64>, cfg: &PrivacyConfig) -> ClippedTask {
    let (m, d) = (ds.m(), ds.d());
    let mut xh = DMatrix::zeros(m, d);
    let mut resid = DVector::zeros(m);
    for j in 0..m {
        let row = clip_vector(&ds.x.row(j).transpose(), cfg.a1);
        let fitted = clip_scalar(row.dot(b), cfg.a3);
        resid[j] = clip_scalar(ds.y[j], cfg.a2) - fitted;
        xh.set_row(j, &row.transpose());
    }
    let wh = clip_vector(w, cfg.aw);
    ClippedTask {
        gram: xh.tr_mul(&xh),
        w_outer: &wh * wh.transpose(),
        rhs: xh.tr_mul(&resid) * wh.transpose(),
    }
}

/// The normalized noisy pair (A, vec V), noise drawn from stream `iteration` of `noise_seed`.
pub fn private_system(
    datasets: &[TaskDataset],
    w: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cfg: &PrivacyConfig,
    noise_seed: u64,
    iteration: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    cfg.validate()?;
    let d = common_dim(datasets)?;
    let t = datasets.len();
    let r = w.ncols();
    if w.nrows() != t || b.shape() != (d, t) {
        return Err(LrsError::Config(format!(
            "w is {:?} and b is {:?} for d={d}, t={t}",
            w.shape(),
            b.shape()
        )));
    }
    let tasks: Vec<ClippedTask> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| clip_task(ds, &w.row(i).transpose(), &b.column(i).clone_owned(), cfg))
        .collect();
    let mut rhs = DMatrix::zeros(d, r);
    for task in &tasks {
        rhs += &task.rhs;
    }
    let blocks = tasks.iter().map(|c| GramBlock { w_outer: c.w_outer.clone(), gram: &c.gram }).collect();
    let mut a = StructuredSystem { blocks, rhs: DMatrix::zeros(d, r) }.assemble();

    let m = datasets.iter().map(|ds| ds.m()).max().unwrap_or(0);
    let (s1, s2) = noise_stds(cfg, m);
    if cfg.sigma_dp > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        rng.set_stream(iteration as u64);
        let n = d * r;
        for i in 0..n {
            for j in i..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                a[(i, j)] += s1 * z;
                if j != i {
                    a[(j, i)] += s1 * z;
                }
            }
        }
        for v in rhs.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += s2 * z;
        }
    }
    let n_total: usize = datasets.iter().map(|ds| ds.m()).sum();
    let scale = 1.0 / n_total as f64;
    a *= scale;
    rhs *= scale;
    Ok((a, DVector::from_column_slice(rhs.as_slice())))
}

/// Pre-QR U from the clipped, noised system. Returns the ρ charged for the release.
pub fn private_update_u(
    datasets: &[TaskDataset],
    w: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cfg: &PrivacyConfig,
    noise_seed: u64,
    iteration: usize,
) -> Result<(DMatrix<f64>, Release)> {
    let (a, v) = private_system(datasets, w, b, cfg, noise_seed, iteration)?;
    let (d, r) = (b.nrows(), w.ncols());
    let x = solve_dense(&a, &v)?;
    let release = Release {
        iteration,
        rho: 1.0 / (cfg.planned_iters as f64 * cfg.sigma_dp * cfg.sigma_dp),
    };
    Ok((DMatrix::from_column_slice(d, r, x.as_slice()), release))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipLevels {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub aw: f64,
}

impl ClipLevels {
    pub fn apply_to(&self, cfg: &mut PrivacyConfig) {
        cfg.a1 = self.a1;
        cfg.a2 = self.a2;
        cfg.a3 = self.a3;
        cfg.aw = self.aw;
    }
}

/// Scale bounds behind the high-probability clip levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipBounds {
    pub d: usize,
    /// μ* λ*_r.
    pub mu_lambda_r: f64,
    pub b_norm_max: f64,
    pub sigma: f64,
    pub m: usize,
    pub t: usize,
    pub iters: usize,
}

pub const CLIP_FLOOR: f64 = 1e-6;

pub fn clip_levels_from_bounds(bounds: &ClipBounds) -> ClipLevels {
    let log_factor = (2.0 * (10.0 * (bounds.m * bounds.t * bounds.iters) as f64).ln()).sqrt();
    let w_bound = bounds.mu_lambda_r.sqrt();
    ClipLevels {
        a1: (bounds.d as f64).sqrt() * log_factor,
        a2: (w_bound + bounds.b_norm_max + bounds.sigma) * log_factor,
        a3: bounds.b_norm_max * log_factor + CLIP_FLOOR,
        aw: w_bound * log_factor,
    }
}

/// Where default clip levels come from.
#[derive(Debug, Clone, Copy)]
pub enum ClipSource<'a> {
    /// Planted model plus the sample and iteration counts.
    Truth { gt: &'a GroundTruth, m: usize, iters: usize },
    /// Empirical quantiles of ‖x‖, |y| and, from a pilot state, |xᵀb| and ‖w‖.
    /// These levels depend on the data and carry no privacy guarantee of their own.
    Data { datasets: &'a [TaskDataset], pilot: &'a ModelState, quantile: f64 },
}

/// Nearest-rank empirical quantile.
pub fn empirical_quantile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

pub fn default_clip_levels(source: ClipSource<'_>) -> Result<ClipLevels> {
    match source {
        ClipSource::Truth { gt, m, iters } => {
            let inc = measure_incoherence(gt);
            let b_norm_max = gt.b_star.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
            Ok(clip_levels_from_bounds(&ClipBounds {
                d: gt.d(),
                mu_lambda_r: inc.mu * inc.lambda_r,
                b_norm_max,
                sigma: gt.sigma,
                m,
                t: gt.t(),
                iters,
            }))
        }
        ClipSource::Data { datasets, pilot, quantile } => {
            common_dim(datasets)?;
            if !(quantile > 0.0 && quantile <= 1.0) {
                return Err(LrsError::Config(format!("quantile must lie in (0, 1], got {quantile}")));
            }
            if pilot.t() != datasets.len() {
                return Err(LrsError::Config("pilot state has a different task count".into()));
            }
            let mut xn = Vec::new();
            let mut yn = Vec::new();
            let mut fitted = Vec::new();
            for (i, ds) in datasets.iter().enumerate() {
                let xb = &ds.x * pilot.b.column(i);
                for j in 0..ds.m() {
                    xn.push(ds.x.row(j).norm());
                    yn.push(ds.y[j].abs());
                    fitted.push(xb[j].abs());
                }
            }
            let mut wn: Vec<f64> = pilot.w.row_iter().map(|r| r.norm()).collect();
            Ok(ClipLevels {
                a1: empirical_quantile(&mut xn, quantile).max(CLIP_FLOOR),
                a2: empirical_quantile(&mut yn, quantile).max(CLIP_FLOOR),
                a3: empirical_quantile(&mut fitted, quantile).max(CLIP_FLOOR),
                aw: empirical_quantile(&mut wn, quantile).max(CLIP_FLOOR),
            })
        }
    }
}

/// Orthonormal d×r start drawn without looking at the data.
pub fn data_independent_init(d: usize, r: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
    Ok(qr_orthonormalize(&g)?.0)
}

/// The alternating solver with the private U step. `init` defaults to a data-independent
/// random basis drawn from `noise_seed`.
pub fn fit_private(
    datasets: &[TaskDataset],
    cfg: &SolverConfig,
    pcfg: &PrivacyConfig,
    init: Option<&DMatrix<f64>>,
    gt: Option<&GroundTruth>,
    noise_seed: u64,
) -> Result<(ModelState, FitReport, PrivacyLedger)> {
    pcfg.validate()?;
    if cfg.batching == Batching::Split {
        return Err(LrsError::Config("private fitting uses every row in each release; set batching=reuse".into()));
    }
    let d = common_dim(datasets)?;
    let start = match init {
        Some(u) => u.clone(),
        None => data_independent_init(d, cfg.r, noise_seed ^ 0x9e37_79b9_7f4a_7c15)?,
    };
    let mut ledger = PrivacyLedger::new(pcfg.planned_iters, pcfg.sigma_dp);
    let mut step = |ell: usize, _: &[TaskStats], w: &DMatrix<f64>, b: &DMatrix<f64>| {
        ledger.record(ell)?;
        private_update_u(datasets, w, b, pcfg, noise_seed, ell).map(|(u, _)| u)
    };
    let (state, report) = fit_with(datasets, cfg, Some(&start), gt, &mut step)?;
    Ok((state, report, ledger))
}
