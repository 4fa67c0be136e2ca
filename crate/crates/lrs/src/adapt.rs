//! Method-of-moments warm start for U, and fitting a new task against a frozen U.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amht::{sparse_rounds, TaskStats, Thresholds, WSolver};
use crate::error::{LrsError, Result};
use crate::model::{common_dim, GroundTruth, StepRule, TaskDataset};
use crate::numerics::top_r_eigvecs;

/// (1/mt) Σᵢⱼ (yⱼ⁽ⁱ⁾)² xⱼ⁽ⁱ⁾ xⱼ⁽ⁱ⁾ᵀ, summed per task in parallel and combined in task order.
pub fn moment_matrix(datasets: &[TaskDataset]) -> Result<DMatrix<f64>> {
    let d = common_dim(datasets)?;
    let parts: Vec<DMatrix<f64>> = datasets
        .par_iter()
        .map(|ds| {
            let mut weighted = ds.x.clone();
            for (j, mut row) in weighted.row_iter_mut().enumerate() {
                row *= ds.y[j] * ds.y[j];
            }
            weighted.tr_mul(&ds.x)
        })
        .collect();
    let n: usize = datasets.iter().map(|ds| ds.m()).sum();
    let mut m = DMatrix::zeros(d, d);
    for p in &parts {
        m += p;
    }
    Ok(m / n as f64)
}

/// Top-r eigenvectors of sym(M) − I.
pub fn subspace_from_moment(moment: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let d = moment.nrows();
    let shifted = (moment + moment.transpose()) * 0.5 - DMatrix::identity(d, d);
    let top = top_r_eigvecs(&shifted, r)?;
    if top.degenerate {
        let spectral = shifted.symmetric_eigenvalues().amax();
        return Err(LrsError::DegenerateMoment { gap: top.gap, threshold: 1e-12 * spectral });
    }
    Ok(top.vectors)
}

pub fn mom_init(datasets: &[TaskDataset], r: usize) -> Result<DMatrix<f64>> {
    let d = common_dim(datasets)?;
    let n: usize = datasets.iter().map(|ds| ds.m()).sum();
    if n < d {
        return Err(LrsError::Domain(format!("moment initialization needs mt >= d, got mt={n}, d={d}")));
    }
    subspace_from_moment(&moment_matrix(datasets)?, r)
}

/// Source of the ‖w*‖ factor in the threshold schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    /// ‖w⁽ℓ⁾‖ of the current estimate.
    #[default]
    PlugIn,
    /// ‖w*‖ from the supplied truth.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub k: usize,
    pub iters: usize,
    pub c1: f64,
    pub c3: f64,
    pub c4: f64,
    pub c_prime: f64,
    pub c_double_prime: f64,
    /// Additive slack A in every threshold.
    pub offset: f64,
    /// Bound ρ on the representation error ‖(I − U*U*ᵀ)U‖.
    pub rho: f64,
    pub eps: f64,
    pub inner_cap: usize,
    pub step: StepRule,
    pub refresh_w: bool,
    pub weight_norm: WeightNorm,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            k: 1,
            iters: 10,
            c1: 0.2,
            c3: 0.2,
            c4: 0.1,
            c_prime: 0.3,
            c_double_prime: 0.3,
            offset: 0.0,
            rho: 0.0,
            eps: 1e-6,
            inner_cap: 100,
            step: StepRule::Normalized,
            refresh_w: true,
            weight_norm: WeightNorm::PlugIn,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.c1) {
            return Err(LrsError::Config(format!("c1 must lie in [0, 1/2], got {}", self.c1)));
        }
        if !(self.eps > 0.0) || self.inner_cap == 0 {
            return Err(LrsError::Config("eps and inner_cap must be positive".into()));
        }
        if !(self.offset >= 0.0 && self.rho >= 0.0) {
            return Err(LrsError::Config("offset and rho must be nonnegative".into()));
        }
        Ok(())
    }
}

/// What is known about the new task when evaluating or running the oracle schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NewTaskTruth {
    pub theta: DVector<f64>,
    pub w_norm: f64,
}

impl NewTaskTruth {
    pub fn from_ground_truth(gt: &GroundTruth, task: usize) -> Result<Self> {
        if task >= gt.t() {
            return Err(LrsError::IndexOutOfRange { index: task, len: gt.t() });
        }
        Ok(NewTaskTruth { theta: gt.theta(task), w_norm: gt.w_star.row(task).norm() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub w: DVector<f64>,
    pub b: DVector<f64>,
    /// ‖Uw + b − θ*‖² when the truth is known.
    pub gap: Option<f64>,
    /// Training objective just before and after each w step.
    pub w_step_objectives: Vec<(f64, f64)>,
}

pub fn adapt_new_task(
    data: &TaskDataset,
    u: &DMatrix<f64>,
    cfg: &AdaptConfig,
    truth: Option<&NewTaskTruth>,
) -> Result<Adapted> {
    cfg.validate()?;
    let (d, r) = u.shape();
    if data.d() != d {
        return Err(LrsError::Config(format!("data has d={} but U has {d} rows", data.d())));
    }
    if cfg.k > d {
        return Err(LrsError::Config(format!("k = {} exceeds d = {d}", cfg.k)));
    }
    let oracle_norm = match (cfg.weight_norm, truth) {
        (WeightNorm::Oracle, Some(t)) => Some(t.w_norm),
        (WeightNorm::Oracle, None) => {
            return Err(LrsError::Config("the oracle schedule needs the task's true weights".into()))
        }
        (WeightNorm::PlugIn, _) => None,
    };
    let gap_of = |w: &DVector<f64>, b: &DVector<f64>| truth.map(|t| (u * w + b - &t.theta).norm_squared());

    let mut w = DVector::zeros(r);
    let mut b = DVector::zeros(d);
    if cfg.iters == 0 {
        let gap = gap_of(&w, &b);
        return Ok(Adapted { w, b, gap, w_step_objectives: Vec::new() });
    }

    let stats = TaskStats::new(data, cfg.step);
    let gu = &stats.gram * u;
    let solver = WSolver::new(&stats, u, &gu, 0.0)?;
    let objective = |w: &DVector<f64>, b: &DVector<f64>| (&data.x * (u * w + b) - &data.y).norm_squared();
    let mut trace = Vec::with_capacity(cfg.iters + 1);
    let sqrt_k = (cfg.k.max(1) as f64).sqrt();
    let mut phi = 2.0;

    for ell in 1..=cfg.iters {
        let before = objective(&w, &b);
        w = solver.solve(&gu, &b);
        trace.push((before, objective(&w, &b)));
        if cfg.k == 0 {
            continue;
        }
        let wn = oracle_norm.unwrap_or_else(|| w.norm());
        let (a, rho) = (cfg.offset, cfg.rho);
        let th = Thresholds {
            alpha: a + cfg.c1 * phi * wn + 2.0 * rho * wn / sqrt_k,
            beta: a + phi * wn + 2.0 * rho * wn,
            c1: cfg.c1,
            k: cfg.k,
        };
        let gamma = a + (wn / sqrt_k) * (phi * cfg.c_prime + wn * rho * (1.0 + cfg.c_double_prime));
        let iters = ((ell as f64 * (gamma / cfg.eps).max(2.0).ln()).ceil() as usize).min(cfg.inner_cap);
        let refresh = cfg.refresh_w.then_some(&solver);
        sparse_rounds(&stats, &gu, &mut w, &mut b, &th, gamma, iters, cfg.step, None, refresh);
        phi = wn * phi * cfg.c3 + 2.0 * rho * wn * (1.0 + cfg.c4) + a;
    }
    let before = objective(&w, &b);
    w = solver.solve(&gu, &b);
    trace.push((before, objective(&w, &b)));
    let gap = gap_of(&w, &b);
    Ok(Adapted { w, b, gap, w_step_objectives: trace })
}
