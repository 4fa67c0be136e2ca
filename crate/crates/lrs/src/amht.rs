//! Alternating minimization with hard thresholding for the rank-r model.
//!
//! One outer iteration runs, per task, a thresholded gradient loop on b⁽ⁱ⁾ (with w⁽ⁱ⁾
//! optionally re-solved after every round), then the closed-form w⁽ⁱ⁾ update, then the
//! Kronecker-structured U solve followed by QR.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::mom_init;
use crate::error::{LrsError, Result};
use crate::eval::projection_residual;
use crate::model::{common_dim, Batching, GroundTruth, ModelState, SolverConfig, StepRule, TaskDataset};
use crate::numerics::{
    check_gram_nonsingular, hard_threshold_in_place, keep_largest, lambda_max, least_squares,
    qr_orthonormalize, solve_structured, GramBlock, StructuredSystem,
};

/// Sufficient statistics of one task: XᵀX, Xᵀy and the row count.
#[derive(Debug, Clone)]
pub(crate) struct TaskStats {
    pub gram: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub m: usize,
    /// λmax(XᵀX)/m, present when the Lipschitz step needs it.
    pub lip: Option<f64>,
}

impl TaskStats {
    pub fn new(ds: &TaskDataset, step: StepRule) -> Self {
        let gram = ds.x.tr_mul(&ds.x);
        let m = ds.m();
        let lip = (step == StepRule::Lipschitz).then(|| lambda_max(&gram) / m as f64);
        TaskStats { xty: ds.x.tr_mul(&ds.y), gram, m, lip }
    }

    pub fn collect(datasets: &[TaskDataset], step: StepRule) -> Vec<Self> {
        datasets.par_iter().map(|ds| TaskStats::new(ds, step)).collect()
    }

    fn step_size(&self, rule: StepRule, grad: &DVector<f64>, b: &DVector<f64>, k: usize) -> f64 {
        match rule {
            StepRule::Unit => 1.0,
            StepRule::Lipschitz => match self.lip {
                Some(l) if l > 1.0 => 1.0 / l,
                _ => 1.0,
            },
            StepRule::Normalized => {
                let mut gs = DVector::zeros(grad.len());
                if b.iter().any(|v| *v != 0.0) {
                    for i in 0..grad.len() {
                        if b[i] != 0.0 {
                            gs[i] = grad[i];
                        }
                    }
                } else {
                    let mut idx: Vec<usize> = (0..grad.len()).collect();
                    idx.sort_by(|&a, &c| grad[c].abs().total_cmp(&grad[a].abs()).then(a.cmp(&c)));
                    for &i in idx.iter().take(k.max(1)) {
                        gs[i] = grad[i];
                    }
                }
                let num = gs.norm_squared();
                let den = (&self.gram * &gs).dot(&gs) / self.m as f64;
                if num > 0.0 && den > 0.0 {
                    num / den
                } else {
                    1.0
                }
            }
        }
    }
}

/// α, β, c1, k of the threshold recursion; γ is carried by the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub alpha: f64,
    pub beta: f64,
    pub c1: f64,
    pub k: usize,
}

impl Thresholds {
    /// Δ = α + c1 (γ + β/√k).
    pub fn delta(&self, gamma: f64) -> f64 {
        self.alpha + self.c1 * (gamma + self.beta / (self.k as f64).sqrt())
    }

    /// γ ← 2 c1 γ + 2 (α + c1 β/√k).
    pub fn next_gamma(&self, gamma: f64) -> f64 {
        2.0 * self.c1 * gamma + 2.0 * (self.alpha + self.c1 * self.beta / (self.k as f64).sqrt())
    }
}

/// One thresholded gradient round on b with the dense part's contribution G·v given.
pub(crate) fn sparse_step(
    stats: &TaskStats,
    gv: &DVector<f64>,
    b: &mut DVector<f64>,
    delta: f64,
    step: StepRule,
    k: usize,
    cap: Option<usize>,
) {
    let m = stats.m as f64;
    let grad = (&stats.gram * &*b + gv - &stats.xty) / m;
    let eta = stats.step_size(step, &grad, b, k);
    b.axpy(-eta, &grad, 1.0);
    hard_threshold_in_place(b, delta);
    if let Some(n) = cap {
        keep_largest(b, n);
    }
}

/// Closed-form w given b for a fixed U: (UᵀGU + ridge I)⁻¹ Uᵀ(Xᵀy − G b).
pub(crate) struct WSolver {
    chol: Cholesky<f64, Dyn>,
    uty: DVector<f64>,
}

impl WSolver {
    pub fn new(stats: &TaskStats, u: &DMatrix<f64>, gu: &DMatrix<f64>, ridge: f64) -> Result<Self> {
        let mut p = u.tr_mul(gu);
        p = (&p + p.transpose()) * 0.5;
        if ridge == 0.0 {
            check_gram_nonsingular(&p)?;
        }
        for i in 0..p.nrows() {
            p[(i, i)] += ridge;
        }
        let chol = p
            .cholesky()
            .ok_or_else(|| LrsError::SingularSystem("(XU)ᵀ(XU) is not positive definite".into()))?;
        Ok(WSolver { chol, uty: u.tr_mul(&stats.xty) })
    }

    pub fn solve(&self, gu: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&(&self.uty - gu.tr_mul(b)))
    }
}

/// Thresholded rounds for one task; w is re-solved after each round when `refresh` is set.
/// Returns the last Δ used (NaN when no round ran).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sparse_rounds(
    stats: &TaskStats,
    gu: &DMatrix<f64>,
    w: &mut DVector<f64>,
    b: &mut DVector<f64>,
    th: &Thresholds,
    gamma0: f64,
    iters: usize,
    step: StepRule,
    cap: Option<usize>,
    refresh: Option<&WSolver>,
) -> f64 {
    let mut gamma = gamma0;
    let mut last = f64::NAN;
    for _ in 0..iters {
        let delta = th.delta(gamma);
        sparse_step(stats, &(gu * &*w), b, delta, step, th.k, cap);
        gamma = th.next_gamma(gamma);
        last = delta;
        if let Some(ws) = refresh {
            *w = ws.solve(gu, b);
        }
    }
    last
}

/// Parameters of one call of the sparse-vector routine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub iters: usize,
    pub c1: f64,
    pub k: usize,
}

/// T rounds of c ← b − (1/m)Xᵀ(Xb + Xv − y), b ← HT(c, Δ) with the γ recursion,
/// using the unit step.
pub fn optimize_sparse_vector(
    data: &TaskDataset,
    v: &DVector<f64>,
    b0: &DVector<f64>,
    sched: &SparseSchedule,
) -> DVector<f64> {
    optimize_sparse_vector_with(data, v, b0, sched, StepRule::Unit)
}

pub fn optimize_sparse_vector_with(
    data: &TaskDataset,
    v: &DVector<f64>,
    b0: &DVector<f64>,
    sched: &SparseSchedule,
    step: StepRule,
) -> DVector<f64> {
    let mut b = b0.clone();
    if sched.iters == 0 {
        return b;
    }
    let stats = TaskStats::new(data, step);
    let gv = DMatrix::from_column_slice(v.len(), 1, (&stats.gram * v).as_slice());
    let mut one = DVector::from_element(1, 1.0);
    let th = Thresholds { alpha: sched.alpha, beta: sched.beta, c1: sched.c1, k: sched.k.max(1) };
    sparse_rounds(&stats, &gv, &mut one, &mut b, &th, sched.gamma, sched.iters, step, None, None);
    b
}

/// ((XU)ᵀ(XU) + ridge I)⁻¹ (XU)ᵀ(y − Xb).
pub fn update_w(data: &TaskDataset, u: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let xu = &data.x * u;
    least_squares(&xu, &(&data.y - &data.x * b), ridge)
}

/// Pre-QR minimizer over U of Σᵢ ‖Xᵢ(U w⁽ⁱ⁾ + b⁽ⁱ⁾) − y⁽ⁱ⁾‖².
pub fn update_u(datasets: &[TaskDataset], w: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    common_dim(datasets)?;
    let stats: Vec<TaskStats> = TaskStats::collect(datasets, StepRule::Unit);
    update_u_stats(&stats, w, b)
}

pub(crate) fn update_u_stats(stats: &[TaskStats], w: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = stats.len();
    if w.nrows() != t || b.ncols() != t {
        return Err(LrsError::Config(format!(
            "w has {} rows and b {} columns for {t} tasks",
            w.nrows(),
            b.ncols()
        )));
    }
    let d = stats[0].gram.nrows();
    let r = w.ncols();
    let parts: Vec<DMatrix<f64>> = stats
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let resid = &s.xty - &s.gram * b.column(i);
            resid * w.row(i)
        })
        .collect();
    let mut rhs = DMatrix::zeros(d, r);
    for p in &parts {
        rhs += p;
    }
    let blocks = stats
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let wi = w.row(i).transpose();
            GramBlock { w_outer: &wi * wi.transpose(), gram: &s.gram }
        })
        .collect();
    solve_structured(&StructuredSystem { blocks, rhs })
}

/// Σᵢ ‖Xᵢ θ⁽ⁱ⁾ − y⁽ⁱ⁾‖², the training objective.
pub fn objective(datasets: &[TaskDataset], theta: &DMatrix<f64>) -> f64 {
    datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| (&ds.x * theta.column(i) - &ds.y).norm_squared())
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

fn total_samples(datasets: &[TaskDataset]) -> usize {
    datasets.iter().map(|d| d.m()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_mse: f64,
    pub subspace_dist: Option<f64>,
    pub max_nnz: usize,
    pub delta: f64,
    pub inner_iters: usize,
    /// Objective (3) after the sparse pass, after the w step and after U + QR.
    pub obj_after_sparse: f64,
    pub obj_after_w: f64,
    pub obj_after_u: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitReport {
    pub records: Vec<IterationRecord>,
}

/// Computes the pre-QR U for iteration ℓ from the current W and B.
pub(crate) type UStep<'a> = dyn FnMut(usize, &[TaskStats], &DMatrix<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>> + 'a;

pub fn fit(
    datasets: &[TaskDataset],
    cfg: &SolverConfig,
    init_u: Option<&DMatrix<f64>>,
    gt: Option<&GroundTruth>,
) -> Result<(ModelState, FitReport)> {
    let mut step = |_: usize, stats: &[TaskStats], w: &DMatrix<f64>, b: &DMatrix<f64>| update_u_stats(stats, w, b);
    fit_with(datasets, cfg, init_u, gt, &mut step)
}

pub(crate) fn fit_with(
    datasets: &[TaskDataset],
    cfg: &SolverConfig,
    init_u: Option<&DMatrix<f64>>,
    gt: Option<&GroundTruth>,
    u_step: &mut UStep<'_>,
) -> Result<(ModelState, FitReport)> {
    let d = common_dim(datasets)?;
    let t = datasets.len();
    cfg.validate_for(d, t)?;
    let r = cfg.r;
    let u0 = match init_u {
        Some(u) => {
            if u.shape() != (d, r) {
                return Err(LrsError::Config(format!("init_u is {:?}, expected ({d}, {r})", u.shape())));
            }
            u.clone()
        }
        None => mom_init(datasets, r)?,
    };
    let mut state = ModelState { u: u0, w: DMatrix::zeros(t, r), b: DMatrix::zeros(d, t), iteration: 0 };
    let mut report = FitReport::default();
    if cfg.outer_iters == 0 {
        return Ok((state, report));
    }

    let split = cfg.batching == Batching::Split;
    let chunks = 3 * cfg.outer_iters;
    if split && datasets.iter().any(|ds| ds.m() < chunks) {
        return Err(LrsError::Config(format!(
            "batching=split needs at least 3L = {chunks} samples per task"
        )));
    }
    let full = if split { Vec::new() } else { TaskStats::collect(datasets, cfg.step) };
    let chunk_stats = |c: usize| -> Vec<TaskStats> {
        let parts: Vec<TaskDataset> = datasets.iter().map(|ds| ds.row_chunk(c, chunks)).collect();
        TaskStats::collect(&parts, cfg.step)
    };

    // Initial w by least squares against the starting subspace with b = 0.
    {
        let init_stats = if split { chunk_stats(1) } else { Vec::new() };
        let stats = if split { &init_stats } else { &full };
        let zero = DVector::zeros(d);
        let rows: Vec<DVector<f64>> = stats
            .par_iter()
            .map(|s| {
                let gu = &s.gram * &state.u;
                WSolver::new(s, &state.u, &gu, cfg.ridge_eps).map(|ws| ws.solve(&gu, &zero))
            })
            .collect::<Result<_>>()?;
        for (i, w) in rows.iter().enumerate() {
            state.w.set_row(i, &w.transpose());
        }
    }

    let m_total = total_samples(datasets) as f64;
    let sqrt_k = (cfg.k.max(1) as f64).sqrt();
    let mut gamma = cfg.gamma0;
    for ell in 1..=cfg.outer_iters {
        let started = Instant::now();
        let iters = {
            let ratio = (gamma / cfg.eps).max(2.0);
            let raw = (ell as f64 * ratio.ln()).ceil();
            (raw as usize).min(cfg.inner_cap)
        };
        let th = Thresholds {
            alpha: cfg.c4.powi(ell as i32 - 1) * cfg.init_bound / sqrt_k,
            beta: cfg.c5.powi(ell as i32 - 1) * cfg.init_bound,
            c1: cfg.c1,
            k: cfg.k.max(1),
        };

        let (sb, sw, su);
        let (stats_b, stats_w, stats_u): (&[TaskStats], &[TaskStats], &[TaskStats]) = if split {
            let base = 3 * (ell - 1);
            sb = chunk_stats(base);
            sw = chunk_stats(base + 1);
            su = chunk_stats(base + 2);
            (&sb, &sw, &su)
        } else {
            (&full, &full, &full)
        };

        // Sparse pass, per task.
        let mut delta_used = f64::NAN;
        if cfg.k > 0 {
            let u = &state.u;
            let results: Vec<(DVector<f64>, DVector<f64>, f64)> = stats_b
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let gu = &s.gram * u;
                    let mut w = state.w.row(i).transpose();
                    let mut b = state.b.column(i).clone_owned();
                    let solver = if cfg.refresh_w { Some(WSolver::new(s, u, &gu, cfg.ridge_eps)?) } else { None };
                    let delta = sparse_rounds(
                        s,
                        &gu,
                        &mut w,
                        &mut b,
                        &th,
                        gamma,
                        iters,
                        cfg.step,
                        cfg.support_cap,
                        solver.as_ref(),
                    );
                    Ok((w, b, delta))
                })
                .collect::<Result<_>>()?;
            for (i, (w, b, delta)) in results.into_iter().enumerate() {
                state.w.set_row(i, &w.transpose());
                state.b.set_column(i, &b);
                delta_used = delta;
            }
        }
        let obj_after_sparse = objective(datasets, &state.theta_matrix());

        // w step.
        {
            let u = &state.u;
            let b = &state.b;
            let rows: Vec<DVector<f64>> = stats_w
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let gu = &s.gram * u;
                    WSolver::new(s, u, &gu, cfg.ridge_eps).map(|ws| ws.solve(&gu, &b.column(i).clone_owned()))
                })
                .collect::<Result<_>>()?;
            for (i, w) in rows.iter().enumerate() {
                state.w.set_row(i, &w.transpose());
            }
        }
        let obj_after_w = objective(datasets, &state.theta_matrix());

        // U step, QR, and the matching rotation of W.
        let u_raw = u_step(ell, stats_u, &state.w, &state.b)?;
        let (q, rf) = qr_orthonormalize(&u_raw)?;
        let moved = projection_residual(&state.u, &q);
        state.u = q;
        state.w = &state.w * rf.transpose();
        state.iteration = ell;
        let theta = state.theta_matrix();
        let obj_after_u = objective(datasets, &theta);

        report.records.push(IterationRecord {
            iteration: ell,
            train_mse: obj_after_u / m_total,
            subspace_dist: gt.map(|g| projection_residual(&state.u, &g.u_star)),
            max_nnz: state.max_nnz(),
            delta: delta_used,
            inner_iters: if cfg.k > 0 { iters } else { 0 },
            obj_after_sparse,
            obj_after_w,
            obj_after_u,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        gamma = cfg.c3.powi(ell as i32) * cfg.gamma0;
        if moved < cfg.stop_tol {
            break;
        }
    }
    Ok((state, report))
}
