//! Recovery metrics, RMSE, population excess risk and the three baselines.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amht::fit;
use crate::error::{LrsError, Result};
use crate::model::{common_dim, GroundTruth, ModelState, SolverConfig, TaskDataset};
use crate::numerics::least_squares;

const ORTHO_TOL: f64 = 1e-8;

/// ‖u − u_ref (u_refᵀ u)‖_F without any input checks.
pub(crate) fn projection_residual(u: &DMatrix<f64>, u_ref: &DMatrix<f64>) -> f64 {
    (u - u_ref * u_ref.tr_mul(u)).norm()
}

fn ortho_error(u: &DMatrix<f64>) -> f64 {
    (u.tr_mul(u) - DMatrix::identity(u.ncols(), u.ncols())).norm()
}

/// ‖(I − u_ref u_refᵀ) u‖_F for orthonormal inputs.
pub fn subspace_distance(u: &DMatrix<f64>, u_ref: &DMatrix<f64>) -> Result<f64> {
    if u.nrows() != u_ref.nrows() {
        return Err(LrsError::Domain(format!(
            "subspaces live in different dimensions ({} vs {})",
            u.nrows(),
            u_ref.nrows()
        )));
    }
    for (name, m) in [("u", u), ("u_ref", u_ref)] {
        let e = ortho_error(m);
        if e > ORTHO_TOL {
            return Err(LrsError::Domain(format!("{name} is not orthonormal (‖mᵀm − I‖_F = {e:.3e})")));
        }
    }
    Ok(projection_residual(u, u_ref))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryErrors {
    pub subspace_dist: f64,
    pub b_sup_err: f64,
    pub theta_max_err: f64,
    /// Pooled over all tasks; 1 when nothing is predicted.
    pub support_precision: f64,
    /// Pooled over all tasks; 1 when nothing is planted.
    pub support_recall: f64,
}

pub fn recovery_errors(state: &ModelState, gt: &GroundTruth) -> Result<RecoveryErrors> {
    if state.d() != gt.d() || state.t() != gt.t() {
        return Err(LrsError::Config(format!(
            "state is d={}, t={} but ground truth is d={}, t={}",
            state.d(),
            state.t(),
            gt.d(),
            gt.t()
        )));
    }
    let subspace_dist = subspace_distance(&state.u, &gt.u_star)?;
    let b_sup_err = (&state.b - &gt.b_star).amax();
    let theta_err = state.theta_matrix() - gt.theta_matrix();
    let theta_max_err = theta_err.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let (mut tp, mut predicted, mut planted) = (0usize, 0usize, 0usize);
    for (est, truth) in state.b.iter().zip(gt.b_star.iter()) {
        let (e, p) = (*est != 0.0, *truth != 0.0);
        predicted += e as usize;
        planted += p as usize;
        tp += (e && p) as usize;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(RecoveryErrors {
        subspace_dist,
        b_sup_err,
        theta_max_err,
        support_precision: ratio(tp, predicted),
        support_recall: ratio(tp, planted),
    })
}

/// RMSE of per-task parameters (columns of `theta`) over every sample.
pub fn rmse_theta(theta: &DMatrix<f64>, datasets: &[TaskDataset]) -> Result<f64> {
    let d = common_dim(datasets)?;
    if theta.nrows() != d || theta.ncols() != datasets.len() {
        return Err(LrsError::Config(format!(
            "parameters are {}×{}, data has d={d}, t={}",
            theta.nrows(),
            theta.ncols(),
            datasets.len()
        )));
    }
    let sums: Vec<f64> = datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| (&ds.x * theta.column(i) - &ds.y).norm_squared())
        .collect();
    let n: usize = datasets.iter().map(|ds| ds.m()).sum();
    Ok((sums.iter().sum::<f64>() / n as f64).sqrt())
}

pub fn rmse(state: &ModelState, datasets: &[TaskDataset]) -> Result<f64> {
    rmse_theta(&state.theta_matrix(), datasets)
}

/// One parameter vector shared by all tasks.
pub fn rmse_shared(theta: &DVector<f64>, datasets: &[TaskDataset]) -> Result<f64> {
    let t = datasets.len();
    rmse_theta(&DMatrix::from_fn(theta.len(), t, |j, _| theta[j]), datasets)
}

/// ‖θ⁽ⁱ⁾ − θ*⁽ⁱ⁾‖², the excess population risk under isotropic Gaussian design.
pub fn population_gap(state: &ModelState, task: usize, gt: &GroundTruth) -> Result<f64> {
    if task >= gt.t() {
        return Err(LrsError::IndexOutOfRange { index: task, len: gt.t() });
    }
    Ok((state.theta(task)? - gt.theta(task)).norm_squared())
}

/// 1e−6·trace(XᵀX)/d when the design has fewer rows than columns, else 0.
pub fn auto_ridge(x: &DMatrix<f64>) -> f64 {
    if x.nrows() < x.ncols() {
        1e-6 * x.norm_squared() / x.ncols() as f64
    } else {
        0.0
    }
}

/// Pooled least squares over all tasks; `None` picks the ridge by [`auto_ridge`].
pub fn baseline_single(datasets: &[TaskDataset], ridge: Option<f64>) -> Result<DVector<f64>> {
    let d = common_dim(datasets)?;
    let n: usize = datasets.iter().map(|ds| ds.m()).sum();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for ds in datasets {
        x.rows_mut(row, ds.m()).copy_from(&ds.x);
        y.rows_mut(row, ds.m()).copy_from(&ds.y);
        row += ds.m();
    }
    let ridge = ridge.unwrap_or_else(|| auto_ridge(&x));
    least_squares(&x, &y, ridge)
}

/// Independent least squares per task (d×t).
pub fn baseline_full_finetune(datasets: &[TaskDataset], ridge: Option<f64>) -> Result<DMatrix<f64>> {
    let d = common_dim(datasets)?;
    let cols: Vec<DVector<f64>> = datasets
        .par_iter()
        .map(|ds| least_squares(&ds.x, &ds.y, ridge.unwrap_or_else(|| auto_ridge(&ds.x))))
        .collect::<Result<_>>()?;
    let mut theta = DMatrix::zeros(d, datasets.len());
    for (i, c) in cols.iter().enumerate() {
        theta.set_column(i, c);
    }
    Ok(theta)
}

/// The alternating solver with the sparse part switched off.
pub fn baseline_rep_only(datasets: &[TaskDataset], cfg: &SolverConfig) -> Result<ModelState> {
    let cfg = SolverConfig { k: 0, support_cap: None, ..cfg.clone() };
    Ok(fit(datasets, &cfg, None, None)?.0)
}
