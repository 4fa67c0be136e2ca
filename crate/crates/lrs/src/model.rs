//! Domain types shared by the solvers: planted truth, per-task data, fitted state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LrsError, Result};

/// Planted parameters: θ*⁽ⁱ⁾ = U* w*⁽ⁱ⁾ + b*⁽ⁱ⁾.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// d×r, orthonormal columns.
    pub u_star: DMatrix<f64>,
    /// t×r, row i is w*⁽ⁱ⁾.
    pub w_star: DMatrix<f64>,
    /// d×t, column i is b*⁽ⁱ⁾.
    pub b_star: DMatrix<f64>,
    pub sigma: f64,
    pub k: usize,
    pub zeta: usize,
}

impl GroundTruth {
    pub fn d(&self) -> usize {
        self.u_star.nrows()
    }

    pub fn r(&self) -> usize {
        self.u_star.ncols()
    }

    pub fn t(&self) -> usize {
        self.w_star.nrows()
    }

    pub fn theta(&self, task: usize) -> DVector<f64> {
        &self.u_star * self.w_star.row(task).transpose() + self.b_star.column(task)
    }

    /// All planted parameters as a d×t matrix.
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        &self.u_star * self.w_star.transpose() + &self.b_star
    }

    pub fn check(&self) -> Result<()> {
        let (d, r, t) = (self.d(), self.r(), self.t());
        if r == 0 || d < r || t == 0 {
            return Err(LrsError::Config(format!(
                "ground truth needs d >= r >= 1 and t >= 1 (d={d}, r={r}, t={t})"
            )));
        }
        if self.b_star.shape() != (d, t) {
            return Err(LrsError::Config(format!(
                "b_star is {:?}, expected ({d}, {t})",
                self.b_star.shape()
            )));
        }
        let gram_err = (self.u_star.transpose() * &self.u_star - DMatrix::identity(r, r)).norm();
        if gram_err > 1e-10 {
            return Err(LrsError::Config(format!(
                "u_star is not orthonormal: |UᵀU - I|_F = {gram_err:.3e}"
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(LrsError::Config("sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// Largest number of nonzeros in any column of b*.
    pub fn max_column_nnz(&self) -> usize {
        column_nnz(&self.b_star).into_iter().max().unwrap_or(0)
    }

    /// Largest number of nonzeros in any row of b*.
    pub fn max_row_nnz(&self) -> usize {
        (0..self.b_star.nrows())
            .map(|j| self.b_star.row(j).iter().filter(|v| **v != 0.0).count())
            .max()
            .unwrap_or(0)
    }
}

/// One task's samples: rows of `x` are covariates, `y` the responses.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl TaskDataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(LrsError::Config(format!(
                "x has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(LrsError::Config("a task needs at least one sample".into()));
        }
        Ok(TaskDataset { x, y })
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows with index ≡ `chunk` mod `chunks`.
    pub fn row_chunk(&self, chunk: usize, chunks: usize) -> TaskDataset {
        let rows: Vec<usize> = (chunk..self.m()).step_by(chunks.max(1)).collect();
        let x = self.x.select_rows(rows.iter());
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&j| self.y[j]));
        TaskDataset { x, y }
    }
}

/// Checks that a task list is non-empty and shares one dimension; returns d.
pub fn common_dim(datasets: &[TaskDataset]) -> Result<usize> {
    let first = datasets
        .first()
        .ok_or_else(|| LrsError::Config("no tasks supplied".into()))?;
    let d = first.d();
    for (i, ds) in datasets.iter().enumerate() {
        if ds.d() != d {
            return Err(LrsError::Config(format!(
                "task {i} has dimension {} but task 0 has {d}",
                ds.d()
            )));
        }
        if ds.m() != ds.y.len() || ds.m() == 0 {
            return Err(LrsError::Config(format!("task {i} has inconsistent or empty rows")));
        }
    }
    Ok(d)
}

/// Current estimates of the shared representation and per-task parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// d×r, orthonormal columns.
    pub u: DMatrix<f64>,
    /// t×r.
    pub w: DMatrix<f64>,
    /// d×t, dense storage.
    pub b: DMatrix<f64>,
    pub iteration: usize,
}

impl ModelState {
    pub fn zeros(d: usize, r: usize, t: usize) -> Self {
        let mut u = DMatrix::zeros(d, r);
        for j in 0..r.min(d) {
            u[(j, j)] = 1.0;
        }
        ModelState {
            u,
            w: DMatrix::zeros(t, r),
            b: DMatrix::zeros(d, t),
            iteration: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.u.nrows()
    }

    pub fn r(&self) -> usize {
        self.u.ncols()
    }

    pub fn t(&self) -> usize {
        self.w.nrows()
    }

    /// θ⁽ⁱ⁾ = U w⁽ⁱ⁾ + b⁽ⁱ⁾.
    pub fn theta(&self, task: usize) -> Result<DVector<f64>> {
        if task >= self.t() {
            return Err(LrsError::IndexOutOfRange {
                index: task,
                len: self.t(),
            });
        }
        Ok(&self.u * self.w.row(task).transpose() + self.b.column(task))
    }

    pub fn theta_matrix(&self) -> DMatrix<f64> {
        &self.u * self.w.transpose() + &self.b
    }

    pub fn nnz(&self, task: usize) -> usize {
        self.b.column(task).iter().filter(|v| **v != 0.0).count()
    }

    pub fn max_nnz(&self) -> usize {
        column_nnz(&self.b).into_iter().max().unwrap_or(0)
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = self.r();
        (self.u.transpose() * &self.u - DMatrix::identity(r, r)).norm()
    }
}

pub(crate) fn column_nnz(m: &DMatrix<f64>) -> Vec<usize> {
    m.column_iter()
        .map(|c| c.iter().filter(|v| **v != 0.0).count())
        .collect()
}

/// How each task's rows are used across the three block updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Every update sees all samples.
    #[default]
    Reuse,
    /// Rows are dealt round-robin into 3L chunks; iteration ℓ uses a fresh chunk per update.
    Split,
}

/// Step size of the gradient move inside the sparse loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// η = 1.
    Unit,
    /// η = min(1, m / λmax(XᵀX)), fixed per task.
    #[default]
    Lipschitz,
    /// η = ‖g_S‖² / ((1/m)‖X g_S‖²) on the current support S.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub r: usize,
    pub k: usize,
    pub outer_iters: usize,
    pub eps: f64,
    pub c1: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub inner_cap: usize,
    pub init_bound: f64,
    pub gamma0: f64,
    pub batching: Batching,
    pub step: StepRule,
    /// Re-solve w after every hard-thresholding round.
    pub refresh_w: bool,
    /// Keep at most this many entries of each b after thresholding.
    pub support_cap: Option<usize>,
    pub ridge_eps: f64,
    pub stop_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            r: 1,
            k: 1,
            outer_iters: 15,
            eps: 1e-6,
            c1: 0.1,
            c3: 0.9,
            c4: 0.6,
            c5: 0.6,
            inner_cap: 100,
            init_bound: 0.3,
            gamma0: 0.3,
            batching: Batching::Reuse,
            step: StepRule::Lipschitz,
            refresh_w: true,
            support_cap: None,
            ridge_eps: 0.0,
            stop_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LrsError::Config(msg));
        if self.r == 0 {
            return bad("r must be positive".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(0.0..=0.5).contains(&self.c1) {
            return bad(format!("c1 must lie in [0, 1/2], got {}", self.c1));
        }
        for (name, c) in [("c3", self.c3), ("c4", self.c4), ("c5", self.c5)] {
            if !(c > 0.0 && c <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {c}"));
            }
        }
        if self.inner_cap == 0 {
            return bad("inner_cap must be positive".into());
        }
        if !(self.init_bound > 0.0) || !(self.gamma0 >= 0.0) {
            return bad("init_bound must be positive and gamma0 nonnegative".into());
        }
        if !(self.ridge_eps >= 0.0) || !(self.stop_tol >= 0.0) {
            return bad("ridge_eps and stop_tol must be nonnegative".into());
        }
        Ok(())
    }

    pub(crate) fn validate_for(&self, d: usize, t: usize) -> Result<()> {
        self.validate()?;
        if self.r > d {
            return Err(LrsError::Config(format!("r = {} exceeds d = {d}", self.r)));
        }
        if self.k > d {
            return Err(LrsError::Config(format!("k = {} exceeds d = {d}", self.k)));
        }
        if t < self.r {
            return Err(LrsError::Config(format!("t = {t} is below r = {}", self.r)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma_dp: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub aw: f64,
    pub planned_iters: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        PrivacyConfig {
            epsilon: 1.0,
            delta: 1e-5,
            sigma_dp: 0.0,
            a1: 1.0,
            a2: 1.0,
            a3: 1.0,
            aw: 1.0,
            planned_iters: 15,
        }
    }
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(LrsError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(LrsError::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.sigma_dp >= 0.0) {
            return Err(LrsError::Config("sigma_dp must be nonnegative".into()));
        }
        for (name, a) in [("a1", self.a1), ("a2", self.a2), ("a3", self.a3), ("aw", self.aw)] {
            if !(a > 0.0) {
                return Err(LrsError::Config(format!("clip level {name} must be positive, got {a}")));
            }
        }
        if self.planned_iters == 0 {
            return Err(LrsError::Config("planned_iters must be positive".into()));
        }
        Ok(())
    }
}
