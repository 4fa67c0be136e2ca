//! Central model plus sparse fine-tuning: a single shared vector u (weight absorbed)
//! and per-task k-sparse corrections, started from zero.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amht::{objective, sparse_step, FitReport, IterationRecord, TaskStats};
use crate::error::{LrsError, Result};
use crate::eval::projection_residual;
use crate::model::{common_dim, GroundTruth, StepRule, TaskDataset};
use crate::numerics::check_gram_nonsingular;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rank1Config {
    pub k: usize,
    pub iters: usize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Bound on ‖b*‖∞.
    pub gamma0: f64,
    /// Bound on ‖u*‖₂.
    pub tau0: f64,
    /// Bound on ‖u*‖∞.
    pub beta0: f64,
    pub step: StepRule,
}

impl Default for Rank1Config {
    fn default() -> Self {
        Rank1Config {
            k: 1,
            iters: 80,
            c1: 0.15,
            c2: 0.5,
            c3: 0.2,
            gamma0: 3.0,
            tau0: 1.0,
            beta0: 1.0,
            step: StepRule::Normalized,
        }
    }
}

impl Rank1Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.c1) {
            return Err(LrsError::Config(format!("c1 must lie in [0, 1/2], got {}", self.c1)));
        }
        for (name, v) in [("c2", self.c2), ("c3", self.c3), ("gamma0", self.gamma0), ("tau0", self.tau0), ("beta0", self.beta0)] {
            if !(v >= 0.0) {
                return Err(LrsError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Threshold state carried between iterations.
#[derive(Debug, Clone, Copy)]
struct Bounds {
    alpha: f64,
    beta: f64,
    gamma: f64,
    tau: f64,
}

impl Bounds {
    fn delta(&self, c1: f64, sqrt_k: f64) -> f64 {
        self.beta + (c1 / sqrt_k) * (self.tau + self.alpha)
    }

    fn advance(&self, cfg: &Rank1Config, sqrt_k: f64) -> Bounds {
        let gamma = 2.0 * self.beta + 2.0 * cfg.c1 * self.tau / sqrt_k + 2.0 * cfg.c1 * self.gamma;
        Bounds { alpha: sqrt_k * gamma, beta: cfg.c3 * gamma, gamma, tau: cfg.c2 * sqrt_k * gamma }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Fit {
    /// The shared vector including its weight.
    pub u: DVector<f64>,
    pub b: DMatrix<f64>,
    pub report: FitReport,
}

impl Rank1Fit {
    pub fn theta_matrix(&self) -> DMatrix<f64> {
        theta_of(&self.u, &self.b)
    }
}

pub fn fit_rank1(datasets: &[TaskDataset], cfg: &Rank1Config, gt: Option<&GroundTruth>) -> Result<Rank1Fit> {
    cfg.validate()?;
    let d = common_dim(datasets)?;
    let t = datasets.len();
    if cfg.k > d {
        return Err(LrsError::Config(format!("k = {} exceeds d = {d}", cfg.k)));
    }
    let mut u = DVector::zeros(d);
    let mut b = DMatrix::zeros(d, t);
    let mut report = FitReport::default();
    if cfg.iters == 0 {
        return Ok(Rank1Fit { u, b, report });
    }

    let n: usize = datasets.iter().map(|ds| ds.m()).sum();
    if n < d {
        return Err(LrsError::SingularSystem(format!("pooled Gram is singular: mt = {n} < d = {d}")));
    }
    let stats = TaskStats::collect(datasets, cfg.step);
    let mut pooled = DMatrix::zeros(d, d);
    for s in &stats {
        pooled += &s.gram;
    }
    check_gram_nonsingular(&pooled)?;
    let chol = pooled
        .cholesky()
        .ok_or_else(|| LrsError::SingularSystem("pooled Gram is not positive definite".into()))?;

    let direction = gt.map(|g| g.u_star.column(0).clone_owned());
    let sqrt_k = (cfg.k.max(1) as f64).sqrt();
    let mut bounds = Bounds { alpha: sqrt_k * cfg.gamma0, beta: cfg.beta0, gamma: cfg.gamma0, tau: cfg.tau0 };

    for ell in 1..=cfg.iters {
        let started = Instant::now();
        let delta = bounds.delta(cfg.c1, sqrt_k);
        if cfg.k > 0 {
            let cols: Vec<DVector<f64>> = stats
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut bi = b.column(i).clone_owned();
                    sparse_step(s, &(&s.gram * &u), &mut bi, delta, cfg.step, cfg.k, None);
                    bi
                })
                .collect();
            for (i, c) in cols.iter().enumerate() {
                b.set_column(i, c);
            }
        }
        let obj_after_sparse = objective(datasets, &theta_of(&u, &b));

        let parts: Vec<DVector<f64>> = stats
            .par_iter()
            .enumerate()
            .map(|(i, s)| &s.xty - &s.gram * b.column(i))
            .collect();
        let mut rhs = DVector::zeros(d);
        for p in &parts {
            rhs += p;
        }
        u = chol.solve(&rhs);
        let obj_after_u = objective(datasets, &theta_of(&u, &b));

        let subspace_dist = direction.as_ref().and_then(|dir| {
            let norm = u.norm();
            (norm > 0.0).then(|| {
                let unit = DMatrix::from_column_slice(d, 1, (&u / norm).as_slice());
                projection_residual(&unit, &DMatrix::from_column_slice(d, 1, dir.as_slice()))
            })
        });
        report.records.push(IterationRecord {
            iteration: ell,
            train_mse: obj_after_u / n as f64,
            subspace_dist,
            max_nnz: b.column_iter().map(|c| c.iter().filter(|v| **v != 0.0).count()).max().unwrap_or(0),
            delta: if cfg.k > 0 { delta } else { f64::NAN },
            inner_iters: usize::from(cfg.k > 0),
            obj_after_sparse,
            obj_after_w: obj_after_sparse,
            obj_after_u,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        bounds = bounds.advance(cfg, sqrt_k);
    }
    Ok(Rank1Fit { u, b, report })
}

fn theta_of(u: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut theta = b.clone();
    for mut col in theta.column_iter_mut() {
        col += u;
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_ground_truth, gen_samples, GenConfig};
    use crate::eval::baseline_single;

    fn shared(d: usize, t: usize, m: usize, k: usize, seed: u64) -> (GroundTruth, Vec<TaskDataset>) {
        let gt = gen_ground_truth(&GenConfig {
            d,
            r: 1,
            t,
            m,
            k,
            zeta: t,
            shared_w: Some(1.0),
            seed,
            ..Default::default()
        })
        .unwrap();
        let data = gen_samples(&gt, m, seed + 1).unwrap();
        (gt, data)
    }

    #[test]
    fn zero_iterations_return_zeros() {
        let (_, data) = shared(8, 4, 10, 1, 1);
        let fit = fit_rank1(&data, &Rank1Config { k: 1, iters: 0, ..Default::default() }, None).unwrap();
        assert!(fit.u.iter().chain(fit.b.iter()).all(|v| *v == 0.0));
        assert!(fit.report.records.is_empty());
    }

    #[test]
    fn no_sparse_part_converges_immediately() {
        let (gt, data) = shared(10, 4, 8, 0, 2);
        let fit = fit_rank1(&data, &Rank1Config { k: 1, iters: 5, ..Default::default() }, Some(&gt)).unwrap();
        let target = gt.theta(0);
        assert!((&fit.u - target).amax() <= 1e-8);
    }

    #[test]
    fn k_zero_is_pooled_least_squares() {
        let (_, data) = shared(12, 5, 9, 2, 3);
        let fit = fit_rank1(&data, &Rank1Config { k: 0, iters: 3, ..Default::default() }, None).unwrap();
        let pooled = baseline_single(&data, Some(0.0)).unwrap();
        assert!((&fit.u - pooled).amax() <= 1e-10);
        assert!(fit.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_few_pooled_samples() {
        let (_, data) = shared(20, 2, 5, 1, 4);
        let r = fit_rank1(&data, &Rank1Config { k: 1, iters: 2, ..Default::default() }, None);
        assert!(matches!(r, Err(LrsError::SingularSystem(_))));
    }

    #[test]
    fn threshold_schedule_contracts_with_defaults() {
        let cfg = Rank1Config::default();
        let sqrt_k = 5f64.sqrt();
        let b0 = Bounds { alpha: sqrt_k * cfg.gamma0, beta: cfg.beta0, gamma: cfg.gamma0, tau: cfg.tau0 };
        let mut b = b0;
        for _ in 0..5 {
            b = b.advance(&cfg, sqrt_k);
        }
        let later = b.advance(&cfg, sqrt_k);
        assert!(later.delta(cfg.c1, sqrt_k) < b.delta(cfg.c1, sqrt_k));
    }
}
