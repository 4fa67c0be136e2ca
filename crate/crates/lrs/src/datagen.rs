//! Planted ground truth and Gaussian samples for the LRS model.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LrsError, Result};
use crate::model::{GroundTruth, TaskDataset};
use crate::numerics::qr_orthonormalize;

/// How the per-row sparsity budget is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RowBudget {
    /// Rows hold at most ζ nonzeros; t·k > d·ζ is an error.
    #[default]
    Strict,
    /// Row cap raised to max(ζ, ⌈tk/d⌉) so every column still gets exactly k entries.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub d: usize,
    pub r: usize,
    pub t: usize,
    pub m: usize,
    pub k: usize,
    pub zeta: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Standard deviation of the w* entries.
    pub w_scale: f64,
    /// Plant w*⁽ⁱ⁾ with every entry equal to this value instead of sampling.
    pub shared_w: Option<f64>,
    pub row_budget: RowBudget,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            d: 50,
            r: 2,
            t: 200,
            m: 75,
            k: 5,
            zeta: 10,
            sigma: 0.0,
            seed: 0,
            w_scale: 1.0,
            shared_w: None,
            row_budget: RowBudget::Strict,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LrsError::Config(msg));
        if self.d == 0 || self.r == 0 || self.t == 0 || self.m == 0 {
            return bad(format!(
                "d, r, t, m must be positive (d={}, r={}, t={}, m={})",
                self.d, self.r, self.t, self.m
            ));
        }
        if self.k > self.d {
            return bad(format!("k <= d violated: k = {} > d = {}", self.k, self.d));
        }
        if self.zeta > self.t {
            return bad(format!("zeta <= t violated: zeta = {} > t = {}", self.zeta, self.t));
        }
        if self.r > self.d {
            return bad(format!("r <= d violated: r = {} > d = {}", self.r, self.d));
        }
        if !(self.sigma >= 0.0) || !(self.w_scale > 0.0) {
            return bad("sigma must be nonnegative and w_scale positive".into());
        }
        Ok(())
    }

    /// Row cap actually enforced by the support assignment.
    pub fn row_cap(&self) -> Result<usize> {
        let demand = self.t * self.k;
        match self.row_budget {
            RowBudget::Strict if demand > self.d * self.zeta => Err(LrsError::InfeasibleSparsity {
                demand,
                capacity: self.d * self.zeta,
            }),
            RowBudget::Strict => Ok(self.zeta),
            RowBudget::Relaxed => Ok(self.zeta.max(demand.div_ceil(self.d))),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gen_ground_truth(cfg: &GenConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let cap = cfg.row_cap()?;
    let (d, r, t, k) = (cfg.d, cfg.r, cfg.t, cfg.k);
    let mut rng = stream_rng(cfg.seed, 0);

    let g = DMatrix::from_fn(d, r, |_, _| randn(&mut rng));
    let (u_star, _) = qr_orthonormalize(&g)?;
    let w_star = match cfg.shared_w {
        Some(c) => DMatrix::from_element(t, r, c),
        None => DMatrix::from_fn(t, r, |_, _| cfg.w_scale * randn(&mut rng)),
    };

    let supports = assign_supports(d, t, k, cap, &mut rng);
    let mut b_star = DMatrix::zeros(d, t);
    for (i, rows) in supports.iter().enumerate() {
        for &j in rows {
            b_star[(j, i)] = randn(&mut rng);
        }
    }
    Ok(GroundTruth {
        u_star,
        w_star,
        b_star,
        sigma: cfg.sigma,
        k,
        zeta: cap,
    })
}

/// Column supports of size k with at most `cap` columns per row.
fn assign_supports(d: usize, t: usize, k: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new(); t];
    }
    greedy_supports(d, t, k, cap, rng).unwrap_or_else(|| balanced_supports(d, t, k, cap, rng))
}

/// Uniform draws with rejection of saturated rows; a stuck column restarts.
fn greedy_supports(d: usize, t: usize, k: usize, cap: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<usize>>> {
    const RESTARTS: usize = 10;
    let mut load = vec![0usize; d];
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        if load.iter().filter(|&&l| l < cap).count() < k {
            return None;
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        let mut restarts = 0;
        let mut attempts = 0;
        while chosen.len() < k {
            let j = rng.random_range(0..d);
            attempts += 1;
            if load[j] < cap && !chosen.contains(&j) {
                chosen.push(j);
            }
            if attempts > 10 * d && chosen.len() < k {
                restarts += 1;
                if restarts > RESTARTS {
                    return None;
                }
                chosen.clear();
                attempts = 0;
            }
        }
        chosen.sort_unstable();
        for &j in &chosen {
            load[j] += 1;
        }
        out.push(chosen);
    }
    Some(out)
}

/// Each column takes the k least-loaded rows, random tie-break. Loads never differ by
/// more than one, so the cap holds whenever t·k ≤ d·cap.
fn balanced_supports(d: usize, t: usize, k: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut load = vec![0usize; d];
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let mut keyed: Vec<(f64, usize)> = (0..d)
            .filter(|&j| load[j] < cap)
            .map(|j| (load[j] as f64 + rng.random::<f64>(), j))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut chosen: Vec<usize> = keyed.iter().take(k).map(|&(_, j)| j).collect();
        chosen.sort_unstable();
        for &j in &chosen {
            load[j] += 1;
        }
        out.push(chosen);
    }
    out
}

/// Samples x ~ N(0, I), y = xᵀθ*⁽ⁱ⁾ + N(0, σ²). Task i draws from its own stream,
/// so the output does not depend on the thread schedule.
pub fn gen_samples(gt: &GroundTruth, m: usize, seed: u64) -> Result<Vec<TaskDataset>> {
    if m == 0 {
        return Err(LrsError::Config("m must be positive".into()));
    }
    let d = gt.d();
    let theta = gt.theta_matrix();
    Ok((0..gt.t())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64 + 1);
            let mut x = DMatrix::zeros(m, d);
            for row in 0..m {
                for col in 0..d {
                    x[(row, col)] = randn(&mut rng);
                }
            }
            let mut y = &x * theta.column(i);
            if gt.sigma > 0.0 {
                for v in y.iter_mut() {
                    *v += gt.sigma * randn(&mut rng);
                }
            }
            TaskDataset { x, y }
        })
        .collect())
}

/// Diagnostics for the sparsity and incoherence assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incoherence {
    /// Smallest μ with ‖W*‖₂,∞ ≤ √(μ λ_r) and ‖U*‖₂,∞ ≤ √(μ r / d).
    pub mu: f64,
    pub lambda_1: f64,
    pub lambda_r: f64,
    pub u_two_inf: f64,
    pub w_two_inf: f64,
    pub max_row_nnz: usize,
    pub max_col_nnz: usize,
}

pub fn measure_incoherence(gt: &GroundTruth) -> Incoherence {
    let (d, r, t) = (gt.d(), gt.r(), gt.t());
    let diversity = gt.w_star.tr_mul(&gt.w_star) * (r as f64 / t as f64);
    let eig = diversity.symmetric_eigenvalues();
    let (lambda_1, lambda_r) = (eig.max(), eig.min());
    let u_two_inf = row_norm_max(&gt.u_star);
    let w_two_inf = row_norm_max(&gt.w_star);
    let mu_w = if lambda_r > 0.0 { w_two_inf * w_two_inf / lambda_r } else { f64::INFINITY };
    let mu_u = u_two_inf * u_two_inf * d as f64 / r as f64;
    Incoherence {
        mu: mu_w.max(mu_u),
        lambda_1,
        lambda_r,
        u_two_inf,
        w_two_inf,
        max_row_nnz: gt.max_row_nnz(),
        max_col_nnz: gt.max_column_nnz(),
    }
}

fn row_norm_max(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|row| row.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, r: usize, t: usize, k: usize, zeta: usize) -> GenConfig {
        GenConfig { d, r, t, m: 20, k, zeta, seed: 7, ..Default::default() }
    }

    #[test]
    fn k_zero_gives_zero_b() {
        let gt = gen_ground_truth(&cfg(12, 2, 30, 0, 1)).unwrap();
        assert!(gt.b_star.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn budgets_and_orthonormality() {
        let gt = gen_ground_truth(&cfg(40, 3, 60, 4, 8)).unwrap();
        assert!(gt.check().is_ok());
        assert!(gt.max_column_nnz() <= 4);
        assert!(gt.max_row_nnz() <= 8);
    }

    #[test]
    fn infeasible_strict_budget() {
        let err = gen_ground_truth(&cfg(10, 1, 50, 5, 3)).unwrap_err();
        assert!(matches!(err, LrsError::InfeasibleSparsity { demand: 250, capacity: 30 }));
    }

    #[test]
    fn relaxed_budget_raises_cap() {
        let c = GenConfig { row_budget: RowBudget::Relaxed, ..cfg(10, 1, 50, 5, 3) };
        let gt = gen_ground_truth(&c).unwrap();
        assert_eq!(gt.zeta, 25);
        assert!(gt.max_row_nnz() <= 25);
        assert!(crate::model::column_nnz(&gt.b_star).iter().all(|&n| n == 5));
    }

    #[test]
    fn tight_capacity_is_filled_exactly() {
        // t·k = d·ζ leaves no slack; the balanced fallback must still succeed.
        let gt = gen_ground_truth(&cfg(10, 1, 20, 5, 10)).unwrap();
        assert!(gt.max_row_nnz() <= 10);
        assert!(crate::model::column_nnz(&gt.b_star).iter().all(|&n| n == 5));
    }

    #[test]
    fn noiseless_samples_are_realizable() {
        let gt = gen_ground_truth(&cfg(15, 2, 4, 3, 4)).unwrap();
        let data = gen_samples(&gt, 25, 3).unwrap();
        for (i, ds) in data.iter().enumerate() {
            let resid = &ds.y - &ds.x * gt.theta(i);
            assert!(resid.amax() <= 1e-12);
        }
    }

    #[test]
    fn samples_are_deterministic() {
        let gt = gen_ground_truth(&GenConfig { sigma: 0.3, ..cfg(8, 1, 5, 2, 5) }).unwrap();
        let a = gen_samples(&gt, 10, 11).unwrap();
        let b = gen_samples(&gt, 10, 11).unwrap();
        assert_eq!(a, b);
        let c = gen_samples(&gt, 10, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn covariance_concentrates() {
        let gt = gen_ground_truth(&GenConfig { m: 5000, ..cfg(10, 1, 1, 1, 1) }).unwrap();
        let ds = &gen_samples(&gt, 5000, 2).unwrap()[0];
        let cov = ds.x.tr_mul(&ds.x) / 5000.0 - DMatrix::identity(10, 10);
        let spectral = cov.symmetric_eigenvalues().amax();
        assert!(spectral <= 0.2, "{spectral}");
    }

    #[test]
    fn incoherence_all_ones_weights() {
        let mut gt = gen_ground_truth(&cfg(6, 1, 9, 1, 2)).unwrap();
        gt.w_star = DMatrix::from_element(9, 1, 1.0);
        let inc = measure_incoherence(&gt);
        assert!((inc.lambda_1 - 1.0).abs() < 1e-12 && (inc.lambda_r - 1.0).abs() < 1e-12);
        let expect = f64::max(1.0, inc.u_two_inf.powi(2) * 6.0);
        assert!((inc.mu - expect).abs() < 1e-12);
    }

    #[test]
    fn incoherence_identity_columns() {
        let mut gt = gen_ground_truth(&cfg(5, 2, 4, 1, 1)).unwrap();
        gt.u_star = DMatrix::identity(5, 2);
        assert!((measure_incoherence(&gt).u_two_inf - 1.0).abs() < 1e-15);
    }

    #[test]
    fn incoherence_matches_bruteforce() {
        let gt = gen_ground_truth(&cfg(10, 2, 50, 2, 10)).unwrap();
        let inc = measure_incoherence(&gt);
        // Brute force: diversity matrix through an explicit sum of outer products.
        let mut div = DMatrix::zeros(2, 2);
        for i in 0..50 {
            let w = gt.w_star.row(i).transpose();
            div += &w * w.transpose();
        }
        div *= 2.0 / 50.0;
        let ev = div.clone().symmetric_eigen().eigenvalues;
        assert!((ev.max() - inc.lambda_1).abs() <= 1e-10);
        assert!((ev.min() - inc.lambda_r).abs() <= 1e-10);
        let mut wmax: f64 = 0.0;
        for i in 0..50 {
            wmax = wmax.max((gt.w_star[(i, 0)].powi(2) + gt.w_star[(i, 1)].powi(2)).sqrt());
        }
        assert!((wmax - inc.w_two_inf).abs() <= 1e-10);
        let ratio_w = inc.w_two_inf / (inc.mu * inc.lambda_r).sqrt();
        let ratio_u = inc.u_two_inf * (10.0 / (inc.mu * 2.0)).sqrt();
        assert!(ratio_w.is_finite() && ratio_u.is_finite());
        assert!(ratio_w <= 1.0 + 1e-12 && ratio_u <= 1.0 + 1e-12);
        println!("incoherence: mu={:.4} w-ratio={ratio_w:.4} u-ratio={ratio_u:.4}", inc.mu);
    }
}
