use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use lrs::adapt::moment_matrix;
use lrs::amht::{fit, objective, update_u, update_w};
use lrs::datagen::{gen_ground_truth, gen_samples, GenConfig, RowBudget};
use lrs::dp::{accountant_epsilon, calibrate_noise, PrivacyLedger};
use lrs::eval::subspace_distance;
use lrs::io::{read_dataset, write_dataset, DatasetMeta};
use lrs::numerics::{clip_vector, hard_threshold, keep_largest, qr_orthonormalize};
use lrs::rank1::{fit_rank1, Rank1Config};
use lrs::{SolverConfig, TaskDataset};

fn vector(len: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-5.0..5.0f64, len).prop_map(DVector::from_vec)
}

fn tall(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn small_problem() -> impl Strategy<Value = (GenConfig, u64)> {
    (6usize..14, 1usize..3, 3usize..8, any::<u64>()).prop_map(|(d, r, t, seed)| {
        let cfg = GenConfig {
            d,
            r,
            t,
            m: 3 * d,
            k: 2,
            zeta: t,
            sigma: 0.1,
            seed,
            row_budget: RowBudget::Relaxed,
            ..Default::default()
        };
        (cfg, seed.wrapping_add(1))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hard_threshold_is_idempotent(v in vector(12), delta in 0.0..4.0f64) {
        let once = hard_threshold(&v, delta);
        prop_assert_eq!(hard_threshold(&once, delta), once.clone());
        for (a, b) in v.iter().zip(once.iter()) {
            prop_assert!(*b == 0.0 || (*b == *a && a.abs() > delta));
        }
    }

    #[test]
    fn keep_largest_keeps_at_most_k(v in vector(15), k in 0usize..15) {
        let mut w = v.clone();
        keep_largest(&mut w, k);
        prop_assert!(w.iter().filter(|x| **x != 0.0).count() <= k);
        let kept_min = w.iter().filter(|x| **x != 0.0).map(|x| x.abs()).fold(f64::INFINITY, f64::min);
        let dropped_max = v.iter().zip(w.iter()).filter(|(_, b)| **b == 0.0).map(|(a, _)| a.abs()).fold(0.0, f64::max);
        prop_assert!(kept_min == f64::INFINITY || kept_min >= dropped_max);
    }

    #[test]
    fn clipping_contracts_and_fixes_short_vectors(v in vector(8), rho in 0.01..10.0f64) {
        let c = clip_vector(&v, rho);
        prop_assert!(c.norm() <= rho * (1.0 + 1e-12));
        if v.norm() <= rho {
            prop_assert_eq!(c, v);
        } else {
            prop_assert!((c.normalize() - v.normalize()).amax() <= 1e-12);
        }
    }

    #[test]
    fn qr_factor_is_orthonormal_and_reconstructs(m in tall(10, 3)) {
        let (q, r) = qr_orthonormalize(&m).unwrap();
        prop_assert!((q.tr_mul(&q) - DMatrix::identity(3, 3)).amax() <= 1e-10);
        prop_assert!((&q * &r - &m).amax() <= 1e-10);
    }

    #[test]
    fn subspace_distance_is_symmetric_and_rotation_blind(a in tall(9, 2), b in tall(9, 2), angle in 0.0..6.3f64) {
        let (Ok((qa, _)), Ok((qb, _))) = (qr_orthonormalize(&a), qr_orthonormalize(&b)) else {
            return Err(TestCaseError::reject("rank-deficient draw"));
        };
        let ab = subspace_distance(&qa, &qb).unwrap();
        prop_assert!((ab - subspace_distance(&qb, &qa).unwrap()).abs() <= 1e-10);
        let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        prop_assert!((ab - subspace_distance(&(&qa * rot), &qb).unwrap()).abs() <= 1e-10);
        prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&ab));
    }

    #[test]
    fn calibration_meets_target_on_any_budget(eps in 0.05..20.0f64, log_delta in -12.0..-2.0f64) {
        let delta = 10f64.powf(log_delta);
        let sigma = calibrate_noise(eps, delta).unwrap();
        prop_assert!(accountant_epsilon(sigma, delta).unwrap() <= eps + 1e-9);
    }

    #[test]
    fn ledger_composes_to_one_over_sigma_squared(sigma in 0.1..50.0f64, planned in 1usize..40) {
        let mut ledger = PrivacyLedger::new(planned, sigma);
        for i in 1..=planned {
            ledger.record(i).unwrap();
        }
        prop_assert!((ledger.rho_total * sigma * sigma - 1.0).abs() <= 1e-12);
        prop_assert!(ledger.record(planned + 1).is_err());
    }

    #[test]
    fn generator_respects_sparsity_budgets(d in 8usize..30, t in 2usize..20, k in 1usize..5, zeta_frac in 0.3..1.0f64, seed in any::<u64>()) {
        let k = k.min(d);
        let zeta = ((t as f64 * zeta_frac).ceil() as usize).clamp(1, t);
        let cfg = GenConfig { d, r: 1, t, m: 4, k, zeta, seed, ..Default::default() };
        match gen_ground_truth(&cfg) {
            Ok(gt) => {
                for col in gt.b_star.column_iter() {
                    prop_assert!(col.iter().filter(|v| **v != 0.0).count() <= k);
                }
                for row in gt.b_star.row_iter() {
                    prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= zeta);
                }
                prop_assert!((gt.u_star.tr_mul(&gt.u_star) - DMatrix::identity(1, 1)).amax() <= 1e-10);
            }
            Err(lrs::LrsError::InfeasibleSparsity { demand, capacity }) => prop_assert!(demand > capacity),
            Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn block_steps_never_increase_objective((cfg, sample_seed) in small_problem()) {
        let gt = gen_ground_truth(&cfg).unwrap();
        let data = gen_samples(&gt, cfg.m, sample_seed).unwrap();
        let u = qr_orthonormalize(&DMatrix::from_fn(cfg.d, cfg.r, |i, j| ((i * 5 + j * 11) % 7) as f64 - 3.0)).unwrap().0;
        let b = gt.b_star.map(|v| 0.5 * v);
        let w0 = DMatrix::from_element(cfg.t, cfg.r, 0.3);
        let theta = |u: &DMatrix<f64>, w: &DMatrix<f64>| u * w.transpose() + &b;
        let before = objective(&data, &theta(&u, &w0));
        let mut w = DMatrix::zeros(cfg.t, cfg.r);
        for (i, ds) in data.iter().enumerate() {
            w.set_row(i, &update_w(ds, &u, &b.column(i).clone_owned(), 0.0).unwrap().transpose());
        }
        let after_w = objective(&data, &theta(&u, &w));
        prop_assert!(after_w <= before * (1.0 + 1e-9) + 1e-9);
        let u_new = update_u(&data, &w, &b).unwrap();
        let after_u = objective(&data, &theta(&u_new, &w));
        prop_assert!(after_u <= after_w * (1.0 + 1e-9) + 1e-9);
    }

    #[test]
    fn fit_is_blind_to_rotating_the_start((cfg, sample_seed) in small_problem(), angle in 0.0..6.3f64) {
        prop_assume!(cfg.r == 2);
        let gt = gen_ground_truth(&cfg).unwrap();
        let data = gen_samples(&gt, cfg.m, sample_seed).unwrap();
        let solver = SolverConfig { r: 2, k: 2, outer_iters: 4, ..Default::default() };
        let u0 = qr_orthonormalize(&DMatrix::from_fn(cfg.d, 2, |i, j| ((i * 3 + j * 13) % 11) as f64 - 5.0)).unwrap().0;
        let rot = DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        let (a, _) = fit(&data, &solver, Some(&u0), None).unwrap();
        let (b, _) = fit(&data, &solver, Some(&(&u0 * rot)), None).unwrap();
        prop_assert!((a.theta_matrix() - b.theta_matrix()).amax() <= 1e-8);
    }

    #[test]
    fn every_iterate_is_orthonormal((cfg, sample_seed) in small_problem(), iters in 1usize..6) {
        let gt = gen_ground_truth(&cfg).unwrap();
        let data = gen_samples(&gt, cfg.m, sample_seed).unwrap();
        let solver = SolverConfig { r: cfg.r, k: 2, outer_iters: iters, support_cap: Some(2), ..Default::default() };
        let (state, report) = fit(&data, &solver, None, None).unwrap();
        prop_assert!(state.orthonormality_error() <= 1e-10);
        prop_assert!(state.max_nnz() <= 2);
        prop_assert!(report.records.len() <= iters);
    }

    #[test]
    fn moment_is_blind_to_task_order((cfg, sample_seed) in small_problem(), shift in 1usize..7) {
        let gt = gen_ground_truth(&cfg).unwrap();
        let mut data = gen_samples(&gt, cfg.m, sample_seed).unwrap();
        let base = moment_matrix(&data).unwrap();
        let len = data.len();
        data.rotate_left(shift % len);
        prop_assert!((moment_matrix(&data).unwrap() - base).amax() <= 1e-12);
    }

    #[test]
    fn rank1_without_sparse_part_is_pooled_least_squares(d in 4usize..10, t in 2usize..6, seed in any::<u64>()) {
        let gt = gen_ground_truth(&GenConfig { d, r: 1, t, m: 2 * d, k: 1, zeta: t, sigma: 0.2, shared_w: Some(1.0), seed, ..Default::default() }).unwrap();
        let data = gen_samples(&gt, 2 * d, seed ^ 1).unwrap();
        let fit = fit_rank1(&data, &Rank1Config { k: 0, iters: 2, ..Default::default() }, None).unwrap();
        let x = stack(&data, |ds| ds.x.clone());
        let y = stack(&data, |ds| DMatrix::from_column_slice(ds.m(), 1, ds.y.as_slice()));
        let oracle = (x.tr_mul(&x)).try_inverse().unwrap() * x.tr_mul(&y);
        prop_assert!((&fit.u - oracle.column(0)).amax() <= 1e-8);
    }

    #[test]
    fn dataset_files_round_trip((cfg, sample_seed) in small_problem()) {
        let gt = gen_ground_truth(&cfg).unwrap();
        let data = gen_samples(&gt, 5, sample_seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &DatasetMeta::describe(&data).unwrap(), Some(&gt)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.datasets, data);
        prop_assert_eq!(back.truth, Some(gt));
    }
}

fn stack(data: &[TaskDataset], part: impl Fn(&TaskDataset) -> DMatrix<f64>) -> DMatrix<f64> {
    let blocks: Vec<DMatrix<f64>> = data.iter().map(part).collect();
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, blocks[0].ncols());
    let mut at = 0;
    for b in &blocks {
        out.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    out
}
