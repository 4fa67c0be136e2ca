use nalgebra::DMatrix;

use lrs::adapt::mom_init;
use lrs::amht::fit;
use lrs::datagen::{gen_ground_truth, gen_samples, GenConfig, RowBudget};
use lrs::dp::{fit_private, noise_stds, private_system};
use lrs::eval::{rmse, subspace_distance};
use lrs::rank1::{fit_rank1, Rank1Config};
use lrs::{Batching, LrsError, PrivacyConfig, SolverConfig};

#[test]
fn moment_start_is_close_on_the_reference_problem() {
    let mut dists = Vec::new();
    for seed in 0..5 {
        let gt = gen_ground_truth(&GenConfig {
            d: 50,
            r: 2,
            t: 200,
            m: 75,
            k: 5,
            zeta: 10,
            seed,
            row_budget: RowBudget::Relaxed,
            ..Default::default()
        })
        .unwrap();
        let data = gen_samples(&gt, 75, seed + 100).unwrap();
        let u0 = mom_init(&data, 2).unwrap();
        dists.push(subspace_distance(&u0, &gt.u_star).unwrap());
    }
    let worst = dists.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 0.3, "moment start distances {dists:?}");
}

#[test]
fn moment_start_needs_enough_rows() {
    let gt = gen_ground_truth(&GenConfig { d: 30, r: 1, t: 2, m: 5, k: 1, zeta: 2, ..Default::default() }).unwrap();
    let data = gen_samples(&gt, 5, 1).unwrap();
    assert!(matches!(mom_init(&data, 1), Err(LrsError::Domain(_))));
}

#[test]
fn private_noise_averages_out() {
    let gt = gen_ground_truth(&GenConfig { d: 4, r: 1, t: 6, m: 30, k: 1, zeta: 6, sigma: 0.1, seed: 2, ..Default::default() }).unwrap();
    let data = gen_samples(&gt, 30, 3).unwrap();
    let w = DMatrix::from_element(6, 1, 0.7);
    let b = gt.b_star.clone();
    let pcfg = PrivacyConfig { sigma_dp: 2.0, a1: 3.0, a2: 3.0, a3: 2.0, aw: 1.0, ..Default::default() };
    let quiet = PrivacyConfig { sigma_dp: 0.0, ..pcfg.clone() };
    let (a0, v0) = private_system(&data, &w, &b, &quiet, 0, 1).unwrap();

    let draws = 4000;
    let mut a_sum = DMatrix::zeros(4, 4);
    let mut v_sum = v0.map(|_| 0.0);
    let mut sq = 0.0;
    for it in 0..draws {
        let (a, v) = private_system(&data, &w, &b, &pcfg, 9, it).unwrap();
        sq += (a[(0, 1)] - a0[(0, 1)]).powi(2);
        a_sum += a;
        v_sum += v;
    }
    let n: usize = data.iter().map(|ds| ds.m()).sum();
    let (s1, s2) = noise_stds(&pcfg, 30);
    let (s1, s2) = (s1 / n as f64, s2 / n as f64);
    let se = |s: f64| 5.0 * s / (draws as f64).sqrt();
    assert!((a_sum / draws as f64 - &a0).amax() <= se(s1));
    assert!((v_sum / draws as f64 - &v0).amax() <= se(s2));
    let sd = (sq / draws as f64).sqrt();
    assert!((sd / s1 - 1.0).abs() < 0.1, "empirical sd {sd} vs {s1}");
}

#[test]
fn private_fit_is_reproducible_and_rejects_split_batches() {
    let gt = gen_ground_truth(&GenConfig { d: 6, r: 1, t: 30, m: 20, k: 1, zeta: 30, seed: 4, ..Default::default() }).unwrap();
    let data = gen_samples(&gt, 20, 5).unwrap();
    let cfg = SolverConfig { r: 1, k: 1, outer_iters: 3, ..Default::default() };
    let pcfg = PrivacyConfig { sigma_dp: 1.0, planned_iters: 3, a1: 5.0, a2: 5.0, a3: 2.0, aw: 2.0, ..Default::default() };
    let (a, _, ledger) = fit_private(&data, &cfg, &pcfg, None, None, 21).unwrap();
    let (b, _, _) = fit_private(&data, &cfg, &pcfg, None, None, 21).unwrap();
    assert_eq!(a, b);
    assert_eq!(ledger.releases.len(), 3);
    assert!(rmse(&a, &data).unwrap().is_finite());

    let split = SolverConfig { batching: Batching::Split, ..cfg };
    assert!(matches!(fit_private(&data, &split, &pcfg, None, None, 21), Err(LrsError::Config(_))));
}

#[test]
fn rank1_support_stays_inside_the_truth() {
    for seed in 0..3 {
        let gt = gen_ground_truth(&GenConfig {
            d: 40,
            r: 1,
            t: 120,
            m: 60,
            k: 3,
            zeta: 12,
            shared_w: Some(1.0),
            seed,
            row_budget: RowBudget::Relaxed,
            ..Default::default()
        })
        .unwrap();
        let data = gen_samples(&gt, 60, seed + 7).unwrap();
        let out = fit_rank1(&data, &Rank1Config { k: 3, iters: 30, ..Default::default() }, Some(&gt)).unwrap();
        for (est, truth) in out.b.iter().zip(gt.b_star.iter()) {
            assert!(*est == 0.0 || *truth != 0.0, "seed {seed}: spurious support entry");
        }
    }
}

#[test]
fn subspace_distance_settles_after_two_iterations() {
    let gt = gen_ground_truth(&GenConfig {
        d: 30,
        r: 2,
        t: 100,
        m: 60,
        k: 3,
        zeta: 10,
        seed: 6,
        row_budget: RowBudget::Relaxed,
        ..Default::default()
    })
    .unwrap();
    let data = gen_samples(&gt, 60, 8).unwrap();
    let (_, report) = fit(&data, &SolverConfig { r: 2, k: 3, outer_iters: 12, ..Default::default() }, None, Some(&gt)).unwrap();
    let dists: Vec<f64> = report.records.iter().filter_map(|r| r.subspace_dist).collect();
    for pair in dists.windows(2).skip(1) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-6) + 1e-12, "trace {dists:?}");
    }
}

#[test]
fn split_batching_needs_enough_rows() {
    let gt = gen_ground_truth(&GenConfig { d: 6, r: 1, t: 4, m: 8, k: 1, zeta: 4, ..Default::default() }).unwrap();
    let data = gen_samples(&gt, 8, 2).unwrap();
    let cfg = SolverConfig { r: 1, k: 1, outer_iters: 5, batching: Batching::Split, ..Default::default() };
    assert!(matches!(fit(&data, &cfg, None, None), Err(LrsError::Config(_))));
}
