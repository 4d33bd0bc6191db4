mod common;

use common::*;
use mmnl_core::assessment::{
    compare_estimates, estimate_queries, estimated_pcd, kfold_split, predictive_loglik, predictive_loglik_with,
    random_queries, true_pcd, tv_distance, write_comparison_csv, PcdConfig, PosteriorSource, Summary,
};
use mmnl_core::batch::{fit_batch, StopConfig};
use mmnl_core::local::BackendKind;
use mmnl_core::mcmc::{ChainDraws, McmcConfig, PosteriorDraws};
use mmnl_core::model::{self, ChoiceDataset, GlobalVarParams, Hyperpriors};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Gamma};

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `E σ(β)` for `β ~ N(m, v)` by the midpoint rule on ±12 sd.
fn logistic_normal_mean(m: f64, v: f64) -> f64 {
    let sd = v.sqrt();
    let n = 4000;
    let h = 24.0 * sd / n as f64;
    (0..n)
        .map(|i| {
            let z = -12.0 + 24.0 * (i as f64 + 0.5) / n as f64;
            let b = m + sd * z;
            logistic(b) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * h / sd
        })
        .sum()
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

#[test]
fn true_pcd_degenerates_to_softmax_at_zeta() {
    let mut r = rng(61);
    let x = DMatrix::from_fn(4, 3, |_, _| normal(&mut r));
    let zeta = DVector::from_vec(vec![0.4, -1.0, 0.7]);
    let p = true_pcd(&x, &zeta, &DMatrix::zeros(3, 3), 50, &mut r).unwrap();
    let want = model::choice_probabilities(&x, &zeta).unwrap();
    assert!((p - want).amax() < 1e-14);
}

#[test]
fn true_pcd_is_permutation_equivariant() {
    let mut r = rng(62);
    let x = DMatrix::from_fn(3, 2, |_, _| normal(&mut r));
    let zeta = DVector::from_vec(vec![0.3, -0.2]);
    let omega = random_spd(&mut r, 2, 0.5);
    let perm = [1usize, 2, 0];
    let xp = DMatrix::from_fn(3, 2, |i, j| x[(perm[i], j)]);
    let p = true_pcd(&x, &zeta, &omega, 10_000, &mut rng(5)).unwrap();
    let q = true_pcd(&xp, &zeta, &omega, 10_000, &mut rng(5)).unwrap();
    for i in 0..3 {
        assert!((q[i] - p[perm[i]]).abs() < 1e-12);
    }
}

#[test]
fn independent_true_pcd_runs_agree() {
    // K=1, J=2, x = [[1], [0]], ζ = 0, Ω = 1.
    let x = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let zeta = DVector::<f64>::zeros(1);
    let omega = DMatrix::identity(1, 1);
    let n = 1_000_000;
    let a = true_pcd(&x, &zeta, &omega, n, &mut rng(1)).unwrap();
    let b = true_pcd(&x, &zeta, &omega, n, &mut rng(2)).unwrap();
    // Per-draw variance of σ(β) is at most 1/4.
    let se = (2.0 * 0.25 / n as f64).sqrt();
    assert!((a[0] - b[0]).abs() < 3.0 * se);
    assert!((a.sum() - 1.0).abs() < 1e-12);
    // The symmetric design gives exactly 1/2 in expectation.
    assert!((a[0] - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn true_pcd_matches_quadrature() {
    let x = DMatrix::from_column_slice(2, 1, &[1.5, -0.5]);
    let zeta = DVector::from_element(1, 0.3);
    let omega = DMatrix::from_element(1, 1, 0.8);
    let n = 400_000;
    let p = true_pcd(&x, &zeta, &omega, n, &mut rng(3)).unwrap();
    // p₁ = E σ(2β) with 2β ~ N(0.6, 3.2).
    let want = logistic_normal_mean(0.6, 3.2);
    assert!((p[0] - want).abs() < 4.0 * (0.25 / n as f64).sqrt(), "{} vs {want}", p[0]);
}

#[test]
fn estimated_pcd_matches_grid_over_omega() {
    // K=1, J=2, x = [[1],[0]]: β | Ω ~ N(μ_ζ, σ_ζ² + Ω) with Ω ~ IG(ω/2, Υ/2).
    let priors = Hyperpriors::vague(1);
    let h = 17;
    let omega_df = h as f64 + 2.0;
    let global = GlobalVarParams::from_parts(
        h,
        &priors,
        DVector::from_element(1, 0.4),
        DMatrix::from_element(1, 1, 0.05),
        DMatrix::from_element(1, 1, 0.6 * omega_df),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    assert_eq!(global.omega(), omega_df);
    let ups = global.upsilon()[(0, 0)];
    let gamma = Gamma::new(omega_df / 2.0, 1.0).unwrap();
    let grid: f64 = (0..100)
        .map(|i| {
            let u = (i as f64 + 0.5) / 100.0;
            let omega = ups / 2.0 / gamma.inverse_cdf(1.0 - u);
            logistic_normal_mean(0.4, 0.05 + omega)
        })
        .sum::<f64>()
        / 100.0;

    let x = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let cfg = PcdConfig {
        outer: 500,
        inner: 1_000,
        ..PcdConfig::default()
    };
    let reps: Vec<f64> = (0..12)
        .map(|s| {
            let est = estimated_pcd(&x, PosteriorSource::VariationalFit(&global), &cfg, &mut rng(100 + s)).unwrap();
            assert!((est.probs.sum() - 1.0).abs() < 1e-12);
            est.probs[0]
        })
        .collect();
    let (m, sd) = mean_sd(&reps);
    let se = sd / (reps.len() as f64).sqrt();
    assert!((m - grid).abs() < 3.0 * se.max(1e-4), "{m} vs {grid} (se {se})");
}

fn concentrated_fit(k: usize, zeta: &DVector<f64>, omega: &DMatrix<f64>) -> GlobalVarParams<f64> {
    let priors = Hyperpriors::vague(k);
    let h = 10_000_000;
    let df = h as f64 + 2.0 + k as f64 - 1.0;
    GlobalVarParams::from_parts(
        h,
        &priors,
        zeta.clone(),
        DMatrix::identity(k, k) * 1e-14,
        omega * df,
        DVector::from_element(k, 1.0),
    )
    .unwrap()
}

#[test]
fn concentrated_sources_approach_true_pcd() {
    let mut r = rng(63);
    let k = 2;
    let x = DMatrix::from_fn(3, k, |_, _| normal(&mut r));
    let zeta = DVector::from_vec(vec![0.5, -0.3]);
    let omega = random_spd(&mut r, k, 0.4);
    let truth = true_pcd(&x, &zeta, &omega, 1_000_000, &mut r).unwrap();
    let cfg = PcdConfig {
        outer: 200,
        inner: 2_000,
        ..PcdConfig::default()
    };
    let fit = concentrated_fit(k, &zeta, &omega);
    let vb = estimated_pcd(&x, PosteriorSource::VariationalFit(&fit), &cfg, &mut r).unwrap();
    assert_eq!(vb.resampled, 0);
    let draws = PosteriorDraws {
        config: McmcConfig::default(),
        chains: vec![ChainDraws {
            zeta: vec![zeta.clone(); 50],
            omega: vec![omega.clone(); 50],
            a: vec![DVector::from_element(k, 1.0); 50],
            beta_mean: vec![],
            acceptance: vec![],
            scales: vec![],
        }],
    };
    let mc = estimated_pcd(&x, PosteriorSource::McmcDraws(&draws), &cfg, &mut r).unwrap();
    // 4·10⁵ β draws in each estimate; per-draw sd of a probability is below ½.
    let tol = 4.0 * 0.5 / (4e5f64).sqrt();
    assert!((&vb.probs - &truth).amax() < tol);
    assert!((&mc.probs - &truth).amax() < tol);
}

#[test]
fn monte_carlo_error_shrinks_at_root_n() {
    let k = 1;
    let x = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -0.7]);
    let zeta = DVector::from_element(1, 0.2);
    let omega = DMatrix::from_element(1, 1, 1.0);
    let fit = concentrated_fit(k, &zeta, &omega);
    let mut log_n = Vec::new();
    let mut log_se = Vec::new();
    for (outer, inner) in [(4, 25), (8, 50), (16, 100), (32, 200)] {
        let cfg = PcdConfig {
            outer,
            inner,
            ..PcdConfig::default()
        };
        let reps: Vec<f64> = (0..300)
            .map(|s| {
                estimated_pcd(&x, PosteriorSource::VariationalFit(&fit), &cfg, &mut rng(7_000 + s))
                    .unwrap()
                    .probs[0]
            })
            .collect();
        log_n.push(((outer * inner) as f64).ln());
        log_se.push(mean_sd(&reps).1.ln());
    }
    let (mx, my) = (mean_sd(&log_n).0, mean_sd(&log_se).0);
    let slope = log_n.iter().zip(&log_se).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / log_n.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
}

#[test]
fn query_estimates_are_reproducible_and_on_the_simplex() {
    let queries = random_queries::<f64>(8, 4, 2, 0.5, 3);
    assert_eq!(queries[0].label, "q001");
    assert_eq!(queries[7].label, "q008");
    assert_eq!(random_queries::<f64>(8, 4, 2, 0.5, 3), queries);
    let zeta = DVector::from_vec(vec![1.0, -1.0]);
    let omega = DMatrix::identity(2, 2) * 0.25;
    let fit = concentrated_fit(2, &zeta, &omega);
    let cfg = PcdConfig {
        outer: 20,
        inner: 200,
        true_draws: 4_000,
    };
    let src = PosteriorSource::VariationalFit(&fit);
    let a = estimate_queries(&queries, src, &cfg, 11).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| estimate_queries(&queries, src, &cfg, 11).unwrap());
    assert_eq!(a, b);
    for e in &a {
        assert!((e.probs.sum() - 1.0).abs() < 1e-8);
        assert!(e.probs.iter().all(|&p| p >= 0.0));
    }
    let truth = estimate_queries(&queries, PosteriorSource::TrueParams { zeta: &zeta, omega: &omega }, &cfg, 12).unwrap();
    let est: Vec<_> = a.into_iter().map(|e| e.probs).collect();
    let refs: Vec<_> = truth.into_iter().map(|e| e.probs).collect();
    let rows = compare_estimates(&queries, &est, &refs).unwrap();
    let self_rows = compare_estimates(&queries, &est, &est).unwrap();
    assert!(self_rows.iter().all(|r| r.tv == 0.0));
    let mut out = Vec::new();
    write_comparison_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "label,p1,p2,p3,p4,ref1,ref2,ref3,ref4,tv");
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn tv_reference_values() {
    let v = |xs: &[f64]| DVector::from_vec(xs.to_vec());
    assert_eq!(tv_distance(&v(&[0.2, 0.8]), &v(&[0.2, 0.8])).unwrap(), 0.0);
    assert_eq!(tv_distance(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 1.0);
    assert!((tv_distance(&v(&[0.5, 0.5]), &v(&[0.9, 0.1])).unwrap() - 0.4).abs() < 1e-15);
    assert!(tv_distance(&v(&[0.5, 0.6]), &v(&[0.5, 0.5])).is_err());
    assert!(tv_distance(&v(&[1.2, -0.2]), &v(&[0.5, 0.5])).is_err());
    assert!(tv_distance(&v(&[0.5, 0.5]), &v(&[0.2, 0.3, 0.5])).is_err());
}

#[test]
fn summary_rows_follow_table_order() {
    let s = Summary::of(&[0.3, 0.1, 0.2, 0.4, 0.5]).unwrap();
    let labels: Vec<&str> = s.rows().iter().map(|r| r.0).collect();
    assert_eq!(labels, ["min", "q1", "median", "mean", "q3", "max"]);
    assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (0.1, 0.2, 0.3, 0.4, 0.5));
    assert!((s.mean - 0.3).abs() < 1e-15);
    assert!(Summary::of(&[]).is_err());
}

#[test]
fn kfold_partitions_agents() {
    let data = small_sim(100, 2, 64);
    let folds = kfold_split(&data, 5, 9).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = vec![0usize; 100];
    for f in &folds {
        assert_eq!(f.test.len(), 20);
        assert_eq!(f.train.len(), 80);
        for &i in &f.test {
            seen[i] += 1;
            assert!(f.train.binary_search(&i).is_err());
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(kfold_split(&data, 5, 9).unwrap(), folds);
    assert_ne!(kfold_split(&data, 5, 10).unwrap(), folds);
    let uneven = kfold_split(&small_sim(23, 2, 64), 5, 1).unwrap();
    let sizes: Vec<usize> = uneven.iter().map(|f| f.test.len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_eq!(sizes.iter().sum::<usize>(), 23);
    assert!(kfold_split(&data, 1, 0).is_err());
    assert!(kfold_split(&data, 101, 0).is_err());
}

#[test]
fn predictive_loglik_bounds() {
    let data = small_sim(10, 2, 65);
    let j = data.n_alternatives();
    let events = data.n_events() as f64;
    let uniform = predictive_loglik_with(data.agents(), |_, x| Ok(DVector::from_element(x.nrows(), 1.0 / j as f64))).unwrap();
    assert!((uniform - events * (1.0 / j as f64).ln()).abs() < 1e-9);
    // A predictor that puts all mass on the observed choice.
    let chosen: Vec<usize> = data.agents().iter().flat_map(|a| a.events.iter().map(|e| e.chosen)).collect();
    let perfect = predictive_loglik_with(data.agents(), |i, x| {
        Ok(DVector::from_fn(x.nrows(), |q, _| if q == chosen[i] { 1.0 } else { 0.0 }))
    })
    .unwrap();
    assert_eq!(perfect, 0.0);
    assert!(predictive_loglik_with(data.agents(), |_, _| Ok(DVector::from_element(2, 0.5))).is_err());
}

fn subset(data: &ChoiceDataset<f64>, idx: &[usize]) -> ChoiceDataset<f64> {
    let agents = idx.iter().map(|&i| data.agents()[i].clone()).collect();
    ChoiceDataset::new(agents, data.n_alternatives(), data.n_covariates()).unwrap()
}

#[test]
fn five_fold_ncvmp_and_slr_nearly_tie() {
    let data = small_sim(100, 3, 66);
    let priors = Hyperpriors::vague(3);
    let cfg = PcdConfig {
        outer: 100,
        inner: 1_000,
        ..PcdConfig::default()
    };
    let folds = kfold_split(&data, 5, 2).unwrap();
    let mut totals = [0.0; 2];
    for f in &folds {
        let train = subset(&data, &f.train);
        let test = subset(&data, &f.test);
        for (slot, backend) in [BackendKind::Ncvmp, BackendKind::slr_default()].into_iter().enumerate() {
            let fit = fit_batch(&train, &priors, backend, &StopConfig::default(), 1).unwrap();
            totals[slot] += predictive_loglik(PosteriorSource::VariationalFit(&fit.global), test.agents(), &cfg, 3).unwrap();
        }
    }
    let (nc, slr) = (totals[0] / 5.0, totals[1] / 5.0);
    assert!((nc - slr).abs() < 2.0, "NCVMP {nc} vs SLR {slr}");
    // Both beat the uniform predictor on held-out data.
    let uniform = (data.n_events() as f64 / 5.0) * (1.0 / 5.0f64).ln();
    assert!(nc > uniform && slr > uniform);
}

fn simplex(j: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(0.0..1.0f64, j).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-12;
        DVector::from_vec(v.iter().map(|x| (x + 1e-12 / v.len() as f64) / s).collect())
    })
}

proptest! {
    #[test]
    fn tv_is_a_metric_on_the_simplex(p in simplex(4), q in simplex(4), r in simplex(4)) {
        let pq = tv_distance(&p, &q).unwrap();
        let qr = tv_distance(&q, &r).unwrap();
        let pr = tv_distance(&p, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(pq, tv_distance(&q, &p).unwrap());
        prop_assert!(pr <= pq + qr + 1e-12);
        prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
    }
}
