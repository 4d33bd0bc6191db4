mod common;

use common::*;
use mmnl_core::model::{self, ChoiceDataset, Hyperpriors, ModelParams};
use mmnl_core::{densities, linalg};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn derivatives_match_finite_differences_on_random_instances() {
    let mut r = rng(2024);
    for _ in 0..60 {
        let k = r.random_range(1..=5);
        let j = r.random_range(2..=6);
        let t = r.random_range(0..=10);
        let agent = random_agent(&mut r, j, k, t, 1.0);
        let priors = Hyperpriors::vague(k);
        let global = random_global(&mut r, 20, &priors);
        let beta = DVector::from_fn(k, |_, _| normal(&mut r));
        let (g, h) = model::grad_hess_f(&beta, &agent, &global);
        let (g_fd, _) = fd_grad_hess(&beta, &agent, &global, 1e-5);
        let (_, h_fd) = fd_grad_hess(&beta, &agent, &global, 1e-3);
        let ge = rel_err(&DMatrix::from_column_slice(k, 1, g.as_slice()), &DMatrix::from_column_slice(k, 1, g_fd.as_slice()));
        assert!(ge < 1e-6, "gradient rel error {ge}");
        let he = rel_err(&h, &h_fd);
        assert!(he < 1e-5, "hessian rel error {he}");
    }
}

#[test]
fn choice_probabilities_hand_example() {
    // Utilities (0, ln 2, ln 3) give probabilities (1, 2, 3)/6.
    let x = DMatrix::from_column_slice(3, 1, &[0.0, 2f64.ln(), 3f64.ln()]);
    let p = model::choice_probabilities(&x, &DVector::from_element(1, 1.0)).unwrap();
    for (pi, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((pi - want).abs() < 1e-15);
    }
}

#[test]
fn choice_probabilities_reject_bad_input() {
    let x = DMatrix::from_element(3, 2, 1.0);
    assert!(model::choice_probabilities(&x, &DVector::from_element(3, 0.0)).is_err());
    let mut bad = x.clone();
    bad[(0, 0)] = f64::NAN;
    assert!(model::choice_probabilities(&bad, &DVector::from_element(2, 0.0)).is_err());
}

#[test]
fn extreme_utilities_stay_finite() {
    let x = DMatrix::<f64>::from_column_slice(2, 1, &[1000.0, -1000.0]);
    let p = model::choice_probabilities(&x, &DVector::from_element(1, 1.0)).unwrap();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p.sum() - 1.0).abs() < 1e-12);
}

#[test]
fn log_joint_matches_term_by_term_sum() {
    let mut r = rng(9);
    let k = 2;
    let priors = Hyperpriors::vague(k);
    let agents: Vec<_> = (0..3).map(|_| random_agent(&mut r, 3, k, 4, 1.0)).collect();
    let params = ModelParams {
        betas: (0..3).map(|_| DVector::from_fn(k, |_, _| normal(&mut r))).collect(),
        zeta: DVector::from_vec(vec![0.3, -0.2]),
        omega: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        a: DVector::from_vec(vec![0.7, 1.3]),
    };
    let mut want = 0.0;
    for (agent, beta) in agents.iter().zip(&params.betas) {
        for ev in &agent.events {
            want += model::choice_probabilities(&ev.x, beta).unwrap()[ev.chosen].ln();
        }
        want += densities::log_normal_pdf(beta, &params.zeta, &params.omega).unwrap();
    }
    want += densities::log_normal_pdf(&params.zeta, &priors.mu0, &priors.sigma0).unwrap();
    let iw_scale = DMatrix::from_diagonal(&params.a.map(|a| 2.0 * priors.nu / a));
    want += densities::log_inverse_wishart_pdf(&params.omega, priors.nu + k as f64 - 1.0, &iw_scale).unwrap();
    for i in 0..k {
        want += densities::log_inverse_gamma_pdf(params.a[i], 0.5, 1.0 / priors.a_scale[i].powi(2));
    }
    let got = model::log_joint(&agents, &params, &priors).unwrap();
    assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn dataset_validation() {
    let mut r = rng(1);
    let a = random_agent(&mut r, 3, 2, 2, 1.0);
    let mut dup = a.clone();
    dup.id = a.id.clone();
    assert!(ChoiceDataset::new(vec![a.clone(), dup], 3, 2).is_err());
    assert!(ChoiceDataset::new(vec![a.clone()], 4, 2).is_err());
    assert!(ChoiceDataset::new(vec![a.clone()], 3, 3).is_err());
    let mut bad = a.clone();
    bad.events[0].chosen = 3;
    assert!(ChoiceDataset::new(vec![bad], 3, 2).is_err());
    assert!(ChoiceDataset::<f64>::new(vec![], 3, 2).is_err());
    let d = ChoiceDataset::new(vec![a], 3, 2).unwrap();
    assert_eq!((d.n_agents(), d.n_alternatives(), d.n_covariates(), d.n_events()), (1, 3, 2, 2));
}

#[test]
fn runs_in_single_precision() {
    let x = DMatrix::<f32>::from_row_slice(2, 1, &[1.0, 0.0]);
    let p = model::choice_probabilities(&x, &DVector::from_element(1, 0.5f32)).unwrap();
    let want = 1.0 / (1.0 + (-0.5f64).exp());
    assert!((p[0] as f64 - want).abs() < 1e-6);
}

fn matrix_strategy(j: usize, k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0..5.0f64, j * k).prop_map(move |v| DMatrix::from_row_slice(j, k, &v))
}

proptest! {
    #[test]
    fn probabilities_form_a_simplex(x in matrix_strategy(4, 3), b in prop::collection::vec(-3.0..3.0f64, 3)) {
        let p = model::choice_probabilities(&x, &DVector::from_vec(b)).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn common_shift_leaves_probabilities_unchanged(
        x in matrix_strategy(4, 2),
        b in prop::collection::vec(-3.0..3.0f64, 2),
        shift in prop::collection::vec(-10.0..10.0f64, 2),
    ) {
        // Adding the same row to every alternative shifts all utilities equally.
        let beta = DVector::from_vec(b);
        let mut shifted = x.clone();
        for mut row in shifted.row_iter_mut() {
            row[0] += shift[0];
            row[1] += shift[1];
        }
        let p = model::choice_probabilities(&x, &beta).unwrap();
        let q = model::choice_probabilities(&shifted, &beta).unwrap();
        prop_assert!((p - q).amax() < 1e-12);
    }

    #[test]
    fn permuting_alternatives_permutes_probabilities(x in matrix_strategy(3, 2), b in prop::collection::vec(-3.0..3.0f64, 2)) {
        let beta = DVector::from_vec(b);
        let perm = [2usize, 0, 1];
        let xp = DMatrix::from_fn(3, 2, |i, j| x[(perm[i], j)]);
        let p = model::choice_probabilities(&x, &beta).unwrap();
        let q = model::choice_probabilities(&xp, &beta).unwrap();
        for i in 0..3 {
            prop_assert!((q[i] - p[perm[i]]).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_curvature_is_positive_semidefinite(x in matrix_strategy(4, 3), b in prop::collection::vec(-3.0..3.0f64, 3)) {
        let p = model::choice_probabilities(&x, &DVector::from_vec(b)).unwrap();
        let c = linalg::softmax_curvature(&x, p.as_slice());
        prop_assert!(linalg::min_eigenvalue(&c) > -1e-10);
    }
}
