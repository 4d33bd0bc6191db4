use mmnl_core::bound::{self, Surrogate};
use mmnl_core::conjugate;
use mmnl_core::densities;
use mmnl_core::linalg;
use mmnl_core::model::{AgentData, ChoiceEvent, GlobalVarParams, Hyperpriors, LocalVarParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Evaluated term by term (expected log joint plus entropies, digamma terms
// included) in 30-digit arithmetic for the state built in `prior_only_state`.
const PRIOR_ONLY_PINNED: f64 = -14.833601317409183;

fn prior_only_state() -> (Hyperpriors<f64>, GlobalVarParams<f64>, LocalVarParams<f64>) {
    let priors = Hyperpriors::vague(1);
    let g = GlobalVarParams::from_parts(
        1,
        &priors,
        DVector::from_element(1, 0.3),
        DMatrix::from_element(1, 1, 0.5),
        DMatrix::from_element(1, 1, 2.0),
        DVector::from_element(1, 1.7),
    )
    .unwrap();
    let local = LocalVarParams {
        mu: DVector::from_element(1, 0.1),
        sigma: DMatrix::from_element(1, 1, 2.0 / g.omega()),
    };
    (priors, g, local)
}

#[test]
fn prior_only_pinned_value_for_both_surrogates() {
    let (priors, g, local) = prior_only_state();
    let agents = vec![AgentData::new("a", vec![])];
    let locals = vec![local];
    let lap = bound::lower_bound_laplace(&agents, &g, &locals, &priors).unwrap();
    let del = bound::lower_bound_delta(&agents, &g, &locals, &priors).unwrap();
    assert!((lap - PRIOR_ONLY_PINNED).abs() < 1e-10, "laplace {lap}");
    assert!((del - PRIOR_ONLY_PINNED).abs() < 1e-10, "delta {del}");
}

fn random_agents(rng: &mut ChaCha8Rng, h: usize, j: usize, k: usize, t: usize) -> Vec<AgentData<f64>> {
    (0..h)
        .map(|i| {
            let events = (0..t)
                .map(|_| ChoiceEvent {
                    x: DMatrix::from_fn(j, k, |_, _| rng.random_range(-1.0..1.0)),
                    chosen: rng.random_range(0..j),
                })
                .collect();
            AgentData::new(format!("a{i}"), events)
        })
        .collect()
}

fn random_spd(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(k, k)) * scale
}

fn random_state(
    rng: &mut ChaCha8Rng,
    h: usize,
    k: usize,
    local_scale: f64,
) -> (Hyperpriors<f64>, GlobalVarParams<f64>, Vec<LocalVarParams<f64>>) {
    let priors = Hyperpriors {
        mu0: DVector::from_fn(k, |_, _| rng.random_range(-0.5..0.5)),
        sigma0: random_spd(rng, k, 2.0),
        nu: 2.0,
        a_scale: DVector::from_fn(k, |_, _| rng.random_range(0.5..3.0)),
    };
    let g0 = GlobalVarParams::initial(h, &priors);
    let g = GlobalVarParams::from_parts(
        h,
        &priors,
        DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
        random_spd(rng, k, 0.1),
        random_spd(rng, k, g0.omega() * 0.5),
        DVector::from_fn(k, |_, _| rng.random_range(0.5..2.0)),
    )
    .unwrap();
    let locals = (0..h)
        .map(|_| LocalVarParams {
            mu: DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
            sigma: random_spd(rng, k, local_scale),
        })
        .collect();
    (priors, g, locals)
}

fn sample_iw(rng: &mut ChaCha8Rng, df: f64, scale: &DMatrix<f64>) -> DMatrix<f64> {
    // Ω⁻¹ ~ Wishart(df, S⁻¹): sum of df outer products when df is an integer.
    let k = scale.nrows();
    let chol = linalg::cholesky(&linalg::spd_inverse(scale, "t").unwrap(), "t").unwrap().l();
    let n = df.round() as usize;
    assert!((df - n as f64).abs() < 1e-12);
    let mut w = DMatrix::zeros(k, k);
    for _ in 0..n {
        let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let v = &chol * z;
        w += &v * v.transpose();
    }
    linalg::spd_inverse(&w, "t").unwrap()
}

fn sample_ig(rng: &mut ChaCha8Rng, shape: f64, rate: f64) -> f64 {
    let g: f64 = rng.sample(rand_distr::Gamma::new(shape, 1.0).unwrap());
    rate / g
}

#[test]
fn delta_bound_matches_monte_carlo_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, k) = (5, 2);
    let agents = random_agents(&mut rng, h, 3, k, 4);
    // Small local covariances keep the delta approximation error far below the MC noise.
    let (priors, g, locals) = random_state(&mut rng, h, k, 1e-4);
    let analytic = bound::lower_bound_delta(&agents, &g, &locals, &priors).unwrap();

    let draws = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let zeta_l = linalg::cholesky(&g.sigma_zeta, "t").unwrap().l();
    let local_l: Vec<_> = locals
        .iter()
        .map(|l| linalg::cholesky(&l.sigma, "t").unwrap().l())
        .collect();
    for _ in 0..draws {
        let zeta = linalg::sample_from_factor(&g.mu_zeta, &zeta_l, &mut rng);
        let omega = sample_iw(&mut rng, g.omega(), g.upsilon());
        let a = DVector::from_fn(k, |i, _| sample_ig(&mut rng, g.b()[i], g.c[i]));
        let betas: Vec<_> = locals
            .iter()
            .zip(&local_l)
            .map(|(l, f)| linalg::sample_from_factor(&l.mu, f, &mut rng))
            .collect();
        let params = mmnl_core::model::ModelParams {
            betas: betas.clone(),
            zeta: zeta.clone(),
            omega: omega.clone(),
            a: a.clone(),
        };
        let mut v = mmnl_core::model::log_joint(&agents, &params, &priors).unwrap();
        for (b, l) in betas.iter().zip(&locals) {
            v -= densities::log_normal_pdf(b, &l.mu, &l.sigma).unwrap();
        }
        v -= densities::log_normal_pdf(&zeta, &g.mu_zeta, &g.sigma_zeta).unwrap();
        v -= densities::log_inverse_wishart_pdf(&omega, g.omega(), g.upsilon()).unwrap();
        for i in 0..k {
            v -= densities::log_inverse_gamma_pdf(a[i], g.b()[i], g.c[i]);
        }
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    assert!(
        (mean - analytic).abs() < 3.0 * se,
        "MC {mean} ± {se}, analytic {analytic}"
    );
}

#[test]
fn bound_is_invariant_to_agent_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let agents = random_agents(&mut rng, 6, 4, 3, 5);
    let (priors, g, locals) = random_state(&mut rng, 6, 3, 0.05);
    let order = [3, 0, 5, 1, 4, 2];
    let agents_p: Vec<_> = order.iter().map(|&i| agents[i].clone()).collect();
    let locals_p: Vec<_> = order.iter().map(|&i| locals[i].clone()).collect();
    for s in [Surrogate::Laplace, Surrogate::Delta] {
        let a = bound::lower_bound(s, &agents, &g, &locals, &priors).unwrap();
        let b = bound::lower_bound(s, &agents_p, &g, &locals_p, &priors).unwrap();
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }
}

/// ℒ under the delta surrogate as a function of the global parameters with
/// the local factors held fixed.
fn bound_at(
    agents: &[AgentData<f64>],
    locals: &[LocalVarParams<f64>],
    priors: &Hyperpriors<f64>,
    mu_zeta: &DVector<f64>,
    sigma_zeta: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
    c: &DVector<f64>,
) -> f64 {
    let g = GlobalVarParams::from_parts(
        locals.len(),
        priors,
        mu_zeta.clone(),
        sigma_zeta.clone(),
        upsilon.clone(),
        c.clone(),
    )
    .unwrap();
    bound::lower_bound_delta(agents, &g, locals, priors).unwrap()
}

fn sym_perturb(m: &DMatrix<f64>, i: usize, j: usize, h: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    out[(i, j)] += h;
    if i != j {
        out[(j, i)] += h;
    }
    out
}

#[test]
fn conjugate_updates_are_coordinate_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (h, k) = (7, 3);
    let agents = random_agents(&mut rng, h, 4, k, 6);
    let (priors, mut g, locals) = random_state(&mut rng, h, k, 0.05);
    let step = 1e-5;

    // q(ζ)
    let (mu, sigma) = conjugate::update_zeta(&locals, &g, &priors).unwrap();
    g.mu_zeta = mu;
    g.sigma_zeta = sigma;
    let (ups, c) = (g.upsilon().clone(), g.c.clone());
    let f = |m: &DVector<f64>, s: &DMatrix<f64>| bound_at(&agents, &locals, &priors, m, s, &ups, &c);
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let mut up = g.mu_zeta.clone();
        up[i] += step;
        let mut dn = g.mu_zeta.clone();
        dn[i] -= step;
        worst = worst.max(((f(&up, &g.sigma_zeta) - f(&dn, &g.sigma_zeta)) / (2.0 * step)).abs());
        for j in 0..=i {
            let up = sym_perturb(&g.sigma_zeta, i, j, step);
            let dn = sym_perturb(&g.sigma_zeta, i, j, -step);
            worst = worst.max(((f(&g.mu_zeta, &up) - f(&g.mu_zeta, &dn)) / (2.0 * step)).abs());
        }
    }
    assert!(worst < 1e-6, "q(zeta) gradient {worst}");

    // q(Ω)
    let ups = conjugate::update_omega_scale(&locals, &g, &priors);
    g.set_upsilon(ups.clone()).unwrap();
    let c = g.c.clone();
    let f = |u: &DMatrix<f64>| bound_at(&agents, &locals, &priors, &g.mu_zeta, &g.sigma_zeta, u, &c);
    let mut worst: f64 = 0.0;
    let ustep = step * ups.amax();
    for i in 0..k {
        for j in 0..=i {
            let d = (f(&sym_perturb(&ups, i, j, ustep)) - f(&sym_perturb(&ups, i, j, -ustep))) / (2.0 * ustep);
            worst = worst.max(d.abs() * ups.amax());
        }
    }
    // Scale-free: derivative times the magnitude of Υ.
    assert!(worst < 1e-6, "q(Omega) gradient {worst}");

    // q(a)
    let c = conjugate::update_a(&g, &priors).unwrap();
    let f = |cc: &DVector<f64>| bound_at(&agents, &locals, &priors, &g.mu_zeta, &g.sigma_zeta, g.upsilon(), cc);
    for i in 0..k {
        let mut up = c.clone();
        up[i] += step;
        let mut dn = c.clone();
        dn[i] -= step;
        let d = (f(&up) - f(&dn)) / (2.0 * step);
        assert!(d.abs() < 1e-6, "q(a) gradient {d}");
    }
}
