#![allow(dead_code)]

use mmnl_core::data_io::{self, SimSpec};
use mmnl_core::model::{self, AgentData, ChoiceDataset, ChoiceEvent, GlobalVarParams, Hyperpriors};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn random_agent(rng: &mut ChaCha8Rng, j: usize, k: usize, t: usize, sd: f64) -> AgentData<f64> {
    let events = (0..t)
        .map(|_| ChoiceEvent {
            x: DMatrix::from_fn(j, k, |_, _| sd * normal(rng)),
            chosen: rng.random_range(0..j),
        })
        .collect();
    AgentData::new(format!("a{}", rng.random::<u32>()), events)
}

pub fn random_spd(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(k, k)) * scale
}

/// A global state with moderate prior precision `ωΥ⁻¹` on β.
pub fn random_global(rng: &mut ChaCha8Rng, h: usize, priors: &Hyperpriors<f64>) -> GlobalVarParams<f64> {
    let k = priors.dim();
    let omega = (h as f64) + priors.nu + k as f64 - 1.0;
    GlobalVarParams::from_parts(
        h,
        priors,
        DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0)),
        random_spd(rng, k, 0.01),
        random_spd(rng, k, omega * 0.5),
        DVector::from_fn(k, |_, _| rng.random_range(0.5..2.0)),
    )
    .unwrap()
}

/// The desk-scale simulation design: H=500, J=5, K=3, T=10, Ω=0.25 I.
pub fn desk(seed: u64) -> (ChoiceDataset<f64>, data_io::Truth) {
    data_io::simulate_dataset(&SimSpec::preset("desk", seed).unwrap()).unwrap()
}

pub fn small_sim(h: usize, k: usize, seed: u64) -> ChoiceDataset<f64> {
    let mut spec = SimSpec::preset("desk", seed).unwrap();
    spec.n_agents = h;
    spec.n_covariates = k;
    spec.zeta_true = data_io::spaced_zeta(k);
    spec.omega_true = DMatrix::identity(k, k) * 0.25;
    data_io::simulate_dataset(&spec).unwrap().0
}

/// K=6 data with Student-t₄ covariates, on which the delta approximation
/// used by NCVMP breaks down.
pub fn heavy_tailed(seed: u64) -> ChoiceDataset<f64> {
    let (h, j, k, t) = (100, 4, 6, 10);
    let mut r = rng(seed);
    let tdist = rand_distr::StudentT::new(4.0).unwrap();
    let zeta = data_io::spaced_zeta(k);
    let agents = (0..h)
        .map(|i| {
            let beta = DVector::from_fn(k, |q, _| zeta[q] + normal(&mut r));
            let events = (0..t)
                .map(|_| {
                    let x = DMatrix::from_fn(j, k, |_, _| r.sample::<f64, _>(tdist));
                    let p = model::choice_probabilities(&x, &beta).unwrap();
                    let u: f64 = r.random();
                    let mut acc = 0.0;
                    let mut chosen = j - 1;
                    for (q, pq) in p.iter().enumerate() {
                        acc += pq;
                        if u < acc {
                            chosen = q;
                            break;
                        }
                    }
                    ChoiceEvent { x, chosen }
                })
                .collect();
            AgentData::new(format!("{:03}", i + 1), events)
        })
        .collect();
    ChoiceDataset::new(agents, j, k).unwrap()
}

/// Gradient and Hessian of `f_beta` by central differences of function values.
pub fn fd_grad_hess(
    beta: &DVector<f64>,
    agent: &AgentData<f64>,
    global: &GlobalVarParams<f64>,
    h: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = beta.len();
    let f = |b: &DVector<f64>| model::f_beta(b, agent, global);
    let f0 = f(beta);
    let mut g = DVector::zeros(k);
    let mut hs = DMatrix::zeros(k, k);
    let e = |i: usize| DVector::from_fn(k, |q, _| if q == i { h } else { 0.0 });
    for i in 0..k {
        g[i] = (f(&(beta + e(i))) - f(&(beta - e(i)))) / (2.0 * h);
        hs[(i, i)] = (f(&(beta + e(i))) - 2.0 * f0 + f(&(beta - e(i)))) / (h * h);
        for jx in 0..i {
            let v = (f(&(beta + e(i) + e(jx))) - f(&(beta + e(i) - e(jx))) - f(&(beta - e(i) + e(jx)))
                + f(&(beta - e(i) - e(jx))))
                / (4.0 * h * h);
            hs[(i, jx)] = v;
            hs[(jx, i)] = v;
        }
    }
    (g, hs)
}

/// `max|a − b| / max(1, max|b|)`.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}
