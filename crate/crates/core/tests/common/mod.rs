//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod grad_cases;

use std::sync::OnceLock;

use ccspnet::autodiff::{Graph, Tensor, Var};
use ccspnet::data::{self, PreprocessConfig, SynthConfig, TrialSet};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Analytic gradients of the scalar `f(inputs)` against central
/// differences, one relative error per input.
pub fn gradient_errors<F>(inputs: &[Tensor], f: F) -> Vec<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root).expect("backward");
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars);
        g.value(root).item()
    };
    let mut errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input).into_data();
        let mut numeric = vec![0.0; input.len()];
        let mut work = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        errors.push(rel_err(&analytic, &numeric));
    }
    errors
}

/// `Σ (out + r)²` for a fixed random `r`, so every output element gets a
/// distinct upstream adjoint.
pub fn random_readout(g: &mut Graph, out: Var, r: &Tensor) -> Var {
    let c = g.constant(r.clone());
    let shifted = g.add(out, c).unwrap();
    g.sum_squares(shifted).unwrap()
}

/// Random symmetric positive-definite matrix with unit trace.
pub fn random_spd(c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut s = &a * a.transpose() + DMatrix::identity(c, c) * 0.05;
    let tr = s.trace();
    s /= tr;
    s
}

/// `ln Γ(x)` for integer or half-integer `x > 0` by exact recurrence.
pub fn ln_gamma_half_integer(x: f64) -> f64 {
    let twice = (2.0 * x).round();
    assert!((twice - 2.0 * x).abs() < 1e-12 && x > 0.0);
    let (mut acc, mut y) = if twice as i64 % 2 == 0 {
        (0.0, 1.0)
    } else {
        (0.5 * std::f64::consts::PI.ln(), 0.5)
    };
    while y < x - 1e-9 {
        acc += y.ln();
        y += 1.0;
    }
    acc
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `P(T > t)` by quadrature of the Student-t density (integer `df`).
pub fn t_sf_quadrature(t: f64, df: f64) -> f64 {
    let ln_norm = ln_gamma_half_integer((df + 1.0) / 2.0)
        - ln_gamma_half_integer(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    let density = |x: f64| (ln_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    0.5 - simpson(density, 0.0, t, 200_000)
}

/// `P(F > f)` by quadrature of the F density (integer `d1 ≥ 2`, `d2`).
pub fn f_sf_quadrature(f: f64, d1: f64, d2: f64) -> f64 {
    let (a, b) = (d1 / 2.0, d2 / 2.0);
    let ln_beta =
        ln_gamma_half_integer(a) + ln_gamma_half_integer(b) - ln_gamma_half_integer(a + b);
    let density = |x: f64| {
        if x <= 0.0 {
            return if d1 == 2.0 {
                (-ln_beta).exp() * (d1 / d2)
            } else {
                0.0
            };
        }
        (a * (d1 / d2).ln() + (a - 1.0) * x.ln() - (a + b) * (1.0 + d1 * x / d2).ln() - ln_beta)
            .exp()
    };
    1.0 - simpson(density, 0.0, f, 400_000)
}

/// Default synthetic dataset, pre-processed to 100 Hz, built once per test
/// binary.
pub fn default_dataset() -> &'static TrialSet {
    static SET: OnceLock<TrialSet> = OnceLock::new();
    SET.get_or_init(|| {
        let raw = data::synthesize(&SynthConfig::default()).unwrap();
        data::preprocess(&raw, &PreprocessConfig::default()).unwrap()
    })
}

/// Model configuration matching a pre-processed set.
pub fn config_for(set: &TrialSet) -> ccspnet::model::ModelConfig {
    ccspnet::model::ModelConfig {
        n_channels: set.n_channels,
        n_timepoints: set.n_times,
        sample_rate_hz: set.sample_rate_hz,
        ..Default::default()
    }
}
