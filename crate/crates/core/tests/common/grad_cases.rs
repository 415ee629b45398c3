//! Randomized finite-difference cases, one function per differentiable op.
//! Each returns one relative error per input for case number `case`.

use ccspnet::autodiff::{BatchNormMode, BatchNormStats, Tensor, Var};
use ccspnet::csp;
use nalgebra::DMatrix;
use rand::Rng;

use super::{gradient_errors, normal_tensor, random_readout, rng};

fn two_class_labels(n: usize, r: &mut impl Rng) -> Vec<u8> {
    let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..=1)).collect();
    labels[0] = 0;
    labels[1] = 1;
    labels
}

pub fn conv_temporal(case: u64) -> Vec<f64> {
    let mut r = rng(100 + case);
    let (n, k, c, t) = (
        r.random_range(1..=3),
        r.random_range(1..=3),
        r.random_range(1..=3),
        r.random_range(3..=12),
    );
    let m = if r.random_bool(0.5) { 1 } else { k };
    let klen = r.random_range(1..=t + 3);
    let x = normal_tensor(&[n, m, c, t], &mut r);
    let w = normal_tensor(&[k, klen], &mut r);
    let b = normal_tensor(&[k], &mut r);
    let readout = normal_tensor(&[n, k, c, t], &mut r);
    gradient_errors(&[x, w, b], |g, v| {
        let y = g.conv_temporal(v[0], v[1], Some(v[2])).unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn batch_norm_train_mode(case: u64) -> Vec<f64> {
    let mut r = rng(200 + case);
    let n = r.random_range(2..=5);
    let f = r.random_range(1..=3);
    let shape: Vec<usize> = if case % 2 == 0 {
        vec![n, f]
    } else {
        vec![n, f, r.random_range(1..=3), r.random_range(2..=5)]
    };
    let x = normal_tensor(&shape, &mut r);
    let gamma = normal_tensor(&[f], &mut r);
    let beta = normal_tensor(&[f], &mut r);
    let readout = normal_tensor(&shape, &mut r);
    gradient_errors(&[x, gamma, beta], |g, v| {
        let mut stats = BatchNormStats::new(f);
        let y = g
            .batch_norm(v[0], v[1], v[2], &mut stats, BatchNormMode::Train)
            .unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn batch_norm_eval_mode(case: u64) -> Vec<f64> {
    let mut r = rng(250 + case);
    let (n, f) = (r.random_range(1..=4), r.random_range(1..=3));
    let x = normal_tensor(&[n, f, 2], &mut r);
    let gamma = normal_tensor(&[f], &mut r);
    let beta = normal_tensor(&[f], &mut r);
    let stats = BatchNormStats {
        mean: (0..f).map(|_| r.random_range(-1.0..1.0)).collect(),
        var: (0..f).map(|_| r.random_range(0.5..2.0)).collect(),
    };
    let readout = normal_tensor(&[n, f, 2], &mut r);
    gradient_errors(&[x, gamma, beta], |g, v| {
        let mut s = stats.clone();
        let y = g
            .batch_norm(v[0], v[1], v[2], &mut s, BatchNormMode::Eval)
            .unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn dense(case: u64) -> Vec<f64> {
    let mut r = rng(300 + case);
    let (n, din, dout) = (
        r.random_range(1..=5),
        r.random_range(1..=6),
        r.random_range(1..=6),
    );
    let x = normal_tensor(&[n, din], &mut r);
    let w = normal_tensor(&[din, dout], &mut r);
    let b = normal_tensor(&[dout], &mut r);
    let readout = normal_tensor(&[n, dout], &mut r);
    gradient_errors(&[x, w, b], |g, v| {
        let y = g.dense(v[0], v[1], v[2]).unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn log_variance(case: u64) -> Vec<f64> {
    let mut r = rng(400 + case);
    let shape = vec![
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(2..=20),
    ];
    let x = normal_tensor(&shape, &mut r);
    let readout = normal_tensor(&shape[..2], &mut r);
    gradient_errors(&[x], |g, v| {
        let y = g.log_variance(v[0]).unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn morlet_parameters(case: u64) -> Vec<f64> {
    let mut r = rng(500 + case);
    let k = r.random_range(1..=4);
    let klen = r.random_range(4..=40);
    let fs = [100.0, 250.0][case as usize % 2];
    let params: Vec<f64> = (0..k)
        .flat_map(|_| {
            [
                r.random_range(8.5..29.5),
                r.random_range(0.05..0.5),
                r.random_range(0.5..5.0),
            ]
        })
        .collect();
    let p = Tensor::new(vec![k, 3], params).unwrap();
    let readout = normal_tensor(&[k, klen], &mut r);
    gradient_errors(&[p], |g, v| {
        let y = g.morlet_bank(v[0], klen, fs).unwrap();
        random_readout(g, y, &readout)
    })
}

pub fn fisher_criterion(case: u64) -> Vec<f64> {
    let mut r = rng(600 + case);
    let n = r.random_range(4..=12);
    let labels = two_class_labels(n, &mut r);
    let mut g0 = normal_tensor(&[n], &mut r);
    for (v, l) in g0.data_mut().iter_mut().zip(&labels) {
        *v += 3.0 * *l as f64;
    }
    gradient_errors(&[g0], |g, v| g.fisher_criterion(v[0], &labels).unwrap())
}

pub fn csp_loss_on_features(case: u64) -> Vec<f64> {
    let mut r = rng(700 + case);
    let n = r.random_range(2..=6);
    let branches = r.random_range(1..=4);
    let labels = two_class_labels(n, &mut r);
    let inputs: Vec<Tensor> = (0..branches)
        .map(|_| normal_tensor(&[n, csp::N_FILTERS], &mut r))
        .collect();
    gradient_errors(&inputs, |g, v| csp::csp_loss(g, v, &labels).unwrap())
}

pub fn csp_loss_through_frozen_projection(case: u64) -> Vec<f64> {
    let mut r = rng(800 + case);
    let (n, k, c, t) = (
        r.random_range(2..=4),
        r.random_range(1..=3),
        r.random_range(4..=6),
        r.random_range(6..=16),
    );
    let labels = two_class_labels(n, &mut r);
    let x = normal_tensor(&[n, k, c, t], &mut r);
    let projections: Vec<DMatrix<f64>> = (0..k)
        .map(|_| DMatrix::from_fn(c, csp::N_FILTERS, |_, _| r.random_range(-1.0..1.0)))
        .collect();
    gradient_errors(&[x], |g, v| {
        let feats: Vec<Var> = projections
            .iter()
            .enumerate()
            .map(|(map, w)| csp::spatial_filter_features_graph(g, v[0], map, w).unwrap())
            .collect();
        csp::csp_loss(g, &feats, &labels).unwrap()
    })
}

pub fn softmax_and_cross_entropies(case: u64) -> Vec<f64> {
    let mut r = rng(900 + case);
    let (n, d) = (r.random_range(1..=5), r.random_range(2..=5));
    let x = normal_tensor(&[n, d], &mut r);
    let targets = Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| r.random_range(0..=1) as f64).collect(),
    )
    .unwrap();
    let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..d as u8)).collect();
    gradient_errors(&[x], |g, v| {
        let p = g.softmax(v[0]).unwrap();
        let bce = g.binary_cross_entropy(p, &targets, 1e-12).unwrap();
        let ce = g.cross_entropy(p, &labels, 1e-12).unwrap();
        g.linear_combination(&[(bce, 0.7), (ce, 1.3)]).unwrap()
    })
}

pub fn projection_concat_and_dot(case: u64) -> Vec<f64> {
    let mut r = rng(1000 + case);
    let (n, k, c, t, m) = (
        r.random_range(1..=3),
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(2..=8),
        r.random_range(1..=4),
    );
    let x = normal_tensor(&[n, k, c, t], &mut r);
    let w = normal_tensor(&[c, m], &mut r);
    let map = r.random_range(0..k);
    let a = normal_tensor(&[n, 2], &mut r);
    let dot_w: Vec<f64> = (0..m + 2).map(|_| r.random_range(-1.0..1.0)).collect();
    let readout = normal_tensor(&[n], &mut r);
    gradient_errors(&[x, a], |g, v| {
        let p = g.project_map(v[0], map, &w).unwrap();
        let lv = g.log_variance(p).unwrap();
        let cat = g.concat_cols(&[lv, v[1]]).unwrap();
        let y = g.dot_rows(cat, &dot_w).unwrap();
        let scaled = g.scale(y, 0.5).unwrap();
        random_readout(g, scaled, &readout)
    })
}

/// Every op with its display name.
pub const OPS: &[(&str, fn(u64) -> Vec<f64>)] = &[
    ("conv_temporal", conv_temporal),
    ("batch_norm", batch_norm_train_mode),
    ("batch_norm eval", batch_norm_eval_mode),
    ("dense", dense),
    ("log_variance", log_variance),
    ("morlet_bank", morlet_parameters),
    ("fisher_criterion", fisher_criterion),
    ("csp_loss", csp_loss_on_features),
    ("csp_loss(x)", csp_loss_through_frozen_projection),
    ("softmax/bce/ce", softmax_and_cross_entropies),
    ("project/concat/dot", projection_concat_and_dot),
];
