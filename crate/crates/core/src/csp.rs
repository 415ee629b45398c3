//! Common spatial patterns for two-class trials.
//!
//! Each branch holds trace-normalized class covariances, the full projection
//! matrix from the generalized eigenproblem `Σ₀ w = λ (Σ₀ + Σ₁) w` and the
//! four-column reduction used for log-variance features. The CSP loss pushes
//! softmax-normalized features towards a label-dependent target vector.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Number of spatial filters kept per branch.
pub const N_FILTERS: usize = 4;
/// Softmax outputs are clamped to `[CLAMP, 1 - CLAMP]` inside the loss.
pub const LOSS_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CspError {
    #[error("CSP needs trials of both classes")]
    SingleClass,
    #[error("trials need at least 2 time points")]
    TooFewSamples,
    #[error("composite covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("CSP reduction needs at least {N_FILTERS} channels, got {0}")]
    TooFewChannels(usize),
    #[error("trial {trial}: projected row {row} has zero variance")]
    ZeroVariance { trial: usize, row: usize },
    #[error("trial {0} has zero power")]
    ZeroPower(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, CspError>;

/// Streaming per-class sums of trace-normalized trial covariances.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    n_channels: usize,
    n_times: usize,
    sums: [DMatrix<f64>; 2],
    counts: [usize; 2],
    seen: usize,
}

impl CovarianceAccumulator {
    pub fn new(n_channels: usize, n_times: usize) -> Self {
        Self {
            n_channels,
            n_times,
            sums: [
                DMatrix::zeros(n_channels, n_channels),
                DMatrix::zeros(n_channels, n_channels),
            ],
            counts: [0; 2],
            seen: 0,
        }
    }

    /// Adds one channel-major `C×T` trial.
    pub fn add(&mut self, trial: &[f64], label: u8) -> Result<()> {
        let (c, t) = (self.n_channels, self.n_times);
        if t < 2 {
            return Err(CspError::TooFewSamples);
        }
        if trial.len() != c * t {
            return Err(CspError::Shape(format!(
                "trial {} has {} samples, expected {}",
                self.seen,
                trial.len(),
                c * t
            )));
        }
        let cov = trial_covariance(trial, c, t);
        let tr = cov.trace();
        if !(tr > 0.0) {
            return Err(CspError::ZeroPower(self.seen));
        }
        let k = (label != 0) as usize;
        self.sums[k] += cov / tr;
        self.counts[k] += 1;
        self.seen += 1;
        Ok(())
    }

    /// Class means plus a Tikhonov term `λI`, `λ = 1e-6·tr(Σ₀+Σ₁)/C`,
    /// split evenly between the classes so the composite is positive definite.
    pub fn finish(self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if self.counts[0] == 0 || self.counts[1] == 0 {
            return Err(CspError::SingleClass);
        }
        let c = self.n_channels;
        let [s0, s1] = self.sums;
        let mut sigma0 = s0 / self.counts[0] as f64;
        let mut sigma1 = s1 / self.counts[1] as f64;
        let ridge = 1e-6 * (sigma0.trace() + sigma1.trace()) / c as f64;
        for d in 0..c {
            sigma0[(d, d)] += ridge / 2.0;
            sigma1[(d, d)] += ridge / 2.0;
        }
        Ok((sigma0, sigma1))
    }
}

/// Average trace-normalized covariance `XXᵀ / tr(XXᵀ)` per class, with the
/// ridge described in [`CovarianceAccumulator::finish`]. `trials` yields
/// channel-major `C×T` slices.
pub fn class_covariances<'a, I>(
    trials: I,
    labels: &[u8],
    n_channels: usize,
    n_times: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = CovarianceAccumulator::new(n_channels, n_times);
    let mut count = 0;
    for (trial, label) in trials.into_iter().zip(labels) {
        acc.add(trial, *label)?;
        count += 1;
    }
    if count != labels.len() {
        return Err(CspError::Shape(format!(
            "{count} trials for {} labels",
            labels.len()
        )));
    }
    acc.finish()
}

fn trial_covariance(trial: &[f64], c: usize, t: usize) -> DMatrix<f64> {
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for i in 0..c {
        let ri = &trial[i * t..(i + 1) * t];
        for j in 0..=i {
            let rj = &trial[j * t..(j + 1) * t];
            let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Generalized eigenvectors of `(Σ₀, Σ₀ + Σ₁)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CspSolution {
    /// Columns are eigenvectors, normalized so that `Wᵀ(Σ₀+Σ₁)W = I`.
    pub w: DMatrix<f64>,
    /// Descending eigenvalues, each in `[0, 1]` up to rounding.
    pub eigenvalues: Vec<f64>,
}

/// Solves `Σ₀ w = λ (Σ₀ + Σ₁) w` by Cholesky whitening of the composite and a
/// symmetric eigendecomposition. Columns are sorted by descending `λ`, and
/// each column's largest-magnitude entry is made positive.
pub fn solve_csp(sigma0: &DMatrix<f64>, sigma1: &DMatrix<f64>) -> Result<CspSolution> {
    if sigma0.shape() != sigma1.shape() || !sigma0.is_square() {
        return Err(CspError::Shape(format!(
            "{:?} vs {:?}",
            sigma0.shape(),
            sigma1.shape()
        )));
    }
    let c = sigma0.nrows();
    let composite = sigma0 + sigma1;
    let chol = composite.cholesky().ok_or(CspError::NotPositiveDefinite)?;
    let l = chol.l();
    // M = L⁻¹ Σ₀ L⁻ᵀ
    let l_inv_s0 = l
        .solve_lower_triangular(sigma0)
        .ok_or(CspError::NotPositiveDefinite)?;
    let m = l
        .solve_lower_triangular(&l_inv_s0.transpose())
        .ok_or(CspError::NotPositiveDefinite)?;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    // W = L⁻ᵀ U
    let w_unsorted = l
        .transpose()
        .solve_upper_triangular(&eig.eigenvectors)
        .ok_or(CspError::NotPositiveDefinite)?;

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut w = DMatrix::<f64>::zeros(c, c);
    let mut eigenvalues = Vec::with_capacity(c);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = w_unsorted.column(src).into_owned();
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, v)| {
                if v.abs() > best.1.abs() {
                    (i, *v)
                } else {
                    best
                }
            })
            .1;
        if pivot < 0.0 {
            col.neg_mut();
        }
        w.set_column(dst, &col);
        eigenvalues.push(eig.eigenvalues[src]);
    }
    Ok(CspSolution { w, eigenvalues })
}

/// Columns 1, 2, C−1 and C (1-indexed) of `w`.
pub fn reduce_projection(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = w.ncols();
    if c < N_FILTERS {
        return Err(CspError::TooFewChannels(c));
    }
    Ok(DMatrix::from_columns(&[
        w.column(0),
        w.column(1),
        w.column(c - 2),
        w.column(c - 1),
    ]))
}

/// Log-variance features of `Wᵣᵀ X` per trial; returns `N×m` row-major.
pub fn spatial_filter_features<'a, I>(
    trials: I,
    w_r: &DMatrix<f64>,
    n_times: usize,
) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (c, m) = w_r.shape();
    if n_times < 2 {
        return Err(CspError::TooFewSamples);
    }
    let mut out = Vec::new();
    let mut projected = vec![0.0; n_times];
    for (n, trial) in trials.into_iter().enumerate() {
        if trial.len() != c * n_times {
            return Err(CspError::Shape(format!(
                "trial {n} has {} samples, expected {}",
                trial.len(),
                c * n_times
            )));
        }
        for i in 0..m {
            projected.iter_mut().for_each(|v| *v = 0.0);
            for (ch, row) in trial.chunks(n_times).enumerate() {
                let wv = w_r[(ch, i)];
                for (p, x) in projected.iter_mut().zip(row) {
                    *p += wv * x;
                }
            }
            let mean = projected.iter().sum::<f64>() / n_times as f64;
            let var = projected.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_times as f64;
            if !(var > 0.0) {
                return Err(CspError::ZeroVariance { trial: n, row: i });
            }
            out.push(var.ln());
        }
    }
    Ok(out)
}

/// Differentiable log-variance features of map `map` of `x: [N, K, C, T]`
/// with `Wᵣ` held constant; returns an `[N, m]` node.
pub fn spatial_filter_features_graph(
    graph: &mut Graph,
    x: Var,
    map: usize,
    w_r: &DMatrix<f64>,
) -> Result<Var> {
    let (c, m) = w_r.shape();
    let mut data = Vec::with_capacity(c * m);
    for i in 0..c {
        for j in 0..m {
            data.push(w_r[(i, j)]);
        }
    }
    let w = Tensor::new(vec![c, m], data)?;
    let projected = graph.project_map(x, map, &w)?;
    graph.log_variance(projected).map_err(|e| match e {
        AutodiffError::ZeroVariance { row } => CspError::ZeroVariance {
            trial: row / m,
            row: row % m,
        },
        other => other.into(),
    })
}

/// Target vector for one trial: label 1 → `[1,1,0,0]`, label 0 → `[0,0,1,1]`.
pub fn target_vector(label: u8) -> [f64; N_FILTERS] {
    if label != 0 {
        [1.0, 1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0, 1.0]
    }
}

/// CSP cross-entropy: softmax each branch's `[N, 4]` feature block, take the
/// binary cross-entropy against the label's target vector, sum over
/// branches and average over the batch.
pub fn csp_loss(graph: &mut Graph, branch_features: &[Var], labels: &[u8]) -> Result<Var> {
    let n = labels.len();
    let targets = Tensor::new(
        vec![n, N_FILTERS],
        labels.iter().flat_map(|l| target_vector(*l)).collect(),
    )?;
    let mut terms = Vec::with_capacity(branch_features.len());
    for v in branch_features {
        if graph.value(*v).shape() != [n, N_FILTERS] {
            return Err(CspError::Shape(format!(
                "branch features {:?}",
                graph.value(*v).shape()
            )));
        }
        let p = graph.softmax(*v)?;
        let bce = graph.binary_cross_entropy(p, &targets, LOSS_CLAMP)?;
        terms.push((bce, 1.0));
    }
    Ok(graph.linear_combination(&terms)?)
}

/// Per-kernel CSP state.
///
/// The columns of `w` are ordered so that the first ones maximize the
/// variance of class 1 relative to the composite; this lines the reduced
/// features up with [`target_vector`].
#[derive(Clone, Debug, PartialEq)]
pub struct CspBranch {
    pub sigma0: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub w: DMatrix<f64>,
    /// Generalized eigenvalues of `(Σ₁, Σ₀+Σ₁)`, descending.
    pub eigenvalues: Vec<f64>,
    pub w_r: DMatrix<f64>,
    pub branch_index: usize,
}

impl CspBranch {
    pub fn fit<'a, I>(
        trials: I,
        labels: &[u8],
        n_channels: usize,
        n_times: usize,
        branch_index: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let (sigma0, sigma1) = class_covariances(trials, labels, n_channels, n_times)?;
        Self::from_covariances(sigma0, sigma1, branch_index)
    }

    pub fn from_covariances(
        sigma0: DMatrix<f64>,
        sigma1: DMatrix<f64>,
        branch_index: usize,
    ) -> Result<Self> {
        let sol = solve_csp(&sigma1, &sigma0)?;
        let w_r = reduce_projection(&sol.w)?;
        Ok(Self {
            sigma0,
            sigma1,
            w: sol.w,
            eigenvalues: sol.eigenvalues,
            w_r,
            branch_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_two_channel_covariances() {
        let t = 50;
        let sin: Vec<f64> = (0..t).map(|i| (i as f64 * 0.7).sin()).collect();
        let zeros = vec![0.0; t];
        let class0: Vec<f64> = sin.iter().chain(&zeros).copied().collect();
        let class1: Vec<f64> = zeros.iter().chain(&sin).copied().collect();
        let trials = [class0.as_slice(), class1.as_slice()];
        let (s0, s1) = class_covariances(trials, &[0, 1], 2, t).unwrap();
        let e0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let e1 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((s0 - e0).abs().max() < 1e-5);
        assert!((s1 - e1).abs().max() < 1e-5);
    }

    #[test]
    fn single_class_is_rejected() {
        let trial = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            class_covariances([trial.as_slice()], &[1], 2, 2),
            Err(CspError::SingleClass)
        );
    }

    #[test]
    fn diagonal_pair() {
        let s0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.1, 0.9]));
        let s1 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.9, 0.1]));
        let sol = solve_csp(&s0, &s1).unwrap();
        assert!((sol.eigenvalues[0] - 0.9).abs() < 1e-12);
        assert!((sol.eigenvalues[1] - 0.1).abs() < 1e-12);
        assert!((sol.w[(1, 0)] - 1.0).abs() < 1e-12 && sol.w[(0, 0)].abs() < 1e-12);
        assert!((sol.w[(0, 1)] - 1.0).abs() < 1e-12 && sol.w[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn equal_classes_give_one_half() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let sol = solve_csp(&s, &s).unwrap();
        assert!(sol.eigenvalues.iter().all(|l| (l - 0.5).abs() < 1e-12));
    }

    #[test]
    fn indefinite_composite_fails() {
        let s0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let s1 = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(solve_csp(&s0, &s1), Err(CspError::NotPositiveDefinite));
    }

    #[test]
    fn reduce_picks_outer_columns() {
        let w = DMatrix::from_fn(6, 6, |i, j| (i * 6 + j) as f64);
        let r = reduce_projection(&w).unwrap();
        assert_eq!(r.column(0), w.column(0));
        assert_eq!(r.column(1), w.column(1));
        assert_eq!(r.column(2), w.column(4));
        assert_eq!(r.column(3), w.column(5));
        assert_eq!(
            reduce_projection(&DMatrix::<f64>::zeros(3, 3)),
            Err(CspError::TooFewChannels(3))
        );
    }

    #[test]
    fn identity_projection_unit_variance() {
        let t = 8;
        let trial: Vec<f64> = (0..4 * t)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let f = spatial_filter_features([trial.as_slice()], &DMatrix::identity(4, 4), t).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn target_vectors() {
        assert_eq!(target_vector(1), [1.0, 1.0, 0.0, 0.0]);
        assert_eq!(target_vector(0), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_features_loss() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros(&[2, 4]));
        let loss = csp_loss(&mut g, &[v], &[0, 1]).unwrap();
        let expected = -2.0 * 0.25f64.ln() - 2.0 * 0.75f64.ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 3.3479).abs() < 1e-4);
    }
}
