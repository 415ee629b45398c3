//! The CCSPNet layer stack: Morlet wavelet convolution, depthwise temporal
//! convolution, four CSP branches, a dense feature-reduction network and an
//! LDA read-out.
//!
//! Training alternates two gradient flows. The CSP loss drives the
//! convolutional front end; the combined loss `r·L + (1 − r)·J` drives the
//! dense network, whose input is detached from the CSP features.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    softmax_vec, AdamState, AutodiffError, BatchNormMode, BatchNormStats, Graph, Param, Tensor, Var,
};
use crate::csp::{self, CovarianceAccumulator, CspBranch, CspError};
use crate::data::{derive_seed, TrialSet};
use crate::dsp::{MORLET_MAX_FREQ, MORLET_MIN_FREQ, MORLET_MIN_WIDTH};
use crate::lda::{LdaError, LdaModel};

pub const MODEL_MAGIC: &[u8; 4] = b"CCSP";
pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Free-parameter total quoted for the reference architecture.
pub const REFERENCE_PARAMETER_COUNT: usize = 5036;
/// Trials per forward pass during finalize and predict.
const EVAL_CHUNK: usize = 64;
const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("batch needs trials of both classes")]
    SingleClassBatch,
    #[error("model is not finalized")]
    Unfinalized,
    #[error("input is {got:?}, model expects {expected:?}")]
    InputShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file shape manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Csp(#[from] CspError),
    #[error(transparent)]
    Lda(#[from] LdaError),
}

impl ModelError {
    /// True for failures that come from the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ModelError::Autodiff(_) | ModelError::Csp(_) | ModelError::Lda(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Component removed for an ablation run.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// No wavelet layer; raw input goes to the temporal convolution.
    Wkcnn,
    /// No temporal convolution; wavelet maps go straight to CSP.
    Tcnn,
    /// No dense network; LDA reads the 16 concatenated CSP features.
    Frn,
    /// The last dense layer emits two logits read by a softmax and trained
    /// with cross-entropy in place of the Fisher term.
    Lda,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Wkcnn,
        Ablation::Tcnn,
        Ablation::Frn,
        Ablation::Lda,
    ];

    fn has_wavelet(self) -> bool {
        self != Ablation::Wkcnn
    }
    fn has_temporal(self) -> bool {
        self != Ablation::Tcnn
    }
    fn has_dense(self) -> bool {
        self != Ablation::Frn
    }
    fn has_lda(self) -> bool {
        self != Ablation::Lda
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Wkcnn => "wkcnn",
            Ablation::Tcnn => "tcnn",
            Ablation::Frn => "frn",
            Ablation::Lda => "lda",
        })
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Ablation::None),
            "wkcnn" => Ok(Ablation::Wkcnn),
            "tcnn" => Ok(Ablation::Tcnn),
            "frn" => Ok(Ablation::Frn),
            "lda" => Ok(Ablation::Lda),
            other => Err(format!(
                "unknown component '{other}' (expected wkcnn, tcnn, frn or lda)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub sample_rate_hz: f64,
    pub n_wavelet_kernels: usize,
    pub wavelet_len: usize,
    pub n_temporal_kernels: usize,
    pub temporal_len: usize,
    pub dense_dims: Vec<usize>,
    pub loss_ratio: f64,
    pub lr_wavelet: f64,
    pub lr_main: f64,
    pub l1: f64,
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_channels: 62,
            n_timepoints: 250,
            sample_rate_hz: 100.0,
            n_wavelet_kernels: 4,
            wavelet_len: 32,
            n_temporal_kernels: 4,
            temporal_len: 64,
            dense_dims: vec![16, 16, 8, 4],
            loss_ratio: 0.3,
            lr_wavelet: 0.001,
            lr_main: 0.01,
            l1: 0.01,
            l2: 0.1,
            epochs: 20,
            batch_size: 300,
            seed: 0,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn n_kernels(&self) -> usize {
        self.n_wavelet_kernels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_wavelet_kernels != self.n_temporal_kernels {
            return bad(format!(
                "depthwise pairing needs equal kernel counts, got {} wavelet and {} temporal",
                self.n_wavelet_kernels, self.n_temporal_kernels
            ));
        }
        if self.n_wavelet_kernels == 0 || self.wavelet_len == 0 || self.temporal_len == 0 {
            return bad("kernel counts and lengths must be positive".into());
        }
        if self.n_channels < csp::N_FILTERS {
            return bad(format!(
                "need at least {} channels, got {}",
                csp::N_FILTERS,
                self.n_channels
            ));
        }
        if self.n_timepoints < 2 {
            return bad("need at least 2 time points".into());
        }
        if self.dense_dims.len() < 2 || self.dense_dims[0] != csp::N_FILTERS * self.n_kernels() {
            return bad(format!(
                "dense_dims must start at {} (4 features × {} branches) and have at least two entries, got {:?}",
                csp::N_FILTERS * self.n_kernels(),
                self.n_kernels(),
                self.dense_dims
            ));
        }
        if self.dense_dims.contains(&0) {
            return bad("dense layer widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.loss_ratio) {
            return bad(format!(
                "loss_ratio must lie in [0, 1], got {}",
                self.loss_ratio
            ));
        }
        for (name, v) in [
            ("lr_wavelet", self.lr_wavelet),
            ("lr_main", self.lr_main),
            ("l1", self.l1),
            ("l2", self.l2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!(
                    "{name} must be a finite non-negative number, got {v}"
                ));
            }
        }
        if !(self.sample_rate_hz > 0.0) {
            return bad("sample_rate_hz must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}", i64::MAX));
        }
        Ok(())
    }

    /// Output widths of the dense layers, honouring the LDA ablation.
    fn dense_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = self.dense_dims.clone();
        if self.ablation == Ablation::Lda {
            *dims.last_mut().expect("validated") = 2;
        }
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Width of the features the LDA reads.
    fn readout_dim(&self) -> usize {
        if self.ablation.has_dense() {
            *self.dense_dims.last().expect("validated")
        } else {
            self.dense_dims[0]
        }
    }
}

/// One row of the training-history log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub batch: usize,
    pub csp_loss: f64,
    pub fisher: f64,
    pub combined: f64,
}

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub csp_loss: f64,
    /// Fisher criterion, or cross-entropy for the LDA ablation.
    pub fisher: f64,
    pub combined: f64,
}

/// Artifacts fixed by [`ModelState::finalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Frozen {
    pub branches: Vec<CspBranch>,
    /// Absent for the LDA ablation.
    pub lda: Option<LdaModel>,
}

/// Loss values, gradients aligned with [`ModelState::params`] and the
/// projections used, for one batch.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub report: StepReport,
    pub grads: Vec<Tensor>,
    pub projections: Vec<DMatrix<f64>>,
}

/// Itemized parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterReport {
    pub items: Vec<(String, usize)>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in &self.items {
            writeln!(f, "{name:<24}{n:>8}")?;
        }
        writeln!(f, "{:<24}{:>8}", "trainable", self.trainable)?;
        writeln!(f, "{:<24}{:>8}", "frozen (csp + lda)", self.frozen)?;
        writeln!(f, "{:<24}{:>8}", "total", self.total)?;
        write!(
            f,
            "reference total {REFERENCE_PARAMETER_COUNT} has no published itemization; difference {}",
            REFERENCE_PARAMETER_COUNT as i64 - self.total as i64
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// Wavelet parameters first (if present), then everything else.
    pub params: Vec<Param>,
    n_wavelet_params: usize,
    pub bn_stats: BTreeMap<String, BatchNormStats>,
    pub adam_wavelet: AdamState,
    pub adam_main: AdamState,
    pub frozen: Option<Frozen>,
    pub history: Vec<HistoryEntry>,
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl ModelState {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.n_kernels();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417));
        let mut params = Vec::new();
        let mut bn_stats = BTreeMap::new();
        let mut add_bn = |params: &mut Vec<Param>, name: &str, f: usize| {
            params.push(Param::new(
                format!("{name}.gamma"),
                Tensor::filled(&[f], 1.0),
                false,
            ));
            params.push(Param::new(
                format!("{name}.beta"),
                Tensor::zeros(&[f]),
                false,
            ));
            bn_stats.insert(name.to_string(), BatchNormStats::new(f));
        };
        if config.ablation.has_wavelet() {
            let mut w = Vec::with_capacity(3 * k);
            for i in 0..k {
                let f = if k == 1 {
                    MORLET_MIN_FREQ
                } else {
                    MORLET_MIN_FREQ
                        + (MORLET_MAX_FREQ - MORLET_MIN_FREQ) * i as f64 / (k - 1) as f64
                };
                w.extend([f, 0.25, 4.0 * std::f64::consts::LN_2]);
            }
            params.push(Param::new("wavelet", Tensor::new(vec![k, 3], w)?, false));
        }
        let n_wavelet_params = params.len();
        if config.ablation.has_wavelet() {
            add_bn(&mut params, "bn_wavelet", k);
        }
        if config.ablation.has_temporal() {
            let bound = 1.0 / (config.temporal_len as f64).sqrt();
            params.push(Param::new(
                "temporal.kernel",
                uniform_tensor(&[k, config.temporal_len], bound, &mut rng),
                true,
            ));
            params.push(Param::new(
                "temporal.bias",
                uniform_tensor(&[k], bound, &mut rng),
                false,
            ));
            add_bn(&mut params, "bn_temporal", k);
        }
        if config.ablation.has_dense() {
            let layers = config.dense_layers();
            for (i, (din, dout)) in layers.iter().enumerate() {
                let bound = 1.0 / (*din as f64).sqrt();
                params.push(Param::new(
                    format!("dense{i}.weight"),
                    uniform_tensor(&[*din, *dout], bound, &mut rng),
                    true,
                ));
                params.push(Param::new(
                    format!("dense{i}.bias"),
                    uniform_tensor(&[*dout], bound, &mut rng),
                    false,
                ));
                if i + 1 < layers.len() {
                    add_bn(&mut params, &format!("bn_dense{i}"), *dout);
                }
            }
        }
        let adam_wavelet = AdamState::new(config.lr_wavelet, 0.0, 0.0, &params[..n_wavelet_params]);
        let adam_main = AdamState::new(
            config.lr_main,
            config.l1,
            config.l2,
            &params[n_wavelet_params..],
        );
        Ok(Self {
            config,
            params,
            n_wavelet_params,
            bn_stats,
            adam_wavelet,
            adam_main,
            frozen: None,
            history: Vec::new(),
        })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn is_finalized(&self) -> bool {
        self.frozen.is_some()
    }

    /// Current wavelet centre frequencies.
    pub fn wavelet_frequencies(&self) -> Vec<f64> {
        self.param("wavelet")
            .map(|p| p.value.data().chunks(3).map(|r| r[0]).collect())
            .unwrap_or_default()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .index(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let expected = (self.config.n_channels, self.config.n_timepoints);
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != expected {
            let got = if s.len() == 4 { (s[2], s[3]) } else { (0, 0) };
            return Err(ModelError::InputShape { expected, got });
        }
        Ok(s[0])
    }

    /// WKCNN then TCNN, each followed by 2-D batch norm: `[N,1,C,T] → [N,K,C,T]`.
    fn spectral(
        &self,
        g: &mut Graph,
        x: Var,
        vars: &[Var],
        stats: &mut BTreeMap<String, BatchNormStats>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut h = x;
        if cfg.ablation.has_wavelet() {
            let kernels = g.morlet_bank(
                self.var(vars, "wavelet"),
                cfg.wavelet_len,
                cfg.sample_rate_hz,
            )?;
            h = g.conv_temporal(h, kernels, None)?;
            let st = stats.get_mut("bn_wavelet").expect("bn stats");
            h = g.batch_norm(
                h,
                self.var(vars, "bn_wavelet.gamma"),
                self.var(vars, "bn_wavelet.beta"),
                st,
                mode,
            )?;
        }
        if cfg.ablation.has_temporal() {
            h = g.conv_temporal(
                h,
                self.var(vars, "temporal.kernel"),
                Some(self.var(vars, "temporal.bias")),
            )?;
            let st = stats.get_mut("bn_temporal").expect("bn stats");
            h = g.batch_norm(
                h,
                self.var(vars, "bn_temporal.gamma"),
                self.var(vars, "bn_temporal.beta"),
                st,
                mode,
            )?;
        }
        Ok(h)
    }

    /// Dense layers with 1-D batch norm between them and no activations.
    fn dense_head(
        &self,
        g: &mut Graph,
        input: Var,
        vars: &[Var],
        stats: &mut BTreeMap<String, BatchNormStats>,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let layers = self.config.dense_layers();
        let mut h = input;
        for i in 0..layers.len() {
            h = g.dense(
                h,
                self.var(vars, &format!("dense{i}.weight")),
                self.var(vars, &format!("dense{i}.bias")),
            )?;
            if i + 1 < layers.len() {
                let name = format!("bn_dense{i}");
                let st = stats.get_mut(&name).expect("bn stats");
                h = g.batch_norm(
                    h,
                    self.var(vars, &format!("{name}.gamma")),
                    self.var(vars, &format!("{name}.beta")),
                    st,
                    mode,
                )?;
            }
        }
        Ok(h)
    }

    /// Builds `[N, 1, C, T]` input from trials of `set`.
    pub fn input_tensor(&self, set: &TrialSet, indices: &[usize]) -> Result<Tensor> {
        let expected = (self.config.n_channels, self.config.n_timepoints);
        if (set.n_channels, set.n_times) != expected {
            return Err(ModelError::InputShape {
                expected,
                got: (set.n_channels, set.n_times),
            });
        }
        Ok(Tensor::new(
            vec![indices.len(), 1, set.n_channels, set.n_times],
            set.gather_f64(indices),
        )?)
    }

    /// Train-mode losses and gradients for one batch, without touching the
    /// parameters. `stats` receives the batch-norm running-stat updates;
    /// layers missing from it start from the model's own running stats.
    /// With `fixed_projections` the CSP reductions are taken as given instead
    /// of being refit on the batch.
    pub fn loss_gradients(
        &self,
        x: &Tensor,
        labels: &[u8],
        stats: &mut BTreeMap<String, BatchNormStats>,
        fixed_projections: Option<&[DMatrix<f64>]>,
    ) -> Result<LossGradients> {
        let n = self.check_input(x)?;
        if labels.len() != n {
            return Err(ModelError::Config(format!(
                "{} labels for {n} trials",
                labels.len()
            )));
        }
        if !labels.contains(&0) || !labels.iter().any(|l| *l != 0) {
            return Err(ModelError::SingleClassBatch);
        }
        for (name, st) in &self.bn_stats {
            stats.entry(name.clone()).or_insert_with(|| st.clone());
        }
        let cfg = &self.config;
        let (k, c, t) = (cfg.n_kernels(), cfg.n_channels, cfg.n_timepoints);
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let h = self.spectral(&mut g, xv, &vars, stats, BatchNormMode::Train)?;

        let mut projections = Vec::with_capacity(k);
        let mut features = Vec::with_capacity(k);
        for map in 0..k {
            let w_r = match fixed_projections {
                Some(p) => p[map].clone(),
                None => {
                    let hv = g.value(h).data();
                    let trials =
                        (0..n).map(|i| &hv[(i * k + map) * c * t..(i * k + map + 1) * c * t]);
                    CspBranch::fit(trials, labels, c, t, map)?.w_r
                }
            };
            features.push(csp::spatial_filter_features_graph(&mut g, h, map, &w_r)?);
            projections.push(w_r);
        }
        let l = csp::csp_loss(&mut g, &features, labels)?;
        let spectral_grads = g.backward(l)?;

        let concat = g.concat_cols(&features)?;
        let detached = g.detach(concat);
        let j = match cfg.ablation {
            Ablation::Lda => {
                let logits =
                    self.dense_head(&mut g, detached, &vars, stats, BatchNormMode::Train)?;
                let p = g.softmax(logits)?;
                g.cross_entropy(p, labels, CE_CLAMP)?
            }
            Ablation::Frn => {
                let lda = LdaModel::fit(g.value(detached).data(), cfg.readout_dim(), labels)?;
                let proj = g.dot_rows(detached, &lda.w)?;
                g.fisher_criterion(proj, labels)?
            }
            _ => {
                let out = self.dense_head(&mut g, detached, &vars, stats, BatchNormMode::Train)?;
                let lda = LdaModel::fit(g.value(out).data(), cfg.readout_dim(), labels)?;
                let proj = g.dot_rows(out, &lda.w)?;
                g.fisher_criterion(proj, labels)?
            }
        };
        let l_detached = g.detach(l);
        let combined =
            g.linear_combination(&[(l_detached, cfg.loss_ratio), (j, 1.0 - cfg.loss_ratio)])?;
        let dense_grads = g.backward(combined)?;

        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                spectral_grads
                    .get(*v)
                    .or_else(|| dense_grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        Ok(LossGradients {
            report: StepReport {
                csp_loss: g.value(l).item(),
                fisher: g.value(j).item(),
                combined: g.value(combined).item(),
            },
            grads,
            projections,
        })
    }

    /// One optimization step on a batch. Clears any frozen artifacts.
    pub fn train_step(&mut self, x: &Tensor, labels: &[u8]) -> Result<StepReport> {
        let mut stats = std::mem::take(&mut self.bn_stats);
        let out = self.loss_gradients(x, labels, &mut stats, None);
        self.bn_stats = stats;
        let out = out?;
        let nw = self.n_wavelet_params;
        let (wavelet, main) = self.params.split_at_mut(nw);
        self.adam_wavelet.step(wavelet, &out.grads[..nw])?;
        self.adam_main.step(main, &out.grads[nw..])?;
        if let Some(i) = self.index("wavelet") {
            for row in self.params[i].value.data_mut().chunks_mut(3) {
                row[0] = row[0].clamp(MORLET_MIN_FREQ, MORLET_MAX_FREQ);
                row[1] = row[1].max(MORLET_MIN_WIDTH);
            }
        }
        self.frozen = None;
        Ok(out.report)
    }

    /// Runs `config.epochs` epochs of shuffled mini-batches over `set`.
    /// Batches without both classes are skipped.
    pub fn fit(&mut self, set: &TrialSet) -> Result<Vec<StepReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 0x7a11));
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut reports = Vec::new();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
                let labels = set.gather_labels(idx);
                if idx.len() < 2 || !labels.contains(&0) || !labels.contains(&1) {
                    continue;
                }
                let x = self.input_tensor(set, idx)?;
                let r = self.train_step(&x, &labels)?;
                self.history.push(HistoryEntry {
                    epoch,
                    batch,
                    csp_loss: r.csp_loss,
                    fisher: r.fisher,
                    combined: r.combined,
                });
                reports.push(r);
            }
        }
        Ok(reports)
    }

    /// Eval-mode spectral maps `[n, K, C, T]` for a chunk of trials.
    pub fn spectral_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut stats = self.bn_stats.clone();
        let h = self.spectral(&mut g, xv, &vars, &mut stats, BatchNormMode::Eval)?;
        Ok(g.value(h).clone())
    }

    /// Eval-mode outputs after the wavelet layer and after the temporal
    /// layer (each after its batch norm), for time-frequency inspection.
    pub fn stage_outputs(&self, x: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        self.check_input(x)?;
        let cfg = &self.config;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut stats = self.bn_stats.clone();
        let xv = g.constant(x.clone());
        let mut after_wavelet = None;
        let mut h = xv;
        if cfg.ablation.has_wavelet() {
            let kernels = g.morlet_bank(
                self.var(&vars, "wavelet"),
                cfg.wavelet_len,
                cfg.sample_rate_hz,
            )?;
            h = g.conv_temporal(h, kernels, None)?;
            let st = stats.get_mut("bn_wavelet").expect("bn stats");
            h = g.batch_norm(
                h,
                self.var(&vars, "bn_wavelet.gamma"),
                self.var(&vars, "bn_wavelet.beta"),
                st,
                BatchNormMode::Eval,
            )?;
            after_wavelet = Some(g.value(h).clone());
        }
        let mut after_temporal = None;
        if cfg.ablation.has_temporal() {
            h = g.conv_temporal(
                h,
                self.var(&vars, "temporal.kernel"),
                Some(self.var(&vars, "temporal.bias")),
            )?;
            let st = stats.get_mut("bn_temporal").expect("bn stats");
            h = g.batch_norm(
                h,
                self.var(&vars, "bn_temporal.gamma"),
                self.var(&vars, "bn_temporal.beta"),
                st,
                BatchNormMode::Eval,
            )?;
            after_temporal = Some(g.value(h).clone());
        }
        Ok((after_wavelet, after_temporal))
    }

    fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
        (0..n)
            .step_by(EVAL_CHUNK)
            .map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
    }

    fn branch_features(&self, maps: &Tensor, branches: &[CspBranch]) -> Result<Vec<f64>> {
        let (n, k) = (maps.shape()[0], maps.shape()[1]);
        let ct = maps.shape()[2] * maps.shape()[3];
        let t = maps.shape()[3];
        let d = maps.data();
        let mut per_branch = Vec::with_capacity(k);
        for (map, b) in branches.iter().enumerate() {
            let trials = (0..n).map(|i| &d[(i * k + map) * ct..(i * k + map + 1) * ct]);
            per_branch.push(csp::spatial_filter_features(trials, &b.w_r, t)?);
        }
        let m = csp::N_FILTERS;
        let mut out = Vec::with_capacity(n * k * m);
        for i in 0..n {
            for f in &per_branch {
                out.extend_from_slice(&f[i * m..(i + 1) * m]);
            }
        }
        Ok(out)
    }

    fn head_eval(&self, features: Vec<f64>, n: usize) -> Result<Tensor> {
        let width = csp::N_FILTERS * self.config.n_kernels();
        let input = Tensor::new(vec![n, width], features)?;
        if !self.config.ablation.has_dense() {
            return Ok(input);
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut stats = self.bn_stats.clone();
        let xv = g.constant(input);
        let out = self.dense_head(&mut g, xv, &vars, &mut stats, BatchNormMode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Concatenated CSP log-variance features `[N, 4K]` under frozen
    /// projections.
    pub fn csp_features(&self, set: &TrialSet) -> Result<Tensor> {
        let frozen = self.frozen.as_ref().ok_or(ModelError::Unfinalized)?;
        let width = csp::N_FILTERS * self.config.n_kernels();
        let mut out = Vec::with_capacity(set.len() * width);
        for idx in Self::chunks(set.len()) {
            let maps = self.spectral_eval(&self.input_tensor(set, &idx)?)?;
            out.extend(self.branch_features(&maps, &frozen.branches)?);
        }
        Ok(Tensor::new(vec![set.len(), width], out)?)
    }

    fn readout(&self, set: &TrialSet, branches: &[CspBranch]) -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut width = 0;
        for idx in Self::chunks(set.len()) {
            let maps = self.spectral_eval(&self.input_tensor(set, &idx)?)?;
            let feats = self.branch_features(&maps, branches)?;
            let out = self.head_eval(feats, idx.len())?;
            width = out.shape()[1];
            rows.extend_from_slice(out.data());
        }
        Ok(Tensor::new(vec![set.len(), width], rows)?)
    }

    /// Pre-batch-norm output of the wavelet (`"bn_wavelet"`) or temporal
    /// (`"bn_temporal"`) stage, with earlier stages in eval mode.
    fn pre_batch_norm(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let mut stats = self.bn_stats.clone();
        let mut h = g.constant(x.clone());
        if cfg.ablation.has_wavelet() {
            let kernels = g.morlet_bank(
                self.var(&vars, "wavelet"),
                cfg.wavelet_len,
                cfg.sample_rate_hz,
            )?;
            h = g.conv_temporal(h, kernels, None)?;
            if layer == "bn_wavelet" {
                return Ok(g.value(h).clone());
            }
            let st = stats.get_mut("bn_wavelet").expect("bn stats");
            h = g.batch_norm(
                h,
                self.var(&vars, "bn_wavelet.gamma"),
                self.var(&vars, "bn_wavelet.beta"),
                st,
                BatchNormMode::Eval,
            )?;
        }
        h = g.conv_temporal(
            h,
            self.var(&vars, "temporal.kernel"),
            Some(self.var(&vars, "temporal.bias")),
        )?;
        Ok(g.value(h).clone())
    }

    /// Replaces the running statistics of every batch-norm layer by exact
    /// training-set statistics, layer by layer, then refits the CSP
    /// branches on the recalibrated maps. Returns the branches and the
    /// concatenated CSP features `[N, 4K]` of `train`.
    fn recalibrate(&mut self, train: &TrialSet) -> Result<(Vec<CspBranch>, Vec<f64>)> {
        let (k, c, t) = (
            self.config.n_kernels(),
            self.config.n_channels,
            self.config.n_timepoints,
        );
        let mut layers = Vec::new();
        if self.config.ablation.has_wavelet() {
            layers.push("bn_wavelet");
        }
        if self.config.ablation.has_temporal() {
            layers.push("bn_temporal");
        }
        for layer in layers {
            let mut moments = Moments::new(k);
            for idx in Self::chunks(train.len()) {
                moments.add(&self.pre_batch_norm(&self.input_tensor(train, &idx)?, layer)?);
            }
            self.bn_stats.insert(layer.to_string(), moments.finish());
        }

        let mut accs: Vec<CovarianceAccumulator> =
            (0..k).map(|_| CovarianceAccumulator::new(c, t)).collect();
        for idx in Self::chunks(train.len()) {
            let maps = self.spectral_eval(&self.input_tensor(train, &idx)?)?;
            let d = maps.data();
            for (i, &trial) in idx.iter().enumerate() {
                for (map, acc) in accs.iter_mut().enumerate() {
                    acc.add(
                        &d[(i * k + map) * c * t..(i * k + map + 1) * c * t],
                        train.labels[trial],
                    )?;
                }
            }
        }
        let branches = accs
            .into_iter()
            .enumerate()
            .map(|(map, acc)| {
                let (s0, s1) = acc.finish()?;
                CspBranch::from_covariances(s0, s1, map)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let mut features = Vec::with_capacity(train.len() * csp::N_FILTERS * k);
        for idx in Self::chunks(train.len()) {
            let maps = self.spectral_eval(&self.input_tensor(train, &idx)?)?;
            features.extend(self.branch_features(&maps, &branches)?);
        }

        if self.config.ablation.has_dense() {
            let n = train.len();
            let layers = self.config.dense_layers();
            let mut h = Tensor::new(vec![n, csp::N_FILTERS * k], features.clone())?;
            for i in 0..layers.len() {
                let mut g = Graph::new();
                let vars = self.bind(&mut g, false);
                let hv = g.constant(h);
                let z = g.dense(
                    hv,
                    self.var(&vars, &format!("dense{i}.weight")),
                    self.var(&vars, &format!("dense{i}.bias")),
                )?;
                if i + 1 == layers.len() {
                    break;
                }
                let name = format!("bn_dense{i}");
                let mut moments = Moments::new(layers[i].1);
                moments.add(g.value(z));
                let mut st = moments.finish();
                let normed = g.batch_norm(
                    z,
                    self.var(&vars, &format!("{name}.gamma")),
                    self.var(&vars, &format!("{name}.beta")),
                    &mut st,
                    BatchNormMode::Eval,
                )?;
                self.bn_stats.insert(name, st);
                h = g.value(normed).clone();
            }
        }
        Ok((branches, features))
    }

    /// Freezes the model on the full training set: batch-norm statistics
    /// are recomputed exactly, CSP branches are refit on eval-mode maps and
    /// the LDA is refit on the resulting read-out features.
    pub fn finalize(&mut self, train: &TrialSet) -> Result<()> {
        if train.is_empty() {
            return Err(ModelError::SingleClassBatch);
        }
        let (branches, features) = self.recalibrate(train)?;
        let lda = if self.config.ablation.has_lda() {
            let out = self.head_eval(features, train.len())?;
            Some(LdaModel::fit(out.data(), out.shape()[1], &train.labels)?)
        } else {
            None
        };
        self.frozen = Some(Frozen { branches, lda });
        Ok(())
    }

    /// Class labels from the frozen pipeline. Each trial is processed
    /// independently, so results do not depend on batch composition.
    pub fn predict(&self, set: &TrialSet) -> Result<Vec<u8>> {
        let frozen = self.frozen.as_ref().ok_or(ModelError::Unfinalized)?;
        if set.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.readout(set, &frozen.branches)?;
        match &frozen.lda {
            Some(lda) => Ok(lda.predict(out.data())?),
            None => Ok(out
                .data()
                .chunks(out.shape()[1])
                .map(|row| {
                    let p = softmax_vec(row);
                    u8::from(p[1] > p[0])
                })
                .collect()),
        }
    }

    /// Fraction of correctly predicted trials.
    pub fn accuracy(&self, set: &TrialSet) -> Result<f64> {
        let pred = self.predict(set)?;
        let hits = pred.iter().zip(&set.labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / set.len().max(1) as f64)
    }

    pub fn count_parameters(&self) -> ParameterReport {
        let cfg = &self.config;
        let sum = |pred: &dyn Fn(&str) -> bool| -> usize {
            self.params
                .iter()
                .filter(|p| pred(&p.name))
                .map(|p| p.value.len())
                .sum()
        };
        let mut items = vec![
            ("wavelet".to_string(), sum(&|n| n == "wavelet")),
            (
                "temporal kernels".to_string(),
                sum(&|n| n == "temporal.kernel"),
            ),
            (
                "temporal biases".to_string(),
                sum(&|n| n == "temporal.bias"),
            ),
            (
                "batch-norm 2d".to_string(),
                sum(&|n| n.starts_with("bn_wavelet") || n.starts_with("bn_temporal")),
            ),
            ("dense".to_string(), sum(&|n| n.starts_with("dense"))),
            (
                "batch-norm 1d".to_string(),
                sum(&|n| n.starts_with("bn_dense")),
            ),
        ];
        let trainable = items.iter().map(|(_, n)| n).sum();
        let csp_frozen = cfg.n_kernels() * cfg.n_channels * csp::N_FILTERS;
        let lda_frozen = if cfg.ablation.has_lda() {
            cfg.readout_dim() + 2
        } else {
            0
        };
        items.push(("csp (frozen)".to_string(), csp_frozen));
        items.push(("lda (frozen)".to_string(), lda_frozen));
        let frozen = csp_frozen + lda_frozen;
        ParameterReport {
            items,
            trainable,
            frozen,
            total: trainable + frozen,
        }
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for p in &self.params {
            out.push((format!("param/{}", p.name), p.value.clone()));
        }
        for (name, s) in &self.bn_stats {
            out.push((format!("bn/{name}/mean"), Tensor::vector(s.mean.clone())));
            out.push((format!("bn/{name}/var"), Tensor::vector(s.var.clone())));
        }
        let nw = self.n_wavelet_params;
        for (group, adam, params) in [
            ("wavelet", &self.adam_wavelet, &self.params[..nw]),
            ("main", &self.adam_main, &self.params[nw..]),
        ] {
            out.push((
                format!("adam/{group}/step"),
                Tensor::vector(vec![adam.step_count as f64]),
            ));
            for ((p, m), v) in params
                .iter()
                .zip(&adam.first_moments)
                .zip(&adam.second_moments)
            {
                out.push((format!("adam/{group}/m/{}", p.name), m.clone()));
                out.push((format!("adam/{group}/v/{}", p.name), v.clone()));
            }
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|h| {
                [
                    h.epoch as f64,
                    h.batch as f64,
                    h.csp_loss,
                    h.fisher,
                    h.combined,
                ]
            })
            .collect();
        out.push((
            "history".into(),
            Tensor::new(vec![self.history.len(), 5], hist).expect("shape"),
        ));
        if let Some(frozen) = &self.frozen {
            for b in &frozen.branches {
                let i = b.branch_index;
                out.push((format!("frozen/branch{i}/sigma0"), matrix_tensor(&b.sigma0)));
                out.push((format!("frozen/branch{i}/sigma1"), matrix_tensor(&b.sigma1)));
                out.push((format!("frozen/branch{i}/w"), matrix_tensor(&b.w)));
                out.push((
                    format!("frozen/branch{i}/eigenvalues"),
                    Tensor::vector(b.eigenvalues.clone()),
                ));
                out.push((format!("frozen/branch{i}/w_r"), matrix_tensor(&b.w_r)));
            }
            if let Some(lda) = &frozen.lda {
                let mut v = lda.w.clone();
                v.extend([lda.mu0, lda.mu1]);
                out.push(("frozen/lda".into(), Tensor::vector(v)));
            }
        }
        out
    }

    /// Serializes the full state into the versioned container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = toml::to_string(&self.config).expect("config serializes");
        let tensors = self.named_tensors();
        let mut buf = Vec::new();
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(config.as_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape().len() as u8);
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let config_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let config: ModelConfig =
            toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut state = ModelState::new(config)?;

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ModelError::Manifest("entry name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            manifest.push((name, shape));
        }
        let needed: usize = manifest
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() * 8)
            .sum();
        let remaining = bytes.len() - r.pos;
        if remaining != needed {
            return Err(ModelError::Manifest(format!(
                "manifest declares {needed} data bytes, file has {remaining}"
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::Manifest(e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(ModelError::Manifest(format!("duplicate entry {name}")));
            }
        }
        state.restore(tensors)?;
        Ok(state)
    }

    fn restore(&mut self, mut tensors: BTreeMap<String, Tensor>) -> Result<()> {
        fn take(
            tensors: &mut BTreeMap<String, Tensor>,
            name: &str,
            shape: &[usize],
        ) -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| ModelError::Manifest(format!("missing entry {name}")))?;
            if t.shape() != shape {
                return Err(ModelError::Manifest(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        }
        for p in self.params.iter_mut() {
            p.value = take(&mut tensors, &format!("param/{}", p.name), p.value.shape())?;
        }
        for (name, s) in self.bn_stats.iter_mut() {
            let f = s.mean.len();
            s.mean = take(&mut tensors, &format!("bn/{name}/mean"), &[f])?.into_data();
            s.var = take(&mut tensors, &format!("bn/{name}/var"), &[f])?.into_data();
        }
        let nw = self.n_wavelet_params;
        for (group, adam, params) in [
            ("wavelet", &mut self.adam_wavelet, &self.params[..nw]),
            ("main", &mut self.adam_main, &self.params[nw..]),
        ] {
            adam.step_count =
                take(&mut tensors, &format!("adam/{group}/step"), &[1])?.item() as u64;
            for (i, p) in params.iter().enumerate() {
                adam.first_moments[i] = take(
                    &mut tensors,
                    &format!("adam/{group}/m/{}", p.name),
                    p.value.shape(),
                )?;
                adam.second_moments[i] = take(
                    &mut tensors,
                    &format!("adam/{group}/v/{}", p.name),
                    p.value.shape(),
                )?;
            }
        }
        let rows = tensors
            .get("history")
            .map(|t| t.shape().first().copied().unwrap_or(0))
            .unwrap_or(0);
        let hist = take(&mut tensors, "history", &[rows, 5])?;
        self.history = hist
            .data()
            .chunks(5)
            .map(|r| HistoryEntry {
                epoch: r[0] as usize,
                batch: r[1] as usize,
                csp_loss: r[2],
                fisher: r[3],
                combined: r[4],
            })
            .collect();

        if tensors.contains_key("frozen/branch0/w") {
            let (k, c) = (self.config.n_kernels(), self.config.n_channels);
            let mut branches = Vec::with_capacity(k);
            for i in 0..k {
                let mat = |tensors: &mut BTreeMap<String, Tensor>,
                           field: &str,
                           cols: usize|
                 -> Result<DMatrix<f64>> {
                    let t = take(tensors, &format!("frozen/branch{i}/{field}"), &[c, cols])?;
                    Ok(DMatrix::from_row_slice(c, cols, t.data()))
                };
                branches.push(CspBranch {
                    sigma0: mat(&mut tensors, "sigma0", c)?,
                    sigma1: mat(&mut tensors, "sigma1", c)?,
                    w: mat(&mut tensors, "w", c)?,
                    eigenvalues: take(
                        &mut tensors,
                        &format!("frozen/branch{i}/eigenvalues"),
                        &[c],
                    )?
                    .into_data(),
                    w_r: mat(&mut tensors, "w_r", csp::N_FILTERS)?,
                    branch_index: i,
                });
            }
            let lda = if self.config.ablation.has_lda() {
                let d = self.config.readout_dim();
                let v = take(&mut tensors, "frozen/lda", &[d + 2])?.into_data();
                Some(LdaModel {
                    w: v[..d].to_vec(),
                    mu0: v[d],
                    mu1: v[d + 1],
                    fitted: true,
                })
            } else {
                None
            };
            self.frozen = Some(Frozen { branches, lda });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Manifest(format!("unexpected entry {extra}")));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Streaming per-feature mean and unbiased variance over axis 1 of
/// `[N, F, ...]` tensors.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(features: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; features],
            m2: vec![0.0; features],
        }
    }

    fn add(&mut self, x: &Tensor) {
        let f = self.mean.len();
        let inner: usize = x.shape()[2..].iter().product();
        let nb = (x.shape()[0] * inner) as f64;
        if nb == 0.0 {
            return;
        }
        let mut sum = vec![0.0; f];
        for (i, chunk) in x.data().chunks(inner).enumerate() {
            sum[i % f] += chunk.iter().sum::<f64>();
        }
        let mb: Vec<f64> = sum.iter().map(|s| s / nb).collect();
        let mut m2b = vec![0.0; f];
        for (i, chunk) in x.data().chunks(inner).enumerate() {
            let mu = mb[i % f];
            m2b[i % f] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        // pairwise merge of (count, mean, M2)
        let total = self.count + nb;
        for j in 0..f {
            let delta = mb[j] - self.mean[j];
            self.mean[j] += delta * nb / total;
            self.m2[j] += m2b[j] + delta * delta * self.count * nb / total;
        }
        self.count = total;
    }

    fn finish(self) -> BatchNormStats {
        let denom = (self.count - 1.0).max(1.0);
        BatchNormStats {
            mean: self.mean,
            var: self.m2.into_iter().map(|m| m / denom).collect(),
        }
    }
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r)
        .flat_map(|i| (0..c).map(move |j| m[(i, j)]))
        .collect();
    Tensor::new(vec![r, c], data).expect("shape")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            ModelError::Manifest(format!("file truncated at byte {}", self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            n_channels: 6,
            n_timepoints: 40,
            ablation,
            ..Default::default()
        }
    }

    #[test]
    fn wavelet_init_spacing() {
        let m = ModelState::new(ModelConfig::default()).unwrap();
        let f = m.wavelet_frequencies();
        let expected = [8.0, 15.333333333333334, 22.666666666666668, 30.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_parameter_report() {
        let r = ModelState::new(ModelConfig::default())
            .unwrap()
            .count_parameters();
        let get = |n: &str| r.items.iter().find(|(k, _)| k == n).unwrap().1;
        assert_eq!(get("wavelet"), 12);
        assert_eq!(get("temporal kernels"), 256);
        assert_eq!(get("csp (frozen)"), 992);
        assert_eq!(get("lda (frozen)"), 6);
        assert_eq!(get("dense"), 16 * 16 + 16 + 16 * 8 + 8 + 8 * 4 + 4);
        assert_eq!(r.total, r.trainable + r.frozen);
    }

    #[test]
    fn ablations_have_fewer_trainable_parameters() {
        let full = ModelState::new(small_config(Ablation::None))
            .unwrap()
            .count_parameters()
            .trainable;
        for a in Ablation::ALL {
            let n = ModelState::new(small_config(a))
                .unwrap()
                .count_parameters()
                .trainable;
            assert!(n < full, "{a}: {n} vs {full}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.n_temporal_kernels = 3;
        assert!(matches!(ModelState::new(c), Err(ModelError::Config(_))));
        let mut c = ModelConfig::default();
        c.dense_dims = vec![12, 4];
        assert!(matches!(ModelState::new(c), Err(ModelError::Config(_))));
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let m = ModelState::new(small_config(Ablation::None)).unwrap();
        let x = Tensor::zeros(&[3, 1, 6, 40]);
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let xv = g.constant(x);
        let mut stats = m.bn_stats.clone();
        let h = m
            .spectral(&mut g, xv, &vars, &mut stats, BatchNormMode::Train)
            .unwrap();
        assert_eq!(g.value(h).shape(), &[3, 4, 6, 40]);
        // the temporal bias is a per-map constant that batch norm removes
        assert!(g.value(h).data().iter().all(|v| v.abs() < 1e-12));
        let (wavelet, _) = m.stage_outputs(&Tensor::zeros(&[3, 1, 6, 40])).unwrap();
        assert!(wavelet.unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(
            ModelState::from_bytes(b"NOPE1234"),
            Err(ModelError::BadMagic)
        ));
        let mut bytes = ModelState::new(small_config(Ablation::None))
            .unwrap()
            .to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            ModelState::from_bytes(&bytes),
            Err(ModelError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_file_is_manifest_error() {
        let bytes = ModelState::new(small_config(Ablation::None))
            .unwrap()
            .to_bytes();
        for cut in [12, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    ModelState::from_bytes(&bytes[..cut]),
                    Err(ModelError::Manifest(_))
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn unfinalized_predict_errors() {
        let m = ModelState::new(small_config(Ablation::None)).unwrap();
        let set = TrialSet::empty(6, 40, 100.0);
        assert!(matches!(m.predict(&set), Err(ModelError::Unfinalized)));
    }
}
