//! Differentiable layer operations.

use super::graph::{Graph, Var};
use super::{AutodiffError, Result, Tensor};
use crate::dsp::{build_morlet, morlet_gradients, MorletParams};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_combination(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.linear_combination(&[(a, s)])
    }

    /// `Σ wᵢ·xᵢ` over equally shaped inputs.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| mismatch("linear_combination", "no terms"))?;
        let mut out = Tensor::zeros(self.value(first.0).shape());
        for (v, w) in terms {
            let x = self.value(*v);
            same_shape("linear_combination", &out, x)?;
            for (o, xi) in out.data_mut().iter_mut().zip(x.data()) {
                *o += w * xi;
            }
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let parents = terms.iter().map(|t| t.0).collect();
        self.push(
            "linear_combination",
            out,
            parents,
            Box::new(move |g, _, _, needs| {
                weights
                    .iter()
                    .zip(needs)
                    .map(|(w, need)| {
                        need.then(|| {
                            let mut t = g.clone();
                            t.data_mut().iter_mut().for_each(|v| *v *= w);
                            t
                        })
                    })
                    .collect()
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        self.push(
            "sum",
            Tensor::scalar(total),
            vec![a],
            Box::new(|g, p, _, _| vec![Some(Tensor::filled(p[0].shape(), g.item()))]),
        )
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(
            "sum_squares",
            Tensor::scalar(total),
            vec![a],
            Box::new(|g, p, _, _| {
                let s = 2.0 * g.item();
                let data = p[0].data().iter().map(|v| s * v).collect();
                vec![Some(
                    Tensor::new(p[0].shape().to_vec(), data).expect("shape"),
                )]
            }),
        )
    }

    /// Builds one real Morlet kernel per row of `params` (`[K, 3]` rows of
    /// `f, h, c`), producing `[K, kernel_len]`.
    pub fn morlet_bank(&mut self, params: Var, kernel_len: usize, fs: f64) -> Result<Var> {
        let p = self.value(params);
        if p.shape().len() != 2 || p.shape()[1] != 3 {
            return Err(mismatch(
                "morlet_bank",
                format!("params must be [K, 3], got {:?}", p.shape()),
            ));
        }
        let k = p.shape()[0];
        let mut data = Vec::with_capacity(k * kernel_len);
        for row in p.data().chunks(3) {
            let mp = MorletParams {
                f: row[0],
                h: row[1],
                c: row[2],
                kernel_len,
                fs,
            };
            data.extend(build_morlet(&mp)?);
        }
        let out = Tensor::new(vec![k, kernel_len], data)?;
        self.push(
            "morlet_bank",
            out,
            vec![params],
            Box::new(move |g, p, _, _| {
                let mut grad = Vec::with_capacity(p[0].len());
                for (row, up) in p[0].data().chunks(3).zip(g.data().chunks(kernel_len)) {
                    let mp = MorletParams {
                        f: row[0],
                        h: row[1],
                        c: row[2],
                        kernel_len,
                        fs,
                    };
                    // Parameters were validated by the forward pass.
                    let d = morlet_gradients(&mp, up).unwrap_or_default();
                    grad.extend([d.df, d.dh, d.dc]);
                }
                vec![Some(
                    Tensor::new(p[0].shape().to_vec(), grad).expect("shape"),
                )]
            }),
        )
    }

    /// Depthwise "same" convolution along the last (time) axis.
    ///
    /// `x` is `[N, M, C, T]` with `M` equal to 1 (broadcast to every kernel)
    /// or to the kernel count `K`; `kernels` is `[K, k]`; the optional bias is
    /// `[K]`. Output is `[N, K, C, T]`. As in most deep-learning frameworks
    /// the kernel is applied as a cross-correlation, with `⌊(k-1)/2⌋` zeros of
    /// padding on the left and the remainder on the right.
    pub fn conv_temporal(&mut self, x: Var, kernels: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        if xs.len() != 4 || ks.len() != 2 {
            return Err(mismatch(
                "conv_temporal",
                format!("input {xs:?}, kernels {ks:?}"),
            ));
        }
        let (n, m, c, t) = (xs[0], xs[1], xs[2], xs[3]);
        let (nk, klen) = (ks[0], ks[1]);
        if !(m == 1 || m == nk) {
            return Err(mismatch(
                "conv_temporal",
                format!("{m} input maps for {nk} kernels"),
            ));
        }
        if klen == 0 || t == 0 {
            return Err(mismatch("conv_temporal", "empty kernel or signal"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [nk] {
                return Err(mismatch("conv_temporal", "bias must be [K]"));
            }
        }
        let pad = (klen - 1) / 2;
        let input = self.value(x).data();
        let kern = self.value(kernels).data();
        let mut out = vec![0.0; n * nk * c * t];
        for ni in 0..n {
            for kk in 0..nk {
                let mi = if m == 1 { 0 } else { kk };
                let w = &kern[kk * klen..(kk + 1) * klen];
                for ci in 0..c {
                    let src = &input[((ni * m + mi) * c + ci) * t..][..t];
                    let dst = &mut out[((ni * nk + kk) * c + ci) * t..][..t];
                    correlate_same(src, w, pad, dst);
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (chunk, i) in out.chunks_mut(c * t).zip(0..) {
                let bk = bv[i % nk];
                chunk.iter_mut().for_each(|v| *v += bk);
            }
        }
        let out = Tensor::new(vec![n, nk, c, t], out)?;
        let mut parents = vec![x, kernels];
        parents.extend(bias);
        self.push(
            "conv_temporal",
            out,
            parents,
            Box::new(move |g, p, _, needs| {
                let (input, kern) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![0.0; input.len()]);
                let mut gk = needs[1].then(|| vec![0.0; kern.len()]);
                for ni in 0..n {
                    for kk in 0..nk {
                        let mi = if m == 1 { 0 } else { kk };
                        let w = &kern[kk * klen..(kk + 1) * klen];
                        for ci in 0..c {
                            let src_off = ((ni * m + mi) * c + ci) * t;
                            let up = &gd[((ni * nk + kk) * c + ci) * t..][..t];
                            for j in 0..klen {
                                // out[s] += w[j] * x[s + j - pad]
                                let (lo, hi) = valid_range(j, pad, t);
                                if lo >= hi {
                                    continue;
                                }
                                let shift = j as isize - pad as isize;
                                let xs = (lo as isize + shift) as usize;
                                if let Some(gx) = gx.as_mut() {
                                    let dst = &mut gx[src_off + xs..src_off + xs + (hi - lo)];
                                    for (d, u) in dst.iter_mut().zip(&up[lo..hi]) {
                                        *d += w[j] * u;
                                    }
                                }
                                if let Some(gk) = gk.as_mut() {
                                    let src = &input[src_off + xs..src_off + xs + (hi - lo)];
                                    gk[kk * klen + j] += src
                                        .iter()
                                        .zip(&up[lo..hi])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                            }
                        }
                    }
                }
                let mut res = vec![
                    gx.map(|d| Tensor::new(p[0].shape().to_vec(), d).expect("shape")),
                    gk.map(|d| Tensor::new(p[1].shape().to_vec(), d).expect("shape")),
                ];
                if p.len() == 3 {
                    let mut gb = vec![0.0; nk];
                    for (chunk, i) in gd.chunks(c * t).zip(0..) {
                        gb[i % nk] += chunk.iter().sum::<f64>();
                    }
                    res.push(Some(Tensor::vector(gb)));
                }
                res
            }),
        )
    }

    /// Batch normalization over axis 1 of `x` (`[N, F, ...]`), reducing over
    /// every other axis. Train mode uses batch statistics and updates
    /// `stats`; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(mismatch(
                "batch_norm",
                format!("input {shape:?} has no feature axis"),
            ));
        }
        let (n, f) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).shape() != [f]
            || self.value(beta).shape() != [f]
            || stats.mean.len() != f
        {
            return Err(mismatch("batch_norm", format!("{f} features")));
        }
        if mode == BatchNormMode::Train && n < 2 {
            return Err(AutodiffError::BatchTooSmall(n));
        }
        let xd = self.value(x).data();
        let count = (n * inner) as f64;
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for (chunk, i) in xd.chunks(inner).zip(0..) {
                    mean[i % f] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|v| *v /= count);
                for (chunk, i) in xd.chunks(inner).zip(0..) {
                    let mu = mean[i % f];
                    var[i % f] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for j in 0..f {
                    stats.mean[j] =
                        (1.0 - BATCH_NORM_MOMENTUM) * stats.mean[j] + BATCH_NORM_MOMENTUM * mean[j];
                    stats.var[j] = (1.0 - BATCH_NORM_MOMENTUM) * stats.var[j]
                        + BATCH_NORM_MOMENTUM * var[j] * unbias;
                }
                (mean, var)
            }
            BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, ((src, xh), dst)) in xd
            .chunks(inner)
            .zip(xhat.chunks_mut(inner))
            .zip(out.chunks_mut(inner))
            .enumerate()
        {
            let j = i % f;
            for ((s, h), d) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *h = (s - mean[j]) * inv_std[j];
                *d = gv[j] * *h + bv[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            "batch_norm",
            out,
            vec![x, gamma, beta],
            Box::new(move |g, p, _, needs| {
                let gd = g.data();
                let gamma = p[1].data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for (i, (up, xh)) in gd.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let j = i % f;
                    sum_g[j] += up.iter().sum::<f64>();
                    sum_gx[j] += up.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                }
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for (i, ((up, xh), dst)) in gd
                        .chunks(inner)
                        .zip(xhat.chunks(inner))
                        .zip(gx.chunks_mut(inner))
                        .enumerate()
                    {
                        let j = i % f;
                        let scale = gamma[j] * inv_std[j];
                        match mode {
                            BatchNormMode::Train => {
                                for ((d, u), h) in dst.iter_mut().zip(up).zip(xh) {
                                    *d = scale * (u - sum_g[j] / count - h * sum_gx[j] / count);
                                }
                            }
                            BatchNormMode::Eval => {
                                for (d, u) in dst.iter_mut().zip(up) {
                                    *d = scale * u;
                                }
                            }
                        }
                    }
                    Tensor::new(p[0].shape().to_vec(), gx).expect("shape")
                });
                vec![
                    gx,
                    Some(Tensor::vector(sum_gx)),
                    Some(Tensor::vector(sum_g)),
                ]
            }),
        )
    }

    /// Affine map `x·W + b` for `x: [N, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(mismatch("dense", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[1]);
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(n * dout);
        for row in xd.chunks(din) {
            let mut acc = bd.to_vec();
            for (xi, wrow) in row.iter().zip(wd.chunks(dout)) {
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += xi * wv;
                }
            }
            out.extend(acc);
        }
        let out = Tensor::new(vec![n, dout], out)?;
        self.push(
            "dense",
            out,
            vec![x, w, b],
            Box::new(move |g, p, _, needs| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let gx = needs[0].then(|| {
                    let mut gx = vec![0.0; n * din];
                    for (grow, dst) in gd.chunks(dout).zip(gx.chunks_mut(din)) {
                        for (d, wrow) in dst.iter_mut().zip(wd.chunks(dout)) {
                            *d = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        }
                    }
                    Tensor::new(vec![n, din], gx).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; din * dout];
                    for (xrow, grow) in xd.chunks(din).zip(gd.chunks(dout)) {
                        for (xi, dst) in xrow.iter().zip(gw.chunks_mut(dout)) {
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += xi * gv;
                            }
                        }
                    }
                    Tensor::new(vec![din, dout], gw).expect("shape")
                });
                let gb = needs[2].then(|| {
                    let mut gb = vec![0.0; dout];
                    for grow in gd.chunks(dout) {
                        for (d, gv) in gb.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    Tensor::vector(gb)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Row dot products `x·w` for `x: [N, d]` and a constant `w` of length `d`.
    pub fn dot_rows(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != w.len() {
            return Err(mismatch("dot_rows", format!("x {xs:?}, w len {}", w.len())));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(w.len())
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        let w = w.to_vec();
        self.push(
            "dot_rows",
            Tensor::vector(out),
            vec![x],
            Box::new(move |g, p, _, _| {
                let mut gx = Vec::with_capacity(p[0].len());
                for gv in g.data() {
                    gx.extend(w.iter().map(|wi| wi * gv));
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx).expect("shape"))]
            }),
        )
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| mismatch("softmax", "scalar input"))?;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(softmax_slice)
            .collect();
        let out = Tensor::new(shape, out)?;
        self.push(
            "softmax",
            out,
            vec![x],
            Box::new(move |g, _, y, _| {
                let mut gx = Vec::with_capacity(y.len());
                for (s, up) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = s.iter().zip(up).map(|(a, b)| a * b).sum();
                    gx.extend(s.iter().zip(up).map(|(si, ui)| si * (ui - dot)));
                }
                vec![Some(Tensor::new(y.shape().to_vec(), gx).expect("shape"))]
            }),
        )
    }

    /// Natural log of the population variance along the last axis.
    pub fn log_variance(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let t = *shape
            .last()
            .ok_or_else(|| mismatch("log_variance", "scalar input"))?;
        if t < 2 {
            return Err(mismatch("log_variance", "need at least 2 samples per row"));
        }
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for (row, idx) in self.value(x).data().chunks(t).zip(0..) {
            let (mu, var) = mean_var(row);
            if !(var > 0.0) {
                return Err(AutodiffError::ZeroVariance { row: idx });
            }
            means.push(mu);
            vars.push(var);
        }
        let out_shape = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let out = Tensor::new(out_shape, vars.iter().map(|v| v.ln()).collect())?;
        self.push(
            "log_variance",
            out,
            vec![x],
            Box::new(move |g, p, _, _| {
                let mut gx = Vec::with_capacity(p[0].len());
                for (((row, mu), var), up) in
                    p[0].data().chunks(t).zip(&means).zip(&vars).zip(g.data())
                {
                    let s = 2.0 * up / (t as f64 * var);
                    gx.extend(row.iter().map(|v| s * (v - mu)));
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx).expect("shape"))]
            }),
        )
    }

    /// Spatial projection `Eₙ = Wᵀ Xₙ` of feature map `map` of `x: [N, K, C, T]`
    /// with a constant `w: [C, m]`, giving `[N, m, T]`.
    pub fn project_map(&mut self, x: Var, map: usize, w: &Tensor) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 2 || ws[0] != xs[2] || map >= xs[1] {
            return Err(mismatch(
                "project_map",
                format!("x {xs:?}, W {ws:?}, map {map}"),
            ));
        }
        let (n, k, c, t) = (xs[0], xs[1], xs[2], xs[3]);
        let m = ws[1];
        let wd = w.data().to_vec();
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * m * t];
        for ni in 0..n {
            let trial = &xd[(ni * k + map) * c * t..][..c * t];
            let dst = &mut out[ni * m * t..][..m * t];
            for (ci, row) in trial.chunks(t).enumerate() {
                for (i, drow) in dst.chunks_mut(t).enumerate() {
                    let wv = wd[ci * m + i];
                    for (d, xv) in drow.iter_mut().zip(row) {
                        *d += wv * xv;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, m, t], out)?;
        self.push(
            "project_map",
            out,
            vec![x],
            Box::new(move |g, p, _, _| {
                let mut gx = vec![0.0; p[0].len()];
                let gd = g.data();
                for ni in 0..n {
                    let up = &gd[ni * m * t..][..m * t];
                    let dst = &mut gx[(ni * k + map) * c * t..][..c * t];
                    for (ci, drow) in dst.chunks_mut(t).enumerate() {
                        for (i, urow) in up.chunks(t).enumerate() {
                            let wv = wd[ci * m + i];
                            for (d, u) in drow.iter_mut().zip(urow) {
                                *d += wv * u;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(p[0].shape().to_vec(), gx).expect("shape"))]
            }),
        )
    }

    /// Column concatenation of `[N, dᵢ]` inputs.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|v| self.value(*v).shape()[0])
            .ok_or_else(|| mismatch("concat_cols", "no inputs"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for v in parts {
            let s = self.value(*v).shape();
            if s.len() != 2 || s[0] != n {
                return Err(mismatch("concat_cols", format!("part {s:?} with {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (v, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        let widths2 = widths.clone();
        self.push(
            "concat_cols",
            out,
            parts.to_vec(),
            Box::new(move |g, _, _, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths2.len());
                for (w, need) in widths2.iter().zip(needs) {
                    if *need {
                        let mut part = Vec::with_capacity(n * w);
                        for row in 0..n {
                            part.extend_from_slice(&gd[row * total + offset..][..*w]);
                        }
                        res.push(Some(Tensor::new(vec![n, *w], part).expect("shape")));
                    } else {
                        res.push(None);
                    }
                    offset += w;
                }
                res
            }),
        )
    }

    /// Batch-mean binary cross-entropy `Σ_d −[y ln p + (1−y) ln(1−p)]` with
    /// `p` clamped to `[clamp, 1 − clamp]`. Clamped entries carry no gradient.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &Tensor, clamp: f64) -> Result<Var> {
        same_shape("binary_cross_entropy", self.value(p), targets)?;
        let n = self.value(p).shape()[0].max(1) as f64;
        let y = targets.data().to_vec();
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(&y)
            .map(|(pi, yi)| {
                let q = pi.clamp(clamp, 1.0 - clamp);
                -(yi * q.ln() + (1.0 - yi) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            "binary_cross_entropy",
            Tensor::scalar(loss),
            vec![p],
            Box::new(move |g, pv, _, _| {
                let s = g.item() / n;
                let gp = pv[0]
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(pi, yi)| {
                        if *pi < clamp || *pi > 1.0 - clamp {
                            0.0
                        } else {
                            s * (-yi / pi + (1.0 - yi) / (1.0 - pi))
                        }
                    })
                    .collect();
                vec![Some(
                    Tensor::new(pv[0].shape().to_vec(), gp).expect("shape"),
                )]
            }),
        )
    }

    /// Batch-mean categorical cross-entropy `−ln p[label]` for probabilities
    /// `p: [N, k]`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[u8], clamp: f64) -> Result<Var> {
        let s = self.value(p).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|l| *l as usize >= s[1]) {
            return Err(mismatch(
                "cross_entropy",
                format!("p {s:?}, {} labels", labels.len()),
            ));
        }
        let k = s[1];
        let n = s[0] as f64;
        let labels = labels.to_vec();
        let loss = self
            .value(p)
            .data()
            .chunks(k)
            .zip(&labels)
            .map(|(row, l)| -row[*l as usize].clamp(clamp, 1.0).ln())
            .sum::<f64>()
            / n;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            vec![p],
            Box::new(move |g, pv, _, _| {
                let mut gp = vec![0.0; pv[0].len()];
                for (i, (row, l)) in pv[0].data().chunks(k).zip(&labels).enumerate() {
                    let q = row[*l as usize];
                    if q >= clamp {
                        gp[i * k + *l as usize] = -g.item() / (n * q);
                    }
                }
                vec![Some(
                    Tensor::new(pv[0].shape().to_vec(), gp).expect("shape"),
                )]
            }),
        )
    }

    /// Fisher criterion `(σ²₀ + σ²₁) / (μ₀ − μ₁)²` of a projected batch, with
    /// population variances per class.
    pub fn fisher_criterion(&mut self, g: Var, labels: &[u8]) -> Result<Var> {
        let gv = self.value(g).data().to_vec();
        if gv.len() != labels.len() {
            return Err(mismatch(
                "fisher_criterion",
                format!("{} values, {} labels", gv.len(), labels.len()),
            ));
        }
        let stats = FisherStats::compute(&gv, labels)?;
        let labels = labels.to_vec();
        self.push(
            "fisher_criterion",
            Tensor::scalar(stats.value()),
            vec![g],
            Box::new(move |up, p, _, _| {
                let grad = stats.gradient(p[0].data(), &labels, up.item());
                vec![Some(
                    Tensor::new(p[0].shape().to_vec(), grad).expect("shape"),
                )]
            }),
        )
    }
}

/// Class-conditional moments of a projected batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct FisherStats {
    pub n: [f64; 2],
    pub mean: [f64; 2],
    pub var: [f64; 2],
}

impl FisherStats {
    pub fn compute(g: &[f64], labels: &[u8]) -> Result<Self> {
        let mut n = [0.0; 2];
        let mut sum = [0.0; 2];
        for (v, l) in g.iter().zip(labels) {
            let c = (*l != 0) as usize;
            n[c] += 1.0;
            sum[c] += v;
        }
        if n[0] == 0.0 || n[1] == 0.0 {
            return Err(AutodiffError::MissingClass);
        }
        let mean = [sum[0] / n[0], sum[1] / n[1]];
        let mut var = [0.0; 2];
        for (v, l) in g.iter().zip(labels) {
            let c = (*l != 0) as usize;
            var[c] += (v - mean[c]).powi(2);
        }
        var[0] /= n[0];
        var[1] /= n[1];
        if mean[0] == mean[1] {
            return Err(AutodiffError::CoincidentMeans);
        }
        Ok(Self { n, mean, var })
    }

    pub fn value(&self) -> f64 {
        (self.var[0] + self.var[1]) / (self.mean[0] - self.mean[1]).powi(2)
    }

    fn gradient(&self, g: &[f64], labels: &[u8], upstream: f64) -> Vec<f64> {
        let d = self.mean[0] - self.mean[1];
        let s = self.var[0] + self.var[1];
        g.iter()
            .zip(labels)
            .map(|(v, l)| {
                let c = (*l != 0) as usize;
                let dvar = 2.0 * (v - self.mean[c]) / self.n[c];
                let dd = if c == 0 {
                    1.0 / self.n[0]
                } else {
                    -1.0 / self.n[1]
                };
                upstream * (dvar / (d * d) - 2.0 * s / (d * d * d) * dd)
            })
            .collect()
    }
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of one plain vector.
pub fn softmax_vec(row: &[f64]) -> Vec<f64> {
    softmax_slice(row)
}

/// Value of the Fisher criterion on plain projected values.
pub fn fisher_value(g: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(FisherStats::compute(g, labels)?.value())
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}

/// Output indices `s` in `[lo, hi)` for which `s + j - pad` is in `[0, t)`.
fn valid_range(j: usize, pad: usize, t: usize) -> (usize, usize) {
    let shift = j as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((t as isize - shift).min(t as isize)).max(0) as usize;
    (lo.min(t), hi)
}

fn correlate_same(src: &[f64], w: &[f64], pad: usize, dst: &mut [f64]) {
    let t = src.len();
    for (j, wj) in w.iter().enumerate() {
        let (lo, hi) = valid_range(j, pad, t);
        if lo >= hi {
            continue;
        }
        let xs = (lo as isize + j as isize - pad as isize) as usize;
        for (d, x) in dst[lo..hi].iter_mut().zip(&src[xs..xs + (hi - lo)]) {
            *d += wj * x;
        }
    }
}
