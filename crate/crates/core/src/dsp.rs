//! Signal-processing primitives used by the pre-processing pipeline and the
//! wavelet layer.
//!
//! Butterworth filters are designed from the analog prototype, moved to the
//! target band in the s-plane, mapped with the bilinear transform using
//! pre-warped edges and finally factored into second-order sections. All
//! filtering is causal and single pass (direct form II transposed).

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid filter design: {0}")]
    InvalidDesign(String),
    #[error("non-finite input sample at index {index}")]
    NonFinite { index: usize },
    #[error("empty signal")]
    Empty,
    #[error("window {start_ms}..{end_ms} ms exceeds trial duration of {duration_ms} ms")]
    WindowOutOfRange {
        start_ms: f64,
        end_ms: f64,
        duration_ms: f64,
    },
    #[error("sample rate {fs} Hz cannot be decimated to {target} Hz by an integer factor")]
    BadDecimation { fs: f64, target: f64 },
    #[error("invalid wavelet parameters: {0}")]
    InvalidWavelet(String),
    #[error("invalid STFT parameters: {0}")]
    InvalidStft(String),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Biquad coefficients, normalized so that `a0 == 1`.
///
/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex response at normalized angular frequency `omega` (rad/sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        let num = self.b0 + z1 * self.b1 + z2 * self.b2;
        let den = 1.0 + z1 * self.a1 + z2 * self.a2;
        num / den
    }

    /// Magnitudes of the poles (roots of `z^2 + a1 z + a2`).
    pub fn pole_radii(&self) -> [f64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (-self.a1 + disc) / 2.0;
        let p2 = (-self.a1 - disc) / 2.0;
        [p1.norm(), p2.norm()]
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radii().iter().all(|r| *r < 1.0)
    }
}

/// A cascade of second-order sections together with its design parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    /// `(low_hz, high_hz)`; low-pass designs store `(0, cutoff)`.
    pub design_band: (f64, f64),
    pub order: usize,
    pub sample_rate_hz: f64,
}

impl BiquadCascade {
    pub fn response_at(&self, freq_hz: f64) -> Complex64 {
        let omega = 2.0 * PI * freq_hz / self.sample_rate_hz;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(omega))
    }

    pub fn magnitude_at(&self, freq_hz: f64) -> f64 {
        self.response_at(freq_hz).norm()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Causal single-pass filtering of one channel.
    pub fn filter(&self, signal: &[f64]) -> Result<Vec<f64>> {
        filter_forward(self, signal)
    }
}

fn prewarp(freq_hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * freq_hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

fn butterworth_prototype(order: usize) -> Vec<Complex64> {
    (0..order)
        .map(|k| {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

/// Groups digital poles into conjugate pairs (or pairs of real poles) and
/// returns the denominator coefficients `(a1, a2)` per pair. An odd real pole
/// is returned as a first-order denominator `(a1, 0)`.
fn pair_poles(poles: &[Complex64]) -> Vec<(f64, f64)> {
    const IMAG_TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IMAG_TOL).collect();
    let mut real: Vec<f64> = poles
        .iter()
        .filter(|p| p.im.abs() <= IMAG_TOL)
        .map(|p| p.re)
        .collect();
    // Deterministic ordering: poles nearest the unit circle last.
    complex.sort_by(|a, b| {
        a.norm()
            .total_cmp(&b.norm())
            .then(a.arg().total_cmp(&b.arg()))
    });
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));

    let mut out: Vec<(f64, f64)> = complex
        .iter()
        .map(|p| (-2.0 * p.re, p.norm_sqr()))
        .collect();
    let mut it = real.chunks(2);
    for chunk in &mut it {
        match chunk {
            [a, b] => out.push((-(a + b), a * b)),
            [a] => out.push((-a, 0.0)),
            _ => unreachable!(),
        }
    }
    out
}

fn normalize_section(mut sec: Biquad, omega: f64) -> Biquad {
    let g = sec.response(omega).norm();
    sec.b0 /= g;
    sec.b1 /= g;
    sec.b2 /= g;
    sec
}

/// Order-`order` Butterworth band-pass (`2·order` poles) as a biquad cascade.
pub fn design_bandpass(low_hz: f64, high_hz: f64, order: usize, fs: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(DspError::InvalidDesign("order must be at least 1".into()));
    }
    if !(fs > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(DspError::InvalidDesign(format!(
            "band edges must satisfy 0 < {low_hz} < {high_hz} < Nyquist ({})",
            fs / 2.0
        )));
    }
    let w1 = prewarp(low_hz, fs);
    let w2 = prewarp(high_hz, fs);
    let w0_sq = w1 * w2;
    let bw = w2 - w1;

    let mut digital = Vec::with_capacity(2 * order);
    for p in butterworth_prototype(order) {
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            digital.push(bilinear(s, fs));
        }
    }

    // Normalize each section at the digital image of the analog centre.
    let centre = (w0_sq.sqrt() / (2.0 * fs)).atan() * 2.0;
    let sections = pair_poles(&digital)
        .into_iter()
        .map(|(a1, a2)| {
            // One zero at z = 1 (s = 0) and one at z = -1 (s = inf).
            normalize_section(
                Biquad {
                    b0: 1.0,
                    b1: 0.0,
                    b2: -1.0,
                    a1,
                    a2,
                },
                centre,
            )
        })
        .collect();

    Ok(BiquadCascade {
        sections,
        design_band: (low_hz, high_hz),
        order,
        sample_rate_hz: fs,
    })
}

/// Order-`order` Butterworth low-pass as a biquad cascade with unit DC gain.
pub fn design_lowpass(cutoff_hz: f64, order: usize, fs: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(DspError::InvalidDesign("order must be at least 1".into()));
    }
    if !(fs > 0.0 && cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(DspError::InvalidDesign(format!(
            "cutoff must satisfy 0 < {cutoff_hz} < Nyquist ({})",
            fs / 2.0
        )));
    }
    let wc = prewarp(cutoff_hz, fs);
    let digital: Vec<Complex64> = butterworth_prototype(order)
        .into_iter()
        .map(|p| bilinear(p * wc, fs))
        .collect();
    let sections = pair_poles(&digital)
        .into_iter()
        .map(|(a1, a2)| {
            let sec = if a2 == 0.0 {
                Biquad {
                    b0: 1.0,
                    b1: 1.0,
                    b2: 0.0,
                    a1,
                    a2,
                }
            } else {
                Biquad {
                    b0: 1.0,
                    b1: 2.0,
                    b2: 1.0,
                    a1,
                    a2,
                }
            };
            normalize_section(sec, 0.0)
        })
        .collect();
    Ok(BiquadCascade {
        sections,
        design_band: (0.0, cutoff_hz),
        order,
        sample_rate_hz: fs,
    })
}

/// Causal direct-form-II-transposed filtering; output has the input's length.
pub fn filter_forward(cascade: &BiquadCascade, signal: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(DspError::Empty);
    }
    if let Some(index) = signal.iter().position(|x| !x.is_finite()) {
        return Err(DspError::NonFinite { index });
    }
    let mut out = signal.to_vec();
    for s in &cascade.sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for x in out.iter_mut() {
            let input = *x;
            let y = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * y + z2;
            z2 = s.b2 * input - s.a2 * y;
            *x = y;
        }
    }
    Ok(out)
}

/// Order of the anti-alias low-pass applied before decimation.
pub const ANTI_ALIAS_ORDER: usize = 24;

/// Extracts `window_ms` from a channel-major `C×T` trial sampled at `fs_hz`,
/// then decimates every channel to `target_hz` after an anti-alias low-pass
/// at `0.4·target_hz`. Returns the `C×T'` samples and `T'`.
pub fn trim_and_downsample(
    trial: &[f64],
    n_channels: usize,
    fs_hz: f64,
    window_ms: (f64, f64),
    target_hz: f64,
) -> Result<(Vec<f64>, usize)> {
    if n_channels == 0 || trial.is_empty() || trial.len() % n_channels != 0 {
        return Err(DspError::Empty);
    }
    let n_times = trial.len() / n_channels;
    let duration_ms = n_times as f64 * 1000.0 / fs_hz;
    let (start_ms, end_ms) = window_ms;
    if start_ms < 0.0 || end_ms <= start_ms || end_ms > duration_ms + 1e-9 {
        return Err(DspError::WindowOutOfRange {
            start_ms,
            end_ms,
            duration_ms,
        });
    }
    let ratio = fs_hz / target_hz;
    let factor = ratio.round() as usize;
    if factor == 0 || (ratio - factor as f64).abs() > 1e-9 {
        return Err(DspError::BadDecimation {
            fs: fs_hz,
            target: target_hz,
        });
    }
    let start = (start_ms * fs_hz / 1000.0).round() as usize;
    let end = (end_ms * fs_hz / 1000.0).round() as usize;
    let window_len = end - start;
    let out_len = window_len / factor;

    let anti_alias = if factor > 1 {
        Some(design_lowpass(0.4 * target_hz, ANTI_ALIAS_ORDER, fs_hz)?)
    } else {
        None
    };

    let mut out = Vec::with_capacity(n_channels * out_len);
    for ch in 0..n_channels {
        let row = &trial[ch * n_times + start..ch * n_times + end];
        match &anti_alias {
            None => out.extend_from_slice(row),
            Some(lp) => {
                let smoothed = lp.filter(row)?;
                out.extend(smoothed.iter().step_by(factor).take(out_len));
            }
        }
    }
    Ok((out, out_len))
}

/// Parameters of a real Morlet kernel `cos(2π f t)·exp(-c t² / h²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MorletParams {
    /// Centre frequency in Hz.
    pub f: f64,
    /// Gaussian full width at half maximum in seconds.
    pub h: f64,
    /// Gaussian exponent coefficient.
    pub c: f64,
    pub kernel_len: usize,
    pub fs: f64,
}

pub const MORLET_MIN_FREQ: f64 = 8.0;
pub const MORLET_MAX_FREQ: f64 = 30.0;
pub const MORLET_MIN_WIDTH: f64 = 1e-3;

impl MorletParams {
    /// Projects `f` into `[8, 30]` Hz and `h` to at least `1e-3` s.
    pub fn clamp(&mut self) {
        self.f = self.f.clamp(MORLET_MIN_FREQ, MORLET_MAX_FREQ);
        self.h = self.h.max(MORLET_MIN_WIDTH);
    }

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(DspError::InvalidWavelet(format!(
                "width h must be positive, got {}",
                self.h
            )));
        }
        if self.kernel_len == 0 || !(self.fs > 0.0) {
            return Err(DspError::InvalidWavelet(
                "kernel length and sample rate must be positive".into(),
            ));
        }
        if !(self.f.is_finite() && self.c.is_finite()) {
            return Err(DspError::InvalidWavelet("non-finite f or c".into()));
        }
        Ok(())
    }
}

/// Centred sample times: indices `-⌊k/2⌋ ..= ⌈k/2⌉-1` divided by `fs`.
pub fn morlet_times(kernel_len: usize, fs: f64) -> Vec<f64> {
    let half = (kernel_len / 2) as f64;
    (0..kernel_len).map(|n| (n as f64 - half) / fs).collect()
}

pub fn build_morlet(params: &MorletParams) -> Result<Vec<f64>> {
    params.validate()?;
    let h2 = params.h * params.h;
    Ok(morlet_times(params.kernel_len, params.fs)
        .into_iter()
        .map(|t| (2.0 * PI * params.f * t).cos() * (-params.c * t * t / h2).exp())
        .collect())
}

/// Gradient of a scalar loss with respect to the three wavelet parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MorletGradient {
    pub df: f64,
    pub dh: f64,
    pub dc: f64,
}

/// Analytic partials of the kernel contracted with `upstream` (dL/dw).
pub fn morlet_gradients(params: &MorletParams, upstream: &[f64]) -> Result<MorletGradient> {
    params.validate()?;
    if upstream.len() != params.kernel_len {
        return Err(DspError::InvalidWavelet(format!(
            "upstream adjoint has length {}, kernel has {}",
            upstream.len(),
            params.kernel_len
        )));
    }
    let (f, h, c) = (params.f, params.h, params.c);
    let h2 = h * h;
    let mut g = MorletGradient::default();
    for (t, up) in morlet_times(params.kernel_len, params.fs)
        .into_iter()
        .zip(upstream)
    {
        let phase = 2.0 * PI * f * t;
        let gauss = (-c * t * t / h2).exp();
        let cosv = phase.cos();
        g.df += up * (-2.0 * PI * t * phase.sin() * gauss);
        g.dc += up * (cosv * gauss * (-t * t / h2));
        g.dh += up * (cosv * gauss * (2.0 * c * t * t / (h2 * h)));
    }
    Ok(g)
}

/// Magnitude grid of a Hann-windowed short-time Fourier transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// `magnitudes[bin][frame]`.
    pub magnitudes: Vec<Vec<f64>>,
    pub freqs_hz: Vec<f64>,
    /// Centre time of each frame in seconds.
    pub times_s: Vec<f64>,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn n_frames(&self) -> usize {
        self.times_s.len()
    }

    pub fn frame(&self, j: usize) -> Vec<f64> {
        self.magnitudes.iter().map(|row| row[j]).collect()
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn stft(signal: &[f64], window_len: usize, hop: usize, fs: f64) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(DspError::InvalidStft("hop must be positive".into()));
    }
    if window_len == 0 || window_len > signal.len() {
        return Err(DspError::InvalidStft(format!(
            "window length {window_len} must be in 1..={}",
            signal.len()
        )));
    }
    let window = hann(window_len);
    let n_bins = window_len / 2 + 1;
    let n_frames = (signal.len() - window_len) / hop + 1;
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let mut magnitudes = vec![vec![0.0; n_frames]; n_bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    let mut times_s = Vec::with_capacity(n_frames);
    for j in 0..n_frames {
        let start = j * hop;
        for (b, (x, w)) in buf
            .iter_mut()
            .zip(signal[start..start + window_len].iter().zip(&window))
        {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, row) in magnitudes.iter_mut().enumerate() {
            row[j] = buf[k].norm();
        }
        times_s.push((start as f64 + window_len as f64 / 2.0) / fs);
    }
    let freqs_hz = (0..n_bins)
        .map(|k| k as f64 * fs / window_len as f64)
        .collect();
    Ok(Spectrogram {
        magnitudes,
        freqs_hz,
        times_s,
    })
}
