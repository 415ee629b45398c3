//! Independent oracles for the filters, CSP, LDA and statistics.

mod common;

use std::f64::consts::PI;

use ccspnet::csp::{self, solve_csp};
use ccspnet::data::{self, Phase, PreprocessConfig, TrialSet};
use ccspnet::dsp::{design_bandpass, stft};
use ccspnet::eval::fixtures;
use ccspnet::eval::stats::{self, GroupSummary};
use ccspnet::lda::{fisher_criterion, LdaModel};
use common::{f_sf_quadrature, ln_gamma_half_integer, random_spd, rng, simpson, t_sf_quadrature};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn csp_residual_on_random_spd_pairs() {
    let mut r = rng(1);
    for case in 0..100 {
        let c = r.random_range(2..=16);
        let s0 = random_spd(c, &mut r);
        let s1 = random_spd(c, &mut r);
        let sol = solve_csp(&s0, &s1).unwrap();
        let composite = &s0 + &s1;
        for i in 0..c {
            let w = sol.w.column(i);
            let lhs = &s0 * w;
            let rhs = &composite * w * sol.eigenvalues[i];
            let res = (lhs - rhs).norm();
            assert!(res < 1e-8, "case {case} C={c} column {i}: residual {res:e}");
        }
        let white = sol.w.transpose() * &composite * &sol.w;
        let off = (white - DMatrix::identity(c, c)).abs().max();
        assert!(off < 1e-8, "case {case}: whitening error {off:e}");
    }
}

#[test]
fn reduced_projection_keeps_unit_whitening() {
    let mut r = rng(2);
    for _ in 0..20 {
        let c = r.random_range(4..=16);
        let (s0, s1) = (random_spd(c, &mut r), random_spd(c, &mut r));
        let sol = solve_csp(&s0, &s1).unwrap();
        let w_r = csp::reduce_projection(&sol.w).unwrap();
        let white = w_r.transpose() * (&s0 + &s1) * &w_r;
        for i in 0..csp::N_FILTERS {
            assert!((white[(i, i)] - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn csp_features_recover_planted_variances() {
    // X = W⁻ᵀ S gives Wᵀ X = S, so the features are the log-variances of S's rows.
    let mut r = rng(3);
    let (c, t) = (6, 200);
    let (s0, s1) = (random_spd(c, &mut r), random_spd(c, &mut r));
    let sol = solve_csp(&s0, &s1).unwrap();
    let w_r = csp::reduce_projection(&sol.w).unwrap();
    let sources = DMatrix::from_fn(c, t, |_, _| r.sample::<f64, _>(StandardNormal));
    let x = sol.w.transpose().try_inverse().unwrap() * &sources;
    let trial: Vec<f64> = x.transpose().iter().copied().collect();
    let feats = csp::spatial_filter_features(std::iter::once(trial.as_slice()), &w_r, t).unwrap();
    let var = |row: usize| {
        let v: Vec<f64> = sources.row(row).iter().copied().collect();
        let m = v.iter().sum::<f64>() / t as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (t - 1) as f64
    };
    for (k, row) in [0, 1, c - 2, c - 1].into_iter().enumerate() {
        let expect = var(row).ln();
        assert!(
            (feats[k] - expect).abs() < 1e-2,
            "feature {k}: {} vs {expect}",
            feats[k]
        );
    }
}

fn separable_set(r: &mut impl Rng, dim: usize, per_class: usize) -> (Vec<f64>, Vec<u8>) {
    let shift: Vec<f64> = (0..dim).map(|_| r.random_range(-2.0..2.0)).collect();
    let scales: Vec<f64> = (0..dim).map(|_| r.random_range(0.3..2.0)).collect();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2u8 {
        for _ in 0..per_class {
            for d in 0..dim {
                let noise: f64 = r.sample(StandardNormal);
                feats.push(noise * scales[d] + class as f64 * shift[d]);
            }
            labels.push(class);
        }
    }
    (feats, labels)
}

fn project(feats: &[f64], dim: usize, w: &[f64]) -> Vec<f64> {
    feats
        .chunks(dim)
        .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect()
}

#[test]
fn lda_direction_beats_random_directions() {
    let mut r = rng(4);
    let dim = 4;
    for case in 0..100 {
        let (feats, labels) = separable_set(&mut r, dim, 20);
        let lda = LdaModel::fit(&feats, dim, &labels).unwrap();
        let j_lda = fisher_criterion(&project(&feats, dim, &lda.w), &labels).unwrap();
        for _ in 0..50 {
            let mut u: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= n);
            let j = fisher_criterion(&project(&feats, dim, &u), &labels).unwrap();
            assert!(
                j_lda <= j * (1.0 + 1e-9),
                "case {case}: LDA J {j_lda} > random J {j}"
            );
        }
    }
}

#[test]
fn butterworth_band_edges_are_half_power() {
    for (low, high, order, fs) in [
        (8.0, 30.0, 5, 100.0),
        (8.0, 30.0, 4, 250.0),
        (4.0, 40.0, 3, 1000.0),
        (12.0, 20.0, 6, 128.0),
    ] {
        let bp = design_bandpass(low, high, order, fs).unwrap();
        for edge in [low, high] {
            let m = bp.magnitude_at(edge);
            assert!(
                (m - 0.5f64.sqrt()).abs() < 0.05,
                "({low},{high},{order},{fs}) edge {edge}: {m}"
            );
        }
        let centre = bp.magnitude_at((low * high as f64).sqrt());
        assert!((centre - 1.0).abs() < 0.01, "centre {centre}");
    }
}

#[test]
fn impulse_energy_matches_parseval() {
    for (low, high, order, fs) in [(8.0, 30.0, 5, 100.0), (8.0, 30.0, 2, 250.0)] {
        let bp = design_bandpass(low, high, order, fs).unwrap();
        let mut impulse = vec![0.0; 8192];
        impulse[0] = 1.0;
        let h = bp.filter(&impulse).unwrap();
        let energy: f64 = h.iter().map(|x| x * x).sum();
        // (1/2π)∫_{-π}^{π} |H(ω)|² dω with ω = 2πf/fs.
        let integral = simpson(|f| bp.magnitude_at(f).powi(2), 0.0, fs / 2.0, 20_000) * 2.0 / fs;
        assert!(
            (energy - integral).abs() < 1e-3,
            "energy {energy} vs {integral}"
        );
    }
}

#[test]
fn stft_two_tones_give_two_peaks() {
    let fs = 100.0;
    let signal: Vec<f64> = (0..400)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * PI * 10.0 * t).sin() + 0.7 * (2.0 * PI * 25.0 * t).sin()
        })
        .collect();
    let spec = stft(&signal, 100, 20, fs).unwrap();
    for j in 0..spec.n_frames() {
        let frame = spec.frame(j);
        let top = frame.iter().cloned().fold(0.0, f64::max);
        let peaks: Vec<f64> = (1..frame.len() - 1)
            .filter(|&k| {
                frame[k] > frame[k - 1] && frame[k] > frame[k + 1] && frame[k] > 1e-6 * top
            })
            .map(|k| spec.freqs_hz[k])
            .collect();
        assert_eq!(peaks, vec![10.0, 25.0], "frame {j}");
    }
}

fn single_channel_set(signal: Vec<f64>, fs: f64) -> TrialSet {
    let t = signal.len();
    let samples = signal.into_iter().map(|x| x as f32).collect();
    TrialSet::new(
        samples,
        1,
        t,
        vec![0],
        vec![1],
        vec![1],
        vec![Phase::Offline],
        fs,
    )
    .unwrap()
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[test]
fn preprocessing_removes_mains() {
    let fs = 1000.0;
    let tone: Vec<f64> = (0..4000)
        .map(|i| (2.0 * PI * 50.0 * i as f64 / fs).sin())
        .collect();
    let input_power = power(&tone[1000..3500]);
    let out =
        data::preprocess(&single_channel_set(tone, fs), &PreprocessConfig::default()).unwrap();
    let ratio = power(&out.trial_f64(0)) / input_power;
    assert!(ratio < 0.01, "50 Hz power ratio {ratio}");
}

#[test]
fn band_pass_is_nearly_idempotent_in_band() {
    let fs = 1000.0;
    let tone: Vec<f64> = (0..4000)
        .map(|i| (2.0 * PI * 15.0 * i as f64 / fs).sin())
        .collect();
    let cfg = PreprocessConfig::default();
    let once = data::preprocess(&single_channel_set(tone, fs), &cfg)
        .unwrap()
        .trial_f64(0);
    let bp = design_bandpass(
        cfg.band_hz.0,
        cfg.band_hz.1,
        cfg.filter_order,
        cfg.target_hz,
    )
    .unwrap();
    let twice = bp.filter(&once).unwrap();
    // Steady state: the first second holds the start-up transient of each pass.
    let rms = |x: &[f64]| power(&x[100..]).sqrt();
    let change = (rms(&twice) - rms(&once)).abs() / rms(&once);
    assert!(change < 0.01, "RMS change {change}");
}

#[test]
fn t_tail_matches_quadrature() {
    for df in [1.0, 2.0, 5.0, 17.0, 53.0, 106.0] {
        for t in [0.0, 0.3, 1.0, 1.7679, 2.6621, 4.0] {
            let exact = stats::student_t_sf(t, df);
            let quad = t_sf_quadrature(t, df);
            assert!(
                (exact - quad).abs() < 1e-6,
                "df {df} t {t}: {exact} vs {quad}"
            );
        }
    }
}

#[test]
fn f_tail_matches_quadrature() {
    for (d1, d2) in [
        (2.0, 10.0),
        (5.0, 318.0),
        (8.0, 477.0),
        (3.0, 7.0),
        (2.0, 2.0),
    ] {
        for f in [0.2, 1.0, 1.6945, 2.97, 6.0] {
            let exact = stats::f_sf(f, d1, d2);
            let quad = f_sf_quadrature(f, d1, d2);
            assert!(
                (exact - quad).abs() < 1e-6,
                "F({d1},{d2}) at {f}: {exact} vs {quad}"
            );
        }
    }
}

#[test]
fn incomplete_beta_matches_quadrature() {
    for (a, b) in [(1.0, 1.0), (2.5, 1.5), (4.0, 26.5), (1.5, 8.0), (10.0, 3.5)] {
        let ln_b =
            ln_gamma_half_integer(a) + ln_gamma_half_integer(b) - ln_gamma_half_integer(a + b);
        // u = s² removes the endpoint singularity for a < 1 + ½.
        let integrand = |s: f64| {
            if s <= 0.0 {
                return if a == 0.5 { 2.0 * (-ln_b).exp() } else { 0.0 };
            }
            2.0 * ((2.0 * a - 1.0) * s.ln() + (b - 1.0) * (1.0 - s * s).ln() - ln_b).exp()
        };
        for x in [0.05, 0.3, 0.5, 0.8, 0.97] {
            let quad = simpson(integrand, 0.0, f64::sqrt(x), 100_000);
            let exact = stats::regularized_incomplete_beta(a, b, x);
            assert!(
                (exact - quad).abs() < 1e-8,
                "I_{x}({a},{b}): {exact} vs {quad}"
            );
        }
    }
}

#[test]
fn ln_gamma_matches_recurrence() {
    for twice in 1..60 {
        let x = twice as f64 / 2.0;
        assert!(
            (stats::ln_gamma(x) - ln_gamma_half_integer(x)).abs() < 1e-10,
            "x = {x}"
        );
    }
}

#[test]
fn subject_table_summaries_match_print() {
    let rows = fixtures::subject_accuracies();
    let sd: Vec<f64> = rows.iter().map(|r| r.sd).collect();
    let si: Vec<f64> = rows.iter().map(|r| r.si).collect();
    for (values, mean, sdev, median, range, min, max) in [
        (&sd, 74.41, 16.75, 68.5, 53.0, 47.0, 100.0),
        (&si, 74.28, 16.12, 73.0, 51.0, 49.0, 100.0),
    ] {
        let s = stats::summarize(values).unwrap();
        assert_eq!(s.n, 54);
        assert!((s.mean - mean).abs() <= 0.005, "mean {}", s.mean);
        assert!((s.sd - sdev).abs() <= 0.005, "sd {}", s.sd);
        assert_eq!((s.median, s.range, s.min, s.max), (median, range, min, max));
    }
}

#[test]
fn method_table_matches_printed_tests() {
    // Printed p is two-sided on these rows, one-sided elsewhere.
    const TWO_SIDED: [(&str, &str); 3] =
        [("SD", "MIN2NET"), ("SD", "Molla et al."), ("SI", "MIN2Net")];
    // Printed t or p disagrees with the row's own summaries.
    const INCONSISTENT: [(&str, &str); 2] = [("SI", "MR FBCSP"), ("SD", "Kwon et al.")];
    let methods = fixtures::method_summaries();
    let group = |approach: &str, method: &str| -> GroupSummary {
        methods
            .iter()
            .find(|m| m.approach == approach && m.method == method)
            .unwrap()
            .group()
    };
    let mut checked = 0;
    for row in fixtures::published_tests() {
        let key = (row.approach.as_str(), row.method.as_str());
        if row.method == fixtures::ANOVA_ROW || INCONSISTENT.contains(&key) {
            continue;
        }
        let test = stats::unpaired_t_from_summary(
            &group(&row.approach, fixtures::PROPOSED),
            &group(&row.approach, &row.method),
        )
        .unwrap();
        let p = if TWO_SIDED.contains(&key) {
            test.p_two_sided
        } else {
            test.p_one_sided
        };
        assert!(
            (test.t - row.t).abs() <= 0.001,
            "{} {}: t {} vs {}",
            row.approach,
            row.method,
            test.t,
            row.t
        );
        assert!(
            (p - row.p).abs() <= 0.002,
            "{} {}: p {p} vs {}",
            row.approach,
            row.method,
            row.p
        );
        checked += 1;
    }
    assert_eq!(checked, 11);
}

#[test]
fn anova_matches_printed_rows() {
    let si = stats::anova_from_summary(&fixtures::approach_groups("SI")).unwrap();
    assert_eq!((si.df_between, si.df_within), (5, 318));
    assert!(
        (si.f - 2.97).abs() <= 0.005 && (si.p - 0.0123).abs() <= 0.02,
        "{si:?}"
    );
    let sd = stats::anova_from_summary(&fixtures::printed_sd_anova_groups()).unwrap();
    assert_eq!((sd.df_between, sd.df_within), (8, 477));
    assert!(
        (sd.f - 1.6945).abs() <= 0.005 && (sd.p - 0.0972).abs() <= 0.02,
        "{sd:?}"
    );
}

#[test]
fn unpaired_from_samples_matches_from_summary() {
    let mut r = rng(5);
    let a: Vec<f64> = (0..30).map(|_| r.random_range(40.0..100.0)).collect();
    let b: Vec<f64> = (0..30).map(|_| r.random_range(35.0..95.0)).collect();
    let direct = stats::unpaired_t(&a, &b).unwrap();
    let via = stats::unpaired_t_from_summary(
        &GroupSummary::from_samples("a", &a).unwrap(),
        &GroupSummary::from_samples("b", &b).unwrap(),
    )
    .unwrap();
    assert!((direct.t - via.t).abs() < 1e-12);
    let anova = stats::anova(&[&a, &b]).unwrap();
    assert!((direct.t.powi(2) - anova.f).abs() < 1e-9);
    assert!((direct.p_two_sided - anova.p).abs() < 1e-9);
}
