//! t-tests, one-way ANOVA and descriptive statistics.
//!
//! Tail probabilities come from the regularized incomplete beta function,
//! evaluated with a Lentz continued fraction.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} values, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("variance is zero; statistic undefined")]
    ZeroVariance,
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("invalid summary: {0}")]
    InvalidSummary(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0`, `x ∈ [0, 1]`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `P(F > f)` for the F distribution with `(d1, d2)` degrees of freedom.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// A t statistic with both tail conventions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Upper-tail `P(T > t)`.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

impl TTest {
    fn new(t: f64, df: f64) -> Self {
        let upper = student_t_sf(t, df);
        let two = (2.0 * student_t_sf(t.abs(), df)).min(1.0);
        Self {
            t,
            df,
            p_one_sided: upper,
            p_two_sided: two,
        }
    }
}

/// Paired t-test on equal-length samples, `df = N − 1`. Identical samples
/// give `t = 0, p = 1`.
pub fn paired_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFewSamples {
            needed: 2,
            got: a.len(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|v| *v == 0.0) {
        return Ok(TTest {
            t: 0.0,
            df: (d.len() - 1) as f64,
            p_one_sided: 0.5,
            p_two_sided: 1.0,
        });
    }
    let s = summarize(&d)?;
    if s.sd == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let n = d.len() as f64;
    Ok(TTest::new(s.mean / (s.sd / n.sqrt()), n - 1.0))
}

/// Summary of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl GroupSummary {
    pub fn new(name: impl Into<String>, mean: f64, sd: f64, n: usize) -> Self {
        Self {
            name: name.into(),
            mean,
            sd,
            n,
        }
    }

    pub fn from_samples(name: impl Into<String>, values: &[f64]) -> Result<Self> {
        let s = summarize(values)?;
        Ok(Self::new(name, s.mean, s.sd, s.n))
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(StatsError::InvalidSummary(format!(
                "{}: n = {} < 2",
                self.name, self.n
            )));
        }
        if !(self.sd >= 0.0) || !self.mean.is_finite() {
            return Err(StatsError::InvalidSummary(format!(
                "{}: mean {} sd {}",
                self.name, self.mean, self.sd
            )));
        }
        Ok(())
    }
}

/// Group summaries for one comparison family.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsSummary {
    pub groups: Vec<GroupSummary>,
}

/// Unpaired t from summaries, `t = (m₁ − m₂)/√(s₁²/n₁ + s₂²/n₂)` with
/// `df = n₁ + n₂ − 2`.
pub fn unpaired_t_from_summary(g1: &GroupSummary, g2: &GroupSummary) -> Result<TTest> {
    g1.validate()?;
    g2.validate()?;
    let se2 = g1.sd * g1.sd / g1.n as f64 + g2.sd * g2.sd / g2.n as f64;
    if se2 == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok(TTest::new(
        (g1.mean - g2.mean) / se2.sqrt(),
        (g1.n + g2.n - 2) as f64,
    ))
}

pub fn unpaired_t(a: &[f64], b: &[f64]) -> Result<TTest> {
    unpaired_t_from_summary(
        &GroupSummary::from_samples("a", a)?,
        &GroupSummary::from_samples("b", b)?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anova {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
}

/// One-way ANOVA from group means, SDs and sizes.
pub fn anova_from_summary(summary: &StatsSummary) -> Result<Anova> {
    let groups = &summary.groups;
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups(groups.len()));
    }
    for g in groups {
        g.validate()?;
    }
    let n_total: usize = groups.iter().map(|g| g.n).sum();
    let grand = groups.iter().map(|g| g.mean * g.n as f64).sum::<f64>() / n_total as f64;
    let ss_between: f64 = groups
        .iter()
        .map(|g| g.n as f64 * (g.mean - grand).powi(2))
        .sum();
    let ss_within: f64 = groups.iter().map(|g| (g.n - 1) as f64 * g.sd * g.sd).sum();
    if ss_within == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let df_between = groups.len() - 1;
    let df_within = n_total - groups.len();
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    Ok(Anova {
        f,
        p: f_sf(f, df_between as f64, df_within as f64),
        df_between,
        df_within,
    })
}

/// One-way ANOVA on raw samples.
pub fn anova(groups: &[&[f64]]) -> Result<Anova> {
    let summary = StatsSummary {
        groups: groups
            .iter()
            .enumerate()
            .map(|(i, g)| GroupSummary::from_samples(format!("group{i}"), g))
            .collect::<Result<_>>()?,
    };
    anova_from_summary(&summary)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub sd: f64,
    pub median: f64,
    pub range: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(StatsError::TooFewSamples { needed: 1, got: 0 });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 0 {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    } else {
        sorted[n / 2]
    };
    let (min, max) = (sorted[0], sorted[n - 1]);
    Ok(Summary {
        n,
        mean,
        sd,
        median,
        range: max - min,
        min,
        max,
    })
}
