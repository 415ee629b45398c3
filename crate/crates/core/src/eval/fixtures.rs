//! Published per-subject accuracies and method summaries, embedded so the
//! statistics suite runs without a dataset.

use serde::Deserialize;

use super::stats::{GroupSummary, StatsSummary};

const SUBJECTS_CSV: &str = include_str!("../../fixtures/subject_accuracies.csv");
const METHODS_CSV: &str = include_str!("../../fixtures/method_summaries.csv");
const TESTS_CSV: &str = include_str!("../../fixtures/published_tests.csv");
const ABLATION_CSV: &str = include_str!("../../fixtures/ablation_summaries.csv");

/// Per-subject accuracy (percent) under SD and SI-offline training.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct SubjectAccuracy {
    pub subject: u16,
    pub sd: f64,
    pub si: f64,
}

/// Summary of one method's accuracy over 54 subjects.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MethodSummary {
    pub approach: String,
    pub method: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Printed test results against the proposed model. `paired_p` is kept as
/// text since it holds entries such as `<0.001`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct PublishedTest {
    pub approach: String,
    pub method: String,
    pub paired_p: Option<String>,
    pub t: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct AblationSummary {
    pub approach: String,
    pub component: String,
    pub mean: f64,
    pub sd: f64,
}

/// Name of the proposed model in the method tables.
pub const PROPOSED: &str = "CCSPNet";
/// Method name of the ANOVA rows in [`published_tests`].
pub const ANOVA_ROW: &str = "ANOVA";

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Vec<T> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .expect("embedded fixture parses")
}

pub fn subject_accuracies() -> Vec<SubjectAccuracy> {
    parse(SUBJECTS_CSV)
}

pub fn method_summaries() -> Vec<MethodSummary> {
    parse(METHODS_CSV)
}

pub fn published_tests() -> Vec<PublishedTest> {
    parse(TESTS_CSV)
}

pub fn ablation_summaries() -> Vec<AblationSummary> {
    parse(ABLATION_CSV)
}

impl MethodSummary {
    pub fn group(&self) -> GroupSummary {
        GroupSummary::new(self.method.clone(), self.mean, self.sd, self.n)
    }
}

/// All method summaries of one approach (`"SD"` or `"SI"`).
pub fn approach_groups(approach: &str) -> StatsSummary {
    StatsSummary {
        groups: method_summaries()
            .iter()
            .filter(|m| m.approach == approach)
            .map(MethodSummary::group)
            .collect(),
    }
}

/// SD group set whose one-way ANOVA matches the printed `F(8, 477)`: the
/// eight SD baselines with the proposed model's SI summary in place of its
/// SD summary.
pub fn printed_sd_anova_groups() -> StatsSummary {
    let si_proposed = method_summaries()
        .into_iter()
        .find(|m| m.approach == "SI" && m.method == PROPOSED)
        .expect("fixture row");
    let mut set = approach_groups("SD");
    for g in &mut set.groups {
        if g.name == PROPOSED {
            g.mean = si_proposed.mean;
            g.sd = si_proposed.sd;
        }
    }
    set
}
