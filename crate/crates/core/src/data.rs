//! Trial storage, pre-processing, subject splits and a synthetic ERD/ERS
//! generator.
//!
//! Trials live on disk as flat little-endian `EEGT` files (one per subject)
//! indexed by a TOML manifest. Samples are stored as `f32` and widened to
//! `f64` for computation.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{design_bandpass, trim_and_downsample, DspError};

pub const TRIAL_MAGIC: &[u8; 4] = b"EEGT";
pub const TRIAL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
const RECORD_HEADER_BYTES: u64 = 13;
const FILE_HEADER_BYTES: u64 = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: corrupt trial file: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("{path}: unknown phase tag {tag}")]
    UnknownPhase { path: PathBuf, tag: u8 },
    #[error("{path}: label {label} is not 0 or 1")]
    BadLabel { path: PathBuf, label: u8 },
    #[error("no trials in block session {session} / {phase}")]
    MissingBlock { session: u8, phase: Phase },
    #[error("subject {0} is not in the dataset")]
    UnknownSubject(u16),
    #[error("need at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("SNR must be positive, got {0}")]
    InvalidSnr(f64),
    #[error("synthesis needs at least 4 channels, got {0}")]
    TooFewChannels(usize),
    #[error("inconsistent trial set: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Offline => 0,
            Phase::Online => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Phase::Offline),
            1 => Some(Phase::Online),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        })
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "offline" => Ok(Phase::Offline),
            "online" => Ok(Phase::Online),
            other => Err(format!(
                "unknown phase '{other}' (expected offline or online)"
            )),
        }
    }
}

/// The four recording blocks in protocol order.
pub const BLOCKS: [(u8, Phase); 4] = [
    (1, Phase::Offline),
    (1, Phase::Online),
    (2, Phase::Offline),
    (2, Phase::Online),
];

/// A batch of `N × C × T` trials with labels and recording tags.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    samples: Vec<f32>,
    pub n_channels: usize,
    pub n_times: usize,
    pub labels: Vec<u8>,
    pub subject_ids: Vec<u16>,
    pub sessions: Vec<u8>,
    pub phases: Vec<Phase>,
    pub sample_rate_hz: f64,
}

impl TrialSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        samples: Vec<f32>,
        n_channels: usize,
        n_times: usize,
        labels: Vec<u8>,
        subject_ids: Vec<u16>,
        sessions: Vec<u8>,
        phases: Vec<Phase>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        let n = labels.len();
        if samples.len() != n * n_channels * n_times {
            return Err(DataError::Inconsistent(format!(
                "{} samples for {n} trials of {n_channels}×{n_times}",
                samples.len()
            )));
        }
        if subject_ids.len() != n || sessions.len() != n || phases.len() != n {
            return Err(DataError::Inconsistent(
                "tag vectors differ in length".into(),
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(DataError::Inconsistent(format!("label {l}")));
        }
        if let Some(s) = sessions.iter().find(|s| !matches!(s, 1 | 2)) {
            return Err(DataError::Inconsistent(format!("session {s}")));
        }
        Ok(Self {
            samples,
            n_channels,
            n_times,
            labels,
            subject_ids,
            sessions,
            phases,
            sample_rate_hz,
        })
    }

    pub fn empty(n_channels: usize, n_times: usize, sample_rate_hz: f64) -> Self {
        Self {
            samples: Vec::new(),
            n_channels,
            n_times,
            labels: Vec::new(),
            subject_ids: Vec::new(),
            sessions: Vec::new(),
            phases: Vec::new(),
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial_len(&self) -> usize {
        self.n_channels * self.n_times
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn trial(&self, i: usize) -> &[f32] {
        let k = self.trial_len();
        &self.samples[i * k..(i + 1) * k]
    }

    pub fn trial_f64(&self, i: usize) -> Vec<f64> {
        self.trial(i).iter().map(|v| *v as f64).collect()
    }

    /// Concatenated `f64` samples of the given trials.
    pub fn gather_f64(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            out.extend(self.trial(i).iter().map(|v| *v as f64));
        }
        out
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u16> {
        let mut s = self.subject_ids.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            samples.extend_from_slice(self.trial(i));
        }
        Self {
            samples,
            n_channels: self.n_channels,
            n_times: self.n_times,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i]).collect(),
            sessions: indices.iter().map(|&i| self.sessions[i]).collect(),
            phases: indices.iter().map(|&i| self.phases[i]).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn indices_where(&self, mut pred: impl FnMut(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(i)).collect()
    }

    pub fn filter(&self, pred: impl FnMut(usize) -> bool) -> Self {
        self.select(&self.indices_where(pred))
    }

    pub fn subject(&self, id: u16) -> Self {
        self.filter(|i| self.subject_ids[i] == id)
    }

    /// Appends `other`; dimensions and sample rate must agree.
    pub fn extend(&mut self, other: &TrialSet) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        if self.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if (self.n_channels, self.n_times) != (other.n_channels, other.n_times)
            || self.sample_rate_hz != other.sample_rate_hz
        {
            return Err(DataError::Inconsistent(format!(
                "cannot join {}×{} @ {} Hz with {}×{} @ {} Hz",
                self.n_channels,
                self.n_times,
                self.sample_rate_hz,
                other.n_channels,
                other.n_times,
                other.sample_rate_hz
            )));
        }
        self.samples.extend_from_slice(&other.samples);
        self.labels.extend_from_slice(&other.labels);
        self.subject_ids.extend_from_slice(&other.subject_ids);
        self.sessions.extend_from_slice(&other.sessions);
        self.phases.extend_from_slice(&other.phases);
        Ok(())
    }

    pub fn block_count(&self, session: u8, phase: Phase) -> usize {
        (0..self.len())
            .filter(|&i| self.sessions[i] == session && self.phases[i] == phase)
            .count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockCounts {
    pub s1_offline: usize,
    pub s1_online: usize,
    pub s2_offline: usize,
    pub s2_online: usize,
}

impl BlockCounts {
    fn slot(&mut self, session: u8, phase: Phase) -> &mut usize {
        match (session, phase) {
            (1, Phase::Offline) => &mut self.s1_offline,
            (1, Phase::Online) => &mut self.s1_online,
            (_, Phase::Offline) => &mut self.s2_offline,
            (_, Phase::Online) => &mut self.s2_online,
        }
    }

    pub fn get(&self, session: u8, phase: Phase) -> usize {
        let mut copy = *self;
        *copy.slot(session, phase)
    }

    pub fn total(&self) -> usize {
        self.s1_offline + self.s1_online + self.s2_offline + self.s2_online
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: u16,
    pub file: String,
    pub bytes: u64,
    pub counts: BlockCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub sample_rate_hz: f64,
    pub n_channels: usize,
    pub n_times: usize,
    pub channel_names: Vec<String>,
    /// Enforces 100 trials in every (session, phase) block.
    #[serde(default)]
    pub openbmi: bool,
    #[serde(default, rename = "non-separable")]
    pub non_separable: bool,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Self = toml::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        manifest.validate(path)?;
        Ok(manifest)
    }

    /// Checks header fields, per-subject files and their byte lengths.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |message: String| DataError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        if self.format != "EEGT" {
            return Err(bad(format!("format '{}' is not EEGT", self.format)));
        }
        if self.version != TRIAL_FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        if self.channel_names.len() != self.n_channels {
            return Err(bad(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.n_channels
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(bad("sample rate must be positive".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut seen = std::collections::HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id) {
                return Err(bad(format!("subject {} listed twice", s.id)));
            }
            if self.openbmi
                && BLOCKS
                    .iter()
                    .any(|(sess, ph)| s.counts.get(*sess, *ph) != 100)
            {
                return Err(bad(format!(
                    "subject {} does not have 100 trials per block",
                    s.id
                )));
            }
            let file = base.join(&s.file);
            let meta = fs::metadata(&file).map_err(io_err(&file))?;
            let expected = expected_file_bytes(s.counts.total(), self.n_channels, self.n_times);
            if s.bytes != expected {
                return Err(bad(format!(
                    "subject {} declares {} bytes, layout needs {expected}",
                    s.id, s.bytes
                )));
            }
            if meta.len() != s.bytes {
                return Err(DataError::LengthMismatch {
                    path: file,
                    expected: s.bytes,
                    actual: meta.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn expected_file_bytes(n_trials: usize, n_channels: usize, n_times: usize) -> u64 {
    FILE_HEADER_BYTES + n_trials as u64 * (RECORD_HEADER_BYTES + 4 * (n_channels * n_times) as u64)
}

/// Extra manifest flags set by the writer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ManifestFlags {
    pub openbmi: bool,
    pub non_separable: bool,
}

fn encode_subject(set: &TrialSet, indices: &[usize]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(
        expected_file_bytes(indices.len(), set.n_channels, set.n_times) as usize,
    );
    buf.extend_from_slice(TRIAL_MAGIC);
    buf.extend_from_slice(&TRIAL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(indices.len() as u32).to_le_bytes());
    for &i in indices {
        buf.extend_from_slice(&(set.n_channels as u32).to_le_bytes());
        buf.extend_from_slice(&(set.n_times as u32).to_le_bytes());
        buf.push(set.labels[i]);
        buf.extend_from_slice(&set.subject_ids[i].to_le_bytes());
        buf.push(set.sessions[i]);
        buf.push(set.phases[i].tag());
        for v in set.trial(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Writes one `EEGT` file per subject plus `manifest.toml` into `dir` and
/// returns the manifest path. Channel names default to `ch1..chC`.
pub fn write_dataset(
    set: &TrialSet,
    dir: &Path,
    channel_names: Option<Vec<String>>,
    flags: ManifestFlags,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let channel_names =
        channel_names.unwrap_or_else(|| (1..=set.n_channels).map(|c| format!("ch{c}")).collect());
    let mut subjects = Vec::new();
    for id in set.subjects() {
        let indices = set.indices_where(|i| set.subject_ids[i] == id);
        let mut counts = BlockCounts::default();
        for &i in &indices {
            *counts.slot(set.sessions[i], set.phases[i]) += 1;
        }
        let file = format!("subject_{id:03}.eegt");
        let path = dir.join(&file);
        let bytes = encode_subject(set, &indices);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        w.write_all(&bytes).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
        subjects.push(SubjectEntry {
            id,
            file,
            bytes: bytes.len() as u64,
            counts,
        });
    }
    let manifest = DatasetManifest {
        format: "EEGT".into(),
        version: TRIAL_FORMAT_VERSION,
        sample_rate_hz: set.sample_rate_hz,
        n_channels: set.n_channels,
        n_times: set.n_times,
        channel_names,
        openbmi: flags.openbmi,
        non_separable: flags.non_separable,
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    manifest.validate(&path)?;
    Ok(path)
}

/// Optional restrictions applied while loading.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialFilter {
    pub subjects: Option<Vec<u16>>,
    pub sessions: Option<Vec<u8>>,
    pub phases: Option<Vec<Phase>>,
}

impl TrialFilter {
    fn keeps(&self, subject: u16, session: u8, phase: Phase) -> bool {
        self.subjects.as_ref().is_none_or(|s| s.contains(&subject))
            && self.sessions.as_ref().is_none_or(|s| s.contains(&session))
            && self.phases.as_ref().is_none_or(|p| p.contains(&phase))
    }
}

fn decode_subject(
    path: &Path,
    bytes: &[u8],
    manifest: &DatasetManifest,
    entry: &SubjectEntry,
    filter: &TrialFilter,
) -> Result<TrialSet> {
    let corrupt = |message: String| DataError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < FILE_HEADER_BYTES as usize || &bytes[..4] != TRIAL_MAGIC {
        return Err(corrupt("missing EEGT magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != TRIAL_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = u32_at(8) as usize;
    if count != entry.counts.total() {
        return Err(corrupt(format!(
            "file holds {count} trials, manifest lists {}",
            entry.counts.total()
        )));
    }
    let (c, t) = (manifest.n_channels, manifest.n_times);
    let expected = expected_file_bytes(count, c, t);
    if bytes.len() as u64 != expected {
        return Err(DataError::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let mut set = TrialSet::empty(c, t, manifest.sample_rate_hz);
    let mut counts = BlockCounts::default();
    let mut offset = FILE_HEADER_BYTES as usize;
    let rec_len = RECORD_HEADER_BYTES as usize + 4 * c * t;
    for r in 0..count {
        let rec = &bytes[offset..offset + rec_len];
        offset += rec_len;
        let rc = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
        let rt = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")) as usize;
        if (rc, rt) != (c, t) {
            return Err(corrupt(format!(
                "record {r} is {rc}×{rt}, manifest says {c}×{t}"
            )));
        }
        let label = rec[8];
        if label > 1 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                label,
            });
        }
        let subject = u16::from_le_bytes([rec[9], rec[10]]);
        if subject != entry.id {
            return Err(corrupt(format!(
                "record {r} belongs to subject {subject}, expected {}",
                entry.id
            )));
        }
        let session = rec[11];
        if !matches!(session, 1 | 2) {
            return Err(corrupt(format!("record {r} has session {session}")));
        }
        let phase = Phase::from_tag(rec[12]).ok_or(DataError::UnknownPhase {
            path: path.to_path_buf(),
            tag: rec[12],
        })?;
        *counts.slot(session, phase) += 1;
        if !filter.keeps(subject, session, phase) {
            continue;
        }
        set.samples.extend(
            rec[RECORD_HEADER_BYTES as usize..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
        );
        set.labels.push(label);
        set.subject_ids.push(subject);
        set.sessions.push(session);
        set.phases.push(phase);
    }
    if counts != entry.counts {
        return Err(corrupt(format!(
            "block counts {counts:?} differ from manifest {:?}",
            entry.counts
        )));
    }
    Ok(set)
}

/// Reads every subject listed in the manifest that passes `filter`.
pub fn load_trials(manifest_path: &Path, filter: &TrialFilter) -> Result<TrialSet> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries: Vec<&SubjectEntry> = manifest
        .subjects
        .iter()
        .filter(|s| {
            filter
                .subjects
                .as_ref()
                .is_none_or(|ids| ids.contains(&s.id))
        })
        .collect();
    let parts: Vec<TrialSet> = entries
        .par_iter()
        .map(|entry| {
            let path = base.join(&entry.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            decode_subject(&path, &bytes, &manifest, entry, filter)
        })
        .collect::<Result<_>>()?;
    let mut set = TrialSet::empty(
        manifest.n_channels,
        manifest.n_times,
        manifest.sample_rate_hz,
    );
    for p in &parts {
        set.extend(p)?;
    }
    Ok(set)
}

/// Pre-processing settings: epoch window, target rate and band-pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window_ms: (f64, f64),
    pub target_hz: f64,
    pub band_hz: (f64, f64),
    pub filter_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_ms: (1000.0, 3500.0),
            target_hz: 100.0,
            band_hz: (8.0, 30.0),
            filter_order: 5,
        }
    }
}

/// Trim, anti-aliased down-sample, then causal band-pass, per channel.
pub fn preprocess(raw: &TrialSet, cfg: &PreprocessConfig) -> Result<TrialSet> {
    let bandpass = design_bandpass(
        cfg.band_hz.0,
        cfg.band_hz.1,
        cfg.filter_order,
        cfg.target_hz,
    )?;
    let processed: Vec<(Vec<f64>, usize)> = (0..raw.len())
        .into_par_iter()
        .map(|i| {
            let (trimmed, t) = trim_and_downsample(
                &raw.trial_f64(i),
                raw.n_channels,
                raw.sample_rate_hz,
                cfg.window_ms,
                cfg.target_hz,
            )?;
            let mut out = Vec::with_capacity(trimmed.len());
            for row in trimmed.chunks(t) {
                out.extend(bandpass.filter(row)?);
            }
            Ok((out, t))
        })
        .collect::<std::result::Result<_, DspError>>()?;
    let n_times = match processed.first() {
        Some((_, t)) => *t,
        None => {
            let dummy = vec![0.0; raw.trial_len()];
            trim_and_downsample(
                &dummy,
                raw.n_channels,
                raw.sample_rate_hz,
                cfg.window_ms,
                cfg.target_hz,
            )?
            .1
        }
    };
    let samples = processed
        .into_iter()
        .flat_map(|(v, _)| v.into_iter().map(|x| x as f32))
        .collect();
    TrialSet::new(
        samples,
        raw.n_channels,
        n_times,
        raw.labels.clone(),
        raw.subject_ids.clone(),
        raw.sessions.clone(),
        raw.phases.clone(),
        cfg.target_hz,
    )
}

/// Subject-dependent split: train on S1-offline, S1-online and S2-offline,
/// test on S2-online.
pub fn split_sd(set: &TrialSet) -> Result<(TrialSet, TrialSet)> {
    for (session, phase) in BLOCKS {
        if set.block_count(session, phase) == 0 {
            return Err(DataError::MissingBlock { session, phase });
        }
    }
    let is_test = |i: usize| set.sessions[i] == 2 && set.phases[i] == Phase::Online;
    Ok((set.filter(|i| !is_test(i)), set.filter(is_test)))
}

/// Leave-one-subject-out split: train on the chosen phase of both sessions
/// for every other subject, test on the held-out subject's S2-online block.
pub fn split_loso(
    set: &TrialSet,
    test_subject: u16,
    train_phase: Phase,
) -> Result<(TrialSet, TrialSet)> {
    let subjects = set.subjects();
    if subjects.len() < 2 {
        return Err(DataError::TooFewSubjects(subjects.len()));
    }
    if !subjects.contains(&test_subject) {
        return Err(DataError::UnknownSubject(test_subject));
    }
    let train = set.filter(|i| set.subject_ids[i] != test_subject && set.phases[i] == train_phase);
    let test = set.filter(|i| {
        set.subject_ids[i] == test_subject && set.sessions[i] == 2 && set.phases[i] == Phase::Online
    });
    if test.is_empty() {
        return Err(DataError::MissingBlock {
            session: 2,
            phase: Phase::Online,
        });
    }
    Ok((train, test))
}

/// Mixes a key into a global seed (splitmix64 finalizer), so per-subject
/// streams do not depend on iteration order.
pub fn derive_seed(global: u64, key: u64) -> u64 {
    let mut z = global
        ^ key
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Settings of the synthetic motor-imagery generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub n_channels: usize,
    /// Signal-to-noise power ratio of the mixed sources against white noise.
    pub snr: f64,
    /// μ-power factor applied to the desynchronized source.
    pub erd: f64,
    pub subject_variability: f64,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            trials_per_class: 100,
            n_channels: 16,
            snr: 4.0,
            erd: 0.5,
            subject_variability: 0.1,
            sample_rate_hz: 1000.0,
            n_samples: 4000,
            seed: 0,
        }
    }
}

const MU_HZ: f64 = 10.0;
const BETA_HZ: f64 = 20.0;
const MU_AMPLITUDE: f64 = 1.0;
const BETA_AMPLITUDE: f64 = 0.5;

fn random_orthogonal(c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
    g.qr().q()
}

fn base_mixing(c: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let u = random_orthogonal(c, &mut rng);
    let v = random_orthogonal(c, &mut rng);
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(c, |_, _| {
        rng.random_range(0.5..1.5)
    }));
    u * s * v.transpose()
}

/// Unit-variance noise with a `1/f` power spectrum.
fn pink_noise(n: usize, planner: &mut FftPlanner<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let amp = 1.0 / (k as f64).sqrt();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        spec[k] = Complex64::from_polar(amp, phase);
        if k != n - k {
            spec[n - k] = spec[k].conj();
        } else {
            spec[k] = Complex64::new(spec[k].re, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let mut out: Vec<f64> = spec.into_iter().map(|z| z.re).collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    out
}

fn rhythm(out: &mut [f64], freq: f64, amplitude: f64, fs: f64, rng: &mut ChaCha8Rng) {
    let f = freq + rng.random_range(-0.5..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for (i, v) in out.iter_mut().enumerate() {
        *v += amplitude * (std::f64::consts::TAU * f * i as f64 / fs + phase).cos();
    }
}

/// The two motor sources of one trial. Class 0 scales μ-power of the left
/// source by `erd` and β-power of the right source by `1/erd`; class 1 is
/// mirrored.
fn motor_sources(label: u8, erd: f64, fs: f64, n: usize, rng: &mut ChaCha8Rng) -> [Vec<f64>; 2] {
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    let (suppressed, boosted) = if label == 0 { (0, 1) } else { (1, 0) };
    for (idx, src) in [&mut left, &mut right].into_iter().enumerate() {
        let mu_gain = if idx == suppressed { erd.sqrt() } else { 1.0 };
        let beta_gain = if idx == boosted {
            1.0 / erd.sqrt()
        } else {
            1.0
        };
        rhythm(src, MU_HZ, MU_AMPLITUDE * mu_gain, fs, rng);
        rhythm(src, BETA_HZ, BETA_AMPLITUDE * beta_gain, fs, rng);
    }
    [left, right]
}

/// Per-class trial counts of the four blocks, as even as possible.
fn block_sizes(per_class: usize) -> [usize; 4] {
    let mut sizes = [per_class / 4; 4];
    for s in sizes.iter_mut().take(per_class % 4) {
        *s += 1;
    }
    sizes
}

fn synthesize_subject(cfg: &SynthConfig, subject: u16, base: &DMatrix<f64>) -> TrialSet {
    let c = cfg.n_channels;
    let n = cfg.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, subject as u64));
    let v = cfg.subject_variability;
    let perturbation = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mixing = base + perturbation * (v / (c as f64).sqrt());
    let erd = cfg.erd.powf(1.0 + v * rng.random_range(-0.5..0.5));
    let mut planner = FftPlanner::new();

    let mut set = TrialSet::empty(c, n, cfg.sample_rate_hz);
    let sizes = block_sizes(cfg.trials_per_class);
    for (b, (session, phase)) in BLOCKS.into_iter().enumerate() {
        let mut labels: Vec<u8> = std::iter::repeat_n(0u8, sizes[b])
            .chain(std::iter::repeat_n(1u8, sizes[b]))
            .collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        for label in labels {
            let mut sources = DMatrix::<f64>::zeros(c, n);
            let [left, right] = motor_sources(label, erd, cfg.sample_rate_hz, n, &mut rng);
            sources.row_mut(0).copy_from_slice(&left);
            sources.row_mut(1).copy_from_slice(&right);
            for s in 2..c {
                let noise = pink_noise(n, &mut planner, &mut rng);
                sources.row_mut(s).copy_from_slice(&noise);
            }
            let mixed = &mixing * sources;
            let power = mixed.iter().map(|v| v * v).sum::<f64>() / (c * n) as f64;
            let sigma = (power / cfg.snr).sqrt();
            for ch in 0..c {
                for t in 0..n {
                    let noise: f64 = rng.sample(StandardNormal);
                    set.samples.push((mixed[(ch, t)] + sigma * noise) as f32);
                }
            }
            set.labels.push(label);
            set.subject_ids.push(subject);
            set.sessions.push(session);
            set.phases.push(phase);
        }
    }
    set
}

/// Generates raw trials for subjects `1..=n_subjects`, spread evenly across
/// the four (session, phase) blocks with balanced classes.
pub fn synthesize(cfg: &SynthConfig) -> Result<TrialSet> {
    if !(cfg.snr > 0.0) {
        return Err(DataError::InvalidSnr(cfg.snr));
    }
    if cfg.n_channels < 4 {
        return Err(DataError::TooFewChannels(cfg.n_channels));
    }
    if !(cfg.erd > 0.0) || cfg.n_samples < 2 || !(cfg.sample_rate_hz > 0.0) {
        return Err(DataError::Inconsistent(
            "erd, sample count and sample rate must be positive".into(),
        ));
    }
    let base = base_mixing(cfg.n_channels, cfg.seed);
    let subjects: Vec<TrialSet> = (1..=cfg.n_subjects as u16)
        .into_par_iter()
        .map(|s| synthesize_subject(cfg, s, &base))
        .collect();
    let mut set = TrialSet::empty(cfg.n_channels, cfg.n_samples, cfg.sample_rate_hz);
    for s in &subjects {
        set.extend(s)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_power(x: &[f64], fs: f64, lo: f64, hi: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        (0..=n / 2)
            .filter(|k| {
                let f = *k as f64 * fs / n as f64;
                f >= lo && f <= hi
            })
            .map(|k| buf[k].norm_sqr())
            .sum()
    }

    #[test]
    fn source_level_mu_ratio_matches_erd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fs, n) = (1000.0, 4000);
        let mut p = [0.0; 2];
        for _ in 0..50 {
            for label in 0..2u8 {
                let [left, _] = motor_sources(label, 0.5, fs, n, &mut rng);
                p[label as usize] += band_power(&left, fs, 8.0, 12.0);
            }
        }
        let ratio = p[0] / p[1];
        assert!((ratio - 0.5).abs() < 0.025, "ratio {ratio}");
    }

    #[test]
    fn pink_noise_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = pink_noise(1000, &mut FftPlanner::new(), &mut rng);
        let var = x.iter().map(|v| v * v).sum::<f64>() / 1000.0;
        assert!((var - 1.0).abs() < 1e-9);
        assert!(band_power(&x, 1000.0, 1.0, 10.0) > band_power(&x, 1000.0, 100.0, 109.0));
    }

    #[test]
    fn block_sizes_are_balanced() {
        assert_eq!(block_sizes(100), [25; 4]);
        assert_eq!(block_sizes(40), [10; 4]);
        assert_eq!(block_sizes(6), [2, 2, 1, 1]);
    }

    #[test]
    fn derive_seed_separates_keys() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn phase_round_trip() {
        for p in [Phase::Offline, Phase::Online] {
            assert_eq!(Phase::from_tag(p.tag()), Some(p));
            assert_eq!(p.to_string().parse::<Phase>(), Ok(p));
        }
        assert_eq!(Phase::from_tag(7), None);
    }
}
