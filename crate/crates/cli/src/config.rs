//! Run configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ccspnet::data::PreprocessConfig;
use ccspnet::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings shared by the training and evaluation commands. Every field has
/// a default, so an empty file is valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset manifest (`manifest.toml`).
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Overrides `model.seed` when present.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Subjects to use; empty means all.
    pub subjects: Vec<u16>,
    /// Skip pre-processing for data that is already epoched and filtered.
    pub preprocessed: bool,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    #[serde(skip)]
    explicit_model_keys: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("ccspnet-out"),
            seed: None,
            jobs: 0,
            subjects: Vec::new(),
            preprocessed: false,
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            explicit_model_keys: BTreeSet::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let err = |e: toml::de::Error| CliError::Config(format!("{origin}: {e}"));
        let mut cfg: RunConfig = toml::from_str(text).map_err(err)?;
        let table: toml::Table = toml::from_str(text).map_err(err)?;
        if let Some(toml::Value::Table(model)) = table.get("model") {
            cfg.explicit_model_keys = model.keys().cloned().collect();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Whether `[model]` in the file set `key`.
    pub fn model_sets(&self, key: &str) -> bool {
        self.explicit_model_keys.contains(key)
    }

    /// Records a model setting given on the command line.
    pub fn mark_model_key(&mut self, key: &str) {
        self.explicit_model_keys.insert(key.to_string());
    }

    /// Sets the input shape from the data unless the file fixed it, in which
    /// case a mismatch is an error.
    pub fn fit_to_data(
        &mut self,
        n_channels: usize,
        n_times: usize,
        sample_rate_hz: f64,
    ) -> Result<(), CliError> {
        let m = &mut self.model;
        let checks = [
            ("n_channels", m.n_channels as f64, n_channels as f64),
            ("n_timepoints", m.n_timepoints as f64, n_times as f64),
            ("sample_rate_hz", m.sample_rate_hz, sample_rate_hz),
        ];
        for (key, configured, actual) in checks {
            if self.explicit_model_keys.contains(key) && configured != actual {
                return Err(CliError::Config(format!(
                    "model.{key} = {configured} but the data has {actual}"
                )));
            }
        }
        m.n_channels = n_channels;
        m.n_timepoints = n_times;
        m.sample_rate_hz = sample_rate_hz;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
