use std::path::{Path, PathBuf};

use conda_core::graph::eventfile::content_hash;
use conda_core::train::TrainConfig;
use serde::Serialize;

use crate::settings::Settings;

/// Everything needed to trace an output directory back to its inputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub dataset_path: PathBuf,
    pub dataset_hash: String,
    pub out_dir: PathBuf,
    /// First 12 hex digits of a hash over command, config and dataset.
    pub run_id: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: &Path, settings: &Settings, dataset_hash: &str, extra: &str) -> Self {
        let key = format!("{command}\n{}{dataset_hash}\n{extra}\n", settings.canonical());
        let run_id = content_hash(key.as_bytes())[..12].to_string();
        Self {
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            config: settings.train.clone(),
            seeds: settings.seeds.clone(),
            dataset_path: settings.data.clone().unwrap_or_default(),
            dataset_hash: dataset_hash.to_string(),
            out_dir: settings.out.clone(),
            run_id,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.command, self.run_id))
    }
}
