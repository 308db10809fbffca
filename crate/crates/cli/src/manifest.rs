//! Run manifest: everything needed to repeat a run, with wall-clock data
//! kept under `timing` so the rest is reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slstm_core::training::TrainConfig;

pub const BUILD_ID: &str = env!("SLSTM_BUILD_ID");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: f64,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: String,
    pub finished_at: String,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build_id: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Data sources and loader options.
    pub data: BTreeMap<String, String>,
    pub metric: Option<String>,
    pub epochs: Vec<EpochRow>,
    pub results: BTreeMap<String, f64>,
    pub timing: Timing,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        let config_map = TrainConfig::KEYS
            .iter()
            .map(|k| (k.to_string(), config.get(k).expect("known key")))
            .collect();
        Self {
            command: command.to_string(),
            build_id: BUILD_ID.to_string(),
            seed: config.seed,
            config: config_map,
            data: BTreeMap::new(),
            metric: None,
            epochs: Vec::new(),
            results: BTreeMap::new(),
            timing: Timing {
                started_at: now(),
                ..Timing::default()
            },
        }
    }

    /// The configuration recorded in the manifest.
    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (k, v) in &self.config {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn finish(&mut self) {
        self.timing.finished_at = now();
    }

    /// Pretty JSON with the `timing` object removed.
    pub fn without_timing(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("manifest serialises")
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
