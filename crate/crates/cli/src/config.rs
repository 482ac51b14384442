//! Configuration file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use qsdiar::federated::FederatedConfig;
use qsdiar::pipeline::{PipelineConfig, SpeakerCorpusConfig, SWEEP_STRIDES, SWEEP_WINDOWS};
use qsdiar::synth::ConversationConfig;

pub const OUT_DIR_ENV: &str = "QSDIAR_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub conversations: usize,
    pub windows: Vec<usize>,
    pub strides: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            conversations: 20,
            windows: SWEEP_WINDOWS.to_vec(),
            strides: SWEEP_STRIDES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Top-level seed; every seeded component derives from it.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub federated: FederatedConfig,
    /// Speakers used to train the identifier and to voice synthetic
    /// conversations.
    pub speakers: SpeakerCorpusConfig,
    pub conversation: ConversationConfig,
    pub sweep: SweepConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the top-level seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.federated.seed = seed;
        self.speakers.seed = seed;
        self.pipeline.identify.online.seed = seed;
    }

    /// Flag, then environment, then config file, then the working directory.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        self.pipeline
            .out_dir
            .as_deref()
            .map_or_else(|| PathBuf::from("."), PathBuf::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsdiar::segmentation::Method;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str(
            r#"
            seed = 3
            [pipeline.segmentation]
            window_frames = 100
            method = "bic"
            [federated]
            group_size = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pipeline.segmentation.window_frames, 100);
        assert_eq!(cfg.pipeline.segmentation.method, Method::Bic);
        assert_eq!(cfg.pipeline.segmentation.stride_fraction, 0.6);
        assert_eq!(cfg.federated.group_size, 2);
        assert_eq!(cfg.federated.rounds, 20);
        assert_eq!(cfg.sweep.conversations, 20);
    }

    #[test]
    fn nested_sections_fill_missing_fields() {
        let cfg: FileConfig = toml::from_str(
            r#"
            [pipeline.identify.online]
            tau = 0.8
            [pipeline.identify.online.lr]
            lr0 = 0.01
            [speakers.variation]
            pitch_jitter = 0.1
            "#,
        )
        .unwrap();
        let online = cfg.pipeline.identify.online;
        assert_eq!(online.tau, 0.8);
        assert_eq!((online.lr.lr0, online.lr.decay), (0.01, 1.0));
        assert_eq!(online.batch_size, 32);
        assert_eq!(cfg.speakers.variation.pitch_jitter, 0.1);
        assert_eq!(cfg.speakers.variation.band_jitter, 0.06);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("colar_sec = 1.0").is_err());
    }

    #[test]
    fn default_config_serializes_and_parses_back() {
        let cfg = FileConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<FileConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn seed_reaches_every_section() {
        let mut cfg = FileConfig::default();
        cfg.apply_seed(9);
        assert_eq!(cfg.federated.seed, 9);
        assert_eq!(cfg.speakers.seed, 9);
        assert_eq!(cfg.pipeline.identify.online.seed, 9);
    }
}
