//! Run configuration: one JSON document drives every subcommand, a content
//! digest of the effective config is stamped into all outputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::gate::GateConfig;
use crate::ingest::SensorSite;
use crate::model::{ConvBlockCfg, EncoderConfig};
use crate::numerics::AdamHyper;
use crate::synth::SynthConfig;
use crate::training::{MaskSpec, TrainOpts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowingConfig {
    pub window_len: usize,
    pub hop_minority: usize,
    /// Freeze-fraction threshold for window labels.
    pub tau: f64,
    /// Uniform hop for unlabeled pretraining windows.
    pub pretrain_hop: usize,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            hop_minority: 32,
            tau: 0.5,
            pretrain_hop: 64,
        }
    }
}

/// Encoder architecture without the window length (that comes from
/// [`WindowingConfig`], keeping one source of truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockCfg>,
    pub pool_width: usize,
    pub mlp_hidden: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            in_channels: d.in_channels,
            blocks: d.blocks,
            pool_width: d.pool_width,
            mlp_hidden: d.mlp_hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 50,
            finetune_epochs: 50,
            baseline_epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_root: String,
    pub out_dir: String,
    pub site: SensorSite,
    pub windowing: WindowingConfig,
    pub mask: MaskSpec,
    pub encoder: EncoderSpec,
    pub training: TrainingConfig,
    pub gate: GateConfig,
    pub synth: SynthConfig,
    pub label_fractions: Vec<f64>,
    /// Stride between streaming window positions.
    pub stream_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            out_dir: "out".into(),
            site: SensorSite::Ankle,
            windowing: WindowingConfig::default(),
            mask: MaskSpec::default(),
            encoder: EncoderSpec::default(),
            training: TrainingConfig::default(),
            gate: GateConfig::default(),
            synth: SynthConfig::default(),
            label_fractions: vec![1.0, 0.8, 0.6, 0.4],
            stream_stride: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.mask.validate(self.windowing.window_len)?;
        self.gate.validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            window_len: self.windowing.window_len,
            in_channels: self.encoder.in_channels,
            blocks: self.encoder.blocks.clone(),
            pool_width: self.encoder.pool_width,
            mlp_hidden: self.encoder.mlp_hidden,
        }
    }

    pub fn train_opts(&self, epochs: usize, seed: u64) -> TrainOpts {
        TrainOpts {
            epochs,
            batch_size: self.training.batch_size,
            seed,
            hyper: AdamHyper::with_lr(self.training.lr),
        }
    }

    /// Content hash of the effective config; stamped into every output.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &hash[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
