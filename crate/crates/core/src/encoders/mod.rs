//! Behavioral and neural encoders, attention pooling, projection heads,
//! domain discriminators and the baseline heads, all sharing one parameter store.

mod bundle;
pub mod checkpoint;
mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use bundle::{Heads, Modality, ModelBundle};
pub use layers::{attention_pool, Forward};
pub use params::{BnSet, ParamSet};

/// How attention scores become pooling weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// `a_i = -log softmax(r)_i`
    #[default]
    Verbatim,
    /// `a_i = softmax(r)_i`
    Softmax,
}

/// Temporal pooling at the end of a 1D conv stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Attention,
    Mean,
}

/// 1D conv stack over time: `pre_pool` widths, a ×2 max-pool, then `post_pool` widths.
/// Every conv is kernel 3 / padding 1, followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub pre_pool: Vec<usize>,
    pub post_pool: Vec<usize>,
}

impl TemporalConfig {
    pub fn out_channels(&self, input: usize) -> usize {
        self.post_pool.last().or(self.pre_pool.last()).copied().unwrap_or(input)
    }

    /// Frame count after the mid-stack pool.
    pub fn out_frames(&self, frames: usize) -> usize {
        if self.pre_pool.is_empty() && self.post_pool.is_empty() {
            frames
        } else {
            frames / 2
        }
    }
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self { pre_pool: vec![64, 80], post_pool: vec![96, 112, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub joints: usize,
    pub behavior_frames: usize,
    pub neural_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-frame 3×3 conv widths; each conv is followed by BN, ReLU and a 2×2 max-pool.
    pub frame_convs: Vec<usize>,
    /// Per-frame fc widths after flattening the conv tower (BN + ReLU each).
    pub frame_fc: Vec<usize>,
    pub neural_temporal: TemporalConfig,
    pub behavior_temporal: TemporalConfig,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub attention_hidden: usize,
    pub attention_mode: AttentionMode,
    pub discriminator_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            joints: 10,
            behavior_frames: 8,
            neural_frames: 32,
            height: 64,
            width: 64,
            frame_convs: vec![4, 8, 16, 32, 64],
            frame_fc: vec![128, 128],
            neural_temporal: TemporalConfig::default(),
            behavior_temporal: TemporalConfig::default(),
            embedding_dim: 128,
            projection_dim: 128,
            attention_hidden: 12,
            attention_mode: AttentionMode::Verbatim,
            discriminator_hidden: 128,
        }
    }
}

impl EncoderConfig {
    /// Spatial extent after the per-frame conv tower.
    pub fn tower_extent(&self) -> (usize, usize) {
        let k = self.frame_convs.len() as u32;
        (self.height >> k, self.width >> k)
    }

    /// Width of the per-frame feature vector fed to the temporal stack.
    pub fn frame_feature_dim(&self) -> usize {
        match self.frame_fc.last() {
            Some(&w) => w,
            None => {
                let (h, w) = self.tower_extent();
                self.frame_convs.last().copied().unwrap_or(1) * h * w
            }
        }
    }

    pub fn behavior_input_dim(&self) -> usize {
        self.joints * 3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joints", self.joints),
            ("behavior_frames", self.behavior_frames),
            ("neural_frames", self.neural_frames),
            ("height", self.height),
            ("width", self.width),
            ("embedding_dim", self.embedding_dim),
            ("projection_dim", self.projection_dim),
            ("attention_hidden", self.attention_hidden),
            ("discriminator_hidden", self.discriminator_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("encoder {name} must be positive")));
        }
        let widths = self.frame_convs.iter().chain(&self.frame_fc);
        let temporal = [&self.neural_temporal, &self.behavior_temporal];
        if widths.chain(temporal.iter().flat_map(|t| t.pre_pool.iter().chain(&t.post_pool))).any(|&w| w == 0) {
            return Err(config_err("layer widths must be positive"));
        }
        let (h, w) = self.tower_extent();
        if h == 0 || w == 0 {
            return Err(config_err(format!(
                "{}x{} images are too small for {} pooled conv layers",
                self.height,
                self.width,
                self.frame_convs.len()
            )));
        }
        for (name, t, frames) in [
            ("neural", &self.neural_temporal, self.neural_frames),
            ("behavior", &self.behavior_temporal, self.behavior_frames),
        ] {
            if t.out_frames(frames) == 0 {
                return Err(config_err(format!("{name} window of {frames} frames is too short for the temporal pool")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
