use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Widths of the two convolutional stages and the deepest stage.
    pub channels: [usize; 3],
    /// Kernel of the downsampling convolutions, `(t, h, w)`.
    pub down_kernel: [usize; 3],
    /// Kernel of the depthwise convolution inside each hybrid block.
    pub large_kernel: [usize; 3],
    pub hybrid_blocks: usize,
    /// Channel-attention bottleneck ratio.
    pub se_reduction: usize,
    pub hidden: usize,
    pub heads: usize,
    pub landmarks: usize,
    pub token_budget: usize,
    pub coord_scale: f64,
    pub predict_volumes: bool,
    pub disable_e2cbd: bool,
    pub disable_e2fa: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            frames: 64,
            height: 112,
            width: 112,
            channels: [8, 16, 32],
            down_kernel: [3, 3, 3],
            large_kernel: [5, 5, 5],
            hybrid_blocks: 1,
            se_reduction: 4,
            hidden: 32,
            heads: 4,
            landmarks: 21,
            token_budget: 4096,
            coord_scale: 112.0,
            predict_volumes: false,
            disable_e2cbd: false,
            disable_e2fa: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            frames: 4,
            height: 14,
            width: 14,
            channels: [2, 3, 4],
            hidden: 8,
            heads: 4,
            landmarks: 3,
            token_budget: 16,
            coord_scale: 14.0,
            ..Self::default()
        }
    }

    /// A CPU-friendly configuration for smoke training on synthetic clips.
    pub fn small() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: [4, 8, 16],
            large_kernel: [3, 5, 5],
            hidden: 16,
            heads: 4,
            landmarks: 7,
            token_budget: 256,
            coord_scale: 32.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden dimension must be divisible by the head count");
        }
        if !(self.coord_scale > 0.0) || !self.coord_scale.is_finite() {
            return bad("coord_scale must be positive");
        }
        if self.token_budget == 0 {
            return bad("token budget must be at least 1");
        }
        if self.landmarks < 3 {
            return bad("at least 3 landmarks per phase are required");
        }
        if self.in_channels == 0 || self.frames == 0 || self.channels.contains(&0) {
            return bad("channel and frame counts must be positive");
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive");
        }
        if self.down_kernel.contains(&0) || self.large_kernel.contains(&0) {
            return bad("kernel sizes must be positive");
        }
        if self.large_kernel.iter().any(|k| k % 2 == 0) {
            return bad("large kernel sizes must be odd to preserve shape");
        }
        let dims = self.level_dims();
        if dims.iter().any(|d| d[0] == 0 || d[1] == 0) {
            return bad("input too small for three downsampling stages");
        }
        Ok(())
    }

    /// Number of regression outputs of the head.
    pub fn head_outputs(&self) -> usize {
        if self.predict_volumes {
            3
        } else {
            1
        }
    }

    /// `padding` of the downsampling convolutions (`k / 2` per axis).
    pub fn down_padding(&self) -> [usize; 3] {
        self.down_kernel.map(|k| k / 2)
    }

    /// Spatial `(H, W)` after each of the three stride-2 stages.
    pub fn level_dims(&self) -> [[usize; 2]; 3] {
        let mut dims = [[0; 2]; 3];
        let (mut h, mut w) = (self.height, self.width);
        let [_, kh, kw] = self.down_kernel;
        let [_, ph, pw] = self.down_padding();
        for d in dims.iter_mut() {
            h = (h + 2 * ph).checked_sub(kh).map_or(0, |v| v / 2 + 1);
            w = (w + 2 * pw).checked_sub(kw).map_or(0, |v| v / 2 + 1);
            *d = [h, w];
        }
        dims
    }

    /// Temporal length after the encoder (equal to `frames`).
    pub fn temporal_len(&self) -> usize {
        let kt = self.down_kernel[0];
        let pt = self.down_padding()[0];
        let mut t = self.frames;
        for _ in 0..3 {
            t = t + 2 * pt + 1 - kt;
        }
        t
    }

    /// Token count before the budget is applied.
    pub fn token_count(&self) -> usize {
        let t = self.temporal_len();
        self.level_dims()[..2].iter().map(|d| t * d[0] * d[1]).sum()
    }

    pub fn se_hidden(&self) -> usize {
        (self.channels[2] / self.se_reduction).max(1)
    }

    /// Width of the concatenated descriptor fed to the head, in units of
    /// the deepest channel count.
    pub fn descriptor_blocks(&self) -> usize {
        let stats = if self.disable_e2fa { 1 } else { 3 };
        let landmark = usize::from(!self.disable_e2cbd);
        stats + landmark
    }
}
