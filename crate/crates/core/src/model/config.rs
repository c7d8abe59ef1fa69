use serde::{Deserialize, Serialize};

use crate::matchloss::LossConfig;
use crate::{Error, Result};

/// Ablation switches. The default enables every relation and both fusion
/// features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub use_ternary: bool,
    pub use_unary: bool,
    pub use_pairwise: bool,
    pub propagate_h: bool,
    pub propagate_o: bool,
    pub propagate_i: bool,
    /// Fusion MLPs read `[f; m]` instead of `m` alone.
    pub fusion_conditioning: bool,
    /// Gate the fused update with a sigmoid channel attention.
    pub fusion_channel: bool,
    /// Drop the residual connection and layer norm around relation-module
    /// attentions.
    pub bare_mure_attention: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            use_ternary: true,
            use_unary: true,
            use_pairwise: true,
            propagate_h: true,
            propagate_o: true,
            propagate_i: true,
            fusion_conditioning: true,
            fusion_channel: true,
            bare_mure_attention: false,
        }
    }
}

impl Flags {
    pub fn propagate(&self) -> [bool; 3] {
        [self.propagate_h, self.propagate_o, self.propagate_i]
    }

    /// Whether the relation module runs at all.
    pub fn relation_active(&self) -> bool {
        self.use_ternary && self.propagate().iter().any(|&p| p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `D`.
    pub d: usize,
    pub patch: usize,
    /// `(height, width, channels)`.
    pub image: [usize; 3],
    pub encoder_layers: usize,
    pub branch_layers: usize,
    pub queries: usize,
    pub heads: usize,
    /// Object classes, not counting background.
    pub num_obj: usize,
    pub num_int: usize,
    pub k_top: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub flags: Flags,
}

impl ModelConfig {
    /// Desk-scale default.
    pub fn toy() -> Self {
        Self {
            d: 32,
            patch: 8,
            image: [64, 64, 3],
            encoder_layers: 2,
            branch_layers: 2,
            queries: 8,
            heads: 2,
            num_obj: 4,
            num_int: 5,
            k_top: 16,
            loss: LossConfig::default(),
            flags: Flags::default(),
        }
    }

    /// Full-size layout: six branch layers and 64 queries.
    pub fn paper() -> Self {
        Self {
            d: 256,
            patch: 32,
            image: [512, 512, 3],
            encoder_layers: 2,
            branch_layers: 6,
            queries: 64,
            heads: 8,
            num_obj: 80,
            num_int: 117,
            k_top: 100,
            loss: LossConfig::default(),
            flags: Flags::default(),
        }
    }

    /// Smallest useful instance, sized for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d: 16,
            patch: 8,
            image: [32, 32, 3],
            encoder_layers: 1,
            branch_layers: 2,
            queries: 4,
            heads: 2,
            num_obj: 2,
            num_int: 3,
            k_top: 8,
            loss: LossConfig::default(),
            flags: Flags::default(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image[0] / self.patch, self.image[1] / self.patch)
    }

    /// Image token count `T`.
    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.image[2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w, c] = self.image;
        if self.d == 0 || self.heads == 0 || self.patch == 0 || h == 0 || w == 0 || c == 0 {
            return bad("dimensions must be positive".into());
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return bad(format!("image {h}×{w} is not divisible by patch {}", self.patch));
        }
        if self.d % (4 * self.heads) != 0 {
            return bad(format!("d = {} must be divisible by 4·heads = {}", self.d, 4 * self.heads));
        }
        if self.branch_layers == 0 || self.queries == 0 || self.num_obj == 0 || self.num_int == 0 || self.k_top == 0 {
            return bad("branch_layers, queries, num_obj, num_int and k_top must be positive".into());
        }
        if (self.flags.use_unary || self.flags.use_pairwise) && !self.flags.use_ternary {
            return bad("use_unary and use_pairwise require use_ternary".into());
        }
        let l = &self.loss;
        let weights = [l.lambda_l1, l.lambda_giou, l.lambda_oc, l.lambda_ic, l.bg_weight, l.focal_gamma];
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if l.bg_weight == 0.0 {
            return bad("bg_weight must be positive".into());
        }
        if let Some(a) = l.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("focal_alpha {a} outside [0, 1]"));
            }
        }
        Ok(())
    }
}
