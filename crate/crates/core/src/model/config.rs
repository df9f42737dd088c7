use serde::{Deserialize, Serialize};

use crate::error::{Result, XvwmError};
use crate::sim::ViewId;

/// Shape of the conditional diffusion transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Keep at least `3 * patch_size^2` or the noise head cannot span a patch.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal features fed to the conditioning MLPs.
    pub freq_dim: usize,
    pub diffusion_steps: usize,
    pub context_len: usize,
    /// Views with a row in the view embedding table, in row order.
    pub views: Vec<ViewId>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            hidden_dim: 192,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            freq_dim: 64,
            diffusion_steps: 100,
            context_len: 4,
            views: vec![ViewId::Ego, ViewId::Bev],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XvwmError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "model.image_size {} must be a positive multiple of model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "model.hidden_dim {} must be divisible by model.heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.hidden_dim % 4 != 0 {
            return bad(format!(
                "model.hidden_dim must be divisible by 4, got {}",
                self.hidden_dim
            ));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return bad("model.layers and model.mlp_ratio must be positive".into());
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad(format!("model.freq_dim must be even, got {}", self.freq_dim));
        }
        if self.diffusion_steps < 10 {
            return bad(format!(
                "model.diffusion_steps must be at least 10, got {}",
                self.diffusion_steps
            ));
        }
        if self.context_len != crate::dataset::CONTEXT_LEN {
            return bad(format!(
                "model.context_len must be {}, got {}",
                crate::dataset::CONTEXT_LEN,
                self.context_len
            ));
        }
        if self.views.is_empty() {
            return bad("model.views is empty".into());
        }
        for (i, v) in self.views.iter().enumerate() {
            if self.views[..i].contains(v) {
                return bad(format!("model.views lists {v} twice"));
            }
        }
        Ok(())
    }

    /// Tokens per frame.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Length of one raw patch vector.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn view_row(&self, view: ViewId) -> Result<usize> {
        self.views.iter().position(|&v| v == view).ok_or_else(|| {
            XvwmError::Usage(format!("view {view} has no embedding row in this model"))
        })
    }

    /// List the fields that differ from `other`, for checkpoint mismatch errors.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    out.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(image_size, patch_size, hidden_dim, layers, heads, mlp_ratio, freq_dim, diffusion_steps, context_len, views);
        out
    }
}
