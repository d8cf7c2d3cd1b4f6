use serde::{Deserialize, Serialize};

use crate::error::{LblmError, Result};
use crate::signal::num_freq_bins;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Macaron feed-forward and attention only.
    Transformer,
    /// Adds the convolution module.
    Conformer,
    /// Adds the convolution module and the per-token layer gate.
    GatedConformer,
}

impl BackboneKind {
    pub fn has_conv(self) -> bool {
        !matches!(self, BackboneKind::Transformer)
    }

    pub fn has_gate(self) -> bool {
        matches!(self, BackboneKind::GatedConformer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub subjects: usize,
    /// Rows of the positional table; longer token sequences are rejected.
    pub n_max: usize,
    pub backbone_kind: BackboneKind,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 64,
            conv_kernel: 7,
            patch_len: 25,
            stride: 6,
            subjects: 2,
            n_max: 128,
            backbone_kind: BackboneKind::GatedConformer,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn num_freq_bins(&self) -> usize {
        num_freq_bins(self.patch_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(LblmError::config(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(LblmError::config("conv_kernel must be odd"));
        }
        if self.patch_len < 2 || self.stride == 0 {
            return Err(LblmError::config("patch_len must be >= 2 and stride positive"));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.subjects == 0 || self.n_max == 0 {
            return Err(LblmError::config("layers, ffn_dim, subjects and n_max must be positive"));
        }
        Ok(())
    }
}
