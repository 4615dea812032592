use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::PosMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Convolutions over the embedding axis with patches as channels.
    Fcn,
    ClassToken,
    GlobalPool,
}

impl Head {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fcn" => Some(Head::Fcn),
            "class_token" => Some(Head::ClassToken),
            "global_pool" => Some(Head::GlobalPool),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformerConfig {
    /// Samples per input window.
    pub window_samples: usize,
    /// Sampling rate of the window (Hz).
    pub sample_rate: f64,
    /// Patch length in seconds.
    pub patch_len_s: f64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dw_kernel: usize,
    pub ffn_expansion: usize,
    pub conv_expansion: usize,
    pub pos_mode: PosMode,
    pub head: Head,
    pub fcn_kernel: usize,
    pub fcn_pool: usize,
    pub dropout: f64,
    pub use_conv_module: bool,
    pub use_half_ffn: bool,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            window_samples: 1200,
            sample_rate: 4.0,
            patch_len_s: 25.0,
            d_model: 144,
            n_layers: 3,
            n_heads: 8,
            dw_kernel: 11,
            ffn_expansion: 4,
            conv_expansion: 2,
            pos_mode: PosMode::Relative,
            head: Head::Fcn,
            fcn_kernel: 11,
            fcn_pool: 4,
            dropout: 0.3,
            use_conv_module: true,
            use_half_ffn: true,
        }
    }
}

impl ConformerConfig {
    pub fn patch_samples(&self) -> usize {
        (self.patch_len_s * self.sample_rate).round() as usize
    }

    /// Number of patches (before any class token).
    pub fn n_patches(&self) -> usize {
        self.window_samples / self.patch_samples().max(1)
    }

    /// Sequence length seen by the encoder.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + usize::from(self.head == Head::ClassToken)
    }

    /// Channels after the GLU in the convolution module.
    pub fn conv_inner(&self) -> usize {
        self.conv_expansion * self.d_model / 2
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_len_s * self.sample_rate;
        if !(p >= 1.0) || (p - p.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "patch of {} s at {} Hz is not a whole number of samples",
                self.patch_len_s, self.sample_rate
            )));
        }
        let ps = self.patch_samples();
        if !self.window_samples.is_multiple_of(ps) {
            return Err(Error::Config(format!(
                "window of {} samples is not divisible into patches of {ps}",
                self.window_samples
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pos_mode != PosMode::None && !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("sinusoidal encodings need an even d_model".into()));
        }
        if self.dw_kernel.is_multiple_of(2) || self.fcn_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernels must be odd (dw_kernel {}, fcn_kernel {})",
                self.dw_kernel, self.fcn_kernel
            )));
        }
        if self.conv_expansion == 0 || !(self.conv_expansion * self.d_model).is_multiple_of(2) {
            return Err(Error::Config("conv_expansion * d_model must be even for the GLU".into()));
        }
        if self.ffn_expansion == 0 || self.n_layers == 0 {
            return Err(Error::Config("ffn_expansion and n_layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.head == Head::Fcn {
            if self.n_patches() < 2 {
                return Err(Error::Config("the fcn head needs at least two patches".into()));
            }
            if self.fcn_pool == 0 || self.d_model < self.fcn_pool {
                return Err(Error::Config(format!(
                    "fcn pooling of {} does not fit d_model {}",
                    self.fcn_pool, self.d_model
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_twelve_patches() {
        let c = ConformerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.patch_samples(), 100);
        assert_eq!(c.n_patches(), 12);
        assert_eq!(c.seq_len(), 12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = |f: fn(&mut ConformerConfig)| {
            let mut c = ConformerConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.patch_len_s = 24.25));
        assert!(bad(|c| c.n_heads = 7));
        assert!(bad(|c| c.dw_kernel = 10));
        assert!(bad(|c| c.fcn_kernel = 4));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| c.patch_len_s = 300.0));
    }

    #[test]
    fn toml_round_trip_with_partial_fields() {
        let c: ConformerConfig = toml::from_str("d_model = 16\nhead = \"class_token\"\npos_mode = \"none\"\n").unwrap();
        assert_eq!(c.d_model, 16);
        assert_eq!(c.head, Head::ClassToken);
        assert_eq!(c.n_layers, 3);
        assert!(toml::from_str::<ConformerConfig>("unknown_key = 1").is_err());
    }
}
