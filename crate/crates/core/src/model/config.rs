use serde::Serialize;

use crate::error::{GemtError, Result};

/// Hyper-parameters of the three-level encoder and its heads.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Videos per sample.
    pub k: usize,
    /// Frames per video.
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            mlp_hidden: 64,
            head_hidden: 32,
            dropout: 0.1,
            ln_eps: 1e-5,
            k: 1,
            t: 8,
            h: 32,
            w: 32,
        }
    }
}

impl EncoderConfig {
    /// The tiny configuration used for gradient checking.
    pub fn tiny() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
            head_hidden: 8,
            dropout: 0.0,
            ln_eps: 1e-5,
            k: 1,
            t: 4,
            h: 16,
            w: 16,
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.h / self.patch_size) * (self.w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GemtError::Config(m));
        if self.patch_size == 0 || !self.h.is_multiple_of(self.patch_size) || !self.w.is_multiple_of(self.patch_size) {
            return err(format!(
                "frame {}x{} not divisible by patch size {}",
                self.h, self.w, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.layers == 0 {
            return err("layers must be >= 1".into());
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return err("hidden widths must be >= 1".into());
        }
        if self.k == 0 || self.t == 0 {
            return err("k and t must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        EncoderConfig::default().validate().unwrap();
        EncoderConfig::tiny().validate().unwrap();
        assert_eq!(EncoderConfig::default().patches_per_frame(), 16);
    }

    #[test]
    fn invariants_enforced() {
        let bad_p = EncoderConfig {
            h: 30,
            ..EncoderConfig::default()
        };
        assert!(bad_p.validate().is_err());
        let bad_heads = EncoderConfig {
            heads: 5,
            ..EncoderConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_l = EncoderConfig {
            layers: 0,
            ..EncoderConfig::default()
        };
        assert!(bad_l.validate().is_err());
    }
}
