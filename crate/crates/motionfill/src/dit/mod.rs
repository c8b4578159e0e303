//! Diffusion Transformer backbone: channel-concatenated input projection,
//! convolutional positional embedding, timestep modulation, rotary positions,
//! biased windowed self/cross attention, and the velocity head.

pub mod model;
pub mod ops;
pub mod params;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MOTION_WIDTH;

pub use model::{backward, forward, ForwardCache};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, DiTParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiTConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Self-attention half-window; `None` means unrestricted.
    pub self_window: Option<usize>,
    /// Cross-attention half-window around the aligned speech position.
    pub cross_window: Option<usize>,
    /// Positions are divided by this before rotation.
    pub rope_scale: f64,
    pub motion_width: usize,
    pub speech_dim: usize,
    /// Depthwise temporal conv kernel for the positional embedding.
    pub conv_kernel: usize,
}

impl DiTConfig {
    /// Full-scale configuration: 22 layers, 16 heads, 1024/2024 dims.
    pub fn full(speech_dim: usize) -> Self {
        Self {
            n_layers: 22,
            n_heads: 16,
            d_model: 1024,
            d_ffn: 2024,
            self_window: None,
            cross_window: None,
            rope_scale: 1.0,
            motion_width: MOTION_WIDTH,
            speech_dim,
            conv_kernel: 31,
        }
    }

    /// Small preset used by tests and the synthetic acceptance runs.
    pub fn toy(speech_dim: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            // wide enough that the middle of a typical masked span still
            // attends directly to unmasked context
            self_window: Some(16),
            cross_window: Some(16),
            rope_scale: 1.0,
            motion_width: MOTION_WIDTH,
            speech_dim,
            conv_kernel: 31,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::validation("layers and heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation("d_model must be divisible by n_heads"));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::validation("head dim must be even for rotary positions"));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::validation("d_model must be even"));
        }
        if self.self_window == Some(0) || self.cross_window == Some(0) {
            return Err(Error::validation("attention windows must be >= 1"));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::validation("conv kernel must be odd"));
        }
        if !(self.rope_scale > 0.0) {
            return Err(Error::validation("rope_scale must be positive"));
        }
        if self.motion_width == 0 || self.speech_dim == 0 {
            return Err(Error::validation("motion and speech widths must be positive"));
        }
        Ok(())
    }
}

/// A T_q x T_k additive bias with entries in {0, -inf}; every row keeps a
/// non-empty admitted set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias(Array2<f64>);

impl AttentionBias {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]] == 0.0
    }
}

/// Self-attention bias: B(i,j) = 0 iff i - w <= j < i + w.
pub fn build_self_bias(t: usize, w: usize) -> Result<AttentionBias> {
    if w < 1 {
        return Err(Error::validation("self window must be >= 1"));
    }
    if t < 1 {
        return Err(Error::validation("sequence length must be >= 1"));
    }
    let mut b = Array2::from_elem((t, t), f64::NEG_INFINITY);
    for i in 0..t {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(t);
        for j in lo..hi {
            b[[i, j]] = 0.0;
        }
    }
    Ok(AttentionBias(b))
}

/// Cross-attention bias for query length T_q over key length N_k: row i
/// admits keys within w_c of the proportionally aligned center
/// c_i = round(i * N_k / T_q), clipped into [0, N_k).
pub fn build_cross_bias(t_q: usize, n_k: usize, w_c: usize) -> Result<AttentionBias> {
    if t_q < 1 || n_k < 1 {
        return Err(Error::validation("bias dimensions must be >= 1"));
    }
    if w_c < 1 {
        return Err(Error::validation("cross window must be >= 1"));
    }
    let mut b = Array2::from_elem((t_q, n_k), f64::NEG_INFINITY);
    for i in 0..t_q {
        let center = ((i as f64 * n_k as f64 / t_q as f64).round() as usize).min(n_k - 1);
        let lo = center.saturating_sub(w_c);
        let hi = (center + w_c).min(n_k);
        for j in lo..hi {
            b[[i, j]] = 0.0;
        }
    }
    Ok(AttentionBias(b))
}
