//! Grouped-query decoder-only transformer: weights, forward pass and fixtures.

pub mod fixture;
mod forward;

pub use forward::{forward, forward_with_mask, AttentionTrace, HeadMask, InstrumentationSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A query head, addressed by `(layer, head)`.
pub type HeadId = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_theta: f32,
    pub norm_eps: f32,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Structural checks. Layer-pruning strategies additionally require
    /// `n_layers >= 3`; see [`crate::pruning::rank_targets`].
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("d_head must be even, got {}", self.d_head)));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive and finite".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be non-negative and finite".into()));
        }
        Ok(())
    }

    /// Width of the concatenated query heads, `n_heads · d_head`.
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Number of query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn n_total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `(n_heads·d_head) × d_model`; rows `h·d_head .. (h+1)·d_head` belong to head `h`.
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
}

/// Tensor-name suffixes inside a block, in storage order.
pub const BLOCK_TENSORS: [&str; 9] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_gate", "w_down"];

impl BlockWeights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        BlockWeights {
            attn_norm: Tensor::filled(&[cfg.d_model], 1.0),
            wq: Tensor::zeros(&[cfg.d_model, cfg.attn_width()]),
            wk: Tensor::zeros(&[cfg.d_model, cfg.kv_width()]),
            wv: Tensor::zeros(&[cfg.d_model, cfg.kv_width()]),
            wo: Tensor::zeros(&[cfg.attn_width(), cfg.d_model]),
            mlp_norm: Tensor::filled(&[cfg.d_model], 1.0),
            w_up: Tensor::zeros(&[cfg.d_model, cfg.d_ff]),
            w_gate: Tensor::zeros(&[cfg.d_model, cfg.d_ff]),
            w_down: Tensor::zeros(&[cfg.d_ff, cfg.d_model]),
        }
    }

    pub fn expected_shape(cfg: &ModelConfig, name: &str) -> Option<Vec<usize>> {
        let s = match name {
            "attn_norm" | "mlp_norm" => vec![cfg.d_model],
            "wq" => vec![cfg.d_model, cfg.attn_width()],
            "wk" | "wv" => vec![cfg.d_model, cfg.kv_width()],
            "wo" => vec![cfg.attn_width(), cfg.d_model],
            "w_up" | "w_gate" => vec![cfg.d_model, cfg.d_ff],
            "w_down" => vec![cfg.d_ff, cfg.d_model],
            _ => return None,
        };
        Some(s)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "attn_norm" => &self.attn_norm,
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "wo" => &self.wo,
            "mlp_norm" => &self.mlp_norm,
            "w_up" => &self.w_up,
            "w_gate" => &self.w_gate,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        Some(match name {
            "attn_norm" => &mut self.attn_norm,
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "wo" => &mut self.wo,
            "mlp_norm" => &mut self.mlp_norm,
            "w_up" => &mut self.w_up,
            "w_gate" => &mut self.w_gate,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }

    /// The output-projection slice of head `h`, `d_head × d_model`.
    pub fn wo_slice(&self, head: usize, d_head: usize) -> Tensor {
        let cols = self.wo.cols();
        let rows = &self.wo.data()[head * d_head * cols..(head + 1) * d_head * cols];
        Tensor::new(vec![d_head, cols], rows.to_vec()).expect("slice shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    /// Applied prunes, oldest first.
    pub provenance: Vec<String>,
}

impl Checkpoint {
    /// All-zero blocks, unit norms, zero embedding and head.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Checkpoint {
            embedding: Tensor::zeros(&[config.vocab_size, config.d_model]),
            blocks: (0..config.n_layers).map(|_| BlockWeights::zeros(&config)).collect(),
            final_norm: Tensor::filled(&[config.d_model], 1.0),
            lm_head: Tensor::zeros(&[config.d_model, config.vocab_size]),
            provenance: Vec::new(),
            config,
        })
    }

    /// Checks every structural invariant: config, tensor shapes, finiteness.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "config declares {} layers but checkpoint holds {} blocks",
                cfg.n_layers,
                self.blocks.len()
            )));
        }
        for (name, tensor) in self.named_tensors() {
            let want = expected_shape(cfg, &name).ok_or_else(|| Error::Config(format!("unknown tensor {name}")))?;
            if tensor.shape() != want.as_slice() {
                return Err(Error::Dimension(format!("{name}: expected shape {want:?}, got {:?}", tensor.shape())));
            }
            if !tensor.is_finite() {
                return Err(Error::CorruptWeights(format!("{name} contains NaN or Inf")));
            }
        }
        Ok(())
    }

    /// Tensors in canonical storage order with their manifest names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, block) in self.blocks.iter().enumerate() {
            for suffix in BLOCK_TENSORS {
                out.push((format!("blocks.{i}.{suffix}"), block.tensor(suffix).unwrap()));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn check_head(&self, (layer, head): HeadId) -> Result<()> {
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::Index(format!(
                "head ({layer}, {head}) outside a {}x{} model",
                self.config.n_layers, self.config.n_heads
            )));
        }
        Ok(())
    }
}

/// Expected shape for a manifest tensor name under `cfg`, or `None` if the
/// name is not part of the scheme.
pub fn expected_shape(cfg: &ModelConfig, name: &str) -> Option<Vec<usize>> {
    match name {
        "embedding" => Some(vec![cfg.vocab_size, cfg.d_model]),
        "final_norm" => Some(vec![cfg.d_model]),
        "lm_head" => Some(vec![cfg.d_model, cfg.vocab_size]),
        _ => {
            let rest = name.strip_prefix("blocks.")?;
            let (idx, suffix) = rest.split_once('.')?;
            let idx: usize = idx.parse().ok()?;
            if idx >= cfg.n_layers {
                return None;
            }
            BlockWeights::expected_shape(cfg, suffix)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 4,
            n_kv_heads: 2,
            d_head: 4,
            d_ff: 12,
            vocab_size: 16,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            max_seq_len: 32,
        }
    }

    #[test]
    fn config_rejects_bad_grouping() {
        let mut c = tiny_config();
        c.n_kv_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.d_head = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_checkpoint_is_valid() {
        let ck = Checkpoint::zeros(tiny_config()).unwrap();
        ck.validate().unwrap();
        assert_eq!(ck.named_tensors().len(), 3 + 9 * 3);
    }

    #[test]
    fn validate_catches_non_finite_and_shape() {
        let mut ck = Checkpoint::zeros(tiny_config()).unwrap();
        ck.blocks[1].wo.data_mut()[3] = f32::NAN;
        assert!(matches!(ck.validate(), Err(Error::CorruptWeights(_))));
        let mut ck = Checkpoint::zeros(tiny_config()).unwrap();
        ck.blocks[0].wq = Tensor::zeros(&[8, 3]);
        assert!(matches!(ck.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn wo_slice_takes_row_block() {
        let cfg = tiny_config();
        let mut b = BlockWeights::zeros(&cfg);
        b.wo = Tensor::from_fn(&[16, 8], |i| i as f32);
        let s = b.wo_slice(2, 4);
        assert_eq!(s.shape(), &[4, 8]);
        assert_eq!(s.data()[0], (2 * 4 * 8) as f32);
    }

    #[test]
    fn expected_shape_names() {
        let cfg = tiny_config();
        assert_eq!(expected_shape(&cfg, "blocks.2.wk"), Some(vec![8, 8]));
        assert_eq!(expected_shape(&cfg, "blocks.3.wk"), None);
        assert_eq!(expected_shape(&cfg, "blocks.0.bogus"), None);
        assert_eq!(expected_shape(&cfg, "lm_head"), Some(vec![8, 16]));
    }
}
