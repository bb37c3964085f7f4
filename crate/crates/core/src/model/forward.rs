use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadId};
use crate::tensor::{matmul, rmsnorm_into, rope_in_place, softmax_prefix, Tensor};

/// What a forward pass should record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstrumentationSpec {
    pub capture_attention: bool,
    pub capture_hidden_states: bool,
    /// Per-head attention outputs (`T × d_head`, before the output projection).
    pub capture_head_outputs: bool,
    /// Restrict capture to these layers; `None` means all.
    pub layers: Option<Vec<usize>>,
}

impl InstrumentationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn attention() -> Self {
        InstrumentationSpec { capture_attention: true, ..Self::default() }
    }

    pub fn hidden_states() -> Self {
        InstrumentationSpec { capture_hidden_states: true, ..Self::default() }
    }

    pub fn head_outputs() -> Self {
        InstrumentationSpec { capture_head_outputs: true, ..Self::default() }
    }

    pub fn all() -> Self {
        InstrumentationSpec {
            capture_attention: true,
            capture_hidden_states: true,
            capture_head_outputs: true,
            layers: None,
        }
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    fn wants(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }
}

/// Captured maps and hidden states from one prefill pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub seq_len: usize,
    /// `T × T` post-softmax attention probabilities, row = query.
    pub attention: BTreeMap<HeadId, Tensor>,
    /// Block inputs, `T × d_model`.
    pub hidden_in: BTreeMap<usize, Tensor>,
    /// Block outputs, `T × d_model`.
    pub hidden_out: BTreeMap<usize, Tensor>,
    pub head_outputs: BTreeMap<HeadId, Tensor>,
}

/// Heads whose per-head attention output is forced to zero before the output
/// projection.
pub type HeadMask = BTreeSet<HeadId>;

pub fn forward(ckpt: &Checkpoint, tokens: &[u32], spec: &InstrumentationSpec) -> Result<(Tensor, AttentionTrace)> {
    forward_with_mask(ckpt, tokens, spec, &HeadMask::new())
}

/// Prefill pass over `tokens`. Position 0 is the BOS position whatever its id.
pub fn forward_with_mask(
    ckpt: &Checkpoint,
    tokens: &[u32],
    spec: &InstrumentationSpec,
    mask: &HeadMask,
) -> Result<(Tensor, AttentionTrace)> {
    let cfg = &ckpt.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    if t_len > cfg.max_seq_len {
        return Err(Error::Input(format!("sequence of {t_len} tokens exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(layers) = &spec.layers {
        if let Some(&bad) = layers.iter().find(|&&l| l >= cfg.n_layers) {
            return Err(Error::Index(format!("instrumented layer {bad} outside a {}-layer model", cfg.n_layers)));
        }
    }

    let d = cfg.d_model;
    let mut x = Tensor::zeros(&[t_len, d]);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(ckpt.embedding.row(tok as usize));
    }

    let mut trace = AttentionTrace { seq_len: t_len, ..Default::default() };
    let mut normed = Tensor::zeros(&[t_len, d]);
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let group = cfg.group_size();

    for (layer, block) in ckpt.blocks.iter().enumerate() {
        let capture = spec.wants(layer);
        if capture && spec.capture_hidden_states {
            trace.hidden_in.insert(layer, x.clone());
        }

        for t in 0..t_len {
            rmsnorm_into(x.row(t), block.attn_norm.data(), cfg.norm_eps, normed.row_mut(t));
        }
        let mut q = matmul(&normed, &block.wq)?;
        let mut k = matmul(&normed, &block.wk)?;
        let v = matmul(&normed, &block.wv)?;
        for t in 0..t_len {
            for chunk in q.row_mut(t).chunks_exact_mut(cfg.d_head) {
                rope_in_place(chunk, t, cfg.rope_theta)?;
            }
            for chunk in k.row_mut(t).chunks_exact_mut(cfg.d_head) {
                rope_in_place(chunk, t, cfg.rope_theta)?;
            }
        }

        let mut heads_out = Tensor::zeros(&[t_len, cfg.attn_width()]);
        let mut scores = vec![0.0f32; t_len];
        let mut probs = Tensor::zeros(&[t_len, t_len]);
        for h in 0..cfg.n_heads {
            let g = h / group;
            let (qo, ko) = (h * cfg.d_head, g * cfg.d_head);
            for t in 0..t_len {
                let q_t = &q.row(t)[qo..qo + cfg.d_head];
                for (s, slot) in scores.iter_mut().enumerate().take(t + 1) {
                    let k_s = &k.row(s)[ko..ko + cfg.d_head];
                    let dot: f64 = q_t.iter().zip(k_s).map(|(&a, &b)| a as f64 * b as f64).sum();
                    *slot = (dot * scale) as f32;
                }
                softmax_prefix(&scores, t + 1, probs.row_mut(t));
            }
            if !mask.contains(&(layer, h)) {
                for t in 0..t_len {
                    let mut acc = vec![0.0f64; cfg.d_head];
                    for s in 0..=t {
                        let p = probs.at(t, s) as f64;
                        let v_s = &v.row(s)[ko..ko + cfg.d_head];
                        for (a, &vv) in acc.iter_mut().zip(v_s) {
                            *a += p * vv as f64;
                        }
                    }
                    for (dst, a) in heads_out.row_mut(t)[qo..qo + cfg.d_head].iter_mut().zip(acc) {
                        *dst = a as f32;
                    }
                }
            }
            if capture && spec.capture_head_outputs {
                let mut ho = Tensor::zeros(&[t_len, cfg.d_head]);
                for t in 0..t_len {
                    ho.row_mut(t).copy_from_slice(&heads_out.row(t)[qo..qo + cfg.d_head]);
                }
                trace.head_outputs.insert((layer, h), ho);
            }
            if capture && spec.capture_attention {
                trace.attention.insert((layer, h), probs.clone());
            }
        }

        let attn = matmul(&heads_out, &block.wo)?;
        add_in_place(&mut x, &attn);

        for t in 0..t_len {
            rmsnorm_into(x.row(t), block.mlp_norm.data(), cfg.norm_eps, normed.row_mut(t));
        }
        let gate = matmul(&normed, &block.w_gate)?;
        let mut up = matmul(&normed, &block.w_up)?;
        for (u, &g) in up.data_mut().iter_mut().zip(gate.data()) {
            *u *= silu(g);
        }
        let mlp = matmul(&up, &block.w_down)?;
        add_in_place(&mut x, &mlp);

        if capture && spec.capture_hidden_states {
            trace.hidden_out.insert(layer, x.clone());
        }
    }

    for t in 0..t_len {
        rmsnorm_into(x.row(t), ckpt.final_norm.data(), cfg.norm_eps, normed.row_mut(t));
    }
    let logits = matmul(&normed, &ckpt.lm_head)?;
    Ok((logits, trace))
}

fn add_in_place(x: &mut Tensor, delta: &Tensor) {
    for (a, &b) in x.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

fn silu(v: f32) -> f32 {
    let v = v as f64;
    (v / (1.0 + (-v).exp())) as f32
}
