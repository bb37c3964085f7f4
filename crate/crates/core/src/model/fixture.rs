//! Deterministic test models with hand-planted attention heads.
//!
//! The planted fixtures use a fixed residual layout:
//!
//! | dims                 | content                                   |
//! |----------------------|-------------------------------------------|
//! | `0`                  | constant bias feature, large for every token |
//! | `1`                  | marker feature (1 only for `?`)           |
//! | `2 .. 2+ANSWERS`     | one-hot identity of the answer tokens     |
//! | middle               | random token content                      |
//! | last `d_model/8`     | junk dims nothing reads                   |
//!
//! Keys carry a position-independent constant in some rotary pairs, so a
//! query's phase alone decides the relative-position preference:
//!
//! * sink heads score `A·sin(ω·Δ)` on a slow pair, which grows with distance
//!   and puts the mass on the farthest key, position 0;
//! * diagonal heads score `A·Σ cos(ωᵢ·Δ)` over the fast pairs, peaked at Δ = 0;
//! * routing heads use the sink geometry but take their query from the
//!   marker feature, so only a `?` query looks back at position 0. Their value
//!   is the identity block and their output lands on the identity dims that
//!   the answer tokens' logits read.
//!
//! The bias feature dominates every residual norm, which keeps the RMSNorm
//! factor nearly identical across tokens and layers. Planted scores reach
//! the thousands, so any per-token jitter in key norms would otherwise swamp
//! the per-position margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockWeights, Checkpoint, HeadId, ModelConfig};
use crate::tensor::{rope_frequency, Tensor};

/// Token whose embedding carries the marker feature.
pub const MARKER_TOKEN: u32 = b'?' as u32;
/// First answer token; answers are `ANSWER_BASE .. ANSWER_BASE + ANSWER_TOKENS`.
pub const ANSWER_BASE: u32 = b'A' as u32;
pub const ANSWER_TOKENS: usize = 16;

/// Pre-softmax score gap that planted heads are built to achieve.
const TARGET_MARGIN: f64 = 12.0;
const ROUTING_GAIN: f32 = 1.5;
const BIAS: f32 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    Sink,
    Diagonal,
    Uniform,
    Routing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Unplanted heads and MLPs get small random weights.
    Random,
    /// Everything not planted is zero.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub role: HeadRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRecipe {
    pub config: ModelConfig,
    pub seed: u64,
    pub background: Background,
    pub heads: Vec<PlantedHead>,
}

impl SinkRecipe {
    pub fn default_config() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 2,
            d_head: 16,
            d_ff: 128,
            vocab_size: 256,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            max_seq_len: 128,
        }
    }

    /// Two sink heads in the deep layers, one routing head, one diagonal head.
    pub fn planted(seed: u64) -> Self {
        let p = |layer, head, role| PlantedHead { layer, head, role };
        SinkRecipe {
            config: Self::default_config(),
            seed,
            background: Background::Random,
            heads: vec![
                p(0, 6, HeadRole::Diagonal),
                p(1, 3, HeadRole::Routing),
                p(2, 0, HeadRole::Sink),
                p(3, 5, HeadRole::Sink),
            ],
        }
    }

    /// All attention and MLP weights zero: every head attends uniformly over
    /// its causal prefix.
    pub fn uniform(seed: u64) -> Self {
        SinkRecipe { config: Self::default_config(), seed, background: Background::Zero, heads: Vec::new() }
    }

    pub fn heads_with(&self, role: HeadRole) -> Vec<HeadId> {
        self.heads.iter().filter(|p| p.role == role).map(|p| (p.layer, p.head)).collect()
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.heads.len() > c.n_total_heads() {
            return Err(Error::Config(format!(
                "recipe plants {} heads but the model has only {}",
                self.heads.len(),
                c.n_total_heads()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.heads {
            if p.layer >= c.n_layers || p.head >= c.n_heads {
                return Err(Error::Config(format!(
                    "planted head ({}, {}) outside a {}x{} model",
                    p.layer, p.head, c.n_layers, c.n_heads
                )));
            }
            if !seen.insert((p.layer, p.head)) {
                return Err(Error::Config(format!("head ({}, {}) planted twice", p.layer, p.head)));
            }
        }
        if c.d_head < ANSWER_TOKENS || c.d_head < 6 {
            return Err(Error::Config(format!("fixture needs d_head >= {ANSWER_TOKENS}, got {}", c.d_head)));
        }
        if c.d_model < 2 + ANSWER_TOKENS + 12 {
            return Err(Error::Config(format!(
                "fixture needs d_model >= {}, got {}",
                2 + ANSWER_TOKENS + 12,
                c.d_model
            )));
        }
        if c.vocab_size <= (ANSWER_BASE as usize + ANSWER_TOKENS).max(b'z' as usize) {
            return Err(Error::Config("fixture needs a byte-sized vocabulary (>= 128)".into()));
        }
        Ok(())
    }
}

struct Layout {
    ident: std::ops::Range<usize>,
    content: std::ops::Range<usize>,
    junk: std::ops::Range<usize>,
    /// Rotary pair used for the look-at-position-0 geometry.
    slow_pair: usize,
    /// Rotary pairs used by diagonal heads.
    fast_pairs: std::ops::Range<usize>,
    /// Rotary pairs left for random content matching.
    free_pairs: std::ops::Range<usize>,
}

impl Layout {
    fn new(c: &ModelConfig) -> Result<Self> {
        let n_junk = (c.d_model / 8).max(4);
        let ident = 2..2 + ANSWER_TOKENS;
        let content = ident.end..c.d_model - n_junk;
        let junk = c.d_model - n_junk..c.d_model;
        let span = (c.max_seq_len.saturating_sub(1)).max(1) as f64;
        let n_pairs = c.d_head / 2;
        let slow_pair =
            (0..n_pairs).find(|&i| rope_frequency(i, c.d_head, c.rope_theta) * span <= 0.5).ok_or_else(|| {
                Error::Config(format!(
                    "no rotary pair is slow enough for max_seq_len {} (raise rope_theta)",
                    c.max_seq_len
                ))
            })?;
        if slow_pair == 0 {
            return Err(Error::Config("rotary pair 0 is too slow for a diagonal head".into()));
        }
        Ok(Layout { ident, content, junk, slow_pair, fast_pairs: 0..slow_pair, free_pairs: slow_pair + 1..n_pairs })
    }
}

/// Builds the checkpoint a recipe describes. Same recipe, same bits.
pub fn build_synthetic_model(recipe: &SinkRecipe) -> Result<Checkpoint> {
    recipe.validate()?;
    let c = recipe.config;
    let lay = Layout::new(&c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let random_bg = recipe.background == Background::Random;

    let mut ck = Checkpoint::zeros(c)?;

    // Embedding.
    let content_dist = Normal::new(0.0f32, 0.3).unwrap();
    for tok in 0..c.vocab_size {
        let row = ck.embedding.row_mut(tok);
        row[0] = BIAS;
        if tok as u32 == MARKER_TOKEN {
            row[1] = 1.0;
        }
        if let Some(i) = answer_index(tok as u32) {
            row[lay.ident.start + i] = 1.0;
        }
        for d in lay.content.clone() {
            row[d] = content_dist.sample(&mut rng);
        }
    }

    // Post-norm value of one raw residual unit; nearly the same for every token.
    let gain = (0..c.vocab_size)
        .map(|t| {
            let row = ck.embedding.row(t);
            let ms = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / row.len() as f64;
            1.0 / ms.sqrt()
        })
        .sum::<f64>()
        / c.vocab_size as f64;
    let inv_gain = (1.0 / gain) as f32;

    // Output head: answer tokens read only the identity block, the rest read
    // their own content vector.
    for tok in 0..c.vocab_size {
        match answer_index(tok as u32) {
            Some(i) => set(&mut ck.lm_head, lay.ident.start + i, tok, 4.0 * inv_gain),
            None => {
                for d in lay.content.clone() {
                    let v = ck.embedding.at(tok, d);
                    set(&mut ck.lm_head, d, tok, v * inv_gain);
                }
            }
        }
    }

    let attn_scale = 1.0 / (c.d_head as f64).sqrt();
    let slow_w = rope_frequency(lay.slow_pair, c.d_head, c.rope_theta);
    let span = (c.max_seq_len - 1).max(1) as f64;
    // Per-step gain of sin(ωΔ) is at least ω·cos(ω·span) across the window.
    let slow_product = TARGET_MARGIN / (slow_w * (slow_w * span).cos()) / attn_scale;
    let slow_amp = slow_product.sqrt();
    let fast_gap = min_cosine_gap(&lay.fast_pairs, &c);
    let fast_product = TARGET_MARGIN / fast_gap / attn_scale;
    let fast_amp = fast_product.sqrt();

    let roles: std::collections::BTreeMap<HeadId, HeadRole> =
        recipe.heads.iter().map(|p| ((p.layer, p.head), p.role)).collect();

    let small = |sd: f32| Normal::new(0.0f32, sd).unwrap();
    let dh = c.d_head;

    for layer in 0..c.n_layers {
        let mut b = BlockWeights::zeros(&c);
        let layer_planted = roles.keys().any(|&(l, _)| l == layer);
        let structured_kv = random_bg || layer_planted;

        if structured_kv {
            for g in 0..c.n_kv_heads {
                let base = g * dh;
                set(&mut b.wk, 0, base + 2 * lay.slow_pair, (slow_amp / (BIAS as f64 * gain)) as f32);
                for i in lay.fast_pairs.clone() {
                    set(&mut b.wk, 0, base + 2 * i, (fast_amp / (BIAS as f64 * gain)) as f32);
                }
                for j in 0..ANSWER_TOKENS {
                    set(&mut b.wv, lay.ident.start + j, base + j, inv_gain);
                }
                if random_bg {
                    for d in lay.content.clone() {
                        for i in lay.free_pairs.clone() {
                            set(&mut b.wk, d, base + 2 * i, small(0.3 * inv_gain).sample(&mut rng));
                            set(&mut b.wk, d, base + 2 * i + 1, small(0.3 * inv_gain).sample(&mut rng));
                        }
                        for j in 0..dh {
                            set(&mut b.wv, d, base + j, small(0.02 * inv_gain).sample(&mut rng));
                        }
                    }
                }
            }
        }

        for h in 0..c.n_heads {
            let q0 = h * dh;
            match roles.get(&(layer, h)) {
                Some(HeadRole::Sink) => {
                    let col = q0 + 2 * lay.slow_pair + 1;
                    set(&mut b.wq, 0, col, (-slow_amp / (BIAS as f64 * gain)) as f32);
                    write_wo(&mut b, &mut rng, h, dh, lay.junk.clone(), 0.05);
                }
                Some(HeadRole::Routing) => {
                    let col = q0 + 2 * lay.slow_pair + 1;
                    set(&mut b.wq, 1, col, (-slow_amp / gain) as f32);
                    for j in 0..ANSWER_TOKENS {
                        set(&mut b.wo, q0 + j, lay.ident.start + j, ROUTING_GAIN);
                    }
                }
                Some(HeadRole::Diagonal) => {
                    for i in lay.fast_pairs.clone() {
                        set(&mut b.wq, 0, q0 + 2 * i, (fast_amp / (BIAS as f64 * gain)) as f32);
                    }
                    write_wo(&mut b, &mut rng, h, dh, lay.junk.clone(), 0.05);
                }
                Some(HeadRole::Uniform) => {
                    if random_bg {
                        write_wo(&mut b, &mut rng, h, dh, lay.content.start..c.d_model, 0.02);
                    }
                }
                None if random_bg => {
                    for d in lay.content.clone() {
                        for i in lay.free_pairs.clone() {
                            set(&mut b.wq, d, q0 + 2 * i, small(0.3 * inv_gain).sample(&mut rng));
                            set(&mut b.wq, d, q0 + 2 * i + 1, small(0.3 * inv_gain).sample(&mut rng));
                        }
                        for i in lay.fast_pairs.clone() {
                            set(&mut b.wq, d, q0 + 2 * i, small(0.01 * inv_gain).sample(&mut rng));
                        }
                    }
                    write_wo(&mut b, &mut rng, h, dh, lay.content.start..c.d_model, 0.02);
                }
                None => {}
            }
        }

        if random_bg {
            let fan = small(inv_gain / (c.d_model as f32).sqrt());
            for d in lay.content.clone() {
                for f in 0..c.d_ff {
                    set(&mut b.w_gate, d, f, fan.sample(&mut rng));
                    set(&mut b.w_up, d, f, fan.sample(&mut rng));
                }
            }
            for f in 0..c.d_ff {
                for d in lay.content.start..c.d_model {
                    set(&mut b.w_down, f, d, small(0.01).sample(&mut rng));
                }
            }
        }
        ck.blocks[layer] = b;
    }

    ck.provenance.push(format!(
        "synthetic fixture: seed={} background={:?} planted=[{}]",
        recipe.seed,
        recipe.background,
        recipe.heads.iter().map(|p| format!("{:?}@{}:{}", p.role, p.layer, p.head)).collect::<Vec<_>>().join(", ")
    ));
    ck.validate()?;
    Ok(ck)
}

/// Dense random model: projections `N(0, 1/fan_in)`, unit norms.
pub fn random_checkpoint(config: ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = |t: &mut Tensor, rng: &mut ChaCha8Rng| {
        let fan_in = t.shape()[0] as f32;
        let dist = Normal::new(0.0f32, 1.0 / fan_in.sqrt()).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    };
    let unit = Normal::new(0.0f32, 1.0).unwrap();
    ck.embedding.data_mut().iter_mut().for_each(|v| *v = unit.sample(&mut rng));
    for b in &mut ck.blocks {
        for name in ["wq", "wk", "wv", "wo", "w_up", "w_gate", "w_down"] {
            fill(b.tensor_mut(name).unwrap(), &mut rng);
        }
    }
    fill(&mut ck.lm_head, &mut rng);
    ck.provenance.push(format!("random model: seed={seed}"));
    Ok(ck)
}

/// Random tokens in `[0, vocab)`.
pub fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub fn answer_index(tok: u32) -> Option<usize> {
    (ANSWER_BASE..ANSWER_BASE + ANSWER_TOKENS as u32).contains(&tok).then(|| (tok - ANSWER_BASE) as usize)
}

fn set(t: &mut Tensor, r: usize, c: usize, v: f32) {
    let cols = t.cols();
    t.data_mut()[r * cols + c] = v;
}

fn write_wo(
    b: &mut BlockWeights,
    rng: &mut ChaCha8Rng,
    head: usize,
    d_head: usize,
    cols: std::ops::Range<usize>,
    sd: f32,
) {
    let dist = Normal::new(0.0f32, sd).unwrap();
    for r in head * d_head..(head + 1) * d_head {
        for c in cols.clone() {
            set(&mut b.wo, r, c, dist.sample(rng));
        }
    }
}

/// `min over Δ in 1..max_seq_len of Σ_i (1 − cos(ω_i·Δ))` across the fast pairs.
fn min_cosine_gap(pairs: &std::ops::Range<usize>, c: &ModelConfig) -> f64 {
    (1..c.max_seq_len.max(2))
        .map(|delta| {
            pairs.clone().map(|i| 1.0 - (rope_frequency(i, c.d_head, c.rope_theta) * delta as f64).cos()).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sink_score;
    use crate::model::{forward, InstrumentationSpec};

    fn bos(ck: &Checkpoint, toks: &[u32], head: HeadId) -> f64 {
        let spec = InstrumentationSpec::attention();
        let (_, tr) = forward(ck, toks, &spec).unwrap();
        sink_score(&tr.attention[&head], 0).unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let a = build_synthetic_model(&SinkRecipe::planted(11)).unwrap();
        let b = build_synthetic_model(&SinkRecipe::planted(11)).unwrap();
        assert_eq!(a, b);
        let c = build_synthetic_model(&SinkRecipe::planted(12)).unwrap();
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn planted_sinks_and_diagonal_hold_on_random_prompts() {
        let recipe = SinkRecipe::planted(0);
        let ck = build_synthetic_model(&recipe).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for len in [8, 17, 64, 128] {
            let toks = random_tokens(&mut rng, len, 256);
            for h in recipe.heads_with(HeadRole::Sink) {
                let s = bos(&ck, &toks, h);
                assert!(s >= 0.9, "sink {h:?} at T={len}: {s}");
            }
            let (_, tr) = forward(&ck, &toks, &InstrumentationSpec::attention()).unwrap();
            let m = &tr.attention[&(0, 6)];
            let diag = (0..len).map(|t| m.at(t, t) as f64).sum::<f64>() / len as f64;
            assert!(diag >= 0.9, "diagonal mass at T={len}: {diag}");
            for (&(l, h), m) in &tr.attention {
                if recipe.heads.iter().any(|p| (p.layer, p.head) == (l, h)) {
                    continue;
                }
                let s = sink_score(m, 0).unwrap();
                assert!(s < 0.5, "background head ({l},{h}) at T={len}: {s}");
            }
        }
    }

    #[test]
    fn single_sink_recipe() {
        let mut recipe = SinkRecipe::planted(3);
        recipe.heads = vec![PlantedHead { layer: 2, head: 0, role: HeadRole::Sink }];
        let ck = build_synthetic_model(&recipe).unwrap();
        let toks: Vec<u32> = b"the quick brown fox jumps over".iter().map(|&b| b as u32).collect();
        assert!(bos(&ck, &toks, (2, 0)) >= 0.9);
    }

    #[test]
    fn zero_recipe_attends_uniformly() {
        let ck = build_synthetic_model(&SinkRecipe::uniform(0)).unwrap();
        let (_, tr) = forward(&ck, &[5, 80, 63, 9, 1], &InstrumentationSpec::attention()).unwrap();
        for m in tr.attention.values() {
            for t in 0..5 {
                for k in 0..=t {
                    assert!((m.at(t, k) - 1.0 / (t + 1) as f32).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn infeasible_recipes_are_rejected() {
        let mut r = SinkRecipe::planted(0);
        r.heads = (0..33).map(|i| PlantedHead { layer: i % 4, head: i % 8, role: HeadRole::Uniform }).collect();
        assert!(matches!(build_synthetic_model(&r), Err(Error::Config(_))));
        let mut r = SinkRecipe::planted(0);
        r.heads.push(PlantedHead { layer: 2, head: 0, role: HeadRole::Diagonal });
        assert!(matches!(build_synthetic_model(&r), Err(Error::Config(_))));
        let mut r = SinkRecipe::planted(0);
        r.heads.push(PlantedHead { layer: 4, head: 0, role: HeadRole::Sink });
        assert!(matches!(build_synthetic_model(&r), Err(Error::Config(_))));
    }
}
