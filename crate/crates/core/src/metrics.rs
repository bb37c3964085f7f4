//! Redundancy scores: attention-sink scores, Block Influence, and the
//! magnitude / activation-scaled structured baselines.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, HeadId, InstrumentationSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Head,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BosHead,
    BosLayer,
    Bi,
    Mag,
    Wanda,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::BosHead, Metric::BosLayer, Metric::Bi, Metric::Mag, Metric::Wanda];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BosHead => "bos_head",
            Metric::BosLayer => "bos_layer",
            Metric::Bi => "bi",
            Metric::Mag => "mag",
            Metric::Wanda => "wanda",
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Metric::BosLayer | Metric::Bi => Granularity::Layer,
            _ => Granularity::Head,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown metric '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub layer: usize,
    /// `None` for layer-granularity tables.
    pub head: Option<usize>,
    pub score: f64,
}

/// Scores for every head or every layer of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metric: Metric,
    pub granularity: Granularity,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Sorted by `(layer, head)`.
    pub entries: Vec<ScoreEntry>,
    pub n_samples: usize,
    pub seq_lens: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ScoreTable {
    /// A table with no entries that only records the model shape; enough for
    /// positional strategies.
    pub fn shape_only(metric: Metric, n_layers: usize, n_heads: usize) -> Self {
        ScoreTable {
            metric,
            granularity: metric.granularity(),
            n_layers,
            n_heads,
            entries: Vec::new(),
            n_samples: 0,
            seq_lens: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn head(&self, (layer, head): HeadId) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == layer && e.head == Some(head)).map(|e| e.score)
    }

    pub fn layer(&self, layer: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == layer && e.head.is_none()).map(|e| e.score)
    }

    /// Entries ordered by descending score, ties by ascending `(layer, head)`.
    pub fn ranked_desc(&self) -> Vec<ScoreEntry> {
        let mut v = self.entries.clone();
        v.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.layer, a.head).cmp(&(b.layer, b.head))));
        v
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut t = self.clone();
        t.entries.iter_mut().for_each(|e| e.score *= factor);
        t
    }
}

/// Mean attention a key position receives: `(1/T)·Σ_t α[t][k]`.
pub fn sink_score(attn: &Tensor, k: usize) -> Result<f64> {
    let t_len = square(attn)?;
    if k >= t_len {
        return Err(Error::Index(format!("key position {k} outside a {t_len}-token map")));
    }
    let sum: f64 = (k..t_len).map(|t| attn.at(t, k) as f64).sum();
    Ok(sum / t_len as f64)
}

/// BOS sink score of one head: the sink score at key 0, averaged over prompts.
pub fn bos_head_score(maps: &[&Tensor]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::Input("no attention maps".into()));
    }
    let mut sum = 0.0;
    for m in maps {
        sum += sink_score(m, 0)?;
    }
    Ok(sum / maps.len() as f64)
}

/// Layer aggregate: arithmetic mean of its head scores.
pub fn bos_layer_score(head_scores: &[f64]) -> Result<f64> {
    if head_scores.is_empty() {
        return Err(Error::Input("layer score needs at least one head".into()));
    }
    Ok(head_scores.iter().sum::<f64>() / head_scores.len() as f64)
}

/// Result of a Block Influence evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Influence {
    pub score: f64,
    /// Token rows skipped because one side had zero norm.
    pub skipped: usize,
}

/// `1 − mean_t cos(x_in[t], x_out[t])`.
pub fn block_influence(x_in: &Tensor, x_out: &Tensor) -> Result<f64> {
    Ok(block_influence_pooled(&[(x_in, x_out)])?.score)
}

/// Block Influence over several prompts with equal weight per token.
pub fn block_influence_pooled(pairs: &[(&Tensor, &Tensor)]) -> Result<Influence> {
    let mut acc = CosineAcc::default();
    for (a, b) in pairs {
        acc.add(a, b)?;
    }
    acc.finish()
}

#[derive(Default)]
struct CosineAcc {
    sum: f64,
    count: usize,
    skipped: usize,
}

impl CosineAcc {
    fn add(&mut self, x_in: &Tensor, x_out: &Tensor) -> Result<()> {
        if x_in.shape() != x_out.shape() || x_in.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "block influence needs matching 2-D states, got {:?} and {:?}",
                x_in.shape(),
                x_out.shape()
            )));
        }
        for t in 0..x_in.rows() {
            let (a, b) = (x_in.row(t), x_out.row(t));
            let dot: f64 = a.iter().zip(b).map(|(&p, &q)| p as f64 * q as f64).sum();
            let na = a.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                self.skipped += 1;
                continue;
            }
            self.sum += (dot / (na * nb)).clamp(-1.0, 1.0);
            self.count += 1;
        }
        Ok(())
    }

    fn finish(self) -> Result<Influence> {
        if self.count == 0 {
            return Err(Error::UndefinedScore("every token row has zero norm".into()));
        }
        Ok(Influence { score: 1.0 - self.sum / self.count as f64, skipped: self.skipped })
    }
}

/// L1 mass of a head's output-projection slice.
pub fn mag_head_score(wo_slice: &Tensor) -> f64 {
    wo_slice.data().iter().map(|&w| (w as f64).abs()).sum()
}

/// `Σ_j act_norms[j] · Σ_i |wo_slice[j][i]|`.
pub fn wanda_head_score(wo_slice: &Tensor, act_norms: &[f64]) -> Result<f64> {
    if wo_slice.rows() != act_norms.len() || wo_slice.shape().len() != 2 {
        return Err(Error::Input(format!(
            "{} activation norms for a slice of shape {:?}",
            act_norms.len(),
            wo_slice.shape()
        )));
    }
    Ok((0..wo_slice.rows())
        .map(|j| act_norms[j] * wo_slice.row(j).iter().map(|&w| (w as f64).abs()).sum::<f64>())
        .sum())
}

/// Runs every prompt through the model and reduces to a [`ScoreTable`].
///
/// Prompts may be evaluated in parallel; the reduction always runs in prompt
/// order, so results do not depend on the thread count.
pub fn scan_model(ckpt: &Checkpoint, prompts: &[Vec<u32>], metric: Metric) -> Result<ScoreTable> {
    if prompts.is_empty() {
        return Err(Error::Input("scan needs at least one prompt".into()));
    }
    let cfg = &ckpt.config;
    let (n_layers, n_heads) = (cfg.n_layers, cfg.n_heads);
    let mut table = ScoreTable::shape_only(metric, n_layers, n_heads);
    table.n_samples = prompts.len();
    table.seq_lens = prompts.iter().map(Vec::len).collect();

    let spec = match metric {
        Metric::BosHead | Metric::BosLayer => InstrumentationSpec::attention(),
        Metric::Bi => InstrumentationSpec::hidden_states(),
        Metric::Wanda => InstrumentationSpec::head_outputs(),
        Metric::Mag => InstrumentationSpec::none(),
    };

    match metric {
        Metric::Mag => {
            table.n_samples = 0;
            table.seq_lens.clear();
            for (l, block) in ckpt.blocks.iter().enumerate() {
                for h in 0..n_heads {
                    let score = mag_head_score(&block.wo_slice(h, cfg.d_head));
                    table.entries.push(ScoreEntry { layer: l, head: Some(h), score });
                }
            }
        }
        Metric::BosHead | Metric::BosLayer => {
            let per_prompt: Vec<Vec<f64>> = prompts
                .par_iter()
                .map(|p| {
                    let (_, tr) = forward(ckpt, p, &spec)?;
                    tr.attention.values().map(|m| sink_score(m, 0)).collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            let mut head_means = vec![0.0f64; n_layers * n_heads];
            for scores in &per_prompt {
                for (acc, s) in head_means.iter_mut().zip(scores) {
                    *acc += s;
                }
            }
            head_means.iter_mut().for_each(|v| *v /= prompts.len() as f64);
            for l in 0..n_layers {
                let row = &head_means[l * n_heads..(l + 1) * n_heads];
                if metric == Metric::BosHead {
                    for (h, &score) in row.iter().enumerate() {
                        table.entries.push(ScoreEntry { layer: l, head: Some(h), score });
                    }
                } else {
                    let score = bos_layer_score(row)?;
                    table.entries.push(ScoreEntry { layer: l, head: None, score });
                }
            }
        }
        Metric::Bi => {
            let traces: Vec<_> =
                prompts.par_iter().map(|p| forward(ckpt, p, &spec).map(|(_, tr)| tr)).collect::<Result<_>>()?;
            for l in 0..n_layers {
                let pairs: Vec<_> = traces.iter().map(|tr| (&tr.hidden_in[&l], &tr.hidden_out[&l])).collect();
                let inf = block_influence_pooled(&pairs)?;
                if inf.skipped > 0 {
                    table.warnings.push(format!("layer {l}: skipped {} zero-norm token rows", inf.skipped));
                }
                table.entries.push(ScoreEntry { layer: l, head: None, score: inf.score });
            }
        }
        Metric::Wanda => {
            let sq: Vec<Vec<f64>> = prompts
                .par_iter()
                .map(|p| {
                    let (_, tr) = forward(ckpt, p, &spec)?;
                    let mut out = Vec::with_capacity(n_layers * n_heads * cfg.d_head);
                    for ho in tr.head_outputs.values() {
                        for j in 0..cfg.d_head {
                            out.push((0..ho.rows()).map(|t| (ho.at(t, j) as f64).powi(2)).sum::<f64>());
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            let mut total = vec![0.0f64; n_layers * n_heads * cfg.d_head];
            for v in &sq {
                for (a, b) in total.iter_mut().zip(v) {
                    *a += b;
                }
            }
            for (l, block) in ckpt.blocks.iter().enumerate() {
                for h in 0..n_heads {
                    let off = (l * n_heads + h) * cfg.d_head;
                    let norms: Vec<f64> = total[off..off + cfg.d_head].iter().map(|v| v.sqrt()).collect();
                    let score = wanda_head_score(&block.wo_slice(h, cfg.d_head), &norms)?;
                    table.entries.push(ScoreEntry { layer: l, head: Some(h), score });
                }
            }
        }
    }
    Ok(table)
}

fn square(m: &Tensor) -> Result<usize> {
    match m.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::Dimension(format!("attention map must be square, got {s:?}"))),
    }
}
