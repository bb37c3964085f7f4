//! Ranking strategies and the two structural edits: head ablation by zeroing
//! output-projection slices, and whole-block removal.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Granularity, Metric, ScoreEntry, ScoreTable};
use crate::model::{Checkpoint, HeadId};

/// Slack for `floor(ratio · units)` so that e.g. `0.29 · 100` counts 29.
const RATIO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    BosHeadDesc,
    BosLayerDesc,
    BiAsc,
    MagAsc,
    WandaAsc,
    BottomUp,
    TopDown,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::BosHeadDesc,
        Strategy::BosLayerDesc,
        Strategy::BiAsc,
        Strategy::MagAsc,
        Strategy::WandaAsc,
        Strategy::BottomUp,
        Strategy::TopDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BosHeadDesc => "bos_head_desc",
            Strategy::BosLayerDesc => "bos_layer_desc",
            Strategy::BiAsc => "bi_asc",
            Strategy::MagAsc => "mag_asc",
            Strategy::WandaAsc => "wanda_asc",
            Strategy::BottomUp => "bottom_up",
            Strategy::TopDown => "top_down",
        }
    }

    /// The score a strategy ranks by; `None` for positional strategies.
    pub fn metric(self) -> Option<Metric> {
        match self {
            Strategy::BosHeadDesc => Some(Metric::BosHead),
            Strategy::BosLayerDesc => Some(Metric::BosLayer),
            Strategy::BiAsc => Some(Metric::Bi),
            Strategy::MagAsc => Some(Metric::Mag),
            Strategy::WandaAsc => Some(Metric::Wanda),
            Strategy::BottomUp | Strategy::TopDown => None,
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            Strategy::BosHeadDesc | Strategy::MagAsc | Strategy::WandaAsc => Granularity::Head,
            _ => Granularity::Layer,
        }
    }

    fn descending(self) -> bool {
        matches!(self, Strategy::BosHeadDesc | Strategy::BosLayerDesc)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Target {
    pub layer: usize,
    /// `None` for a whole layer.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<usize>,
}

/// An ordered removal plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub granularity: Granularity,
    pub strategy: Strategy,
    pub ratio: f64,
    /// Removal order, most redundant first.
    pub targets: Vec<Target>,
    /// Layers never removed by layer strategies: always the first and last.
    pub protected_layers: Vec<usize>,
    /// Whether heads inside protected layers were excluded. Head strategies
    /// treat every head as a candidate, so this is always `false`.
    pub protect_heads: bool,
    /// Units in the ratio denominator: `L·H` heads or `L` layers.
    pub unit_count: usize,
}

impl PruneSpec {
    pub fn heads(&self) -> Vec<HeadId> {
        self.targets.iter().filter_map(|t| t.head.map(|h| (t.layer, h))).collect()
    }

    pub fn layers(&self) -> Vec<usize> {
        self.targets.iter().filter(|t| t.head.is_none()).map(|t| t.layer).collect()
    }
}

/// Orders the units a strategy would remove and truncates to `ratio`.
///
/// Score strategies sort descending (`bos_*`) or ascending (`bi`, `mag`,
/// `wanda`); ties always go to the lower `(layer, head)`. Layer strategies
/// never emit the first or last layer, but count them in the denominator.
pub fn rank_targets(scores: &ScoreTable, strategy: Strategy, ratio: f64) -> Result<PruneSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("ratio {ratio} outside [0, 1]")));
    }
    let (n_layers, n_heads) = (scores.n_layers, scores.n_heads);
    let granularity = strategy.granularity();

    if let Some(metric) = strategy.metric() {
        if scores.metric != metric {
            return Err(Error::Config(format!(
                "strategy {strategy} ranks by {metric} scores, got a {} table",
                scores.metric
            )));
        }
        let want = match granularity {
            Granularity::Head => n_layers * n_heads,
            Granularity::Layer => n_layers,
        };
        if scores.entries.len() != want {
            return Err(Error::Input(format!(
                "{} table has {} entries, expected {want}",
                scores.metric,
                scores.entries.len()
            )));
        }
    }

    let protected = if granularity == Granularity::Layer {
        if n_layers < 3 {
            return Err(Error::Config(format!("layer pruning needs at least 3 layers, model has {n_layers}")));
        }
        vec![0, n_layers - 1]
    } else {
        Vec::new()
    };

    let unit_count = match granularity {
        Granularity::Head => n_layers * n_heads,
        Granularity::Layer => n_layers,
    };
    let count = (ratio * unit_count as f64 + RATIO_EPS).floor() as usize;
    if granularity == Granularity::Layer && count > n_layers - 2 {
        return Err(Error::Config(format!(
            "ratio {ratio} removes {count} of {n_layers} layers but only {} are prunable",
            n_layers - 2
        )));
    }

    let ordered: Vec<Target> = match strategy {
        Strategy::BottomUp => (1..n_layers - 1).map(|l| Target { layer: l, head: None }).collect(),
        Strategy::TopDown => (1..n_layers - 1).rev().map(|l| Target { layer: l, head: None }).collect(),
        _ => {
            let mut entries: Vec<ScoreEntry> =
                scores.entries.iter().copied().filter(|e| !protected.contains(&e.layer)).collect();
            let desc = strategy.descending();
            entries.sort_by(|a, b| {
                let by_score = if desc { b.score.total_cmp(&a.score) } else { a.score.total_cmp(&b.score) };
                by_score.then((a.layer, a.head).cmp(&(b.layer, b.head)))
            });
            entries.into_iter().map(|e| Target { layer: e.layer, head: e.head }).collect()
        }
    };

    Ok(PruneSpec {
        granularity,
        strategy,
        ratio,
        targets: ordered.into_iter().take(count).collect(),
        protected_layers: protected,
        protect_heads: false,
        unit_count,
    })
}

/// Zeroes the output-projection rows of each listed head. Shapes are unchanged.
pub fn ablate_heads(ckpt: &Checkpoint, heads: &[HeadId]) -> Result<Checkpoint> {
    for &h in heads {
        ckpt.check_head(h)?;
    }
    let mut out = ckpt.clone();
    let (dh, d) = (out.config.d_head, out.config.d_model);
    for &(layer, head) in heads {
        out.blocks[layer].wo.data_mut()[head * dh * d..(head + 1) * dh * d].fill(0.0);
    }
    let list = if heads.is_empty() {
        "none".to_string()
    } else {
        heads.iter().map(|(l, h)| format!("{l}:{h}")).collect::<Vec<_>>().join(" ")
    };
    out.provenance.push(format!("ablate_heads {list}"));
    Ok(out)
}

/// Removes whole blocks; the survivors keep their order and are renumbered.
pub fn drop_layers(ckpt: &Checkpoint, layers: &[usize]) -> Result<Checkpoint> {
    remove_blocks(ckpt, layers, true)
}

pub(crate) fn remove_blocks(ckpt: &Checkpoint, layers: &[usize], protect: bool) -> Result<Checkpoint> {
    let n = ckpt.config.n_layers;
    let mut set = BTreeSet::new();
    for &l in layers {
        if l >= n {
            return Err(Error::Index(format!("layer {l} outside a {n}-layer model")));
        }
        if protect && (l == 0 || l == n - 1) {
            return Err(Error::Policy(format!("layer {l} is protected (first and last layers are kept)")));
        }
        if !set.insert(l) {
            return Err(Error::Input(format!("layer {l} listed twice")));
        }
    }
    if set.len() == n {
        return Err(Error::Config("cannot remove every layer".into()));
    }
    let mut out = ckpt.clone();
    out.blocks = ckpt.blocks.iter().enumerate().filter(|(i, _)| !set.contains(i)).map(|(_, b)| b.clone()).collect();
    out.config.n_layers = out.blocks.len();
    let list = if set.is_empty() {
        "none".to_string()
    } else {
        set.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    };
    out.provenance.push(format!("drop_layers {list} (of {n})"));
    Ok(out)
}

/// Applies a plan to produce a new checkpoint.
pub fn apply(ckpt: &Checkpoint, spec: &PruneSpec) -> Result<Checkpoint> {
    let mut out = match spec.granularity {
        Granularity::Head => ablate_heads(ckpt, &spec.heads())?,
        Granularity::Layer => drop_layers(ckpt, &spec.layers())?,
    };
    let last = out.provenance.pop().unwrap_or_default();
    out.provenance.push(format!("prune strategy={} ratio={}: {last}", spec.strategy, spec.ratio));
    Ok(out)
}
