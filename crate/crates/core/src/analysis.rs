//! Sequence-length stability of BOS scores and the four-way attention
//! pattern taxonomy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{scan_model, sink_score, Metric};
use crate::model::{forward, Checkpoint, HeadId, InstrumentationSpec};
use crate::tensor::Tensor;

/// One head's BOS score as a function of prompt length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSeries {
    pub layer: usize,
    pub head: usize,
    /// `(T, score)` sorted by ascending `T`.
    pub points: Vec<(usize, f64)>,
    pub mu: f64,
    pub sigma: f64,
    /// `sigma / mu`; `None` when `mu == 0`.
    pub cv: Option<f64>,
    pub slope: f64,
    pub intercept: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Input("no values".into()));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    Ok((mu, var.sqrt()))
}

/// Coefficient of variation with the population standard deviation.
pub fn cv(values: &[f64]) -> Result<f64> {
    let (mu, sigma) = mean_std(values)?;
    if mu == 0.0 {
        return Err(Error::UndefinedScore("coefficient of variation with zero mean".into()));
    }
    Ok(sigma / mu)
}

/// Ordinary least squares `score ≈ slope·T + intercept`.
pub fn regression_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit("need at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values are equal".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Cuts `n_prompts` prompts per length. Prompt `i` starts at `i · max(lengths)`
/// for every length, so shorter prompts are prefixes of longer ones.
pub fn cut_nested_prompts(
    corpus: &[u32],
    lengths: &[usize],
    n_prompts: usize,
) -> Result<BTreeMap<usize, Vec<Vec<u32>>>> {
    let longest = lengths.iter().copied().max().unwrap_or(0);
    if n_prompts == 0 || longest == 0 {
        return Err(Error::Input("need at least one prompt of positive length".into()));
    }
    if corpus.len() < n_prompts * longest {
        return Err(Error::Input(format!(
            "corpus has {} tokens; {n_prompts} prompts of {longest} need {}",
            corpus.len(),
            n_prompts * longest
        )));
    }
    Ok(lengths
        .iter()
        .map(|&t| {
            let prompts = (0..n_prompts).map(|i| corpus[i * longest..i * longest + t].to_vec()).collect();
            (t, prompts)
        })
        .collect())
}

/// BOS head scores at each length, assembled per head.
pub fn length_sweep(
    ckpt: &Checkpoint,
    corpus: &[u32],
    lengths: &[usize],
    n_prompts: usize,
) -> Result<Vec<LengthSeries>> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != lengths.len() {
        return Err(Error::Input("sequence lengths must be distinct".into()));
    }
    if sorted.len() < 2 {
        return Err(Error::Input("length sweep needs at least two lengths".into()));
    }
    if let Some(&t) = sorted.iter().find(|&&t| t == 0 || t > ckpt.config.max_seq_len) {
        return Err(Error::Input(format!("length {t} outside 1..={}", ckpt.config.max_seq_len)));
    }
    let prompts = cut_nested_prompts(corpus, &sorted, n_prompts)?;

    let mut per_head: BTreeMap<HeadId, Vec<(usize, f64)>> = BTreeMap::new();
    for (&t, ps) in &prompts {
        let table = scan_model(ckpt, ps, Metric::BosHead)?;
        for e in &table.entries {
            per_head.entry((e.layer, e.head.unwrap_or(0))).or_default().push((t, e.score));
        }
    }

    per_head
        .into_iter()
        .map(|((layer, head), points)| {
            let scores: Vec<f64> = points.iter().map(|p| p.1).collect();
            let (mu, sigma) = mean_std(&scores)?;
            let xy: Vec<(f64, f64)> = points.iter().map(|&(t, s)| (t as f64, s)).collect();
            let (slope, intercept) = regression_slope(&xy)?;
            Ok(LengthSeries { layer, head, points, mu, sigma, cv: (mu != 0.0).then(|| sigma / mu), slope, intercept })
        })
        .collect()
}

/// Regression line for a group of heads selected by their mean score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFit {
    /// `None` means all heads.
    pub min_mu: Option<f64>,
    pub n_heads: usize,
    /// `None` when the cohort is empty.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub mean_cv: Option<f64>,
}

impl CohortFit {
    pub fn label(&self) -> String {
        match self.min_mu {
            None => "all".into(),
            Some(m) => format!("mu>={m}"),
        }
    }
}

/// Default cohort thresholds on the per-head mean score.
pub const COHORT_THRESHOLDS: [f64; 2] = [0.6, 0.8];

/// Fits one line per cohort (all heads, then each `mu >= threshold`) over the
/// pooled `(T, score)` points of its members.
pub fn cohort_fits(series: &[LengthSeries], thresholds: &[f64]) -> Vec<CohortFit> {
    std::iter::once(None)
        .chain(thresholds.iter().copied().map(Some))
        .map(|min_mu| {
            let members: Vec<&LengthSeries> = series.iter().filter(|s| min_mu.is_none_or(|m| s.mu >= m)).collect();
            let pts: Vec<(f64, f64)> =
                members.iter().flat_map(|s| s.points.iter().map(|&(t, v)| (t as f64, v))).collect();
            let fit = regression_slope(&pts).ok();
            let cvs: Vec<f64> = members.iter().filter_map(|s| s.cv).collect();
            CohortFit {
                min_mu,
                n_heads: members.len(),
                slope: fit.map(|f| f.0),
                intercept: fit.map(|f| f.1),
                mean_cv: (!cvs.is_empty()).then(|| cvs.iter().sum::<f64>() / cvs.len() as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternLabel {
    BosSink,
    Diagonal,
    Uniform,
    Random,
}

impl fmt::Display for PatternLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternLabel::BosSink => "bos_sink",
            PatternLabel::Diagonal => "diagonal",
            PatternLabel::Uniform => "uniform",
            PatternLabel::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternDiagnostics {
    pub s_bos: f64,
    pub diag_mass: f64,
    /// Row entropy over `ln(support size)`, averaged over rows with support ≥ 2.
    pub entropy_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternThresholds {
    pub bos: f64,
    pub diagonal: f64,
    pub uniform: f64,
}

impl Default for PatternThresholds {
    fn default() -> Self {
        PatternThresholds { bos: 0.6, diagonal: 0.5, uniform: 0.9 }
    }
}

impl PatternThresholds {
    /// Precedence: BOS sink, then diagonal, then uniform, else random.
    pub fn label(&self, d: &PatternDiagnostics) -> PatternLabel {
        if d.s_bos >= self.bos {
            PatternLabel::BosSink
        } else if d.diag_mass >= self.diagonal {
            PatternLabel::Diagonal
        } else if d.entropy_ratio >= self.uniform {
            PatternLabel::Uniform
        } else {
            PatternLabel::Random
        }
    }
}

pub fn pattern_diagnostics(maps: &[&Tensor]) -> Result<PatternDiagnostics> {
    if maps.is_empty() {
        return Err(Error::Input("no attention maps".into()));
    }
    let (mut s_bos, mut diag, mut ent) = (0.0, 0.0, 0.0);
    for m in maps {
        let t_len = m.rows();
        s_bos += sink_score(m, 0)?;
        diag += (0..t_len).map(|t| m.at(t, t) as f64).sum::<f64>() / t_len as f64;
        let ratios: Vec<f64> = (1..t_len)
            .map(|t| {
                let h: f64 = m.row(t)[..=t].iter().filter(|&&p| p > 0.0).map(|&p| -(p as f64) * (p as f64).ln()).sum();
                h / ((t + 1) as f64).ln()
            })
            .collect();
        ent += if ratios.is_empty() { 1.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    }
    let n = maps.len() as f64;
    Ok(PatternDiagnostics { s_bos: s_bos / n, diag_mass: diag / n, entropy_ratio: ent / n })
}

pub fn classify_pattern(
    maps: &[&Tensor],
    thresholds: &PatternThresholds,
) -> Result<(PatternLabel, PatternDiagnostics)> {
    let d = pattern_diagnostics(maps)?;
    Ok((thresholds.label(&d), d))
}

/// Labels every head of a model over a prompt set.
pub fn pattern_scan(
    ckpt: &Checkpoint,
    prompts: &[Vec<u32>],
    thresholds: &PatternThresholds,
) -> Result<Vec<(HeadId, PatternLabel, PatternDiagnostics)>> {
    if prompts.is_empty() {
        return Err(Error::Input("pattern scan needs at least one prompt".into()));
    }
    let traces = prompts
        .iter()
        .map(|p| forward(ckpt, p, &InstrumentationSpec::attention()).map(|(_, tr)| tr))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for l in 0..ckpt.config.n_layers {
        for h in 0..ckpt.config.n_heads {
            let maps: Vec<&Tensor> = traces.iter().map(|tr| &tr.attention[&(l, h)]).collect();
            let (label, d) = classify_pattern(&maps, thresholds)?;
            out.push(((l, h), label, d));
        }
    }
    Ok(out)
}

/// The canonical synthetic maps for each label, used by tests and the CLI
/// self-check.
pub mod canonical {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::Tensor;

    pub fn bos(t: usize) -> Tensor {
        Tensor::from_fn(&[t, t], |i| if i % t == 0 { 1.0 } else { 0.0 })
    }

    pub fn identity(t: usize) -> Tensor {
        Tensor::identity(t)
    }

    pub fn uniform_prefix(t: usize) -> Tensor {
        Tensor::from_fn(&[t, t], |i| {
            let (r, c) = (i / t, i % t);
            if c <= r {
                1.0 / (r + 1) as f32
            } else {
                0.0
            }
        })
    }

    /// Each row puts random weights on at most `k` random keys of its prefix,
    /// never on key 0 or the diagonal once the prefix allows it.
    pub fn random_sparse(t: usize, k: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Tensor::zeros(&[t, t]);
        for r in 0..t {
            let pool: Vec<usize> = if r >= 2 { (1..r).collect() } else { (0..=r).collect() };
            let mut w = vec![0.0f64; r + 1];
            for _ in 0..k {
                let c = pool[rng.gen_range(0..pool.len())];
                w[c] += rng.gen_range(0.1..1.0);
            }
            let s: f64 = w.iter().sum();
            for (c, v) in w.into_iter().enumerate() {
                m.row_mut(r)[c] = (v / s) as f32;
            }
        }
        m
    }
}
