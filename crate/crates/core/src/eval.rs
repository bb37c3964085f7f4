//! Perplexity, multiple-choice accuracy and the pruning sweeps built on them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Granularity, ScoreTable};
use crate::model::fixture::{ANSWER_BASE, ANSWER_TOKENS, MARKER_TOKEN};
use crate::model::{forward, Checkpoint, InstrumentationSpec};
use crate::pruning::{ablate_heads, apply, rank_targets, remove_blocks, Strategy};

/// Natural-log softmax of one logit row, evaluated at `target`.
fn log_prob(row: &[f32], target: u32) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target as usize] as f64 - lse
}

/// `exp(mean NLL)` over `floor((N-1)/seq_len)` non-overlapping windows.
pub fn perplexity(ckpt: &Checkpoint, stream: &[u32], seq_len: usize) -> Result<f64> {
    Ok(perplexity_with_count(ckpt, stream, seq_len)?.0)
}

/// Perplexity and the number of predicted tokens.
pub fn perplexity_with_count(ckpt: &Checkpoint, stream: &[u32], seq_len: usize) -> Result<(f64, usize)> {
    if seq_len == 0 || seq_len > ckpt.config.max_seq_len {
        return Err(Error::Input(format!("window length {seq_len} outside 1..={}", ckpt.config.max_seq_len)));
    }
    if stream.len() < seq_len + 1 {
        return Err(Error::Input(format!("stream of {} tokens is too short for windows of {seq_len}", stream.len())));
    }
    let windows = (stream.len() - 1) / seq_len;
    let nll: Vec<f64> = (0..windows)
        .into_par_iter()
        .map(|w| {
            let input = &stream[w * seq_len..(w + 1) * seq_len];
            let (logits, _) = forward(ckpt, input, &InstrumentationSpec::none())?;
            Ok((0..seq_len).map(|t| -log_prob(logits.row(t), stream[w * seq_len + t + 1])).sum::<f64>())
        })
        .collect::<Result<_>>()?;
    let n = windows * seq_len;
    Ok(((nll.iter().sum::<f64>() / n as f64).exp(), n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub predicted: usize,
    pub answer: usize,
    /// Mean log-likelihood of each option's tokens.
    pub option_scores: Vec<f64>,
}

impl ItemOutcome {
    pub fn correct(&self) -> bool {
        self.predicted == self.answer
    }
}

fn score_item(ckpt: &Checkpoint, item: &ChoiceItem) -> Result<ItemOutcome> {
    if item.prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    if item.options.len() < 2 {
        return Err(Error::Input("an item needs at least two options".into()));
    }
    if item.answer >= item.options.len() {
        return Err(Error::Input(format!("answer {} out of {} options", item.answer, item.options.len())));
    }
    let mut option_scores = Vec::with_capacity(item.options.len());
    for opt in &item.options {
        if opt.is_empty() {
            return Err(Error::Input("empty option".into()));
        }
        let seq: Vec<u32> = item.prompt.iter().chain(opt).copied().collect();
        let (logits, _) = forward(ckpt, &seq, &InstrumentationSpec::none())?;
        let p = item.prompt.len();
        let ll: f64 = opt.iter().enumerate().map(|(i, &tok)| log_prob(logits.row(p + i - 1), tok)).sum();
        option_scores.push(ll / opt.len() as f64);
    }
    let mut predicted = 0;
    for (i, &s) in option_scores.iter().enumerate() {
        if s > option_scores[predicted] {
            predicted = i;
        }
    }
    Ok(ItemOutcome { predicted, answer: item.answer, option_scores })
}

pub fn choice_outcomes(ckpt: &Checkpoint, items: &[ChoiceItem]) -> Result<Vec<ItemOutcome>> {
    if items.is_empty() {
        return Err(Error::Input("choice evaluation needs at least one item".into()));
    }
    items.par_iter().map(|it| score_item(ckpt, it)).collect()
}

/// Fraction of items whose highest length-normalised option is the answer.
pub fn choice_eval(ckpt: &Checkpoint, items: &[ChoiceItem]) -> Result<f64> {
    let out = choice_outcomes(ckpt, items)?;
    Ok(out.iter().filter(|o| o.correct()).count() as f64 / out.len() as f64)
}

/// Key-value recall items: the prompt opens with an answer token, continues
/// with lowercase filler and ends in `?`; the options are distinct answer
/// tokens.
pub fn recall_items(n: usize, filler_len: usize, n_options: usize, seed: u64) -> Result<Vec<ChoiceItem>> {
    if !(2..=ANSWER_TOKENS).contains(&n_options) {
        return Err(Error::Config(format!("n_options must be in 2..={ANSWER_TOKENS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let answers: Vec<u32> = (0..ANSWER_TOKENS as u32).map(|i| ANSWER_BASE + i).collect();
    Ok((0..n)
        .map(|_| {
            let picked: Vec<u32> = answers.choose_multiple(&mut rng, n_options).copied().collect();
            let key = picked[0];
            let mut prompt = vec![key];
            prompt.extend((0..filler_len).map(|_| rng.gen_range(b'a' as u32..=b'z' as u32)));
            prompt.push(MARKER_TOKEN);
            let mut options = picked;
            options.shuffle(&mut rng);
            let answer = options.iter().position(|&t| t == key).unwrap();
            ChoiceItem { prompt, options: options.into_iter().map(|t| vec![t]).collect(), answer }
        })
        .collect())
}

/// A scalar quality measure bound to fixed data.
#[derive(Debug, Clone, Copy)]
pub enum Evaluator<'a> {
    Perplexity { stream: &'a [u32], seq_len: usize },
    Choice(&'a [ChoiceItem]),
}

impl Evaluator<'_> {
    pub fn evaluate(&self, ckpt: &Checkpoint) -> Result<f64> {
        match *self {
            Evaluator::Perplexity { stream, seq_len } => perplexity(ckpt, stream, seq_len),
            Evaluator::Choice(items) => choice_eval(ckpt, items),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Evaluator::Perplexity { .. } => "perplexity",
            Evaluator::Choice(_) => "choice_accuracy",
        }
    }
}

/// Data for a full report; either part may be empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSuite {
    pub stream: Vec<u32>,
    pub seq_len: usize,
    pub items: Vec<ChoiceItem>,
    pub keep_items: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub strategy: String,
    pub ratio: f64,
    pub perplexity: Option<f64>,
    pub choice_accuracy: Option<f64>,
    pub seq_len: usize,
    pub n_eval_tokens: usize,
    pub units_removed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_item: Option<Vec<ItemOutcome>>,
}

impl EvalReport {
    /// Equal in every measured quantity, ignoring labels.
    pub fn same_measurements(&self, other: &EvalReport) -> bool {
        self.perplexity.map(f64::to_bits) == other.perplexity.map(f64::to_bits)
            && self.choice_accuracy.map(f64::to_bits) == other.choice_accuracy.map(f64::to_bits)
            && self.seq_len == other.seq_len
            && self.n_eval_tokens == other.n_eval_tokens
            && self.per_item == other.per_item
    }
}

impl EvalSuite {
    pub fn report(
        &self,
        ckpt: &Checkpoint,
        model_id: &str,
        strategy: &str,
        ratio: f64,
        units_removed: usize,
    ) -> Result<EvalReport> {
        if self.stream.is_empty() && self.items.is_empty() {
            return Err(Error::Input("nothing to evaluate".into()));
        }
        let (perplexity, n_eval_tokens) = if self.stream.is_empty() {
            (None, 0)
        } else {
            let (p, n) = perplexity_with_count(ckpt, &self.stream, self.seq_len)?;
            (Some(p), n)
        };
        let outcomes = if self.items.is_empty() { None } else { Some(choice_outcomes(ckpt, &self.items)?) };
        let choice_accuracy =
            outcomes.as_ref().map(|o| o.iter().filter(|x| x.correct()).count() as f64 / o.len() as f64);
        Ok(EvalReport {
            model_id: model_id.to_string(),
            strategy: strategy.to_string(),
            ratio,
            perplexity,
            choice_accuracy,
            seq_len: if perplexity.is_some() { self.seq_len } else { 0 },
            n_eval_tokens,
            units_removed,
            per_item: outcomes.filter(|_| self.keep_items),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Dense,
    Head,
    Layer,
    LayerMean,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Dense => "dense",
            SweepKind::Head => "head",
            SweepKind::Layer => "layer",
            SweepKind::LayerMean => "layer_mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [SweepKind::Dense, SweepKind::Head, SweepKind::Layer, SweepKind::LayerMean]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown sweep row kind '{s}'")))
    }
}

/// One single-target ablation, or the dense reference, or a per-layer mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSweepRow {
    pub kind: SweepKind,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    /// The metric value of the target; `None` for dense and mean rows.
    pub score: Option<f64>,
    /// Evaluation after ablation minus dense.
    pub delta: f64,
}

/// Ablates each scored unit on its own and records the change against the
/// dense model. Head sweeps also emit the mean delta of each layer's heads.
/// Layer sweeps may remove the first and last layers.
pub fn single_target_sweep(
    ckpt: &Checkpoint,
    scores: &ScoreTable,
    evaluator: &Evaluator<'_>,
) -> Result<Vec<AblationSweepRow>> {
    if scores.entries.is_empty() {
        return Ok(Vec::new());
    }
    let dense = evaluator.evaluate(ckpt)?;
    let rows: Vec<AblationSweepRow> = scores
        .entries
        .par_iter()
        .map(|e| {
            let (pruned, kind) = match (scores.granularity, e.head) {
                (Granularity::Head, Some(h)) => (ablate_heads(ckpt, &[(e.layer, h)])?, SweepKind::Head),
                (Granularity::Layer, None) => (remove_blocks(ckpt, &[e.layer], false)?, SweepKind::Layer),
                _ => return Err(Error::Input("score entry does not match table granularity".into())),
            };
            Ok(AblationSweepRow {
                kind,
                layer: Some(e.layer),
                head: e.head,
                score: Some(e.score),
                delta: evaluator.evaluate(&pruned)? - dense,
            })
        })
        .collect::<Result<_>>()?;

    let mut out = vec![AblationSweepRow { kind: SweepKind::Dense, layer: None, head: None, score: None, delta: 0.0 }];
    if scores.granularity == Granularity::Head {
        for l in 0..scores.n_layers {
            let d: Vec<f64> = rows.iter().filter(|r| r.layer == Some(l)).map(|r| r.delta).collect();
            if !d.is_empty() {
                out.push(AblationSweepRow {
                    kind: SweepKind::LayerMean,
                    layer: Some(l),
                    head: None,
                    score: None,
                    delta: d.iter().sum::<f64>() / d.len() as f64,
                });
            }
        }
    }
    out.splice(1..1, rows);
    Ok(out)
}

/// One report per ratio, each pruned from the original checkpoint.
pub fn ratio_sweep(
    ckpt: &Checkpoint,
    scores: &ScoreTable,
    strategy: Strategy,
    ratios: &[f64],
    suite: &EvalSuite,
    model_id: &str,
) -> Result<Vec<EvalReport>> {
    if ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::Config("ratios must lie in [0, 1)".into()));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("ratios must be strictly ascending".into()));
    }
    ratios
        .par_iter()
        .map(|&r| {
            let spec = rank_targets(scores, strategy, r)?;
            let pruned = apply(ckpt, &spec)?;
            suite.report(&pruned, model_id, strategy.name(), r, spec.targets.len())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::metrics::{scan_model, Metric};
    use crate::model::fixture::{build_synthetic_model, HeadRole, SinkRecipe};
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(vocab: usize, d_model: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_ff: 8,
            vocab_size: vocab,
            rope_theta: 10_000.0,
            norm_eps: 1e-6,
            max_seq_len: 16,
        }
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let ck = Checkpoint::zeros(cfg(16, 8)).unwrap();
        let stream: Vec<u32> = (0..40).map(|i| (i * 7 % 16) as u32).collect();
        let (p, n) = perplexity_with_count(&ck, &stream, 8).unwrap();
        assert!((p - 16.0).abs() < 1e-4);
        assert_eq!(n, 32);
    }

    #[test]
    fn lookup_model_is_a_perfect_predictor() {
        let v = 8;
        let mut ck = Checkpoint::zeros(cfg(v, v)).unwrap();
        for i in 0..v {
            ck.embedding.row_mut(i)[i] = 1.0;
            ck.lm_head.row_mut(i)[(i + 1) % v] = 20.0;
        }
        let stream: Vec<u32> = (0..33).map(|i| (i % v) as u32).collect();
        let p = perplexity(&ck, &stream, 8).unwrap();
        assert!((1.0..1.0 + 1e-6).contains(&p), "{p}");
    }

    #[test]
    fn short_stream_is_an_input_error() {
        let ck = Checkpoint::zeros(cfg(16, 8)).unwrap();
        assert!(matches!(perplexity(&ck, &[1; 8], 8), Err(Error::Input(_))));
    }

    #[test]
    fn uniform_model_ties_go_to_first_option() {
        let ck = Checkpoint::zeros(cfg(16, 8)).unwrap();
        let items: Vec<ChoiceItem> = (0..4)
            .map(|a| ChoiceItem { prompt: vec![1, 2], options: vec![vec![3], vec![4], vec![5, 6], vec![7]], answer: a })
            .collect();
        assert_eq!(choice_eval(&ck, &items).unwrap(), 0.25);
        let bad = ChoiceItem { prompt: vec![1], options: vec![vec![3], vec![]], answer: 0 };
        assert!(matches!(choice_eval(&ck, &[bad]), Err(Error::Input(_))));
    }

    #[test]
    fn recall_items_are_well_formed() {
        let items = recall_items(20, 10, 4, 3).unwrap();
        assert_eq!(items, recall_items(20, 10, 4, 3).unwrap());
        for it in &items {
            assert_eq!(it.prompt.len(), 12);
            assert_eq!(it.options[it.answer], vec![it.prompt[0]]);
            assert_eq!(*it.prompt.last().unwrap(), MARKER_TOKEN);
        }
    }

    #[test]
    fn planted_fixture_routing_carries_the_task() {
        let recipe = SinkRecipe::planted(5);
        let ck = build_synthetic_model(&recipe).unwrap();
        let items = recall_items(40, 20, 4, 11).unwrap();
        assert_eq!(choice_eval(&ck, &items).unwrap(), 1.0);
        let routing = recipe.heads_with(HeadRole::Routing)[0];
        assert!(choice_eval(&ablate_heads(&ck, &[routing]).unwrap(), &items).unwrap() < 1.0);
        for s in recipe.heads_with(HeadRole::Sink) {
            assert_eq!(choice_eval(&ablate_heads(&ck, &[s]).unwrap(), &items).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_attention_sweep_is_flat() {
        let ck = Checkpoint::zeros(cfg(16, 8)).unwrap();
        let stream: Vec<u32> = (0..17).map(|i| i as u32 % 16).collect();
        let ev = Evaluator::Perplexity { stream: &stream, seq_len: 8 };
        let table = scan_model(&ck, &[stream[..8].to_vec()], Metric::Mag).unwrap();
        let rows = single_target_sweep(&ck, &table, &ev).unwrap();
        assert_eq!(rows.len(), 1 + 6 + 3);
        assert!(rows.iter().all(|r| r.delta == 0.0));
        let empty = ScoreTable::shape_only(Metric::Mag, 3, 2);
        assert!(single_target_sweep(&ck, &empty, &ev).unwrap().is_empty());
    }

    #[test]
    fn ratio_zero_matches_dense_and_counts_grow() {
        let ck = build_synthetic_model(&SinkRecipe::planted(2)).unwrap();
        let prompts: Vec<Vec<u32>> = recall_items(4, 30, 4, 1).unwrap().into_iter().map(|i| i.prompt).collect();
        let table = scan_model(&ck, &prompts, Metric::BosHead).unwrap();
        let suite = EvalSuite {
            stream: (0..65).map(|i| (i * 31 % 256) as u32).collect(),
            seq_len: 32,
            items: recall_items(8, 10, 4, 2).unwrap(),
            keep_items: false,
        };
        let dense = suite.report(&ck, "m", "none", 0.0, 0).unwrap();
        let reps = ratio_sweep(&ck, &table, Strategy::BosHeadDesc, &[0.0, 0.25], &suite, "m").unwrap();
        assert!(reps[0].same_measurements(&dense));
        assert_eq!((reps[0].units_removed, reps[1].units_removed), (0, 8));
        assert!(ratio_sweep(&ck, &table, Strategy::BosHeadDesc, &[0.5, 0.25], &suite, "m").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn choice_eval_ignores_item_order(seed in 0u64..1000) {
            let ck = crate::model::fixture::random_checkpoint(cfg(16, 8), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut items: Vec<ChoiceItem> = (0..6).map(|_| ChoiceItem {
                prompt: (0..3).map(|_| rng.gen_range(0..16)).collect(),
                options: (0..3).map(|_| vec![rng.gen_range(0..16)]).collect(),
                answer: rng.gen_range(0..3),
            }).collect();
            let a = choice_eval(&ck, &items).unwrap();
            items.shuffle(&mut rng);
            prop_assert_eq!(a, choice_eval(&ck, &items).unwrap());
        }
    }
}
