//! Command-line front end. Every subcommand reads its inputs from files,
//! writes one report (or checkpoint) and records its resolved arguments in the
//! report header.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{cohort_fits, length_sweep, pattern_scan, PatternThresholds, COHORT_THRESHOLDS};
use crate::error::{Error, Result};
use crate::eval::{ratio_sweep, recall_items, single_target_sweep, EvalSuite, Evaluator};
use crate::io::{self, Format, Report};
use crate::metrics::{scan_model, Metric, ScoreTable};
use crate::model::fixture::{build_synthetic_model, random_checkpoint, HeadRole, PlantedHead, SinkRecipe};
use crate::model::Checkpoint;
use crate::pruning::{apply, rank_targets, Strategy};

#[derive(Debug, Parser, Serialize)]
#[command(name = "sinkprune", version, about = "Attention-sink analysis and structured pruning")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, env = "SINKPRUNE_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a synthetic checkpoint with planted heads.
    MakeFixture(MakeFixtureArgs),
    /// Score every head or layer with one metric.
    Scan(ScanArgs),
    /// Rank, prune and save a checkpoint plus its plan.
    Prune(PruneArgs),
    /// Perplexity and recall accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Single-target ablation sweep or pruning-ratio sweep.
    Sweep(SweepArgs),
    /// BOS scores across sequence lengths with cohort regressions.
    Lengths(LengthsArgs),
    /// Label every head as bos_sink, diagonal, uniform or random.
    Patterns(PatternsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Planted,
    Uniform,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeFixtureArgs {
    #[arg(long, value_enum, default_value = "planted")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plant a sink head at LAYER:HEAD (repeatable; replaces the preset's heads).
    #[arg(long, value_name = "L:H")]
    pub sink: Vec<String>,
    #[arg(long, value_name = "L:H")]
    pub routing: Vec<String>,
    #[arg(long, value_name = "L:H")]
    pub diagonal: Vec<String>,
    #[arg(long, value_name = "L:H")]
    pub uniform: Vec<String>,
    /// Output checkpoint stem; writes STEM.json and STEM.bin.
    #[arg(long, default_value = "fixture")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// UTF-8 text corpus (default: the bundled corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration prompts sampled from the corpus.
    #[arg(long, default_value_t = 16)]
    pub n_prompts: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct OutArgs {
    /// Report path; `.json` selects JSON unless --format says otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// bos_head, bos_layer, bi, mag or wanda.
    #[arg(long, default_value = "bos_head")]
    pub metric: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// bos_head_desc, bos_layer_desc, bi_asc, mag_asc, wanda_asc, bottom_up or top_down.
    #[arg(long)]
    pub strategy: String,
    #[arg(long)]
    pub ratio: f64,
    /// Score report from `scan`; computed on the fly when absent.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output checkpoint stem.
    #[arg(long, default_value = "pruned")]
    pub out: PathBuf,
    /// Plan output (default: STEM.spec.json).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalDataArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Perplexity window length.
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    /// Recall items for choice accuracy; 0 disables the task.
    #[arg(long, default_value_t = 64)]
    pub items: usize,
    /// Filler tokens between the key and the query.
    #[arg(long, default_value_t = 16)]
    pub filler: usize,
    #[arg(long, default_value_t = 4)]
    pub options: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: EvalDataArgs,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    /// Label recorded in the report.
    #[arg(long, default_value = "none")]
    pub strategy: String,
    /// Label recorded in the report.
    #[arg(long, default_value_t = 0.0)]
    pub ratio: f64,
    #[arg(long)]
    pub per_item: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Single,
    Ratio,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorKind {
    Perplexity,
    Choice,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: SweepMode,
    /// Metric whose score is paired with each single-target delta.
    #[arg(long, default_value = "bos_head")]
    pub metric: String,
    /// Ranking strategy for ratio sweeps.
    #[arg(long, default_value = "bos_head_desc")]
    pub strategy: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.125,0.25,0.375,0.5")]
    pub ratios: Vec<f64>,
    #[arg(long, value_enum, default_value = "choice")]
    pub evaluator: EvaluatorKind,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Calibration prompts for scoring.
    #[arg(long, default_value_t = 16)]
    pub n_prompts: usize,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    #[command(flatten)]
    pub data: EvalDataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct LengthsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    pub n_prompts: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PatternsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0.6)]
    pub bos_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub diagonal_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    pub uniform_threshold: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Parses arguments and runs; the caller maps errors to exit status 1.
pub fn run(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let run = run_header(cli);
    let dir = &cli.out_dir;
    match &cli.command {
        Command::MakeFixture(a) => make_fixture(a, dir),
        Command::Scan(a) => scan(a, dir, run),
        Command::Prune(a) => prune(a, dir, run),
        Command::Eval(a) => eval(a, dir, run),
        Command::Sweep(a) => sweep(a, dir, run),
        Command::Lengths(a) => lengths(a, dir, run),
        Command::Patterns(a) => patterns(a, dir, run),
    }
}

fn run_header(cli: &Cli) -> Value {
    let mut v = serde_json::to_value(&cli.command).expect("arguments serialize");
    if let Value::Object(m) = &mut v {
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    }
    v
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn out_target(o: &OutArgs, dir: &Path, default: &str) -> Result<(PathBuf, Format)> {
    let path = resolve(dir, o.out.as_deref().unwrap_or(Path::new(default)));
    let format = match &o.format {
        Some(f) => f.parse()?,
        None => Format::from_path(&path),
    };
    Ok((path, format))
}

fn corpus(path: &Option<PathBuf>) -> Result<Vec<u32>> {
    match path {
        Some(p) => io::load_corpus(p),
        None => Ok(io::bundled_corpus()),
    }
}

/// `n` windows of `len` tokens at seeded random offsets.
pub fn sample_windows(corpus: &[u32], n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if n == 0 || len == 0 {
        return Err(Error::Input("need at least one prompt of positive length".into()));
    }
    if corpus.len() < len {
        return Err(Error::Input(format!("corpus has {} tokens, fewer than one prompt of {len}", corpus.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.gen_range(0..=corpus.len() - len);
            corpus[start..start + len].to_vec()
        })
        .collect())
}

fn load(p: &Path) -> Result<Checkpoint> {
    io::load_checkpoint(p)
}

fn head_arg(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected LAYER:HEAD, got '{s}'"));
    let (l, h) = s.split_once(':').ok_or_else(bad)?;
    Ok((l.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn make_fixture(a: &MakeFixtureArgs, dir: &Path) -> Result<()> {
    let mut planted = Vec::new();
    for (flags, role) in [
        (&a.sink, HeadRole::Sink),
        (&a.routing, HeadRole::Routing),
        (&a.diagonal, HeadRole::Diagonal),
        (&a.uniform, HeadRole::Uniform),
    ] {
        for f in flags {
            let (layer, head) = head_arg(f)?;
            planted.push(PlantedHead { layer, head, role });
        }
    }
    let ckpt = match a.preset {
        Preset::Random => {
            if !planted.is_empty() {
                return Err(Error::Config("the random preset takes no planted heads".into()));
            }
            random_checkpoint(SinkRecipe::default_config(), a.seed)?
        }
        Preset::Planted | Preset::Uniform => {
            let mut recipe = match a.preset {
                Preset::Planted => SinkRecipe::planted(a.seed),
                _ => SinkRecipe::uniform(a.seed),
            };
            if !planted.is_empty() {
                recipe.heads = planted;
            }
            build_synthetic_model(&recipe)?
        }
    };
    io::save_checkpoint(&ckpt, &resolve(dir, &a.out))
}

fn scan(a: &ScanArgs, dir: &Path, run: Value) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let ckpt = load(&a.checkpoint)?;
    let table = scan_with(&ckpt, metric, &a.data)?;
    let (path, format) = out_target(&a.out, dir, "scores.csv")?;
    io::write_report(&io::score_report(&table).with_run(run), format, &path)
}

fn scan_with(ckpt: &Checkpoint, metric: Metric, d: &DataArgs) -> Result<ScoreTable> {
    let prompts = sample_windows(&corpus(&d.corpus)?, d.n_prompts, d.seq_len, d.seed)?;
    scan_model(ckpt, &prompts, metric)
}

fn scores_for(ckpt: &Checkpoint, strategy: Strategy, file: &Option<PathBuf>, d: &DataArgs) -> Result<ScoreTable> {
    let cfg = &ckpt.config;
    let Some(metric) = strategy.metric() else {
        return Ok(ScoreTable::shape_only(Metric::BosLayer, cfg.n_layers, cfg.n_heads));
    };
    match file {
        Some(p) => {
            let mut t = io::read_score_table(p)?;
            t.n_layers = cfg.n_layers;
            t.n_heads = cfg.n_heads;
            Ok(t)
        }
        None => scan_with(ckpt, metric, d),
    }
}

fn prune(a: &PruneArgs, dir: &Path, run: Value) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let ckpt = load(&a.checkpoint)?;
    let table = scores_for(&ckpt, strategy, &a.scores, &a.data)?;
    let spec = rank_targets(&table, strategy, a.ratio)?;
    let pruned = apply(&ckpt, &spec)?;
    let stem = resolve(dir, &a.out);
    let spec_path = match &a.spec {
        Some(p) => resolve(dir, p),
        None => {
            let mut s = io::checkpoint_paths(&stem).0.with_extension("").into_os_string();
            s.push(".spec.json");
            PathBuf::from(s)
        }
    };
    io::save_checkpoint(&pruned, &stem)?;
    let mut doc = serde_json::to_vec_pretty(&json!({ "run": run, "spec": spec })).expect("spec serializes");
    doc.push(b'\n');
    io::write_atomic(&spec_path, &doc)
}

fn suite(d: &EvalDataArgs, with_stream: bool, with_items: bool) -> Result<EvalSuite> {
    let stream = if with_stream { corpus(&d.corpus)? } else { Vec::new() };
    let items =
        if with_items && d.items > 0 { recall_items(d.items, d.filler, d.options, d.seed)? } else { Vec::new() };
    Ok(EvalSuite { stream, seq_len: d.seq_len, items, keep_items: false })
}

fn eval(a: &EvalArgs, dir: &Path, run: Value) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let mut s = suite(&a.data, true, true)?;
    s.keep_items = a.per_item;
    let report = s.report(&ckpt, &a.model_id, &a.strategy, a.ratio, 0)?;
    let (path, format) = out_target(&a.out, dir, "eval.csv")?;
    if let Some(items) = &report.per_item {
        let mut detail = Report::new(&["item", "predicted", "answer", "correct"]);
        for (i, o) in items.iter().enumerate() {
            detail.push(vec![i.into(), o.predicted.into(), o.answer.into(), usize::from(o.correct()).into()]);
        }
        let ext = if format == Format::Json { "items.json" } else { "items.csv" };
        io::write_report(&detail.with_run(run.clone()), format, &path.with_extension(ext))?;
    }
    io::write_report(&io::eval_report(&[report]).with_run(run), format, &path)
}

fn sweep(a: &SweepArgs, dir: &Path, run: Value) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let calib =
        DataArgs { corpus: a.data.corpus.clone(), seed: a.data.seed, n_prompts: a.n_prompts, seq_len: a.data.seq_len };
    let report: Report = match a.mode {
        SweepMode::Single => {
            let metric: Metric = a.metric.parse()?;
            let table = match &a.scores {
                Some(p) => io::read_score_table(p)?,
                None => scan_with(&ckpt, metric, &calib)?,
            };
            let s = suite(
                &a.data,
                matches!(a.evaluator, EvaluatorKind::Perplexity),
                matches!(a.evaluator, EvaluatorKind::Choice),
            )?;
            let ev = match a.evaluator {
                EvaluatorKind::Perplexity => Evaluator::Perplexity { stream: &s.stream, seq_len: s.seq_len },
                EvaluatorKind::Choice => Evaluator::Choice(&s.items),
            };
            io::sweep_report(&single_target_sweep(&ckpt, &table, &ev)?)
        }
        SweepMode::Ratio => {
            let strategy: Strategy = a.strategy.parse()?;
            let table = scores_for(&ckpt, strategy, &a.scores, &calib)?;
            let s = suite(&a.data, true, true)?;
            io::eval_report(&ratio_sweep(&ckpt, &table, strategy, &a.ratios, &s, &a.model_id)?)
        }
    };
    let (path, format) = out_target(&a.out, dir, "sweep.csv")?;
    io::write_report(&report.with_run(run), format, &path)
}

fn lengths(a: &LengthsArgs, dir: &Path, run: Value) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let series = length_sweep(&ckpt, &corpus(&a.corpus)?, &a.lengths, a.n_prompts)?;
    let fits = cohort_fits(&series, &COHORT_THRESHOLDS);
    let (path, format) = out_target(&a.out, dir, "lengths.csv")?;
    let ext = if format == Format::Json { "json" } else { "csv" };
    let cohort_path = path.with_extension(format!("cohorts.{ext}"));
    io::write_report(&io::cohort_report(&fits).with_run(run.clone()), format, &cohort_path)?;
    io::write_report(&io::length_report(&series).with_run(run), format, &path)
}

fn patterns(a: &PatternsArgs, dir: &Path, run: Value) -> Result<()> {
    let ckpt = load(&a.checkpoint)?;
    let prompts = sample_windows(&corpus(&a.data.corpus)?, a.data.n_prompts, a.data.seq_len, a.data.seed)?;
    let th = PatternThresholds { bos: a.bos_threshold, diagonal: a.diagonal_threshold, uniform: a.uniform_threshold };
    let rows = pattern_scan(&ckpt, &prompts, &th)?;
    let (path, format) = out_target(&a.out, dir, "patterns.csv")?;
    io::write_report(&io::pattern_report(&rows).with_run(run), format, &path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_args() {
        assert_eq!(head_arg("2:5").unwrap(), (2, 5));
        assert!(head_arg("2-5").is_err());
        assert!(head_arg("x:1").is_err());
    }

    #[test]
    fn windows_are_seeded() {
        let c: Vec<u32> = (0..100).collect();
        let a = sample_windows(&c, 4, 10, 1).unwrap();
        assert_eq!(a, sample_windows(&c, 4, 10, 1).unwrap());
        assert!(a.iter().all(|w| w.len() == 10 && w.windows(2).all(|p| p[1] == p[0] + 1)));
        assert!(matches!(sample_windows(&c, 1, 101, 0), Err(Error::Input(_))));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
