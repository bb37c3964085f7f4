use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use super::write_atomic;
use crate::analysis::{CohortFit, LengthSeries, PatternDiagnostics, PatternLabel};
use crate::error::{Error, Result};
use crate::eval::{AblationSweepRow, EvalReport};
use crate::metrics::{Granularity, Metric, ScoreEntry, ScoreTable};
use crate::model::HeadId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// `json` for a `.json` path, `csv` otherwise.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown report format '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(i) => Some(i as f64),
            Cell::Float(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        match *self {
            Cell::Int(i) if i >= 0 => Some(i as usize),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Null => Value::Null,
            Cell::Int(i) => json!(i),
            Cell::Float(f) if f.is_finite() => json!(round9(*f)),
            Cell::Float(_) => Value::Null,
            Cell::Text(s) => json!(s),
        }
    }

    fn from_json(v: &Value) -> Cell {
        match v {
            Value::Null => Cell::Null,
            Value::Number(n) if n.is_i64() => Cell::Int(n.as_i64().unwrap()),
            Value::Number(n) => Cell::Float(n.as_f64().unwrap_or(f64::NAN)),
            Value::String(s) => Cell::Text(s.clone()),
            other => Cell::Text(other.to_string()),
        }
    }

    fn from_csv(s: &str) -> Cell {
        if s.is_empty() {
            Cell::Null
        } else if let Ok(i) = s.parse::<i64>() {
            Cell::Int(i)
        } else if let Ok(f) = s.parse::<f64>() {
            Cell::Float(f)
        } else {
            Cell::Text(s.to_string())
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => Ok(()),
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Float(v) => f.write_str(&format_float(*v)),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

fn round9(v: f64) -> f64 {
    format!("{v:.8e}").parse().unwrap_or(v)
}

/// Nine significant digits in the shortest form that reads back to the same
/// rounded value; always carries a decimal point or exponent.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round9(v);
    let s = if r != 0.0 && !(1e-4..1e15).contains(&r.abs()) { format!("{r:e}") } else { r.to_string() };
    if s.contains(['.', 'e']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Rows with a fixed column set plus an optional run-configuration header.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub run: Option<Value>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Report { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new(), run: None }
    }

    pub fn with_run(mut self, run: Value) -> Self {
        self.run = Some(run);
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn get(&self, row: usize, name: &str) -> Option<&Cell> {
        self.column(name).map(|c| &self.rows[row][c])
    }

    /// CSV bytes. The run header, if any, is a leading `# run: {json}` line.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(run) = &self.run {
            out.extend_from_slice(format!("# run: {run}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string())).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    /// JSON bytes: `{"columns": [...], "run": ..., "rows": [{column: value}, ...]}`.
    pub fn to_json(&self) -> Vec<u8> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = Map::new();
                for (c, v) in self.columns.iter().zip(r) {
                    m.insert(c.clone(), v.to_json());
                }
                Value::Object(m)
            })
            .collect();
        let mut doc = Map::new();
        doc.insert("columns".into(), json!(self.columns));
        doc.insert("run".into(), self.run.clone().unwrap_or(Value::Null));
        doc.insert("rows".into(), Value::Array(rows));
        let mut out = serde_json::to_vec_pretty(&Value::Object(doc)).expect("json serializes");
        out.push(b'\n');
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Report> {
        let mut run = None;
        let mut body = text;
        if let Some(rest) = text.strip_prefix("# run: ") {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            run = Some(serde_json::from_str(line).map_err(|e| Error::parse(path, e))?);
            body = tail;
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let columns: Vec<String> = r.headers().map_err(|e| Error::parse(path, e))?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::parse(path, e))?;
            rows.push(rec.iter().map(Cell::from_csv).collect());
        }
        Ok(Report { columns, rows, run })
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Report> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
        let (rows, run, declared) = match &doc {
            Value::Array(rows) => (rows.clone(), None, None),
            Value::Object(m) => (
                m.get("rows").and_then(Value::as_array).cloned().unwrap_or_default(),
                m.get("run").filter(|v| !v.is_null()).cloned(),
                m.get("columns").and_then(Value::as_array).cloned(),
            ),
            _ => return Err(Error::parse(path, "report must be an object or an array")),
        };
        let columns: Vec<String> = match declared {
            Some(cols) => cols.iter().filter_map(|c| c.as_str().map(str::to_string)).collect(),
            None => rows.first().and_then(Value::as_object).map(|o| o.keys().cloned().collect()).unwrap_or_default(),
        };
        let rows = rows
            .iter()
            .map(|r| {
                let o = r.as_object().ok_or_else(|| Error::parse(path, "row is not an object"))?;
                Ok(columns.iter().map(|c| o.get(c).map_or(Cell::Null, Cell::from_json)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Report { columns, rows, run })
    }
}

pub fn write_report(report: &Report, format: Format, path: &Path) -> Result<()> {
    let bytes = match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    write_atomic(path, &bytes)
}

/// Reads a CSV or JSON report, chosen by extension.
pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match Format::from_path(path) {
        Format::Csv => Report::from_csv(&text, path),
        Format::Json => Report::from_json(&text, path),
    }
}

fn join_lens(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn score_report(t: &ScoreTable) -> Report {
    let mut r = Report::new(&["layer", "head", "score", "metric", "n_samples", "seq_lens"]);
    let lens = join_lens(&t.seq_lens);
    for e in &t.entries {
        r.push(vec![
            e.layer.into(),
            e.head.into(),
            e.score.into(),
            t.metric.name().into(),
            t.n_samples.into(),
            lens.clone().into(),
        ]);
    }
    r
}

/// Rebuilds a score table from a report written by [`score_report`].
/// Scores come back at print precision; an empty report has no metric and
/// is rejected.
pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let r = read_report(path)?;
    let col = |name: &str| r.column(name).ok_or_else(|| Error::parse(path, format!("missing column {name}")));
    let (cl, ch, cs, cm, cn, cq) =
        (col("layer")?, col("head")?, col("score")?, col("metric")?, col("n_samples")?, col("seq_lens")?);
    let first = r.rows.first().ok_or_else(|| Error::parse(path, "score report has no rows"))?;
    let metric: Metric = first[cm].as_text().ok_or_else(|| Error::parse(path, "metric column is not text"))?.parse()?;
    let mut entries = Vec::with_capacity(r.rows.len());
    for row in &r.rows {
        if row[cm].as_text() != Some(metric.name()) {
            return Err(Error::parse(path, "mixed metrics in one score report"));
        }
        let layer = row[cl].as_usize().ok_or_else(|| Error::parse(path, "bad layer"))?;
        let head = match &row[ch] {
            Cell::Null => None,
            c => Some(c.as_usize().ok_or_else(|| Error::parse(path, "bad head"))?),
        };
        let score = row[cs].as_f64().ok_or_else(|| Error::parse(path, "bad score"))?;
        entries.push(ScoreEntry { layer, head, score });
    }
    entries.sort_by_key(|e| (e.layer, e.head));
    let n_layers = entries.iter().map(|e| e.layer + 1).max().unwrap_or(0);
    let n_heads = entries.iter().filter_map(|e| e.head.map(|h| h + 1)).max().unwrap_or(0);
    let seq_lens = match &first[cq] {
        Cell::Null => Vec::new(),
        Cell::Int(i) => vec![*i as usize],
        Cell::Text(s) => s
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| Error::parse(path, "bad seq_lens")))
            .collect::<Result<_>>()?,
        Cell::Float(_) => return Err(Error::parse(path, "bad seq_lens")),
    };
    let granularity = metric.granularity();
    if granularity == Granularity::Head && entries.iter().any(|e| e.head.is_none()) {
        return Err(Error::parse(path, "head metric with a missing head"));
    }
    Ok(ScoreTable {
        metric,
        granularity,
        n_layers,
        n_heads,
        entries,
        n_samples: first[cn].as_usize().unwrap_or(0),
        seq_lens,
        warnings: Vec::new(),
    })
}

pub fn sweep_report(rows: &[AblationSweepRow]) -> Report {
    let mut r = Report::new(&["kind", "target_layer", "target_head", "score", "delta"]);
    for row in rows {
        r.push(vec![row.kind.name().into(), row.layer.into(), row.head.into(), row.score.into(), row.delta.into()]);
    }
    r
}

pub fn length_report(series: &[LengthSeries]) -> Report {
    let mut r = Report::new(&["layer", "head", "T", "score", "mu", "sigma", "cv", "slope", "intercept"]);
    for s in series {
        for &(t, score) in &s.points {
            r.push(vec![
                s.layer.into(),
                s.head.into(),
                t.into(),
                score.into(),
                s.mu.into(),
                s.sigma.into(),
                s.cv.unwrap_or(f64::NAN).into(),
                s.slope.into(),
                s.intercept.into(),
            ]);
        }
    }
    r
}

pub fn cohort_report(fits: &[CohortFit]) -> Report {
    let mut r = Report::new(&["cohort", "min_mu", "n_heads", "slope", "intercept", "mean_cv"]);
    for f in fits {
        r.push(vec![
            f.label().into(),
            f.min_mu.into(),
            f.n_heads.into(),
            f.slope.into(),
            f.intercept.into(),
            f.mean_cv.into(),
        ]);
    }
    r
}

pub fn eval_report(reports: &[EvalReport]) -> Report {
    let mut r = Report::new(&[
        "model_id",
        "strategy",
        "ratio",
        "perplexity",
        "choice_accuracy",
        "seq_len",
        "n_eval_tokens",
        "units_removed",
    ]);
    for e in reports {
        r.push(vec![
            e.model_id.as_str().into(),
            e.strategy.as_str().into(),
            e.ratio.into(),
            e.perplexity.into(),
            e.choice_accuracy.into(),
            e.seq_len.into(),
            e.n_eval_tokens.into(),
            e.units_removed.into(),
        ]);
    }
    r
}

pub fn pattern_report(rows: &[(HeadId, PatternLabel, PatternDiagnostics)]) -> Report {
    let mut r = Report::new(&["layer", "head", "label", "s_bos", "diag_mass", "entropy_ratio"]);
    for &((l, h), label, d) in rows {
        r.push(vec![
            l.into(),
            h.into(),
            label.to_string().into(),
            d.s_bos.into(),
            d.diag_mass.into(),
            d.entropy_ratio.into(),
        ]);
    }
    r
}
