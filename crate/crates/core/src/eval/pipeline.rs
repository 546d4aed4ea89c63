//! `.eval` pipelines: one input, a linear chain of stages, one output.
//!
//! ```text
//! format: 1
//! [input]
//! source: store
//! kind: experiment_data
//! where.experiment: "e1"
//! [stage extract]
//! field: metrics.alive
//! group_by: replication
//! [stage summarize]
//! confidence: 0.95
//! [output]
//! format: table
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::histogram::{histogram, Bin};
use super::summary::{summarize, MetricSummary};
use super::usage::{usage_report, FinishedEntry, Period, UsageReport};
use super::EvalError;
use crate::store::{lookup, QueryFilter, Record, RecordKind, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Input {
    Store { filter: QueryFilter },
    /// Newline-delimited store export.
    File { path: PathBuf, filter: QueryFilter },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Report,
    Table,
    PlotData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub input: Input,
    pub stages: Vec<StageSpec>,
    pub output: OutputFormat,
}

/// What flows between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Records,
    Values,
    Summaries,
    Histograms,
    Report,
}

pub struct StageDef {
    pub name: &'static str,
    pub input: DataKind,
    pub output: DataKind,
    /// `(name, required)`.
    pub params: &'static [(&'static str, bool)],
}

pub const STAGES: &[StageDef] = &[
    StageDef {
        name: "extract",
        input: DataKind::Records,
        output: DataKind::Values,
        params: &[("field", true), ("group_by", false)],
    },
    StageDef {
        name: "runtime",
        input: DataKind::Records,
        output: DataKind::Values,
        params: &[("unit", false)],
    },
    StageDef {
        name: "node_count",
        input: DataKind::Records,
        output: DataKind::Values,
        params: &[],
    },
    StageDef {
        name: "scale",
        input: DataKind::Values,
        output: DataKind::Values,
        params: &[("factor", true)],
    },
    StageDef {
        name: "summarize",
        input: DataKind::Values,
        output: DataKind::Summaries,
        params: &[("confidence", false)],
    },
    StageDef {
        name: "histogram",
        input: DataKind::Values,
        output: DataKind::Histograms,
        params: &[("width", true)],
    },
    StageDef {
        name: "usage",
        input: DataKind::Records,
        output: DataKind::Report,
        params: &[("period", true)],
    },
];

pub fn stage_def(name: &str) -> Option<&'static StageDef> {
    STAGES.iter().find(|s| s.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSeries {
    pub name: String,
    pub bin_width: f64,
    pub bins: Vec<Bin>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    Records(Vec<Record>),
    Values(Vec<Series>),
    Summaries(Vec<MetricSummary>),
    Histograms(Vec<HistogramSeries>),
    Report(Box<UsageReport>),
}

impl Data {
    pub fn kind(&self) -> DataKind {
        match self {
            Data::Records(_) => DataKind::Records,
            Data::Values(_) => DataKind::Values,
            Data::Summaries(_) => DataKind::Summaries,
            Data::Histograms(_) => DataKind::Histograms,
            Data::Report(_) => DataKind::Report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub format: OutputFormat,
    pub media_type: &'static str,
    pub body: String,
}

fn parse_err(line: usize, msg: impl Into<String>) -> EvalError {
    EvalError::Parse { line, message: msg.into() }
}

/// Parses the `.eval` text and checks stage names, parameters and chaining.
pub fn parse_pipeline(text: &str) -> Result<PipelineSpec, EvalError> {
    #[derive(Default)]
    struct Sec {
        header: String,
        arg: Option<String>,
        line: usize,
        keys: Vec<(usize, String, String)>,
    }
    let mut saw_format = false;
    let mut secs: Vec<Sec> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(h) = line.strip_prefix('[') {
            let h = h.strip_suffix(']').ok_or_else(|| parse_err(n, "section header must end with `]`"))?;
            if !saw_format {
                return Err(parse_err(n, "missing `format: 1` header"));
            }
            let mut w = h.split_whitespace();
            let header = w.next().unwrap_or("").to_string();
            let arg = w.next().map(str::to_string);
            if w.next().is_some() {
                return Err(parse_err(n, "section header takes at most one argument"));
            }
            secs.push(Sec { header, arg, line: n, keys: vec![] });
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| parse_err(n, "expected `key: value`"))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match secs.last_mut() {
            None if k == "format" => {
                if v != "1" {
                    return Err(parse_err(n, format!("unsupported format {v}")));
                }
                saw_format = true;
            }
            None => return Err(parse_err(n, "missing `format: 1` header")),
            Some(s) => {
                if s.keys.iter().any(|(_, e, _)| *e == k) {
                    return Err(parse_err(n, format!("duplicate key `{k}`")));
                }
                s.keys.push((n, k, v));
            }
        }
    }
    if !saw_format {
        return Err(parse_err(1, "missing `format: 1` header"));
    }

    let mut input = None;
    let mut output = None;
    let mut stages = Vec::new();
    for s in secs {
        match s.header.as_str() {
            "input" => {
                if input.is_some() {
                    return Err(parse_err(s.line, "duplicate [input]"));
                }
                input = Some(parse_input(&s.keys)?);
            }
            "stage" => {
                if output.is_some() {
                    return Err(parse_err(s.line, "stages must come before [output]"));
                }
                let name = s.arg.ok_or_else(|| parse_err(s.line, "[stage] needs a name"))?;
                let def = stage_def(&name).ok_or_else(|| EvalError::UnknownStage(name.clone()))?;
                let mut params = BTreeMap::new();
                for (line, k, v) in s.keys {
                    if !def.params.iter().any(|(p, _)| *p == k) {
                        return Err(EvalError::StageParam {
                            stage: name.clone(),
                            message: format!("line {line}: unknown parameter `{k}`"),
                        });
                    }
                    params.insert(k, v);
                }
                stages.push(StageSpec { name, params });
            }
            "output" => {
                if output.is_some() {
                    return Err(parse_err(s.line, "duplicate [output]"));
                }
                let mut fmt = None;
                for (line, k, v) in s.keys {
                    if k != "format" {
                        return Err(parse_err(line, format!("unknown output key `{k}`")));
                    }
                    fmt = Some(match v.as_str() {
                        "report" => OutputFormat::Report,
                        "table" => OutputFormat::Table,
                        "plot-data" => OutputFormat::PlotData,
                        other => return Err(parse_err(line, format!("unknown output format `{other}`"))),
                    });
                }
                output = Some(fmt.unwrap_or(OutputFormat::Report));
            }
            other => return Err(parse_err(s.line, format!("unknown section [{other}]"))),
        }
    }
    let spec = PipelineSpec {
        input: input.ok_or_else(|| parse_err(1, "missing [input]"))?,
        stages,
        output: output.ok_or_else(|| parse_err(1, "missing [output]"))?,
    };
    check(&spec)?;
    Ok(spec)
}

fn parse_input(keys: &[(usize, String, String)]) -> Result<Input, EvalError> {
    let mut filter = QueryFilter::new();
    let mut source = "store";
    let mut path = None;
    for (line, k, v) in keys {
        let num = || v.parse::<u64>().map_err(|_| parse_err(*line, format!("`{k}` must be an integer")));
        match k.as_str() {
            "source" => source = v.as_str(),
            "path" => path = Some(PathBuf::from(v)),
            "kind" => {
                for kind in v.split(',') {
                    let kind = RecordKind::from_name(kind.trim())
                        .ok_or_else(|| parse_err(*line, format!("unknown record kind `{kind}`")))?;
                    filter = filter.kind(kind);
                }
            }
            "run" => filter = filter.run(v.clone()),
            "node" => filter = filter.node(v.clone()),
            "from" => filter.from = Some(num()?),
            "to" => filter.to = Some(num()?),
            _ => {
                let Some(key) = k.strip_prefix("where.") else {
                    return Err(parse_err(*line, format!("unknown input key `{k}`")));
                };
                // JSON literals compare typed; anything else is a bare string.
                let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
                filter = filter.eq(key, value);
            }
        }
    }
    match (source, path) {
        ("store", None) => Ok(Input::Store { filter }),
        ("file", Some(path)) => Ok(Input::File { path, filter }),
        ("file", None) => Err(parse_err(1, "file input needs `path`")),
        ("store", Some(_)) => Err(parse_err(1, "`path` only applies to file input")),
        (other, _) => Err(parse_err(1, format!("unknown input source `{other}`"))),
    }
}

/// Stage registration, required parameters and the type chain.
pub fn check(spec: &PipelineSpec) -> Result<(), EvalError> {
    let mut kind = DataKind::Records;
    for s in &spec.stages {
        let def = stage_def(&s.name).ok_or_else(|| EvalError::UnknownStage(s.name.clone()))?;
        for (p, required) in def.params {
            if *required && !s.params.contains_key(*p) {
                return Err(EvalError::StageParam {
                    stage: s.name.clone(),
                    message: format!("missing parameter `{p}`"),
                });
            }
        }
        if let Some(p) = s.params.keys().find(|k| !def.params.iter().any(|(d, _)| d == k)) {
            return Err(EvalError::StageParam {
                stage: s.name.clone(),
                message: format!("unknown parameter `{p}`"),
            });
        }
        if def.input != kind {
            return Err(EvalError::StageType {
                stage: s.name.clone(),
                message: format!("expects {:?} but receives {kind:?}", def.input),
            });
        }
        kind = def.output;
    }
    if spec.output == OutputFormat::PlotData && matches!(kind, DataKind::Records | DataKind::Report) {
        return Err(EvalError::StageType {
            stage: "output".into(),
            message: format!("plot-data cannot render {kind:?}"),
        });
    }
    Ok(())
}

fn load(input: &Input, store: Option<&Store>) -> Result<Vec<Record>, EvalError> {
    match input {
        Input::Store { filter } => {
            let store = store.ok_or_else(|| EvalError::Input("no store attached".into()))?;
            Ok(store.query(filter))
        }
        Input::File { path, filter } => {
            let f = File::open(path).map_err(|e| EvalError::Input(format!("{}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| EvalError::Input(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: Record = serde_json::from_str(&line)
                    .map_err(|e| EvalError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
                if filter.matches(&r) {
                    out.push(r);
                }
            }
            Ok(out)
        }
    }
}

/// Runs a checked pipeline. The output depends only on `spec` and the
/// records the input stage reads.
pub fn run_pipeline(spec: &PipelineSpec, store: Option<&Store>) -> Result<Artifact, EvalError> {
    check(spec)?;
    let mut data = Data::Records(load(&spec.input, store)?);
    for s in &spec.stages {
        data = apply(s, data)?;
    }
    render(spec.output, &data)
}

fn param_f64(s: &StageSpec, key: &str, default: Option<f64>) -> Result<f64, EvalError> {
    match s.params.get(key) {
        Some(v) => v.parse().map_err(|_| EvalError::StageParam {
            stage: s.name.clone(),
            message: format!("`{key}` must be a number, got `{v}`"),
        }),
        None => default.ok_or_else(|| EvalError::StageParam {
            stage: s.name.clone(),
            message: format!("missing parameter `{key}`"),
        }),
    }
}

fn push_numbers(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) => out.extend(n.as_f64()),
        Value::Array(a) => a.iter().for_each(|x| push_numbers(x, out)),
        _ => {}
    }
}

fn group_label(v: Option<&Value>) -> String {
    match v {
        Some(Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => "null".into(),
    }
}

fn apply(s: &StageSpec, data: Data) -> Result<Data, EvalError> {
    Ok(match (s.name.as_str(), data) {
        ("extract", Data::Records(recs)) => {
            let field = &s.params["field"];
            let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in &recs {
                let Some(v) = lookup(&r.payload, field) else { continue };
                let name = match s.params.get("group_by") {
                    Some(g) => format!("{field}[{}]", group_label(lookup(&r.payload, g))),
                    None => field.clone(),
                };
                push_numbers(v, groups.entry(name).or_default());
            }
            Data::Values(groups.into_iter().map(|(name, values)| Series { name, values }).collect())
        }
        ("runtime", Data::Records(recs)) => {
            let unit = s.params.get("unit").map_or("h", String::as_str);
            let div = match unit {
                "s" => 1.0,
                "min" => 60.0,
                "h" => 3600.0,
                other => {
                    return Err(EvalError::StageParam {
                        stage: s.name.clone(),
                        message: format!("unknown unit `{other}`"),
                    })
                }
            };
            let values = recs
                .iter()
                .filter_map(FinishedEntry::from_record)
                .map(|e| e.runtime_s() as f64 / div)
                .collect();
            Data::Values(vec![Series { name: format!("runtime_{unit}"), values }])
        }
        ("node_count", Data::Records(recs)) => {
            let values = recs
                .iter()
                .filter_map(FinishedEntry::from_record)
                .map(|e| e.node_count as f64)
                .collect();
            Data::Values(vec![Series { name: "node_count".into(), values }])
        }
        ("scale", Data::Values(series)) => {
            let k = param_f64(s, "factor", None)?;
            Data::Values(
                series
                    .into_iter()
                    .map(|mut x| {
                        x.values.iter_mut().for_each(|v| *v *= k);
                        x
                    })
                    .collect(),
            )
        }
        ("summarize", Data::Values(series)) => {
            let c = param_f64(s, "confidence", Some(0.95))?;
            let out = series
                .iter()
                .filter(|x| !x.values.is_empty())
                .map(|x| summarize(&x.name, &x.values, c))
                .collect::<Result<Vec<_>, _>>()?;
            if out.is_empty() {
                return Err(EvalError::EmptyInput);
            }
            Data::Summaries(out)
        }
        ("histogram", Data::Values(series)) => {
            let w = param_f64(s, "width", None)?;
            Data::Histograms(
                series
                    .iter()
                    .map(|x| {
                        Ok(HistogramSeries {
                            name: x.name.clone(),
                            bin_width: w,
                            bins: histogram(&x.values, w)?,
                        })
                    })
                    .collect::<Result<_, EvalError>>()?,
            )
        }
        ("usage", Data::Records(recs)) => {
            let period: Period = s.params["period"].parse()?;
            Data::Report(Box::new(usage_report(&recs, period)?))
        }
        (_, d) => {
            return Err(EvalError::StageType {
                stage: s.name.clone(),
                message: format!("cannot consume {:?}", d.kind()),
            })
        }
    })
}

/// Columns of the summary table, in order.
pub const SUMMARY_COLUMNS: [&str; 13] = [
    "metric", "n", "mean", "stddev", "confidence", "ci_low", "ci_high", "min", "q1", "median", "q3", "max", "notch",
];

fn csv_out(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn render(format: OutputFormat, data: &Data) -> Result<Artifact, EvalError> {
    let json_body = |v: Value| serde_json::to_string_pretty(&v).expect("values serialize") + "\n";
    let (media_type, body) = match (format, data) {
        (OutputFormat::Report, d) => ("application/json", json_body(report_value(d))),
        (OutputFormat::Table, Data::Summaries(s)) => (
            "text/csv",
            csv_out(
                &SUMMARY_COLUMNS,
                s.iter().map(|m| {
                    let f = &m.five;
                    let mut row = vec![m.metric.clone(), m.n.to_string()];
                    row.extend(
                        [m.mean, m.stddev, m.confidence, m.ci_low, m.ci_high, f.min, f.q1, f.median, f.q3, f.max, m.notch]
                            .iter()
                            .map(f64::to_string),
                    );
                    row
                }),
            ),
        ),
        (OutputFormat::Table, Data::Histograms(h)) => (
            "text/csv",
            csv_out(
                &["series", "bin_start", "bin_end", "count"],
                h.iter().flat_map(|s| {
                    s.bins.iter().map(move |b| {
                        vec![s.name.clone(), b.start.to_string(), (b.start + s.bin_width).to_string(), b.count.to_string()]
                    })
                }),
            ),
        ),
        (OutputFormat::Table, Data::Values(v)) => (
            "text/csv",
            csv_out(
                &["series", "index", "value"],
                v.iter().flat_map(|s| {
                    s.values
                        .iter()
                        .enumerate()
                        .map(move |(i, x)| vec![s.name.clone(), i.to_string(), x.to_string()])
                }),
            ),
        ),
        (OutputFormat::Table, Data::Report(r)) => (
            "text/csv",
            csv_out(
                &["topic", "count", "hours"],
                r.topics.iter().map(|t| vec![t.topic.clone(), t.count.to_string(), t.hours.to_string()]),
            ),
        ),
        (OutputFormat::Table, Data::Records(recs)) => (
            "text/csv",
            csv_out(
                &["id", "kind", "run_id", "node_id", "timestamp", "payload"],
                recs.iter().map(|r| {
                    vec![
                        r.id.to_string(),
                        r.kind.as_str().to_string(),
                        r.run_id.clone().unwrap_or_default(),
                        r.node_id.clone().unwrap_or_default(),
                        r.timestamp.to_string(),
                        r.payload.to_string(),
                    ]
                }),
            ),
        ),
        (OutputFormat::PlotData, d) => ("application/json", json_body(plot_data(d))),
    };
    Ok(Artifact { format, media_type, body })
}

fn report_value(d: &Data) -> Value {
    match d {
        Data::Records(r) => json!({ "records": r }),
        Data::Values(v) => json!({ "series": v }),
        Data::Summaries(s) => json!({ "summaries": s }),
        Data::Histograms(h) => json!({ "histograms": h }),
        Data::Report(r) => json!({ "usage": r }),
    }
}

/// Series documents for chart renderers.
pub fn plot_data(d: &Data) -> Value {
    let series: Vec<Value> = match d {
        Data::Summaries(s) => s
            .iter()
            .map(|m| {
                json!({
                    "kind": "boxplot",
                    "name": m.metric,
                    "n": m.n,
                    "min": m.five.min, "q1": m.five.q1, "median": m.five.median,
                    "q3": m.five.q3, "max": m.five.max,
                    "notch_low": m.five.median - m.notch,
                    "notch_high": m.five.median + m.notch,
                    "mean": m.mean, "ci_low": m.ci_low, "ci_high": m.ci_high,
                })
            })
            .collect(),
        Data::Histograms(h) => h
            .iter()
            .map(|s| {
                json!({
                    "kind": "histogram",
                    "name": s.name,
                    "bin_width": s.bin_width,
                    "x": s.bins.iter().map(|b| b.start).collect::<Vec<_>>(),
                    "y": s.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
                })
            })
            .collect(),
        Data::Values(v) => v
            .iter()
            .map(|s| json!({ "kind": "points", "name": s.name, "y": s.values }))
            .collect(),
        Data::Records(_) | Data::Report(_) => Vec::new(),
    };
    json!({ "series": series })
}
