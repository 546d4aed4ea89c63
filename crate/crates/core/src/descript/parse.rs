use std::collections::BTreeMap;
use std::fmt;

use super::{
    is_identifier, Action, Aggregation, ExperimentDescription, MetricSpec, NodeGroup, Predicate,
    Role, Selection, TrafficSpec, FORMAT_VERSION,
};

/// Default per-action timeout when an action section has no `timeout` key.
pub(crate) const DEFAULT_TIMEOUT: u64 = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// 1-based line number.
    pub line: usize,
    /// 1-based character column.
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    MissingFormat,
    UnsupportedFormat(String),
    UnknownSection(String),
    DuplicateSection(String),
    DuplicateGroup(String),
    UnknownKey { section: String, key: String },
    DuplicateKey(String),
    MissingKey { section: String, key: String },
    InvalidValue { key: String, message: String },
}

impl ParseErrorKind {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ParseErrorKind::Syntax(_) => "SYNTAX",
            ParseErrorKind::MissingFormat => "MISSING_FORMAT",
            ParseErrorKind::UnsupportedFormat(_) => "UNSUPPORTED_FORMAT",
            ParseErrorKind::UnknownSection(_) => "UNKNOWN_SECTION",
            ParseErrorKind::DuplicateSection(_) => "DUPLICATE_SECTION",
            ParseErrorKind::DuplicateGroup(_) => "DUPLICATE_GROUP",
            ParseErrorKind::UnknownKey { .. } => "UNKNOWN_KEY",
            ParseErrorKind::DuplicateKey(_) => "DUPLICATE_KEY",
            ParseErrorKind::MissingKey { .. } => "MISSING_KEY",
            ParseErrorKind::InvalidValue { .. } => "INVALID_VALUE",
        }
    }
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            ParseErrorKind::MissingFormat => write!(f, "first line must be `format: {FORMAT_VERSION}`"),
            ParseErrorKind::UnsupportedFormat(v) => write!(f, "unsupported format version `{v}`"),
            ParseErrorKind::UnknownSection(s) => write!(f, "unknown section `{s}`"),
            ParseErrorKind::DuplicateSection(s) => write!(f, "section `{s}` may appear only once"),
            ParseErrorKind::DuplicateGroup(g) => write!(f, "group `{g}` is declared twice"),
            ParseErrorKind::UnknownKey { section, key } => {
                write!(f, "unknown key `{key}` in section `{section}`")
            }
            ParseErrorKind::DuplicateKey(k) => write!(f, "key `{k}` given twice"),
            ParseErrorKind::MissingKey { section, key } => {
                write!(f, "section `{section}` is missing required key `{key}`")
            }
            ParseErrorKind::InvalidValue { key, message } => write!(f, "bad value for `{key}`: {message}"),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.column, self.kind)
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, column: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, column, kind }
}

/// Value text to the right of `key:` with comments removed.
struct RawValue<'a> {
    text: &'a str,
    line: usize,
    column: usize,
}

impl<'a> RawValue<'a> {
    fn invalid(&self, key: &str, message: impl Into<String>) -> ParseError {
        err(
            self.line,
            self.column,
            ParseErrorKind::InvalidValue {
                key: key.to_string(),
                message: message.into(),
            },
        )
    }

    fn text(&self, key: &str) -> Result<String, ParseError> {
        if self.text.starts_with('"') {
            let (s, rest) = take_quoted(self.text).map_err(|m| self.invalid(key, m))?;
            if !rest.trim().is_empty() {
                return Err(self.invalid(key, "unexpected text after closing quote"));
            }
            Ok(s)
        } else {
            Ok(self.text.to_string())
        }
    }

    fn ident(&self, key: &str) -> Result<String, ParseError> {
        let s = self.text(key)?;
        if !is_identifier(&s) {
            return Err(self.invalid(key, format!("`{s}` is not a valid identifier")));
        }
        Ok(s)
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<T, ParseError> {
        if self.text.is_empty() || !self.text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.invalid(key, format!("`{}` is not a non-negative integer", self.text)));
        }
        self.text
            .parse()
            .map_err(|_| self.invalid(key, format!("`{}` is out of range", self.text)))
    }

    fn list(&self, key: &str) -> Result<Vec<String>, ParseError> {
        if self.text.is_empty() {
            return Ok(Vec::new());
        }
        self.text
            .split(',')
            .map(|item| {
                let item = item.trim();
                if is_identifier(item) {
                    Ok(item.to_string())
                } else {
                    Err(self.invalid(key, format!("`{item}` is not a valid node id")))
                }
            })
            .collect()
    }

    fn predicate(&self, key: &str) -> Result<Predicate, ParseError> {
        let t = self.text;
        if t == "random" {
            return Ok(Predicate::Random);
        }
        if let Some(rest) = t.strip_prefix("building") {
            let rest = rest.trim_start();
            if let Some(name) = rest.strip_prefix("==") {
                let name = name.trim();
                let value = RawValue { text: name, ..*self };
                let name = value.text(key)?;
                if name.is_empty() {
                    return Err(self.invalid(key, "empty building name"));
                }
                return Ok(Predicate::BuildingEq(name));
            }
        }
        if let Some(rest) = t.strip_prefix("degree") {
            let rest = rest.trim_start();
            if let Some(n) = rest.strip_prefix(">=") {
                let value = RawValue { text: n.trim(), ..*self };
                return Ok(Predicate::DegreeAtLeast(value.number(key)?));
            }
        }
        Err(self.invalid(
            key,
            "expected `building == <name>`, `degree >= <n>` or `random`",
        ))
    }

    fn metric(&self, name: &str) -> Result<(String, Aggregation), ParseError> {
        let (unit, agg) = if self.text.starts_with('"') {
            let (s, rest) = take_quoted(self.text).map_err(|m| self.invalid(name, m))?;
            (s, rest.trim())
        } else {
            match self.text.rsplit_once(char::is_whitespace) {
                Some((u, a)) => (u.trim().to_string(), a),
                None => return Err(self.invalid(name, "expected `<unit> <aggregation>`")),
            }
        };
        let agg = Aggregation::from_name(agg).ok_or_else(|| {
            self.invalid(
                name,
                format!("unknown aggregation `{agg}` (mean_ci, five_number, histogram)"),
            )
        })?;
        Ok((unit, agg))
    }
}

/// Splits a leading JSON-style quoted string off `s`.
fn take_quoted(s: &str) -> Result<(String, &str), String> {
    let bytes = s.as_bytes();
    debug_assert_eq!(bytes.first(), Some(&b'"'));
    let mut i = 1;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'"' => {
                let lit = &s[..=i];
                let v: String =
                    serde_json::from_str(lit).map_err(|e| format!("bad string literal: {e}"))?;
                return Ok((v, &s[i + 1..]));
            }
            _ => i += 1,
        }
    }
    Err("unterminated string".to_string())
}

/// Drops a trailing `# comment` that is outside quotes and preceded by whitespace.
fn strip_comment(s: &str) -> &str {
    let bytes = s.as_bytes();
    let mut in_quote = false;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' if in_quote => i += 1,
            b'"' => in_quote = !in_quote,
            b'#' if !in_quote && (i == 0 || bytes[i - 1].is_ascii_whitespace()) => return &s[..i],
            _ => {}
        }
        i += 1;
    }
    s
}

fn char_column(line: &str, byte_offset: usize) -> usize {
    line[..byte_offset].chars().count() + 1
}

enum SectionKind {
    Experiment,
    Group(String),
    Action,
    Metrics,
    Cleanup,
}

impl SectionKind {
    fn label(&self) -> String {
        match self {
            SectionKind::Experiment => "experiment".into(),
            SectionKind::Group(n) => format!("group {n}"),
            SectionKind::Action => "action".into(),
            SectionKind::Metrics => "metrics".into(),
            SectionKind::Cleanup => "cleanup".into(),
        }
    }
}

struct Section<'a> {
    kind: SectionKind,
    line: usize,
    pairs: Vec<(&'a str, RawValue<'a>)>,
}

impl<'a> Section<'a> {
    fn missing(&self, key: &str) -> ParseError {
        err(
            self.line,
            1,
            ParseErrorKind::MissingKey {
                section: self.kind.label(),
                key: key.to_string(),
            },
        )
    }

    fn unknown(&self, key: &str, v: &RawValue<'_>) -> ParseError {
        err(
            v.line,
            1,
            ParseErrorKind::UnknownKey {
                section: self.kind.label(),
                key: key.to_string(),
            },
        )
    }
}

/// Parses a `.desc` document.
pub fn parse(text: &str) -> Result<ExperimentDescription, ParseError> {
    let mut saw_format = false;
    let mut sections: Vec<Section<'_>> = Vec::new();

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let trimmed = line.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent = line.len() - trimmed.len();

        if let Some(inner) = trimmed.strip_prefix('[') {
            if !saw_format {
                return Err(err(line_no, indent + 1, ParseErrorKind::MissingFormat));
            }
            let body = strip_comment(inner).trim_end();
            let Some(header) = body.strip_suffix(']') else {
                return Err(err(
                    line_no,
                    char_column(line, line.len()),
                    ParseErrorKind::Syntax("section header must end with `]`".into()),
                ));
            };
            let mut words = header.split_whitespace();
            let name = words.next().unwrap_or("");
            let arg = words.next();
            if words.next().is_some() {
                return Err(err(
                    line_no,
                    indent + 1,
                    ParseErrorKind::Syntax("too many words in section header".into()),
                ));
            }
            let kind = match (name, arg) {
                ("experiment", None) => SectionKind::Experiment,
                ("action", None) => SectionKind::Action,
                ("metrics", None) => SectionKind::Metrics,
                ("cleanup", None) => SectionKind::Cleanup,
                ("group", Some(g)) if is_identifier(g) => SectionKind::Group(g.to_string()),
                ("group", Some(g)) => {
                    return Err(err(
                        line_no,
                        indent + 1,
                        ParseErrorKind::Syntax(format!("`{g}` is not a valid group name")),
                    ))
                }
                ("group", None) => {
                    return Err(err(
                        line_no,
                        indent + 1,
                        ParseErrorKind::Syntax("group section needs a name".into()),
                    ))
                }
                ("experiment" | "action" | "metrics" | "cleanup", Some(_)) => {
                    return Err(err(
                        line_no,
                        indent + 1,
                        ParseErrorKind::Syntax(format!("section `{name}` takes no argument")),
                    ))
                }
                _ => {
                    return Err(err(
                        line_no,
                        indent + 2,
                        ParseErrorKind::UnknownSection(name.to_string()),
                    ))
                }
            };
            sections.push(Section {
                kind,
                line: line_no,
                pairs: Vec::new(),
            });
            continue;
        }

        let Some(colon) = trimmed.find(':') else {
            return Err(err(
                line_no,
                indent + 1,
                ParseErrorKind::Syntax("expected `key: value` or `[section]`".into()),
            ));
        };
        let key = trimmed[..colon].trim_end();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(err(
                line_no,
                indent + 1,
                ParseErrorKind::Syntax(format!("invalid key `{key}`")),
            ));
        }
        let after = &trimmed[colon + 1..];
        let value_text = strip_comment(after).trim();
        let value_offset = indent + colon + 1 + (after.len() - after.trim_start().len());
        let value = RawValue {
            text: value_text,
            line: line_no,
            column: char_column(line, value_offset.min(line.len())),
        };

        if !saw_format {
            if key != "format" {
                return Err(err(line_no, indent + 1, ParseErrorKind::MissingFormat));
            }
            if value.text != FORMAT_VERSION.to_string() {
                return Err(err(
                    line_no,
                    value.column,
                    ParseErrorKind::UnsupportedFormat(value.text.to_string()),
                ));
            }
            saw_format = true;
            continue;
        }

        let Some(section) = sections.last_mut() else {
            return Err(err(
                line_no,
                indent + 1,
                ParseErrorKind::Syntax(format!("key `{key}` outside of any section")),
            ));
        };
        if section.pairs.iter().any(|(k, _)| *k == key) {
            return Err(err(line_no, indent + 1, ParseErrorKind::DuplicateKey(key.to_string())));
        }
        section.pairs.push((key, value));
    }

    if !saw_format {
        return Err(err(1, 1, ParseErrorKind::MissingFormat));
    }
    build(sections)
}

fn build(sections: Vec<Section<'_>>) -> Result<ExperimentDescription, ParseError> {
    let mut experiment: Option<ExperimentDescription> = None;
    let mut groups: Vec<NodeGroup> = Vec::new();
    let mut actions = Vec::new();
    let mut cleanup = Vec::new();
    let mut metrics: Option<Vec<MetricSpec>> = None;

    for section in &sections {
        match &section.kind {
            SectionKind::Experiment => {
                if experiment.is_some() {
                    return Err(err(
                        section.line,
                        1,
                        ParseErrorKind::DuplicateSection("experiment".into()),
                    ));
                }
                experiment = Some(build_experiment(section)?);
            }
            SectionKind::Group(name) => {
                if groups.iter().any(|g| &g.name == name) {
                    return Err(err(
                        section.line,
                        1,
                        ParseErrorKind::DuplicateGroup(name.clone()),
                    ));
                }
                groups.push(build_group(name, section)?);
            }
            SectionKind::Action => actions.push(build_action(section)?),
            SectionKind::Cleanup => cleanup.push(build_action(section)?),
            SectionKind::Metrics => {
                if metrics.is_some() {
                    return Err(err(
                        section.line,
                        1,
                        ParseErrorKind::DuplicateSection("metrics".into()),
                    ));
                }
                let mut list = Vec::new();
                for (key, value) in &section.pairs {
                    if !is_identifier(key) {
                        return Err(value.invalid(key, "metric names must be identifiers"));
                    }
                    let (unit, aggregation) = value.metric(key)?;
                    list.push(MetricSpec {
                        name: key.to_string(),
                        unit,
                        aggregation,
                    });
                }
                metrics = Some(list);
            }
        }
    }

    let Some(mut desc) = experiment else {
        return Err(err(
            1,
            1,
            ParseErrorKind::MissingKey {
                section: "document".into(),
                key: "[experiment]".into(),
            },
        ));
    };
    desc.groups = groups;
    desc.actions = actions;
    desc.cleanup = cleanup;
    desc.metrics = metrics.unwrap_or_default();
    Ok(desc)
}

fn build_experiment(section: &Section<'_>) -> Result<ExperimentDescription, ParseError> {
    let mut id = None;
    let mut title = String::new();
    let mut description = String::new();
    let mut topic = None;
    let mut replications = None;
    let mut duration = None;
    let mut traffic_pattern: Option<String> = None;
    let mut traffic_params = BTreeMap::new();
    let mut first_traffic_param_line = None;

    for (key, value) in &section.pairs {
        match *key {
            "id" => id = Some(value.ident(key)?),
            "title" => title = value.text(key)?,
            "description" => description = value.text(key)?,
            "topic" => topic = Some(value.text(key)?),
            "replications" => replications = Some(value.number::<u32>(key)?),
            "duration" => duration = Some(value.number::<u64>(key)?),
            "traffic" => traffic_pattern = Some(value.ident(key)?),
            k => match k.strip_prefix("traffic.") {
                Some(p) if is_identifier(p) => {
                    first_traffic_param_line.get_or_insert(value.line);
                    traffic_params.insert(p.to_string(), value.text(key)?);
                }
                _ => return Err(section.unknown(key, value)),
            },
        }
    }

    let traffic = match (traffic_pattern, first_traffic_param_line) {
        (Some(pattern), _) => Some(TrafficSpec {
            pattern,
            params: traffic_params,
        }),
        (None, Some(line)) => {
            return Err(err(
                line,
                1,
                ParseErrorKind::MissingKey {
                    section: "experiment".into(),
                    key: "traffic".into(),
                },
            ))
        }
        (None, None) => None,
    };

    Ok(ExperimentDescription {
        id: id.ok_or_else(|| section.missing("id"))?,
        title,
        description,
        topic,
        replications: replications.ok_or_else(|| section.missing("replications"))?,
        duration_limit: duration.ok_or_else(|| section.missing("duration"))?,
        traffic,
        groups: Vec::new(),
        actions: Vec::new(),
        metrics: Vec::new(),
        cleanup: Vec::new(),
    })
}

fn build_group(name: &str, section: &Section<'_>) -> Result<NodeGroup, ParseError> {
    let mut role = None;
    let mut nodes = None;
    let mut count = None;
    let mut select = None;
    for (key, value) in &section.pairs {
        match *key {
            "role" => {
                let r = value.text(key)?;
                role = Some(Role::from_name(&r).ok_or_else(|| {
                    value.invalid(key, format!("unknown role `{r}` (client, server, servent)"))
                })?);
            }
            "nodes" => nodes = Some((value.list(key)?, value.line)),
            "count" => count = Some((value.number::<u32>(key)?, value.line)),
            "select" => select = Some((value.predicate(key)?, value.line)),
            _ => return Err(section.unknown(key, value)),
        }
    }
    let role = role.ok_or_else(|| section.missing("role"))?;
    let selection = match (nodes, count, select) {
        (Some((list, _)), None, None) => Selection::Static(list),
        (None, Some((count, _)), Some((predicate, _))) => Selection::Dynamic { count, predicate },
        (None, None, None) => return Err(section.missing("nodes")),
        (None, Some(_), None) => return Err(section.missing("select")),
        (None, None, Some(_)) => return Err(section.missing("count")),
        (Some(_), c, s) => {
            let line = c.map(|c| c.1).or(s.map(|s| s.1)).unwrap_or(section.line);
            return Err(err(
                line,
                1,
                ParseErrorKind::Syntax(
                    "a group uses either `nodes` or `count` + `select`, not both".into(),
                ),
            ));
        }
    };
    Ok(NodeGroup {
        name: name.to_string(),
        role,
        selection,
    })
}

fn build_action(section: &Section<'_>) -> Result<Action, ParseError> {
    let mut target = None;
    let mut command = None;
    let mut start = 0;
    let mut timeout = DEFAULT_TIMEOUT;
    let mut params = BTreeMap::new();
    for (key, value) in &section.pairs {
        match *key {
            "target" => target = Some(value.ident(key)?),
            "command" => command = Some(value.ident(key)?),
            "start" => start = value.number(key)?,
            "timeout" => timeout = value.number(key)?,
            k => match k.strip_prefix("param.") {
                Some(p) if is_identifier(p) => {
                    params.insert(p.to_string(), value.text(key)?);
                }
                _ => return Err(section.unknown(key, value)),
            },
        }
    }
    Ok(Action {
        target: target.ok_or_else(|| section.missing("target"))?,
        command: command.ok_or_else(|| section.missing("command"))?,
        params,
        start_offset: start,
        timeout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "format: 1

[experiment]
id: smoke
replications: 1
duration: 10

[group g]
role: client
nodes: n1

[action]
target: g
command: noop
";

    #[test]
    fn minimal_document() {
        let d = parse(MINIMAL).unwrap();
        assert_eq!(d.id, "smoke");
        assert_eq!(d.replications, 1);
        assert_eq!(d.groups.len(), 1);
        assert_eq!(d.groups[0].selection, Selection::Static(vec!["n1".into()]));
        assert_eq!(d.actions.len(), 1);
        assert_eq!(d.actions[0].command, "noop");
        assert_eq!(d.actions[0].timeout, DEFAULT_TIMEOUT);
        assert!(d.cleanup.is_empty());
        assert!(d.metrics.is_empty());
        assert_eq!(d.traffic, None);
    }

    #[test]
    fn undeclared_target_parses() {
        let text = MINIMAL.replace("target: g", "target: x");
        let d = parse(&text).unwrap();
        assert_eq!(d.actions[0].target, "x");
    }

    #[test]
    fn full_document() {
        let text = r#"format: 1
# a comment
[experiment]
id: ca-01
title: "Kanalzuweisung für Prüfstände"   # trailing comment
description: "line one\nline two # not a comment"
topic: Channel Assignment
replications: 5
duration: 600
traffic: cbr
traffic.rate: 20

[group clients]
role: client
count: 10
select: building == "A"

[group dense]
role: servent
count: 2
select: degree >= 4

[group sink]
role: server
nodes: n1, n2 ,n3

[action]
target: clients
command: start_traffic
start: 10
timeout: 30
param.dst: sink

[metrics]
delivery_ratio: ratio mean_ci
throughput: "pkt/s" five_number

[cleanup]
target: clients
command: stop_traffic
"#;
        let d = parse(text).unwrap();
        assert_eq!(d.title, "Kanalzuweisung für Prüfstände");
        assert_eq!(d.description, "line one\nline two # not a comment");
        assert_eq!(d.topic.as_deref(), Some("Channel Assignment"));
        let t = d.traffic.as_ref().unwrap();
        assert_eq!(t.pattern, "cbr");
        assert_eq!(t.params["rate"], "20");
        assert_eq!(
            d.groups[0].selection,
            Selection::Dynamic {
                count: 10,
                predicate: Predicate::BuildingEq("A".into())
            }
        );
        assert_eq!(
            d.groups[1].selection,
            Selection::Dynamic {
                count: 2,
                predicate: Predicate::DegreeAtLeast(4)
            }
        );
        assert_eq!(
            d.groups[2].selection,
            Selection::Static(vec!["n1".into(), "n2".into(), "n3".into()])
        );
        assert_eq!(d.actions[0].params["dst"], "sink");
        assert_eq!(d.metrics[1].unit, "pkt/s");
        assert_eq!(d.metrics[1].aggregation, Aggregation::FiveNumber);
        assert_eq!(d.cleanup[0].command, "stop_traffic");
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse("format: 1\n[experiment]\nid smoke\n").unwrap_err();
        assert_eq!((e.line, e.column), (3, 1));
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));

        let e = parse("format: 1\n[experiment]\nreplications: x\n").unwrap_err();
        assert_eq!((e.line, e.column), (3, 15));
        assert_eq!(e.kind.code(), "INVALID_VALUE");

        let e = parse("format: 1\n  [bogus]\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(e.kind, ParseErrorKind::UnknownSection("bogus".into()));
    }

    #[test]
    fn duplicate_group_rejected() {
        let text = format!("{MINIMAL}\n[group g]\nrole: server\nnodes: n2\n");
        let e = parse(&text).unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::DuplicateGroup("g".into()));
        assert_eq!(e.line, 16);
    }

    #[test]
    fn header_is_mandatory() {
        let e = parse("[experiment]\nid: a\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::MissingFormat);
        let e = parse("format: 2\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnsupportedFormat("2".into()));
        assert_eq!(parse("").unwrap_err().kind, ParseErrorKind::MissingFormat);
    }

    #[test]
    fn missing_and_conflicting_keys() {
        let e = parse("format: 1\n[experiment]\nid: a\nduration: 1\n").unwrap_err();
        assert_eq!(
            e.kind,
            ParseErrorKind::MissingKey {
                section: "experiment".into(),
                key: "replications".into()
            }
        );
        let text = MINIMAL.replace("nodes: n1", "nodes: n1\ncount: 2\nselect: random");
        let e = parse(&text).unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Syntax(_)));
        let text = MINIMAL.replace("duration: 10", "duration: 10\nduration: 11");
        assert_eq!(
            parse(&text).unwrap_err().kind,
            ParseErrorKind::DuplicateKey("duration".into())
        );
    }

    #[test]
    fn unterminated_string() {
        let e = parse("format: 1\n[experiment]\ntitle: \"open\n").unwrap_err();
        assert_eq!(e.kind.code(), "INVALID_VALUE");
    }

    #[test]
    fn crlf_line_endings() {
        let d = parse(&MINIMAL.replace('\n', "\r\n")).unwrap();
        assert_eq!(d, parse(MINIMAL).unwrap());
    }
}
