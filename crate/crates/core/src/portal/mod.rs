//! Transport-independent request handling for the remote experimentation
//! API. An HTTP front end only has to translate to and from [`ApiRequest`]
//! and [`ApiResponse`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::descript::{parse, serialize, ExperimentDescription, ValidationReport};
use crate::eval::{parse_pipeline, run_pipeline, usage_report, EvalError, Period};
use crate::monitor::{availability, MonitorError};
use crate::orchestrator::OrchestratorError;
use crate::scenario::{ScenarioError, Testbed};
use crate::store::{NewRecord, QueryFilter, RecordKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserRole {
    Experimenter,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    pub token: String,
    pub user: String,
    pub role: UserRole,
    /// Store timestamp after which the token is refused.
    #[serde(default)]
    pub expires: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiSession {
    pub user: String,
    pub role: UserRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Delete => "DELETE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: Method,
    pub path: String,
    pub query: BTreeMap<String, String>,
    /// Bearer token, if any.
    pub token: Option<String>,
    pub body: String,
}

impl ApiRequest {
    /// Splits a `path?k=v&...` target. Query values are taken literally.
    pub fn new(method: Method, target: &str) -> Self {
        let (path, q) = target.split_once('?').unwrap_or((target, ""));
        let query = q
            .split('&')
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (k, v) = p.split_once('=').unwrap_or((p, ""));
                (k.to_string(), v.to_string())
            })
            .collect();
        Self {
            method,
            path: path.to_string(),
            query,
            token: None,
            body: String::new(),
        }
    }

    pub fn get(target: &str) -> Self {
        Self::new(Method::Get, target)
    }

    pub fn post(target: &str, body: impl Into<String>) -> Self {
        Self {
            body: body.into(),
            ..Self::new(Method::Post, target)
        }
    }

    pub fn delete(target: &str) -> Self {
        Self::new(Method::Delete, target)
    }

    pub fn token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: Value) -> Self {
        Self { status, body }
    }

    fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": {"code": code, "message": message.into()}}),
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

/// Default window for availability in `GET /nodes`.
pub const DEFAULT_WINDOW_S: u64 = 86_400;

struct Stored {
    desc: ExperimentDescription,
    owner: String,
}

/// API state on top of a testbed. Every response is a function of the
/// testbed state and the request.
pub struct Portal {
    testbed: Testbed,
    tokens: Vec<TokenEntry>,
    descriptions: BTreeMap<String, Stored>,
}

impl Portal {
    /// Previously submitted descriptions in the testbed's store are
    /// reloaded, so ids stay valid across restarts.
    pub fn new(testbed: Testbed, tokens: Vec<TokenEntry>) -> Self {
        let mut descriptions = BTreeMap::new();
        let filter = QueryFilter::new().kind(RecordKind::Description);
        for r in testbed.store().query(&filter) {
            let (Some(id), Some(text), Some(owner)) = (
                r.payload.get("id").and_then(Value::as_str),
                r.payload.get("text").and_then(Value::as_str),
                r.payload.get("owner").and_then(Value::as_str),
            ) else {
                continue;
            };
            if let Ok(desc) = parse(text) {
                descriptions.insert(id.to_string(), Stored { desc, owner: owner.to_string() });
            }
        }
        Self {
            testbed,
            tokens,
            descriptions,
        }
    }

    pub fn testbed(&self) -> &Testbed {
        &self.testbed
    }

    pub fn testbed_mut(&mut self) -> &mut Testbed {
        &mut self.testbed
    }

    /// Moves virtual time forward; this is the scheduler tick.
    pub fn advance_to(&mut self, t: u64) -> Result<(), ScenarioError> {
        self.testbed.run_until(t)
    }

    fn now(&self) -> u64 {
        self.testbed.now()
    }

    /// Looks up a token; expired tokens are refused.
    pub fn session(&self, token: Option<&str>) -> Option<ApiSession> {
        let t = token?;
        let e = self.tokens.iter().find(|e| e.token == t)?;
        if e.expires.is_some_and(|x| self.now() >= x) {
            return None;
        }
        Some(ApiSession {
            user: e.user.clone(),
            role: e.role,
        })
    }

    pub fn handle(&mut self, req: &ApiRequest) -> ApiResponse {
        let segs: Vec<&str> = req.path.trim_matches('/').split('/').filter(|s| !s.is_empty()).collect();
        // Validation is a pure read even though it carries a body.
        let mutating = req.method != Method::Get && segs != ["validate"];
        let session = self.session(req.token.as_deref());
        if mutating && session.is_none() {
            return ApiResponse::error(401, "UNAUTHORIZED", "a valid token is required");
        }
        let resp = match (req.method, segs.as_slice()) {
            (Method::Get, ["health"]) => self.health(),
            (Method::Post, ["validate"]) => self.validate(req),
            (Method::Post, ["experiments"]) => self.submit(req, session.as_ref().expect("checked")),
            (Method::Get, ["experiments", id]) => self.description(id),
            (Method::Post, ["experiments", id, "schedule"]) => self.schedule(id, req, session.as_ref().expect("checked")),
            (Method::Get, ["queue"]) => self.queue(),
            (Method::Get, ["runs", id]) => self.run(id),
            (Method::Delete, ["runs", id]) => self.abort(id, session.as_ref().expect("checked")),
            (Method::Get, ["nodes"]) => self.nodes(req),
            (Method::Get, ["nodes", id, "monitoring"]) => self.monitoring(id, req),
            (Method::Get, ["reports", "usage"]) => self.usage(req),
            (Method::Post, ["pipelines"]) => self.pipeline(req),
            _ => ApiResponse::error(404, "NOT_FOUND", format!("no endpoint {} {}", req.method.as_str(), req.path)),
        };
        if mutating && (200..300).contains(&resp.status) {
            let s = session.expect("checked");
            let audit = json!({
                "event": "api_audit",
                "user": s.user,
                "role": s.role,
                "method": req.method.as_str(),
                "path": req.path,
                "status": resp.status,
                "target": resp.body.get("id").cloned().unwrap_or(Value::Null),
            });
            if let Err(e) = self.testbed.store().append(NewRecord::new(RecordKind::RunEvent, audit).run("api")) {
                return ApiResponse::error(500, "STORE", e.to_string());
            }
        }
        resp
    }

    fn health(&self) -> ApiResponse {
        ApiResponse::ok(
            200,
            json!({"status": "ok", "now": self.now(), "records": self.testbed.store().len()}),
        )
    }

    /// Parses and validates against the live inventory.
    fn check(&mut self, text: &str) -> Result<(ExperimentDescription, ValidationReport), ApiResponse> {
        let desc = parse(text).map_err(|e| {
            ApiResponse::error(400, e.kind.code(), e.to_string())
                .with("line", json!(e.line))
                .with("column", json!(e.column))
        })?;
        let report = self.testbed.orchestrator_mut().validate(&desc).map_err(orchestrator_error)?;
        if !report.is_ok() {
            return Err(ApiResponse::error(400, "INVALID_DESCRIPTION", report.to_string()).with("report", json!(report)));
        }
        Ok((desc, report))
    }

    fn validate(&mut self, req: &ApiRequest) -> ApiResponse {
        match self.check(&req.body) {
            Ok((desc, report)) => ApiResponse::ok(200, json!({"experiment": desc.id, "report": report})),
            Err(r) => r,
        }
    }

    fn submit(&mut self, req: &ApiRequest, s: &ApiSession) -> ApiResponse {
        let (desc, report) = match self.check(&req.body) {
            Ok(x) => x,
            Err(r) => return r,
        };
        let id = format!("d{:05}", self.descriptions.len() + 1);
        let text = serialize(&desc);
        let payload = json!({"id": id, "owner": s.user, "experiment": desc.id, "text": text});
        if let Err(e) = self.testbed.store().append(NewRecord::new(RecordKind::Description, payload)) {
            return ApiResponse::error(500, "STORE", e.to_string());
        }
        self.descriptions.insert(id.clone(), Stored { desc, owner: s.user.clone() });
        ApiResponse::ok(201, json!({"id": id, "report": report}))
    }

    fn description(&self, id: &str) -> ApiResponse {
        match self.descriptions.get(id) {
            Some(d) => ApiResponse::ok(
                200,
                json!({"id": id, "owner": d.owner, "experiment": d.desc.id, "text": serialize(&d.desc)}),
            ),
            None => ApiResponse::error(404, "UNKNOWN_DESCRIPTION", format!("no description {id}")),
        }
    }

    fn schedule(&mut self, id: &str, req: &ApiRequest, s: &ApiSession) -> ApiResponse {
        let Some(stored) = self.descriptions.get(id) else {
            return ApiResponse::error(404, "UNKNOWN_DESCRIPTION", format!("no description {id}"));
        };
        let start = if req.body.trim().is_empty() {
            None
        } else {
            match serde_json::from_str::<Value>(&req.body) {
                Ok(v) => match v.get("start") {
                    None | Some(Value::Null) => None,
                    Some(t) => match t.as_u64() {
                        Some(t) => Some(t),
                        None => return ApiResponse::error(400, "BAD_REQUEST", "`start` must be integer seconds"),
                    },
                },
                Err(e) => return ApiResponse::error(400, "BAD_REQUEST", e.to_string()),
            }
        };
        let desc = stored.desc.clone();
        let now = self.now();
        match self.testbed.orchestrator_mut().schedule(desc, &s.user, start.unwrap_or(now)) {
            Ok(entry) => {
                let id = entry.id.clone();
                ApiResponse::ok(201, json!({"id": id, "entry": entry}))
            }
            Err(e) => orchestrator_error(e),
        }
    }

    fn queue(&self) -> ApiResponse {
        let o = self.testbed.orchestrator();
        let entries: Vec<Value> = o
            .entries()
            .map(|e| {
                let runs: Vec<Value> = e
                    .runs
                    .iter()
                    .filter_map(|r| o.run(r))
                    .map(|r| json!({"run_id": r.run_id, "replication": r.replication, "phase": r.phase}))
                    .collect();
                let mut v = json!(e);
                v["runs"] = json!(runs);
                v
            })
            .collect();
        ApiResponse::ok(200, json!({"now": self.now(), "entries": entries}))
    }

    fn run(&self, id: &str) -> ApiResponse {
        let o = self.testbed.orchestrator();
        let store = self.testbed.store();
        if let Some(r) = o.run(id) {
            let events = store.query(&QueryFilter::new().kind(RecordKind::RunEvent).run(id));
            let timeline: Vec<Value> = store
                .query(&QueryFilter::new().kind(RecordKind::ExperimentData).run(id))
                .into_iter()
                .map(|d| {
                    json!({
                        "record": d.id, "node": d.node_id, "timestamp": d.timestamp,
                        "action": d.payload["action"], "command": d.payload["command"],
                        "status": d.payload["status"], "metrics": d.payload["metrics"],
                    })
                })
                .collect();
            return ApiResponse::ok(
                200,
                json!({"run": r, "events": events, "actions": timeline}),
            );
        }
        if let Some(e) = o.entry(id) {
            let runs: Vec<_> = e.runs.iter().filter_map(|r| o.run(r)).collect();
            return ApiResponse::ok(200, json!({"entry": e, "runs": runs}));
        }
        ApiResponse::error(404, "UNKNOWN_RUN", format!("no run or entry {id}"))
    }

    fn abort(&mut self, id: &str, s: &ApiSession) -> ApiResponse {
        let o = self.testbed.orchestrator();
        let entry_id = o.run(id).map(|r| r.entry.clone()).unwrap_or_else(|| id.to_string());
        let Some(entry) = o.entry(&entry_id) else {
            return ApiResponse::error(404, "UNKNOWN_RUN", format!("no run or entry {id}"));
        };
        if s.role != UserRole::Admin && entry.owner != s.user {
            return ApiResponse::error(403, "FORBIDDEN", format!("{id} belongs to another user"));
        }
        let o = self.testbed.orchestrator_mut();
        match o.abort(id) {
            Ok(()) => {
                let phase = o.run(id).map(|r| json!(r.phase));
                let status = o.entry(&entry_id).map(|e| json!(e.status));
                ApiResponse::ok(
                    200,
                    json!({"id": id, "phase": phase, "entry_status": status}),
                )
            }
            Err(e) => orchestrator_error(e),
        }
    }

    fn window(req: &ApiRequest) -> Result<u64, ApiResponse> {
        match req.query.get("window") {
            None => Ok(DEFAULT_WINDOW_S),
            Some(w) => match w.parse::<u64>() {
                Ok(w) if w > 0 => Ok(w),
                _ => Err(ApiResponse::error(400, "BAD_REQUEST", "`window` must be positive integer seconds")),
            },
        }
    }

    fn nodes(&mut self, req: &ApiRequest) -> ApiResponse {
        let window = match Self::window(req) {
            Ok(w) => w,
            Err(r) => return r,
        };
        let inventory = match self.testbed.orchestrator_mut().inventory() {
            Ok(i) => i,
            Err(e) => return orchestrator_error(e),
        };
        let now = self.now();
        let from = now.saturating_sub(window);
        let to = now + 1;
        let reservations = self.testbed.orchestrator().reservations();
        let nodes: Vec<Value> = inventory
            .iter()
            .map(|n| {
                let a = match availability(self.testbed.store(), &n.id, from, to) {
                    Ok(a) => json!(a.ratio()),
                    Err(MonitorError::NoData { .. }) => Value::Null,
                    Err(e) => json!({"error": e.code()}),
                };
                json!({
                    "id": n.id, "building": n.building, "up": n.up, "degree": n.degree,
                    "availability": a, "held_by": reservations.get(&n.id),
                })
            })
            .collect();
        ApiResponse::ok(200, json!({"now": now, "window": window, "nodes": nodes}))
    }

    fn monitoring(&mut self, id: &str, req: &ApiRequest) -> ApiResponse {
        let window = match Self::window(req) {
            Ok(w) => w,
            Err(r) => return r,
        };
        let known = match self.testbed.orchestrator_mut().inventory() {
            Ok(i) => i.iter().any(|n| n.id == id),
            Err(e) => return orchestrator_error(e),
        };
        if !known {
            return ApiResponse::error(404, "UNKNOWN_NODE", format!("no node {id}"));
        }
        let now = self.now();
        let filter = QueryFilter::new()
            .kind(RecordKind::MonitoringData)
            .node(id)
            .between(now.saturating_sub(window), now + 1);
        let records = self.testbed.store().query(&filter);
        ApiResponse::ok(200, json!({"node": id, "window": window, "records": records}))
    }

    fn usage(&self, req: &ApiRequest) -> ApiResponse {
        let Some(p) = req.query.get("period") else {
            return ApiResponse::error(400, "BAD_PERIOD", "`period` is required");
        };
        let period: Period = match p.parse() {
            Ok(p) => p,
            Err(e) => return eval_error(e),
        };
        let store = self.testbed.store();
        let mut records = store.query(&QueryFilter::new().kind(RecordKind::RunEvent).eq("event", "entry_finished"));
        records.extend(store.query(
            &QueryFilter::new()
                .kind(RecordKind::MonitoringData)
                .between(period.from, period.to)
                .eq("event", "poll"),
        ));
        match usage_report(&records, period) {
            Ok(r) => ApiResponse::ok(200, json!(r)),
            Err(e) => eval_error(e),
        }
    }

    fn pipeline(&self, req: &ApiRequest) -> ApiResponse {
        let spec = match parse_pipeline(&req.body) {
            Ok(s) => s,
            Err(e) => return eval_error(e),
        };
        if matches!(spec.input, crate::eval::Input::File { .. }) {
            return ApiResponse::error(400, "INPUT", "pipelines submitted over the API read from the store only");
        }
        match run_pipeline(&spec, Some(self.testbed.store())) {
            Ok(a) => ApiResponse::ok(200, json!({"format": a.format, "media_type": a.media_type, "body": a.body})),
            Err(e) => eval_error(e),
        }
    }
}

fn orchestrator_error(e: OrchestratorError) -> ApiResponse {
    let status = match &e {
        OrchestratorError::Invalid(_) | OrchestratorError::StartInPast { .. } => 400,
        OrchestratorError::UnknownRun(_) => 404,
        OrchestratorError::RunTerminal(_) => 409,
        OrchestratorError::Control(_) => 502,
        OrchestratorError::Store(_) => 500,
    };
    let resp = ApiResponse::error(status, e.code(), e.to_string());
    match e {
        OrchestratorError::Invalid(r) => resp.with("report", json!(r)),
        _ => resp,
    }
}

fn eval_error(e: EvalError) -> ApiResponse {
    let status = match e {
        EvalError::EmptyPeriod(_) => 404,
        _ => 400,
    };
    ApiResponse::error(status, e.code(), e.to_string())
}

#[cfg(test)]
mod tests;
