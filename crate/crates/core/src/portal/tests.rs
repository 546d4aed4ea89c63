use std::sync::Arc;

use super::*;
use crate::fleet::{FleetConfig, LinkModel};
use crate::scenario::{synthetic, ScenarioConfig};
use crate::store::{Store, VirtualClock};

const EPOCH: u64 = 1_000_000;
const MINIMAL: &str = "format: 1\n[experiment]\nid: e1\nreplications: 2\nduration: 60\n\
                       [group g]\nrole: client\nnodes: n1, n2\n[action]\ntarget: g\ncommand: noop\n";

fn tokens() -> Vec<TokenEntry> {
    vec![
        TokenEntry { token: "t-alice".into(), user: "alice".into(), role: UserRole::Experimenter, expires: None },
        TokenEntry { token: "t-bob".into(), user: "bob".into(), role: UserRole::Experimenter, expires: Some(EPOCH + 100) },
        TokenEntry { token: "t-root".into(), user: "root".into(), role: UserRole::Admin, expires: None },
    ]
}

fn scenario(nodes: usize, epoch: u64) -> ScenarioConfig {
    let mut fleet = FleetConfig::new(nodes, 0);
    fleet.links = LinkModel::Explicit { links: vec![] };
    ScenarioConfig {
        seed: 3,
        epoch,
        duration_s: 0,
        fleet,
        calibration: None,
        monitor: crate::monitor::MonitorConfig { cadence_s: 60, probes: 0 },
        workload: None,
    }
}

fn portal() -> Portal {
    Portal::new(Testbed::from_config(&scenario(4, EPOCH)).unwrap(), tokens())
}

fn submit(p: &mut Portal, text: &str) -> String {
    let r = p.handle(&ApiRequest::post("/experiments", text).token("t-alice"));
    assert_eq!(r.status, 201, "{}", r.body);
    r.body["id"].as_str().unwrap().to_string()
}

fn audit_count(p: &Portal) -> usize {
    p.testbed()
        .store()
        .query(&QueryFilter::new().kind(RecordKind::RunEvent).eq("event", "api_audit"))
        .len()
}

#[test]
fn submit_minimal_description() {
    let mut p = portal();
    let r = p.handle(&ApiRequest::post("/experiments", MINIMAL).token("t-alice"));
    assert_eq!(r.status, 201);
    assert_eq!(r.body["id"], "d00001");
    assert_eq!(r.body["report"]["errors"], json!([]));
    let d = p.handle(&ApiRequest::get("/experiments/d00001"));
    assert_eq!(d.status, 200);
    assert_eq!(parse(d.body["text"].as_str().unwrap()).unwrap(), parse(MINIMAL).unwrap());
    assert_eq!(audit_count(&p), 1);
}

#[test]
fn auth_is_required_for_mutations() {
    let mut p = portal();
    assert_eq!(p.handle(&ApiRequest::post("/experiments", MINIMAL)).status, 401);
    assert_eq!(p.handle(&ApiRequest::post("/experiments", MINIMAL).token("nope")).status, 401);
    assert_eq!(p.handle(&ApiRequest::get("/queue")).status, 200);
    assert_eq!(p.handle(&ApiRequest::post("/experiments", MINIMAL).token("t-bob")).status, 201);
    p.advance_to(EPOCH + 100).unwrap();
    let r = p.handle(&ApiRequest::post("/experiments", MINIMAL).token("t-bob"));
    assert_eq!(r.status, 401, "expired token");
    assert_eq!(audit_count(&p), 1);
}

#[test]
fn validation_errors_are_400() {
    let mut p = portal();
    let r = p.handle(&ApiRequest::post("/experiments", "format: 1\n[bogus]\n").token("t-alice"));
    assert_eq!(r.status, 400);
    assert_eq!(r.body["line"], 2);
    let bad = MINIMAL.replace("target: g", "target: h");
    let r = p.handle(&ApiRequest::post("/experiments", bad).token("t-alice"));
    assert_eq!(r.status, 400);
    assert_eq!(r.body["error"]["code"], "INVALID_DESCRIPTION");
    assert_eq!(r.body["report"]["errors"][0]["code"], "GROUP_UNDECLARED");
    let r = p.handle(&ApiRequest::post("/validate", MINIMAL));
    assert_eq!(r.status, 200);
    assert_eq!(r.body["experiment"], "e1");
    let r = p.handle(&ApiRequest::post("/validate", MINIMAL.replace("n2", "n99")));
    assert_eq!(r.body["report"]["errors"][0]["code"], "NODE_UNKNOWN");
    assert_eq!(audit_count(&p), 0);
    assert_eq!(p.testbed().store().len(), 0);
}

#[test]
fn schedule_queue_run_and_abort() {
    let mut p = portal();
    let id = submit(&mut p, MINIMAL);
    let r = p.handle(&ApiRequest::post(&format!("/experiments/{id}/schedule"), "").token("t-alice"));
    assert_eq!(r.status, 201, "{}", r.body);
    let entry = r.body["id"].as_str().unwrap().to_string();
    let q = p.handle(&ApiRequest::get("/queue"));
    assert_eq!(q.body["entries"][0]["id"], entry.as_str());
    assert_eq!(q.body["entries"][0]["status"], "active");

    p.advance_to(EPOCH + 30).unwrap();
    let run = format!("{entry}.1");
    let r = p.handle(&ApiRequest::get(&format!("/runs/{run}")));
    assert_eq!(r.body["run"]["phase"], "executing");
    assert_eq!(r.body["actions"].as_array().unwrap().len(), 2);

    let r = p.handle(&ApiRequest::delete(&format!("/runs/{run}")).token("t-root"));
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.body["phase"], "cleaning");
    p.advance_to(EPOCH + 300).unwrap();
    let r = p.handle(&ApiRequest::get(&format!("/runs/{entry}")));
    assert_eq!(r.body["entry"]["status"], "aborted");
    let r = p.handle(&ApiRequest::delete(&format!("/runs/{run}")).token("t-root"));
    assert_eq!(r.status, 409);
    assert_eq!(p.handle(&ApiRequest::delete("/runs/q00099.1").token("t-root")).status, 404);
    assert_eq!(p.handle(&ApiRequest::get("/runs/q00099")).status, 404);
}

#[test]
fn only_owner_or_admin_may_abort() {
    let mut p = portal();
    let id = submit(&mut p, MINIMAL);
    p.handle(&ApiRequest::post(&format!("/experiments/{id}/schedule"), "").token("t-alice"));
    let r = p.handle(&ApiRequest::delete("/runs/q00001").token("t-bob"));
    assert_eq!(r.status, 403);
    assert_eq!(p.handle(&ApiRequest::delete("/runs/q00001").token("t-alice")).status, 200);
}

#[test]
fn schedule_errors() {
    let mut p = portal();
    let id = submit(&mut p, MINIMAL);
    p.advance_to(EPOCH + 10).unwrap();
    let path = format!("/experiments/{id}/schedule");
    let r = p.handle(&ApiRequest::post(&path, r#"{"start": 5}"#).token("t-alice"));
    assert_eq!((r.status, r.body["error"]["code"].as_str()), (400, Some("START_IN_PAST")));
    let r = p.handle(&ApiRequest::post(&path, r#"{"start": "soon"}"#).token("t-alice"));
    assert_eq!(r.status, 400);
    let r = p.handle(&ApiRequest::post("/experiments/d00042/schedule", "").token("t-alice"));
    assert_eq!(r.status, 404);
    let r = p.handle(&ApiRequest::post(&path, format!(r#"{{"start": {}}}"#, EPOCH + 500)).token("t-alice"));
    assert_eq!(r.status, 201);
    assert_eq!(r.body["entry"]["status"], "queued");
}

#[test]
fn nodes_and_monitoring() {
    let mut p = portal();
    p.advance_to(EPOCH + 600).unwrap();
    let r = p.handle(&ApiRequest::get("/nodes?window=600"));
    assert_eq!(r.status, 200);
    let nodes = r.body["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 4);
    assert_eq!(nodes[0]["availability"], 1.0);
    let r = p.handle(&ApiRequest::get("/nodes/n2/monitoring?window=300"));
    assert_eq!(r.status, 200);
    assert_eq!(r.body["records"].as_array().unwrap().len(), 6);
    assert_eq!(p.handle(&ApiRequest::get("/nodes/n9/monitoring")).status, 404);
    assert_eq!(p.handle(&ApiRequest::get("/nodes?window=x")).status, 400);
}

#[test]
fn usage_report_on_synthetic_store() {
    let records = synthetic::usage_log(&synthetic::marginals_2011(), 1);
    let epoch = Period::year(2012).unwrap().from + 30 * 86_400;
    let clock = VirtualClock::new(epoch);
    let store = Arc::new(synthetic::to_store(&records, Arc::new(clock.clone())).unwrap());
    let tb = Testbed::with_store(&scenario(2, epoch), store, clock).unwrap();
    let mut p = Portal::new(tb, tokens());
    let r = p.handle(&ApiRequest::get("/reports/usage?period=2011"));
    assert_eq!(r.status, 200, "{}", r.body);
    assert_eq!(r.body["experiments"], 661);
    assert_eq!(r.body["users"], 30);
    assert_eq!(p.handle(&ApiRequest::get("/reports/usage?period=2009")).status, 404);
    assert_eq!(p.handle(&ApiRequest::get("/reports/usage?period=soon")).status, 400);
    assert_eq!(p.handle(&ApiRequest::get("/reports/usage")).status, 400);
}

#[test]
fn pipelines_and_health() {
    let mut p = portal();
    let id = submit(&mut p, MINIMAL);
    p.handle(&ApiRequest::post(&format!("/experiments/{id}/schedule"), "").token("t-alice"));
    p.advance_to(EPOCH + 1000).unwrap();
    let spec = "format: 1\n[input]\nkind: experiment_data\n[stage extract]\nfield: metrics.alive\n\
                [stage summarize]\n[output]\nformat: plot-data\n";
    let r = p.handle(&ApiRequest::post("/pipelines", spec).token("t-alice"));
    assert_eq!(r.status, 200, "{}", r.body);
    let doc: Value = serde_json::from_str(r.body["body"].as_str().unwrap()).unwrap();
    assert_eq!(doc["series"][0]["kind"], "boxplot");
    assert_eq!(doc["series"][0]["n"], 4);
    let r = p.handle(&ApiRequest::post("/pipelines", spec.replace("summarize", "foo")).token("t-alice"));
    assert_eq!((r.status, r.body["error"]["code"].as_str()), (400, Some("UNKNOWN_STAGE")));
    let file = "format: 1\n[input]\nsource: file\npath: /etc/passwd\n[output]\n";
    assert_eq!(p.handle(&ApiRequest::post("/pipelines", file).token("t-alice")).status, 400);
    let h = p.handle(&ApiRequest::get("/health"));
    assert_eq!(h.body["status"], "ok");
    assert_eq!(h.body["now"], EPOCH + 1000);
    assert_eq!(p.handle(&ApiRequest::get("/nope")).status, 404);
}

#[test]
fn descriptions_survive_restart() {
    let clock = VirtualClock::new(EPOCH);
    let store = Arc::new(Store::in_memory(Arc::new(clock.clone())));
    let mut p = Portal::new(Testbed::with_store(&scenario(4, EPOCH), store.clone(), clock.clone()).unwrap(), tokens());
    let id = submit(&mut p, MINIMAL);
    drop(p);
    let p = Portal::new(Testbed::with_store(&scenario(4, EPOCH), store, clock).unwrap(), tokens());
    assert_eq!(p.description(&id).status, 200);
}

#[test]
fn every_successful_mutation_is_audited() {
    let mut p = portal();
    let id = submit(&mut p, MINIMAL);
    p.handle(&ApiRequest::post(&format!("/experiments/{id}/schedule"), "").token("t-alice"));
    p.handle(&ApiRequest::delete("/runs/q00001").token("t-alice"));
    p.handle(&ApiRequest::delete("/runs/q00001").token("t-alice"));
    let audits = p
        .testbed()
        .store()
        .query(&QueryFilter::new().kind(RecordKind::RunEvent).eq("event", "api_audit"));
    let paths: Vec<&str> = audits.iter().map(|a| a.payload["path"].as_str().unwrap()).collect();
    assert_eq!(paths, ["/experiments", "/experiments/d00001/schedule", "/runs/q00001", "/runs/q00001"]);
    assert!(audits.iter().all(|a| a.payload["user"] == "alice"));
}
