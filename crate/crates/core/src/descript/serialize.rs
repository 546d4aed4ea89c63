use std::fmt::Write;

use super::{Action, ExperimentDescription, Predicate, Selection, FORMAT_VERSION};

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Writes the canonical `.desc` form of `desc`.
///
/// Output depends only on the description value: fixed section order, fixed
/// key order within sections, parameter maps in key order, text fields quoted.
pub fn serialize(desc: &ExperimentDescription) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format: {FORMAT_VERSION}");
    out.push_str("\n[experiment]\n");
    let _ = writeln!(out, "id: {}", desc.id);
    let _ = writeln!(out, "title: {}", quote(&desc.title));
    let _ = writeln!(out, "description: {}", quote(&desc.description));
    if let Some(topic) = &desc.topic {
        let _ = writeln!(out, "topic: {}", quote(topic));
    }
    let _ = writeln!(out, "replications: {}", desc.replications);
    let _ = writeln!(out, "duration: {}", desc.duration_limit);
    if let Some(traffic) = &desc.traffic {
        let _ = writeln!(out, "traffic: {}", traffic.pattern);
        for (k, v) in &traffic.params {
            let _ = writeln!(out, "traffic.{k}: {}", quote(v));
        }
    }

    for group in &desc.groups {
        let _ = write!(out, "\n[group {}]\nrole: {}\n", group.name, group.role.as_str());
        match &group.selection {
            Selection::Static(nodes) if nodes.is_empty() => out.push_str("nodes:\n"),
            Selection::Static(nodes) => {
                let _ = writeln!(out, "nodes: {}", nodes.join(", "));
            }
            Selection::Dynamic { count, predicate } => {
                let _ = writeln!(out, "count: {count}");
                match predicate {
                    Predicate::BuildingEq(b) => {
                        let _ = writeln!(out, "select: building == {}", quote(b));
                    }
                    Predicate::DegreeAtLeast(n) => {
                        let _ = writeln!(out, "select: degree >= {n}");
                    }
                    Predicate::Random => out.push_str("select: random\n"),
                }
            }
        }
    }

    for action in &desc.actions {
        write_action(&mut out, "action", action);
    }

    if !desc.metrics.is_empty() {
        out.push_str("\n[metrics]\n");
        for m in &desc.metrics {
            let _ = writeln!(out, "{}: {} {}", m.name, quote(&m.unit), m.aggregation.as_str());
        }
    }

    for action in &desc.cleanup {
        write_action(&mut out, "cleanup", action);
    }
    out
}

fn write_action(out: &mut String, section: &str, action: &Action) {
    let _ = write!(
        out,
        "\n[{section}]\ntarget: {}\ncommand: {}\nstart: {}\ntimeout: {}\n",
        action.target, action.command, action.start_offset, action.timeout
    );
    for (k, v) in &action.params {
        let _ = writeln!(out, "param.{k}: {}", quote(v));
    }
}
