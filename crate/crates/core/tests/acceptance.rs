//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use meshbed::descript::{parse, serialize};
use meshbed::eval::{histogram, summarize, usage_report, Period};
use meshbed::fleet::{Fleet, FleetConfig, LinkModel, LinkSpec};
use meshbed::monitor;
use meshbed::orchestrator::{baseline_fingerprint, required_replications, Phase};
use meshbed::scenario::{self, random_description, synthetic, workload, ScenarioConfig, Testbed};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, StudentsT};

const YEAR_S: u64 = 365 * 86_400;

type Outcome = Result<String, String>;

fn config(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ScenarioConfig::from_toml(&text).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dsl_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = meshbed::seed::rng(2024, &[b"acceptance-dsl"]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let d = random_description(&mut rng);
        if parse(&serialize(&d)).ok().as_ref() != Some(&d) {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    check(
        mismatches == 0 && el < Duration::from_secs(10),
        format!("1000 descriptions, {mismatches} mismatches, {:.2} s (limit 10 s)", el.as_secs_f64()),
    )
}

/// One hold of a node set, bounded by record ids of the acquire and
/// release events.
struct Hold {
    entry: String,
    acquired: u64,
    released: Option<u64>,
}

/// Brute-force pairwise overlap scan straight off the exported log.
fn sharing_violations(export: &[u8]) -> Result<(usize, usize), String> {
    let mut holds: BTreeMap<String, Vec<Hold>> = BTreeMap::new();
    for line in export.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
        let r: Value = serde_json::from_slice(line).map_err(|e| e.to_string())?;
        if r["kind"] != "run_event" {
            continue;
        }
        let p = &r["payload"];
        let ev = p["event"].as_str().unwrap_or("");
        if ev != "nodes_acquired" && ev != "nodes_released" {
            continue;
        }
        let id = r["id"].as_u64().ok_or("record without id")?;
        let entry = p["entry"].as_str().ok_or("event without entry")?.to_string();
        for n in p["nodes"].as_array().ok_or("event without nodes")? {
            let list = holds.entry(n.as_str().unwrap_or("").to_string()).or_default();
            if ev == "nodes_acquired" {
                list.push(Hold { entry: entry.clone(), acquired: id, released: None });
            } else {
                let h = list
                    .iter_mut()
                    .rev()
                    .find(|h| h.entry == entry && h.released.is_none())
                    .ok_or_else(|| format!("{entry} released {n} without holding it"))?;
                h.released = Some(id);
            }
        }
    }
    let mut violations = 0;
    let mut total = 0;
    for list in holds.values() {
        total += list.len();
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                let (ae, be) = (a.released.unwrap_or(u64::MAX), b.released.unwrap_or(u64::MAX));
                if a.acquired < be && b.acquired < ae {
                    violations += 1;
                }
            }
        }
        violations += list.iter().filter(|h| h.released.is_none()).count();
    }
    Ok((violations, total))
}

fn scheduler_safety(export: &mut Option<Vec<u8>>) -> Outcome {
    let cfg = config("year995.cfg");
    let t = Instant::now();
    let out = scenario::simulate(&cfg).map_err(|e| e.to_string())?;
    let el = t.elapsed();
    let bytes = out.export();
    let (violations, holds) = sharing_violations(&bytes)?;
    let finished = out
        .testbed
        .orchestrator()
        .entries()
        .filter(|e| e.status.is_terminal())
        .count();
    *export = Some(bytes);
    check(
        violations == 0
            && out.scheduled == 661
            && out.rejected.is_empty()
            && finished == 661
            && out.testbed.fleet().lock().len() == 135
            && el < Duration::from_secs(300),
        format!(
            "{} scheduled, {} rejected, {finished} finished, {holds} node holds, {violations} overlaps, {:.1} s (limit 300 s)",
            out.scheduled,
            out.rejected.len(),
            el.as_secs_f64()
        ),
    )
}

fn defined_state() -> Outcome {
    let mut cfg = config("small.cfg");
    cfg.calibration = None;
    cfg.fleet.churn = None;
    let mut tb = Testbed::from_config(&cfg).map_err(|e| e.to_string())?;
    let inventory = tb.orchestrator_mut().inventory().map_err(|e| e.to_string())?;
    let wl = workload::WorkloadConfig {
        experiments: 50,
        users: 5,
        mean_runtime_s: 1800.0,
        max_runtime_s: 7200,
        max_nodes: 10,
        ..Default::default()
    };
    let epoch = tb.epoch();
    let mut ids = Vec::new();
    for mut s in workload::generate(&wl, &inventory, epoch, 86_400, 77) {
        s.desc.replications = 5;
        let e = tb
            .orchestrator_mut()
            .schedule(s.desc, &s.owner, epoch)
            .map_err(|e| e.to_string())?;
        ids.push(e.id);
    }
    tb.run_to_idle(u64::MAX).map_err(|e| e.to_string())?;
    let o = tb.orchestrator();
    let mut bad_prepare = 0;
    let mut bad_cleanup = 0;
    let mut runs_seen = 0;
    for id in &ids {
        let entry = o.entry(id).ok_or("entry vanished")?;
        let runs: Vec<_> = entry.runs.iter().filter_map(|r| o.run(r)).collect();
        runs_seen += runs.iter().filter(|r| r.phase == Phase::Done).count();
        let first = runs.first().and_then(|r| r.prepare_fingerprint.clone());
        if first.is_none() || runs.iter().any(|r| r.prepare_fingerprint != first) {
            bad_prepare += 1;
        }
        let base = baseline_fingerprint(entry.nodes.len().max(runs.first().map_or(0, |r| r.nodes.len())));
        bad_cleanup += runs
            .iter()
            .filter(|r| r.cleanup_fingerprint.as_deref() != Some(base.as_str()))
            .count();
    }
    check(
        ids.len() == 50 && runs_seen == 250 && bad_prepare == 0 && bad_cleanup == 0,
        format!(
            "{} experiments, {runs_seen}/250 runs done, {bad_prepare} with differing prepare fingerprints, {bad_cleanup} cleanups off baseline",
            ids.len()
        ),
    )
}

struct Calib {
    mean_down_h: f64,
    mean_gap_pp: f64,
    max_gap_pp: f64,
}

fn calibrate(name: &str) -> Result<Calib, String> {
    let mut cfg = config(name);
    cfg.workload = None;
    let mut tb = Testbed::from_config(&cfg).map_err(|e| e.to_string())?;
    let (from, to) = (cfg.epoch, cfg.epoch + YEAR_S);
    tb.run_until(to).map_err(|e| e.to_string())?;
    let fleet = tb.fleet().lock();
    let ids: Vec<String> = fleet.node_ids().map(str::to_string).collect();
    let mut down = 0.0;
    let mut gaps = Vec::new();
    for id in &ids {
        let d = fleet.downtime(id).map_err(|e| e.to_string())? as f64;
        down += d;
        let truth = 1.0 - d / YEAR_S as f64;
        let seen = monitor::availability(tb.store(), id, from, to).map_err(|e| e.to_string())?.ratio();
        gaps.push((seen - truth) * 100.0);
    }
    let n = ids.len() as f64;
    Ok(Calib {
        mean_down_h: down / n / 3600.0,
        mean_gap_pp: gaps.iter().sum::<f64>().abs() / n,
        max_gap_pp: gaps.iter().fold(0.0f64, |m, g| m.max(g.abs())),
    })
}

fn availability_calibration() -> Outcome {
    let a = calibrate("year98.cfg")?;
    let b = calibrate("year995.cfg")?;
    check(
        (131.0..=219.0).contains(&a.mean_down_h)
            && (33.0..=55.0).contains(&b.mean_down_h)
            && a.max_gap_pp <= 0.5
            && b.max_gap_pp <= 0.5,
        format!(
            "98%: {:.1} h down (131..219), 99.5%: {:.1} h down (33..55); monitor vs truth per node max {:.3}/{:.3} pp, fleet mean {:.3}/{:.3} pp (limit 0.5)",
            a.mean_down_h, b.mean_down_h, a.max_gap_pp, b.max_gap_pp, a.mean_gap_pp, b.mean_gap_pp
        ),
    )
}

fn etx_convergence() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut inexact = 0;
    for (df, dr) in [(1.0, 1.0), (0.8, 0.9), (0.5, 0.5)] {
        let mut sum = 0.0;
        for seed in 0..30 {
            let mut c = FleetConfig::new(2, seed);
            c.links = LinkModel::Explicit {
                links: vec![LinkSpec { a: "n1".into(), b: "n2".into(), df, dr }],
            };
            let mut fleet = Fleet::spawn(c).map_err(|e| e.to_string())?;
            let links = fleet.measure_links(100).map_err(|e| e.to_string())?;
            let s = &links.first().ok_or("no link measured")?.state;
            sum += s.etx.value();
            let report = fleet.poll("n1", 100).map_err(|e| e.to_string())?;
            for l in report.links.iter().chain(std::iter::once(s)) {
                if l.etx.value() != 1.0 / (l.df * l.dr) {
                    inexact += 1;
                }
            }
        }
        let mean = sum / 30.0;
        let truth = 1.0 / (df * dr);
        let rel = (mean - truth).abs() / truth;
        ok &= rel <= 0.05;
        parts.push(format!("({df},{dr}): {mean:.4} vs {truth:.4} ({:.2}%)", rel * 100.0));
    }
    check(ok && inexact == 0, format!("{}; {inexact} inexact etx values", parts.join(", ")))
}

/// Student-t quantile by bisection on an independent CDF.
fn t_quantile_ref(p: f64, df: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, df).unwrap();
    let (mut lo, mut hi) = (-1e3, 1e3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn median_ref(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

struct Worst(f64);

impl Worst {
    fn see(&mut self, got: f64, want: f64, scale: f64) {
        let err = (got - want).abs() / want.abs().max(scale).max(f64::MIN_POSITIVE);
        self.0 = self.0.max(err);
    }
}

fn statistics_oracle() -> Outcome {
    let mut rng = meshbed::seed::rng(5, &[b"acceptance-stats"]);
    let mut worst = Worst(0.0);
    let mut bin_mismatch = 0;
    for _ in 0..1000 {
        let n: usize = rng.random_range(1..=200);
        let loc: f64 = rng.random_range(-1e3..1e3);
        let spread: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let xs: Vec<f64> = (0..n).map(|_| loc + spread * rng.random_range(-1.0..1.0)).collect();
        let conf = [0.9, 0.95, 0.99][rng.random_range(0..3)];
        let s = summarize("m", &xs, conf).map_err(|e| e.to_string())?;
        let scale = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;

        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &x) in xs.iter().enumerate() {
            let d = x - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (x - mean);
        }
        let sd = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
        let half = if n > 1 {
            t_quantile_ref(1.0 - (1.0 - conf) / 2.0, (n - 1) as f64) * sd / (n as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = xs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lower, upper) = (&sorted[..n.div_ceil(2)], &sorted[n / 2..]);
        let (q1, q3) = (median_ref(lower), median_ref(upper));
        worst.see(s.mean, mean, scale);
        worst.see(s.stddev, sd, 0.0);
        worst.see(s.ci_low, mean - half, scale);
        worst.see(s.ci_high, mean + half, scale);
        worst.see(s.five.min, sorted[0], 0.0);
        worst.see(s.five.q1, q1, 0.0);
        worst.see(s.five.median, median_ref(&sorted), 0.0);
        worst.see(s.five.q3, q3, 0.0);
        worst.see(s.five.max, sorted[n - 1], 0.0);
        worst.see(s.notch, 1.57 * (q3 - q1) / (n as f64).sqrt(), spread * 1e-6);

        let w = [0.5, 1.0, 2.5, 10.0, 100.0][rng.random_range(0..5)];
        let bins = histogram(&xs, w).map_err(|e| e.to_string())?;
        let mut k: i64 = 0;
        while sorted[0] < k as f64 * w {
            k -= 1;
        }
        let mut expect = Vec::new();
        loop {
            let (a, b) = (k as f64 * w, (k + 1) as f64 * w);
            expect.push((a, xs.iter().filter(|&&x| a <= x && x < b).count() as u64));
            if sorted[n - 1] < b {
                break;
            }
            k += 1;
        }
        if bins.len() != expect.len() {
            bin_mismatch += 1;
        } else {
            for (bin, (a, c)) in bins.iter().zip(&expect) {
                worst.see(bin.start, *a, w);
                bin_mismatch += (bin.count != *c) as usize;
            }
        }
    }
    let ex = summarize("x", &[8.0, 10.0, 12.0], 0.95).map_err(|e| e.to_string())?;
    let ci_ok = (ex.ci_low - 5.032).abs() <= 1e-3 && (ex.ci_high - 14.968).abs() <= 1e-3;
    check(
        worst.0 <= 1e-9 && bin_mismatch == 0 && ci_ok,
        format!(
            "1000 datasets, worst relative error {:.2e} (limit 1e-9), {bin_mismatch} histogram mismatches; [8,10,12] 95% CI = ({:.4}, {:.4})",
            worst.0, ex.ci_low, ex.ci_high
        ),
    )
}

fn replication_formula() -> Outcome {
    let n = required_replications(100.0, 10.0, 0.95, 0.05).map_err(|e| e.to_string())?;
    let mut rng = meshbed::seed::rng(16, &[b"acceptance-replications"]);
    let normal = Normal::new(100.0, 10.0).unwrap();
    let (mut within, mut narrow) = (0, 0);
    for _ in 0..1000 {
        let xs: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let s = summarize("x", &xs, 0.95).map_err(|e| e.to_string())?;
        within += ((s.mean - 100.0).abs() <= 5.0) as u32;
        narrow += ((s.ci_high - s.ci_low) / 2.0 <= 5.0) as u32;
    }
    let share = within as f64 / 1000.0;
    check(
        n == 16 && share >= 0.85,
        format!(
            "required_replications = {n}; |mean - mu| <= 5 in {:.1}% of 1000 trials (limit 85%); t half-width <= 5 in {:.1}% (info)",
            share * 100.0,
            narrow as f64 / 10.0
        ),
    )
}

fn usage_reproduction() -> Outcome {
    let r = usage_report(&synthetic::usage_log(&synthetic::marginals_2011(), 1), Period::year(2011).unwrap())
        .map_err(|e| e.to_string())?;
    let t = usage_report(
        &synthetic::topic_log(Period::year(2011).unwrap(), &synthetic::topics_2011(), 30, 1),
        Period::year(2011).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let routing = t.topics.iter().find(|row| row.topic == "Routing").ok_or("no Routing row")?;
    check(
        r.experiments == 661
            && r.users == 30
            && r.max_runtime_h == 875.0
            && r.max_nodes == 131
            && r.mean_nodes == 99.0
            && (r.mean_experiments_per_user - 22.03).abs() <= 0.01
            && routing.count == 362
            && routing.hours == 4067.0,
        format!(
            "experiments {}, users {}, max runtime {} h, max nodes {}, mean nodes {}, per user {:.4}; Routing ({}, {} h)",
            r.experiments,
            r.users,
            r.max_runtime_h,
            r.max_nodes,
            r.mean_nodes,
            r.mean_experiments_per_user,
            routing.count,
            routing.hours
        ),
    )
}

fn determinism(first: Option<Vec<u8>>) -> Outcome {
    let cfg = config("year995.cfg");
    if cfg.seed != 42 {
        return Err(format!("config seed is {}", cfg.seed));
    }
    let a = match first {
        Some(a) => a,
        None => scenario::simulate(&cfg).map_err(|e| e.to_string())?.export(),
    };
    let b = scenario::simulate(&cfg).map_err(|e| e.to_string())?.export();
    check(a == b, format!("two seed-42 year runs, {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match res {
        Ok(d) => {
            println!("PASS  {name}: {d} [{secs:.1} s]");
            true
        }
        Err(d) => {
            println!("FAIL  {name}: {d} [{secs:.1} s]");
            false
        }
    }
}

fn main() {
    let mut export = None;
    let results = [
        run("dsl round-trip", dsl_round_trip),
        run("scheduler safety", || scheduler_safety(&mut export)),
        run("defined state", defined_state),
        run("availability calibration", availability_calibration),
        run("etx convergence", etx_convergence),
        run("statistics oracle", statistics_oracle),
        run("replication count", replication_formula),
        run("usage report", usage_reproduction),
        run("end-to-end determinism", || determinism(export.take())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
