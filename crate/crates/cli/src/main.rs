use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use meshbed::scenario::{self, synthetic, ScenarioConfig};
use meshbed::store::{QueryFilter, VirtualClock};
use meshbed_cli::client::{Client, ClientError};
use meshbed_cli::service::{self, Service, ServiceConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "meshbed", version, about = "Wireless multi-hop testbed operations")]
struct Cli {
    /// Base URL of the service.
    #[arg(long, env = "MESHBED_API", default_value = "http://127.0.0.1:8470", global = true)]
    api: String,
    /// API token for mutating requests.
    #[arg(long, env = "MESHBED_TOKEN", global = true)]
    token: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    /// Entries matching the 2011 yearly usage marginals.
    Usage2011,
    /// Entries matching the 2011 per-topic counts and hours.
    Topics2011,
}

#[derive(Subcommand)]
enum Command {
    /// Submit a `.desc` file; prints the description id.
    Submit {
        file: PathBuf,
        /// Schedule it right away.
        #[arg(long)]
        schedule: bool,
        /// Start time (store seconds) when scheduling.
        #[arg(long, requires = "schedule")]
        start: Option<u64>,
    },
    /// Validate a `.desc` file against the live inventory without storing it.
    Validate { file: PathBuf },
    /// Queue a submitted description.
    Schedule {
        id: String,
        #[arg(long)]
        start: Option<u64>,
    },
    /// Show the schedule queue.
    Queue,
    /// Abort a run or a whole queue entry.
    Abort { id: String },
    /// Inventory with availability over a window.
    Nodes {
        #[arg(long)]
        window: Option<u64>,
    },
    /// Usage report for a period (`2011`, `2011-01-01..2011-07-01` or `from..to` seconds).
    Report {
        #[arg(long)]
        period: String,
    },
    /// Run a `.eval` pipeline on the service's store.
    Pipeline {
        file: PathBuf,
        /// Write the artifact here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured port.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Run a seeded scenario headlessly and write the store export.
    Simulate {
        #[arg(long, required_unless_present = "synthetic")]
        config: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write a synthetic usage log instead of simulating.
        #[arg(long, value_enum, conflicts_with = "config")]
        synthetic: Option<Synthetic>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Client(ClientError),
    Local(String),
    /// Already reported; exit with this code.
    Code(u8),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Client(e)
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Local(format!("{}: {e}", path.display())))
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Failure::Local(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::Local(e.to_string())),
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialize"));
}

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.2}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}

fn print_issues(body: &Value) {
    if let Some(errors) = body["report"]["errors"].as_array() {
        for i in errors {
            eprintln!("  {} at {}: {}", s(&i["code"]), s(&i["location"]), s(&i["message"]));
        }
    }
    if let (Some(l), Some(c)) = (body["line"].as_u64(), body["column"].as_u64()) {
        eprintln!("  at line {l}, column {c}");
    }
}

fn print_queue(body: &Value) {
    println!("{:<8} {:<9} {:<20} {:<10} {:>5} {:>4}  RUNS", "ENTRY", "STATUS", "EXPERIMENT", "OWNER", "NODES", "REPS");
    for e in body["entries"].as_array().into_iter().flatten() {
        let runs: Vec<String> = e["runs"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|r| format!("{}:{}", s(&r["replication"]), s(&r["phase"])))
            .collect();
        println!(
            "{:<8} {:<9} {:<20} {:<10} {:>5} {:>4}  {}",
            s(&e["id"]),
            s(&e["status"]),
            s(&e["experiment"]),
            s(&e["owner"]),
            e["nodes"].as_array().map_or(0, Vec::len),
            s(&e["replications"]),
            runs.join(" ")
        );
    }
}

fn print_nodes(body: &Value) {
    println!("{:<6} {:<10} {:<4} {:>6} {:>9}  HELD_BY", "NODE", "BUILDING", "UP", "DEGREE", "AVAIL(%)");
    for n in body["nodes"].as_array().into_iter().flatten() {
        let avail = n["availability"].as_f64().map_or("-".to_string(), |a| format!("{:.2}", a * 100.0));
        println!(
            "{:<6} {:<10} {:<4} {:>6} {:>9}  {}",
            s(&n["id"]),
            s(&n["building"]),
            if n["up"] == true { "yes" } else { "no" },
            s(&n["degree"]),
            avail,
            s(&n["held_by"])
        );
    }
}

fn print_report(r: &Value) {
    let rows = [
        ("Number of experiments", &r["experiments"]),
        ("Max. runtime (h)", &r["max_runtime_h"]),
        ("Mean runtime (h)", &r["mean_runtime_h"]),
        ("Max. nodes", &r["max_nodes"]),
        ("Mean nodes", &r["mean_nodes"]),
        ("Users", &r["users"]),
        ("Mean experiments per user", &r["mean_experiments_per_user"]),
        ("Mean availability", &r["mean_availability"]),
    ];
    println!("period {}..{}", s(&r["period"]["from"]), s(&r["period"]["to"]));
    for (label, v) in rows {
        println!("{label:<28} {}", s(v));
    }
    println!();
    println!("{:<20} {:>6} {:>10}", "Topic", "Count", "Hours");
    for t in r["topics"].as_array().into_iter().flatten() {
        println!("{:<20} {:>6} {:>10}", s(&t["topic"]), s(&t["count"]), s(&t["hours"]));
    }
}

fn simulate(config: Option<&Path>, seed: Option<u64>, synthetic: Option<Synthetic>, out: Option<&Path>) -> Result<(), Failure> {
    let bytes = if let Some(kind) = synthetic {
        let m = synthetic::marginals_2011();
        let seed = seed.unwrap_or(1);
        let records = match kind {
            Synthetic::Usage2011 => synthetic::usage_log(&m, seed),
            Synthetic::Topics2011 => synthetic::topic_log(m.period, &synthetic::topics_2011(), m.users, seed),
        };
        let store = synthetic::to_store(&records, Arc::new(VirtualClock::new(0))).map_err(|e| Failure::Local(e.to_string()))?;
        eprintln!("{} records", store.len());
        store.export_bytes(&QueryFilter::new())
    } else {
        let path = config.expect("clap enforces --config");
        let mut cfg = ScenarioConfig::from_toml(&read(path)?).map_err(|e| Failure::Local(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        let outcome = scenario::simulate(&cfg).map_err(|e| Failure::Local(e.to_string()))?;
        eprintln!(
            "scheduled {}, rejected {}, {} records, ended at {}",
            outcome.scheduled,
            outcome.rejected.len(),
            outcome.testbed.store().len(),
            outcome.testbed.now()
        );
        outcome.export()
    };
    write_out(out, &bytes)
}

fn serve(config: &Path, port: Option<u16>) -> Result<(), Failure> {
    let mut cfg = ServiceConfig::load(config).map_err(|e| Failure::Local(e.to_string()))?;
    if let Some(p) = port {
        cfg.port = p;
    }
    let svc = Arc::new(Service::build(&cfg).map_err(|e| Failure::Local(e.to_string()))?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Local(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.addr()).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        service::serve(svc, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(|e| Failure::Local(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let client = Client::new(&cli.api, cli.token.clone());
    let json_out = cli.format == Format::Json;
    match cli.command {
        Command::Submit { file, schedule, start } => {
            let body = client.post("/experiments", read(&file)?)?;
            let id = s(&body["id"]);
            let scheduled = if schedule {
                Some(client.post(&format!("/experiments/{id}/schedule"), json!({"start": start}).to_string())?)
            } else {
                None
            };
            if json_out {
                print_json(&json!({"submitted": body, "scheduled": scheduled}));
            } else {
                println!("{id}");
                if let Some(e) = scheduled {
                    println!("{} {}", s(&e["id"]), s(&e["entry"]["status"]));
                }
            }
        }
        Command::Validate { file } => match client.post("/validate", read(&file)?) {
            Ok(body) if json_out => print_json(&body),
            Ok(body) => println!("valid: {}", s(&body["experiment"])),
            Err(ClientError::Api { status: 400, body, message, code }) => {
                if json_out {
                    print_json(&body);
                } else {
                    eprintln!("invalid: {code}: {message}");
                    print_issues(&body);
                }
                return Err(Failure::Code(2));
            }
            Err(e) => return Err(e.into()),
        },
        Command::Schedule { id, start } => {
            let body = client.post(&format!("/experiments/{id}/schedule"), json!({"start": start}).to_string())?;
            if json_out {
                print_json(&body);
            } else {
                println!("{} {} start {}", s(&body["id"]), s(&body["entry"]["status"]), s(&body["entry"]["start"]));
            }
        }
        Command::Queue => {
            let body = client.get("/queue")?;
            if json_out {
                print_json(&body)
            } else {
                print_queue(&body)
            }
        }
        Command::Abort { id } => {
            let body = client.delete(&format!("/runs/{id}"))?;
            if json_out {
                print_json(&body);
            } else {
                println!("aborting {} (phase {}, entry {})", s(&body["id"]), s(&body["phase"]), s(&body["entry_status"]));
            }
        }
        Command::Nodes { window } => {
            let path = match window {
                Some(w) => format!("/nodes?window={w}"),
                None => "/nodes".into(),
            };
            let body = client.get(&path)?;
            if json_out {
                print_json(&body)
            } else {
                print_nodes(&body)
            }
        }
        Command::Report { period } => {
            let body = client.get(&format!("/reports/usage?period={period}"))?;
            if json_out {
                print_json(&body)
            } else {
                print_report(&body)
            }
        }
        Command::Pipeline { file, out } => {
            let body = client.post("/pipelines", read(&file)?)?;
            if json_out && out.is_none() {
                print_json(&body);
            } else {
                write_out(out.as_deref(), s(&body["body"]).as_bytes())?;
            }
        }
        Command::Serve { config, port } => serve(&config, port)?,
        Command::Simulate { config, seed, synthetic, out } => simulate(config.as_deref(), seed, synthetic, out.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Code(c)) => ExitCode::from(c),
        Err(Failure::Local(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Client(e)) => {
            eprintln!("error: {e}");
            if let ClientError::Api { body, .. } = &e {
                print_issues(body);
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
