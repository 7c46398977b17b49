use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gridhelm_cli::jobfile::{parse_jobs, parse_list};
use gridhelm_cli::load::{self, DEFAULT_REQUESTS, DEFAULT_SWEEP};
use gridhelm_cli::{exit, Fail, DEFAULT_GATEWAY};
use gridhelm_core::estimators::{evaluate, EvaluationReport};
use gridhelm_core::experiments::{migration_experiment, runtime_experiment};
use gridhelm_core::history::write_trace;
use gridhelm_core::scenario::Scenario;
use gridhelm_core::trace::{generate, TraceConfig};
use gridhelm_gateway::{spawn, Client, Gateway, ServerConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "gridhelm", version, about = "Grid steering, monitoring and estimation services")]
struct Cli {
    /// Gateway endpoint.
    #[arg(long, global = true, env = "GRIDHELM_GATEWAY")]
    gateway: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway.
    Serve(ServeArgs),
    /// Open a session and print its token.
    Login {
        #[arg(long)]
        user: String,
        #[arg(long)]
        password: String,
    },
    /// Plan the jobs in a file, and submit them when a session is given.
    Submit(SubmitArgs),
    /// Steer a task or a whole job.
    Command(CommandArgs),
    /// Monitoring record of a task, or of every task (of a job).
    Status {
        task: Option<String>,
        #[arg(long)]
        job: Option<String>,
    },
    /// Call any gateway method and print the JSON result.
    Call {
        method: String,
        /// JSON params.
        params: Option<String>,
    },
    /// Experiment harnesses.
    #[command(subcommand)]
    Experiment(Experiment),
    /// Write a synthetic history/test trace pair.
    GenTrace {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GRIDHELM_ADDR")]
    addr: Option<String>,
    #[arg(long, env = "GRIDHELM_STORE")]
    store: Option<PathBuf>,
    #[arg(long, env = "GRIDHELM_SCENARIO")]
    scenario: Option<PathBuf>,
    /// Virtual seconds per wall-clock second.
    #[arg(long, env = "GRIDHELM_PACE", default_value_t = 0.0)]
    pace: f64,
}

#[derive(Args)]
struct SubmitArgs {
    file: PathBuf,
    #[arg(long)]
    session: Option<String>,
    #[arg(long, requires = "password")]
    user: Option<String>,
    #[arg(long, requires = "user")]
    password: Option<String>,
}

#[derive(Args)]
struct CommandArgs {
    #[arg(long)]
    session: String,
    #[arg(long, conflicts_with = "job", required_unless_present = "job")]
    task: Option<String>,
    #[arg(long)]
    job: Option<String>,
    /// kill, pause, resume, priority N, or move SITE|auto
    verb: String,
    arg: Option<String>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Runtime-estimate accuracy on a trace pair or on synthetic traces.
    Runtime {
        #[arg(long, requires = "test")]
        history: Option<PathBuf>,
        #[arg(long, requires = "history")]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Seeds to repeat over, e.g. `0..20` or `1,2,3`.
        #[arg(long, conflicts_with = "history")]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Latency of monitor.query under concurrent clients.
    Load {
        /// Client counts, e.g. `1,5,10,25,50`.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, default_value_t = DEFAULT_REQUESTS)]
        requests: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-site migration timeline.
    Migration {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Keep the original running next to the migrated copy.
        #[arg(long)]
        dual_run: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gridhelm: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Fail> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Fail::new(exit::FAILURE, e.to_string()))
}

fn run(cli: Cli) -> Result<(), Fail> {
    let url = cli.gateway.clone().unwrap_or_else(|| DEFAULT_GATEWAY.to_string());
    match cli.command {
        Command::Serve(a) => serve(a),
        Command::Login { user, password } => {
            let rt = runtime()?;
            let s = rt.block_on(Client::new(&url).call("steering.login", json!({ "user": user, "password": password })))?;
            println!("{}", s["session_id"].as_str().unwrap_or_default());
            Ok(())
        }
        Command::Submit(a) => submit(&url, a),
        Command::Command(a) => command(&url, a),
        Command::Status { task, job } => {
            let rt = runtime()?;
            let c = Client::new(&url);
            let v = rt.block_on(async {
                match task {
                    Some(t) => c.call("monitor.query", json!({ "task_id": t })).await,
                    None => c.call("monitor.list", json!({ "job_id": job })).await,
                }
            })?;
            print_json(&v);
            Ok(())
        }
        Command::Call { method, params } => {
            let params: Value = match params {
                Some(p) => serde_json::from_str(&p)
                    .map_err(|e| Fail::new(exit::PARSE, format!("params: line {}: {e}", e.line())))?,
                None => Value::Null,
            };
            let v = runtime()?.block_on(Client::new(&url).call(&method, params))?;
            print_json(&v);
            Ok(())
        }
        Command::Experiment(e) => experiment(cli.gateway.as_deref(), e),
        Command::GenTrace { seed, sigma, out_dir } => {
            let trace = generate(TraceConfig::new(seed, sigma));
            std::fs::create_dir_all(&out_dir).map_err(io_fail)?;
            let h = out_dir.join("history.csv");
            let t = out_dir.join("test.csv");
            write_file(&h, &write_trace(&trace.history))?;
            write_file(&t, &write_trace(&trace.test))?;
            println!("{} ({} rows)", h.display(), trace.history.len());
            println!("{} ({} rows)", t.display(), trace.test.len());
            Ok(())
        }
    }
}

fn io_fail(e: std::io::Error) -> Fail {
    Fail::new(exit::FAILURE, e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), Fail> {
    std::fs::write(path, text).map_err(|e| Fail::new(exit::FAILURE, format!("{}: {e}", path.display())))
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

/// Data goes to `out` or stdout; the summary goes to stdout when data went
/// to a file, stderr otherwise.
fn emit(out: Option<&Path>, data: &str, summary: &str) -> Result<(), Fail> {
    match out {
        Some(p) => {
            write_file(p, data)?;
            println!("{summary}");
        }
        None => {
            print!("{data}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn check(issues: Vec<String>) -> Result<(), Fail> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Fail::new(exit::SELF_CHECK, format!("self-check failed: {}", issues.join("; "))))
    }
}

fn serve(a: ServeArgs) -> Result<(), Fail> {
    let config = ServerConfig { addr: a.addr, store: a.store, scenario: a.scenario.clone(), pace: a.pace };
    if !(config.pace >= 0.0 && config.pace.is_finite()) {
        return Err(Fail::new(exit::PARSE, "--pace must be a non-negative number"));
    }
    let grid = config.build_grid().map_err(|e| {
        let code = if a.scenario.is_some() && e.contains("line ") { exit::PARSE } else { exit::FAILURE };
        Fail::new(code, e)
    })?;
    let rt = runtime()?;
    rt.block_on(async {
        let gw = Arc::new(Gateway::new(grid));
        let running = spawn(gw, config.addr(), config.pace)
            .await
            .map_err(|e| Fail::new(exit::CONNECTION, format!("bind {}: {e}", config.addr())))?;
        println!("gridhelm gateway listening on {}", running.url());
        let _ = tokio::signal::ctrl_c().await;
        running.stop().await.map_err(io_fail)
    })
}

fn submit(url: &str, a: SubmitArgs) -> Result<(), Fail> {
    let text = std::fs::read_to_string(&a.file).map_err(|e| Fail::new(exit::FAILURE, format!("{}: {e}", a.file.display())))?;
    let jobs = parse_jobs(&text, a.file.parent())
        .map_err(|e| Fail::new(exit::PARSE, format!("{}: {e}", a.file.display())))?;
    let rt = runtime()?;
    rt.block_on(async {
        let c = Client::new(url);
        let session = match (a.session, a.user, a.password) {
            (Some(s), _, _) => Some(s),
            (None, Some(u), Some(p)) => {
                let s = c.call("steering.login", json!({ "user": u, "password": p })).await?;
                s["session_id"].as_str().map(str::to_string)
            }
            _ => None,
        };
        for job in &jobs {
            let job_json = serde_json::to_value(job).map_err(|e| Fail::new(exit::FAILURE, e.to_string()))?;
            match &session {
                Some(s) => {
                    let out = c.call("steering.submit_plan", json!({ "session_id": s, "job": job_json })).await?;
                    println!("submitted {}", out["job_id"].as_str().unwrap_or_default());
                    print_assignments(&out["plan"]["assignments"], |t| out["estimates"][t].clone());
                }
                None => {
                    let report = c.call("scheduler.plan", json!({ "job": job_json })).await?;
                    println!("planned {} (not submitted; no session)", report["plan"]["job_id"].as_str().unwrap_or_default());
                    let tasks = report["tasks"].as_array().cloned().unwrap_or_default();
                    print_assignments(&report["plan"]["assignments"], |t| {
                        tasks.iter().find(|s| s["task_id"] == t).map(|s| s["estimate"].clone()).unwrap_or(Value::Null)
                    });
                }
            }
        }
        Ok(())
    })
}

fn print_assignments(assignments: &Value, estimate: impl Fn(&str) -> Value) {
    let Some(map) = assignments.as_object() else { return };
    for (task, site) in map {
        let e = estimate(task);
        match e["value"].as_f64() {
            Some(v) => println!(
                "  {task} -> {}  estimate={v}s ({}, n={})",
                site.as_str().unwrap_or_default(),
                e["method"].as_str().unwrap_or("?"),
                e["sample_count"]
            ),
            None => println!("  {task} -> {}", site.as_str().unwrap_or_default()),
        }
    }
}

fn command(url: &str, a: CommandArgs) -> Result<(), Fail> {
    let verb = match (a.verb.as_str(), a.arg.as_deref()) {
        ("kill" | "pause" | "resume", None) => json!(a.verb),
        ("priority" | "set_priority", Some(n)) => {
            let n: i64 = n.parse().map_err(|_| Fail::new(exit::PARSE, format!("priority `{n}` is not an integer")))?;
            json!({ "set_priority": n })
        }
        ("move", Some(site)) => json!({ "move": site }),
        (v, _) => return Err(Fail::new(exit::PARSE, format!("cannot parse command `{v}`; expected kill, pause, resume, priority N or move SITE|auto"))),
    };
    let target = match (a.task, a.job) {
        (Some(t), _) => json!({ "task": t }),
        (None, Some(j)) => json!({ "job": j }),
        (None, None) => unreachable!("clap requires one"),
    };
    let rt = runtime()?;
    let tasks = rt.block_on(Client::new(url).call("steering.command", json!({ "session_id": a.session, "target": target, "verb": verb })))?;
    for t in tasks.as_array().cloned().unwrap_or_default() {
        println!(
            "{} {} {}",
            t["task_id"].as_str().unwrap_or_default(),
            t["state"].as_str().unwrap_or_default(),
            t["assigned_site"].as_str().unwrap_or("-")
        );
    }
    Ok(())
}

fn runtime_summary(r: &EvaluationReport) -> String {
    format!("cases={} signed_mean={:.4}% mape={:.4}%", r.cases.len(), r.signed_mean_error, r.mean_absolute_error)
}

fn experiment(gateway: Option<&str>, e: Experiment) -> Result<(), Fail> {
    match e {
        Experiment::Runtime { history, test, seed, sigma, sweep, out } => {
            if let (Some(h), Some(t)) = (history, test) {
                let report = evaluate(&h, &t).map_err(|e| Fail::new(exit::PARSE, e.to_string()))?;
                emit(out.as_deref(), &report.to_csv(), &runtime_summary(&report))?;
                return check(runtime_issues(&report, None));
            }
            let seeds = match sweep {
                Some(s) => parse_list(&s).map_err(|e| Fail::new(exit::PARSE, format!("--sweep: {e}")))?,
                None => vec![seed],
            };
            if seeds.len() == 1 {
                let report = runtime_experiment(TraceConfig::new(seeds[0], sigma)).map_err(|e| Fail::new(exit::FAILURE, e.to_string()))?;
                emit(out.as_deref(), &report.to_csv(), &runtime_summary(&report))?;
                return check(runtime_issues(&report, Some(sigma)));
            }
            let mut csv = String::from("seed,signed_mean,mape\n");
            let mut issues = Vec::new();
            let mut worst: f64 = 0.0;
            for s in &seeds {
                let r = runtime_experiment(TraceConfig::new(*s, sigma)).map_err(|e| Fail::new(exit::FAILURE, e.to_string()))?;
                csv.push_str(&format!("{s},{:.6},{:.6}\n", r.signed_mean_error, r.mean_absolute_error));
                worst = worst.max(r.mean_absolute_error);
                issues.extend(runtime_issues(&r, Some(sigma)).into_iter().map(|i| format!("seed {s}: {i}")));
            }
            emit(out.as_deref(), &csv, &format!("seeds={} sigma={sigma} max_mape={worst:.4}%", seeds.len()))?;
            check(issues)
        }
        Experiment::Load { sweep, requests, out } => {
            let sweep = match sweep {
                Some(s) => parse_list(&s).map_err(|e| Fail::new(exit::PARSE, format!("--sweep: {e}")))?,
                None => DEFAULT_SWEEP.to_vec(),
            };
            let rt = runtime()?;
            let rows = rt.block_on(async {
                match gateway {
                    Some(url) => load::run_sweep(url, &sweep, requests).await,
                    None => load::run_in_process(&sweep, requests).await,
                }
            })?;
            let base = rows.first().map_or(f64::NAN, |r| r.mean_ms);
            let last = rows.last().map_or(f64::NAN, |r| r.p95_ms);
            let summary = format!("requests_per_client={requests} p95_last/mean_first={:.2}", last / base);
            emit(out.as_deref(), &load::to_csv(&rows), &summary)?;
            check(load::self_check(&rows, &sweep))
        }
        Experiment::Migration { scenario, dual_run, out } => {
            let sc = match &scenario {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Fail::new(exit::FAILURE, format!("{}: {e}", p.display())))?;
                    Some(Scenario::parse(&text, p.parent()).map_err(|e| Fail::new(exit::PARSE, format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let report = migration_experiment(sc.as_ref(), dual_run).map_err(|e| Fail::new(exit::FAILURE, e.to_string()))?;
            emit(out.as_deref(), &report.to_csv(), &report.summary())?;
            check(report.self_check())
        }
    }
}

fn runtime_issues(r: &EvaluationReport, sigma: Option<f64>) -> Vec<String> {
    let mut issues = Vec::new();
    if r.cases.is_empty() {
        issues.push("no test cases".into());
    }
    if !r.mean_absolute_error.is_finite() {
        issues.push("MAPE is not finite".into());
    }
    if sigma == Some(0.0) && r.mean_absolute_error > 1e-9 {
        issues.push(format!("noise-free trace gave MAPE {}", r.mean_absolute_error));
    }
    issues
}
