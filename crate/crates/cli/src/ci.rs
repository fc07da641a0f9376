use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Args, Subcommand};
use serde_json::{json, Value};
use stagehand_core::dsl::parse_str;
use stagehand_core::pipeline::validate_all;
use stagehand_server::{serve, ApiConfig};

use crate::client::{Client, DEFAULT_SERVER};

const POLL: Duration = Duration::from_millis(250);

#[derive(Args, Clone)]
pub struct Remote {
    /// Address of a running `ci serve`.
    #[arg(long, env = "STAGEHAND_SERVER", default_value = DEFAULT_SERVER)]
    server: String,
}

#[derive(Subcommand)]
pub enum CiCmd {
    /// Check a pipeline document.
    Validate { file: PathBuf },
    /// Run the pipeline server.
    Serve {
        #[arg(long, default_value = ".")]
        config: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, env = "STAGEHAND_WEBHOOK_TOKEN", hide_env_values = true)]
        webhook_token: Option<String>,
        /// Infrastructure state used to resolve deploy targets.
        #[arg(long)]
        infra_state: Option<PathBuf>,
    },
    /// Start a run.
    Run {
        pipeline: String,
        #[arg(long)]
        revision: Option<String>,
        /// Stream the log until the run ends; exit 0 only on success.
        #[arg(long)]
        watch: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Approve or reject a run waiting at a gate.
    Approve {
        run_id: String,
        #[arg(long)]
        reject: bool,
        #[arg(long)]
        by: Option<String>,
        #[command(flatten)]
        remote: Remote,
    },
    /// Print a run's log.
    Logs {
        run_id: String,
        #[arg(long)]
        follow: bool,
        #[command(flatten)]
        remote: Remote,
    },
    /// Show a run.
    Status {
        run_id: String,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        remote: Remote,
    },
}

pub fn run(cmd: CiCmd) -> ExitCode {
    let result = match cmd {
        CiCmd::Validate { file } => validate(&file),
        CiCmd::Serve { config, data, listen, webhook_token, infra_state } => {
            cmd_serve(ApiConfig { listen, config_dir: config, data_dir: data, webhook_token, infra_state })
        }
        CiCmd::Run { pipeline, revision, watch, remote } => cmd_run(&Client::new(&remote.server), &pipeline, revision, watch),
        CiCmd::Approve { run_id, reject, by, remote } => cmd_approve(&Client::new(&remote.server), &run_id, reject, by),
        CiCmd::Logs { run_id, follow, remote } => {
            follow_log(&Client::new(&remote.server), &run_id, follow).map(|_| ExitCode::SUCCESS)
        }
        CiCmd::Status { run_id, json, remote } => cmd_status(&Client::new(&remote.server), &run_id, json),
    };
    result.unwrap_or_else(|msg| {
        eprintln!("error: {msg}");
        ExitCode::FAILURE
    })
}

fn validate(file: &PathBuf) -> Result<ExitCode, String> {
    let name = file.display().to_string();
    let text = fs::read_to_string(file).map_err(|e| format!("{name}: {e}"))?;
    let doc = parse_str(&text, &name).map_err(|e| format!("{name}:{e}"))?;
    validate_all(&doc).map_err(|e| format!("{name}:{e}"))?;
    println!("OK");
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(cfg: ApiConfig) -> Result<ExitCode, String> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let server = serve(cfg).map_err(|e| e.to_string())?;
    println!("listening on {}", server.url());
    server.wait_for_signal();
    eprintln!("shutting down");
    server.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(client: &Client, pipeline: &str, revision: Option<String>, watch: bool) -> Result<ExitCode, String> {
    let body = match revision {
        Some(r) => json!({ "revision": r }),
        None => json!({}),
    };
    let run = client.post(&format!("/api/pipelines/{pipeline}/runs"), &body)?;
    let id = run["id"].as_str().ok_or("server returned no run id")?.to_string();
    if !watch {
        println!("{id}");
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("run {id}");
    let last = follow_log(client, &id, true)?;
    Ok(if last["state"] == "succeeded" { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_approve(client: &Client, id: &str, reject: bool, by: Option<String>) -> Result<ExitCode, String> {
    let by = by.or_else(|| std::env::var("USER").ok()).unwrap_or_else(|| "cli".into());
    let decision = if reject { "reject" } else { "approve" };
    let run = client.post(&format!("/api/runs/{id}/approval"), &json!({ "decision": decision, "by": by }))?;
    println!("{id}: {}", run["state"].as_str().unwrap_or("?"));
    Ok(ExitCode::SUCCESS)
}

/// Prints log pages; with `follow`, keeps polling until the run ends.
/// Returns the run as last seen.
fn follow_log(client: &Client, id: &str, follow: bool) -> Result<Value, String> {
    let mut offset = 0u64;
    let mut announced_gate = false;
    loop {
        let page = client.get(&format!("/api/runs/{id}/log?offset={offset}"))?;
        for line in page["events"].as_array().into_iter().flatten() {
            println!("{}", line.as_str().unwrap_or_default());
        }
        offset = page["next_offset"].as_u64().unwrap_or(offset);
        let got_lines = page["events"].as_array().is_some_and(|e| !e.is_empty());
        if page["complete"] == true || !follow {
            return client.get(&format!("/api/runs/{id}"));
        }
        if got_lines {
            continue;
        }
        if !announced_gate {
            let run = client.get(&format!("/api/runs/{id}"))?;
            if run["state"] == "waiting_approval" {
                eprintln!("waiting for approval; run `stagehand ci approve {id}` to continue");
                announced_gate = true;
            }
        }
        thread::sleep(POLL);
    }
}

fn cmd_status(client: &Client, id: &str, as_json: bool) -> Result<ExitCode, String> {
    let run = client.get(&format!("/api/runs/{id}"))?;
    if as_json {
        println!("{}", serde_json::to_string_pretty(&run).expect("json"));
        return Ok(ExitCode::SUCCESS);
    }
    let s = |v: &Value| v.as_str().unwrap_or("-").to_string();
    println!("{}  {}  revision {}  ({})", s(&run["id"]), s(&run["state"]), s(&run["revision"]["id"]), s(&run["cause"]));
    for stage in run["stage_results"].as_array().into_iter().flatten() {
        println!("  {:<16} {}", s(&stage["stage"]), s(&stage["status"]));
    }
    if let Some(reason) = run["reason"].as_str() {
        println!("reason: {reason}");
    }
    Ok(ExitCode::SUCCESS)
}
