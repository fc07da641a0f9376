use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Subcommand};
use stagehand_core::dsl::{parse_str, Value};
use stagehand_core::iac::{apply, destroy, plan, topo_order, IacError, InfraConfig, Plan, Providers, StateFile, StateStore};
use stagehand_core::providers::{LocalProvider, ServerLauncher};

#[derive(Args, Clone)]
pub struct Common {
    /// Infrastructure document.
    #[arg(short = 'f', long = "file", default_value = "infra.fl")]
    file: PathBuf,
    /// State file.
    #[arg(long, default_value = "infra.state.json")]
    state: PathBuf,
    /// Print machine-readable JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
pub enum InfraCmd {
    /// Show what apply would change.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Exit 2 when the plan has changes.
        #[arg(long)]
        detailed_exitcode: bool,
    },
    /// Make the infrastructure match the document.
    Apply {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        auto_approve: bool,
    },
    /// Delete everything recorded in the state.
    Destroy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        auto_approve: bool,
    },
    /// Print outputs; a single named output is printed raw.
    Output {
        name: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

struct Failure(String);

impl From<IacError> for Failure {
    fn from(e: IacError) -> Self {
        Failure(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure(e.to_string())
    }
}

pub fn run(cmd: InfraCmd) -> ExitCode {
    let result = match cmd {
        InfraCmd::Plan { common, detailed_exitcode } => cmd_plan(&common, detailed_exitcode),
        InfraCmd::Apply { common, auto_approve } => cmd_apply(&common, auto_approve),
        InfraCmd::Destroy { common, auto_approve } => cmd_destroy(&common, auto_approve),
        InfraCmd::Output { name, common } => cmd_output(&common, name.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(file: &Path) -> Result<InfraConfig, Failure> {
    let name = file.display().to_string();
    let text = fs::read_to_string(file).map_err(|e| Failure(format!("{name}: {e}")))?;
    let doc = parse_str(&text, &name).map_err(|e| Failure(format!("{name}:{e}")))?;
    InfraConfig::from_document(&doc).map_err(|e| match e {
        IacError::Config { .. } => Failure(format!("{name}:{e}")),
        other => Failure(format!("{name}: {other}")),
    })
}

fn absolute(p: &Path) -> io::Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

/// The local provider keeps its sandboxes next to the state file, and runs
/// instance servers through this executable.
fn providers(state: &Path) -> Result<Providers, Failure> {
    let state = absolute(state)?;
    let base = state.parent().map(Path::to_path_buf).unwrap_or_default().join("sandbox");
    let program = std::env::current_exe()?;
    let launcher = ServerLauncher { program, args: vec!["__static-serve".into()] };
    Ok(Providers::new().with(LocalProvider::new(base, launcher)))
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Text(t) => t.clone(),
        other => serde_json::to_string(other).expect("values serialize"),
    }
}

fn print_outputs(outputs: &BTreeMap<String, Value>) {
    for (k, v) in outputs {
        println!("{k} = {}", render_value(v));
    }
}

fn compute_plan(common: &Common, state: &StateFile, providers: &Providers) -> Result<(InfraConfig, Plan), Failure> {
    let cfg = load_config(&common.file)?;
    let pl = plan(&cfg.resources, state, &providers.schemas()).map_err(|e| Failure(format!("{}: {e}", common.file.display())))?;
    Ok((cfg, pl))
}

fn cmd_plan(common: &Common, detailed: bool) -> Result<ExitCode, Failure> {
    let store = StateStore::new(&common.state);
    let state = store.load()?;
    let (_, pl) = compute_plan(common, &state, &providers(&common.state)?)?;
    if common.json {
        println!("{}", pl.to_json());
    } else {
        print!("{}", pl.render());
    }
    Ok(if detailed && pl.has_changes() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn confirm(prompt: &str) -> Result<bool, Failure> {
    print!("{prompt} (yes/no) ");
    io::stdout().flush()?;
    let mut line = String::new();
    io::stdin().lock().read_line(&mut line)?;
    Ok(line.trim_end_matches(['\n', '\r']) == "yes")
}

fn cmd_apply(common: &Common, auto_approve: bool) -> Result<ExitCode, Failure> {
    let store = StateStore::new(&common.state);
    let _lock = store.lock()?;
    let state = store.load()?;
    let mut providers = providers(&common.state)?;
    let (cfg, pl) = compute_plan(common, &state, &providers)?;
    print!("{}", pl.render());
    if pl.has_changes() && !auto_approve && !confirm("Apply?")? {
        eprintln!("Apply cancelled.");
        return Ok(ExitCode::FAILURE);
    }
    match apply(&pl, &cfg, &state, &mut providers) {
        Ok(applied) => {
            if applied.state != state {
                store.save(&applied.state)?;
            }
            let s = pl.summary;
            println!("Apply complete! Resources: {} added, {} changed, {} destroyed.", s.add, s.change, s.destroy);
            if common.json {
                println!("{}", serde_json::to_string(&applied.outputs).expect("outputs serialize"));
            } else if !applied.outputs.is_empty() {
                println!("\nOutputs:\n");
                print_outputs(&applied.outputs);
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            store.save(&failure.state)?;
            Err(failure.error.into())
        }
    }
}

fn cmd_destroy(common: &Common, auto_approve: bool) -> Result<ExitCode, Failure> {
    let store = StateStore::new(&common.state);
    let _lock = store.lock()?;
    let state = store.load()?;
    if state.resources.is_empty() {
        println!("Nothing to destroy.");
        return Ok(ExitCode::SUCCESS);
    }
    for address in topo_order(&state.graph())?.iter().rev() {
        println!("- {address}");
    }
    println!("Plan: 0 to add, 0 to change, {} to destroy.", state.resources.len());
    if !auto_approve && !confirm("Destroy?")? {
        eprintln!("Destroy cancelled.");
        return Ok(ExitCode::FAILURE);
    }
    let mut providers = providers(&common.state)?;
    match destroy(&state, &mut providers) {
        Ok(after) => {
            store.save(&after)?;
            println!("Destroy complete! Resources: {} destroyed.", state.resources.len());
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            store.save(&failure.state)?;
            Err(failure.error.into())
        }
    }
}

fn cmd_output(common: &Common, name: Option<&str>) -> Result<ExitCode, Failure> {
    let state = StateStore::new(&common.state).load()?;
    match name {
        Some(n) => {
            let v = state.outputs.get(n).ok_or_else(|| Failure(format!("no output named `{n}`")))?;
            if common.json {
                println!("{}", serde_json::to_string(v).expect("values serialize"));
            } else {
                println!("{}", render_value(v));
            }
        }
        None if common.json => println!("{}", serde_json::to_string(&state.outputs).expect("outputs serialize")),
        None => print_outputs(&state.outputs),
    }
    Ok(ExitCode::SUCCESS)
}
