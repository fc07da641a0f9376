//! HTTP API over the pipeline engine and the infrastructure state.

mod api;

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use stagehand_core::dsl::{document_kind, parse_str, DocumentKind};
use stagehand_core::pipeline::{validate_all, Engine, EngineConfig, EngineError, PipelineSpec};
use thiserror::Error;
use tokio::runtime::Runtime;
use tokio::sync::oneshot;

pub use api::{redact, router, AppState};

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub listen: String,
    pub config_dir: PathBuf,
    pub data_dir: PathBuf,
    pub webhook_token: Option<String>,
    /// Defaults to `infra.state.json` in the data dir.
    pub infra_state: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error("invalid configuration:\n{0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Every pipeline defined in the `.fl` files of `dir`. Infrastructure
/// documents are skipped. All problems are reported together.
pub fn load_pipelines(dir: &Path) -> Result<Vec<PipelineSpec>, ServerError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fl") && p.is_file())
        .collect();
    files.sort();
    let mut specs: Vec<PipelineSpec> = Vec::new();
    let mut problems = Vec::new();
    for file in files {
        let name = file.display().to_string();
        let text = fs::read_to_string(&file)?;
        let doc = match parse_str(&text, &name) {
            Ok(d) => d,
            Err(e) => {
                problems.push(format!("{name}:{e}"));
                continue;
            }
        };
        if document_kind(&doc) != DocumentKind::Pipeline {
            continue;
        }
        match validate_all(&doc) {
            Ok(found) => {
                for mut spec in found {
                    if specs.iter().any(|s| s.name == spec.name) {
                        problems.push(format!("{name}: pipeline `{}` is defined twice", spec.name));
                        continue;
                    }
                    spec.resolve_paths(dir);
                    specs.push(spec);
                }
            }
            Err(e) => problems.push(format!("{name}:{e}")),
        }
    }
    if problems.is_empty() {
        Ok(specs)
    } else {
        Err(ServerError::ConfigInvalid(problems.join("\n")))
    }
}

/// A running API server. Dropping it shuts it down.
pub struct Server {
    addr: SocketAddr,
    engine: Engine,
    rt: Option<Runtime>,
    stop: Option<oneshot::Sender<()>>,
    serving: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

/// Loads and validates the configuration, binds, starts pollers and serves.
pub fn serve(cfg: ApiConfig) -> Result<Server, ServerError> {
    let specs = load_pipelines(&cfg.config_dir)?;
    let token = cfg.webhook_token.clone().filter(|t| !t.is_empty());
    if token.is_none() {
        if let Some(p) = specs.iter().find(|p| p.trigger.webhook) {
            return Err(ServerError::ConfigInvalid(format!(
                "pipeline `{}` enables webhooks but no webhook token is set",
                p.name
            )));
        }
    }
    let listener = std::net::TcpListener::bind(&cfg.listen).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServerError::AddressInUse(cfg.listen.clone()),
        _ => ServerError::Io(e),
    })?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let mut ecfg = EngineConfig::new(&cfg.data_dir);
    if let Some(p) = &cfg.infra_state {
        ecfg.infra_state = p.clone();
    }
    let infra_state = ecfg.infra_state.clone();
    let engine = Engine::start(ecfg, specs)?;
    engine.start_pollers();

    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let state = Arc::new(AppState { engine: engine.clone(), infra_state, webhook_token: token });
    let app = router(state);
    let (stop, stopped) = oneshot::channel::<()>();
    let serving = rt.spawn(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(Server { addr, engine, rt: Some(rt), stop: Some(stop), serving: Some(serving) })
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Blocks until SIGINT or SIGTERM.
    pub fn wait_for_signal(&self) {
        let Some(rt) = &self.rt else { return };
        rt.block_on(async {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).ok();
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = async {
                    match term.as_mut() {
                        Some(t) => { t.recv().await; }
                        None => std::future::pending::<()>().await,
                    }
                } => {}
            }
        });
    }

    /// Finishes in-flight requests, then stops the engine. Run state is
    /// persisted as it changes, so nothing is lost.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        let Some(rt) = self.rt.take() else { return };
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(serving) = self.serving.take() {
            match rt.block_on(async { tokio::time::timeout(Duration::from_secs(10), serving).await }) {
                Ok(Ok(Err(e))) => tracing::warn!(error = %e, "server stopped with an error"),
                Err(_) => tracing::warn!("in-flight requests did not finish in time"),
                _ => {}
            }
        }
        rt.shutdown_timeout(Duration::from_secs(1));
        self.engine.shutdown(Duration::from_secs(5));
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_now();
    }
}
