use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::os::unix::fs::{OpenOptionsExt, PermissionsExt};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::distr::{Alphanumeric, SampleString};

use super::{
    check_relative, local_schema, sha256_hex, text_attr, Attrs, Created, Provider, ProviderError,
    ProviderSchema, PASSWORD_LEN,
};
use crate::dsl::Value;
use crate::httpd;
use crate::process::{run_shell, Stream};

const PROVISION_TIMEOUT: Duration = Duration::from_secs(60);
const SERVER_READY_TIMEOUT: Duration = Duration::from_secs(10);
const STOP_TIMEOUT: Duration = Duration::from_secs(2);

/// How to start an instance's static server as a detached process:
/// `program args... --root <dir> --port <n> --ready-file <path>`.
#[derive(Debug, Clone)]
pub struct ServerLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

/// Entry point of the detached static server process. Binds, publishes the
/// bound address to `ready_file`, then serves until killed.
pub fn run_server_process(root: &Path, port: u16, ready_file: &Path) -> std::io::Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    crate::canonical::write_atomic(ready_file, addr.to_string().as_bytes())?;
    httpd::serve_forever(listener, root.to_path_buf());
    Ok(())
}

/// Realizes resources on the local machine: instances are sandbox directories
/// under `base_dir` with their own static HTTP server process.
pub struct LocalProvider {
    base_dir: PathBuf,
    launcher: ServerLauncher,
    schema: ProviderSchema,
    children: HashMap<String, Child>,
}

impl LocalProvider {
    pub fn new(base_dir: impl Into<PathBuf>, launcher: ServerLauncher) -> Self {
        LocalProvider {
            base_dir: base_dir.into(),
            launcher,
            schema: local_schema("local"),
            children: HashMap::new(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    fn new_id(prefix: &str) -> String {
        format!("{prefix}-{}", &uuid::Uuid::new_v4().simple().to_string()[..12])
    }

    fn instance_root(&self, id: &str) -> PathBuf {
        self.base_dir.join(id)
    }

    fn create_instance(&mut self, attrs: &Attrs) -> Result<Created, ProviderError> {
        text_attr(attrs, "name")?;
        let port = attrs.get("port").and_then(Value::as_f64).unwrap_or(0.0);
        if !(0.0..=65535.0).contains(&port) || port.fract() != 0.0 {
            return Err(ProviderError::InvalidAttr { name: "port".into(), message: format!("{port} is not a port") });
        }
        let port = port as u16;
        let commands: Vec<String> = match attrs.get("provision") {
            None => vec![],
            Some(Value::List(items)) => items
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or_else(|| ProviderError::InvalidAttr {
                    name: "provision".into(),
                    message: "expected a list of commands".into(),
                })?,
            Some(_) => {
                return Err(ProviderError::InvalidAttr { name: "provision".into(), message: "expected a list".into() })
            }
        };

        let id = Self::new_id("inst");
        let root = self.instance_root(&id);
        fs::create_dir_all(root.join("www"))?;
        let result = self.materialize_instance(&id, &root, port, &commands);
        if result.is_err() {
            self.stop_server(&id, &root);
            let _ = fs::remove_dir_all(&root);
        }
        result
    }

    fn materialize_instance(
        &mut self,
        id: &str,
        root: &Path,
        port: u16,
        commands: &[String],
    ) -> Result<Created, ProviderError> {
        let password = Alphanumeric.sample_string(&mut rand::rng(), PASSWORD_LEN);
        let mut pw = fs::OpenOptions::new().create(true).write(true).truncate(true).mode(0o600).open(root.join("admin_password"))?;
        pw.write_all(password.as_bytes())?;
        fs::set_permissions(root.join("admin_password"), fs::Permissions::from_mode(0o600))?;

        let mut log = fs::OpenOptions::new().create(true).append(true).open(root.join("provision.log"))?;
        for cmd in commands {
            writeln!(log, "+ {cmd}")?;
            let mut output = String::new();
            let exit = run_shell(cmd, root, &[], PROVISION_TIMEOUT, |stream, line| {
                let tag = if stream == Stream::Err { "err" } else { "out" };
                let _ = writeln!(log, "{tag}: {line}");
                output.push_str(line);
                output.push('\n');
            })?;
            if !exit.success() {
                return Err(ProviderError::ProvisionFailed {
                    command: cmd.clone(),
                    exit_code: if exit.timed_out { -1 } else { exit.code.unwrap_or(-1) },
                    output,
                });
            }
        }

        let addr = self.start_server(id, root, port)?;
        let health = format!("http://{addr}{}", httpd::HEALTH_PATH);
        match httpd::http_get(&health, Duration::from_secs(2)) {
            Ok((200, _)) => {}
            other => {
                return Err(ProviderError::Io(std::io::Error::other(format!(
                    "health check on {addr} failed: {other:?}"
                ))))
            }
        }

        let mut computed = Attrs::new();
        computed.insert("id".into(), Value::from(id));
        computed.insert("addr".into(), Value::from(addr.to_string()));
        computed.insert("url".into(), Value::from(format!("http://{addr}/")));
        computed.insert("admin_password".into(), Value::from(password));
        computed.insert("root_dir".into(), Value::from(root.to_string_lossy().into_owned()));
        Ok(Created { id: id.to_string(), computed })
    }

    fn start_server(&mut self, id: &str, root: &Path, port: u16) -> Result<SocketAddr, ProviderError> {
        let ready = root.join("server.addr");
        let _ = fs::remove_file(&ready);
        let stderr = fs::File::create(root.join("server.log"))?;
        let mut child = Command::new(&self.launcher.program)
            .args(&self.launcher.args)
            .arg("--root")
            .arg(root.join("www"))
            .arg("--port")
            .arg(port.to_string())
            .arg("--ready-file")
            .arg(&ready)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .process_group(0)
            .spawn()?;
        fs::write(root.join("server.pid"), child.id().to_string())?;

        let deadline = Instant::now() + SERVER_READY_TIMEOUT;
        loop {
            if let Ok(text) = fs::read_to_string(&ready) {
                if let Ok(addr) = text.trim().parse::<SocketAddr>() {
                    self.children.insert(id.to_string(), child);
                    return Ok(addr);
                }
            }
            if let Some(status) = child.try_wait()? {
                let log = fs::read_to_string(root.join("server.log")).unwrap_or_default();
                if port != 0 {
                    return Err(ProviderError::PortUnavailable(port));
                }
                return Err(ProviderError::Io(std::io::Error::other(format!(
                    "static server exited with {status}: {}",
                    log.trim()
                ))));
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ProviderError::Io(std::io::Error::other("static server did not become ready")));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Stops the server belonging to instance `id`, whether it was started by
    /// this process or an earlier one.
    fn stop_server(&mut self, id: &str, root: &Path) {
        if let Some(mut child) = self.children.remove(id) {
            let _ = child.kill();
            let _ = child.wait();
            return;
        }
        let Some(pid) = fs::read_to_string(root.join("server.pid")).ok().and_then(|s| s.trim().parse::<i32>().ok())
        else {
            return;
        };
        // only signal the pid if it is still our server (pids get reused)
        let cmdline = fs::read(format!("/proc/{pid}/cmdline")).unwrap_or_default();
        let marker = root.join("www").to_string_lossy().into_owned();
        if !String::from_utf8_lossy(&cmdline).contains(&marker) {
            return;
        }
        // SAFETY: plain syscalls on a pid verified above.
        unsafe {
            libc::kill(pid, libc::SIGTERM);
        }
        let deadline = Instant::now() + STOP_TIMEOUT;
        while Path::new(&format!("/proc/{pid}")).exists() && Instant::now() < deadline {
            if is_zombie(pid) {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        if Path::new(&format!("/proc/{pid}")).exists() && !is_zombie(pid) {
            unsafe {
                libc::kill(pid, libc::SIGKILL);
            }
        }
    }

    fn delete_instance(&mut self, id: &str, attrs: &Attrs) -> Result<(), ProviderError> {
        let root = self.instance_root(id);
        if !root.exists() {
            tracing::info!(id, "instance already gone");
            self.children.remove(id);
            return Ok(());
        }
        self.stop_server(id, &root);
        if let Some(addr) = attrs.get("addr").and_then(Value::as_str).and_then(|a| a.parse().ok()) {
            httpd::wait_until_refused(addr, STOP_TIMEOUT);
        }
        fs::remove_dir_all(&root)?;
        Ok(())
    }

    fn create_site(&mut self, attrs: &Attrs) -> Result<Created, ProviderError> {
        let instance = text_attr(attrs, "instance")?;
        let doc_root = text_attr(attrs, "doc_root")?;
        check_relative("doc_root", doc_root)?;
        check_relative("instance", instance)?;
        let root = self.instance_root(instance);
        if !root.join("www").is_dir() {
            return Err(ProviderError::NotFound(instance.to_string()));
        }
        let path = root.join("www").join(doc_root);
        fs::create_dir_all(&path)?;
        let id = Self::new_id("site");
        let mut computed = Attrs::new();
        computed.insert("id".into(), Value::from(id.as_str()));
        computed.insert("path".into(), Value::from(path.to_string_lossy().into_owned()));
        Ok(Created { id, computed })
    }

    fn file_path(&self, attrs: &Attrs) -> Result<PathBuf, ProviderError> {
        let p = text_attr(attrs, "path")?;
        if p.is_empty() {
            return Err(ProviderError::InvalidAttr { name: "path".into(), message: "empty path".into() });
        }
        Ok(self.base_dir.join(p))
    }
}

fn is_zombie(pid: i32) -> bool {
    fs::read_to_string(format!("/proc/{pid}/stat"))
        .ok()
        .and_then(|s| s.rsplit(')').next().map(|rest| rest.trim_start().starts_with('Z')))
        .unwrap_or(false)
}

impl Provider for LocalProvider {
    fn name(&self) -> &str {
        "local"
    }

    fn schema(&self) -> &ProviderSchema {
        &self.schema
    }

    fn create(&mut self, rtype: &str, attrs: &Attrs) -> Result<Created, ProviderError> {
        fs::create_dir_all(&self.base_dir)?;
        match rtype {
            "local_instance" => self.create_instance(attrs),
            "local_site" => self.create_site(attrs),
            "local_file" => {
                let path = self.file_path(attrs)?;
                let content = text_attr(attrs, "content")?;
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::write(&path, content)?;
                let id = Self::new_id("file");
                let mut computed = Attrs::new();
                computed.insert("id".into(), Value::from(id.as_str()));
                computed.insert("sha256".into(), Value::from(sha256_hex(content.as_bytes())));
                Ok(Created { id, computed })
            }
            other => Err(ProviderError::UnsupportedType(other.into())),
        }
    }

    fn update(&mut self, rtype: &str, id: &str, old: &Attrs, new: &Attrs) -> Result<Attrs, ProviderError> {
        match rtype {
            "local_file" => {
                let path = self.file_path(new)?;
                if !path.exists() {
                    return Err(ProviderError::NotFound(id.to_string()));
                }
                let content = text_attr(new, "content")?;
                if old.get("content") != new.get("content") {
                    fs::write(&path, content)?;
                }
                let mut computed = Attrs::new();
                computed.insert("id".into(), Value::from(id));
                computed.insert("sha256".into(), Value::from(sha256_hex(content.as_bytes())));
                Ok(computed)
            }
            // every other input of these types is force-new
            "local_instance" | "local_site" => {
                let mut computed = old.clone();
                computed.retain(|k, _| self.schema.resource(rtype).and_then(|r| r.attr(k)).is_some_and(|a| a.computed));
                Ok(computed)
            }
            other => Err(ProviderError::UnsupportedType(other.into())),
        }
    }

    fn delete(&mut self, rtype: &str, id: &str, attrs: &Attrs) -> Result<(), ProviderError> {
        match rtype {
            "local_instance" => self.delete_instance(id, attrs),
            "local_site" => {
                if let Some(path) = attrs.get("path").and_then(Value::as_str) {
                    let path = Path::new(path);
                    if path.starts_with(&self.base_dir) && path.exists() {
                        fs::remove_dir_all(path)?;
                    }
                }
                Ok(())
            }
            "local_file" => {
                let path = self.file_path(attrs)?;
                match fs::remove_file(&path) {
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        tracing::info!(id, "file already gone");
                        Ok(())
                    }
                    other => other.map_err(Into::into),
                }
            }
            other => Err(ProviderError::UnsupportedType(other.into())),
        }
    }
}
