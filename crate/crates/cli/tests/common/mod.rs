#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

pub const TOKEN: &str = "hook-token";
pub const INFRA: &str = include_str!("../../../../samples/infra.fl");
pub const PIPELINE: &str = include_str!("../../../../samples/pipeline.fl");

pub fn stagehand(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stagehand")).args(args).current_dir(cwd).output().expect("spawn stagehand")
}

pub fn stagehand_with_input(args: &[&str], cwd: &Path, input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_stagehand"))
        .args(args)
        .current_dir(cwd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn stagehand");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

pub fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// `name = value` lines after the `Outputs:` header.
pub fn outputs(stdout: &str) -> BTreeMap<String, String> {
    stdout
        .split_once("Outputs:")
        .map(|(_, rest)| rest)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn site_repo(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("index.html"), "<html><body>release 1</body></html>\n").unwrap();
    fs::write(dir.join("any.html"), "<p>any page</p>\n").unwrap();
    fs::write(dir.join("Jenkinsfile"), "pipeline { agent any }\n").unwrap();
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn get_json(url: &str) -> Value {
    agent().get(url).call().unwrap().body_mut().read_json().unwrap()
}

/// A `ci serve` child process, stopped with SIGTERM on drop.
pub struct Serve {
    pub child: Child,
    pub url: String,
}

impl Serve {
    pub fn start(config: &Path, data: &Path, infra_state: &Path) -> Serve {
        let mut child = Command::new(env!("CARGO_BIN_EXE_stagehand"))
            .args(["ci", "serve", "--listen", "127.0.0.1:0", "--config"])
            .arg(config)
            .arg("--data")
            .arg(data)
            .arg("--infra-state")
            .arg(infra_state)
            .env("STAGEHAND_WEBHOOK_TOKEN", TOKEN)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Serve { child, url }
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn run(&self, id: &str) -> Value {
        get_json(&format!("{}/api/runs/{id}", self.url))
    }

    pub fn runs(&self, pipeline: &str) -> Vec<Value> {
        get_json(&format!("{}/api/pipelines/{pipeline}/runs", self.url)).as_array().cloned().unwrap_or_default()
    }

    pub fn wait_state(&self, id: &str, want: &[&str], within: Duration) -> Value {
        let deadline = Instant::now() + within;
        loop {
            let run = self.run(id);
            if want.iter().any(|w| run["state"] == *w) || Instant::now() > deadline {
                return run;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Peak resident set size in bytes.
    pub fn peak_rss(&self) -> Option<u64> {
        let status = fs::read_to_string(format!("/proc/{}/status", self.pid())).ok()?;
        let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
        let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
        Some(kb * 1024)
    }

    pub fn stop(&mut self) {
        let _ = Command::new("kill").args(["-TERM", &self.pid().to_string()]).status();
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Serve {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.stop();
        }
    }
}

/// Working tree for the end-to-end scenario: `config/` with the sample
/// pipeline and its `repo/`, `data/`, and the infra document and state.
pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new(poll_interval_s: u32) -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("config");
        fs::create_dir_all(&config).unwrap();
        site_repo(&config.join("repo"));
        let pipeline = PIPELINE.replace("poll_interval = 1", &format!("poll_interval = {poll_interval_s}"));
        fs::write(config.join("pipeline.fl"), pipeline).unwrap();
        fs::write(dir.path().join("infra.fl"), INFRA).unwrap();
        Workspace { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn repo(&self) -> PathBuf {
        self.path().join("config/repo")
    }

    pub fn state(&self) -> PathBuf {
        self.path().join("infra.state.json")
    }

    pub fn serve(&self) -> Serve {
        Serve::start(&self.path().join("config"), &self.path().join("data"), &self.state())
    }

    pub fn infra(&self, args: &[&str]) -> Output {
        let mut all = vec!["infra"];
        all.extend_from_slice(args);
        stagehand(&all, self.path())
    }

    pub fn ci(&self, server: &Serve, args: &[&str]) -> Output {
        let mut all = vec!["ci"];
        all.extend_from_slice(args);
        all.extend_from_slice(&["--server", &server.url]);
        stagehand(&all, self.path())
    }
}
