//! Host-shell command execution with line-level output capture and a
//! wall-clock timeout.

use std::io::{BufRead, BufReader, Read};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Out,
    Err,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exit {
    /// Exit code, or `None` when killed by a signal.
    pub code: Option<i32>,
    pub timed_out: bool,
}

impl Exit {
    pub fn success(&self) -> bool {
        self.code == Some(0) && !self.timed_out
    }
}

enum Msg {
    Line(Stream, String),
    Closed,
}

/// How long to keep reading output after the shell exits; background
/// children may hold the pipes open indefinitely.
const DRAIN_GRACE: Duration = Duration::from_millis(500);

/// Runs `command` through `sh -c` in `cwd`. `on_line` is invoked on the
/// calling thread for each output line, in arrival order.
pub fn run_shell(
    command: &str,
    cwd: &Path,
    env: &[(String, String)],
    timeout: Duration,
    mut on_line: impl FnMut(Stream, &str),
) -> std::io::Result<Exit> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(cwd)
        .envs(env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()?;

    let (tx, rx) = mpsc::channel();
    spawn_reader(child.stdout.take().expect("piped"), Stream::Out, tx.clone());
    spawn_reader(child.stderr.take().expect("piped"), Stream::Err, tx);

    let deadline = Instant::now() + timeout;
    let mut closed = 0;
    let mut status = None;
    let mut exited_at = None;
    let mut timed_out = false;
    loop {
        if status.is_none() {
            if let Some(s) = child.try_wait()? {
                status = Some(s);
                exited_at = Some(Instant::now());
            } else if Instant::now() >= deadline {
                kill_group(child.id());
                status = Some(child.wait()?);
                exited_at = Some(Instant::now());
                timed_out = true;
            }
        }
        if status.is_some() && closed == 2 {
            break;
        }
        if exited_at.is_some_and(|t| t.elapsed() > DRAIN_GRACE) {
            break;
        }
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(Msg::Line(stream, line)) => on_line(stream, &line),
            Ok(Msg::Closed) => closed += 1,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => closed = 2,
        }
    }
    while let Ok(msg) = rx.try_recv() {
        if let Msg::Line(stream, line) = msg {
            on_line(stream, &line);
        }
    }

    let status = status.expect("loop exits only after the child is reaped");
    Ok(Exit { code: status.code(), timed_out })
}

fn spawn_reader(pipe: impl Read + Send + 'static, stream: Stream, tx: mpsc::Sender<Msg>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(pipe);
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    let line = String::from_utf8_lossy(&buf);
                    let line = line.trim_end_matches(['\n', '\r']).to_string();
                    if tx.send(Msg::Line(stream, line)).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = tx.send(Msg::Closed);
    });
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall; the child leads its own process group.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}
