//! Standalone static server used by the local provider:
//! `stagehand-httpd --root <dir> --port <n> --ready-file <path>`.

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let mut root = None;
    let mut port = 0u16;
    let mut ready = None;
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let value = args.next();
        match (flag.as_str(), value) {
            ("--root", Some(v)) => root = Some(PathBuf::from(v)),
            ("--port", Some(v)) => match v.parse() {
                Ok(p) => port = p,
                Err(_) => return usage(),
            },
            ("--ready-file", Some(v)) => ready = Some(PathBuf::from(v)),
            _ => return usage(),
        }
    }
    let (Some(root), Some(ready)) = (root, ready) else { return usage() };
    match stagehand_core::providers::run_server_process(&root, port, &ready) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stagehand-httpd: {e}");
            ExitCode::FAILURE
        }
    }
}

fn usage() -> ExitCode {
    eprintln!("usage: stagehand-httpd --root <dir> --port <n> --ready-file <path>");
    ExitCode::from(64)
}
