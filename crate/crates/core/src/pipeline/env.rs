use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::Path;

use crate::httpd::StaticServer;

/// A throwaway served copy of a workspace. Dropping it stops the server and
/// removes the copy.
pub struct EphemeralEnv {
    server: Option<StaticServer>,
    dir: Option<tempfile::TempDir>,
}

impl EphemeralEnv {
    pub fn url(&self) -> String {
        self.server.as_ref().expect("live env").base_url()
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.as_ref().expect("live env").addr()
    }

    pub fn teardown(mut self) {
        self.release();
    }

    fn release(&mut self) {
        if let Some(s) = self.server.take() {
            s.stop();
        }
        if let Some(d) = self.dir.take() {
            let _ = d.close();
        }
    }
}

impl Drop for EphemeralEnv {
    fn drop(&mut self) {
        self.release();
    }
}

pub fn provision_test_env(workspace: &Path) -> io::Result<EphemeralEnv> {
    if !workspace.is_dir() {
        return Err(io::Error::new(io::ErrorKind::NotFound, format!("workspace {} missing", workspace.display())));
    }
    let dir = tempfile::Builder::new().prefix("stagehand-testenv-").tempdir()?;
    crate::scm::copy_tree(workspace, dir.path())?;
    let server = StaticServer::start(dir.path(), SocketAddr::from((Ipv4Addr::LOCALHOST, 0)))?;
    Ok(EphemeralEnv { server: Some(server), dir: Some(dir) })
}
