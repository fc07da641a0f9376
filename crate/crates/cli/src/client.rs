use serde_json::Value;

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:8080";

/// Thin JSON client for the server API.
pub struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        let base = if base.contains("://") { base.to_string() } else { format!("http://{base}") };
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Client { base, agent }
    }

    pub fn get(&self, path: &str) -> Result<Value, String> {
        let resp = self.agent.get(format!("{}{path}", self.base)).call();
        self.finish(resp)
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, String> {
        let resp = self.agent.post(format!("{}{path}", self.base)).send_json(body);
        self.finish(resp)
    }

    fn finish(&self, resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<Value, String> {
        let mut resp = resp.map_err(|e| format!("cannot reach server at {}: {e}", self.base))?;
        let status = resp.status().as_u16();
        let body: Value = resp.body_mut().read_json().map_err(|e| format!("bad response from server: {e}"))?;
        if (200..300).contains(&status) {
            return Ok(body);
        }
        let msg = body["error"]["message"].as_str().unwrap_or("request failed");
        Err(format!("{msg} (HTTP {status})"))
    }
}
