use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use super::{
    local_schema, sha256_hex, text_attr, Attrs, Created, Provider, ProviderError, ProviderSchema,
    PASSWORD_LEN,
};
use crate::dsl::Value;

const ALPHANUMERIC: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JournalEntry {
    pub op: String,
    #[serde(rename = "type")]
    pub rtype: String,
    pub id: String,
    pub attrs: Attrs,
}

/// Makes the mock fail the matching call, for partial-failure tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FailRule {
    pub op: String,
    pub rtype: String,
    /// Only fail when the input `name`/`path`/`doc_root` equals this, if set.
    pub key: Option<String>,
}

#[derive(Debug, Default)]
struct MockState {
    counter: u64,
    live: BTreeMap<String, (String, Attrs)>,
    journal: Vec<JournalEntry>,
    fail: Option<FailRule>,
    journal_file: Option<PathBuf>,
}

/// In-memory deterministic provider. Clones share state, so a test can keep
/// a handle for inspection after handing one to the engine.
#[derive(Debug, Clone)]
pub struct MockProvider {
    name: String,
    schema: ProviderSchema,
    state: Arc<Mutex<MockState>>,
}

impl MockProvider {
    /// A mock registered under `name` (use `"local"` to stand in for the
    /// local provider).
    pub fn new(name: &str) -> Self {
        MockProvider {
            name: name.to_string(),
            schema: local_schema(name),
            state: Arc::new(Mutex::new(MockState::default())),
        }
    }

    /// Additionally appends every journal entry as a JSON line to `path`.
    pub fn with_journal_file(self, path: impl Into<PathBuf>) -> Self {
        self.state.lock().journal_file = Some(path.into());
        self
    }

    pub fn fail_on(&self, rule: Option<FailRule>) {
        self.state.lock().fail = rule;
    }

    pub fn journal(&self) -> Vec<JournalEntry> {
        self.state.lock().journal.clone()
    }

    pub fn live_count(&self) -> usize {
        self.state.lock().live.len()
    }

    pub fn live(&self) -> BTreeMap<String, (String, Attrs)> {
        self.state.lock().live.clone()
    }

    fn record(st: &mut MockState, op: &str, rtype: &str, id: &str, attrs: &Attrs) {
        let entry = JournalEntry { op: op.into(), rtype: rtype.into(), id: id.into(), attrs: attrs.clone() };
        if let Some(path) = &st.journal_file {
            let line = serde_json::to_string(&entry).expect("journal entries serialize");
            if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{line}");
            }
        }
        st.journal.push(entry);
    }

    fn check_fail(st: &MockState, op: &str, rtype: &str, attrs: &Attrs) -> Result<(), ProviderError> {
        let Some(rule) = &st.fail else { return Ok(()) };
        if rule.op != op || rule.rtype != rtype {
            return Ok(());
        }
        let key_matches = match &rule.key {
            None => true,
            Some(k) => ["name", "path", "doc_root"]
                .iter()
                .any(|a| attrs.get(*a).and_then(Value::as_str) == Some(k.as_str())),
        };
        if key_matches {
            Err(ProviderError::Injected(format!("{op} {rtype}")))
        } else {
            Ok(())
        }
    }
}

/// Deterministic 24-character password derived from the resource id.
fn mock_password(id: &str) -> String {
    let mut out = String::with_capacity(PASSWORD_LEN);
    let mut seed = id.as_bytes().to_vec();
    while out.len() < PASSWORD_LEN {
        let digest = hex::decode(sha256_hex(&seed)).expect("hex");
        for b in digest {
            if out.len() == PASSWORD_LEN {
                break;
            }
            out.push(ALPHANUMERIC[b as usize % ALPHANUMERIC.len()] as char);
        }
        seed.push(b'+');
    }
    out
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn schema(&self) -> &ProviderSchema {
        &self.schema
    }

    fn create(&mut self, rtype: &str, attrs: &Attrs) -> Result<Created, ProviderError> {
        let mut st = self.state.lock();
        Self::check_fail(&st, "create", rtype, attrs)?;
        let n = st.counter + 1;
        let id = format!("mock-{n}");
        let mut computed = Attrs::new();
        computed.insert("id".into(), Value::from(id.as_str()));
        match rtype {
            "local_instance" => {
                text_attr(attrs, "name")?;
                let port = attrs.get("port").and_then(Value::as_f64).unwrap_or(0.0) as u64;
                let port = if port == 0 { 20000 + n } else { port };
                let addr = format!("127.0.0.1:{port}");
                computed.insert("url".into(), Value::from(format!("http://{addr}/")));
                computed.insert("addr".into(), Value::from(addr));
                computed.insert("admin_password".into(), Value::from(mock_password(&id)));
                computed.insert("root_dir".into(), Value::from(format!("/mock/{id}")));
            }
            "local_site" => {
                let instance = text_attr(attrs, "instance")?;
                let doc_root = text_attr(attrs, "doc_root")?;
                let root = match st.live.get(instance) {
                    Some((t, a)) if t == "local_instance" => {
                        a.get("root_dir").and_then(Value::as_str).unwrap_or_default().to_string()
                    }
                    _ => return Err(ProviderError::NotFound(instance.to_string())),
                };
                computed.insert("path".into(), Value::from(format!("{root}/www/{doc_root}")));
            }
            "local_file" => {
                text_attr(attrs, "path")?;
                let content = text_attr(attrs, "content")?;
                computed.insert("sha256".into(), Value::from(sha256_hex(content.as_bytes())));
            }
            other => return Err(ProviderError::UnsupportedType(other.into())),
        }
        st.counter = n;
        let mut full = attrs.clone();
        full.extend(computed.clone());
        st.live.insert(id.clone(), (rtype.to_string(), full.clone()));
        Self::record(&mut st, "create", rtype, &id, &full);
        Ok(Created { id, computed })
    }

    fn update(&mut self, rtype: &str, id: &str, _old: &Attrs, new: &Attrs) -> Result<Attrs, ProviderError> {
        let mut st = self.state.lock();
        Self::check_fail(&st, "update", rtype, new)?;
        let Some((_, current)) = st.live.get(id).cloned() else {
            return Err(ProviderError::NotFound(id.to_string()));
        };
        let mut computed: Attrs = current
            .iter()
            .filter(|(k, _)| self.schema.resource(rtype).and_then(|r| r.attr(k)).is_some_and(|a| a.computed))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if rtype == "local_file" {
            let content = text_attr(new, "content")?;
            computed.insert("sha256".into(), Value::from(sha256_hex(content.as_bytes())));
        }
        let mut full = new.clone();
        full.extend(computed.clone());
        st.live.insert(id.to_string(), (rtype.to_string(), full.clone()));
        Self::record(&mut st, "update", rtype, id, &full);
        Ok(computed)
    }

    fn delete(&mut self, rtype: &str, id: &str, attrs: &Attrs) -> Result<(), ProviderError> {
        let mut st = self.state.lock();
        Self::check_fail(&st, "delete", rtype, attrs)?;
        if st.live.remove(id).is_none() {
            tracing::info!(id, "mock delete of missing resource is a no-op");
        }
        Self::record(&mut st, "delete", rtype, id, attrs);
        Ok(())
    }
}
