//! Resource backends. Both providers expose the same three resource types
//! (`local_instance`, `local_site`, `local_file`) under one schema, so a
//! document can be planned and applied against either.

mod local;
mod mock;
mod schema;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dsl::Value;

pub use local::{run_server_process, LocalProvider, ServerLauncher};
pub use mock::{FailRule, JournalEntry, MockProvider};
pub use schema::{local_schema, AttrKind, AttrSpec, ProviderSchema, ResourceSchema};

/// Attribute name → value, ordered for deterministic rendering.
pub type Attrs = BTreeMap<String, Value>;

pub const PASSWORD_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provision command `{command}` exited with {exit_code}: {output}")]
    ProvisionFailed { command: String, exit_code: i32, output: String },
    #[error("port {0} unavailable")]
    PortUnavailable(u16),
    #[error("resource {0} not found")]
    NotFound(String),
    #[error("unsupported resource type `{0}`")]
    UnsupportedType(String),
    #[error("invalid attribute `{name}`: {message}")]
    InvalidAttr { name: String, message: String },
    #[error("injected failure: {0}")]
    Injected(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Result of a create: the provider-assigned id plus every computed attribute
/// (the id included, under `"id"`).
#[derive(Debug, Clone, PartialEq)]
pub struct Created {
    pub id: String,
    pub computed: Attrs,
}

pub trait Provider: Send {
    fn name(&self) -> &str;

    fn schema(&self) -> &ProviderSchema;

    fn create(&mut self, rtype: &str, attrs: &Attrs) -> Result<Created, ProviderError>;

    /// In-place update; never called when a force-new attribute differs.
    /// Returns refreshed computed attributes.
    fn update(
        &mut self,
        rtype: &str,
        id: &str,
        old: &Attrs,
        new: &Attrs,
    ) -> Result<Attrs, ProviderError>;

    /// Deletes `id`. Deleting something already gone succeeds.
    fn delete(&mut self, rtype: &str, id: &str, attrs: &Attrs) -> Result<(), ProviderError>;
}

pub(crate) fn text_attr<'a>(attrs: &'a Attrs, name: &str) -> Result<&'a str, ProviderError> {
    attrs.get(name).and_then(Value::as_str).ok_or_else(|| ProviderError::InvalidAttr {
        name: name.to_string(),
        message: "expected text".into(),
    })
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Rejects absolute paths and `..` components in a relative path attribute.
pub(crate) fn check_relative(name: &str, p: &str) -> Result<(), ProviderError> {
    let path = std::path::Path::new(p);
    let ok = !p.is_empty()
        && path.components().all(|c| matches!(c, std::path::Component::Normal(_) | std::path::Component::CurDir));
    if ok {
        Ok(())
    } else {
        Err(ProviderError::InvalidAttr { name: name.into(), message: format!("`{p}` must be a relative path without `..`") })
    }
}
