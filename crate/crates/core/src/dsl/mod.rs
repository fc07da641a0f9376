//! The block-structured configuration language shared by infrastructure and
//! pipeline documents.
//!
//! ```text
//! file      := item* ;   item := block | attribute ;
//! block     := IDENT STRING? STRING? "{" item* "}" ;
//! attribute := IDENT "=" expr ;
//! expr      := STRING | NUMBER | BOOL | list | ref ;
//! ```

mod ast;
mod eval;
mod format;
mod lexer;
mod parser;

use thiserror::Error;

pub use ast::{Attribute, Block, Document, Expr, Item, Pos, Ref, StrPart};
pub use eval::{eval_expr, Scope, Value};
pub use format::{format, format_expr};
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::parse;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error("{line}:{col}: {message}")]
    Lex { line: usize, col: usize, message: String },
    #[error("{line}:{col}: expected {expected}, found {found}")]
    Parse { line: usize, col: usize, expected: String, found: String },
    #[error("unknown reference `{0}`")]
    UnknownRef(String),
    #[error("type mismatch at `{path}`: {message}")]
    TypeMismatch { path: String, message: String },
}

impl DslError {
    pub fn position(&self) -> Option<(usize, usize)> {
        match self {
            DslError::Lex { line, col, .. } | DslError::Parse { line, col, .. } => Some((*line, *col)),
            _ => None,
        }
    }
}

/// Tokenizes and parses `source` in one step.
pub fn parse_str(source: &str, source_name: &str) -> Result<Document, DslError> {
    parse(&tokenize(source)?, source_name)
}

/// What a document describes, decided by its top-level block keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocumentKind {
    Infra,
    Pipeline,
    Unknown,
}

pub fn document_kind(doc: &Document) -> DocumentKind {
    let mut kind = DocumentKind::Unknown;
    for b in doc.blocks() {
        match b.keyword.as_str() {
            "pipeline" => return DocumentKind::Pipeline,
            "provider" | "resource" | "output" => kind = DocumentKind::Infra,
            _ => {}
        }
    }
    kind
}
