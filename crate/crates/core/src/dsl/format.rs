use std::fmt::Write;

use super::ast::{Document, Expr, Item, StrPart};

const INDENT: &str = "  ";

/// Canonical rendering: two-space indentation, one item per line, single
/// spaces around `=`, newline-terminated. Comments are not preserved.
pub fn format(doc: &Document) -> String {
    let mut out = String::new();
    write_items(&mut out, &doc.items, 0);
    out
}

fn write_items(out: &mut String, items: &[Item], depth: usize) {
    for item in items {
        let pad = INDENT.repeat(depth);
        match item {
            Item::Attribute(a) => {
                let _ = writeln!(out, "{pad}{} = {}", a.name, format_expr(&a.value));
            }
            Item::Block(b) => {
                out.push_str(&pad);
                out.push_str(&b.keyword);
                for label in &b.labels {
                    out.push(' ');
                    write_quoted(out, &[StrPart::Lit(label.clone())]);
                }
                if b.body.is_empty() {
                    out.push_str(" {}\n");
                } else {
                    out.push_str(" {\n");
                    write_items(out, &b.body, depth + 1);
                    out.push_str(&pad);
                    out.push_str("}\n");
                }
            }
        }
    }
}

pub fn format_expr(expr: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, expr);
    out
}

fn write_expr(out: &mut String, expr: &Expr) {
    match expr {
        Expr::Str(parts) => write_quoted(out, parts),
        Expr::Num(n) => {
            let _ = write!(out, "{n}");
        }
        Expr::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        Expr::Ref(r) => {
            let _ = write!(out, "{r}");
        }
        Expr::List(items) => {
            out.push('[');
            for (i, e) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, e);
            }
            out.push(']');
        }
    }
}

fn write_quoted(out: &mut String, parts: &[StrPart]) {
    out.push('"');
    for part in parts {
        match part {
            StrPart::Interp(r) => {
                let _ = write!(out, "${{{r}}}");
            }
            StrPart::Lit(s) => {
                let mut chars = s.chars().peekable();
                while let Some(c) = chars.next() {
                    match c {
                        '"' => out.push_str("\\\""),
                        '\\' => out.push_str("\\\\"),
                        '\n' => out.push_str("\\n"),
                        '\t' => out.push_str("\\t"),
                        // a literal `${` must not be read back as an interpolation
                        '$' if chars.peek() == Some(&'{') => out.push_str("\\$"),
                        c => out.push(c),
                    }
                }
            }
        }
    }
    out.push('"');
}
