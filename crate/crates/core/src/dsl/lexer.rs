use std::fmt;

use super::ast::{Ref, StrPart};
use super::DslError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Ident,
    /// Decoded string contents, split at `${...}` interpolations.
    Str(Vec<StrPart>),
    Number,
    Bool,
    Punct,
    Eof,
}

impl TokenKind {
    pub fn name(&self) -> &'static str {
        match self {
            TokenKind::Ident => "identifier",
            TokenKind::Str(_) => "string",
            TokenKind::Number => "number",
            TokenKind::Bool => "bool",
            TokenKind::Punct => "punctuation",
            TokenKind::Eof => "end of input",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Source text for idents, numbers, bools and punctuation; the decoded
    /// value (escapes resolved) for strings.
    pub lexeme: String,
    pub line: usize,
    pub col: usize,
}

impl Token {
    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punct && self.lexeme == p
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            TokenKind::Eof => f.write_str("end of input"),
            TokenKind::Str(_) => write!(f, "string {:?}", self.lexeme),
            k => write!(f, "{} `{}`", k.name(), self.lexeme),
        }
    }
}

pub(crate) fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

pub(crate) fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    col: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { chars: src.chars().peekable(), line: 1, col: 1 }
    }

    fn peek(&mut self) -> Option<char> {
        self.chars.peek().copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn err(&self, line: usize, col: usize, message: impl Into<String>) -> DslError {
        DslError::Lex { line, col, message: message.into() }
    }
}

/// Splits `source` into tokens. The stream always ends with a single eof token.
pub fn tokenize(source: &str) -> Result<Vec<Token>, DslError> {
    let mut cur = Cursor::new(source);
    let mut out = Vec::new();

    while let Some(c) = cur.peek() {
        let (line, col) = (cur.line, cur.col);
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        if c == '#' {
            while let Some(c) = cur.peek() {
                if c == '\n' {
                    break;
                }
                cur.bump();
            }
            continue;
        }
        if is_ident_start(c) {
            let mut s = String::new();
            while let Some(c) = cur.peek() {
                if !is_ident_char(c) {
                    break;
                }
                s.push(c);
                cur.bump();
            }
            let kind = if s == "true" || s == "false" { TokenKind::Bool } else { TokenKind::Ident };
            out.push(Token { kind, lexeme: s, line, col });
            continue;
        }
        if c.is_ascii_digit() {
            out.push(lex_number(&mut cur, line, col)?);
            continue;
        }
        if c == '"' {
            cur.bump();
            let (parts, lexeme) = lex_string(&mut cur, line, col)?;
            out.push(Token { kind: TokenKind::Str(parts), lexeme, line, col });
            continue;
        }
        let punct = match c {
            '=' | '{' | '}' | '[' | ']' | ',' | '.' => {
                cur.bump();
                c.to_string()
            }
            '$' => {
                cur.bump();
                if cur.peek() != Some('{') {
                    return Err(cur.err(line, col, "expected `{` after `$`"));
                }
                cur.bump();
                "${".to_string()
            }
            other => return Err(cur.err(line, col, format!("illegal character {other:?}"))),
        };
        out.push(Token { kind: TokenKind::Punct, lexeme: punct, line, col });
    }

    out.push(Token { kind: TokenKind::Eof, lexeme: String::new(), line: cur.line, col: cur.col });
    Ok(out)
}

fn lex_number(cur: &mut Cursor<'_>, line: usize, col: usize) -> Result<Token, DslError> {
    let mut s = String::new();
    while let Some(c) = cur.peek() {
        if !c.is_ascii_digit() {
            break;
        }
        s.push(c);
        cur.bump();
    }
    if cur.peek() == Some('.') {
        // only a fraction if a digit follows; otherwise leave the dot for the parser
        let mut ahead = cur.chars.clone();
        ahead.next();
        if ahead.peek().is_some_and(|c| c.is_ascii_digit()) {
            s.push('.');
            cur.bump();
            while let Some(c) = cur.peek() {
                if !c.is_ascii_digit() {
                    break;
                }
                s.push(c);
                cur.bump();
            }
        }
    }
    if cur.peek().is_some_and(is_ident_start) {
        return Err(cur.err(cur.line, cur.col, "identifier cannot start with a digit"));
    }
    Ok(Token { kind: TokenKind::Number, lexeme: s, line, col })
}

fn lex_string(
    cur: &mut Cursor<'_>,
    line: usize,
    col: usize,
) -> Result<(Vec<StrPart>, String), DslError> {
    let mut parts = Vec::new();
    let mut lit = String::new();
    let mut decoded = String::new();
    loop {
        let (l, c) = (cur.line, cur.col);
        match cur.bump() {
            None | Some('\n') => return Err(cur.err(line, col, "unterminated string")),
            Some('"') => break,
            Some('\\') => {
                let ch = match cur.bump() {
                    Some('"') => '"',
                    Some('\\') => '\\',
                    Some('n') => '\n',
                    Some('t') => '\t',
                    Some('$') => '$',
                    Some(other) => {
                        return Err(cur.err(l, c, format!("unknown escape `\\{other}`")));
                    }
                    None => return Err(cur.err(line, col, "unterminated string")),
                };
                lit.push(ch);
                decoded.push(ch);
            }
            Some('$') if cur.peek() == Some('{') => {
                cur.bump();
                let mut raw = String::new();
                loop {
                    match cur.bump() {
                        Some('}') => break,
                        Some(ch) if is_ident_char(ch) || ch == '.' => raw.push(ch),
                        Some('"') | Some('\n') | None => {
                            return Err(cur.err(l, c, "unterminated interpolation"));
                        }
                        Some(ch) => {
                            return Err(cur.err(
                                l,
                                c,
                                format!("illegal character {ch:?} in interpolation"),
                            ));
                        }
                    }
                }
                let r = Ref::parse(&raw)
                    .ok_or_else(|| cur.err(l, c, format!("malformed reference `{raw}`")))?;
                if !lit.is_empty() {
                    parts.push(StrPart::Lit(std::mem::take(&mut lit)));
                }
                decoded.push_str("${");
                decoded.push_str(&raw);
                decoded.push('}');
                parts.push(StrPart::Interp(r));
            }
            Some(ch) => {
                lit.push(ch);
                decoded.push(ch);
            }
        }
    }
    if !lit.is_empty() {
        parts.push(StrPart::Lit(lit));
    }
    Ok((parts, decoded))
}
