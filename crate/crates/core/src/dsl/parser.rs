use std::collections::HashMap;

use super::ast::{Attribute, Block, Document, Expr, Item, Pos, Ref};
use super::lexer::{Token, TokenKind};
use super::DslError;

const MAX_LABELS: usize = 2;

struct Parser<'a> {
    toks: &'a [Token],
    at: usize,
}

/// Parses a token stream (as produced by [`super::tokenize`]) into a document.
pub fn parse(tokens: &[Token], source_name: &str) -> Result<Document, DslError> {
    if tokens.last().map(|t| &t.kind) != Some(&TokenKind::Eof) {
        return Err(DslError::Parse {
            line: 1,
            col: 1,
            expected: "token stream ending in eof".into(),
            found: "truncated stream".into(),
        });
    }
    let mut p = Parser { toks: tokens, at: 0 };
    let items = p.items(true)?;
    Ok(Document { source_name: source_name.to_string(), items })
}

impl<'a> Parser<'a> {
    fn peek(&self) -> &'a Token {
        &self.toks[self.at]
    }

    fn next(&mut self) -> &'a Token {
        let t = &self.toks[self.at];
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error(&self, tok: &Token, expected: impl Into<String>) -> DslError {
        DslError::Parse {
            line: tok.line,
            col: tok.col,
            expected: expected.into(),
            found: tok.to_string(),
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<&'a Token, DslError> {
        let t = self.peek();
        if t.is_punct(p) {
            Ok(self.next())
        } else {
            Err(self.error(t, format!("`{p}`")))
        }
    }

    fn items(&mut self, top_level: bool) -> Result<Vec<Item>, DslError> {
        let mut items = Vec::new();
        let mut seen: HashMap<String, Pos> = HashMap::new();
        loop {
            let t = self.peek();
            match &t.kind {
                TokenKind::Eof if top_level => break,
                TokenKind::Punct if !top_level && t.lexeme == "}" => break,
                TokenKind::Ident => {}
                _ => {
                    let expected = if top_level { "block or attribute" } else { "item or `}`" };
                    return Err(self.error(t, expected));
                }
            }
            let item = self.item()?;
            if let Item::Attribute(a) = &item {
                if let Some(first) = seen.get(&a.name) {
                    return Err(DslError::Parse {
                        line: a.pos.line,
                        col: a.pos.col,
                        expected: format!("unique attribute name (`{}` first set at {first})", a.name),
                        found: format!("duplicate attribute `{}`", a.name),
                    });
                }
                seen.insert(a.name.clone(), a.pos);
            }
            items.push(item);
        }
        Ok(items)
    }

    fn item(&mut self) -> Result<Item, DslError> {
        let name_tok = self.next();
        let pos = Pos { line: name_tok.line, col: name_tok.col };
        let name = name_tok.lexeme.clone();

        if self.peek().is_punct("=") {
            self.next();
            let value = self.expr()?;
            return Ok(Item::Attribute(Attribute { name, value, pos }));
        }

        let mut labels = Vec::new();
        while let TokenKind::Str(parts) = &self.peek().kind {
            let t = self.peek();
            if labels.len() == MAX_LABELS {
                return Err(self.error(t, "`{` (blocks take at most 2 labels)"));
            }
            let label = Expr::Str(parts.clone())
                .as_plain_str()
                .ok_or_else(|| self.error(t, "label without interpolation"))?;
            labels.push(label);
            self.next();
        }
        let open = self.peek();
        if !open.is_punct("{") {
            let expected = if labels.is_empty() { "`=` or `{`" } else { "`{`" };
            return Err(self.error(open, expected));
        }
        self.next();
        let body = self.items(false)?;
        self.expect_punct("}")?;
        Ok(Item::Block(Block { keyword: name, labels, body, pos }))
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let t = self.peek();
        match &t.kind {
            TokenKind::Str(parts) => {
                self.next();
                Ok(Expr::string(parts.iter().cloned()))
            }
            TokenKind::Number => {
                self.next();
                t.lexeme.parse::<f64>().map(Expr::Num).map_err(|_| self.error(t, "number"))
            }
            TokenKind::Bool => {
                self.next();
                Ok(Expr::Bool(t.lexeme == "true"))
            }
            TokenKind::Punct if t.lexeme == "[" => {
                self.next();
                let mut items = Vec::new();
                if self.peek().is_punct("]") {
                    self.next();
                    return Ok(Expr::List(items));
                }
                loop {
                    items.push(self.expr()?);
                    let sep = self.peek();
                    if sep.is_punct(",") {
                        self.next();
                    } else if sep.is_punct("]") {
                        self.next();
                        break;
                    } else {
                        return Err(self.error(sep, "`,` or `]`"));
                    }
                }
                Ok(Expr::List(items))
            }
            TokenKind::Punct if t.lexeme == "${" => {
                self.next();
                let r = self.reference()?;
                self.expect_punct("}")?;
                Ok(Expr::Ref(r))
            }
            TokenKind::Ident => Ok(Expr::Ref(self.reference()?)),
            _ => Err(self.error(t, "expression")),
        }
    }

    fn reference(&mut self) -> Result<Ref, DslError> {
        let first = self.peek();
        if first.kind != TokenKind::Ident {
            return Err(self.error(first, "identifier"));
        }
        self.next();
        let mut path = vec![first.lexeme.clone()];
        while self.peek().is_punct(".") {
            self.next();
            let seg = self.peek();
            if seg.kind != TokenKind::Ident {
                return Err(self.error(seg, "identifier after `.`"));
            }
            self.next();
            path.push(seg.lexeme.clone());
        }
        if path.len() < 2 {
            return Err(self.error(self.peek(), "`.` (references need at least two segments)"));
        }
        Ok(Ref::new(path).expect("segments are lexed identifiers"))
    }
}
