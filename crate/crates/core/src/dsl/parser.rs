//! Recursive-descent parser.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | 'inf' | ident | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```

use std::fmt;

use thiserror::Error;

use super::ast::{BinOp, Expr, Var};
use super::builtins::Builtin;

#[derive(Debug, Clone, PartialEq, Error)]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
    pub expected: Vec<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at byte {}: {}", self.offset, self.message)?;
        if !self.expected.is_empty() {
            write!(f, " (expected one of: {})", self.expected.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(x) => format!("number {x}"),
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Star => "`*`".into(),
            Tok::Slash => "`/`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let tok = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b',' => Tok::Comma,
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value = text.parse::<f64>().map_err(|_| ParseError {
                    offset: start,
                    message: format!("malformed number `{text}`"),
                    expected: vec![],
                })?;
                out.push((Tok::Num(value), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                    expected: vec![],
                });
            }
        };
        i += 1;
        out.push((tok, start));
    }
    out.push((Tok::Eof, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

const OPERAND_START: [&str; 5] = ["number", "identifier", "function call", "`(`", "`-`"];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, message: impl Into<String>, expected: &[&str]) -> ParseError {
        ParseError {
            offset: self.offset(),
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect(&mut self, tok: Tok, label: &str) -> Result<(), ParseError> {
        if *self.peek() == tok {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("unexpected {}", self.peek().describe()), &[label]))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::negate(self.unary()?));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let offset = self.offset();
        match self.bump().0 {
            Tok::Num(x) => Ok(Expr::Num(x)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) if *self.peek() == Tok::LParen => {
                let func = Builtin::from_name(&name).ok_or_else(|| ParseError {
                    offset,
                    message: format!("unknown function `{name}`"),
                    expected: vec!["builtin function".into()],
                })?;
                self.bump();
                let mut args = vec![self.expr()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    args.push(self.expr()?);
                }
                self.expect(Tok::RParen, "`)`")?;
                if args.len() != func.arity() {
                    return Err(ParseError {
                        offset,
                        message: format!(
                            "`{}` takes {} argument(s), got {}",
                            func.name(),
                            func.arity(),
                            args.len()
                        ),
                        expected: vec![],
                    });
                }
                Ok(Expr::call(func, args))
            }
            Tok::Ident(name) if name == "inf" => Ok(Expr::Num(f64::INFINITY)),
            Tok::Ident(name) => Var::from_name(&name)
                .map(Expr::Var)
                .ok_or_else(|| ParseError {
                    offset,
                    message: format!("unknown identifier `{name}`"),
                    expected: ["P", "LP", "Y", "TP", "TLP", "inf"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                }),
            other => Err(ParseError {
                offset,
                message: format!("unexpected {}", other.describe()),
                expected: OPERAND_START.iter().map(|s| s.to_string()).collect(),
            }),
        }
    }
}

pub fn parse_expr(source: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        toks: lex(source)?,
        pos: 0,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::Eof {
        return Err(p.error(
            format!("unexpected {}", p.peek().describe()),
            &["`+`", "`-`", "`*`", "`/`", "end of input"],
        ));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expr("1 - 2 - 3 * 4 / 5").unwrap();
        assert_eq!(e.to_string(), "1 - 2 - 3 * 4 / 5");
        let e = parse_expr("1 - (2 - 3)").unwrap();
        assert_eq!(e.to_string(), "1 - (2 - 3)");
        assert!(matches!(e, Expr::Binary { op: BinOp::Sub, .. }));
    }

    #[test]
    fn negative_literals_fold() {
        assert_eq!(parse_expr("-3").unwrap(), Expr::Num(-3.0));
        assert_eq!(parse_expr("--3").unwrap(), Expr::Num(3.0));
        assert_eq!(parse_expr("-inf").unwrap(), Expr::Num(f64::NEG_INFINITY));
        assert_eq!(parse_expr("1e-3").unwrap(), Expr::Num(1e-3));
    }

    #[test]
    fn unknown_function_is_rejected_with_offset() {
        let err = parse_expr("mean(sort(TLP))").unwrap_err();
        assert_eq!(err.offset, 5);
        assert!(err.message.contains("unknown function `sort`"), "{err}");
        let err = parse_expr("argsort(TLP)").unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn errors_carry_expected_sets() {
        let err = parse_expr("mean(TLP").unwrap_err();
        assert_eq!(err.offset, 8);
        assert_eq!(err.expected, vec!["`)`".to_string()]);

        let err = parse_expr("mean(TLP) +").unwrap_err();
        assert_eq!(err.offset, 11);
        assert!(err.expected.contains(&"number".to_string()));

        let err = parse_expr("mean(TLP) TLP").unwrap_err();
        assert!(err.expected.contains(&"end of input".to_string()));

        let err = parse_expr("mean(X)").unwrap_err();
        assert!(err.message.contains("unknown identifier"));

        let err = parse_expr("pow(TP)").unwrap_err();
        assert!(err.message.contains("takes 2 argument"));

        assert!(parse_expr("mean(TLP) $").is_err());
    }
}
