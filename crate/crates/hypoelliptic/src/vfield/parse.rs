//! Textual grammar for vector fields and scalar expressions.
//!
//! Components are separated by `;`. Expressions use `+ - *`, integer `^`,
//! the functions `sin`, `cos`, `exp`, parentheses, and named variables
//! (x1..xn by default, or caller-supplied names such as `q`, `p`).
//! Whitespace is insignificant. Errors carry line and column.

use thiserror::Error;

use crate::expr::{self, ExprRef, Symbol};

use super::{FieldError, VectorField};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl ParseError {
    fn new(pos: Pos, message: impl Into<String>) -> Self {
        ParseError {
            line: pos.line,
            column: pos.column,
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Pos {
    line: u32,
    column: u32,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
    Semi,
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let mut out = Vec::new();
    let mut line = 1u32;
    let mut column = 1u32;
    let mut chars = src.chars().peekable();
    while let Some(&c) = chars.peek() {
        let pos = Pos { line, column };
        match c {
            '\n' => {
                chars.next();
                line += 1;
                column = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                column += 1;
            }
            '+' | '-' | '*' | '^' | '(' | ')' | ';' => {
                chars.next();
                column += 1;
                out.push((
                    match c {
                        '+' => Tok::Plus,
                        '-' => Tok::Minus,
                        '*' => Tok::Star,
                        '^' => Tok::Caret,
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        _ => Tok::Semi,
                    },
                    pos,
                ));
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        s.push(d);
                        chars.next();
                        column += 1;
                    } else if d == 'e' || d == 'E' {
                        // Exponent only if followed by digits or a sign.
                        let mut probe = chars.clone();
                        probe.next();
                        match probe.peek() {
                            Some(&n) if n.is_ascii_digit() || n == '+' || n == '-' => {
                                s.push(d);
                                chars.next();
                                column += 1;
                                if let Some(&sign) = chars.peek() {
                                    if sign == '+' || sign == '-' {
                                        s.push(sign);
                                        chars.next();
                                        column += 1;
                                    }
                                }
                            }
                            _ => break,
                        }
                    } else {
                        break;
                    }
                }
                let v: f64 = s
                    .parse()
                    .map_err(|_| ParseError::new(pos, format!("invalid number `{s}`")))?;
                out.push((Tok::Number(v), pos));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&d) = chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(d);
                        chars.next();
                        column += 1;
                    } else {
                        break;
                    }
                }
                out.push((Tok::Ident(s), pos));
            }
            other => {
                return Err(ParseError::new(pos, format!("unexpected character `{other}`")));
            }
        }
    }
    Ok(out)
}

struct Parser<'a, S: Symbol> {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    resolve: &'a dyn Fn(&str) -> Option<ExprRef<S>>,
    end: Pos,
}

impl<'a, S: Symbol> Parser<'a, S> {
    fn peek(&self) -> Option<&(Tok, Pos)> {
        self.toks.get(self.at)
    }

    fn pos(&self) -> Pos {
        self.peek().map(|(_, p)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<(Tok, Pos)> {
        let t = self.toks.get(self.at).cloned();
        self.at += 1;
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        match self.bump() {
            Some((t, _)) if t == want => Ok(()),
            Some((t, p)) => Err(ParseError::new(p, format!("expected {what}, found {t:?}"))),
            None => Err(ParseError::new(self.end, format!("expected {what}, found end of input"))),
        }
    }

    fn expr(&mut self) -> Result<ExprRef<S>, ParseError> {
        let mut terms = vec![self.term()?];
        while let Some((tok, _)) = self.peek() {
            match tok {
                Tok::Plus => {
                    self.bump();
                    terms.push(self.term()?);
                }
                Tok::Minus => {
                    self.bump();
                    terms.push(expr::neg(self.term()?));
                }
                _ => break,
            }
        }
        Ok(expr::add(terms))
    }

    fn term(&mut self) -> Result<ExprRef<S>, ParseError> {
        let mut factors = vec![self.factor()?];
        while matches!(self.peek(), Some((Tok::Star, _))) {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(expr::mul(factors))
    }

    fn factor(&mut self) -> Result<ExprRef<S>, ParseError> {
        if matches!(self.peek(), Some((Tok::Minus, _))) {
            self.bump();
            return Ok(expr::neg(self.factor()?));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprRef<S>, ParseError> {
        let mut base = self.atom()?;
        while matches!(self.peek(), Some((Tok::Caret, _))) {
            self.bump();
            let pos = self.pos();
            match self.bump() {
                Some((Tok::Number(v), p)) => {
                    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
                        return Err(ParseError::new(
                            p,
                            format!("exponent must be a non-negative integer, got {v}"),
                        ));
                    }
                    base = expr::powi(base, v as u32);
                }
                Some((t, p)) => {
                    return Err(ParseError::new(p, format!("expected integer exponent, found {t:?}")))
                }
                None => return Err(ParseError::new(pos, "expected integer exponent")),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprRef<S>, ParseError> {
        match self.bump() {
            Some((Tok::Number(v), _)) => Ok(expr::constant(v)),
            Some((Tok::LParen, _)) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some((Tok::Ident(name), pos)) => match name.as_str() {
                "sin" | "cos" | "exp" => {
                    self.expect(Tok::LParen, "`(` after function name")?;
                    let arg = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(match name.as_str() {
                        "sin" => expr::sin(arg),
                        "cos" => expr::cos(arg),
                        _ => expr::exp(arg),
                    })
                }
                "pi" => Ok(expr::constant(std::f64::consts::PI)),
                _ => (self.resolve)(&name)
                    .ok_or_else(|| ParseError::new(pos, format!("unknown variable `{name}`"))),
            },
            Some((t, p)) => Err(ParseError::new(p, format!("unexpected token {t:?}"))),
            None => Err(ParseError::new(self.end, "unexpected end of input")),
        }
    }
}

/// Parses `;`-separated expressions with a caller-supplied identifier
/// resolver. This is the shared entry point for vector fields and for
/// Wiener-functional corpora (which add w1..wN symbols).
pub fn parse_components<S: Symbol>(
    src: &str,
    resolve: &dyn Fn(&str) -> Option<ExprRef<S>>,
) -> Result<Vec<ExprRef<S>>, ParseError> {
    let toks = lex(src)?;
    let end = Pos {
        line: src.lines().count().max(1) as u32,
        column: src.lines().last().map_or(1, |l| l.chars().count() as u32 + 1),
    };
    let mut parser = Parser {
        toks,
        at: 0,
        resolve,
        end,
    };
    let mut out = vec![parser.expr()?];
    loop {
        match parser.bump() {
            None => break,
            Some((Tok::Semi, _)) => out.push(parser.expr()?),
            Some((t, p)) => {
                return Err(ParseError::new(p, format!("unexpected token {t:?}")));
            }
        }
    }
    Ok(out)
}

fn resolver_for<'a>(vars: &'a [&'a str]) -> impl Fn(&str) -> Option<ExprRef<usize>> + 'a {
    move |name: &str| {
        vars.iter()
            .position(|v| *v == name)
            .map(|i| expr::var(i))
    }
}

/// Parses a scalar expression over the given variable names.
pub fn parse_scalar(src: &str, vars: &[&str]) -> Result<ExprRef<usize>, ParseError> {
    let comps = parse_components(src, &resolver_for(vars))?;
    if comps.len() != 1 {
        return Err(ParseError {
            line: 1,
            column: 1,
            message: format!("expected a single expression, found {} components", comps.len()),
        });
    }
    Ok(comps.into_iter().next().unwrap())
}

/// Parses a full vector field: one component per variable, `;`-separated.
/// With `vars = ["q", "p"]`, the string "p ; -q - p" is the usual kinetic
/// drift.
pub fn parse_vector_field(src: &str, vars: &[&str]) -> Result<VectorField, ParseError> {
    let comps = parse_components(src, &resolver_for(vars))?;
    if comps.len() != vars.len() {
        return Err(ParseError {
            line: 1,
            column: 1,
            message: format!(
                "field on R^{} needs {} components, found {}",
                vars.len(),
                vars.len(),
                comps.len()
            ),
        });
    }
    VectorField::new(comps).map_err(|e: FieldError| ParseError {
        line: 1,
        column: 1,
        message: e.to_string(),
    })
}

/// Default coordinate names x1..xn.
pub fn default_vars(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}
