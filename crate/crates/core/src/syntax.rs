//! Expression and constraint parser shared by predicates and model files.
//!
//! Expressions are affine in the variables, with optional calls to built-in
//! nonlinear functions (`sin`, `cos`, `sq`) whose arguments are affine.

use std::collections::BTreeMap;
use std::fmt;

use crate::predicates::{Constraint, Guard, GuardedConstraint, LinearExpr, Sense};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{msg} (at column {col})")]
pub struct SyntaxError {
    pub msg: String,
    pub col: usize,
}

fn err<T>(msg: impl Into<String>, col: usize) -> Result<T, SyntaxError> {
    Err(SyntaxError { msg: msg.into(), col: col + 1 })
}

/// Named constants visible to the parser.
#[derive(Debug, Clone)]
pub struct Scope {
    pub params: BTreeMap<String, Rational>,
}

/// Rational stand-in for pi used everywhere in the toolkit.
pub fn pi() -> Rational {
    Rational::new(355, 113)
}

impl Default for Scope {
    fn default() -> Self {
        let mut params = BTreeMap::new();
        params.insert("pi".to_string(), pi());
        Scope { params }
    }
}

pub const BUILTINS: [&str; 3] = ["sin", "cos", "sq"];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Call {
    pub func: String,
    pub arg: LinearExpr,
}

impl fmt::Display for Call {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.func, self.arg)
    }
}

/// Affine expression plus scaled built-in calls.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Affine {
    pub lin: LinearExpr,
    pub calls: Vec<(Rational, Call)>,
}

impl Affine {
    fn constant(c: Rational) -> Self {
        Affine { lin: LinearExpr::constant(c), calls: vec![] }
    }

    fn as_constant(&self) -> Option<Rational> {
        if self.calls.is_empty() && self.lin.is_constant() {
            Some(self.lin.constant_term().clone())
        } else {
            None
        }
    }

    fn scale(&self, k: &Rational) -> Self {
        let mut calls: Vec<(Rational, Call)> = Vec::new();
        if !k.is_zero() {
            calls = self.calls.iter().map(|(c, call)| (c * k, call.clone())).collect();
        }
        Affine { lin: self.lin.scale(k), calls }
    }

    fn plus(mut self, other: Affine) -> Self {
        self.lin = self.lin.plus(&other.lin);
        for (c, call) in other.calls {
            match self.calls.iter_mut().find(|(_, x)| *x == call) {
                Some((c0, _)) => *c0 += &c,
                None => self.calls.push((c, call)),
            }
        }
        self.calls.retain(|(c, _)| !c.is_zero());
        self
    }
}

impl fmt::Display for Affine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (c, call) in &self.calls {
            if first {
                if c.is_negative() {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {} ", if c.is_negative() { "-" } else { "+" })?;
            }
            let a = c.abs();
            if a == Rational::one() {
                write!(f, "{call}")?;
            } else {
                write!(f, "{a}*{call}")?;
            }
            first = false;
        }
        let lin_zero = self.lin.is_constant() && self.lin.constant_term().is_zero();
        if first {
            write!(f, "{}", self.lin)
        } else if lin_zero {
            Ok(())
        } else {
            let s = self.lin.to_string();
            match s.strip_prefix('-') {
                Some(rest) => write!(f, " - {rest}"),
                None => write!(f, " + {s}"),
            }
        }
    }
}

/// One parsed relation `[!]g -> lhs op rhs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub guard: Option<Guard>,
    /// `lhs - rhs`, compared against zero.
    pub diff: Affine,
    pub sense: Sense,
}

impl Statement {
    /// Nonlinear part, linear part without constant, and bound, i.e.
    /// `Σ c·f(..) + E  sense  b`.
    pub fn split(&self) -> (Vec<(Rational, Call)>, LinearExpr, Rational) {
        let mut lin = self.diff.lin.clone();
        let c = lin.constant_term().clone();
        lin.add_constant(&-&c);
        (self.diff.calls.clone(), lin, -c)
    }

    pub fn into_linear(self) -> Result<GuardedConstraint, SyntaxError> {
        if !self.diff.calls.is_empty() {
            return err(format!("nonlinear call `{}` in linear context", self.diff.calls[0].1), 0);
        }
        let (_, expr, bound) = self.split();
        Ok(GuardedConstraint { guard: self.guard, body: Constraint::new(expr, self.sense, bound) })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Rational),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

fn tokenize(s: &str) -> Result<Vec<(Tok, usize)>, SyntaxError> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < b.len() && (b[i + 1] as char).is_ascii_digit()) {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut j = i + 1;
                if j < b.len() && (b[j] == b'-' || b[j] == b'+') {
                    j += 1;
                }
                if j < b.len() && (b[j] as char).is_ascii_digit() {
                    i = j;
                    while i < b.len() && (b[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lit = &s[start..i];
            match lit.parse::<Rational>() {
                Ok(r) => out.push((Tok::Num(r), start)),
                Err(_) => return err(format!("bad number `{lit}`"), start),
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            while i < b.len() && b[i] == b'\'' {
                i += 1;
            }
            out.push((Tok::Ident(s[start..i].to_string()), start));
        } else {
            let t = match c {
                '+' | '-' | '*' | '/' => Tok::Op(c),
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                ',' => Tok::Comma,
                _ => return err(format!("unexpected character `{c}`"), i),
            };
            out.push((t, i));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    scope: &'a Scope,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.end)
    }

    fn expr(&mut self) -> Result<Affine, SyntaxError> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if c == '+' { acc.plus(rhs) } else { acc.plus(rhs.scale(&-Rational::one())) };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Affine, SyntaxError> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            let col = self.col();
            self.pos += 1;
            let rhs = self.unary()?;
            if c == '*' {
                acc = match (acc.as_constant(), rhs.as_constant()) {
                    (Some(k), _) => rhs.scale(&k),
                    (_, Some(k)) => acc.scale(&k),
                    _ => return err("product of two non-constant expressions", col),
                };
            } else {
                match rhs.as_constant() {
                    Some(k) if !k.is_zero() => acc = acc.scale(&k.recip()),
                    Some(_) => return err("division by zero", col),
                    None => return err("division by a non-constant expression", col),
                }
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Affine, SyntaxError> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(self.unary()?.scale(&-Rational::one()))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Affine, SyntaxError> {
        let col = self.col();
        let Some(tok) = self.peek().cloned() else {
            return err("unexpected end of expression", col);
        };
        self.pos += 1;
        match tok {
            Tok::Num(r) => Ok(Affine::constant(r)),
            Tok::LParen => {
                let e = self.expr()?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => err("expected `)`", self.col()),
                }
            }
            Tok::Ident(name) => {
                if let Some(Tok::LParen) = self.peek() {
                    if !BUILTINS.contains(&name.as_str()) {
                        return err(format!("unknown function `{name}`"), col);
                    }
                    self.pos += 1;
                    let arg = self.expr()?;
                    if !arg.calls.is_empty() {
                        return err("nested nonlinear calls are not supported", col);
                    }
                    match self.peek() {
                        Some(Tok::RParen) => self.pos += 1,
                        _ => return err("expected `)`", self.col()),
                    }
                    let call = Call { func: name, arg: arg.lin };
                    if call.arg.is_constant() {
                        let v = eval_builtin_rational(&call.func, call.arg.constant_term());
                        return Ok(Affine::constant(v));
                    }
                    return Ok(Affine { lin: LinearExpr::zero(), calls: vec![(Rational::one(), call)] });
                }
                if let Some(v) = self.scope.params.get(&name) {
                    return Ok(Affine::constant(v.clone()));
                }
                Ok(Affine { lin: LinearExpr::var(name), calls: vec![] })
            }
            Tok::Op(c) => err(format!("unexpected `{c}`"), col),
            Tok::RParen => err("unexpected `)`", col),
            Tok::Comma => err("unexpected `,`", col),
        }
    }
}

/// Constant folding of built-ins: `sq` is exact; `sin`/`cos` of a nonzero
/// constant is rounded to 1e-12 and only used for parameters.
fn eval_builtin_rational(func: &str, x: &Rational) -> Rational {
    match func {
        "sq" => x * x,
        "sin" if x.is_zero() => Rational::zero(),
        "cos" if x.is_zero() => Rational::one(),
        "sin" => Rational::from_f64_rounded(x.to_f64().sin(), 1_000_000_000_000, false),
        _ => Rational::from_f64_rounded(x.to_f64().cos(), 1_000_000_000_000, false),
    }
}

pub fn parse_expr(s: &str, scope: &Scope) -> Result<Affine, SyntaxError> {
    let toks = tokenize(s)?;
    let mut p = Parser { toks, pos: 0, end: s.len(), scope };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return err("trailing input", p.col());
    }
    Ok(e)
}

/// Parses a constant expression such as `2*pi` or `-3.4557519`.
pub fn parse_const(s: &str, scope: &Scope) -> Result<Rational, SyntaxError> {
    parse_expr(s, scope)?.as_constant().ok_or(SyntaxError { msg: format!("`{s}` is not constant"), col: 1 })
}

fn split_guard(s: &str) -> Result<(Option<Guard>, &str, usize), SyntaxError> {
    match s.find("->") {
        None => Ok((None, s, 0)),
        Some(i) => {
            let g = s[..i].trim();
            let (positive, name) = match g.strip_prefix('!') {
                Some(n) => (false, n.trim()),
                None => (true, g),
            };
            let valid = !name.is_empty()
                && name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '\'');
            if !valid {
                return err(format!("bad guard `{g}`"), 0);
            }
            Ok((Some(Guard { var: name.to_string(), positive }), &s[i + 2..], i + 2))
        }
    }
}

fn find_relations(s: &str) -> Vec<(usize, usize, Sense)> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let two = if i + 1 < b.len() { &s[i..i + 2] } else { "" };
        match (b[i], two) {
            (_, "<=") => {
                out.push((i, 2, Sense::Le));
                i += 2;
            }
            (_, ">=") => {
                out.push((i, 2, Sense::Ge));
                i += 2;
            }
            (_, "==") => {
                out.push((i, 2, Sense::Eq));
                i += 2;
            }
            (b'=', _) => {
                out.push((i, 1, Sense::Eq));
                i += 1;
            }
            _ => i += 1,
        }
    }
    out
}

/// Parses a relation, possibly chained (`lo <= e <= hi` yields two statements).
pub fn parse_relation(s: &str, scope: &Scope) -> Result<Vec<Statement>, SyntaxError> {
    let (guard, body, off) = split_guard(s)?;
    let rels = find_relations(body);
    if rels.is_empty() {
        return err("expected a relation (<=, >=, =)", off + body.len());
    }
    let mut parts = Vec::new();
    let mut start = 0;
    for (i, len, _) in &rels {
        parts.push((&body[start..*i], off + start));
        start = i + len;
    }
    parts.push((&body[start..], off + start));
    let exprs = parts
        .iter()
        .map(|(p, o)| parse_expr(p, scope).map_err(|e| SyntaxError { msg: e.msg, col: e.col + o }))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Vec::new();
    for (k, (_, _, sense)) in rels.iter().enumerate() {
        let diff = exprs[k].clone().plus(exprs[k + 1].scale(&-Rational::one()));
        out.push(Statement { guard: guard.clone(), diff, sense: *sense });
    }
    Ok(out)
}

/// Parses a single (unchained) relation.
pub fn parse_constraint(s: &str, scope: &Scope) -> Result<Statement, SyntaxError> {
    let mut v = parse_relation(s, scope)?;
    if v.len() != 1 {
        return err("chained relation where a single one is expected", 0);
    }
    Ok(v.pop().expect("one statement"))
}
