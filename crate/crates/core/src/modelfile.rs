//! Line-oriented model files.
//!
//! ```text
//! format 1
//! # comment
//! param T = 1/10
//! state x1 in [-1.1*pi, 1.1*pi] wrap 2*pi
//! input u discrete in [-1, 1]
//! aux y boolean
//! trans x1' = x1 + T*x2
//! init x1 >= -pi
//! goal x1 <= rho
//! quantize x1 bits=b range=[-1.1*pi, 1.1*pi]
//! quantize x floor scale=8
//! quantize u identity
//! envelope sin style=tight cells=4
//! eps = 1/32
//! ```
//!
//! Expressions are stored as whitespace-normalized text and evaluated at
//! instantiation, so parameters may be overridden afterwards.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::linearize::{EnvelopeConfig, EnvelopeStyle};
use crate::model::{add_relation, ControlProblem, Dths, ModelError, StateVar, UpdateFn};
use crate::predicates::{Constraint, Var, VarKind};
use crate::quantize::{QuantMap, Quantization, QuantizeError};
use crate::rational::Rational;
use crate::syntax::{self, Scope};

#[derive(Debug, Error, PartialEq)]
pub enum ModelFileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Quantize(#[from] QuantizeError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    State,
    Input,
    Aux,
}

impl Role {
    fn keyword(self) -> &'static str {
        match self {
            Role::State => "state",
            Role::Input => "input",
            Role::Aux => "aux",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub role: Role,
    pub name: String,
    pub kind: VarKind,
    /// None only for booleans.
    pub range: Option<(String, String)>,
    pub wrap: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantSpec {
    Bits { bits: String, range: Option<(String, String)> },
    Floor { scale: String, range: Option<(String, String)> },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelFile {
    pub params: Vec<(String, String)>,
    pub vars: Vec<VarDecl>,
    pub trans: Vec<String>,
    pub init: Vec<String>,
    pub goal: Vec<String>,
    pub quantize: Vec<(String, QuantSpec)>,
    pub envelopes: Vec<(String, EnvelopeStyle, usize)>,
    pub eps: Option<String>,
}

/// Everything a pipeline run needs, with parameters fixed.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: BTreeMap<String, Rational>,
    pub problem: ControlProblem,
    pub quantization: Quantization,
    pub envelopes: EnvelopeConfig,
    pub eps: Option<Rational>,
}

pub const FORMAT_VERSION: u32 = 1;

pub const PENDULUM: &str = include_str!("../models/pendulum.model");
pub const EX2: &str = include_str!("../models/ex2.model");

/// Bundled model text by name.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "pendulum" => Some(PENDULUM),
        "ex2" => Some(EX2),
        _ => None,
    }
}

fn norm(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_') && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
}

/// `[a, b]` at the start of `s`; returns the pair and the rest.
fn take_range(s: &str) -> Result<((String, String), &str), String> {
    let s = s.trim_start();
    let body = s.strip_prefix('[').ok_or("expected `[`")?;
    let close = body.find(']').ok_or("expected `]`")?;
    let inner = &body[..close];
    let comma = inner.find(',').ok_or("expected `lo, hi`")?;
    let (a, b) = (norm(&inner[..comma]), norm(&inner[comma + 1..]));
    if a.is_empty() || b.is_empty() {
        return Err("empty bound".into());
    }
    Ok(((a, b), &body[close + 1..]))
}

fn split_kv(tok: &str) -> Option<(&str, &str)> {
    let (k, v) = tok.split_once('=')?;
    Some((k.trim(), v.trim()))
}

pub(crate) fn parse_var(role: Role, rest: &str) -> Result<VarDecl, String> {
    let rest = rest.trim();
    let (name, mut rest) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    if !is_ident(name) {
        return Err(format!("bad variable name `{name}`"));
    }
    let mut kind = VarKind::Continuous;
    rest = rest.trim_start();
    for (kw, k) in [("continuous", VarKind::Continuous), ("discrete", VarKind::Discrete), ("boolean", VarKind::Boolean)] {
        if let Some(r) = rest.strip_prefix(kw) {
            if r.is_empty() || r.starts_with(char::is_whitespace) {
                kind = k;
                rest = r.trim_start();
            }
        }
    }
    let mut range = None;
    if let Some(r) = rest.strip_prefix("in") {
        let (rg, r) = take_range(r)?;
        range = Some(rg);
        rest = r.trim_start();
    }
    let mut wrap = None;
    if let Some(r) = rest.strip_prefix("wrap") {
        if role != Role::State {
            return Err("only state variables wrap".into());
        }
        let w = norm(r);
        if w.is_empty() {
            return Err("wrap needs a period".into());
        }
        wrap = Some(w);
        rest = "";
    }
    if !rest.trim().is_empty() {
        return Err(format!("unexpected `{}`", rest.trim()));
    }
    match (kind, &range) {
        (VarKind::Boolean, Some(_)) => return Err("boolean variables take no range".into()),
        (VarKind::Boolean, None) => {}
        (_, None) => return Err(format!("`{name}` needs a range `in [lo, hi]`")),
        _ => {}
    }
    Ok(VarDecl { role, name: name.to_string(), kind, range, wrap })
}

fn parse_quantize(rest: &str) -> Result<(String, QuantSpec), String> {
    let rest = rest.trim();
    let (name, rest) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
    if !is_ident(name) {
        return Err(format!("bad variable name `{name}`"));
    }
    let rest = rest.trim();
    let (range, head) = match rest.find("range=") {
        Some(p) => {
            let (rg, tail) = take_range(&rest[p + 6..])?;
            if !tail.trim().is_empty() {
                return Err(format!("unexpected `{}` after range", tail.trim()));
            }
            (Some(rg), rest[..p].trim())
        }
        None => (None, rest),
    };
    let toks: Vec<&str> = head.split_whitespace().collect();
    let spec = match toks.as_slice() {
        ["identity"] if range.is_none() => QuantSpec::Identity,
        ["floor", kv] => match split_kv(kv) {
            Some(("scale", v)) if !v.is_empty() => QuantSpec::Floor { scale: v.to_string(), range },
            _ => return Err(format!("expected `scale=<k>`, found `{kv}`")),
        },
        [kv] => match split_kv(kv) {
            Some(("bits", v)) if !v.is_empty() => QuantSpec::Bits { bits: v.to_string(), range },
            _ => return Err(format!("expected `bits=<n>`, `floor scale=<k>` or `identity`, found `{kv}`")),
        },
        _ => return Err(format!("bad quantization `{head}`")),
    };
    Ok((name.to_string(), spec))
}

fn parse_envelope(rest: &str) -> Result<(String, EnvelopeStyle, usize), String> {
    let toks: Vec<&str> = rest.split_whitespace().collect();
    let Some((func, opts)) = toks.split_first() else { return Err("missing function".into()) };
    if !syntax::BUILTINS.contains(func) {
        return Err(format!("unknown built-in `{func}`"));
    }
    let mut style = if *func == "sin" { EnvelopeStyle::Tight } else { EnvelopeStyle::Taylor };
    let mut cells = if *func == "sin" { 4 } else { 16 };
    for o in opts {
        match split_kv(o) {
            Some(("style", v)) => {
                style = match v {
                    "coarse" => EnvelopeStyle::Coarse,
                    "tight" => EnvelopeStyle::Tight,
                    "taylor" => EnvelopeStyle::Taylor,
                    _ => return Err(format!("unknown style `{v}`")),
                }
            }
            Some(("cells", v)) => cells = v.parse().map_err(|_| format!("bad cell count `{v}`"))?,
            _ => return Err(format!("unknown option `{o}`")),
        }
    }
    if cells == 0 {
        return Err("cells must be positive".into());
    }
    Ok((func.to_string(), style, cells))
}

impl ModelFile {
    pub fn parse(src: &str) -> Result<Self, ModelFileError> {
        let mut m = ModelFile::default();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| ModelFileError::Parse { line: i + 1, msg };
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match key {
                "format" => {
                    if rest.trim() != FORMAT_VERSION.to_string() {
                        return Err(fail(format!("unsupported format `{}`", rest.trim())));
                    }
                }
                "param" => {
                    let (n, v) = rest.split_once('=').ok_or_else(|| fail("expected `param NAME = value`".into()))?;
                    let n = n.trim();
                    if !is_ident(n) {
                        return Err(fail(format!("bad parameter name `{n}`")));
                    }
                    if n == "pi" {
                        return Err(fail("`pi` is predefined".into()));
                    }
                    if m.params.iter().any(|(p, _)| p == n) {
                        return Err(fail(format!("parameter `{n}` defined twice")));
                    }
                    m.params.push((n.to_string(), norm(v)));
                }
                "state" | "input" | "aux" => {
                    let role = match key {
                        "state" => Role::State,
                        "input" => Role::Input,
                        _ => Role::Aux,
                    };
                    let d = parse_var(role, rest).map_err(fail)?;
                    if m.vars.iter().any(|v| v.name == d.name) {
                        return Err(fail(format!("variable `{}` declared twice", d.name)));
                    }
                    m.vars.push(d);
                }
                "trans" => m.trans.push(norm(rest)),
                "init" => m.init.push(norm(rest)),
                "goal" => m.goal.push(norm(rest)),
                "quantize" => {
                    let q = parse_quantize(rest).map_err(fail)?;
                    if m.quantize.iter().any(|(n, _)| *n == q.0) {
                        return Err(fail(format!("`{}` quantized twice", q.0)));
                    }
                    m.quantize.push(q);
                }
                "envelope" => m.envelopes.push(parse_envelope(rest).map_err(fail)?),
                "eps" => {
                    let v = rest.trim().strip_prefix('=').ok_or_else(|| fail("expected `eps = value`".into()))?;
                    m.eps = Some(norm(v));
                }
                _ => return Err(fail(format!("unknown directive `{key}`"))),
            }
        }
        // Check expressions early so errors carry line numbers.
        m.instantiate(&BTreeMap::new()).map(|_| m.clone()).map_err(|e| match e {
            ModelFileError::Parse { .. } => e,
            other => locate(src, other),
        })
    }

    pub fn param(&self, name: &str) -> Option<&str> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    /// Replaces a parameter's definition; errors if it is not declared.
    pub fn set_param(&mut self, name: &str, value: &Rational) -> Result<(), ModelFileError> {
        let slot = self.params.iter_mut().find(|(n, _)| n == name).ok_or_else(|| ModelFileError::Invalid(format!("unknown parameter `{name}`")))?;
        slot.1 = value.to_string();
        Ok(())
    }

    pub fn set_envelope(&mut self, func: &str, style: EnvelopeStyle, cells: usize) {
        self.envelopes.retain(|(f, _, _)| f != func);
        self.envelopes.push((func.to_string(), style, cells));
    }

    fn scope(&self, overrides: &BTreeMap<String, Rational>) -> Result<Scope, ModelFileError> {
        for k in overrides.keys() {
            if self.param(k).is_none() {
                return Err(ModelFileError::Invalid(format!("unknown parameter `{k}`")));
            }
        }
        let mut sc = Scope::default();
        for (n, v) in &self.params {
            let val = match overrides.get(n) {
                Some(o) => o.clone(),
                None => syntax::parse_const(v, &sc).map_err(|e| ModelFileError::Invalid(format!("param {n}: {e}")))?,
            };
            sc.params.insert(n.clone(), val);
        }
        Ok(sc)
    }

    pub fn instantiate(&self, overrides: &BTreeMap<String, Rational>) -> Result<Instance, ModelFileError> {
        let sc = self.scope(overrides)?;
        let konst = |s: &str, what: &str| syntax::parse_const(s, &sc).map_err(|e| ModelFileError::Invalid(format!("{what}: {e}")));
        let mut h = Dths { states: vec![], inputs: vec![], aux: vec![], terms: vec![], items: vec![] };
        for d in &self.vars {
            let var = match (d.kind, &d.range) {
                (VarKind::Boolean, _) => Var::boolean(d.name.clone()),
                (k, Some((a, b))) => {
                    let what = format!("bounds of `{}`", d.name);
                    Var::new(d.name.clone(), k, konst(a, &what)?, konst(b, &what)?).map_err(ModelError::from)?
                }
                (_, None) => return Err(ModelFileError::Invalid(format!("`{}` has no range", d.name))),
            };
            match d.role {
                Role::State => {
                    let wrap = d.wrap.as_deref().map(|w| konst(w, &format!("wrap of `{}`", d.name))).transpose()?;
                    h.states.push(StateVar { var, wrap });
                }
                Role::Input => h.inputs.push(var),
                Role::Aux => h.aux.push(var),
            }
        }
        if h.states.is_empty() {
            return Err(ModelFileError::Invalid("no state variables".into()));
        }
        for t in &self.trans {
            add_relation(&mut h, t, &sc).map_err(|e| ModelFileError::Invalid(format!("trans `{t}`: {e}")))?;
        }
        h.validate()?;
        let lin = |s: &String| -> Result<Constraint, ModelFileError> {
            Ok(crate::model::linear(s, &sc).map_err(|e| ModelFileError::Invalid(format!("`{s}`: {e}")))?.body)
        };
        let init = self.init.iter().map(lin).collect::<Result<Vec<_>, _>>()?;
        let goal = self.goal.iter().map(lin).collect::<Result<Vec<_>, _>>()?;
        if goal.is_empty() {
            return Err(ModelFileError::Invalid("no goal constraints".into()));
        }
        let problem = ControlProblem::new(h, init, goal)?;
        let qmap = |name: &str| -> Result<QuantMap, ModelFileError> {
            let spec = self.quantize.iter().find(|(n, _)| n == name).map(|(_, s)| s);
            let var = problem
                .system
                .states
                .iter()
                .map(|s| &s.var)
                .chain(&problem.system.inputs)
                .find(|v| v.name() == name)
                .expect("declared");
            let range = |r: &Option<(String, String)>| -> Result<(Rational, Rational), ModelFileError> {
                match r {
                    Some((a, b)) => Ok((konst(a, "quantization range")?, konst(b, "quantization range")?)),
                    None => Ok((var.lower().clone(), var.upper().clone())),
                }
            };
            Ok(match spec {
                None | Some(QuantSpec::Identity) => {
                    if !var.kind().is_integral() {
                        return Err(ModelFileError::Invalid(format!("continuous `{name}` needs `quantize {name} bits=..` or `floor`")));
                    }
                    QuantMap::identity_for(var)?
                }
                Some(QuantSpec::Bits { bits, range: r }) => {
                    let b = konst(bits, "bits")?;
                    let b = b.to_i64().filter(|v| b.is_integer() && (1..=24).contains(v)).ok_or_else(|| ModelFileError::Invalid(format!("bits must be an integer in 1..=24, got {b}")))?;
                    let (lo, hi) = range(r)?;
                    QuantMap::uniform(name, lo, hi, b as u32)?
                }
                Some(QuantSpec::Floor { scale, range: r }) => {
                    let (lo, hi) = range(r)?;
                    QuantMap::floor_scale(name, lo, hi, konst(scale, "scale")?)?
                }
            })
        };
        for (n, _) in &self.quantize {
            let known = problem.system.states.iter().any(|s| s.var.name() == n) || problem.system.inputs.iter().any(|v| v.name() == n);
            if !known {
                return Err(ModelFileError::Invalid(format!("quantized variable `{n}` is not a state or input")));
            }
        }
        let states = problem.system.states.iter().map(|s| qmap(s.var.name())).collect::<Result<Vec<_>, _>>()?;
        let inputs = problem.system.inputs.iter().map(|v| qmap(v.name())).collect::<Result<Vec<_>, _>>()?;
        let quantization = Quantization::new(states, inputs);
        let envelopes: EnvelopeConfig = self.envelopes.iter().map(|(f, s, c)| (f.clone(), (*s, *c))).collect();
        let eps = self.eps.as_deref().map(|e| konst(e, "eps")).transpose()?;
        Ok(Instance { params: sc.params, problem, quantization, envelopes, eps })
    }

    /// The plant with the sampling parameter `T` replaced by `ts`, as an
    /// explicit one-step map.
    pub fn plant(&self, overrides: &BTreeMap<String, Rational>, ts: &Rational) -> Result<UpdateFn, ModelFileError> {
        if self.param("T").is_none() {
            return Err(ModelFileError::Invalid("simulation needs a sampling parameter `T`".into()));
        }
        let mut o = overrides.clone();
        o.insert("T".into(), ts.clone());
        let inst = self.instantiate(&o)?;
        Ok(inst.problem.system.update_fn()?)
    }
}

/// Attaches the line of the first statement mentioning the failing text.
fn locate(src: &str, e: ModelFileError) -> ModelFileError {
    let msg = e.to_string();
    let needle = msg.split('`').nth(1).unwrap_or("");
    if !needle.is_empty() {
        for (i, l) in src.lines().enumerate() {
            if norm(l.split('#').next().unwrap_or("")).contains(needle) {
                return ModelFileError::Parse { line: i + 1, msg };
            }
        }
    }
    e
}

impl fmt::Display for ModelFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "format {FORMAT_VERSION}")?;
        for (n, v) in &self.params {
            writeln!(f, "param {n} = {v}")?;
        }
        for d in &self.vars {
            write!(f, "{} {} {}", d.role.keyword(), d.name, d.kind.keyword())?;
            if let Some((a, b)) = &d.range {
                write!(f, " in [{a}, {b}]")?;
            }
            if let Some(w) = &d.wrap {
                write!(f, " wrap {w}")?;
            }
            writeln!(f)?;
        }
        for t in &self.trans {
            writeln!(f, "trans {t}")?;
        }
        for t in &self.init {
            writeln!(f, "init {t}")?;
        }
        for t in &self.goal {
            writeln!(f, "goal {t}")?;
        }
        for (n, q) in &self.quantize {
            let rg = |r: &Option<(String, String)>| r.as_ref().map_or(String::new(), |(a, b)| format!(" range=[{a}, {b}]"));
            match q {
                QuantSpec::Bits { bits, range } => writeln!(f, "quantize {n} bits={bits}{}", rg(range))?,
                QuantSpec::Floor { scale, range } => writeln!(f, "quantize {n} floor scale={scale}{}", rg(range))?,
                QuantSpec::Identity => writeln!(f, "quantize {n} identity")?,
            }
        }
        for (func, s, c) in &self.envelopes {
            writeln!(f, "envelope {func} style={} cells={c}", s.keyword())?;
        }
        if let Some(e) = &self.eps {
            writeln!(f, "eps = {e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_round_trip() {
        for name in ["pendulum", "ex2"] {
            let m = ModelFile::parse(bundled(name).unwrap()).unwrap();
            let again = ModelFile::parse(&m.to_string()).unwrap();
            assert_eq!(m, again, "{name}");
        }
    }

    #[test]
    fn pendulum_matches_builtin() {
        let m = ModelFile::parse(PENDULUM).unwrap();
        let inst = m.instantiate(&BTreeMap::new()).unwrap();
        let p = crate::model::pendulum_problem(Rational::from(2), Rational::new(1, 10), Rational::new(1, 10));
        assert_eq!(inst.problem.system, p.system);
        assert_eq!(inst.problem.goal, p.goal);
        assert_eq!(inst.problem.init, p.init);
        assert_eq!(inst.quantization.states, crate::quantize::pendulum_quantization(8).states);
    }

    #[test]
    fn override_changes_force() {
        let m = ModelFile::parse(PENDULUM).unwrap();
        let o = BTreeMap::from([("F".to_string(), Rational::new(1, 2)), ("b".to_string(), Rational::from(5))]);
        let inst = m.instantiate(&o).unwrap();
        let p = crate::model::pendulum_problem(Rational::new(1, 2), Rational::new(1, 10), Rational::new(1, 10));
        assert_eq!(inst.problem.system, p.system);
        assert_eq!(inst.quantization.num_states(), 1024);
        assert!(m.instantiate(&BTreeMap::from([("nope".to_string(), Rational::one())])).is_err());
    }

    #[test]
    fn errors_carry_lines() {
        let e = ModelFile::parse("param T = 1\nstate x in [0, 1]\nbogus x\n").unwrap_err();
        assert_eq!(e, ModelFileError::Parse { line: 3, msg: "unknown directive `bogus`".into() });
        let e = ModelFile::parse("state x in [0, 1]\ninput u boolean\ntrans x' = x + q\ngoal x <= 1\nquantize x bits=2\n").unwrap_err();
        assert!(matches!(e, ModelFileError::Parse { line: 3, .. }), "{e:?}");
        assert!(ModelFile::parse("state x boolean in [0, 1]\n").is_err());
        assert!(ModelFile::parse("state x\n").is_err());
    }
}
