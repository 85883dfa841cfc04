//! Linear constraint algebra over typed, bounded variables.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PredicateError {
    #[error("variable `{0}` has no valuation")]
    MissingValuation(String),
    #[error("unknown variable `{0}`")]
    UnknownVar(String),
    #[error("variable `{0}` is unbounded")]
    Unbounded(String),
    #[error("invalid bounds for `{name}`: {msg}")]
    InvalidBounds { name: String, msg: String },
    #[error("guard variable `{0}` is not boolean")]
    GuardNotBoolean(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVar(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarKind {
    Continuous,
    Discrete,
    Boolean,
}

impl VarKind {
    pub fn is_integral(self) -> bool {
        !matches!(self, VarKind::Continuous)
    }

    pub fn keyword(self) -> &'static str {
        match self {
            VarKind::Continuous => "continuous",
            VarKind::Discrete => "discrete",
            VarKind::Boolean => "boolean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Var {
    name: String,
    kind: VarKind,
    lower: Rational,
    upper: Rational,
}

impl Var {
    pub fn new(name: impl Into<String>, kind: VarKind, lower: Rational, upper: Rational) -> Result<Self, PredicateError> {
        let name = name.into();
        let bad = |msg: &str| PredicateError::InvalidBounds { name: name.clone(), msg: msg.to_string() };
        if lower > upper {
            return Err(bad("lower > upper"));
        }
        match kind {
            VarKind::Boolean if !(lower.is_zero() && upper == Rational::one()) => {
                return Err(bad("boolean bounds must be [0,1]"))
            }
            VarKind::Discrete if !(lower.is_integer() && upper.is_integer()) => {
                return Err(bad("discrete bounds must be integers"))
            }
            _ => {}
        }
        Ok(Var { name, kind, lower, upper })
    }

    pub fn continuous(name: impl Into<String>, lower: Rational, upper: Rational) -> Result<Self, PredicateError> {
        Self::new(name, VarKind::Continuous, lower, upper)
    }

    pub fn discrete(name: impl Into<String>, lower: i64, upper: i64) -> Result<Self, PredicateError> {
        Self::new(name, VarKind::Discrete, Rational::from(lower), Rational::from(upper))
    }

    pub fn boolean(name: impl Into<String>) -> Self {
        Var { name: name.into(), kind: VarKind::Boolean, lower: Rational::zero(), upper: Rational::one() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> VarKind {
        self.kind
    }

    pub fn lower(&self) -> &Rational {
        &self.lower
    }

    pub fn upper(&self) -> &Rational {
        &self.upper
    }

    /// Same variable under another name (used for next-state decoration).
    pub fn renamed(&self, name: impl Into<String>) -> Var {
        Var { name: name.into(), ..self.clone() }
    }

    pub fn with_bounds(&self, lower: Rational, upper: Rational) -> Result<Var, PredicateError> {
        Var::new(self.name.clone(), self.kind, lower, upper)
    }

    pub fn contains(&self, v: &Rational) -> bool {
        *v >= self.lower && *v <= self.upper && (!self.kind.is_integral() || v.is_integer())
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VarKind::Boolean => write!(f, "{} boolean", self.name),
            k => write!(f, "{} {} [{}, {}]", self.name, k.keyword(), self.lower, self.upper),
        }
    }
}

pub type Valuation = BTreeMap<String, Rational>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LinearExpr {
    terms: BTreeMap<String, Rational>,
    constant: Rational,
}

impl LinearExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Rational) -> Self {
        LinearExpr { terms: BTreeMap::new(), constant: c }
    }

    pub fn var(name: impl Into<String>) -> Self {
        Self::term(name, Rational::one())
    }

    pub fn term(name: impl Into<String>, coef: Rational) -> Self {
        let mut e = Self::zero();
        e.add_term(name, coef);
        e
    }

    pub fn from_terms<S: Into<String>>(terms: impl IntoIterator<Item = (S, Rational)>, constant: Rational) -> Self {
        let mut e = Self::constant(constant);
        for (n, c) in terms {
            e.add_term(n, c);
        }
        e
    }

    /// Adds `coef * name`, merging with an existing term and dropping zeros.
    pub fn add_term(&mut self, name: impl Into<String>, coef: Rational) {
        let name = name.into();
        let merged = match self.terms.get(&name) {
            Some(c) => c + &coef,
            None => coef,
        };
        if merged.is_zero() {
            self.terms.remove(&name);
        } else {
            self.terms.insert(name, merged);
        }
    }

    pub fn add_constant(&mut self, c: &Rational) {
        self.constant += c;
    }

    pub fn terms(&self) -> &BTreeMap<String, Rational> {
        &self.terms
    }

    pub fn constant_term(&self) -> &Rational {
        &self.constant
    }

    pub fn coef(&self, name: &str) -> Rational {
        self.terms.get(name).cloned().unwrap_or_default()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.terms.keys().map(|s| s.as_str())
    }

    pub fn scale(&self, k: &Rational) -> Self {
        if k.is_zero() {
            return Self::zero();
        }
        LinearExpr {
            terms: self.terms.iter().map(|(n, c)| (n.clone(), c * k)).collect(),
            constant: &self.constant * k,
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let mut e = self.clone();
        for (n, c) in &other.terms {
            e.add_term(n.clone(), c.clone());
        }
        e.constant += &other.constant;
        e
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.plus(&other.scale(&-Rational::one()))
    }

    /// Renames variables through `f` (terms mapping to the same name merge).
    pub fn rename(&self, f: impl Fn(&str) -> String) -> Self {
        let mut e = Self::constant(self.constant.clone());
        for (n, c) in &self.terms {
            e.add_term(f(n), c.clone());
        }
        e
    }

    /// Replaces variable `name` by `by`.
    pub fn substitute(&self, name: &str, by: &LinearExpr) -> Self {
        match self.terms.get(name) {
            None => self.clone(),
            Some(c) => {
                let mut rest = self.clone();
                rest.terms.remove(name);
                rest.plus(&by.scale(c))
            }
        }
    }

    pub fn eval(&self, v: &Valuation) -> Result<Rational, PredicateError> {
        let mut acc = self.constant.clone();
        for (n, c) in &self.terms {
            let x = v.get(n).ok_or_else(|| PredicateError::MissingValuation(n.clone()))?;
            acc += c * x;
        }
        Ok(acc)
    }

    pub fn eval_f64(&self, v: &HashMap<String, f64>) -> Option<f64> {
        let mut acc = self.constant.to_f64();
        for (n, c) in &self.terms {
            acc += c.to_f64() * v.get(n)?;
        }
        Some(acc)
    }
}

/// Looks variables up by name.
pub trait VarLookup {
    fn lookup(&self, name: &str) -> Option<&Var>;
}

impl VarLookup for [Var] {
    fn lookup(&self, name: &str) -> Option<&Var> {
        self.iter().find(|v| v.name == name)
    }
}

impl VarLookup for Vec<Var> {
    fn lookup(&self, name: &str) -> Option<&Var> {
        self.as_slice().lookup(name)
    }
}

impl VarLookup for HashMap<String, Var> {
    fn lookup(&self, name: &str) -> Option<&Var> {
        self.get(name)
    }
}

impl VarLookup for BTreeMap<String, Var> {
    fn lookup(&self, name: &str) -> Option<&Var> {
        self.get(name)
    }
}

/// Exact (min, max) of `e` over the variable box.
pub fn interval_bounds<L: VarLookup + ?Sized>(e: &LinearExpr, vars: &L) -> Result<(Rational, Rational), PredicateError> {
    let mut lo = e.constant.clone();
    let mut hi = e.constant.clone();
    for (n, c) in &e.terms {
        let v = vars.lookup(n).ok_or_else(|| PredicateError::UnknownVar(n.clone()))?;
        if c.is_positive() {
            lo += c * &v.lower;
            hi += c * &v.upper;
        } else {
            lo += c * &v.upper;
            hi += c * &v.lower;
        }
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

impl Sense {
    pub fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        }
    }

    pub fn holds(self, lhs: &Rational, rhs: &Rational) -> bool {
        match self {
            Sense::Le => lhs <= rhs,
            Sense::Ge => lhs >= rhs,
            Sense::Eq => lhs == rhs,
        }
    }

    pub fn flipped(self) -> Sense {
        match self {
            Sense::Le => Sense::Ge,
            Sense::Ge => Sense::Le,
            Sense::Eq => Sense::Eq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub expr: LinearExpr,
    pub sense: Sense,
    pub bound: Rational,
}

impl Constraint {
    pub fn new(expr: LinearExpr, sense: Sense, bound: Rational) -> Self {
        Constraint { expr, sense, bound }
    }

    pub fn le(expr: LinearExpr, bound: Rational) -> Self {
        Self::new(expr, Sense::Le, bound)
    }

    pub fn ge(expr: LinearExpr, bound: Rational) -> Self {
        Self::new(expr, Sense::Ge, bound)
    }

    pub fn eq(expr: LinearExpr, bound: Rational) -> Self {
        Self::new(expr, Sense::Eq, bound)
    }

    /// Moves the expression constant into the bound.
    pub fn normalized(&self) -> Constraint {
        if self.expr.constant.is_zero() {
            return self.clone();
        }
        let mut expr = self.expr.clone();
        let c = std::mem::take(&mut expr.constant);
        Constraint { expr, sense: self.sense, bound: &self.bound - &c }
    }

    /// Equivalent list of `E <= b` constraints.
    pub fn as_le(&self) -> Vec<(LinearExpr, Rational)> {
        let n = self.normalized();
        let neg = -Rational::one();
        match n.sense {
            Sense::Le => vec![(n.expr, n.bound)],
            Sense::Ge => vec![(n.expr.scale(&neg), -n.bound)],
            Sense::Eq => vec![(n.expr.scale(&neg), -n.bound.clone()), (n.expr, n.bound)],
        }
    }

    pub fn holds(&self, v: &Valuation) -> Result<bool, PredicateError> {
        Ok(self.sense.holds(&self.expr.eval(v)?, &self.bound))
    }

    pub fn rename(&self, f: impl Fn(&str) -> String) -> Self {
        Constraint { expr: self.expr.rename(f), sense: self.sense, bound: self.bound.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Guard {
    pub var: String,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GuardedConstraint {
    pub guard: Option<Guard>,
    pub body: Constraint,
}

impl GuardedConstraint {
    pub fn plain(body: Constraint) -> Self {
        GuardedConstraint { guard: None, body }
    }

    pub fn guarded(var: impl Into<String>, positive: bool, body: Constraint) -> Self {
        GuardedConstraint { guard: Some(Guard { var: var.into(), positive }), body }
    }

    pub fn holds(&self, v: &Valuation) -> Result<bool, PredicateError> {
        if let Some(g) = &self.guard {
            let y = v.get(&g.var).ok_or_else(|| PredicateError::MissingValuation(g.var.clone()))?;
            let active = if g.positive { !y.is_zero() } else { y.is_zero() };
            if !active {
                return Ok(true);
            }
        }
        self.body.holds(v)
    }

    pub fn rename(&self, f: impl Fn(&str) -> String) -> Self {
        GuardedConstraint {
            guard: self.guard.as_ref().map(|g| Guard { var: f(&g.var), positive: g.positive }),
            body: self.body.rename(f),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.guard.iter().map(|g| g.var.as_str()).chain(self.body.expr.vars())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardedPredicate {
    pub vars: Vec<Var>,
    pub items: Vec<GuardedConstraint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConjunctivePredicate {
    pub vars: Vec<Var>,
    pub items: Vec<Constraint>,
}

fn check_names<'a>(vars: &[Var], used: impl Iterator<Item = &'a str>) -> Result<(), PredicateError> {
    let mut seen = std::collections::HashSet::new();
    for v in vars {
        if !seen.insert(v.name.as_str()) {
            return Err(PredicateError::DuplicateVar(v.name.clone()));
        }
    }
    for n in used {
        if !seen.contains(n) {
            return Err(PredicateError::UnknownVar(n.to_string()));
        }
    }
    Ok(())
}

fn check_valuation(vars: &[Var], v: &Valuation) -> Result<(), PredicateError> {
    for var in vars {
        if !v.contains_key(&var.name) {
            return Err(PredicateError::MissingValuation(var.name.clone()));
        }
    }
    Ok(())
}

impl GuardedPredicate {
    pub fn new(vars: Vec<Var>, items: Vec<GuardedConstraint>) -> Result<Self, PredicateError> {
        check_names(&vars, items.iter().flat_map(|i| i.vars()))?;
        for it in &items {
            if let Some(g) = &it.guard {
                if vars.lookup(&g.var).map(|v| v.kind) != Some(VarKind::Boolean) {
                    return Err(PredicateError::GuardNotBoolean(g.var.clone()));
                }
            }
        }
        Ok(GuardedPredicate { vars, items })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.lookup(name)
    }

    pub fn evaluate(&self, v: &Valuation) -> Result<bool, PredicateError> {
        check_valuation(&self.vars, v)?;
        for it in &self.items {
            if !it.holds(v)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn has_guards(&self) -> bool {
        self.items.iter().any(|i| i.guard.is_some())
    }

    /// Big-M elimination of guards with M derived exactly from the variable box.
    pub fn eliminate_guards(&self) -> Result<ConjunctivePredicate, PredicateError> {
        let mut out = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let Some(g) = &it.guard else {
                out.push(it.body.clone());
                continue;
            };
            let body = it.body.normalized();
            let senses: Vec<Sense> = match body.sense {
                Sense::Eq => vec![Sense::Le, Sense::Ge],
                s => vec![s],
            };
            for sense in senses {
                let (lo, hi) = interval_bounds(&body.expr, &self.vars)?;
                let b = body.bound.clone();
                let mut expr = body.expr.clone();
                let zero = Rational::zero();
                let (m, new_b) = match (sense, g.positive) {
                    // y -> E <= b   ~>   E + M y <= b + M
                    (Sense::Le, true) => {
                        let m = Rational::max_of(&(&hi - &b), &zero);
                        (m.clone(), &b + &m)
                    }
                    // !y -> E <= b   ~>   E - M y <= b
                    (Sense::Le, false) => {
                        let m = Rational::max_of(&(&hi - &b), &zero);
                        (-m, b)
                    }
                    // y -> E >= b   ~>   E - M y >= b - M
                    (Sense::Ge, true) => {
                        let m = Rational::max_of(&(&b - &lo), &zero);
                        (-m.clone(), &b - &m)
                    }
                    // !y -> E >= b   ~>   E + M y >= b
                    (Sense::Ge, false) => {
                        let m = Rational::max_of(&(&b - &lo), &zero);
                        (m, b)
                    }
                    (Sense::Eq, _) => unreachable!(),
                };
                expr.add_term(g.var.clone(), m);
                out.push(Constraint::new(expr, sense, new_b));
            }
        }
        Ok(ConjunctivePredicate { vars: self.vars.clone(), items: out })
    }
}

impl ConjunctivePredicate {
    pub fn new(vars: Vec<Var>, items: Vec<Constraint>) -> Result<Self, PredicateError> {
        check_names(&vars, items.iter().flat_map(|c| c.expr.vars()))?;
        Ok(ConjunctivePredicate { vars, items })
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.lookup(name)
    }

    pub fn evaluate(&self, v: &Valuation) -> Result<bool, PredicateError> {
        check_valuation(&self.vars, v)?;
        for c in &self.items {
            if !c.holds(v)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_guarded(&self) -> GuardedPredicate {
        GuardedPredicate {
            vars: self.vars.clone(),
            items: self.items.iter().cloned().map(GuardedConstraint::plain).collect(),
        }
    }
}

fn fmt_coef_term(f: &mut fmt::Formatter<'_>, first: bool, c: &Rational, name: Option<&str>) -> fmt::Result {
    let neg = c.is_negative();
    let a = c.abs();
    if first {
        if neg {
            write!(f, "-")?;
        }
    } else {
        write!(f, " {} ", if neg { "-" } else { "+" })?;
    }
    match name {
        Some(n) if a == Rational::one() => write!(f, "{n}"),
        Some(n) => write!(f, "{a}*{n}"),
        None => write!(f, "{a}"),
    }
}

impl fmt::Display for LinearExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (n, c) in &self.terms {
            fmt_coef_term(f, first, c, Some(n))?;
            first = false;
        }
        if first || !self.constant.is_zero() {
            fmt_coef_term(f, first, &self.constant, None)?;
        }
        Ok(())
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.expr, self.sense.symbol(), self.bound)
    }
}

impl fmt::Display for GuardedConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(g) = &self.guard {
            write!(f, "{}{} -> ", if g.positive { "" } else { "!" }, g.var)?;
        }
        write!(f, "{}", self.body)
    }
}

impl fmt::Display for ConjunctivePredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.items.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Display for GuardedPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.items.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for GuardedConstraint {
    type Err = PredicateError;

    /// Parses `[!]g -> expr (<=|>=|=) expr` with rational coefficients.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let stmt = crate::syntax::parse_constraint(s, &crate::syntax::Scope::default())
            .map_err(|e| PredicateError::Parse(e.to_string()))?;
        stmt.into_linear().map_err(|e| PredicateError::Parse(e.to_string()))
    }
}

impl std::str::FromStr for Constraint {
    type Err = PredicateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let g: GuardedConstraint = s.parse()?;
        if g.guard.is_some() {
            return Err(PredicateError::Parse(format!("unexpected guard in `{s}`")));
        }
        Ok(g.body)
    }
}
