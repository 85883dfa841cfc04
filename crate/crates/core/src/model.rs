//! Hybrid system models, their transition semantics, and explicit LTSs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::milp::{Compiled, MilpError};
use crate::predicates::{
    ConjunctivePredicate, Constraint, Guard, GuardedConstraint, GuardedPredicate, LinearExpr, PredicateError, Sense,
    Valuation, Var,
};
use crate::rational::Rational;
use crate::syntax;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error("auxiliary variables present and no witness supplied: existential over nonlinear constraints is not decided")]
    UndecidableWithoutWitness,
    #[error("unknown state {0}")]
    UnknownState(usize),
    #[error("alphabets differ")]
    MismatchedAlphabets,
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Name of the next-state copy of `x`.
pub fn next_name(x: &str) -> String {
    format!("{x}'")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    C2,
    Unknown,
}

pub type EvalFn = Arc<dyn Fn(&[f64], &[i64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &[i64]) -> Vec<f64> + Send + Sync>;
/// Bounds on the eigenvalues of the Hessian over a box of real arguments.
pub type HessianRangeFn = Arc<dyn Fn(&[(f64, f64)], &[i64]) -> (Rational, Rational) + Send + Sync>;

#[derive(Clone)]
pub struct NonlinearTerm {
    pub id: String,
    pub real_args: Vec<String>,
    pub discrete_args: Vec<String>,
    pub eval: EvalFn,
    pub gradient: Option<GradFn>,
    pub smoothness: Smoothness,
    pub hessian_range: Option<HessianRangeFn>,
    /// Built-in function name when the term is a model-file call.
    pub builtin: Option<String>,
}

impl fmt::Debug for NonlinearTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearTerm")
            .field("id", &self.id)
            .field("real_args", &self.real_args)
            .field("discrete_args", &self.discrete_args)
            .field("builtin", &self.builtin)
            .finish()
    }
}

impl PartialEq for NonlinearTerm {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id && self.real_args == o.real_args && self.discrete_args == o.discrete_args && self.builtin == o.builtin
    }
}

fn sin_hessian(b: &[(f64, f64)]) -> (Rational, Rational) {
    // -sin over [a, b]
    let (a, c) = b[0];
    let (lo, hi) = sin_range(a, c);
    (Rational::from_f64_rounded(-hi, 1 << 30, false), Rational::from_f64_rounded(-lo, 1 << 30, true))
}

fn cos_hessian(b: &[(f64, f64)]) -> (Rational, Rational) {
    let (a, c) = b[0];
    let (lo, hi) = sin_range(a + std::f64::consts::FRAC_PI_2, c + std::f64::consts::FRAC_PI_2);
    (Rational::from_f64_rounded(-hi, 1 << 30, false), Rational::from_f64_rounded(-lo, 1 << 30, true))
}

/// Range of sin over [a, b], padded by 1e-12.
pub fn sin_range(a: f64, b: f64) -> (f64, f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut lo = a.sin().min(b.sin());
    let mut hi = a.sin().max(b.sin());
    // Extrema at pi/2 + 2k pi (max) and -pi/2 + 2k pi (min).
    let k0 = ((a - FRAC_PI_2) / (2.0 * PI)).ceil();
    if FRAC_PI_2 + 2.0 * PI * k0 <= b {
        hi = 1.0;
    }
    let k1 = ((a + FRAC_PI_2) / (2.0 * PI)).ceil();
    if -FRAC_PI_2 + 2.0 * PI * k1 <= b {
        lo = -1.0;
    }
    (lo - 1e-12, hi + 1e-12)
}

impl NonlinearTerm {
    /// Built-in one-argument function applied to variable `arg`.
    pub fn builtin(func: &str, arg: &str) -> Result<Self, ModelError> {
        let (eval, grad, hess): (EvalFn, GradFn, HessianRangeFn) = match func {
            "sin" => (
                Arc::new(|r, _| r[0].sin()),
                Arc::new(|r, _| vec![r[0].cos()]),
                Arc::new(|b, _| sin_hessian(b)),
            ),
            "cos" => (
                Arc::new(|r, _| r[0].cos()),
                Arc::new(|r, _| vec![-r[0].sin()]),
                Arc::new(|b, _| cos_hessian(b)),
            ),
            "sq" => (
                Arc::new(|r, _| r[0] * r[0]),
                Arc::new(|r, _| vec![2.0 * r[0]]),
                Arc::new(|_, _| (Rational::from(2), Rational::from(2))),
            ),
            _ => return Err(ModelError::Invalid(format!("unknown built-in `{func}`"))),
        };
        Ok(NonlinearTerm {
            id: format!("{func}({arg})"),
            real_args: vec![arg.to_string()],
            discrete_args: vec![],
            eval,
            gradient: Some(grad),
            smoothness: Smoothness::C2,
            hessian_range: Some(hess),
            builtin: Some(func.to_string()),
        })
    }
}

/// One item of a DTHS transition relation.
#[derive(Debug, Clone, PartialEq)]
pub enum DthsItem {
    Linear(GuardedConstraint),
    /// `Σ c_k f_k(R,W) + expr  sense  bound` (terms index `Dths::terms`).
    Nonlinear {
        guard: Option<Guard>,
        terms: Vec<(Rational, usize)>,
        expr: LinearExpr,
        sense: Sense,
        bound: Rational,
    },
}

/// State variable with optional wrap-around period (angles).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateVar {
    pub var: Var,
    pub wrap: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dths {
    pub states: Vec<StateVar>,
    pub inputs: Vec<Var>,
    pub aux: Vec<Var>,
    pub terms: Vec<NonlinearTerm>,
    pub items: Vec<DthsItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dtlhs {
    pub states: Vec<StateVar>,
    pub inputs: Vec<Var>,
    pub aux: Vec<Var>,
    /// Over X ∪ U ∪ Y ∪ X'.
    pub n: GuardedPredicate,
}

fn next_vars(states: &[StateVar]) -> Vec<Var> {
    states.iter().map(|s| s.var.renamed(next_name(s.var.name()))).collect()
}

impl Dths {
    pub fn state_names(&self) -> Vec<String> {
        self.states.iter().map(|s| s.var.name().to_string()).collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.states.iter().map(|s| s.var.clone()).collect();
        v.extend(self.inputs.iter().cloned());
        v.extend(self.aux.iter().cloned());
        v.extend(next_vars(&self.states));
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let vars = self.all_vars();
        let names: BTreeSet<&str> = vars.iter().map(|v| v.name()).collect();
        if names.len() != vars.len() {
            return Err(ModelError::Invalid("duplicate variable names".into()));
        }
        let check = |n: &str| {
            if names.contains(n) {
                Ok(())
            } else {
                Err(ModelError::Predicate(PredicateError::UnknownVar(n.to_string())))
            }
        };
        for t in &self.terms {
            for a in t.real_args.iter().chain(&t.discrete_args) {
                check(a)?;
            }
        }
        for it in &self.items {
            match it {
                DthsItem::Linear(g) => {
                    for n in g.vars() {
                        check(n)?;
                    }
                }
                DthsItem::Nonlinear { guard, terms, expr, .. } => {
                    if let Some(g) = guard {
                        check(&g.var)?;
                    }
                    for n in expr.vars() {
                        check(n)?;
                    }
                    for (_, k) in terms {
                        if *k >= self.terms.len() {
                            return Err(ModelError::Invalid(format!("term index {k} out of range")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.items.iter().all(|i| matches!(i, DthsItem::Linear(_)))
    }

    /// f64 value of every nonlinear term under `v`.
    pub fn term_values(&self, v: &HashMap<String, f64>) -> Option<Vec<f64>> {
        self.terms
            .iter()
            .map(|t| {
                let r: Option<Vec<f64>> = t.real_args.iter().map(|a| v.get(a).copied()).collect();
                let w: Option<Vec<i64>> = t.discrete_args.iter().map(|a| v.get(a).map(|x| x.round() as i64)).collect();
                Some((t.eval)(&r?, &w?))
            })
            .collect()
    }

    /// Checks `N(x,u,y,x')`; nonlinear items are compared with tolerance `tol`.
    fn holds_exact(&self, v: &Valuation, tol: f64) -> Result<bool, ModelError> {
        let vf: HashMap<String, f64> = v.iter().map(|(k, x)| (k.clone(), x.to_f64())).collect();
        let mut tv: Option<Vec<f64>> = None;
        for it in &self.items {
            match it {
                DthsItem::Linear(g) => {
                    if !g.holds(v)? {
                        return Ok(false);
                    }
                }
                DthsItem::Nonlinear { guard, terms, expr, sense, bound } => {
                    if let Some(g) = guard {
                        let y = v.get(&g.var).ok_or_else(|| PredicateError::MissingValuation(g.var.clone()))?;
                        if y.is_zero() == g.positive {
                            continue;
                        }
                    }
                    if tv.is_none() {
                        tv = Some(
                            self.term_values(&vf)
                                .ok_or_else(|| PredicateError::MissingValuation("nonlinear argument".into()))?,
                        );
                    }
                    let vals = tv.as_ref().expect("computed");
                    let mut lhs = expr.eval(v)?.to_f64();
                    for (c, k) in terms {
                        lhs += c.to_f64() * vals[*k];
                    }
                    let b = bound.to_f64();
                    let scale = tol * (1.0 + lhs.abs().max(b.abs()));
                    let ok = match sense {
                        Sense::Le => lhs <= b + scale,
                        Sense::Ge => lhs >= b - scale,
                        Sense::Eq => (lhs - b).abs() <= scale,
                    };
                    if !ok {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    /// Transition check `Ñ(x,u,x')`; wrapped state coordinates match modulo
    /// their period. Nonlinear items use a relative tolerance of 1e-9.
    pub fn lts_step(&self, x: &Valuation, u: &Valuation, xn: &Valuation, y: Option<&Valuation>) -> Result<bool, ModelError> {
        if !self.aux.is_empty() && y.is_none() {
            return Err(ModelError::UndecidableWithoutWitness);
        }
        let mut base = Valuation::new();
        for s in &self.states {
            let n = s.var.name();
            let xv = x.get(n).ok_or_else(|| PredicateError::MissingValuation(n.to_string()))?;
            let nv = xn.get(n).ok_or_else(|| PredicateError::MissingValuation(n.to_string()))?;
            if !s.var.contains(xv) || !s.var.contains(nv) {
                return Ok(false);
            }
            base.insert(n.to_string(), xv.clone());
        }
        for i in &self.inputs {
            let v = u.get(i.name()).ok_or_else(|| PredicateError::MissingValuation(i.name().to_string()))?;
            if !i.contains(v) {
                return Ok(false);
            }
            base.insert(i.name().to_string(), v.clone());
        }
        if let Some(y) = y {
            for a in &self.aux {
                let v = y.get(a.name()).ok_or_else(|| PredicateError::MissingValuation(a.name().to_string()))?;
                if !a.contains(v) {
                    return Ok(false);
                }
                base.insert(a.name().to_string(), v.clone());
            }
        }
        // Enumerate wrap offsets k in {-2..2} per wrapped coordinate.
        let wrapped: Vec<usize> = (0..self.states.len()).filter(|&i| self.states[i].wrap.is_some()).collect();
        let combos = 5usize.pow(wrapped.len() as u32);
        for c in 0..combos {
            let mut v = base.clone();
            let mut rem = c;
            let mut offs = vec![0i64; self.states.len()];
            for &i in &wrapped {
                offs[i] = (rem % 5) as i64 - 2;
                rem /= 5;
            }
            for (i, s) in self.states.iter().enumerate() {
                let n = s.var.name();
                let mut nv = xn[n].clone();
                if let Some(p) = &s.wrap {
                    nv += p * &Rational::from(offs[i]);
                }
                v.insert(next_name(n), nv);
            }
            if self.holds_exact(&v, 1e-9)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Deterministic successor for a Y-free system where each next-state
    /// variable is defined by one equality `x_i' = ...` (used by the simulator).
    pub fn update_fn(&self) -> Result<UpdateFn, ModelError> {
        let guarded_ok = self.aux.is_empty();
        if !guarded_ok {
            return Err(ModelError::Invalid("simulation requires a model without auxiliary variables".into()));
        }
        let mut rules: Vec<Vec<UpdateRule>> = vec![Vec::new(); self.states.len()];
        let index: HashMap<String, usize> =
            self.states.iter().enumerate().map(|(i, s)| (next_name(s.var.name()), i)).collect();
        for it in &self.items {
            let (guard, terms, expr, sense, bound) = match it {
                DthsItem::Linear(g) => (g.guard.clone(), vec![], g.body.expr.clone(), g.body.sense, g.body.bound.clone()),
                DthsItem::Nonlinear { guard, terms, expr, sense, bound } => {
                    (guard.clone(), terms.clone(), expr.clone(), *sense, bound.clone())
                }
            };
            let nexts: Vec<(&String, &Rational)> = expr.terms().iter().filter(|(n, _)| index.contains_key(*n)).collect();
            if sense != Sense::Eq || nexts.len() != 1 {
                return Err(ModelError::Invalid(format!("cannot simulate non-functional item `{expr} ...`")));
            }
            let (xn, c) = nexts[0];
            // c*x' + rest + Σ terms = b  =>  x' = (b - rest - Σ)/c
            let inv = c.recip();
            let mut rest = expr.clone();
            rest.add_term(xn.clone(), -c);
            let lin: Vec<(String, f64)> = rest.terms().iter().map(|(n, a)| (n.clone(), -(a * &inv).to_f64())).collect();
            let konst = ((&bound - rest.constant_term()) * &inv).to_f64();
            let tcoef: Vec<(usize, f64)> = terms.iter().map(|(a, k)| (*k, -(a * &inv).to_f64())).collect();
            rules[index[xn]].push(UpdateRule { guard, lin, konst, terms: tcoef });
        }
        for (i, r) in rules.iter().enumerate() {
            if r.is_empty() {
                return Err(ModelError::Invalid(format!("no update for `{}`", self.states[i].var.name())));
            }
        }
        Ok(UpdateFn { model: self.clone(), rules })
    }
}

#[derive(Debug, Clone)]
struct UpdateRule {
    guard: Option<Guard>,
    lin: Vec<(String, f64)>,
    konst: f64,
    terms: Vec<(usize, f64)>,
}

/// Compiled explicit next-state map of a functional DTHS.
#[derive(Debug, Clone)]
pub struct UpdateFn {
    model: Dths,
    rules: Vec<Vec<UpdateRule>>,
}

impl UpdateFn {
    /// Next state given state and input values in declaration order.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut env: HashMap<String, f64> = HashMap::with_capacity(x.len() + u.len());
        for (s, v) in self.model.states.iter().zip(x) {
            env.insert(s.var.name().to_string(), *v);
        }
        for (i, v) in self.model.inputs.iter().zip(u) {
            env.insert(i.name().to_string(), *v);
        }
        let tv = self.model.term_values(&env).unwrap_or_default();
        self.rules
            .iter()
            .map(|rs| {
                let r = rs
                    .iter()
                    .find(|r| match &r.guard {
                        None => true,
                        Some(g) => (env.get(&g.var).copied().unwrap_or(0.0) != 0.0) == g.positive,
                    })
                    .expect("an update rule applies");
                let mut v = r.konst;
                for (n, a) in &r.lin {
                    v += a * env[n];
                }
                for (k, a) in &r.terms {
                    v += a * tv[*k];
                }
                v
            })
            .collect()
    }

    pub fn model(&self) -> &Dths {
        &self.model
    }
}

impl Dtlhs {
    pub fn state_names(&self) -> Vec<String> {
        self.states.iter().map(|s| s.var.name().to_string()).collect()
    }

    /// Builds the guarded predicate from parts, adding X' declarations.
    pub fn new(states: Vec<StateVar>, inputs: Vec<Var>, aux: Vec<Var>, items: Vec<GuardedConstraint>) -> Result<Self, ModelError> {
        let mut vars: Vec<Var> = states.iter().map(|s| s.var.clone()).collect();
        vars.extend(inputs.iter().cloned());
        vars.extend(aux.iter().cloned());
        vars.extend(next_vars(&states));
        let n = GuardedPredicate::new(vars, items)?;
        Ok(Dtlhs { states, inputs, aux, n })
    }

    /// Big-M conjunctive form of N, compiled for the MILP engine.
    pub fn compile(&self) -> Result<Compiled, ModelError> {
        let c = self.n.eliminate_guards()?;
        Ok(Compiled::new(&c)?)
    }

    /// `∃y: N(x,u,y,x')` decided by MILP; wrapped coordinates modulo period.
    pub fn lts_step(&self, x: &Valuation, u: &Valuation, xn: &Valuation) -> Result<bool, ModelError> {
        let c = self.compile()?;
        let mut b = c.bounds();
        let mut fix = |name: &str, v: &Rational| -> Result<bool, ModelError> {
            let j = c.index_of(name).ok_or_else(|| PredicateError::UnknownVar(name.to_string()))?;
            if *v < b.lo[j] || *v > b.hi[j] {
                return Ok(false);
            }
            b.lo[j] = v.clone();
            b.hi[j] = v.clone();
            Ok(true)
        };
        for s in &self.states {
            let n = s.var.name();
            if !fix(n, x.get(n).ok_or_else(|| PredicateError::MissingValuation(n.to_string()))?)? {
                return Ok(false);
            }
            if !fix(&next_name(n), xn.get(n).ok_or_else(|| PredicateError::MissingValuation(n.to_string()))?)? {
                return Ok(false);
            }
        }
        for i in &self.inputs {
            let n = i.name();
            if !fix(n, u.get(n).ok_or_else(|| PredicateError::MissingValuation(n.to_string()))?)? {
                return Ok(false);
            }
        }
        Ok(c.feasible(&b).is_some())
    }
}

/// Either kind of system.
#[derive(Debug, Clone, PartialEq)]
pub enum System {
    Dths(Dths),
    Dtlhs(Dtlhs),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub system: Dths,
    pub init: ConjunctivePredicate,
    pub goal: ConjunctivePredicate,
}

impl ControlProblem {
    pub fn new(system: Dths, init: Vec<Constraint>, goal: Vec<Constraint>) -> Result<Self, ModelError> {
        let xs: Vec<Var> = system.states.iter().map(|s| s.var.clone()).collect();
        let init = ConjunctivePredicate::new(xs.clone(), init)?;
        let goal = ConjunctivePredicate::new(xs, goal)?;
        Ok(ControlProblem { system, init, goal })
    }
}

/// Finite labelled transition system with states `0..n` and actions `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplicitLts {
    pub num_states: usize,
    pub num_actions: usize,
    pub transitions: BTreeSet<(usize, usize, usize)>,
}

impl ExplicitLts {
    pub fn new(num_states: usize, num_actions: usize, transitions: impl IntoIterator<Item = (usize, usize, usize)>) -> Self {
        ExplicitLts { num_states, num_actions, transitions: transitions.into_iter().collect() }
    }

    fn check(&self, s: usize) -> Result<(), ModelError> {
        if s >= self.num_states {
            Err(ModelError::UnknownState(s))
        } else {
            Ok(())
        }
    }

    pub fn adm(&self, s: usize) -> Result<BTreeSet<usize>, ModelError> {
        self.check(s)?;
        Ok(self.transitions.range((s, 0, 0)..(s + 1, 0, 0)).map(|t| t.1).collect())
    }

    pub fn img(&self, s: usize, a: usize) -> Result<BTreeSet<usize>, ModelError> {
        self.check(s)?;
        Ok(self.transitions.range((s, a, 0)..(s, a + 1, 0)).map(|t| t.2).collect())
    }

    /// Successor lists indexed `[s][a]`.
    pub fn successor_table(&self) -> Vec<Vec<Vec<usize>>> {
        let mut t = vec![vec![Vec::new(); self.num_actions]; self.num_states];
        for &(s, a, s2) in &self.transitions {
            t[s][a].push(s2);
        }
        t
    }

    /// `self ⊑ other`: every transition of self is one of other.
    pub fn refines(&self, other: &ExplicitLts) -> Result<bool, ModelError> {
        if self.num_states != other.num_states || self.num_actions != other.num_actions {
            return Err(ModelError::MismatchedAlphabets);
        }
        Ok(self.transitions.is_subset(&other.transitions))
    }
}

fn scope_with(params: &[(&str, Rational)]) -> syntax::Scope {
    let mut sc = syntax::Scope::default();
    for (k, v) in params {
        sc.params.insert(k.to_string(), v.clone());
    }
    sc
}

/// Parses `lhs op rhs` into a linear guarded constraint.
pub fn linear(s: &str, sc: &syntax::Scope) -> Result<GuardedConstraint, ModelError> {
    syntax::parse_constraint(s, sc)
        .and_then(|st| st.into_linear())
        .map_err(|e| ModelError::Invalid(e.to_string()))
}

/// Adds a model-file style relation (possibly with built-in calls) to a DTHS.
pub fn add_relation(h: &mut Dths, s: &str, sc: &syntax::Scope) -> Result<(), ModelError> {
    let sts = syntax::parse_relation(s, sc).map_err(|e| ModelError::Invalid(e.to_string()))?;
    for st in sts {
        let (calls, expr, bound) = st.split();
        if calls.is_empty() {
            h.items.push(DthsItem::Linear(GuardedConstraint { guard: st.guard, body: Constraint::new(expr, st.sense, bound) }));
            continue;
        }
        let mut terms = Vec::new();
        for (c, call) in calls {
            let k = intern_call(h, &call)?;
            terms.push((c, k));
        }
        h.items.push(DthsItem::Nonlinear { guard: st.guard, terms, expr, sense: st.sense, bound });
    }
    Ok(())
}

/// Index of the term for `call`, creating it (and an argument auxiliary when
/// the argument is not a plain variable).
fn intern_call(h: &mut Dths, call: &syntax::Call) -> Result<usize, ModelError> {
    let arg = if call.arg.terms().len() == 1 && call.arg.constant_term().is_zero() && call.arg.terms().values().next() == Some(&Rational::one()) {
        call.arg.vars().next().expect("one var").to_string()
    } else {
        let name = format!("arg{}", h.aux.len());
        let vars = h.all_vars();
        let (lo, hi) = crate::predicates::interval_bounds(&call.arg, &vars)?;
        h.aux.push(Var::continuous(name.clone(), lo, hi)?);
        let mut e = call.arg.clone();
        e.add_term(name.clone(), -Rational::one());
        let k = e.constant_term().clone();
        e.add_constant(&-&k);
        h.items.push(DthsItem::Linear(GuardedConstraint::plain(Constraint::eq(e, -k))));
        name
    };
    let t = NonlinearTerm::builtin(&call.func, &arg)?;
    if let Some(k) = h.terms.iter().position(|x| *x == t) {
        return Ok(k);
    }
    h.terms.push(t);
    Ok(h.terms.len() - 1)
}

/// Upper limit of the pendulum angle domain: 1.1 * 355/113 = 781/226.
pub fn pendulum_x1_limit() -> Rational {
    Rational::new(781, 226)
}

/// Inverted pendulum with g/l = 1 and 1/(m l^2) = 1:
/// `x1' = x1 + T x2`, `x2' = x2 + T sin x1 + T F u`, u in {-1,0,1}.
pub fn pendulum(f: Rational, t: Rational) -> Dths {
    let l1 = pendulum_x1_limit();
    let states = vec![
        StateVar { var: Var::continuous("x1", -&l1, l1).expect("bounds"), wrap: Some(syntax::pi() * Rational::from(2)) },
        StateVar { var: Var::continuous("x2", Rational::from(-4), Rational::from(4)).expect("bounds"), wrap: None },
    ];
    let mut h = Dths { states, inputs: vec![Var::discrete("u", -1, 1).expect("bounds")], aux: vec![], terms: vec![], items: vec![] };
    let sc = scope_with(&[("T", t), ("F", f)]);
    add_relation(&mut h, "x1' = x1 + T*x2", &sc).expect("pendulum x1");
    add_relation(&mut h, "x2' = x2 + T*sin(x1) + T*F*u", &sc).expect("pendulum x2");
    h
}

/// Pendulum control problem: I = [-pi,pi] x [-4,4], G = [-rho,rho]^2.
pub fn pendulum_problem(f: Rational, t: Rational, rho: Rational) -> ControlProblem {
    let sc = scope_with(&[("rho", rho)]);
    let c = |s: &str| linear(s, &sc).expect("literal").body;
    ControlProblem::new(
        pendulum(f, t),
        vec![c("x1 >= -pi"), c("x1 <= pi"), c("x2 >= -4"), c("x2 <= 4")],
        vec![c("x1 >= -rho"), c("x1 <= rho"), c("x2 >= -rho"), c("x2 <= rho")],
    )
    .expect("pendulum problem")
}

/// One-dimensional switched system: `!u -> x' = x + (5/4 - x)T`, `u -> x' = x + (x - 3/2)T`.
pub fn ex2(t: Rational) -> Dths {
    let states = vec![StateVar {
        var: Var::continuous("x", Rational::from(-2), Rational::new(5, 2)).expect("bounds"),
        wrap: None,
    }];
    let mut h = Dths { states, inputs: vec![Var::boolean("u")], aux: vec![], terms: vec![], items: vec![] };
    let sc = scope_with(&[("T", t)]);
    add_relation(&mut h, "!u -> x' = x + (5/4 - x)*T", &sc).expect("ex2");
    add_relation(&mut h, "u -> x' = x + (x - 3/2)*T", &sc).expect("ex2");
    h
}

/// Switched scalar problem: I = A = [-2, 2.5], G: x = 0.
pub fn ex2_problem(t: Rational) -> ControlProblem {
    let sc = syntax::Scope::default();
    let c = |s: &str| linear(s, &sc).expect("literal").body;
    ControlProblem::new(ex2(t), vec![c("x >= -2"), c("x <= 2.5")], vec![c("x = 0")]).expect("ex2 problem")
}

/// The linear part of a DTHS as a DTLHS (errors when nonlinear items exist).
pub fn as_dtlhs(h: &Dths) -> Result<Dtlhs, ModelError> {
    let mut items = Vec::new();
    for it in &h.items {
        match it {
            DthsItem::Linear(g) => items.push(g.clone()),
            DthsItem::Nonlinear { .. } => return Err(ModelError::Invalid("system has nonlinear items".into())),
        }
    }
    Dtlhs::new(h.states.clone(), h.inputs.clone(), h.aux.clone(), items)
}

/// Valuation from name/value pairs.
pub fn valuation(pairs: &[(&str, Rational)]) -> Valuation {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>()
}

impl fmt::Display for DthsItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DthsItem::Linear(g) => write!(f, "{g}"),
            DthsItem::Nonlinear { guard, terms, expr, sense, bound } => {
                if let Some(g) = guard {
                    write!(f, "{}{} -> ", if g.positive { "" } else { "!" }, g.var)?;
                }
                write!(f, "{:?} + {} {} {}", terms, expr, sense.symbol(), bound)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{q, qi};

    #[test]
    fn pendulum_step_at_top() {
        let h = pendulum(q(1, 2), q(1, 10));
        let pi = syntax::pi();
        let x = valuation(&[("x1", pi.clone()), ("x2", qi(0))]);
        let u = valuation(&[("u", qi(0))]);
        let s = Rational::from_f64((355.0f64 / 113.0).sin() * 0.1).unwrap();
        assert!(h.lts_step(&x, &u, &valuation(&[("x1", pi.clone()), ("x2", s)]), None).unwrap());
        assert!(!h.lts_step(&x, &u, &valuation(&[("x1", pi), ("x2", q(1, 10))]), None).unwrap());
    }

    #[test]
    fn pendulum_wraps_angle() {
        let h = pendulum(qi(2), q(1, 10));
        // x1 = 3.4, x2 = 4: raw x1' = 3.8 is outside A, wrapped x1' = 3.8 - 710/113.
        let x = valuation(&[("x1", q(34, 10)), ("x2", qi(4))]);
        let u = valuation(&[("u", qi(0))]);
        let f = (3.4f64).sin() * 0.1 + 4.0;
        let xn = valuation(&[("x1", q(38, 10) - q(710, 113)), ("x2", Rational::from_f64(f).unwrap())]);
        assert!(h.lts_step(&x, &u, &xn, None).unwrap());
    }

    #[test]
    fn ex2_fixpoint() {
        let h = ex2(q(1, 10));
        let d = as_dtlhs(&h).unwrap();
        let x = valuation(&[("x", q(5, 4))]);
        let u = valuation(&[("u", qi(0))]);
        assert!(h.lts_step(&x, &u, &x, None).unwrap());
        assert!(d.lts_step(&x, &u, &x).unwrap());
        // x' out of bounds
        assert!(!h.lts_step(&x, &u, &valuation(&[("x", qi(3))]), None).unwrap());
        assert!(!d.lts_step(&valuation(&[("x", q(5, 2))]), &valuation(&[("u", qi(1))]), &valuation(&[("x", qi(3))])).unwrap());
    }

    #[test]
    fn aux_requires_witness() {
        let mut h = ex2(q(1, 10));
        h.aux.push(Var::continuous("y", qi(0), qi(1)).unwrap());
        let x = valuation(&[("x", qi(0))]);
        let r = h.lts_step(&x, &valuation(&[("u", qi(0))]), &x, None);
        assert_eq!(r, Err(ModelError::UndecidableWithoutWitness));
    }

    #[test]
    fn adm_img() {
        let l = ExplicitLts::new(3, 2, [(0, 0, 1), (0, 0, 2)]);
        assert_eq!(l.adm(0).unwrap(), [0].into());
        assert_eq!(l.img(0, 0).unwrap(), [1, 2].into());
        assert!(l.adm(1).unwrap().is_empty());
        assert!(l.adm(5).is_err());
    }

    #[test]
    fn refinement() {
        let a = ExplicitLts::new(2, 1, [(0, 0, 1)]);
        let b = ExplicitLts::new(2, 1, [(0, 0, 1), (1, 0, 0)]);
        assert!(a.refines(&a).unwrap());
        assert!(a.refines(&b).unwrap());
        assert!(!b.refines(&a).unwrap());
        assert!(a.refines(&ExplicitLts::new(3, 1, [])).is_err());
    }

    #[test]
    fn update_fn_pendulum() {
        let h = pendulum(qi(2), q(1, 10));
        let up = h.update_fn().unwrap();
        let n = up.step(&[0.5, 1.0], &[1.0]);
        assert!((n[0] - 0.6).abs() < 1e-12);
        assert!((n[1] - (1.0 + 0.1 * 0.5f64.sin() + 0.2)).abs() < 1e-12);
    }
}
