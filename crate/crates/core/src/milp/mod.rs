//! Exact mixed-integer linear programming on bounded problems.
//!
//! Problems are compiled to an indexed form once; callers on the hot path
//! (the abstraction pass) then override variable bounds and solve.

pub mod lp;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::predicates::{ConjunctivePredicate, LinearExpr, PredicateError, Sense, Valuation, VarKind};
use crate::rational::Rational;
use lp::{activity_range, solve_lp, LpOutcome, LpRow};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MilpError {
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
    Feasibility,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MilpProblem {
    pub predicate: ConjunctivePredicate,
    pub objective: LinearExpr,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MilpResult {
    pub status: Status,
    pub value: Option<Rational>,
    pub witness: Option<Valuation>,
}

/// Which fractional integer variable to branch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BranchOrder {
    #[default]
    First,
    Last,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coefs: Vec<(usize, Rational)>,
    pub lo: Option<Rational>,
    pub hi: Option<Rational>,
}

/// Indexed problem: variables, bounds, two-sided rows.
#[derive(Debug, Clone)]
pub struct Compiled {
    pub names: Vec<String>,
    pub kinds: Vec<VarKind>,
    pub lo: Vec<Rational>,
    pub hi: Vec<Rational>,
    pub rows: Vec<Row>,
    index: HashMap<String, usize>,
}

/// Bounds of one search node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bounds {
    pub lo: Vec<Rational>,
    pub hi: Vec<Rational>,
}

const ROUND_DEN: i64 = 1 << 24;

fn round_down(r: &Rational) -> Rational {
    if r.is_small() && r.denom() <= num_bigint::BigInt::from(ROUND_DEN) {
        return r.clone();
    }
    let d = Rational::from(ROUND_DEN);
    (r * &d).floor() / d
}

fn round_up(r: &Rational) -> Rational {
    if r.is_small() && r.denom() <= num_bigint::BigInt::from(ROUND_DEN) {
        return r.clone();
    }
    let d = Rational::from(ROUND_DEN);
    (r * &d).ceil() / d
}

impl Compiled {
    pub fn new(p: &ConjunctivePredicate) -> Result<Self, MilpError> {
        let mut c = Compiled {
            names: Vec::new(),
            kinds: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        };
        for v in &p.vars {
            if c.index.insert(v.name().to_string(), c.names.len()).is_some() {
                return Err(MilpError::Malformed(format!("duplicate variable `{}`", v.name())));
            }
            c.names.push(v.name().to_string());
            c.kinds.push(v.kind());
            c.lo.push(v.lower().clone());
            c.hi.push(v.upper().clone());
        }
        for con in &p.items {
            let n = con.normalized();
            let mut coefs = Vec::with_capacity(n.expr.terms().len());
            for (name, a) in n.expr.terms() {
                let j = *c.index.get(name).ok_or_else(|| MilpError::Predicate(PredicateError::UnknownVar(name.clone())))?;
                coefs.push((j, a.clone()));
            }
            let (lo, hi) = match n.sense {
                Sense::Le => (None, Some(n.bound)),
                Sense::Ge => (Some(n.bound), None),
                Sense::Eq => (Some(n.bound.clone()), Some(n.bound)),
            };
            c.rows.push(Row { coefs, lo, hi });
        }
        Ok(c)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds { lo: self.lo.clone(), hi: self.hi.clone() }
    }

    /// Linear expression as a dense cost vector.
    pub fn dense(&self, e: &LinearExpr) -> Result<Vec<Rational>, MilpError> {
        let mut c = vec![Rational::zero(); self.names.len()];
        for (n, a) in e.terms() {
            let j = self.index_of(n).ok_or_else(|| MilpError::Predicate(PredicateError::UnknownVar(n.clone())))?;
            c[j] = a.clone();
        }
        Ok(c)
    }

    /// Interval bound propagation; false when the box is proven empty.
    pub fn propagate(&self, b: &mut Bounds) -> bool {
        for j in 0..b.lo.len() {
            if self.kinds[j].is_integral() {
                b.lo[j] = b.lo[j].ceil();
                b.hi[j] = b.hi[j].floor();
            }
            if b.lo[j] > b.hi[j] {
                return false;
            }
        }
        for _pass in 0..8 {
            let mut changed = false;
            for row in &self.rows {
                let (amin, amax) = activity_range(&row.coefs, &b.lo, &b.hi);
                if let Some(h) = &row.hi {
                    if amin > *h {
                        return false;
                    }
                }
                if let Some(l) = &row.lo {
                    if amax < *l {
                        return false;
                    }
                }
                let slack_hi = row.hi.as_ref().map(|h| h - &amin);
                let slack_lo = row.lo.as_ref().map(|l| &amax - l);
                // Skip rows that cannot tighten anything.
                let span_ok = |s: &Option<Rational>| s.as_ref().is_none_or(|s| *s >= &amax - &amin);
                if span_ok(&slack_hi) && span_ok(&slack_lo) {
                    continue;
                }
                for (j, a) in &row.coefs {
                    let j = *j;
                    let integral = self.kinds[j].is_integral();
                    let (mut nlo, mut nhi): (Option<Rational>, Option<Rational>) = (None, None);
                    if let Some(s) = &slack_hi {
                        // a*x_j <= a*x_j(min part) + s
                        if a.is_positive() {
                            nhi = Some(&b.lo[j] + &(s / a));
                        } else {
                            nlo = Some(&b.hi[j] + &(s / a));
                        }
                    }
                    if let Some(s) = &slack_lo {
                        if a.is_positive() {
                            let v = &b.hi[j] - &(s / a);
                            nlo = Some(match nlo {
                                Some(o) => Rational::max_of(&o, &v),
                                None => v,
                            });
                        } else {
                            let v = &b.lo[j] - &(s / a);
                            nhi = Some(match nhi {
                                Some(o) => Rational::min_of(&o, &v),
                                None => v,
                            });
                        }
                    }
                    // Continuous bounds must shrink by a noticeable step.
                    let step = if integral { Rational::zero() } else { (&b.hi[j] - &b.lo[j]) / Rational::from(100) };
                    if let Some(v) = nlo {
                        let v = if integral { v.ceil() } else { round_down(&v) };
                        if v > &b.lo[j] + &step {
                            b.lo[j] = v;
                            changed = true;
                        }
                    }
                    if let Some(v) = nhi {
                        let v = if integral { v.floor() } else { round_up(&v) };
                        if v < &b.hi[j] - &step {
                            b.hi[j] = v;
                            changed = true;
                        }
                    }
                    if b.lo[j] > b.hi[j] {
                        return false;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        true
    }

    /// LP relaxation over the free variables of `b`. Returns per-objective
    /// (value, full point), or None when infeasible.
    fn relax(&self, b: &Bounds, objectives: &[&[Rational]]) -> Option<Vec<(Rational, Vec<Rational>)>> {
        let n = b.lo.len();
        let mut free = Vec::new();
        let mut pos = vec![usize::MAX; n];
        for j in 0..n {
            if b.lo[j] != b.hi[j] {
                pos[j] = free.len();
                free.push(j);
            }
        }
        let flo: Vec<Rational> = free.iter().map(|&j| b.lo[j].clone()).collect();
        let fhi: Vec<Rational> = free.iter().map(|&j| b.hi[j].clone()).collect();
        let mut rows = Vec::new();
        for row in &self.rows {
            let mut konst = Rational::zero();
            let mut coefs = Vec::new();
            for (j, a) in &row.coefs {
                if pos[*j] == usize::MAX {
                    if !b.lo[*j].is_zero() {
                        konst += a * &b.lo[*j];
                    }
                } else {
                    coefs.push((pos[*j], a.clone()));
                }
            }
            let (amin, amax) = activity_range(&coefs, &flo, &fhi);
            let lo = row.lo.as_ref().map(|l| l - &konst);
            let hi = row.hi.as_ref().map(|h| h - &konst);
            if lo.as_ref().is_some_and(|l| amax < *l) || hi.as_ref().is_some_and(|h| amin > *h) {
                return None;
            }
            let lo_red = lo.as_ref().is_none_or(|l| amin >= *l);
            let hi_red = hi.as_ref().is_none_or(|h| amax <= *h);
            if lo_red && hi_red {
                continue;
            }
            let lo = match lo {
                Some(l) if l > amin => l,
                _ => amin,
            };
            let hi = match hi {
                Some(h) if h < amax => h,
                _ => amax,
            };
            rows.push(LpRow { coefs, lo, hi });
        }
        let base = |obj: &[Rational]| -> Rational {
            let mut v = Rational::zero();
            for j in 0..n {
                if pos[j] == usize::MAX && !obj[j].is_zero() {
                    v += &obj[j] * &b.lo[j];
                }
            }
            v
        };
        let expand = |xf: &[Rational]| -> Vec<Rational> {
            (0..n).map(|j| if pos[j] == usize::MAX { b.lo[j].clone() } else { xf[pos[j]].clone() }).collect()
        };
        if free.is_empty() {
            let x = b.lo.clone();
            if objectives.is_empty() {
                return Some(vec![(Rational::zero(), x)]);
            }
            return Some(objectives.iter().map(|o| (base(o), x.clone())).collect());
        }
        let objs: Vec<Vec<Rational>> = objectives.iter().map(|o| free.iter().map(|&j| o[j].clone()).collect()).collect();
        match solve_lp(&rows, &flo, &fhi, &objs) {
            LpOutcome::Infeasible => None,
            LpOutcome::Optimal(res) => {
                if objectives.is_empty() {
                    return Some(res.into_iter().map(|(v, x)| (v, expand(&x))).collect());
                }
                Some(
                    res.into_iter()
                        .zip(objectives)
                        .map(|((v, x), o)| (&v + &base(o), expand(&x)))
                        .collect(),
                )
            }
        }
    }

    fn fractional(&self, x: &[Rational], order: BranchOrder) -> Option<usize> {
        let is_frac = |j: &usize| self.kinds[*j].is_integral() && !x[*j].is_integer();
        match order {
            BranchOrder::First => (0..x.len()).find(is_frac),
            BranchOrder::Last => (0..x.len()).rev().find(is_frac),
        }
    }

    /// Minimizes `obj` (None: feasibility) by best-first branch-and-bound.
    pub fn minimize(&self, b: &Bounds, obj: Option<&[Rational]>, order: BranchOrder) -> Option<(Rational, Vec<Rational>)> {
        struct Node {
            bound: Rational,
            seq: usize,
            b: Bounds,
        }
        impl PartialEq for Node {
            fn eq(&self, o: &Self) -> bool {
                self.cmp(o) == Ordering::Equal
            }
        }
        impl Eq for Node {}
        impl PartialOrd for Node {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Node {
            // Max-heap: smaller bound first, then most recent.
            fn cmp(&self, o: &Self) -> Ordering {
                o.bound.cmp(&self.bound).then(self.seq.cmp(&o.seq))
            }
        }
        let objs: Vec<&[Rational]> = obj.into_iter().collect();
        let mut heap = BinaryHeap::new();
        let mut root = b.clone();
        if !self.propagate(&mut root) {
            return None;
        }
        if let Some(cases) = self.integral_cases(&root, 16) {
            let mut best: Option<(Rational, Vec<Rational>)> = None;
            for case in cases {
                let Some(mut r) = self.relax(&case, &objs) else { continue };
                let r = r.pop().expect("one result");
                if obj.is_none() {
                    return Some(r);
                }
                if best.as_ref().is_none_or(|b| r.0 < b.0) {
                    best = Some(r);
                }
            }
            return best;
        }
        heap.push(Node { bound: Rational::zero(), seq: 0, b: root });
        let mut seq = 1;
        let mut best: Option<(Rational, Vec<Rational>)> = None;
        while let Some(node) = heap.pop() {
            if let Some((bv, _)) = &best {
                if node.bound >= *bv && seq > 1 {
                    continue;
                }
            }
            let Some(mut res) = self.relax(&node.b, &objs) else { continue };
            let (v, x) = res.pop().expect("one result");
            if let Some((bv, _)) = &best {
                if v >= *bv {
                    continue;
                }
            }
            match self.fractional(&x, order) {
                None => {
                    if obj.is_none() {
                        return Some((v, x));
                    }
                    best = Some((v, x));
                }
                Some(j) => {
                    let mut down = node.b.clone();
                    down.hi[j] = x[j].floor();
                    let mut up = node.b;
                    up.lo[j] = x[j].ceil();
                    for child in [up, down] {
                        let mut child = child;
                        if self.propagate(&mut child) {
                            heap.push(Node { bound: v.clone(), seq, b: child });
                            seq += 1;
                        }
                    }
                }
            }
        }
        best
    }

    /// Feasibility with a witness point.
    pub fn feasible(&self, b: &Bounds) -> Option<Vec<Rational>> {
        self.minimize(b, None, BranchOrder::First).map(|(_, x)| x)
    }

    /// Exact (min, max) of each target over the feasible set; None if empty.
    pub fn optimize_box(&self, b: &Bounds, targets: &[usize]) -> Option<Vec<(Rational, Rational)>> {
        self.optimize_box_points(b, targets).map(|(r, _)| r)
    }

    /// Splits `b` on every unfixed integral variable, propagating each case.
    /// None when more than `limit` cases would be produced.
    fn integral_cases(&self, b: &Bounds, limit: usize) -> Option<Vec<Bounds>> {
        let mut cases = vec![b.clone()];
        for j in 0..b.lo.len() {
            if !self.kinds[j].is_integral() {
                continue;
            }
            let mut next = Vec::new();
            for c in cases {
                if c.lo[j] == c.hi[j] {
                    next.push(c);
                    continue;
                }
                let (lo, hi) = (c.lo[j].to_i64()?, c.hi[j].to_i64()?);
                if next.len() as i64 + hi - lo + 1 > limit as i64 {
                    return None;
                }
                for v in lo..=hi {
                    let mut d = c.clone();
                    d.lo[j] = Rational::from(v);
                    d.hi[j] = Rational::from(v);
                    if self.propagate(&mut d) {
                        next.push(d);
                    }
                }
            }
            cases = next;
        }
        Some(cases)
    }

    /// As `optimize_box`, also returning the optimal points (two per target).
    pub fn optimize_box_points(&self, b: &Bounds, targets: &[usize]) -> Option<(Vec<(Rational, Rational)>, Vec<Vec<Rational>>)> {
        let mut root = b.clone();
        if !self.propagate(&mut root) {
            return None;
        }
        let n = self.num_vars();
        let mut objs: Vec<Vec<Rational>> = Vec::with_capacity(2 * targets.len());
        for &t in targets {
            let mut c = vec![Rational::zero(); n];
            c[t] = Rational::one();
            objs.push(c.clone());
            c[t] = -Rational::one();
            objs.push(c);
        }
        let refs: Vec<&[Rational]> = objs.iter().map(|o| o.as_slice()).collect();
        let res = match self.integral_cases(&root, 16) {
            Some(cases) => {
                let mut best: Option<Vec<(Rational, Vec<Rational>)>> = None;
                for case in cases {
                    let Some(r) = self.relax(&case, &refs) else { continue };
                    best = Some(match best {
                        None => r,
                        Some(b) => b.into_iter().zip(r).map(|(x, y)| if y.0 < x.0 { y } else { x }).collect(),
                    });
                }
                best?
            }
            None => {
                let mut res = Vec::with_capacity(objs.len());
                for o in &objs {
                    res.push(self.minimize(&root, Some(o), BranchOrder::First)?);
                }
                res
            }
        };
        let ranges = res.chunks(2).map(|p| (p[0].0.clone(), -&p[1].0)).collect();
        Some((ranges, res.into_iter().map(|(_, x)| x).collect()))
    }

    pub fn valuation(&self, x: &[Rational]) -> Valuation {
        self.names.iter().cloned().zip(x.iter().cloned()).collect()
    }
}

pub fn solve(p: &MilpProblem) -> Result<MilpResult, MilpError> {
    solve_with(p, BranchOrder::First)
}

pub fn solve_with(p: &MilpProblem, order: BranchOrder) -> Result<MilpResult, MilpError> {
    let c = Compiled::new(&p.predicate)?;
    let dense = c.dense(&p.objective)?;
    let k = p.objective.constant_term().clone();
    let obj = match p.direction {
        Direction::Minimize => Some(dense),
        Direction::Maximize => Some(dense.iter().map(|a| -a).collect()),
        Direction::Feasibility => None,
    };
    let res = c.minimize(&c.bounds(), obj.as_deref(), order);
    Ok(match res {
        None => MilpResult { status: Status::Infeasible, value: None, witness: None },
        Some((v, x)) => {
            let value = match p.direction {
                Direction::Minimize => Some(&v + &k),
                Direction::Maximize => Some(&k - &v),
                Direction::Feasibility => None,
            };
            MilpResult { status: Status::Optimal, value, witness: Some(c.valuation(&x)) }
        }
    })
}

/// Per-target exact (min, max) over the predicate; None when infeasible.
pub fn optimize_box(p: &ConjunctivePredicate, targets: &[&str]) -> Result<Option<Vec<(String, Rational, Rational)>>, MilpError> {
    let c = Compiled::new(p)?;
    let idx = targets
        .iter()
        .map(|t| c.index_of(t).ok_or_else(|| MilpError::Predicate(PredicateError::UnknownVar(t.to_string()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(c.optimize_box(&c.bounds(), &idx)
        .map(|v| v.into_iter().zip(targets).map(|((lo, hi), t)| (t.to_string(), lo, hi)).collect()))
}
