#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use qsynth::linearize::{build_envelopes, linearize, EnvelopeConfig};
use qsynth::milp::{solve_with, BranchOrder, MilpProblem, Direction, Status};
use qsynth::model::{pendulum, pendulum_x1_limit, valuation, ExplicitLts};
use qsynth::predicates::{ConjunctivePredicate, Constraint, Guard, GuardedConstraint, GuardedPredicate, LinearExpr, Sense, Valuation, Var};
use qsynth::rational::Rational;
use qsynth::synth::{check_termination, closed_loop, j_strong_all, solve_strong, SuccessorTable};

pub fn qi(n: i64) -> Rational {
    Rational::from(n)
}

pub fn q(a: i64, b: i64) -> Rational {
    Rational::new(a, b)
}

/// Runs `check` on `cases` generated values with a fixed seed; returns the
/// first failure message and the elapsed seconds.
pub fn run_suite<S: Strategy>(cases: u32, strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> (Result<(), String>, f64)
where
    S::Value: std::fmt::Debug,
{
    let t0 = Instant::now();
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(cfg, proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha));
    let r = runner.run(&strategy, check).map_err(|e| e.to_string());
    (r, t0.elapsed().as_secs_f64())
}

// ---------- guarded predicates ----------

#[derive(Debug, Clone)]
pub struct GuardCase {
    pub pred: GuardedPredicate,
}

fn arb_sense() -> impl Strategy<Value = Sense> {
    prop_oneof![Just(Sense::Le), Just(Sense::Ge), Just(Sense::Eq)]
}

pub fn arb_guard_case() -> impl Strategy<Value = GuardCase> {
    let bounds = (-3i64..=2, 1i64..=4).prop_map(|(lo, w)| (lo, lo + w));
    let item = (
        prop_oneof![Just(None), Just(Some(("g", true))), Just(Some(("g", false))), Just(Some(("h", true))), Just(Some(("h", false)))],
        prop::collection::vec(-3i64..=3, 3),
        arb_sense(),
        -6i64..=6,
        1i64..=2,
    );
    (bounds.clone(), bounds, prop::collection::vec(item, 1..=4)).prop_map(|((xl, xh), (yl, yh), items)| {
        let vars = vec![
            Var::continuous("x", qi(xl), qi(xh)).unwrap(),
            Var::continuous("y", qi(yl), qi(yh)).unwrap(),
            Var::discrete("n", -2, 2).unwrap(),
            Var::boolean("g"),
            Var::boolean("h"),
        ];
        let items = items
            .into_iter()
            .map(|(g, c, sense, b, d)| {
                let e = LinearExpr::from_terms([("x", qi(c[0])), ("y", qi(c[1])), ("n", qi(c[2]))], Rational::zero());
                let body = Constraint::new(e, sense, q(b, d));
                GuardedConstraint { guard: g.map(|(v, p)| Guard { var: v.to_string(), positive: p }), body }
            })
            .collect();
        GuardCase { pred: GuardedPredicate::new(vars, items).unwrap() }
    })
}

fn half_grid(v: &Var) -> Vec<Rational> {
    let (lo, hi) = (v.lower().clone(), v.upper().clone());
    let mut out = Vec::new();
    let mut x = lo;
    while x <= hi {
        out.push(x.clone());
        x = &x + &q(1, 2);
    }
    out
}

pub fn check_guard_case(c: GuardCase) -> Result<(), TestCaseError> {
    let elim = c.pred.eliminate_guards().map_err(|e| TestCaseError::fail(e.to_string()))?;
    let p = &c.pred;
    let xs = half_grid(p.var("x").unwrap());
    let ys = half_grid(p.var("y").unwrap());
    for x in &xs {
        for y in &ys {
            for n in -2..=2 {
                for g in 0..=1 {
                    for h in 0..=1 {
                        let v = valuation(&[("x", x.clone()), ("y", y.clone()), ("n", qi(n)), ("g", qi(g)), ("h", qi(h))]);
                        let a = p.evaluate(&v).unwrap();
                        let b = elim.evaluate(&v).unwrap();
                        prop_assert_eq!(a, b, "at {:?}", v);
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------- MILP vs grid ----------

#[derive(Debug, Clone)]
pub struct MilpCase {
    pub nc: usize,
    pub nb: usize,
    /// Rows over [x0..x_{nc-1}, b0..b_{nb-1}]: coefficients, sense, bound numerator over 4.
    pub rows: Vec<(Vec<i64>, Sense, i64)>,
    pub obj: Vec<i64>,
}

pub fn arb_milp_case() -> impl Strategy<Value = MilpCase> {
    (1usize..=3, 0usize..=3).prop_flat_map(|(nc, nb)| {
        let n = nc + nb;
        let row = (prop::collection::vec(-3i64..=3, n), arb_sense(), -8i64..=8);
        (Just(nc), Just(nb), prop::collection::vec(row, 1..=4), prop::collection::vec(-3i64..=3, n))
            .prop_map(|(nc, nb, rows, obj)| MilpCase { nc, nb, rows, obj })
    })
}

fn milp_names(c: &MilpCase) -> Vec<String> {
    (0..c.nc).map(|i| format!("x{i}")).chain((0..c.nb).map(|i| format!("b{i}"))).collect()
}

pub fn milp_problem(c: &MilpCase) -> MilpProblem {
    let names = milp_names(c);
    let mut vars: Vec<Var> = (0..c.nc).map(|i| Var::continuous(format!("x{i}"), qi(-1), qi(1)).unwrap()).collect();
    vars.extend((0..c.nb).map(|i| Var::boolean(format!("b{i}"))));
    let expr = |coefs: &[i64]| LinearExpr::from_terms(names.iter().cloned().zip(coefs.iter().map(|&k| qi(k))), Rational::zero());
    let items = c.rows.iter().map(|(co, s, b)| Constraint::new(expr(co), *s, q(*b, 4))).collect();
    MilpProblem { predicate: ConjunctivePredicate::new(vars, items).unwrap(), objective: expr(&c.obj), direction: Direction::Minimize }
}

/// Exhaustive search on the 1/8 grid, in integers scaled by 8.
fn grid_best(c: &MilpCase) -> Option<i64> {
    let n = c.nc + c.nb;
    let mut best: Option<i64> = None;
    let mut idx = vec![0i64; n];
    let ranges: Vec<(i64, i64)> = (0..n).map(|i| if i < c.nc { (-8, 8) } else { (0, 1) }).collect();
    for (i, r) in ranges.iter().enumerate() {
        idx[i] = r.0;
    }
    loop {
        let val: Vec<i64> = (0..n).map(|i| if i < c.nc { idx[i] } else { 8 * idx[i] }).collect();
        let ok = c.rows.iter().all(|(co, s, b)| {
            let lhs: i64 = co.iter().zip(&val).map(|(a, v)| a * v).sum();
            let rhs = 2 * b;
            match s {
                Sense::Le => lhs <= rhs,
                Sense::Ge => lhs >= rhs,
                Sense::Eq => lhs == rhs,
            }
        });
        if ok {
            let o: i64 = c.obj.iter().zip(&val).map(|(a, v)| a * v).sum();
            best = Some(best.map_or(o, |b| b.min(o)));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            if idx[i] < ranges[i].1 {
                idx[i] += 1;
                break;
            }
            idx[i] = ranges[i].0;
            i += 1;
        }
    }
}

pub fn check_milp_case(c: MilpCase) -> Result<(), TestCaseError> {
    let p = milp_problem(&c);
    let r1 = solve_with(&p, BranchOrder::First).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let r2 = solve_with(&p, BranchOrder::Last).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(r1.status, r2.status);
    prop_assert_eq!(&r1.value, &r2.value);
    let grid = grid_best(&c);
    if let Some(g) = grid {
        prop_assert_eq!(r1.status, Status::Optimal, "grid witness exists");
        let v = r1.value.clone().unwrap();
        prop_assert!(v <= q(g, 8), "solver {} above grid {}", v, q(g, 8));
    }
    for r in [&r1, &r2] {
        if r.status == Status::Optimal {
            let w = r.witness.as_ref().unwrap();
            for item in &p.predicate.items {
                prop_assert!(item.holds(w).unwrap(), "witness violates {:?}", item);
            }
            for v in &p.predicate.vars {
                let x = &w[v.name()];
                prop_assert!(v.contains(x));
            }
            prop_assert_eq!(p.objective.eval(w).unwrap(), r.value.clone().unwrap());
        }
    }
    Ok(())
}

// ---------- explicit LTSs ----------

#[derive(Debug, Clone)]
pub struct LtsCase {
    pub lts: ExplicitLts,
    pub goal: Vec<bool>,
}

pub fn arb_lts(max_states: usize, max_actions: usize) -> impl Strategy<Value = LtsCase> {
    (1usize..=max_states, 1usize..=max_actions).prop_flat_map(|(n, na)| {
        let pair = (prop::bool::weighted(0.6), prop::collection::vec(0..n, 1..=3));
        (Just(n), Just(na), prop::collection::vec(pair, n * na), prop::collection::vec(prop::bool::weighted(0.15), n)).prop_map(|(n, na, pairs, goal)| {
            let mut tr = Vec::new();
            for (i, (adm, succ)) in pairs.into_iter().enumerate() {
                if adm {
                    tr.extend(succ.into_iter().map(|s2| (i / na, i % na, s2)));
                }
            }
            LtsCase { lts: ExplicitLts::new(n, na, tr), goal }
        })
    })
}

pub fn check_mgo(c: LtsCase) -> Result<(), TestCaseError> {
    let t = SuccessorTable::from_lts(&c.lts);
    let n = c.lts.num_states;
    let init = vec![true; n];
    let (k, _) = solve_strong(&t, &c.goal, &init);
    prop_assert!(check_termination(&t, &k, &c.goal));
    let j = j_strong_all(&closed_loop(&t, &k), &c.goal);
    let w = |s: usize| -> Option<u32> {
        if c.goal[s] {
            Some(0)
        } else if k.in_dom(s) {
            Some(k.layer[s])
        } else {
            None
        }
    };
    for s in 0..n {
        let expect = k.in_dom(s).then(|| k.layer[s]);
        prop_assert_eq!(j[s], expect, "state {}", s);
        let mut best: Option<u32> = None;
        for a in 0..t.num_actions {
            let Some(succ) = t.get(s, a) else {
                prop_assert!(k.enabled[s] >> a & 1 == 0, "inadmissible action enabled");
                continue;
            };
            let worst = succ.iter().map(|&s2| w(s2)).try_fold(0u32, |m, v| v.map(|v| m.max(v)));
            if let Some(v) = worst {
                best = Some(best.map_or(v + 1, |b| b.min(v + 1)));
            }
            let enabled = k.enabled[s] >> a & 1 == 1;
            if k.in_dom(s) {
                prop_assert_eq!(enabled, worst.is_some_and(|v| v < k.layer[s]), "state {} action {}", s, a);
            } else {
                prop_assert!(worst.is_none(), "state {} left out although action {} bounds it", s, a);
            }
        }
        if k.in_dom(s) {
            prop_assert_eq!(best, Some(k.layer[s]));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PairCase {
    pub small: ExplicitLts,
    pub big: ExplicitLts,
    pub goal: Vec<bool>,
}

/// `big` adds transitions only to admissible pairs of `small`.
pub fn arb_lts_pair(max_states: usize) -> impl Strategy<Value = PairCase> {
    arb_lts(max_states, 3).prop_flat_map(|c| {
        let n = c.lts.num_states;
        let adm: Vec<(usize, usize)> = c.lts.transitions.iter().map(|&(s, a, _)| (s, a)).collect::<BTreeSet<_>>().into_iter().collect();
        let extra = prop::collection::vec((0..adm.len().max(1), 0..n), 0..=2 * n);
        (Just(c), Just(adm), extra).prop_map(|(c, adm, extra)| {
            let mut tr: Vec<_> = c.lts.transitions.iter().copied().collect();
            if !adm.is_empty() {
                tr.extend(extra.into_iter().map(|(i, s2)| (adm[i].0, adm[i].1, s2)));
            }
            let big = ExplicitLts::new(c.lts.num_states, c.lts.num_actions, tr);
            PairCase { small: c.lts, big, goal: c.goal }
        })
    })
}

pub fn check_refinement_preservation(c: PairCase) -> Result<(), TestCaseError> {
    prop_assert!(c.small.refines(&c.big).unwrap());
    let n = c.small.num_states;
    for s in 0..n {
        prop_assert_eq!(c.small.adm(s).unwrap(), c.big.adm(s).unwrap());
    }
    let tb = SuccessorTable::from_lts(&c.big);
    let ts = SuccessorTable::from_lts(&c.small);
    let (k, _) = solve_strong(&tb, &c.goal, &vec![true; n]);
    prop_assert!(check_termination(&ts, &k, &c.goal));
    let j = j_strong_all(&closed_loop(&ts, &k), &c.goal);
    for s in 0..n {
        if k.in_dom(s) {
            prop_assert!(j[s].is_some_and(|v| v <= k.layer[s]));
        }
    }
    Ok(())
}

// ---------- pendulum linearization grid ----------

/// Grid-sampled concrete pendulum transitions inside A; returns (accepted,
/// total) for the linearization with the default envelope.
pub fn pendulum_grid(f: Rational, n1: usize, n2: usize) -> (usize, usize) {
    let t = q(1, 10);
    let h = pendulum(f, t.clone());
    let envs = build_envelopes(&h, &EnvelopeConfig::new()).unwrap();
    let lin = linearize(&h, &envs).unwrap();
    let up = h.update_fn().unwrap();
    let l = pendulum_x1_limit();
    let lf = l.to_f64();
    let period = q(710, 113);
    let (mut ok, mut total) = (0, 0);
    for i in 0..n1 {
        let x1 = &-&l + &(&(&l * &qi(2)) * &q(i as i64, n1 as i64 - 1));
        for j in 0..n2 {
            let x2 = &qi(-4) + &(&qi(8) * &q(j as i64, n2 as i64 - 1));
            for u in -1..=1 {
                let n = up.step(&[x1.to_f64(), x2.to_f64()], &[u as f64]);
                let mut n1v = &x1 + &(&t * &x2);
                if n1v > l {
                    n1v = &n1v - &period;
                } else if n1v < -&l {
                    n1v = &n1v + &period;
                }
                if !(-4.0..=4.0).contains(&n[1]) || n1v.to_f64().abs() > lf {
                    continue;
                }
                total += 1;
                let x = valuation(&[("x1", x1.clone()), ("x2", x2.clone())]);
                let uu = valuation(&[("u", qi(u))]);
                let xn = valuation(&[("x1", n1v), ("x2", Rational::from_f64(n[1]).unwrap())]);
                if lin.system.lts_step(&x, &uu, &xn).unwrap() {
                    ok += 1;
                }
            }
        }
    }
    (ok, total)
}

pub fn val(pairs: &[(&str, Rational)]) -> Valuation {
    valuation(pairs)
}
