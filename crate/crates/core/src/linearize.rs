//! Piecewise-linear envelopes and the linear overapproximation of a DTHS.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::model::{next_name, Dths, DthsItem, Dtlhs, ModelError, NonlinearTerm};
use crate::predicates::{interval_bounds, Constraint, GuardedConstraint, LinearExpr, PredicateError, Var};
use crate::rational::Rational;
use crate::syntax::pi;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinearizeError {
    #[error("no envelope for term `{0}`")]
    MissingEnvelope(String),
    #[error("envelope for `{term}` is unsound near {at:?}: {msg}")]
    Unsound { term: String, at: Vec<f64>, msg: String },
    #[error("envelope for `{0}` does not cover the argument domain")]
    NotCovering(String),
    #[error("term `{0}` needs a gradient and a Hessian range for a Taylor envelope")]
    MissingHessian(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
}

/// `Σ coefs[j]·r_j + constant` over the real arguments of a term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AffineFn {
    pub coefs: Vec<Rational>,
    pub constant: Rational,
}

impl AffineFn {
    pub fn eval_f64(&self, r: &[f64]) -> f64 {
        self.constant.to_f64() + self.coefs.iter().zip(r).map(|(a, x)| a.to_f64() * x).sum::<f64>()
    }

    fn shifted(&self, d: &Rational) -> AffineFn {
        AffineFn { coefs: self.coefs.clone(), constant: &self.constant + d }
    }

    /// Over argument names.
    pub fn to_expr(&self, args: &[String]) -> LinearExpr {
        LinearExpr::from_terms(args.iter().cloned().zip(self.coefs.iter().cloned()), self.constant.clone())
    }

    /// Exact range over a box.
    pub fn range(&self, lo: &[Rational], hi: &[Rational]) -> (Rational, Rational) {
        let mut a = self.constant.clone();
        let mut b = self.constant.clone();
        for (j, c) in self.coefs.iter().enumerate() {
            if c.is_positive() {
                a += c * &lo[j];
                b += c * &hi[j];
            } else {
                a += c * &hi[j];
                b += c * &lo[j];
            }
        }
        (a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeCell {
    pub lo: Vec<Rational>,
    pub hi: Vec<Rational>,
    pub lower: AffineFn,
    pub upper: AffineFn,
}

/// Periodic term: `f(r) ≈ f(r - k·period)` up to `drift·|k|`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Periodic {
    pub period: Rational,
    pub drift: Rational,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwlEnvelope {
    pub term: String,
    pub discrete_case: Vec<i64>,
    pub cells: Vec<EnvelopeCell>,
    pub periodic: Option<Periodic>,
    /// Safety margin already folded into every bound.
    pub margin: f64,
}

pub const SAMPLE_MARGIN: f64 = 1e-9;
pub const DEFAULT_DENSITY: usize = 1000;

impl PwlEnvelope {
    pub fn domain(&self) -> (Vec<Rational>, Vec<Rational>) {
        let d = self.cells[0].lo.len();
        let lo = (0..d).map(|j| self.cells.iter().map(|c| c.lo[j].clone()).min().expect("cells")).collect();
        let hi = (0..d).map(|j| self.cells.iter().map(|c| c.hi[j].clone()).max().expect("cells")).collect();
        (lo, hi)
    }

    /// Max of f⁺ - f⁻ over cell vertices (affine difference peaks at a vertex).
    pub fn max_gap(&self) -> f64 {
        let mut g: f64 = 0.0;
        for c in &self.cells {
            let diff = AffineFn {
                coefs: c.upper.coefs.iter().zip(&c.lower.coefs).map(|(a, b)| a - b).collect(),
                constant: &c.upper.constant - &c.lower.constant,
            };
            g = g.max(diff.range(&c.lo, &c.hi).1.to_f64());
        }
        g
    }

    /// CSV rows `cell,lo,hi,lower_coef,lower_const,upper_coef,upper_const` (1-D).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,lo,hi,lower_slope,lower_const,upper_slope,upper_const\n");
        for (i, c) in self.cells.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i,
                c.lo[0].to_f64(),
                c.hi[0].to_f64(),
                c.lower.coefs[0].to_f64(),
                c.lower.constant.to_f64(),
                c.upper.coefs[0].to_f64(),
                c.upper.constant.to_f64()
            );
        }
        s
    }
}

fn grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..=n).map(move |i| if i == n { hi } else { lo + (hi - lo) * i as f64 / n as f64 })
}

/// Dense-sampling soundness: f⁻ ≤ f ≤ f⁺ at `density` points per dimension
/// of every cell (total capped at ~10^6 per cell), and cells cover the domain.
pub fn check_soundness(term: &NonlinearTerm, env: &PwlEnvelope, density: usize) -> Result<(), LinearizeError> {
    let d = term.real_args.len();
    let per_dim = if d <= 1 { density } else { ((1e6f64).powf(1.0 / d as f64) as usize).clamp(2, density) };
    for c in &env.cells {
        let axes: Vec<Vec<f64>> = (0..d).map(|j| grid(c.lo[j].to_f64(), c.hi[j].to_f64(), per_dim).collect()).collect();
        let total: usize = axes.iter().map(|a| a.len()).product();
        let mut r = vec![0.0; d];
        for idx in 0..total {
            let mut k = idx;
            for j in 0..d {
                r[j] = axes[j][k % axes[j].len()];
                k /= axes[j].len();
            }
            let f = (term.eval)(&r, &env.discrete_case);
            let lo = c.lower.eval_f64(&r);
            let hi = c.upper.eval_f64(&r);
            let tol = 1e-12 * (1.0 + f.abs());
            if lo > f + tol || hi < f - tol {
                return Err(LinearizeError::Unsound {
                    term: term.id.clone(),
                    at: r.clone(),
                    msg: format!("f = {f}, f- = {lo}, f+ = {hi}"),
                });
            }
        }
    }
    if d == 1 {
        let mut iv: Vec<(Rational, Rational)> = env.cells.iter().map(|c| (c.lo[0].clone(), c.hi[0].clone())).collect();
        iv.sort();
        for w in iv.windows(2) {
            if w[1].0 > w[0].1 {
                return Err(LinearizeError::NotCovering(term.id.clone()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinStyle {
    /// Fixed 4-decimal coefficients for the first cell, mirrored and
    /// analogous constructions elsewhere.
    Coarse,
    /// Secant/tangent lines re-derived on every cell.
    Tight,
}

fn rq(x: f64, den: i64, up: bool) -> Rational {
    Rational::from_f64_rounded(x, den, up)
}

/// Line with slope `a` (rounded to 1/den) shifted so it bounds sin on [lo,hi]
/// from above (`upper`) or below, by dense sampling plus margin.
fn fit_line(a: f64, lo: f64, hi: f64, upper: bool, den: i64) -> AffineFn {
    let a = Rational::from_f64_rounded(a, den, false);
    let af = a.to_f64();
    let mut c = if upper { f64::NEG_INFINITY } else { f64::INFINITY };
    for x in grid(lo, hi, 20_000) {
        let v = x.sin() - af * x;
        c = if upper { c.max(v) } else { c.min(v) };
    }
    let c = if upper { c + SAMPLE_MARGIN } else { c - SAMPLE_MARGIN };
    AffineFn { coefs: vec![a], constant: rq(c, den, upper) }
}

/// Four-cell (or `cells`-cell, even) sin envelope over [-p, p], p = 355/113,
/// periodic with period 2p.
pub fn sin_envelope(style: SinStyle, cells: usize) -> PwlEnvelope {
    let p = pi();
    let n = if style == SinStyle::Coarse { 4 } else { cells.max(2) + cells % 2 };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo_q = -&p + &p * &Rational::new(2 * i as i64, n as i64);
        let hi_q = -&p + &p * &Rational::new(2 * (i + 1) as i64, n as i64);
        let (lo, hi) = (lo_q.to_f64(), hi_q.to_f64());
        let mid = 0.5 * (lo + hi);
        // Convex on [-p, 0] (sin'' = -sin >= 0): secant above, tangent below.
        let convex = mid < 0.0;
        let secant = (hi.sin() - lo.sin()) / (hi - lo);
        let tangent = mid.cos();
        let den = if style == SinStyle::Coarse { 10_000 } else { 1 << 20 };
        let (lower, upper) = if convex {
            (fit_line(tangent, lo, hi, false, den), fit_line(secant, lo, hi, true, den))
        } else {
            (fit_line(secant, lo, hi, false, den), fit_line(tangent, lo, hi, true, den))
        };
        out.push(EnvelopeCell { lo: vec![lo_q], hi: vec![hi_q], lower, upper });
    }
    if style == SinStyle::Coarse {
        // Reference first cell: f+ = -0.6369 y + 2, f- = 0.7073 (y + 0.785) - 0.7068.
        let q = |s: &str| s.parse::<Rational>().expect("literal");
        let up1 = AffineFn { coefs: vec![q("-0.6369")], constant: q("2") };
        let lo1 = AffineFn { coefs: vec![q("0.7073")], constant: q("0.7073") * q("0.785") - q("0.7068") };
        // Mirror (y, v) -> (-y, -v): f4+(y) = -f1-(-y), f4-(y) = -f1+(-y).
        let up4 = AffineFn { coefs: lo1.coefs.clone(), constant: -&lo1.constant };
        let lo4 = AffineFn { coefs: up1.coefs.clone(), constant: -&up1.constant };
        out[0].upper = up1;
        out[0].lower = lo1;
        out[3].upper = up4;
        out[3].lower = lo4;
        // Mirror I2 into I3 so the pair is exactly symmetric.
        let (l2, u2) = (out[1].lower.clone(), out[1].upper.clone());
        out[2].upper = AffineFn { coefs: l2.coefs.clone(), constant: -&l2.constant };
        out[2].lower = AffineFn { coefs: u2.coefs.clone(), constant: -&u2.constant };
    }
    PwlEnvelope {
        term: "sin".into(),
        discrete_case: vec![],
        cells: out,
        periodic: Some(Periodic {
            period: &p * &Rational::from(2),
            // |2·355/113 - 2π| < 5.4e-7 and sin is 1-Lipschitz.
            drift: Rational::new(1, 1 << 20),
        }),
        margin: SAMPLE_MARGIN,
    }
}

/// Uniform partition of [lo, hi] into n cells.
pub fn uniform_cells(lo: &Rational, hi: &Rational, n: usize) -> Vec<(Vec<Rational>, Vec<Rational>)> {
    let w = (hi - lo) / Rational::from(n as i64);
    (0..n)
        .map(|i| {
            let a = lo + &(&w * &Rational::from(i as i64));
            let b = if i + 1 == n { hi.clone() } else { lo + &(&w * &Rational::from(i as i64 + 1)) };
            (vec![a], vec![b])
        })
        .collect()
}

/// First-order Taylor envelope per cell with the remainder bounded through
/// the Hessian eigenvalue range over the cell.
pub fn taylor_envelope(
    term: &NonlinearTerm,
    cells: &[(Vec<Rational>, Vec<Rational>)],
    w: &[i64],
) -> Result<PwlEnvelope, LinearizeError> {
    let (Some(grad), Some(hess)) = (&term.gradient, &term.hessian_range) else {
        return Err(LinearizeError::MissingHessian(term.id.clone()));
    };
    const DEN: i64 = 1 << 30;
    let mut out = Vec::with_capacity(cells.len());
    for (lo, hi) in cells {
        let d = lo.len();
        let x0: Vec<Rational> = (0..d).map(|j| (&lo[j] + &hi[j]) / Rational::from(2)).collect();
        let x0f: Vec<f64> = x0.iter().map(|x| x.to_f64()).collect();
        let f0 = (term.eval)(&x0f, w);
        let g = grad(&x0f, w);
        let boxf: Vec<(f64, f64)> = (0..d).map(|j| (lo[j].to_f64(), hi[j].to_f64())).collect();
        let (hmin, hmax) = hess(&boxf, w);
        // r² = max ||x - x0||² over the cell.
        let r2: Rational = (0..d).map(|j| {
            let h = (&hi[j] - &lo[j]) / Rational::from(2);
            &h * &h
        }).sum();
        let half = Rational::new(1, 2);
        let m = Rational::min_of(&Rational::zero(), &(&(&half * &hmin) * &r2));
        let mm = Rational::max_of(&Rational::zero(), &(&(&half * &hmax) * &r2));
        let coefs: Vec<Rational> = g.iter().map(|a| rq(*a, DEN, false)).collect();
        // Rounding of the gradient costs at most 2^-30·Σ|x_j - x0_j|.
        let rad: f64 = (0..d).map(|j| (hi[j].to_f64() - lo[j].to_f64()) / 2.0).sum();
        let slack = SAMPLE_MARGIN + rad / DEN as f64 + 1e-15 * (1.0 + f0.abs());
        let mut c0 = Rational::from_f64(f0).expect("finite");
        for j in 0..d {
            c0 -= &coefs[j] * &x0[j];
        }
        let base = AffineFn { coefs, constant: c0 };
        let up = rq(mm.to_f64() + slack, DEN, true);
        let dn = rq(m.to_f64() - slack, DEN, false);
        out.push(EnvelopeCell {
            lo: lo.clone(),
            hi: hi.clone(),
            lower: base.shifted(&Rational::min_of(&dn, &m)),
            upper: base.shifted(&Rational::max_of(&up, &mm)),
        });
    }
    Ok(PwlEnvelope { term: term.id.clone(), discrete_case: w.to_vec(), cells: out, periodic: None, margin: SAMPLE_MARGIN })
}

/// Envelopes per term id; one per discrete case.
pub type EnvelopeSet = BTreeMap<String, Vec<PwlEnvelope>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    /// Value of a term.
    Value { term: String },
    /// Selector of envelope cell `cell` for discrete case `case`.
    Selector { term: String, case: Vec<i64>, cell: usize },
    /// Discrete case indicator.
    Case { term: String, case: Vec<i64> },
    /// Period index and reduced argument of a periodic term.
    Period { term: String },
    Reduced { term: String },
    /// Wrap count of a wrapped state variable.
    Wrap { state: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationResult {
    pub system: Dtlhs,
    pub fresh_reals: Vec<Var>,
    pub fresh_booleans: Vec<Var>,
    pub fresh_discrete: Vec<Var>,
    pub provenance: BTreeMap<String, Provenance>,
    pub sample_margin: f64,
}

fn cartesian(domains: &[(i64, i64)]) -> Vec<Vec<i64>> {
    let mut out = vec![vec![]];
    for (lo, hi) in domains {
        let mut next = Vec::new();
        for p in &out {
            for v in *lo..=*hi {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

struct Builder {
    vars: Vec<Var>,
    items: Vec<GuardedConstraint>,
    res_reals: Vec<Var>,
    res_bools: Vec<Var>,
    res_disc: Vec<Var>,
    prov: BTreeMap<String, Provenance>,
}

impl Builder {
    fn lookup(&self, n: &str) -> Result<&Var, LinearizeError> {
        self.vars.iter().find(|v| v.name() == n).ok_or_else(|| PredicateError::UnknownVar(n.to_string()).into())
    }

    fn add(&mut self, v: Var, p: Provenance) {
        match v.kind() {
            crate::predicates::VarKind::Continuous => self.res_reals.push(v.clone()),
            crate::predicates::VarKind::Boolean => self.res_bools.push(v.clone()),
            crate::predicates::VarKind::Discrete => self.res_disc.push(v.clone()),
        }
        self.prov.insert(v.name().to_string(), p);
        self.vars.push(v);
    }

    fn push(&mut self, g: Option<(&str, bool)>, c: Constraint) {
        match g {
            None => self.items.push(GuardedConstraint::plain(c)),
            Some((v, pos)) => self.items.push(GuardedConstraint::guarded(v, pos, c)),
        }
    }

    /// Encodes term `k` and returns the name of its value variable.
    fn encode_term(&mut self, k: usize, t: &NonlinearTerm, envs: &[PwlEnvelope]) -> Result<String, LinearizeError> {
        let ys = format!("y_s{k}");
        // Discrete cases.
        let wdoms: Vec<(i64, i64)> = t
            .discrete_args
            .iter()
            .map(|a| {
                let v = self.lookup(a)?;
                Ok((v.lower().to_i64().unwrap_or(0), v.upper().to_i64().unwrap_or(0)))
            })
            .collect::<Result<_, LinearizeError>>()?;
        let cases = cartesian(&wdoms);
        let mut per_case = Vec::with_capacity(cases.len());
        for w in &cases {
            let e = envs.iter().find(|e| e.discrete_case == *w).ok_or_else(|| LinearizeError::MissingEnvelope(format!("{} at {:?}", t.id, w)))?;
            per_case.push(e);
        }
        // Argument names used in envelope membership; periodic reduction for one real arg.
        let mut args: Vec<String> = t.real_args.clone();
        let mut drift = Rational::zero();
        let (dlo, dhi) = per_case[0].domain();
        if let (Some(per), 1) = (&per_case[0].periodic, args.len()) {
            let v = self.lookup(&args[0])?.clone();
            if *v.lower() < dlo[0] || *v.upper() > dhi[0] {
                let kmin = ((v.lower() - &dhi[0]) / &per.period).ceil().to_i64().expect("small");
                let kmax = ((v.upper() - &dlo[0]) / &per.period).floor().to_i64().expect("small");
                let yk = format!("y_k{k}");
                let ya = format!("y_a{k}");
                self.add(Var::discrete(yk.clone(), kmin, kmax)?, Provenance::Period { term: t.id.clone() });
                self.add(Var::continuous(ya.clone(), dlo[0].clone(), dhi[0].clone())?, Provenance::Reduced { term: t.id.clone() });
                // arg = P·y_k + y_a
                let e = LinearExpr::from_terms([(v.name().to_string(), Rational::one()), (yk, -&per.period), (ya.clone(), -Rational::one())], Rational::zero());
                self.push(None, Constraint::eq(e, Rational::zero()));
                drift = &per.drift * &Rational::from(kmin.abs().max(kmax.abs()));
                args = vec![ya];
            }
        }
        for (j, a) in args.iter().enumerate() {
            let v = self.lookup(a)?;
            if *v.lower() < dlo[j] || *v.upper() > dhi[j] {
                return Err(LinearizeError::NotCovering(t.id.clone()));
            }
        }
        // Value bounds from all cells.
        let mut ylo: Option<Rational> = None;
        let mut yhi: Option<Rational> = None;
        for e in &per_case {
            for c in &e.cells {
                let a = c.lower.range(&c.lo, &c.hi).0 - &drift;
                let b = c.upper.range(&c.lo, &c.hi).1 + &drift;
                ylo = Some(ylo.map_or(a.clone(), |x| Rational::min_of(&x, &a)));
                yhi = Some(yhi.map_or(b.clone(), |x| Rational::max_of(&x, &b)));
            }
        }
        self.add(Var::continuous(ys.clone(), ylo.expect("cells"), yhi.expect("cells"))?, Provenance::Value { term: t.id.clone() });
        let multi = cases.len() > 1 || !t.discrete_args.is_empty();
        let mut case_vars = Vec::new();
        if multi {
            for (wi, w) in cases.iter().enumerate() {
                let e = format!("e{k}_{wi}");
                self.add(Var::boolean(e.clone()), Provenance::Case { term: t.id.clone(), case: w.clone() });
                case_vars.push(e);
            }
            let sum = LinearExpr::from_terms(case_vars.iter().map(|e| (e.clone(), Rational::one())), Rational::zero());
            self.push(None, Constraint::eq(sum, Rational::one()));
            for (d, a) in t.discrete_args.iter().enumerate() {
                let mut e = LinearExpr::var(a.clone());
                for (wi, w) in cases.iter().enumerate() {
                    e.add_term(case_vars[wi].clone(), -Rational::from(w[d]));
                }
                self.push(None, Constraint::eq(e, Rational::zero()));
            }
        }
        for (wi, env) in per_case.iter().enumerate() {
            let mut zs = Vec::new();
            for (i, c) in env.cells.iter().enumerate() {
                let z = if multi { format!("z{k}_{wi}_{}", i + 1) } else { format!("z{k}_{}", i + 1) };
                self.add(Var::boolean(z.clone()), Provenance::Selector { term: t.id.clone(), case: env.discrete_case.clone(), cell: i });
                let g = Some((z.as_str(), true));
                for (j, a) in args.iter().enumerate() {
                    self.push(g, Constraint::ge(LinearExpr::var(a.clone()), c.lo[j].clone()));
                    self.push(g, Constraint::le(LinearExpr::var(a.clone()), c.hi[j].clone()));
                }
                // y ≤ f⁺(args) + drift and y ≥ f⁻(args) - drift
                let up = LinearExpr::var(ys.clone()).minus(&c.upper.to_expr(&args));
                let up_const = up.constant_term().clone();
                let mut up_e = up;
                up_e.add_constant(&-&up_const);
                self.push(g, Constraint::le(up_e, &drift - &up_const));
                let lo = LinearExpr::var(ys.clone()).minus(&c.lower.to_expr(&args));
                let lo_const = lo.constant_term().clone();
                let mut lo_e = lo;
                lo_e.add_constant(&-&lo_const);
                self.push(g, Constraint::ge(lo_e, -&drift - &lo_const));
                if multi {
                    let e = LinearExpr::from_terms([(z.clone(), Rational::one()), (case_vars[wi].clone(), -Rational::one())], Rational::zero());
                    self.push(None, Constraint::le(e, Rational::zero()));
                }
                zs.push(z);
            }
            let mut sum = LinearExpr::from_terms(zs.iter().map(|z| (z.clone(), Rational::one())), Rational::zero());
            if multi {
                sum.add_term(case_vars[wi].clone(), -Rational::one());
                self.push(None, Constraint::ge(sum, Rational::zero()));
            } else {
                self.push(None, Constraint::ge(sum, Rational::one()));
            }
        }
        Ok(ys)
    }
}

/// Linear overapproximation L_H of `h` using the given envelopes, after
/// checking every envelope by dense sampling.
pub fn linearize(h: &Dths, envs: &EnvelopeSet) -> Result<LinearizationResult, LinearizeError> {
    linearize_with_density(h, envs, DEFAULT_DENSITY)
}

pub fn linearize_with_density(h: &Dths, envs: &EnvelopeSet, density: usize) -> Result<LinearizationResult, LinearizeError> {
    h.validate()?;
    let mut b = Builder {
        vars: h.all_vars(),
        items: Vec::new(),
        res_reals: Vec::new(),
        res_bools: Vec::new(),
        res_disc: Vec::new(),
        prov: BTreeMap::new(),
    };
    let mut aux: Vec<Var> = h.aux.clone();
    // Wrap counts: x' -> x' - P·y_q.
    let mut wrap_sub: Vec<(String, LinearExpr)> = Vec::new();
    for s in &h.states {
        if let Some(p) = &s.wrap {
            let width = s.var.upper() - s.var.lower();
            let kq = (&width / p).ceil().to_i64().unwrap_or(1).max(1);
            let yq = format!("y_q_{}", s.var.name());
            b.add(Var::discrete(yq.clone(), -kq, kq)?, Provenance::Wrap { state: s.var.name().to_string() });
            let nn = next_name(s.var.name());
            let e = LinearExpr::from_terms([(nn.clone(), Rational::one()), (yq, -p.clone())], Rational::zero());
            wrap_sub.push((nn, e));
        }
    }
    let subst = |e: &LinearExpr| -> LinearExpr {
        let mut e = e.clone();
        for (n, by) in &wrap_sub {
            e = e.substitute(n, by);
        }
        e
    };
    let mut values: BTreeMap<usize, String> = BTreeMap::new();
    for it in &h.items {
        match it {
            DthsItem::Linear(g) => {
                let mut g = g.clone();
                g.body.expr = subst(&g.body.expr);
                b.items.push(g);
            }
            DthsItem::Nonlinear { guard, terms, expr, sense, bound } => {
                let mut e = subst(expr);
                for (c, k) in terms {
                    let ys = match values.get(k) {
                        Some(v) => v.clone(),
                        None => {
                            let t = &h.terms[*k];
                            let list = envs.get(&t.id).ok_or_else(|| LinearizeError::MissingEnvelope(t.id.clone()))?;
                            for env in list {
                                check_soundness(t, env, density)?;
                            }
                            let v = b.encode_term(*k, t, list)?;
                            values.insert(*k, v.clone());
                            v
                        }
                    };
                    e.add_term(ys, c.clone());
                }
                b.items.push(GuardedConstraint { guard: guard.clone(), body: Constraint::new(e, *sense, bound.clone()) });
            }
        }
    }
    aux.extend(b.res_disc.iter().cloned());
    aux.extend(b.res_reals.iter().cloned());
    aux.extend(b.res_bools.iter().cloned());
    let system = Dtlhs::new(h.states.clone(), h.inputs.clone(), aux, b.items)?;
    Ok(LinearizationResult {
        system,
        fresh_reals: b.res_reals,
        fresh_booleans: b.res_bools,
        fresh_discrete: b.res_disc,
        provenance: b.prov,
        sample_margin: SAMPLE_MARGIN,
    })
}

/// How to build the envelope of a built-in term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeStyle {
    Coarse,
    Tight,
    Taylor,
}

impl EnvelopeStyle {
    pub fn keyword(self) -> &'static str {
        match self {
            EnvelopeStyle::Coarse => "coarse",
            EnvelopeStyle::Tight => "tight",
            EnvelopeStyle::Taylor => "taylor",
        }
    }
}

/// Per built-in function: style and cell count.
pub type EnvelopeConfig = BTreeMap<String, (EnvelopeStyle, usize)>;

/// Envelopes for every term of `h`: sin uses the configured secant/tangent
/// style (default tight, 4 cells); other built-ins use Taylor on uniform cells
/// (default 16).
pub fn build_envelopes(h: &Dths, cfg: &EnvelopeConfig) -> Result<EnvelopeSet, LinearizeError> {
    let mut out = EnvelopeSet::new();
    for t in &h.terms {
        let func = t.builtin.clone().unwrap_or_default();
        let (style, cells) = cfg.get(&func).copied().unwrap_or(if func == "sin" {
            (EnvelopeStyle::Tight, 4)
        } else {
            (EnvelopeStyle::Taylor, 16)
        });
        let env = match (func.as_str(), style) {
            ("sin", EnvelopeStyle::Coarse) => {
                let mut e = sin_envelope(SinStyle::Coarse, 4);
                e.term = t.id.clone();
                e
            }
            ("sin", EnvelopeStyle::Tight) => {
                let mut e = sin_envelope(SinStyle::Tight, cells);
                e.term = t.id.clone();
                e
            }
            _ => {
                let all = h.all_vars();
                let v = all.iter().find(|v| v.name() == t.real_args[0]).ok_or_else(|| PredicateError::UnknownVar(t.real_args[0].clone()))?;
                taylor_envelope(t, &uniform_cells(v.lower(), v.upper(), cells), &[])?
            }
        };
        out.insert(t.id.clone(), vec![env]);
    }
    Ok(out)
}

/// Interval range of an expression over the model variables (helper for callers).
pub fn expr_range(h: &Dtlhs, e: &LinearExpr) -> Result<(Rational, Rational), LinearizeError> {
    Ok(interval_bounds(e, &h.n.vars)?)
}
