//! Quantization maps, admissible regions and goal relaxation.

use std::fmt;

use crate::predicates::{Constraint, LinearExpr, Sense, Var, VarKind};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuantizeError {
    #[error("level {level} out of range for `{var}`")]
    InvalidLevel { var: String, level: i64 },
    #[error("invalid quantization for `{var}`: {msg}")]
    Invalid { var: String, msg: String },
    #[error("goal constraint mentions unknown variable `{0}`")]
    UnknownVar(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantKind {
    /// 2^bits equal cells over the range.
    Uniform { bits: u32 },
    /// `⌊k·x⌋`, cells clipped to the range.
    FloorScale { k: Rational },
    /// Discrete variables: level = value.
    Identity,
}

/// Non-decreasing map from `[lo, hi]` onto `first..first + levels`.
/// Cells are left-closed, right-open; the last cell is closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantMap {
    var: String,
    lo: Rational,
    hi: Rational,
    kind: QuantKind,
    first: i64,
    levels: usize,
}

impl QuantMap {
    pub fn uniform(var: impl Into<String>, lo: Rational, hi: Rational, bits: u32) -> Result<Self, QuantizeError> {
        let var = var.into();
        if lo >= hi || bits == 0 || bits > 24 {
            return Err(QuantizeError::Invalid { var, msg: format!("need lo < hi and 1 <= bits <= 24, got [{lo}, {hi}], bits={bits}") });
        }
        Ok(QuantMap { var, lo, hi, kind: QuantKind::Uniform { bits }, first: 0, levels: 1 << bits })
    }

    pub fn floor_scale(var: impl Into<String>, lo: Rational, hi: Rational, k: Rational) -> Result<Self, QuantizeError> {
        let var = var.into();
        if lo >= hi || !k.is_positive() {
            return Err(QuantizeError::Invalid { var, msg: "need lo < hi and k > 0".into() });
        }
        let first = (&k * &lo).floor().to_i64();
        let last = (&k * &hi).ceil().to_i64().map(|c| c - 1);
        let (Some(first), Some(last)) = (first, last) else {
            return Err(QuantizeError::Invalid { var, msg: "levels overflow".into() });
        };
        let levels = (last - first + 1) as usize;
        if levels > 1 << 24 {
            return Err(QuantizeError::Invalid { var, msg: "too many levels".into() });
        }
        Ok(QuantMap { var, lo, hi, kind: QuantKind::FloorScale { k }, first, levels })
    }

    pub fn identity(var: impl Into<String>, lo: i64, hi: i64) -> Result<Self, QuantizeError> {
        let var = var.into();
        if lo > hi || hi - lo >= 1 << 24 {
            return Err(QuantizeError::Invalid { var, msg: format!("bad integer range {lo}..{hi}") });
        }
        Ok(QuantMap { var, lo: Rational::from(lo), hi: Rational::from(hi), kind: QuantKind::Identity, first: lo, levels: (hi - lo + 1) as usize })
    }

    /// Identity for discrete/boolean variables, otherwise error.
    pub fn identity_for(v: &Var) -> Result<Self, QuantizeError> {
        if !v.kind().is_integral() {
            return Err(QuantizeError::Invalid { var: v.name().into(), msg: "identity map needs a discrete variable".into() });
        }
        QuantMap::identity(v.name(), v.lower().to_i64().unwrap_or(0), v.upper().to_i64().unwrap_or(0))
    }

    pub fn var(&self) -> &str {
        &self.var
    }
    pub fn lo(&self) -> &Rational {
        &self.lo
    }
    pub fn hi(&self) -> &Rational {
        &self.hi
    }
    pub fn kind(&self) -> &QuantKind {
        &self.kind
    }
    pub fn first_level(&self) -> i64 {
        self.first
    }
    pub fn last_level(&self) -> i64 {
        self.first + self.levels as i64 - 1
    }
    pub fn levels(&self) -> usize {
        self.levels
    }
    pub fn is_identity(&self) -> bool {
        self.kind == QuantKind::Identity
    }

    /// Bits needed to address a level.
    pub fn bits(&self) -> u32 {
        usize::BITS - (self.levels - 1).leading_zeros()
    }

    /// None when x is outside `[lo, hi]` (or not an integer for identity maps).
    pub fn quantize(&self, x: &Rational) -> Option<i64> {
        if *x < self.lo || *x > self.hi {
            return None;
        }
        let l = match &self.kind {
            QuantKind::Identity => {
                if !x.is_integer() {
                    return None;
                }
                x.to_i64()?
            }
            QuantKind::Uniform { bits } => {
                let n = Rational::from(1i64 << bits);
                let l = ((x - &self.lo) * n / (&self.hi - &self.lo)).floor().to_i64()?;
                l.min(self.last_level())
            }
            QuantKind::FloorScale { k } => (k * x).floor().to_i64()?.min(self.last_level()),
        };
        Some(l)
    }

    pub fn quantize_f64(&self, x: f64) -> Option<i64> {
        self.quantize(&Rational::from_f64(x)?)
    }

    /// Closed cell of a level.
    pub fn cell(&self, level: i64) -> Result<(Rational, Rational), QuantizeError> {
        if level < self.first || level > self.last_level() {
            return Err(QuantizeError::InvalidLevel { var: self.var.clone(), level });
        }
        Ok(match &self.kind {
            QuantKind::Identity => (Rational::from(level), Rational::from(level)),
            QuantKind::Uniform { bits } => {
                let w = (&self.hi - &self.lo) / Rational::from(1i64 << bits);
                let a = &self.lo + &(&w * &Rational::from(level));
                let b = if level == self.last_level() { self.hi.clone() } else { &self.lo + &(&w * &Rational::from(level + 1)) };
                (a, b)
            }
            QuantKind::FloorScale { k } => {
                let a = Rational::from(level) / k;
                let b = Rational::from(level + 1) / k;
                (Rational::max_of(&a, &self.lo), Rational::min_of(&b, &self.hi))
            }
        })
    }

    /// Widest cell (zero for identity maps).
    pub fn step(&self) -> Rational {
        match &self.kind {
            QuantKind::Identity => Rational::zero(),
            QuantKind::Uniform { bits } => (&self.hi - &self.lo) / Rational::from(1i64 << bits),
            QuantKind::FloorScale { k } => {
                let full = k.recip();
                let (a, b) = self.cell(self.first).expect("first");
                let (c, d) = self.cell(self.last_level()).expect("last");
                if self.levels > 2 {
                    full
                } else {
                    Rational::max_of(&(&b - &a), &(&d - &c))
                }
            }
        }
    }
}

impl fmt::Display for QuantMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            QuantKind::Uniform { bits } => write!(f, "quantize {} bits={} range=[{}, {}]", self.var, bits, self.lo, self.hi),
            QuantKind::FloorScale { k } => write!(f, "quantize {} floor scale={} range=[{}, {}]", self.var, k, self.lo, self.hi),
            QuantKind::Identity => write!(f, "quantize {} identity", self.var),
        }
    }
}

/// Result of quantizing a concrete state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Quantized {
    Inside(Vec<i64>),
    Outside,
}

/// Admissible region (the map ranges) and maps for states and inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantization {
    pub states: Vec<QuantMap>,
    pub inputs: Vec<QuantMap>,
}

fn mixed_size(maps: &[QuantMap]) -> usize {
    maps.iter().map(|m| m.levels()).product()
}

fn pack(maps: &[QuantMap], levels: &[i64]) -> Result<usize, QuantizeError> {
    let mut idx = 0usize;
    for (m, &l) in maps.iter().zip(levels) {
        if l < m.first_level() || l > m.last_level() {
            return Err(QuantizeError::InvalidLevel { var: m.var.clone(), level: l });
        }
        idx = idx * m.levels() + (l - m.first_level()) as usize;
    }
    Ok(idx)
}

fn unpack(maps: &[QuantMap], mut idx: usize) -> Vec<i64> {
    let mut out = vec![0; maps.len()];
    for (i, m) in maps.iter().enumerate().rev() {
        out[i] = m.first_level() + (idx % m.levels()) as i64;
        idx /= m.levels();
    }
    out
}

impl Quantization {
    pub fn new(states: Vec<QuantMap>, inputs: Vec<QuantMap>) -> Self {
        Quantization { states, inputs }
    }

    /// ‖Γ‖: the widest cell over all state maps.
    pub fn step(&self) -> Rational {
        self.states.iter().map(|m| m.step()).max().unwrap_or_else(Rational::zero)
    }

    pub fn num_states(&self) -> usize {
        mixed_size(&self.states)
    }

    pub fn num_actions(&self) -> usize {
        mixed_size(&self.inputs)
    }

    pub fn total_state_bits(&self) -> u32 {
        self.states.iter().map(|m| m.bits()).sum()
    }

    /// Row-major index, first variable most significant.
    pub fn pack_state(&self, levels: &[i64]) -> Result<usize, QuantizeError> {
        pack(&self.states, levels)
    }

    pub fn unpack_state(&self, idx: usize) -> Vec<i64> {
        unpack(&self.states, idx)
    }

    pub fn pack_action(&self, levels: &[i64]) -> Result<usize, QuantizeError> {
        pack(&self.inputs, levels)
    }

    pub fn unpack_action(&self, idx: usize) -> Vec<i64> {
        unpack(&self.inputs, idx)
    }

    pub fn quantize(&self, x: &[Rational]) -> Quantized {
        let mut out = Vec::with_capacity(x.len());
        for (m, v) in self.states.iter().zip(x) {
            match m.quantize(v) {
                Some(l) => out.push(l),
                None => return Quantized::Outside,
            }
        }
        Quantized::Inside(out)
    }

    /// Packed abstract state of a concrete f64 state.
    pub fn quantize_f64(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for (m, v) in self.states.iter().zip(x) {
            let l = m.quantize_f64(*v)?;
            idx = idx * m.levels() + (l - m.first_level()) as usize;
        }
        Some(idx)
    }

    pub fn cell_box(&self, levels: &[i64]) -> Result<Vec<(Rational, Rational)>, QuantizeError> {
        self.states.iter().zip(levels).map(|(m, &l)| m.cell(l)).collect()
    }

    pub fn state_box(&self, idx: usize) -> Vec<(Rational, Rational)> {
        self.cell_box(&self.unpack_state(idx)).expect("packed index is valid")
    }

    pub fn action_box(&self, idx: usize) -> Vec<(Rational, Rational)> {
        let l = self.unpack_action(idx);
        self.inputs.iter().zip(&l).map(|(m, &v)| m.cell(v).expect("valid")).collect()
    }

    /// Centre of an action cell (the command an implementation issues).
    pub fn action_value(&self, idx: usize) -> Vec<Rational> {
        self.action_box(idx).into_iter().map(|(a, b)| (a + b) / Rational::from(2)).collect()
    }
}

/// B_ε(G): each bound loosened by ε times the sum of |coefficients| of
/// continuous variables. Equalities become two inequalities when loosened.
pub fn relax_goal(goal: &[Constraint], eps: &Rational, vars: &[Var]) -> Result<Vec<Constraint>, QuantizeError> {
    let mut out = Vec::with_capacity(goal.len());
    for c in goal {
        let n = c.normalized();
        let mut w = Rational::zero();
        for (name, a) in n.expr.terms() {
            let v = vars.iter().find(|v| v.name() == name).ok_or_else(|| QuantizeError::UnknownVar(name.clone()))?;
            if v.kind() == VarKind::Continuous {
                w += a.abs();
            }
        }
        let d = eps * &w;
        if d.is_zero() {
            out.push(n);
            continue;
        }
        match n.sense {
            Sense::Le => out.push(Constraint::le(n.expr, &n.bound + &d)),
            Sense::Ge => out.push(Constraint::ge(n.expr, &n.bound - &d)),
            Sense::Eq => {
                out.push(Constraint::ge(n.expr.clone(), &n.bound - &d));
                out.push(Constraint::le(n.expr, &n.bound + &d));
            }
        }
    }
    Ok(out)
}

fn expr_range(e: &LinearExpr, names: &[String], bx: &[(Rational, Rational)]) -> Option<(Rational, Rational)> {
    let mut lo = e.constant_term().clone();
    let mut hi = lo.clone();
    for (n, a) in e.terms() {
        let j = names.iter().position(|x| x == n)?;
        let (l, h) = &bx[j];
        if a.is_positive() {
            lo += a * l;
            hi += a * h;
        } else {
            lo += a * h;
            hi += a * l;
        }
    }
    Some((lo, hi))
}

/// Whether every point of the box satisfies every constraint.
pub fn box_inside(cons: &[Constraint], names: &[String], bx: &[(Rational, Rational)]) -> bool {
    cons.iter().all(|c| {
        let Some((lo, hi)) = expr_range(&c.expr, names, bx) else { return false };
        match c.sense {
            Sense::Le => hi <= c.bound,
            Sense::Ge => lo >= c.bound,
            Sense::Eq => lo == c.bound && hi == c.bound,
        }
    })
}

/// Whether some point of the box may satisfy every constraint, constraint by
/// constraint (exact for constraints over one variable each).
pub fn box_meets(cons: &[Constraint], names: &[String], bx: &[(Rational, Rational)]) -> bool {
    cons.iter().all(|c| {
        let Some((lo, hi)) = expr_range(&c.expr, names, bx) else { return false };
        match c.sense {
            Sense::Le => lo <= c.bound,
            Sense::Ge => hi >= c.bound,
            Sense::Eq => lo <= c.bound && hi >= c.bound,
        }
    })
}

/// Uniform b-bit maps on x1 in ±1.1π (π as 355/113 rounded) and x2 in
/// [-4, 4]; identity on the input u in {-1, 0, 1}.
pub fn pendulum_quantization(bits: u32) -> Quantization {
    let l = crate::model::pendulum_x1_limit();
    Quantization::new(
        vec![
            QuantMap::uniform("x1", -&l, l, bits).expect("valid"),
            QuantMap::uniform("x2", Rational::from(-4), Rational::from(4), bits).expect("valid"),
        ],
        vec![QuantMap::identity("u", -1, 1).expect("valid")],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{q, qi};

    #[test]
    fn floor_maps() {
        let g = QuantMap::floor_scale("x", qi(-2), q(5, 2), qi(1)).unwrap();
        assert_eq!(g.quantize(&q(19, 10)), Some(1));
        assert_eq!(g.levels(), 5);
        assert_eq!(g.quantize(&q(5, 2)), Some(2));
        assert_eq!(g.cell(2).unwrap(), (qi(2), q(5, 2)));
        let g8 = QuantMap::floor_scale("x", qi(-2), q(5, 2), qi(8)).unwrap();
        assert_eq!(g8.quantize(&q(5, 4)), Some(10));
        assert_eq!(g8.cell(10).unwrap(), (q(10, 8), q(11, 8)));
        assert_eq!((g8.first_level(), g8.last_level(), g8.levels()), (-16, 19, 36));
        assert_eq!(g8.step(), q(1, 8));
    }

    #[test]
    fn uniform_three_bits() {
        let m = QuantMap::uniform("x", qi(-4), qi(4), 3).unwrap();
        assert_eq!(m.quantize(&qi(-4)), Some(0));
        assert_eq!(m.quantize(&qi(4)), Some(7));
        assert_eq!(m.quantize(&qi(-3)), Some(1));
        assert_eq!(m.cell(0).unwrap(), (qi(-4), qi(-3)));
        assert_eq!(m.quantize(&q(41, 10)), None);
        assert_eq!(m.step(), qi(1));
        assert_eq!(m.bits(), 3);
    }

    #[test]
    fn identity_levels() {
        let m = QuantMap::identity("u", -1, 1).unwrap();
        assert_eq!(m.cell(1).unwrap(), (qi(1), qi(1)));
        assert_eq!(m.quantize(&q(1, 2)), None);
        assert_eq!(m.step(), qi(0));
        assert_eq!(m.bits(), 2);
    }

    #[test]
    fn pendulum_step_and_packing() {
        let l = crate::model::pendulum_x1_limit();
        let q9 = Quantization::new(
            vec![QuantMap::uniform("x1", -&l, l.clone(), 9).unwrap(), QuantMap::uniform("x2", qi(-4), qi(4), 9).unwrap()],
            vec![QuantMap::identity("u", -1, 1).unwrap()],
        );
        assert_eq!(q9.step(), q(8, 512));
        assert_eq!(q9.num_states(), 1 << 18);
        assert_eq!(q9.pack_state(&[1, 2]).unwrap(), 512 + 2);
        assert_eq!(q9.unpack_state(514), vec![1, 2]);
        assert_eq!(q9.unpack_action(0), vec![-1]);
        assert_eq!(q9.quantize(&[qi(5), qi(0)]), Quantized::Outside);
    }

    #[test]
    fn relax_examples() {
        let x = Var::continuous("x", qi(-2), q(5, 2)).unwrap();
        let g: Vec<Constraint> = vec!["x = 0".parse().unwrap()];
        let r = relax_goal(&g, &q(1, 10), std::slice::from_ref(&x)).unwrap();
        assert_eq!(r, vec!["x >= -1/10".parse().unwrap(), "x <= 1/10".parse().unwrap()]);
        assert_eq!(relax_goal(&g, &qi(0), &[x]).unwrap(), g);
        let v = vec![Var::continuous("x1", qi(-4), qi(4)).unwrap(), Var::continuous("x2", qi(-4), qi(4)).unwrap()];
        let g: Vec<Constraint> = ["x1 >= -1/10", "x1 <= 1/10", "x2 >= -1/10", "x2 <= 1/10"].iter().map(|s| s.parse().unwrap()).collect();
        let r = relax_goal(&g, &q(1, 32), &v).unwrap();
        assert_eq!(r[1], "x1 <= 21/160".parse().unwrap());
        let u = Var::discrete("d", 0, 3).unwrap();
        let g: Vec<Constraint> = vec!["d <= 1".parse().unwrap()];
        assert_eq!(relax_goal(&g, &qi(1), &[u]).unwrap(), g);
    }

    #[test]
    fn box_tests() {
        let names = vec!["x".to_string()];
        let c: Vec<Constraint> = vec!["x <= 1".parse().unwrap(), "x >= -1".parse().unwrap()];
        assert!(box_inside(&c, &names, &[(qi(0), qi(1))]));
        assert!(!box_inside(&c, &names, &[(qi(0), qi(2))]));
        assert!(box_meets(&c, &names, &[(qi(1), qi(2))]));
        assert!(!box_meets(&c, &names, &[(q(3, 2), qi(2))]));
    }
}
