//! Bounded-variable primal simplex over exact rationals.
//!
//! Every variable (structural, row activity, artificial) is boxed, so the
//! problem is always bounded. Phase one minimizes the sum of artificials;
//! Bland's rule picks entering and leaving variables.

use crate::rational::Rational;

/// Sparse row `lo <= Σ a_j x_j <= hi` with both sides finite.
#[derive(Debug, Clone)]
pub struct LpRow {
    pub coefs: Vec<(usize, Rational)>,
    pub lo: Rational,
    pub hi: Rational,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Infeasible,
    /// Objective values (one per objective) and the primal point of the last.
    Optimal(Vec<(Rational, Vec<Rational>)>),
}

struct Tableau {
    m: usize,
    n: usize,
    t: Vec<Rational>,
    d: Vec<Rational>,
    lo: Vec<Rational>,
    hi: Vec<Rational>,
    val: Vec<Rational>,
    basis: Vec<usize>,
    /// Row of a basic variable, `usize::MAX` when nonbasic.
    row_of: Vec<usize>,
    at_upper: Vec<bool>,
    pivots: usize,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> &Rational {
        &self.t[i * self.n + j]
    }

    fn set_costs(&mut self, c: &[Rational]) {
        self.d.clear();
        self.d.extend_from_slice(c);
        for i in 0..self.m {
            let cb = &c[self.basis[i]];
            if cb.is_zero() {
                continue;
            }
            for j in 0..self.n {
                let a = self.at(i, j);
                if !a.is_zero() {
                    let v = cb * a;
                    self.d[j] -= &v;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let n = self.n;
        let p = self.t[r * n + q].clone();
        if p != Rational::one() {
            let inv = p.recip();
            for j in 0..n {
                let a = &mut self.t[r * n + j];
                if !a.is_zero() {
                    *a *= &inv;
                }
            }
        }
        let nz: Vec<usize> = (0..n).filter(|&j| !self.t[r * n + j].is_zero()).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * n + q].clone();
            if f.is_zero() {
                continue;
            }
            for &j in &nz {
                let v = &f * &self.t[r * n + j];
                self.t[i * n + j] -= &v;
            }
        }
        let f = self.d[q].clone();
        if !f.is_zero() {
            for &j in &nz {
                let v = &f * &self.t[r * n + j];
                self.d[j] -= &v;
            }
        }
        let leaving = self.basis[r];
        self.row_of[leaving] = usize::MAX;
        self.basis[r] = q;
        self.row_of[q] = r;
        self.pivots += 1;
    }

    /// Runs simplex iterations minimizing the current cost row.
    fn optimize(&mut self) {
        loop {
            // Bland: lowest-index improving nonbasic variable.
            let mut enter = None;
            for j in 0..self.n {
                if self.row_of[j] != usize::MAX || self.lo[j] == self.hi[j] {
                    continue;
                }
                let dj = &self.d[j];
                if (!self.at_upper[j] && dj.is_negative()) || (self.at_upper[j] && dj.is_positive()) {
                    enter = Some(j);
                    break;
                }
            }
            let Some(q) = enter else { return };
            let up = !self.at_upper[q];
            // Ratio test. alpha_i = change of basic i per unit step.
            let mut best: Option<Rational> = Some(&self.hi[q] - &self.lo[q]);
            let mut leave: Option<(usize, bool)> = None;
            for i in 0..self.m {
                let a = self.at(i, q);
                if a.is_zero() {
                    continue;
                }
                let alpha = if up { -a } else { a.clone() };
                let b = self.basis[i];
                let (lim, to_upper) = if alpha.is_positive() {
                    ((&self.hi[b] - &self.val[b]) / &alpha, true)
                } else {
                    ((&self.lo[b] - &self.val[b]) / &alpha, false)
                };
                let better = match &best {
                    None => true,
                    Some(cur) => match lim.cmp(cur) {
                        std::cmp::Ordering::Less => true,
                        std::cmp::Ordering::Equal => match leave {
                            Some((r, _)) => b < self.basis[r],
                            None => false,
                        },
                        std::cmp::Ordering::Greater => false,
                    },
                };
                if better {
                    best = Some(lim);
                    leave = Some((i, to_upper));
                }
            }
            let step = best.expect("bounded step");
            if !step.is_zero() {
                let signed = if up { step.clone() } else { -&step };
                self.val[q] += &signed;
                for i in 0..self.m {
                    let a = self.at(i, q);
                    if a.is_zero() {
                        continue;
                    }
                    let delta = a * &signed;
                    let b = self.basis[i];
                    self.val[b] -= &delta;
                }
            }
            match leave {
                None => {
                    self.at_upper[q] = up;
                    self.val[q] = if up { self.hi[q].clone() } else { self.lo[q].clone() };
                }
                Some((r, to_upper)) => {
                    let b = self.basis[r];
                    self.val[b] = if to_upper { self.hi[b].clone() } else { self.lo[b].clone() };
                    self.at_upper[b] = to_upper;
                    self.pivot(r, q);
                }
            }
        }
    }
}

/// Minimizes each objective in turn over `lo <= x <= hi` and the rows,
/// warm-starting each from the previous optimal basis.
pub fn solve_lp(rows: &[LpRow], lo: &[Rational], hi: &[Rational], objectives: &[Vec<Rational>]) -> LpOutcome {
    let nx = lo.len();
    let m = rows.len();
    // Start with structurals at the bound of smaller magnitude.
    let mut x0: Vec<Rational> = Vec::with_capacity(nx);
    let mut x_up: Vec<bool> = Vec::with_capacity(nx);
    for j in 0..nx {
        let use_hi = hi[j].is_negative() || (lo[j].is_negative() && hi[j].is_zero());
        x0.push(if use_hi { hi[j].clone() } else { lo[j].clone() });
        x_up.push(use_hi);
    }
    let mut act = Vec::with_capacity(m);
    let mut art_sign: Vec<Option<i8>> = Vec::with_capacity(m);
    for r in rows {
        let mut a = Rational::zero();
        for (j, c) in &r.coefs {
            if !x0[*j].is_zero() {
                a += c * &x0[*j];
            }
        }
        let s = if a < r.lo {
            Some(1)
        } else if a > r.hi {
            Some(-1)
        } else {
            None
        };
        art_sign.push(s);
        act.push(a);
    }
    let na = art_sign.iter().filter(|s| s.is_some()).count();
    let n = nx + m + na;
    let mut tab = Tableau {
        m,
        n,
        t: vec![Rational::zero(); m * n],
        d: Vec::with_capacity(n),
        lo: Vec::with_capacity(n),
        hi: Vec::with_capacity(n),
        val: vec![Rational::zero(); n],
        basis: vec![0; m],
        row_of: vec![usize::MAX; n],
        at_upper: vec![false; n],
        pivots: 0,
    };
    tab.lo.extend_from_slice(lo);
    tab.hi.extend_from_slice(hi);
    for j in 0..nx {
        tab.val[j] = x0[j].clone();
        tab.at_upper[j] = x_up[j];
    }
    for r in rows {
        tab.lo.push(r.lo.clone());
        tab.hi.push(r.hi.clone());
    }
    let mut k = nx + m;
    for (i, r) in rows.iter().enumerate() {
        let s = nx + i;
        match art_sign[i] {
            None => {
                // s - a.x = 0 with s basic.
                for (j, c) in &r.coefs {
                    tab.t[i * n + j] = -c;
                }
                tab.t[i * n + s] = Rational::one();
                tab.val[s] = act[i].clone();
                tab.basis[i] = s;
                tab.row_of[s] = i;
            }
            Some(sig) => {
                // sig*(s - a.x) = r >= 0, s nonbasic at the violated bound.
                let (sv, up) = if sig > 0 { (r.lo.clone(), false) } else { (r.hi.clone(), true) };
                let sg = Rational::from(sig as i64);
                for (j, c) in &r.coefs {
                    tab.t[i * n + j] = c * &sg;
                }
                tab.t[i * n + s] = -&sg;
                tab.t[i * n + k] = Rational::one();
                let rv = &sg * &(&sv - &act[i]);
                // Upper bound of the artificial over the full box.
                let (amin, amax) = activity_range(&r.coefs, lo, hi);
                let rhi = if sig > 0 { &r.hi - &amin } else { &amax - &r.lo };
                tab.val[s] = sv;
                tab.at_upper[s] = up;
                tab.lo.push(Rational::zero());
                tab.hi.push(Rational::max_of(&rhi, &rv));
                tab.val[k] = rv;
                tab.basis[i] = k;
                tab.row_of[k] = i;
                k += 1;
            }
        }
    }
    if na > 0 {
        let mut c = vec![Rational::zero(); n];
        for cj in c.iter_mut().skip(nx + m) {
            *cj = Rational::one();
        }
        tab.set_costs(&c);
        tab.optimize();
        if (nx + m..n).any(|j| !tab.val[j].is_zero()) {
            return LpOutcome::Infeasible;
        }
        for j in nx + m..n {
            tab.hi[j] = Rational::zero();
        }
    }
    let mut out = Vec::with_capacity(objectives.len());
    let mut c = vec![Rational::zero(); n];
    for obj in objectives {
        c[..nx].clone_from_slice(obj);
        tab.set_costs(&c);
        tab.optimize();
        let mut v = Rational::zero();
        for j in 0..nx {
            if !obj[j].is_zero() {
                v += &obj[j] * &tab.val[j];
            }
        }
        out.push((v, tab.val[..nx].to_vec()));
    }
    if objectives.is_empty() {
        out.push((Rational::zero(), tab.val[..nx].to_vec()));
    }
    LpOutcome::Optimal(out)
}

pub fn activity_range(coefs: &[(usize, Rational)], lo: &[Rational], hi: &[Rational]) -> (Rational, Rational) {
    let mut a = Rational::zero();
    let mut b = Rational::zero();
    for (j, c) in coefs {
        if c.is_positive() {
            a += c * &lo[*j];
            b += c * &hi[*j];
        } else {
            a += c * &hi[*j];
            b += c * &lo[*j];
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{q, qi};

    fn row(coefs: &[(usize, Rational)], lo: Rational, hi: Rational) -> LpRow {
        LpRow { coefs: coefs.to_vec(), lo, hi }
    }

    #[test]
    fn min_one_var() {
        let rows = vec![row(&[(0, qi(1))], q(3, 2), qi(10))];
        match solve_lp(&rows, &[qi(0)], &[qi(10)], &[vec![qi(1)]]) {
            LpOutcome::Optimal(v) => assert_eq!(v[0].0, q(3, 2)),
            _ => panic!(),
        }
    }

    #[test]
    fn infeasible_rows() {
        // x + y >= 3, x + y <= 1
        let rows = vec![row(&[(0, qi(1)), (1, qi(1))], qi(3), qi(4)), row(&[(0, qi(1)), (1, qi(1))], qi(0), qi(1))];
        assert!(matches!(solve_lp(&rows, &[qi(0), qi(0)], &[qi(2), qi(2)], &[]), LpOutcome::Infeasible));
    }

    #[test]
    fn two_dim_max() {
        // max x + y  s.t. x + 2y <= 4, 3x + y <= 6, x,y in [0,10]
        let rows = vec![row(&[(0, qi(1)), (1, qi(2))], qi(0), qi(4)), row(&[(0, qi(3)), (1, qi(1))], qi(0), qi(6))];
        match solve_lp(&rows, &[qi(0), qi(0)], &[qi(10), qi(10)], &[vec![qi(-1), qi(-1)], vec![qi(1), qi(0)]]) {
            LpOutcome::Optimal(v) => {
                assert_eq!(v[0].0, q(-14, 5));
                assert_eq!(v[0].1, vec![q(8, 5), q(6, 5)]);
                assert_eq!(v[1].0, qi(0));
            }
            _ => panic!(),
        }
    }
}
