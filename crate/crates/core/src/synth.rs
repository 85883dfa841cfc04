//! Quantized abstraction of a DTLHS and the most general optimal strong
//! controller over it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::milp::{BranchOrder, Bounds, Compiled, MilpError};
use crate::model::{next_name, Dtlhs, ExplicitLts, ModelError};
use crate::predicates::{ConjunctivePredicate, Constraint, Var};
use crate::quantize::{box_inside, box_meets, relax_goal, Quantization, QuantizeError, Quantized};
use crate::rational::Rational;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error("quantization does not match the system: {0}")]
    Mismatch(String),
    #[error("at most 64 abstract actions are supported, got {0}")]
    TooManyActions(usize),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("controller file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractionEntry {
    pub state: usize,
    pub action: usize,
    /// Sorted packed successor states; empty when the action is not admissible.
    pub successors: Vec<usize>,
    /// Some concrete successor may leave the admissible region.
    pub exits: bool,
    /// A confirmed same-cell successor was dropped because a state coordinate
    /// moves strictly on every transition staying in the cell.
    pub dropped_self_loop: bool,
}

impl AbstractionEntry {
    pub fn usable(&self) -> bool {
        !self.exits && !self.successors.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub threads: Option<usize>,
    pub self_loop_elimination: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { threads: None, self_loop_elimination: true }
    }
}

/// Per-(state, action) successor sets, indexed `s * num_actions + a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Abstraction {
    pub num_states: usize,
    pub num_actions: usize,
    pub entries: Vec<AbstractionEntry>,
}

impl Abstraction {
    pub fn entry(&self, s: usize, a: usize) -> &AbstractionEntry {
        &self.entries[s * self.num_actions + a]
    }

    /// Usable pairs only; the table fed to `solve_strong`.
    pub fn table(&self) -> SuccessorTable {
        SuccessorTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            succ: self.entries.iter().map(|e| if e.usable() { Some(e.successors.clone()) } else { None }).collect(),
        }
    }

    pub fn from_lts(l: &ExplicitLts) -> Self {
        let t = l.successor_table();
        let mut entries = Vec::with_capacity(l.num_states * l.num_actions);
        for (s, row) in t.iter().enumerate() {
            for (a, succ) in row.iter().enumerate() {
                entries.push(AbstractionEntry { state: s, action: a, successors: succ.clone(), exits: false, dropped_self_loop: false });
            }
        }
        Abstraction { num_states: l.num_states, num_actions: l.num_actions, entries }
    }
}

/// `succ[s * num_actions + a]` is None when the pair is not usable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccessorTable {
    pub num_states: usize,
    pub num_actions: usize,
    pub succ: Vec<Option<Vec<usize>>>,
}

impl SuccessorTable {
    pub fn from_lts(l: &ExplicitLts) -> Self {
        Abstraction::from_lts(l).table()
    }

    pub fn get(&self, s: usize, a: usize) -> Option<&[usize]> {
        self.succ[s * self.num_actions + a].as_deref()
    }
}

/// Enabled-action bitmaps and layers; layer 0 means outside dom(K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Controller {
    pub num_actions: usize,
    pub layer: Vec<u32>,
    pub enabled: Vec<u64>,
}

const MAGIC: &[u8; 8] = b"QSYNCTRL";
const VERSION: u32 = 1;

impl Controller {
    pub fn num_states(&self) -> usize {
        self.layer.len()
    }

    pub fn in_dom(&self, s: usize) -> bool {
        self.layer[s] > 0
    }

    pub fn dom_size(&self) -> usize {
        self.layer.iter().filter(|&&l| l > 0).count()
    }

    pub fn max_layer(&self) -> u32 {
        self.layer.iter().copied().max().unwrap_or(0)
    }

    pub fn enabled_actions(&self, s: usize) -> Vec<usize> {
        (0..self.num_actions).filter(|&a| self.enabled[s] >> a & 1 == 1).collect()
    }

    /// Lowest enabled action.
    pub fn action(&self, s: usize) -> Option<usize> {
        if self.enabled[s] == 0 {
            None
        } else {
            Some(self.enabled[s].trailing_zeros() as usize)
        }
    }

    /// Binary dump: magic, version, level counts per state variable, action
    /// count, then per state a little-endian u32 layer and u64 bitmap.
    pub fn write_to(&self, dims: &[usize], w: &mut impl Write) -> Result<(), SynthError> {
        if dims.iter().product::<usize>() != self.num_states() {
            return Err(SynthError::Format("dimensions do not match the state count".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.num_actions as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.num_states() * 12);
        for (l, e) in self.layer.iter().zip(&self.enabled) {
            buf.extend_from_slice(&l.to_le_bytes());
            buf.extend_from_slice(&e.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self, dims: &[usize]) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(dims, &mut v).expect("in-memory write");
        v
    }

    /// Inverse of `write_to`; returns the controller and the dimensions.
    pub fn read_from(r: &mut impl Read) -> Result<(Controller, Vec<usize>), SynthError> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn from_bytes(data: &[u8]) -> Result<(Controller, Vec<usize>), SynthError> {
        let bad = |m: &str| SynthError::Format(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], SynthError> {
            let s = data.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let ver = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if ver != VERSION {
            return Err(SynthError::Format(format!("unsupported version {ver}")));
        }
        let nd = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            dims.push(u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize);
        }
        let na = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        if na > 64 {
            return Err(bad("too many actions"));
        }
        let ns: usize = dims.iter().product();
        let mut layer = Vec::with_capacity(ns);
        let mut enabled = Vec::with_capacity(ns);
        for _ in 0..ns {
            layer.push(u32::from_le_bytes(take(4)?.try_into().expect("4")));
            enabled.push(u64::from_le_bytes(take(8)?.try_into().expect("8")));
        }
        if take(1).is_ok() {
            return Err(bad("trailing bytes"));
        }
        Ok((Controller { num_actions: na, layer, enabled }, dims))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisReport {
    pub num_states: usize,
    pub num_actions: usize,
    pub goal_states: usize,
    pub init_states: usize,
    pub dom_size: usize,
    pub max_layer: u32,
    pub i_covered: bool,
    pub uncovered_init: usize,
    pub usable_pairs: usize,
    pub exit_pairs: usize,
    pub dropped_self_loops: usize,
    pub milp_calls: u64,
    pub abstraction_secs: f64,
    pub solve_secs: f64,
    pub quant_step: f64,
}

impl SynthesisReport {
    /// `key: value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "states: {}", self.num_states);
        let _ = writeln!(s, "actions: {}", self.num_actions);
        let _ = writeln!(s, "quantization_step: {}", self.quant_step);
        let _ = writeln!(s, "goal_states: {}", self.goal_states);
        let _ = writeln!(s, "init_states: {}", self.init_states);
        let _ = writeln!(s, "dom_size: {}", self.dom_size);
        let _ = writeln!(s, "max_layer: {}", self.max_layer);
        let _ = writeln!(s, "init_covered: {}", self.i_covered);
        let _ = writeln!(s, "uncovered_init_states: {}", self.uncovered_init);
        let _ = writeln!(s, "usable_pairs: {}", self.usable_pairs);
        let _ = writeln!(s, "exit_pairs: {}", self.exit_pairs);
        let _ = writeln!(s, "dropped_self_loops: {}", self.dropped_self_loops);
        let _ = writeln!(s, "milp_calls: {}", self.milp_calls);
        let _ = writeln!(s, "abstraction_secs: {:.3}", self.abstraction_secs);
        let _ = writeln!(s, "solve_secs: {:.3}", self.solve_secs);
        s
    }
}

/// Backward layering. `goal[s]` marks abstract goal states, `init[s]` states
/// meeting I. Every goal state counts as distance 0 for its predecessors; a
/// state's layer is the least k such that some usable action leads only into
/// goal states or states of layer < k. All actions attaining the layer are
/// enabled.
pub fn solve_strong(t: &SuccessorTable, goal: &[bool], init: &[bool]) -> (Controller, SynthesisReport) {
    let start = Instant::now();
    let (ns, na) = (t.num_states, t.num_actions);
    assert!(na <= 64, "at most 64 actions");
    // Predecessor pairs of each state, via counting sort.
    let mut count = vec![0u32; ns * na];
    let mut pred_start = vec![0usize; ns + 1];
    for succ in t.succ.iter().flatten() {
        for &s2 in succ {
            pred_start[s2 + 1] += 1;
        }
    }
    for s in 0..ns {
        pred_start[s + 1] += pred_start[s];
    }
    let mut fill = pred_start.clone();
    let mut preds = vec![0u32; pred_start[ns]];
    for (p, succ) in t.succ.iter().enumerate() {
        if let Some(succ) = succ {
            count[p] = succ.len() as u32;
            for &s2 in succ {
                preds[fill[s2]] = p as u32;
                fill[s2] += 1;
            }
        }
    }
    let mut layer = vec![0u32; ns];
    let mut enabled = vec![0u64; ns];
    let mut ready: Vec<usize> = Vec::new();
    let release = |s2: usize, count: &mut [u32], ready: &mut Vec<usize>| {
        for &p in &preds[pred_start[s2]..pred_start[s2 + 1]] {
            let p = p as usize;
            count[p] -= 1;
            if count[p] == 0 {
                ready.push(p);
            }
        }
    };
    for s in 0..ns {
        if goal[s] {
            release(s, &mut count, &mut ready);
        }
    }
    for (p, succ) in t.succ.iter().enumerate() {
        if succ.as_ref().is_some_and(|v| v.is_empty()) {
            ready.push(p);
        }
    }
    let mut k = 1u32;
    while !ready.is_empty() {
        ready.sort_unstable();
        ready.dedup();
        let mut newly = Vec::new();
        for &p in &ready {
            let (s, a) = (p / na, p % na);
            if layer[s] == 0 || layer[s] == k {
                if layer[s] == 0 {
                    layer[s] = k;
                    newly.push(s);
                }
                enabled[s] |= 1 << a;
            }
        }
        let mut next = Vec::new();
        for s in newly {
            if !goal[s] {
                release(s, &mut count, &mut next);
            }
        }
        ready = next;
        k += 1;
    }
    let ctrl = Controller { num_actions: na, layer, enabled };
    let init_states = init.iter().filter(|&&b| b).count();
    let uncovered = (0..ns).filter(|&s| init[s] && !ctrl.in_dom(s)).count();
    let usable = t.succ.iter().filter(|s| s.is_some()).count();
    let report = SynthesisReport {
        num_states: ns,
        num_actions: na,
        goal_states: goal.iter().filter(|&&b| b).count(),
        init_states,
        dom_size: ctrl.dom_size(),
        max_layer: ctrl.max_layer(),
        i_covered: uncovered == 0,
        uncovered_init: uncovered,
        usable_pairs: usable,
        solve_secs: start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    (ctrl, report)
}

/// Worst-case number of steps to reach `goal` (n > 0) for every state of a
/// finite LTS where any admissible action may be taken; None is +∞.
pub fn j_strong_all(l: &ExplicitLts, goal: &[bool]) -> Vec<Option<u32>> {
    let t = l.successor_table();
    let n = l.num_states;
    let mut j: Vec<Option<u32>> = vec![None; n];
    loop {
        let mut changed = false;
        let mut next = j.clone();
        for s in 0..n {
            let mut worst: Option<u32> = Some(0);
            let mut any = false;
            for succ in &t[s] {
                for &s2 in succ {
                    any = true;
                    let w = if goal[s2] { Some(1) } else { j[s2].map(|v| v + 1) };
                    worst = match (worst, w) {
                        (Some(a), Some(b)) => Some(a.max(b)),
                        _ => None,
                    };
                }
            }
            let v = if any { worst } else { None };
            if v != next[s] {
                next[s] = v;
                changed = true;
            }
        }
        j = next;
        if !changed {
            return j;
        }
    }
}

pub fn j_strong_oracle(l: &ExplicitLts, goal: &[bool], s: usize) -> Option<u32> {
    j_strong_all(l, goal)[s]
}

/// LTS of the closed loop: only enabled actions, on the given transitions.
pub fn closed_loop(t: &SuccessorTable, k: &Controller) -> ExplicitLts {
    let mut tr = Vec::new();
    for s in 0..t.num_states {
        for a in k.enabled_actions(s) {
            if let Some(succ) = t.get(s, a) {
                tr.extend(succ.iter().map(|&s2| (s, a, s2)));
            }
        }
    }
    ExplicitLts::new(t.num_states, t.num_actions, tr)
}

/// Every enabled action of every controlled state is admissible and all its
/// successors are goal states or have a strictly smaller layer.
pub fn check_termination(t: &SuccessorTable, k: &Controller, goal: &[bool]) -> bool {
    (0..t.num_states).filter(|&s| k.in_dom(s)).all(|s| {
        let acts = k.enabled_actions(s);
        !acts.is_empty()
            && acts.iter().all(|&a| match t.get(s, a) {
                Some(succ) if !succ.is_empty() => succ.iter().all(|&s2| goal[s2] || (k.in_dom(s2) && k.layer[s2] < k.layer[s])),
                _ => false,
            })
    })
}

/// Variable indices of a compiled system.
#[derive(Debug, Clone)]
struct Layout {
    x: Vec<usize>,
    xn: Vec<usize>,
    u: Vec<usize>,
    /// Wrap counters introduced by the linearizer, split on during image search.
    wraps: Vec<usize>,
}

fn round_out(r: &Rational, up: bool) -> Rational {
    let d = Rational::from(1024);
    let s = r * &d;
    (if up { s.ceil() } else { s.floor() }) / d
}

/// Range of each next-state variable implied by N alone (states, inputs and
/// auxiliaries at their bounds), found by MILP with widening.
fn implied_next_ranges(sys: &Dtlhs) -> Result<Vec<(Rational, Rational)>, SynthError> {
    let mut widen = Rational::from(8);
    loop {
        let mut s = sys.clone();
        let mut idx = Vec::new();
        for st in &sys.states {
            let nn = next_name(st.var.name());
            let j = s.n.vars.iter().position(|v| v.name() == nn).expect("next var");
            if st.wrap.is_none() {
                let w = st.var.upper() - st.var.lower();
                let lo = st.var.lower() - &(&w * &widen);
                let hi = st.var.upper() + &(&w * &widen);
                s.n.vars[j] = st.var.renamed(nn).with_bounds(lo, hi).map_err(ModelError::from)?;
            }
            idx.push(j);
        }
        let c = s.compile()?;
        let b = c.bounds();
        let targets: Vec<usize> = sys.states.iter().map(|st| c.index_of(&next_name(st.var.name())).expect("next")).collect();
        let Some(r) = c.optimize_box(&b, &targets) else {
            // N unsatisfiable: any range works.
            return Ok(sys.states.iter().map(|st| (st.var.lower().clone(), st.var.upper().clone())).collect());
        };
        let hit = r.iter().zip(&targets).any(|((lo, hi), &t)| *lo == b.lo[t] || *hi == b.hi[t]);
        let any_unwrapped = sys.states.iter().any(|st| st.wrap.is_none());
        if !hit || !any_unwrapped || widen > Rational::from(1 << 20) {
            return Ok(r
                .into_iter()
                .zip(&sys.states)
                .map(|((lo, hi), st)| {
                    if st.wrap.is_some() {
                        (st.var.lower().clone(), st.var.upper().clone())
                    } else {
                        (Rational::min_of(&round_out(&lo, false), st.var.lower()), Rational::max_of(&round_out(&hi, true), st.var.upper()))
                    }
                })
                .collect());
        }
        widen = &widen * &Rational::from(16);
    }
}

/// The system's transition predicate compiled with next-state bounds wide
/// enough to expose exits from the admissible region.
pub struct AbstractionEngine<'a> {
    q: &'a Quantization,
    compiled: Compiled,
    layout: Layout,
    options: SynthOptions,
    milp_calls: AtomicU64,
}

impl<'a> AbstractionEngine<'a> {
    pub fn new(sys: &Dtlhs, q: &'a Quantization, options: SynthOptions) -> Result<Self, SynthError> {
        let sn: Vec<&str> = sys.states.iter().map(|s| s.var.name()).collect();
        let qn: Vec<&str> = q.states.iter().map(|m| m.var()).collect();
        if sn != qn {
            return Err(SynthError::Mismatch(format!("states {sn:?} vs quantized {qn:?}")));
        }
        let un: Vec<&str> = sys.inputs.iter().map(|v| v.name()).collect();
        let qu: Vec<&str> = q.inputs.iter().map(|m| m.var()).collect();
        if un != qu {
            return Err(SynthError::Mismatch(format!("inputs {un:?} vs quantized {qu:?}")));
        }
        if q.num_actions() > 64 {
            return Err(SynthError::TooManyActions(q.num_actions()));
        }
        for (st, m) in sys.states.iter().zip(&q.states) {
            if m.lo() < st.var.lower() || m.hi() > st.var.upper() {
                return Err(SynthError::Mismatch(format!("quantization range of `{}` exceeds its bounds", m.var())));
            }
        }
        let ranges = implied_next_ranges(sys)?;
        let mut s = sys.clone();
        for (st, (lo, hi)) in sys.states.iter().zip(ranges) {
            let nn = next_name(st.var.name());
            let j = s.n.vars.iter().position(|v| v.name() == nn).expect("next var");
            s.n.vars[j] = st.var.renamed(nn).with_bounds(lo, hi).map_err(ModelError::from)?;
        }
        let compiled = s.compile()?;
        let ix = |n: &str| compiled.index_of(n).expect("declared");
        let layout = Layout {
            x: sys.states.iter().map(|st| ix(st.var.name())).collect(),
            xn: sys.states.iter().map(|st| ix(&next_name(st.var.name()))).collect(),
            u: sys.inputs.iter().map(|v| ix(v.name())).collect(),
            wraps: sys.states.iter().filter_map(|st| compiled.index_of(&format!("y_q_{}", st.var.name()))).collect(),
        };
        Ok(AbstractionEngine { q, compiled, layout, options, milp_calls: AtomicU64::new(0) })
    }

    pub fn milp_calls(&self) -> u64 {
        self.milp_calls.load(Ordering::Relaxed)
    }

    fn bump(&self, n: u64) {
        self.milp_calls.fetch_add(n, Ordering::Relaxed);
    }

    fn base_bounds(&self, s: usize, a: usize) -> Bounds {
        let mut b = self.compiled.bounds();
        for (j, (lo, hi)) in self.layout.x.iter().zip(self.q.state_box(s)) {
            b.lo[*j] = lo;
            b.hi[*j] = hi;
        }
        for (j, (lo, hi)) in self.layout.u.iter().zip(self.q.action_box(a)) {
            b.lo[*j] = lo;
            b.hi[*j] = hi;
        }
        b
    }

    /// Level range of map `i` whose cells meet [lo, hi] (clipped).
    fn level_range(&self, i: usize, lo: &Rational, hi: &Rational) -> (i64, i64) {
        let m = &self.q.states[i];
        let lo = Rational::max_of(lo, m.lo());
        let hi = Rational::min_of(hi, m.hi());
        (m.quantize(&lo).expect("clipped"), m.quantize(&hi).expect("clipped"))
    }

    /// Whether some transition leaves the half-open cell s and lands in the
    /// half-open cell s2. A convex piece of the closed boxes misses the
    /// half-open ones only if it lies in an open upper face, so each
    /// coordinate whose witness sits on such a face is minimized.
    fn reaches(&self, base: &Bounds, s: usize, s2: usize) -> bool {
        let c = &self.compiled;
        let mut b = base.clone();
        let bx2 = self.q.state_box(s2);
        for (j, (lo, hi)) in self.layout.xn.iter().zip(&bx2) {
            b.lo[*j] = lo.clone();
            b.hi[*j] = hi.clone();
        }
        self.bump(1);
        let Some(p) = c.feasible(&b) else { return false };
        let faces = [(&self.layout.x, self.q.unpack_state(s), self.q.state_box(s)), (&self.layout.xn, self.q.unpack_state(s2), bx2)];
        for (idx, levels, bx) in faces {
            for (i, &j) in idx.iter().enumerate() {
                let open_top = levels[i] < self.q.states[i].last_level() && bx[i].0 < bx[i].1;
                if open_top && p[j] == bx[i].1 {
                    let mut obj = vec![Rational::zero(); c.num_vars()];
                    obj[j] = Rational::one();
                    self.bump(1);
                    match c.minimize(&b, Some(&obj), BranchOrder::First) {
                        Some((v, _)) if v < bx[i].1 => {}
                        _ => return false,
                    }
                }
            }
        }
        true
    }

    /// Base bounds of (s, a) split on every feasible wrap-counter value.
    fn wrap_cases(&self, base: &Bounds) -> Vec<Bounds> {
        let mut b = base.clone();
        if !self.compiled.propagate(&mut b) {
            return Vec::new();
        }
        let mut cases = vec![b];
        for &j in &self.layout.wraps {
            cases = cases
                .into_iter()
                .flat_map(|b| {
                    let (lo, hi) = (b.lo[j].ceil().to_i64().unwrap_or(0), b.hi[j].floor().to_i64().unwrap_or(0));
                    (lo..=hi).map(move |v| {
                        let mut c = b.clone();
                        c.lo[j] = Rational::from(v);
                        c.hi[j] = Rational::from(v);
                        c
                    })
                })
                .collect();
        }
        cases
    }

    pub fn entry(&self, s: usize, a: usize) -> AbstractionEntry {
        let mut e = AbstractionEntry { state: s, action: a, successors: Vec::new(), exits: false, dropped_self_loop: false };
        let base = self.base_bounds(s, a);
        let c = &self.compiled;
        let quant = |idx: &[usize], p: &[Rational]| -> Option<usize> {
            let v: Vec<Rational> = idx.iter().map(|&j| p[j].clone()).collect();
            match self.q.quantize(&v) {
                Quantized::Inside(l) => self.q.pack_state(&l).ok(),
                Quantized::Outside => None,
            }
        };
        let mut confirmed: BTreeSet<usize> = BTreeSet::new();
        let mut cands: Vec<(usize, Bounds)> = Vec::new();
        for case in self.wrap_cases(&base) {
            self.bump(1);
            let Some((ranges, points)) = c.optimize_box_points(&case, &self.layout.xn) else {
                continue;
            };
            let mut per: Vec<(i64, i64)> = Vec::with_capacity(ranges.len());
            for (i, (lo, hi)) in ranges.iter().enumerate() {
                let m = &self.q.states[i];
                if *lo < *m.lo() || *hi > *m.hi() {
                    return AbstractionEntry { exits: true, ..e };
                }
                per.push(self.level_range(i, lo, hi));
            }
            for p in &points {
                if quant(&self.layout.x, p) == Some(s) {
                    confirmed.extend(quant(&self.layout.xn, p));
                }
            }
            // Candidate product in packed order.
            let mut prod = vec![0usize];
            for (i, (a0, b0)) in per.iter().enumerate() {
                let m = &self.q.states[i];
                prod = prod
                    .iter()
                    .flat_map(|p| (*a0..=*b0).map(move |l| p * m.levels() + (l - m.first_level()) as usize))
                    .collect();
            }
            cands.extend(prod.into_iter().map(|s2| (s2, case.clone())));
        }
        cands.sort_by_key(|(s2, _)| *s2);
        let mut done: BTreeSet<usize> = BTreeSet::new();
        for (s2, case) in &cands {
            if done.contains(s2) {
                continue;
            }
            if !(confirmed.contains(s2) || self.reaches(case, s, *s2)) {
                continue;
            }
            done.insert(*s2);
            if *s2 == s && self.options.self_loop_elimination && self.strictly_moves(&base, s) {
                e.dropped_self_loop = true;
                continue;
            }
            e.successors.push(*s2);
        }
        e
    }

    /// Some continuous coordinate changes with a fixed sign on every
    /// transition from box(s) back into box(s).
    fn strictly_moves(&self, base: &Bounds, s: usize) -> bool {
        let c = &self.compiled;
        let mut b = base.clone();
        for (j, (lo, hi)) in self.layout.xn.iter().zip(self.q.state_box(s)) {
            b.lo[*j] = lo;
            b.hi[*j] = hi;
        }
        for i in 0..self.layout.x.len() {
            if self.q.states[i].is_identity() {
                continue;
            }
            let mut obj = vec![Rational::zero(); c.num_vars()];
            obj[self.layout.xn[i]] = Rational::one();
            obj[self.layout.x[i]] = -Rational::one();
            self.bump(1);
            match c.minimize(&b, Some(&obj), BranchOrder::First) {
                None => return false,
                Some((v, _)) if v.is_positive() => return true,
                _ => {}
            }
            for o in obj.iter_mut() {
                *o = -&*o;
            }
            self.bump(1);
            if let Some((v, _)) = c.minimize(&b, Some(&obj), BranchOrder::First) {
                if v.is_positive() {
                    return true;
                }
            }
        }
        false
    }

    pub fn abstract_all(&self) -> Abstraction {
        let ns = self.q.num_states();
        let na = self.q.num_actions();
        let entries: Vec<AbstractionEntry> = (0..ns)
            .into_par_iter()
            .with_min_len(16)
            .flat_map_iter(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| self.entry(s, a))
            .collect();
        Abstraction { num_states: ns, num_actions: na, entries }
    }
}

/// Quantized abstraction of `sys`, computed in parallel.
pub fn abstract_system(sys: &Dtlhs, q: &Quantization, options: SynthOptions) -> Result<(Abstraction, u64), SynthError> {
    let eng = AbstractionEngine::new(sys, q, options)?;
    let a = with_threads(options.threads, || eng.abstract_all())?;
    Ok((a, eng.milp_calls()))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SynthError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(|e| SynthError::Threads(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Abstract goal: states whose box lies inside B_eps(G).
pub fn goal_states(q: &Quantization, state_vars: &[Var], goal: &[Constraint], eps: &Rational) -> Result<Vec<bool>, SynthError> {
    let relaxed = relax_goal(goal, eps, state_vars)?;
    let names: Vec<String> = q.states.iter().map(|m| m.var().to_string()).collect();
    Ok((0..q.num_states()).map(|s| box_inside(&relaxed, &names, &q.state_box(s))).collect())
}

/// States whose box meets I (exact: by interval test for single-variable
/// constraints, by MILP otherwise).
pub fn init_states(q: &Quantization, init: &ConjunctivePredicate) -> Result<Vec<bool>, SynthError> {
    let names: Vec<String> = q.states.iter().map(|m| m.var().to_string()).collect();
    if init.items.iter().all(|c| c.expr.terms().len() <= 1) {
        return Ok((0..q.num_states()).map(|s| box_meets(&init.items, &names, &q.state_box(s))).collect());
    }
    let c = Compiled::new(init)?;
    let idx: Vec<usize> = names.iter().map(|n| c.index_of(n).ok_or_else(|| SynthError::Mismatch(format!("I lacks `{n}`")))).collect::<Result<_, _>>()?;
    Ok((0..q.num_states())
        .into_par_iter()
        .map(|s| {
            let mut b = c.bounds();
            for (j, (lo, hi)) in idx.iter().zip(q.state_box(s)) {
                b.lo[*j] = Rational::max_of(&b.lo[*j], &lo);
                b.hi[*j] = Rational::min_of(&b.hi[*j], &hi);
            }
            b.lo.iter().zip(&b.hi).all(|(l, h)| l <= h) && c.feasible(&b).is_some()
        })
        .collect())
}

/// Full pipeline output.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub abstraction: Abstraction,
    pub controller: Controller,
    pub goal: Vec<bool>,
    pub init: Vec<bool>,
    pub report: SynthesisReport,
}

/// Abstraction plus mgo strong solution; `eps` defaults to ‖Γ‖.
pub fn synthesize(
    sys: &Dtlhs,
    q: &Quantization,
    init: &ConjunctivePredicate,
    goal: &ConjunctivePredicate,
    eps: Option<Rational>,
    options: SynthOptions,
) -> Result<Synthesis, SynthError> {
    let t0 = Instant::now();
    let eps = eps.unwrap_or_else(|| q.step());
    let state_vars: Vec<Var> = sys.states.iter().map(|s| s.var.clone()).collect();
    let eng = AbstractionEngine::new(sys, q, options)?;
    let (abstraction, goal_v, init_v) = with_threads(options.threads, || -> Result<_, SynthError> {
        let a = eng.abstract_all();
        let g = goal_states(q, &state_vars, &goal.items, &eps)?;
        let i = init_states(q, init)?;
        Ok((a, g, i))
    })??;
    let abstraction_secs = t0.elapsed().as_secs_f64();
    let (controller, mut report) = solve_strong(&abstraction.table(), &goal_v, &init_v);
    report.exit_pairs = abstraction.entries.iter().filter(|e| e.exits).count();
    report.dropped_self_loops = abstraction.entries.iter().filter(|e| e.dropped_self_loop).count();
    report.milp_calls = eng.milp_calls();
    report.abstraction_secs = abstraction_secs;
    report.quant_step = q.step().to_f64();
    Ok(Synthesis { abstraction, controller, goal: goal_v, init: init_v, report })
}

/// One row per controlled state: levels, box corners, layer, enabled action
/// indices separated by spaces.
pub fn region_csv(k: &Controller, q: &Quantization) -> String {
    let mut s = String::from("state");
    for m in &q.states {
        let _ = write!(s, ",{0}_level,{0}_lo,{0}_hi", m.var());
    }
    s.push_str(",layer,actions\n");
    for st in 0..k.num_states() {
        if !k.in_dom(st) {
            continue;
        }
        let levels = q.unpack_state(st);
        let _ = write!(s, "{st}");
        for (l, (lo, hi)) in levels.iter().zip(q.state_box(st)) {
            let _ = write!(s, ",{l},{},{}", lo.to_f64(), hi.to_f64());
        }
        let acts: Vec<String> = k.enabled_actions(st).iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, ",{},{}", k.layer[st], acts.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{as_dtlhs, ex2_problem};
    use crate::quantize::QuantMap;
    use crate::rational::{q, qi};

    fn ex2_quant(k: i64) -> Quantization {
        Quantization::new(
            vec![QuantMap::floor_scale("x", qi(-2), q(5, 2), qi(k)).unwrap()],
            vec![QuantMap::identity("u", 0, 1).unwrap()],
        )
    }

    fn run_ex2(k: i64) -> (Synthesis, Quantization) {
        let p = ex2_problem(q(1, 10));
        let sys = as_dtlhs(&p.system).unwrap();
        let qz = ex2_quant(k);
        let r = synthesize(&sys, &qz, &p.init, &p.goal, None, SynthOptions::default()).unwrap();
        (r, qz)
    }

    #[test]
    fn chain_layers() {
        // s0 -> s1 -> s2 (goal)
        let l = ExplicitLts::new(3, 1, [(0, 0, 1), (1, 0, 2)]);
        let t = SuccessorTable::from_lts(&l);
        let goal = [false, false, true];
        let (k, rep) = solve_strong(&t, &goal, &[true, false, false]);
        assert_eq!(k.layer, vec![2, 1, 0]);
        assert!(rep.i_covered);
        assert_eq!(j_strong_oracle(&l, &goal, 0), Some(2));
    }

    #[test]
    fn branching_worst_case() {
        // a: s0 -> {s1, G}; s1 -> G
        let l = ExplicitLts::new(3, 1, [(0, 0, 1), (0, 0, 2), (1, 0, 2)]);
        let goal = [false, false, true];
        assert_eq!(j_strong_oracle(&l, &goal, 0), Some(2));
        let (k, _) = solve_strong(&SuccessorTable::from_lts(&l), &goal, &[false; 3]);
        assert_eq!(k.layer[0], 2);
    }

    #[test]
    fn goal_self_loop_and_unreachable() {
        let l = ExplicitLts::new(3, 1, [(0, 0, 0), (1, 1 - 1, 1)]);
        let goal = [true, false, false];
        assert_eq!(j_strong_oracle(&l, &goal, 0), Some(1));
        assert_eq!(j_strong_oracle(&l, &goal, 1), None);
        assert_eq!(j_strong_oracle(&l, &goal, 2), None);
        let (k, rep) = solve_strong(&SuccessorTable::from_lts(&l), &goal, &[false, true, false]);
        assert_eq!(k.layer, vec![1, 0, 0]);
        assert!(!rep.i_covered);
    }

    #[test]
    fn mgo_enables_all_optimal_actions() {
        // a0 and a1 both go straight to goal, a2 takes two steps.
        let l = ExplicitLts::new(3, 3, [(0, 0, 2), (0, 1, 2), (0, 2, 1), (1, 0, 2)]);
        let goal = [false, false, true];
        let (k, _) = solve_strong(&SuccessorTable::from_lts(&l), &goal, &[false; 3]);
        assert_eq!(k.enabled_actions(0), vec![0, 1]);
        assert_eq!(k.action(0), Some(0));
    }

    #[test]
    fn controller_dump_roundtrip() {
        let k = Controller { num_actions: 3, layer: vec![0, 1, 2, 5], enabled: vec![0, 1, 6, 7] };
        let bytes = k.to_bytes(&[2, 2]);
        let (k2, d) = Controller::from_bytes(&bytes).unwrap();
        assert_eq!((k2, d), (k.clone(), vec![2, 2]));
        assert!(Controller::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(k.to_bytes(&[2, 2]).starts_with(b"QSYNCTRL"));
    }

    #[test]
    fn ex2_floor_not_covered() {
        let (r, _) = run_ex2(1);
        assert!(!r.report.i_covered);
    }

    #[test]
    fn ex2_fixpoint_self_loop_before_elimination() {
        let p = ex2_problem(q(1, 10));
        let sys = as_dtlhs(&p.system).unwrap();
        let qz = ex2_quant(8);
        let opts = SynthOptions { self_loop_elimination: false, ..Default::default() };
        let eng = AbstractionEngine::new(&sys, &qz, opts).unwrap();
        let s = qz.pack_state(&[10]).unwrap();
        let e = eng.entry(s, 0);
        assert!(e.successors.contains(&s));
    }

    #[test]
    fn ex2_floor8_matches_reference_controller() {
        let (r, qz) = run_ex2(8);
        assert!(r.report.i_covered, "{}", r.report.to_text());
        let k = &r.controller;
        for s in 0..qz.num_states() {
            let (lo, hi) = qz.state_box(s)[0].clone();
            let acts = k.enabled_actions(s);
            if lo > qi(-2) && hi < qi(0) {
                assert_eq!(acts, vec![0], "cell [{lo}, {hi}]");
            } else if lo > qi(0) && hi < q(11, 8) {
                assert_eq!(acts, vec![1], "cell [{lo}, {hi}]");
            } else if lo > q(11, 8) && hi < q(5, 2) {
                assert_eq!(acts, vec![0], "cell [{lo}, {hi}]");
            }
        }
        assert!(check_termination(&r.abstraction.table(), k, &r.goal));
        let csv = region_csv(k, &qz);
        assert_eq!(csv.lines().count(), 1 + k.dom_size());
    }

    #[test]
    fn affine_unit_cells_deterministic() {
        use crate::model::{add_relation, Dths, StateVar};
        use crate::syntax::Scope;
        let mut h = Dths {
            states: vec![StateVar { var: Var::continuous("x", qi(0), qi(8)).unwrap(), wrap: None }],
            inputs: vec![Var::discrete("u", 0, 0).unwrap()],
            aux: vec![],
            terms: vec![],
            items: vec![],
        };
        add_relation(&mut h, "x' = x + 1", &Scope::default()).unwrap();
        let sys = as_dtlhs(&h).unwrap();
        let qz = Quantization::new(
            vec![QuantMap::uniform("x", qi(0), qi(8), 3).unwrap()],
            vec![QuantMap::identity("u", 0, 0).unwrap()],
        );
        let eng = AbstractionEngine::new(&sys, &qz, SynthOptions::default()).unwrap();
        for s in 0..7 {
            let e = eng.entry(s, 0);
            assert_eq!(e.successors, vec![s + 1]);
            assert!(!e.exits);
        }
        assert!(eng.entry(7, 0).exits);
    }
}
