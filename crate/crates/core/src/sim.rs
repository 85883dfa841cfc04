//! Fine-step simulation of the nonlinear plant under a sampled, held
//! quantized controller, with optional random disturbances.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codegen::{CTables, CommandTable};
use crate::model::UpdateFn;
use crate::predicates::Constraint;
use crate::quantize::Quantization;
use crate::synth::Controller;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("sampling period {t} is not a positive integer multiple of the step {ts}")]
    Period { t: f64, ts: f64 },
    #[error("disturbance {0} outside [0, 1)")]
    Disturbance(f64),
    #[error("initial state {0:?} outside the admissible region")]
    Initial(Vec<f64>),
    #[error("{0}")]
    Mismatch(String),
}

/// How the disturbance enters each state increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceMode {
    /// Increment scaled by `1 + δ`.
    Multiplicative,
    /// `Ts·δ` added to the increment.
    Additive,
}

/// Source of commands at controller ticks. Table and C-tree commands are
/// action indices (fault = any negative value).
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Controller(&'a Controller),
    Table(&'a CommandTable),
    CTree(&'a CTables),
}

impl Backend<'_> {
    fn action(&self, q: &Quantization, levels: &[i64]) -> Option<usize> {
        match self {
            Backend::Controller(k) => q.pack_state(levels).ok().and_then(|s| k.action(s)),
            Backend::Table(t) => usize::try_from(t.lookup(levels)).ok(),
            Backend::CTree(c) => usize::try_from(c.ctrl_law(levels)).ok(),
        }
    }
}

/// `plant` performs one Euler step of length `ts`.
#[derive(Debug, Clone)]
pub struct SimConfig<'a> {
    pub plant: &'a UpdateFn,
    pub backend: Backend<'a>,
    pub quantization: &'a Quantization,
    /// Goal region already relaxed by the tolerance to check against.
    pub goal: Vec<Constraint>,
    pub period: f64,
    pub ts: f64,
    pub disturbance: f64,
    pub mode: DisturbanceMode,
    pub seed: u64,
    pub horizon: f64,
    /// Least time the run must spend in the goal before the horizon.
    pub dwell: f64,
    pub x0: Vec<f64>,
}

pub const DEFAULT_TS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub x: Vec<f64>,
    /// Held input value, None when the controller faulted at this tick.
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// First tick time inside the goal.
    pub reached_goal: Option<f64>,
    /// Start of the final stretch spent inside the goal up to the horizon.
    pub settle_time: Option<f64>,
    /// Never left the goal after first reaching it (checked every step).
    pub stayed_in_goal: bool,
    pub left_admissible: bool,
    pub fault: bool,
    /// Largest |x_0| after the first goal entry.
    pub ripple: Option<f64>,
    pub final_state: Vec<f64>,
    pub end_time: f64,
    pub dwell: f64,
}

impl Trajectory {
    pub fn success(&self) -> bool {
        !self.left_admissible && !self.fault && self.settle_time.is_some_and(|t| self.end_time - t >= self.dwell - 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("time");
        for n in self.state_names.iter().chain(&self.input_names) {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for p in &self.samples {
            let _ = write!(s, "{:.6}", p.time);
            for v in &p.x {
                let _ = write!(s, ",{v:.9}");
            }
            match &p.u {
                Some(u) => {
                    for v in u {
                        let _ = write!(s, ",{v}");
                    }
                }
                None => {
                    for _ in &self.input_names {
                        s.push_str(",fault");
                    }
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "success: {}", self.success());
        let _ = writeln!(s, "reached_goal: {}", opt(self.reached_goal));
        let _ = writeln!(s, "settle_time: {}", opt(self.settle_time));
        let _ = writeln!(s, "stayed_in_goal: {}", self.stayed_in_goal);
        let _ = writeln!(s, "left_admissible: {}", self.left_admissible);
        let _ = writeln!(s, "fault: {}", self.fault);
        let _ = writeln!(s, "ripple: {}", opt(self.ripple));
        let fx: Vec<String> = self.final_state.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "final_state: {}", fx.join(" "));
        s
    }
}

fn goal_holds(goal: &[Constraint], names: &[String], x: &[f64]) -> bool {
    let env: HashMap<String, f64> = names.iter().cloned().zip(x.iter().copied()).collect();
    goal.iter().all(|c| {
        let (lhs, b) = (c.expr.eval_f64(&env), c.bound.to_f64());
        match lhs {
            None => false,
            Some(l) => match c.sense {
                crate::predicates::Sense::Le => l <= b,
                crate::predicates::Sense::Ge => l >= b,
                crate::predicates::Sense::Eq => l == b,
            },
        }
    })
}

/// Brings wrapped coordinates back into the region; false if still outside.
fn wrap_into(plant: &UpdateFn, q: &Quantization, x: &mut [f64]) -> bool {
    for (i, st) in plant.model().states.iter().enumerate() {
        let (lo, hi) = (q.states[i].lo().to_f64(), q.states[i].hi().to_f64());
        if let Some(p) = &st.wrap {
            let p = p.to_f64();
            if x[i] > hi {
                x[i] -= p;
            } else if x[i] < lo {
                x[i] += p;
            }
        }
        if !(lo..=hi).contains(&x[i]) {
            return false;
        }
    }
    true
}

fn levels_of(q: &Quantization, x: &[f64]) -> Option<Vec<i64>> {
    q.states.iter().zip(x).map(|(m, v)| m.quantize_f64(*v)).collect()
}

pub fn simulate(cfg: &SimConfig) -> Result<Trajectory, SimError> {
    let q = cfg.quantization;
    let model = cfg.plant.model();
    if model.states.len() != q.states.len() || model.inputs.len() != q.inputs.len() {
        return Err(SimError::Mismatch("plant and quantization disagree on variables".into()));
    }
    if cfg.x0.len() != q.states.len() {
        return Err(SimError::Mismatch(format!("initial state has {} values", cfg.x0.len())));
    }
    let ratio = cfg.period / cfg.ts;
    let ticks = ratio.round();
    if !(cfg.ts > 0.0 && ticks >= 1.0 && (ratio - ticks).abs() < 1e-6) {
        return Err(SimError::Period { t: cfg.period, ts: cfg.ts });
    }
    let ticks = ticks as usize;
    if !(0.0..1.0).contains(&cfg.disturbance) {
        return Err(SimError::Disturbance(cfg.disturbance));
    }
    let names = model.state_names();
    let mut x = cfg.x0.clone();
    if !wrap_into(cfg.plant, q, &mut x) {
        return Err(SimError::Initial(cfg.x0.clone()));
    }
    let noise = Uniform::new_inclusive(-cfg.disturbance, cfg.disturbance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tr = Trajectory {
        state_names: names.clone(),
        input_names: model.inputs.iter().map(|v| v.name().to_string()).collect(),
        samples: Vec::new(),
        reached_goal: None,
        settle_time: None,
        stayed_in_goal: true,
        left_admissible: false,
        fault: false,
        ripple: None,
        final_state: Vec::new(),
        end_time: 0.0,
        dwell: cfg.dwell,
    };
    let n_ticks = (cfg.horizon / cfg.period).round() as usize;
    let mut in_goal_since: Option<f64> = None;
    let mut ripple: f64 = 0.0;
    'outer: for k in 0..=n_ticks {
        let time = k as f64 * cfg.period;
        let in_goal = goal_holds(&cfg.goal, &names, &x);
        if in_goal && tr.reached_goal.is_none() {
            tr.reached_goal = Some(time);
        }
        let act = levels_of(q, &x).and_then(|l| cfg.backend.action(q, &l));
        let u: Option<Vec<f64>> = act.map(|a| q.action_value(a).iter().map(|v| v.to_f64()).collect());
        tr.samples.push(Sample { time, x: x.clone(), u: u.clone() });
        if in_goal && in_goal_since.is_none() {
            in_goal_since = Some(time);
        }
        if k == n_ticks {
            break;
        }
        let Some(u) = u else {
            tr.fault = true;
            break;
        };
        for _ in 0..ticks {
            let next = cfg.plant.step(&x, &u);
            for i in 0..x.len() {
                let d = next[i] - x[i];
                let delta = if cfg.disturbance > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                x[i] += match cfg.mode {
                    DisturbanceMode::Multiplicative => d * (1.0 + delta),
                    DisturbanceMode::Additive => d + cfg.ts * delta,
                };
            }
            if !wrap_into(cfg.plant, q, &mut x) {
                tr.left_admissible = true;
                break 'outer;
            }
            if tr.reached_goal.is_some() {
                ripple = ripple.max(x[0].abs());
                if !goal_holds(&cfg.goal, &names, &x) {
                    tr.stayed_in_goal = false;
                    in_goal_since = None;
                }
            }
        }
    }
    if tr.reached_goal.is_some() {
        tr.ripple = Some(ripple);
    }
    tr.settle_time = if tr.left_admissible || tr.fault { None } else { in_goal_since };
    tr.final_state = x;
    tr.end_time = tr.samples.last().map_or(0.0, |p| p.time);
    Ok(tr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub runs: usize,
    pub successes: usize,
    pub mean_settle: Option<f64>,
    pub max_settle: Option<f64>,
    pub max_ripple: Option<f64>,
}

impl BatchSummary {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.4}"));
        format!(
            "runs: {}\nsuccesses: {}\nsuccess_rate: {:.4}\nmean_settle: {}\nmax_settle: {}\nmax_ripple: {}\n",
            self.runs,
            self.successes,
            if self.runs == 0 { 0.0 } else { self.successes as f64 / self.runs as f64 },
            opt(self.mean_settle),
            opt(self.max_settle),
            opt(self.max_ripple)
        )
    }
}

/// Runs every initial state with every seed; trajectories come back in
/// (initial state, seed) order.
pub fn batch(template: &SimConfig, initial: &[Vec<f64>], seeds: &[u64]) -> Result<(BatchSummary, Vec<Trajectory>), SimError> {
    let jobs: Vec<(Vec<f64>, u64)> = initial.iter().flat_map(|x| seeds.iter().map(move |s| (x.clone(), *s))).collect();
    let runs: Vec<Trajectory> = jobs
        .into_par_iter()
        .map(|(x0, seed)| simulate(&SimConfig { x0, seed, ..template.clone() }))
        .collect::<Result<_, _>>()?;
    let ok: Vec<&Trajectory> = runs.iter().filter(|t| t.success()).collect();
    let settles: Vec<f64> = ok.iter().filter_map(|t| t.settle_time).collect();
    let summary = BatchSummary {
        runs: runs.len(),
        successes: ok.len(),
        mean_settle: (!settles.is_empty()).then(|| settles.iter().sum::<f64>() / settles.len() as f64),
        max_settle: settles.iter().copied().reduce(f64::max),
        max_ripple: ok.iter().filter_map(|t| t.ripple).reduce(f64::max),
    };
    Ok((summary, runs))
}
