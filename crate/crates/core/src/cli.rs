//! The `qsynth` command line.

use std::collections::BTreeMap;
use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codegen::{emit_c, emit_table, CTables, CodegenSpec, CommandTable};
use crate::linearize::{build_envelopes, linearize, EnvelopeStyle};
use crate::milp::{solve, Direction, MilpProblem, Status};
use crate::modelfile::{bundled, parse_var, Instance, ModelFile, Role};
use crate::predicates::{GuardedPredicate, LinearExpr, Var};
use crate::quantize::relax_goal;
use crate::rational::Rational;
use crate::sim::{batch, simulate, Backend, DisturbanceMode, SimConfig, DEFAULT_TS};
use crate::synth::{region_csv, synthesize, Controller, SynthOptions, Synthesis};
use crate::syntax::{self, Scope};

type Res<T> = Result<T, Box<dyn Error + Send + Sync>>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NEGATIVE: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "qsynth", version, about = "Quantized controller synthesis for discrete-time hybrid systems")]
pub struct Cli {
    /// Worker threads (default: QSYNTH_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a controller and print the report.
    Synth {
        #[command(flatten)]
        model: ModelArgs,
        /// Write the binary controller dump here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one closed-loop run and print the trajectory CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ctrl: ControllerArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Initial state, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = BackendKind::Controller)]
        backend: BackendKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate many runs and print aggregate statistics.
    Batch {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ctrl: ControllerArgs,
        #[command(flatten)]
        sim: SimArgs,
        /// Initial states `a,b;c,d`.
        #[arg(long, allow_hyphen_values = true)]
        starts: String,
        /// Seeds 0..N per initial state.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print the controlled region as CSV.
    Region {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ctrl: ControllerArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit C99 source for the controller.
    ExportC {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ctrl: ControllerArgs,
        #[command(flatten)]
        codes: CommandArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the dense binary command table.
    ExportTable {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        ctrl: ControllerArgs,
        #[command(flatten)]
        codes: CommandArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a small MILP written in predicate syntax.
    Lp { file: PathBuf },
    /// Print the piecewise-linear envelopes as CSV.
    EnvelopeDump {
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model file, or `@pendulum` / `@ex2` for a bundled one.
    model: String,
    /// Override parameter F.
    #[arg(short = 'F', allow_hyphen_values = true)]
    force: Option<String>,
    /// Override parameter T.
    #[arg(short = 'T')]
    period: Option<String>,
    /// Override parameter rho.
    #[arg(long)]
    rho: Option<String>,
    /// Override parameter b.
    #[arg(short = 'b', long = "bits")]
    bits: Option<String>,
    /// Override the goal tolerance.
    #[arg(long)]
    eps: Option<String>,
    /// Override any parameter, `NAME=VALUE`.
    #[arg(long = "set", allow_hyphen_values = true)]
    set: Vec<String>,
    /// Tight secant/tangent envelope for sin.
    #[arg(long, conflicts_with = "coarse_sin")]
    tight_sin: bool,
    /// The coarse four-cell envelope for sin.
    #[arg(long)]
    coarse_sin: bool,
    /// Cell count for the sin envelope.
    #[arg(long)]
    sin_cells: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ControllerArgs {
    /// Use a dump written by `synth --out` instead of synthesizing.
    #[arg(long)]
    controller: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct CommandArgs {
    /// Command code per action index, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    commands: Option<String>,
    #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
    fault: i32,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    /// Integration step.
    #[arg(long, default_value_t = DEFAULT_TS)]
    ts: f64,
    #[arg(long, default_value_t = 40.0)]
    horizon: f64,
    /// Required final stay in the goal.
    #[arg(long, default_value_t = 10.0)]
    dwell: f64,
    /// Relative disturbance bound.
    #[arg(long, default_value_t = 0.0)]
    disturbance: f64,
    #[arg(long, value_enum, default_value_t = ModeKind::Multiplicative)]
    mode: ModeKind,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum BackendKind {
    Controller,
    Table,
    C,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeKind {
    Multiplicative,
    Additive,
}

/// A parsed model with its overrides applied.
struct Loaded {
    file: ModelFile,
    overrides: BTreeMap<String, Rational>,
    inst: Instance,
}

fn rat(s: &str) -> Res<Rational> {
    Ok(syntax::parse_const(s, &Scope::default()).map_err(|e| format!("`{s}`: {e}"))?)
}

fn load(a: &ModelArgs) -> Res<Loaded> {
    let src = match a.model.strip_prefix('@') {
        Some(name) => bundled(name).ok_or_else(|| format!("no bundled model `{name}`"))?.to_string(),
        None => fs::read_to_string(&a.model).map_err(|e| format!("{}: {e}", a.model))?,
    };
    let mut file = ModelFile::parse(&src).map_err(|e| format!("{}: {e}", a.model))?;
    let mut overrides = BTreeMap::new();
    for (name, v) in [("F", &a.force), ("T", &a.period), ("rho", &a.rho), ("b", &a.bits)] {
        if let Some(v) = v {
            overrides.insert(name.to_string(), rat(v)?);
        }
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{kv}`"))?;
        overrides.insert(k.trim().to_string(), rat(v.trim())?);
    }
    if let Some(e) = &a.eps {
        rat(e)?;
        file.eps = Some(e.clone());
    }
    let cells = a.sin_cells.unwrap_or(4);
    if a.coarse_sin {
        file.set_envelope("sin", EnvelopeStyle::Coarse, 4);
    } else if a.tight_sin || a.sin_cells.is_some() {
        file.set_envelope("sin", EnvelopeStyle::Tight, cells);
    }
    let inst = file.instantiate(&overrides)?;
    Ok(Loaded { file, overrides, inst })
}

fn run_synth(m: &Loaded, threads: Option<usize>) -> Res<Synthesis> {
    let p = &m.inst.problem;
    let envs = build_envelopes(&p.system, &m.inst.envelopes)?;
    let lin = linearize(&p.system, &envs)?;
    let opts = SynthOptions { threads, ..Default::default() };
    Ok(synthesize(&lin.system, &m.inst.quantization, &p.init, &p.goal, m.inst.eps.clone(), opts)?)
}

fn dims(m: &Loaded) -> Vec<usize> {
    m.inst.quantization.states.iter().map(|q| q.levels()).collect()
}

fn controller(m: &Loaded, c: &ControllerArgs, threads: Option<usize>) -> Res<Controller> {
    match &c.controller {
        Some(path) => {
            let data = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let (k, d) = Controller::from_bytes(&data)?;
            if d != dims(m) || k.num_actions != m.inst.quantization.num_actions() {
                return Err(format!("{} was built for a different quantization", path.display()).into());
            }
            Ok(k)
        }
        None => Ok(run_synth(m, threads)?.controller),
    }
}

fn spec<'a>(m: &'a Loaded, k: &'a Controller, c: &CommandArgs) -> Res<CodegenSpec<'a>> {
    Ok(match &c.commands {
        Some(list) => {
            let codes = list.split(',').map(|s| s.trim().parse::<i32>()).collect::<Result<Vec<_>, _>>()?;
            CodegenSpec::new(k, &m.inst.quantization, codes, c.fault)?
        }
        None => CodegenSpec::with_indices(k, &m.inst.quantization)?,
    })
}

fn emit(out: &Option<PathBuf>, stdout: &mut (dyn Write + Send), bytes: &[u8]) -> Res<()> {
    match out {
        Some(p) => fs::write(p, bytes).map_err(|e| format!("{}: {e}", p.display()))?,
        None => stdout.write_all(bytes)?,
    }
    Ok(())
}

fn parse_point(s: &str, n: usize) -> Res<Vec<f64>> {
    let v = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| format!("`{s}`: {e}"))?;
    if v.len() != n {
        return Err(format!("`{s}` has {} coordinates, expected {n}", v.len()).into());
    }
    Ok(v)
}

struct SimSetup {
    plant: crate::model::UpdateFn,
    goal: Vec<crate::predicates::Constraint>,
    period: f64,
}

fn sim_setup(m: &Loaded, s: &SimArgs) -> Res<SimSetup> {
    let period = m.inst.params.get("T").ok_or("simulation needs a sampling parameter `T`")?.to_f64();
    let ts = Rational::from_f64(s.ts).ok_or("bad --ts")?;
    let plant = m.file.plant(&m.overrides, &ts)?;
    let q = &m.inst.quantization;
    let eps = m.inst.eps.clone().unwrap_or_else(|| q.step());
    let vars: Vec<Var> = m.inst.problem.system.states.iter().map(|s| s.var.clone()).collect();
    let goal = relax_goal(&m.inst.problem.goal.items, &eps, &vars)?;
    Ok(SimSetup { plant, goal, period })
}

fn mode(k: ModeKind) -> DisturbanceMode {
    match k {
        ModeKind::Multiplicative => DisturbanceMode::Multiplicative,
        ModeKind::Additive => DisturbanceMode::Additive,
    }
}

fn lp(src: &str, stdout: &mut (dyn Write + Send)) -> Res<i32> {
    let mut sc = Scope::default();
    let mut vars: Vec<Var> = Vec::new();
    let mut items = Vec::new();
    let mut objective = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: String| format!("line {}: {e}", i + 1);
        let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match key {
            "format" if rest.trim() == "1" => {}
            "param" => {
                let (n, v) = rest.split_once('=').ok_or_else(|| at("expected `param NAME = value`".into()))?;
                let val = syntax::parse_const(v, &sc).map_err(|e| at(e.to_string()))?;
                sc.params.insert(n.trim().to_string(), val);
            }
            "var" => {
                let d = parse_var(Role::Aux, rest).map_err(at)?;
                let var = match &d.range {
                    None => Var::boolean(d.name),
                    Some((a, b)) => {
                        let lo = syntax::parse_const(a, &sc).map_err(|e| at(e.to_string()))?;
                        let hi = syntax::parse_const(b, &sc).map_err(|e| at(e.to_string()))?;
                        Var::new(d.name, d.kind, lo, hi).map_err(|e| at(e.to_string()))?
                    }
                };
                vars.push(var);
            }
            "minimize" | "maximize" => {
                let e = syntax::parse_expr(rest, &sc).map_err(|e| at(e.to_string()))?;
                if !e.calls.is_empty() {
                    return Err(at("objective must be linear".into()).into());
                }
                let dir = if key == "minimize" { Direction::Minimize } else { Direction::Maximize };
                objective = Some((e.lin, dir));
            }
            "st" => items.push((i + 1, crate::model::linear(rest, &sc).map_err(|e| at(e.to_string()))?)),
            _ => return Err(at(format!("unknown directive `{key}`")).into()),
        }
    }
    for (line, c) in &items {
        GuardedPredicate::new(vars.clone(), vec![c.clone()]).map_err(|e| format!("line {line}: {e}"))?;
    }
    let items = items.into_iter().map(|(_, c)| c).collect();
    let predicate = GuardedPredicate::new(vars, items)?.eliminate_guards()?;
    let (objective, direction) = objective.unwrap_or((LinearExpr::zero(), Direction::Feasibility));
    let r = solve(&MilpProblem { predicate, objective, direction })?;
    match r.status {
        Status::Infeasible => {
            writeln!(stdout, "status: infeasible")?;
            Ok(EXIT_NEGATIVE)
        }
        Status::Optimal => {
            writeln!(stdout, "status: {}", if direction == Direction::Feasibility { "feasible" } else { "optimal" })?;
            if let Some(v) = &r.value {
                writeln!(stdout, "value: {v}")?;
            }
            for (n, v) in r.witness.iter().flatten() {
                writeln!(stdout, "{n} = {v}")?;
            }
            Ok(EXIT_OK)
        }
    }
}

fn dispatch(cli: Cli, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> Res<i32> {
    let threads = cli.threads;
    match cli.cmd {
        Command::Synth { model, out } => {
            let m = load(&model)?;
            let t0 = Instant::now();
            let r = run_synth(&m, threads)?;
            write!(stdout, "{}", r.report.to_text())?;
            writeln!(stdout, "wall_secs: {:.3}", t0.elapsed().as_secs_f64())?;
            writeln!(stdout, "{}", if r.report.i_covered { "I covered" } else { "I not covered" })?;
            if let Some(p) = out {
                fs::write(&p, r.controller.to_bytes(&dims(&m))).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            Ok(if r.report.i_covered { EXIT_OK } else { EXIT_NEGATIVE })
        }
        Command::Simulate { model, ctrl, sim, x0, seed, backend, out } => {
            let m = load(&model)?;
            let k = controller(&m, &ctrl, threads)?;
            let setup = sim_setup(&m, &sim)?;
            let q = &m.inst.quantization;
            let x0 = parse_point(&x0, q.states.len())?;
            let spec = CodegenSpec::with_indices(&k, q)?;
            let table;
            let tree;
            let backend = match backend {
                BackendKind::Controller => Backend::Controller(&k),
                BackendKind::Table => {
                    table = CommandTable::from_spec(&spec);
                    Backend::Table(&table)
                }
                BackendKind::C => {
                    tree = CTables::parse(&emit_c(&spec)?)?;
                    Backend::CTree(&tree)
                }
            };
            let cfg = SimConfig {
                plant: &setup.plant,
                backend,
                quantization: q,
                goal: setup.goal.clone(),
                period: setup.period,
                ts: sim.ts,
                disturbance: sim.disturbance,
                mode: mode(sim.mode),
                seed,
                horizon: sim.horizon,
                dwell: sim.dwell,
                x0,
            };
            let tr = simulate(&cfg)?;
            emit(&out, stdout, tr.to_csv().as_bytes())?;
            write!(stderr, "{}", tr.summary())?;
            Ok(if tr.success() { EXIT_OK } else { EXIT_NEGATIVE })
        }
        Command::Batch { model, ctrl, sim, starts, seeds } => {
            let m = load(&model)?;
            let k = controller(&m, &ctrl, threads)?;
            let setup = sim_setup(&m, &sim)?;
            let q = &m.inst.quantization;
            let initial = starts.split(';').filter(|s| !s.trim().is_empty()).map(|s| parse_point(s, q.states.len())).collect::<Res<Vec<_>>>()?;
            let cfg = SimConfig {
                plant: &setup.plant,
                backend: Backend::Controller(&k),
                quantization: q,
                goal: setup.goal.clone(),
                period: setup.period,
                ts: sim.ts,
                disturbance: sim.disturbance,
                mode: mode(sim.mode),
                seed: 0,
                horizon: sim.horizon,
                dwell: sim.dwell,
                x0: vec![],
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let (summary, _) = batch(&cfg, &initial, &seeds)?;
            write!(stdout, "{}", summary.to_text())?;
            Ok(if summary.successes == summary.runs { EXIT_OK } else { EXIT_NEGATIVE })
        }
        Command::Region { model, ctrl, out } => {
            let m = load(&model)?;
            let k = controller(&m, &ctrl, threads)?;
            emit(&out, stdout, region_csv(&k, &m.inst.quantization).as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::ExportC { model, ctrl, codes, out } => {
            let m = load(&model)?;
            let k = controller(&m, &ctrl, threads)?;
            let src = emit_c(&spec(&m, &k, &codes)?)?;
            emit(&out, stdout, src.as_bytes())?;
            Ok(EXIT_OK)
        }
        Command::ExportTable { model, ctrl, codes, out } => {
            let m = load(&model)?;
            let k = controller(&m, &ctrl, threads)?;
            let bytes = emit_table(&spec(&m, &k, &codes)?);
            emit(&Some(out), stdout, &bytes)?;
            Ok(EXIT_OK)
        }
        Command::Lp { file } => {
            let src = fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            lp(&src, stdout).map_err(|e| format!("{}: {e}", file.display()).into())
        }
        Command::EnvelopeDump { model } => {
            let m = load(&model)?;
            let envs = build_envelopes(&m.inst.problem.system, &m.inst.envelopes)?;
            for (term, list) in &envs {
                for (i, e) in list.iter().enumerate() {
                    writeln!(stdout, "# {term} {i}")?;
                    write!(stdout, "{}", e.to_csv())?;
                }
            }
            Ok(EXIT_OK)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Res<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("QSYNTH_THREADS") {
        Ok(v) if !v.trim().is_empty() => Ok(Some(v.trim().parse().map_err(|_| format!("QSYNTH_THREADS: bad value `{v}`"))?)),
        _ => Ok(None),
    }
}

/// Parses `args` (including the program name) and runs the command; returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(stderr, "{}", e.render()) } else { write!(stdout, "{}", e.render()) };
            return code;
        }
    };
    let result = thread_count(cli.threads).and_then(|n| {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            b = b.num_threads(n);
        }
        let pool = b.build()?;
        let cli = Cli { threads: n, ..cli };
        pool.install(|| dispatch(cli, stdout, stderr))
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_ERROR
        }
    }
}
