use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsynth::codegen::{emit_c, CTables, CodegenSpec, CommandTable};
use qsynth::model::{as_dtlhs, ex2, ex2_problem, pendulum, UpdateFn};
use qsynth::quantize::{pendulum_quantization, relax_goal, QuantMap, Quantization};
use qsynth::rational::Rational;
use qsynth::sim::{simulate, Backend, DisturbanceMode, SimConfig, Trajectory};
use qsynth::synth::{synthesize, Controller, SynthOptions};

fn euler(plant: &UpdateFn, x0: [f64; 2], steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = plant.step(&x, &[0.0]);
    }
    x
}

fn rk4(x0: [f64; 2], t: f64, n: usize) -> [f64; 2] {
    let f = |x: [f64; 2]| [x[1], x[0].sin()];
    let h = t / n as f64;
    let mut x = x0;
    for _ in 0..n {
        let add = |a: [f64; 2], k: [f64; 2], s: f64| [a[0] + s * k[0], a[1] + s * k[1]];
        let k1 = f(x);
        let k2 = f(add(x, k1, h / 2.0));
        let k3 = f(add(x, k2, h / 2.0));
        let k4 = f(add(x, k3, h));
        x = [
            x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
    }
    x
}

#[test]
fn euler_is_first_order() {
    let x0 = [0.5, 0.0];
    let exact = rk4(x0, 1.0, 20_000);
    let err = |ts: f64| {
        let p = pendulum(Rational::from(0), Rational::from_f64(ts).unwrap()).update_fn().unwrap();
        let x = euler(&p, x0, (1.0 / ts).round() as usize);
        ((x[0] - exact[0]).powi(2) + (x[1] - exact[1]).powi(2)).sqrt()
    };
    let (e1, e2, e3) = (err(1e-3), err(5e-4), err(2.5e-4));
    for r in [e1 / e2, e2 / e3] {
        assert!((1.5..=2.5).contains(&r), "ratio {r} ({e1}, {e2}, {e3})");
    }
}

fn hold_still(q: &Quantization) -> Controller {
    // Every state enables only the u = 0 command.
    let a = q.pack_action(&[0]).unwrap();
    Controller { num_actions: q.num_actions(), layer: vec![1; q.num_states()], enabled: vec![1 << a; q.num_states()] }
}

fn base<'a>(plant: &'a UpdateFn, backend: Backend<'a>, q: &'a Quantization, x0: Vec<f64>) -> SimConfig<'a> {
    SimConfig {
        plant,
        backend,
        quantization: q,
        goal: Vec::new(),
        period: 0.1,
        ts: 1e-4,
        disturbance: 0.0,
        mode: DisturbanceMode::Multiplicative,
        seed: 0,
        horizon: 10.0,
        dwell: 0.0,
        x0,
    }
}

#[test]
fn unforced_energy_is_nearly_conserved() {
    let q = pendulum_quantization(5);
    let k = hold_still(&q);
    let plant = pendulum(Rational::from(2), Rational::new(1, 100_000)).update_fn().unwrap();
    let mut cfg = base(&plant, Backend::Controller(&k), &q, vec![0.5, 0.0]);
    cfg.ts = 1e-5;
    let tr = simulate(&cfg).unwrap();
    assert!(!tr.fault && !tr.left_admissible);
    assert!((tr.end_time - 10.0).abs() < 1e-9);
    // Upright angle at x1 = 0: x2' = sin x1 conserves x2^2/2 + cos x1.
    let energy = |x: &[f64]| 0.5 * x[1] * x[1] + x[0].cos();
    let e0 = energy(&tr.samples[0].x);
    let drift = tr.samples.iter().map(|s| (energy(&s.x) - e0).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-3, "drift {drift}");
    // It did swing through the bottom.
    assert!(tr.samples.iter().any(|s| s.x[0].abs() > 3.0));
}

fn same_run(a: &Trajectory, b: &Trajectory) {
    assert_eq!(a.samples, b.samples);
    assert_eq!((a.fault, a.left_admissible, a.settle_time), (b.fault, b.left_admissible, b.settle_time));
}

fn three_backends(plant: &UpdateFn, q: &Quantization, k: &Controller, cfgs: &[(Vec<f64>, u64, f64)], goal: &[qsynth::predicates::Constraint]) -> usize {
    let spec = CodegenSpec::with_indices(k, q).unwrap();
    let table = CommandTable::from_spec(&spec);
    let tree = CTables::parse(&emit_c(&spec).unwrap()).unwrap();
    let mut faults = 0;
    for (x0, seed, d) in cfgs {
        let run = |b: Backend| {
            let mut c = base(plant, b, q, x0.clone());
            c.goal = goal.to_vec();
            c.seed = *seed;
            c.disturbance = *d;
            c.horizon = 5.0;
            c.ts = 1e-3;
            simulate(&c).unwrap()
        };
        let a = run(Backend::Controller(k));
        same_run(&a, &run(Backend::Table(&table)));
        same_run(&a, &run(Backend::CTree(&tree)));
        faults += a.fault as usize;
    }
    faults
}

#[test]
fn backends_agree_on_ex2() {
    let p = ex2_problem(Rational::new(1, 10));
    let q = Quantization::new(
        vec![QuantMap::floor_scale("x", Rational::from(-2), Rational::new(5, 2), Rational::from(8)).unwrap()],
        vec![QuantMap::identity("u", 0, 1).unwrap()],
    );
    let r = synthesize(&as_dtlhs(&p.system).unwrap(), &q, &p.init, &p.goal, None, SynthOptions::default()).unwrap();
    let goal = relax_goal(&p.goal.items, &q.step(), &[p.system.states[0].var.clone()]).unwrap();
    let plant = ex2(Rational::new(1, 1000)).update_fn().unwrap();
    let cfgs: Vec<_> = [-2.0, -1.3, 0.4, 1.26, 2.5].iter().enumerate().map(|(i, &x)| (vec![x], i as u64, 0.02)).collect();
    assert_eq!(three_backends(&plant, &q, &r.controller, &cfgs, &goal), 0);
}

#[test]
fn backends_agree_on_random_pendulum_controller() {
    let q = pendulum_quantization(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = q.num_states();
    let mut k = Controller { num_actions: q.num_actions(), layer: vec![0; n], enabled: vec![0; n] };
    for s in 0..n {
        if rng.gen_bool(0.9) {
            k.layer[s] = rng.gen_range(1..5);
            k.enabled[s] = rng.gen_range(1..8);
        }
    }
    let plant = pendulum(Rational::from(2), Rational::new(1, 1000)).update_fn().unwrap();
    let cfgs: Vec<_> = (0..12).map(|i| (vec![rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)], i, 0.04)).collect();
    let faults = three_backends(&plant, &q, &k, &cfgs, &[]);
    // Holes in the domain are hit on some runs, so fault handling is compared too.
    assert!(faults > 0);
}
