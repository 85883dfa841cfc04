use std::fmt::Write as _;
use std::fs;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsynth::codegen::{emit_c, CodegenSpec};
use qsynth::model::{as_dtlhs, ex2_problem};
use qsynth::quantize::{pendulum_quantization, QuantMap, Quantization};
use qsynth::rational::Rational;
use qsynth::synth::{synthesize, Controller, SynthOptions};

const DRIVER: &str = r#"
#include <stdio.h>
int ctrlLaw(const long long levels[QS_NVARS]);
int ctrlRegion(const long long levels[QS_NVARS]);
int main(void) {
    long long l[QS_NVARS];
    for (;;) {
        int i;
        for (i = 0; i < QS_NVARS; i++) {
            if (scanf("%lld", &l[i]) != 1) return 0;
        }
        printf("%d %d\n", ctrlLaw(l), ctrlRegion(l));
    }
}
"#;

/// Compiles the emitted source with a strict C99 driver and returns one
/// `(law, region)` pair per probe.
fn run_c(src: &str, probes: &[Vec<i64>]) -> Vec<(i64, bool)> {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("ctl.c");
    fs::write(&c, format!("{src}\n{DRIVER}")).unwrap();
    let exe = dir.path().join("ctl");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-pedantic", "-Werror", "-O1", "-o"])
        .arg(&exe)
        .arg(&c)
        .output()
        .expect("cc");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut input = String::new();
    for p in probes {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        writeln!(input, "{}", row.join(" ")).unwrap();
    }
    let inp = dir.path().join("in.txt");
    fs::write(&inp, input).unwrap();
    let out = Command::new(&exe).stdin(fs::File::open(&inp).unwrap()).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            let mut it = l.split(' ').map(|t| t.parse::<i64>().unwrap());
            (it.next().unwrap(), it.next().unwrap() == 1)
        })
        .collect()
}

fn check(k: &Controller, q: &Quantization) {
    let src = emit_c(&CodegenSpec::with_indices(k, q).unwrap()).unwrap();
    let mut probes: Vec<Vec<i64>> = (0..q.num_states()).map(|s| q.unpack_state(s)).collect();
    // Levels just outside every axis.
    for (i, m) in q.states.iter().enumerate() {
        for v in [m.first_level() - 1, m.last_level() + 1] {
            let mut p = q.unpack_state(0);
            p[i] = v;
            probes.push(p);
        }
    }
    let got = run_c(&src, &probes);
    assert_eq!(got.len(), probes.len());
    for (s, (law, region)) in got.iter().enumerate().take(q.num_states()) {
        let want = k.action(s).map_or(-1, |a| a as i64);
        assert_eq!((*law, *region), (want, want >= 0), "state {s}");
    }
    assert!(got[q.num_states()..].iter().all(|&(l, r)| l == -1 && !r));
}

#[test]
fn ex2_c_matches_controller() {
    let p = ex2_problem(Rational::new(1, 10));
    let q = Quantization::new(
        vec![QuantMap::floor_scale("x", Rational::from(-2), Rational::new(5, 2), Rational::from(8)).unwrap()],
        vec![QuantMap::identity("u", 0, 1).unwrap()],
    );
    let r = synthesize(&as_dtlhs(&p.system).unwrap(), &q, &p.init, &p.goal, None, SynthOptions::default()).unwrap();
    check(&r.controller, &q);
}

#[test]
fn pendulum_c_matches_random_controllers() {
    let q = pendulum_quantization(5);
    let n = q.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for density in [0.1, 0.6, 1.0] {
        let mut k = Controller { num_actions: q.num_actions(), layer: vec![0; n], enabled: vec![0; n] };
        for s in 0..n {
            if rng.gen_bool(density) {
                k.layer[s] = 1;
                k.enabled[s] = rng.gen_range(1..8);
            }
        }
        check(&k, &q);
    }
}
