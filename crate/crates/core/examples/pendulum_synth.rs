use std::env;
use std::time::Instant;

use qsynth::linearize::{build_envelopes, linearize, EnvelopeConfig};
use qsynth::model::pendulum_problem;
use qsynth::quantize::pendulum_quantization;
use qsynth::rational::Rational;
use qsynth::synth::{synthesize, SynthOptions};

fn main() {
    let args: Vec<String> = env::args().collect();
    let f: Rational = args.get(1).map_or("0.5", |s| s.as_str()).parse().expect("F");
    let bits: u32 = args.get(2).map_or(8, |s| s.parse().expect("bits"));
    let p = pendulum_problem(f, Rational::new(1, 10), Rational::new(1, 10));
    let envs = build_envelopes(&p.system, &EnvelopeConfig::new()).expect("envelopes");
    let lin = linearize(&p.system, &envs).expect("linearize");
    let q = pendulum_quantization(bits);
    let t = Instant::now();
    let r = synthesize(&lin.system, &q, &p.init, &p.goal, None, SynthOptions::default()).expect("synth");
    print!("{}", r.report.to_text());
    let pi_state = q.quantize_f64(&[std::f64::consts::PI, 0.0]).expect("inside");
    println!("pi_in_dom: {}", r.controller.in_dom(pi_state));
    println!("wall: {:.1}", t.elapsed().as_secs_f64());
}
