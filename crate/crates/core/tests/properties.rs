mod common;

use proptest::prelude::*;

use common::*;
use qsynth::codegen::{emit_c, CTables, CodegenSpec, CommandTable, DecisionTree};
use qsynth::linearize::{build_envelopes, linearize, taylor_envelope, uniform_cells, EnvelopeConfig};
use qsynth::model::{add_relation, as_dtlhs, next_name, Dths, NonlinearTerm, StateVar};
use qsynth::predicates::{interval_bounds, LinearExpr, Var};
use qsynth::quantize::{QuantMap, Quantization, Quantized};
use qsynth::rational::Rational;
use qsynth::synth::Controller;
use qsynth::syntax::Scope;

fn arb_rat() -> impl Strategy<Value = Rational> {
    (-1000i64..=1000, 1i64..=97).prop_map(|(a, b)| q(a, b))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn guard_elimination_equivalent(c in arb_guard_case()) {
        check_guard_case(c)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn milp_agrees_with_grid(c in arb_milp_case()) {
        check_milp_case(c)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mgo_matches_oracle(c in arb_lts(200, 3)) {
        check_mgo(c)?;
    }

    #[test]
    fn refinement_preserves_solutions(c in arb_lts_pair(40)) {
        check_refinement_preservation(c)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rational_field_laws(a in arb_rat(), b in arb_rat(), c in arb_rat()) {
        if !a.is_zero() {
            prop_assert_eq!(&a * &a.recip(), Rational::one());
            if !b.is_zero() {
                prop_assert_eq!(&(&a / &b) * &b, a.clone());
            }
        }
        prop_assert_eq!(&(&a + &b) + &c, &a + &(&b + &c));
        prop_assert_eq!(&a * &(&b + &c), &(&a * &b) + &(&a * &c));
        let parsed: Rational = a.to_string().parse().unwrap();
        prop_assert_eq!(parsed, a);
    }

    #[test]
    fn interval_bounds_attained_at_vertices(
        coefs in prop::collection::vec(-5i64..=5, 1..=4),
        lows in prop::collection::vec(-4i64..=3, 4),
        widths in prop::collection::vec(1i64..=4, 4),
        k in -5i64..=5,
    ) {
        let n = coefs.len();
        let vars: Vec<Var> = (0..n).map(|i| Var::continuous(format!("v{i}"), qi(lows[i]), qi(lows[i] + widths[i])).unwrap()).collect();
        let e = LinearExpr::from_terms((0..n).map(|i| (format!("v{i}"), qi(coefs[i]))), qi(k));
        let (lo, hi) = interval_bounds(&e, &vars).unwrap();
        let mut vals = Vec::new();
        for mask in 0..(1u32 << n) {
            let v = (0..n).map(|i| (format!("v{i}"), if mask >> i & 1 == 1 { qi(lows[i] + widths[i]) } else { qi(lows[i]) })).collect();
            vals.push(e.eval(&v).unwrap());
        }
        prop_assert_eq!(lo, vals.iter().min().unwrap().clone());
        prop_assert_eq!(hi, vals.iter().max().unwrap().clone());
    }

    #[test]
    fn refinement_is_a_partial_order(c in arb_lts(12, 2), extra in prop::collection::vec((0usize..12, 0usize..2, 0usize..12), 0..6)) {
        let a = c.lts;
        let n = a.num_states;
        let grow = |l: &qsynth::model::ExplicitLts, k: usize| {
            let mut t: Vec<_> = l.transitions.iter().copied().collect();
            t.extend(extra.iter().take(k).map(|&(s, act, s2)| (s % n, act % l.num_actions, s2 % n)));
            qsynth::model::ExplicitLts::new(n, l.num_actions, t)
        };
        let b = grow(&a, 3);
        let cc = grow(&b, 6);
        prop_assert!(a.refines(&a).unwrap());
        prop_assert!(a.refines(&b).unwrap() && b.refines(&cc).unwrap() && a.refines(&cc).unwrap());
        if b.refines(&a).unwrap() {
            prop_assert_eq!(&a.transitions, &b.transitions);
        }
    }

    #[test]
    fn quantization_monotone_and_round_trip(lo in -8i64..=0, w in 1i64..=8, bits in 1u32..=6, k in 1i64..=8, a in 0u32..=1000, b in 0u32..=1000) {
        let (lo, hi) = (qi(lo), qi(lo + w));
        let maps = [QuantMap::uniform("x", lo.clone(), hi.clone(), bits).unwrap(), QuantMap::floor_scale("x", lo.clone(), hi.clone(), qi(k)).unwrap()];
        let at = |t: u32| &lo + &(&(&hi - &lo) * &q(t as i64, 1000));
        let (v, ww) = if a <= b { (at(a), at(b)) } else { (at(b), at(a)) };
        for m in &maps {
            prop_assert!(m.quantize(&v).unwrap() <= m.quantize(&ww).unwrap());
            for l in m.first_level()..=m.last_level() {
                let (c0, c1) = m.cell(l).unwrap();
                let mid = (&c0 + &c1) / Rational::from(2);
                prop_assert_eq!(m.quantize(&mid), Some(l));
            }
        }
        prop_assert_eq!(maps[0].step(), (&hi - &lo) / Rational::from(1i64 << bits));
        let widest = (0..1i64 << bits).map(|l| { let (a, b) = maps[0].cell(l).unwrap(); &b - &a }).max().unwrap();
        prop_assert_eq!(widest, maps[0].step());
    }

    #[test]
    fn state_quantization_round_trip(bits1 in 1u32..=4, k in 1i64..=6) {
        let qz = Quantization::new(
            vec![QuantMap::uniform("a", qi(-2), qi(3), bits1).unwrap(), QuantMap::floor_scale("b", qi(-1), q(5, 2), qi(k)).unwrap()],
            vec![QuantMap::identity("u", 0, 1).unwrap()],
        );
        for s in 0..qz.num_states() {
            let centre: Vec<Rational> = qz.state_box(s).iter().map(|(a, b)| (a + b) / Rational::from(2)).collect();
            match qz.quantize(&centre) {
                Quantized::Inside(l) => prop_assert_eq!(qz.pack_state(&l).unwrap(), s),
                Quantized::Outside => prop_assert!(false, "centre outside"),
            }
        }
    }

    #[test]
    fn taylor_refinement_never_loosens(func in prop::sample::select(vec!["sin", "cos", "sq"]), a in -30i64..=20, w in 1i64..=30, n in 1usize..=8) {
        let term = NonlinearTerm::builtin(func, "x").unwrap();
        let (lo, hi) = (q(a, 10), q(a + w, 10));
        let coarse = taylor_envelope(&term, &uniform_cells(&lo, &hi, n), &[]).unwrap();
        let fine = taylor_envelope(&term, &uniform_cells(&lo, &hi, 2 * n), &[]).unwrap();
        // Gradient coefficients are rounded outward at 2^-30.
        prop_assert!(fine.max_gap() <= coarse.max_gap() + 1e-8, "{} > {}", fine.max_gap(), coarse.max_gap());
    }

    #[test]
    fn random_dths_linearization_is_sound(func in prop::sample::select(vec!["sin", "cos", "sq"]), c1 in -2i64..=2, c2 in -1i64..=1, cells in 1usize..=6) {
        let mut h = Dths {
            states: vec![StateVar { var: Var::continuous("x", qi(-2), qi(2)).unwrap(), wrap: None }],
            inputs: vec![Var::boolean("u")],
            aux: vec![],
            terms: vec![],
            items: vec![],
        };
        add_relation(&mut h, &format!("x' = x + 1/10*({c1}*{func}(x) + {c2}*u)"), &Scope::default()).unwrap();
        let mut cfg = EnvelopeConfig::new();
        cfg.insert(func.to_string(), (qsynth::linearize::EnvelopeStyle::Taylor, cells));
        let lin = linearize(&h, &build_envelopes(&h, &cfg).unwrap()).unwrap();
        let up = h.update_fn().unwrap();
        for i in 0..=20 {
            let x = &qi(-2) + &q(i, 5);
            for u in 0..=1 {
                let n = up.step(&[x.to_f64()], &[u as f64]);
                if !(-2.0..=2.0).contains(&n[0]) {
                    continue;
                }
                // Linear part exact, the built-in term from f64.
                let fx = match func {
                    "sin" => x.to_f64().sin(),
                    "cos" => x.to_f64().cos(),
                    _ => x.to_f64() * x.to_f64(),
                };
                let xn = &(&x + &q(c2 * u, 10)) + &Rational::from_f64(c1 as f64 * fx / 10.0).unwrap();
                prop_assert!((xn.to_f64() - n[0]).abs() < 1e-12);
                if xn.abs() > qi(2) {
                    continue;
                }
                let ok = lin.system.lts_step(&val(&[("x", x.clone())]), &val(&[("u", qi(u))]), &val(&[("x", xn)])).unwrap();
                prop_assert!(ok, "x={} u={}", x, u);
            }
        }
    }

    #[test]
    fn dtlhs_step_matches_aux_enumeration(a in -3i64..=3, b in -3i64..=3, c in 0i64..=2) {
        let mut h = Dths {
            states: vec![StateVar { var: Var::continuous("x", qi(-3), qi(3)).unwrap(), wrap: None }],
            inputs: vec![Var::boolean("u")],
            aux: vec![Var::boolean("y")],
            terms: vec![],
            items: vec![],
        };
        let sc = Scope::default();
        add_relation(&mut h, &format!("y -> x' = x + {a}/4"), &sc).unwrap();
        add_relation(&mut h, &format!("!y -> x' = x - {b}/4*u"), &sc).unwrap();
        add_relation(&mut h, &format!("y -> x <= {c}"), &sc).unwrap();
        let d = as_dtlhs(&h).unwrap();
        for xi in -6..=6 {
            let x = q(xi, 2);
            for xn in -12..=12 {
                let xn = q(xn, 4);
                for u in 0..=1 {
                    let got = d.lts_step(&val(&[("x", x.clone())]), &val(&[("u", qi(u))]), &val(&[("x", xn.clone())])).unwrap();
                    let expect = (0..=1).any(|y| {
                        let v = val(&[("x", x.clone()), ("u", qi(u)), ("y", qi(y)), (next_name("x").as_str(), xn.clone())]);
                        d.n.evaluate(&v).unwrap()
                    });
                    prop_assert_eq!(got, expect, "x={} u={} x'={}", x, u, xn);
                }
            }
        }
    }

    #[test]
    fn codegen_agrees_with_controller(
        bits in prop::collection::vec(1u32..=3, 1..=3),
        na in 1usize..=3,
        seed in prop::collection::vec((0u32..=4, 1u64..=7), 64),
    ) {
        let states: Vec<QuantMap> = bits.iter().enumerate().map(|(i, &b)| QuantMap::uniform(format!("v{i}"), qi(0), qi(1), b).unwrap()).collect();
        let qz = Quantization::new(states, vec![QuantMap::identity("u", 0, na as i64 - 1).unwrap()]);
        let ns = qz.num_states();
        let mask = (1u64 << na) - 1;
        let mut layer: Vec<u32> = (0..ns).map(|s| seed[s % 64].0).collect();
        let mut enabled: Vec<u64> = (0..ns).map(|s| if layer[s] > 0 { (seed[s % 64].1 & mask).max(1) } else { 0 }).collect();
        if layer.iter().all(|&l| l == 0) {
            layer[0] = 1;
            enabled[0] = 1;
        }
        let k = Controller { num_actions: na, layer, enabled };
        let spec = CodegenSpec::with_indices(&k, &qz).unwrap();
        let tree = DecisionTree::build(&spec).unwrap();
        let total_bits: u32 = qz.states.iter().map(|m| m.bits()).sum();
        prop_assert!(tree.depth() <= total_bits as usize);
        let c = CTables::parse(&emit_c(&spec).unwrap()).unwrap();
        let table = CommandTable::from_spec(&spec);
        let back = CommandTable::from_bytes(&table.to_bytes()).unwrap();
        prop_assert_eq!(&back, &table);
        let dims: Vec<usize> = qz.states.iter().map(|m| m.levels()).collect();
        let (k2, d2) = Controller::from_bytes(&k.to_bytes(&dims)).unwrap();
        prop_assert_eq!(&k2, &k);
        prop_assert_eq!(d2, dims);
        for s in 0..ns {
            let levels = qz.unpack_state(s);
            let want = k.action(s).map_or(-1, |a| a as i64);
            prop_assert_eq!(tree.eval(&levels) as i64, want);
            prop_assert_eq!(c.ctrl_law(&levels), want);
            prop_assert_eq!(c.ctrl_region(&levels), k.in_dom(s));
            prop_assert_eq!(tree.region(&levels), k.in_dom(s));
            prop_assert_eq!(table.lookup(&levels) as i64, want);
        }
    }
}

#[test]
fn pendulum_linearization_accepts_grid() {
    let (ok, total) = pendulum_grid(qi(2), 50, 50);
    assert!(total > 6000, "{total}");
    assert_eq!(ok, total);
}

#[test]
fn linear_items_survive_linearization() {
    let h = qsynth::model::ex2(q(1, 10));
    let lin = linearize(&h, &build_envelopes(&h, &EnvelopeConfig::new()).unwrap()).unwrap();
    let direct = as_dtlhs(&h).unwrap();
    assert_eq!(lin.system.n.items, direct.n.items);
}
