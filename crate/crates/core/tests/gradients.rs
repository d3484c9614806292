mod common;

use common::reference;
use ogan_lab::diffengine::{Graph, SeededRng};

#[test]
fn every_operator_matches_the_f64_reference() {
    for (i, (name, build)) in common::operator_cases().into_iter().enumerate() {
        let mut g = Graph::new();
        let (y, vars) = build(&mut g, &mut SeededRng::new(i as u64)).unwrap();
        let r = reference::check(&mut g, y, &vars, 12, 1000 + i as u64).unwrap();
        assert!(r.max_rel_err < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn reference_replay_reproduces_the_engine_forward() {
    let (g, y, _) = common::model_case(ogan_lab::faceswap::Architecture::SaeMini, ogan_lab::faceswap::Side::A, 5).unwrap();
    let (v, _) = reference::replay(&g, y, &Default::default());
    for (a, b) in v.iter().zip(g.value(y).data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

#[test]
fn models_and_generator_match_the_f64_reference() {
    for (name, r) in common::gradient_suite(0, 16).unwrap().into_iter().filter(|(_, r)| r.probes > 0) {
        assert!(r.max_rel_err < 1e-3, "{name}: {r:?}");
    }
}
