//! Central finite differences against reverse-mode gradients for every tape
//! operation, at both precisions, plus sign-fault detection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stnhcl::numeric::{GradCheck, Graph, OpKind, Scalar, ScalarFn, Var};
use stnhcl::suite::{generator_case, hypergraph_case, op_case, OpCase, OPS};
use stnhcl::Result;

const TRIALS: usize = 100;

#[test]
fn every_op_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let check = GradCheck::default();
    for &kind in OPS {
        for t in 0..TRIALS {
            let (case, inputs) = op_case(kind, &mut rng);
            let r = check.run::<f64, _>(&case, &inputs).unwrap();
            assert!(r.passes(1e-6), "{kind:?} trial {t}: {r:?} {case:?}");
        }
    }
}

#[test]
fn every_op_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let check = GradCheck {
        eps: 1e-5,
        ..GradCheck::default()
    };
    for &kind in OPS {
        for t in 0..TRIALS {
            let (case, inputs) = op_case(kind, &mut rng);
            let r = check.run::<f32, _>(&case, &inputs).unwrap();
            assert!(r.passes(1e-4), "{kind:?} trial {t}: {r:?} {case:?}");
        }
    }
}

struct Faulty(OpCase);

impl ScalarFn for Faulty {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        g.inject_sign_fault(self.0.kind);
        self.0.eval(g, p)
    }
}

#[test]
fn flipped_backward_rules_are_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for &kind in OPS {
        let (case, inputs) = op_case(kind, &mut rng);
        let r = GradCheck::default().run::<f64, _>(&Faulty(case), &inputs).unwrap();
        assert!(!r.passes(1e-4), "{kind:?} fault went unnoticed");
    }
}

#[test]
fn hypergraph_losses_and_generator_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let check = GradCheck {
        eps: 1e-5,
        ..GradCheck::default()
    };
    for _ in 0..5 {
        let (case, inputs) = hypergraph_case(8, 3, 16, None, &mut rng).unwrap();
        let r = check.run::<f64, _>(&case, &inputs).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
    }
    let (case, inputs) = generator_case(16, 8, 3, 16, &mut rng).unwrap();
    let r = GradCheck {
        max_entries: Some(8),
        ..check
    }
    .run::<f64, _>(&case, &inputs)
    .unwrap();
    assert!(r.passes(1e-5), "{r:?}");
    let r = GradCheck {
        max_entries: Some(4),
        ..check
    }
    .run::<f32, _>(&case, &inputs)
    .unwrap();
    assert!(r.passes(1e-3), "{r:?}");
}

#[test]
fn op_list_is_complete() {
    assert!(!OPS.contains(&OpKind::Leaf));
    assert_eq!(OPS.len(), 32);
}
