mod support;

use pourl_core::mlp::{batch_loss, loss_and_gradients};
use support::gradcheck::{check, check_against, random_case};

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut checked = 0;
    for seed in 0..100 {
        let (n, bad) = check(&random_case(seed));
        checked += n;
        if let Some(m) = bad.first() {
            panic!("case {seed}: coordinate {} analytic {:e} numeric {:e}", m.index, m.analytic, m.numeric);
        }
    }
    assert!(checked > 1000, "only {checked} coordinates compared");
}

#[test]
fn oracle_detects_small_errors() {
    let case = random_case(7);
    let (_, grads) = loss_and_gradients(&case.params, &case.target, &case.batch, case.gamma).unwrap();
    let mut flat = grads.flat();
    let i = flat.iter().position(|g| g.abs() > 1e-3).unwrap();
    flat[i] *= 1.0 + 1e-4;
    let (_, bad) = check_against(&case, &flat);
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].index, i);
}

#[test]
fn target_network_is_held_constant() {
    let mut case = random_case(11);
    case.batch.iter_mut().for_each(|t| t.terminal = false);
    let before = batch_loss(&case.params, &case.target, &case.batch, case.gamma).unwrap();
    for layer in &mut case.target.layers {
        for w in &mut layer.weights {
            *w *= 1.5;
        }
    }
    let after = batch_loss(&case.params, &case.target, &case.batch, case.gamma).unwrap();
    assert_ne!(before, after);
    let (_, bad) = check(&case);
    assert!(bad.is_empty());
}
