mod common;

use common::*;
use drugprot_core::model::{backward_gradients, init_params, HeadKind, Parameters};

#[test]
fn backward_matches_central_differences_for_every_head() {
    for (k, kind) in HeadKind::ALL.into_iter().enumerate() {
        let cfg = tiny_config(kind, 100 + k as u64);
        let params = init_params(&cfg).unwrap();
        let mut r = rng(7 + k as u64);
        let batch = random_batch(&mut r, 3, &cfg);
        let weights = random_weights(&mut r);
        let refs: Vec<_> = batch.iter().map(|(s, l)| (s, *l)).collect();
        let (_, grads) = backward_gradients(&params, &refs, &weights).unwrap();
        let numeric = finite_difference(&params, &batch, &weights, 1e-5);
        for (name, err) in max_relative_errors(&grads, &numeric) {
            println!("{kind:?} {name}: {err:.2e}");
            assert!(err < 1e-4, "{kind:?} {name}: relative error {err:e}");
        }
        assert!(grads.l2_norm() > 0.0);
    }
}
