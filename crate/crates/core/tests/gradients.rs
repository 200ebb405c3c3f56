mod common;

use common::{gradient_error, invariance_holds, FD_TOL, LOSSES, N_INSTANCES};
use retro_core::rng;

#[test]
fn every_loss_matches_central_differences() {
    for loss in LOSSES {
        for i in 0..N_INSTANCES as u64 {
            let err = gradient_error(loss, rng::derive(0x9c4d, i));
            assert!(err <= FD_TOL, "{loss} instance {i}: relative error {err:.3e}");
        }
    }
}

#[test]
fn encoder_is_permutation_and_duplication_invariant() {
    for seed in 0..100 {
        assert!(invariance_holds(seed), "context {seed}");
    }
}
