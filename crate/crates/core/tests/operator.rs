mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn wave_blocks_match_finite_differences() {
    let (cross, double) = operator_errors(10, 7);
    assert!(cross < 1e-3 && double < 1e-3, "{cross:e} {double:e}");
}

// Halving both steps must shrink the discrepancy about fourfold on any
// architecture: the analytic blocks are exact and the residual is
// second-order truncation.
#[test]
fn finite_difference_residual_is_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let p = random_net(&mut rng);
        let case = OperatorCase::draw(&mut rng, p);
        let coarse = case.errors(2e-4, 2e-7);
        let fine = case.errors(1e-4, 1e-7);
        for (c, f) in [(coarse.0, fine.0), (coarse.1, fine.1)] {
            if c > 1e-7 {
                let ratio = c / f;
                assert!((3.0..5.0).contains(&ratio), "coarse {c:e} fine {f:e}");
            } else {
                assert!(f < 1e-7, "coarse {c:e} fine {f:e}");
            }
        }
    }
}
