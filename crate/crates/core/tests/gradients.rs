mod support;

use cse_core::network::Network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{check_gradients, random_input, ReferenceNet, COORDS_PER_MODEL};

#[test]
fn reference_forward_agrees_with_network() {
    for seed in 0..3 {
        let network = Network::seeded_random(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&mut rng, network.input_shape());
        let fast = network.logits(&x).unwrap();
        let slow = ReferenceNet::new(&network).evaluate(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
        for (a, b) in fast.data().iter().zip(&slow.logits) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut kinks = 0;
    let mut failures = Vec::new();
    for seed in 0..10 {
        let tally = check_gradients(seed);
        assert_eq!(tally.checked, COORDS_PER_MODEL);
        kinks += tally.kinks;
        failures.extend(tally.failures);
    }
    eprintln!("resampled {kinks} coordinates at activation boundaries");
    assert!(
        failures.is_empty(),
        "{} mismatches:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

#[test]
fn comparison_rejects_a_one_percent_error() {
    assert!(support::compare(2.0, 2.0005, 1.0));
    assert!(!support::compare(2.0, 2.02, 1.0));
    assert!(support::compare(0.0, 5e-7, 1.0));
}
