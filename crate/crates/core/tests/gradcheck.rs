mod common;

use std::time::Instant;

use tangled::corpus::Split;
use tangled::objectives::TaskWeights;

use common::{gradcheck_params, masked_batch, max_gradient_error, tiny_samples};

fn check(weights: TaskWeights, label: &str) {
    let mut params = gradcheck_params();
    let samples = tiny_samples(Split::Train);
    let batch = masked_batch(&samples[..2], 0.5, 5);
    assert!(batch.plans.iter().all(|p| p.num_masked() > 0));
    let t = Instant::now();
    let (rel, at) = max_gradient_error(&mut params, &batch, &weights);
    eprintln!("{label}: max relative error {rel:.3e} ({at}) in {:.1}s", t.elapsed().as_secs_f64());
    assert!(rel < 1e-4, "{label}: {rel:e} at {at}");
}

fn only(mlm: f64, action: f64, object: f64, matching: f64) -> TaskWeights {
    TaskWeights { mlm, action, object, matching }
}

#[test]
fn masked_language_gradient() {
    check(only(1.0, 0.0, 0.0, 0.0), "mlm");
}

#[test]
fn masked_action_gradient() {
    check(only(0.0, 1.0, 0.0, 0.0), "action");
}

#[test]
fn masked_object_gradient() {
    check(only(0.0, 0.0, 1.0, 0.0), "object");
}

#[test]
fn matching_gradient() {
    check(only(0.0, 0.0, 0.0, 1.0), "matching");
}
