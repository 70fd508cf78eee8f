use fedshare_core::nn::{loss, loss_and_gradient, Arch, Batch, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const H: f64 = 1e-5;

/// Largest relative disagreement between backprop and central differences.
pub fn gradient_error(params: &ModelParams, batch: &Batch) -> f64 {
    let (_, grad) = loss_and_gradient(params, batch).unwrap();
    let base = params.flatten();
    let analytic = grad.flatten();
    let arch = params.arch();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus[k] += H;
        let mut minus = base.clone();
        minus[k] -= H;
        let fp = loss(&ModelParams::unflatten(&plus, arch).unwrap(), batch).unwrap();
        let fm = loss(&ModelParams::unflatten(&minus, arch).unwrap(), batch).unwrap();
        let numeric = (fp - fm) / (2.0 * H);
        let denom = (analytic[k].abs() + numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}

/// A net of at most 50 parameters with dense random weights, and a small batch.
pub fn random_case(seed: u64) -> (ModelParams, Batch) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let arch = loop {
        let depth = rng.gen_range(2..=3);
        let sizes: Vec<usize> = (0..depth + 1).map(|_| rng.gen_range(1..=5)).collect();
        let arch = Arch::new(sizes).unwrap();
        if arch.param_count() <= 50 && arch.outputs() >= 2 {
            break arch;
        }
    };
    let values: Vec<f64> = (0..arch.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let params = ModelParams::unflatten(&values, &arch).unwrap();
    let rows = rng.gen_range(1..=4);
    let inputs: Vec<f64> = (0..rows * arch.inputs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..arch.outputs())).collect();
    let batch = Batch::from_labels(inputs, &labels, arch.inputs(), arch.outputs()).unwrap();
    (params, batch)
}
