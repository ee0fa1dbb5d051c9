//! Verify tape gradients against central finite differences, end to end
//! through factor generation, assembly, and injection.

use cea_kit::adapter::{generate_dynamic, AdapterWeights};
use cea_kit::assembly::{assemble_residual_matrix, CeaConfig};
use cea_kit::tensor::gradcheck::grad_check;
use cea_kit::tensor::ops::randn;
use cea_kit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = 4;
    let cfg = CeaConfig::with_rank(2);
    let weights = AdapterWeights::init(c, 2 * c, 2, 2, 2, &cfg.injection_targets, &mut rng).unwrap();
    let feats = randn(&[4, 4, c], &mut rng);
    let params = weights.named_params("adapter");

    let f = || {
        let factors = generate_dynamic(&feats, &weights, &cfg).unwrap();
        let x = feats.reshape(&[16, c]).unwrap();
        let mut loss = Tensor::scalar(0.0);
        for (_, fp) in &factors {
            let d = assemble_residual_matrix(&x, fp, &cfg).unwrap();
            loss = loss.add(&d.mul(&d).unwrap().mean_all()).unwrap();
        }
        loss
    };
    let report = grad_check(f, &params, 1e-5, 1e-4).unwrap();
    for (name, err) in &report.per_param {
        println!("{name:<24} max relative error {err:.3e}");
    }
    println!(
        "overall: {:.3e} (tolerance {:.0e}) -> {}",
        report.max_rel_err,
        report.tol,
        if report.passed() { "ok" } else { "FAILED" }
    );
}
