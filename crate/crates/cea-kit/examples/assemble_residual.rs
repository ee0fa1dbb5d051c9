//! Core assembly math on a handful of tokens: build a factor pair, normalize
//! it, and compare the per-token route against the two-matmul route and the
//! sparse top-k route.

use cea_kit::assembly::{
    assemble_residual_matrix, assemble_residual_tokenwise, assemble_residual_topk, rank_norm,
    CeaConfig, FactorPair, InjectionTarget, RoutingRule,
};
use cea_kit::tensor::ops::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, d, r) = (6, 8, 4);

    let raw = FactorPair::raw(
        randn(&[d, r], &mut rng),
        randn(&[r, d], &mut rng),
        InjectionTarget::Q,
    )
    .unwrap();
    let fp = rank_norm(&raw, 1e-6).unwrap();
    let cfg = CeaConfig {
        injection_targets: vec![InjectionTarget::Q],
        ..CeaConfig::with_rank(r)
    };

    let x = randn(&[n, d], &mut rng);
    let per_token = assemble_residual_tokenwise(&x, &fp, &cfg).unwrap();
    let matrix = assemble_residual_matrix(&x, &fp, &cfg).unwrap();
    let max_diff = per_token
        .to_vec()
        .iter()
        .zip(matrix.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("token-wise vs (XA)B: max |diff| = {max_diff:.3e}");

    let sparse_cfg = CeaConfig {
        routing_rule: RoutingRule::TopKSoftmax(2),
        ..cfg
    };
    let sparse = assemble_residual_topk(&x, &fp, &sparse_cfg).unwrap();
    let dense_norm: f64 = matrix.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
    let sparse_norm: f64 = sparse.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("residual norms: dense signed {dense_norm:.4}, top-2 softmax {sparse_norm:.4}");

    // The normalization removes the (cA, B/c) ambiguity: scaling a component
    // up in A and down in B leaves the assembled residual unchanged.
    let mut av = raw.a.to_vec();
    let mut bv = raw.b.to_vec();
    for i in 0..d {
        av[i * r] *= 3.0;
    }
    for j in 0..d {
        bv[j] /= 3.0;
    }
    let rescaled = rank_norm(
        &FactorPair::raw(
            cea_kit::Tensor::from_vec(&[d, r], av),
            cea_kit::Tensor::from_vec(&[r, d], bv),
            InjectionTarget::Q,
        )
        .unwrap(),
        1e-6,
    )
    .unwrap();
    let y2 = assemble_residual_matrix(&x, &rescaled, &CeaConfig {
        injection_targets: vec![InjectionTarget::Q],
        ..CeaConfig::with_rank(r)
    })
    .unwrap();
    let drift = matrix
        .to_vec()
        .iter()
        .zip(y2.to_vec())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("after 3x/(1/3x) component rescale + normalization: max |drift| = {drift:.3e}");
}
