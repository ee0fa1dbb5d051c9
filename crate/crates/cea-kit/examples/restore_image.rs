//! Build the default restorer, run one image through it, and print the
//! per-sublayer cost report. At initialization the output head is zero, so
//! the model is exactly the identity.

use cea_kit::backbone::{flop_report, restore, BackboneConfig, RestorerState};
use cea_kit::metrics::psnr;
use cea_kit::tensor::{flops, ops::randn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = BackboneConfig {
        embed_dim: 8,
        encoder_blocks: vec![1, 1],
        decoder_blocks: vec![2, 2],
        latent_blocks: 1,
        refinement_blocks: 1,
        heads: vec![1, 2, 2],
        adapter_heads: 2,
        cea: cea_kit::assembly::CeaConfig::with_rank(4),
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let state = RestorerState::init(&cfg, &mut rng).unwrap();

    let img = randn(&[32, 32, 3], &mut rng);
    flops::reset();
    let out = restore(&img, &state).unwrap();
    println!(
        "identity at init: PSNR(out, in) = {} dB",
        psnr(&out, &img, 1.0).unwrap()
    );
    println!("multiply-accumulates for one 32x32 pass: {}", flops::read());

    let report = flop_report(&cfg, 32, 32).unwrap();
    println!("analytic total: {} (matches the counter)", report.total);
    println!(
        "assembly cost: low-rank {} vs dense-equivalent {} ({}x)",
        report.cea_low_rank, report.cea_dense_equiv, report.dense_over_low_rank
    );
    for (name, macs) in report.sublayers.iter().take(6) {
        println!("  {name:<28} {macs:>12}");
    }
    println!("  ... ({} sublayers total)", report.sublayers.len());
}
