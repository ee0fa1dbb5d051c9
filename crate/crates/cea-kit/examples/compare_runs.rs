//! Compare two model variants with the paired bootstrap: train briefly with
//! dense signed routing and with top-2 softmax routing on the same data and
//! seed, then resample the per-image PSNR differences.

use cea_kit::assembly::{CeaConfig, InjectionTarget, RoutingRule};
use cea_kit::backbone::BackboneConfig;
use cea_kit::degrade::{generate_dataset, DatasetConfig};
use cea_kit::harness::boot::{cmd_bootstrap, render_report};
use cea_kit::harness::config::{OptimConfig, RunConfig};
use cea_kit::harness::train::cmd_train;

fn main() {
    let work = std::env::temp_dir().join("cea_compare_runs");
    let data = work.join("data");
    generate_dataset(
        &DatasetConfig {
            image_size: 16,
            train_per_category: 6,
            test_per_category: 6,
            categories: vec!["r".into(), "s".into()],
        },
        5,
        &data,
    )
    .unwrap();

    let base = RunConfig {
        backbone: BackboneConfig {
            embed_dim: 8,
            encoder_blocks: vec![1, 1],
            decoder_blocks: vec![2, 2],
            latent_blocks: 1,
            refinement_blocks: 1,
            heads: vec![1, 2, 2],
            adapter_heads: 2,
            cea: CeaConfig {
                injection_targets: vec![InjectionTarget::V, InjectionTarget::FfnIn],
                ..CeaConfig::with_rank(4)
            },
            ..BackboneConfig::default()
        },
        optim: OptimConfig {
            lr: 2e-3,
            steps: 500,
            batch_size: 4,
            ..OptimConfig::default()
        },
        dataset: data,
        seed: 2,
        out_dir: work.join("dense"),
        ..RunConfig::default()
    };
    cmd_train(&base).unwrap();

    let mut sparse = base.clone();
    sparse.out_dir = work.join("top2");
    sparse.backbone.cea.routing_rule = RoutingRule::TopKSoftmax(2);
    cmd_train(&sparse).unwrap();

    let report = cmd_bootstrap(
        &base.out_dir.join("metrics_test.csv"),
        &sparse.out_dir.join("metrics_test.csv"),
        10_000,
        0.95,
        0,
    )
    .unwrap();
    println!("dense signed minus top-2 softmax, per-image test PSNR/SSIM:");
    print!("{}", render_report(&report));
}
