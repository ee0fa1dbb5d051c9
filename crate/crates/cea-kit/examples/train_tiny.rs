//! Generate a small paired dataset and train the restorer on it for a few
//! hundred steps, printing the loss trajectory endpoints and the test-split
//! category breakdown.

use cea_kit::assembly::{CeaConfig, InjectionTarget};
use cea_kit::backbone::BackboneConfig;
use cea_kit::degrade::{generate_dataset, DatasetConfig};
use cea_kit::harness::config::{OptimConfig, RunConfig};
use cea_kit::harness::train::cmd_train;

fn main() {
    let work = std::env::temp_dir().join("cea_train_tiny");
    let data = work.join("data");
    generate_dataset(
        &DatasetConfig {
            image_size: 16,
            train_per_category: 6,
            test_per_category: 4,
            categories: vec!["l".into(), "r".into(), "l+r".into()],
        },
        11,
        &data,
    )
    .unwrap();

    let cfg = RunConfig {
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
        seed: 1,
        out_dir: work.join("run"),
        ..RunConfig::default()
    };
    let art = cmd_train(&cfg).unwrap();
    println!(
        "{} steps: batch loss {:.4} -> {:.4}",
        art.steps_run, art.initial_loss, art.final_loss
    );
    println!(
        "test split: mean PSNR {:.2} dB, mean SSIM {:.4}",
        art.test_mean_psnr, art.test_mean_ssim
    );
    println!("artifacts under {}", art.out_dir.display());
}
