//! Apply each degradation operator (and the standard mixed-category chains)
//! to one synthetic clean image and print how much damage each does.

use cea_kit::degrade::{category_mix, compose, generate_clean, sample_chain};
use cea_kit::metrics::{psnr, ssim};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = generate_clean(32, 32, &mut rng);

    println!("{:<8} {:>9} {:>8}  chain", "category", "PSNR(dB)", "SSIM");
    for cat in category_mix() {
        let spec = sample_chain(cat, &mut rng);
        let degraded = compose(&spec, &clean).unwrap();
        let p = psnr(&degraded, &clean, 1.0).unwrap();
        let s = ssim(&degraded, &clean).unwrap();
        let ops: Vec<String> = spec
            .chain
            .iter()
            .map(|l| format!("{:?}", l.op).split('{').next().unwrap().trim().to_string())
            .collect();
        println!("{:<8} {:>9.2} {:>8.4}  {}", cat, p, s, ops.join(" -> "));
    }
}
