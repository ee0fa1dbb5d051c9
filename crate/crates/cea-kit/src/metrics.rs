//! Training objective, image-quality metrics, and the paired-bootstrap
//! significance procedure.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CeaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the Fourier-magnitude term.
    pub lambda_f: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_f: 0.10 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_f < 0.0 {
            return Err(CeaError::Config("lambda_f must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean absolute pixel error plus lambda_f times the mean absolute difference
/// of per-channel 2-D DFT magnitudes. Differentiable.
pub fn loss_total(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    if pred.shape() != target.shape() {
        return Err(CeaError::Shape(format!(
            "loss_total: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let l1 = pred.sub(target)?.abs().mean_all();
    if cfg.lambda_f == 0.0 {
        return Ok(l1);
    }
    let fmag = pred
        .fft2_magnitude()?
        .sub(&target.fft2_magnitude()?)?
        .abs()
        .mean_all();
    l1.add(&fmag.scale(cfg.lambda_f))
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CeaError::Shape(format!(
            "psnr: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (p, t) = (pred.to_vec(), target.to_vec());
    let n = p.len() as f64;
    Ok(p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio in dB. Identical images return the infinity
/// sentinel; callers exclude those from means.
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for dy in -half..=half {
        for dx in -half..=half {
            let d2 = (dy * dy + dx * dx) as f64;
            w.push((-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Gaussian-window SSIM, mean over valid window positions and channels.
/// Standard constants: C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, peak = 1.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CeaError::Shape(format!(
            "ssim: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let [h, w, c] = *pred.shape() else {
        return Err(CeaError::Shape(format!(
            "ssim: expected [H, W, C], got {:?}",
            pred.shape()
        )));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CeaError::Shape(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = 0.01_f64 * 0.01;
    let c2 = 0.03_f64 * 0.03;
    let win = gaussian_window();
    let (pv, tv) = (pred.to_vec(), target.to_vec());
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy * SSIM_WINDOW + dx];
                        let idx = ((y0 + dy) * w + x0 + dx) * c + ch;
                        let (a, b) = (pv[idx], tv[idx]);
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "image_id,psnr_db,ssim")?;
    for r in records {
        let p = if r.psnr_db.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", r.psnr_db)
        };
        writeln!(f, "{},{},{:.6}", r.image_id, p, r.ssim)?;
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image_id,psnr_db,ssim") => {}
        other => {
            return Err(CeaError::Other(format!(
                "metrics CSV {}: bad header {other:?}",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CeaError::Other(format!(
                "metrics CSV line {}: expected 3 fields, got {}",
                ln + 2,
                parts.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            if s == "inf" {
                return Ok(f64::INFINITY);
            }
            s.parse()
                .map_err(|_| CeaError::Other(format!("metrics CSV: bad number {s:?}")))
        };
        out.push(MetricRecord {
            image_id: parts[0].to_string(),
            psnr_db: parse(parts[1])?,
            ssim: parse(parts[2])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Fraction of resampled means <= 0.
    pub p_boot: f64,
    pub n_resamples: usize,
    pub n_pairs: usize,
}

impl BootstrapSummary {
    /// Human-readable one-sided probability; zero occurrences report the
    /// resolution bound rather than an exact 0.
    pub fn p_boot_report(&self) -> String {
        if self.p_boot == 0.0 {
            format!("< {:.0e}", 1.0 / self.n_resamples as f64)
        } else {
            format!("{:.4}", self.p_boot)
        }
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile-bootstrap CI over means of resampled per-image differences, plus
/// the empirical one-sided probability that the mean is <= 0.
pub fn paired_bootstrap(
    diffs: &[f64],
    n_resamples: usize,
    ci: f64,
    seed: u64,
) -> Result<BootstrapSummary> {
    if diffs.is_empty() {
        return Err(CeaError::Config("paired_bootstrap: empty differences".into()));
    }
    if n_resamples == 0 || !(0.0..1.0).contains(&ci) {
        return Err(CeaError::Config(
            "paired_bootstrap: need n_resamples >= 1 and 0 <= ci < 1".into(),
        ));
    }
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(n_resamples);
    let mut below = 0usize;
    for _ in 0..n_resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.gen_range(0..n)];
        }
        let m = s / n as f64;
        if m <= 0.0 {
            below += 1;
        }
        means.push(m);
    }
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail = (1.0 - ci) / 2.0;
    Ok(BootstrapSummary {
        mean,
        ci_lo: quantile(&means, tail),
        ci_hi: quantile(&means, 1.0 - tail),
        p_boot: below as f64 / n_resamples as f64,
        n_resamples,
        n_pairs: n,
    })
}
