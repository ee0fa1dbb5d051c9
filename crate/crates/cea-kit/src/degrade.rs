//! Synthetic degradation operators, compositional chains, and toy dataset
//! generation with clean/degraded pairs.
//!
//! Operators work on plain pixel buffers ([H, W, C] tensors in [0, 1]); they
//! are data generation, not part of the differentiable path. Every operator is
//! the identity at its identity parameters and clips its output to [0, 1].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CeaError, Result};
use crate::tensor::{io, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Operator {
    /// Additive Gaussian noise; sigma on the 0-255 scale.
    Noise { sigma: f64 },
    /// Atmospheric scattering with a smooth non-uniform transmission field in
    /// [t0, 1] and global airlight.
    Haze { t0: f64, airlight: f64 },
    /// x = scale * y^gamma.
    Lowlight { gamma: f64, scale: f64 },
    /// Oriented bright streak overlay. `angle` in radians from vertical.
    Rain { density: f64, angle: f64, intensity: f64 },
    /// Gaussian blur with reflect padding.
    Blur { sigma: f64 },
    /// Bright disc overlay.
    Snow { density: f64, flake_size: f64 },
}

impl Operator {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CeaError::Config(msg));
        match *self {
            Operator::Noise { sigma } => {
                if sigma < 0.0 {
                    return bad(format!("noise sigma must be >= 0, got {sigma}"));
                }
            }
            Operator::Haze { t0, airlight } => {
                if !(0.0 < t0 && t0 <= 1.0) || !(0.0..=1.0).contains(&airlight) {
                    return bad(format!("haze requires t0 in (0,1], airlight in [0,1]; got t0={t0}, A={airlight}"));
                }
            }
            Operator::Lowlight { gamma, scale } => {
                if gamma < 1.0 || !(0.0 < scale && scale <= 1.0) {
                    return bad(format!("lowlight requires gamma >= 1, scale in (0,1]; got gamma={gamma}, scale={scale}"));
                }
            }
            Operator::Rain { density, intensity, .. } => {
                if density < 0.0 || !(0.0..=1.0).contains(&intensity) {
                    return bad(format!("rain requires density >= 0, intensity in [0,1]; got d={density}, i={intensity}"));
                }
            }
            Operator::Blur { sigma } => {
                if sigma < 0.0 {
                    return bad(format!("blur sigma must be >= 0, got {sigma}"));
                }
            }
            Operator::Snow { density, flake_size } => {
                if density < 0.0 || flake_size < 0.0 {
                    return bad(format!("snow requires non-negative density and flake size; got d={density}, f={flake_size}"));
                }
            }
        }
        Ok(())
    }
}

/// One operator plus the RNG seed it is applied with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainLink {
    #[serde(flatten)]
    pub op: Operator,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub chain: Vec<ChainLink>,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.chain.is_empty() || self.chain.len() > 3 {
            return Err(CeaError::Config(format!(
                "degradation chains have 1..=3 operators, got {}",
                self.chain.len()
            )));
        }
        for link in &self.chain {
            link.op.validate()?;
        }
        Ok(())
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(CeaError::Shape(format!("degradation expects [H, W, C], got {s:?}"))),
    }
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

pub fn apply_noise(y: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Operator::Noise { sigma }.validate()?;
    let (h, w, c) = dims3(y)?;
    if sigma == 0.0 {
        return Ok(y.detach());
    }
    let s = sigma / 255.0;
    let noise = crate::tensor::ops::randn(&[h, w, c], rng);
    let data = y
        .to_vec()
        .iter()
        .zip(noise.to_vec())
        .map(|(v, n)| clip01(v + s * n))
        .collect();
    Ok(Tensor::from_vec(&[h, w, c], data))
}

/// Smooth per-pixel field from three seeded low-frequency cosine modes,
/// min-max mapped to [lo, 1].
fn cosine_field(h: usize, w: usize, lo: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for _ in 0..3 {
        let fy: f64 = rng.gen_range(0.5..2.0);
        let fx: f64 = rng.gen_range(0.5..2.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.3..1.0);
        for yy in 0..h {
            for xx in 0..w {
                let arg = std::f64::consts::TAU
                    * (fy * yy as f64 / h as f64 + fx * xx as f64 / w as f64)
                    + phase;
                field[yy * w + xx] += amp * arg.cos();
            }
        }
    }
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for v in &mut field {
        let u = if span > 1e-12 { (*v - min) / span } else { 0.5 };
        *v = lo + (1.0 - lo) * u;
    }
    field
}

pub fn apply_haze(y: &Tensor, t0: f64, airlight: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Operator::Haze { t0, airlight }.validate()?;
    let (h, w, c) = dims3(y)?;
    if t0 == 1.0 {
        return Ok(y.detach());
    }
    let t = cosine_field(h, w, t0, rng);
    let yv = y.to_vec();
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = clip01(yv[p * c + ch] * t[p] + airlight * (1.0 - t[p]));
        }
    }
    Ok(Tensor::from_vec(&[h, w, c], out))
}

pub fn apply_lowlight(y: &Tensor, gamma: f64, scale: f64) -> Result<Tensor> {
    Operator::Lowlight { gamma, scale }.validate()?;
    let (h, w, c) = dims3(y)?;
    let data = y.to_vec().iter().map(|v| clip01(scale * v.powf(gamma))).collect();
    Ok(Tensor::from_vec(&[h, w, c], data))
}

const STREAK_LEN: usize = 9;

pub fn apply_rain(
    y: &Tensor,
    density: f64,
    angle: f64,
    intensity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    Operator::Rain { density, angle, intensity }.validate()?;
    let (h, w, c) = dims3(y)?;
    let mut out = y.to_vec();
    // Expected covered fraction ~ density (ignoring overlap).
    let n_streaks = (density * (h * w) as f64 / STREAK_LEN as f64).round() as usize;
    let (dy, dx) = (angle.cos(), angle.sin());
    for _ in 0..n_streaks {
        let y0: f64 = rng.gen_range(0.0..h as f64);
        let x0: f64 = rng.gen_range(0.0..w as f64);
        for s in 0..STREAK_LEN {
            let yy = (y0 + dy * s as f64).floor() as isize;
            let xx = (x0 + dx * s as f64).floor() as isize;
            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                continue;
            }
            let base = ((yy as usize) * w + xx as usize) * c;
            for ch in 0..c {
                out[base + ch] = clip01(out[base + ch] * (1.0 - intensity) + intensity);
            }
        }
    }
    Ok(Tensor::from_vec(&[h, w, c], out))
}

pub fn apply_blur(y: &Tensor, sigma: f64) -> Result<Tensor> {
    Operator::Blur { sigma }.validate()?;
    let (h, w, c) = dims3(y)?;
    if sigma == 0.0 {
        return Ok(y.detach());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Reflect without repeating the border sample until in range.
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let src = y.to_vec();
    // Horizontal pass, then vertical.
    let mut tmp = vec![0.0; h * w * c];
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(xx as isize + ki as isize - radius, w);
                    acc += kv * src[(yy * w + sx) * c + ch];
                }
                tmp[(yy * w + xx) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * c];
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(yy as isize + ki as isize - radius, h);
                    acc += kv * tmp[(sy * w + xx) * c + ch];
                }
                out[(yy * w + xx) * c + ch] = clip01(acc);
            }
        }
    }
    Ok(Tensor::from_vec(&[h, w, c], out))
}

pub fn apply_snow(
    y: &Tensor,
    density: f64,
    flake_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    Operator::Snow { density, flake_size }.validate()?;
    let (h, w, c) = dims3(y)?;
    let mut out = y.to_vec();
    let flake_area = std::f64::consts::PI * flake_size * flake_size;
    let n_flakes = (density * (h * w) as f64 / flake_area.max(1.0)).round() as usize;
    let alpha = 0.8;
    for _ in 0..n_flakes {
        let cy: f64 = rng.gen_range(0.0..h as f64);
        let cx: f64 = rng.gen_range(0.0..w as f64);
        let r = flake_size;
        let (y_lo, y_hi) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
        let (x_lo, x_hi) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
        for yy in y_lo..=y_hi {
            for xx in x_lo..=x_hi {
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                    continue;
                }
                let d2 = (yy as f64 + 0.5 - cy).powi(2) + (xx as f64 + 0.5 - cx).powi(2);
                if d2 > r * r {
                    continue;
                }
                let base = ((yy as usize) * w + xx as usize) * c;
                for ch in 0..c {
                    out[base + ch] = clip01(out[base + ch] * (1.0 - alpha) + alpha);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[h, w, c], out))
}

fn apply_link(y: &Tensor, link: &ChainLink) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(link.seed);
    match link.op {
        Operator::Noise { sigma } => apply_noise(y, sigma, &mut rng),
        Operator::Haze { t0, airlight } => apply_haze(y, t0, airlight, &mut rng),
        Operator::Lowlight { gamma, scale } => apply_lowlight(y, gamma, scale),
        Operator::Rain { density, angle, intensity } => {
            apply_rain(y, density, angle, intensity, &mut rng)
        }
        Operator::Blur { sigma } => apply_blur(y, sigma),
        Operator::Snow { density, flake_size } => apply_snow(y, density, flake_size, &mut rng),
    }
}

/// Apply a degradation chain left to right; each link uses its recorded seed.
pub fn compose(spec: &DegradationSpec, y: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let mut x = y.detach();
    for link in &spec.chain {
        x = apply_link(&x, link)?;
    }
    Ok(x)
}

/// The 11-category compositional mix: 4 singles, 5 doubles, 2 triples over
/// low-light (l), haze (h), rain (r), snow (s).
pub fn category_mix() -> Vec<&'static str> {
    vec![
        "l", "h", "r", "s", "l+h", "l+r", "l+s", "h+r", "h+s", "l+h+r", "l+h+s",
    ]
}

fn sample_operator(tag: char, rng: &mut ChaCha8Rng) -> Operator {
    match tag {
        'l' => Operator::Lowlight {
            gamma: rng.gen_range(1.5..2.5),
            scale: rng.gen_range(0.4..0.8),
        },
        'h' => Operator::Haze {
            t0: rng.gen_range(0.3..0.7),
            airlight: rng.gen_range(0.7..1.0),
        },
        'r' => Operator::Rain {
            density: rng.gen_range(0.02..0.08),
            angle: rng.gen_range(-0.6..0.6),
            intensity: rng.gen_range(0.5..0.9),
        },
        's' => Operator::Snow {
            density: rng.gen_range(0.01..0.04),
            flake_size: rng.gen_range(1.0..2.0),
        },
        other => unreachable!("unknown degradation tag {other}"),
    }
}

/// Random severity chain for one category string like "l+h+r".
pub fn sample_chain(category: &str, rng: &mut ChaCha8Rng) -> DegradationSpec {
    let chain = category
        .split('+')
        .map(|part| ChainLink {
            op: sample_operator(part.chars().next().unwrap(), rng),
            seed: rng.gen(),
        })
        .collect();
    DegradationSpec { chain }
}

/// Procedurally generated clean image families: linear gradients,
/// checkerboards, smooth cosine fields, and flat backgrounds with geometric
/// shapes. Values in [0, 1], spatially structured.
pub fn generate_clean(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let family = rng.gen_range(0..4u32);
    let mut data = vec![0.0; h * w * 3];
    match family {
        0 => {
            // Oriented gradient between two random colors.
            let c0: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c1: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (ang.sin(), ang.cos());
            for yy in 0..h {
                for xx in 0..w {
                    let t = 0.5
                        + 0.5 * (dy * (yy as f64 / h as f64 - 0.5) + dx * (xx as f64 / w as f64 - 0.5));
                    for ch in 0..3 {
                        data[(yy * w + xx) * 3 + ch] = clip01(c0[ch] * (1.0 - t) + c1[ch] * t);
                    }
                }
            }
        }
        1 => {
            // Checkerboard with random cell size and colors.
            let cell = rng.gen_range(2..=(h / 2).max(3));
            let c0: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c1: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            for yy in 0..h {
                for xx in 0..w {
                    let pick = if (yy / cell + xx / cell) % 2 == 0 { &c0 } else { &c1 };
                    for ch in 0..3 {
                        data[(yy * w + xx) * 3 + ch] = pick[ch];
                    }
                }
            }
        }
        2 => {
            // Smooth random field per channel.
            for ch in 0..3 {
                let field = cosine_field(h, w, 0.0, rng);
                for p in 0..h * w {
                    data[p * 3 + ch] = field[p];
                }
            }
        }
        _ => {
            // Flat background with a few rectangles and discs.
            let bg: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            for p in 0..h * w {
                for ch in 0..3 {
                    data[p * 3 + ch] = bg[ch];
                }
            }
            for _ in 0..rng.gen_range(2..6) {
                let col: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let disc = rng.gen_bool(0.5);
                let cy = rng.gen_range(0..h);
                let cx = rng.gen_range(0..w);
                let size = rng.gen_range(2..=(h / 3).max(3));
                for yy in 0..h {
                    for xx in 0..w {
                        let inside = if disc {
                            let d2 = (yy as isize - cy as isize).pow(2)
                                + (xx as isize - cx as isize).pow(2);
                            d2 <= (size * size) as isize
                        } else {
                            yy.abs_diff(cy) <= size && xx.abs_diff(cx) <= size
                        };
                        if inside {
                            for ch in 0..3 {
                                data[(yy * w + xx) * 3 + ch] = col[ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, 3], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    /// Images per category in the training split.
    pub train_per_category: usize,
    /// Images per category in the test split.
    pub test_per_category: usize,
    /// Category subset; defaults to the full 11-category mix.
    pub categories: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            train_per_category: 4,
            test_per_category: 2,
            categories: category_mix().iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: String,
    pub category: String,
    pub spec: DegradationSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub items: Vec<ManifestItem>,
}

/// Stable per-item seed: low 8 bytes of SHA-256 over (global seed, item id).
fn item_seed(global_seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Generate the toy dataset on disk: `manifest.json`, `clean/<id>.ceat`,
/// `degraded/<id>.ceat`. Bit-identical under the same (config, seed).
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if config.image_size == 0 {
        return Err(CeaError::Config("image_size must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir.join("clean"))?;
    std::fs::create_dir_all(out_dir.join("degraded"))?;
    let mut items = Vec::new();
    let hw = config.image_size;
    for (split, count) in [("train", config.train_per_category), ("test", config.test_per_category)]
    {
        for cat in &config.categories {
            for k in 0..count {
                let id = format!("{split}_{}_{k:03}", cat.replace('+', ""));
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &id));
                let clean = generate_clean(hw, hw, &mut rng);
                let spec = sample_chain(cat, &mut rng);
                let degraded = compose(&spec, &clean)?;
                io::save_tensor(&out_dir.join("clean").join(format!("{id}.ceat")), &clean)?;
                io::save_tensor(&out_dir.join("degraded").join(format!("{id}.ceat")), &degraded)?;
                items.push(ManifestItem {
                    id,
                    split: split.to_string(),
                    category: cat.clone(),
                    spec,
                });
            }
        }
    }
    let manifest = Manifest {
        seed,
        config: config.clone(),
        items,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join("manifest.json"),
    )?)?)
}

pub fn load_pair(dir: &Path, id: &str) -> Result<(Tensor, Tensor)> {
    let clean = io::load_tensor(&dir.join("clean").join(format!("{id}.ceat")))?;
    let degraded = io::load_tensor(&dir.join("degraded").join(format!("{id}.ceat")))?;
    Ok((clean, degraded))
}

/// SHA-256 over every regular file under `dir`, walked in sorted relative-path
/// order. Used for reproducibility checks.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    fn walk(base: &Path, dir: &Path, files: &mut Vec<(String, std::path::PathBuf)>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, files)?;
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                files.push((rel, path));
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(std::fs::read(path)?);
    }
    Ok(format!("{:x}", h.finalize()))
}
