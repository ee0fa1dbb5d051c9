//! Toy asymmetric U-shaped Transformer restorer with configurable residual
//! assembly in alternating decoder blocks.
//!
//! Pre-norm blocks, full spatial self-attention over flattened tokens, GELU
//! FFN, no biases anywhere. Channels double per downsampling stage; decoder
//! stages fuse encoder skips through a 1x1 projection. The output head is
//! zero-initialized so an untrained network is the identity map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    generate_dynamic, generate_gap_mlp, target_out_dim, AdapterWeights, GapMlpWeights,
    StaticFactors,
};
use crate::assembly::{
    assemble_residual_matrix, assemble_residual_topk, inject, CeaConfig, FactorPair, FactorSource,
    InjectionTarget, RoutingRule,
};
use crate::error::{CeaError, Result};
use crate::tensor::ops::uniform;
use crate::tensor::{io, Tensor};

/// Which dynamic factor generator a CEA-equipped block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Condense + learnable-query cross-attention probing.
    QueryProbe,
    /// Global-average-pool + two-layer MLP baseline.
    GapMlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Embedding width at full resolution; doubles per downsampling stage.
    pub embed_dim: usize,
    pub encoder_blocks: Vec<usize>,
    pub latent_blocks: usize,
    pub decoder_blocks: Vec<usize>,
    pub refinement_blocks: usize,
    /// Attention heads per level: one per encoder/decoder stage plus the latent.
    pub heads: Vec<usize>,
    pub ffn_ratio: usize,
    /// Whether decoder blocks carry residual assembly at all.
    pub cea_enabled: bool,
    pub generator: GeneratorKind,
    /// Cross-attention heads inside the factor generator.
    pub adapter_heads: usize,
    /// Spatial condensation stride inside the factor generator.
    pub condense_stride: usize,
    pub cea: CeaConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 16,
            encoder_blocks: vec![1, 1, 1],
            latent_blocks: 1,
            decoder_blocks: vec![2, 2, 2],
            refinement_blocks: 1,
            heads: vec![1, 2, 2, 4],
            ffn_ratio: 2,
            cea_enabled: true,
            generator: GeneratorKind::QueryProbe,
            adapter_heads: 4,
            condense_stride: 2,
            cea: CeaConfig::with_rank(8),
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.encoder_blocks.len()
    }

    /// Channel width at resolution level `i` (0 = full resolution).
    pub fn dim_at(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return Err(CeaError::Config("at least one encoder stage required".into()));
        }
        if self.decoder_blocks.len() != s {
            return Err(CeaError::Config(format!(
                "decoder has {} stages, encoder has {s}",
                self.decoder_blocks.len()
            )));
        }
        if self.heads.len() != s + 1 {
            return Err(CeaError::Config(format!(
                "expected {} head counts (stages + latent), got {}",
                s + 1,
                self.heads.len()
            )));
        }
        for (lvl, &h) in self.heads.iter().enumerate() {
            let d = self.dim_at(lvl.min(s));
            if h == 0 || d % h != 0 {
                return Err(CeaError::Config(format!(
                    "level {lvl}: {h} heads do not divide channel dim {d}"
                )));
            }
        }
        if self.ffn_ratio == 0 {
            return Err(CeaError::Config("ffn_ratio must be >= 1".into()));
        }
        if self.cea_enabled {
            self.cea.validate()?;
            for lvl in 0..s {
                let d = self.dim_at(lvl);
                if self.adapter_heads == 0 || d % self.adapter_heads != 0 {
                    return Err(CeaError::Config(format!(
                        "adapter heads {} do not divide decoder dim {d}",
                        self.adapter_heads
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of CEA-equipped blocks in decoder stage `i`: alternating blocks
    /// starting at the stage's first block.
    pub fn cea_blocks_at(&self, stage: usize) -> usize {
        if self.cea_enabled {
            self.decoder_blocks[stage].div_ceil(2)
        } else {
            0
        }
    }
}

/// Factor generator attached to one CEA-equipped block.
#[derive(Debug, Clone)]
pub enum FactorGenerator {
    QueryProbe(AdapterWeights),
    GapMlp(GapMlpWeights),
    Static(StaticFactors),
}

impl FactorGenerator {
    pub fn generate(
        &self,
        features: &Tensor,
        cfg: &CeaConfig,
    ) -> Result<Vec<(InjectionTarget, FactorPair)>> {
        match self {
            FactorGenerator::QueryProbe(w) => generate_dynamic(features, w, cfg),
            FactorGenerator::GapMlp(w) => generate_gap_mlp(features, w, cfg),
            FactorGenerator::Static(s) => s.generate(cfg),
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match self {
            FactorGenerator::QueryProbe(w) => w.named_params(prefix),
            FactorGenerator::GapMlp(w) => w.named_params(prefix),
            FactorGenerator::Static(s) => s.named_params(prefix),
        }
    }
}

/// One pre-norm Transformer block: LN -> MHSA -> residual, LN -> FFN -> residual.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub heads: usize,
    /// Present on CEA-equipped decoder blocks.
    pub generator: Option<FactorGenerator>,
}

impl BlockWeights {
    pub fn init(
        dim: usize,
        heads: usize,
        ffn_ratio: usize,
        generator: Option<FactorGenerator>,
        rng: &mut impl Rng,
    ) -> BlockWeights {
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = ffn_ratio * dim;
        BlockWeights {
            ln1_gamma: Tensor::param(&[1, dim], vec![1.0; dim]),
            ln1_beta: Tensor::param(&[1, dim], vec![0.0; dim]),
            wq: uniform(&[dim, dim], s, rng).into_param(),
            wk: uniform(&[dim, dim], s, rng).into_param(),
            wv: uniform(&[dim, dim], s, rng).into_param(),
            wo: uniform(&[dim, dim], s, rng).into_param(),
            ln2_gamma: Tensor::param(&[1, dim], vec![1.0; dim]),
            ln2_beta: Tensor::param(&[1, dim], vec![0.0; dim]),
            w1: uniform(&[dim, hidden], s, rng).into_param(),
            w2: uniform(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng).into_param(),
            heads,
            generator,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.ln1_gamma"), self.ln1_gamma.clone()),
            (format!("{prefix}.ln1_beta"), self.ln1_beta.clone()),
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.wo"), self.wo.clone()),
            (format!("{prefix}.ln2_gamma"), self.ln2_gamma.clone()),
            (format!("{prefix}.ln2_beta"), self.ln2_beta.clone()),
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
        ];
        if let Some(g) = &self.generator {
            out.extend(g.named_params(&format!("{prefix}.gen")));
        }
        out
    }
}

fn delta_for(
    factors: &[(InjectionTarget, FactorPair)],
    target: InjectionTarget,
    x: &Tensor,
    cfg: &CeaConfig,
) -> Result<Option<Tensor>> {
    let Some((_, fp)) = factors.iter().find(|(t, _)| *t == target) else {
        return Ok(None);
    };
    let delta = match cfg.routing_rule {
        RoutingRule::DenseSigned => assemble_residual_matrix(x, fp, cfg)?,
        RoutingRule::TopKSoftmax(_) => assemble_residual_topk(x, fp, cfg)?,
    };
    Ok(Some(delta))
}

/// Pre-norm Transformer block forward over [N, C] tokens. When a CEA context
/// is supplied, per-target residuals are assembled from the normalized tokens
/// and injected into the corresponding base projections.
pub fn transformer_block_forward(
    x: &Tensor,
    bw: &BlockWeights,
    cea: Option<(&CeaConfig, &[(InjectionTarget, FactorPair)])>,
) -> Result<Tensor> {
    let [n, c] = *x.shape() else {
        return Err(CeaError::Shape(format!(
            "transformer_block_forward: expected [N, C], got {:?}",
            x.shape()
        )));
    };
    if let Some((cfg, factors)) = cea {
        for (t, _) in factors {
            if !cfg.injection_targets.contains(t) {
                return Err(CeaError::Config(format!(
                    "factor target {t:?} is not in the configured injection set"
                )));
            }
        }
    }
    let dh = c / bw.heads;
    let h1 = x.layer_norm_rows(&bw.ln1_gamma, &bw.ln1_beta, 1e-5)?;
    let project = |w: &Tensor, target: InjectionTarget| -> Result<Tensor> {
        let base = h1.matmul(w)?;
        match cea {
            Some((cfg, factors)) => match delta_for(factors, target, &h1, cfg)? {
                Some(delta) => inject(&base, &delta),
                None => Ok(base),
            },
            None => Ok(base),
        }
    };
    let q = project(&bw.wq, InjectionTarget::Q)?;
    let k = project(&bw.wk, InjectionTarget::K)?;
    let v = project(&bw.wv, InjectionTarget::V)?;
    let mut head_outs = Vec::with_capacity(bw.heads);
    for h in 0..bw.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let logits = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        head_outs.push(logits.softmax_rows()?.matmul(&vh)?);
    }
    let attn = Tensor::concat_cols(&head_outs)?.matmul(&bw.wo)?;
    let x = x.add(&attn)?;

    let h2 = x.layer_norm_rows(&bw.ln2_gamma, &bw.ln2_beta, 1e-5)?;
    let mut ffn_in = h2.matmul(&bw.w1)?;
    if let Some((cfg, factors)) = cea {
        if let Some(delta) = delta_for(factors, InjectionTarget::FfnIn, &h2, cfg)? {
            ffn_in = inject(&ffn_in, &delta)?;
        }
    }
    let ffn = ffn_in.gelu().matmul(&bw.w2)?;
    let _ = n;
    x.add(&ffn)
}

/// All learnable state of the restorer, flat-named for checkpointing.
#[derive(Debug, Clone)]
pub struct RestorerState {
    pub config: BackboneConfig,
    /// 1x1 patch embedding, [3, C].
    pub embed: Tensor,
    pub enc_stages: Vec<Vec<BlockWeights>>,
    /// Stride-2 downsampling projections, [C_i, 2 C_i].
    pub downs: Vec<Tensor>,
    pub latent: Vec<BlockWeights>,
    /// Post-upsample channel-halving projections, [2 C_i, C_i].
    pub ups: Vec<Tensor>,
    /// Skip-fusion projections after concatenation, [2 C_i, C_i].
    pub fuses: Vec<Tensor>,
    pub dec_stages: Vec<Vec<BlockWeights>>,
    pub refine: Vec<BlockWeights>,
    /// Output residual head, [C, 3], zero-initialized.
    pub out_head: Tensor,
}

impl RestorerState {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Result<RestorerState> {
        config.validate()?;
        let s = config.stages();
        let mk_gen = |dim: usize, cfg: &BackboneConfig, rng: &mut _| -> Result<FactorGenerator> {
            let hidden = cfg.ffn_ratio * dim;
            Ok(match cfg.cea.factor_source {
                FactorSource::Static => FactorGenerator::Static(StaticFactors::init(
                    dim,
                    hidden,
                    cfg.cea.rank,
                    &cfg.cea.injection_targets,
                    rng,
                )),
                FactorSource::Dynamic => match cfg.generator {
                    GeneratorKind::QueryProbe => FactorGenerator::QueryProbe(AdapterWeights::init(
                        dim,
                        hidden,
                        cfg.cea.rank,
                        cfg.adapter_heads,
                        cfg.condense_stride,
                        &cfg.cea.injection_targets,
                        rng,
                    )?),
                    GeneratorKind::GapMlp => FactorGenerator::GapMlp(GapMlpWeights::init(
                        dim,
                        hidden,
                        cfg.cea.rank,
                        &cfg.cea.injection_targets,
                        rng,
                    )),
                },
            })
        };
        let c0 = config.embed_dim;
        let embed = uniform(&[3, c0], 1.0 / (3.0_f64).sqrt(), rng).into_param();
        let mut enc_stages = Vec::new();
        let mut downs = Vec::new();
        for i in 0..s {
            let d = config.dim_at(i);
            enc_stages.push(
                (0..config.encoder_blocks[i])
                    .map(|_| BlockWeights::init(d, config.heads[i], config.ffn_ratio, None, rng))
                    .collect(),
            );
            downs.push(uniform(&[d, 2 * d], 1.0 / (d as f64).sqrt(), rng).into_param());
        }
        let dl = config.dim_at(s);
        let latent = (0..config.latent_blocks)
            .map(|_| BlockWeights::init(dl, config.heads[s], config.ffn_ratio, None, rng))
            .collect();
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut dec_stages = Vec::new();
        // Decoder stages run from the deepest level back up to full resolution.
        for i in (0..s).rev() {
            let d = config.dim_at(i);
            ups.push(uniform(&[2 * d, d], 1.0 / ((2 * d) as f64).sqrt(), rng).into_param());
            fuses.push(uniform(&[2 * d, d], 1.0 / ((2 * d) as f64).sqrt(), rng).into_param());
            let n_blocks = config.decoder_blocks[i];
            let mut blocks = Vec::new();
            for b in 0..n_blocks {
                // Alternating placement starting at the stage's first block.
                let gen = if config.cea_enabled && b % 2 == 0 {
                    Some(mk_gen(d, config, rng)?)
                } else {
                    None
                };
                blocks.push(BlockWeights::init(d, config.heads[i], config.ffn_ratio, gen, rng));
            }
            dec_stages.push(blocks);
        }
        let refine = (0..config.refinement_blocks)
            .map(|_| BlockWeights::init(c0, config.heads[0], config.ffn_ratio, None, rng))
            .collect();
        let out_head = Tensor::param(&[c0, 3], vec![0.0; c0 * 3]);
        Ok(RestorerState {
            config: config.clone(),
            embed,
            enc_stages,
            downs,
            latent,
            ups,
            fuses,
            dec_stages,
            refine,
            out_head,
        })
    }

    /// Every learnable parameter, in a fixed deterministic order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, stage) in self.enc_stages.iter().enumerate() {
            for (b, bw) in stage.iter().enumerate() {
                out.extend(bw.named_params(&format!("enc{i}.b{b}")));
            }
            out.push((format!("down{i}"), self.downs[i].clone()));
        }
        for (b, bw) in self.latent.iter().enumerate() {
            out.extend(bw.named_params(&format!("latent.b{b}")));
        }
        for (j, stage) in self.dec_stages.iter().enumerate() {
            out.push((format!("up{j}"), self.ups[j].clone()));
            out.push((format!("fuse{j}"), self.fuses[j].clone()));
            for (b, bw) in stage.iter().enumerate() {
                out.extend(bw.named_params(&format!("dec{j}.b{b}")));
            }
        }
        for (b, bw) in self.refine.iter().enumerate() {
            out.extend(bw.named_params(&format!("refine.b{b}")));
        }
        out.push(("out_head".to_string(), self.out_head.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Zero every factor-generation parameter in place, forcing all assembled
    /// residuals to exactly zero.
    pub fn zero_cea_factors(&self) {
        for (name, p) in self.named_params() {
            if name.contains(".gen.") {
                p.set_data(vec![0.0; p.numel()]);
            }
        }
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        io::save_container(path, &self.named_params())?;
        let sidecar = path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(sidecar, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<RestorerState> {
        let sidecar = path.with_extension("json");
        let config: BackboneConfig = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        // Structure from config, values from the container.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let state = RestorerState::init(&config, &mut rng)?;
        let entries = io::load_container(path)?;
        let params = state.named_params();
        if entries.len() != params.len() {
            return Err(CeaError::Other(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                params.len()
            )));
        }
        for ((ename, evals), (pname, p)) in entries.iter().zip(&params) {
            if ename != pname {
                return Err(CeaError::Other(format!(
                    "checkpoint entry {ename} does not match expected parameter {pname}"
                )));
            }
            if evals.shape() != p.shape() {
                return Err(CeaError::Shape(format!(
                    "checkpoint tensor {ename}: shape {:?} vs expected {:?}",
                    evals.shape(),
                    p.shape()
                )));
            }
            p.set_data(evals.to_vec());
        }
        Ok(state)
    }
}

use rand::SeedableRng;

fn run_stage(
    tokens: Tensor,
    blocks: &[BlockWeights],
    h: usize,
    w: usize,
    cfg: &BackboneConfig,
) -> Result<Tensor> {
    let mut x = tokens;
    for bw in blocks {
        x = match &bw.generator {
            Some(gen) => {
                let c = x.shape()[1];
                let features = x.reshape(&[h, w, c])?;
                let factors = gen.generate(&features, &cfg.cea)?;
                transformer_block_forward(&x, bw, Some((&cfg.cea, &factors)))?
            }
            None => transformer_block_forward(&x, bw, None)?,
        };
    }
    Ok(x)
}

/// Full restoration pass: ŷ = x + head(U-net(x)). Blind: no degradation label
/// enters anywhere.
pub fn restore(image: &Tensor, state: &RestorerState) -> Result<Tensor> {
    let cfg = &state.config;
    let [h, w, ch] = *image.shape() else {
        return Err(CeaError::Shape(format!(
            "restore: expected [H, W, 3], got {:?}",
            image.shape()
        )));
    };
    if ch != 3 {
        return Err(CeaError::Shape(format!("restore: expected 3 channels, got {ch}")));
    }
    let s = cfg.stages();
    let div = 1usize << s;
    if h % div != 0 || w % div != 0 {
        return Err(CeaError::Shape(format!(
            "restore: {h}x{w} input not divisible by {div} ({s} downsampling stages)"
        )));
    }
    let mut x = image.reshape(&[h * w, 3])?.matmul(&state.embed)?;
    let (mut ch_, mut cw) = (h, w);
    let mut skips = Vec::new();
    for i in 0..s {
        x = run_stage(x, &state.enc_stages[i], ch_, cw, cfg)?;
        skips.push((x.clone(), ch_, cw));
        let c = cfg.dim_at(i);
        x = x
            .reshape(&[ch_, cw, c])?
            .subsample2d(2)?
            .reshape(&[(ch_ / 2) * (cw / 2), c])?
            .matmul(&state.downs[i])?;
        ch_ /= 2;
        cw /= 2;
    }
    x = run_stage(x, &state.latent, ch_, cw, cfg)?;
    for (j, i) in (0..s).rev().enumerate() {
        let c_deep = cfg.dim_at(i + 1);
        x = x
            .reshape(&[ch_, cw, c_deep])?
            .upsample_nearest2()?
            .reshape(&[(ch_ * 2) * (cw * 2), c_deep])?
            .matmul(&state.ups[j])?;
        ch_ *= 2;
        cw *= 2;
        let (skip, sh, sw) = &skips[i];
        debug_assert_eq!((*sh, *sw), (ch_, cw));
        x = Tensor::concat_cols(&[x, skip.clone()])?.matmul(&state.fuses[j])?;
        x = run_stage(x, &state.dec_stages[j], ch_, cw, cfg)?;
    }
    x = run_stage(x, &state.refine, h, w, cfg)?;
    let residual = x.matmul(&state.out_head)?.reshape(&[h, w, 3])?;
    image.add(&residual)
}

/// Analytic multiply-accumulate accounting for one configuration and input
/// size, mirroring the instrumented runtime counter exactly.
#[derive(Debug, Clone, Serialize)]
pub struct FlopReport {
    pub sublayers: Vec<(String, u64)>,
    pub total: u64,
    /// Assembly cost summed over all CEA injection sites, low-rank route.
    pub cea_low_rank: u64,
    /// The same sites under a hypothetical materialized dense update.
    pub cea_dense_equiv: u64,
    pub dense_over_low_rank: f64,
}

/// Cost of one low-rank assembly site vs its dense equivalent.
pub fn assembly_cost(n: usize, d_in: usize, d_out: usize, r: usize) -> (u64, u64, f64) {
    let low = (n * d_in * r + n * r * d_out) as u64;
    let dense = (n * d_in * d_out) as u64;
    (low, dense, dense as f64 / low as f64)
}

fn block_macs(n: usize, c: usize, heads: usize, ffn_ratio: usize) -> u64 {
    let proj = 4 * n * c * c; // wq, wk, wv, wo
    let attn = 2 * n * n * c; // logits + mix, summed over heads
    let ffn = 2 * ffn_ratio * n * c * c;
    let _ = heads; // per-head splits sum back to the full width
    (proj + attn + ffn) as u64
}

fn generator_macs(cfg: &BackboneConfig, hh: usize, ww: usize, c: usize) -> u64 {
    match cfg.cea.factor_source {
        FactorSource::Static => 0,
        FactorSource::Dynamic => match cfg.generator {
            GeneratorKind::QueryProbe => {
                let s_c = cfg.condense_stride;
                let (oh, ow) = (hh.div_ceil(s_c), ww.div_ceil(s_c));
                let m = oh * ow;
                let r = cfg.cea.rank;
                let condense = oh * ow * 9 * c + m * c * c;
                // probe(): q/k/v projections, per-head attention, output proj.
                let one_probe = r * c * c + 2 * m * c * c + 2 * r * m * c + r * c * c;
                let mut decode = 0;
                for &t in &cfg.cea.injection_targets {
                    let d_out = target_out_dim(t, c, cfg.ffn_ratio * c);
                    decode += r * c * c + r * c * d_out;
                }
                (condense + 2 * one_probe + decode) as u64
            }
            GeneratorKind::GapMlp => {
                let r = cfg.cea.rank;
                let hidden = 2 * c;
                let mut macs = c * hidden;
                for &t in &cfg.cea.injection_targets {
                    let d_out = target_out_dim(t, c, cfg.ffn_ratio * c);
                    macs += hidden * r * c + hidden * r * d_out;
                }
                macs as u64
            }
        },
    }
}

fn injection_macs(cfg: &BackboneConfig, n: usize, c: usize) -> (u64, u64) {
    let r = cfg.cea.rank;
    let mut low = 0u64;
    let mut dense = 0u64;
    for &t in &cfg.cea.injection_targets {
        let d_out = target_out_dim(t, c, cfg.ffn_ratio * c);
        // The top-k route only counts the affinity product; the mixing step is
        // a fused kernel outside the matmul counter.
        let site = match cfg.cea.routing_rule {
            RoutingRule::DenseSigned => n * c * r + n * r * d_out,
            RoutingRule::TopKSoftmax(_) => n * c * r,
        };
        low += site as u64;
        dense += (n * c * d_out) as u64;
    }
    (low, dense)
}

pub fn flop_report(cfg: &BackboneConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let s = cfg.stages();
    let div = 1usize << s;
    if h % div != 0 || w % div != 0 {
        return Err(CeaError::Shape(format!(
            "flop_report: {h}x{w} not divisible by {div}"
        )));
    }
    let mut sub = Vec::new();
    let mut total = 0u64;
    let mut push = |name: String, macs: u64, total: &mut u64| {
        *total += macs;
        sub.push((name, macs));
    };
    let n0 = h * w;
    let c0 = cfg.embed_dim;
    push("embed".into(), (n0 * 3 * c0) as u64, &mut total);
    let (mut hh, mut ww) = (h, w);
    for i in 0..s {
        let c = cfg.dim_at(i);
        let n = hh * ww;
        let macs = cfg.encoder_blocks[i] as u64 * block_macs(n, c, cfg.heads[i], cfg.ffn_ratio);
        push(format!("enc{i}"), macs, &mut total);
        let nd = (hh / 2) * (ww / 2);
        push(format!("down{i}"), (nd * c * 2 * c) as u64, &mut total);
        hh /= 2;
        ww /= 2;
    }
    {
        let c = cfg.dim_at(s);
        let n = hh * ww;
        let macs = cfg.latent_blocks as u64 * block_macs(n, c, cfg.heads[s], cfg.ffn_ratio);
        push("latent".into(), macs, &mut total);
    }
    let mut cea_low = 0u64;
    let mut cea_dense = 0u64;
    for (j, i) in (0..s).rev().enumerate() {
        let c = cfg.dim_at(i);
        let c_deep = cfg.dim_at(i + 1);
        hh *= 2;
        ww *= 2;
        let n = hh * ww;
        push(format!("up{j}"), (n * c_deep * c) as u64, &mut total);
        push(format!("fuse{j}"), (n * 2 * c * c) as u64, &mut total);
        let plain = cfg.decoder_blocks[i] as u64 * block_macs(n, c, cfg.heads[i], cfg.ffn_ratio);
        let sites = cfg.cea_blocks_at(i) as u64;
        let gen = sites * generator_macs(cfg, hh, ww, c);
        let (low_site, dense_site) = injection_macs(cfg, n, c);
        let inj = sites * low_site;
        cea_low += inj;
        cea_dense += sites * dense_site;
        push(format!("dec{j}"), plain + gen + inj, &mut total);
    }
    {
        let n = h * w;
        let macs =
            cfg.refinement_blocks as u64 * block_macs(n, c0, cfg.heads[0], cfg.ffn_ratio);
        push("refine".into(), macs, &mut total);
    }
    push("out_head".into(), (h * w * c0 * 3) as u64, &mut total);
    let ratio = if cea_low > 0 {
        cea_dense as f64 / cea_low as f64
    } else {
        0.0
    };
    Ok(FlopReport {
        sublayers: sub,
        total,
        cea_low_rank: cea_low,
        cea_dense_equiv: cea_dense,
        dense_over_low_rank: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::flops;
    use crate::tensor::gradcheck::grad_check_sampled;
    use crate::tensor::ops::randn;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            encoder_blocks: vec![1, 1],
            latent_blocks: 1,
            decoder_blocks: vec![2, 2],
            refinement_blocks: 1,
            heads: vec![1, 2, 2],
            ffn_ratio: 2,
            cea_enabled: true,
            generator: GeneratorKind::QueryProbe,
            adapter_heads: 2,
            condense_stride: 2,
            cea: CeaConfig::with_rank(2),
        }
    }

    #[test]
    fn block_without_context_matches_plain_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bw = BlockWeights::init(8, 2, 2, None, &mut rng);
        let x = randn(&[6, 8], &mut rng);
        let a = transformer_block_forward(&x, &bw, None).unwrap();
        let b = transformer_block_forward(&x, &bw, None).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn zero_factors_match_plain_block_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bw = BlockWeights::init(8, 2, 2, None, &mut rng);
        let x = randn(&[6, 8], &mut rng);
        let cfg = CeaConfig::with_rank(2);
        let zero_a = Tensor::zeros(&[8, 2]);
        let zero_b = Tensor::zeros(&[2, 8]);
        let fp = crate::assembly::rank_norm(
            &FactorPair::raw(zero_a, zero_b, InjectionTarget::Q).unwrap(),
            cfg.epsilon,
        )
        .unwrap();
        let factors = vec![(InjectionTarget::Q, fp)];
        let plain = transformer_block_forward(&x, &bw, None).unwrap();
        let with_zero = transformer_block_forward(&x, &bw, Some((&cfg, &factors))).unwrap();
        let max = plain
            .to_vec()
            .iter()
            .zip(with_zero.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn qk_injection_shifts_attention_logits_as_hand_computed() {
        // N=2, C=2, single head, identity projections via hand-set weights.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bw = BlockWeights::init(2, 1, 2, None, &mut rng);
        let eye = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        bw.wq = eye.clone();
        bw.wk = eye.clone();
        bw.wv = eye.clone();
        bw.wo = Tensor::param(&[2, 2], vec![0.0; 4]); // silence the mix output
        bw.w1 = Tensor::param(&[2, 4], vec![0.0; 8]);
        bw.w2 = Tensor::param(&[4, 2], vec![0.0; 8]);

        let x = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let cfg = CeaConfig {
            alpha: 1.0,
            injection_targets: vec![InjectionTarget::Q, InjectionTarget::K],
            ..CeaConfig::with_rank(1)
        };
        // Rank-1 unit factors: a = e1, b = e2. Delta_n = <h_n, e1> * e2.
        let fp = |t| {
            FactorPair::pre_normalized(
                Tensor::from_vec(&[2, 1], vec![1.0, 0.0]),
                Tensor::from_vec(&[1, 2], vec![0.0, 1.0]),
                t,
            )
            .unwrap()
        };
        let factors = vec![
            (InjectionTarget::Q, fp(InjectionTarget::Q)),
            (InjectionTarget::K, fp(InjectionTarget::K)),
        ];
        // With wo = 0 the block output equals x + 0 + 0 = x; verify instead that
        // the injected Q and K match the hand computation via the projections.
        let h1 = x.layer_norm_rows(&bw.ln1_gamma, &bw.ln1_beta, 1e-5).unwrap();
        let q_expect: Vec<f64> = {
            let hv = h1.to_vec();
            let mut out = hv.clone();
            for n in 0..2 {
                out[n * 2 + 1] += hv[n * 2]; // + <h_n, e1> e2
            }
            out
        };
        let base = h1.matmul(&bw.wq).unwrap();
        let delta = assemble_residual_matrix(&h1, &factors[0].1, &cfg).unwrap();
        let q = inject(&base, &delta).unwrap();
        let qv = q.to_vec();
        for i in 0..4 {
            assert!((qv[i] - q_expect[i]).abs() < 1e-12, "{qv:?} vs {q_expect:?}");
        }
        // And the block still runs end to end with both injections present.
        let out = transformer_block_forward(&x, &bw, Some((&cfg, &factors))).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn unconfigured_target_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bw = BlockWeights::init(4, 1, 2, None, &mut rng);
        let x = randn(&[4, 4], &mut rng);
        let cfg = CeaConfig {
            injection_targets: vec![InjectionTarget::Q],
            ..CeaConfig::with_rank(1)
        };
        let fp = FactorPair::pre_normalized(
            Tensor::from_vec(&[4, 1], vec![1.0, 0.0, 0.0, 0.0]),
            Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]),
            InjectionTarget::V,
        )
        .unwrap();
        let factors = vec![(InjectionTarget::V, fp)];
        assert!(transformer_block_forward(&x, &bw, Some((&cfg, &factors))).is_err());
    }

    #[test]
    fn untrained_restorer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        let img = randn(&[8, 8, 3], &mut rng);
        let out = restore(&img, &state).unwrap();
        assert_eq!(out.to_vec(), img.to_vec());
    }

    #[test]
    fn output_shape_matches_input_across_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_config();
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        for hw in [8usize, 16, 32] {
            let img = randn(&[hw, hw, 3], &mut rng);
            let out = restore(&img, &state).unwrap();
            assert_eq!(out.shape(), &[hw, hw, 3]);
        }
        assert!(restore(&randn(&[6, 6, 3], &mut rng), &state).is_err());
    }

    #[test]
    fn constant_input_maps_to_constant_output_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = RestorerState::init(&tiny_config(), &mut rng).unwrap();
        let img = Tensor::full(&[8, 8, 3], 0.25);
        let out = restore(&img, &state).unwrap().to_vec();
        for px in out.chunks(3) {
            for (a, b) in px.iter().zip(&out[0..3]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cea_placement_counts_are_ceil_half() {
        let mut cfg = tiny_config();
        cfg.decoder_blocks = vec![2, 4, 4];
        cfg.encoder_blocks = vec![1, 1, 1];
        cfg.heads = vec![1, 2, 2, 4];
        assert_eq!(cfg.cea_blocks_at(0), 1);
        assert_eq!(cfg.cea_blocks_at(1), 2);
        assert_eq!(cfg.cea_blocks_at(2), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        // dec_stages is deepest-first; stage index i maps to dec_stages[s-1-i].
        for i in 0..3 {
            let equipped = state.dec_stages[3 - 1 - i]
                .iter()
                .filter(|b| b.generator.is_some())
                .count();
            assert_eq!(equipped, cfg.cea_blocks_at(i));
        }
    }

    #[test]
    fn zeroed_factors_reproduce_cea_free_network_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_config();
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        let img = randn(&[8, 8, 3], &mut rng);
        // Make the output head non-trivial so the test exercises the full path.
        state
            .out_head
            .set_data(randn(&[8, 3], &mut rng).to_vec().iter().map(|v| v * 0.1).collect());
        let with_cea = restore(&img, &state).unwrap();
        state.zero_cea_factors();
        let zeroed = restore(&img, &state).unwrap();

        // Reference: same weights, CEA structurally absent.
        let free = {
            let mut f = state.clone();
            for stage in &mut f.dec_stages {
                for b in stage.iter_mut() {
                    b.generator = None;
                }
            }
            f
        };
        let plain = restore(&img, &free).unwrap();
        let (zv, pv) = (zeroed.to_vec(), plain.to_vec());
        for (a, b) in zv.iter().zip(&pv) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Sanity: un-zeroed factors actually change the output.
        assert_ne!(with_cea.to_vec(), pv);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = tiny_config();
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        state.save_checkpoint(&p).unwrap();
        let loaded = RestorerState::load_checkpoint(&p).unwrap();
        let (a, b) = (state.named_params(), loaded.named_params());
        assert_eq!(a.len(), b.len());
        for ((n1, t1), (n2, t2)) in a.iter().zip(&b) {
            assert_eq!(n1, n2);
            let (v1, v2) = (t1.to_vec(), t2.to_vec());
            for (x, y) in v1.iter().zip(&v2) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn analytic_flops_match_instrumented_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (gen, source, routing) in [
            (GeneratorKind::QueryProbe, FactorSource::Dynamic, RoutingRule::DenseSigned),
            (GeneratorKind::GapMlp, FactorSource::Dynamic, RoutingRule::DenseSigned),
            (GeneratorKind::QueryProbe, FactorSource::Static, RoutingRule::DenseSigned),
            (GeneratorKind::QueryProbe, FactorSource::Dynamic, RoutingRule::TopKSoftmax(2)),
        ] {
            let mut cfg = tiny_config();
            cfg.generator = gen;
            cfg.cea.factor_source = source;
            cfg.cea.routing_rule = routing;
            let state = RestorerState::init(&cfg, &mut rng).unwrap();
            let img = randn(&[8, 8, 3], &mut rng);
            flops::reset();
            let _ = restore(&img, &state).unwrap();
            let measured = flops::read();
            let report = flop_report(&cfg, 8, 8).unwrap();
            assert_eq!(
                report.total, measured,
                "{gen:?}/{source:?}/{routing:?}: analytic {} vs counter {measured}",
                report.total
            );
        }
    }

    #[test]
    fn cost_formula_reference_points() {
        let (low, dense, ratio) = assembly_cost(256, 64, 64, 8);
        assert_eq!(low, 262_144);
        assert_eq!(dense, 1_048_576);
        assert_eq!(ratio, 4.0);
        // Break-even rank: r = d_in d_out / (d_in + d_out).
        let (low, dense, ratio) = assembly_cost(10, 12, 24, 8);
        assert_eq!(low, dense);
        assert_eq!(ratio, 1.0);
    }

    #[test]
    fn end_to_end_gradients_spot_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = tiny_config();
        cfg.encoder_blocks = vec![1];
        cfg.decoder_blocks = vec![1];
        cfg.heads = vec![1, 2];
        let state = RestorerState::init(&cfg, &mut rng).unwrap();
        let img = randn(&[8, 8, 3], &mut rng);
        let clean = randn(&[8, 8, 3], &mut rng);
        let params = state.named_params();
        let f = || {
            let out = restore(&img, &state).unwrap();
            out.sub(&clean).unwrap().mul(&out.sub(&clean).unwrap()).unwrap().mean_all()
        };
        let mut probe_rng = ChaCha8Rng::seed_from_u64(12);
        let report = grad_check_sampled(f, &params, 1e-5, 1e-4, 0.01, &mut probe_rng).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
