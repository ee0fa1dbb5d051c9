//! Factor generators: the cross-attention query-probing generator, the
//! global-average-pool MLP baseline, and per-block learnable static factors.
//!
//! The query-probing path condenses spatial features with a strided
//! depthwise 3x3 + pointwise 1x1 pair, probes the condensed tokens with two
//! compact sets of learnable queries via multi-head cross-attention, and
//! decodes the contextualized queries into per-target routing bases and
//! residual directions, followed by rank-wise normalization.

use rand::Rng;

use crate::assembly::{rank_norm, CeaConfig, FactorPair, FactorSource, InjectionTarget};
use crate::error::{CeaError, Result};
use crate::tensor::ops::uniform;
use crate::tensor::Tensor;

/// Condensed spatial context: flattened token rows, channels preserved.
#[derive(Debug, Clone)]
pub struct CondensedFeatures {
    /// [ceil(H/s_c) * ceil(W/s_c), d_model]
    pub tokens: Tensor,
}

/// Weights of the query-probing generator for one block.
#[derive(Debug, Clone)]
pub struct AdapterWeights {
    /// Depthwise 3x3 condenser kernel, stride `s_c`, padding 1.
    pub dw_kernel: Tensor,
    /// Pointwise 1x1 condenser weight, channel preserving.
    pub pw_weight: Tensor,
    /// Learnable queries, one row per rank component.
    pub query_a: Tensor,
    pub query_b: Tensor,
    /// Cross-attention projections (shared between the A and B probes).
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
    pub s_c: usize,
    /// Per-target decoding heads: d_model -> d_in for A, d_model -> d_out for B.
    pub fc_a: Vec<(InjectionTarget, Tensor)>,
    pub fc_b: Vec<(InjectionTarget, Tensor)>,
}

fn head_dim(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d_model % heads != 0 {
        return Err(CeaError::Config(format!(
            "d_model {d_model} must be divisible by heads {heads}"
        )));
    }
    Ok(d_model / heads)
}

/// Output width of each injection target, given token width and FFN hidden width.
pub fn target_out_dim(target: InjectionTarget, d_model: usize, ffn_hidden: usize) -> usize {
    match target {
        InjectionTarget::FfnIn => ffn_hidden,
        _ => d_model,
    }
}

impl AdapterWeights {
    pub fn init(
        d_model: usize,
        ffn_hidden: usize,
        rank: usize,
        heads: usize,
        s_c: usize,
        targets: &[InjectionTarget],
        rng: &mut impl Rng,
    ) -> Result<AdapterWeights> {
        head_dim(d_model, heads)?;
        let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let c = d_model;
        let mut fc_a = Vec::new();
        let mut fc_b = Vec::new();
        for &t in targets {
            let d_out = target_out_dim(t, c, ffn_hidden);
            fc_a.push((t, uniform(&[c, c], scale(c), rng).into_param()));
            // Small initial residual directions keep early updates gentle
            // relative to the base projection.
            fc_b.push((t, uniform(&[c, d_out], scale(c) * 0.1, rng).into_param()));
        }
        Ok(AdapterWeights {
            dw_kernel: uniform(&[3, 3, c], scale(9), rng).into_param(),
            pw_weight: uniform(&[c, c], scale(c), rng).into_param(),
            query_a: uniform(&[rank, c], scale(c), rng).into_param(),
            query_b: uniform(&[rank, c], scale(c), rng).into_param(),
            wq: uniform(&[c, c], scale(c), rng).into_param(),
            wk: uniform(&[c, c], scale(c), rng).into_param(),
            wv: uniform(&[c, c], scale(c), rng).into_param(),
            wo: uniform(&[c, c], scale(c), rng).into_param(),
            heads,
            s_c,
            fc_a,
            fc_b,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.dw_kernel"), self.dw_kernel.clone()),
            (format!("{prefix}.pw_weight"), self.pw_weight.clone()),
            (format!("{prefix}.query_a"), self.query_a.clone()),
            (format!("{prefix}.query_b"), self.query_b.clone()),
            (format!("{prefix}.wq"), self.wq.clone()),
            (format!("{prefix}.wk"), self.wk.clone()),
            (format!("{prefix}.wv"), self.wv.clone()),
            (format!("{prefix}.wo"), self.wo.clone()),
        ];
        for (t, w) in &self.fc_a {
            out.push((format!("{prefix}.fc_a.{}", t.tag()), w.clone()));
        }
        for (t, w) in &self.fc_b {
            out.push((format!("{prefix}.fc_b.{}", t.tag()), w.clone()));
        }
        out
    }

    fn fc_for(&self, target: InjectionTarget) -> Result<(&Tensor, &Tensor)> {
        let a = self
            .fc_a
            .iter()
            .find(|(t, _)| *t == target)
            .map(|(_, w)| w);
        let b = self
            .fc_b
            .iter()
            .find(|(t, _)| *t == target)
            .map(|(_, w)| w);
        match (a, b) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(CeaError::Config(format!(
                "no decoding head for injection target {target:?}"
            ))),
        }
    }
}

/// Strided depthwise + pointwise condensation of an [H, W, C] feature map into
/// token rows at reduced spatial resolution.
pub fn condense(features: &Tensor, weights: &AdapterWeights, s_c: usize) -> Result<CondensedFeatures> {
    if s_c == 0 {
        return Err(CeaError::Config("condensation stride must be >= 1".into()));
    }
    let reduced = features
        .depthwise_conv3x3(&weights.dw_kernel, s_c)?
        .pointwise_conv(&weights.pw_weight)?;
    let [oh, ow, c] = *reduced.shape() else { unreachable!() };
    Ok(CondensedFeatures {
        tokens: reduced.reshape(&[oh * ow, c])?,
    })
}

/// Multi-head scaled-dot-product cross-attention between a fixed query set and
/// arbitrary key/value tokens. No biases, no layer normalization.
fn cross_attention(
    queries: &Tensor,
    kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    let d_model = queries.shape()[1];
    let dh = head_dim(d_model, heads)?;
    let q = queries.matmul(wq)?;
    let k = kv.matmul(wk)?;
    let v = kv.matmul(wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let logits = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        let attn = logits.softmax_rows()?;
        outs.push(attn.matmul(&vh)?);
    }
    Tensor::concat_cols(&outs)?.matmul(wo)
}

/// Residual query probing: T = R + CrossAttn(R, condensed, condensed).
/// Computed once per block and shared across targets.
pub fn probe(queries: &Tensor, condensed: &CondensedFeatures, weights: &AdapterWeights) -> Result<Tensor> {
    let ctx = cross_attention(
        queries,
        &condensed.tokens,
        &weights.wq,
        &weights.wk,
        &weights.wv,
        &weights.wo,
        weights.heads,
    )?;
    queries.add(&ctx)
}

/// Decode contextualized queries into a raw (unnormalized) factor pair for one
/// target: A = (FC_a(T_A))^T, B = FC_b(T_B).
pub fn decode_factors(
    t_a: &Tensor,
    t_b: &Tensor,
    weights: &AdapterWeights,
    target: InjectionTarget,
) -> Result<FactorPair> {
    let (fa, fb) = weights.fc_for(target)?;
    let a = t_a.matmul(fa)?.transpose()?;
    let b = t_b.matmul(fb)?;
    FactorPair::raw(a, b, target)
}

/// End-to-end dynamic generation: condense, probe A and B queries once, decode
/// per target, rank-normalize. Returns factors in the config's target order.
pub fn generate_dynamic(
    features: &Tensor,
    weights: &AdapterWeights,
    cfg: &CeaConfig,
) -> Result<Vec<(InjectionTarget, FactorPair)>> {
    if cfg.factor_source != FactorSource::Dynamic {
        return Err(CeaError::Config(
            "generate_dynamic requires the dynamic factor source".into(),
        ));
    }
    let condensed = condense(features, weights, weights.s_c)?;
    let t_a = probe(&weights.query_a, &condensed, weights)?;
    let t_b = probe(&weights.query_b, &condensed, weights)?;
    cfg.injection_targets
        .iter()
        .map(|&target| {
            let raw = decode_factors(&t_a, &t_b, weights, target)?;
            Ok((target, rank_norm(&raw, cfg.epsilon)?))
        })
        .collect()
}

/// Weights of the global-average-pool MLP baseline generator.
#[derive(Debug, Clone)]
pub struct GapMlpWeights {
    pub w1: Tensor,
    /// Per-target output heads producing flattened A and B.
    pub head_a: Vec<(InjectionTarget, Tensor)>,
    pub head_b: Vec<(InjectionTarget, Tensor)>,
    pub rank: usize,
}

impl GapMlpWeights {
    pub fn init(
        d_model: usize,
        ffn_hidden: usize,
        rank: usize,
        targets: &[InjectionTarget],
        rng: &mut impl Rng,
    ) -> GapMlpWeights {
        let hidden = 2 * d_model;
        let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut head_a = Vec::new();
        let mut head_b = Vec::new();
        for &t in targets {
            let d_out = target_out_dim(t, d_model, ffn_hidden);
            head_a.push((t, uniform(&[hidden, rank * d_model], scale(hidden), rng).into_param()));
            head_b.push((t, uniform(&[hidden, rank * d_out], scale(hidden) * 0.1, rng).into_param()));
        }
        GapMlpWeights {
            w1: uniform(&[d_model, hidden], scale(d_model), rng).into_param(),
            head_a,
            head_b,
            rank,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.w1"), self.w1.clone())];
        for (t, w) in &self.head_a {
            out.push((format!("{prefix}.head_a.{}", t.tag()), w.clone()));
        }
        for (t, w) in &self.head_b {
            out.push((format!("{prefix}.head_b.{}", t.tag()), w.clone()));
        }
        out
    }
}

/// Baseline generator: global average pool over spatial positions, two-layer
/// MLP, reshape into per-target factors, rank-normalize. Spatially
/// permutation-invariant by construction.
pub fn generate_gap_mlp(
    features: &Tensor,
    weights: &GapMlpWeights,
    cfg: &CeaConfig,
) -> Result<Vec<(InjectionTarget, FactorPair)>> {
    let [h, w, c] = *features.shape() else {
        return Err(CeaError::Shape(format!(
            "generate_gap_mlp: expected [H, W, C], got {:?}",
            features.shape()
        )));
    };
    let pooled = features.reshape(&[h * w, c])?.mean_rows()?;
    let hidden = pooled.matmul(&weights.w1)?.gelu();
    let r = weights.rank;
    cfg.injection_targets
        .iter()
        .map(|&target| {
            let ha = weights
                .head_a
                .iter()
                .find(|(t, _)| *t == target)
                .map(|(_, w)| w)
                .ok_or_else(|| CeaError::Config(format!("no GAP head for target {target:?}")))?;
            let hb = weights
                .head_b
                .iter()
                .find(|(t, _)| *t == target)
                .map(|(_, w)| w)
                .ok_or_else(|| CeaError::Config(format!("no GAP head for target {target:?}")))?;
            let d_out = hb.shape()[1] / r;
            let a = hidden.matmul(ha)?.reshape(&[r, c])?.transpose()?;
            let b = hidden.matmul(hb)?.reshape(&[r, d_out])?;
            let raw = FactorPair::raw(a, b, target)?;
            Ok((target, rank_norm(&raw, cfg.epsilon)?))
        })
        .collect()
}

/// Per-block learnable factors for the static source; rank-normalized at use,
/// exactly like the dynamic path.
#[derive(Debug, Clone)]
pub struct StaticFactors {
    pub raw: Vec<(InjectionTarget, Tensor, Tensor)>,
}

impl StaticFactors {
    pub fn init(
        d_model: usize,
        ffn_hidden: usize,
        rank: usize,
        targets: &[InjectionTarget],
        rng: &mut impl Rng,
    ) -> StaticFactors {
        let scale = 1.0 / (d_model as f64).sqrt();
        StaticFactors {
            raw: targets
                .iter()
                .map(|&t| {
                    let d_out = target_out_dim(t, d_model, ffn_hidden);
                    (
                        t,
                        uniform(&[d_model, rank], scale, rng).into_param(),
                        uniform(&[rank, d_out], scale * 0.1, rng).into_param(),
                    )
                })
                .collect(),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (t, a, b) in &self.raw {
            out.push((format!("{prefix}.a.{}", t.tag()), a.clone()));
            out.push((format!("{prefix}.b.{}", t.tag()), b.clone()));
        }
        out
    }

    pub fn generate(&self, cfg: &CeaConfig) -> Result<Vec<(InjectionTarget, FactorPair)>> {
        cfg.injection_targets
            .iter()
            .map(|&target| {
                let (_, a, b) = self
                    .raw
                    .iter()
                    .find(|(t, _, _)| *t == target)
                    .ok_or_else(|| {
                        CeaError::Config(format!("no static factors for target {target:?}"))
                    })?;
                let raw = FactorPair::raw(a.clone(), b.clone(), target)?;
                Ok((target, rank_norm(&raw, cfg.epsilon)?))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_cfg(rank: usize) -> CeaConfig {
        CeaConfig::with_rank(rank)
    }

    fn init_weights(c: usize, rank: usize, rng: &mut impl Rng) -> AdapterWeights {
        AdapterWeights::init(
            c,
            2 * c,
            rank,
            2,
            2,
            &[InjectionTarget::Q, InjectionTarget::K],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn condense_token_counts_follow_ceil_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = init_weights(4, 2, &mut rng);
        let f8 = randn(&[8, 8, 4], &mut rng);
        assert_eq!(condense(&f8, &w, 2).unwrap().tokens.shape(), &[16, 4]);
        let f7 = randn(&[7, 7, 4], &mut rng);
        assert_eq!(condense(&f7, &w, 2).unwrap().tokens.shape(), &[16, 4]);
    }

    #[test]
    fn condense_identity_kernels_at_stride_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 4;
        let mut w = init_weights(c, 2, &mut rng);
        let mut dk = vec![0.0; 9 * c];
        for ch in 0..c {
            dk[(1 * 3 + 1) * c + ch] = 1.0;
        }
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        w.dw_kernel = Tensor::from_vec(&[3, 3, c], dk);
        w.pw_weight = Tensor::from_vec(&[c, c], eye);
        let f = randn(&[4, 5, c], &mut rng);
        let out = condense(&f, &w, 1).unwrap();
        assert_eq!(out.tokens.to_vec(), f.to_vec());
    }

    #[test]
    fn probe_single_token_and_zero_value_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let w = init_weights(c, 2, &mut rng);
        // All value projections zero: T = R exactly (wo input is zero).
        let mut wz = w.clone();
        wz.wv = Tensor::zeros(&[c, c]);
        let condensed = CondensedFeatures {
            tokens: randn(&[3, c], &mut rng),
        };
        let t = probe(&w.query_a, &condensed, &wz).unwrap();
        assert_eq!(t.to_vec(), w.query_a.to_vec());

        // Single condensed token: attention weights are all 1, so the context
        // is the value projection of that token pushed through wo.
        let single = CondensedFeatures {
            tokens: randn(&[1, c], &mut rng),
        };
        let t = probe(&w.query_a, &single, &w).unwrap();
        let v = single.tokens.matmul(&w.wv).unwrap().matmul(&w.wo).unwrap();
        let expect = w.query_a.to_vec();
        let tv = t.to_vec();
        for q in 0..2 {
            for j in 0..c {
                let got = tv[q * c + j];
                let want = expect[q * c + j] + v.to_vec()[j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probe_attention_weights_sum_to_one() {
        // Verified through the softmax invariant on an explicit head.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 4;
        let w = init_weights(c, 2, &mut rng);
        let kv = randn(&[6, c], &mut rng);
        let q = w.query_a.matmul(&w.wq).unwrap();
        let k = kv.matmul(&w.wk).unwrap();
        let dh = c / w.heads;
        for h in 0..w.heads {
            let logits = q
                .slice_cols(h * dh, dh)
                .unwrap()
                .matmul(&k.slice_cols(h * dh, dh).unwrap().transpose().unwrap())
                .unwrap()
                .scale(1.0 / (dh as f64).sqrt());
            let attn = logits.softmax_rows().unwrap().to_vec();
            for row in attn.chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_factor_shapes_and_missing_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, r) = (4, 2);
        let w = init_weights(c, r, &mut rng);
        let t_a = randn(&[r, c], &mut rng);
        let t_b = randn(&[r, c], &mut rng);
        let fp = decode_factors(&t_a, &t_b, &w, InjectionTarget::Q).unwrap();
        assert_eq!(fp.a.shape(), &[c, r]);
        assert_eq!(fp.b.shape(), &[r, c]);
        assert!(decode_factors(&t_a, &t_b, &w, InjectionTarget::V).is_err());
    }

    #[test]
    fn decode_zero_queries_give_zero_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, r) = (4, 2);
        let w = init_weights(c, r, &mut rng);
        let z = Tensor::zeros(&[r, c]);
        let fp = decode_factors(&z, &z, &w, InjectionTarget::Q).unwrap();
        assert_eq!(fp.a.to_vec(), vec![0.0; c * r]);
        assert_eq!(fp.b.to_vec(), vec![0.0; r * c]);
    }

    #[test]
    fn dynamic_generation_is_instance_conditioned_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, r) = (4, 2);
        let w = init_weights(c, r, &mut rng);
        let cfg = test_cfg(r);
        let img1 = randn(&[8, 8, c], &mut rng);
        let img2 = randn(&[8, 8, c], &mut rng);
        let f1 = generate_dynamic(&img1, &w, &cfg).unwrap();
        let f1_again = generate_dynamic(&img1, &w, &cfg).unwrap();
        let f2 = generate_dynamic(&img2, &w, &cfg).unwrap();
        assert_eq!(f1[0].1.a.to_vec(), f1_again[0].1.a.to_vec());
        assert_ne!(f1[0].1.a.to_vec(), f2[0].1.a.to_vec());
    }

    #[test]
    fn gap_is_permutation_invariant_dynamic_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, r) = (4, 2);
        let w = init_weights(c, r, &mut rng);
        let gap = GapMlpWeights::init(c, 2 * c, r, &[InjectionTarget::Q, InjectionTarget::K], &mut rng);
        let cfg = test_cfg(r);
        let img = randn(&[6, 6, c], &mut rng);
        // Spatial permutation: reverse the positions.
        let iv = img.to_vec();
        let n = 36;
        let mut perm = vec![0.0; iv.len()];
        for p in 0..n {
            perm[p * c..(p + 1) * c].copy_from_slice(&iv[(n - 1 - p) * c..(n - p) * c]);
        }
        let img_perm = Tensor::from_vec(&[6, 6, c], perm);

        let g1 = generate_gap_mlp(&img, &gap, &cfg).unwrap();
        let g2 = generate_gap_mlp(&img_perm, &gap, &cfg).unwrap();
        let max = g1[0]
            .1
            .a
            .to_vec()
            .iter()
            .zip(g2[0].1.a.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        assert!(max < 1e-12, "GAP baseline must ignore spatial layout");

        let d1 = generate_dynamic(&img, &w, &cfg).unwrap();
        let d2 = generate_dynamic(&img_perm, &w, &cfg).unwrap();
        let max = d1[0]
            .1
            .a
            .to_vec()
            .iter()
            .zip(d2[0].1.a.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        assert!(max > 1e-6, "query probing must be spatially sensitive");
    }

    #[test]
    fn dynamic_generation_is_spatially_sensitive_to_local_edits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, r) = (4, 2);
        let w = init_weights(c, r, &mut rng);
        let cfg = test_cfg(r);
        let img = randn(&[8, 8, c], &mut rng);
        let mut edited = img.to_vec();
        // Perturb one 2x2 spatial region only.
        for y in 0..2 {
            for x in 0..2 {
                for ch in 0..c {
                    edited[(y * 8 + x) * c + ch] += 3.0;
                }
            }
        }
        let img_edit = Tensor::from_vec(&[8, 8, c], edited);
        let f1 = generate_dynamic(&img, &w, &cfg).unwrap();
        let f2 = generate_dynamic(&img_edit, &w, &cfg).unwrap();
        let max = f1[0]
            .1
            .a
            .to_vec()
            .iter()
            .zip(f2[0].1.a.to_vec())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        assert!(max >= 1e-3, "local edit changed factors by only {max}");
    }

    #[test]
    fn static_factors_generate_normalized_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, r) = (4, 3);
        let sf = StaticFactors::init(c, 2 * c, r, &[InjectionTarget::Q], &mut rng);
        let cfg = CeaConfig {
            factor_source: FactorSource::Static,
            injection_targets: vec![InjectionTarget::Q],
            ..test_cfg(r)
        };
        let out = sf.generate(&cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].1.normalized);
        // Columns near unit norm after normalization.
        let a = out[0].1.a.to_vec();
        for k in 0..r {
            let norm: f64 = (0..c).map(|i| a[i * r + k] * a[i * r + k]).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-4);
        }
    }
}
