//! Ablation grids: train matched variants that differ on exactly one axis,
//! under identical seeds, data, and budgets, then compare with a paired
//! bootstrap against the first (reference) variant.

use serde::Serialize;

use crate::degrade::hash_dir;
use crate::error::{CeaError, Result};
use crate::metrics::{paired_bootstrap, BootstrapSummary, MetricRecord};

use super::config::{config_diff, RunConfig};
use super::eval::evaluate_split;
use super::train::cmd_train;
use crate::backbone::RestorerState;

/// Which single knob the grid varies.
#[derive(Debug, Clone, Serialize)]
pub enum AblationAxis {
    /// Factor source x routing: dynamic+dense, dynamic+top-2, static+dense,
    /// static+top-2.
    FactorRouting,
    /// Query-probe generator vs the pooled-MLP baseline.
    Generator,
    /// Assembly rank sweep (alpha tracks 1/rank).
    Rank(Vec<usize>),
    /// Injection-placement sweep, each entry a JSON list of targets.
    Targets(Vec<String>),
}

impl AblationAxis {
    /// (label, overrides) per variant; the first variant is the comparison
    /// reference.
    pub fn variants(&self) -> Vec<(String, Vec<String>)> {
        match self {
            AblationAxis::FactorRouting => vec![
                (
                    "dynamic_dense".into(),
                    vec![
                        r#"cea.factor_source="Dynamic""#.into(),
                        r#"cea.routing_rule="DenseSigned""#.into(),
                    ],
                ),
                (
                    "dynamic_top2".into(),
                    vec![
                        r#"cea.factor_source="Dynamic""#.into(),
                        r#"cea.routing_rule={"TopKSoftmax":2}"#.into(),
                    ],
                ),
                (
                    "static_dense".into(),
                    vec![
                        r#"cea.factor_source="Static""#.into(),
                        r#"cea.routing_rule="DenseSigned""#.into(),
                    ],
                ),
                (
                    "static_top2".into(),
                    vec![
                        r#"cea.factor_source="Static""#.into(),
                        r#"cea.routing_rule={"TopKSoftmax":2}"#.into(),
                    ],
                ),
            ],
            AblationAxis::Generator => vec![
                (
                    "query_probe".into(),
                    vec![r#"backbone.generator="QueryProbe""#.into()],
                ),
                (
                    "gap_mlp".into(),
                    vec![r#"backbone.generator="GapMlp""#.into()],
                ),
            ],
            AblationAxis::Rank(ranks) => ranks
                .iter()
                .map(|r| {
                    (
                        format!("rank{r}"),
                        vec![
                            format!("cea.rank={r}"),
                            format!("cea.alpha={}", 1.0 / *r as f64),
                        ],
                    )
                })
                .collect(),
            AblationAxis::Targets(sets) => sets
                .iter()
                .map(|json| {
                    let label: String = json
                        .chars()
                        .filter(|c| c.is_ascii_alphanumeric())
                        .collect::<String>()
                        .to_lowercase();
                    (
                        format!("targets_{label}"),
                        vec![format!("cea.injection_targets={json}")],
                    )
                })
                .collect(),
        }
    }

    /// Config paths a variant on this axis may legitimately touch.
    fn allowed_paths(&self) -> Vec<&'static str> {
        match self {
            AblationAxis::FactorRouting => vec![
                "backbone.cea.factor_source",
                "backbone.cea.routing_rule",
                "backbone.cea.routing_rule.TopKSoftmax",
            ],
            AblationAxis::Generator => vec!["backbone.generator"],
            AblationAxis::Rank(_) => vec!["backbone.cea.rank", "backbone.cea.alpha"],
            AblationAxis::Targets(_) => vec!["backbone.cea.injection_targets"],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub single_psnr: f64,
    pub double_psnr: f64,
    pub triple_psnr: f64,
    pub avg_psnr: f64,
    pub avg_ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub label: String,
    pub overrides: Vec<String>,
    pub seeds: Vec<SeedResult>,
    pub median_avg_psnr: f64,
    /// Paired bootstrap of per-image PSNR against the reference variant,
    /// pooled over seeds. Absent on the reference itself.
    pub psnr_vs_reference: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn cmd_ablate(base: &RunConfig, axis: &AblationAxis, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(CeaError::Config("ablation needs at least one seed".into()));
    }
    let variants = axis.variants();
    if variants.len() < 2 {
        return Err(CeaError::Config("ablation axis needs >= 2 variants".into()));
    }
    let hash_before = hash_dir(&base.dataset)?;

    // Build all variant configs first, asserting each differs from the base
    // only on its own axis.
    let allowed = axis.allowed_paths();
    let mut configs = Vec::with_capacity(variants.len());
    for (label, overrides) in &variants {
        let cfg = base.apply_overrides(overrides)?;
        let diff = config_diff(base, &cfg)?;
        for path in &diff {
            if !allowed.iter().any(|a| path == a || path.starts_with(&format!("{a}."))) {
                return Err(CeaError::Config(format!(
                    "variant {label:?} strays off-axis: config differs at {path}"
                )));
            }
        }
        configs.push((label.clone(), overrides.clone(), cfg));
    }

    let mut results: Vec<VariantResult> = Vec::with_capacity(configs.len());
    // Per-variant, per-seed record sets for paired comparison.
    let mut all_records: Vec<Vec<Vec<MetricRecord>>> = Vec::with_capacity(configs.len());
    for (label, overrides, cfg) in &configs {
        let mut seed_results = Vec::with_capacity(seeds.len());
        let mut seed_records = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut run = cfg.clone();
            run.seed = seed;
            run.out_dir = base.out_dir.join(label).join(format!("seed{seed}"));
            let art = cmd_train(&run)?;
            let state = RestorerState::load_checkpoint(&art.checkpoint)?;
            let summary = evaluate_split(&state, &run.dataset, "test")?;
            seed_results.push(SeedResult {
                seed,
                single_psnr: summary.single_psnr,
                double_psnr: summary.double_psnr,
                triple_psnr: summary.triple_psnr,
                avg_psnr: summary.avg_psnr,
                avg_ssim: summary.avg_ssim,
            });
            seed_records.push(summary.records);
        }
        let median_avg_psnr = median(seed_results.iter().map(|s| s.avg_psnr).collect());
        results.push(VariantResult {
            label: label.clone(),
            overrides: overrides.clone(),
            seeds: seed_results,
            median_avg_psnr,
            psnr_vs_reference: None,
        });
        all_records.push(seed_records);
    }

    // Paired bootstrap vs the reference variant, pooling seed-matched
    // per-image differences.
    for v in 1..results.len() {
        let mut diffs = Vec::new();
        for (s, recs) in all_records[v].iter().enumerate() {
            for rec in recs {
                let base_rec = all_records[0][s]
                    .iter()
                    .find(|r| r.image_id == rec.image_id)
                    .ok_or_else(|| {
                        CeaError::Other(format!("image {} missing from reference run", rec.image_id))
                    })?;
                if rec.psnr_db.is_finite() && base_rec.psnr_db.is_finite() {
                    diffs.push(rec.psnr_db - base_rec.psnr_db);
                }
            }
        }
        if !diffs.is_empty() {
            results[v].psnr_vs_reference = Some(paired_bootstrap(&diffs, 2000, 0.95, base.seed)?);
        }
    }

    let hash_after = hash_dir(&base.dataset)?;
    if hash_before != hash_after {
        return Err(CeaError::Other(
            "dataset contents changed during the ablation run".into(),
        ));
    }
    Ok(AblationReport {
        axis: axis.clone(),
        dataset_hash: hash_before,
        seeds: seeds.to_vec(),
        variants: results,
    })
}

pub fn render_table(r: &AblationReport) -> String {
    let mut s = format!(
        "ablation axis {:?}, seeds {:?}, dataset {}\n",
        r.axis, r.seeds, r.dataset_hash
    );
    s.push_str("variant            Single   Double   Triple      Avg   med(Avg)  dPSNR vs ref\n");
    for v in &r.variants {
        let m = |f: &dyn Fn(&SeedResult) -> f64| {
            let vals: Vec<f64> = v.seeds.iter().map(f).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let vs = match &v.psnr_vs_reference {
            Some(b) => format!("{:+.3} [{:+.3},{:+.3}]", b.mean, b.ci_lo, b.ci_hi),
            None => "(reference)".into(),
        };
        s.push_str(&format!(
            "{:<18} {:8.3} {:8.3} {:8.3} {:8.3} {:9.3}  {}\n",
            v.label,
            m(&|x| x.single_psnr),
            m(&|x| x.double_psnr),
            m(&|x| x.triple_psnr),
            m(&|x| x.avg_psnr),
            v.median_avg_psnr,
            vs
        ));
    }
    s
}
