//! Evaluation: per-image metrics plus category- and group-wise aggregation.
//!
//! Group means follow the category-wise convention: a group's mean is the
//! mean of its category means, and the overall average is the mean over all
//! category means (not over images).

use std::path::Path;

use serde::Serialize;

use crate::backbone::{restore, RestorerState};
use crate::degrade::{load_manifest, load_pair};
use crate::error::{CeaError, Result};
use crate::metrics::{psnr, ssim, write_metrics_csv, MetricRecord};

#[derive(Debug, Clone, Serialize)]
pub struct CategorySummary {
    pub category: String,
    pub n_images: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub split: String,
    pub records: Vec<MetricRecord>,
    pub categories: Vec<CategorySummary>,
    pub single_psnr: f64,
    pub double_psnr: f64,
    pub triple_psnr: f64,
    pub avg_psnr: f64,
    pub single_ssim: f64,
    pub double_ssim: f64,
    pub triple_ssim: f64,
    pub avg_ssim: f64,
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn group_of(category: &str) -> usize {
    category.matches('+').count()
}

pub fn evaluate_split(state: &RestorerState, dataset: &Path, split: &str) -> Result<EvalSummary> {
    let manifest = load_manifest(dataset)?;
    let items: Vec<_> = manifest.items.iter().filter(|i| i.split == split).collect();
    if items.is_empty() {
        return Err(CeaError::Config(format!(
            "split {split:?} is empty in {}",
            dataset.display()
        )));
    }
    let mut records = Vec::with_capacity(items.len());
    let mut per_cat: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for item in &items {
        let (clean, degraded) = load_pair(dataset, &item.id)?;
        let restored = restore(&degraded, state)?;
        let p = psnr(&restored, &clean, 1.0)?;
        let s = ssim(&restored, &clean)?;
        records.push(MetricRecord {
            image_id: item.id.clone(),
            psnr_db: p,
            ssim: s,
        });
        match per_cat.iter_mut().find(|(c, _, _)| *c == item.category) {
            Some((_, ps, ss)) => {
                ps.push(p);
                ss.push(s);
            }
            None => per_cat.push((item.category.clone(), vec![p], vec![s])),
        }
    }
    let categories: Vec<CategorySummary> = per_cat
        .iter()
        .map(|(c, ps, ss)| CategorySummary {
            category: c.clone(),
            n_images: ps.len(),
            mean_psnr: finite_mean(ps.iter().cloned()),
            mean_ssim: finite_mean(ss.iter().cloned()),
        })
        .collect();
    let group_mean = |g: usize, f: &dyn Fn(&CategorySummary) -> f64| {
        finite_mean(
            categories
                .iter()
                .filter(|c| group_of(&c.category) == g)
                .map(f),
        )
    };
    let avg = |f: &dyn Fn(&CategorySummary) -> f64| finite_mean(categories.iter().map(f));
    Ok(EvalSummary {
        split: split.to_string(),
        single_psnr: group_mean(0, &|c| c.mean_psnr),
        double_psnr: group_mean(1, &|c| c.mean_psnr),
        triple_psnr: group_mean(2, &|c| c.mean_psnr),
        avg_psnr: avg(&|c| c.mean_psnr),
        single_ssim: group_mean(0, &|c| c.mean_ssim),
        double_ssim: group_mean(1, &|c| c.mean_ssim),
        triple_ssim: group_mean(2, &|c| c.mean_ssim),
        avg_ssim: avg(&|c| c.mean_ssim),
        records,
        categories,
    })
}

/// Load a checkpoint, evaluate one split, write the per-image CSV and a JSON
/// summary next to it.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    split: &str,
    out_dir: &Path,
) -> Result<EvalSummary> {
    let state = RestorerState::load_checkpoint(checkpoint)?;
    let summary = evaluate_split(&state, dataset, split)?;
    std::fs::create_dir_all(out_dir)?;
    write_metrics_csv(&out_dir.join(format!("metrics_{split}.csv")), &summary.records)?;
    std::fs::write(
        out_dir.join(format!("summary_{split}.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
