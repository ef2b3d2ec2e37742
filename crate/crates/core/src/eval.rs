//! Held-out evaluation: structure preservation, background whiteness and
//! heatmap separation per target domain.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{sample_seed, synth_image, Domain, Mask, StainPalette, TissueLayout};
use crate::error::Result;
use crate::metrics::{background_whiteness, css, masked_means};
use crate::models::{discriminator_heatmap, Models};
use crate::numeric::{Graph, Tensor};
use crate::train::models_from_checkpoint;

/// One held-out source image and its tissue mask.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub index: usize,
    pub seed: u64,
    pub image: Tensor<f32>,
    pub mask: Mask,
}

/// Held-out source-domain samples; disjoint from training by seed stream.
pub fn eval_samples(cfg: &RunConfig) -> Result<Vec<EvalSample>> {
    let pal = StainPalette::of(cfg.source_domain);
    (0..cfg.eval_samples)
        .map(|i| {
            let seed = sample_seed(cfg.eval_seed, i);
            let (img, mask) = synth_image(&TissueLayout::generate(seed, cfg.image_size)?, &pal);
            Ok(EvalSample {
                index: i,
                seed,
                image: img.cast(),
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalRow {
    pub sample: usize,
    pub seed: u64,
    pub domain: Domain,
    pub css: f64,
    pub whiteness: f64,
    pub heat_tissue: f64,
    pub heat_background: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct DomainSummary {
    pub domain: Domain,
    pub css: f64,
    pub whiteness: f64,
    /// Fraction of samples whose mean heatmap is higher on tissue.
    pub heat_separation: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<DomainSummary>,
}

impl EvalReport {
    pub fn domain(&self, d: Domain) -> Option<&DomainSummary> {
        self.summary.iter().find(|s| s.domain == d)
    }

    /// One JSON object per row, then one per domain summary.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out += &serde_json::to_string(r).expect("plain data");
            out.push('\n');
        }
        for s in &self.summary {
            let v = serde_json::json!({ "summary": s });
            out += &v.to_string();
            out.push('\n');
        }
        out
    }
}

/// Translate `image` toward `domain` without recording gradients.
pub fn translate(models: &Models<f32>, image: &Tensor<f32>, domain: Domain) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = models.gen_params.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let y = models.gen.forward(&mut g, &p, x, domain.index())?;
    Ok(g.value(y).clone())
}

fn eval_one(models: &Models<f32>, cfg: &RunConfig, s: &EvalSample, d: Domain) -> Result<EvalRow> {
    let fake = translate(models, &s.image, d)?;
    let heat = discriminator_heatmap(&models.disc, &models.disc_params, &fake, d.index(), cfg.heatmap)?;
    let (heat_tissue, heat_background) = masked_means(&heat.upsample(s.mask.height, s.mask.width), &s.mask)?;
    Ok(EvalRow {
        sample: s.index,
        seed: s.seed,
        domain: d,
        css: css(&s.image, &fake)?,
        whiteness: background_whiteness(&fake, &s.mask)?,
        heat_tissue,
        heat_background,
    })
}

/// Evaluate every held-out sample against every target domain (in parallel;
/// rows are ordered by sample, then domain).
pub fn evaluate(models: &Models<f32>, cfg: &RunConfig) -> Result<EvalReport> {
    let samples = eval_samples(cfg)?;
    let jobs: Vec<(&EvalSample, Domain)> = samples
        .iter()
        .flat_map(|s| cfg.target_domains.iter().map(move |&d| (s, d)))
        .collect();
    let rows: Vec<EvalRow> = jobs
        .par_iter()
        .map(|&(s, d)| eval_one(models, cfg, s, d))
        .collect::<Result<_>>()?;
    let summary = cfg
        .target_domains
        .iter()
        .map(|&d| {
            let rs: Vec<&EvalRow> = rows.iter().filter(|r| r.domain == d).collect();
            let n = rs.len().max(1) as f64;
            DomainSummary {
                domain: d,
                css: rs.iter().map(|r| r.css).sum::<f64>() / n,
                whiteness: rs.iter().map(|r| r.whiteness).sum::<f64>() / n,
                heat_separation: rs.iter().filter(|r| r.heat_tissue > r.heat_background).count() as f64 / n,
            }
        })
        .collect();
    Ok(EvalReport { rows, summary })
}

pub fn evaluate_checkpoint(path: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let models = models_from_checkpoint(&Checkpoint::load(path)?, cfg)?;
    evaluate(&models, cfg)
}
