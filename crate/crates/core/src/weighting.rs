//! Tissue/background partition from a discriminator heatmap and the negative
//! sample weights used by the weighted contrastive losses.

use crate::error::{config_err, Result};
use crate::numeric::{Graph, Scalar, Tensor, Var};
use crate::patch::PatchIdList;

/// Spatial map aligned with the discriminator's score map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Per-location Euclidean norm across channels of a `c×h×w` map.
    pub fn from_feature_energy<T: Scalar>(features: &Tensor<T>) -> Self {
        let s = features.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = features.data();
        let values = (0..h * w)
            .map(|p| (0..c).map(|ch| d[ch * h * w + p].f64().powi(2)).sum::<f64>().sqrt())
            .collect();
        Self {
            height: h,
            width: w,
            values,
        }
    }

    /// A `1×h×w` (or `h×w`) score map taken as is.
    pub fn from_score_map<T: Scalar>(map: &Tensor<T>) -> Self {
        let s = map.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Self {
            height: h,
            width: w,
            values: map.data()[..h * w].iter().map(|v| v.f64()).collect(),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Cell whose area contains the centre of location `(row, col)` on an
    /// `extent`-sized grid.
    pub fn cell_for(&self, row: usize, col: usize, extent: (usize, usize)) -> (usize, usize) {
        let map = |i: usize, n: usize, m: usize| (((i as f64 + 0.5) * m as f64 / n as f64) as usize).min(m - 1);
        (map(row, extent.0, self.height), map(col, extent.1, self.width))
    }

    /// Heatmap value under location `(row, col)` of an `extent`-sized grid.
    pub fn sample(&self, row: usize, col: usize, extent: (usize, usize)) -> f64 {
        let (r, c) = self.cell_for(row, col, extent);
        self.at(r, c)
    }

    /// Nearest-cell upsampling to an `h×w` pixel grid.
    pub fn upsample(&self, h: usize, w: usize) -> Vec<f64> {
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| self.sample(r, c, (h, w)))
            .collect()
    }
}

/// High-heatmap (tissue, hard) and low-heatmap (background, easy) patch sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    pub hard: PatchIdList,
    pub easy: PatchIdList,
}

/// Rank candidates by heatmap value and keep the top `k` as tissue and the
/// bottom `k` as background. Equal values order by flat location index, with
/// the lower index ranked lower (towards background).
pub fn partition_patches(heatmap: &Heatmap, candidates: &PatchIdList, k: usize) -> Result<PatchPartition> {
    if k == 0 || candidates.len() < 2 * k {
        return Err(config_err!(
            "partition of {} candidates into two sets of {} needs at least {}",
            candidates.len(),
            k,
            2 * k
        ));
    }
    let ext = candidates.extent;
    let mut ranked: Vec<(f64, usize, (usize, usize))> = candidates
        .ids
        .iter()
        .map(|&(r, c)| (heatmap.sample(r, c, ext), r * ext.1 + c, (r, c)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let easy = ranked[..k].iter().map(|e| e.2).collect();
    let hard = ranked[ranked.len() - k..].iter().rev().map(|e| e.2).collect();
    Ok(PatchPartition {
        hard: PatchIdList::new(candidates.layer, hard, ext)?,
        easy: PatchIdList::new(candidates.layer, easy, ext)?,
    })
}

/// Space the normal-distribution weights are evaluated in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityDomain {
    /// `zᵢᵀvⱼ` directly.
    Cosine,
    /// `zᵢᵀvⱼ / τ`.
    Logit,
}

/// Negative-weighting strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Tissue/background partition with separate normal weights.
    DualNormal,
    MonceHard,
    MonceEasy,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightConfig {
    pub mu_tissue: f64,
    pub sigma_tissue: f64,
    pub mu_background: f64,
    pub sigma_background: f64,
    pub tau: f64,
    pub domain: SimilarityDomain,
    pub strategy: Strategy,
    /// Treat weights as constants during backpropagation.
    pub detach: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            mu_tissue: 0.7,
            sigma_tissue: 0.5,
            mu_background: 0.1,
            sigma_background: 0.5,
            tau: 0.07,
            domain: SimilarityDomain::Cosine,
            strategy: Strategy::DualNormal,
            detach: true,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_tissue", self.sigma_tissue),
            ("sigma_background", self.sigma_background),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Below this, every pdf value of a row counts as underflowed.
const PDF_UNDERFLOW: f64 = 1e-300;

/// Normal-pdf weights normalized to unit mean per row:
/// `w_ij = φ(s_ij; μ, σ) / ((1/K) Σ_m φ(s_im; μ, σ))`.
///
/// Computed as `K · softmax_j(−(s_ij − μ)² / 2σ²)`, which is the same ratio
/// without forming the pdf. Rows where every pdf value is below `1e-300` get
/// uniform weights of 1.
pub fn normal_weights<T: Scalar>(g: &mut Graph<T>, sims: Var, mu: f64, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(config_err!("sigma must be positive, got {sigma}"));
    }
    let shape = g.shape(sims).to_vec();
    let k = shape[shape.len() - 1];
    let centered = g.add_scalar(sims, -mu);
    let sq = g.square(centered);
    let mut expo = g.scale(sq, -1.0 / (2.0 * sigma * sigma));

    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let underflow: Vec<bool> = g
        .value(expo)
        .data()
        .chunks(k)
        .map(|row| row.iter().all(|&e| e.f64() + log_norm < PDF_UNDERFLOW.ln()))
        .collect();
    if underflow.iter().any(|&u| u) {
        let mask: Vec<T> = underflow
            .iter()
            .flat_map(|&u| std::iter::repeat_n(if u { T::zero() } else { T::one() }, k))
            .collect();
        let mask = g.constant(Tensor::new(&shape, mask)?);
        expo = g.mul(expo, mask)?;
    }
    let sm = g.softmax(expo, shape.len() - 1)?;
    Ok(g.scale(sm, k as f64))
}

/// MoNCE weights: row softmax of `s/τ` (hard) or `(1 − s)/τ` (easy).
pub fn monce_weights<T: Scalar>(g: &mut Graph<T>, sims: Var, tau: f64, hard: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(config_err!("tau must be positive, got {tau}"));
    }
    let logits = if hard {
        g.scale(sims, 1.0 / tau)
    } else {
        let flipped = g.neg(sims);
        let flipped = g.add_scalar(flipped, 1.0);
        g.scale(flipped, 1.0 / tau)
    };
    let axis = g.shape(sims).len() - 1;
    g.softmax(logits, axis)
}
