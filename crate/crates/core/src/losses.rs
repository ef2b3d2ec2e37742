//! Training objectives.
//!
//! All contrastive terms share one shape: for anchor embeddings `z` and
//! co-located embeddings `v` (both `K×d`, unit rows),
//!
//! ```text
//! L = −(1/K) Σ_i log( e^{z_iᵀv_i/τ} / (e^{z_iᵀv_i/τ} + Σ_{j≠i} w_ij e^{z_iᵀv_j/τ}) )
//! ```
//!
//! with `w ≡ 1` for plain InfoNCE. The hypergraph terms first convolve patch
//! features over per-branch hypergraphs and normalize the result.

use rand::Rng;

use crate::error::{config_err, contract_err, Result};
use crate::hypergraph::{build_incidence, soft_kmeans, Activation, HgnnParams, Hypergraph};
use crate::numeric::{Graph, Scalar, Tensor, Var, NORM_EPS};
use crate::params::{Bound, ParamSet};
use crate::patch::EmbeddingSet;
use crate::weighting::{monce_weights, normal_weights, SimilarityDomain, Strategy, WeightConfig};

/// `K×K` matrix of `z_iᵀ v_j`.
pub fn similarities<T: Scalar>(g: &mut Graph<T>, z: Var, v: Var) -> Result<Var> {
    let vt = g.transpose(v)?;
    g.matmul(z, vt)
}

fn check_pair<T: Scalar>(g: &Graph<T>, z: Var, v: Var) -> Result<usize> {
    let (sz, sv) = (g.shape(z), g.shape(v));
    if sz.len() != 2 || sz != sv {
        return Err(contract_err!("embedding sets differ: {:?} vs {:?}", sz, sv));
    }
    if sz[0] == 0 {
        return Err(contract_err!("contrastive loss needs at least one patch"));
    }
    Ok(sz[0])
}

/// Weighted InfoNCE. `weights` is `K×K`, non-negative; its diagonal is ignored.
/// `None` means every negative has weight 1.
pub fn weighted_nce<T: Scalar>(g: &mut Graph<T>, z: Var, v: Var, weights: Option<Var>, tau: f64) -> Result<Var> {
    let k = check_pair(g, z, v)?;
    if !(tau > 0.0) {
        return Err(config_err!("tau must be positive, got {tau}"));
    }
    let sims = similarities(g, z, v)?;
    let logits = g.scale(sims, 1.0 / tau);
    let eye = g.constant(Tensor::eye(k));
    let w = match weights {
        None => g.constant(Tensor::ones(&[k, k])),
        Some(w) => {
            if g.shape(w) != [k, k] {
                return Err(contract_err!("weights {:?} for K = {}", g.shape(w), k));
            }
            if g.value(w).data().iter().any(|&x| x < T::zero()) {
                return Err(contract_err!("negative weight"));
            }
            let off = g.constant(Tensor::<T>::ones(&[k, k]));
            let off = g.sub(off, eye)?;
            let masked = g.mul(w, off)?;
            g.add(masked, eye)?
        }
    };
    let lse = g.weighted_logsumexp(logits, w)?;
    let pos = g.diagonal(logits)?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

/// Unweighted InfoNCE over co-located embeddings.
pub fn info_nce<T: Scalar>(g: &mut Graph<T>, z: Var, v: Var, tau: f64) -> Result<Var> {
    weighted_nce(g, z, v, None, tau)
}

/// Weighted InfoNCE with MoNCE hard (`hard = true`) or easy weights.
pub fn monce_loss<T: Scalar>(g: &mut Graph<T>, z: Var, v: Var, tau: f64, hard: bool) -> Result<Var> {
    check_pair(g, z, v)?;
    let sims = similarities(g, z, v)?;
    let w = monce_weights(g, sims, tau, hard)?;
    weighted_nce(g, z, v, Some(w), tau)
}

/// Which weights a single contrastive term applies to its negatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NegativeWeights {
    Uniform,
    Normal { mu: f64, sigma: f64 },
    MonceHard,
    MonceEasy,
}

/// Weighted InfoNCE with weights derived from the current similarities.
/// Respects `cfg.domain` (normal weights only) and `cfg.detach`.
pub fn weighted_contrast<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    v: Var,
    weights: NegativeWeights,
    cfg: &WeightConfig,
) -> Result<Var> {
    check_pair(g, z, v)?;
    if weights == NegativeWeights::Uniform {
        return info_nce(g, z, v, cfg.tau);
    }
    let sims = similarities(g, z, v)?;
    let sims = if cfg.detach { g.detach(sims) } else { sims };
    let w = match weights {
        NegativeWeights::Normal { mu, sigma } => {
            let arg = match cfg.domain {
                SimilarityDomain::Cosine => sims,
                SimilarityDomain::Logit => g.scale(sims, 1.0 / cfg.tau),
            };
            normal_weights(g, arg, mu, sigma)?
        }
        NegativeWeights::MonceHard => monce_weights(g, sims, cfg.tau, true)?,
        NegativeWeights::MonceEasy => monce_weights(g, sims, cfg.tau, false)?,
        NegativeWeights::Uniform => unreachable!(),
    };
    weighted_nce(g, z, v, Some(w), cfg.tau)
}

/// Hypergraph construction and convolution settings.
#[derive(Clone, Debug, PartialEq)]
pub struct HypergraphConfig {
    /// Number of soft k-means clusters `M`.
    pub edges: usize,
    pub threshold: f64,
    pub temperature: f64,
    pub iters: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Reuse the source-branch hypergraph for the generated branch.
    pub share_topology: bool,
    /// Use one set of `Θ` for both branches.
    pub share_params: bool,
}

impl Default for HypergraphConfig {
    fn default() -> Self {
        Self {
            edges: 4,
            threshold: 0.3,
            temperature: 0.1,
            iters: 10,
            hidden: 64,
            out_dim: 64,
            activation: Activation::LeakyRelu(0.2),
            share_topology: false,
            share_params: false,
        }
    }
}

/// Hypergraphs of the source (`x`) and generated (`y`) branches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchTopology {
    pub x: Hypergraph,
    pub y: Hypergraph,
}

/// Cluster one branch's patch features (rows of `nodes`) into a hypergraph.
/// Clustering sees unit-normalized copies of the features and is not
/// differentiated through.
pub fn cluster_hypergraph<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor<T>,
    cfg: &HypergraphConfig,
    rng: &mut R,
) -> Result<Hypergraph> {
    let s = features.shape();
    let c = s[1];
    let mut unit = Vec::with_capacity(features.numel());
    for row in features.data().chunks(c) {
        let n = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt() + NORM_EPS;
        unit.extend(row.iter().map(|v| v.f64() / n));
    }
    let unit = Tensor::<f64>::new(s, unit)?;
    let m = soft_kmeans(&unit, cfg.edges.min(s[0]), cfg.temperature, cfg.iters, rng)?;
    build_incidence(&m, cfg.threshold)
}

pub fn build_topology<T: Scalar, R: Rng + ?Sized>(
    g: &Graph<T>,
    x_nodes: Var,
    y_nodes: Var,
    cfg: &HypergraphConfig,
    rng: &mut R,
) -> Result<BranchTopology> {
    let x = cluster_hypergraph(g.value(x_nodes), cfg, rng)?;
    let y = if cfg.share_topology {
        x.clone()
    } else {
        cluster_hypergraph(g.value(y_nodes), cfg, rng)?
    };
    Ok(BranchTopology { x, y })
}

/// Convolution parameters of both branches for one tapped layer.
#[derive(Clone, Debug)]
pub struct HclParams {
    pub x: HgnnParams,
    pub y: HgnnParams,
}

impl HclParams {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, in_dim: usize, cfg: &HypergraphConfig) -> Self {
        let x = HgnnParams::register(
            params,
            &format!("{prefix}.x"),
            in_dim,
            cfg.hidden,
            cfg.out_dim,
            cfg.activation,
        );
        let y = if cfg.share_params {
            x.clone()
        } else {
            HgnnParams::register(
                params,
                &format!("{prefix}.y"),
                in_dim,
                cfg.hidden,
                cfg.out_dim,
                cfg.activation,
            )
        };
        Self { x, y }
    }
}

/// Patch features of both branches at identical locations plus their hypergraphs.
#[derive(Clone, Debug)]
pub struct HclInput {
    pub x_nodes: Var,
    pub y_nodes: Var,
    pub topology: BranchTopology,
}

/// Unit-norm convolved node embeddings `(Z_o, V_o)`.
pub fn hypergraph_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HclParams,
    input: &HclInput,
) -> Result<(Var, Var)> {
    let zo = params.x.conv(g, p, &input.topology.x, input.x_nodes)?;
    let vo = params.y.conv(g, p, &input.topology.y, input.y_nodes)?;
    Ok((g.l2_normalize(zo, NORM_EPS)?, g.l2_normalize(vo, NORM_EPS)?))
}

/// One hypergraph contrastive term with the given negative weights.
pub fn hcl_term<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HclParams,
    input: &HclInput,
    weights: NegativeWeights,
    cfg: &WeightConfig,
) -> Result<Var> {
    let (z, v) = hypergraph_embeddings(g, p, params, input)?;
    weighted_contrast(g, z, v, weights, cfg)
}

/// Unweighted hypergraph contrastive loss.
pub fn sthcl_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HclParams,
    input: &HclInput,
    tau: f64,
) -> Result<Var> {
    let (z, v) = hypergraph_embeddings(g, p, params, input)?;
    info_nce(g, z, v, tau)
}

/// Tissue term with normal weights at `(μ₁, σ₁)` plus background term at
/// `(μ₂, σ₂)`, each over its own hypergraphs.
pub fn stnhcl_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &HclParams,
    tissue: &HclInput,
    background: &HclInput,
    cfg: &WeightConfig,
) -> Result<Var> {
    let hard = NegativeWeights::Normal {
        mu: cfg.mu_tissue,
        sigma: cfg.sigma_tissue,
    };
    let easy = NegativeWeights::Normal {
        mu: cfg.mu_background,
        sigma: cfg.sigma_background,
    };
    let a = hcl_term(g, p, params, tissue, hard, cfg)?;
    let b = hcl_term(g, p, params, background, easy, cfg)?;
    g.add(a, b)
}

/// Weights a single-set hypergraph term uses under `strategy`.
pub fn single_set_weights(strategy: Strategy) -> NegativeWeights {
    match strategy {
        Strategy::MonceHard => NegativeWeights::MonceHard,
        Strategy::MonceEasy => NegativeWeights::MonceEasy,
        Strategy::Uniform | Strategy::DualNormal => NegativeWeights::Uniform,
    }
}

/// Sum of per-layer InfoNCE between co-located embedding sets.
pub fn patchnce_loss<T: Scalar>(g: &mut Graph<T>, x: &[EmbeddingSet], y: &[EmbeddingSet], tau: f64) -> Result<Var> {
    if x.len() != y.len() || x.is_empty() {
        return Err(contract_err!(
            "PatchNCE needs matching non-empty layer lists, got {} and {}",
            x.len(),
            y.len()
        ));
    }
    let mut total: Option<Var> = None;
    for (a, b) in x.iter().zip(y) {
        let l = info_nce(g, a.embeddings, b.embeddings, tau)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Form of the adversarial objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvMode {
    /// Least-squares GAN with real target 1 and fake target 0.
    Standard,
    /// Generator objective `E[D(real)²] + E[(1 − D(fake))²]` as printed, with
    /// the standard discriminator objective.
    Verbatim,
}

/// `E[(D(real) − 1)²] + E[D(fake)²]`, averaged over score-map locations.
pub fn lsgan_d_loss<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let ones = g.constant(Tensor::ones(g.shape(real)));
    let zeros = g.constant(Tensor::zeros(g.shape(fake)));
    let a = g.mse(real, ones)?;
    let b = g.mse(fake, zeros)?;
    g.add(a, b)
}

/// Generator side: `E[(D(fake) − 1)²]`; the verbatim form adds `E[D(real)²]`.
pub fn lsgan_g_loss<T: Scalar>(g: &mut Graph<T>, fake: Var, real: Option<Var>, mode: AdvMode) -> Result<Var> {
    let ones = g.constant(Tensor::ones(g.shape(fake)));
    let l = g.mse(fake, ones)?;
    match (mode, real) {
        (AdvMode::Standard, _) => Ok(l),
        (AdvMode::Verbatim, Some(r)) => {
            let zeros = g.constant(Tensor::zeros(g.shape(r)));
            let rr = g.mse(r, zeros)?;
            g.add(rr, l)
        }
        (AdvMode::Verbatim, None) => Err(contract_err!("verbatim adversarial loss needs D(real)")),
    }
}

/// `(d_loss, g_loss)` for one pair of discriminator outputs.
pub fn lsgan_losses<T: Scalar>(g: &mut Graph<T>, real: Var, fake: Var, mode: AdvMode) -> Result<(Var, Var)> {
    let d = lsgan_d_loss(g, real, fake)?;
    let gl = lsgan_g_loss(g, fake, Some(real), mode)?;
    Ok((d, gl))
}

/// Which terms a run optimizes and how they are weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub use_adv: bool,
    pub use_patchnce: bool,
    /// Hypergraph contrastive term; its weighting follows `weights.strategy`.
    pub use_hcl: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weights: WeightConfig,
    pub hypergraph: HypergraphConfig,
    /// Patches sampled per layer (per set when partitioned).
    pub patches: usize,
    /// Tapped encoder blocks.
    pub layers: Vec<usize>,
    pub adv_mode: AdvMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_adv: true,
            use_patchnce: true,
            use_hcl: true,
            lambda1: 10.0,
            lambda2: 10.0,
            weights: WeightConfig::default(),
            hypergraph: HypergraphConfig::default(),
            patches: 64,
            layers: vec![1, 2],
            adv_mode: AdvMode::Standard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(config_err!("lambda1 and lambda2 must be non-negative"));
        }
        if self.patches == 0 {
            return Err(config_err!("patch count must be positive"));
        }
        if self.layers.is_empty() {
            return Err(config_err!("at least one layer must be tapped"));
        }
        let h = &self.hypergraph;
        if h.edges == 0 || h.hidden == 0 || h.out_dim == 0 {
            return Err(config_err!("hypergraph edges, hidden and out dims must be positive"));
        }
        if !(h.temperature > 0.0) || !(0.0..=1.0).contains(&h.threshold) {
            return Err(config_err!(
                "clustering temperature must be positive and threshold in [0, 1]"
            ));
        }
        self.weights.validate()
    }
}

/// Per-term generator losses of one iteration.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub adv: f64,
    pub patchnce: f64,
    pub stnhcl: f64,
    pub aux: f64,
    pub total: f64,
    /// `(patchnce, hypergraph term)` per tapped layer.
    pub per_layer: Vec<(f64, f64)>,
}

impl LossReport {
    /// `λ₁·(adv + aux) + λ₂·(stnhcl + patchnce)`.
    pub fn combine(adv: f64, patchnce: f64, stnhcl: f64, aux: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            adv,
            patchnce,
            stnhcl,
            aux,
            total: lambda1 * (adv + aux) + lambda2 * (stnhcl + patchnce),
            per_layer: Vec::new(),
        }
    }
}

/// Generator loss terms; `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub adv: Option<Var>,
    pub patchnce: Option<Var>,
    pub stnhcl: Option<Var>,
    pub aux: Option<Var>,
}

/// Graph node of the λ-weighted total plus its report.
pub fn total_generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    terms: LossTerms,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, LossReport)> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(config_err!("loss weights must be non-negative"));
    }
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v).f64());
    let report = LossReport::combine(
        val(g, terms.adv),
        val(g, terms.patchnce),
        val(g, terms.stnhcl),
        val(g, terms.aux),
        lambda1,
        lambda2,
    );
    let mut acc: Option<Var> = None;
    let mut push = |g: &mut Graph<T>, v: Option<Var>, w: f64| -> Result<()> {
        if let Some(v) = v {
            let s = g.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s)?,
            });
        }
        Ok(())
    };
    push(g, terms.adv, lambda1)?;
    push(g, terms.aux, lambda1)?;
    push(g, terms.stnhcl, lambda2)?;
    push(g, terms.patchnce, lambda2)?;
    let total = match acc {
        Some(v) => v,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok((total, report))
}
