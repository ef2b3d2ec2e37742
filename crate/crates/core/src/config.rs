//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Every key has a default; unknown or repeated keys are rejected. The
//! output of [`RunConfig::render`] parses back to the same configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::Domain;
use crate::error::{config_err, Result};
use crate::hypergraph::Activation;
use crate::losses::{AdvMode, HypergraphConfig, LossConfig};
use crate::models::{Encoder, HeatmapMode, ModelConfig};
use crate::optim::AdamConfig;
use crate::weighting::{SimilarityDomain, Strategy, WeightConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub image_size: usize,
    /// Dataset directory with a manifest; empty means synthesize in memory.
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub train_samples: usize,
    pub eval_seed: u64,
    pub eval_samples: usize,
    pub source_domain: Domain,
    pub target_domains: Vec<Domain>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub css_probe_every: usize,

    pub patches: usize,
    pub layers: Vec<usize>,
    pub proj_dim: usize,
    pub hyperedges: usize,
    pub membership_threshold: f64,
    pub cluster_temperature: f64,
    pub cluster_iters: usize,
    pub hgnn_hidden: usize,
    pub hgnn_out: usize,
    pub share_topology: bool,
    pub share_hgnn_params: bool,

    pub mu_tissue: f64,
    pub sigma_tissue: f64,
    pub mu_background: f64,
    pub sigma_background: f64,
    pub tau: f64,
    pub similarity_domain: SimilarityDomain,
    pub weighting: Strategy,
    pub detach_weights: bool,
    pub heatmap: HeatmapMode,

    pub lambda1: f64,
    pub lambda2: f64,
    pub use_adv: bool,
    pub use_patchnce: bool,
    pub use_hcl: bool,
    pub adv: AdvMode,

    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WeightConfig::default();
        let h = HypergraphConfig::default();
        let l = LossConfig::default();
        let a = AdamConfig::default();
        Self {
            seed: 0,
            iterations: 2000,
            image_size: 64,
            data_dir: None,
            data_seed: 1,
            train_samples: 64,
            eval_seed: 2,
            eval_samples: 16,
            source_domain: Domain::He,
            target_domains: vec![Domain::Mas, Domain::Pas, Domain::Pasm],
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            css_probe_every: 50,

            patches: 32,
            layers: l.layers,
            proj_dim: 64,
            hyperedges: h.edges,
            membership_threshold: h.threshold,
            cluster_temperature: h.temperature,
            cluster_iters: h.iters,
            hgnn_hidden: h.hidden,
            hgnn_out: h.out_dim,
            share_topology: h.share_topology,
            share_hgnn_params: h.share_params,

            mu_tissue: w.mu_tissue,
            sigma_tissue: w.sigma_tissue,
            mu_background: w.mu_background,
            sigma_background: w.sigma_background,
            tau: w.tau,
            similarity_domain: w.domain,
            weighting: w.strategy,
            detach_weights: w.detach,
            heatmap: HeatmapMode::Energy,

            lambda1: l.lambda1,
            lambda2: l.lambda2,
            use_adv: true,
            use_patchnce: true,
            use_hcl: true,
            adv: AdvMode::Standard,

            lr_g: a.lr,
            lr_d: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
        }
    }
}

/// Keys in printing order.
pub const KEYS: &[&str] = &[
    "seed",
    "iterations",
    "image_size",
    "data_dir",
    "data_seed",
    "train_samples",
    "eval_seed",
    "eval_samples",
    "source_domain",
    "target_domains",
    "out_dir",
    "checkpoint_every",
    "css_probe_every",
    "patches",
    "layers",
    "proj_dim",
    "hyperedges",
    "membership_threshold",
    "cluster_temperature",
    "cluster_iters",
    "hgnn_hidden",
    "hgnn_out",
    "share_topology",
    "share_hgnn_params",
    "mu_tissue",
    "sigma_tissue",
    "mu_background",
    "sigma_background",
    "tau",
    "similarity_domain",
    "weighting",
    "detach_weights",
    "heatmap",
    "lambda1",
    "lambda2",
    "use_adv",
    "use_patchnce",
    "use_hcl",
    "adv",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| config_err!("{key}: cannot parse {v:?}: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err!("{key}: expected true or false, got {v:?}")),
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::DualNormal => "dual_normal",
        Strategy::MonceHard => "monce_hard",
        Strategy::MonceEasy => "monce_easy",
        Strategy::Uniform => "uniform",
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        config_err!("{key}: {v:?} is not one of {}", names.join(", "))
    })
}

const STRATEGIES: &[(&str, Strategy)] = &[
    ("dual_normal", Strategy::DualNormal),
    ("monce_hard", Strategy::MonceHard),
    ("monce_easy", Strategy::MonceEasy),
    ("uniform", Strategy::Uniform),
];
const SIM_DOMAINS: &[(&str, SimilarityDomain)] =
    &[("cosine", SimilarityDomain::Cosine), ("logit", SimilarityDomain::Logit)];
const HEATMAPS: &[(&str, HeatmapMode)] = &[("energy", HeatmapMode::Energy), ("output", HeatmapMode::Output)];
const ADV_MODES: &[(&str, AdvMode)] = &[("standard", AdvMode::Standard), ("verbatim", AdvMode::Verbatim)];

fn name_of<T: PartialEq + Copy>(v: T, options: &[(&'static str, T)]) -> &'static str {
    options.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("listed")
}

impl RunConfig {
    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`", i + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|&&k| k == key)
                .ok_or_else(|| config_err!("line {}: unknown key {key:?}", i + 1))?;
            if seen.contains(known) {
                return Err(config_err!("line {}: {key} given twice", i + 1));
            }
            seen.push(known);
            cfg.set(key, value)
                .map_err(|e| config_err!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: ")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "iterations" => self.iterations = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data_seed" => self.data_seed = num(key, v)?,
            "train_samples" => self.train_samples = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            "eval_samples" => self.eval_samples = num(key, v)?,
            "source_domain" => self.source_domain = v.parse()?,
            "target_domains" => self.target_domains = Domain::parse_list(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "css_probe_every" => self.css_probe_every = num(key, v)?,
            "patches" => self.patches = num(key, v)?,
            "layers" => self.layers = list(key, v)?,
            "proj_dim" => self.proj_dim = num(key, v)?,
            "hyperedges" => self.hyperedges = num(key, v)?,
            "membership_threshold" => self.membership_threshold = num(key, v)?,
            "cluster_temperature" => self.cluster_temperature = num(key, v)?,
            "cluster_iters" => self.cluster_iters = num(key, v)?,
            "hgnn_hidden" => self.hgnn_hidden = num(key, v)?,
            "hgnn_out" => self.hgnn_out = num(key, v)?,
            "share_topology" => self.share_topology = flag(key, v)?,
            "share_hgnn_params" => self.share_hgnn_params = flag(key, v)?,
            "mu_tissue" => self.mu_tissue = num(key, v)?,
            "sigma_tissue" => self.sigma_tissue = num(key, v)?,
            "mu_background" => self.mu_background = num(key, v)?,
            "sigma_background" => self.sigma_background = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "similarity_domain" => self.similarity_domain = choice(key, v, SIM_DOMAINS)?,
            "weighting" => self.weighting = choice(key, v, STRATEGIES)?,
            "detach_weights" => self.detach_weights = flag(key, v)?,
            "heatmap" => self.heatmap = choice(key, v, HEATMAPS)?,
            "lambda1" => self.lambda1 = num(key, v)?,
            "lambda2" => self.lambda2 = num(key, v)?,
            "use_adv" => self.use_adv = flag(key, v)?,
            "use_patchnce" => self.use_patchnce = flag(key, v)?,
            "use_hcl" => self.use_hcl = flag(key, v)?,
            "adv" => self.adv = choice(key, v, ADV_MODES)?,
            "lr_g" => self.lr_g = num(key, v)?,
            "lr_d" => self.lr_d = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            _ => return Err(config_err!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "image_size" => self.image_size.to_string(),
            "data_dir" => self
                .data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "data_seed" => self.data_seed.to_string(),
            "train_samples" => self.train_samples.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "source_domain" => self.source_domain.to_string(),
            "target_domains" => join(&self.target_domains),
            "out_dir" => self.out_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "css_probe_every" => self.css_probe_every.to_string(),
            "patches" => self.patches.to_string(),
            "layers" => join(&self.layers),
            "proj_dim" => self.proj_dim.to_string(),
            "hyperedges" => self.hyperedges.to_string(),
            "membership_threshold" => self.membership_threshold.to_string(),
            "cluster_temperature" => self.cluster_temperature.to_string(),
            "cluster_iters" => self.cluster_iters.to_string(),
            "hgnn_hidden" => self.hgnn_hidden.to_string(),
            "hgnn_out" => self.hgnn_out.to_string(),
            "share_topology" => self.share_topology.to_string(),
            "share_hgnn_params" => self.share_hgnn_params.to_string(),
            "mu_tissue" => self.mu_tissue.to_string(),
            "sigma_tissue" => self.sigma_tissue.to_string(),
            "mu_background" => self.mu_background.to_string(),
            "sigma_background" => self.sigma_background.to_string(),
            "tau" => self.tau.to_string(),
            "similarity_domain" => name_of(self.similarity_domain, SIM_DOMAINS).into(),
            "weighting" => strategy_name(self.weighting).into(),
            "detach_weights" => self.detach_weights.to_string(),
            "heatmap" => name_of(self.heatmap, HEATMAPS).into(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "use_adv" => self.use_adv.to_string(),
            "use_patchnce" => self.use_patchnce.to_string(),
            "use_hcl" => self.use_hcl.to_string(),
            "adv" => name_of(self.adv, ADV_MODES).into(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            _ => unreachable!("key list and accessors agree"),
        }
    }

    /// One `key = value` line per setting, in [`KEYS`] order.
    pub fn render(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < crate::data::MIN_SIZE || !self.image_size.is_multiple_of(8) {
            return Err(config_err!("image_size must be a multiple of 8 and at least 32"));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(config_err!("train_samples and eval_samples must be positive"));
        }
        if self.target_domains.contains(&self.source_domain) {
            return Err(config_err!(
                "source_domain {} also listed as a target",
                self.source_domain
            ));
        }
        if self.checkpoint_every == 0 || self.css_probe_every == 0 {
            return Err(config_err!("checkpoint_every and css_probe_every must be positive"));
        }
        if self.layers.iter().any(|&l| l >= Encoder::BLOCKS) {
            return Err(config_err!("layers must index encoder blocks 0..3"));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(config_err!("layers must be distinct"));
        }
        if self.proj_dim == 0 {
            return Err(config_err!("proj_dim must be positive"));
        }
        // Partitioned sampling draws 2K candidates from the smallest tapped map.
        let smallest = self
            .layers
            .iter()
            .map(|&l| Encoder::spatial_extent(l, self.image_size).pow(2))
            .min()
            .unwrap_or(0);
        if 2 * self.patches > smallest {
            return Err(config_err!(
                "patches = {} needs {} locations per tapped map, smallest has {smallest}",
                self.patches,
                2 * self.patches
            ));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("{name} must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err!("{name} must lie in [0, 1)"));
            }
        }
        self.loss_config().validate()
    }

    /// Model widths with one generator label per domain.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_domains: Domain::ALL.len(),
            ..ModelConfig::default()
        }
    }

    pub fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            mu_tissue: self.mu_tissue,
            sigma_tissue: self.sigma_tissue,
            mu_background: self.mu_background,
            sigma_background: self.sigma_background,
            tau: self.tau,
            domain: self.similarity_domain,
            strategy: self.weighting,
            detach: self.detach_weights,
        }
    }

    pub fn hypergraph_config(&self) -> HypergraphConfig {
        HypergraphConfig {
            edges: self.hyperedges,
            threshold: self.membership_threshold,
            temperature: self.cluster_temperature,
            iters: self.cluster_iters,
            hidden: self.hgnn_hidden,
            out_dim: self.hgnn_out,
            activation: Activation::LeakyRelu(0.2),
            share_topology: self.share_topology,
            share_params: self.share_hgnn_params,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            use_adv: self.use_adv,
            use_patchnce: self.use_patchnce,
            use_hcl: self.use_hcl,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            weights: self.weight_config(),
            hypergraph: self.hypergraph_config(),
            patches: self.patches,
            layers: self.layers.clone(),
            adv_mode: self.adv,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.render()).unwrap(), d);
        assert_eq!(d.render().lines().count(), KEYS.len());
        let mut c = d.clone();
        c.data_dir = Some("data/x".into());
        c.weighting = Strategy::MonceEasy;
        c.adv = AdvMode::Verbatim;
        c.layers = vec![2];
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("# run\n\niterations = 10  # short\nuse_hcl=false\nlayers = 2\n").unwrap();
        assert_eq!((c.iterations, c.use_hcl, c.layers.clone()), (10, false, vec![2]));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "colour = red",
            "iterations = ten",
            "iterations = 1\niterations = 2",
            "just words",
            "tau = -1",
            "lambda1 = -0.5",
            "use_adv = maybe",
            "weighting = fancy",
            "source_domain = mas",
            "layers = 0,0",
            "layers = 5",
            "patches = 200",
            "image_size = 36",
            "beta1 = 1.0",
        ] {
            let e = RunConfig::parse(bad).unwrap_err();
            assert!(e.is_validation(), "{bad}: {e}");
        }
    }
}
