//! Alternating discriminator/generator training with CSV logging and
//! periodic checkpoints.
//!
//! One iteration (batch size 1):
//!
//! 1. draw a source image, a target domain (uniform over the targets) and an
//!    unpaired real image of that domain;
//! 2. discriminator step on `(real, G(x, t))` with the generator frozen;
//! 3. generator step on the λ-weighted total of the enabled terms.
//!
//! The discrete parts of a generator step (patch locations, the
//! tissue/background split, hyperedges) are collected in a [`StepPlan`]; a
//! plan can be replayed to evaluate the same objective at other parameters.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{sample_seed, synth_image, Domain, Manifest, StainPalette, TissueLayout};
use crate::error::{config_err, Result};
use crate::losses::{
    build_topology, hcl_term, lsgan_d_loss, lsgan_g_loss, patchnce_loss, single_set_weights, stnhcl_loss,
    total_generator_loss, BranchTopology, HclInput, HclParams, HypergraphConfig, LossConfig, LossReport, LossTerms,
};
use crate::metrics::css;
use crate::models::{heatmap_of, ConditionalGenerator, Discriminator, Encoder, HeatmapMode, Models};
use crate::numeric::{Graph, Scalar, Tensor, Var};
use crate::optim::Adam;
use crate::params::{Bound, InitScheme, ParamSet};
use crate::patch::{gather_patches, sample_patch_ids, FeatureStack, PatchIdList, ProjectionHead};
use crate::weighting::{partition_patches, Strategy};

/// Projection heads and hypergraph convolutions, one per tapped layer.
#[derive(Clone, Debug)]
pub struct ContrastHeads {
    pub layers: Vec<usize>,
    pub proj: Vec<ProjectionHead>,
    pub hcl: Vec<HclParams>,
}

impl ContrastHeads {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        encoder: &Encoder,
        layers: &[usize],
        proj_dim: usize,
        hcfg: &HypergraphConfig,
    ) -> Self {
        let mut proj = Vec::new();
        let mut hcl = Vec::new();
        for &l in layers {
            let c = encoder.channels(l);
            proj.push(ProjectionHead::register(params, &format!("head.{l}.proj"), c, proj_dim));
            hcl.push(HclParams::register(params, &format!("head.{l}.hcl"), c, hcfg));
        }
        Self {
            layers: layers.to_vec(),
            proj,
            hcl,
        }
    }
}

/// Hypergraph-term structure of one tapped layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HclPlan {
    Partitioned {
        tissue: PatchIdList,
        background: PatchIdList,
        tissue_topology: BranchTopology,
        background_topology: BranchTopology,
    },
    Single {
        ids: PatchIdList,
        topology: BranchTopology,
    },
}

/// Every discrete choice of one generator step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepPlan {
    pub nce: Vec<PatchIdList>,
    pub hcl: Vec<HclPlan>,
}

/// Extra generator terms (λ₁-weighted alongside the adversarial loss).
pub trait AuxLoss {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, source: Var, fake: Var, label: usize) -> Result<Option<Var>>;
}

/// No auxiliary terms.
pub struct NoAux;

impl AuxLoss for NoAux {
    fn eval<T: Scalar>(&self, _: &mut Graph<T>, _: Var, _: Var, _: usize) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Networks a generator step reads.
#[derive(Clone, Copy)]
pub struct Nets<'a> {
    pub gen: &'a ConditionalGenerator,
    pub disc: &'a Discriminator,
    pub heads: &'a ContrastHeads,
}

/// Bindings of the three parameter sets on the step's graph.
pub struct Bindings<'a> {
    pub gen: &'a Bound,
    pub disc: &'a Bound,
    pub heads: &'a Bound,
}

pub struct GenStep {
    pub total: Var,
    pub report: LossReport,
    pub fake: Var,
    pub plan: StepPlan,
}

fn map_extent<T: Scalar>(g: &Graph<T>, stack: &FeatureStack, i: usize) -> (usize, usize) {
    let (_, h, w) = stack.extents(g, i);
    (h, w)
}

fn sum_opt<T: Scalar>(g: &mut Graph<T>, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        None => Ok(v),
        Some(a) => g.add(a, v),
    }
}

fn branch_input<T: Scalar>(
    g: &mut Graph<T>,
    src: &FeatureStack,
    fake: &FeatureStack,
    ids: &PatchIdList,
) -> Result<(Var, Var)> {
    Ok((gather_patches(g, src, ids)?, gather_patches(g, fake, ids)?))
}

/// Generator objective for translating `source` toward `label`.
///
/// With `plan = None`, patch locations, the partition and hyperedges are
/// drawn from `rng` and the current features; otherwise `plan` is replayed.
/// `real` (the discriminator input of a real target image) is only read in
/// the verbatim adversarial mode.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<T: Scalar, R: Rng + ?Sized, A: AuxLoss>(
    g: &mut Graph<T>,
    nets: Nets<'_>,
    p: &Bindings<'_>,
    source: Var,
    label: usize,
    real: Option<Var>,
    cfg: &LossConfig,
    heatmap_mode: HeatmapMode,
    plan: Option<&StepPlan>,
    aux: &A,
    rng: &mut R,
) -> Result<GenStep> {
    let k = cfg.patches;
    let (fake, src) = nets.gen.forward_with_features(g, p.gen, source, label, &cfg.layers)?;
    let (_, out) = nets.gen.encoder.forward(g, p.gen, fake, &cfg.layers)?;

    let partitioned = cfg.use_hcl && cfg.weights.strategy == Strategy::DualNormal;
    let mut terms = LossTerms::default();
    let mut heatmap = None;
    if cfg.use_adv || partitioned {
        let d = nets.disc.forward(g, p.disc, fake, label)?;
        heatmap = Some(heatmap_of(g, &d, heatmap_mode));
        if cfg.use_adv {
            let real_score = match real {
                Some(r) => Some(nets.disc.forward(g, p.disc, r, label)?.score),
                None => None,
            };
            terms.adv = Some(lsgan_g_loss(g, d.score, real_score, cfg.adv_mode)?);
        }
    }

    let mut new_plan = StepPlan::default();
    let mut per_layer = vec![(0.0, 0.0); cfg.layers.len()];

    if cfg.use_patchnce {
        let (mut zs, mut vs) = (Vec::new(), Vec::new());
        for (i, slot) in per_layer.iter_mut().enumerate() {
            let ids = match plan {
                Some(pl) => pl.nce[i].clone(),
                None => sample_patch_ids(i, map_extent(g, &src, i), k, rng)?,
            };
            let (xs, ys) = branch_input(g, &src, &out, &ids)?;
            let head = &nets.heads.proj[i];
            let zx = head.project(g, p.heads, xs, i)?;
            let zy = head.project(g, p.heads, ys, i)?;
            let li = patchnce_loss(g, &[zy], &[zx], cfg.weights.tau)?;
            slot.0 = g.scalar_value(li).f64();
            zs.push(zy);
            vs.push(zx);
            new_plan.nce.push(ids);
        }
        terms.patchnce = Some(patchnce_loss(g, &zs, &vs, cfg.weights.tau)?);
    }

    if cfg.use_hcl {
        let mut acc = None;
        for (i, slot) in per_layer.iter_mut().enumerate() {
            let params = &nets.heads.hcl[i];
            let layer_plan = match plan {
                Some(pl) => pl.hcl[i].clone(),
                None => {
                    let ext = map_extent(g, &src, i);
                    if partitioned {
                        let cand = sample_patch_ids(i, ext, 2 * k, rng)?;
                        let hm = heatmap.as_ref().expect("computed when partitioned");
                        let part = partition_patches(hm, &cand, k)?;
                        let (tx, ty) = branch_input(g, &src, &out, &part.hard)?;
                        let (bx, by) = branch_input(g, &src, &out, &part.easy)?;
                        HclPlan::Partitioned {
                            tissue_topology: build_topology(g, tx, ty, &cfg.hypergraph, rng)?,
                            background_topology: build_topology(g, bx, by, &cfg.hypergraph, rng)?,
                            tissue: part.hard,
                            background: part.easy,
                        }
                    } else {
                        let ids = sample_patch_ids(i, ext, k, rng)?;
                        let (x, y) = branch_input(g, &src, &out, &ids)?;
                        HclPlan::Single {
                            topology: build_topology(g, x, y, &cfg.hypergraph, rng)?,
                            ids,
                        }
                    }
                }
            };
            let li = match &layer_plan {
                HclPlan::Partitioned {
                    tissue,
                    background,
                    tissue_topology,
                    background_topology,
                } => {
                    let (tx, ty) = branch_input(g, &src, &out, tissue)?;
                    let (bx, by) = branch_input(g, &src, &out, background)?;
                    let t_in = HclInput {
                        x_nodes: tx,
                        y_nodes: ty,
                        topology: tissue_topology.clone(),
                    };
                    let b_in = HclInput {
                        x_nodes: bx,
                        y_nodes: by,
                        topology: background_topology.clone(),
                    };
                    stnhcl_loss(g, p.heads, params, &t_in, &b_in, &cfg.weights)?
                }
                HclPlan::Single { ids, topology } => {
                    let (x, y) = branch_input(g, &src, &out, ids)?;
                    let input = HclInput {
                        x_nodes: x,
                        y_nodes: y,
                        topology: topology.clone(),
                    };
                    let w = single_set_weights(cfg.weights.strategy);
                    hcl_term(g, p.heads, params, &input, w, &cfg.weights)?
                }
            };
            slot.1 = g.scalar_value(li).f64();
            acc = Some(sum_opt(g, acc, li)?);
            new_plan.hcl.push(layer_plan);
        }
        terms.stnhcl = acc;
    }

    terms.aux = aux.eval(g, source, fake, label)?;
    let (total, mut report) = total_generator_loss(g, terms, cfg.lambda1, cfg.lambda2)?;
    report.per_layer = per_layer;
    Ok(GenStep {
        total,
        report,
        fake,
        plan: new_plan,
    })
}

/// Images available for training, keyed by domain.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Vec<(Domain, Vec<Tensor<f32>>)>,
}

impl TrainData {
    pub fn of(&self, d: Domain) -> Option<&[Tensor<f32>]> {
        self.images.iter().find(|(x, _)| *x == d).map(|(_, v)| v.as_slice())
    }

    /// Render `n` layouts from `seed` in every domain.
    pub fn synthetic(n: usize, seed: u64, size: usize, domains: &[Domain]) -> Result<Self> {
        let layouts: Vec<TissueLayout> = (0..n)
            .map(|i| TissueLayout::generate(sample_seed(seed, i), size))
            .collect::<Result<_>>()?;
        let images = domains
            .iter()
            .map(|&d| {
                let pal = StainPalette::of(d);
                (d, layouts.iter().map(|l| synth_image(l, &pal).0.cast()).collect())
            })
            .collect();
        Ok(Self { images })
    }

    /// Load every manifest image under `dir`.
    pub fn load(dir: &Path, size: usize) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let mut images: Vec<(Domain, Vec<Tensor<f32>>)> = Vec::new();
        for r in &manifest.records {
            let img = crate::data::read_ppm(&dir.join(&r.path))?;
            if img.shape() != [3, size, size] {
                return Err(config_err!(
                    "{}: image is {:?}, config expects 3×{size}×{size}",
                    r.path.display(),
                    img.shape()
                ));
            }
            match images.iter_mut().find(|(d, _)| *d == r.domain) {
                Some((_, v)) => v.push(img.cast()),
                None => images.push((r.domain, vec![img.cast()])),
            }
        }
        Ok(Self { images })
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss_adv: f64,
    pub loss_patchnce: f64,
    pub loss_stnhcl: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
    pub css_probe: Option<f64>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub models: Models<f32>,
    pub heads: ContrastHeads,
    pub head_params: ParamSet<f32>,
    adam_g: Adam,
    adam_d: Adam,
    adam_h: Adam,
    rng: ChaCha8Rng,
    data: TrainData,
    pub iter: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = match &cfg.data_dir {
            Some(dir) => TrainData::load(dir, cfg.image_size)?,
            None => {
                let mut domains = vec![cfg.source_domain];
                domains.extend(&cfg.target_domains);
                TrainData::synthetic(cfg.train_samples, cfg.data_seed, cfg.image_size, &domains)?
            }
        };
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: &RunConfig, data: TrainData) -> Result<Self> {
        for d in std::iter::once(&cfg.source_domain).chain(&cfg.target_domains) {
            if data.of(*d).is_none_or(|v| v.is_empty()) {
                return Err(config_err!("training data has no {d} images"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut models = Models::new(&cfg.model_config())?;
        models.init_params(&mut rng, InitScheme::FanInUniform);
        let mut head_params = ParamSet::new();
        let heads = ContrastHeads::register(
            &mut head_params,
            &models.gen.encoder,
            &cfg.layers,
            cfg.proj_dim,
            &cfg.hypergraph_config(),
        );
        head_params.init(&mut rng, InitScheme::FanInUniform);
        Ok(Self {
            adam_g: Adam::new(cfg.adam(cfg.lr_g), &models.gen_params),
            adam_d: Adam::new(cfg.adam(cfg.lr_d), &models.disc_params),
            adam_h: Adam::new(cfg.adam(cfg.lr_g), &head_params),
            cfg: cfg.clone(),
            models,
            heads,
            head_params,
            rng,
            data,
            iter: 0,
        })
    }

    /// Run one D update and one G update.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let cfg = &self.cfg;
        let label = cfg.target_domains[self.rng.gen_range(0..cfg.target_domains.len())];
        let sources = self.data.of(cfg.source_domain).expect("checked");
        let targets = self.data.of(label).expect("checked");
        let x = sources[self.rng.gen_range(0..sources.len())].clone();
        let y = targets[self.rng.gen_range(0..targets.len())].clone();
        let t = label.index();
        let loss_cfg = cfg.loss_config();

        if cfg.use_adv {
            let mut g = Graph::<f32>::new();
            let gp = self.models.gen_params.bind_frozen(&mut g);
            let dp = self.models.disc_params.bind(&mut g);
            let xv = g.constant(x.clone());
            let fake = self.models.gen.forward(&mut g, &gp, xv, t)?;
            let fake = g.detach(fake);
            let yv = g.constant(y.clone());
            let real = self.models.disc.forward(&mut g, &dp, yv, t)?;
            let fake_d = self.models.disc.forward(&mut g, &dp, fake, t)?;
            let d_loss = lsgan_d_loss(&mut g, real.score, fake_d.score)?;
            let grads = g.backward(d_loss)?;
            self.adam_d.update(&mut self.models.disc_params, &dp, &grads);
        }

        let mut g = Graph::<f32>::new();
        let gp = self.models.gen_params.bind(&mut g);
        let dp = self.models.disc_params.bind_frozen(&mut g);
        let hp = self.head_params.bind(&mut g);
        let xv = g.constant(x.clone());
        let real = match cfg.adv {
            crate::losses::AdvMode::Verbatim => Some(g.constant(y)),
            crate::losses::AdvMode::Standard => None,
        };
        let nets = Nets {
            gen: &self.models.gen,
            disc: &self.models.disc,
            heads: &self.heads,
        };
        let binds = Bindings {
            gen: &gp,
            disc: &dp,
            heads: &hp,
        };
        let step = generator_step(
            &mut g,
            nets,
            &binds,
            xv,
            t,
            real,
            &loss_cfg,
            cfg.heatmap,
            None,
            &NoAux,
            &mut self.rng,
        )?;
        let grads = g.backward(step.total)?;
        self.adam_g.update(&mut self.models.gen_params, &gp, &grads);
        self.adam_h.update(&mut self.head_params, &hp, &grads);

        self.iter += 1;
        let css_probe = if self.iter.is_multiple_of(cfg.css_probe_every) {
            Some(css(&x, g.value(step.fake))?)
        } else {
            None
        };
        let r = step.report;
        if !r.total.is_finite() {
            return Err(crate::Error::Contract(format!(
                "non-finite loss at iteration {}",
                self.iter
            )));
        }
        Ok(MetricsRow {
            iter: self.iter,
            loss_adv: r.adv,
            loss_patchnce: r.patchnce,
            loss_stnhcl: r.stnhcl,
            loss_aux: r.aux,
            loss_total: r.total,
            css_probe,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.add_params("", &self.models.gen_params);
        c.add_params("", &self.models.disc_params);
        c.add_params("", &self.head_params);
        c.push("meta.iter", Tensor::scalar(self.iter as f32));
        c
    }
}

/// Load generator and discriminator weights for `cfg`'s architecture.
pub fn models_from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Models<f32>> {
    let mut m = Models::new(&cfg.model_config())?;
    ckpt.load_params("", &mut m.gen_params)?;
    ckpt.load_params("", &mut m.disc_params)?;
    Ok(m)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub rows: Vec<MetricsRow>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.stnh";

/// Train for `cfg.iterations`, writing `metrics.csv`, periodic
/// `ckpt_NNNNNN.stnh` files, `final.stnh` and the effective `config.txt`
/// under `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.render())?;
    let mut w = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(csv_err)?;
    w.write_record([
        "iter",
        "loss_adv",
        "loss_patchnce",
        "loss_stnhcl",
        "loss_aux",
        "loss_total",
        "css_probe",
    ])
    .map_err(csv_err)?;
    let mut rows = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let row = trainer.step()?;
        w.write_record([
            row.iter.to_string(),
            row.loss_adv.to_string(),
            row.loss_patchnce.to_string(),
            row.loss_stnhcl.to_string(),
            row.loss_aux.to_string(),
            row.loss_total.to_string(),
            row.css_probe.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
        if row.iter % cfg.checkpoint_every == 0 {
            w.flush()?;
            trainer
                .checkpoint()
                .save(&out.join(format!("ckpt_{:06}.stnh", row.iter)))?;
        }
        rows.push(row);
    }
    w.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        rows,
        final_checkpoint,
    })
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::Error::Io(io),
        other => crate::Error::Contract(format!("metrics writer: {other:?}")),
    }
}
