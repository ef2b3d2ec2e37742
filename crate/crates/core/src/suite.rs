//! Finite-difference gradient suite: every tape operation, the loss
//! components and a full generator objective with frozen discrete choices.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{
    build_topology, hcl_term, monce_loss, stnhcl_loss, weighted_nce, BranchTopology, HclInput, HclParams,
    HypergraphConfig, LossConfig, NegativeWeights,
};
use crate::models::{ConditionalGenerator, Discriminator, ModelConfig, Models};
use crate::numeric::{GradCheck, GradCheckReport, Graph, OpKind, Scalar, ScalarFn, Tensor, Var, NORM_EPS};
use crate::params::{Bound, InitScheme, ParamSet};
use crate::train::{generator_step, Bindings, ContrastHeads, Nets, NoAux, StepPlan};
use crate::weighting::{Strategy, WeightConfig};

/// Every differentiable operation of the tape.
pub const OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Neg,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Square,
    OpKind::Sqrt,
    OpKind::Relu,
    OpKind::LeakyRelu,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::SumAll,
    OpKind::MeanAll,
    OpKind::SumAxis,
    OpKind::MeanAxis,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Broadcast,
    OpKind::GatherRows,
    OpKind::MatMul,
    OpKind::Softmax,
    OpKind::L2Normalize,
    OpKind::Conv2d,
    OpKind::UpsampleNearest,
    OpKind::PadReflect,
    OpKind::Diagonal,
    OpKind::WeightedLogSumExp,
    OpKind::Mse,
];

/// `Σ out ⊙ C` with a fixed pseudo-random `C`, so every output entry
/// contributes a distinct amount. When `Mul` itself is under test the
/// contraction goes through a matmul (and `SumAll` through a scaled mean), so
/// an injected fault is not cancelled by the contraction itself.
fn contract<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64, under_test: OpKind) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let c = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    if under_test == OpKind::Mul {
        let n = c.data().len();
        let col = g.constant(Tensor::new(&[n, 1], c.cast::<T>().data().to_vec())?);
        let row = g.reshape(out, &[1, n])?;
        let dot = g.matmul(row, col)?;
        return Ok(g.sum(dot));
    }
    let n = c.data().len();
    let c = g.constant(c.cast());
    let prod = g.mul(out, c)?;
    if under_test == OpKind::SumAll {
        let m = g.mean(prod);
        return Ok(g.scale(m, n as f64));
    }
    Ok(g.sum(prod))
}

/// One tape operation applied to random inputs.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub kind: OpKind,
    /// Extra integer arguments (axis, stride, pad, factor, gather indices).
    pub args: Vec<usize>,
    pub coef_seed: u64,
}

impl ScalarFn for OpCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        use OpKind::*;
        let a = &self.args;
        let out = match self.kind {
            Add => g.add(p[0], p[1])?,
            Sub => g.sub(p[0], p[1])?,
            Mul => g.mul(p[0], p[1])?,
            Div => g.div(p[0], p[1])?,
            Neg => g.neg(p[0]),
            Scale => g.scale(p[0], -1.7),
            AddScalar => g.add_scalar(p[0], 0.3),
            Exp => g.exp(p[0]),
            Log => g.log(p[0]),
            Square => g.square(p[0]),
            Sqrt => g.sqrt(p[0]),
            Relu => g.relu(p[0]),
            LeakyRelu => g.leaky_relu(p[0], 0.2),
            Sigmoid => g.sigmoid(p[0]),
            Tanh => g.tanh(p[0]),
            SumAll => g.sum(p[0]),
            MeanAll => g.mean(p[0]),
            SumAxis => g.sum_axis(p[0], a[0])?,
            MeanAxis => g.mean_axis(p[0], a[0])?,
            Transpose => g.transpose(p[0])?,
            Reshape => {
                let n: usize = g.shape(p[0]).iter().product();
                g.reshape(p[0], &[n])?
            }
            Broadcast => {
                let c = g.shape(p[0])[1];
                g.broadcast(p[0], &[a[0], c])?
            }
            GatherRows => g.gather_rows(p[0], a)?,
            MatMul => g.matmul(p[0], p[1])?,
            Softmax => g.softmax(p[0], a[0])?,
            L2Normalize => g.l2_normalize(p[0], NORM_EPS)?,
            Conv2d => g.conv2d(p[0], p[1], Some(p[2]), a[0], a[1])?,
            UpsampleNearest => g.upsample_nearest(p[0], a[0])?,
            PadReflect => g.pad_reflect(p[0], a[0])?,
            Diagonal => g.diagonal(p[0])?,
            WeightedLogSumExp => g.weighted_logsumexp(p[0], p[1])?,
            Mse => g.mse(p[0], p[1])?,
            Leaf => p[0],
        };
        contract(g, out, self.coef_seed, self.kind)
    }
}

/// Entries in `±[0.1, 1]`: away from the kinks of relu and leaky relu.
fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).expect("matching extent")
}

/// A random instance of the operation `kind` and its inputs.
pub fn op_case<R: Rng + ?Sized>(kind: OpKind, rng: &mut R) -> (OpCase, Vec<Tensor<f64>>) {
    use OpKind::*;
    let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let u = |shape: &[usize], lo: f64, hi: f64, rng: &mut R| Tensor::<f64>::uniform(shape, lo, hi, rng);
    let mut args = Vec::new();
    let inputs = match kind {
        Add | Sub | Mul | Mse => vec![u(&[r, c], -1.0, 1.0, rng), u(&[r, c], -1.0, 1.0, rng)],
        Div => {
            let d = away_from_zero(&[r, c], rng).map(|v| v * 2.0);
            vec![u(&[r, c], -1.0, 1.0, rng), d]
        }
        Log | Sqrt => vec![u(&[r, c], 0.2, 2.0, rng)],
        Relu | LeakyRelu => vec![away_from_zero(&[r, c], rng)],
        Exp | Neg | Scale | AddScalar | Square | Sigmoid | Tanh | SumAll | MeanAll | Transpose | Reshape
        | L2Normalize | Leaf => vec![u(&[r, c], -2.0, 2.0, rng)],
        SumAxis | MeanAxis | Softmax => {
            args.push(rng.gen_range(0..2));
            vec![u(&[r, c], -2.0, 2.0, rng)]
        }
        Broadcast => {
            args.push(rng.gen_range(1..4));
            vec![u(&[1, c], -1.0, 1.0, rng)]
        }
        GatherRows => {
            args = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..r)).collect();
            vec![u(&[r, c], -1.0, 1.0, rng)]
        }
        MatMul => {
            let k = rng.gen_range(1..5);
            vec![u(&[r, k], -1.0, 1.0, rng), u(&[k, c], -1.0, 1.0, rng)]
        }
        Conv2d => {
            let (ci, co, k) = (rng.gen_range(1..4), rng.gen_range(1..4), [1, 3][rng.gen_range(0..2)]);
            let (h, w) = (rng.gen_range(k..7), rng.gen_range(k..7));
            args.push(rng.gen_range(1..3));
            args.push(if k == 3 { rng.gen_range(0..2) } else { 0 });
            vec![
                u(&[ci, h, w], -1.0, 1.0, rng),
                u(&[co, ci, k, k], -1.0, 1.0, rng),
                u(&[co], -1.0, 1.0, rng),
            ]
        }
        UpsampleNearest => {
            args.push(rng.gen_range(1..4));
            vec![u(&[rng.gen_range(1..3), r, c], -1.0, 1.0, rng)]
        }
        PadReflect => {
            let (h, w) = (rng.gen_range(2..6), rng.gen_range(2..6));
            args.push(rng.gen_range(1..h.min(w)));
            vec![u(&[rng.gen_range(1..3), h, w], -1.0, 1.0, rng)]
        }
        Diagonal => vec![u(&[r, r], -1.0, 1.0, rng)],
        WeightedLogSumExp => vec![u(&[r, c], -3.0, 3.0, rng), u(&[r, c], 0.1, 2.0, rng)],
    };
    let case = OpCase {
        kind,
        args,
        coef_seed: rng.gen(),
    };
    (case, inputs)
}

/// Unit-normalize rows of `p` and evaluate a weighted contrastive loss.
#[derive(Clone, Debug)]
pub struct ContrastCase {
    pub weights: NegativeWeights,
    pub cfg: WeightConfig,
}

impl ScalarFn for ContrastCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let z = g.l2_normalize(p[0], NORM_EPS)?;
        let v = g.l2_normalize(p[1], NORM_EPS)?;
        match self.weights {
            NegativeWeights::MonceHard => monce_loss(g, z, v, self.cfg.tau, true),
            NegativeWeights::MonceEasy => monce_loss(g, z, v, self.cfg.tau, false),
            w => crate::losses::weighted_contrast(g, z, v, w, &self.cfg),
        }
    }
}

/// Weighted InfoNCE with explicit weights as the third input.
#[derive(Clone, Debug)]
pub struct WeightedNceCase {
    pub tau: f64,
}

impl ScalarFn for WeightedNceCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let z = g.l2_normalize(p[0], NORM_EPS)?;
        let v = g.l2_normalize(p[1], NORM_EPS)?;
        weighted_nce(g, z, v, Some(p[2]), self.tau)
    }
}

/// Tissue + background hypergraph loss over node features and both
/// convolutions; inputs are `[tissue x, tissue y, bg x, bg y, Θ…]`.
#[derive(Clone, Debug)]
pub struct HypergraphLossCase {
    pub params: HclParams,
    pub tissue: BranchTopology,
    pub background: BranchTopology,
    pub cfg: WeightConfig,
    /// Evaluate only the tissue term with these weights instead.
    pub single: Option<NegativeWeights>,
}

impl ScalarFn for HypergraphLossCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let bound = Bound::from_vars(p[4..].to_vec());
        let tissue = HclInput {
            x_nodes: p[0],
            y_nodes: p[1],
            topology: self.tissue.clone(),
        };
        if let Some(w) = self.single {
            return hcl_term(g, &bound, &self.params, &tissue, w, &self.cfg);
        }
        let background = HclInput {
            x_nodes: p[2],
            y_nodes: p[3],
            topology: self.background.clone(),
        };
        stnhcl_loss(g, &bound, &self.params, &tissue, &background, &self.cfg)
    }
}

/// Tissue/background hypergraph loss on `k` random nodes of dimension `c`
/// with `m` hyperedges; weights are differentiated through.
pub fn hypergraph_case<R: Rng + ?Sized>(
    k: usize,
    m: usize,
    c: usize,
    single: Option<NegativeWeights>,
    rng: &mut R,
) -> Result<(HypergraphLossCase, Vec<Tensor<f64>>)> {
    let hcfg = HypergraphConfig {
        edges: m,
        hidden: 12,
        out_dim: 10,
        ..HypergraphConfig::default()
    };
    let cfg = WeightConfig {
        detach: false,
        tau: 0.2,
        ..WeightConfig::default()
    };
    let mut ps = ParamSet::<f64>::new();
    let params = HclParams::register(&mut ps, "hcl", c, &hcfg);
    ps.init(rng, InitScheme::FanInUniform);
    let nodes: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[k, c], -1.0, 1.0, rng)).collect();
    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = nodes.iter().map(|t| g.constant(t.clone())).collect();
    let tissue = build_topology(&g, v[0], v[1], &hcfg, rng)?;
    let background = build_topology(&g, v[2], v[3], &hcfg, rng)?;
    let mut inputs = nodes;
    inputs.extend(ps.iter().map(|(_, t)| t.clone()));
    Ok((
        HypergraphLossCase {
            params,
            tissue,
            background,
            cfg,
            single,
        },
        inputs,
    ))
}

/// The complete generator objective (adversarial, PatchNCE and the
/// tissue/background hypergraph terms) as a function of the generator and
/// head parameters, with the discriminator, image and plan held fixed.
#[derive(Clone, Debug)]
pub struct GeneratorCase {
    pub gen: ConditionalGenerator,
    pub disc: Discriminator,
    pub heads: ContrastHeads,
    pub disc_params: ParamSet<f64>,
    pub n_gen: usize,
    pub image: Tensor<f64>,
    pub label: usize,
    pub loss: LossConfig,
    pub plan: StepPlan,
}

impl ScalarFn for GeneratorCase {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let gp = Bound::from_vars(p[..self.n_gen].to_vec());
        let hp = Bound::from_vars(p[self.n_gen..].to_vec());
        let dp = self.disc_params.cast::<T>().bind_frozen(g);
        let x = g.constant(self.image.cast());
        let nets = Nets {
            gen: &self.gen,
            disc: &self.disc,
            heads: &self.heads,
        };
        let b = Bindings {
            gen: &gp,
            disc: &dp,
            heads: &hp,
        };
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let step = generator_step(
            g,
            nets,
            &b,
            x,
            self.label,
            None,
            &self.loss,
            crate::models::HeatmapMode::Energy,
            Some(&self.plan),
            &NoAux,
            &mut unused,
        )?;
        Ok(step.total)
    }
}

/// A small generator objective: `size×size` image, `k` patches, `m`
/// hyperedges on encoder layer 0 (`c` channels), gradients of weights kept.
pub fn generator_case<R: Rng + ?Sized>(
    size: usize,
    k: usize,
    m: usize,
    c: usize,
    rng: &mut R,
) -> Result<(GeneratorCase, Vec<Tensor<f64>>)> {
    let mut cfg = RunConfig {
        image_size: size,
        patches: k,
        layers: vec![0],
        hyperedges: m,
        hgnn_hidden: 8,
        hgnn_out: 8,
        proj_dim: 8,
        detach_weights: false,
        tau: 0.2,
        ..RunConfig::default()
    };
    cfg.weighting = Strategy::DualNormal;
    let mcfg = ModelConfig {
        enc_channels: [c, 8, 8],
        disc_channels: [4, 4, 4],
        ..cfg.model_config()
    };
    let mut models = Models::<f64>::new(&mcfg)?;
    models.init_params(rng, InitScheme::FanInUniform);
    let mut hps = ParamSet::<f64>::new();
    let heads = ContrastHeads::register(
        &mut hps,
        &models.gen.encoder,
        &[0],
        cfg.proj_dim,
        &cfg.hypergraph_config(),
    );
    hps.init(rng, InitScheme::FanInUniform);
    let image = Tensor::uniform(&[3, size, size], 0.0, 1.0, rng);
    let label = rng.gen_range(0..mcfg.n_domains);
    let loss = cfg.loss_config();

    let mut g = Graph::<f64>::new();
    let gp = models.gen_params.bind_frozen(&mut g);
    let dp = models.disc_params.bind_frozen(&mut g);
    let hp = hps.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let nets = Nets {
        gen: &models.gen,
        disc: &models.disc,
        heads: &heads,
    };
    let b = Bindings {
        gen: &gp,
        disc: &dp,
        heads: &hp,
    };
    let plan = generator_step(
        &mut g,
        nets,
        &b,
        x,
        label,
        None,
        &loss,
        crate::models::HeatmapMode::Energy,
        None,
        &NoAux,
        rng,
    )?
    .plan;
    let mut inputs: Vec<Tensor<f64>> = models.gen_params.iter().map(|(_, t)| t.clone()).collect();
    let n_gen = inputs.len();
    inputs.extend(hps.iter().map(|(_, t)| t.clone()));
    Ok((
        GeneratorCase {
            gen: models.gen,
            disc: models.disc,
            heads,
            disc_params: models.disc_params,
            n_gen,
            image,
            label,
            loss,
            plan,
        },
        inputs,
    ))
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per operation.
    pub trials: usize,
    pub eps: f64,
    pub tol: f64,
    /// Cap on probed entries per tensor in the generator-objective check;
    /// `None` probes every entry.
    pub pipeline_entries: Option<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 10,
            eps: 1e-4,
            tol: 1e-4,
            pipeline_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tol: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<28} {:>7} {:>12}  status\n", "check", "probes", "max rel err");
        for e in &self.entries {
            s += &format!(
                "{:<28} {:>7} {:>12.3e}  {}\n",
                e.name,
                e.report.probes,
                e.report.max_rel_err,
                if e.passed { "ok" } else { "FAIL" }
            );
        }
        let failed = self.entries.iter().filter(|e| !e.passed).count();
        s += &format!(
            "{} checks, {failed} failed, tolerance {:.0e}, {:.1}s\n",
            self.entries.len(),
            self.tol,
            self.elapsed.as_secs_f64()
        );
        s
    }
}

type Job = Box<dyn Fn() -> Result<GradCheckReport> + Send + Sync>;

fn job<F: ScalarFn + Send + Sync + 'static>(check: GradCheck, f: F, inputs: Vec<Tensor<f64>>) -> Job {
    Box::new(move || check.run::<f64, _>(&f, &inputs))
}

/// Run every check in parallel (64-bit, central differences).
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let check = GradCheck {
        eps: opts.eps,
        ..GradCheck::default()
    };
    let mut jobs: Vec<(String, Job)> = Vec::new();
    for &kind in OPS {
        for t in 0..opts.trials {
            let (case, inputs) = op_case(kind, &mut rng);
            jobs.push((format!("op {kind:?} #{t}"), job(check, case, inputs)));
        }
    }
    let (k, c) = (8, 16);
    let pair = |rng: &mut ChaCha8Rng| {
        vec![
            Tensor::<f64>::uniform(&[k, c], -1.0, 1.0, rng),
            Tensor::<f64>::uniform(&[k, c], -1.0, 1.0, rng),
        ]
    };
    let free = WeightConfig {
        detach: false,
        tau: 0.2,
        ..WeightConfig::default()
    };
    for (name, weights) in [
        ("normal weights", NegativeWeights::Normal { mu: 0.7, sigma: 0.5 }),
        ("monce hard", NegativeWeights::MonceHard),
        ("monce easy", NegativeWeights::MonceEasy),
        ("uniform", NegativeWeights::Uniform),
    ] {
        let case = ContrastCase { weights, cfg: free };
        jobs.push((format!("contrast {name}"), job(check, case, pair(&mut rng))));
    }
    let mut nce_inputs = pair(&mut rng);
    nce_inputs.push(Tensor::uniform(&[k, k], 0.1, 2.0, &mut rng));
    jobs.push((
        "weighted nce".into(),
        job(check, WeightedNceCase { tau: 0.2 }, nce_inputs),
    ));
    let (case, inputs) = hypergraph_case(k, 3, c, None, &mut rng)?;
    jobs.push(("tissue+background hcl".into(), job(check, case, inputs)));
    let (case, inputs) = hypergraph_case(k, 3, c, Some(NegativeWeights::MonceHard), &mut rng)?;
    jobs.push(("single-set hcl".into(), job(check, case, inputs)));
    let pipeline = GradCheck {
        max_entries: opts.pipeline_entries,
        ..check
    };
    let (case, inputs) = generator_case(16, k, 3, c, &mut rng)?;
    jobs.push(("generator objective".into(), job(pipeline, case, inputs)));

    let entries = jobs
        .par_iter()
        .map(|(name, f)| {
            let report = f()?;
            Ok(SuiteEntry {
                name: name.clone(),
                passed: report.passes(opts.tol),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        entries,
        tol: opts.tol,
        elapsed: start.elapsed(),
    })
}
