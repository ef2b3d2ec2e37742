//! Scalar reference implementations and fixtures shared by the integration
//! tests. Everything here works on plain `Vec<Vec<f64>>` with explicit loops.

// Explicit index loops are the point of the reference implementations.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use rand::Rng;
use stnhcl::hypergraph::Hypergraph;
use stnhcl::losses::{BranchTopology, HclInput, HclParams, HypergraphConfig};
use stnhcl::numeric::{Graph, Tensor, NORM_EPS};
use stnhcl::params::{InitScheme, ParamSet};

pub type Mat = Vec<Vec<f64>>;

pub fn random_mat<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, |r| r.len());
    Tensor::new(&[m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn from_tensor(t: &Tensor<f64>) -> Mat {
    t.rows().map(|r| r.to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Rows divided by `‖row‖ + NORM_EPS`.
pub fn unit_rows(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = dot(r, r).sqrt() + NORM_EPS;
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn sims(z: &Mat, v: &Mat) -> Mat {
    z.iter().map(|zi| v.iter().map(|vj| dot(zi, vj)).collect()).collect()
}

/// `−(1/K) Σ_i log( e^{s_ii/τ} / (e^{s_ii/τ} + Σ_{j≠i} w_ij e^{s_ij/τ}) )`.
pub fn weighted_nce(z: &Mat, v: &Mat, w: Option<&Mat>, tau: f64) -> f64 {
    let k = z.len();
    let mut total = 0.0;
    for i in 0..k {
        let pos = (dot(&z[i], &v[i]) / tau).exp();
        let mut denom = pos;
        for j in 0..k {
            if j != i {
                let wij = w.map_or(1.0, |w| w[i][j]);
                denom += wij * (dot(&z[i], &v[j]) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / k as f64
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `w_ij = φ(s_ij) / ((1/K) Σ_m φ(s_im))`.
pub fn normal_weights(s: &Mat, mu: f64, sigma: f64) -> Mat {
    s.iter()
        .map(|row| {
            let mut mean = 0.0;
            for &x in row {
                mean += normal_pdf(x, mu, sigma);
            }
            mean /= row.len() as f64;
            row.iter().map(|&x| normal_pdf(x, mu, sigma) / mean).collect()
        })
        .collect()
}

/// Row softmax of `s/τ` (hard) or `(1 − s)/τ` (easy).
pub fn monce_weights(s: &Mat, tau: f64, hard: bool) -> Mat {
    s.iter()
        .map(|row| {
            let logit = |x: f64| if hard { x / tau } else { (1.0 - x) / tau };
            let mut z = 0.0;
            for &x in row {
                z += logit(x).exp();
            }
            row.iter().map(|&x| logit(x).exp() / z).collect()
        })
        .collect()
}

pub fn monce_loss(z: &Mat, v: &Mat, tau: f64, hard: bool) -> f64 {
    let w = monce_weights(&sims(z, v), tau, hard);
    weighted_nce(z, v, Some(&w), tau)
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

/// Node → hyperedge mean → node mean, activation after `Θ₁` and after the
/// edge aggregation.
pub fn hgnn(hg: &Hypergraph, x: &Mat, t1: &Mat, t2: &Mat, slope: Option<f64>) -> Mat {
    let act = |v: f64| slope.map_or(v, |s| leaky(v, s));
    let h: Mat = matmul(x, t1)
        .into_iter()
        .map(|r| r.into_iter().map(act).collect())
        .collect();
    let (k, hidden) = (x.len(), t1[0].len());
    let edges: Vec<usize> = (0..hg.edges()).filter(|&e| !hg.members(e).is_empty()).collect();
    let mut e_feat = Vec::new();
    for &e in &edges {
        let members = hg.members(e);
        let mut f = vec![0.0; hidden];
        for &n in &members {
            for c in 0..hidden {
                f[c] += h[n][c];
            }
        }
        e_feat.push(f.into_iter().map(|v| act(v / members.len() as f64)).collect::<Vec<_>>());
    }
    let mut back = vec![vec![0.0; hidden]; k];
    for n in 0..k {
        let mine: Vec<usize> = (0..edges.len()).filter(|&i| hg.contains(edges[i], n)).collect();
        for &i in &mine {
            for c in 0..hidden {
                back[n][c] += e_feat[i][c] / mine.len() as f64;
            }
        }
    }
    matmul(&back, t2)
}

/// Convolution parameters of one branch as matrices.
pub struct BranchParams {
    pub t1: Mat,
    pub t2: Mat,
}

pub fn branch_params(ps: &ParamSet<f64>, p: &HclParams) -> (BranchParams, BranchParams) {
    let get = |id| from_tensor(ps.get(id));
    (
        BranchParams {
            t1: get(p.x.theta1),
            t2: get(p.x.theta2),
        },
        BranchParams {
            t1: get(p.y.theta1),
            t2: get(p.y.theta2),
        },
    )
}

fn slope_of(cfg: &HypergraphConfig) -> Option<f64> {
    match cfg.activation {
        stnhcl::hypergraph::Activation::Identity => None,
        stnhcl::hypergraph::Activation::LeakyRelu(s) => Some(s),
    }
}

/// Unit-norm convolved embeddings of both branches.
pub fn embeddings(
    cfg: &HypergraphConfig,
    params: &(BranchParams, BranchParams),
    topo: &BranchTopology,
    x: &Mat,
    y: &Mat,
) -> (Mat, Mat) {
    let s = slope_of(cfg);
    let z = hgnn(&topo.x, x, &params.0.t1, &params.0.t2, s);
    let v = hgnn(&topo.y, y, &params.1.t1, &params.1.t2, s);
    (unit_rows(&z), unit_rows(&v))
}

pub fn sthcl(
    cfg: &HypergraphConfig,
    params: &(BranchParams, BranchParams),
    topo: &BranchTopology,
    x: &Mat,
    y: &Mat,
    tau: f64,
) -> f64 {
    let (z, v) = embeddings(cfg, params, topo, x, y);
    weighted_nce(&z, &v, None, tau)
}

pub fn normal_weighted_term(
    cfg: &HypergraphConfig,
    params: &(BranchParams, BranchParams),
    topo: &BranchTopology,
    x: &Mat,
    y: &Mat,
    mu: f64,
    sigma: f64,
    tau: f64,
) -> f64 {
    let (z, v) = embeddings(cfg, params, topo, x, y);
    let w = normal_weights(&sims(&z, &v), mu, sigma);
    weighted_nce(&z, &v, Some(&w), tau)
}

/// A random hypergraph instance: parameters, node features of both
/// branches for two sets (tissue, background) and their topologies.
pub struct HclInstance {
    pub cfg: HypergraphConfig,
    pub ps: ParamSet<f64>,
    pub params: HclParams,
    pub tx: Mat,
    pub ty: Mat,
    pub bx: Mat,
    pub by: Mat,
    pub tissue: BranchTopology,
    pub background: BranchTopology,
}

pub fn hcl_instance<R: Rng + ?Sized>(rng: &mut R, k: usize, c: usize, edges: usize) -> HclInstance {
    let cfg = HypergraphConfig {
        edges,
        hidden: rng.gen_range(2..7),
        out_dim: rng.gen_range(2..7),
        ..HypergraphConfig::default()
    };
    let mut ps = ParamSet::<f64>::new();
    let params = HclParams::register(&mut ps, "hcl", c, &cfg);
    ps.init(rng, InitScheme::FanInUniform);
    let (tx, ty, bx, by) = (
        random_mat(rng, k, c),
        random_mat(rng, k, c),
        random_mat(rng, k, c),
        random_mat(rng, k, c),
    );
    let mut g = Graph::<f64>::new();
    let v: Vec<_> = [&tx, &ty, &bx, &by].iter().map(|m| g.constant(to_tensor(m))).collect();
    let tissue = stnhcl::losses::build_topology(&g, v[0], v[1], &cfg, rng).unwrap();
    let background = stnhcl::losses::build_topology(&g, v[2], v[3], &cfg, rng).unwrap();
    HclInstance {
        cfg,
        ps,
        params,
        tx,
        ty,
        bx,
        by,
        tissue,
        background,
    }
}

impl HclInstance {
    /// Bind parameters and both inputs on a fresh graph.
    pub fn bind(&self, g: &mut Graph<f64>) -> (stnhcl::params::Bound, HclInput, HclInput) {
        let p = self.ps.bind(g);
        let t = HclInput {
            x_nodes: g.constant(to_tensor(&self.tx)),
            y_nodes: g.constant(to_tensor(&self.ty)),
            topology: self.tissue.clone(),
        };
        let b = HclInput {
            x_nodes: g.constant(to_tensor(&self.bx)),
            y_nodes: g.constant(to_tensor(&self.by)),
            topology: self.background.clone(),
        };
        (p, t, b)
    }

    pub fn oracle_params(&self) -> (BranchParams, BranchParams) {
        branch_params(&self.ps, &self.params)
    }
}

/// Relative difference with an absolute floor of 1.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Largest absolute library−oracle gap over `trials` random instances with
/// `K ≤ 6`, for the unweighted hypergraph loss, MoNCE (hard and easy), the
/// normal-weighted loss and the tissue+background total, in that order.
pub fn oracle_gaps(trials: usize, seed: u64) -> [f64; 4] {
    use rand::SeedableRng;
    use stnhcl::losses::{sthcl_loss, stnhcl_loss, weighted_contrast, NegativeWeights};
    use stnhcl::weighting::WeightConfig;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = [0.0f64; 4];
    for _ in 0..trials {
        let k = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=3);
        let tau = rng.gen_range(0.05..1.0);
        let inst = hcl_instance(&mut rng, k, c, m);
        let op = inst.oracle_params();

        let mut g = Graph::<f64>::new();
        let (p, t, _) = inst.bind(&mut g);
        let l = sthcl_loss(&mut g, &p, &inst.params, &t, tau).unwrap();
        let want = sthcl(&inst.cfg, &op, &inst.tissue, &inst.tx, &inst.ty, tau);
        gaps[0] = gaps[0].max((g.scalar_value(l) - want).abs());

        let (z, v) = (
            unit_rows(&random_mat(&mut rng, k, c)),
            unit_rows(&random_mat(&mut rng, k, c)),
        );
        for hard in [true, false] {
            let mut g = Graph::<f64>::new();
            let (zv, vv) = (g.constant(to_tensor(&z)), g.constant(to_tensor(&v)));
            let l = stnhcl::losses::monce_loss(&mut g, zv, vv, tau, hard).unwrap();
            gaps[1] = gaps[1].max((g.scalar_value(l) - self::monce_loss(&z, &v, tau, hard)).abs());
        }

        let (mu, sigma) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.1..2.0));
        let wcfg = WeightConfig {
            tau,
            ..WeightConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let (zv, vv) = (g.constant(to_tensor(&z)), g.constant(to_tensor(&v)));
        let l = weighted_contrast(&mut g, zv, vv, NegativeWeights::Normal { mu, sigma }, &wcfg).unwrap();
        let w = normal_weights(&sims(&z, &v), mu, sigma);
        gaps[2] = gaps[2].max((g.scalar_value(l) - weighted_nce(&z, &v, Some(&w), tau)).abs());

        let wcfg = WeightConfig {
            tau,
            mu_tissue: rng.gen_range(0.0..1.0),
            sigma_tissue: rng.gen_range(0.1..2.0),
            mu_background: rng.gen_range(-0.5..0.5),
            sigma_background: rng.gen_range(0.1..2.0),
            ..WeightConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let (p, t, b) = inst.bind(&mut g);
        let l = stnhcl_loss(&mut g, &p, &inst.params, &t, &b, &wcfg).unwrap();
        let want = normal_weighted_term(
            &inst.cfg,
            &op,
            &inst.tissue,
            &inst.tx,
            &inst.ty,
            wcfg.mu_tissue,
            wcfg.sigma_tissue,
            tau,
        ) + normal_weighted_term(
            &inst.cfg,
            &op,
            &inst.background,
            &inst.bx,
            &inst.by,
            wcfg.mu_background,
            wcfg.sigma_background,
            tau,
        );
        gaps[3] = gaps[3].max((g.scalar_value(l) - want).abs());
    }
    gaps
}

/// Worst deviations of the weight laws over `trials` random similarity
/// matrices: normal-weight row mean from 1, MoNCE row sum from 1, and the
/// `σ → ∞` normal-weighted loss from the unweighted one.
pub fn weight_law_gaps(trials: usize, seed: u64) -> [f64; 3] {
    use rand::SeedableRng;
    use stnhcl::losses::{info_nce, weighted_contrast, NegativeWeights};
    use stnhcl::weighting::{monce_weights, normal_weights as lib_normal_weights, WeightConfig};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = [0.0f64; 3];
    for _ in 0..trials {
        let (k, c) = (rng.gen_range(1..=16), rng.gen_range(1..=8));
        let s = random_mat(&mut rng, k, k);
        let (mu, sigma) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.05..3.0));
        let tau = rng.gen_range(0.05..1.0);
        let mut g = Graph::<f64>::new();
        let sv = g.constant(to_tensor(&s));
        let w = lib_normal_weights(&mut g, sv, mu, sigma).unwrap();
        for row in g.value(w).rows() {
            gaps[0] = gaps[0].max((row.iter().sum::<f64>() / k as f64 - 1.0).abs());
        }
        for hard in [true, false] {
            let w = monce_weights(&mut g, sv, tau, hard).unwrap();
            for row in g.value(w).rows() {
                gaps[1] = gaps[1].max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let (z, v) = (
            unit_rows(&random_mat(&mut rng, k, c)),
            unit_rows(&random_mat(&mut rng, k, c)),
        );
        let mut g = Graph::<f64>::new();
        let (zv, vv) = (g.constant(to_tensor(&z)), g.constant(to_tensor(&v)));
        let cfg = WeightConfig {
            tau,
            ..WeightConfig::default()
        };
        let weighted = weighted_contrast(&mut g, zv, vv, NegativeWeights::Normal { mu, sigma: 1e4 }, &cfg).unwrap();
        let plain = info_nce(&mut g, zv, vv, tau).unwrap();
        gaps[2] = gaps[2].max((g.scalar_value(weighted) - g.scalar_value(plain)).abs());
    }
    gaps
}

/// Outcome of the hypergraph laws over many random instances.
#[derive(Debug, Default)]
pub struct HypergraphLaws {
    /// Worst membership row-sum deviation from 1.
    pub membership_gap: f64,
    pub isolated_nodes: usize,
    /// Worst entry gap between `conv(P·X)` and `P·conv(X)`.
    pub equivariance_gap: f64,
    /// Identity-parameter outputs outside the per-column input range.
    pub bound_violations: usize,
}

pub fn hypergraph_laws(trials: usize, seed: u64) -> HypergraphLaws {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use stnhcl::hypergraph::{build_incidence, hgnn_conv, soft_kmeans, Activation};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = HypergraphLaws::default();
    for _ in 0..trials {
        let (k, c) = (rng.gen_range(1..=16), rng.gen_range(1..=8));
        let m = rng.gen_range(1..=k.min(6));
        let x = random_mat(&mut rng, k, c);
        let temp = 10f64.powf(rng.gen_range(-2.0..0.5));
        let mm = soft_kmeans(&to_tensor(&x), m, temp, 10, &mut rng).unwrap();
        for i in 0..k {
            out.membership_gap = out.membership_gap.max((mm.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let hg = build_incidence(&mm, rng.gen_range(0.05..0.9)).unwrap();
        out.isolated_nodes += hg.node_degrees().iter().filter(|&&d| d == 0).count();

        let (h, o) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let (t1, t2) = (random_mat(&mut rng, c, h), random_mat(&mut rng, h, o));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let px: Mat = perm.iter().map(|&p| x[p].clone()).collect();
        let phg = hg.permute_nodes(&perm);
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(to_tensor(&t1)), g.constant(to_tensor(&t2)));
        let xv = g.constant(to_tensor(&x));
        let pxv = g.constant(to_tensor(&px));
        let y = hgnn_conv(&mut g, &hg, xv, a, b, Activation::LeakyRelu(0.2)).unwrap();
        let py = hgnn_conv(&mut g, &phg, pxv, a, b, Activation::LeakyRelu(0.2)).unwrap();
        let (y, py) = (from_tensor(g.value(y)), from_tensor(g.value(py)));
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..o {
                out.equivariance_gap = out.equivariance_gap.max((py[i][j] - y[p][j]).abs());
            }
        }

        let eye = |n: usize| -> Mat {
            (0..n)
                .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
                .collect()
        };
        let e = g.constant(to_tensor(&eye(c)));
        let avg = hgnn_conv(&mut g, &hg, xv, e, e, Activation::Identity).unwrap();
        for (i, row) in from_tensor(g.value(avg)).iter().enumerate() {
            for j in 0..c {
                let lo = x.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = x.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                if row[j] < lo - 1e-12 || row[j] > hi + 1e-12 || !row[j].is_finite() {
                    out.bound_violations += 1;
                }
                let _ = i;
            }
        }
    }
    out
}

/// Loss values along `steps` gradient-descent steps on the hypergraph
/// parameters of one frozen tissue/background instance (fixed patches,
/// fixed hypergraphs). The weights are differentiated through, so each step
/// follows the true gradient; the step length starts at `lr` and is halved
/// until the Armijo sufficient-decrease condition holds.
pub fn descent_trace(seed: u64, steps: usize, lr: f64) -> Vec<f64> {
    use rand::SeedableRng;
    use stnhcl::losses::stnhcl_loss;
    use stnhcl::params::ParamSet;
    use stnhcl::weighting::WeightConfig;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut inst = hcl_instance(&mut rng, 8, 16, 3);
    let cfg = WeightConfig {
        detach: false,
        ..WeightConfig::default()
    };
    let eval = |inst: &HclInstance, ps: &ParamSet<f64>, grad: bool| {
        let mut g = Graph::<f64>::new();
        let (_, t, b) = inst.bind(&mut g);
        let p = ps.bind(&mut g);
        let loss = stnhcl_loss(&mut g, &p, &inst.params, &t, &b, &cfg).unwrap();
        let grads = grad.then(|| {
            let gr = g.backward(loss).unwrap();
            p.vars().iter().map(|&v| gr.wrt(v)).collect::<Vec<_>>()
        });
        (g.scalar_value(loss), grads)
    };
    let (mut loss, mut grads) = eval(&inst, &inst.ps, true);
    let mut trace = vec![loss];
    for _ in 0..steps {
        let gs = grads.take().unwrap();
        let norm2: f64 = gs.iter().flat_map(|t| t.data()).map(|d| d * d).sum();
        let mut step = lr;
        let mut next = inst.ps.clone();
        for _ in 0..60 {
            next = inst.ps.clone();
            for (id, gw) in inst.ps.ids().zip(&gs) {
                let w = inst.ps.get(id);
                let moved: Vec<f64> = w.data().iter().zip(gw.data()).map(|(a, d)| a - step * d).collect();
                next.set(id, Tensor::new(w.shape(), moved).unwrap()).unwrap();
            }
            if eval(&inst, &next, false).0 <= loss - 1e-4 * step * norm2 {
                break;
            }
            step *= 0.5;
        }
        inst.ps = next;
        (loss, grads) = eval(&inst, &inst.ps, true);
        trace.push(loss);
    }
    trace
}

pub fn strictly_decreasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] < w[0])
}
