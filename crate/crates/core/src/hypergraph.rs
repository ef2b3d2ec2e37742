//! Hypergraphs over patch nodes.
//!
//! Hyperedges come from soft k-means: every patch gets a softmax membership
//! over `M` centroids, and each hyperedge keeps the patches whose membership
//! reaches a threshold. Features then flow node → hyperedge → node through
//! [`hgnn_conv`], with each step normalized by the corresponding degree.

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::numeric::{Graph, Scalar, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamSet};

/// Soft k-means output for `K` points and `M` clusters.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipMatrix {
    /// Row-major `K×M`; each row sums to 1.
    pub m: Vec<f64>,
    /// Row-major `M×c`.
    pub centroids: Vec<f64>,
    pub nodes: usize,
    pub clusters: usize,
    pub temperature: f64,
    pub iterations: usize,
}

impl MembershipMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.m[k * self.clusters..(k + 1) * self.clusters]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the point farthest from its nearest centroid among `chosen`
/// (lowest index on ties).
fn farthest_point(points: &[f64], dim: usize, centroids: &[&[f64]]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, p) in points.chunks(dim).enumerate() {
        let d = centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min);
        if d > best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Soft k-means over the rows of `features` (`K×c`).
///
/// Centroids start from farthest-point seeding: the first is a point drawn
/// from `rng`, each next one is the point farthest from those already chosen.
/// Each of the `iters` rounds sets `m[k][j] = softmax_j(−‖x_k − c_j‖² / temperature)`
/// and then moves every centroid to the membership-weighted mean. A cluster
/// whose total membership underflows (`< 1e-12`) is re-seeded at the point
/// farthest from the other centroids.
pub fn soft_kmeans<T: Scalar, R: Rng + ?Sized>(
    features: &Tensor<T>,
    clusters: usize,
    temperature: f64,
    iters: usize,
    rng: &mut R,
) -> Result<MembershipMatrix> {
    let s = features.shape();
    if s.len() != 2 {
        return Err(dim_err!("soft_kmeans expects K×c features, got {:?}", s));
    }
    let (k, dim) = (s[0], s[1]);
    if clusters == 0 || clusters > k {
        return Err(config_err!("need 1 ≤ M ≤ K, got M = {clusters}, K = {k}"));
    }
    if !(temperature > 0.0) {
        return Err(config_err!("temperature must be positive, got {temperature}"));
    }
    if iters == 0 {
        return Err(config_err!("soft k-means needs at least one iteration"));
    }
    let x = features.to_f64_vec();

    let mut seeds = vec![rng.gen_range(0..k)];
    while seeds.len() < clusters {
        let chosen: Vec<&[f64]> = seeds.iter().map(|&i| &x[i * dim..(i + 1) * dim]).collect();
        seeds.push(farthest_point(&x, dim, &chosen));
    }
    let mut centroids: Vec<f64> = seeds
        .iter()
        .flat_map(|&i| x[i * dim..(i + 1) * dim].iter().copied())
        .collect();

    let mut m = vec![0.0; k * clusters];
    for _ in 0..iters {
        for (p, row) in x.chunks(dim).zip(m.chunks_mut(clusters)) {
            for (j, c) in centroids.chunks(dim).enumerate() {
                row[j] = -sq_dist(p, c) / temperature;
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        for j in 0..clusters {
            let mass: f64 = (0..k).map(|i| m[i * clusters + j]).sum();
            if mass < 1e-12 {
                let others: Vec<&[f64]> = (0..clusters)
                    .filter(|&o| o != j)
                    .map(|o| &centroids[o * dim..(o + 1) * dim])
                    .collect();
                let far = farthest_point(&x, dim, &others);
                let src = x[far * dim..(far + 1) * dim].to_vec();
                centroids[j * dim..(j + 1) * dim].copy_from_slice(&src);
                continue;
            }
            let mut acc = vec![0.0; dim];
            for (i, p) in x.chunks(dim).enumerate() {
                let w = m[i * clusters + j];
                acc.iter_mut().zip(p).for_each(|(a, v)| *a += w * v);
            }
            for (c, a) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(acc) {
                *c = a / mass;
            }
        }
    }
    Ok(MembershipMatrix {
        m,
        centroids,
        nodes: k,
        clusters,
        temperature,
        iterations: iters,
    })
}

/// Binary incidence structure: `B[i][k] = 1` iff node `k` belongs to hyperedge `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypergraph {
    /// Row-major `M×K`.
    incidence: Vec<u8>,
    edges: usize,
    nodes: usize,
}

impl Hypergraph {
    pub fn from_incidence(edges: usize, nodes: usize, incidence: Vec<u8>) -> Result<Self> {
        if incidence.len() != edges * nodes || incidence.iter().any(|&b| b > 1) {
            return Err(dim_err!("incidence must be a binary {edges}×{nodes} matrix"));
        }
        Ok(Self {
            incidence,
            edges,
            nodes,
        })
    }

    pub fn edges(&self) -> usize {
        self.edges
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn contains(&self, edge: usize, node: usize) -> bool {
        self.incidence[edge * self.nodes + node] == 1
    }

    /// `d(v_k)`: hyperedges containing each node.
    pub fn node_degrees(&self) -> Vec<usize> {
        (0..self.nodes)
            .map(|k| (0..self.edges).filter(|&i| self.contains(i, k)).count())
            .collect()
    }

    /// `d(e_i)`: nodes in each hyperedge.
    pub fn edge_degrees(&self) -> Vec<usize> {
        self.incidence
            .chunks(self.nodes.max(1))
            .map(|r| r.iter().filter(|&&b| b == 1).count())
            .collect()
    }

    /// Node sets per hyperedge.
    pub fn members(&self, edge: usize) -> Vec<usize> {
        (0..self.nodes).filter(|&k| self.contains(edge, k)).collect()
    }

    /// Copy without hyperedges of degree zero.
    pub fn without_empty_edges(&self) -> Self {
        let kept: Vec<usize> = (0..self.edges)
            .filter(|&i| (0..self.nodes).any(|k| self.contains(i, k)))
            .collect();
        let incidence = kept
            .iter()
            .flat_map(|&i| self.incidence[i * self.nodes..(i + 1) * self.nodes].iter().copied())
            .collect();
        Self {
            incidence,
            edges: kept.len(),
            nodes: self.nodes,
        }
    }

    /// Relabel nodes so new node `k` is old node `perm[k]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.nodes);
        let mut incidence = vec![0u8; self.incidence.len()];
        for i in 0..self.edges {
            for (k, &old) in perm.iter().enumerate() {
                incidence[i * self.nodes + k] = self.incidence[i * self.nodes + old];
            }
        }
        Self {
            incidence,
            edges: self.edges,
            nodes: self.nodes,
        }
    }

    /// `(D_e⁻¹·B, D_v⁻¹·Bᵀ)` over non-empty hyperedges.
    pub fn propagation<T: Scalar>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let hg = self.without_empty_edges();
        let (m, k) = (hg.edges, hg.nodes);
        let de = hg.edge_degrees();
        let dv = hg.node_degrees();
        if let Some(v) = dv.iter().position(|&d| d == 0) {
            return Err(config_err!("node {v} belongs to no hyperedge"));
        }
        let mut to_edges = vec![T::zero(); m * k];
        let mut to_nodes = vec![T::zero(); k * m];
        for i in 0..m {
            for n in 0..k {
                if hg.contains(i, n) {
                    to_edges[i * k + n] = T::of(1.0 / de[i] as f64);
                    to_nodes[n * m + i] = T::of(1.0 / dv[n] as f64);
                }
            }
        }
        Ok((Tensor::new(&[m, k], to_edges)?, Tensor::new(&[k, m], to_nodes)?))
    }
}

/// Threshold memberships into hyperedges. Each node additionally joins the
/// hyperedge of its largest membership, so no node is isolated.
pub fn build_incidence(m: &MembershipMatrix, threshold: f64) -> Result<Hypergraph> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_err!("membership threshold must lie in (0, 1), got {threshold}"));
    }
    let (k, e) = (m.nodes, m.clusters);
    let mut incidence = vec![0u8; e * k];
    for n in 0..k {
        let row = m.row(n);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v >= threshold {
                incidence[i * k + n] = 1;
            }
            if v > row[best] {
                best = i;
            }
        }
        incidence[best * k + n] = 1;
    }
    Hypergraph::from_incidence(e, k, incidence)
}

/// Nonlinearity between the message-passing steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// Learnable maps `Θ₁: c×hidden` and `Θ₂: hidden×out` of one convolution.
#[derive(Clone, Debug)]
pub struct HgnnParams {
    pub theta1: ParamId,
    pub theta2: ParamId,
    pub activation: Activation,
}

impl HgnnParams {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            theta1: params.add(format!("{prefix}.theta1"), &[in_dim, hidden], Init::FanIn(in_dim)),
            theta2: params.add(format!("{prefix}.theta2"), &[hidden, out_dim], Init::FanIn(hidden)),
            activation,
        }
    }

    pub fn conv<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, hg: &Hypergraph, nodes: Var) -> Result<Var> {
        hgnn_conv(g, hg, nodes, p[self.theta1], p[self.theta2], self.activation)
    }
}

/// Two-step hypergraph convolution:
///
/// ```text
/// E   = D_e⁻¹ · B  · act(nodes · Θ₁)    node → hyperedge mean
/// out = D_v⁻¹ · Bᵀ · act(E) · Θ₂        hyperedge → node mean
/// ```
pub fn hgnn_conv<T: Scalar>(
    g: &mut Graph<T>,
    hg: &Hypergraph,
    nodes: Var,
    theta1: Var,
    theta2: Var,
    act: Activation,
) -> Result<Var> {
    let s = g.shape(nodes).to_vec();
    if s.len() != 2 || s[0] != hg.nodes() {
        return Err(config_err!("hypergraph has {} nodes, features are {:?}", hg.nodes(), s));
    }
    let (t1, t2) = (g.shape(theta1).to_vec(), g.shape(theta2).to_vec());
    if t1.len() != 2 || t2.len() != 2 || t1[0] != s[1] || t2[0] != t1[1] {
        return Err(config_err!(
            "Θ shapes {:?}, {:?} do not chain from {} channels",
            t1,
            t2,
            s[1]
        ));
    }
    let (to_edges, to_nodes) = hg.propagation::<T>()?;
    let to_edges = g.constant(to_edges);
    let to_nodes = g.constant(to_nodes);
    let h = g.matmul(nodes, theta1)?;
    let h = act.apply(g, h);
    let e = g.matmul(to_edges, h)?;
    let e = act.apply(g, e);
    let back = g.matmul(to_nodes, e)?;
    g.matmul(back, theta2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mm(rows: &[&[f64]]) -> MembershipMatrix {
        MembershipMatrix {
            m: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            centroids: vec![],
            nodes: rows.len(),
            clusters: rows[0].len(),
            temperature: 1.0,
            iterations: 1,
        }
    }

    #[test]
    fn identical_points_single_cluster() {
        let f = Tensor::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap();
        let m = soft_kmeans(&f, 1, 0.1, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.m, vec![1.0, 1.0]);
        assert_eq!(m.centroids, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn separated_points_cold_temperature() {
        let f = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 10.0, 10.0]).unwrap();
        let m = soft_kmeans(&f, 2, 1e-3, 5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for k in 0..2 {
            let r = m.row(k);
            let big = r.iter().cloned().fold(0.0, f64::max);
            assert!(big > 1.0 - 1e-12);
        }
        // Different points land in different clusters.
        let arg = |r: &[f64]| if r[0] > r[1] { 0 } else { 1 };
        assert_ne!(arg(m.row(0)), arg(m.row(1)));
    }

    #[test]
    fn kmeans_rejects_bad_config() {
        let f = Tensor::<f64>::zeros(&[3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(soft_kmeans(&f, 4, 0.1, 1, &mut rng).is_err());
        assert!(soft_kmeans(&f, 2, 0.0, 1, &mut rng).is_err());
        assert!(soft_kmeans(&f, 2, 0.1, 0, &mut rng).is_err());
    }

    #[test]
    fn underflowing_cluster_is_reseeded() {
        // Two identical seeds would be chosen only if the farthest point is
        // degenerate; force it with three collinear points and a cold temperature.
        let f = Tensor::<f64>::from_f64(&[4, 1], &[0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = soft_kmeans(&f, 3, 1e-4, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for k in 0..4 {
            assert!((m.row(k).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(m.centroids.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn incidence_examples() {
        let m = mm(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let hg = build_incidence(&m, 0.5).unwrap();
        assert_eq!(hg.members(0), vec![0]);
        assert_eq!(hg.members(1), vec![1]);
        assert_eq!(hg.node_degrees(), vec![1, 1]);
        assert_eq!(hg.edge_degrees(), vec![1, 1]);

        let hg = build_incidence(&m, 0.05).unwrap();
        assert_eq!(hg.edge_degrees(), vec![2, 2]);
        assert_eq!(hg.node_degrees(), vec![2, 2]);

        let m = mm(&[&[0.4, 0.35, 0.25]]);
        let hg = build_incidence(&m, 0.5).unwrap();
        assert_eq!(hg.members(0), vec![0]);
        assert!(hg.members(1).is_empty() && hg.members(2).is_empty());
        assert_eq!(hg.without_empty_edges().edges(), 1);

        assert!(build_incidence(&m, 1.0).is_err());
        assert!(build_incidence(&m, 0.0).is_err());
    }

    #[test]
    fn full_edge_identity_params_average_nodes() {
        let hg = Hypergraph::from_incidence(1, 4, vec![1; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let i1 = g.constant(Tensor::eye(3));
        let i2 = g.constant(Tensor::eye(3));
        let out = hgnn_conv(&mut g, &hg, xv, i1, i2, Activation::Identity).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|c| (0..4).map(|r| x.at(&[r, c])).sum::<f64>() / 4.0)
            .collect();
        for row in g.value(out).rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_explicit_matrix_chain() {
        // K = 3 nodes, M = 2 edges: e0 = {0, 1}, e1 = {1, 2}.
        let hg = Hypergraph::from_incidence(2, 3, vec![1, 1, 0, 0, 1, 1]).unwrap();
        let x = Tensor::<f64>::from_f64(&[3, 2], &[0.5, -0.2, 1.0, 0.3, -0.7, 0.9]).unwrap();
        let t1 = Tensor::<f64>::from_f64(&[2, 2], &[0.4, -1.1, 0.6, 0.2]).unwrap();
        let t2 = Tensor::<f64>::from_f64(&[2, 1], &[1.5, -0.5]).unwrap();
        let lr = |v: f64| if v > 0.0 { v } else { 0.2 * v };

        // act(X Θ₁)
        let mut h = [[0.0; 2]; 3];
        for r in 0..3 {
            for c in 0..2 {
                h[r][c] = lr(x.at(&[r, 0]) * t1.at(&[0, c]) + x.at(&[r, 1]) * t1.at(&[1, c]));
            }
        }
        // E = act(De⁻¹ B h): each edge has degree 2.
        let e = [
            [lr((h[0][0] + h[1][0]) / 2.0), lr((h[0][1] + h[1][1]) / 2.0)],
            [lr((h[1][0] + h[2][0]) / 2.0), lr((h[1][1] + h[2][1]) / 2.0)],
        ];
        // Dv⁻¹ Bᵀ E with d(v) = [1, 2, 1], then Θ₂.
        let back = [e[0], [(e[0][0] + e[1][0]) / 2.0, (e[0][1] + e[1][1]) / 2.0], e[1]];
        let want: Vec<f64> = back
            .iter()
            .map(|r| r[0] * t2.at(&[0, 0]) + r[1] * t2.at(&[1, 0]))
            .collect();

        let mut g = Graph::new();
        let (xv, a, b) = (g.constant(x), g.constant(t1), g.constant(t2));
        let out = hgnn_conv(&mut g, &hg, xv, a, b, Activation::LeakyRelu(0.2)).unwrap();
        for (got, w) in g.value(out).data().iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let hg = Hypergraph::from_incidence(2, 4, vec![1, 1, 0, 1, 0, 1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = vec![
            Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng),
            Tensor::uniform(&[5, 2], -1.0, 1.0, &mut rng),
        ];
        let f = |g: &mut Graph<f64>, p: &[Var]| -> Result<Var> {
            let o = hgnn_conv(g, &hg, p[0], p[1], p[2], Activation::LeakyRelu(0.2))?;
            let o = g.square(o);
            Ok(g.sum(o))
        };
        let rep = GradCheck::default().run::<f64, _>(&f, &params).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let hg = Hypergraph::from_incidence(1, 3, vec![1; 3]).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        let t = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            hgnn_conv(&mut g, &hg, x, t, t, Activation::Identity),
            Err(crate::Error::Config(_))
        ));
    }
}
