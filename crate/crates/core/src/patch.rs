//! Co-located patch sampling over encoder feature stacks and the per-layer
//! projection heads that turn patch features into unit-norm embeddings.

use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numeric::{Graph, Scalar, Var, NORM_EPS};
use crate::params::{Bound, Init, ParamId, ParamSet};

/// Feature maps tapped from the encoder for one image, in tap order.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    /// Encoder block index of each tapped map.
    pub layer_ids: Vec<usize>,
    /// One `c×h×w` map per tap.
    pub layers: Vec<Var>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `(c, h, w)` of tap `i`.
    pub fn extents<T: Scalar>(&self, g: &Graph<T>, i: usize) -> (usize, usize, usize) {
        let s = g.shape(self.layers[i]);
        (s[0], s[1], s[2])
    }
}

/// Spatial locations sampled from one tapped feature map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchIdList {
    /// Tap position inside the [`FeatureStack`].
    pub layer: usize,
    /// `(row, col)` positions, distinct.
    pub ids: Vec<(usize, usize)>,
    /// `(h, w)` of the map the ids address.
    pub extent: (usize, usize),
}

impl PatchIdList {
    pub fn new(layer: usize, ids: Vec<(usize, usize)>, extent: (usize, usize)) -> Result<Self> {
        let (h, w) = extent;
        let mut seen = vec![false; h * w];
        for &(r, c) in &ids {
            if r >= h || c >= w {
                return Err(Error::Index(format!("patch ({r}, {c}) outside {h}×{w}")));
            }
            if std::mem::replace(&mut seen[r * w + c], true) {
                return Err(config_err!("duplicate patch ({r}, {c})"));
            }
        }
        Ok(Self { layer, ids, extent })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row-major flat positions.
    pub fn flat(&self) -> Vec<usize> {
        self.ids.iter().map(|&(r, c)| r * self.extent.1 + c).collect()
    }
}

/// `k` distinct uniformly drawn locations on an `h×w` map (partial Fisher–Yates).
pub fn sample_patch_ids<R: Rng + ?Sized>(
    layer: usize,
    extent: (usize, usize),
    k: usize,
    rng: &mut R,
) -> Result<PatchIdList> {
    let (h, w) = extent;
    let n = h * w;
    if k > n {
        return Err(config_err!("cannot sample {k} patches from a {h}×{w} map"));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let ids = pool[..k].iter().map(|&p| (p / w, p % w)).collect();
    Ok(PatchIdList { layer, ids, extent })
}

/// `K×c` matrix whose row `k` is the channel vector at location `ids[k]`.
pub fn gather_patches<T: Scalar>(g: &mut Graph<T>, stack: &FeatureStack, ids: &PatchIdList) -> Result<Var> {
    let map = *stack
        .layers
        .get(ids.layer)
        .ok_or_else(|| Error::Index(format!("tap {} of {}", ids.layer, stack.len())))?;
    let (c, h, w) = stack.extents(g, ids.layer);
    if (h, w) != ids.extent {
        return Err(dim_err!("patch ids address {:?}, map is {}×{}", ids.extent, h, w));
    }
    let flat = g.reshape(map, &[c, h * w])?;
    let by_loc = g.transpose(flat)?;
    g.gather_rows(by_loc, &ids.flat())
}

/// Unit-norm patch embeddings for one tapped layer.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingSet {
    pub embeddings: Var,
    pub layer: usize,
}

/// Two affine maps with a rectifier between, followed by row normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn register<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), &[in_dim, out_dim], Init::FanIn(in_dim)),
            b1: params.add(format!("{prefix}.b1"), &[1, out_dim], Init::FanIn(in_dim)),
            w2: params.add(format!("{prefix}.w2"), &[out_dim, out_dim], Init::FanIn(out_dim)),
            b2: params.add(format!("{prefix}.b2"), &[1, out_dim], Init::FanIn(out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, patches: Var, layer: usize) -> Result<EmbeddingSet> {
        let s = g.shape(patches).to_vec();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(config_err!("projection head expects K×{}, got {:?}", self.in_dim, s));
        }
        let k = s[0];
        let h = g.matmul(patches, p[self.w1])?;
        let b1 = g.broadcast(p[self.b1], &[k, self.out_dim])?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, p[self.w2])?;
        let b2 = g.broadcast(p[self.b2], &[k, self.out_dim])?;
        let o = g.add(o, b2)?;
        let embeddings = g.l2_normalize(o, NORM_EPS)?;
        Ok(EmbeddingSet { embeddings, layer })
    }
}
