//! Desk-scale networks: a feature-tapped encoder, a label-conditioned
//! encoder–decoder generator and a multi-domain patch discriminator.
//!
//! Shapes for a `3×64×64` input with default widths:
//!
//! | stage              | output      |
//! |--------------------|-------------|
//! | encoder block 0    | 16×64×64    |
//! | encoder block 1    | 32×32×32    |
//! | encoder block 2    | 64×16×16    |
//! | decoder block 0    | 32×32×32    |
//! | decoder block 1    | 16×64×64    |
//! | generator output   | 3×64×64     |
//! | discriminator pen. | 64×8×8      |
//! | discriminator map  | 8×8 per domain |
//!
//! Every convolution is 3×3 with padding 1, so a stride-`s` block maps an
//! extent `n` to `⌊(n − 1)/s⌋ + 1`.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::numeric::{conv_out_extent, Graph, Scalar, Tensor, Var};
use crate::params::{Bound, Init, InitScheme, ParamId, ParamSet};
use crate::patch::FeatureStack;
use crate::weighting::Heatmap;

const KERNEL: usize = 3;
const PAD: usize = 1;
const SLOPE: f64 = 0.2;

/// Network widths and conditioning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output channels of the three encoder blocks.
    pub enc_channels: [usize; 3],
    /// Output channels of the three stride-2 discriminator blocks.
    pub disc_channels: [usize; 3],
    pub n_domains: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: [16, 32, 64],
            disc_channels: [16, 32, 64],
            n_domains: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.contains(&0) || self.disc_channels.contains(&0) {
            return Err(config_err!("channel widths must be positive"));
        }
        if self.n_domains == 0 {
            return Err(config_err!("need at least one domain"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl ConvBlock {
    fn register<T: Scalar>(
        p: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let bias_init = match init {
            Init::FanIn(_) => Init::FanIn(c_in * KERNEL * KERNEL),
            other => other,
        };
        Self {
            w: p.add(format!("{name}.w"), &[c_out, c_in, KERNEL, KERNEL], init),
            b: p.add(format!("{name}.b"), &[c_out], bias_init),
            stride,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, PAD)
    }

    /// Same extents as [`ConvBlock::forward`], with mirrored instead of zero borders.
    fn forward_reflect<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let padded = g.pad_reflect(x, PAD)?;
        g.conv2d(padded, p[self.w], Some(p[self.b]), self.stride, 0)
    }
}

const NORM_EPS: f64 = 1e-5;

/// Per-channel standardization over spatial positions of a `c×h×w` map.
fn instance_norm<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    let per_channel = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let m = g.mean_axis(v, 1)?;
        let m = g.reshape(m, &[s[0], 1])?;
        g.broadcast(m, &[s[0], s[1] * s[2]])
    };
    let mean = per_channel(g, flat)?;
    let centered = g.sub(flat, mean)?;
    let sq = g.square(centered);
    let var = per_channel(g, sq)?;
    let var = g.add_scalar(var, NORM_EPS);
    let sd = g.sqrt(var);
    let y = g.div(centered, sd)?;
    g.reshape(y, &s)
}

fn fan_in(c_in: usize) -> Init {
    Init::FanIn(c_in * KERNEL * KERNEL)
}

/// Three conv blocks (strides 1, 2, 2) with leaky rectifiers.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<ConvBlock>,
    channels: [usize; 3],
}

impl Encoder {
    pub const BLOCKS: usize = 3;

    pub fn register<T: Scalar>(p: &mut ParamSet<T>, prefix: &str, channels: [usize; 3]) -> Self {
        let mut c_in = 3;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let b = ConvBlock::register(p, &format!("{prefix}.{i}"), c_in, c, stride, fan_in(c_in));
                c_in = c;
                b
            })
            .collect();
        Self { blocks, channels }
    }

    /// Channel count of block `i`.
    pub fn channels(&self, i: usize) -> usize {
        self.channels[i]
    }

    /// Side of block `i`'s output for a square `size` input.
    pub fn spatial_extent(i: usize, size: usize) -> usize {
        (0..=i).fold(size, |n, b| {
            let stride = if b == 0 { 1 } else { 2 };
            conv_out_extent(n, KERNEL, stride, PAD).unwrap_or(0)
        })
    }

    /// `(c, h, w)` of block `i` for a square `size` input.
    pub fn tap_extent(&self, i: usize, size: usize) -> (usize, usize, usize) {
        let n = Self::spatial_extent(i, size);
        (self.channels[i], n, n)
    }

    /// Run all blocks; returns the last activation and the tapped maps.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        taps: &[usize],
    ) -> Result<(Var, FeatureStack)> {
        if let Some(&bad) = taps.iter().find(|&&t| t >= self.blocks.len()) {
            return Err(config_err!("tap {bad} beyond {} encoder blocks", self.blocks.len()));
        }
        let mut x = image;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let y = b.forward(g, p, x)?;
            x = g.leaky_relu(y, SLOPE);
            maps.push(x);
        }
        Ok((
            x,
            FeatureStack {
                layer_ids: taps.to_vec(),
                layers: taps.iter().map(|&t| maps[t]).collect(),
            },
        ))
    }
}

/// Encoder, two upsampling decoder blocks with per-label scale/shift, and a
/// sigmoid output conv.
#[derive(Clone, Debug)]
pub struct ConditionalGenerator {
    pub encoder: Encoder,
    dec: Vec<ConvBlock>,
    /// `n_domains×c` scale and shift per decoder block.
    gamma: Vec<ParamId>,
    beta: Vec<ParamId>,
    out: ConvBlock,
    n_domains: usize,
}

impl ConditionalGenerator {
    pub fn register<T: Scalar>(p: &mut ParamSet<T>, cfg: &ModelConfig) -> Self {
        let encoder = Encoder::register(p, "gen.enc", cfg.enc_channels);
        let [c0, c1, c2] = cfg.enc_channels;
        let mut dec = Vec::new();
        let (mut gamma, mut beta) = (Vec::new(), Vec::new());
        for (i, (ci, co)) in [(c2, c1), (c1, c0)].into_iter().enumerate() {
            dec.push(ConvBlock::register(p, &format!("gen.dec.{i}"), ci, co, 1, fan_in(ci)));
            gamma.push(p.add(format!("gen.dec.{i}.gamma"), &[cfg.n_domains, co], Init::FanIn(co)));
            beta.push(p.add(format!("gen.dec.{i}.beta"), &[cfg.n_domains, co], Init::FanIn(co)));
        }
        let out = ConvBlock::register(p, "gen.out", c0, 3, 1, fan_in(c0));
        Self {
            encoder,
            dec,
            gamma,
            beta,
            out,
            n_domains: cfg.n_domains,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.n_domains {
            return Err(config_err!("label {label} outside 0..{}", self.n_domains));
        }
        Ok(())
    }

    /// `x·(1 + γ_t) + β_t` with per-channel `γ_t, β_t`.
    fn modulate<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, i: usize, x: Var, label: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = shape[0];
        let pick = |g: &mut Graph<T>, id: ParamId| -> Result<Var> {
            let row = g.gather_rows(p[id], &[label])?;
            let col = g.reshape(row, &[c, 1, 1])?;
            g.broadcast(col, &shape)
        };
        let gm = pick(g, self.gamma[i])?;
        let bt = pick(g, self.beta[i])?;
        let scale = g.add_scalar(gm, 1.0);
        let y = g.mul(x, scale)?;
        g.add(y, bt)
    }

    /// Translate `image` (`3×h×w`, h and w divisible by 4) toward `label`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, label: usize) -> Result<Var> {
        Ok(self.forward_with_features(g, p, image, label, &[])?.0)
    }

    /// Generated image plus the encoder maps of the source at `taps`.
    pub fn forward_with_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: Var,
        label: usize,
        taps: &[usize],
    ) -> Result<(Var, FeatureStack)> {
        self.check_label(label)?;
        let s = g.shape(image);
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || s[1] == 0 || s[2] == 0 {
            return Err(config_err!(
                "generator needs 3×h×w with h, w divisible by 4, got {:?}",
                s
            ));
        }
        let (mut x, stack) = self.encoder.forward(g, p, image, taps)?;
        for i in 0..self.dec.len() {
            let y = self.dec[i].forward(g, p, x)?;
            let y = g.leaky_relu(y, SLOPE);
            let y = self.modulate(g, p, i, y, label)?;
            x = g.upsample_nearest(y, 2)?;
        }
        let y = self.out.forward(g, p, x)?;
        Ok((g.sigmoid(y), stack))
    }
}

/// Discriminator outputs for one image.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `h'×w'` score map for the requested domain.
    pub score: Var,
    /// `c×h'×w'` activation feeding the score conv.
    pub penultimate: Var,
}

/// Three stride-2 blocks and a score conv with one output channel per domain.
///
/// Inputs are rescaled to `[−1, 1]`; borders are mirrored rather than
/// zero-filled so flat regions at the image edge do not light up the
/// penultimate map. The last block is instance-normalized, so the
/// penultimate map is centred per channel while earlier blocks keep absolute
/// colour.
#[derive(Clone, Debug)]
pub struct Discriminator {
    blocks: Vec<ConvBlock>,
    head: ConvBlock,
    n_domains: usize,
}

impl Discriminator {
    pub fn register<T: Scalar>(p: &mut ParamSet<T>, cfg: &ModelConfig) -> Self {
        let mut c_in = 3;
        let blocks = cfg
            .disc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = ConvBlock::register(p, &format!("disc.{i}"), c_in, c, 2, fan_in(c_in));
                c_in = c;
                b
            })
            .collect();
        let head = ConvBlock::register(p, "disc.head", c_in, cfg.n_domains, 1, fan_in(c_in));
        Self {
            blocks,
            head,
            n_domains: cfg.n_domains,
        }
    }

    /// Score-map extent for an `n`-pixel side.
    pub fn map_extent(n: usize) -> usize {
        (0..3).fold(n, |n, _| conv_out_extent(n, KERNEL, 2, PAD).unwrap_or(0))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, label: usize) -> Result<DiscOutput> {
        if label >= self.n_domains {
            return Err(config_err!("label {label} outside 0..{}", self.n_domains));
        }
        let scaled = g.scale(image, 2.0);
        let mut x = g.add_scalar(scaled, -1.0);
        for (i, b) in self.blocks.iter().enumerate() {
            let mut y = b.forward_reflect(g, p, x)?;
            if i + 1 == self.blocks.len() {
                y = instance_norm(g, y)?;
            }
            x = g.leaky_relu(y, SLOPE);
        }
        let all = self.head.forward_reflect(g, p, x)?;
        let s = g.shape(all).to_vec();
        let flat = g.reshape(all, &[s[0], s[1] * s[2]])?;
        let row = g.gather_rows(flat, &[label])?;
        let score = g.reshape(row, &[s[1], s[2]])?;
        Ok(DiscOutput { score, penultimate: x })
    }
}

/// How the partition heatmap is read off the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Channel-wise Euclidean norm of the penultimate activation.
    Energy,
    /// The score map itself.
    Output,
}

/// Heatmap of an already computed discriminator pass.
pub fn heatmap_of<T: Scalar>(g: &Graph<T>, out: &DiscOutput, mode: HeatmapMode) -> Heatmap {
    match mode {
        HeatmapMode::Energy => Heatmap::from_feature_energy(g.value(out.penultimate)),
        HeatmapMode::Output => Heatmap::from_score_map(g.value(out.score)),
    }
}

/// Run the discriminator on `image` without tracking gradients and read its heatmap.
pub fn discriminator_heatmap<T: Scalar>(
    disc: &Discriminator,
    params: &ParamSet<T>,
    image: &Tensor<T>,
    label: usize,
    mode: HeatmapMode,
) -> Result<Heatmap> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let out = disc.forward(&mut g, &p, x, label)?;
    Ok(heatmap_of(&g, &out, mode))
}

/// Generator and discriminator with their parameters.
#[derive(Clone, Debug)]
pub struct Models<T> {
    pub cfg: ModelConfig,
    pub gen: ConditionalGenerator,
    pub disc: Discriminator,
    pub gen_params: ParamSet<T>,
    pub disc_params: ParamSet<T>,
}

impl<T: Scalar> Models<T> {
    /// Register both networks; tensors are zero until [`Models::init_params`].
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gen_params = ParamSet::new();
        let mut disc_params = ParamSet::new();
        let gen = ConditionalGenerator::register(&mut gen_params, cfg);
        let disc = Discriminator::register(&mut disc_params, cfg);
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            disc,
            gen_params,
            disc_params,
        })
    }

    /// Uniform fan-in initialization: each weight and bias is drawn from
    /// `U(−1/√fan_in, 1/√fan_in)`; the generator is filled before the
    /// discriminator from the same stream.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R, scheme: InitScheme) {
        self.gen_params.init(rng, scheme);
        self.disc_params.init(rng, scheme);
    }
}
