//! Procedural "stain" images with pixel-aligned tissue masks, their binary
//! PPM/PGM encodings and the tab-separated dataset manifest.
//!
//! A [`TissueLayout`] fixes geometry (elliptical tissue blobs with a
//! sinusoidal texture); a [`StainPalette`] only decides colors. Rendering one
//! layout under every palette therefore yields structurally identical images.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, format_err, Error, Result};
use crate::numeric::Tensor;

/// Largest accepted image side when decoding.
pub const MAX_SIDE: usize = 8192;
pub const MIN_SIZE: usize = 32;

const MIN_COVERAGE: f64 = 0.2;
const MAX_COVERAGE: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    He,
    Mas,
    Pas,
    Pasm,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::He, Domain::Mas, Domain::Pas, Domain::Pasm];

    pub fn name(self) -> &'static str {
        match self {
            Domain::He => "he",
            Domain::Mas => "mas",
            Domain::Pas => "pas",
            Domain::Pasm => "pasm",
        }
    }

    /// Position in [`Domain::ALL`]; doubles as the generator label.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Parse a comma-separated list such as `he,mas`.
    pub fn parse_list(s: &str) -> Result<Vec<Domain>> {
        let mut out: Vec<Domain> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let d: Domain = part.parse()?;
            if out.contains(&d) {
                return Err(config_err!("domain {part} listed twice"));
            }
            out.push(d);
        }
        if out.is_empty() {
            return Err(config_err!("empty domain list"));
        }
        Ok(out)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "he" => Ok(Domain::He),
            "mas" => Ok(Domain::Mas),
            "pas" => Ok(Domain::Pas),
            "pasm" => Ok(Domain::Pasm),
            _ => Err(config_err!("unknown domain {s:?} (expected he, mas, pas or pasm)")),
        }
    }
}

/// One elliptical tissue region. Lengths are in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: (f64, f64),
    /// Semi-axes along the rotated x and y directions.
    pub axes: (f64, f64),
    pub rotation: f64,
    /// Texture phase, orientation and wavelength.
    pub phase: f64,
    pub texture_angle: f64,
    pub wavelength: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }

    /// Half extents of the axis-aligned bounding box.
    fn half_extent(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = self.axes;
        (
            (a * a * c * c + b * b * s * s).sqrt(),
            (a * a * s * s + b * b * c * c).sqrt(),
        )
    }

    /// Texture level in `[0, 1]` at a pixel centre.
    fn texture(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.texture_angle.sin_cos();
        let t = (x * c + y * s) * std::f64::consts::TAU / self.wavelength + self.phase;
        0.5 + 0.5 * t.sin()
    }
}

/// Tissue geometry shared by all stains of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueLayout {
    pub seed: u64,
    pub size: usize,
    pub blobs: Vec<Blob>,
    /// Gray level of the slide background.
    pub background: f64,
}

impl TissueLayout {
    /// Draw blobs until tissue covers 20–70% of the canvas. Every blob lies
    /// inside the canvas.
    pub fn generate(seed: u64, size: usize) -> Result<Self> {
        if size < MIN_SIZE {
            return Err(config_err!("image size must be at least {MIN_SIZE}, got {size}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = size as f64;
        let background = rng.gen_range(0.92..0.98);
        loop {
            let count = rng.gen_range(1..=4);
            let mut blobs = Vec::with_capacity(count);
            for _ in 0..count {
                let axes = (rng.gen_range(0.12..0.32) * n, rng.gen_range(0.12..0.32) * n);
                let rotation = rng.gen_range(0.0..std::f64::consts::PI);
                let mut blob = Blob {
                    center: (0.0, 0.0),
                    axes,
                    rotation,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    texture_angle: rng.gen_range(0.0..std::f64::consts::PI),
                    wavelength: rng.gen_range(10.0..16.0) * n / 64.0,
                };
                let (hx, hy) = blob.half_extent();
                blob.center = (rng.gen_range(hx..n - hx), rng.gen_range(hy..n - hy));
                blobs.push(blob);
            }
            let layout = Self {
                seed,
                size,
                blobs,
                background,
            };
            let cov = layout.coverage();
            if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cov) {
                return Ok(layout);
            }
        }
    }

    /// Index of the topmost blob covering pixel `(row, col)`.
    fn blob_at(&self, row: usize, col: usize) -> Option<&Blob> {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        self.blobs.iter().rev().find(|b| b.contains(x, y))
    }

    pub fn mask(&self) -> Mask {
        let n = self.size;
        let data = (0..n * n).map(|i| self.blob_at(i / n, i % n).is_some()).collect();
        Mask {
            height: n,
            width: n,
            data,
        }
    }

    /// Fraction of tissue pixels.
    pub fn coverage(&self) -> f64 {
        self.mask().coverage()
    }
}

/// Binary tissue mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn coverage(&self) -> f64 {
        self.data.iter().filter(|&&t| t).count() as f64 / self.data.len().max(1) as f64
    }
}

/// Colors of one stain: texture levels interpolate between `light` and `dark`.
#[derive(Clone, Debug, PartialEq)]
pub struct StainPalette {
    pub domain: Domain,
    pub light: [f64; 3],
    pub dark: [f64; 3],
    /// Spread of the texture around the mid tone, in `[0, 1]`.
    pub contrast: f64,
}

impl StainPalette {
    pub fn of(domain: Domain) -> Self {
        // Light → dark keeps luminance decreasing in every stain.
        let (light, dark) = match domain {
            Domain::He => ([0.95, 0.62, 0.78], [0.42, 0.16, 0.52]),
            Domain::Mas => ([0.85, 0.30, 0.30], [0.15, 0.20, 0.60]),
            Domain::Pas => ([0.95, 0.55, 0.70], [0.65, 0.10, 0.45]),
            Domain::Pasm => ([0.50, 0.50, 0.50], [0.10, 0.10, 0.10]),
        };
        Self {
            domain,
            light,
            dark,
            contrast: 0.8,
        }
    }

    fn tissue(&self, level: f64) -> [f64; 3] {
        let m = 0.5 + self.contrast * (level - 0.5);
        std::array::from_fn(|c| self.light[c] + (self.dark[c] - self.light[c]) * m)
    }
}

/// Round to the 8-bit grid so in-memory images equal their encodings.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render `layout` in `palette` as a `3×n×n` image in `[0, 1]` plus its mask.
pub fn synth_image(layout: &TissueLayout, palette: &StainPalette) -> (Tensor<f64>, Mask) {
    let n = layout.size;
    let mut data = vec![0.0; 3 * n * n];
    for r in 0..n {
        for c in 0..n {
            let rgb = match layout.blob_at(r, c) {
                Some(b) => palette.tissue(b.texture(c as f64 + 0.5, r as f64 + 0.5)),
                None => [layout.background; 3],
            };
            for ch in 0..3 {
                data[(ch * n + r) * n + c] = quantize(rgb[ch]);
            }
        }
    }
    let image = Tensor::new(&[3, n, n], data).expect("extent");
    (image, layout.mask())
}

/// Sample `index` of a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(2 * index as u128);
    rng.gen()
}

// --- PPM / PGM -------------------------------------------------------------

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255) of a `3×h×w` image.
pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(config_err!("PPM needs a 3×h×w image, got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(to_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

/// Binary PGM (P5) with tissue at 255.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&t| if t { 255 } else { 0 }));
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    body: usize,
}

/// Parse a netpbm header: magic, then width, height and maxval separated by
/// whitespace or `#` comments, then exactly one whitespace byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err!("missing {} magic", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(format_err!("bad header number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .expect("at most nine digits");
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err!("header must end with one whitespace byte"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(format_err!("unsupported extent {width}×{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format_err!("maxval {maxval} (only 8-bit samples are supported)"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        body: pos + 1,
    })
}

fn body<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let rest = &bytes[h.body..];
    if rest.len() != need {
        return Err(format_err!("expected {need} sample bytes, found {}", rest.len()));
    }
    if let Some(&b) = rest.iter().find(|&&b| b as usize > h.maxval) {
        return Err(format_err!("sample {b} exceeds maxval {}", h.maxval));
    }
    Ok(rest)
}

/// Decode a P6 image into `3×h×w` values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let h = parse_header(bytes, b"P6")?;
    let px = body(bytes, &h, 3)?;
    let n = h.width * h.height;
    let mut data = vec![0.0; 3 * n];
    let scale = h.maxval as f64;
    for (p, rgb) in px.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * n + p] = rgb[ch] as f64 / scale;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

/// Decode a P5 mask; samples above half of maxval count as tissue.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let h = parse_header(bytes, b"P5")?;
    let px = body(bytes, &h, 1)?;
    Ok(Mask {
        height: h.height,
        width: h.width,
        data: px.iter().map(|&b| 2 * b as usize > h.maxval).collect(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&fs::read(path)?)
}

// --- manifest --------------------------------------------------------------

/// One manifest line: image path (relative to the manifest), domain, layout seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub domain: Domain,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    /// Parse tab-separated `path, domain, seed` lines; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .quoting(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| format_err!("manifest line {}: {e}", i + 1))?;
            let line = row.position().map_or(i as u64 + 1, |p| p.line());
            if row.len() == 1 && row[0].trim().is_empty() {
                continue;
            }
            if row.len() != 3 {
                return Err(format_err!(
                    "manifest line {line}: expected 3 fields, got {}",
                    row.len()
                ));
            }
            let path = &row[0];
            if path.is_empty() || Path::new(path).is_absolute() || path.split('/').any(|c| c == "..") {
                return Err(format_err!(
                    "manifest line {line}: path {path:?} must be relative and inside the dataset"
                ));
            }
            let domain = row[1]
                .parse()
                .map_err(|_| format_err!("manifest line {line}: unknown domain {:?}", &row[1]))?;
            let seed = row[2]
                .parse()
                .map_err(|_| format_err!("manifest line {line}: bad seed {:?}", &row[2]))?;
            records.push(ManifestRecord {
                path: PathBuf::from(path),
                domain,
                seed,
            });
        }
        Ok(Self { records })
    }

    pub fn render(&self) -> String {
        self.records
            .iter()
            .map(|r| format!("{}\t{}\t{}\n", r.path.display(), r.domain, r.seed))
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }
}

/// Mask file of the layout behind `record`, relative to the manifest.
pub fn mask_path(record: &ManifestRecord) -> PathBuf {
    let stem = record.path.file_stem().unwrap_or_default();
    Path::new("masks").join(stem).with_extension("pgm")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Write `n` layouts rendered in every requested domain, their masks and the
/// manifest under `out_dir`.
pub fn make_dataset(n: usize, domains: &[Domain], seed: u64, size: usize, out_dir: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(config_err!("dataset needs at least one sample"));
    }
    if domains.is_empty() {
        return Err(config_err!("dataset needs at least one domain"));
    }
    let mut manifest = Manifest::default();
    for i in 0..n {
        let s = sample_seed(seed, i);
        let layout = TissueLayout::generate(s, size)?;
        let stem = format!("{i:05}");
        write_file(
            &out_dir.join("masks").join(format!("{stem}.pgm")),
            &encode_pgm(&layout.mask()),
        )?;
        for &d in domains {
            let (img, _) = synth_image(&layout, &StainPalette::of(d));
            let rel = PathBuf::from(d.name()).join(format!("{stem}.ppm"));
            write_file(&out_dir.join(&rel), &encode_ppm(&img)?)?;
            manifest.records.push(ManifestRecord {
                path: rel,
                domain: d,
                seed: s,
            });
        }
    }
    write_file(&out_dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}
