//! Structure-preservation and background statistics for evaluation.

use crate::data::Mask;
use crate::error::{contract_err, Result};
use crate::numeric::{Scalar, Tensor};

pub const CSS_WINDOW: usize = 8;
pub const CSS_C2: f64 = 0.03 * 0.03;
pub const CSS_C3: f64 = CSS_C2 / 2.0;

/// Luma (`0.299 R + 0.587 G + 0.114 B`) of a `3×h×w` image, or the single
/// channel of a `1×h×w` one.
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let s = img.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(contract_err!("expected 1×h×w or 3×h×w image, got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let n = h * w;
    let gray = if s[0] == 1 {
        d.iter().map(|v| v.f64()).collect()
    } else {
        (0..n)
            .map(|p| 0.299 * d[p].f64() + 0.587 * d[n + p].f64() + 0.114 * d[2 * n + p].f64())
            .collect()
    };
    Ok((h, w, gray))
}

/// Contrast-structure similarity: mean over all `8×8` windows (stride 1) of
///
/// ```text
/// (2σ_aσ_b + C₂)/(σ_a² + σ_b² + C₂) · (σ_ab + C₃)/(σ_aσ_b + C₃)
/// ```
///
/// on grayscale, with population (co)variances.
pub fn css<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(contract_err!("css of {:?} and {:?}", a.shape(), b.shape()));
    }
    let (h, w, ga) = grayscale(a)?;
    let (_, _, gb) = grayscale(b)?;
    let win = CSS_WINDOW;
    if h < win || w < win {
        return Err(contract_err!("image {h}×{w} smaller than the {win}×{win} window"));
    }
    let inv = 1.0 / (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in r..r + win {
                for x in c..c + win {
                    sa += ga[y * w + x];
                    sb += gb[y * w + x];
                }
            }
            let (ma, mb) = (sa * inv, sb * inv);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for y in r..r + win {
                for x in c..c + win {
                    let (da, db) = (ga[y * w + x] - ma, gb[y * w + x] - mb);
                    vaa += da * da;
                    vbb += db * db;
                    vab += da * db;
                }
            }
            let (vaa, vbb, vab) = (vaa * inv, vbb * inv, vab * inv);
            let (sda, sdb) = (vaa.sqrt(), vbb.sqrt());
            let contrast = (2.0 * sda * sdb + CSS_C2) / (vaa + vbb + CSS_C2);
            let structure = (vab + CSS_C3) / (sda * sdb + CSS_C3);
            total += contrast * structure;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean and per-pair CSS over a set of image pairs.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct CssReport {
    pub mean: f64,
    pub values: Vec<f64>,
}

impl CssReport {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self { mean, values }
    }
}

/// Mean over background pixels of the smallest channel value.
pub fn background_whiteness<T: Scalar>(img: &Tensor<T>, mask: &Mask) -> Result<f64> {
    let s = img.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(contract_err!(
            "mask {}×{} does not match image {:?}",
            mask.height,
            mask.width,
            s
        ));
    }
    let n = mask.height * mask.width;
    let d = img.data();
    let (mut sum, mut count) = (0.0, 0usize);
    for p in (0..n).filter(|&p| !mask.data[p]) {
        sum += (0..s[0]).map(|c| d[c * n + p].f64()).fold(f64::INFINITY, f64::min);
        count += 1;
    }
    if count == 0 {
        return Err(contract_err!("mask has no background pixels"));
    }
    Ok(sum / count as f64)
}

/// Mean of `values` (an `h×w` grid upsampled to the mask) inside and outside tissue.
pub fn masked_means(values: &[f64], mask: &Mask) -> Result<(f64, f64)> {
    if values.len() != mask.data.len() {
        return Err(contract_err!(
            "{} values for a {}-pixel mask",
            values.len(),
            mask.data.len()
        ));
    }
    let (mut t, mut nt, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in values.iter().zip(&mask.data) {
        if m {
            t += v;
            nt += 1;
        } else {
            b += v;
            nb += 1;
        }
    }
    if nt == 0 || nb == 0 {
        return Err(contract_err!("mask needs both tissue and background pixels"));
    }
    Ok((t / nt as f64, b / nb as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_image, Domain, StainPalette, TissueLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize) -> Tensor<f64> {
        Tensor::uniform(&[3, n, n], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_and_constants() {
        let x = noise(1, 16);
        assert!((css(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (Tensor::full(&[3, 16, 16], 0.2), Tensor::full(&[3, 16, 16], 0.9));
        assert_eq!(css(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn inversion_is_minus_one() {
        // σ_b = σ_a and σ_ab = −σ_a², so each window scores (C₃ − σ²)/(σ² + C₃).
        let x = noise(2, 20);
        let inv = x.map(|v| 1.0 - v);
        let (h, w, g) = grayscale(&x).unwrap();
        let mut expect = 0.0;
        for r in 0..=h - 8 {
            for c in 0..=w - 8 {
                let px: Vec<f64> = (r..r + 8)
                    .flat_map(|y| (c..c + 8).map(move |x| (y, x)))
                    .map(|(y, x)| g[y * w + x])
                    .collect();
                let m = px.iter().sum::<f64>() / 64.0;
                let v = px.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 64.0;
                expect += (CSS_C3 - v) / (v + CSS_C3);
            }
        }
        expect /= ((h - 7) * (w - 7)) as f64;
        let got = css(&x, &inv).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(got < -0.95);
    }

    #[test]
    fn symmetric_and_luminance_free() {
        let (a, b) = (noise(3, 16), noise(4, 16));
        let ab = css(&a, &b).unwrap();
        assert!((ab - css(&b, &a).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        let dim = a.map(|v| v * 0.5);
        let shifted = dim.map(|v| v + 0.3);
        assert!((css(&dim, &b).unwrap() - css(&shifted, &b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn size_mismatch_rejected() {
        assert!(css(&noise(5, 16), &noise(5, 12)).is_err());
        assert!(css(&noise(5, 4), &noise(5, 4)).is_err());
    }

    #[test]
    fn whiteness_corners() {
        let mask = Mask {
            height: 4,
            width: 4,
            data: (0..16).map(|i| i < 5).collect(),
        };
        assert_eq!(
            background_whiteness(&Tensor::<f64>::ones(&[3, 4, 4]), &mask).unwrap(),
            1.0
        );
        assert_eq!(
            background_whiteness(&Tensor::<f64>::zeros(&[3, 4, 4]), &mask).unwrap(),
            0.0
        );
        let full = Mask {
            data: vec![true; 16],
            ..mask
        };
        assert!(background_whiteness(&Tensor::<f64>::ones(&[3, 4, 4]), &full).is_err());
    }

    #[test]
    fn fresh_samples_white_and_aligned() {
        let layout = TissueLayout::generate(8, 64).unwrap();
        let (he, mask) = synth_image(&layout, &StainPalette::of(Domain::He));
        assert!(background_whiteness(&he, &mask).unwrap() >= 0.9);
        for d in [Domain::Mas, Domain::Pas, Domain::Pasm] {
            let (other, _) = synth_image(&layout, &StainPalette::of(d));
            assert!(css(&he, &other).unwrap() > 0.9, "{d}");
        }
    }
}
