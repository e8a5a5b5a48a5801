use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::image::{clamp_u8, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Opt,
    Nir,
    Sar,
    Depth,
    Uv,
}

impl Modality {
    pub const ALL: [Modality; 5] = [Modality::Opt, Modality::Nir, Modality::Sar, Modality::Depth, Modality::Uv];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Opt => "OPT",
            Modality::Nir => "NIR",
            Modality::Sar => "SAR",
            Modality::Depth => "DEPTH",
            Modality::Uv => "UV",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown modality `{s}`")))
    }
}

/// Knobs of the per-modality radiometric transforms. Each modality reads only
/// the fields relevant to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub gamma: f64,
    pub blur_radius: usize,
    /// Equivalent number of looks of the speckle (SAR).
    pub looks: f64,
    /// Quantization levels (DEPTH).
    pub levels: usize,
    /// Outer radius of the band-pass (UV); the inner one is `blur_radius`.
    pub band_radius: usize,
    pub gain: f64,
}

impl RenderParams {
    pub fn defaults(m: Modality) -> Self {
        let base = RenderParams {
            gamma: 1.0,
            blur_radius: 0,
            looks: 4.0,
            levels: 8,
            band_radius: 4,
            gain: 2.5,
        };
        match m {
            Modality::Opt => RenderParams { gamma: 1.1, ..base },
            Modality::Nir => RenderParams {
                gamma: 1.0 / 2.2,
                blur_radius: 1,
                ..base
            },
            Modality::Sar => RenderParams {
                looks: 16.0,
                blur_radius: 1,
                ..base
            },
            Modality::Depth => RenderParams { blur_radius: 2, ..base },
            Modality::Uv => RenderParams { blur_radius: 1, ..base },
        }
    }
}

fn gamma_lut(gamma: f64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = clamp_u8(255.0 * (v as f64 / 255.0).powf(gamma));
    }
    lut
}

/// Separable box blur with edge clamping.
pub(crate) fn box_blur(w: usize, h: usize, src: &[f64], r: usize) -> Vec<f64> {
    if r == 0 {
        return src.to_vec();
    }
    let ri = r as isize;
    let norm = 1.0 / (2 * r + 1) as f64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -ri..=ri {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += src[y * w + xx];
            }
            tmp[y * w + x] = acc * norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -ri..=ri {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

fn to_f64(img: &GrayImage) -> Vec<f64> {
    img.as_raw().iter().map(|&v| v as f64).collect()
}

fn from_f64(w: usize, h: usize, v: &[f64]) -> GrayImage {
    GrayImage::from_raw(w, h, v.iter().map(|&x| clamp_u8(x)).collect()).expect("size preserved")
}

pub fn render_modality(base: &GrayImage, m: Modality, seed: u64) -> GrayImage {
    render_modality_with(base, m, &RenderParams::defaults(m), seed)
}

pub fn render_modality_with(base: &GrayImage, m: Modality, p: &RenderParams, seed: u64) -> GrayImage {
    let (w, h) = (base.width(), base.height());
    match m {
        Modality::Opt => {
            let lut = gamma_lut(p.gamma);
            GrayImage::from_raw(w, h, base.as_raw().iter().map(|&v| lut[v as usize]).collect()).expect("size")
        }
        Modality::Nir => {
            let lut = gamma_lut(p.gamma);
            let remapped: Vec<f64> = base.as_raw().iter().map(|&v| lut[v as usize] as f64).collect();
            from_f64(w, h, &box_blur(w, h, &remapped, p.blur_radius))
        }
        Modality::Sar => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let speckle = Gamma::new(p.looks, 1.0 / p.looks).expect("looks > 0");
            let norm = 255.0 / 256f64.ln();
            let v: Vec<f64> = base
                .as_raw()
                .iter()
                .map(|&v| {
                    let s: f64 = speckle.sample(&mut rng);
                    norm * (1.0 + v as f64 * s).ln()
                })
                .collect();
            // multilook averaging
            from_f64(w, h, &box_blur(w, h, &v, p.blur_radius))
        }
        Modality::Depth => {
            let smooth = box_blur(w, h, &to_f64(base), p.blur_radius);
            let levels = p.levels.max(2);
            let step = 256.0 / levels as f64;
            let scale = 255.0 / (levels - 1) as f64;
            let v: Vec<f64> = smooth
                .iter()
                .map(|&x| ((x / step).floor().min((levels - 1) as f64)) * scale)
                .collect();
            from_f64(w, h, &v)
        }
        Modality::Uv => {
            let src = to_f64(base);
            let fine = box_blur(w, h, &src, p.blur_radius);
            let coarse = box_blur(w, h, &src, p.band_radius);
            let v: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| 128.0 + p.gain * (f - c)).collect();
            from_f64(w, h, &v)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synthdata::gen_base_scene;

    /// Magnitude-weighted mean of cos(2Δθ) between gradient orientations;
    /// insensitive to contrast inversion.
    pub(crate) fn orientation_correlation(a: &GrayImage, b: &GrayImage) -> f64 {
        let grad = |img: &GrayImage, x: usize, y: usize| {
            let gx = img.get(x + 1, y) as f64 - img.get(x - 1, y) as f64;
            let gy = img.get(x, y + 1) as f64 - img.get(x, y - 1) as f64;
            (gx, gy)
        };
        let (mut num, mut den) = (0.0, 0.0);
        for y in 1..a.height() - 1 {
            for x in 1..a.width() - 1 {
                let (ax, ay) = grad(a, x, y);
                let (bx, by) = grad(b, x, y);
                let (na, nb) = (ax * ax + ay * ay, bx * bx + by * by);
                if na < 1e-9 || nb < 1e-9 {
                    continue;
                }
                let dot = ax * bx + ay * by;
                let cos2 = 2.0 * dot * dot / (na * nb) - 1.0;
                let wgt = (na * nb).sqrt();
                num += wgt * cos2;
                den += wgt;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn opt_gamma_one_is_identity() {
        let base = gen_base_scene(4, 64).unwrap();
        let p = RenderParams {
            gamma: 1.0,
            ..RenderParams::defaults(Modality::Opt)
        };
        assert_eq!(render_modality_with(&base, Modality::Opt, &p, 0), base);
    }

    #[test]
    fn sar_deterministic() {
        let base = gen_base_scene(4, 64).unwrap();
        assert_eq!(render_modality(&base, Modality::Sar, 11), render_modality(&base, Modality::Sar, 11));
        assert_ne!(render_modality(&base, Modality::Sar, 11), render_modality(&base, Modality::Sar, 12));
    }

    #[test]
    fn nir_differs_from_base() {
        let base = gen_base_scene(4, 64).unwrap();
        let nir = render_modality(&base, Modality::Nir, 0);
        let mad: f64 = base
            .as_raw()
            .iter()
            .zip(nir.as_raw())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / (64.0 * 64.0);
        assert!(mad > 16.0, "{mad}");
    }

    #[test]
    fn structure_survives_every_modality() {
        for seed in 0..4 {
            let base = gen_base_scene(seed, 96).unwrap();
            for m in Modality::ALL {
                let r = render_modality(&base, m, seed + 100);
                let c = orientation_correlation(&base, &r);
                assert!(c > 0.3, "{m} seed {seed}: {c}");
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.to_string().parse::<Modality>().unwrap(), m);
        }
        assert_eq!("sar".parse::<Modality>().unwrap(), Modality::Sar);
        assert!("RGB".parse::<Modality>().is_err());
    }
}
