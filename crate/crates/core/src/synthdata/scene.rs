use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{clamp_u8, GrayImage};
use crate::rng::{stream_rng, streams};

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

struct Lattice {
    cells: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let n = cells + 1;
        Lattice {
            cells,
            values: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Value noise at normalized coordinates `u, v ∈ [0, 1]`.
    fn sample(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let (x, y) = (u * self.cells as f64, v * self.cells as f64);
        let (x0, y0) = ((x.floor() as usize).min(self.cells - 1), (y.floor() as usize).min(self.cells - 1));
        let (fx, fy) = (smoothstep(x - x0 as f64), smoothstep(y - y0 as f64));
        let at = |i: usize, j: usize| self.values[j * n + i];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Deterministic texture: value-noise octaves, soft blobs and sharp straight edges,
/// stretched to the full 8-bit range.
pub fn gen_base_scene(seed: u64, size: usize) -> Result<GrayImage> {
    if size < 32 {
        return Err(Error::invalid(format!("scene size must be at least 32, got {size}")));
    }
    let mut rng = stream_rng(seed, streams::SCENE);
    let octaves: Vec<(Lattice, f64)> = [(3usize, 1.0), (6, 0.6), (12, 0.35), (24, 0.2)]
        .into_iter()
        .map(|(c, a)| (Lattice::new(c, &mut rng), a))
        .collect();
    let s = size as f64;
    let blobs: Vec<[f64; 4]> = (0..rng.random_range(6..11))
        .map(|_| {
            [
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.06 * s..0.2 * s),
                rng.random_range(-1.2..1.2),
            ]
        })
        .collect();
    // Half-plane steps a·x + b·y > c with unit normals.
    let edges: Vec<[f64; 4]> = (0..rng.random_range(3..6))
        .map(|_| {
            let (mut a, mut b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let n = (a * a + b * b).sqrt().max(1e-3);
            a /= n;
            b /= n;
            let c = a * rng.random_range(0.2 * s..0.8 * s) + b * rng.random_range(0.2 * s..0.8 * s);
            [a, b, c, rng.random_range(-0.9..0.9)]
        })
        .collect();

    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let (u, v) = (xf / (s - 1.0), yf / (s - 1.0));
            let mut val: f64 = octaves.iter().map(|(l, a)| a * l.sample(u, v)).sum();
            for &[cx, cy, r, amp] in &blobs {
                let rho2 = ((xf - cx).powi(2) + (yf - cy).powi(2)) / (r * r);
                if rho2 < 1.0 {
                    val += amp * (1.0 - rho2) * (1.0 - rho2);
                }
            }
            for &[a, b, c, amp] in &edges {
                // one-pixel linear ramp across the edge
                let d = (a * xf + b * yf - c).clamp(-0.5, 0.5) + 0.5;
                val += amp * d;
            }
            field.push(val);
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = field.iter().map(|v| clamp_u8((v - lo) / span * 255.0)).collect();
    GrayImage::from_raw(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(gen_base_scene(1, 64).unwrap(), gen_base_scene(1, 64).unwrap());
    }

    #[test]
    fn seeds_differ() {
        let a = gen_base_scene(1, 64).unwrap();
        let b = gen_base_scene(2, 64).unwrap();
        let differ = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .filter(|(x, y)| (**x as i32 - **y as i32).abs() > 4)
            .count();
        assert!(differ * 10 >= 64 * 64, "{differ}");
    }

    #[test]
    fn histogram_is_wide() {
        let img = gen_base_scene(3, 128).unwrap();
        let mut seen = [false; 256];
        for &v in img.as_raw() {
            seen[v as usize] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 128);
    }

    #[test]
    fn too_small() {
        assert!(gen_base_scene(1, 31).is_err());
    }
}
