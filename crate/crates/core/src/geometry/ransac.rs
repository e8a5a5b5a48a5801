//! Normalized DLT homography fitting inside a seeded RANSAC loop.

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Homography, Point};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iters: usize,
    /// Symmetric transfer error threshold in pixels.
    pub inlier_thresh: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iters: 2000,
            inlier_thresh: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacFit {
    pub homography: Homography,
    pub inliers: Vec<usize>,
}

/// Similarity transform sending the points to zero mean and mean distance √2.
fn normalizer(pts: &[Point]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * nalgebra::Vector3::new(p.x, p.y, 1.0);
    Point::new(v.x / v.z, v.y / v.z)
}

/// Direct linear transform with Hartley normalization; `dst ~ H src`.
pub fn dlt_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::invalid(format!("homography needs at least 4 matches, got {n}")));
    }
    let degenerate = || Error::Degenerate("point configuration cannot determine a homography".into());
    let ts = normalizer(src).ok_or_else(degenerate)?;
    let td = normalizer(dst).ok_or_else(degenerate)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let p = apply(&ts, src[i]);
        let q = apply(&td, dst[i]);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = 2 * i;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r0 + 1, 3)] = -x;
        a[(r0 + 1, 4)] = -y;
        a[(r0 + 1, 5)] = -1.0;
        a[(r0 + 1, 6)] = v * x;
        a[(r0 + 1, 7)] = v * y;
        a[(r0 + 1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(degenerate)?;
    let (imin, _) = svd.singular_values.argmin();
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tdi = td.try_inverse().ok_or_else(degenerate)?;
    Homography::new(tdi * hn * ts)
}

fn triangle_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
}

fn has_collinear_triple(p: &[Point; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES.iter().any(|t| triangle_area(p[t[0]], p[t[1]], p[t[2]]) < 1e-6)
}

/// Mean of the forward and backward transfer distances.
pub fn symmetric_transfer_error(h: &Homography, hinv: &Homography, src: Point, dst: Point) -> f64 {
    match (h.apply(src), hinv.apply(dst)) {
        (Ok(f), Ok(b)) => 0.5 * ((f - dst).norm() + (b - src).norm()),
        _ => f64::INFINITY,
    }
}

fn consensus(h: &Homography, matches: &[(Point, Point)], thresh: f64) -> (Vec<usize>, f64) {
    let hinv = h.inverse();
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, &(s, d)) in matches.iter().enumerate() {
        let e = symmetric_transfer_error(h, &hinv, s, d);
        if e < thresh {
            inliers.push(i);
            total += e;
        }
    }
    (inliers, total)
}

/// Robust homography from `(src, dst)` matches. Deterministic for a fixed seed
/// and input order.
pub fn estimate_homography_ransac(matches: &[(Point, Point)], cfg: &RansacConfig) -> Result<RansacFit> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::invalid(format!("homography needs at least 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, f64, Homography)> = None;
    for _ in 0..cfg.iters {
        let mut idx = [0usize; 4];
        for k in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !idx[..k].contains(&c) {
                    idx[k] = c;
                    break;
                }
            }
        }
        let src = idx.map(|i| matches[i].0);
        let dst = idx.map(|i| matches[i].1);
        if has_collinear_triple(&src) || has_collinear_triple(&dst) {
            continue;
        }
        let Ok(h) = dlt_homography(&src, &dst) else { continue };
        let (inl, err) = consensus(&h, matches, cfg.inlier_thresh);
        let better = match &best {
            None => !inl.is_empty(),
            Some((bi, be, _)) => inl.len() > bi.len() || (inl.len() == bi.len() && err < *be),
        };
        if better {
            best = Some((inl, err, h));
        }
    }
    let (inliers, _, h) = best.ok_or_else(|| Error::Degenerate("every RANSAC sample was degenerate".into()))?;
    if inliers.len() < 4 {
        return Ok(RansacFit { homography: h, inliers });
    }
    let src: Vec<Point> = inliers.iter().map(|&i| matches[i].0).collect();
    let dst: Vec<Point> = inliers.iter().map(|&i| matches[i].1).collect();
    let refit = dlt_homography(&src, &dst).unwrap_or(h);
    let (inliers, _) = consensus(&refit, matches, cfg.inlier_thresh);
    Ok(RansacFit {
        homography: refit,
        inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known_h() -> Homography {
        Homography::new(Matrix3::new(1.05, 0.08, 3.0, -0.06, 0.97, -2.0, 4e-4, -3e-4, 1.0)).unwrap()
    }

    fn exact_matches(h: &Homography, n: usize, rng: &mut ChaCha8Rng) -> Vec<(Point, Point)> {
        (0..n)
            .map(|_| {
                let p = Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                (p, h.apply(p).unwrap())
            })
            .collect()
    }

    #[test]
    fn exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = known_h();
        let m = exact_matches(&h, 20, &mut rng);
        let fit = estimate_homography_ransac(&m, &RansacConfig::default()).unwrap();
        assert!(fit.homography.corner_error(&h, 64, 64) < 1e-4);
        assert_eq!(fit.inliers.len(), 20);
    }

    #[test]
    fn with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = known_h();
        let mut m = exact_matches(&h, 20, &mut rng);
        for _ in 0..20 {
            m.push((
                Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)),
                Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)),
            ));
        }
        let cfg = RansacConfig {
            inlier_thresh: 1.0,
            ..Default::default()
        };
        let fit = estimate_homography_ransac(&m, &cfg).unwrap();
        assert!(fit.homography.corner_error(&h, 64, 64) < 0.1);
        let again = estimate_homography_ransac(&m, &cfg).unwrap();
        assert_eq!(fit.homography, again.homography);
    }

    #[test]
    fn too_few_matches() {
        let m = vec![(Point::origin(), Point::origin()); 3];
        assert!(estimate_homography_ransac(&m, &RansacConfig::default()).is_err());
    }

    #[test]
    fn collinear_input_fails() {
        let m: Vec<_> = (0..10).map(|i| (Point::new(i as f64, 0.0), Point::new(i as f64, 1.0))).collect();
        assert!(estimate_homography_ransac(&m, &RansacConfig::default()).is_err());
    }
}
