//! Dual-softmax coarse matching and expectation-based fine refinement.

mod matchset;

pub use matchset::{Match, MatchSet};

use crate::augment::{patch_center, PatchGrid};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Floor applied to the heatmap variance.
pub const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub tau: f64,
    pub theta: f64,
    /// Half-width of the fine search window; `None` searches the whole map.
    pub window: Option<usize>,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            tau: 0.1,
            theta: 0.2,
            window: None,
        }
    }
}

/// Similarity and dual-softmax probability matrices.
#[derive(Debug, Clone)]
pub struct CoarseScores {
    pub s: Tensor<f32>,
    pub p: Tensor<f32>,
    pub tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `P = softmax_j(S/τ) ⊙ softmax_i(S/τ)`.
pub fn dual_softmax<T: Real>(s: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    if s.rank() != 2 {
        return Err(Error::invalid(format!("similarity must be 2-D, got {:?}", s.shape())));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "dual_softmax" });
    }
    let inv = T::of(1.0 / tau);
    let scaled = s.map(|v| v * inv);
    let row = scaled.softmax(1)?;
    let col = scaled.softmax(0)?;
    Ok(Tensor::new(
        s.shape().to_vec(),
        row.data().iter().zip(col.data()).map(|(a, b)| *a * *b).collect(),
    )?)
}

/// Differentiable [`dual_softmax`].
pub fn dual_softmax_var<T: Real>(tape: &mut Tape<T>, s: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let scaled = tape.scale(s, 1.0 / tau)?;
    let row = tape.softmax(scaled, 1)?;
    let col = tape.softmax(scaled, 0)?;
    tape.mul(row, col)
}

/// `S = A Bᵀ / d` for token matrices `[Na, d]` and `[Nb, d]`.
pub fn similarity_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.shape(a)[1];
    let bt = tape.transpose(b, 0, 1)?;
    let s = tape.matmul(a, bt)?;
    tape.scale(s, 1.0 / d as f64)
}

pub fn coarse_scores(a: &Tensor<f32>, b: &Tensor<f32>, tau: f64) -> Result<CoarseScores> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "coarse_scores",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (na, d, nb) = (a.shape()[0], a.shape()[1], b.shape()[0]);
    let inv = 1.0 / d as f32;
    let data = crate::numerics::plain_matmul_nt(a.data(), b.data(), na, d, nb)
        .into_iter()
        .map(|v| v * inv)
        .collect();
    let s = Tensor::new(vec![na, nb], data)?;
    let p = dual_softmax(&s, tau)?;
    Ok(CoarseScores { s, p, tau })
}

/// Mutual-argmax pairs `(i, j, P(i,j))` with `P(i,j) ≥ θ`, in row order.
/// Ties resolve to the lowest index.
pub fn mutual_matches<T: Real>(p: &Tensor<T>, theta: f64) -> Vec<(usize, usize, f64)> {
    if p.rank() != 2 || p.is_empty() {
        return Vec::new();
    }
    let (na, nb) = (p.shape()[0], p.shape()[1]);
    let d = p.data();
    let mut col_best = vec![0usize; nb];
    for j in 0..nb {
        for i in 1..na {
            if d[i * nb + j] > d[col_best[j] * nb + j] {
                col_best[j] = i;
            }
        }
    }
    let mut out = Vec::new();
    for i in 0..na {
        let row = &d[i * nb..(i + 1) * nb];
        let mut jb = 0;
        for j in 1..nb {
            if row[j] > row[jb] {
                jb = j;
            }
        }
        let v = row[jb].f64();
        if col_best[jb] == i && v >= theta {
            out.push((i, jb, v));
        }
    }
    out
}

/// Patch-level matches: mutual argmax over `P` at threshold θ, placed at patch centers.
pub fn extract_coarse_matches<T: Real>(p: &Tensor<T>, theta: f64, grid_a: &PatchGrid, grid_b: &PatchGrid) -> Result<MatchSet> {
    if p.rank() != 2 || p.shape()[0] != grid_a.n() || p.shape()[1] != grid_b.n() {
        return Err(Error::ShapeMismatch {
            op: "extract_coarse_matches",
            lhs: p.shape().to_vec(),
            rhs: vec![grid_a.n(), grid_b.n()],
        });
    }
    let mut matches = Vec::new();
    for (i, j, score) in mutual_matches(p, theta) {
        let (ai, aj) = grid_a.coords(i);
        let (bi, bj) = grid_b.coords(j);
        let pa = patch_center(ai, aj, grid_a)?;
        let pb = patch_center(bi, bj, grid_b)?;
        matches.push(Match {
            a: pa,
            b: pb,
            score,
            sigma2: None,
        });
    }
    Ok(MatchSet { matches })
}

/// Eq-10 style expectation for one query.
#[derive(Debug, Clone)]
pub struct Expectation {
    /// Expected position in `M2` grid coordinates.
    pub point: Point,
    /// `Var_x + Var_y`, floored at [`SIGMA2_FLOOR`].
    pub sigma2: f64,
    /// Distribution over the searched positions of `M2`, row-major over the grid
    /// (zero outside the window).
    pub heatmap: Vec<f64>,
}

/// Dense `[h·w, c]` feature map with its grid size.
#[derive(Debug, Clone, Copy)]
pub struct FeatureGrid<'a> {
    pub data: &'a Tensor<f32>,
    pub rows: usize,
    pub cols: usize,
}

impl<'a> FeatureGrid<'a> {
    pub fn new(data: &'a Tensor<f32>, rows: usize, cols: usize) -> Result<Self> {
        if data.rank() != 2 || data.shape()[0] != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "feature_grid",
                lhs: data.shape().to_vec(),
                rhs: vec![rows * cols],
            });
        }
        Ok(FeatureGrid { data, rows, cols })
    }

    fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    fn row(&self, idx: usize) -> &[f32] {
        let c = self.channels();
        &self.data.data()[idx * c..(idx + 1) * c]
    }
}

/// Softmax over positions `x` of `m2` of `m1(i)ᵀ m2(x)`, its mean and total
/// variance. `window` restricts the support to a square around `center`.
pub fn expected_match(
    m1: &FeatureGrid,
    m2: &FeatureGrid,
    query: (usize, usize),
    window: Option<(usize, Point)>,
) -> Result<Expectation> {
    let (qx, qy) = query;
    if qx >= m1.cols || qy >= m1.rows {
        return Err(Error::invalid(format!("query ({qx}, {qy}) outside the {}x{} map", m1.cols, m1.rows)));
    }
    if m1.channels() != m2.channels() {
        return Err(Error::ShapeMismatch {
            op: "expected_match",
            lhs: m1.data.shape().to_vec(),
            rhs: m2.data.shape().to_vec(),
        });
    }
    let f = m1.row(qy * m1.cols + qx);
    let (x0, x1, y0, y1) = match window {
        None => (0, m2.cols - 1, 0, m2.rows - 1),
        Some((r, c)) => {
            let cx = c.x.round().clamp(0.0, (m2.cols - 1) as f64) as usize;
            let cy = c.y.round().clamp(0.0, (m2.rows - 1) as f64) as usize;
            (cx.saturating_sub(r), (cx + r).min(m2.cols - 1), cy.saturating_sub(r), (cy + r).min(m2.rows - 1))
        }
    };
    let mut logits = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let g = m2.row(y * m2.cols + x);
            logits.push(f.iter().zip(g).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>());
        }
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut heatmap = vec![0.0; m2.rows * m2.cols];
    let (mut ex, mut ey, mut exx, mut eyy) = (0.0, 0.0, 0.0, 0.0);
    let mut k = 0;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = w[k] / z;
            k += 1;
            heatmap[y * m2.cols + x] = p;
            let (xf, yf) = (x as f64, y as f64);
            ex += p * xf;
            ey += p * yf;
            exx += p * xf * xf;
            eyy += p * yf * yf;
        }
    }
    let var = (exx - ex * ex) + (eyy - ey * ey);
    Ok(Expectation {
        point: Point::new(ex, ey),
        sigma2: var.max(SIGMA2_FLOOR),
        heatmap,
    })
}

/// Full-resolution pixels per fine-grid step.
pub const FINE_STRIDE: f64 = 2.0;

/// Moves every coarse match's b-side to the expectation of the a-side center's
/// fine descriptor over `fine_b`; keeps the a-side and score, sets σ² in full
/// resolution px².
pub fn refine_matches(coarse: &MatchSet, fine_a: &FeatureGrid, fine_b: &FeatureGrid, window: Option<usize>) -> Result<MatchSet> {
    let mut out = Vec::with_capacity(coarse.matches.len());
    for m in &coarse.matches {
        let qx = (m.a.x / FINE_STRIDE).round().clamp(0.0, (fine_a.cols - 1) as f64) as usize;
        let qy = (m.a.y / FINE_STRIDE).round().clamp(0.0, (fine_a.rows - 1) as f64) as usize;
        let win = window.map(|r| (r, Point::new(m.b.x / FINE_STRIDE, m.b.y / FINE_STRIDE)));
        let e = expected_match(fine_a, fine_b, (qx, qy), win)?;
        out.push(Match {
            a: m.a,
            b: Point::new(e.point.x * FINE_STRIDE, e.point.y * FINE_STRIDE),
            score: m.score,
            sigma2: Some(e.sigma2 * FINE_STRIDE * FINE_STRIDE),
        });
    }
    Ok(MatchSet { matches: out })
}

/// Differentiable expectations for a batch of query rows.
#[derive(Debug, Clone, Copy)]
pub struct ExpectationVars {
    /// `[n, 2]` expected (x, y) in `M2` grid coordinates.
    pub mean: Var,
    /// `[n, rows·cols]` heatmaps.
    pub heat: Var,
}

/// Grid coordinates `[rows·cols, 2]` of a map, row-major.
pub fn grid_coords<T: Real>(rows: usize, cols: usize) -> Tensor<T> {
    let mut d = Vec::with_capacity(rows * cols * 2);
    for y in 0..rows {
        for x in 0..cols {
            d.push(T::of(x as f64));
            d.push(T::of(y as f64));
        }
    }
    Tensor::new(vec![rows * cols, 2], d).expect("grid size")
}

/// Tape version of [`expected_match`] without a window: `m1` and `m2` are
/// `[N, c]` feature vars, `queries` index rows of `m1`.
pub fn expected_match_var<T: Real>(
    tape: &mut Tape<T>,
    m1: Var,
    m2: Var,
    m2_hw: (usize, usize),
    queries: &[usize],
) -> Result<ExpectationVars> {
    let q = tape.gather(m1, 0, queries)?;
    let m2t = tape.transpose(m2, 0, 1)?;
    let logits = tape.matmul(q, m2t)?;
    let heat = tape.softmax(logits, 1)?;
    let coords = tape.constant(grid_coords(m2_hw.0, m2_hw.1));
    let mean = tape.matmul(heat, coords)?;
    Ok(ExpectationVars { mean, heat })
}

/// Total variance of each heatmap row given its mean (values only, floored).
pub fn heat_variance<T: Real>(heat: &Tensor<T>, mean: &Tensor<T>, rows: usize, cols: usize) -> Vec<f64> {
    let n = rows * cols;
    let nq = heat.shape()[0];
    (0..nq)
        .map(|q| {
            let h = &heat.data()[q * n..(q + 1) * n];
            let (mx, my) = (mean.data()[2 * q].f64(), mean.data()[2 * q + 1].f64());
            let mut v = 0.0;
            for (k, p) in h.iter().enumerate() {
                let (x, y) = ((k % cols) as f64, (k / cols) as f64);
                v += p.f64() * ((x - mx).powi(2) + (y - my).powi(2));
            }
            v.max(SIGMA2_FLOOR)
        })
        .collect()
}
