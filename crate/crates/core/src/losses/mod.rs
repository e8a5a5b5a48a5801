//! Coarse BCE, epipolar, cycle-consistency, variance-weighted fine and total losses.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{FundamentalMatrix, Point};
use crate::matching::expected_match_var;
use crate::numerics::{Real, Tape, Tensor, Var};

/// Probability clamp used inside the coarse loss.
pub const BCE_EPS: f64 = 1e-7;

/// Guards the square root of a zero distance.
const DIST_EPS: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub n_q: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
            lambda: 1.0,
            n_q: 32,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.n_q == 0 {
            return Err(Error::Config("n_q must be at least 1".into()));
        }
        Ok(())
    }
}

/// Normalizer of the coarse loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarseNorm {
    /// Divide by the number of matrix entries.
    #[default]
    Entries,
    /// Divide by the number of ground-truth correspondences.
    Points,
}

impl FromStr for CoarseNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entries" => Ok(CoarseNorm::Entries),
            "points" => Ok(CoarseNorm::Points),
            o => Err(Error::Config(format!("coarse_norm must be `entries` or `points`, got `{o}`"))),
        }
    }
}

/// Binary cross-entropy between the clamped probabilities `p` and the 0/1 matrix `gt`.
pub fn loss_coarse<T: Real>(tape: &mut Tape<T>, p: Var, gt: &Tensor<T>, norm: CoarseNorm) -> Result<Var> {
    if tape.shape(p) != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_coarse",
            lhs: tape.shape(p).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let pc = tape.clamp(p, BCE_EPS, 1.0 - BCE_EPS)?;
    let log_p = tape.log(pc)?;
    let neg = tape.scale(pc, -1.0)?;
    let one_minus = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let g = tape.constant(gt.clone());
    let inv = tape.constant(gt.map(|v| T::one() - v));
    let a = tape.mul(g, log_p)?;
    let b = tape.mul(inv, log_q)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum(ll, None)?;
    let denom = match norm {
        CoarseNorm::Entries => gt.len() as f64,
        CoarseNorm::Points => gt.data().iter().filter(|v| v.f64() > 0.5).count().max(1) as f64,
    };
    tape.scale(total, -1.0 / denom)
}

/// Splits `[n, 2]` points into `[n]` x and y columns.
fn columns<T: Real>(tape: &mut Tape<T>, pts: Var) -> Result<(Var, Var)> {
    let n = tape.shape(pts)[0];
    let x = tape.gather(pts, 1, &[0])?;
    let y = tape.gather(pts, 1, &[1])?;
    Ok((tape.reshape(x, &[n])?, tape.reshape(y, &[n])?))
}

fn vector<T: Real>(v: impl IntoIterator<Item = f64>) -> Tensor<T> {
    Tensor::vector(v.into_iter().map(T::of).collect())
}

/// Per-query epipolar distances of the kept queries.
#[derive(Debug, Clone)]
pub struct EpipolarLoss {
    /// `[kept.len()]` distances.
    pub dist: Var,
    /// Query indices with a usable epipolar line.
    pub kept: Vec<usize>,
    /// Number of queries dropped for a degenerate line.
    pub excluded: usize,
}

/// Distance from each prediction (`[n, 2]`, second-image px) to the epipolar line
/// `F · query`. Queries whose line has no direction are dropped and counted.
pub fn loss_epipolar<T: Real>(tape: &mut Tape<T>, pred: Var, queries: &[Point], f: &FundamentalMatrix) -> Result<EpipolarLoss> {
    if tape.shape(pred) != [queries.len(), 2] {
        return Err(Error::ShapeMismatch {
            op: "loss_epipolar",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![queries.len(), 2],
        });
    }
    let mut kept = Vec::new();
    let mut coef = Vec::new();
    for (k, q) in queries.iter().enumerate() {
        let l = f.line(*q);
        let norm = (l.x * l.x + l.y * l.y).sqrt();
        if norm < 1e-12 {
            continue;
        }
        kept.push(k);
        coef.push((l.x / norm, l.y / norm, l.z / norm));
    }
    let excluded = queries.len() - kept.len();
    if kept.is_empty() {
        let dist = tape.constant(Tensor::zeros(&[0]));
        return Ok(EpipolarLoss { dist, kept, excluded });
    }
    let sel = tape.gather(pred, 0, &kept)?;
    let (x, y) = columns(tape, sel)?;
    let a = tape.constant(vector(coef.iter().map(|c| c.0)));
    let b = tape.constant(vector(coef.iter().map(|c| c.1)));
    let c = tape.constant(vector(coef.iter().map(|c| c.2)));
    let ax = tape.mul(x, a)?;
    let by = tape.mul(y, b)?;
    let s = tape.add(ax, by)?;
    let s = tape.add(s, c)?;
    let dist = tape.abs(s)?;
    Ok(EpipolarLoss { dist, kept, excluded })
}

/// Euclidean distance between `[n, 2]` points and fixed targets.
pub fn point_distance<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[Point]) -> Result<Var> {
    if tape.shape(pred) != [targets.len(), 2] {
        return Err(Error::ShapeMismatch {
            op: "point_distance",
            lhs: tape.shape(pred).to_vec(),
            rhs: vec![targets.len(), 2],
        });
    }
    let (x, y) = columns(tape, pred)?;
    let tx = tape.constant(vector(targets.iter().map(|p| p.x)));
    let ty = tape.constant(vector(targets.iter().map(|p| p.y)));
    let dx = tape.sub(x, tx)?;
    let dy = tape.sub(y, ty)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let s = tape.add(dx2, dy2)?;
    let s = tape.add_scalar(s, DIST_EPS)?;
    tape.sqrt(s)
}

/// Fine maps of both images, `[rows·cols, c]` each.
#[derive(Debug, Clone, Copy)]
pub struct FinePair {
    pub a: Var,
    pub b: Var,
    pub a_hw: (usize, usize),
    pub b_hw: (usize, usize),
}

/// `‖h₂₁(h₁₂(i)) − i‖` in grid units: the backward expectation field is evaluated
/// at the four grid neighbours of each forward prediction (`fwd`, `[n, 2]` in
/// b-grid coordinates) and bilinearly interpolated.
pub fn loss_cycle<T: Real>(tape: &mut Tape<T>, maps: &FinePair, queries: &[usize], fwd: Var) -> Result<Var> {
    let n = queries.len();
    if tape.shape(fwd) != [n, 2] {
        return Err(Error::ShapeMismatch {
            op: "loss_cycle",
            lhs: tape.shape(fwd).to_vec(),
            rhs: vec![n, 2],
        });
    }
    let (rows, cols) = maps.b_hw;
    if rows < 2 || cols < 2 {
        return Err(Error::invalid("cycle loss needs a fine map of at least 2x2"));
    }
    let fv = tape.value(fwd).clone();
    let mut base = Vec::with_capacity(n);
    let mut neighbours = Vec::with_capacity(4 * n);
    for k in 0..n {
        let u = fv.data()[2 * k].f64();
        let v = fv.data()[2 * k + 1].f64();
        let u0 = (u.floor().max(0.0) as usize).min(cols - 2);
        let v0 = (v.floor().max(0.0) as usize).min(rows - 2);
        base.push((u0 as f64, v0 as f64));
        for (du, dv) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            neighbours.push((v0 + dv) * cols + u0 + du);
        }
    }
    let back = expected_match_var(tape, maps.b, maps.a, maps.a_hw, &neighbours)?;
    let (u, v) = columns(tape, fwd)?;
    let bu = tape.constant(vector(base.iter().map(|b| b.0)));
    let bv = tape.constant(vector(base.iter().map(|b| b.1)));
    let fx = tape.sub(u, bu)?;
    let fy = tape.sub(v, bv)?;
    let nfx = tape.scale(fx, -1.0)?;
    let gx = tape.add_scalar(nfx, 1.0)?;
    let nfy = tape.scale(fy, -1.0)?;
    let gy = tape.add_scalar(nfy, 1.0)?;
    let weights = [tape.mul(gx, gy)?, tape.mul(fx, gy)?, tape.mul(gx, fy)?, tape.mul(fx, fy)?];
    let mut acc: Option<Var> = None;
    for (corner, w) in weights.into_iter().enumerate() {
        let idx: Vec<usize> = (0..n).map(|k| 4 * k + corner).collect();
        let e = tape.gather(back.mean, 0, &idx)?;
        // weight each row of e by w: broadcast via [2, n] layout
        let et = tape.transpose(e, 0, 1)?;
        let we = tape.mul(et, w)?;
        acc = Some(match acc {
            None => we,
            Some(a) => tape.add(a, we)?,
        });
    }
    let h21 = tape.transpose(acc.expect("four corners"), 0, 1)?;
    let targets: Vec<Point> = queries
        .iter()
        .map(|&q| Point::new((q % maps.a_hw.1) as f64, (q / maps.a_hw.1) as f64))
        .collect();
    point_distance(tape, h21, &targets)
}

/// `Σ (1/σ²)(L_ep + λ·L_cy)` with σ² as a constant weight.
pub fn loss_fine<T: Real>(tape: &mut Tape<T>, sigma2: &[f64], l_ep: Var, l_cy: Var, lambda: f64) -> Result<Var> {
    if sigma2.is_empty() {
        return Err(Error::invalid("fine loss needs at least one query"));
    }
    let n = sigma2.len();
    if tape.shape(l_ep) != [n] || tape.shape(l_cy) != [n] {
        return Err(Error::ShapeMismatch {
            op: "loss_fine",
            lhs: tape.shape(l_ep).to_vec(),
            rhs: tape.shape(l_cy).to_vec(),
        });
    }
    if let Some(bad) = sigma2.iter().find(|s| !(**s >= crate::matching::SIGMA2_FLOOR)) {
        return Err(Error::invalid(format!("sigma2 {bad} is below the floor")));
    }
    let w = tape.constant(vector(sigma2.iter().map(|s| 1.0 / s)));
    let cy = tape.scale(l_cy, lambda)?;
    let s = tape.add(l_ep, cy)?;
    let ws = tape.mul(s, w)?;
    tape.sum(ws, None)
}

pub fn loss_total<T: Real>(tape: &mut Tape<T>, lc: Var, lf: Var, alpha: f64, beta: f64) -> Result<Var> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let a = tape.scale(lc, alpha)?;
    let b = tape.scale(lf, beta)?;
    tape.add(a, b)
}
