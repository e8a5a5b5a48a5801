use nalgebra::{Matrix3, Vector3};

use super::Point;
use crate::error::{Error, Result};

/// Planar projective map, normalized so that `h33 == 1` whenever `h33 != 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let scale = m.norm();
        if !m.iter().all(|v| v.is_finite()) || scale == 0.0 || m.determinant().abs() <= 1e-12 * scale.powi(3) {
            return Err(Error::Degenerate("homography is singular".into()));
        }
        Ok(Self::normalized(m))
    }

    fn normalized(m: Matrix3<f64>) -> Self {
        Homography(if m[(2, 2)].abs() > 1e-12 { m / m[(2, 2)] } else { m })
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::format(format!("homography needs 9 values, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        let inv = self.0.try_inverse().expect("determinant checked at construction");
        Self::normalized(inv)
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Homography::new(self.0 * other.0)
    }

    pub fn apply(&self, p: Point) -> Result<Point> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < 1e-12 {
            return Err(Error::PointAtInfinity);
        }
        Ok(Point::new(v.x / v.z, v.y / v.z))
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Mean distance between where `self` and `other` send the four image corners.
    pub fn corner_error(&self, other: &Homography, width: usize, height: usize) -> f64 {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        let corners = [Point::new(0.0, 0.0), Point::new(w, 0.0), Point::new(w, h), Point::new(0.0, h)];
        let mut total = 0.0;
        for c in corners {
            match (self.apply(c), other.apply(c)) {
                (Ok(a), Ok(b)) => total += (a - b).norm(),
                _ => return f64::INFINITY,
            }
        }
        total / 4.0
    }
}
