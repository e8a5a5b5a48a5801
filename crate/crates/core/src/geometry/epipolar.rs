use nalgebra::{Matrix3, Vector3};

use super::Point;
use crate::error::{Error, Result};

/// Rank-2 fundamental matrix with `x₂ᵀ F x₁ = 0` for corresponding points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

impl FundamentalMatrix {
    /// Wraps a matrix, truncating its smallest singular value and scaling to unit
    /// Frobenius norm.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) || m.norm() < 1e-15 {
            return Err(Error::Degenerate("fundamental matrix is zero".into()));
        }
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let mut s = svd.singular_values;
        let (imin, _) = s.argmin();
        let smax = s.max();
        s[imin] = 0.0;
        if s.max() == 0.0 || s.sum() - smax < 1e-12 * smax {
            return Err(Error::Degenerate("fundamental matrix has rank < 2".into()));
        }
        let f = u * Matrix3::from_diagonal(&s) * vt;
        Ok(FundamentalMatrix(f / f.norm()))
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::format(format!("fundamental matrix needs 9 values, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Epipolar line `(a, b, c)` in the second image for `p1`.
    pub fn line(&self, p1: Point) -> Vector3<f64> {
        self.0 * Vector3::new(p1.x, p1.y, 1.0)
    }

    pub fn residual(&self, p1: Point, p2: Point) -> f64 {
        Vector3::new(p2.x, p2.y, 1.0).dot(&self.line(p1))
    }

    pub fn singular_ratio(&self) -> f64 {
        let s = self.0.singular_values();
        s.min() / s.max()
    }
}

/// `F = K₂⁻ᵀ [t]ₓ R K₁⁻¹` for a second camera with `X₂ = R X₁ + t`.
pub fn fundamental_from_poses(
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<FundamentalMatrix> {
    if t.norm() <= 1e-12 {
        return Err(Error::Degenerate("zero baseline".into()));
    }
    if (r.transpose() * r - Matrix3::identity()).norm() >= 1e-9 {
        return Err(Error::Degenerate("rotation is not orthonormal".into()));
    }
    let k1i = k1.try_inverse().ok_or_else(|| Error::Degenerate("singular K1".into()))?;
    let k2i = k2.try_inverse().ok_or_else(|| Error::Degenerate("singular K2".into()))?;
    FundamentalMatrix::new(k2i.transpose() * skew(t) * r * k1i)
}

pub fn epipolar_line_distance(line: &Vector3<f64>, p: Point) -> Result<f64> {
    if line.x.abs() < 1e-12 && line.y.abs() < 1e-12 {
        return Err(Error::Degenerate("epipolar line has no direction".into()));
    }
    Ok((line.x * p.x + line.y * p.y + line.z).abs() / (line.x * line.x + line.y * line.y).sqrt())
}

/// Perpendicular distance from `p2` to the epipolar line of `p1`.
pub fn epipolar_distance(f: &FundamentalMatrix, p1: Point, p2: Point) -> Result<f64> {
    epipolar_line_distance(&f.line(p1), p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn project(k: &Matrix3<f64>, x: &Vector3<f64>) -> Point {
        let v = k * x;
        Point::new(v.x / v.z, v.y / v.z)
    }

    #[test]
    fn pure_x_translation() {
        let i = Matrix3::identity();
        let f = fundamental_from_poses(&i, &i, &i, &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let expect = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0) / 2f64.sqrt();
        let sign = if f.matrix()[(1, 2)] < 0.0 { 1.0 } else { -1.0 };
        assert!((f.matrix() * sign - expect).norm() < 1e-12);
        // horizontal epipolar lines
        let l = f.line(Point::new(0.3, 0.7));
        assert!(l.x.abs() < 1e-12);
    }

    #[test]
    fn random_poses_satisfy_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let fx = rng.random_range(50.0..200.0);
            let k1 = Matrix3::new(fx, 0.0, 32.0, 0.0, fx, 32.0, 0.0, 0.0, 1.0);
            let k2 = Matrix3::new(fx * 1.1, 0.0, 30.0, 0.0, fx * 1.1, 34.0, 0.0, 0.0, 1.0);
            let r = Rotation3::from_euler_angles(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            )
            .into_inner();
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));
            let f = fundamental_from_poses(&k1, &k2, &r, &t).unwrap();
            assert!(f.singular_ratio() < 1e-6);
            for _ in 0..20 {
                let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(5.0..10.0));
                let p1 = project(&k1, &x);
                let p2 = project(&k2, &(r * x + t));
                assert!(f.residual(p1, p2).abs() < 1e-6);
                assert!(epipolar_distance(&f, p1, p2).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_inputs() {
        let i = Matrix3::identity();
        assert!(fundamental_from_poses(&i, &i, &i, &Vector3::zeros()).is_err());
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(fundamental_from_poses(&i, &i, &bad, &Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn point_line_distance() {
        let f = FundamentalMatrix::new(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)).unwrap();
        // line of (x, 0) is y = 0
        let d = epipolar_distance(&f, Point::new(2.0, 0.0), Point::new(5.0, 3.0)).unwrap();
        assert!((d - 3.0).abs() < 1e-12);
        let d0 = epipolar_distance(&f, Point::new(2.0, 0.0), Point::new(-4.0, 0.0)).unwrap();
        assert!(d0 < 1e-9);
    }

    #[test]
    fn degenerate_line() {
        assert!(epipolar_line_distance(&Vector3::new(0.0, 0.0, 1.0), Point::origin()).is_err());
    }
}
