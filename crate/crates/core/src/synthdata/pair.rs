use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use super::modality::{render_modality, Modality};
use super::scene::gen_base_scene;
use crate::error::{Error, Result};
use crate::geometry::{dlt_homography, fundamental_from_poses, FundamentalMatrix, Homography, Point};
use crate::image::{clamp_u8, GrayImage};
use crate::rng::{split_seed, stream_rng, streams};

/// Compact polynomial bump `amp·(1-ρ²)²` on the world plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amp: f64,
}

/// Height field `z = z0 + Σ bumps` seen by both cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub z0: f64,
    pub bumps: Vec<Bump>,
}

impl Surface {
    /// Height and its gradient at world `(x, y)`.
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut z, mut gx, mut gy) = (self.z0, 0.0, 0.0);
        for b in &self.bumps {
            let (dx, dy) = (x - b.cx, y - b.cy);
            let r2 = b.radius * b.radius;
            let rho2 = (dx * dx + dy * dy) / r2;
            if rho2 < 1.0 {
                let q = 1.0 - rho2;
                z += b.amp * q * q;
                let k = -4.0 * b.amp * q / r2;
                gx += k * dx;
                gy += k * dy;
            }
        }
        (z, gx, gy)
    }

    /// First intersection of `c + s·d` with the surface, by Newton iteration.
    fn intersect(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<Vector3<f64>> {
        if d.z.abs() < 1e-12 {
            return None;
        }
        let mut s = (self.z0 - c.z) / d.z;
        for _ in 0..100 {
            let p = c + d * s;
            let (z, gx, gy) = self.eval(p.x, p.y);
            let g = p.z - z;
            let dg = d.z - gx * d.x - gy * d.y;
            if dg.abs() < 1e-12 {
                return None;
            }
            let step = g / dg;
            s -= step;
            if step.abs() < 1e-15 * s.abs().max(1.0) {
                break;
            }
        }
        let p = c + d * s;
        (s > 0.0 && (p.z - self.eval(p.x, p.y).0).abs() < 1e-9).then_some(p)
    }
}

/// Calibrated two-camera view of a textured relief; camera A sits at the
/// origin and `X_b = R X_a + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoView {
    pub k1: Matrix3<f64>,
    pub k2: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub f: FundamentalMatrix,
    pub surface: Surface,
}

impl TwoView {
    pub fn new(k1: Matrix3<f64>, k2: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, surface: Surface) -> Result<Self> {
        let f = fundamental_from_poses(&k1, &k2, &r, &t)?;
        Ok(TwoView { k1, k2, r, t, f, surface })
    }

    fn back_project(k: &Matrix3<f64>, p: Point) -> Vector3<f64> {
        k.try_inverse().expect("intrinsics checked") * Vector3::new(p.x, p.y, 1.0)
    }

    fn project(k: &Matrix3<f64>, x: &Vector3<f64>) -> Option<Point> {
        (x.z > 1e-9).then(|| {
            let v = k * x;
            Point::new(v.x / v.z, v.y / v.z)
        })
    }

    /// Surface point seen at pixel `p` of view A, in A's frame.
    pub fn world_point_a(&self, p: Point) -> Option<Vector3<f64>> {
        self.surface.intersect(&Vector3::zeros(), &Self::back_project(&self.k1, p))
    }

    /// Depth (camera-A z) of the surface seen at `p`.
    pub fn depth_a(&self, p: Point) -> Option<f64> {
        self.world_point_a(p).map(|x| x.z)
    }

    pub fn map_a_to_b(&self, p: Point) -> Option<Point> {
        let x = self.world_point_a(p)?;
        Self::project(&self.k2, &(self.r * x + self.t))
    }

    pub fn map_b_to_a(&self, q: Point) -> Option<Point> {
        let rt = self.r.transpose();
        let center = -(rt * self.t);
        let dir = rt * Self::back_project(&self.k2, q);
        let x = self.surface.intersect(&center, &dir)?;
        Self::project(&self.k1, &x)
    }
}

/// Ground-truth relation between the two images of a pair.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneGeometry {
    Registered,
    Homography(Homography),
    TwoView(Box<TwoView>),
}

impl SceneGeometry {
    /// Point in image B corresponding to `p` in image A (frame limits not checked).
    pub fn map(&self, p: Point) -> Option<Point> {
        match self {
            SceneGeometry::Registered => Some(p),
            SceneGeometry::Homography(h) => h.apply(p).ok(),
            SceneGeometry::TwoView(tv) => tv.map_a_to_b(p),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            SceneGeometry::Registered => "REG",
            SceneGeometry::Homography(_) => "H",
            SceneGeometry::TwoView(_) => "F",
        }
    }

    pub fn fundamental(&self) -> Option<&FundamentalMatrix> {
        match self {
            SceneGeometry::TwoView(tv) => Some(&tv.f),
            _ => None,
        }
    }

    pub fn homography(&self) -> Option<&Homography> {
        match self {
            SceneGeometry::Homography(h) => Some(h),
            _ => None,
        }
    }

    /// Geometry-file text: `REG`, `H` + 9 values, or `F` + 9 values plus a camera block.
    pub fn serialize(&self) -> String {
        fn row(out: &mut String, label: &str, v: impl IntoIterator<Item = f64>) {
            out.push_str(label);
            for x in v {
                write!(out, " {x:?}").expect("string write");
            }
            out.push('\n');
        }
        fn mat(m: &Matrix3<f64>) -> Vec<f64> {
            (0..9).map(|i| m[(i / 3, i % 3)]).collect()
        }
        let mut out = String::new();
        match self {
            SceneGeometry::Registered => out.push_str("REG\n"),
            SceneGeometry::Homography(h) => row(&mut out, "H", h.row_major()),
            SceneGeometry::TwoView(tv) => {
                row(&mut out, "F", tv.f.row_major());
                row(&mut out, "K1", mat(&tv.k1));
                row(&mut out, "K2", mat(&tv.k2));
                row(&mut out, "R", mat(&tv.r));
                row(&mut out, "t", tv.t.iter().copied());
                row(&mut out, "z0", [tv.surface.z0]);
                for b in &tv.surface.bumps {
                    row(&mut out, "bump", [b.cx, b.cy, b.radius, b.amp]);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let first = lines.next().ok_or_else(|| Error::format("empty geometry file"))?;
        let fields = |line: &str, label: &str, n: usize| -> Result<Vec<f64>> {
            let mut it = line.split_whitespace();
            if it.next() != Some(label) {
                return Err(Error::format(format!("expected `{label}` line, got `{line}`")));
            }
            let v: Vec<f64> = it
                .map(f64::from_str)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("`{line}`: {e}")))?;
            if v.len() != n {
                return Err(Error::format(format!("`{label}` needs {n} values, got {}", v.len())));
            }
            Ok(v)
        };
        match first.split_whitespace().next() {
            Some("REG") => Ok(SceneGeometry::Registered),
            Some("H") => Ok(SceneGeometry::Homography(Homography::from_row_slice(&fields(first, "H", 9)?)?)),
            Some("F") => {
                fields(first, "F", 9)?;
                let mut next = |label: &str, n: usize| -> Result<Vec<f64>> {
                    let l = lines.next().ok_or_else(|| Error::format(format!("missing `{label}` line")))?;
                    fields(l, label, n)
                };
                let k1 = Matrix3::from_row_slice(&next("K1", 9)?);
                let k2 = Matrix3::from_row_slice(&next("K2", 9)?);
                let r = Matrix3::from_row_slice(&next("R", 9)?);
                let t = Vector3::from_row_slice(&next("t", 3)?);
                let z0 = next("z0", 1)?[0];
                let mut bumps = Vec::new();
                for l in lines {
                    let v = fields(l, "bump", 4)?;
                    bumps.push(Bump {
                        cx: v[0],
                        cy: v[1],
                        radius: v[2],
                        amp: v[3],
                    });
                }
                Ok(SceneGeometry::TwoView(Box::new(TwoView::new(k1, k2, r, t, Surface { z0, bumps })?)))
            }
            _ => Err(Error::format(format!("unknown geometry type in `{first}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    SameModal,
    CrossModal,
    TwoView,
}

impl FromStr for PairMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-modal" => Ok(PairMode::SameModal),
            "cross-modal" => Ok(PairMode::CrossModal),
            "two-view" => Ok(PairMode::TwoView),
            other => Err(Error::invalid(format!("unknown pair mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSpec {
    pub mode: PairMode,
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub size: usize,
    /// When set (registered modes only), image B is warped by a random
    /// homography whose corner displacements are bounded by this many pixels.
    pub warp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub image_a: GrayImage,
    pub image_b: GrayImage,
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub geometry: SceneGeometry,
    pub seed: u64,
}

impl ScenePair {
    pub fn is_cross_modal(&self) -> bool {
        self.modality_a != self.modality_b
    }
}

fn warp_image(src: &GrayImage, w: usize, h: usize, inverse_map: impl Fn(Point) -> Option<Point>) -> GrayImage {
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = inverse_map(Point::new(x as f64, y as f64))
                .and_then(|p| src.sample_bilinear(p.x, p.y))
                .map(clamp_u8)
                .unwrap_or(0);
            out.set(x, y, v);
        }
    }
    out
}

fn random_homography(rng: &mut impl Rng, size: usize, max_shift: f64) -> Result<Homography> {
    let s = size as f64 - 1.0;
    let corners = [Point::new(0.0, 0.0), Point::new(s, 0.0), Point::new(s, s), Point::new(0.0, s)];
    let moved: Vec<Point> = corners
        .iter()
        .map(|c| Point::new(c.x + rng.random_range(-max_shift..=max_shift), c.y + rng.random_range(-max_shift..=max_shift)))
        .collect();
    dlt_homography(&corners, &moved)
}

fn random_two_view(rng: &mut impl Rng, size: usize) -> Result<TwoView> {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let k1 = Matrix3::new(s, 0.0, c, 0.0, s, c, 0.0, 0.0, 1.0);
    let f2 = s * rng.random_range(0.95..1.05);
    let k2 = Matrix3::new(f2, 0.0, c, 0.0, f2, c, 0.0, 0.0, 1.0);
    let deg = |r: &mut dyn FnMut() -> f64| r().to_radians();
    let mut u = || rng.random_range(-3.0..3.0);
    let r = Rotation3::from_euler_angles(deg(&mut u), deg(&mut u), deg(&mut u)).into_inner();
    let center = Vector3::new(
        rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.1..0.1),
    );
    let t = -(r * center);
    let z0 = 4.0;
    let bumps = (0..rng.random_range(3..7))
        .map(|_| Bump {
            cx: rng.random_range(-1.5..1.5),
            cy: rng.random_range(-1.5..1.5),
            radius: rng.random_range(0.8..1.4),
            amp: rng.random_range(-0.2..0.2),
        })
        .collect();
    TwoView::new(k1, k2, r, t, Surface { z0, bumps })
}

pub fn gen_pair(seed: u64, spec: &PairSpec) -> Result<ScenePair> {
    let (ma, mb) = (spec.modality_a, spec.modality_b);
    match spec.mode {
        PairMode::SameModal if ma != mb => {
            return Err(Error::invalid(format!("same-modal pair needs one modality, got {ma}/{mb}")))
        }
        PairMode::CrossModal if ma == mb => {
            return Err(Error::invalid(format!("cross-modal pair needs two distinct modalities, got {ma}/{mb}")))
        }
        PairMode::TwoView if spec.warp.is_some() => {
            return Err(Error::invalid("two-view pairs cannot carry an extra homography warp"))
        }
        _ => {}
    }
    let base = gen_base_scene(seed, spec.size)?;
    let image_a = render_modality(&base, ma, split_seed(seed, streams::RENDER_A));
    let texture_b = if spec.mode == PairMode::SameModal {
        image_a.clone()
    } else {
        render_modality(&base, mb, split_seed(seed, streams::RENDER_B))
    };
    let mut rng = stream_rng(seed, streams::GEOMETRY);
    let n = spec.size;
    let (image_b, geometry) = match (spec.mode, spec.warp) {
        (PairMode::TwoView, _) => {
            let tv = random_two_view(&mut rng, n)?;
            let img = warp_image(&texture_b, n, n, |q| tv.map_b_to_a(q));
            (img, SceneGeometry::TwoView(Box::new(tv)))
        }
        (_, Some(shift)) => {
            let h = random_homography(&mut rng, n, shift)?;
            let hi = h.inverse();
            let img = warp_image(&texture_b, n, n, |q| hi.apply(q).ok());
            (img, SceneGeometry::Homography(h))
        }
        (_, None) => (texture_b, SceneGeometry::Registered),
    };
    Ok(ScenePair {
        image_a,
        image_b,
        modality_a: ma,
        modality_b: mb,
        geometry,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::epipolar_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(mode: PairMode, a: Modality, b: Modality) -> PairSpec {
        PairSpec {
            mode,
            modality_a: a,
            modality_b: b,
            size: 64,
            warp: None,
        }
    }

    #[test]
    fn same_modal_is_registered_copy() {
        let p = gen_pair(3, &spec(PairMode::SameModal, Modality::Opt, Modality::Opt)).unwrap();
        assert_eq!(p.image_a, p.image_b);
        assert_eq!(p.geometry, SceneGeometry::Registered);
    }

    #[test]
    fn cross_modal_shares_geometry() {
        let p = gen_pair(3, &spec(PairMode::CrossModal, Modality::Opt, Modality::Sar)).unwrap();
        assert_ne!(p.image_a, p.image_b);
        assert_eq!(p.geometry.map(Point::new(10.5, 20.25)), Some(Point::new(10.5, 20.25)));
        let c = crate::synthdata::modality::tests::orientation_correlation(&p.image_a, &p.image_b);
        assert!(c > 0.3, "{c}");
    }

    #[test]
    fn invalid_combinations() {
        assert!(gen_pair(1, &spec(PairMode::CrossModal, Modality::Opt, Modality::Opt)).is_err());
        assert!(gen_pair(1, &spec(PairMode::SameModal, Modality::Opt, Modality::Sar)).is_err());
    }

    #[test]
    fn two_view_correspondences_satisfy_epipolar_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..5 {
            let p = gen_pair(seed, &spec(PairMode::TwoView, Modality::Opt, Modality::Opt)).unwrap();
            let f = *p.geometry.fundamental().unwrap();
            let mut checked = 0;
            while checked < 500 {
                let a = Point::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
                let Some(b) = p.geometry.map(a) else { continue };
                assert!(epipolar_distance(&f, a, b).unwrap() < 1e-4);
                checked += 1;
            }
        }
    }

    #[test]
    fn two_view_maps_are_mutually_inverse() {
        let p = gen_pair(2, &spec(PairMode::TwoView, Modality::Opt, Modality::Nir)).unwrap();
        let SceneGeometry::TwoView(tv) = &p.geometry else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = Point::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
            let b = tv.map_a_to_b(a).unwrap();
            let back = tv.map_b_to_a(b).unwrap();
            assert!((back - a).norm() < 1e-4);
        }
    }

    #[test]
    fn two_view_image_matches_map() {
        // sharp texture sampled through the map agrees with the rendered view
        let p = gen_pair(6, &spec(PairMode::TwoView, Modality::Opt, Modality::Opt)).unwrap();
        let SceneGeometry::TwoView(tv) = &p.geometry else { panic!() };
        let (mut err, mut n) = (0.0, 0);
        for y in 4..60 {
            for x in 4..60 {
                let q = Point::new(x as f64, y as f64);
                if let Some(a) = tv.map_b_to_a(q).filter(|a| a.x > 1.0 && a.y > 1.0 && a.x < 62.0 && a.y < 62.0) {
                    err += (p.image_a.sample_bilinear(a.x, a.y).unwrap() - p.image_b.get(x, y) as f64).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 1000 && err / n as f64 <= 0.5, "{}", err / n as f64);
    }

    #[test]
    fn homography_pair_consistent() {
        let mut s = spec(PairMode::CrossModal, Modality::Opt, Modality::Depth);
        s.warp = Some(6.0);
        let p = gen_pair(4, &s).unwrap();
        let h = *p.geometry.homography().unwrap();
        let round = h.inverse().apply(h.apply(Point::new(30.0, 12.0)).unwrap()).unwrap();
        assert!((round - Point::new(30.0, 12.0)).norm() < 1e-9);
    }

    #[test]
    fn geometry_file_round_trip() {
        for (mode, warp) in [(PairMode::SameModal, None), (PairMode::SameModal, Some(5.0)), (PairMode::TwoView, None)] {
            let mut s = spec(mode, Modality::Uv, Modality::Uv);
            s.warp = warp;
            let p = gen_pair(9, &s).unwrap();
            let back = SceneGeometry::parse(&p.geometry.serialize()).unwrap();
            assert_eq!(back.tag(), p.geometry.tag());
            for i in 0..20 {
                let a = Point::new(3.0 * i as f64, 60.0 - 2.0 * i as f64);
                let (m0, m1) = (p.geometry.map(a).unwrap(), back.map(a).unwrap());
                assert!((m0 - m1).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_pairs() {
        let s = spec(PairMode::TwoView, Modality::Sar, Modality::Opt);
        assert_eq!(gen_pair(5, &s).unwrap(), gen_pair(5, &s).unwrap());
    }
}
