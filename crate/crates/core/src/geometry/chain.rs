//! Invertible geometric transform chains (mirror, rotate, crop, scale).
//!
//! Pixel centers sit at integer coordinates, origin top-left, x right, y down.
//! An image of extent `w × h` covers `[-0.5, w-0.5) × [-0.5, h-0.5)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;

use super::Point;
use crate::error::{Error, Result};
use crate::image::{clamp_u8, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformStep {
    /// `x ↦ w-1-x`
    MirrorH,
    /// `y ↦ h-1-y`
    MirrorV,
    /// `k` clockwise quarter turns: `(x, y) ↦ (h-1-y, x)` per turn.
    Rot90(u8),
    /// Rotation by the given degrees about the image center; extents unchanged.
    Rotate(f64),
    Crop { x0: usize, y0: usize, w: usize, h: usize },
    /// Resample by `s`; new extents are `round(w·s) × round(h·s)`.
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mapped {
    Inside(Point),
    OutOfFrame,
}

impl Mapped {
    pub fn point(self) -> Option<Point> {
        match self {
            Mapped::Inside(p) => Some(p),
            Mapped::OutOfFrame => None,
        }
    }
}

pub(crate) fn in_frame(p: Point, w: usize, h: usize) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x < w as f64 - 0.5 && p.y < h as f64 - 0.5
}

impl TransformStep {
    /// Extents after applying this step to an image of extent `(w, h)`.
    pub fn output_extent(&self, w: usize, h: usize) -> (usize, usize) {
        match *self {
            TransformStep::MirrorH | TransformStep::MirrorV | TransformStep::Rotate(_) => (w, h),
            TransformStep::Rot90(k) => {
                if k % 2 == 1 {
                    (h, w)
                } else {
                    (w, h)
                }
            }
            TransformStep::Crop { w: cw, h: ch, .. } => (cw, ch),
            TransformStep::Scale(s) => (scaled(w, s), scaled(h, s)),
        }
    }

    /// Affine matrix of this step for an input of extent `(w, h)`.
    pub fn matrix(&self, w: usize, h: usize) -> Matrix3<f64> {
        let (wf, hf) = (w as f64, h as f64);
        match *self {
            TransformStep::MirrorH => Matrix3::new(-1.0, 0.0, wf - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
            TransformStep::MirrorV => Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, hf - 1.0, 0.0, 0.0, 1.0),
            TransformStep::Rot90(k) => {
                let mut m = Matrix3::identity();
                let (mut cw, mut ch) = (w, h);
                for _ in 0..k % 4 {
                    let q = Matrix3::new(0.0, -1.0, ch as f64 - 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
                    m = q * m;
                    std::mem::swap(&mut cw, &mut ch);
                }
                m
            }
            TransformStep::Rotate(deg) => {
                let (s, c) = deg.to_radians().sin_cos();
                let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
                Matrix3::new(c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy, 0.0, 0.0, 1.0)
            }
            TransformStep::Crop { x0, y0, .. } => {
                Matrix3::new(1.0, 0.0, -(x0 as f64), 0.0, 1.0, -(y0 as f64), 0.0, 0.0, 1.0)
            }
            TransformStep::Scale(s) => {
                let sx = scaled(w, s) as f64 / wf;
                let sy = scaled(h, s) as f64 / hf;
                Matrix3::new(sx, 0.0, 0.5 * sx - 0.5, 0.0, sy, 0.5 * sy - 0.5, 0.0, 0.0, 1.0)
            }
        }
    }

    fn map_forward(&self, p: Point, w: usize, h: usize) -> Point {
        let (wf, hf) = (w as f64, h as f64);
        match *self {
            TransformStep::MirrorH => Point::new(wf - 1.0 - p.x, p.y),
            TransformStep::MirrorV => Point::new(p.x, hf - 1.0 - p.y),
            TransformStep::Rot90(k) => {
                let (mut q, mut ch) = (p, hf);
                let mut cw = wf;
                for _ in 0..k % 4 {
                    q = Point::new(ch - 1.0 - q.y, q.x);
                    std::mem::swap(&mut cw, &mut ch);
                }
                q
            }
            TransformStep::Rotate(deg) => {
                let (s, c) = deg.to_radians().sin_cos();
                let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
                let (dx, dy) = (p.x - cx, p.y - cy);
                Point::new(cx + c * dx - s * dy, cy + s * dx + c * dy)
            }
            TransformStep::Crop { x0, y0, .. } => Point::new(p.x - x0 as f64, p.y - y0 as f64),
            TransformStep::Scale(s) => {
                let sx = scaled(w, s) as f64 / wf;
                let sy = scaled(h, s) as f64 / hf;
                Point::new((p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5)
            }
        }
    }

    /// Inverse map from this step's output frame back to its input frame of extent `(w, h)`.
    fn map_inverse(&self, q: Point, w: usize, h: usize) -> Point {
        let (wf, hf) = (w as f64, h as f64);
        match *self {
            TransformStep::MirrorH | TransformStep::MirrorV => self.map_forward(q, w, h),
            TransformStep::Rot90(k) => {
                // Undo quarter turns in reverse order; extents alternate.
                let k = (k % 4) as usize;
                let mut exts = Vec::with_capacity(k);
                let (mut cw, mut ch) = (wf, hf);
                for _ in 0..k {
                    exts.push((cw, ch));
                    std::mem::swap(&mut cw, &mut ch);
                }
                let mut p = q;
                for &(_, ch) in exts.iter().rev() {
                    p = Point::new(p.y, ch - 1.0 - p.x);
                }
                p
            }
            TransformStep::Rotate(deg) => TransformStep::Rotate(-deg).map_forward(q, w, h),
            TransformStep::Crop { x0, y0, .. } => Point::new(q.x + x0 as f64, q.y + y0 as f64),
            TransformStep::Scale(s) => {
                let sx = scaled(w, s) as f64 / wf;
                let sy = scaled(h, s) as f64 / hf;
                Point::new((q.x + 0.5) / sx - 0.5, (q.y + 0.5) / sy - 0.5)
            }
        }
    }

    fn is_exact(&self) -> bool {
        !matches!(self, TransformStep::Rotate(_) | TransformStep::Scale(_))
    }
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

impl fmt::Display for TransformStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformStep::MirrorH => write!(f, "mirror-h"),
            TransformStep::MirrorV => write!(f, "mirror-v"),
            TransformStep::Rot90(k) => write!(f, "rot90 {k}"),
            TransformStep::Rotate(d) => write!(f, "rotate {d:?}"),
            TransformStep::Crop { x0, y0, w, h } => write!(f, "crop {x0} {y0} {w} {h}"),
            TransformStep::Scale(s) => write!(f, "scale {s:?}"),
        }
    }
}

impl FromStr for TransformStep {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| Error::format("empty transform step"))?;
        let args: Vec<&str> = parts.collect();
        let float = |i: usize| -> Result<f64> {
            args.get(i)
                .ok_or_else(|| Error::format(format!("`{name}` is missing argument {i}")))?
                .parse::<f64>()
                .map_err(|e| Error::format(format!("`{line}`: {e}")))
        };
        let int = |i: usize| -> Result<usize> {
            args.get(i)
                .ok_or_else(|| Error::format(format!("`{name}` is missing argument {i}")))?
                .parse::<usize>()
                .map_err(|e| Error::format(format!("`{line}`: {e}")))
        };
        let (step, arity) = match name {
            "mirror-h" => (TransformStep::MirrorH, 0),
            "mirror-v" => (TransformStep::MirrorV, 0),
            "rot90" => (TransformStep::Rot90((int(0)? % 4) as u8), 1),
            "rotate" => (TransformStep::Rotate(float(0)?), 1),
            "crop" => (
                TransformStep::Crop {
                    x0: int(0)?,
                    y0: int(1)?,
                    w: int(2)?,
                    h: int(3)?,
                },
                4,
            ),
            "scale" => {
                let s = float(0)?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::format(format!("scale must be positive, got {s}")));
                }
                (TransformStep::Scale(s), 1)
            }
            other => return Err(Error::format(format!("unknown transform step `{other}`"))),
        };
        if args.len() != arity {
            return Err(Error::format(format!("`{line}`: expected {arity} arguments")));
        }
        Ok(step)
    }
}

/// Ordered transform steps applied to a source image of known extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformChain {
    src_w: usize,
    src_h: usize,
    steps: Vec<TransformStep>,
}

impl TransformChain {
    pub fn new(src_w: usize, src_h: usize) -> Self {
        TransformChain {
            src_w,
            src_h,
            steps: Vec::new(),
        }
    }

    pub fn with_steps(src_w: usize, src_h: usize, steps: Vec<TransformStep>) -> Result<Self> {
        let mut c = Self::new(src_w, src_h);
        for s in steps {
            c.push(s)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, step: TransformStep) -> Result<()> {
        let (w, h) = self.output_extent();
        if let TransformStep::Crop { x0, y0, w: cw, h: ch } = step {
            if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h {
                return Err(Error::invalid(format!(
                    "crop {x0} {y0} {cw} {ch} exceeds the {w}x{h} frame"
                )));
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    pub fn source_extent(&self) -> (usize, usize) {
        (self.src_w, self.src_h)
    }

    /// Extents of every intermediate frame, starting with the source.
    fn extents(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let (mut w, mut h) = (self.src_w, self.src_h);
        out.push((w, h));
        for s in &self.steps {
            (w, h) = s.output_extent(w, h);
            out.push((w, h));
        }
        out
    }

    pub fn output_extent(&self) -> (usize, usize) {
        *self.extents().last().expect("non-empty")
    }

    /// Maps a point through the chain. Any intermediate frame exit yields `OutOfFrame`.
    pub fn map(&self, p: Point, direction: Direction) -> Mapped {
        let ext = self.extents();
        match direction {
            Direction::Forward => {
                let mut q = p;
                if !in_frame(q, ext[0].0, ext[0].1) {
                    return Mapped::OutOfFrame;
                }
                for (i, s) in self.steps.iter().enumerate() {
                    q = s.map_forward(q, ext[i].0, ext[i].1);
                    if !in_frame(q, ext[i + 1].0, ext[i + 1].1) {
                        return Mapped::OutOfFrame;
                    }
                }
                Mapped::Inside(q)
            }
            Direction::Inverse => {
                let n = self.steps.len();
                let mut q = p;
                if !in_frame(q, ext[n].0, ext[n].1) {
                    return Mapped::OutOfFrame;
                }
                for i in (0..n).rev() {
                    q = self.steps[i].map_inverse(q, ext[i].0, ext[i].1);
                    if !in_frame(q, ext[i].0, ext[i].1) {
                        return Mapped::OutOfFrame;
                    }
                }
                Mapped::Inside(q)
            }
        }
    }

    /// Forward map as a single affine matrix (ignores frame limits).
    pub fn matrix(&self) -> Matrix3<f64> {
        let ext = self.extents();
        self.steps
            .iter()
            .enumerate()
            .fold(Matrix3::identity(), |m, (i, s)| s.matrix(ext[i].0, ext[i].1) * m)
    }

    /// Renders the chain's output image. Exact steps copy pixels; continuous
    /// steps resample bilinearly; uncovered pixels are zero.
    pub fn apply_image(&self, img: &GrayImage) -> Result<GrayImage> {
        if (img.width(), img.height()) != (self.src_w, self.src_h) {
            return Err(Error::invalid(format!(
                "chain expects a {}x{} source, got {}x{}",
                self.src_w,
                self.src_h,
                img.width(),
                img.height()
            )));
        }
        let ext = self.extents();
        let mut cur = img.clone();
        for (i, s) in self.steps.iter().enumerate() {
            let (iw, ih) = ext[i];
            let (ow, oh) = ext[i + 1];
            let mut next = GrayImage::new(ow, oh);
            for y in 0..oh {
                for x in 0..ow {
                    let src = s.map_inverse(Point::new(x as f64, y as f64), iw, ih);
                    let v = if s.is_exact() {
                        let (sx, sy) = (src.x.round(), src.y.round());
                        if sx >= 0.0 && sy >= 0.0 && (sx as usize) < iw && (sy as usize) < ih {
                            cur.get(sx as usize, sy as usize)
                        } else {
                            0
                        }
                    } else {
                        cur.sample_bilinear(src.x, src.y).map(clamp_u8).unwrap_or(0)
                    };
                    next.set(x, y, v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// One `source w h` header line followed by one step per line.
    pub fn serialize(&self) -> String {
        let mut s = format!("source {} {}\n", self.src_w, self.src_h);
        for step in &self.steps {
            s.push_str(&step.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty transform chain"))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "source" {
            return Err(Error::format(format!("bad chain header `{header}`")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::format(format!("`{header}`: {e}")));
        let mut chain = TransformChain::new(dim(parts[1])?, dim(parts[2])?);
        for l in lines {
            chain.push(l.parse()?)?;
        }
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mirror_example() {
        let c = TransformChain::with_steps(32, 32, vec![TransformStep::MirrorH]).unwrap();
        assert_eq!(c.map(Point::new(0.0, 5.0), Direction::Forward), Mapped::Inside(Point::new(31.0, 5.0)));
    }

    #[test]
    fn rot90_example() {
        let c = TransformChain::with_steps(32, 32, vec![TransformStep::Rot90(1)]).unwrap();
        assert_eq!(c.map(Point::new(0.0, 0.0), Direction::Forward), Mapped::Inside(Point::new(31.0, 0.0)));
    }

    #[test]
    fn empty_chain_is_identity() {
        let c = TransformChain::new(16, 16);
        let p = Point::new(3.25, 9.5);
        assert_eq!(c.map(p, Direction::Forward), Mapped::Inside(p));
        assert_eq!(c.map(p, Direction::Inverse), Mapped::Inside(p));
    }

    #[test]
    fn crop_reports_out_of_frame() {
        let c = TransformChain::with_steps(32, 32, vec![TransformStep::Crop { x0: 8, y0: 8, w: 16, h: 16 }]).unwrap();
        assert_eq!(c.map(Point::new(2.0, 10.0), Direction::Forward), Mapped::OutOfFrame);
        assert_eq!(c.map(Point::new(10.0, 10.0), Direction::Forward), Mapped::Inside(Point::new(2.0, 2.0)));
    }

    #[test]
    fn oversized_crop_rejected() {
        assert!(TransformChain::with_steps(32, 32, vec![TransformStep::Crop { x0: 20, y0: 0, w: 16, h: 16 }]).is_err());
    }

    #[test]
    fn image_matches_point_map_for_exact_steps() {
        let img = GrayImage::from_fn(12, 8, |x, y| (x * 13 + y * 29) as u8);
        let c = TransformChain::with_steps(
            12,
            8,
            vec![
                TransformStep::Rot90(1),
                TransformStep::MirrorH,
                TransformStep::Crop { x0: 1, y0: 2, w: 6, h: 7 },
                TransformStep::MirrorV,
            ],
        )
        .unwrap();
        let out = c.apply_image(&img).unwrap();
        assert_eq!((out.width(), out.height()), (6, 7));
        for y in 0..8 {
            for x in 0..12 {
                if let Mapped::Inside(q) = c.map(Point::new(x as f64, y as f64), Direction::Forward) {
                    assert_eq!(out.get(q.x.round() as usize, q.y.round() as usize), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn matrix_agrees_with_map() {
        let c = TransformChain::with_steps(
            40,
            30,
            vec![
                TransformStep::Rot90(3),
                TransformStep::Rotate(12.5),
                TransformStep::Scale(1.5),
                TransformStep::Crop { x0: 3, y0: 5, w: 20, h: 20 },
            ],
        )
        .unwrap();
        let m = c.matrix();
        let mut inside = 0;
        for y in 0..30 {
            for x in 0..40 {
                let p = Point::new(x as f64, y as f64);
                if let Mapped::Inside(q) = c.map(p, Direction::Forward) {
                    let v = m * nalgebra::Vector3::new(p.x, p.y, 1.0);
                    assert!((v.x - q.x).abs() < 1e-9 && (v.y - q.y).abs() < 1e-9);
                    inside += 1;
                }
            }
        }
        assert!(inside > 50);
    }

    fn arb_step() -> impl Strategy<Value = TransformStep> {
        prop_oneof![
            Just(TransformStep::MirrorH),
            Just(TransformStep::MirrorV),
            (0u8..4).prop_map(TransformStep::Rot90),
            (-45.0f64..45.0).prop_map(TransformStep::Rotate),
            (0.5f64..2.0).prop_map(TransformStep::Scale),
            (0usize..8, 0usize..8).prop_map(|(x0, y0)| TransformStep::Crop { x0, y0, w: 16, h: 16 }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn forward_inverse_round_trip(steps in prop::collection::vec(arb_step(), 0..5), px in 0.0f64..1.0, py in 0.0f64..1.0) {
            let mut chain = TransformChain::new(48, 40);
            for s in steps {
                let _ = chain.push(s);
            }
            let p = Point::new(px * 47.0, py * 39.0);
            if let Mapped::Inside(q) = chain.map(p, Direction::Forward) {
                let back = chain.map(q, Direction::Inverse);
                let back = back.point();
                prop_assert!(back.is_some());
                prop_assert!((back.unwrap() - p).norm() < 1e-9);
            }
        }

        #[test]
        fn serialization_is_lossless(steps in prop::collection::vec(arb_step(), 0..6)) {
            let mut chain = TransformChain::new(48, 40);
            for s in steps {
                let _ = chain.push(s);
            }
            let back = TransformChain::parse(&chain.serialize()).unwrap();
            prop_assert_eq!(back, chain);
        }
    }
}
