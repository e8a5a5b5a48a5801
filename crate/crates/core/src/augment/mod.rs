//! Geometric and intensity augmentation of registered pairs, and the patch-level
//! ground-truth matrix derived from the augmentation transforms.

mod gt;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{in_frame, Direction, Mapped, Point, TransformChain, TransformStep};
use crate::image::{clamp_u8, GrayImage};
use crate::rng::{split_seed, stream_rng, streams};
use crate::synthdata::{SceneGeometry, ScenePair};

pub use gt::{
    build_gt_matrix, center_near_boundary, center_to_patch, oracle_gt_matrix, patch_center, GtMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!("patch side {p} must divide the {w}x{h} crop")));
        }
        Ok(PatchGrid { h, w, p })
    }

    pub fn cols(&self) -> usize {
        self.w / self.p
    }

    pub fn rows(&self) -> usize {
        self.h / self.p
    }

    pub fn n(&self) -> usize {
        self.cols() * self.rows()
    }

    /// Index `j·(w/p) + i` of patch column `i`, row `j`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.cols() + i
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.cols(), idx / self.cols())
    }

    /// Inclusive/exclusive bounds on mask cardinality: `⌈0.2N⌉ ..= ⌊0.4N⌋`.
    pub fn mask_bounds(&self) -> (usize, usize) {
        let n = self.n();
        ((2 * n).div_ceil(10), (4 * n) / 10)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub patch: usize,
    pub mirror: bool,
    pub flip: bool,
    pub rot90: bool,
    /// Bound of the continuous rotation in degrees; 0 disables it.
    pub rotate_max: f64,
    /// Probability that a side receives a continuous rotation at all.
    pub rotate_prob: f64,
    /// Uniform noise amplitude in gray levels, at most 16.
    pub noise: u8,
    /// Zero-fill masked patches in the output images.
    pub mask_fill: bool,
    pub min_overlap: f64,
    pub max_retries: usize,
    pub eq5_plus_one: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_h: 64,
            crop_w: 64,
            patch: 8,
            mirror: true,
            flip: true,
            rot90: true,
            rotate_max: 15.0,
            rotate_prob: 0.5,
            noise: 8,
            mask_fill: true,
            min_overlap: 0.4,
            max_retries: 50,
            eq5_plus_one: true,
        }
    }
}

impl AugmentConfig {
    /// No geometric or intensity change; crops are centered and identical on both
    /// sides. Masks are still drawn but not painted.
    pub fn disabled(crop: usize, patch: usize) -> Self {
        AugmentConfig {
            crop_h: crop,
            crop_w: crop,
            patch,
            mirror: false,
            flip: false,
            rot90: false,
            rotate_max: 0.0,
            noise: 0,
            mask_fill: false,
            ..Default::default()
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.crop_h, self.crop_w, self.patch)
    }

    fn is_disabled(&self) -> bool {
        !self.mirror && !self.flip && !self.rot90 && self.rotate_max == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub image_a: GrayImage,
    pub image_b: GrayImage,
    pub chain_a: TransformChain,
    pub chain_b: TransformChain,
    /// Sorted patch indices.
    pub mask_a: Vec<usize>,
    pub mask_b: Vec<usize>,
    pub grid: PatchGrid,
    pub geometry: SceneGeometry,
    pub eq5_plus_one: bool,
    pub noise_seed: u64,
    pub mask_seed: u64,
}

impl AugmentedPair {
    /// Continuous correspondence from crop A to crop B: `chain_a⁻¹`, then the
    /// scene geometry, then `chain_b`.
    pub fn map_a_to_b(&self, p: Point) -> Mapped {
        let Some(src_a) = self.chain_a.map(p, Direction::Inverse).point() else {
            return Mapped::OutOfFrame;
        };
        let Some(src_b) = self.geometry.map(src_a) else {
            return Mapped::OutOfFrame;
        };
        let (bw, bh) = self.chain_b.source_extent();
        if !in_frame(src_b, bw, bh) {
            return Mapped::OutOfFrame;
        }
        self.chain_b.map(src_b, Direction::Forward)
    }

    /// Fraction of crop-A pixels (sampled every other pixel) visible in crop B.
    pub fn overlap(&self) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for y in (0..self.grid.h).step_by(2) {
            for x in (0..self.grid.w).step_by(2) {
                total += 1;
                if let Mapped::Inside(_) = self.map_a_to_b(Point::new(x as f64, y as f64)) {
                    hit += 1;
                }
            }
        }
        hit as f64 / total as f64
    }
}

fn random_chain(rng: &mut impl Rng, img: &GrayImage, cfg: &AugmentConfig) -> Result<TransformChain> {
    let mut chain = TransformChain::new(img.width(), img.height());
    if cfg.mirror && rng.random_bool(0.5) {
        chain.push(TransformStep::MirrorH)?;
    }
    if cfg.flip && rng.random_bool(0.5) {
        chain.push(TransformStep::MirrorV)?;
    }
    if cfg.rot90 {
        let k = rng.random_range(0..4u8);
        if k > 0 {
            chain.push(TransformStep::Rot90(k))?;
        }
    }
    if cfg.rotate_max > 0.0 && rng.random_bool(cfg.rotate_prob.clamp(0.0, 1.0)) {
        chain.push(TransformStep::Rotate(rng.random_range(-cfg.rotate_max..=cfg.rotate_max)))?;
    }
    let (w, h) = chain.output_extent();
    if w < cfg.crop_w || h < cfg.crop_h {
        return Err(Error::invalid(format!(
            "{w}x{h} image is smaller than the {}x{} crop",
            cfg.crop_w, cfg.crop_h
        )));
    }
    let x0 = rng.random_range(0..=w - cfg.crop_w);
    let y0 = rng.random_range(0..=h - cfg.crop_h);
    chain.push(TransformStep::Crop {
        x0,
        y0,
        w: cfg.crop_w,
        h: cfg.crop_h,
    })?;
    Ok(chain)
}

fn centered_crop(img: &GrayImage, cfg: &AugmentConfig) -> Result<TransformChain> {
    let (w, h) = (img.width(), img.height());
    if w < cfg.crop_w || h < cfg.crop_h {
        return Err(Error::invalid(format!("{w}x{h} image is smaller than the crop")));
    }
    TransformChain::with_steps(
        w,
        h,
        vec![TransformStep::Crop {
            x0: (w - cfg.crop_w) / 2,
            y0: (h - cfg.crop_h) / 2,
            w: cfg.crop_w,
            h: cfg.crop_h,
        }],
    )
}

pub fn draw_mask(rng: &mut impl Rng, grid: &PatchGrid) -> Vec<usize> {
    let (lo, hi) = grid.mask_bounds();
    let k = rng.random_range(lo.min(hi)..=hi);
    let mut m = sample(rng, grid.n(), k).into_vec();
    m.sort_unstable();
    m
}

fn paint(img: &mut GrayImage, grid: &PatchGrid, mask: &[usize], noise: u8, noise_seed: u64, fill: bool) {
    if noise > 0 {
        let mut rng = stream_rng(noise_seed, 0);
        let a = noise as i32;
        for v in img.as_raw_mut() {
            *v = clamp_u8((*v as i32 + rng.random_range(-a..=a)) as f64);
        }
    }
    if fill {
        for &idx in mask {
            let (i, j) = grid.coords(idx);
            for y in j * grid.p..(j + 1) * grid.p {
                for x in i * grid.p..(i + 1) * grid.p {
                    img.set(x, y, 0);
                }
            }
        }
    }
}

pub fn augment_pair(pair: &ScenePair, cfg: &AugmentConfig, seed: u64) -> Result<AugmentedPair> {
    let grid = cfg.grid()?;
    if cfg.noise > 16 {
        return Err(Error::invalid(format!("noise amplitude {} exceeds 16 levels", cfg.noise)));
    }
    let mut rng = stream_rng(seed, streams::AUGMENT);
    let mut attempt = 0;
    let (chain_a, chain_b) = loop {
        let (ca, cb) = if cfg.is_disabled() {
            (centered_crop(&pair.image_a, cfg)?, centered_crop(&pair.image_b, cfg)?)
        } else {
            (random_chain(&mut rng, &pair.image_a, cfg)?, random_chain(&mut rng, &pair.image_b, cfg)?)
        };
        let probe = AugmentedPair {
            image_a: GrayImage::new(0, 0),
            image_b: GrayImage::new(0, 0),
            chain_a: ca,
            chain_b: cb,
            mask_a: Vec::new(),
            mask_b: Vec::new(),
            grid,
            geometry: pair.geometry.clone(),
            eq5_plus_one: cfg.eq5_plus_one,
            noise_seed: 0,
            mask_seed: 0,
        };
        if probe.overlap() >= cfg.min_overlap {
            break (probe.chain_a, probe.chain_b);
        }
        attempt += 1;
        if attempt > cfg.max_retries || cfg.is_disabled() {
            return Err(Error::Augmentation(format!(
                "no crop pair with overlap >= {} after {attempt} attempts",
                cfg.min_overlap
            )));
        }
    };
    let noise_seed = split_seed(seed, 100);
    let mask_seed = split_seed(seed, 101);
    let mut mrng = stream_rng(mask_seed, 0);
    let mask_a = draw_mask(&mut mrng, &grid);
    let mask_b = draw_mask(&mut mrng, &grid);
    let mut image_a = chain_a.apply_image(&pair.image_a)?;
    let mut image_b = chain_b.apply_image(&pair.image_b)?;
    paint(&mut image_a, &grid, &mask_a, cfg.noise, split_seed(noise_seed, 0), cfg.mask_fill);
    paint(&mut image_b, &grid, &mask_b, cfg.noise, split_seed(noise_seed, 1), cfg.mask_fill);
    Ok(AugmentedPair {
        image_a,
        image_b,
        chain_a,
        chain_b,
        mask_a,
        mask_b,
        grid,
        geometry: pair.geometry.clone(),
        eq5_plus_one: cfg.eq5_plus_one,
        noise_seed,
        mask_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_pair, Modality, PairMode, PairSpec};
    use proptest::prelude::*;

    pub(super) fn registered(seed: u64) -> ScenePair {
        gen_pair(
            seed,
            &PairSpec {
                mode: PairMode::SameModal,
                modality_a: Modality::Opt,
                modality_b: Modality::Opt,
                size: 96,
                warp: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = PatchGrid::new(32, 32, 8).unwrap();
        assert_eq!(g.n(), 16);
        assert_eq!(g.index(1, 2), 9);
        assert_eq!(g.coords(9), (1, 2));
        assert_eq!(g.mask_bounds(), (4, 6));
        assert!(PatchGrid::new(30, 32, 8).is_err());
    }

    #[test]
    fn disabled_config_keeps_images_equal() {
        let pair = registered(1);
        let ap = augment_pair(&pair, &AugmentConfig::disabled(64, 8), 3).unwrap();
        assert_eq!(ap.image_a, ap.image_b);
        assert_eq!(ap.chain_a.steps(), &[TransformStep::Crop { x0: 16, y0: 16, w: 64, h: 64 }]);
        assert_eq!(ap.chain_a, ap.chain_b);
        let (lo, hi) = ap.grid.mask_bounds();
        assert!((lo..=hi).contains(&ap.mask_a.len()) && (lo..=hi).contains(&ap.mask_b.len()));
    }

    #[test]
    fn deterministic() {
        let pair = registered(2);
        let cfg = AugmentConfig::default();
        assert_eq!(augment_pair(&pair, &cfg, 5).unwrap(), augment_pair(&pair, &cfg, 5).unwrap());
        assert_ne!(augment_pair(&pair, &cfg, 5).unwrap(), augment_pair(&pair, &cfg, 6).unwrap());
    }

    #[test]
    fn overlap_respected() {
        let pair = registered(3);
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let ap = augment_pair(&pair, &cfg, seed).unwrap();
            assert!(ap.overlap() >= cfg.min_overlap);
        }
    }

    #[test]
    fn unsatisfiable_overlap() {
        let pair = registered(3);
        let cfg = AugmentConfig {
            min_overlap: 1.01,
            max_retries: 3,
            ..Default::default()
        };
        assert!(matches!(augment_pair(&pair, &cfg, 0), Err(Error::Augmentation(_))));
    }

    #[test]
    fn masked_patches_are_zero() {
        let pair = registered(4);
        let ap = augment_pair(&pair, &AugmentConfig::default(), 1).unwrap();
        for &idx in &ap.mask_a {
            let (i, j) = ap.grid.coords(idx);
            assert_eq!(ap.image_a.get(i * 8 + 3, j * 8 + 5), 0);
        }
    }

    #[test]
    fn too_small_source() {
        let pair = registered(4);
        let cfg = AugmentConfig {
            crop_h: 128,
            crop_w: 128,
            ..Default::default()
        };
        assert!(augment_pair(&pair, &cfg, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn mask_cardinality_within_bounds(seed in any::<u64>(), side in 1usize..9) {
            let grid = PatchGrid::new(side * 8, 64, 8).unwrap();
            let mut rng = stream_rng(seed, 0);
            let (lo, hi) = grid.mask_bounds();
            let m = draw_mask(&mut rng, &grid);
            prop_assert!(m.len() >= lo && m.len() <= hi);
            prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
