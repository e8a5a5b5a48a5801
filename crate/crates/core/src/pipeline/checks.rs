use crate::augment::{augment_pair, build_gt_matrix, center_near_boundary, oracle_gt_matrix, AugmentConfig};
use crate::error::Result;
use crate::model::{MiaModel, Phase};
use crate::numerics::Tape;
use crate::rng::split_seed;
use crate::synthdata::{gen_pair, Modality, PairMode, PairSpec, ScenePair};
use crate::trainer::step::sample_loss;
use crate::trainer::{FreezePlan, Sample, StageConfig};

/// Row-level comparison of the GT builder against the pixel-voting oracle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GtAgreement {
    pub draws: usize,
    pub rows: usize,
    pub agree: usize,
    /// Disagreeing rows whose center is not within 1 px of a boundary.
    pub unexplained: usize,
    pub non_boundary_rows: usize,
    pub non_boundary_agree: usize,
}

impl GtAgreement {
    pub fn rate(&self) -> f64 {
        self.agree as f64 / self.rows.max(1) as f64
    }

    pub fn non_boundary_rate(&self) -> f64 {
        self.non_boundary_agree as f64 / self.non_boundary_rows.max(1) as f64
    }
}

/// Scene pair `i` of a mixed draw: registered, homography-warped, cross-modal
/// and two-view geometries in rotation.
pub fn mixed_pair(seed: u64, i: usize, size: usize) -> Result<ScenePair> {
    use Modality::*;
    let (mode, a, b, warp) = match i % 4 {
        0 => (PairMode::SameModal, Opt, Opt, None),
        1 => (PairMode::SameModal, Nir, Nir, Some(5.0)),
        2 => (PairMode::CrossModal, Opt, Sar, Some(5.0)),
        _ => (PairMode::TwoView, Opt, Opt, None),
    };
    gen_pair(
        split_seed(seed, i as u64),
        &PairSpec {
            mode,
            modality_a: a,
            modality_b: b,
            size,
            warp,
        },
    )
}

/// Compares builder and oracle over `draws` random (chain, mask, geometry) draws.
pub fn gt_oracle_agreement(seed: u64, draws: usize, eq5_plus_one: bool) -> Result<GtAgreement> {
    let cfg = AugmentConfig {
        eq5_plus_one,
        ..Default::default()
    };
    let mut r = GtAgreement {
        draws,
        ..Default::default()
    };
    for i in 0..draws {
        let pair = mixed_pair(seed, i, 96)?;
        let ap = augment_pair(&pair, &cfg, split_seed(seed ^ 0x5eed, i as u64))?;
        let (g, o) = (build_gt_matrix(&ap), oracle_gt_matrix(&ap));
        for row in 0..g.n() {
            let same = g.row(row) == o.row(row);
            let boundary = center_near_boundary(&ap, row, 1.0);
            r.rows += 1;
            r.agree += usize::from(same);
            if !boundary {
                r.non_boundary_rows += 1;
                r.non_boundary_agree += usize::from(same);
            }
            r.unexplained += usize::from(!same && !boundary);
        }
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBounds {
    pub draws: usize,
    pub violations: usize,
    pub min_seen: usize,
    pub max_seen: usize,
    pub lo: usize,
    pub hi: usize,
}

/// Mask cardinalities of both sides over `draws` augmentations.
pub fn mask_bound_check(seed: u64, draws: usize) -> Result<MaskBounds> {
    let cfg = AugmentConfig::default();
    let (lo, hi) = cfg.grid()?.mask_bounds();
    let pair = mixed_pair(seed, 0, 96)?;
    let mut r = MaskBounds {
        draws,
        violations: 0,
        min_seen: usize::MAX,
        max_seen: 0,
        lo,
        hi,
    };
    for i in 0..draws {
        let ap = augment_pair(&pair, &cfg, split_seed(seed, i as u64))?;
        for m in [&ap.mask_a, &ap.mask_b] {
            r.min_seen = r.min_seen.min(m.len());
            r.max_seen = r.max_seen.max(m.len());
            r.violations += usize::from(m.len() < lo || m.len() > hi);
        }
    }
    Ok(r)
}

/// Names of parameters that received a non-zero gradient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoutingReport {
    /// With every parameter bound trainable.
    pub open: Vec<String>,
    /// With only the plan's parameters bound trainable.
    pub planned: Vec<String>,
}

impl RoutingReport {
    /// Assistant parameters touched with everything trainable.
    pub fn assistants(&self) -> Vec<&str> {
        self.open.iter().filter(|n| n.starts_with("assistant.")).map(String::as_str).collect()
    }
}

fn touched(model: &MiaModel, sample: &Sample, cfg: &StageConfig, trainable: &dyn Fn(&str) -> bool) -> Result<Vec<String>> {
    let mut tape = Tape::<f32>::new();
    let p = model.params().bind(&mut tape, trainable);
    let sl = sample_loss(model, &mut tape, &p, sample, cfg, cfg.seed)?;
    let grads = tape.backward(sl.total)?;
    Ok((0..model.params().len())
        .filter(|&i| grads.get(p.at(i)).is_some_and(|g| g.data().iter().any(|v| *v != 0.0)))
        .map(|i| model.params().name(i).to_string())
        .collect())
}

/// Which parameters a full loss on `sample` reaches, with all parameters open
/// and under the stage's freeze plan.
pub fn routing_gradients(model: &MiaModel, sample: &Sample, cfg: &StageConfig) -> Result<RoutingReport> {
    let plan: FreezePlan = cfg.plan()?;
    Ok(RoutingReport {
        open: touched(model, sample, cfg, &|_| true)?,
        planned: touched(model, sample, cfg, &|n| plan.is_trainable(n))?,
    })
}

/// Every (L, M) with 1 ≤ L ≤ `max_layers`, 0 ≤ M ≤ L: cross-modal pairs use
/// their modal assistants below L−M and the pair assistant from there on.
pub fn routing_split_holds(max_layers: usize) -> Result<bool> {
    use crate::model::{route, AssistantKey, ModelConfig};
    let (a, b) = (Modality::Opt, Modality::Sar);
    for layers in 1..=max_layers {
        for m_top in 0..=layers {
            let cfg = ModelConfig {
                layers,
                m_top,
                ..Default::default()
            };
            for l in 0..layers {
                let keys = route(&cfg, a, b, l, Phase::FinetuneCross)?;
                let want = if l < layers - m_top {
                    (AssistantKey::Modal(a), AssistantKey::Modal(b))
                } else {
                    let k = AssistantKey::pair(a, b)?;
                    (k, k)
                };
                if keys != want {
                    return Ok(false);
                }
                if route(&cfg, a, a, l, Phase::FinetuneSame)? != (AssistantKey::Modal(a), AssistantKey::Modal(a)) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}
