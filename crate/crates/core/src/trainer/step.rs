use rand::seq::index::sample as sample_indices;

use super::{AdamState, AdamW, FreezePlan, StageConfig};
use crate::augment::{augment_pair, build_gt_matrix, center_to_patch, AugmentConfig, AugmentedPair, GtMatrix};
use crate::error::{Error, Result};
use crate::geometry::{FundamentalMatrix, Mapped, Point};
use crate::losses::{loss_coarse, loss_cycle, loss_epipolar, loss_fine, loss_total, point_distance, FinePair};
use crate::matching::{dual_softmax_var, expected_match_var, heat_variance, mutual_matches, similarity_var, FINE_STRIDE};
use crate::model::{Bound, MiaModel};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng::{split_seed, stream_rng, streams};
use crate::synthdata::{Modality, SceneGeometry, ScenePair};

/// One augmented training pair with its GT matrix.
#[derive(Debug, Clone)]
pub struct Sample {
    pub aug: AugmentedPair,
    pub gt: GtMatrix,
    pub modality: [Modality; 2],
}

pub fn prepare_sample(pair: &ScenePair, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    let aug = augment_pair(pair, cfg, seed)?;
    let gt = build_gt_matrix(&aug);
    Ok(Sample {
        aug,
        gt,
        modality: [pair.modality_a, pair.modality_b],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoarseQuality {
    pub predicted: usize,
    pub correct: usize,
    pub gt_count: usize,
}

impl CoarseQuality {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.correct as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt_count == 0 {
            0.0
        } else {
            self.correct as f64 / self.gt_count as f64
        }
    }

    pub fn add(&mut self, o: &CoarseQuality) {
        self.predicted += o.predicted;
        self.correct += o.correct;
        self.gt_count += o.gt_count;
    }
}

/// Mutual-argmax matches at threshold θ scored against a GT matrix.
pub fn coarse_quality<T: Real>(p: &Tensor<T>, gt: &GtMatrix, theta: f64) -> CoarseQuality {
    let m = mutual_matches(p, theta);
    CoarseQuality {
        predicted: m.len(),
        correct: m.iter().filter(|(i, j, _)| gt.get(*i, *j)).count(),
        gt_count: gt.match_count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub loss_c: f64,
    pub loss_f: f64,
    pub loss_total: f64,
    pub quality: CoarseQuality,
    /// Reprojection distance stood in for the epipolar term.
    pub surrogate: bool,
    /// Queries dropped for a degenerate epipolar line.
    pub excluded: usize,
}

struct FineQuery {
    index: usize,
    a: Point,
    b: Point,
}

fn masked(idx: Option<usize>, mask: &[usize]) -> bool {
    idx.is_some_and(|i| mask.contains(&i))
}

fn patch_of(p: Point, s: &Sample) -> Option<usize> {
    let g = &s.aug.grid;
    let (i, j) = center_to_patch(p, g.p, false);
    (i >= 0 && j >= 0 && (i as usize) < g.cols() && (j as usize) < g.rows()).then(|| g.index(i as usize, j as usize))
}

/// Fine-grid positions of crop A whose correspondence lands in crop B, both outside the masks.
fn query_candidates(s: &Sample, fine_hw: (usize, usize)) -> Vec<FineQuery> {
    let mut out = Vec::new();
    for v in 0..fine_hw.0 {
        for u in 0..fine_hw.1 {
            let a = Point::new(u as f64 * FINE_STRIDE, v as f64 * FINE_STRIDE);
            if masked(patch_of(a, s), &s.aug.mask_a) {
                continue;
            }
            if let Mapped::Inside(b) = s.aug.map_a_to_b(a) {
                if !masked(patch_of(b, s), &s.aug.mask_b) {
                    out.push(FineQuery {
                        index: v * fine_hw.1 + u,
                        a,
                        b,
                    });
                }
            }
        }
    }
    out
}

/// Fundamental matrix between the two crops, when the scene has one.
fn crop_fundamental(aug: &AugmentedPair) -> Option<FundamentalMatrix> {
    let f = match &aug.geometry {
        SceneGeometry::TwoView(_) => aug.geometry.fundamental()?.matrix(),
        _ => return None,
    };
    let ca_inv = aug.chain_a.matrix().try_inverse()?;
    let cb_inv = aug.chain_b.matrix().try_inverse()?;
    FundamentalMatrix::new(cb_inv.transpose() * f * ca_inv).ok()
}

fn finite(v: f64, component: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            component: component.into(),
        })
    }
}

fn non_finite_as(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            component: component.into(),
        },
        other => other,
    }
}

pub(crate) struct SampleLoss {
    pub total: Var,
    pub report: StepReport,
}

/// Forward pass, coarse and fine losses for one sample on `tape`.
pub(crate) fn sample_loss<T: Real>(
    model: &MiaModel,
    tape: &mut Tape<T>,
    p: &Bound,
    s: &Sample,
    cfg: &StageConfig,
    query_seed: u64,
) -> Result<SampleLoss> {
    let ia = tape.constant(s.aug.image_a.to_tensor());
    let ib = tape.constant(s.aug.image_b.to_tensor());
    let out = model
        .forward_pair(tape, p, [ia, ib], s.modality, &cfg.forward_options())
        .map_err(non_finite_as("forward"))?;
    let n = s.gt.n();
    if tape.shape(out.coarse[0])[0] != n {
        return Err(Error::invalid(format!(
            "coarse grid has {} tokens but the GT matrix has {n} patches (patch side must be 8)",
            tape.shape(out.coarse[0])[0]
        )));
    }
    let sim = similarity_var(tape, out.coarse[0], out.coarse[1])?;
    let prob = dual_softmax_var(tape, sim, cfg.tau).map_err(non_finite_as("coarse"))?;
    let dense: Vec<f64> = s.gt.to_dense();
    let gt = Tensor::<T>::from_f64(&[n, n], &dense)?;
    let lc = loss_coarse(tape, prob, &gt, cfg.coarse_norm).map_err(non_finite_as("coarse"))?;
    let quality = coarse_quality(tape.value(prob), &s.gt, cfg.theta);

    let mut report = StepReport {
        quality,
        ..Default::default()
    };
    let candidates = query_candidates(s, out.fine_hw);
    let lf = if candidates.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let mut rng = stream_rng(query_seed, streams::QUERIES);
        let k = cfg.weights.n_q.min(candidates.len());
        let picked: Vec<&FineQuery> = sample_indices(&mut rng, candidates.len(), k).into_iter().map(|i| &candidates[i]).collect();
        let idx: Vec<usize> = picked.iter().map(|q| q.index).collect();
        let fwd = expected_match_var(tape, out.fine[0], out.fine[1], out.fine_hw, &idx).map_err(non_finite_as("fine"))?;
        let pred = tape.scale(fwd.mean, FINE_STRIDE)?;
        let s2 = FINE_STRIDE * FINE_STRIDE;
        let sigma: Vec<f64> = heat_variance(tape.value(fwd.heat), tape.value(fwd.mean), out.fine_hw.0, out.fine_hw.1)
            .into_iter()
            .map(|v| v * s2)
            .collect();
        let maps = FinePair {
            a: out.fine[0],
            b: out.fine[1],
            a_hw: out.fine_hw,
            b_hw: out.fine_hw,
        };
        let cy = loss_cycle(tape, &maps, &idx, fwd.mean).map_err(non_finite_as("cycle"))?;
        let cy = tape.scale(cy, FINE_STRIDE)?;
        let (ep, kept) = match crop_fundamental(&s.aug) {
            Some(f) => {
                let a_pts: Vec<Point> = picked.iter().map(|q| q.a).collect();
                let e = loss_epipolar(tape, pred, &a_pts, &f).map_err(non_finite_as("epipolar"))?;
                report.excluded = e.excluded;
                (e.dist, e.kept)
            }
            None => {
                report.surrogate = true;
                let b_pts: Vec<Point> = picked.iter().map(|q| q.b).collect();
                let d = point_distance(tape, pred, &b_pts).map_err(non_finite_as("epipolar"))?;
                (d, (0..picked.len()).collect())
            }
        };
        if kept.is_empty() {
            tape.constant(Tensor::scalar(T::zero()))
        } else {
            let (cy, sigma) = if kept.len() == picked.len() {
                (cy, sigma)
            } else {
                (tape.gather(cy, 0, &kept)?, kept.iter().map(|&k| sigma[k]).collect())
            };
            loss_fine(tape, &sigma, ep, cy, cfg.weights.lambda).map_err(non_finite_as("fine"))?
        }
    };
    let total = loss_total(tape, lc, lf, cfg.weights.alpha, cfg.weights.beta)?;
    report.loss_c = finite(tape.value(lc).item().f64(), "coarse")?;
    report.loss_f = finite(tape.value(lf).item().f64(), "fine")?;
    report.loss_total = finite(tape.value(total).item().f64(), "total")?;
    Ok(SampleLoss { total, report })
}

/// Forward, backward and one AdamW update over `batch` (gradients averaged).
/// Frozen parameters are never touched.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut MiaModel,
    batch: &[Sample],
    plan: &FreezePlan,
    opt: &AdamW,
    state: &mut AdamState,
    cfg: &StageConfig,
    step: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for s in batch {
        cfg.phase.check_pair(s.modality[0], s.modality[1])?;
    }
    let n_params = model.params().len();
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; n_params];
    let mut report = StepReport::default();
    let any_trainable = model.params().names().any(|n| plan.is_trainable(n));
    for (k, s) in batch.iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let p = model.params().bind(&mut tape, &|n| plan.is_trainable(n));
        let qseed = split_seed(cfg.seed, split_seed(step, k as u64));
        let sl = sample_loss(model, &mut tape, &p, s, cfg, qseed)?;
        report.loss_c += sl.report.loss_c;
        report.loss_f += sl.report.loss_f;
        report.loss_total += sl.report.loss_total;
        report.quality.add(&sl.report.quality);
        report.surrogate |= sl.report.surrogate;
        report.excluded += sl.report.excluded;
        if !any_trainable || !tape.requires_grad(sl.total) {
            continue;
        }
        let mut grads = tape.backward(sl.total)?;
        for (i, slot) in acc.iter_mut().enumerate() {
            let Some(g) = grads.take(p.at(i)) else { continue };
            match slot {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y),
                None => *slot = Some(g),
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    report.loss_c *= inv;
    report.loss_f *= inv;
    report.loss_total *= inv;
    if batch.len() > 1 {
        for g in acc.iter_mut().flatten() {
            let s = inv as f32;
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    for (i, g) in acc.iter().enumerate() {
        if g.is_some() && !plan.is_trainable(model.params().name(i)) {
            return Err(Error::invalid(format!("gradient reached frozen parameter {}", model.params().name(i))));
        }
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFiniteLoss {
                    component: format!("gradient of {}", model.params().name(i)),
                });
            }
        }
    }
    opt.step(model.params_mut(), &acc, state)?;
    Ok(report)
}
