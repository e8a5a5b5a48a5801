//! Equal-budget comparison of the A/B/C component switches on a cross-modal task.

use crate::error::Result;
use crate::evalkit::{homography_auc, mma, AucReport, GtMap, MmaCurve, AUC_THRESHOLDS, MMA_THRESHOLDS};
use crate::geometry::{Homography, Point, RansacConfig};
use crate::matching::MatchSet;
use crate::model::{MiaModel, Phase};
use crate::rng::split_seed;
use crate::synthdata::{dataset_pair, DatasetConfig, GeometryKind, Modality, ScenePair};
use crate::trainer::{run_stage_pairs, Ablation, StageConfig};

use super::{inference_phase, match_images};

/// Table variants compared by the staged-benefit check, as (id, A, B, C).
/// D and E stay on throughout.
pub const ABLATION_VARIANTS: [(u8, bool, bool, bool); 6] = [
    (1, true, false, false),
    (2, false, true, false),
    (3, false, false, true),
    (4, true, true, false),
    (5, true, false, true),
    (8, true, true, true),
];

/// Step share of each stage: pretrain-1, pretrain-2 per modality, pretrain-3, finetune-cross.
const SHARES: [f64; 4] = [0.5, 0.1, 0.15, 0.15];

#[derive(Debug, Clone)]
pub struct StagedTask {
    pub train: Vec<ScenePair>,
    pub test: Vec<ScenePair>,
    pub base: StageConfig,
    /// Total optimizer steps shared by every stage of one variant.
    pub budget: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub id: u8,
    pub ablation: Ablation,
    pub steps: usize,
    pub auc: AucReport,
    pub mma: MmaCurve,
    pub matches: usize,
}

impl VariantResult {
    pub fn auc10(&self) -> f64 {
        self.auc.at(10.0).unwrap_or(0.0)
    }
}

/// OPT, SAR and OPT-SAR homography training pairs plus held-out OPT-SAR test pairs.
pub fn staged_task(seed: u64, train_pairs: usize, test_pairs: usize, budget: usize, base: StageConfig) -> Result<StagedTask> {
    let size = 96;
    let mk = |modes: Vec<(Modality, Modality)>, n: usize, stream: u64| -> Result<Vec<ScenePair>> {
        let cfg = DatasetConfig {
            pairs: n,
            modes,
            size,
            geometry: GeometryKind::Homography,
            warp: 4.0,
        };
        (0..n).map(|i| dataset_pair(split_seed(seed, stream), &cfg, i)).collect()
    };
    let train = mk(
        vec![(Modality::Opt, Modality::Opt), (Modality::Sar, Modality::Sar), (Modality::Opt, Modality::Sar)],
        train_pairs,
        1,
    )?;
    let test = mk(vec![(Modality::Opt, Modality::Sar)], test_pairs, 2)?;
    Ok(StagedTask {
        train,
        test,
        base: StageConfig { seed, ..base },
        budget,
        image_size: size,
    })
}

fn of_kind(pairs: &[ScenePair], a: Modality, b: Modality) -> Vec<ScenePair> {
    pairs
        .iter()
        .filter(|p| (p.modality_a, p.modality_b) == (a, b) || (p.modality_a, p.modality_b) == (b, a))
        .cloned()
        .collect()
}

/// Trains the five-stage pipeline under `ablation` and returns the model and steps taken.
pub fn train_variant(task: &StagedTask, ablation: Ablation) -> Result<(MiaModel, usize)> {
    let (opt, sar) = (Modality::Opt, Modality::Sar);
    let steps = |share: f64| ((task.budget as f64 * share).round() as usize).max(1);
    let stage = |phase: Phase, a: Modality, b: Modality, n: usize| StageConfig {
        phase,
        modality_a: a,
        modality_b: b,
        steps: n,
        ablation,
        holdout: 0.0,
        checkpoint_every: 0,
        tenth: false,
        ..task.base.clone()
    };
    let mut taken = 0;
    let mut run = |cfg: StageConfig, pairs: Vec<ScenePair>, init: Option<MiaModel>| -> Result<MiaModel> {
        taken += cfg.steps;
        Ok(run_stage_pairs(&cfg, &pairs, init, None)?.model)
    };
    let m = run(stage(Phase::Pretrain1, opt, opt, steps(SHARES[0])), task.train.clone(), None)?;
    let m = run(stage(Phase::Pretrain2, opt, opt, steps(SHARES[1])), of_kind(&task.train, opt, opt), Some(m))?;
    let m = run(stage(Phase::Pretrain2, sar, sar, steps(SHARES[1])), of_kind(&task.train, sar, sar), Some(m))?;
    let m = run(stage(Phase::Pretrain3, opt, sar, steps(SHARES[2])), of_kind(&task.train, opt, sar), Some(m))?;
    let m = run(stage(Phase::FinetuneCross, opt, sar, steps(SHARES[3])), of_kind(&task.train, opt, sar), Some(m))?;
    Ok((m, taken))
}

/// Homography AUC and MMA of `model` on the task's held-out pairs.
pub fn evaluate_variant(task: &StagedTask, model: &MiaModel, ablation: Ablation) -> Result<(AucReport, MmaCurve, usize)> {
    let cfg = StageConfig {
        ablation,
        ..task.base.clone()
    };
    let mut sets: Vec<MatchSet> = Vec::new();
    let mut hs: Vec<Homography> = Vec::new();
    for p in &task.test {
        let mut opts = cfg.forward_options();
        opts.phase = inference_phase(p.modality_a, p.modality_b);
        let m = match_images(model, &p.image_a, &p.image_b, [p.modality_a, p.modality_b], &opts, &cfg.match_params())?;
        sets.push(m.refined);
        hs.push(*p.geometry.homography().expect("homography task"));
    }
    let pairs: Vec<(&MatchSet, &Homography)> = sets.iter().zip(&hs).collect();
    let ransac = RansacConfig {
        seed: task.base.seed,
        ..Default::default()
    };
    let auc = homography_auc(&pairs, task.image_size, task.image_size, &AUC_THRESHOLDS, &ransac);
    let maps: Vec<_> = hs.iter().map(|h| move |p: Point| h.apply(p).ok()).collect();
    let with_maps: Vec<(&MatchSet, GtMap)> = sets.iter().zip(&maps).map(|(s, f)| (s, f as GtMap)).collect();
    let curve = mma(&with_maps, &MMA_THRESHOLDS);
    Ok((auc, curve, sets.iter().map(MatchSet::len).sum()))
}

pub fn run_variant(task: &StagedTask, id: u8) -> Result<VariantResult> {
    let &(_, a, b, c) = ABLATION_VARIANTS
        .iter()
        .find(|v| v.0 == id)
        .ok_or_else(|| crate::Error::Config(format!("unknown ablation variant {id}")))?;
    let ablation = Ablation {
        augmentation: a,
        generic_ffn: b,
        assistant_ffn: c,
        ..Ablation::default()
    };
    let (model, steps) = train_variant(task, ablation)?;
    let (auc, mma, matches) = evaluate_variant(task, &model, ablation)?;
    Ok(VariantResult {
        id,
        ablation,
        steps,
        auc,
        mma,
        matches,
    })
}
