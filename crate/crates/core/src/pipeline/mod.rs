//! End-to-end helpers shared by the CLI, the acceptance suite and the smoke run.

mod ablation;
mod checks;
mod gradcheck;
mod smoke;

pub use ablation::{run_variant, staged_task, train_variant, evaluate_variant, StagedTask, VariantResult, ABLATION_VARIANTS};
pub use checks::{
    gt_oracle_agreement, mask_bound_check, mixed_pair, routing_gradients, routing_split_holds, GtAgreement, MaskBounds, RoutingReport,
};
pub use gradcheck::{gradcheck_suite, run_gradcheck, GradcheckCase, GradcheckResult, GRADCHECK_TOL};
pub use smoke::{pipeline_smoke, SmokeOutcome, SMOKE_KEYS};

use crate::augment::PatchGrid;
use crate::error::Result;
use crate::image::GrayImage;
use crate::matching::{coarse_scores, extract_coarse_matches, refine_matches, CoarseScores, FeatureGrid, MatchParams, MatchSet};
use crate::model::{FeatureMaps, ForwardOptions, MiaModel, Phase};
use crate::synthdata::Modality;

/// Coarse matches at patch centers and their fine-refined counterparts.
#[derive(Debug, Clone)]
pub struct PairMatches {
    pub coarse: MatchSet,
    pub refined: MatchSet,
    pub scores: CoarseScores,
    pub features: FeatureMaps,
}

/// Runs the model on two images and extracts coarse and refined matches.
pub fn match_images(
    model: &MiaModel,
    a: &GrayImage,
    b: &GrayImage,
    modality: [Modality; 2],
    opts: &ForwardOptions,
    params: &MatchParams,
) -> Result<PairMatches> {
    let f = model.infer(a, b, modality, opts)?;
    let scores = coarse_scores(&f.coarse[0], &f.coarse[1], params.tau)?;
    let grid_a = PatchGrid::new(a.height(), a.width(), 8)?;
    let grid_b = PatchGrid::new(b.height(), b.width(), 8)?;
    let coarse = extract_coarse_matches(&scores.p, params.theta, &grid_a, &grid_b)?;
    let fa = FeatureGrid::new(&f.fine[0], f.fine_hw.0, f.fine_hw.1)?;
    let fb = FeatureGrid::new(&f.fine[1], f.fine_hw.0, f.fine_hw.1)?;
    let refined = refine_matches(&coarse, &fa, &fb, params.window)?;
    Ok(PairMatches {
        coarse,
        refined,
        scores,
        features: f,
    })
}

/// Routing phase used at inference: the fine-tuning phase matching the pair type.
pub fn inference_phase(a: Modality, b: Modality) -> Phase {
    if a == b {
        Phase::FinetuneSame
    } else {
        Phase::FinetuneCross
    }
}

/// 64-bit FNV-1a digest, used to fingerprint artifacts in reports.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
