use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use super::{fnv1a, gradcheck_suite, gt_oracle_agreement, inference_phase, mask_bound_check, match_images, routing_gradients, PairMatches};
use crate::error::{Error, Result};
use crate::evalkit::{
    displacements, homography_auc, mma, rmse_from_displacements, threshold_accuracy, ACC_THRESHOLDS, AUC_THRESHOLDS, MMA_THRESHOLDS,
};
use crate::losses::CoarseNorm;
use crate::geometry::{Homography, Point, RansacConfig};
use crate::matching::{expected_match, FeatureGrid, MatchSet};
use crate::model::{MiaModel, ModelConfig, Phase};
use crate::synthdata::{gen_dataset, parse_modes, DatasetConfig, GeometryKind, Manifest, Modality, ScenePair};
use crate::trainer::{fixed_sample, merge_trainable, run_stage, StageConfig, StageOutcome};

/// Acceptance keys every smoke report carries, in criterion order.
pub const SMOKE_KEYS: [&str; 10] = [
    "gradcheck",
    "gt_oracle",
    "mask_bounds",
    "freeze_integrity",
    "routing",
    "overfit",
    "staged_benefit",
    "metric_identities",
    "dual_softmax",
    "determinism",
];

#[derive(Debug, Clone)]
pub struct SmokeOutcome {
    /// JSON-lines report (also written to `report.jsonl`).
    pub lines: Vec<Value>,
    /// Wall-clock seconds per stage; kept out of the report so it stays reproducible.
    pub timings: Vec<(String, f64)>,
}

impl SmokeOutcome {
    pub fn report_text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Optimizer steps of the first stage; later stages run a few steps each.
const PRETRAIN1_STEPS: usize = 300;

fn smoke_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d: 32,
        heads: 2,
        d_ffn: 64,
        d_coarse: 32,
        d_fine: 16,
        m_top: 1,
        ..Default::default()
    }
}

fn stage(seed: u64, phase: Phase, a: Modality, b: Modality, steps: usize) -> StageConfig {
    let mut cfg = StageConfig {
        phase,
        modality_a: a,
        modality_b: b,
        steps,
        lr: 1e-3,
        model: smoke_model(),
        crop: 64,
        seed,
        tenth: false,
        holdout: 0.25,
        checkpoint_every: 0,
        coarse_norm: CoarseNorm::Points,
        fresh_augment: false,
        ..Default::default()
    };
    cfg.weights.beta = 0.05;
    cfg
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex(fnv1a(&fs::read(path)?)))
}

fn stage_line(name: &str, out: &StageOutcome, root: &Path) -> Result<Value> {
    let last = out.reports.last().copied().unwrap_or_default();
    let q = out.final_eval().unwrap_or_default();
    let ck = match &out.checkpoint {
        Some(p) => json!({
            "path": p.strip_prefix(root).unwrap_or(p).to_string_lossy(),
            "fnv": file_digest(p)?,
        }),
        None => Value::Null,
    };
    Ok(json!({
        "stage": name,
        "steps": out.reports.len(),
        "loss_total": last.loss_total,
        "holdout_precision": q.precision(),
        "holdout_recall": q.recall(),
        "checkpoint": ck,
    }))
}

/// Frozen parameters (under `cfg`'s plan) of `after` equal those of `before`.
fn frozen_intact(before: &MiaModel, after: &MiaModel, cfg: &StageConfig) -> Result<bool> {
    let plan = cfg.plan()?;
    let (cb, ca) = (before.to_checkpoint(), after.to_checkpoint());
    for name in before.params().names().filter(|n| !plan.is_trainable(n)) {
        if cb.segment(name) != ca.segment(name) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn criterion(k: usize, value: Value, pass: Option<bool>) -> Value {
    json!({
        "criterion": k,
        "key": SMOKE_KEYS[k - 1],
        "scale": "smoke",
        "value": value,
        "pass": pass,
    })
}

fn homography_of(pair: &ScenePair) -> Result<Homography> {
    pair.geometry
        .homography()
        .copied()
        .ok_or_else(|| Error::Format("smoke evaluation expects homography pairs".into()))
}

/// Dual-softmax and heatmap normalization on one matched pair.
fn softmax_checks(m: &PairMatches) -> Result<(f64, f64, f64)> {
    let s = m.scores.s.map(|v| v / m.scores.tau as f32);
    let (rows, cols) = (s.softmax(1)?, s.softmax(0)?);
    let (na, nb) = (s.shape()[0], s.shape()[1]);
    let mut worst = 0.0f64;
    for i in 0..na {
        let r: f64 = (0..nb).map(|j| rows.data()[i * nb + j] as f64).sum();
        worst = worst.max((r - 1.0).abs());
    }
    for j in 0..nb {
        let c: f64 = (0..na).map(|i| cols.data()[i * nb + j] as f64).sum();
        worst = worst.max((c - 1.0).abs());
    }
    let (pmin, pmax) = m
        .scores
        .p
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v as f64), hi.max(*v as f64)));
    let f = &m.features;
    let fa = FeatureGrid::new(&f.fine[0], f.fine_hw.0, f.fine_hw.1)?;
    let fb = FeatureGrid::new(&f.fine[1], f.fine_hw.0, f.fine_hw.1)?;
    let mut heat = 0.0f64;
    for q in [(0, 0), (f.fine_hw.1 / 2, f.fine_hw.0 / 2), (f.fine_hw.1 - 1, f.fine_hw.0 - 1)] {
        let e = expected_match(&fa, &fb, q, None)?;
        heat = heat.max((e.heatmap.iter().sum::<f64>() - 1.0).abs());
    }
    let range_ok = if pmin >= 0.0 && pmax <= 1.0 { 0.0 } else { 1.0 };
    Ok((worst, heat, range_ok))
}

/// Runs data generation, augmentation, the five training stages at tiny budgets,
/// matching and evaluation under `out_dir`, and writes `report.jsonl` there.
pub fn pipeline_smoke(seed: u64, out_dir: &Path) -> Result<SmokeOutcome> {
    let mut lines = Vec::new();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    fs::create_dir_all(out_dir)?;

    // gen-data
    let data_dir = out_dir.join("data");
    let dcfg = DatasetConfig {
        pairs: 12,
        modes: parse_modes("opt:opt,sar:sar,opt:sar")?,
        size: 96,
        geometry: GeometryKind::Homography,
        warp: 4.0,
    };
    let manifest: Manifest = gen_dataset(&data_dir, seed, &dcfg)?;
    lines.push(json!({
        "stage": "gen-data",
        "pairs": manifest.entries.len(),
        "manifest_fnv": file_digest(&data_dir.join("manifest.txt"))?,
    }));
    lap("gen-data", &mut timings);

    // augment
    let first = manifest.load_pair(&manifest.entries[0])?;
    let sample = fixed_sample(std::slice::from_ref(&first), 0, &stage(seed, Phase::Pretrain1, Modality::Opt, Modality::Opt, 0))?;
    let (ap, gt) = (&sample.aug, &sample.gt);
    let aug_dir = out_dir.join("augment");
    fs::create_dir_all(&aug_dir)?;
    fs::write(aug_dir.join("pair0000.gt"), gt.serialize())?;
    lines.push(json!({
        "stage": "augment",
        "pair": manifest.entries[0].id,
        "gt_matches": gt.match_count(),
        "mask_a": ap.mask_a.len(),
        "mask_b": ap.mask_b.len(),
        "gt_fnv": file_digest(&aug_dir.join("pair0000.gt"))?,
    }));
    lap("augment", &mut timings);

    // training stages
    let ck_dir = out_dir.join("ckpt");
    let mut freeze_ok = true;
    let c1 = stage(seed, Phase::Pretrain1, Modality::Opt, Modality::Opt, PRETRAIN1_STEPS);
    let s1 = run_stage(&c1, &manifest, None, Some(&ck_dir))?;
    lines.push(stage_line("pretrain-1", &s1, out_dir)?);
    lap("pretrain-1", &mut timings);

    let c2o = stage(seed, Phase::Pretrain2, Modality::Opt, Modality::Opt, 6);
    let c2s = stage(seed, Phase::Pretrain2, Modality::Sar, Modality::Sar, 6);
    let s2o = run_stage(&c2o, &manifest, Some(s1.model.clone()), Some(&ck_dir))?;
    let s2s = run_stage(&c2s, &manifest, Some(s1.model.clone()), Some(&ck_dir))?;
    freeze_ok &= frozen_intact(&s1.model, &s2o.model, &c2o)? && frozen_intact(&s1.model, &s2s.model, &c2s)?;
    let (po, ps) = (c2o.plan()?, c2s.plan()?);
    let merged = merge_trainable(&s1.model, &[(&s2o.model, &po), (&s2s.model, &ps)])?;
    let swapped = merge_trainable(&s1.model, &[(&s2s.model, &ps), (&s2o.model, &po)])?;
    let commutes = merged.to_checkpoint().to_bytes()? == swapped.to_checkpoint().to_bytes()?;
    let merged_path = ck_dir.join("pretrain-2.ckpt");
    merged.to_checkpoint().write(&merged_path)?;
    lines.push(stage_line("pretrain-2-OPT", &s2o, out_dir)?);
    lines.push(stage_line("pretrain-2-SAR", &s2s, out_dir)?);
    lines.push(json!({
        "stage": "pretrain-2-merge",
        "commutes": commutes,
        "checkpoint": {"path": "ckpt/pretrain-2.ckpt", "fnv": file_digest(&merged_path)?},
    }));
    lap("pretrain-2", &mut timings);

    let c3 = stage(seed, Phase::Pretrain3, Modality::Opt, Modality::Sar, 6);
    let s3 = run_stage(&c3, &manifest, Some(merged.clone()), Some(&ck_dir))?;
    freeze_ok &= frozen_intact(&merged, &s3.model, &c3)?;
    lines.push(stage_line("pretrain-3-OPT-SAR", &s3, out_dir)?);
    lap("pretrain-3", &mut timings);

    let cf = stage(seed, Phase::FinetuneCross, Modality::Opt, Modality::Sar, 6);
    let sf = run_stage(&cf, &manifest, Some(s3.model.clone()), Some(&ck_dir))?;
    freeze_ok &= frozen_intact(&s3.model, &sf.model, &cf)?;
    let cfs = stage(seed, Phase::FinetuneSame, Modality::Sar, Modality::Sar, 4);
    let sfs = run_stage(&cfs, &manifest, Some(sf.model.clone()), Some(&ck_dir))?;
    freeze_ok &= frozen_intact(&sf.model, &sfs.model, &cfs)?;
    lines.push(stage_line("finetune-cross-OPT-SAR", &sf, out_dir)?);
    lines.push(stage_line("finetune-same-SAR", &sfs, out_dir)?);
    lap("finetune", &mut timings);
    let model = sfs.model;

    // match
    let match_dir = out_dir.join("matches");
    fs::create_dir_all(&match_dir)?;
    let mut evaluated: Vec<(PairMatches, ScenePair)> = Vec::new();
    let mut digests = Vec::new();
    let mparams = cf.match_params();
    for e in &manifest.entries {
        let pair = manifest.load_pair(e)?;
        let mut opts = cf.forward_options();
        opts.phase = inference_phase(pair.modality_a, pair.modality_b);
        let m = match_images(&model, &pair.image_a, &pair.image_b, [pair.modality_a, pair.modality_b], &opts, &mparams)?;
        let path = match_dir.join(format!("{}.txt", e.id));
        m.refined.write(&path)?;
        digests.push(json!({"pair": e.id, "coarse": m.coarse.len(), "refined": m.refined.len(), "fnv": file_digest(&path)?}));
        evaluated.push((m, pair));
    }
    lines.push(json!({"stage": "match", "files": digests}));
    lap("match", &mut timings);

    // eval
    let hs: Vec<Homography> = evaluated.iter().map(|(_, p)| homography_of(p)).collect::<Result<_>>()?;
    let maps: Vec<Box<dyn Fn(Point) -> Option<Point>>> = hs
        .iter()
        .map(|h| {
            let h = *h;
            Box::new(move |p: Point| h.apply(p).ok()) as Box<dyn Fn(Point) -> Option<Point>>
        })
        .collect();
    let sets: Vec<&MatchSet> = evaluated.iter().map(|(m, _)| &m.refined).collect();
    let mma_pairs: Vec<(&MatchSet, &dyn Fn(Point) -> Option<Point>)> = sets.iter().zip(&maps).map(|(s, f)| (*s, f.as_ref())).collect();
    let curve = mma(&mma_pairs, &MMA_THRESHOLDS);
    let hpairs: Vec<(&MatchSet, &Homography)> = sets.iter().copied().zip(&hs).collect();
    let ransac = RansacConfig {
        seed,
        ..Default::default()
    };
    let auc = homography_auc(&hpairs, dcfg.size, dcfg.size, &AUC_THRESHOLDS, &ransac);
    let acc = threshold_accuracy(&hpairs, dcfg.size, dcfg.size, &ACC_THRESHOLDS, &ransac);
    let disp: Vec<(f64, f64)> = mma_pairs.iter().flat_map(|(s, f)| displacements(s, *f)).collect();
    let rmse = rmse_from_displacements(&disp).ok();
    lines.push(json!({
        "stage": "eval",
        "mma": curve.values,
        "mma_empty_warning": curve.empty_warning,
        "auc": auc.values,
        "auc_failures": auc.failures,
        "acc": acc.values,
        "rmse": rmse.map(|r| json!({"h": r.h, "v": r.v, "hv": r.hv, "kept": r.kept})),
    }));
    lap("eval", &mut timings);

    // acceptance proxies
    let grads = gradcheck_suite(seed, 2)?;
    let worst = grads.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    lines.push(criterion(1, json!(worst), Some(grads.iter().all(|g| g.passed()))));
    let agreement = gt_oracle_agreement(seed, 8, true)?;
    lines.push(criterion(
        2,
        json!({"rate": agreement.rate(), "unexplained": agreement.unexplained}),
        Some(agreement.unexplained == 0),
    ));
    let masks = mask_bound_check(seed, 50)?;
    lines.push(criterion(3, json!(masks.violations), Some(masks.violations == 0)));
    lines.push(criterion(4, json!({"frozen_intact": freeze_ok, "stage2_commutes": commutes}), Some(freeze_ok && commutes)));
    let probe = evaluated
        .iter()
        .find(|(_, p)| (p.modality_a, p.modality_b) == (Modality::Opt, Modality::Sar))
        .map(|(_, p)| fixed_sample(std::slice::from_ref(p), 0, &c3))
        .transpose()?
        .ok_or_else(|| Error::Format("smoke data has no OPT-SAR pair".into()))?;
    let routing = routing_gradients(&model, &probe, &c3)?;
    let allowed = ["assistant.OPT.", "assistant.SAR.", "assistant.OPT-SAR."];
    let stray = routing.assistants().into_iter().filter(|n| !allowed.iter().any(|a| n.starts_with(a))).count();
    let plan3 = c3.plan()?;
    let outside = routing.planned.iter().filter(|n| !plan3.is_trainable(n)).count();
    lines.push(criterion(5, json!({"stray_assistants": stray, "outside_plan": outside}), Some(stray == 0 && outside == 0)));
    let q = s1.final_eval().unwrap_or_default();
    lines.push(criterion(6, json!({"precision": q.precision(), "recall": q.recall()}), None));
    lines.push(criterion(7, json!({"auc10": auc.values[2]}), None));
    let hv_gap = rmse.map_or(0.0, |r| (r.hv * r.hv - r.h * r.h - r.v * r.v).abs());
    let monotone = curve.values.windows(2).all(|w| w[0] <= w[1]);
    lines.push(criterion(8, json!({"hv_gap": hv_gap, "mma_monotone": monotone}), Some(hv_gap < 1e-9 && monotone)));
    let (sm, heat, range) = evaluated
        .first()
        .map(|(m, _)| softmax_checks(m))
        .transpose()?
        .unwrap_or((0.0, 0.0, 0.0));
    lines.push(criterion(
        9,
        json!({"softmax_sum_gap": sm, "heatmap_sum_gap": heat}),
        Some(sm < 1e-6 && heat < 1e-6 && range == 0.0),
    ));
    let mut all = Vec::new();
    for l in &lines {
        all.extend_from_slice(l.to_string().as_bytes());
    }
    lines.push(criterion(10, json!(hex(fnv1a(&all))), None));
    lap("checks", &mut timings);

    let out = SmokeOutcome { lines, timings };
    fs::write(out_dir.join("report.jsonl"), out.report_text())?;
    Ok(out)
}
