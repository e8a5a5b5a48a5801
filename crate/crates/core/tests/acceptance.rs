//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary so the summary lines are always printed. A criterion
//! that fails its threshold prints FAIL; the process exits non-zero only when a
//! criterion cannot be evaluated at all, or when `UFM_ACCEPTANCE_STRICT` is set.
//! `UFM_ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ufm_core::augment::PatchGrid;
use ufm_core::evalkit::{
    auc_from_errors, homography_auc, mma, rmse_from_displacements, AUC_THRESHOLDS, MMA_THRESHOLDS,
};
use ufm_core::geometry::{Homography, Mapped, Point, RansacConfig};
use ufm_core::losses::CoarseNorm;
use ufm_core::matching::{dual_softmax, expected_match, FeatureGrid, Match, MatchSet};
use ufm_core::model::{MiaModel, ModelConfig, Phase};
use ufm_core::numerics::Tensor;
use ufm_core::pipeline::{
    gradcheck_suite, gt_oracle_agreement, mask_bound_check, match_images, pipeline_smoke, routing_gradients, routing_split_holds,
    run_variant, staged_task, GradcheckCase, ABLATION_VARIANTS,
};
use ufm_core::synthdata::{dataset_pair, gen_pair, DatasetConfig, GeometryKind, Modality, PairMode, PairSpec, ScenePair};
use ufm_core::trainer::{evaluate, fixed_sample, merge_trainable, run_stage_pairs, StageConfig};

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// 1 -------------------------------------------------------------------------

fn gradients() -> Outcome {
    let results = gradcheck_suite(2024, 20).map_err(err)?;
    let mut worst = Vec::new();
    for case in GradcheckCase::ALL {
        let rs: Vec<_> = results.iter().filter(|r| r.case == case).collect();
        let max = rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        worst.push(format!("{}={max:.1e}/{}", case.name(), rs.len()));
    }
    let ok = results.iter().all(|r| r.passed()) && results.len() == 20 * GradcheckCase::ALL.len();
    Ok((ok, format!("max rel error {}", worst.join(" "))))
}

// 2 -------------------------------------------------------------------------

fn gt_oracle() -> Outcome {
    let verbatim = gt_oracle_agreement(7, 200, true).map_err(err)?;
    let plain = gt_oracle_agreement(7, 200, false).map_err(err)?;
    let ok = verbatim.rate() >= 0.95 && verbatim.unexplained == 0 && plain.non_boundary_rate() == 1.0;
    Ok((
        ok,
        format!(
            "agreement {:.2}% of {} rows (need 95%), unexplained {}, plain-rounding non-boundary agreement {:.2}%",
            100.0 * verbatim.rate(),
            verbatim.rows,
            verbatim.unexplained,
            100.0 * plain.non_boundary_rate()
        ),
    ))
}

// 3 -------------------------------------------------------------------------

fn mask_bounds() -> Outcome {
    let m = mask_bound_check(3, 1000).map_err(err)?;
    Ok((
        m.violations == 0 && m.draws == 1000,
        format!("{} draws, {} violations, sizes seen {}..={} within {}..={}", m.draws, m.violations, m.min_seen, m.max_seen, m.lo, m.hi),
    ))
}

// 4 -------------------------------------------------------------------------

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d: 16,
        heads: 2,
        d_ffn: 32,
        d_coarse: 16,
        d_fine: 8,
        m_top: 1,
        ..Default::default()
    }
}

fn small_stage(phase: Phase, a: Modality, b: Modality, seed: u64) -> StageConfig {
    StageConfig {
        phase,
        modality_a: a,
        modality_b: b,
        steps: 20,
        lr: 1e-3,
        model: small_model(),
        crop: 32,
        seed,
        holdout: 0.0,
        checkpoint_every: 0,
        tenth: false,
        ..Default::default()
    }
}

fn pairs_of(seed: u64, modes: &[(Modality, Modality)], n: usize) -> Vec<ScenePair> {
    let cfg = DatasetConfig {
        pairs: n,
        modes: modes.to_vec(),
        size: 48,
        geometry: GeometryKind::Homography,
        warp: 3.0,
    };
    (0..n).map(|i| dataset_pair(seed, &cfg, i).expect("synthetic pair")).collect()
}

fn frozen_changes(before: &MiaModel, after: &MiaModel, cfg: &StageConfig) -> Result<usize, String> {
    let plan = cfg.plan().map_err(err)?;
    let (cb, ca) = (before.to_checkpoint(), after.to_checkpoint());
    Ok(before.params().names().filter(|n| !plan.is_trainable(n)).filter(|n| cb.segment(n) != ca.segment(n)).count())
}

fn freeze_integrity() -> Outcome {
    let (opt, sar) = (Modality::Opt, Modality::Sar);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let stages = [
        (Phase::Pretrain1, opt, opt),
        (Phase::Pretrain2, sar, sar),
        (Phase::Pretrain3, opt, sar),
        (Phase::FinetuneSame, opt, opt),
        (Phase::FinetuneCross, opt, sar),
    ];
    let mut notes = Vec::new();
    let mut ok = true;
    for (phase, a, b) in stages {
        let seed = rng.random::<u64>();
        let cfg = small_stage(phase, a, b, seed);
        let base = MiaModel::new(cfg.model.clone(), seed ^ 1).map_err(err)?;
        let pairs = pairs_of(seed, &[(a, b)], 4);
        let out = run_stage_pairs(&cfg, &pairs, Some(base.clone()), None).map_err(err)?;
        let changed = frozen_changes(&base, &out.model, &cfg)?;
        let moved = base.params().checksum(|_| true) != out.model.params().checksum(|_| true);
        ok &= changed == 0 && moved && out.reports.len() == 20;
        notes.push(format!("{phase}:{changed}"));
    }
    let base = MiaModel::new(small_model(), 9).map_err(err)?;
    let co = small_stage(Phase::Pretrain2, opt, opt, 5);
    let cs = small_stage(Phase::Pretrain2, sar, sar, 5);
    let ro = run_stage_pairs(&co, &pairs_of(5, &[(opt, opt)], 4), Some(base.clone()), None).map_err(err)?.model;
    let rs = run_stage_pairs(&cs, &pairs_of(5, &[(sar, sar)], 4), Some(base.clone()), None).map_err(err)?.model;
    let (po, ps) = (co.plan().map_err(err)?, cs.plan().map_err(err)?);
    let m1 = merge_trainable(&base, &[(&ro, &po), (&rs, &ps)]).map_err(err)?;
    let m2 = merge_trainable(&base, &[(&rs, &ps), (&ro, &po)]).map_err(err)?;
    let seq = run_stage_pairs(&cs, &pairs_of(5, &[(sar, sar)], 4), Some(ro.clone()), None).map_err(err)?.model;
    let bytes = |m: &MiaModel| m.to_checkpoint().to_bytes().map_err(err);
    let commutes = bytes(&m1)? == bytes(&m2)? && bytes(&m1)? == bytes(&seq)?;
    ok &= commutes;
    Ok((ok, format!("changed frozen tensors per stage [{}], stage-2 merge commutes: {commutes}", notes.join(" "))))
}

// 5 -------------------------------------------------------------------------

fn routing() -> Outcome {
    let (opt, sar) = (Modality::Opt, Modality::Sar);
    let cfg = small_stage(Phase::Pretrain3, opt, sar, 12);
    let model = MiaModel::new(cfg.model.clone(), 12).map_err(err)?;
    let pair = gen_pair(
        12,
        &PairSpec {
            mode: PairMode::CrossModal,
            modality_a: opt,
            modality_b: sar,
            size: 48,
            warp: Some(3.0),
        },
    )
    .map_err(err)?;
    let sample = fixed_sample(std::slice::from_ref(&pair), 0, &cfg).map_err(err)?;
    let report = routing_gradients(&model, &sample, &cfg).map_err(err)?;
    let allowed = ["assistant.OPT.", "assistant.SAR.", "assistant.OPT-SAR."];
    let groups: BTreeSet<&str> = report
        .planned
        .iter()
        .map(|n| {
            if n.contains(".attn.") {
                "attention"
            } else if let Some(a) = allowed.iter().find(|a| n.starts_with(*a)) {
                a.trim_start_matches("assistant.").trim_end_matches('.')
            } else {
                "other"
            }
        })
        .collect();
    let stray: Vec<&str> = report.assistants().into_iter().filter(|n| !allowed.iter().any(|a| n.starts_with(a))).collect();
    let want: BTreeSet<&str> = ["attention", "OPT", "SAR", "OPT-SAR"].into_iter().collect();
    let split = routing_split_holds(9).map_err(err)?;
    let ok = groups == want && stray.is_empty() && split;
    Ok((
        ok,
        format!("gradient groups {groups:?}, stray assistants {}, L-M/M split for L<=9: {split}", stray.len()),
    ))
}

// 6 -------------------------------------------------------------------------

fn overfit_config() -> StageConfig {
    let mut cfg = StageConfig {
        phase: Phase::Pretrain1,
        steps: 500,
        lr: 1e-4,
        holdout: 0.0,
        checkpoint_every: 0,
        fresh_augment: false,
        coarse_norm: CoarseNorm::Points,
        seed: 11,
        ..Default::default()
    };
    cfg.set("hidden", "128").expect("valid key");
    cfg.weights.beta = 0.05;
    cfg
}

fn patch_index(grid: &PatchGrid, p: Point) -> usize {
    let (i, j) = ((p.x / grid.p as f64).floor() as usize, (p.y / grid.p as f64).floor() as usize);
    grid.index(i, j)
}

fn overfit() -> Outcome {
    let cfg = overfit_config();
    let pairs: Vec<ScenePair> = (0..8)
        .map(|i| {
            gen_pair(
                1000 + i,
                &PairSpec {
                    mode: PairMode::SameModal,
                    modality_a: Modality::Opt,
                    modality_b: Modality::Opt,
                    size: 96,
                    warp: Some(4.0),
                },
            )
        })
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let out = run_stage_pairs(&cfg, &pairs, None, None).map_err(err)?;
    let samples: Vec<_> = (0..pairs.len()).map(|i| fixed_sample(&pairs, i, &cfg)).collect::<Result<_, _>>().map_err(err)?;
    let q = evaluate(&out.model, &samples, &cfg).map_err(err)?;

    let (mut better, mut total) = (0usize, 0usize);
    for s in &samples {
        let m = match_images(&out.model, &s.aug.image_a, &s.aug.image_b, s.modality, &cfg.forward_options(), &cfg.match_params())
            .map_err(err)?;
        for (c, r) in m.coarse.matches.iter().zip(&m.refined.matches) {
            let Mapped::Inside(gt) = s.aug.map_a_to_b(c.a) else { continue };
            if s.gt.row(patch_index(&s.gt.grid, c.a)) != Some(patch_index(&s.gt.grid, c.b)) {
                continue;
            }
            total += 1;
            better += usize::from((r.b - gt).norm() < (c.b - gt).norm());
        }
    }
    let frac = if total == 0 { 0.0 } else { better as f64 / total as f64 };
    let ok = q.precision() >= 0.90 && q.recall() >= 0.80 && frac >= 0.90;
    Ok((
        ok,
        format!(
            "precision {:.3} (need 0.90), recall {:.3} (need 0.80), refinement closer than coarse on {better}/{total} = {:.1}% (need 90%)",
            q.precision(),
            q.recall(),
            100.0 * frac
        ),
    ))
}

// 7 -------------------------------------------------------------------------

fn staged_benefit() -> Outcome {
    let mut base = StageConfig {
        lr: 5e-4,
        coarse_norm: CoarseNorm::Points,
        ..Default::default()
    };
    base.weights.beta = 0.05;
    let task = staged_task(5, 24, 8, 600, base).map_err(err)?;
    let mut aucs = Vec::new();
    for (id, ..) in ABLATION_VARIANTS {
        let r = run_variant(&task, id).map_err(err)?;
        aucs.push((id, r.auc10(), r.steps));
    }
    let full = aucs.iter().find(|v| v.0 == 8).expect("full variant").1;
    let v1 = aucs.iter().find(|v| v.0 == 1).expect("variant 1").1;
    let equal_budget = aucs.iter().all(|v| v.2 == aucs[0].2);
    let ok = equal_budget && aucs.iter().all(|v| full >= v.1 - 2.0) && full >= v1 + 5.0;
    let listed: Vec<String> = aucs.iter().map(|(id, a, _)| format!("({id}) {a:.2}")).collect();
    Ok((ok, format!("AUC@10 {} at {} steps each", listed.join(", "), aucs[0].2)))
}

// 8 -------------------------------------------------------------------------

fn set_with_offsets(offsets: &[(f64, f64)]) -> MatchSet {
    MatchSet {
        matches: offsets
            .iter()
            .enumerate()
            .map(|(i, &(dx, dy))| {
                let a = Point::new(5.0 + i as f64, 7.0);
                Match {
                    a,
                    b: Point::new(a.x + dx, a.y + dy),
                    score: 1.0,
                    sigma2: None,
                }
            })
            .collect(),
    }
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_hv = 0.0f64;
    let mut monotone = true;
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let d: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-0.999..0.999), rng.random_range(-0.999..0.999))).collect();
        let r = rmse_from_displacements(&d).map_err(err)?;
        worst_hv = worst_hv.max((r.hv * r.hv - r.h * r.h - r.v * r.v).abs());
        let offsets: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..12.0), 0.0)).collect();
        let set = set_with_offsets(&offsets);
        let c = mma(&[(&set, &|p: Point| Some(p))], &MMA_THRESHOLDS);
        monotone &= c.values.windows(2).all(|w| w[0] <= w[1]);
    }

    let h = Homography::new(nalgebra::Matrix3::new(1.02, 0.03, 2.0, -0.02, 0.99, -1.5, 2e-4, -1e-4, 1.0)).map_err(err)?;
    let mut exact = MatchSet::default();
    for k in 0..30 {
        let a = Point::new(rng.random_range(0.0..96.0), rng.random_range(0.0..96.0));
        exact.matches.push(Match {
            a,
            b: h.apply(a).map_err(err)?,
            score: 1.0 - k as f64 * 0.01,
            sigma2: None,
        });
    }
    let perfect = homography_auc(&[(&exact, &h)], 96, 96, &AUC_THRESHOLDS, &RansacConfig::default());
    let perfect_ok = perfect.values.iter().all(|v| (v - 100.0).abs() < 1e-6);

    // hand-computed examples
    let three = set_with_offsets(&[(0.5, 0.0), (1.5, 0.0), (2.5, 0.0)]);
    let hand_mma = mma(&[(&three, &|p: Point| Some(p))], &[1.0, 2.0, 3.0]).values == vec![1.0 / 3.0, 2.0 / 3.0, 1.0];
    let hand_auc = auc_from_errors(&[5.0], &AUC_THRESHOLDS) == vec![0.0, 0.0, 50.0];
    let one = rmse_from_displacements(&[(0.6, 0.8)]).map_err(err)?;
    let hand_rmse1 = (one.h, one.v) == (0.6, 0.8) && (one.hv - 1.0).abs() < 1e-15;
    let two = rmse_from_displacements(&[(0.999, 0.0), (0.0, 0.0)]).map_err(err)?;
    let hand_rmse2 = (two.h - (0.999f64 * 0.999 / 2.0).sqrt()).abs() < 1e-15 && two.v == 0.0 && (two.hv - 0.7064).abs() < 1e-4;
    let hand = hand_mma && hand_auc && hand_rmse1 && hand_rmse2;

    let ok = worst_hv < 1e-9 && monotone && perfect_ok && hand;
    Ok((
        ok,
        format!(
            "max |HV²-H²-V²| {worst_hv:.1e}, MMA monotone {monotone}, perfect AUC {:?}, hand examples {hand}",
            perfect.values
        ),
    ))
}

// 9 -------------------------------------------------------------------------

fn grid_tensor(rows: usize, cols: usize, c: usize, mut f: impl FnMut(usize, usize) -> f32) -> Tensor<f32> {
    let mut d = Vec::with_capacity(rows * cols * c);
    for y in 0..rows {
        for x in 0..cols {
            for _ in 0..c {
                d.push(f(x, y));
            }
        }
    }
    Tensor::new(vec![rows * cols, c], d).expect("grid tensor")
}

fn dual_softmax_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut range_ok, mut worst_factor, mut worst_heat) = (true, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (na, nb) = (rng.random_range(2..40), rng.random_range(2..40));
        let s = Tensor::new(vec![na, nb], (0..na * nb).map(|_| rng.random_range(-1.0f64..1.0)).collect()).map_err(err)?;
        let tau = 0.1;
        let p = dual_softmax(&s, tau).map_err(err)?;
        range_ok &= p.data().iter().all(|v| (0.0..=1.0).contains(v));
        let scaled = s.map(|v| v / tau);
        let (row, col) = (scaled.softmax(1).map_err(err)?, scaled.softmax(0).map_err(err)?);
        for i in 0..na {
            worst_factor = worst_factor.max((row.data()[i * nb..(i + 1) * nb].iter().sum::<f64>() - 1.0).abs());
        }
        for j in 0..nb {
            worst_factor = worst_factor.max(((0..na).map(|i| col.data()[i * nb + j]).sum::<f64>() - 1.0).abs());
        }
        for (r, c) in row.data().iter().zip(col.data()).zip(p.data()).map(|((r, c), p)| (r - p, c - p)) {
            range_ok &= r >= -1e-15 && c >= -1e-15;
        }

        let (rows, cols, ch) = (rng.random_range(2..8), rng.random_range(2..8), 4);
        let a = grid_tensor(rows, cols, ch, |_, _| rng.random_range(-2.0..2.0));
        let b = grid_tensor(rows, cols, ch, |_, _| rng.random_range(-2.0..2.0));
        let (ga, gb) = (FeatureGrid::new(&a, rows, cols).map_err(err)?, FeatureGrid::new(&b, rows, cols).map_err(err)?);
        let e = expected_match(&ga, &gb, (cols / 2, rows / 2), None).map_err(err)?;
        worst_heat = worst_heat.max((e.heatmap.iter().sum::<f64>() - 1.0).abs());
    }
    let q = grid_tensor(1, 1, 1, |_, _| 1.0);
    let t = grid_tensor(3, 3, 1, |x, y| if y == 0 && (x == 0 || x == 2) { 0.0 } else { -1000.0 });
    let e = expected_match(&FeatureGrid::new(&q, 1, 1).map_err(err)?, &FeatureGrid::new(&t, 3, 3).map_err(err)?, (0, 0), None).map_err(err)?;
    let two_point = e.point == Point::new(1.0, 0.0) && e.sigma2 == 1.0;
    let ok = range_ok && worst_factor <= 1e-6 && worst_heat <= 1e-6 && two_point;
    Ok((
        ok,
        format!(
            "P in [0,1] and below both factors: {range_ok}, max factor normalization gap {worst_factor:.1e}, max heatmap gap {worst_heat:.1e}, two-point example ({}, {}) var {}",
            e.point.x, e.point.y, e.sigma2
        ),
    ))
}

// 10 ------------------------------------------------------------------------

fn tree_bytes(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).map_err(err)?.to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).map_err(err)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let (d1, d2) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let a = pipeline_smoke(7, d1.path()).map_err(err)?;
    let b = pipeline_smoke(7, d2.path()).map_err(err)?;
    let (ta, tb) = (tree_bytes(d1.path())?, tree_bytes(d2.path())?);
    let kinds = |t: &[(String, Vec<u8>)], ext: &str| t.iter().filter(|(n, _)| n.ends_with(ext)).count();
    let ok = a.report_text() == b.report_text() && ta == tb && kinds(&ta, ".ckpt") > 0 && kinds(&ta, ".txt") > 0;
    Ok((
        ok,
        format!(
            "{} files compared ({} checkpoints, {} match files, report {} lines), identical: {}",
            ta.len(),
            kinds(&ta, ".ckpt"),
            kinds(&ta, ".txt") - 1,
            a.lines.len(),
            ta == tb
        ),
    ))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradients),
        (2, "GT-matrix oracle", gt_oracle),
        (3, "mask bounds", mask_bounds),
        (4, "freeze integrity", freeze_integrity),
        (5, "routing fidelity", routing),
        (6, "desk-scale overfit", overfit),
        (7, "staged-training benefit", staged_benefit),
        (8, "metric identities", metric_identities),
        (9, "dual-softmax and expectation", dual_softmax_checks),
        (10, "determinism", determinism),
    ];
    let only: Option<BTreeSet<usize>> =
        std::env::var("UFM_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var_os("UFM_ACCEPTANCE_STRICT").is_some();
    let (mut failed, mut broken) = (Vec::new(), Vec::new());
    for (k, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&k)) {
            continue;
        }
        let t = Instant::now();
        let verdict = run();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok((true, detail)) => println!("criterion {k:>2} PASS {name}: {detail} [{secs:.0}s]"),
            Ok((false, detail)) => {
                println!("criterion {k:>2} FAIL {name}: {detail} [{secs:.0}s]");
                failed.push(k);
            }
            Err(e) => {
                println!("criterion {k:>2} ERROR {name}: {e} [{secs:.0}s]");
                broken.push(k);
            }
        }
    }
    println!("acceptance: {} failed {:?}, {} errored {:?}", failed.len(), failed, broken.len(), broken);
    if !broken.is_empty() || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
