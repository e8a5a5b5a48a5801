use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ufm_core::augment::build_gt_matrix;
use ufm_core::evalkit::{
    auc_rows, displacements, homography_auc, mma, mma_rows, rmse_from_displacements, rmse_rows, threshold_accuracy, to_csv, to_table, GtMap,
    MetricRow, ACC_THRESHOLDS, AUC_THRESHOLDS, MMA_THRESHOLDS,
};
use ufm_core::geometry::{Homography, Point, RansacConfig};
use ufm_core::matching::MatchSet;
use ufm_core::model::{Checkpoint, MiaModel, Phase};
use ufm_core::pipeline::{fnv1a, gradcheck_suite, inference_phase, match_images, run_gradcheck, GradcheckCase};
use ufm_core::synthdata::{gen_dataset, parse_modes, read_pgm, write_pgm, DatasetConfig, GeometryKind, Manifest, Modality, SceneGeometry};
use ufm_core::trainer::{fixed_sample, run_stage, stage_tag, starting_model, StageConfig};

use crate::args::*;
use crate::usage;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli.seed, a),
        Command::Augment(a) => augment(cli.seed, a),
        Command::Pretrain(a) => pretrain(cli.seed, a),
        Command::Finetune(a) => finetune(cli.seed, a),
        Command::Match(a) => match_cmd(cli.seed, a),
        Command::Eval(a) => eval(cli.seed, a),
        Command::Gradcheck(a) => gradcheck(cli.seed, a),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn gen_data(seed: u64, a: &GenDataArgs) -> Result<()> {
    let cfg = DatasetConfig {
        pairs: a.pairs,
        modes: parse_modes(&a.modes)?,
        size: a.size,
        geometry: match a.geometry {
            GeometryArg::Registered => GeometryKind::Registered,
            GeometryArg::Homography => GeometryKind::Homography,
            GeometryArg::TwoView => GeometryKind::TwoView,
        },
        warp: a.warp,
    };
    let m = gen_dataset(&a.out, seed, &cfg)?;
    println!("wrote {} pairs to {}", m.entries.len(), a.out.display());
    Ok(())
}

/// Defaults, then the config file, then `--set` pairs, with `seed` forced to the global flag.
fn load_config(path: Option<&Path>, sets: &[String], seed: u64) -> Result<StageConfig> {
    let mut cfg = StageConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.seed = seed;
    Ok(cfg)
}

fn augment(seed: u64, a: &AugmentArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &[], seed)?;
    if let Some(c) = a.crop {
        cfg.crop = c;
    }
    if a.no_plus_one {
        cfg.eq5_plus_one = false;
    }
    cfg.validate()?;
    let manifest = Manifest::read(&a.manifest)?;
    let pairs = manifest.entries.iter().map(|e| manifest.load_pair(e)).collect::<ufm_core::Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out)?;
    for (i, e) in manifest.entries.iter().enumerate() {
        let s = fixed_sample(&pairs, i, &cfg)?;
        write_pgm(a.out.join(format!("{}_a.pgm", e.id)), &s.aug.image_a)?;
        write_pgm(a.out.join(format!("{}_b.pgm", e.id)), &s.aug.image_b)?;
        let gt = build_gt_matrix(&s.aug);
        fs::write(a.out.join(format!("{}.gt", e.id)), gt.serialize())?;
        println!("{} gt_matches={} masked_a={} masked_b={}", e.id, gt.match_count(), s.aug.mask_a.len(), s.aug.mask_b.len());
    }
    Ok(())
}

fn modality(s: &str) -> Result<Modality> {
    s.parse().map_err(|e: ufm_core::Error| usage(e.to_string()))
}

fn modality_pair(s: &str) -> Result<(Modality, Modality)> {
    let v = parse_modes(s).map_err(|e| usage(e.to_string()))?;
    match v.as_slice() {
        [p] => Ok(*p),
        _ => Err(usage(format!("expected one modality pair like `opt:sar`, got `{s}`"))),
    }
}

fn train(phase: Phase, pair: Option<(Modality, Modality)>, t: &TrainArgs, seed: u64, tenth: Option<bool>) -> Result<()> {
    let mut cfg = load_config(t.config.as_deref(), &t.set, seed)?;
    cfg.phase = phase;
    if let Some((ma, mb)) = pair {
        cfg.modality_a = ma;
        cfg.modality_b = mb;
    }
    if let Some(s) = t.steps {
        cfg.steps = s;
    }
    if let Some(lr) = t.lr {
        cfg.lr = lr;
    }
    if let Some(v) = tenth {
        cfg.tenth = v;
    }
    cfg.validate()?;
    let init = match &t.init {
        Some(p) => Some(MiaModel::from_checkpoint(&Checkpoint::read(p)?, &cfg.model).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let model = starting_model(&cfg, init)?;
    let manifest = Manifest::read(&t.data).with_context(|| format!("reading manifest {}", t.data.display()))?;
    fs::create_dir_all(&t.out)?;
    let out = run_stage(&cfg, &manifest, Some(model), Some(&t.out))?;
    if out.skipped {
        println!("{}: skipped (fine-tuning switched off)", stage_tag(&cfg));
        return Ok(());
    }
    let last = out.reports.last().copied().unwrap_or_default();
    println!("{}: {} steps, final loss {:.6}", stage_tag(&cfg), out.reports.len(), last.loss_total);
    if let Some(q) = out.final_eval() {
        println!("holdout precision {:.4} recall {:.4}", q.precision(), q.recall());
    }
    if let Some(p) = &out.checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn pretrain(seed: u64, a: &PretrainArgs) -> Result<()> {
    let (phase, pair) = match a.stage {
        1 => (Phase::Pretrain1, None),
        2 => {
            let m = modality(a.modality.as_deref().ok_or_else(|| usage("stage 2 needs --modality"))?)?;
            (Phase::Pretrain2, Some((m, m)))
        }
        _ => (Phase::Pretrain3, Some(modality_pair(a.pair.as_deref().ok_or_else(|| usage("stage 3 needs --pair"))?)?)),
    };
    train(phase, pair, &a.train, seed, None)
}

fn finetune(seed: u64, a: &FinetuneArgs) -> Result<()> {
    let (phase, pair) = match a.mode {
        FinetuneMode::Same => {
            let m = modality(a.modality.as_deref().ok_or_else(|| usage("--mode same needs --modality"))?)?;
            (Phase::FinetuneSame, (m, m))
        }
        FinetuneMode::Cross => (
            Phase::FinetuneCross,
            modality_pair(a.pair.as_deref().ok_or_else(|| usage("--mode cross needs --pair"))?)?,
        ),
    };
    train(phase, Some(pair), &a.train, seed, a.all_data.then_some(false))
}

fn match_cmd(seed: u64, a: &MatchArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &[], seed)?;
    let model = MiaModel::from_checkpoint(&Checkpoint::read(&a.ckpt)?, &cfg.model)?;
    let mut params = cfg.match_params();
    params.window = a.window;
    let run_one = |img_a: &Path, img_b: &Path, ma: Modality, mb: Modality, out: &Path| -> Result<usize> {
        let (ia, ib) = (read_pgm(img_a)?, read_pgm(img_b)?);
        let mut opts = cfg.forward_options();
        opts.phase = inference_phase(ma, mb);
        let m = match_images(&model, &ia, &ib, [ma, mb], &opts, &params)?;
        let set = if a.coarse { m.coarse } else { m.refined };
        set.write(out)?;
        Ok(set.len())
    };
    match (&a.manifest, &a.image_a, &a.image_b) {
        (Some(mp), _, _) => {
            let manifest = Manifest::read(mp)?;
            fs::create_dir_all(&a.out)?;
            for e in &manifest.entries {
                let out = a.out.join(format!("{}.txt", e.id));
                let n = run_one(&manifest.root.join(&e.image_a), &manifest.root.join(&e.image_b), e.modality_a, e.modality_b, &out)?;
                println!("{} {n} matches", e.id);
            }
        }
        (None, Some(ia), Some(ib)) => {
            let n = run_one(ia, ib, modality(&a.modality_a)?, modality(&a.modality_b)?, &a.out)?;
            println!("{n} matches written to {}", a.out.display());
        }
        _ => return Err(usage("match needs --manifest or both --image-a and --image-b")),
    }
    Ok(())
}

fn eval_inputs(a: &EvalArgs) -> Result<Vec<(MatchSet, SceneGeometry)>> {
    let mut files: Vec<(PathBuf, PathBuf)> = Vec::new();
    if let Some(mp) = &a.manifest {
        let manifest = Manifest::read(mp)?;
        let dir = a.matches_dir.as_ref().expect("clap enforces --matches-dir");
        for e in &manifest.entries {
            let m = dir.join(format!("{}.txt", e.id));
            if m.exists() {
                files.push((m, manifest.root.join(&e.geom_file)));
            }
        }
    } else {
        if a.matches.len() != a.gt.len() || a.matches.is_empty() {
            return Err(usage(format!(
                "eval needs matching counts of --matches and --gt (got {} and {})",
                a.matches.len(),
                a.gt.len()
            )));
        }
        files = a.matches.iter().cloned().zip(a.gt.iter().cloned()).collect();
    }
    if files.is_empty() {
        return Err(usage("no match files to evaluate"));
    }
    files
        .into_iter()
        .map(|(m, g)| {
            let set = MatchSet::read(&m).with_context(|| format!("reading {}", m.display()))?;
            let geom = SceneGeometry::parse(&fs::read_to_string(&g)?).with_context(|| format!("parsing {}", g.display()))?;
            Ok((set, geom))
        })
        .collect()
}

fn eval(seed: u64, a: &EvalArgs) -> Result<()> {
    let inputs = eval_inputs(a)?;
    let maps: Vec<Box<dyn Fn(Point) -> Option<Point> + '_>> = inputs
        .iter()
        .map(|(_, g)| Box::new(move |p: Point| g.map(p)) as Box<dyn Fn(Point) -> Option<Point>>)
        .collect();
    let with_maps: Vec<(&MatchSet, GtMap)> = inputs.iter().zip(&maps).map(|((s, _), f)| (s, f.as_ref() as GtMap)).collect();
    let rows: Vec<MetricRow> = match a.metric {
        Metric::Mma => {
            let curve = mma(&with_maps, &MMA_THRESHOLDS);
            if curve.empty_warning {
                eprintln!("warning: at least one match set was empty");
            }
            if let Some(p) = &a.curve {
                let mut text = String::from("threshold,value\n");
                for (t, v) in curve.thresholds.iter().zip(&curve.values) {
                    text.push_str(&format!("{t},{v:.6}\n"));
                }
                fs::write(p, text)?;
            }
            mma_rows(&curve)
        }
        Metric::Auc | Metric::Acc => {
            let (w, h) = match (a.width, a.height) {
                (Some(w), Some(h)) => (w, h),
                _ => return Err(usage("auc and acc need --width and --height")),
            };
            let hs: Vec<&Homography> = inputs
                .iter()
                .map(|(_, g)| g.homography().ok_or_else(|| usage("auc and acc need homography ground truth")))
                .collect::<Result<_>>()?;
            let pairs: Vec<(&MatchSet, &Homography)> = inputs.iter().map(|(s, _)| s).zip(hs).collect();
            let ransac = RansacConfig {
                seed,
                ..Default::default()
            };
            if a.metric == Metric::Auc {
                auc_rows("auc", &homography_auc(&pairs, w, h, &AUC_THRESHOLDS, &ransac))
            } else {
                auc_rows("acc", &threshold_accuracy(&pairs, w, h, &ACC_THRESHOLDS, &ransac))
            }
        }
        Metric::Rmse => {
            let d: Vec<(f64, f64)> = with_maps.iter().flat_map(|(s, f)| displacements(s, *f)).collect();
            rmse_rows(&rmse_from_displacements(&d)?)
        }
    };
    if let Some(p) = &a.csv {
        fs::write(p, to_csv(&rows))?;
    }
    print!("{}", to_table(&rows));
    Ok(())
}

fn gradcheck(seed: u64, a: &GradcheckArgs) -> Result<()> {
    let results = if a.case.is_empty() {
        gradcheck_suite(seed, a.instances)?
    } else {
        let mut out = Vec::new();
        for name in &a.case {
            let case: GradcheckCase = name.parse().map_err(|e: ufm_core::Error| usage(e.to_string()))?;
            for i in 0..a.instances {
                out.push(run_gradcheck(case, seed, i)?);
            }
        }
        out
    };
    let mut failed = 0;
    for r in &results {
        println!("{} #{:<3} max_rel_error {:.3e} {}", r.case, r.instance, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(ufm_core::Error::NonFinite { op: "gradcheck" }).context(format!("{failed} of {} gradient checks exceeded tolerance", results.len()));
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::read(&a.path)?;
    let mut total = 0usize;
    for (name, t) in &ck.entries {
        let digest = fnv1a(&ck.segment(name).unwrap_or_default());
        total += t.data().len();
        if a.json {
            println!("{}", serde_json::json!({"name": name, "shape": t.shape(), "elements": t.data().len(), "fnv": format!("{digest:016x}")}));
        } else {
            println!("{name:<48} {:<16} {digest:016x}", format!("{:?}", t.shape()));
        }
    }
    if !a.json {
        println!("{} tensors, {total} values", ck.entries.len());
    }
    Ok(())
}

