use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::step::sample_loss;
use super::{prepare_sample, train_step, AdamState, CoarseQuality, FreezePlan, Sample, StageConfig, StepReport};
use crate::error::{Error, Result};
use crate::model::MiaModel;
use crate::numerics::Tape;
use crate::rng::{split_seed, stream_rng, streams};
use crate::synthdata::{Manifest, ManifestEntry, Modality, ScenePair};

pub const METRICS_HEADER: &str = "# step loss_c loss_f loss_total precision@patch";

const AUGMENT_ATTEMPTS: u64 = 8;
const HOLDOUT_STREAM: u64 = 1 << 20;

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub model: MiaModel,
    pub optimizer: AdamState,
    pub reports: Vec<StepReport>,
    /// `(step, quality)` for every held-out evaluation.
    pub evals: Vec<(usize, CoarseQuality)>,
    /// The stage was switched off and left the model untouched.
    pub skipped: bool,
    pub checkpoint: Option<PathBuf>,
}

impl StageOutcome {
    pub fn final_eval(&self) -> Option<CoarseQuality> {
        self.evals.last().map(|e| e.1)
    }
}

/// File stem for a stage, e.g. `pretrain-3-OPT-SAR`.
pub fn stage_tag(cfg: &StageConfig) -> String {
    use crate::model::Phase::*;
    let (a, b) = (cfg.modality_a.name(), cfg.modality_b.name());
    match cfg.phase {
        Pretrain1 => "pretrain-1".into(),
        Pretrain2 | FinetuneSame => format!("{}-{a}", cfg.phase),
        Pretrain3 | FinetuneCross => format!("{}-{a}-{b}", cfg.phase),
    }
}

fn pair_matches(ma: Modality, mb: Modality, a: Modality, b: Modality) -> bool {
    (ma, mb) == (a, b) || (ma, mb) == (b, a)
}

/// Manifest entries whose modality pair equals `{a, b}` (either order). Stage 1
/// takes every entry. With `tenth`, a seeded tenth (at least one) is kept.
pub fn select_entries(manifest: &Manifest, cfg: &StageConfig) -> Result<Vec<ManifestEntry>> {
    let any = cfg.phase == crate::model::Phase::Pretrain1;
    let mut out: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| any || pair_matches(e.modality_a, e.modality_b, cfg.modality_a, cfg.modality_b))
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(Error::Format(format!(
            "manifest has no {}-{} pairs for stage {}",
            cfg.modality_a.name(),
            cfg.modality_b.name(),
            cfg.phase
        )));
    }
    if cfg.is_finetune() && cfg.tenth {
        let keep = out.len().div_ceil(10);
        let mut rng = stream_rng(cfg.seed, streams::SUBSAMPLE);
        let mut idx = rand::seq::index::sample(&mut rng, out.len(), keep).into_vec();
        idx.sort_unstable();
        out = idx.into_iter().map(|i| out[i].clone()).collect();
    }
    Ok(out)
}

/// Copies every parameter trainable under a part's plan from that part into
/// `base`. Overlapping parts must agree exactly.
pub fn merge_trainable(base: &MiaModel, parts: &[(&MiaModel, &FreezePlan)]) -> Result<MiaModel> {
    let mut out = base.clone();
    let mut owner: Vec<Option<usize>> = vec![None; base.params().len()];
    for (k, (m, plan)) in parts.iter().enumerate() {
        if m.params().len() != base.params().len() {
            return Err(Error::invalid("merged models have different registries"));
        }
        for i in 0..base.params().len() {
            let name = base.params().name(i);
            if !plan.is_trainable(name) {
                continue;
            }
            let t = m.params().tensor(i);
            if let Some(prev) = owner[i] {
                if parts[prev].0.params().tensor(i) != t {
                    return Err(Error::invalid(format!("parts {prev} and {k} disagree on {name}")));
                }
            }
            owner[i] = Some(k);
            *out.params_mut().tensor_mut(i) = t.clone();
        }
    }
    Ok(out)
}

fn augmented(pair: &ScenePair, cfg: &StageConfig, seed: u64) -> Result<Sample> {
    let acfg = cfg.augment_config();
    let mut last = None;
    for attempt in 0..AUGMENT_ATTEMPTS {
        match prepare_sample(pair, &acfg, split_seed(seed, attempt)) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Augmentation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Coarse quality of `model` summed over `samples`, without updating anything.
pub fn evaluate(model: &MiaModel, samples: &[Sample], cfg: &StageConfig) -> Result<CoarseQuality> {
    let mut q = CoarseQuality::default();
    for (k, s) in samples.iter().enumerate() {
        let mut tape = Tape::<f32>::new();
        let p = model.params().bind(&mut tape, &|_| false);
        let sl = sample_loss(model, &mut tape, &p, s, cfg, split_seed(cfg.seed, k as u64))?;
        q.add(&sl.report.quality);
    }
    Ok(q)
}

fn write_checkpoint(dir: &Path, name: &str, model: &MiaModel, state: &AdamState) -> Result<PathBuf> {
    let mut ck = model.to_checkpoint();
    state.append_to(&mut ck, model.params());
    let path = dir.join(name);
    ck.write(&path)?;
    Ok(path)
}

/// The augmentation a run with `fresh_augment = false` uses for pair `i`.
pub fn fixed_sample(pairs: &[ScenePair], i: usize, cfg: &StageConfig) -> Result<Sample> {
    augmented(&pairs[i], cfg, split_seed(split_seed(cfg.seed, streams::AUGMENT), i as u64))
}

/// Resolves the starting model, honouring the pretrained-checkpoint rule.
pub fn starting_model(cfg: &StageConfig, init: Option<MiaModel>) -> Result<MiaModel> {
    match init {
        Some(m) => Ok(m),
        None if cfg.phase == crate::model::Phase::Pretrain1 || !cfg.ablation.use_pretrained => {
            MiaModel::new(cfg.model.clone(), cfg.seed)
        }
        None => Err(Error::MissingPrerequisite(format!(
            "stage {} needs a pretrain-1 checkpoint (pass one, or switch pre-training off with ablate_D)",
            cfg.phase
        ))),
    }
}

/// Runs one stage over in-memory pairs. `out_dir` receives periodic and final
/// checkpoints plus an appended metrics log.
pub fn run_stage_pairs(
    cfg: &StageConfig,
    pairs: &[ScenePair],
    init: Option<MiaModel>,
    out_dir: Option<&Path>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut model = starting_model(cfg, init)?;
    if cfg.is_finetune() && !cfg.ablation.finetune {
        return Ok(StageOutcome {
            model,
            optimizer: AdamState::default(),
            reports: Vec::new(),
            evals: Vec::new(),
            skipped: true,
            checkpoint: None,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Format("no training pairs".into()));
    }
    let plan = cfg.plan()?;
    plan.validate(model.params())?;
    let opt = cfg.optimizer();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, HOLDOUT_STREAM));
    let n_hold = if pairs.len() > 1 {
        ((cfg.holdout * pairs.len() as f64).round() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let aug_seed = split_seed(cfg.seed, streams::AUGMENT);
    let holdout: Vec<Sample> = hold_idx
        .iter()
        .map(|&i| augmented(&pairs[i], cfg, split_seed(aug_seed, HOLDOUT_STREAM + i as u64)))
        .collect::<Result<_>>()?;
    let fixed: Vec<Sample> = if cfg.fresh_augment {
        Vec::new()
    } else {
        train_idx.iter().map(|&i| fixed_sample(pairs, i, cfg)).collect::<Result<_>>()?
    };

    let mut log = match out_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            let path = d.join(format!("{}.metrics", stage_tag(cfg)));
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let n = train_idx.len();
    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = usize::MAX;
    let mut state = AdamState::default();
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut noted_surrogate = false;
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.accumulate);
        for j in 0..cfg.accumulate {
            let slot = (step - 1) * cfg.accumulate + j;
            let epoch = slot / n;
            if epoch != perm_epoch {
                perm = (0..n).collect();
                perm.shuffle(&mut stream_rng(split_seed(cfg.seed, epoch as u64), streams::SHUFFLE));
                perm_epoch = epoch;
            }
            let local = perm[slot % n];
            batch.push(if cfg.fresh_augment {
                augmented(&pairs[train_idx[local]], cfg, split_seed(aug_seed, (slot as u64) << 20 | train_idx[local] as u64))?
            } else {
                fixed[local].clone()
            });
        }
        let r = train_step(&mut model, &batch, &plan, &opt, &mut state, cfg, step as u64)?;
        if let Some(f) = log.as_mut() {
            if r.surrogate && !noted_surrogate {
                writeln!(f, "# ep-surrogate: reprojection distance replaces the epipolar term for registered pairs")?;
                noted_surrogate = true;
            }
            writeln!(
                f,
                "{step} {:.6} {:.6} {:.6} {:.4}",
                r.loss_c,
                r.loss_f,
                r.loss_total,
                r.quality.precision()
            )?;
        }
        reports.push(r);
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps && !holdout.is_empty() {
            let q = evaluate(&model, &holdout, cfg)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "# eval {step} precision {:.4} recall {:.4}", q.precision(), q.recall())?;
            }
            evals.push((step, q));
        }
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                write_checkpoint(d, &format!("{}-step{step}.ckpt", stage_tag(cfg)), &model, &state)?;
            }
        }
    }
    if !holdout.is_empty() {
        let q = evaluate(&model, &holdout, cfg)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "# eval {} precision {:.4} recall {:.4}", cfg.steps, q.precision(), q.recall())?;
        }
        evals.push((cfg.steps, q));
    }
    let checkpoint = match out_dir {
        Some(d) => Some(write_checkpoint(d, &format!("{}.ckpt", stage_tag(cfg)), &model, &state)?),
        None => None,
    };
    Ok(StageOutcome {
        model,
        optimizer: state,
        reports,
        evals,
        skipped: false,
        checkpoint,
    })
}

/// Loads the manifest pairs selected for `cfg` and runs the stage.
pub fn run_stage(cfg: &StageConfig, manifest: &Manifest, init: Option<MiaModel>, out_dir: Option<&Path>) -> Result<StageOutcome> {
    let entries = select_entries(manifest, cfg)?;
    let pairs: Vec<ScenePair> = entries.iter().map(|e| manifest.load_pair(e)).collect::<Result<_>>()?;
    run_stage_pairs(cfg, &pairs, init, out_dir)
}
