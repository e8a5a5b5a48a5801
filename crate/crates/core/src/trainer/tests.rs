use std::path::PathBuf;

use super::*;
use crate::model::{glob_match, MiaModel, ModelConfig, Phase};
use crate::synthdata::{gen_pair, Manifest, ManifestEntry, Modality, PairMode, PairSpec, ScenePair};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d: 16,
        heads: 2,
        d_ffn: 16,
        d_coarse: 16,
        d_fine: 8,
        m_top: 1,
        ..Default::default()
    }
}

fn cfg(phase: Phase, a: Modality, b: Modality) -> StageConfig {
    StageConfig {
        phase,
        modality_a: a,
        modality_b: b,
        model: tiny_model(),
        crop: 32,
        lr: 1e-3,
        steps: 4,
        holdout: 0.0,
        weights: crate::losses::LossWeights {
            n_q: 8,
            ..Default::default()
        },
        seed: 3,
        ..Default::default()
    }
}

fn pair(seed: u64, a: Modality, b: Modality) -> ScenePair {
    let mode = if a == b { PairMode::SameModal } else { PairMode::CrossModal };
    gen_pair(
        seed,
        &PairSpec {
            mode,
            modality_a: a,
            modality_b: b,
            size: 48,
            warp: Some(3.0),
        },
    )
    .unwrap()
}

fn sample(seed: u64, c: &StageConfig) -> Sample {
    prepare_sample(&pair(seed, c.modality_a, c.modality_b), &c.augment_config(), seed).unwrap()
}

fn segments(m: &MiaModel) -> Vec<(String, Vec<u8>)> {
    let ck = m.to_checkpoint();
    m.params().names().map(|n| (n.to_string(), ck.segment(n).unwrap())).collect()
}

#[test]
fn config_parsing() {
    let c = StageConfig::parse(
        "# comment\nstage = pretrain-3\nmodality_a = opt\nmodality_b = sar\nsteps = 7\nlr = 0.001 # inline\nhidden = 32\nablate_C = true\ncoarse_norm = points\n",
    )
    .unwrap();
    assert_eq!(c.phase, Phase::Pretrain3);
    assert_eq!((c.modality_a, c.modality_b), (Modality::Opt, Modality::Sar));
    assert_eq!(c.steps, 7);
    assert_eq!(c.lr, 1e-3);
    assert_eq!((c.model.d, c.model.d_ffn, c.model.d_fine), (32, 64, 16));
    assert!(!c.ablation.assistant_ffn);
    assert!(c.ablation.generic_ffn);
    assert_eq!(c.coarse_norm, crate::losses::CoarseNorm::Points);
}

#[test]
fn config_errors() {
    for bad in [
        "bogus = 1",
        "steps = many",
        "stage = pretrain-9",
        "tenth = perhaps",
        "no equals sign",
        "stage = pretrain-2\nmodality_a = opt\nmodality_b = sar",
    ] {
        let e = StageConfig::parse(bad).unwrap_err();
        assert_eq!(e.kind(), crate::ErrorKind::Usage, "{bad}: {e}");
    }
}

#[test]
fn every_documented_key_is_accepted() {
    let values = [
        ("stage", "pretrain-1"),
        ("modality_a", "opt"),
        ("modality_b", "opt"),
        ("coarse_norm", "entries"),
    ];
    for key in CONFIG_KEYS {
        let v = values.iter().find(|(k, _)| k == key).map_or(
            if key.starts_with("ablate") || ["tenth", "eq5_plus_one", "fresh_augment"].contains(key) {
                "false"
            } else if ["lr", "alpha", "beta", "lambda", "tau", "theta", "holdout"].contains(key) {
                "0.5"
            } else {
                "8"
            },
            |(_, v)| v,
        );
        StageConfig::default().set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
    }
}

#[test]
fn empty_plan_changes_nothing() {
    let c = cfg(Phase::Pretrain1, Modality::Opt, Modality::Opt);
    let mut m = MiaModel::new(c.model.clone(), 1).unwrap();
    let before = m.to_checkpoint().to_bytes().unwrap();
    let mut st = AdamState::default();
    let batch = [sample(1, &c)];
    let r = train_step(&mut m, &batch, &FreezePlan::empty(), &c.optimizer(), &mut st, &c, 1).unwrap();
    assert!(r.loss_total.is_finite());
    assert_eq!(m.to_checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn stage_two_step_keeps_attention() {
    let c = cfg(Phase::Pretrain2, Modality::Sar, Modality::Sar);
    let mut m = MiaModel::new(c.model.clone(), 2).unwrap();
    let attn = |n: &str| glob_match("layer*.attn.*", n);
    let sar = |n: &str| n.starts_with("assistant.SAR.");
    let (a0, s0) = (m.params().checksum(attn), m.params().checksum(sar));
    let mut st = AdamState::default();
    let batch = [sample(2, &c)];
    train_step(&mut m, &batch, &c.plan().unwrap(), &c.optimizer(), &mut st, &c, 1).unwrap();
    assert_eq!(m.params().checksum(attn), a0);
    assert_ne!(m.params().checksum(sar), s0);
}

#[test]
fn frozen_parameters_survive_every_stage() {
    use Modality::*;
    let stages = [
        (Phase::Pretrain1, Opt, Opt),
        (Phase::Pretrain2, Nir, Nir),
        (Phase::Pretrain3, Opt, Sar),
        (Phase::FinetuneSame, Depth, Depth),
        (Phase::FinetuneCross, Opt, Nir),
    ];
    for (k, (phase, a, b)) in stages.into_iter().enumerate() {
        let c = StageConfig {
            steps: 3,
            seed: 10 + k as u64,
            ..cfg(phase, a, b)
        };
        let init = MiaModel::new(c.model.clone(), 5).unwrap();
        let pairs: Vec<ScenePair> = (0..2).map(|i| pair(100 + i, a, b)).collect();
        let out = run_stage_pairs(&c, &pairs, Some(init.clone()), None).unwrap();
        let plan = c.plan().unwrap();
        let mut changed = 0;
        for ((name, before), (_, after)) in segments(&init).iter().zip(segments(&out.model)) {
            if plan.is_trainable(name) {
                changed += usize::from(*before != after);
            } else {
                assert_eq!(*before, after, "{phase}: frozen {name} changed");
            }
        }
        assert!(changed > 0, "{phase}: nothing trained");
    }
}

#[test]
fn stage_two_runs_commute() {
    let base = MiaModel::new(tiny_model(), 9).unwrap();
    let run = |m: Modality, init: MiaModel| {
        let c = cfg(Phase::Pretrain2, m, m);
        let pairs = [pair(40, m, m), pair(41, m, m)];
        (run_stage_pairs(&c, &pairs, Some(init), None).unwrap().model, c.plan().unwrap())
    };
    let (nir, nir_plan) = run(Modality::Nir, base.clone());
    let (sar, sar_plan) = run(Modality::Sar, base.clone());
    let ab = merge_trainable(&base, &[(&nir, &nir_plan), (&sar, &sar_plan)]).unwrap();
    let ba = merge_trainable(&base, &[(&sar, &sar_plan), (&nir, &nir_plan)]).unwrap();
    assert_eq!(ab.to_checkpoint().to_bytes().unwrap(), ba.to_checkpoint().to_bytes().unwrap());
    // Sequential chaining matches the parallel merge as well.
    let (seq, _) = run(Modality::Sar, nir.clone());
    assert_eq!(seq.to_checkpoint().to_bytes().unwrap(), ab.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn runs_are_deterministic() {
    let c = StageConfig {
        holdout: 0.34,
        ..cfg(Phase::Pretrain1, Modality::Opt, Modality::Opt)
    };
    let pairs: Vec<ScenePair> = (0..3).map(|i| pair(60 + i, Modality::Opt, Modality::Opt)).collect();
    let dir = tempfile::tempdir().unwrap();
    let a = run_stage_pairs(&c, &pairs, None, Some(&dir.path().join("a"))).unwrap();
    let b = run_stage_pairs(&c, &pairs, None, Some(&dir.path().join("b"))).unwrap();
    let ra = std::fs::read(a.checkpoint.unwrap()).unwrap();
    let rb = std::fs::read(b.checkpoint.unwrap()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.evals.len(), 1);
    let log = std::fs::read_to_string(dir.path().join("a/pretrain-1.metrics")).unwrap();
    assert!(log.starts_with(METRICS_HEADER));
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), c.steps);
    assert_eq!(rows[0].split_whitespace().count(), 5);
}

#[test]
fn final_checkpoint_reloads_with_optimizer_state() {
    let c = cfg(Phase::Pretrain1, Modality::Opt, Modality::Opt);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage_pairs(&c, &[pair(70, Modality::Opt, Modality::Opt)], None, Some(dir.path())).unwrap();
    let ck = crate::model::Checkpoint::read(out.checkpoint.unwrap()).unwrap();
    let m = MiaModel::from_checkpoint(&ck, &c.model).unwrap();
    assert_eq!(m.to_checkpoint().to_bytes().unwrap(), out.model.to_checkpoint().to_bytes().unwrap());
    let st = AdamState::from_checkpoint(&ck, m.params());
    assert_eq!(st, out.optimizer);
    assert_eq!(st.step, c.steps as u64);
}

#[test]
fn later_stages_need_a_checkpoint() {
    let c = cfg(Phase::Pretrain2, Modality::Sar, Modality::Sar);
    let e = run_stage_pairs(&c, &[pair(1, Modality::Sar, Modality::Sar)], None, None).unwrap_err();
    assert!(matches!(e, crate::Error::MissingPrerequisite(_)));
    let mut c = c;
    c.ablation.use_pretrained = false;
    c.steps = 1;
    assert!(run_stage_pairs(&c, &[pair(1, Modality::Sar, Modality::Sar)], None, None).is_ok());
}

#[test]
fn finetune_switch_off_is_a_no_op() {
    let mut c = cfg(Phase::FinetuneSame, Modality::Nir, Modality::Nir);
    c.ablation.finetune = false;
    let init = MiaModel::new(c.model.clone(), 4).unwrap();
    let out = run_stage_pairs(&c, &[pair(1, Modality::Nir, Modality::Nir)], Some(init.clone()), None).unwrap();
    assert!(out.skipped);
    assert_eq!(out.model.to_checkpoint().to_bytes().unwrap(), init.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn assistant_switch_off_freezes_nothing_into_assistants() {
    let mut c = cfg(Phase::Pretrain3, Modality::Opt, Modality::Sar);
    c.ablation.assistant_ffn = false;
    let init = MiaModel::new(c.model.clone(), 4).unwrap();
    let out = run_stage_pairs(&c, &[pair(1, Modality::Opt, Modality::Sar)], Some(init.clone()), None).unwrap();
    let asst = |n: &str| n.starts_with("assistant.");
    assert_eq!(out.model.params().checksum(asst), init.params().checksum(asst));
}

fn entry(id: usize, a: Modality, b: Modality) -> ManifestEntry {
    ManifestEntry {
        id: format!("p{id}"),
        modality_a: a,
        modality_b: b,
        geom_type: "H".into(),
        image_a: PathBuf::from("a.pgm"),
        image_b: PathBuf::from("b.pgm"),
        geom_file: PathBuf::from("g.txt"),
    }
}

#[test]
fn entry_selection() {
    use Modality::*;
    let mut entries = Vec::new();
    for i in 0..40 {
        entries.push(match i % 4 {
            0 => entry(i, Opt, Opt),
            1 => entry(i, Opt, Sar),
            2 => entry(i, Sar, Opt),
            _ => entry(i, Nir, Nir),
        });
    }
    let m = Manifest {
        root: PathBuf::from("."),
        entries,
    };
    let mut c = cfg(Phase::Pretrain3, Opt, Sar);
    assert_eq!(select_entries(&m, &c).unwrap().len(), 20);
    c.phase = Phase::FinetuneCross;
    let tenth = select_entries(&m, &c).unwrap();
    assert_eq!(tenth.len(), 2);
    assert_eq!(tenth, select_entries(&m, &c).unwrap());
    c.tenth = false;
    assert_eq!(select_entries(&m, &c).unwrap().len(), 20);
    c.phase = Phase::Pretrain1;
    assert_eq!(select_entries(&m, &c).unwrap().len(), 40);
    let c = cfg(Phase::Pretrain2, Depth, Depth);
    assert!(select_entries(&m, &c).is_err());
}

#[test]
fn overfitting_lowers_the_loss() {
    let c = StageConfig {
        steps: 40,
        lr: 3e-3,
        fresh_augment: false,
        ..cfg(Phase::Pretrain1, Modality::Opt, Modality::Opt)
    };
    let out = run_stage_pairs(&c, &[pair(80, Modality::Opt, Modality::Opt)], None, None).unwrap();
    let first = out.reports[..4].iter().map(|r| r.loss_total).sum::<f64>();
    let last = out.reports[36..].iter().map(|r| r.loss_total).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
}
