//! Overfit probe: `cargo run --example overfit -- [steps] [lr] [beta]`.

use std::time::Instant;

use ufm_core::geometry::Mapped;
use ufm_core::model::Phase;
use ufm_core::pipeline::match_images;
use ufm_core::synthdata::{gen_pair, Modality, PairMode, PairSpec};
use ufm_core::trainer::{evaluate, fixed_sample, run_stage_pairs, StageConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(500, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-4, |s| s.parse().unwrap());
    let beta: f64 = args.get(3).map_or(0.5, |s| s.parse().unwrap());
    let mut cfg = StageConfig {
        phase: Phase::Pretrain1,
        steps,
        lr,
        holdout: 0.0,
        fresh_augment: false,
        seed: 11,
        ..Default::default()
    };
    cfg.weights.beta = beta;
    if let Ok(extra) = std::env::var("UFM_CFG") {
        cfg.apply_text(&extra.replace(';', "\n")).unwrap();
    }
    if let Some(a) = args.get(5) {
        cfg.weights.alpha = a.parse().unwrap();
    }
    if let Some(n) = args.get(4) {
        cfg.coarse_norm = n.parse().unwrap();
    }
    let pairs: Vec<_> = (0..8)
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
            .unwrap()
        })
        .collect();
    let t = Instant::now();
    let out = run_stage_pairs(&cfg, &pairs, None, None).unwrap();
    println!("{:.1}s", t.elapsed().as_secs_f64());
    for (k, r) in out.reports.iter().enumerate().filter(|(k, _)| k % 25 == 0) {
        println!("{k} {:.4} {:.4} {:.4} {:.3}", r.loss_c, r.loss_f, r.loss_total, r.quality.precision());
    }
    let samples: Vec<_> = (0..8).map(|i| fixed_sample(&pairs, i, &cfg).unwrap()).collect();
    let q = evaluate(&out.model, &samples, &cfg).unwrap();
    println!("precision {:.3} recall {:.3} ({:?})", q.precision(), q.recall(), q);
    for window in [None, Some(2usize), Some(3)] {
        let mut mp = cfg.match_params();
        mp.window = window;
        let (mut better, mut total, mut ec, mut ef) = (0, 0, 0.0, 0.0);
        for s in &samples {
            let m = match_images(&out.model, &s.aug.image_a, &s.aug.image_b, s.modality, &cfg.forward_options(), &mp).unwrap();
            for (c, r) in m.coarse.matches.iter().zip(&m.refined.matches) {
                if let Mapped::Inside(gt) = s.aug.map_a_to_b(c.a) {
                    let (dc, dr) = ((c.b - gt).norm(), (r.b - gt).norm());
                    if dc > 8.0 { continue; }
                    total += 1;
                    better += usize::from(dr < dc);
                    ec += dc;
                    ef += dr;
                }
            }
        }
        println!("window {window:?}: refined better {better}/{total}, mean coarse {:.3} fine {:.3}", ec / total as f64, ef / total as f64);
    }
}
