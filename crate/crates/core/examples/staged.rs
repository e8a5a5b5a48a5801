//! Ablation sweep on the staged task: `cargo run --example staged -- [budget] [lr] [variant]`.
//! Extra `key=value` settings can be passed as `UFM_CFG="a=1;b=2"`.

use std::time::Instant;

use ufm_core::losses::CoarseNorm;
use ufm_core::pipeline::{run_variant, staged_task, ABLATION_VARIANTS};
use ufm_core::trainer::StageConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let budget: usize = args.get(1).map_or(400, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(5e-4, |s| s.parse().unwrap());
    let mut base = StageConfig {
        lr,
        coarse_norm: CoarseNorm::Points,
        ..Default::default()
    };
    base.weights.beta = 0.05;
    if let Ok(extra) = std::env::var("UFM_CFG") {
        base.apply_text(&extra.replace(';', "\n")).unwrap();
    }
    let only: Option<u8> = args.get(3).map(|s| s.parse().unwrap());
    let task = staged_task(5, 24, 8, budget, base).unwrap();
    for (id, ..) in ABLATION_VARIANTS {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t = Instant::now();
        let r = run_variant(&task, id).unwrap();
        println!(
            "({id}) auc {:?} failures {} matches {} mma@3 {:.3} mma@10 {:.3} [{:.0}s]",
            r.auc.values,
            r.auc.failures,
            r.matches,
            r.mma.values[2],
            r.mma.values[9],
            t.elapsed().as_secs_f64()
        );
    }
}
