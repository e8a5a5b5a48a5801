use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{fundamental_from_poses, Point};
use crate::losses::{loss_coarse, loss_cycle, loss_epipolar, loss_fine, loss_total, point_distance, CoarseNorm, FinePair};
use crate::matching::{dual_softmax_var, expected_match_var, heat_variance};
use crate::model::{ForwardOptions, MiaModel, ModelConfig, Phase};
use crate::numerics::{gradcheck, gradcheck_components, Tape, Tensor};
use crate::rng::split_seed;
use crate::synthdata::Modality;

/// Relative-error bound used by the suite.
pub const GRADCHECK_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckCase {
    Coarse,
    Epipolar,
    Cycle,
    Fine,
    Total,
    Model,
}

impl GradcheckCase {
    pub const ALL: [GradcheckCase; 6] = [
        GradcheckCase::Coarse,
        GradcheckCase::Epipolar,
        GradcheckCase::Cycle,
        GradcheckCase::Fine,
        GradcheckCase::Total,
        GradcheckCase::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradcheckCase::Coarse => "loss_coarse",
            GradcheckCase::Epipolar => "loss_epipolar",
            GradcheckCase::Cycle => "loss_cycle",
            GradcheckCase::Fine => "loss_fine",
            GradcheckCase::Total => "loss_total",
            GradcheckCase::Model => "model_forward",
        }
    }
}

impl fmt::Display for GradcheckCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradcheckCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradcheckCase::ALL
            .into_iter()
            .find(|c| c.name() == s || c.name().trim_start_matches("loss_") == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck case `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckResult {
    pub case: GradcheckCase,
    pub instance: usize,
    pub max_rel_error: f64,
}

impl GradcheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn gt_matrix(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        if rng.random_bool(0.7) {
            g[i * n + rng.random_range(0..n)] = 1.0;
        }
    }
    Tensor::from_f64(&[n, n], &g).expect("shape")
}

/// Fine-loss pipeline on feature map `a` against a fixed map `b`: expectation,
/// surrogate end-point term, cycle term, σ²-weighted sum. σ² is frozen at the
/// base point so the checked function matches the detached weighting.
fn fine_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let hw = (5, 5);
    let a = uniform(rng, &[25, 4], -1.0, 1.0);
    let b = uniform(rng, &[25, 4], -1.0, 1.0);
    let queries = [6, 7, 12, 17, 18];
    let targets: Vec<Point> = queries.iter().map(|_| Point::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0))).collect();
    let sigma2 = {
        let mut t = Tape::<f64>::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let e = expected_match_var(&mut t, va, vb, hw, &queries)?;
        heat_variance(t.value(e.heat), t.value(e.mean), hw.0, hw.1)
    };
    let lambda = rng.random_range(0.2..2.0);
    gradcheck(
        |t: &mut Tape<f64>, x| {
            let vb = t.constant(b.clone());
            let e = expected_match_var(t, x, vb, hw, &queries)?;
            let ep = point_distance(t, e.mean, &targets)?;
            let maps = FinePair {
                a: x,
                b: vb,
                a_hw: hw,
                b_hw: hw,
            };
            let cy = loss_cycle(t, &maps, &queries, e.mean)?;
            loss_fine(t, &sigma2, ep, cy, lambda)
        },
        &a,
        STEP,
    )
}

fn model_case(rng: &mut ChaCha8Rng, seed: u64, instance: usize) -> Result<f64> {
    let cfg = ModelConfig {
        layers: 2,
        d: 16,
        heads: 2,
        d_ffn: 16,
        d_coarse: 8,
        d_fine: 4,
        m_top: 1,
        ..Default::default()
    };
    let mut model = MiaModel::new(cfg, seed)?;
    // Non-zero assistant outputs so their branch is exercised.
    for i in 0..model.params().len() {
        if model.params().name(i).starts_with("assistant.") {
            for v in model.params_mut().tensor_mut(i).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    const NAMES: [&str; 6] = [
        "encoder.conv2.w",
        "layer0.attn.self.wq",
        "layer1.attn.cross.wv",
        "layer0.ffn.w1",
        "assistant.SAR.layer0.w2",
        "assistant.OPT-SAR.layer1.w1",
    ];
    let name = NAMES[instance % NAMES.len()];
    let ia = uniform(rng, &[16, 16, 1], -1.0, 1.0);
    let ib = uniform(rng, &[16, 16, 1], -1.0, 1.0);
    let wc = uniform(rng, &[4, 16], -1.0, 1.0);
    let wf = uniform(rng, &[64, 4], -1.0, 1.0);
    let w0: Tensor<f64> = model.params().require(name)?.cast();
    let comps: Vec<usize> = (0..24).map(|_| rng.random_range(0..w0.len())).collect();
    let opts = ForwardOptions::new(Phase::FinetuneCross);
    gradcheck_components(
        |t: &mut Tape<f64>, w| {
            let mut p = model.params().bind(t, &|_| false);
            p.set(name, w)?;
            let (a, b) = (t.constant(ia.clone()), t.constant(ib.clone()));
            let out = model.forward_pair(t, &p, [a, b], [Modality::Opt, Modality::Sar], &opts)?;
            let (wc, wf) = (t.constant(wc.clone()), t.constant(wf.clone()));
            let mut acc = None;
            for s in 0..2 {
                let c = t.mul(out.coarse[s], wc)?;
                let c = t.sum(c, None)?;
                let f = t.mul(out.fine[s], wf)?;
                let f = t.sum(f, None)?;
                let both = t.add(c, f)?;
                acc = Some(match acc {
                    None => both,
                    Some(prev) => t.add(prev, both)?,
                });
            }
            Ok(acc.expect("two streams"))
        },
        &w0,
        STEP,
        &comps,
    )
}

/// One randomized desk-scale gradient check; returns the worst relative error.
pub fn run_gradcheck(case: GradcheckCase, seed: u64, instance: usize) -> Result<GradcheckResult> {
    let s = split_seed(split_seed(seed, case as u64 + 100), instance as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let err = match case {
        GradcheckCase::Coarse => {
            let n = 8;
            let x = uniform(&mut rng, &[n, n], -0.5, 0.5);
            let gt = gt_matrix(&mut rng, n);
            let norm = if instance % 2 == 0 { CoarseNorm::Entries } else { CoarseNorm::Points };
            gradcheck(
                |t: &mut Tape<f64>, x| {
                    let p = dual_softmax_var(t, x, 0.1)?;
                    loss_coarse(t, p, &gt, norm)
                },
                &x,
                STEP,
            )?
        }
        GradcheckCase::Epipolar => {
            let k = Matrix3::new(40.0, 0.0, 16.0, 0.0, 40.0, 16.0, 0.0, 0.0, 1.0);
            let r = Rotation3::from_euler_angles(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let tv = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2));
            let f = fundamental_from_poses(&k, &k, r.matrix(), &tv)?;
            let n = 12;
            let queries: Vec<Point> = (0..n).map(|_| Point::new(rng.random_range(0.0..32.0), rng.random_range(0.0..32.0))).collect();
            let x = uniform(&mut rng, &[n, 2], 0.0, 32.0);
            gradcheck(
                |t: &mut Tape<f64>, x| {
                    let e = loss_epipolar(t, x, &queries, &f)?;
                    t.sum(e.dist, None)
                },
                &x,
                STEP,
            )?
        }
        GradcheckCase::Cycle => {
            let hw = (5, 6);
            let a = uniform(&mut rng, &[30, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[30, 4], -1.0, 1.0);
            let queries = [7, 8, 13, 14, 20];
            gradcheck(
                |t: &mut Tape<f64>, x| {
                    let vb = t.constant(b.clone());
                    let e = expected_match_var(t, x, vb, hw, &queries)?;
                    let maps = FinePair {
                        a: x,
                        b: vb,
                        a_hw: hw,
                        b_hw: hw,
                    };
                    let cy = loss_cycle(t, &maps, &queries, e.mean)?;
                    t.sum(cy, None)
                },
                &a,
                STEP,
            )?
        }
        GradcheckCase::Fine => fine_case(&mut rng)?,
        GradcheckCase::Total => {
            let n = 6;
            let x = uniform(&mut rng, &[n, n], -0.5, 0.5);
            let gt = gt_matrix(&mut rng, n);
            let targets: Vec<Point> = (0..n).map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let sigma2: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
            let (alpha, beta) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
            gradcheck(
                |t: &mut Tape<f64>, x| {
                    let p = dual_softmax_var(t, x, 0.1)?;
                    let lc = loss_coarse(t, p, &gt, CoarseNorm::Entries)?;
                    let pred = t.gather(x, 1, &[0, 1])?;
                    let ep = point_distance(t, pred, &targets)?;
                    let pred2 = t.gather(x, 1, &[2, 3])?;
                    let cy = point_distance(t, pred2, &targets)?;
                    let lf = loss_fine(t, &sigma2, ep, cy, 1.0)?;
                    loss_total(t, lc, lf, alpha, beta)
                },
                &x,
                STEP,
            )?
        }
        GradcheckCase::Model => model_case(&mut rng, s, instance)?,
    };
    Ok(GradcheckResult {
        case,
        instance,
        max_rel_error: err,
    })
}

/// `instances` randomized checks of every case.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<GradcheckResult>> {
    let mut out = Vec::with_capacity(GradcheckCase::ALL.len() * instances);
    for case in GradcheckCase::ALL {
        for i in 0..instances {
            out.push(run_gradcheck(case, seed, i)?);
        }
    }
    Ok(out)
}
