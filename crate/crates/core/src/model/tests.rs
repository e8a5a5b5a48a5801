use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{gradcheck_components, Real, Tape, Var};
use crate::synthdata::Modality::{self, *};

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 3,
        d: 16,
        heads: 2,
        d_ffn: 16,
        d_coarse: 8,
        d_fine: 4,
        m_top: 1,
        ..Default::default()
    }
}

fn randomize(model: &mut MiaModel, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..model.params().len() {
        if model.params().name(i).starts_with(prefix) {
            for v in model.params_mut().tensor_mut(i).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

fn random_image<T: Real>(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data = (0..h * w).map(|_| T::of(rng.random_range(-2.0..2.0))).collect();
    Tensor::new(vec![h, w, 1], data).unwrap()
}

fn run<T: Real>(
    model: &MiaModel,
    tape: &mut Tape<T>,
    imgs: [&Tensor<T>; 2],
    m: [Modality; 2],
    opts: &ForwardOptions,
) -> (Bound, PairOutput) {
    let p = model.params().bind(tape, &|_| true);
    let a = tape.constant(imgs[0].clone());
    let b = tape.constant(imgs[1].clone());
    let out = model.forward_pair(tape, &p, [a, b], m, opts).unwrap();
    (p, out)
}

#[test]
fn encoder_shapes_and_zero_input() {
    let model = MiaModel::new(tiny(), 1).unwrap();
    let mut tape = Tape::<f32>::new();
    let p = model.params().bind(&mut tape, &|_| false);
    let img = tape.constant(Tensor::zeros(&[32, 32, 1]));
    let enc = model.encode(&mut tape, &p, img).unwrap();
    assert_eq!(tape.shape(enc.coarse), &[4, 4, 8]);
    assert_eq!(tape.shape(enc.fine), &[16, 16, 4]);
    assert!(tape.value(enc.coarse).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(enc.fine).data().iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros(&[20, 32, 1]));
    assert!(model.encode(&mut tape, &p, bad).is_err());
}

#[test]
fn encoder_gradcheck_on_conv_weights() {
    let model = MiaModel::new(tiny(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img: Tensor<f64> = random_image(16, 16, &mut rng);
    for name in ["encoder.conv1.w", "encoder.conv2.w", "encoder.conv3.w"] {
        let w0: Tensor<f64> = model.params().get(name).unwrap().cast();
        let f = |t: &mut Tape<f64>, w: Var| {
            let mut p = model.params().bind(t, &|_| false);
            p.set(name, w)?;
            let x = t.constant(img.clone());
            let e = model.encode(t, &p, x)?;
            let a = t.sum(e.coarse, None)?;
            let b = t.sum(e.fine, None)?;
            t.add(a, b)
        };
        let comps: Vec<usize> = (0..w0.len()).step_by((w0.len() / 24).max(1)).collect();
        let err = gradcheck_components(f, &w0, 1e-6, &comps).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn registry_matches_analytic_count() {
    let cfg = ModelConfig::default();
    let model = MiaModel::new(cfg.clone(), 0).unwrap();
    assert_eq!(model.param_count(), cfg.param_count());
    assert_eq!(cfg.assistants.len(), 8);
    let t = tiny();
    assert_eq!(MiaModel::new(t.clone(), 0).unwrap().param_count(), t.param_count());
}

#[test]
fn names_follow_hierarchy() {
    let model = MiaModel::new(ModelConfig::default(), 0).unwrap();
    for name in model.params().names() {
        let ok = name.starts_with("encoder.")
            || (name.starts_with("layer") && name.split('.').count() >= 3)
            || (name.starts_with("assistant.") && name.contains(".layer"));
        assert!(ok, "{name}");
    }
    assert!(model.params().get("assistant.OPT-SAR.layer2.w1").is_some());
    assert!(model.params().get("assistant.OPT-SAR.layer1.w1").is_none());
    assert!(model.params().get("assistant.SAR.layer0.w2").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_identity_is_bit_exact() {
    let mut model = MiaModel::new(tiny(), 4).unwrap();
    randomize(&mut model, "assistant.", 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (random_image::<f32>(32, 32, &mut rng), random_image(32, 32, &mut rng));
    let mut tape = Tape::new();
    let (_, out) = run(&model, &mut tape, [&a, &b], [Opt, Sar], &ForwardOptions::new(Phase::FinetuneCross));
    for st in &out.layers {
        for s in 0..2 {
            let g = tape.value(st.g[s]).data();
            let av = tape.value(st.a[s]).data();
            let vp = tape.value(st.v_prime[s]).data();
            let v = tape.value(st.v[s]).data();
            assert!(av.iter().any(|&x| x != 0.0));
            for k in 0..v.len() {
                assert_eq!((g[k] + av[k] + vp[k]).to_bits(), v[k].to_bits());
            }
        }
    }
}

#[test]
fn zero_assistants_reduce_to_generic_transformer() {
    let mut model = MiaModel::new(tiny(), 7).unwrap();
    randomize(&mut model, "assistant.", 8);
    model.zero_assistants();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = (random_image::<f32>(32, 32, &mut rng), random_image(32, 32, &mut rng));
    let on = ForwardOptions::new(Phase::FinetuneCross);
    let off = ForwardOptions {
        assistant_ffn: false,
        ..on
    };
    let mut t1 = Tape::new();
    let (_, o1) = run(&model, &mut t1, [&a, &b], [Opt, Sar], &on);
    let mut t2 = Tape::new();
    let (_, o2) = run(&model, &mut t2, [&a, &b], [Opt, Sar], &off);
    for s in 0..2 {
        for (x, y) in t1.value(o1.coarse[s]).data().iter().zip(t2.value(o2.coarse[s]).data()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in t1.value(o1.fine[s]).data().iter().zip(t2.value(o2.fine[s]).data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_streams_stay_identical() {
    let mut model = MiaModel::new(tiny(), 10).unwrap();
    randomize(&mut model, "assistant.", 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_image::<f32>(32, 32, &mut rng);
    let mut tape = Tape::new();
    let (_, out) = run(&model, &mut tape, [&a, &a], [Nir, Nir], &ForwardOptions::new(Phase::FinetuneSame));
    for st in &out.layers {
        let (x, y) = (tape.value(st.v[0]).data(), tape.value(st.v[1]).data());
        let dist = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
        assert!(dist < 1e-5, "{dist}");
    }
}

#[test]
fn swapping_inputs_swaps_outputs() {
    let model = MiaModel::new(tiny(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (a, b) = (random_image::<f32>(32, 32, &mut rng), random_image(32, 32, &mut rng));
    let opts = ForwardOptions::new(Phase::FinetuneSame);
    let mut t1 = Tape::new();
    let (_, o1) = run(&model, &mut t1, [&a, &b], [Opt, Opt], &opts);
    let mut t2 = Tape::new();
    let (_, o2) = run(&model, &mut t2, [&b, &a], [Opt, Opt], &opts);
    for s in 0..2 {
        assert_eq!(t1.value(o1.coarse[s]), t2.value(o2.coarse[1 - s]));
        assert_eq!(t1.value(o1.fine[s]), t2.value(o2.fine[1 - s]));
    }
}

#[test]
fn assistant_gradcheck() {
    let mut model = MiaModel::new(tiny(), 15).unwrap();
    randomize(&mut model, "assistant.", 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a: Tensor<f64> = random_image(16, 16, &mut rng);
    let b: Tensor<f64> = random_image(16, 16, &mut rng);
    let opts = ForwardOptions::new(Phase::FinetuneCross);
    for name in ["assistant.OPT.layer0.w1", "assistant.SAR.layer1.w2", "assistant.OPT-SAR.layer2.w1"] {
        let w0: Tensor<f64> = model.params().get(name).unwrap().cast();
        let f = |t: &mut Tape<f64>, w: Var| {
            let mut p = model.params().bind(t, &|_| false);
            p.set(name, w)?;
            let (ia, ib) = (t.constant(a.clone()), t.constant(b.clone()));
            let out = model.forward_pair(t, &p, [ia, ib], [Opt, Sar], &opts)?;
            let last = out.layers.last().expect("layers").v;
            let s0 = t.sum(last[0], None)?;
            let s1 = t.sum(last[1], None)?;
            t.add(s0, s1)
        };
        let comps: Vec<usize> = (0..w0.len()).step_by(7).collect();
        let err = gradcheck_components(f, &w0, 1e-6, &comps).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn gradients_reach_only_routed_assistants() {
    let mut model = MiaModel::new(ModelConfig::default(), 18).unwrap();
    randomize(&mut model, "assistant.", 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (a, b) = (random_image::<f32>(32, 32, &mut rng), random_image(32, 32, &mut rng));
    let mut tape = Tape::new();
    let (p, out) = run(&model, &mut tape, [&a, &b], [Opt, Sar], &ForwardOptions::new(Phase::FinetuneCross));
    let s0 = tape.sum(out.coarse[0], None).unwrap();
    let f1 = tape.mul(out.fine[1], out.fine[1]).unwrap();
    let s1 = tape.sum(f1, None).unwrap();
    let root = tape.add(s0, s1).unwrap();
    let grads = tape.backward(root).unwrap();
    for (i, name) in model.params().names().enumerate() {
        let g = grads.get(p.at(i));
        let nonzero = g.is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        for other in ["NIR", "DEPTH", "UV"] {
            if name.starts_with(&format!("assistant.{other}.")) {
                assert!(!nonzero, "{name} received a gradient");
            }
        }
        if name.starts_with("assistant.OPT-SAR.") && name.ends_with(".w2") {
            assert!(nonzero, "{name} has no gradient");
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut model = MiaModel::new(ModelConfig::default(), 21).unwrap();
    randomize(&mut model, "assistant.", 22);
    let bytes = model.to_checkpoint().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let back = MiaModel::from_checkpoint(&ck, &ModelConfig::default()).unwrap();
    assert_eq!(back, model);
    let t = MiaModel::new(tiny(), 1).unwrap();
    let back = MiaModel::from_checkpoint(&t.to_checkpoint(), &tiny()).unwrap();
    assert_eq!(back.config(), t.config());
}

#[test]
fn unknown_pair_assistant_errors() {
    let model = MiaModel::new(tiny(), 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let a = random_image::<f32>(16, 16, &mut rng);
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, &|_| false);
    let (x, y) = (tape.constant(a.clone()), tape.constant(a));
    let r = model.forward_pair(&mut tape, &p, [x, y], [Sar, Uv], &ForwardOptions::new(Phase::FinetuneCross));
    assert!(matches!(r, Err(crate::Error::UnknownAssistant(_))));
}
