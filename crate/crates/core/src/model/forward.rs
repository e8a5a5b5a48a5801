use super::config::AssistantKey;
use super::params::Bound;
use super::routing::{route, Phase};
use super::MiaModel;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::numerics::{Real, Tape, Tensor, Var, LN_EPS};
use crate::synthdata::Modality;

/// Block switches for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub phase: Phase,
    /// When false the generic FFN output is replaced by zeros.
    pub generic_ffn: bool,
    /// When false the assistant FFN output is replaced by zeros.
    pub assistant_ffn: bool,
}

impl ForwardOptions {
    pub fn new(phase: Phase) -> Self {
        ForwardOptions {
            phase,
            generic_ffn: true,
            assistant_ffn: true,
        }
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[h/8, w/8, d_coarse]`
    pub coarse: Var,
    /// `[h/2, w/2, d_fine]`
    pub fine: Var,
}

/// Stored blocks of one layer, indexed by stream (0 = a, 1 = b).
#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub v_prime: [Var; 2],
    pub g: [Var; 2],
    pub a: [Var; 2],
    pub v: [Var; 2],
    pub keys: [AssistantKey; 2],
}

#[derive(Debug, Clone)]
pub struct PairOutput {
    /// `[N, d]` normalized coarse tokens.
    pub coarse: [Var; 2],
    /// `[(h/2)(w/2), d_fine]` fine features.
    pub fine: [Var; 2],
    /// Coarse grid as (rows, cols).
    pub coarse_hw: (usize, usize),
    /// Fine grid as (rows, cols).
    pub fine_hw: (usize, usize),
    pub layers: Vec<LayerState>,
}

/// Detached forward results for inference.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    pub coarse: [Tensor<f32>; 2],
    pub fine: [Tensor<f32>; 2],
    pub coarse_hw: (usize, usize),
    pub fine_hw: (usize, usize),
    pub d: usize,
}

/// Fixed 2-D sinusoidal encoding, `[rows * cols, d]`.
pub fn positional_encoding<T: Real>(rows: usize, cols: usize, d: usize) -> Tensor<T> {
    let q = d / 4;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for k in 0..q {
                let freq = 1.0 / 10000f64.powf(k as f64 / q as f64);
                let (x, y) = (c as f64 * freq, r as f64 * freq);
                data.extend([x.sin(), x.cos(), y.sin(), y.cos()].map(T::of));
            }
        }
    }
    Tensor::new(vec![rows * cols, d], data).expect("pe size")
}

fn repeat_indices(n: usize, factor: usize) -> Vec<usize> {
    (0..n * factor).map(|i| i / factor).collect()
}

/// Nearest-neighbour upsampling of a `[h, w, c]` grid.
fn upsample<T: Real>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let (h, w) = (tape.shape(x)[0], tape.shape(x)[1]);
    let rows = tape.gather(x, 0, &repeat_indices(h, factor))?;
    tape.gather(rows, 1, &repeat_indices(w, factor))
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(w)?)?;
    tape.add(y, p.var(b)?)
}

/// 1×1 convolution on a `[h, w, c]` grid.
fn pointwise<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = linear(tape, p, flat, &format!("{prefix}.w"), &format!("{prefix}.b"))?;
    let c = tape.shape(y)[1];
    tape.reshape(y, &[s[0], s[1], c])
}

fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = tape.layernorm(x, 1, LN_EPS)?;
    let g = tape.mul(n, p.var(&format!("{prefix}.gain"))?)?;
    tape.add(g, p.var(&format!("{prefix}.bias"))?)
}

fn mlp<T: Real>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, p, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = tape.gelu(h)?;
    linear(tape, p, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

/// Multi-head attention of `q_in` (`[Nq, d]`) over `kv_in` (`[Nk, d]`).
fn attention<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, heads: usize, q_in: Var, kv_in: Var) -> Result<Var> {
    let (nq, d) = (tape.shape(q_in)[0], tape.shape(q_in)[1]);
    let nk = tape.shape(kv_in)[0];
    let dh = d / heads;
    let proj = |tape: &mut Tape<T>, x: Var, n: usize, which: &str| -> Result<Var> {
        let y = linear(tape, p, x, &format!("{prefix}.w{which}"), &format!("{prefix}.b{which}"))?;
        let y = tape.reshape(y, &[n, heads, dh])?;
        tape.transpose(y, 0, 1)
    };
    let q = proj(tape, q_in, nq, "q")?;
    let k = proj(tape, kv_in, nk, "k")?;
    let v = proj(tape, kv_in, nk, "v")?;
    let kt = tape.transpose(k, 1, 2)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    let att = tape.softmax(s, 2)?;
    let o = tape.matmul(att, v)?;
    let o = tape.transpose(o, 0, 1)?;
    let o = tape.reshape(o, &[nq, d])?;
    linear(tape, p, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

impl MiaModel {
    /// Three stride-2 conv stages, then lateral 1×1 projections merged by 2×
    /// upsampling back to half resolution.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Encoded> {
        let s = tape.shape(img).to_vec();
        if s.len() != 3 || s[2] != 1 {
            return Err(Error::invalid(format!("encoder expects a [h, w, 1] image, got {s:?}")));
        }
        if s[0] % 8 != 0 || s[1] % 8 != 0 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid(format!("image size {}x{} is not divisible by 8", s[1], s[0])));
        }
        let mut x = img;
        let mut stages = Vec::with_capacity(3);
        for k in 1..=3 {
            let c = tape.conv2d(x, p.var(&format!("encoder.conv{k}.w"))?, 2, 1)?;
            let c = tape.add(c, p.var(&format!("encoder.conv{k}.b"))?)?;
            x = tape.gelu(c)?;
            stages.push(x);
        }
        let mut merged = pointwise(tape, p, stages[2], "encoder.lat3")?;
        for k in [2, 1] {
            let lat = pointwise(tape, p, stages[k - 1], &format!("encoder.lat{k}"))?;
            let up = upsample(tape, merged, 2)?;
            merged = tape.add(lat, up)?;
        }
        Ok(Encoded {
            coarse: stages[2],
            fine: merged,
        })
    }

    /// One layer: V' = MSCA(LN(X)) + X, then V = G + A + V' with G and A read
    /// from LN(V').
    pub fn mia_layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        layer: usize,
        x: [Var; 2],
        keys: [AssistantKey; 2],
        opts: &ForwardOptions,
    ) -> Result<LayerState> {
        for k in keys {
            if !self.config.has_assistant(k) || !self.config.assistant_layers(k).contains(&layer) {
                return Err(Error::UnknownAssistant(format!("{k} at layer {layer}")));
            }
        }
        let heads = self.config.heads;
        let pre = format!("layer{layer}");
        let z = [norm(tape, p, x[0], &format!("{pre}.ln1"))?, norm(tape, p, x[1], &format!("{pre}.ln1"))?];
        let sa = format!("{pre}.attn.self");
        let u = [
            attention(tape, p, &sa, heads, z[0], z[0])?,
            attention(tape, p, &sa, heads, z[1], z[1])?,
        ];
        let s = [tape.add(z[0], u[0])?, tape.add(z[1], u[1])?];
        let ca = format!("{pre}.attn.cross");
        let c = [
            attention(tape, p, &ca, heads, s[0], s[1])?,
            attention(tape, p, &ca, heads, s[1], s[0])?,
        ];
        let mut out = Vec::with_capacity(2);
        for i in 0..2 {
            let msca = tape.add(u[i], c[i])?;
            let v_prime = tape.add(msca, x[i])?;
            let y = norm(tape, p, v_prime, &format!("{pre}.ln2"))?;
            let rows = tape.shape(v_prime)[0];
            let zeros = || Tensor::zeros(&[rows, self.config.d]);
            let g = if opts.generic_ffn {
                mlp(tape, p, y, &format!("{pre}.ffn"))?
            } else {
                let z = zeros();
                tape.constant(z)
            };
            let a = if opts.assistant_ffn {
                mlp(tape, p, y, &format!("assistant.{}.{pre}", keys[i]))?
            } else {
                let z = zeros();
                tape.constant(z)
            };
            let ga = tape.add(g, a)?;
            let v = tape.add(ga, v_prime)?;
            out.push((v_prime, g, a, v));
        }
        Ok(LayerState {
            v_prime: [out[0].0, out[1].0],
            g: [out[0].1, out[1].1],
            a: [out[0].2, out[1].2],
            v: [out[0].3, out[1].3],
            keys,
        })
    }

    /// Full two-stream forward pass on `[h, w, 1]` image tensors.
    pub fn forward_pair<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        img: [Var; 2],
        modality: [Modality; 2],
        opts: &ForwardOptions,
    ) -> Result<PairOutput> {
        if tape.shape(img[0]) != tape.shape(img[1]) {
            return Err(Error::ShapeMismatch {
                op: "forward_pair",
                lhs: tape.shape(img[0]).to_vec(),
                rhs: tape.shape(img[1]).to_vec(),
            });
        }
        let enc = [self.encode(tape, p, img[0])?, self.encode(tape, p, img[1])?];
        let cs = tape.shape(enc[0].coarse).to_vec();
        let (h8, w8) = (cs[0], cs[1]);
        let n = h8 * w8;
        let pe = tape.constant(positional_encoding(h8, w8, self.config.d));
        let mut x = [enc[0].coarse; 2];
        for i in 0..2 {
            let flat = tape.reshape(enc[i].coarse, &[n, cs[2]])?;
            let t = linear(tape, p, flat, "encoder.proj.w", "encoder.proj.b")?;
            x[i] = tape.add(t, pe)?;
        }
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (ka, kb) = route(&self.config, modality[0], modality[1], l, opts.phase)?;
            let st = self.mia_layer(tape, p, l, x, [ka, kb], opts)?;
            x = st.v;
            layers.push(st);
        }
        let fs = tape.shape(enc[0].fine).to_vec();
        let (h2, w2, df) = (fs[0], fs[1], fs[2]);
        let mut coarse = x;
        let mut fine = x;
        for i in 0..2 {
            coarse[i] = norm(tape, p, x[i], "encoder.out_norm")?;
            let cond = linear(tape, p, coarse[i], "encoder.fine_cond.w", "encoder.fine_cond.b")?;
            let cond = tape.reshape(cond, &[h8, w8, df])?;
            let cond = upsample(tape, cond, 4)?;
            let cond = tape.reshape(cond, &[h2 * w2, df])?;
            let f = tape.reshape(enc[i].fine, &[h2 * w2, df])?;
            let f = linear(tape, p, f, "encoder.fine_proj.w", "encoder.fine_proj.b")?;
            fine[i] = tape.add(f, cond)?;
        }
        Ok(PairOutput {
            coarse,
            fine,
            coarse_hw: (h8, w8),
            fine_hw: (h2, w2),
            layers,
        })
    }

    /// Gradient-free forward pass on two images.
    pub fn infer(&self, a: &GrayImage, b: &GrayImage, modality: [Modality; 2], opts: &ForwardOptions) -> Result<FeatureMaps> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, &|_| false);
        let ia = tape.constant(a.to_tensor());
        let ib = tape.constant(b.to_tensor());
        let out = self.forward_pair(&mut tape, &p, [ia, ib], modality, opts)?;
        Ok(FeatureMaps {
            coarse: out.coarse.map(|v| tape.value(v).clone()),
            fine: out.fine.map(|v| tape.value(v).clone()),
            coarse_hw: out.coarse_hw,
            fine_hw: out.fine_hw,
            d: self.config.d,
        })
    }
}
