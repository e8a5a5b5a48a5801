//! FPN-lite encoder and the modal-assistant transformer.

mod checkpoint;
mod config;
mod forward;
mod params;
mod routing;

pub use checkpoint::Checkpoint;
pub use config::{AssistantKey, ModelConfig};
pub use forward::{positional_encoding, Encoded, FeatureMaps, ForwardOptions, LayerState, PairOutput};
pub use params::{glob_match, Bound, ParamStore};
pub use routing::{route, Phase};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform on ±1/√fan_in.
    FanIn(usize),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, Init), w: String, b: String, i: usize, o: usize, zero: bool| {
        push(w, vec![i, o], if zero { Init::Zeros } else { Init::FanIn(i) });
        push(b, vec![o], Init::Zeros);
    };
    let [c1, c2, c3] = cfg.stage_channels();
    let (d, df) = (cfg.d, cfg.d_fine);
    for (k, (ci, co)) in [(1, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
        push(format!("encoder.conv{}.w", k + 1), vec![3, 3, ci, co], Init::FanIn(9 * ci));
        push(format!("encoder.conv{}.b", k + 1), vec![co], Init::Zeros);
    }
    linear(&mut push, "encoder.proj.w".into(), "encoder.proj.b".into(), c3, d, false);
    for (k, c) in [c1, c2, c3].into_iter().enumerate() {
        linear(&mut push, format!("encoder.lat{}.w", k + 1), format!("encoder.lat{}.b", k + 1), c, df, false);
    }
    linear(&mut push, "encoder.fine_proj.w".into(), "encoder.fine_proj.b".into(), df, df, false);
    linear(&mut push, "encoder.fine_cond.w".into(), "encoder.fine_cond.b".into(), d, df, false);
    push("encoder.out_norm.gain".into(), vec![d], Init::Ones);
    push("encoder.out_norm.bias".into(), vec![d], Init::Zeros);
    for l in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            push(format!("layer{l}.{ln}.gain"), vec![d], Init::Ones);
            push(format!("layer{l}.{ln}.bias"), vec![d], Init::Zeros);
        }
        for block in ["self", "cross"] {
            for p in ["q", "k", "v", "o"] {
                let pre = format!("layer{l}.attn.{block}");
                linear(&mut push, format!("{pre}.w{p}"), format!("{pre}.b{p}"), d, d, false);
            }
        }
        linear(&mut push, format!("layer{l}.ffn.w1"), format!("layer{l}.ffn.b1"), d, cfg.d_ffn, false);
        linear(&mut push, format!("layer{l}.ffn.w2"), format!("layer{l}.ffn.b2"), cfg.d_ffn, d, false);
    }
    let a = cfg.assistant_width();
    for &key in &cfg.assistants {
        for l in cfg.assistant_layers(key) {
            let pre = format!("assistant.{key}.layer{l}");
            linear(&mut push, format!("{pre}.w1"), format!("{pre}.b1"), d, a, false);
            linear(&mut push, format!("{pre}.w2"), format!("{pre}.b2"), a, d, true);
        }
    }
    out
}

/// Encoder, shared attention, generic FFNs and the routed assistant FFNs.
#[derive(Debug, Clone, PartialEq)]
pub struct MiaModel {
    config: ModelConfig,
    params: ParamStore,
}

impl MiaModel {
    /// Freshly initialized model; assistant output projections start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::INIT);
        let mut params = ParamStore::new();
        for spec in layout(&config) {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(f) => {
                    let bound = 1.0 / (f as f32).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            params.insert(spec.name, Tensor::new(spec.shape, data)?)?;
        }
        Ok(MiaModel { config, params })
    }

    /// Wraps an existing registry after checking it against the layout for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::format(format!(
                "expected {} parameters for this configuration, found {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params.require(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::format(format!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(MiaModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Sets every assistant parameter to zero.
    pub fn zero_assistants(&mut self) {
        for i in 0..self.params.len() {
            if self.params.name(i).starts_with("assistant.") {
                self.params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds a model from checkpoint parameters. Shape-derived sizes come from
    /// the checkpoint; the head count (and `M` when no pair assistant is stored)
    /// come from `hint`.
    pub fn from_checkpoint(ck: &Checkpoint, hint: &ModelConfig) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            let t = ck.get(name).ok_or_else(|| Error::format(format!("checkpoint lacks {name}")))?;
            t.shape().get(axis).copied().ok_or_else(|| Error::format(format!("{name} has too few dimensions")))
        };
        let layers = (0..).take_while(|l| ck.get(&format!("layer{l}.ln1.gain")).is_some()).count();
        let mut keys: Vec<AssistantKey> = Vec::new();
        let mut first_pair_layer = None::<usize>;
        let is_param = |name: &str| {
            !name.ends_with(".adam_m")
                && !name.ends_with(".adam_v")
                && (name.starts_with("encoder.") || name.starts_with("layer") || name.starts_with("assistant."))
        };
        for (name, _) in ck.entries.iter().filter(|(n, _)| is_param(n)) {
            let Some(rest) = name.strip_prefix("assistant.") else { continue };
            let Some((key, tail)) = rest.split_once(".layer") else {
                return Err(Error::format(format!("malformed assistant parameter {name}")));
            };
            let key: AssistantKey = key.parse()?;
            let layer: usize = tail
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(format!("malformed assistant parameter {name}")))?;
            if key.is_pair() {
                first_pair_layer = Some(first_pair_layer.map_or(layer, |f| f.min(layer)));
            }
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let config = ModelConfig {
            layers,
            d: dim("encoder.out_norm.gain", 0)?,
            heads: hint.heads,
            d_ffn: dim("layer0.ffn.w1", 1)?,
            d_coarse: dim("encoder.conv3.w", 3)?,
            d_fine: dim("encoder.lat1.w", 1)?,
            m_top: first_pair_layer.map_or(hint.m_top, |f| layers.saturating_sub(f)),
            assistants: keys,
        };
        let mut params = ParamStore::new();
        for (name, t) in ck.entries.iter().filter(|(n, _)| is_param(n)) {
            params.insert(name.clone(), t.clone())?;
        }
        MiaModel::from_params(config, params)
    }
}

#[cfg(test)]
mod tests;
