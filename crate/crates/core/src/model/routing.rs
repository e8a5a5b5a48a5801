use std::fmt;
use std::str::FromStr;

use super::config::{AssistantKey, ModelConfig};
use crate::error::{Error, Result};
use crate::synthdata::Modality;

/// Training or inference regime that a forward pass runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain1,
    Pretrain2,
    Pretrain3,
    FinetuneSame,
    FinetuneCross,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Pretrain1,
        Phase::Pretrain2,
        Phase::Pretrain3,
        Phase::FinetuneSame,
        Phase::FinetuneCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain1 => "pretrain-1",
            Phase::Pretrain2 => "pretrain-2",
            Phase::Pretrain3 => "pretrain-3",
            Phase::FinetuneSame => "finetune-same",
            Phase::FinetuneCross => "finetune-cross",
        }
    }

    /// Inference phase appropriate for a modality pair.
    pub fn for_pair(a: Modality, b: Modality) -> Phase {
        if a == b {
            Phase::FinetuneSame
        } else {
            Phase::FinetuneCross
        }
    }

    pub fn check_pair(self, a: Modality, b: Modality) -> Result<()> {
        let ok = match self {
            Phase::Pretrain1 => true,
            Phase::Pretrain2 | Phase::FinetuneSame => a == b,
            Phase::Pretrain3 | Phase::FinetuneCross => a != b,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("phase {self} does not accept modality pair ({a},{b})")))
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

fn require(cfg: &ModelConfig, k: AssistantKey) -> Result<AssistantKey> {
    if cfg.has_assistant(k) {
        Ok(k)
    } else {
        Err(Error::UnknownAssistant(k.to_string()))
    }
}

/// Assistant keys for streams a and b at `layer`.
pub fn route(
    cfg: &ModelConfig,
    a: Modality,
    b: Modality,
    layer: usize,
    phase: Phase,
) -> Result<(AssistantKey, AssistantKey)> {
    if layer >= cfg.layers {
        return Err(Error::invalid(format!("layer {layer} out of range for L={}", cfg.layers)));
    }
    phase.check_pair(a, b)?;
    if a == b {
        let k = require(cfg, AssistantKey::Modal(a))?;
        return Ok((k, k));
    }
    if layer < cfg.first_top_layer() {
        Ok((require(cfg, AssistantKey::Modal(a))?, require(cfg, AssistantKey::Modal(b))?))
    } else {
        let k = require(cfg, AssistantKey::pair(a, b)?)?;
        Ok((k, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::*;

    #[test]
    fn documented_examples() {
        let cfg = ModelConfig::default();
        for l in 0..4 {
            assert_eq!(
                route(&cfg, Opt, Opt, l, Phase::FinetuneSame).unwrap(),
                (AssistantKey::Modal(Opt), AssistantKey::Modal(Opt))
            );
        }
        assert_eq!(
            route(&cfg, Opt, Sar, 1, Phase::FinetuneCross).unwrap(),
            (AssistantKey::Modal(Opt), AssistantKey::Modal(Sar))
        );
        let pair = AssistantKey::pair(Opt, Sar).unwrap();
        assert_eq!(route(&cfg, Opt, Sar, 3, Phase::FinetuneCross).unwrap(), (pair, pair));
        assert_eq!(route(&cfg, Sar, Opt, 2, Phase::Pretrain3).unwrap(), (pair, pair));
    }

    #[test]
    fn split_follows_m_for_every_l() {
        for l_count in 2..=9 {
            for m in 1..l_count {
                let cfg = ModelConfig {
                    layers: l_count,
                    m_top: m,
                    ..Default::default()
                };
                for layer in 0..l_count {
                    let (ka, kb) = route(&cfg, Opt, Nir, layer, Phase::FinetuneCross).unwrap();
                    assert_eq!(ka.is_pair(), layer >= l_count - m);
                    assert_eq!(kb.is_pair(), layer >= l_count - m);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let cfg = ModelConfig::default();
        assert!(matches!(
            route(&cfg, Sar, Uv, 3, Phase::FinetuneCross),
            Err(Error::UnknownAssistant(k)) if k == "SAR-UV"
        ));
        // lower layers only need the modal assistants
        assert!(route(&cfg, Sar, Uv, 0, Phase::FinetuneCross).is_ok());
        assert!(route(&cfg, Opt, Sar, 0, Phase::FinetuneSame).is_err());
        assert!(route(&cfg, Opt, Opt, 0, Phase::Pretrain3).is_err());
        assert!(route(&cfg, Opt, Opt, 4, Phase::Pretrain1).is_err());
        assert_eq!("finetune-cross".parse::<Phase>().unwrap(), Phase::FinetuneCross);
    }

    #[test]
    fn table_is_total_over_configured_pairs() {
        let cfg = ModelConfig::default();
        for &a in &Modality::ALL {
            for &b in &Modality::ALL {
                let pair_ok = a == b || cfg.has_assistant(AssistantKey::pair(a, b).unwrap());
                if !pair_ok {
                    continue;
                }
                for phase in Phase::ALL {
                    if phase.check_pair(a, b).is_err() {
                        continue;
                    }
                    for l in 0..cfg.layers {
                        assert!(route(&cfg, a, b, l, phase).is_ok(), "{a} {b} {l} {phase}");
                    }
                }
            }
        }
    }
}
