use super::Ablation;
use crate::error::{Error, Result};
use crate::model::{glob_match, AssistantKey, ParamStore, Phase};
use crate::synthdata::Modality;

/// Trainable-parameter patterns; every other parameter is frozen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub patterns: Vec<String>,
}

const ATTENTION: &str = "layer*.attn.*";
const BACKBONE: [&str; 4] = ["encoder.*", "layer*.attn.*", "layer*.ln*", "layer*.ffn.*"];

fn assistant(k: AssistantKey) -> String {
    format!("assistant.{k}.*")
}

impl FreezePlan {
    /// Trainable set for a stage, before ablation switches.
    pub fn for_stage(phase: Phase, a: Modality, b: Modality) -> Result<Self> {
        phase.check_pair(a, b)?;
        let x = AssistantKey::Modal(a);
        let patterns: Vec<String> = match phase {
            Phase::Pretrain1 => BACKBONE.iter().map(|s| s.to_string()).collect(),
            Phase::Pretrain2 | Phase::FinetuneSame => vec![assistant(x)],
            Phase::Pretrain3 => vec![
                ATTENTION.to_string(),
                assistant(x),
                assistant(AssistantKey::Modal(b)),
                assistant(AssistantKey::pair(a, b)?),
            ],
            Phase::FinetuneCross => vec![
                assistant(x),
                assistant(AssistantKey::Modal(b)),
                assistant(AssistantKey::pair(a, b)?),
            ],
        };
        Ok(FreezePlan { patterns })
    }

    /// Stage plan adjusted by the ablation switches. Disabled generic or assistant
    /// blocks are dropped from the trainable set; training without a pretrained
    /// model adds the backbone.
    pub fn build(phase: Phase, a: Modality, b: Modality, ab: &Ablation) -> Result<Self> {
        let mut plan = Self::for_stage(phase, a, b)?;
        if !ab.use_pretrained && phase != Phase::Pretrain1 {
            for p in BACKBONE {
                if !plan.patterns.iter().any(|q| q == p) {
                    plan.patterns.push(p.to_string());
                }
            }
        }
        if !ab.generic_ffn {
            plan.patterns.retain(|p| p != "layer*.ffn.*");
        }
        if !ab.assistant_ffn {
            plan.patterns.retain(|p| !p.starts_with("assistant."));
        }
        Ok(plan)
    }

    pub fn empty() -> Self {
        FreezePlan { patterns: Vec::new() }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p, name))
    }

    /// Every pattern must select at least one registered parameter.
    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        for p in &self.patterns {
            if !params.names().any(|n| glob_match(p, n)) {
                return Err(Error::Config(format!("freeze pattern `{p}` matches no parameter")));
            }
        }
        Ok(())
    }
}
