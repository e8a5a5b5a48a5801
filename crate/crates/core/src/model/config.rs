use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synthdata::Modality;

/// Assistant FFN selector: one modality (X-X) or an unordered modality pair (X-Y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AssistantKey {
    Modal(Modality),
    /// Stored with the smaller modality first.
    Pair(Modality, Modality),
}

impl AssistantKey {
    pub fn pair(a: Modality, b: Modality) -> Result<Self> {
        if a == b {
            return Err(Error::invalid(format!("pair assistant needs two distinct modalities, got {a}")));
        }
        Ok(AssistantKey::Pair(a.min(b), a.max(b)))
    }

    pub fn is_pair(&self) -> bool {
        matches!(self, AssistantKey::Pair(..))
    }
}

impl fmt::Display for AssistantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssistantKey::Modal(m) => write!(f, "{m}"),
            AssistantKey::Pair(a, b) => write!(f, "{a}-{b}"),
        }
    }
}

impl FromStr for AssistantKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((a, b)) => AssistantKey::pair(a.parse()?, b.parse()?),
            None => Ok(AssistantKey::Modal(s.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub d_coarse: usize,
    pub d_fine: usize,
    /// Number of top layers that route cross-modal input to the pair assistant.
    pub m_top: usize,
    pub assistants: Vec<AssistantKey>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mut assistants: Vec<AssistantKey> = Modality::ALL.iter().map(|&m| AssistantKey::Modal(m)).collect();
        for other in [Modality::Nir, Modality::Sar, Modality::Depth] {
            assistants.push(AssistantKey::pair(Modality::Opt, other).expect("distinct"));
        }
        ModelConfig {
            layers: 4,
            d: 64,
            heads: 4,
            d_ffn: 128,
            d_coarse: 64,
            d_fine: 32,
            m_top: 2,
            assistants,
        }
    }
}

impl ModelConfig {
    /// Reference-scale configuration (9 layers, 768 hidden); expressible, never trained here.
    pub fn reference() -> Self {
        ModelConfig {
            layers: 9,
            d: 768,
            heads: 12,
            d_ffn: 3072,
            d_coarse: 256,
            d_fine: 128,
            m_top: 3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("hidden size {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return bad(format!("hidden size {} must be a multiple of 4 for 2-D positional encoding", self.d));
        }
        if self.m_top < 1 || self.m_top >= self.layers {
            return bad(format!("m_top must satisfy 1 <= M < L, got M={} L={}", self.m_top, self.layers));
        }
        if self.d_ffn < 2 || self.d_coarse == 0 || self.d_fine == 0 {
            return bad("feature widths must be positive (d_ffn >= 2)".into());
        }
        let mut seen = self.assistants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.assistants.len() {
            return bad("duplicate assistant keys".into());
        }
        Ok(())
    }

    pub fn has_assistant(&self, k: AssistantKey) -> bool {
        self.assistants.contains(&k)
    }

    pub fn assistant_width(&self) -> usize {
        self.d_ffn / 2
    }

    /// Channel widths of the three stride-2 encoder stages.
    pub fn stage_channels(&self) -> [usize; 3] {
        [self.d_fine, (self.d_fine + self.d_coarse) / 2, self.d_coarse]
    }

    /// First layer that routes cross-modal input to pair assistants.
    pub fn first_top_layer(&self) -> usize {
        self.layers - self.m_top
    }

    /// Layers at which an assistant owns weights: every layer for modal keys,
    /// the top `M` layers for pair keys.
    pub fn assistant_layers(&self, k: AssistantKey) -> std::ops::Range<usize> {
        if k.is_pair() {
            self.first_top_layer()..self.layers
        } else {
            0..self.layers
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let [c1, c2, c3] = self.stage_channels();
        let (d, f, df, a) = (self.d, self.d_ffn, self.d_fine, self.assistant_width());
        let conv = |ci: usize, co: usize| 9 * ci * co + co;
        let lin = |i: usize, o: usize| i * o + o;
        let encoder = conv(1, c1)
            + conv(c1, c2)
            + conv(c2, c3)
            + lin(c3, d)
            + lin(c1, df)
            + lin(c2, df)
            + lin(c3, df)
            + lin(df, df)
            + lin(d, df)
            + 2 * d;
        let layer = 8 * lin(d, d) + 4 * d + lin(d, f) + lin(f, d);
        let assistant_layer = lin(d, a) + lin(a, d);
        let assistants: usize = self.assistants.iter().map(|&k| self.assistant_layers(k).len()).sum();
        encoder + self.layers * layer + assistants * assistant_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys() {
        let k = AssistantKey::pair(Modality::Sar, Modality::Opt).unwrap();
        assert_eq!(k.to_string(), "OPT-SAR");
        assert_eq!("SAR-OPT".parse::<AssistantKey>().unwrap(), k);
        assert_eq!("NIR".parse::<AssistantKey>().unwrap(), AssistantKey::Modal(Modality::Nir));
        assert!(AssistantKey::pair(Modality::Uv, Modality::Uv).is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::reference().validate().is_ok());
        let bad = ModelConfig { heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { m_top: 4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { m_top: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
