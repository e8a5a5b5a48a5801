use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamStore};
use crate::numerics::Tensor;

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter (registry order) plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

/// Gain parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !name.ends_with(".gain")
}

impl AdamW {
    /// Applies one update to every parameter with `Some` gradient. Parameters
    /// without a gradient are left bit-identical.
    pub fn step(&self, params: &mut ParamStore, grads: &[Option<Tensor<f32>>], state: &mut AdamState) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient list does not match the registry"));
        }
        if state.moments.len() < params.len() {
            state.moments.resize(params.len(), None);
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let decay = if decays(params.name(i)) { self.weight_decay } else { 0.0 };
            let p = params.tensor_mut(i);
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = state.moments[i].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for k in 0..g.len() {
                let gk = g.data()[k] as f64;
                let mk = self.beta1 * m.data()[k] as f64 + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] as f64 + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk as f32;
                v.data_mut()[k] = vk as f32;
                let theta = p.data()[k] as f64;
                let upd = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.data_mut()[k] = (theta - self.lr * (upd + decay * theta)) as f32;
            }
        }
        Ok(())
    }
}

impl AdamState {
    /// Appends `<name>.adam_m`, `<name>.adam_v` and `step` entries.
    pub fn append_to(&self, ck: &mut Checkpoint, params: &ParamStore) {
        for (i, mv) in self.moments.iter().enumerate() {
            if let Some((m, v)) = mv {
                ck.push(format!("{}.adam_m", params.name(i)), m.clone());
                ck.push(format!("{}.adam_v", params.name(i)), v.clone());
            }
        }
        ck.push("step", Tensor::scalar(self.step as f32));
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore) -> Self {
        let moments = params
            .names()
            .map(|n| match (ck.get(&format!("{n}.adam_m")), ck.get(&format!("{n}.adam_v"))) {
                (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                _ => None,
            })
            .collect();
        let step = ck.get("step").map_or(0, |s| s.item() as u64);
        AdamState { step, moments }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s.insert("ln.gain", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = store(0.5);
        let mut st = AdamState::default();
        opt.step(&mut p, &[Some(Tensor::scalar(1.0)), None], &mut st).unwrap();
        // Δ = lr·g/(√g² + ε)
        let expect = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() as f64 - expect).abs() < 1e-7);
        assert_eq!(p.get("ln.gain").unwrap().item(), 0.5);
    }

    #[test]
    fn decay_skips_gains() {
        let opt = AdamW::default();
        let mut p = store(2.0);
        let mut st = AdamState::default();
        let g = Some(Tensor::scalar(0.0f32));
        opt.step(&mut p, &[g.clone(), g], &mut st).unwrap();
        let w = p.get("w").unwrap().item() as f64;
        assert!((w - (2.0 - 1e-4 * 0.01 * 2.0)).abs() < 1e-7);
        assert_eq!(p.get("ln.gain").unwrap().item(), 2.0);
    }

    #[test]
    fn state_round_trips_through_checkpoint() {
        let opt = AdamW::default();
        let mut p = store(1.0);
        let mut st = AdamState::default();
        opt.step(&mut p, &[Some(Tensor::scalar(0.3)), None], &mut st).unwrap();
        let mut ck = Checkpoint::default();
        st.append_to(&mut ck, &p);
        assert!(ck.get("w.adam_m").is_some() && ck.get("ln.gain.adam_m").is_none());
        assert_eq!(AdamState::from_checkpoint(&ck, &p), st);
    }
}
