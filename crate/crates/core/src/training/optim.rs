use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockId, Gradients, Linear, ModelParams};

/// Adam moments per parameter block, created on a block's first update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<BlockId, Vec<Linear>>,
    second: BTreeMap<BlockId, Vec<Linear>>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, id: BlockId) -> Option<(&[Linear], &[Linear])> {
        Some((self.first.get(&id)?.as_slice(), self.second.get(&id)?.as_slice()))
    }
}

/// One bias-corrected Adam update of every block that has a gradient.
/// Blocks are checked for non-finite gradients before anything changes.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    for id in grads.ids() {
        let g = grads.get(id).expect("listed id");
        if g.iter().any(|l| l.values().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite gradient in block {id}")));
        }
        let p = params
            .block(id)
            .ok_or_else(|| Error::Usage(format!("gradient for absent block {id}")))?;
        let shapes_match = p.len() == g.len()
            && p.iter()
                .zip(g)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.is_some() == b.bias.is_some());
        if !shapes_match {
            return Err(Error::Usage(format!("gradient shapes do not mirror block {id}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in grads.ids() {
        let g = grads.get(id).expect("listed id");
        let p = params.block_mut(id).expect("checked above");
        let m = state.first.entry(id).or_insert_with(|| g.iter().map(Linear::zeros_like).collect());
        let v = state.second.entry(id).or_insert_with(|| g.iter().map(Linear::zeros_like).collect());
        for (((pl, gl), ml), vl) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            for (((pv, &gv), mv), vv) in pl.values_mut().zip(gl.values()).zip(ml.values_mut()).zip(vl.values_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Linear warm-up from `base_lr / 100` to `base_lr` over `warmup_epochs`,
/// then a single ×0.1 decay once two thirds of the epochs have passed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let lr = if epoch < self.warmup_epochs {
            let start = self.base_lr / 100.0;
            start + (self.base_lr - start) * epoch as f64 / self.warmup_epochs as f64
        } else {
            self.base_lr
        };
        if 3 * epoch >= 2 * self.total_epochs {
            lr * 0.1
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderArch, InputShape, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            encoder: EncoderArch::dense(
                InputShape {
                    channels: 1,
                    height: 1,
                    width: 3,
                },
                &[4],
                2,
                true,
            ),
            n_source_ids: 3,
            n_target_ids: 2,
            n_attributes: 0,
        };
        ModelParams::init_source(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn filled(p: &ModelParams, id: BlockId, v: f64) -> Gradients {
        let mut g = Gradients::new();
        for l in g.slot(id, p.block(id).unwrap()) {
            l.values_mut().for_each(|x| *x = v);
        }
        g
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule {
            base_lr: 1e-4,
            warmup_epochs: 10,
            total_epochs: 60,
        };
        assert_eq!(s.at(0), 1e-6);
        assert_eq!(s.at(10), 1e-4);
        assert!((s.at(45) - 1e-5).abs() < 1e-20);
        assert!(s.at(5) > s.at(4));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let g = filled(&p, BlockId::E1, 0.0);
        adam_step(&mut p, &g, &mut OptimizerState::new(), 1e-2).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let before = p.e1.layers[0].weight[[0, 0]];
        let g = filled(&p, BlockId::E1, 1.0);
        adam_step(&mut p, &g, &mut OptimizerState::new(), 1e-3).unwrap();
        let moved = before - p.e1.layers[0].weight[[0, 0]];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn identical_blocks_get_identical_updates() {
        let mut p = params();
        p.e2 = Some(p.e1.clone());
        let mut g = filled(&p, BlockId::E1, 0.3);
        for l in g.slot(BlockId::E2, &p.e1.layers) {
            l.values_mut().for_each(|x| *x = 0.3);
        }
        adam_step(&mut p, &g, &mut OptimizerState::new(), 1e-2).unwrap();
        assert_eq!(p.e1.layers, p.e2.as_ref().unwrap().layers);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = params();
        let g = filled(&p, BlockId::IdSource, f64::NAN);
        let err = adam_step(&mut p, &g, &mut OptimizerState::new(), 1e-2).unwrap_err();
        assert!(err.to_string().contains("C_id_s"), "{err}");
    }
}
