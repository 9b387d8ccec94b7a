use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Adaptive-moment estimation with bias correction.
    Adam { lr: f64, beta1: f64, beta2: f64 },
    /// Plain stochastic gradient descent, no momentum.
    Sgd { lr: f64 },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { lr, .. } | OptimizerKind::Sgd { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Adam { lr, beta1, beta2 } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)
            }
            OptimizerKind::Sgd { lr } => lr > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

const ADAM_EPS: f32 = 1e-8;

/// An optimizer bound to a fixed set of parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    owned: BTreeSet<String>,
    step: u64,
    first_moment: BTreeMap<String, Tensor<f32>>,
    second_moment: BTreeMap<String, Tensor<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore<f32>, names: Vec<String>) -> Self {
        let mut opt = Optimizer {
            kind,
            owned: names.into_iter().collect(),
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        };
        if matches!(kind, OptimizerKind::Adam { .. }) {
            for name in &opt.owned {
                if let Ok(t) = params.get(name) {
                    opt.first_moment.insert(name.clone(), Tensor::zeros(t.shape()));
                    opt.second_moment.insert(name.clone(), Tensor::zeros(t.shape()));
                }
            }
        }
        opt
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn owned(&self) -> &BTreeSet<String> {
        &self.owned
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every owned parameter that has a gradient.
    /// Gradients for parameters this optimizer does not own are ignored.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let lr = lr as f32;
                for name in &self.owned {
                    let (Some(p), Some(g)) = (params.get_mut(name), grads.get(name)) else {
                        continue;
                    };
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2 } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let step_size = (lr * bc2.sqrt() / bc1) as f32;
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                for name in &self.owned {
                    let (Some(p), Some(g)) = (params.get_mut(name), grads.get(name)) else {
                        continue;
                    };
                    let m = self.first_moment.get_mut(name).expect("adam state");
                    let v = self.second_moment.get_mut(name).expect("adam state");
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *w -= step_size * *mi / (vi.sqrt() + ADAM_EPS * (bc2.sqrt() as f32));
                    }
                }
            }
        }
    }

    /// State tensors under `{prefix}.m.{name}` / `{prefix}.v.{name}` for
    /// checkpointing.
    pub fn export_state(&self, prefix: &str, out: &mut BTreeMap<String, Tensor<f32>>) {
        for (name, t) in &self.first_moment {
            out.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.second_moment {
            out.insert(format!("{prefix}.v.{name}"), t.clone());
        }
    }

    pub fn import_state(
        &mut self,
        prefix: &str,
        step: u64,
        tensors: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.step = step;
        for (slot, tag) in [(&mut self.first_moment, "m"), (&mut self.second_moment, "v")] {
            for (name, t) in slot.iter_mut() {
                let key = format!("{prefix}.{tag}.{name}");
                let saved = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                if saved.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state `{key}` has shape {:?}, expected {:?}",
                        saved.shape(),
                        t.shape()
                    )));
                }
                *t = saved.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(&[2], v));
        p
    }

    fn grads(v: f32) -> BTreeMap<String, Tensor<f32>> {
        BTreeMap::from([("w".to_string(), Tensor::full(&[2], v))])
    }

    #[test]
    fn sgd_moves_against_gradient_by_lr() {
        let mut p = store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.5 }, &p, vec!["w".into()]);
        opt.step(&mut p, &grads(2.0));
        assert_eq!(p.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = store(1.0);
        let kind = OptimizerKind::Adam {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.999,
        };
        let mut opt = Optimizer::new(kind, &p, vec!["w".into()]);
        opt.step(&mut p, &grads(-3.0));
        for &w in p.get("w").unwrap().data() {
            assert!((w - 1.01).abs() < 1e-6, "{w}");
        }
    }

    #[test]
    fn unowned_parameters_are_untouched() {
        let mut p = store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { lr: 0.5 }, &p, vec![]);
        opt.step(&mut p, &grads(2.0));
        assert_eq!(p.get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
