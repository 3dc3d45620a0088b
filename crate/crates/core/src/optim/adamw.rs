use std::collections::HashSet;

use indexmap::IndexMap;
use octdistill_autodiff::Tensor;
use serde::Serialize;

use crate::error::{Error, Result};

/// A set of parameters sharing a learning-rate multiplier and weight decay.
/// The realized learning rate of the group is `schedule_lr * lr_scale`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<String>,
    pub lr_scale: f64,
    pub weight_decay: f64,
}

impl ParamGroup {
    /// Splits parameters into head and backbone groups when `backbone_ratio`
    /// is given (backbone lr / head lr), or one unified group otherwise.
    pub fn head_backbone<'a>(
        names: impl IntoIterator<Item = &'a String>,
        is_head: impl Fn(&str) -> bool,
        backbone_ratio: Option<f64>,
        weight_decay: f64,
    ) -> Vec<ParamGroup> {
        let names: Vec<String> = names.into_iter().cloned().collect();
        match backbone_ratio {
            None => vec![ParamGroup {
                name: "all".into(),
                params: names,
                lr_scale: 1.0,
                weight_decay,
            }],
            Some(ratio) => {
                let (head, backbone): (Vec<String>, Vec<String>) = names.into_iter().partition(|n| is_head(n));
                vec![
                    ParamGroup {
                        name: "head".into(),
                        params: head,
                        lr_scale: 1.0,
                        weight_decay,
                    },
                    ParamGroup {
                        name: "backbone".into(),
                        params: backbone,
                        lr_scale: ratio,
                        weight_decay,
                    },
                ]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay; moments kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamConfig,
    groups: Vec<ParamGroup>,
    state: IndexMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    /// Fails unless every name in `all_params` belongs to exactly one group.
    pub fn new<'a>(groups: Vec<ParamGroup>, all_params: impl IntoIterator<Item = &'a String>, config: AdamConfig) -> Result<Self> {
        let mut seen = HashSet::new();
        for g in &groups {
            if !(g.lr_scale > 0.0) || !(g.weight_decay >= 0.0) {
                return Err(Error::Optim(format!("group `{}` needs lr_scale > 0 and weight_decay >= 0", g.name)));
            }
            for p in &g.params {
                if !seen.insert(p.as_str()) {
                    return Err(Error::Optim(format!("parameter `{p}` belongs to more than one group")));
                }
            }
        }
        let mut count = 0;
        for p in all_params {
            if !seen.contains(p.as_str()) {
                return Err(Error::Optim(format!("parameter `{p}` belongs to no group")));
            }
            count += 1;
        }
        if count != seen.len() {
            return Err(Error::Optim("a group names a parameter the model lacks".into()));
        }
        Ok(Self {
            config,
            groups,
            state: IndexMap::new(),
            steps: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter from its `grad` buffer, with learning
    /// rate `lr * group.lr_scale`. Nothing is modified if any gradient is
    /// missing or non-finite.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for g in &self.groups {
            for name in &g.params {
                let t = params
                    .get(name)
                    .ok_or_else(|| Error::Optim(format!("parameter `{name}` is missing from the model")))?;
                let grad = t
                    .grad()
                    .ok_or_else(|| Error::Optim(format!("parameter `{name}` has no gradient")))?;
                if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Optim(format!(
                        "non-finite gradient {} at element {i} of `{name}`",
                        grad[i]
                    )));
                }
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for g in &self.groups {
            let lr_g = lr * g.lr_scale;
            let decay = 1.0 - lr_g * g.weight_decay;
            for name in &g.params {
                let tensor = params.get_mut(name).expect("checked above");
                let grad: Vec<f64> = tensor.grad().expect("checked above").iter().map(|v| *v as f64).collect();
                let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
                for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                    let gi = grad[i];
                    st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                    st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    let decayed = *p as f64 * decay;
                    *p = (decayed - lr_g * m_hat / (v_hat.sqrt() + eps)) as f32;
                }
            }
        }
        Ok(())
    }
}
