//! Adam with decoupled weight decay.
//!
//! ```text
//! θ ← θ − α·λ·θ
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − α · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::checkpoint::{read_tensors, write_tensors};
use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::InvalidOptimizer(format!("{self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without one are left untouched, moments included. All gradients are
    /// validated before anything is mutated.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::GradientShape {
                    name: name.to_string(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads.iter() {
            if params.is_frozen(name) {
                continue;
            }
            let p = params.get_mut(name).expect("validated above");
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if c.weight_decay != 0.0 {
                    *pv *= decay;
                }
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }

    /// Serializes config, step counter and moments in the tensor text format.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let c = &self.config;
        writeln!(
            out,
            "adam step={} lr={} beta1={} beta2={} eps={} weight_decay={}",
            self.step, c.learning_rate, c.beta1, c.beta2, c.epsilon, c.weight_decay
        )?;
        let tensors: Vec<(String, &Tensor)> = self
            .first
            .iter()
            .map(|(k, v)| (format!("m.{k}"), v))
            .chain(self.second.iter().map(|(k, v)| (format!("v.{k}"), v)))
            .collect();
        write_tensors(&mut out, tensors.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let bad = |detail: &str| AutodiffError::Checkpoint {
            line: 1,
            detail: detail.to_string(),
        };
        let mut fields = header.split_whitespace();
        if fields.next() != Some("adam") {
            return Err(bad("expected `adam` header"));
        }
        let mut kv = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad("malformed field"))?;
            kv.insert(k, v);
        }
        let num = |key: &str| -> Result<f64> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("missing or invalid `{key}`")))
        };
        let config = AdamConfig {
            learning_rate: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            epsilon: num("eps")?,
            weight_decay: num("weight_decay")?,
        };
        let step = kv
            .get("step")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing step"))?;
        let mut state = Self::new(config)?;
        state.step = step;
        for (name, tensor) in read_tensors(input, 2)? {
            if let Some(rest) = name.strip_prefix("m.") {
                state.first.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("v.") {
                state.second.insert(rest.to_string(), tensor);
            } else {
                return Err(bad(&format!("unexpected tensor `{name}`")));
            }
        }
        Ok(state)
    }
}
