//! Optimisers behind a common trait, created by name from a registry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub name: String,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn new(name: &str, lr: f64) -> Self {
        Self {
            name: name.to_string(),
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Updates parameter groups in place. Each group is identified by a slot
/// name so that stateful optimisers keep separate moments per group.
pub trait Optimizer: Send {
    fn name(&self) -> &str;
    fn set_lr(&mut self, lr: f64);
    fn step(&mut self, slot: &str, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()>;
    fn state(&self) -> Value;
    fn load_state(&mut self, state: Value) -> Result<()>;
}

fn check_shapes(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::shape("gradient layout does not match parameter layout"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, weight_decay: 0.0 }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &str {
        "sgd"
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn step(&mut self, _slot: &str, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_shapes(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, dw) in p.iter_mut().zip(*g) {
                *w -= self.lr * (dw + self.weight_decay * *w);
            }
        }
        Ok(())
    }

    fn state(&self) -> Value {
        Value::Null
    }

    fn load_state(&mut self, _state: Value) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
struct AdamSlot {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Adam with bias correction; decoupled weight decay when `weight_decay > 0`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &str {
        "adam"
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    fn step(&mut self, slot: &str, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_shapes(params, grads)?;
        let st = self.slots.entry(slot.to_string()).or_insert_with(|| AdamSlot {
            t: 0,
            m: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
            v: grads.iter().map(|g| vec![0.0; g.len()]).collect(),
        });
        if st.m.len() != grads.len() || st.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::shape(format!("optimizer state for `{slot}` has a different layout")));
        }
        st.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(st.t as i32);
        let bc2 = 1.0 - c.beta2.powi(st.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut st.m[k], &mut st.v[k]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= c.lr * (update + c.weight_decay * p[i]);
            }
        }
        Ok(())
    }

    fn state(&self) -> Value {
        serde_json::to_value(&self.slots).expect("adam state serialises")
    }

    fn load_state(&mut self, state: Value) -> Result<()> {
        self.slots = serde_json::from_value(state)?;
        Ok(())
    }
}

type Factory = Box<dyn Fn(&OptimConfig) -> Box<dyn Optimizer> + Send + Sync>;

/// Name-to-constructor table for optimisers.
pub struct OptimizerRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("sgd", |c| {
            Box::new(Sgd {
                lr: c.lr,
                weight_decay: c.weight_decay,
            })
        });
        r.register("adam", |c| Box::new(Adam::new(c.clone())));
        r
    }
}

impl OptimizerRegistry {
    pub fn register(
        &mut self,
        name: &str,
        factory: impl Fn(&OptimConfig) -> Box<dyn Optimizer> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, cfg: &OptimConfig) -> Result<Box<dyn Optimizer>> {
        cfg.validate()?;
        let f = self.factories.get(&cfg.name).ok_or_else(|| Error::Unknown {
            kind: "optimizer",
            name: cfg.name.clone(),
        })?;
        Ok(f(cfg))
    }
}
