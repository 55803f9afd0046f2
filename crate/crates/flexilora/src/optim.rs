//! Optimizers. Fine-tuning and router training use SGD with momentum and a
//! global gradient-norm clip; pretraining the base model uses Adam. Updates
//! are rounded through the run precision so in-memory weights stay
//! bit-identical to their checkpointed form.

use crate::numcore::Precision;
use std::collections::BTreeMap;

pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    precision: Precision,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, clip_norm: Option<f64>, precision: Precision) -> Self {
        Sgd { lr, momentum, clip_norm, precision, velocity: BTreeMap::new() }
    }

    /// One update over (name, params, grads) triples. The clip rescales the
    /// global norm across all listed grads before momentum is applied.
    pub fn step(&mut self, entries: &mut [(String, &mut [f64], Vec<f64>)]) {
        let mut scale = 1.0;
        if let Some(max_norm) = self.clip_norm {
            let sq: f64 = entries
                .iter()
                .map(|(_, _, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        for (name, params, grads) in entries.iter_mut() {
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; params.len()]);
            for i in 0..params.len() {
                vel[i] = self.momentum * vel[i] + grads[i] * scale;
                params[i] = self.precision.round(params[i] - self.lr * vel[i]);
            }
        }
    }
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    precision: Precision,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, precision: Precision) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            precision,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, entries: &mut [(String, &mut [f64], Vec<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, params, grads) in entries.iter_mut() {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; params.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; params.len()]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grads[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                params[i] = self
                    .precision
                    .round(params[i] - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}
