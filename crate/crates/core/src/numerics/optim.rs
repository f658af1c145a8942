use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::Params;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. `grads` must carry an entry
    /// for each of them.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Array>) -> Result<()> {
        for name in params.trainable().keys() {
            if !grads.contains_key(name) {
                return Err(Error::contract(format!("missing gradient for `{name}`")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.trainable().keys().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let p = params.get_mut(&name).expect("listed above");
            if g.len() != p.len() {
                return Err(Error::dim("adam", format!("gradient shape for `{name}`")));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.second.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Params {
        let mut p = Params::default();
        p.insert("w", Array::scalar(value)).unwrap();
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Array> {
        BTreeMap::from([("w".to_string(), Array::scalar(value))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &grad(0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn positive_gradient_decreases_monotonically() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mut last = 1.0;
        for _ in 0..20 {
            opt.step(&mut p, &grad(1.0)).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn three_step_trace_matches_hand_recurrence() {
        // Hand recurrence for g = [0.5, -1.0, 2.0], lr=0.1, b1=0.9, b2=0.999, eps=1e-8:
        // m1=0.05 v1=0.00025 -> step 0.1 * 0.5/(0.5+eps)
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let gs = [0.5, -1.0, 2.0];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        let mut expected = Vec::new();
        for (i, g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expected.push(w);
        }
        // first step of Adam moves by ~lr regardless of gradient scale
        assert!((expected[0] - 0.9).abs() < 1e-7);

        let mut p = single(1.0);
        let mut opt = Adam::new(cfg);
        for (g, e) in gs.iter().zip(&expected) {
            opt.step(&mut p, &grad(*g)).unwrap();
            assert!((p.get("w").unwrap().data()[0] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = single(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(matches!(opt.step(&mut p, &BTreeMap::new()), Err(Error::Contract(_))));
    }
}
