//! Adam optimizer with classic bias correction.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::params::ParamSet;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over `(name, gradient)` pairs; moment buffers are keyed by
    /// name and created lazily. The step counter advances once per call.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, ArrayD<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }

    /// Moment buffers and step count as plain arrays, for checkpointing.
    /// Keys: `m.<name>`, `v.<name>`, and a one-element `t`.
    pub fn export_state(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        out.insert(
            "t".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), self.t as f64),
        );
        for (name, a) in &self.m {
            out.insert(format!("m.{name}"), a.clone());
        }
        for (name, a) in &self.v {
            out.insert(format!("v.{name}"), a.clone());
        }
        out
    }

    /// Restore from [`Adam::export_state`] output. Hyperparameters are not
    /// part of the state and keep their constructor values.
    pub fn import_state(&mut self, state: &BTreeMap<String, ArrayD<f64>>) {
        self.t = state
            .get("t")
            .map(|a| a[[0]] as u64)
            .expect("optimizer state missing t");
        self.m.clear();
        self.v.clear();
        for (key, a) in state {
            if let Some(name) = key.strip_prefix("m.") {
                self.m.insert(name.to_string(), a.clone());
            } else if let Some(name) = key.strip_prefix("v.") {
                self.v.insert(name.to_string(), a.clone());
            }
        }
    }
}
