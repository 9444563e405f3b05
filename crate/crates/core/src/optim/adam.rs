//! Adam with bias correction and per-group learning rates.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Moments of one parameter group. `t` counts this group's updates since
/// its last reset.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamGroup {
    pub name: &'static str,
    pub lr: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamGroup {
    pub fn new(name: &'static str, lr: f64, len: usize) -> Self {
        AdamGroup {
            name,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Zeroes the moments, resizing to `len`.
    pub fn reset(&mut self, len: usize) {
        self.m = vec![0.0; len];
        self.v = vec![0.0; len];
        self.t = 0;
    }

    /// Updated parameter values for gradient `g`; does not touch `params`.
    /// With `quantize`, results are rounded to single precision.
    pub fn propose(&mut self, hyper: &AdamHyper, params: &[f64], g: &[f64], lr_mult: f64, quantize: bool) -> Result<Vec<f64>> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hyper.beta2.powi(self.t as i32);
        let lr = self.lr * lr_mult;
        let mut out = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            self.m[i] = hyper.beta1 * self.m[i] + (1.0 - hyper.beta1) * g[i];
            self.v[i] = hyper.beta2 * self.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let mut p = params[i] - lr * mh / (vh.sqrt() + hyper.eps);
            if quantize {
                p = p as f32 as f64;
            }
            if !p.is_finite() {
                return Err(Error::NonFiniteParameter {
                    group: self.name,
                    index: i,
                });
            }
            out.push(p);
        }
        Ok(out)
    }
}
