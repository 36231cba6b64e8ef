use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Group, ParamStore, LAMBDA_MAX};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub encoder: f64,
    pub l2c: f64,
    pub other: f64,
}

impl GroupRates {
    pub fn rate(&self, group: Group) -> f64 {
        match group {
            Group::Encoder => self.encoder,
            Group::L2c => self.l2c,
            Group::Other => self.other,
        }
    }
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    rates: GroupRates,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, rates: GroupRates, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            rates,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let rates = GroupRates {
            encoder: cfg.lr_encoder,
            l2c: cfg.lr_l2c,
            other: cfg.lr_other,
        };
        Self::new(store, rates, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                left: vec![self.m.len()],
                right: vec![grads.len()],
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let lr = self.rates.rate(store.get(id).group);
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            if g.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: m.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let value = store.value_mut(id);
            for (((w, m), v), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// The multiplier on the classification loss, kept in `[0, LAMBDA_MAX]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaState {
    pub value: f64,
    pub lr: f64,
    pub ascent: bool,
}

impl LambdaState {
    pub fn new(init: f64, lr: f64, ascent: bool) -> Self {
        LambdaState {
            value: init.clamp(0.0, LAMBDA_MAX),
            lr,
            ascent,
        }
    }

    pub fn update(&mut self, ce: f64) {
        let delta = self.lr * ce;
        let next = if self.ascent {
            self.value + delta
        } else {
            self.value - delta
        };
        self.value = next.clamp(0.0, LAMBDA_MAX);
    }
}
