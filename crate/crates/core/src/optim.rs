//! AdamW with decoupled weight decay and a reduce-on-plateau learning-rate
//! schedule, both following the PyTorch update rules.

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement needed to reset the patience counter.
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.02,
            betas: (0.9, 0.999),
            eps: 1e-8,
            plateau_factor: 0.5,
            plateau_patience: 2,
            plateau_threshold: 1e-4,
            min_lr: 1e-8,
            batch_size: 16,
            epochs: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must be in (0, 1), got {}", self.plateau_factor));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.min_lr >= 0.0) {
            return bad("eps must be > 0; weight decay and min lr >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Indexed by parameter id; `None` until the parameter first gets a
    /// gradient.
    pub state: Vec<Option<MomentState>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            betas: cfg.betas,
            eps: cfg.eps,
            state: Vec::new(),
        }
    }

    /// One update of every parameter that received a gradient. Buffers are
    /// never touched. Values are rounded back to `f32` precision afterwards.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)]) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let (b1, b2) = self.betas;
        for (id, g) in grads {
            if store.kind(*id) != ParamKind::Trainable {
                continue;
            }
            let p = store.get_mut(*id);
            let st = self.state[id.index()].get_or_insert_with(|| MomentState {
                m: Matrix::zeros(p.dim()),
                v: Matrix::zeros(p.dim()),
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step as i32);
            let bc2 = 1.0 - b2.powi(st.step as i32);
            let decay = 1.0 - self.lr * self.weight_decay;
            let step_size = self.lr / bc1;
            let bc2_sqrt = bc2.sqrt();
            ndarray::Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *p *= decay;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() / bc2_sqrt + self.eps);
                });
        }
        store.round_to_f32();
    }
}

/// Halves (by `factor`) the learning rate when the monitored value stops
/// improving for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            min_lr: cfg.min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feed one epoch's monitored loss; returns the learning rate to use next.
    pub fn step(&mut self, value: f64, lr: f64) -> f64 {
        if value < self.best * (1.0 - self.threshold) {
            self.best = value;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let reduced = (lr * self.factor).max(self.min_lr);
            if lr - reduced > 1e-8 * lr.max(f64::MIN_POSITIVE) {
                return reduced;
            }
        }
        lr
    }
}
