use serde::{Deserialize, Serialize};

use crate::diffnet::params::{Gradient, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// AdamW with decoupled weight decay and linear warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.03,
            schedule: Schedule::Cosine,
        }
    }
}

impl AdamConfig {
    pub fn constant(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            warmup_fraction: 0.0,
            schedule: Schedule::Constant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::InvalidConfig(
                "adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at zero-based `step` of a run of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let total = total_steps.max(1);
        let warmup = (self.warmup_fraction * total as f64).ceil() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Gradient,
    v: Gradient,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: Gradient::zeros_like(store),
            v: Gradient::zeros_like(store),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update of every parameter.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradient,
    state: &mut AdamState,
    cfg: &AdamConfig,
    step_index: usize,
    total_steps: usize,
) -> Result<()> {
    adam_step_masked(params, grads, state, cfg, step_index, total_steps, &|_| {
        true
    })
}

/// AdamW update restricted to parameters for which `trainable` holds; the
/// rest, and their moment estimates, are left untouched.
pub fn adam_step_masked(
    params: &mut ParamStore,
    grads: &Gradient,
    state: &mut AdamState,
    cfg: &AdamConfig,
    step_index: usize,
    total_steps: usize,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<()> {
    if !grads.is_congruent(params) || !state.m.is_congruent(params) {
        let (expected, found) = first_shape_difference(params, grads);
        return Err(Error::ShapeMismatch { expected, found });
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = cfg.lr_at(step_index, total_steps);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if !trainable(name) {
            continue;
        }
        let g = grads.tensor(i).as_slice();
        let m = state.m.tensor_mut(i).as_mut_slice();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v.tensor_mut(i).as_mut_slice();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let m = state.m.tensor(i).as_slice();
        let v = state.v.tensor(i).as_slice();
        let p = params.tensor_mut(i).as_mut_slice();
        for ((pj, mj), vj) in p.iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= lr * mhat / (vhat.sqrt() + cfg.eps);
            if cfg.weight_decay != 0.0 {
                *pj -= lr * cfg.weight_decay * *pj;
            }
        }
    }
    Ok(())
}

fn first_shape_difference(
    params: &ParamStore,
    grads: &Gradient,
) -> ((usize, usize), (usize, usize)) {
    for ((_, p), (_, g)) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return (p.shape(), g.shape());
        }
    }
    ((params.len(), 0), (grads.iter().count(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::graph::Graph;
    use crate::linalg::Mat64;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Mat64::new(1, vals.len(), vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let g = Gradient::zeros_like(&p);
        let mut st = AdamState::new(&p);
        for step in 0..10 {
            adam_step(&mut p, &g, &mut st, &AdamConfig::default(), step, 10).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[0.5]);
        let mut g = Gradient::zeros_like(&p);
        g.tensor_mut(0).as_mut_slice()[0] = 3.0;
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::constant(0.01);
        adam_step(&mut p, &g, &mut st, &cfg, 0, 100).unwrap();
        let moved = 0.5 - p.get("w").unwrap()[(0, 0)];
        assert!((moved - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_exact_noop() {
        let mut p = store(&[0.3, 0.7]);
        let before = p.clone();
        let mut g = Gradient::zeros_like(&p);
        g.tensor_mut(0).as_mut_slice().copy_from_slice(&[1.0, -4.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::constant(0.0), 0, 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let target = [1.5, -0.5, 2.0];
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            schedule: Schedule::Cosine,
            warmup_fraction: 0.0,
            ..Default::default()
        };
        let loss_of = |p: &ParamStore| -> (f64, Gradient) {
            let mut g = Graph::new();
            let w = g.param(p, "w").unwrap();
            let t = g.constant(Mat64::new(1, 3, target.to_vec()).unwrap());
            let d = g.sub(w, t).unwrap();
            let sq = g.square(d);
            let l = g.sum(sq);
            (g.scalar(l).unwrap(), g.backward(l, p).unwrap())
        };
        for step in 0..400 {
            let (_, grad) = loss_of(&p);
            adam_step(&mut p, &grad, &mut st, &cfg, step, 400).unwrap();
        }
        assert!(loss_of(&p).0 < 1e-6);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let mut p = store(&[2.0]);
        let g = Gradient::zeros_like(&p);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::constant(0.5)
        };
        adam_step(&mut p, &g, &mut st, &cfg, 0, 1).unwrap();
        assert!((p.get("w").unwrap()[(0, 0)] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_with_warmup() {
        let cfg = AdamConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert!((cfg.lr_at(0, 100) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(9, 100) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_at(10, 100) - 1.0).abs() < 1e-15);
        assert!(cfg.lr_at(99, 100) < 0.01);
        assert!(cfg.lr_at(50, 100) < cfg.lr_at(20, 100));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[1.0]);
        let other = store(&[1.0, 2.0]);
        let g = Gradient::zeros_like(&other);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 0, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
