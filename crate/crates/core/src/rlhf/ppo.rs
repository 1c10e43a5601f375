use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_step, AdamConfig, AdamState, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::RewardFn;
use crate::rlhf::fmt_f64;
use crate::rlhf::policy::SyntheticPolicy;
use crate::rng::{derive_seed, stream_rng};
use crate::stats::{mean, std_dev};
use crate::world::GoldWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// Passes over the prompt set.
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps on each sampled batch.
    pub inner_epochs: usize,
    pub clip_range: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Weight of the per-prompt `KL(π ‖ π_ref)` subtracted from the reward.
    pub kl_coef: f64,
    /// Size of the fixed prompt subset the trajectory is logged on.
    pub eval_prompts: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            inner_epochs: 4,
            clip_range: 0.2,
            gae_lambda: 0.95,
            gamma: 1.0,
            learning_rate: 1e-3,
            kl_coef: 0.0,
            eval_prompts: 256,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip_range must lie in (0, 1), got {}",
                self.clip_range
            )));
        }
        for (name, v) in [("gae_lambda", self.gae_lambda), ("gamma", self.gamma)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1], got {v}"
                )));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.kl_coef >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate and kl_coef must be >= 0".into(),
            ));
        }
        if self.epochs == 0
            || self.batch_size == 0
            || self.inner_epochs == 0
            || self.eval_prompts == 0
        {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, inner_epochs and eval_prompts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Optimizer batches drawn over a run on `num_prompts` prompts.
    pub fn num_steps(&self, num_prompts: usize) -> usize {
        self.epochs * num_prompts.div_ceil(self.batch_size)
    }
}

/// Generalized advantage estimates for one episode:
/// `δ_t = r_t + γ·V_{t+1} − V_t`, `A_t = δ_t + γλ·A_{t+1}`, with `V_T = 0`.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gae_lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch(rewards.len(), values.len()));
    }
    let t = rewards.len();
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    for i in (0..t).rev() {
        let next_value = if i + 1 < t { values[i + 1] } else { 0.0 };
        let delta = rewards[i] + gamma * next_value - values[i];
        next_adv = delta + gamma * gae_lambda * next_adv;
        adv[i] = next_adv;
    }
    Ok(adv)
}

/// Negated clipped surrogate `−mean(min(ρ·A, clip(ρ, 1 ± ε)·A))` with
/// `ρ = exp(log π(a|x) − old_log_prob)`.
pub fn ppo_loss(
    g: &mut Graph,
    policy: &SyntheticPolicy,
    params: &ParamStore,
    prompts: &Mat64,
    actions: &Mat64,
    old_log_prob: &[f64],
    advantages: &[f64],
    clip_range: f64,
) -> Result<NodeId> {
    let n = prompts.rows();
    if old_log_prob.len() != n || advantages.len() != n {
        return Err(Error::LengthMismatch(
            n,
            old_log_prob.len().min(advantages.len()),
        ));
    }
    let x = g.constant(prompts.clone());
    let logp = policy.graph_log_prob(g, params, x, actions)?;
    let old = g.constant(Mat64::new(n, 1, old_log_prob.to_vec())?);
    let adv = g.constant(Mat64::new(n, 1, advantages.to_vec())?);
    let log_ratio = g.sub(logp, old)?;
    let ratio = g.exp(log_ratio);
    let surr = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip_range, 1.0 + clip_range);
    let surr_clipped = g.mul(clipped, adv)?;
    let obj = g.minimum(surr, surr_clipped)?;
    let m = g.mean(obj);
    Ok(g.neg(m))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub proxy_id: String,
    pub world_id: String,
    pub dist_tag: String,
}

/// Per-step means on the fixed evaluation prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub meta: TrajectoryMeta,
    pub steps: Vec<usize>,
    pub kl: Vec<f64>,
    pub proxy: Vec<f64>,
    pub gold: Vec<f64>,
    /// `attributes[i][k]`: mean noiseless gold attribute `k` at `steps[i]`.
    pub attributes: Vec<Vec<f64>>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.first().map_or(0, Vec::len)
    }

    /// `step,kl,proxy,gold,attr_1..attr_K`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,kl,proxy,gold");
        for j in 1..=self.num_attributes() {
            out.push_str(&format!(",attr_{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}",
                self.steps[i],
                fmt_f64(self.kl[i]),
                fmt_f64(self.proxy[i]),
                fmt_f64(self.gold[i])
            ));
            for a in &self.attributes[i] {
                out.push(',');
                out.push_str(&fmt_f64(*a));
            }
            out.push('\n');
        }
        out
    }

    fn record(
        &mut self,
        step: usize,
        policy: &SyntheticPolicy,
        eval: &EvalBatch,
        proxy: &dyn RewardFn,
        gold: &GoldWorld,
    ) -> Result<()> {
        let z = policy.responses(&eval.prompts, &eval.noise)?;
        let attrs = gold.attributes_batch(&z)?;
        let overall: Vec<f64> = (0..attrs.rows())
            .map(|r| gold.aggregate(attrs.row(r)))
            .collect();
        self.steps.push(step);
        self.kl.push(mean(&policy.kl_to_reference(&eval.prompts)?));
        self.proxy.push(mean(&proxy.score_batch(&z)?));
        self.gold.push(mean(&overall));
        self.attributes
            .push((0..attrs.cols()).map(|k| mean(&attrs.col(k))).collect());
        Ok(())
    }
}

struct EvalBatch {
    prompts: Mat64,
    noise: Mat64,
}

fn gather_rows(m: &Mat64, idx: &[usize]) -> Mat64 {
    Mat64::from_fn(idx.len(), m.cols(), |r, c| m[(idx[r], c)])
}

/// Single-step PPO against `proxy`. Each batch samples one response per
/// prompt, subtracts `kl_coef · KL(π ‖ π_ref)` from the proxy reward, uses
/// the batch-mean reward as the value baseline, and takes `inner_epochs`
/// clipped-surrogate Adam steps. The trajectory is logged before the first
/// update and after every batch, on a fixed prompt subset with fixed noise.
pub fn ppo_train(
    mut policy: SyntheticPolicy,
    proxy: &dyn RewardFn,
    gold: &GoldWorld,
    prompts: &Mat64,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(SyntheticPolicy, TrajectoryLog)> {
    cfg.validate()?;
    if prompts.rows() == 0 {
        return Err(Error::EmptyInput("prompts"));
    }
    if prompts.cols() != policy.prompt_dim() {
        return Err(Error::DimensionMismatch {
            expected: policy.prompt_dim(),
            found: prompts.cols(),
        });
    }
    let n_eval = cfg.eval_prompts.min(prompts.rows());
    let eval = {
        let mut rng = stream_rng(derive_seed(seed, "ppo-eval"), 0);
        EvalBatch {
            prompts: gather_rows(prompts, &(0..n_eval).collect::<Vec<_>>()),
            noise: Mat64::from_fn(n_eval, policy.response_dim(), |_, _| {
                rng.sample(StandardNormal)
            }),
        }
    };
    let mut log = TrajectoryLog {
        meta: TrajectoryMeta {
            seed,
            ..Default::default()
        },
        ..Default::default()
    };
    log.record(0, &policy, &eval, proxy, gold)?;

    let adam = AdamConfig::constant(cfg.learning_rate);
    let mut state = AdamState::new(policy.params());
    let total = cfg.num_steps(prompts.rows()) * cfg.inner_epochs;
    let mut order: Vec<usize> = (0..prompts.rows()).collect();
    let mut step = 0;
    let mut opt_step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(
            derive_seed(seed, "ppo-order"),
            epoch as u64,
        ));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = gather_rows(prompts, chunk);
            let actions = policy.sample(
                &batch,
                &mut stream_rng(derive_seed(seed, "ppo-sample"), step as u64),
            )?;
            let mut rewards = proxy.score_batch(&actions)?;
            if cfg.kl_coef > 0.0 {
                for (r, kl) in rewards.iter_mut().zip(policy.kl_to_reference(&batch)?) {
                    *r -= cfg.kl_coef * kl;
                }
            }
            let baseline = mean(&rewards);
            let mut adv = Vec::with_capacity(rewards.len());
            for r in &rewards {
                adv.extend(gae_advantages(
                    &[*r],
                    &[baseline],
                    cfg.gae_lambda,
                    cfg.gamma,
                )?);
            }
            let sd = std_dev(&adv);
            if sd > 0.0 {
                adv.iter_mut().for_each(|a| *a /= sd);
            }
            let old_logp = {
                let mut g = Graph::new();
                let x = g.constant(batch.clone());
                let lp = policy.graph_log_prob(&mut g, policy.params(), x, &actions)?;
                g.value(lp).as_slice().to_vec()
            };
            for _ in 0..cfg.inner_epochs {
                let mut g = Graph::new();
                let loss = ppo_loss(
                    &mut g,
                    &policy,
                    policy.params(),
                    &batch,
                    &actions,
                    &old_logp,
                    &adv,
                    cfg.clip_range,
                )?;
                let value = g.scalar(loss)?;
                let grads = g.backward(loss, policy.params())?;
                if !value.is_finite() || !grads.all_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!(
                            "surrogate {value}, reward mean {baseline}, log_std {:?}, drift {}",
                            policy.log_std(),
                            policy.drift()
                        ),
                    });
                }
                adam_step(
                    policy.params_mut(),
                    &grads,
                    &mut state,
                    &adam,
                    opt_step,
                    total,
                )?;
                opt_step += 1;
            }
            log.record(step, &policy, &eval, proxy, gold)?;
        }
    }
    Ok((policy, log))
}
