//! Policies over response latents, Best-of-N sampling, single-step PPO and
//! the proxy-versus-gold diagnostics used to spot reward hacking.

mod bon;
mod diag;
mod policy;
mod ppo;

pub use bon::{bon_select, bon_sweep, default_n_values, kl_bon, BoNSweep, MIN_PROMPTS};
pub use diag::{
    attribute_trajectory, detect_hacking, pairwise_diff_stats, strategy_l_gap,
    style_utility_decomposition, win_rate, AttributeFn, DiffStat, HackingVerdict, DEFAULT_WINDOW,
    PERSISTENCE, SLOPE_T,
};
pub use policy::{sample_prompts, PolicyConfig, SyntheticPolicy, POLICY_LOG_STD, POLICY_MEAN};
pub use ppo::{gae_advantages, ppo_loss, ppo_train, PpoConfig, TrajectoryLog, TrajectoryMeta};

/// Shortest round-trip representation, so CSV output is reproducible.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// `x − x[0]`.
pub fn normalize_from_start(x: &[f64]) -> Vec<f64> {
    let first = x.first().copied().unwrap_or(0.0);
    x.iter().map(|v| v - first).collect()
}
