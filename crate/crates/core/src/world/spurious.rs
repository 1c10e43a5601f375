//! A world with a verbosity-like attribute that tracks quality on the
//! training distribution but is penalized once pushed past a threshold.
//!
//! Latent layout: `[u_1 … u_U, v, n_1 … n_N]` with utility latents `u`, the
//! spurious latent `v` and nuisance latents `n`. Attributes `0..U` are
//! utilities, attribute `U` is the spurious one and carries zero
//! aggregation weight:
//!
//! ```text
//! r*_k = a·tanh(s_u·u_k) + β·tanh(s_v·v) + cross-talk − γ·(1 + tanh(κ(v − τ)))/2 − δ·max(0, v − τ)
//! r*_U = tanh(s_v·v)
//! ```
//!
//! Under the training distribution `v = s·(c·ū + √(1−c²)·ξ)` with
//! `ū = Σ u_k / √U`, so the spurious attribute correlates with the overall
//! score; under the OOD distribution `v` is independent and shifted.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat64, Vec64};
use crate::rng::{derive_seed, stream_rng};
use crate::stats::pearson;
use crate::world::{AttributeMap, GoldWorld, GoldWorldSpec, PromptDistribution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpuriousConfig {
    pub seed: u64,
    /// Required correlation between the spurious attribute and the overall
    /// score under the training distribution, in `[0, 1)`.
    pub rho: f64,
    /// Fixed confounding coefficient `c`; calibrated from `rho` when unset.
    pub confounding: Option<f64>,
    pub num_utility: usize,
    pub nuisance_dims: usize,
    pub utility_gain: f64,
    pub utility_slope: f64,
    pub spurious_slope: f64,
    /// Weight of the spurious hidden unit in every utility attribute.
    pub spurious_benefit: f64,
    pub penalty: f64,
    pub penalty_onset: f64,
    pub penalty_sharpness: f64,
    /// Slope `δ` of the unbounded penalty past the onset.
    pub penalty_tail: f64,
    pub cross_talk: f64,
    /// Standard deviation of `v` under the training distribution.
    pub train_spread: f64,
    /// Mean of `v` under the OOD distribution.
    pub ood_shift: f64,
    /// Mean and spread of `v` in the attribute-labelled data.
    pub attr_center: f64,
    pub attr_spread: f64,
    pub sigma_00: f64,
    pub sigma_kk: f64,
    pub feature_bound: f64,
}

impl Default for SpuriousConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rho: 0.9,
            confounding: None,
            num_utility: 3,
            nuisance_dims: 2,
            utility_gain: 1.0,
            utility_slope: 0.5,
            spurious_slope: 0.5,
            spurious_benefit: 0.5,
            penalty: 2.0,
            penalty_onset: 2.0,
            penalty_sharpness: 1.5,
            penalty_tail: 1.0,
            cross_talk: 0.1,
            train_spread: 0.6,
            ood_shift: 1.0,
            attr_center: 1.0,
            attr_spread: 2.5,
            sigma_00: 0.1,
            sigma_kk: 0.1,
            feature_bound: 10.0,
        }
    }
}

/// The constructed world, its three sampling distributions and the
/// construction-time self-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousWorld {
    pub world: GoldWorld,
    pub train_dist: PromptDistribution,
    pub ood_dist: PromptDistribution,
    /// Distribution of the attribute-labelled data.
    pub attr_dist: PromptDistribution,
    pub spurious_index: usize,
    pub utility_indices: Vec<usize>,
    pub confounding: f64,
    pub train_corr: f64,
    pub ood_corr: f64,
    /// Seed that produced the accepted world (after retries).
    pub accepted_seed: u64,
}

const CHECK_SAMPLES: usize = 10_000;
const MAX_RETRIES: usize = 20;
const MARGIN: f64 = 0.01;

impl SpuriousConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if let Some(c) = self.confounding {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidConfig(format!(
                    "confounding must lie in [0, 1], got {c}"
                )));
            }
        }
        if self.num_utility == 0 {
            return Err(Error::InvalidConfig(
                "need at least one utility attribute".into(),
            ));
        }
        if !(self.attr_spread > 0.0) || !(self.train_spread > 0.0) || !(self.feature_bound > 0.0) {
            return Err(Error::InvalidConfig(
                "spreads and feature_bound must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.num_utility + 1 + self.nuisance_dims
    }
}

pub fn make_spurious_world(cfg: &SpuriousConfig) -> Result<SpuriousWorld> {
    cfg.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_RETRIES {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            derive_seed(cfg.seed, &format!("retry{attempt}"))
        };
        match try_build(cfg, seed) {
            Ok(w) => return Ok(w),
            Err(reason) => last = reason,
        }
    }
    Err(Error::ConstructionFailed {
        attempts: MAX_RETRIES,
        reason: last,
    })
}

fn try_build(cfg: &SpuriousConfig, seed: u64) -> std::result::Result<SpuriousWorld, String> {
    let world = build_world(cfg, seed).map_err(|e| e.to_string())?;
    let u = cfg.num_utility;
    let d = cfg.latent_dim();
    let check_seed = derive_seed(seed, "self-check");

    let ood_dist = {
        let mut m = vec![0.0; d];
        m[u] = cfg.ood_shift;
        PromptDistribution {
            name: "ood".into(),
            mean: vec64(m),
            ..PromptDistribution::standard("ood", d)
        }
    };
    let attr_dist = {
        let mut m = vec![0.0; d];
        m[u] = cfg.attr_center;
        let mut s = vec![1.0; d];
        s[u] = cfg.attr_spread;
        PromptDistribution {
            name: "attrs".into(),
            mean: vec64(m),
            scale: vec64(s),
            ..PromptDistribution::standard("", d)
        }
    };

    let corr_under = |dist: &PromptDistribution, stream: u64| -> std::result::Result<f64, String> {
        let mut rng = stream_rng(check_seed, stream);
        let mut z = Mat64::zeros(CHECK_SAMPLES, d);
        for r in 0..CHECK_SAMPLES {
            let s = dist.sample_bounded(cfg.feature_bound, &mut rng);
            z.as_mut_slice()[r * d..(r + 1) * d].copy_from_slice(&s);
        }
        let a = world.attributes_batch(&z).map_err(|e| e.to_string())?;
        let overall: Vec<f64> = (0..a.rows()).map(|r| world.aggregate(a.row(r))).collect();
        Ok(pearson(&a.col(u), &overall))
    };

    let confounding = match cfg.confounding {
        Some(c) => c,
        None if cfg.rho == 0.0 => 0.0,
        None => {
            // The correlation grows with c; bisect for the smallest level
            // that clears rho with a margin on the calibration samples.
            let target = cfg.rho + MARGIN;
            if corr_under(&train_distribution(cfg, 1.0), 0)? < target {
                return Err(format!(
                    "no confounding level reaches train correlation {}",
                    cfg.rho
                ));
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..20 {
                let mid = 0.5 * (lo + hi);
                if corr_under(&train_distribution(cfg, mid), 0)? >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    let train_dist = train_distribution(cfg, confounding);
    // Fresh samples for the reported values.
    let train_corr_fresh = corr_under(&train_dist, 1)?;
    let ood_corr = corr_under(&ood_dist, 2)?;
    if cfg.rho > 0.0 && train_corr_fresh < cfg.rho {
        return Err(format!(
            "train correlation {train_corr_fresh:.4} below rho {}",
            cfg.rho
        ));
    }
    if cfg.rho == 0.0 && train_corr_fresh > 0.1 {
        return Err(format!(
            "unconfounded train correlation {train_corr_fresh:.4} above 0.1"
        ));
    }
    if ood_corr > 0.1 {
        return Err(format!("ood correlation {ood_corr:.4} above 0.1"));
    }
    Ok(SpuriousWorld {
        world,
        train_dist,
        ood_dist,
        attr_dist,
        spurious_index: u,
        utility_indices: (0..u).collect(),
        confounding,
        train_corr: train_corr_fresh,
        ood_corr,
        accepted_seed: seed,
    })
}

fn vec64(v: Vec<f64>) -> Vec64 {
    Vec64::new(v).expect("finite, non-empty")
}

fn train_distribution(cfg: &SpuriousConfig, c: f64) -> PromptDistribution {
    let u = cfg.num_utility;
    let d = cfg.latent_dim();
    let mut l = Mat64::identity(d);
    for k in 0..u {
        l[(u, k)] = cfg.train_spread * c / (u as f64).sqrt();
    }
    l[(u, u)] = cfg.train_spread * (1.0 - c * c).max(0.0).sqrt();
    PromptDistribution {
        name: "train".into(),
        loading: Some(l),
        ..PromptDistribution::standard("train", d)
    }
}

fn build_world(cfg: &SpuriousConfig, seed: u64) -> Result<GoldWorld> {
    let mut rng = stream_rng(seed, 0);
    let u = cfg.num_utility;
    let nn = cfg.nuisance_dims;
    let d = cfg.latent_dim();
    let k = u + 1;
    let v = u;
    // Hidden units: u utility, 1 spurious, 1 penalty, nn nuisance, 1 tail.
    let h = u + 3 + nn;
    let (hs, hp, ht) = (u, u + 1, u + 2 + nn);
    let mut w1 = Mat64::zeros(d, h);
    let mut b1 = Mat64::zeros(1, h);
    for i in 0..u {
        w1[(i, i)] = cfg.utility_slope;
    }
    w1[(v, hs)] = cfg.spurious_slope;
    w1[(v, hp)] = cfg.penalty_sharpness;
    b1[(0, hp)] = -cfg.penalty_sharpness * cfg.penalty_onset;
    w1[(v, ht)] = 1.0;
    b1[(0, ht)] = -cfg.penalty_onset;
    for j in 0..nn {
        for i in (0..u).chain(u + 1..d) {
            w1[(i, hp + 1 + j)] = 0.5 * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt();
        }
        w1[(u + 1 + j, hp + 1 + j)] += 0.8;
    }
    let mut w2 = Mat64::zeros(h, k);
    let mut b2 = Mat64::zeros(1, k);
    for a in 0..u {
        w2[(a, a)] = cfg.utility_gain;
        for o in 0..u {
            if o != a {
                w2[(o, a)] = cfg.cross_talk * rng.random_range(0.0..1.0);
            }
        }
        for j in 0..nn {
            w2[(hp + 1 + j, a)] = cfg.cross_talk * rng.sample::<f64, _>(StandardNormal);
        }
        w2[(hs, a)] = cfg.spurious_benefit;
        w2[(hp, a)] = -cfg.penalty / 2.0;
        w2[(ht, a)] = -cfg.penalty_tail;
        b2[(0, a)] = -cfg.penalty / 2.0;
    }
    w2[(hs, u)] = 1.0;
    let mut agg = vec![1.0 / u as f64; k];
    agg[u] = 0.0;
    GoldWorld::new(GoldWorldSpec {
        latent_dim: d,
        num_attributes: k,
        attribute_map: AttributeMap::Mlp {
            w1,
            b1,
            w2,
            b2,
            rectified: vec![ht],
        },
        aggregation: vec64(agg),
        noise_cov: GoldWorld::diagonal_noise(cfg.sigma_00, cfg.sigma_kk, k),
        feature_bound: cfg.feature_bound,
    })
}
