use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::{
    held_out, pairwise_accuracy, train, EvalSet, LossConfig, ModelConfig, Scorer, SmormModel,
    Strategy, TrainConfig, TrainingMode,
};
use crate::rng::derive_seed;
use crate::theory::coupling::coupling;
use crate::theory::moments::record_moments;
use crate::world::{gen_multiattr, gen_pairwise, GoldWorld, PromptDistribution};

/// Fewest seeds accepted by [`compare_mse_empirical`].
pub const MIN_SEEDS: usize = 10;
/// Smallest `𝟙ᵀα / ‖α‖₁` treated as a positively aligned world.
pub const ALIGNMENT_FLOOR: f64 = 0.05;
/// Level of the chi-square test for a nonzero mean preference difference.
pub const SIGNAL_LEVEL: f64 = 0.01;

/// Exact one-sided binomial sign test on paired outcomes; ties are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, ½)`.
    pub p_value: f64,
}

/// One-sided sign test counting `a[i] < b[i]` as a win for `a`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    Ok(SignTest {
        wins,
        losses,
        ties: a.len() - wins - losses,
        p_value: binomial_upper_tail(wins, wins + losses),
    })
}

/// `P(X ≥ k)` for `X ~ Binomial(n, ½)`, summed in log space.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half = -(n as f64) * std::f64::consts::LN_2;
    // log C(n, j) built incrementally from j = 0.
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(n + 1 - k);
    for j in 0..=n {
        if j >= k {
            terms.push(log_c + ln_half);
        }
        log_c += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseComparisonConfig {
    pub seeds: Vec<u64>,
    pub num_pairs: usize,
    pub num_attrs: usize,
    pub num_eval: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub lambda_multi: f64,
    pub train: TrainConfig,
}

impl Default for MseComparisonConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            num_pairs: 2000,
            num_attrs: 2000,
            num_eval: 2000,
            hidden: vec![32],
            feature_dim: 16,
            lambda_multi: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// Held-out results of one training regime. Heads a regime never trains
/// are left out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub mse_s: Option<f64>,
    pub mse_m: Option<f64>,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub single_only: RegimeResult,
    pub multi_only: RegimeResult,
    pub smorm: RegimeResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MseComparisonReport {
    pub seeds: Vec<SeedResult>,
    /// SMORM `MSE_S` below single-only.
    pub test_mse_s: SignTest,
    /// SMORM `MSE_M` below multi-only.
    pub test_mse_m: SignTest,
    /// `𝟙ᵀα / ‖α‖₁` on the latent moments of the first seed's data.
    pub alignment: f64,
    /// `n_S · μ̃_Sᵀμ̃_S`, chi-square with `d` degrees of freedom when the
    /// chosen-minus-rejected difference has zero mean.
    pub preference_signal: f64,
    /// Upper [`SIGNAL_LEVEL`] quantile of that chi-square.
    pub signal_threshold: f64,
    pub assumptions_hold: bool,
    /// Both sign tests significant at 0.05 and the alignment assumption met.
    pub claim_supported: bool,
    pub notes: Vec<String>,
}

fn run_seed(
    world: &GoldWorld,
    dist: &PromptDistribution,
    cfg: &MseComparisonConfig,
    seed: u64,
) -> Result<SeedResult> {
    let pairs = gen_pairwise(world, cfg.num_pairs, dist, derive_seed(seed, "pairs"))?;
    let attrs = gen_multiattr(world, cfg.num_attrs, dist, derive_seed(seed, "attrs"))?;
    let eval = EvalSet::sample(world, dist, cfg.num_eval, derive_seed(seed, "eval"))?;
    let eval_pairs = gen_pairwise(world, cfg.num_eval, dist, derive_seed(seed, "eval-pairs"))?;
    let mc = ModelConfig::new(
        world.latent_dim(),
        cfg.hidden.clone(),
        cfg.feature_dim,
        world.num_attributes(),
    );
    let tc = TrainConfig {
        seed: derive_seed(seed, "train"),
        ..cfg.train.clone()
    };
    let regime = |mode: TrainingMode| -> Result<RegimeResult> {
        let mut model = SmormModel::new(mc.clone(), derive_seed(seed, "init"))?;
        let loss = LossConfig {
            mode,
            lambda_multi: cfg.lambda_multi,
            ..LossConfig::default()
        };
        train(&mut model, &pairs, &attrs, &loss, &tc)?;
        let h = held_out(&model, &eval)?;
        let strategy = if mode == TrainingMode::MultiOnly {
            Strategy::L
        } else {
            Strategy::F
        };
        let accuracy = pairwise_accuracy(&Scorer::single(model, strategy)?, world, &eval_pairs)?;
        Ok(RegimeResult {
            mse_s: mode.uses_pairs().then_some(h.mse_s),
            mse_m: mode.uses_attributes().then_some(h.mse_m),
            accuracy,
        })
    };
    Ok(SeedResult {
        seed,
        single_only: regime(TrainingMode::SingleOnly)?,
        multi_only: regime(TrainingMode::MultiOnly)?,
        smorm: regime(TrainingMode::Smorm)?,
    })
}

/// Trains single-only, multi-only and SMORM models per seed on identical
/// data and initialization, and sign-tests SMORM's held-out errors against
/// the matching single-task regime.
pub fn compare_mse_empirical(
    world: &GoldWorld,
    dist: &PromptDistribution,
    cfg: &MseComparisonConfig,
) -> Result<MseComparisonReport> {
    if cfg.seeds.len() < MIN_SEEDS {
        return Err(Error::InsufficientSamples {
            needed: MIN_SEEDS,
            found: cfg.seeds.len(),
        });
    }
    let seeds: Vec<SeedResult> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(world, dist, cfg, s))
        .collect::<Result<_>>()?;
    let col = |f: &dyn Fn(&SeedResult) -> Option<f64>| {
        seeds
            .iter()
            .map(|s| f(s).unwrap_or(f64::NAN))
            .collect::<Vec<_>>()
    };
    let test_mse_s = sign_test(&col(&|s| s.smorm.mse_s), &col(&|s| s.single_only.mse_s))?;
    let test_mse_m = sign_test(&col(&|s| s.smorm.mse_m), &col(&|s| s.multi_only.mse_m))?;

    let first = cfg.seeds[0];
    let pairs = gen_pairwise(world, cfg.num_pairs, dist, derive_seed(first, "pairs"))?;
    let attrs = gen_multiattr(world, cfg.num_attrs, dist, derive_seed(first, "attrs"))?;
    let mut notes = Vec::new();
    let dof = world.latent_dim() as f64;
    let signal_threshold = ChiSquared::new(dof)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(1.0 - SIGNAL_LEVEL);
    let (alignment, preference_signal) = match record_moments(&pairs, &attrs, None)
        .and_then(|m| coupling(&m).map(|cp| (m.n_s, cp)))
    {
        Ok((n_s, cp)) => {
            let l1: f64 = cp.alpha.iter().map(|a| a.abs()).sum();
            let nn: f64 = cp.mu_tilde.iter().map(|v| v * v).sum();
            (
                if l1 > 0.0 { cp.one_t_alpha / l1 } else { 0.0 },
                n_s as f64 * nn,
            )
        }
        Err(e) => {
            notes.push(format!("moment estimation failed: {e}"));
            (0.0, 0.0)
        }
    };
    if preference_signal <= signal_threshold {
        notes.push(format!(
            "mean preference difference is indistinguishable from zero (statistic {preference_signal:.2}, threshold {signal_threshold:.2}); alignment is undefined"
        ));
    }
    let assumptions_hold = preference_signal > signal_threshold && alignment > ALIGNMENT_FLOOR;
    if !assumptions_hold {
        notes.push(format!(
            "attribute targets are not positively aligned with the preference direction (alignment {alignment:.4}); no ordering is claimed"
        ));
    }
    let significant = test_mse_s.p_value < 0.05 && test_mse_m.p_value < 0.05;
    Ok(MseComparisonReport {
        seeds,
        test_mse_s,
        test_mse_m,
        alignment,
        preference_signal,
        signal_threshold,
        assumptions_hold,
        claim_supported: assumptions_hold && significant,
        notes,
    })
}
