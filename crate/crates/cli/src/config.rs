//! The run configuration: one flat TOML document per run.
//!
//! ```toml
//! schema_version = 1
//! seed = 0
//!
//! [world]
//! kind = "spurious"          # spurious | random | zero_alignment
//! [world.spurious]
//! confounding = 0.99
//!
//! [model]
//! feature_dim = 4
//!
//! [train]
//! mode = "smorm"
//! steps = 3000
//! ```
//!
//! Every key has a default, unknown keys are rejected, and the resolved
//! document (defaults filled in, command-line overrides applied) is written
//! to every output directory as `config.resolved.toml`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smorm_core::linalg::Vec64;
use smorm_core::model::{LossConfig, ModelConfig, TrainConfig, TrainingMode};
use smorm_core::rlhf::{default_n_values, PolicyConfig, PpoConfig};
use smorm_core::theory::MIN_SEEDS;
use smorm_core::world::{
    make_spurious_world, GoldWorld, PromptDistribution, RandomWorldParams, SpuriousConfig,
};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Master seed; every random stream of a run is derived from it.
    pub seed: u64,
    pub world: WorldSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub bon: BonSection,
    pub ppo: PpoSection,
    pub verify: VerifySection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            world: WorldSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            bon: BonSection::default(),
            ppo: PpoSection::default(),
            verify: VerifySection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    /// Verbosity-like spurious attribute; train, OOD and attribute
    /// distributions come from the construction.
    Spurious,
    /// Random MLP attributes; OOD is the standard normal shifted by
    /// `ood_shift` in every coordinate.
    Random,
    /// Even attributes with no first-order preference signal.
    ZeroAlignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroAlignmentParams {
    pub latent_dim: usize,
    pub num_attributes: usize,
    pub sigma: f64,
}

impl Default for ZeroAlignmentParams {
    fn default() -> Self {
        Self {
            latent_dim: 4,
            num_attributes: 3,
            sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub kind: WorldKind,
    /// OOD mean shift for the random and zero-alignment worlds.
    pub ood_shift: f64,
    pub spurious: SpuriousConfig,
    pub random: RandomWorldParams,
    pub zero_alignment: ZeroAlignmentParams,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            kind: WorldKind::Spurious,
            ood_shift: 1.0,
            spurious: SpuriousConfig::default(),
            random: RandomWorldParams::default(),
            zero_alignment: ZeroAlignmentParams::default(),
        }
    }
}

/// Record counts per split. Attribute-labelled training data comes from the
/// world's attribute distribution; evaluation splits from the training
/// (`id_eval`) and OOD (`ood_eval`) distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_pairs: usize,
    pub train_attrs: usize,
    pub eval_pairs: usize,
    pub eval_attrs: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_pairs: 2000,
            train_attrs: 2000,
            eval_pairs: 2000,
            eval_attrs: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub gating: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            feature_dim: 16,
            gating: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainingMode,
    pub steps: usize,
    pub batch_size_pairs: usize,
    pub batch_size_attrs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_multi: f64,
    pub margin: f64,
    pub label_smooth_eps: f64,
    /// Steps of gate training after the main run when `model.gating` is set.
    pub gating_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let loss = LossConfig::default();
        let train = TrainConfig::default();
        Self {
            mode: loss.mode,
            steps: train.steps,
            batch_size_pairs: train.batch_size_pairs,
            batch_size_attrs: train.batch_size_attrs,
            learning_rate: train.adam.learning_rate,
            weight_decay: train.adam.weight_decay,
            lambda_multi: loss.lambda_multi,
            margin: loss.margin,
            label_smooth_eps: loss.label_smooth_eps,
            gating_steps: 500,
        }
    }
}

impl TrainSection {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.mode,
            lambda_multi: self.lambda_multi,
            margin: self.margin,
            label_smooth_eps: self.label_smooth_eps,
        }
    }

    pub fn train_config(&self, steps: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig {
            steps,
            batch_size_pairs: self.batch_size_pairs,
            batch_size_attrs: self.batch_size_attrs,
            seed,
            ..TrainConfig::default()
        };
        cfg.adam.learning_rate = self.learning_rate;
        cfg.adam.weight_decay = self.weight_decay;
        cfg
    }
}

/// Which world distribution the initial policy's responses follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Responses {
    Id,
    Ood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BonSection {
    /// `F`, `L`, `M`, `gated`, `ensemble_mean`, `ensemble_min`,
    /// `baseline_sm`, or `gold` for the noiseless gold score.
    pub strategy: String,
    pub prompts: usize,
    pub n_values: Vec<usize>,
    pub responses: Responses,
    /// Gold drop below the curve maximum that counts as over-optimization.
    pub drop_threshold: f64,
    pub policy: PolicyConfig,
}

impl Default for BonSection {
    fn default() -> Self {
        Self {
            strategy: "F".into(),
            prompts: 500,
            n_values: default_n_values(),
            responses: Responses::Ood,
            drop_threshold: 0.1,
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub strategy: String,
    pub prompts: usize,
    pub responses: Responses,
    /// Window of the hacking detector, in logged steps.
    pub window: usize,
    /// Prompts of the final win-rate comparison against the initial policy.
    pub win_rate_prompts: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub inner_epochs: usize,
    pub clip_range: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub eval_prompts: usize,
    pub policy: PolicyConfig,
}

impl Default for PpoSection {
    fn default() -> Self {
        let p = PpoConfig::default();
        Self {
            strategy: "F".into(),
            prompts: 100 * p.batch_size,
            responses: Responses::Ood,
            window: smorm_core::rlhf::DEFAULT_WINDOW,
            win_rate_prompts: 500,
            epochs: p.epochs,
            batch_size: p.batch_size,
            inner_epochs: p.inner_epochs,
            clip_range: p.clip_range,
            gae_lambda: p.gae_lambda,
            gamma: p.gamma,
            learning_rate: p.learning_rate,
            kl_coef: p.kl_coef,
            eval_prompts: p.eval_prompts,
            policy: PolicyConfig::default(),
        }
    }
}

impl PpoSection {
    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            inner_epochs: self.inner_epochs,
            clip_range: self.clip_range,
            gae_lambda: self.gae_lambda,
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            kl_coef: self.kl_coef,
            eval_prompts: self.eval_prompts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Held-out inputs the lower bound is checked on.
    pub eval_samples: usize,
    /// Ridge of the population-head normal equations.
    pub ridge: f64,
    /// Random input pairs of the per-pair preference-error check.
    pub lemma_pairs: usize,
    /// Inputs whose head gradients form the Fisher matrices.
    pub fisher_samples: usize,
    /// Seeds of the empirical MSE comparison; 0 skips it.
    pub mse_comparison_seeds: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            eval_samples: 10_000,
            ridge: 0.0,
            lemma_pairs: 10_000,
            fisher_samples: 200,
            mse_comparison_seeds: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<f64>,
    /// Accuracy drop below the inner-grid minimum that flags an edge value.
    pub edge_tolerance: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            parameter: "lambda_multi".into(),
            values: vec![0.01, 0.1, 1.0, 10.0],
            edge_tolerance: 0.02,
        }
    }
}

/// Seeds of every random stream, offset from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub pairs: u64,
    pub attrs: u64,
    pub train: u64,
    pub init: u64,
    pub policy: u64,
    pub bon_prompts: u64,
    pub bon: u64,
    pub ppo_prompts: u64,
    pub ppo: u64,
    pub id_eval: u64,
    pub ood_eval: u64,
    pub verify: u64,
    pub win_prompts: u64,
    pub win: u64,
}

/// A constructed world and its sampling distributions.
#[derive(Clone, Debug)]
pub struct BuiltWorld {
    pub world: GoldWorld,
    pub train_dist: PromptDistribution,
    pub ood_dist: PromptDistribution,
    pub attr_dist: PromptDistribution,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.world.spurious.validate()?;
        self.train.loss_config().validate()?;
        self.train.train_config(self.train.steps, 0).validate()?;
        self.ppo.ppo_config().validate()?;
        if self.model.feature_dim == 0 {
            return Err(CliError::config("model.feature_dim must be >= 1"));
        }
        if self.sweep.parameter != "lambda_multi" {
            return Err(CliError::config(format!(
                "sweep.parameter `{}` is not supported (only lambda_multi)",
                self.sweep.parameter
            )));
        }
        if self.sweep.values.is_empty() {
            return Err(CliError::config("sweep.values must not be empty"));
        }
        if let Some(v) = self
            .sweep
            .values
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(CliError::config(format!(
                "sweep.values must be finite and >= 0, got {v}"
            )));
        }
        let t2 = self.verify.mse_comparison_seeds;
        if t2 > 0 && t2 < MIN_SEEDS {
            return Err(CliError::config(format!(
                "verify.mse_comparison_seeds must be 0 or at least {MIN_SEEDS}, got {t2}"
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let s = |k: u64| self.seed.wrapping_add(k);
        Seeds {
            pairs: s(1),
            attrs: s(2),
            train: s(3),
            init: s(4),
            policy: s(5),
            bon_prompts: s(6),
            bon: s(7),
            ppo_prompts: s(8),
            ppo: s(9),
            id_eval: s(10),
            ood_eval: s(11),
            verify: s(12),
            win_prompts: s(13),
            win: s(14),
        }
    }

    pub fn build_world(&self) -> Result<BuiltWorld> {
        let w = &self.world;
        let shifted = |d: usize| -> Result<(PromptDistribution, PromptDistribution)> {
            let id = PromptDistribution::standard("id", d);
            let mut ood = PromptDistribution::standard("ood", d);
            ood.mean = Vec64::new(vec![w.ood_shift; d])?;
            Ok((id, ood))
        };
        Ok(match w.kind {
            WorldKind::Spurious => {
                let sw = make_spurious_world(&w.spurious)?;
                BuiltWorld {
                    world: sw.world,
                    train_dist: sw.train_dist,
                    ood_dist: sw.ood_dist,
                    attr_dist: sw.attr_dist,
                }
            }
            WorldKind::Random => {
                let world = GoldWorld::random_mlp(&w.random)?;
                let (id, ood) = shifted(world.latent_dim())?;
                BuiltWorld {
                    world,
                    attr_dist: id.clone(),
                    train_dist: id,
                    ood_dist: ood,
                }
            }
            WorldKind::ZeroAlignment => {
                let z = &w.zero_alignment;
                let world = GoldWorld::zero_alignment(z.latent_dim, z.num_attributes, z.sigma)?;
                let (id, ood) = shifted(world.latent_dim())?;
                BuiltWorld {
                    world,
                    attr_dist: id.clone(),
                    train_dist: id,
                    ood_dist: ood,
                }
            }
        })
    }

    pub fn model_config(&self, world: &GoldWorld) -> ModelConfig {
        ModelConfig {
            gating: self.model.gating,
            ..ModelConfig::new(
                world.latent_dim(),
                self.model.hidden.clone(),
                self.model.feature_dim,
                world.num_attributes(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(RunConfig::from_toml("colour = 1\n")
            .unwrap_err()
            .to_string()
            .contains("colour"));
    }

    #[test]
    fn schema_version_is_pinned() {
        assert!(RunConfig::from_toml("schema_version = 2\n")
            .unwrap_err()
            .to_string()
            .contains("schema_version"));
    }

    #[test]
    fn sweep_and_seed_checks() {
        assert!(RunConfig::from_toml("[sweep]\nvalues = []\n").is_err());
        assert!(RunConfig::from_toml("[sweep]\nparameter = \"margin\"\n").is_err());
        assert!(RunConfig::from_toml("[verify]\nmse_comparison_seeds = 1\n")
            .unwrap_err()
            .to_string()
            .contains("at least 10"));
        assert!(RunConfig::from_toml("[verify]\nmse_comparison_seeds = 10\n").is_ok());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::from_toml(
            "seed = 7\n[world]\nkind = \"random\"\n[world.random]\nlatent_dim = 5\n[train]\nmode = \"single_only\"\n[bon.policy]\nprompt_dim = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.world.random.latent_dim, 5);
        assert_eq!(cfg.train.mode, TrainingMode::SingleOnly);
        assert_eq!(cfg.bon.policy.prompt_dim, 3);
        assert_eq!(cfg.seeds().pairs, 8);
        assert_eq!(cfg.build_world().unwrap().world.latent_dim(), 5);
    }
}
