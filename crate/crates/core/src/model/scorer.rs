use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::loss::TrainingMode;
use crate::model::net::{SmormModel, Strategy};
use crate::world::GoldWorld;

/// Anything that assigns a scalar reward to a batch of response latents.
pub trait RewardFn: Sync {
    fn score_batch(&self, inputs: &Mat64) -> Result<Vec<f64>>;
}

/// The noiseless overall gold score, for oracle runs.
impl RewardFn for GoldWorld {
    fn score_batch(&self, inputs: &Mat64) -> Result<Vec<f64>> {
        self.overall_batch(inputs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Mean,
    Min,
}

pub fn ensemble_aggregate(scores: &[f64], mode: EnsembleMode) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("ensemble scores"));
    }
    Ok(match mode {
        EnsembleMode::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        EnsembleMode::Min => scores.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Inference strategies over one or more trained models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceStrategy {
    F,
    L,
    M,
    Gated,
    EnsembleMean,
    EnsembleMin,
    /// Average of a single-only model's `F` and a multi-only model's `L`.
    BaselineSM,
}

impl std::str::FromStr for InferenceStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ensemble_mean" => Self::EnsembleMean,
            "ensemble_min" => Self::EnsembleMin,
            "baseline_sm" => Self::BaselineSM,
            other => match other.parse::<Strategy>()? {
                Strategy::F => Self::F,
                Strategy::L => Self::L,
                Strategy::M => Self::M,
                Strategy::Gated => Self::Gated,
            },
        })
    }
}

/// A validated strategy together with the models it reads.
#[derive(Clone, Debug)]
pub struct Scorer {
    strategy: InferenceStrategy,
    models: Vec<SmormModel>,
}

impl Scorer {
    pub fn new(strategy: InferenceStrategy, models: Vec<SmormModel>) -> Result<Self> {
        use InferenceStrategy::*;
        match strategy {
            F | L | M | Gated => {
                if models.is_empty() {
                    return Err(Error::MissingEnsembleMembers {
                        needed: 1,
                        found: 0,
                    });
                }
                if strategy == Gated && !models[0].has_gating() {
                    return Err(Error::MissingGating);
                }
                if matches!(strategy, L | M | Gated) && !models[0].has_multi_head() {
                    return Err(Error::MissingMultiHead);
                }
            }
            EnsembleMean | EnsembleMin => {
                if models.len() < 2 {
                    return Err(Error::MissingEnsembleMembers {
                        needed: 2,
                        found: models.len(),
                    });
                }
            }
            BaselineSM => {
                let mode = |m: &SmormModel| m.loss_config().map(|l| l.mode);
                let ok = models.len() == 2
                    && mode(&models[0]) == Some(TrainingMode::SingleOnly)
                    && mode(&models[1]) == Some(TrainingMode::MultiOnly);
                if !ok {
                    return Err(Error::InvalidConfig(
                        "baseline_sm needs a single-only model followed by a multi-only model"
                            .into(),
                    ));
                }
            }
        }
        Ok(Self { strategy, models })
    }

    pub fn single(model: SmormModel, strategy: Strategy) -> Result<Self> {
        let s = match strategy {
            Strategy::F => InferenceStrategy::F,
            Strategy::L => InferenceStrategy::L,
            Strategy::M => InferenceStrategy::M,
            Strategy::Gated => InferenceStrategy::Gated,
        };
        Self::new(s, vec![model])
    }

    pub fn strategy(&self) -> InferenceStrategy {
        self.strategy
    }

    pub fn models(&self) -> &[SmormModel] {
        &self.models
    }
}

impl RewardFn for Scorer {
    fn score_batch(&self, inputs: &Mat64) -> Result<Vec<f64>> {
        use InferenceStrategy::*;
        let m0 = &self.models[0];
        match self.strategy {
            F => m0.score_batch(inputs, Strategy::F),
            L => m0.score_batch(inputs, Strategy::L),
            M => m0.score_batch(inputs, Strategy::M),
            Gated => m0.score_batch(inputs, Strategy::Gated),
            EnsembleMean | EnsembleMin => {
                let mode = if self.strategy == EnsembleMean {
                    EnsembleMode::Mean
                } else {
                    EnsembleMode::Min
                };
                let per: Vec<Vec<f64>> = self
                    .models
                    .iter()
                    .map(|m| m.score_batch(inputs, Strategy::F))
                    .collect::<Result<_>>()?;
                (0..inputs.rows())
                    .map(|r| {
                        ensemble_aggregate(&per.iter().map(|s| s[r]).collect::<Vec<_>>(), mode)
                    })
                    .collect()
            }
            BaselineSM => {
                let f = self.models[0].score_batch(inputs, Strategy::F)?;
                let l = self.models[1].score_batch(inputs, Strategy::L)?;
                Ok(f.iter().zip(&l).map(|(a, b)| 0.5 * (a + b)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss::LossConfig;
    use crate::model::net::ModelConfig;

    #[test]
    fn aggregate_examples() {
        assert_eq!(ensemble_aggregate(&[2.0], EnsembleMode::Mean).unwrap(), 2.0);
        assert_eq!(ensemble_aggregate(&[2.0], EnsembleMode::Min).unwrap(), 2.0);
        assert_eq!(
            ensemble_aggregate(&[1.0, 3.0], EnsembleMode::Mean).unwrap(),
            2.0
        );
        assert_eq!(
            ensemble_aggregate(&[1.0, 3.0], EnsembleMode::Min).unwrap(),
            1.0
        );
        assert!(ensemble_aggregate(&[], EnsembleMode::Min).is_err());
    }

    #[test]
    fn strategy_requirements() {
        let m = SmormModel::new(ModelConfig::new(2, vec![3], 3, 2), 0).unwrap();
        assert!(matches!(
            Scorer::new(InferenceStrategy::Gated, vec![m.clone()]),
            Err(Error::MissingGating)
        ));
        assert!(matches!(
            Scorer::new(InferenceStrategy::EnsembleMin, vec![m.clone()]),
            Err(Error::MissingEnsembleMembers {
                needed: 2,
                found: 1
            })
        ));
        assert!(Scorer::new(InferenceStrategy::BaselineSM, vec![m.clone(), m.clone()]).is_err());
        let mut s = m.clone();
        s.mark_trained(0, &LossConfig::with_mode(TrainingMode::SingleOnly));
        let mut t = m.clone();
        t.mark_trained(0, &LossConfig::with_mode(TrainingMode::MultiOnly));
        let sc = Scorer::new(InferenceStrategy::BaselineSM, vec![s.clone(), t.clone()]).unwrap();
        let x = Mat64::from_fn(3, 2, |r, c| r as f64 - c as f64);
        let f = s.score_batch(&x, Strategy::F).unwrap();
        let l = t.score_batch(&x, Strategy::L).unwrap();
        let got = sc.score_batch(&x).unwrap();
        for i in 0..3 {
            assert!((got[i] - 0.5 * (f[i] + l[i])).abs() < 1e-15);
        }
    }
}
