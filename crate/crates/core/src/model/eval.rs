use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::net::SmormModel;
use crate::model::scorer::RewardFn;
use crate::rng::stream_rng;
use crate::world::{GoldWorld, PairwiseRecord, PromptDistribution};

/// Held-out inputs with their noiseless gold scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub inputs: Mat64,
    pub overall: Vec<f64>,
    /// `n × K`.
    pub attributes: Mat64,
}

impl EvalSet {
    pub fn sample(
        world: &GoldWorld,
        dist: &PromptDistribution,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        dist.validate()?;
        let d = world.latent_dim();
        let mut inputs = Mat64::zeros(n, d);
        for r in 0..n {
            let z = dist.sample_bounded(world.feature_bound(), &mut stream_rng(seed, r as u64));
            inputs.as_mut_slice()[r * d..(r + 1) * d].copy_from_slice(&z);
        }
        let attributes = world.attributes_batch(&inputs)?;
        let overall = (0..n).map(|r| world.aggregate(attributes.row(r))).collect();
        Ok(Self {
            inputs,
            overall,
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.overall.len()
    }

    pub fn is_empty(&self) -> bool {
        self.overall.is_empty()
    }
}

/// Mean squared error of predicted overall scores against `r_s*` after
/// centering both: Bradley–Terry scores are only defined up to a shift.
pub fn mse_overall(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("mse_overall"));
    }
    let (mp, mg) = (crate::stats::mean(pred), crate::stats::mean(gold));
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(p, g)| ((p - mp) - (g - mg)).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean over records of the squared attribute error summed over `K`.
pub fn mse_attributes(pred: &Mat64, gold: &Mat64) -> Result<f64> {
    if pred.shape() != gold.shape() {
        return Err(Error::ShapeMismatch {
            expected: gold.shape(),
            found: pred.shape(),
        });
    }
    let n = pred.rows().max(1) as f64;
    Ok(pred
        .as_slice()
        .iter()
        .zip(gold.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Fraction of pairs ordered like the noiseless gold score; score ties
/// count one half, pairs with tied gold are skipped.
pub fn pairwise_accuracy(
    reward: &dyn RewardFn,
    world: &GoldWorld,
    pairs: &[PairwiseRecord],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairwise_accuracy"));
    }
    let c = crate::diffnet::batch_matrix(pairs.iter().map(|p| &p.chosen))?;
    let r = crate::diffnet::batch_matrix(pairs.iter().map(|p| &p.rejected))?;
    let (sc, sr) = (reward.score_batch(&c)?, reward.score_batch(&r)?);
    let (gc, gr) = (world.overall_batch(&c)?, world.overall_batch(&r)?);
    let mut hits = 0.0;
    let mut n = 0usize;
    for i in 0..pairs.len() {
        let gold = gc[i] - gr[i];
        if gold == 0.0 {
            continue;
        }
        let pred = sc[i] - sr[i];
        n += 1;
        hits += if pred == 0.0 {
            0.5
        } else if (pred > 0.0) == (gold > 0.0) {
            1.0
        } else {
            0.0
        };
    }
    Ok(if n == 0 { 0.5 } else { hits / n as f64 })
}

/// Held-out errors of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub mse_s: f64,
    pub mse_m: f64,
}

pub fn held_out(model: &SmormModel, eval: &EvalSet) -> Result<HeldOut> {
    let h = model.heads(&eval.inputs)?;
    Ok(HeldOut {
        mse_s: mse_overall(&h.single, &eval.overall)?,
        mse_m: mse_attributes(&h.multi, &eval.attributes)?,
    })
}
