use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    adam_step, adam_step_masked, batch_matrix, AdamConfig, AdamState, Graph, NodeId, ParamStore,
};
use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::loss::{pairwise_term, regression_term, LossConfig};
use crate::model::net::{SmormModel, BACKBONE, GATE, HEAD_MULTI, HEAD_SINGLE};
use crate::rng::{derive_seed, stream_rng};
use crate::world::{AttributeRecord, PairwiseRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size_pairs: usize,
    pub batch_size_attrs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size_pairs: 16,
            batch_size_attrs: 16,
            seed: 0,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size_pairs == 0 || self.batch_size_attrs == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub bt_loss: f64,
    pub mse_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,bt_loss,mse_loss,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                r.step, r.bt_loss, r.mse_loss, r.total
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// Cycles through a dataset in per-epoch random orders; epoch `e` uses the
/// stream `(seed, e)`, so the sequence of batches is fixed by the seed.
#[derive(Clone, Debug)]
pub(crate) struct EpochSampler {
    len: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl EpochSampler {
    pub(crate) fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            seed,
            epoch: 0,
            pos: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut stream_rng(self.seed, self.epoch));
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.len) {
            if self.pos == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss nodes of one joint evaluation.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: NodeId,
    pub pairwise: Option<NodeId>,
    pub regression: Option<NodeId>,
}

/// Pairwise term over `pairs` plus `lambda_multi ×` regression term over
/// `attrs`, each a batch mean, as prescribed by `cfg.mode`.
pub fn joint_loss(
    g: &mut Graph,
    model: &SmormModel,
    params: &ParamStore,
    pairs: &[&PairwiseRecord],
    attrs: &[&AttributeRecord],
    cfg: &LossConfig,
) -> Result<JointLoss> {
    let mode = cfg.mode;
    if mode.uses_pairs() && pairs.is_empty() {
        return Err(Error::EmptyBatch("pairwise batch"));
    }
    if mode.uses_attributes() && attrs.is_empty() {
        return Err(Error::EmptyBatch("attribute batch"));
    }
    let pairwise = if mode.uses_pairs() {
        let xc = g.constant(batch_matrix(pairs.iter().map(|p| &p.chosen))?);
        let xr = g.constant(batch_matrix(pairs.iter().map(|p| &p.rejected))?);
        let fc = model.graph_features(g, params, xc)?;
        let fr = model.graph_features(g, params, xr)?;
        let sc = model.graph_single(g, params, fc)?;
        let sr = model.graph_single(g, params, fr)?;
        Some(pairwise_term(g, sc, sr, cfg)?)
    } else {
        None
    };
    let regression = if mode.uses_attributes() {
        let x = g.constant(batch_matrix(attrs.iter().map(|a| &a.input))?);
        let target = g.constant(batch_matrix(attrs.iter().map(|a| &a.scores))?);
        let f = model.graph_features(g, params, x)?;
        let pred = model.graph_multi(g, params, f)?;
        Some(regression_term(g, pred, target)?)
    } else {
        None
    };
    let total = match (pairwise, regression) {
        (Some(p), Some(r)) => {
            let r = g.scale(r, cfg.lambda_multi);
            g.add(p, r)?
        }
        (Some(p), None) => p,
        (None, Some(r)) => r,
        (None, None) => unreachable!("every mode uses at least one dataset"),
    };
    Ok(JointLoss {
        total,
        pairwise,
        regression,
    })
}

/// Runs `train_cfg.steps` AdamW steps, each on one pairwise batch and one
/// attribute batch drawn by independent epoch samplers.
pub fn train(
    model: &mut SmormModel,
    pairs: &[PairwiseRecord],
    attrs: &[AttributeRecord],
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    loss_cfg.validate()?;
    train_cfg.validate()?;
    let mode = loss_cfg.mode;
    if train_cfg.steps > 0 {
        if mode.uses_pairs() && pairs.is_empty() {
            return Err(Error::EmptyBatch("pairwise dataset"));
        }
        if mode.uses_attributes() && attrs.is_empty() {
            return Err(Error::EmptyBatch("attribute dataset"));
        }
    }
    let mut sp = EpochSampler::new(pairs.len(), derive_seed(train_cfg.seed, "pairs"));
    let mut sa = EpochSampler::new(attrs.len(), derive_seed(train_cfg.seed, "attrs"));
    let mut state = AdamState::new(&model.params);
    let mut history = TrainingHistory::default();
    // The gating network is trained separately on frozen features.
    let trainable = |name: &str| !name.starts_with(GATE);
    for step in 0..train_cfg.steps {
        let bp: Vec<&PairwiseRecord> = if mode.uses_pairs() {
            sp.next_batch(train_cfg.batch_size_pairs)
                .into_iter()
                .map(|i| &pairs[i])
                .collect()
        } else {
            Vec::new()
        };
        let ba: Vec<&AttributeRecord> = if mode.uses_attributes() {
            sa.next_batch(train_cfg.batch_size_attrs)
                .into_iter()
                .map(|i| &attrs[i])
                .collect()
        } else {
            Vec::new()
        };
        let mut g = Graph::new();
        let l = joint_loss(&mut g, model, &model.params, &bp, &ba, loss_cfg)?;
        let total = g.scalar(l.total)?;
        let rec = StepRecord {
            step,
            bt_loss: l.pairwise.map(|n| g.scalar(n)).transpose()?.unwrap_or(0.0),
            mse_loss: l
                .regression
                .map(|n| g.scalar(n))
                .transpose()?
                .unwrap_or(0.0),
            total,
        };
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{rec:?}"),
            });
        }
        let grads = g.backward(l.total, &model.params)?;
        adam_step_masked(
            &mut model.params,
            &grads,
            &mut state,
            &train_cfg.adam,
            step,
            train_cfg.steps,
            &trainable,
        )?;
        history.steps.push(rec);
    }
    model.mark_trained(train_cfg.steps as u64, loss_cfg);
    Ok(history)
}

/// Fits the gating network with the Bradley–Terry loss on gated scores;
/// the backbone and both heads stay frozen.
pub fn train_gating(
    model: &mut SmormModel,
    pairs: &[PairwiseRecord],
    train_cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    train_cfg.validate()?;
    if model.gate.is_none() {
        return Err(Error::MissingGating);
    }
    if train_cfg.steps > 0 && pairs.is_empty() {
        return Err(Error::EmptyBatch("pairwise dataset"));
    }
    let frozen = frozen_fingerprint(&model.params);
    // Features are fixed, so they are computed once.
    let chosen = model.features(&batch_matrix(pairs.iter().map(|p| &p.chosen))?)?;
    let rejected = model.features(&batch_matrix(pairs.iter().map(|p| &p.rejected))?)?;
    let mut sampler = EpochSampler::new(pairs.len(), derive_seed(train_cfg.seed, "gate"));
    let mut state = AdamState::new(&model.params);
    let mut history = TrainingHistory::default();
    let bt = LossConfig::default();
    for step in 0..train_cfg.steps {
        let idx = sampler.next_batch(train_cfg.batch_size_pairs);
        let pick = |m: &Mat64| Mat64::from_fn(idx.len(), m.cols(), |r, c| m[(idx[r], c)]);
        let mut g = Graph::new();
        let fc = g.constant(pick(&chosen));
        let fr = g.constant(pick(&rejected));
        let sc = model.graph_gated(&mut g, &model.params, fc)?;
        let sr = model.graph_gated(&mut g, &model.params, fr)?;
        let loss = pairwise_term(&mut g, sc, sr, &bt)?;
        let value = g.scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: "gating loss".into(),
            });
        }
        let grads = g.backward(loss, &model.params)?;
        adam_step_masked(
            &mut model.params,
            &grads,
            &mut state,
            &train_cfg.adam,
            step,
            train_cfg.steps,
            &|n| n.starts_with(GATE),
        )?;
        history.steps.push(StepRecord {
            step,
            bt_loss: value,
            mse_loss: 0.0,
            total: value,
        });
    }
    assert_eq!(
        frozen,
        frozen_fingerprint(&model.params),
        "gating training touched frozen parameters"
    );
    Ok(history)
}

fn frozen_fingerprint(p: &ParamStore) -> String {
    [BACKBONE, HEAD_SINGLE, HEAD_MULTI]
        .iter()
        .map(|pre| p.fingerprint(pre))
        .collect::<Vec<_>>()
        .join(":")
}

/// Plain AdamW loop on an arbitrary scalar objective; used for the
/// Monte-Carlo oracles that refit small models many times.
pub fn minimize<F>(
    params: &mut ParamStore,
    cfg: &AdamConfig,
    steps: usize,
    mut build: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore, usize) -> Result<NodeId>,
{
    let mut state = AdamState::new(params);
    let mut last = f64::NAN;
    for step in 0..steps {
        let mut g = Graph::new();
        let l = build(&mut g, params, step)?;
        last = g.scalar(l)?;
        let grads = g.backward(l, params)?;
        adam_step(params, &grads, &mut state, cfg, step, steps)?;
    }
    Ok(last)
}
