use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, Graph, Mlp, MlpConfig, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::{Mat64, Vec64};
use crate::model::loss::LossConfig;
use crate::rng::{derive_seed, stream_rng};

pub const BACKBONE: &str = "backbone";
pub const HEAD_SINGLE: &str = "head.single";
pub const HEAD_MULTI: &str = "head.multi";
pub const GATE: &str = "gate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: MlpConfig,
    pub num_attributes: usize,
    #[serde(default)]
    pub gating: bool,
}

impl ModelConfig {
    /// Tanh backbone `input_dim → hidden… → feature_dim` with tanh features.
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
        num_attributes: usize,
    ) -> Self {
        Self {
            backbone: MlpConfig::new(input_dim, hidden, feature_dim),
            num_attributes,
            gating: false,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_attributes == 0 {
            return Err(Error::InvalidConfig("num_attributes must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn gate_config(&self) -> MlpConfig {
        let k = self.num_attributes;
        MlpConfig {
            input_dim: self.feature_dim(),
            hidden: vec![k.max(16)],
            output_dim: k,
            activation: Activation::Tanh,
            activate_output: false,
        }
    }
}

/// Inference strategy of a single model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Bradley–Terry head.
    F,
    /// Mean of the attribute heads.
    L,
    /// Average of `F` and `L`.
    M,
    /// Gate-weighted attribute heads.
    Gated,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" | "f" => Ok(Self::F),
            "L" | "l" => Ok(Self::L),
            "M" | "m" => Ok(Self::M),
            "gated" | "Gated" => Ok(Self::Gated),
            _ => Err(Error::InvalidConfig(format!(
                "unknown strategy `{s}` (expected F, L, M or gated)"
            ))),
        }
    }
}

/// Shared backbone `f_θ` with a Bradley–Terry head `w_S` (d × 1), an
/// attribute head `w_M` (d × K) and an optional gating network.
#[derive(Clone, Debug, PartialEq)]
pub struct SmormModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) backbone: Mlp,
    pub(crate) gate: Option<Mlp>,
    pub(crate) seed: u64,
    pub(crate) step: u64,
    pub(crate) loss: Option<LossConfig>,
}

/// Forward-pass outputs for a batch.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub features: Mat64,
    pub single: Vec<f64>,
    /// `n × K`.
    pub multi: Mat64,
}

impl SmormModel {
    /// Glorot backbone, heads uniform in `±1/√d`, gating output layer zero
    /// (uniform gate at initialization).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Mlp::new(config.backbone.clone(), BACKBONE)?;
        let mut params = ParamStore::new();
        let mut rng = stream_rng(derive_seed(seed, "init"), 0);
        backbone.init(&mut params, &mut rng)?;
        let d = config.feature_dim();
        let k = config.num_attributes;
        let bound = 1.0 / (d as f64).sqrt();
        params.insert(
            HEAD_SINGLE,
            Mat64::from_fn(d, 1, |_, _| rng.random_range(-bound..bound)),
        )?;
        params.insert(
            HEAD_MULTI,
            Mat64::from_fn(d, k, |_, _| rng.random_range(-bound..bound)),
        )?;
        let mut model = Self {
            config,
            params,
            backbone,
            gate: None,
            seed,
            step: 0,
            loss: None,
        };
        if model.config.gating {
            model.init_gating()?;
        }
        Ok(model)
    }

    /// Adds (or re-initializes) the gating network.
    pub fn init_gating(&mut self) -> Result<()> {
        let gate = Mlp::new(self.config.gate_config(), GATE)?;
        let mut rng = stream_rng(derive_seed(self.seed, "gate"), 0);
        let mut fresh = ParamStore::new();
        gate.init(&mut fresh, &mut rng)?;
        let last = gate.config.num_layers() - 1;
        for (name, t) in fresh.iter() {
            let value = if name == gate.weight_name(last) {
                Mat64::zeros(t.rows(), t.cols())
            } else {
                t.clone()
            };
            if self.params.get(name).is_some() {
                self.params.set(name, value)?;
            } else {
                self.params.insert(name, value)?;
            }
        }
        self.config.gating = true;
        self.gate = Some(gate);
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn config_gate(&self) -> MlpConfig {
        self.config.gate_config()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_attributes(&self) -> usize {
        self.config.num_attributes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn steps_trained(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Loss configuration of the most recent training run.
    pub fn loss_config(&self) -> Option<&LossConfig> {
        self.loss.as_ref()
    }

    pub fn has_gating(&self) -> bool {
        self.gate.is_some()
    }

    /// Whether the attribute head has been trained (or the model was never
    /// trained at all, in which case the heads are at initialization).
    pub fn has_multi_head(&self) -> bool {
        match &self.loss {
            None => true,
            Some(l) => l.mode.uses_attributes(),
        }
    }

    pub fn head_single(&self) -> Vec64 {
        Vec64::from_vec_unchecked(self.params.get(HEAD_SINGLE).expect("head present").col(0))
    }

    pub fn head_multi(&self) -> &Mat64 {
        self.params.get(HEAD_MULTI).expect("head present")
    }

    pub(crate) fn graph_features(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        self.backbone.graph(g, params, x)
    }

    pub(crate) fn graph_single(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        f: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(params, HEAD_SINGLE)?;
        g.matmul(f, w)
    }

    pub(crate) fn graph_multi(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        f: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(params, HEAD_MULTI)?;
        g.matmul(f, w)
    }

    /// Gate-weighted score `Σ_i gate_i(f)·(w_M,iᵀ f)` as an `n × 1` node.
    pub(crate) fn graph_gated(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        f: NodeId,
    ) -> Result<NodeId> {
        let gate = self.gate.as_ref().ok_or(Error::MissingGating)?;
        let logits = gate.graph(g, params, f)?;
        let weights = g.softmax_rows(logits);
        let multi = self.graph_multi(g, params, f)?;
        let prod = g.mul(weights, multi)?;
        Ok(g.row_sum(prod))
    }

    pub fn features(&self, inputs: &Mat64) -> Result<Mat64> {
        self.backbone.forward(&self.params, inputs)
    }

    pub fn heads(&self, inputs: &Mat64) -> Result<HeadOutputs> {
        let features = self.features(inputs)?;
        let single = features
            .matmul(self.params.require(HEAD_SINGLE)?)?
            .into_inner();
        let multi = features.matmul(self.params.require(HEAD_MULTI)?)?;
        Ok(HeadOutputs {
            features,
            single,
            multi,
        })
    }

    /// Gate weights on the simplex, `n × K`.
    pub fn gate_weights(&self, features: &Mat64) -> Result<Mat64> {
        let gate = self.gate.as_ref().ok_or(Error::MissingGating)?;
        let logits = gate.forward(&self.params, features)?;
        Ok(crate::diffnet::graph_softmax_rows(&logits))
    }

    /// Scores for every row of `inputs`.
    pub fn score_batch(&self, inputs: &Mat64, strategy: Strategy) -> Result<Vec<f64>> {
        if inputs.rows() == 0 {
            return Ok(Vec::new());
        }
        let h = self.heads(inputs)?;
        let k = self.num_attributes() as f64;
        let mean_l = |r: usize| h.multi.row(r).iter().sum::<f64>() / k;
        Ok(match strategy {
            Strategy::F => h.single,
            Strategy::L => (0..inputs.rows()).map(mean_l).collect(),
            Strategy::M => (0..inputs.rows())
                .map(|r| 0.5 * (h.single[r] + mean_l(r)))
                .collect(),
            Strategy::Gated => {
                let w = self.gate_weights(&h.features)?;
                (0..inputs.rows())
                    .map(|r| {
                        w.row(r)
                            .iter()
                            .zip(h.multi.row(r))
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect()
            }
        })
    }

    pub fn score(&self, input: &Vec64, strategy: Strategy) -> Result<f64> {
        Ok(self.score_batch(&input.to_row(), strategy)?[0])
    }

    /// Predicted attribute scores, `n × K`.
    pub fn attributes(&self, inputs: &Mat64) -> Result<Mat64> {
        if !self.has_multi_head() {
            return Err(Error::MissingMultiHead);
        }
        Ok(self.heads(inputs)?.multi)
    }

    /// SMORM-M with each head standardized by statistics of a reference set.
    pub fn standardizer(&self, reference: &Mat64) -> Result<HeadStandardizer> {
        let h = self.heads(reference)?;
        let k = self.num_attributes() as f64;
        let l: Vec<f64> = (0..reference.rows())
            .map(|r| h.multi.row(r).iter().sum::<f64>() / k)
            .collect();
        let st = |x: &[f64]| (crate::stats::mean(x), crate::stats::std_dev(x).max(1e-12));
        Ok(HeadStandardizer {
            single: st(&h.single),
            mean_attr: st(&l),
        })
    }

    pub(crate) fn mark_trained(&mut self, steps: u64, loss: &LossConfig) {
        self.step += steps;
        if steps > 0 || self.loss.is_none() {
            self.loss = Some(loss.clone());
        }
    }

    #[cfg(test)]
    pub(crate) fn set_mode_for_tests(&mut self, mode: crate::model::TrainingMode) {
        self.loss = Some(LossConfig::with_mode(mode));
    }
}

/// `(mean, std)` of the `F` and `L` scores over a reference set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStandardizer {
    pub single: (f64, f64),
    pub mean_attr: (f64, f64),
}

impl HeadStandardizer {
    pub fn score_batch(&self, model: &SmormModel, inputs: &Mat64) -> Result<Vec<f64>> {
        let f = model.score_batch(inputs, Strategy::F)?;
        let l = model.score_batch(inputs, Strategy::L)?;
        Ok(f.iter()
            .zip(&l)
            .map(|(a, b)| {
                0.5 * ((a - self.single.0) / self.single.1
                    + (b - self.mean_attr.0) / self.mean_attr.1)
            })
            .collect())
    }
}
