use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, Graph, Mlp, MlpConfig, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::rng::{derive_seed, stream_rng};
use crate::world::PromptDistribution;

pub const POLICY_MEAN: &str = "policy.mean";
pub const POLICY_LOG_STD: &str = "policy.log_std";

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub prompt_dim: usize,
    pub hidden: Vec<usize>,
    /// Multiplier on the Glorot initialization of the mean map, so that the
    /// initial policy stays close to its response distribution.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            prompt_dim: 4,
            hidden: vec![16],
            init_scale: 0.1,
        }
    }
}

/// Conditional Gaussian `π(z | x) = N(μ_φ(x), diag(exp(2·log_std)))` over
/// response latents, with a frozen copy of its initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPolicy {
    config: PolicyConfig,
    mean_map: Mlp,
    params: ParamStore,
    reference: ParamStore,
}

/// `N(0, I)` prompt latents, row `i` from stream `(seed, i)`.
pub fn sample_prompts(n: usize, dim: usize, seed: u64) -> Mat64 {
    let mut out = Mat64::zeros(n, dim);
    for r in 0..n {
        let mut rng = stream_rng(seed, r as u64);
        for c in 0..dim {
            out[(r, c)] = rng.sample(StandardNormal);
        }
    }
    out
}

impl SyntheticPolicy {
    /// A policy whose responses initially follow the per-coordinate mean and
    /// scale of `responses`, shifted slightly by the prompt.
    pub fn new(config: PolicyConfig, responses: &PromptDistribution, seed: u64) -> Result<Self> {
        responses.validate()?;
        if config.prompt_dim == 0 {
            return Err(Error::InvalidConfig("prompt_dim must be positive".into()));
        }
        let mlp_cfg = MlpConfig {
            activation: Activation::Tanh,
            activate_output: false,
            ..MlpConfig::new(config.prompt_dim, config.hidden.clone(), responses.dim())
        };
        let mean_map = Mlp::new(mlp_cfg, POLICY_MEAN)?;
        let mut params = ParamStore::new();
        mean_map.init(&mut params, &mut stream_rng(derive_seed(seed, "policy"), 0))?;
        for (name, t) in params.clone().iter() {
            params.set(name, t.scaled(config.init_scale))?;
        }
        let last = mean_map.config.num_layers() - 1;
        params.set(&mean_map.bias_name(last), responses.mean.to_row())?;
        params.insert(
            POLICY_LOG_STD,
            Mat64::from_fn(1, responses.dim(), |_, c| responses.scale[c].ln()),
        )?;
        let reference = params.clone();
        Ok(Self {
            config,
            mean_map,
            params,
            reference,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn prompt_dim(&self) -> usize {
        self.config.prompt_dim
    }

    pub fn response_dim(&self) -> usize {
        self.mean_map.config.output_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn reference(&self) -> &ParamStore {
        &self.reference
    }

    /// `‖φ − φ_ref‖₂`.
    pub fn drift(&self) -> f64 {
        self.params
            .distance(&self.reference)
            .expect("policy and reference share a layout")
    }

    fn means_with(&self, params: &ParamStore, prompts: &Mat64) -> Result<Mat64> {
        self.mean_map.forward(params, prompts)
    }

    pub fn means(&self, prompts: &Mat64) -> Result<Mat64> {
        self.means_with(&self.params, prompts)
    }

    pub fn log_std(&self) -> &[f64] {
        self.params
            .get(POLICY_LOG_STD)
            .expect("log_std present")
            .as_slice()
    }

    /// `μ(x_i) + σ ⊙ ξ_i` for prompt rows `x_i` and standard-normal rows `ξ_i`.
    pub fn responses(&self, prompts: &Mat64, noise: &Mat64) -> Result<Mat64> {
        let mut out = self.means(prompts)?;
        if noise.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                expected: out.shape(),
                found: noise.shape(),
            });
        }
        let sd: Vec<f64> = self.log_std().iter().map(|l| l.exp()).collect();
        let d = sd.len();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v += sd[i % d] * noise.as_slice()[i];
        }
        Ok(out)
    }

    /// One response per prompt row.
    pub fn sample<R: Rng + ?Sized>(&self, prompts: &Mat64, rng: &mut R) -> Result<Mat64> {
        let noise = Mat64::from_fn(prompts.rows(), self.response_dim(), |_, _| {
            rng.sample(StandardNormal)
        });
        self.responses(prompts, &noise)
    }

    /// Closed-form `KL(π(·|x) ‖ π_ref(·|x))` per prompt row.
    pub fn kl_to_reference(&self, prompts: &Mat64) -> Result<Vec<f64>> {
        let mu = self.means(prompts)?;
        let mu_ref = self.means_with(&self.reference, prompts)?;
        let ls = self.log_std();
        let ls_ref = self.reference.require(POLICY_LOG_STD)?.as_slice();
        Ok((0..prompts.rows())
            .map(|r| {
                (0..ls.len())
                    .map(|j| {
                        let var_ref = (2.0 * ls_ref[j]).exp();
                        let diff = mu[(r, j)] - mu_ref[(r, j)];
                        ls_ref[j] - ls[j] + ((2.0 * ls[j]).exp() + diff * diff) / (2.0 * var_ref)
                            - 0.5
                    })
                    .sum()
            })
            .collect())
    }

    /// Log-density of `actions` (`n × d`) given prompt rows, as an `n × 1` node.
    pub fn graph_log_prob(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        prompts: NodeId,
        actions: &Mat64,
    ) -> Result<NodeId> {
        let mu = self.mean_map.graph(g, params, prompts)?;
        let ls = g.param(params, POLICY_LOG_STD)?;
        let a = g.constant(actions.clone());
        let diff = g.sub(a, mu)?;
        let neg_ls = g.neg(ls);
        let inv_sd = g.exp(neg_ls);
        let z = g.mul_row(diff, inv_sd)?;
        let sq = g.square(z);
        let quad = g.row_sum(sq);
        let half = g.scale(quad, -0.5);
        let log_det = g.sum(ls);
        let norm = g.add_scalar(log_det, 0.5 * LN_2PI * actions.cols() as f64);
        let neg_norm = g.neg(norm);
        g.add_row(half, neg_norm)
    }
}
