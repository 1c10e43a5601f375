use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::graph::{broadcast_row, Graph, NodeId};
use crate::diffnet::params::ParamStore;
use crate::error::{Error, Result};
use crate::linalg::{Mat64, Vec64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Shape of a fully connected network `input_dim → hidden… → output_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Apply the activation to the output layer as well. On for embedding
    /// backbones, which keeps features bounded under `tanh`.
    #[serde(default = "default_true")]
    pub activate_output: bool,
}

fn default_true() -> bool {
    true
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Tanh,
            activate_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|h| *h == 0) {
            return Err(Error::InvalidConfig(format!(
                "MLP dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// An MLP whose parameters live in a shared [`ParamStore`] under `prefix`,
/// as `{prefix}.l{i}.w` (fan_in × fan_out) and `{prefix}.l{i}.b` (1 × fan_out).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub prefix: String,
}

impl Mlp {
    pub fn new(config: MlpConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for (i, (fan_in, fan_out)) in self.config.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Mat64::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
            store.insert(&self.weight_name(i), w)?;
            store.insert(&self.bias_name(i), Mat64::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// All-zero parameters, mostly for tests.
    pub fn init_zeros(&self, store: &mut ParamStore) -> Result<()> {
        for (i, (fan_in, fan_out)) in self.config.layer_dims().into_iter().enumerate() {
            store.insert(&self.weight_name(i), Mat64::zeros(fan_in, fan_out))?;
            store.insert(&self.bias_name(i), Mat64::zeros(1, fan_out))?;
        }
        Ok(())
    }

    fn activates(&self, layer: usize) -> bool {
        layer + 1 < self.config.num_layers() || self.config.activate_output
    }

    /// Records the forward pass of the batch node `x` (n × input_dim).
    pub fn graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let cols = g.value(x).cols();
        if cols != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: cols,
            });
        }
        let mut h = x;
        for i in 0..self.config.num_layers() {
            let w = g.param(store, &self.weight_name(i))?;
            let b = g.param(store, &self.bias_name(i))?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if self.activates(i) {
                h = match self.config.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Plain batch forward pass; bit-identical to [`Mlp::graph`].
    pub fn forward(&self, store: &ParamStore, x: &Mat64) -> Result<Mat64> {
        if x.cols() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                found: x.cols(),
            });
        }
        let mut h = x.clone();
        for i in 0..self.config.num_layers() {
            let w = store.require(&self.weight_name(i))?;
            let b = store.require(&self.bias_name(i))?;
            h = broadcast_row(&h.matmul(w)?, b, |a, c| a + c);
            if self.activates(i) {
                let act = self.config.activation;
                h = h.map(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Embedding of a single input.
    pub fn forward_features(&self, store: &ParamStore, input: &Vec64) -> Result<Vec64> {
        let out = self.forward(store, &input.to_row())?;
        Ok(Vec64::from_vec_unchecked(out.into_inner()))
    }
}

/// Stacks inputs into an `n × d` batch matrix.
pub fn batch_matrix<'a>(inputs: impl IntoIterator<Item = &'a Vec64>) -> Result<Mat64> {
    let rows: Vec<&[f64]> = inputs.into_iter().map(|v| v.as_slice()).collect();
    if rows.is_empty() {
        return Err(Error::EmptyBatch("no inputs"));
    }
    Mat64::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_features() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut cfg = MlpConfig::new(3, vec![4, 4], 2);
            cfg.activation = act;
            let mlp = Mlp::new(cfg, "bb").unwrap();
            let mut store = ParamStore::new();
            mlp.init_zeros(&mut store).unwrap();
            let f = mlp
                .forward_features(&store, &Vec64::new(vec![1.0, -2.0, 5.0]).unwrap())
                .unwrap();
            assert_eq!(f.as_slice(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut cfg = MlpConfig::new(3, vec![], 3);
        cfg.activate_output = false;
        let mlp = Mlp::new(cfg, "lin").unwrap();
        let mut store = ParamStore::new();
        store.insert("lin.l0.w", Mat64::identity(3)).unwrap();
        store.insert("lin.l0.b", Mat64::zeros(1, 3)).unwrap();
        let x = Vec64::new(vec![0.3, -1.7, 2.2]).unwrap();
        assert_eq!(mlp.forward_features(&store, &x).unwrap(), x);
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let mlp = Mlp::new(MlpConfig::new(4, vec![8, 6], 3), "bb").unwrap();
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let x = Mat64::from_fn(5, 4, |r, c| (r as f64 - 2.0) * 0.3 + c as f64 * 0.1);
        let plain = mlp.forward(&store, &x).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let out = mlp.graph(&mut g, &store, xn).unwrap();
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mlp = Mlp::new(MlpConfig::new(4, vec![2], 3), "bb").unwrap();
        let mut store = ParamStore::new();
        mlp.init_zeros(&mut store).unwrap();
        let err = mlp.forward_features(&store, &Vec64::zeros(3)).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 4,
                found: 3
            }
        ));
    }

    #[test]
    fn glorot_bounds_hold() {
        let mlp = Mlp::new(MlpConfig::new(10, vec![30], 5), "bb").unwrap();
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(store
            .get("bb.l0.w")
            .unwrap()
            .as_slice()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(store
            .get("bb.l0.b")
            .unwrap()
            .as_slice()
            .iter()
            .all(|b| *b == 0.0));
    }
}
