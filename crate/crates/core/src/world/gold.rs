use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sqrt_psd, Mat64, Vec64};
use crate::rng::stream_rng;

/// Latent → true attribute scores `r*(z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttributeMap {
    /// `r* = W z` with `W` of shape `K × d_z`.
    Linear { weights: Mat64 },
    /// `r* = W₂ᵀ σ(W₁ᵀ z + b₁) + b₂` with `w1: d_z × h`, `w2: h × K`. Hidden
    /// units listed in `rectified` use `max(0, ·)`, the rest `tanh`.
    Mlp {
        w1: Mat64,
        b1: Mat64,
        w2: Mat64,
        b2: Mat64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        rectified: Vec<usize>,
    },
}

impl AttributeMap {
    pub fn input_dim(&self) -> usize {
        match self {
            AttributeMap::Linear { weights } => weights.cols(),
            AttributeMap::Mlp { w1, .. } => w1.rows(),
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            AttributeMap::Linear { weights } => weights.rows(),
            AttributeMap::Mlp { w2, .. } => w2.cols(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let AttributeMap::Mlp {
            w1,
            b1,
            w2,
            b2,
            rectified,
        } = self
        {
            let h = w1.cols();
            if b1.shape() != (1, h) || w2.rows() != h || b2.shape() != (1, w2.cols()) {
                return Err(Error::InvalidConfig(
                    "inconsistent attribute MLP shapes".into(),
                ));
            }
            if let Some(i) = rectified.iter().find(|i| **i >= h) {
                return Err(Error::InvalidConfig(format!(
                    "rectified unit {i} out of range for {h} hidden units"
                )));
            }
        }
        Ok(())
    }

    /// Row-wise evaluation of an `n × d_z` batch, giving `n × K`.
    pub fn eval_batch(&self, z: &Mat64) -> Result<Mat64> {
        match self {
            AttributeMap::Linear { weights } => z.matmul(&weights.transpose()),
            AttributeMap::Mlp {
                w1,
                b1,
                w2,
                b2,
                rectified,
            } => {
                let mut h = z.matmul(w1)?;
                let relu: Vec<bool> = (0..h.cols()).map(|c| rectified.contains(&c)).collect();
                for r in 0..h.rows() {
                    for c in 0..h.cols() {
                        let a = h[(r, c)] + b1[(0, c)];
                        h[(r, c)] = if relu[c] { a.max(0.0) } else { a.tanh() };
                    }
                }
                let mut out = h.matmul(w2)?;
                for r in 0..out.rows() {
                    for c in 0..out.cols() {
                        out[(r, c)] += b2[(0, c)];
                    }
                }
                Ok(out)
            }
        }
    }
}

/// On-disk form of [`GoldWorld`]; the noise factor is recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldWorldSpec {
    pub latent_dim: usize,
    pub num_attributes: usize,
    pub attribute_map: AttributeMap,
    pub aggregation: Vec64,
    /// `(K+1) × (K+1)`; index 0 is the overall label, `1..=K` the attributes.
    pub noise_cov: Mat64,
    pub feature_bound: f64,
}

/// Hidden ground truth: true attribute scores `r*(z)`, the overall score
/// `r_s* = aggregationᵀ r*`, and Gaussian label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GoldWorldSpec", into = "GoldWorldSpec")]
pub struct GoldWorld {
    spec: GoldWorldSpec,
    noise_factor: Mat64,
}

/// Noisy labels together with the noiseless values they perturb.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldScores {
    pub g_s: f64,
    pub g_m: Vec64,
    pub r_s_star: f64,
    pub r_star: Vec64,
}

impl TryFrom<GoldWorldSpec> for GoldWorld {
    type Error = Error;
    fn try_from(spec: GoldWorldSpec) -> Result<Self> {
        GoldWorld::new(spec)
    }
}

impl From<GoldWorld> for GoldWorldSpec {
    fn from(w: GoldWorld) -> Self {
        w.spec
    }
}

impl GoldWorld {
    pub fn new(spec: GoldWorldSpec) -> Result<Self> {
        let k = spec.num_attributes;
        if k == 0 || spec.latent_dim == 0 {
            return Err(Error::InvalidConfig(
                "world needs K >= 1 and d_z >= 1".into(),
            ));
        }
        spec.attribute_map.validate()?;
        if spec.attribute_map.input_dim() != spec.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: spec.latent_dim,
                found: spec.attribute_map.input_dim(),
            });
        }
        if spec.attribute_map.num_outputs() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: spec.attribute_map.num_outputs(),
            });
        }
        if spec.aggregation.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: spec.aggregation.len(),
            });
        }
        let total: f64 = spec.aggregation.iter().sum();
        if spec.aggregation.iter().any(|a| *a < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(
                "aggregation weights must lie on the simplex".into(),
            ));
        }
        if spec.noise_cov.shape() != (k + 1, k + 1) {
            return Err(Error::ShapeMismatch {
                expected: (k + 1, k + 1),
                found: spec.noise_cov.shape(),
            });
        }
        if !(spec.feature_bound > 0.0) {
            return Err(Error::InvalidConfig(
                "feature_bound must be positive".into(),
            ));
        }
        let noise_factor = sqrt_psd(&spec.noise_cov)?;
        Ok(Self { spec, noise_factor })
    }

    /// Diagonal noise: `σ₀₀` on the overall label, `σ_kk` on every attribute.
    pub fn diagonal_noise(sigma_00: f64, sigma_kk: f64, k: usize) -> Mat64 {
        let mut d = vec![sigma_kk; k + 1];
        d[0] = sigma_00;
        Mat64::from_diag(&d)
    }

    pub fn spec(&self) -> &GoldWorldSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn num_attributes(&self) -> usize {
        self.spec.num_attributes
    }

    pub fn aggregation(&self) -> &Vec64 {
        &self.spec.aggregation
    }

    pub fn feature_bound(&self) -> f64 {
        self.spec.feature_bound
    }

    /// Noise variance of head `k` (`0` = overall label).
    pub fn noise_variance(&self, k: usize) -> f64 {
        self.spec.noise_cov[(k, k)]
    }

    /// `(r_s*, r*)`.
    pub fn noiseless(&self, input: &Vec64) -> Result<(f64, Vec64)> {
        self.check_dim(input)?;
        let r = self
            .spec
            .attribute_map
            .eval_batch(&input.to_row())?
            .into_inner();
        let rs = self.aggregate(&r);
        Ok((rs, Vec64::new(r)?))
    }

    /// Noiseless attribute scores for an `n × d_z` batch (`n × K`).
    pub fn attributes_batch(&self, inputs: &Mat64) -> Result<Mat64> {
        if inputs.cols() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                found: inputs.cols(),
            });
        }
        self.spec.attribute_map.eval_batch(inputs)
    }

    /// Noiseless overall scores for an `n × d_z` batch.
    pub fn overall_batch(&self, inputs: &Mat64) -> Result<Vec<f64>> {
        let a = self.attributes_batch(inputs)?;
        Ok((0..a.rows()).map(|r| self.aggregate(a.row(r))).collect())
    }

    pub fn aggregate(&self, attrs: &[f64]) -> f64 {
        crate::linalg::dot(self.spec.aggregation.as_slice(), attrs)
    }

    /// Labels `g_k = r*_k + ε_k` with `ε ~ N(0, noise_cov)`.
    pub fn gold_scores<R: Rng + ?Sized>(&self, input: &Vec64, rng: &mut R) -> Result<GoldScores> {
        let (r_s_star, r_star) = self.noiseless(input)?;
        let eps = self.sample_noise(rng);
        let g_s = r_s_star + eps[0];
        let g_m = Vec64::new(r_star.iter().zip(&eps[1..]).map(|(r, e)| r + e).collect())?;
        Ok(GoldScores {
            g_s,
            g_m,
            r_s_star,
            r_star,
        })
    }

    fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi: Vec<f64> = (0..=self.num_attributes())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.noise_factor
            .matvec(&xi)
            .expect("noise factor is (K+1)x(K+1)")
    }

    fn check_dim(&self, input: &Vec64) -> Result<()> {
        if input.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                found: input.len(),
            });
        }
        Ok(())
    }

    /// World with even attributes `r*_k = |z_k| − √(2/π)` under uniform
    /// aggregation. On symmetric latent distributions every attribute, and
    /// the overall score, is uncorrelated with the latent itself.
    pub fn zero_alignment(latent_dim: usize, num_attributes: usize, sigma: f64) -> Result<Self> {
        let k = num_attributes;
        if k == 0 || latent_dim < k {
            return Err(Error::InvalidConfig(format!(
                "need 1 ≤ K ≤ latent_dim, got K = {k}, latent_dim = {latent_dim}"
            )));
        }
        let mut w1 = Mat64::zeros(latent_dim, 2 * k);
        let mut w2 = Mat64::zeros(2 * k, k);
        for a in 0..k {
            w1[(a, 2 * a)] = 1.0;
            w1[(a, 2 * a + 1)] = -1.0;
            w2[(2 * a, a)] = 1.0;
            w2[(2 * a + 1, a)] = 1.0;
        }
        let centre = (2.0 / std::f64::consts::PI).sqrt();
        GoldWorld::new(GoldWorldSpec {
            latent_dim,
            num_attributes: k,
            attribute_map: AttributeMap::Mlp {
                w1,
                b1: Mat64::zeros(1, 2 * k),
                w2,
                b2: Mat64::from_fn(1, k, |_, _| -centre),
                rectified: (0..2 * k).collect(),
            },
            aggregation: Vec64::new(vec![1.0 / k as f64; k])?,
            noise_cov: GoldWorld::diagonal_noise(sigma, sigma, k),
            feature_bound: 10.0,
        })
    }

    /// Random world: a tanh MLP attribute map with Glorot-scaled weights,
    /// rescaled so that every attribute has roughly `attr_scale` spread on
    /// standard-normal latents. Only `active_dims` of the latent feed it.
    pub fn random_mlp(params: &RandomWorldParams) -> Result<Self> {
        let p = params;
        let mut rng = stream_rng(p.seed, 0);
        let active: Vec<usize> = p
            .active_dims
            .clone()
            .unwrap_or_else(|| (0..p.latent_dim).collect());
        let fan_in = active.len().max(1) as f64;
        let mut w1 = Mat64::zeros(p.latent_dim, p.hidden);
        for &d in &active {
            for h in 0..p.hidden {
                w1[(d, h)] = rng.sample::<f64, _>(StandardNormal) * (1.5 / fan_in.sqrt());
            }
        }
        let b1 = Mat64::from_fn(1, p.hidden, |_, _| rng.random_range(-0.5..0.5));
        let mut w2 = Mat64::from_fn(p.hidden, p.num_attributes, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        // Shared component across attributes: the positive-correlation knob.
        let shared: Vec<f64> = (0..p.hidden)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for h in 0..p.hidden {
            for k in 0..p.num_attributes {
                w2[(h, k)] = p.shared_weight * shared[h] + (1.0 - p.shared_weight) * w2[(h, k)];
            }
        }
        let mut map = AttributeMap::Mlp {
            w1,
            b1,
            w2,
            b2: Mat64::zeros(1, p.num_attributes),
            rectified: Vec::new(),
        };
        // Calibrate output spread on a fixed probe set.
        let probe = Mat64::from_fn(2000, p.latent_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let out = map.eval_batch(&probe)?;
        if let AttributeMap::Mlp { w2, b2, .. } = &mut map {
            for k in 0..p.num_attributes {
                let col = out.col(k);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let sd =
                    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                let s = if sd > 0.0 { p.attr_scale / sd } else { 1.0 };
                for h in 0..p.hidden {
                    w2[(h, k)] *= s;
                }
                b2[(0, k)] = -mean * s;
            }
        }
        let k = p.num_attributes;
        GoldWorld::new(GoldWorldSpec {
            latent_dim: p.latent_dim,
            num_attributes: k,
            attribute_map: map,
            aggregation: Vec64::new(vec![1.0 / k as f64; k])?,
            noise_cov: GoldWorld::diagonal_noise(p.sigma_00, p.sigma_kk, k),
            feature_bound: p.feature_bound,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomWorldParams {
    pub seed: u64,
    pub latent_dim: usize,
    pub num_attributes: usize,
    pub hidden: usize,
    /// In `[0, 1]`: weight of the component shared by all attributes.
    pub shared_weight: f64,
    pub attr_scale: f64,
    pub sigma_00: f64,
    pub sigma_kk: f64,
    pub feature_bound: f64,
    pub active_dims: Option<Vec<usize>>,
}

impl Default for RandomWorldParams {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 16,
            num_attributes: 3,
            hidden: 32,
            shared_weight: 0.5,
            attr_scale: 1.5,
            sigma_00: 0.25,
            sigma_kk: 0.25,
            feature_bound: 10.0,
            active_dims: None,
        }
    }
}
