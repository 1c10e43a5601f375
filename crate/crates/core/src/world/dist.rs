use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat64, Vec64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec64,
    pub scale: Vec64,
}

/// Latent sampler: `z = mean + L (scale ⊙ ξ)` with `ξ ~ N(0, I)` and an
/// optional square loading `L` that correlates latent dimensions. With
/// mixture components, `(mean, scale)` come from a component picked by weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptDistribution {
    pub name: String,
    pub mean: Vec64,
    pub scale: Vec64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<MixtureComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loading: Option<Mat64>,
}

impl PromptDistribution {
    pub fn standard(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            mean: Vec64::zeros(dim),
            scale: Vec64::new(vec![1.0; dim]).expect("dim >= 1"),
            components: Vec::new(),
            loading: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.scale.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: self.scale.len(),
            });
        }
        if self.scale.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidConfig(
                "prompt scales must be positive".into(),
            ));
        }
        if let Some(l) = &self.loading {
            if l.shape() != (d, d) {
                return Err(Error::ShapeMismatch {
                    expected: (d, d),
                    found: l.shape(),
                });
            }
        }
        if !self.components.is_empty() {
            let mut total = 0.0;
            for c in &self.components {
                if c.mean.len() != d || c.scale.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: c.mean.len().min(c.scale.len()),
                    });
                }
                if c.scale.iter().any(|s| *s <= 0.0) {
                    return Err(Error::InvalidConfig(
                        "prompt scales must be positive".into(),
                    ));
                }
                if !(c.weight > 0.0) {
                    return Err(Error::InvalidConfig(
                        "mixture weights must be positive".into(),
                    ));
                }
                total += c.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "mixture weights sum to {total}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// One unconstrained draw.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (mean, scale) = if self.components.is_empty() {
            (&self.mean, &self.scale)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = &self.components[self.components.len() - 1];
            for c in &self.components {
                acc += c.weight;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            (&chosen.mean, &chosen.scale)
        };
        let mut z: Vec<f64> = scale
            .iter()
            .map(|s| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Some(l) = &self.loading {
            z = l.matvec(&z).expect("validated loading shape");
        }
        for (zi, m) in z.iter_mut().zip(mean.iter()) {
            *zi += m;
        }
        z
    }

    /// A draw inside the ball `‖z‖ ≤ bound`: up to 16 rejections, then the
    /// last draw is rescaled onto the ball.
    pub fn sample_bounded<R: Rng + ?Sized>(&self, bound: f64, rng: &mut R) -> Vec64 {
        let mut z = self.sample_raw(rng);
        for _ in 0..16 {
            if crate::linalg::dot(&z, &z).sqrt() <= bound {
                return Vec64::from_vec_unchecked(z);
            }
            z = self.sample_raw(rng);
        }
        let n = crate::linalg::dot(&z, &z).sqrt();
        if n > bound {
            for zi in z.iter_mut() {
                *zi *= bound / n;
            }
        }
        Vec64::from_vec_unchecked(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_stay_in_ball() {
        let mut d = PromptDistribution::standard("wide", 4);
        d.scale = Vec64::new(vec![50.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            assert!(d.sample_bounded(3.0, &mut rng).norm() <= 3.0 + 1e-12);
        }
    }

    #[test]
    fn loading_induces_correlation() {
        let mut d = PromptDistribution::standard("corr", 2);
        d.loading = Some(Mat64::new(2, 2, vec![1.0, 0.0, 0.9, 0.1f64.sqrt()]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<Vec<f64>> = (0..5000).map(|_| d.sample_raw(&mut rng)).collect();
        let xs: Vec<f64> = draws.iter().map(|z| z[0]).collect();
        let ys: Vec<f64> = draws.iter().map(|z| z[1]).collect();
        let c = crate::stats::pearson(&xs, &ys);
        assert!((c - 0.9 / (0.81f64 + 0.1).sqrt()).abs() < 0.03, "{c}");
    }

    #[test]
    fn mixture_weights_validated() {
        let mut d = PromptDistribution::standard("mix", 2);
        d.components = vec![
            MixtureComponent {
                weight: 0.5,
                mean: Vec64::zeros(2),
                scale: Vec64::new(vec![1.0; 2]).unwrap(),
            },
            MixtureComponent {
                weight: 0.4,
                mean: Vec64::new(vec![9.0; 2]).unwrap(),
                scale: Vec64::new(vec![0.1; 2]).unwrap(),
            },
        ];
        assert!(d.validate().is_err());
        d.components[1].weight = 0.5;
        assert!(d.validate().is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let far = (0..2000)
            .filter(|_| d.sample_raw(&mut rng)[0] > 5.0)
            .count();
        assert!((far as f64 / 2000.0 - 0.5).abs() < 0.05);
    }
}
