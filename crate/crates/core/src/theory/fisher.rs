use serde::{Deserialize, Serialize};

use crate::diffnet::Graph;
use crate::error::{Error, Result};
use crate::linalg::{ridge_inverse, sym_eigen, Mat64, Vec64};
use crate::model::{SmormModel, HEAD_MULTI, HEAD_SINGLE};

/// Largest parameter subset the Fisher oracles accept.
pub const MAX_FISHER_PARAMS: usize = 200;

/// Empirical Fisher matrices over a parameter subset for the head sets
/// `{0}` (single), `{1..K}` (multi) and `{0..K}` (hybrid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub n: usize,
    pub p: usize,
    pub i_single: Mat64,
    pub i_multi: Mat64,
    pub i_hybrid: Mat64,
    /// `I_hybrid − I_single`.
    pub delta: Mat64,
    pub lambda_min_delta: f64,
    /// `(I + ρI)⁻¹ / n`, present when a ridge was requested.
    pub cov_single: Option<Mat64>,
    pub cov_hybrid: Option<Mat64>,
    pub ridge: Option<f64>,
}

/// `grads[i]` holds one row per head (`K + 1` rows, head 0 the overall
/// score) of `∇_θ r_k` at sample `i`; `sigma[k]` is the noise variance of
/// head `k`. With `ridge = Some(ρ)` the covariances `(𝓘 + ρI)⁻¹/n` are
/// added; `ρ = 0` on a rank-deficient Fisher is an error.
pub fn fisher_matrices(grads: &[Mat64], sigma: &[f64], ridge: Option<f64>) -> Result<FisherReport> {
    let first = grads.first().ok_or(Error::EmptyInput("fisher gradients"))?;
    let (heads, p) = first.shape();
    if heads < 2 {
        return Err(Error::InvalidConfig(
            "need the overall head and at least one attribute head".into(),
        ));
    }
    if sigma.len() != heads {
        return Err(Error::LengthMismatch(heads, sigma.len()));
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidConfig(
            "noise variances must be positive".into(),
        ));
    }
    if p > MAX_FISHER_PARAMS {
        return Err(Error::InvalidConfig(format!(
            "parameter subset of size {p} exceeds {MAX_FISHER_PARAMS}"
        )));
    }
    let n = grads.len();
    let mut i_single = Mat64::zeros(p, p);
    let mut i_multi = Mat64::zeros(p, p);
    for g in grads {
        if g.shape() != (heads, p) {
            return Err(Error::ShapeMismatch {
                expected: (heads, p),
                found: g.shape(),
            });
        }
        for (k, s) in sigma.iter().enumerate() {
            let target = if k == 0 { &mut i_single } else { &mut i_multi };
            let row = g.row(k);
            for a in 0..p {
                let ra = row[a] / s;
                if ra == 0.0 {
                    continue;
                }
                for b in 0..p {
                    target[(a, b)] += ra * row[b];
                }
            }
        }
    }
    let i_single = i_single.scaled(1.0 / n as f64).symmetrized()?;
    let i_multi = i_multi.scaled(1.0 / n as f64).symmetrized()?;
    let i_hybrid = i_single.add(&i_multi)?;
    let delta = i_hybrid.sub(&i_single)?;
    let lambda_min_delta = sym_eigen(&delta)?.min_eigenvalue();
    let (cov_single, cov_hybrid) = match ridge {
        None => (None, None),
        Some(r) => {
            let inv = |m: &Mat64| {
                ridge_inverse(m, r)
                    .map(|c| c.scaled(1.0 / n as f64))
                    .map_err(|e| match e {
                        Error::SingularMatrix { min_eigenvalue } => {
                            Error::SingularFisher(min_eigenvalue)
                        }
                        other => other,
                    })
            };
            (Some(inv(&i_single)?), Some(inv(&i_hybrid)?))
        }
    };
    Ok(FisherReport {
        n,
        p,
        i_single,
        i_multi,
        i_hybrid,
        delta,
        lambda_min_delta,
        cov_single,
        cov_hybrid,
        ridge,
    })
}

impl FisherReport {
    /// `gᵀ Δ g`.
    pub fn delta_quadratic(&self, g: &[f64]) -> Result<f64> {
        Ok(crate::linalg::dot(g, &self.delta.matvec(g)?))
    }

    /// Predicted `MSE_S` at a test gradient under the single-only and hybrid
    /// covariances.
    pub fn predicted_mse(&self, grad: &[f64], sigma_00: f64) -> Result<(f64, f64)> {
        let (Some(cs), Some(ch)) = (&self.cov_single, &self.cov_hybrid) else {
            return Err(Error::InvalidConfig(
                "covariances were not computed; pass a ridge".into(),
            ));
        };
        Ok((
            predict_mse(cs, grad, sigma_00)?,
            predict_mse(ch, grad, sigma_00)?,
        ))
    }
}

/// `∇Mᵀ Cov ∇M + σ_00`.
pub fn predict_mse(cov: &Mat64, grad: &[f64], sigma_00: f64) -> Result<f64> {
    Ok(crate::linalg::dot(grad, &cov.matvec(grad)?) + sigma_00)
}

/// The Fisher parameter subset of a model: the last backbone layer and
/// both heads.
pub fn fisher_subset(model: &SmormModel) -> Vec<String> {
    let last = model.backbone.config.num_layers() - 1;
    vec![
        model.backbone.weight_name(last),
        model.backbone.bias_name(last),
        HEAD_SINGLE.into(),
        HEAD_MULTI.into(),
    ]
}

/// Per-head gradients `∇_θ r_k(x)` over `subset`, one row per head
/// (`K + 1` rows).
pub fn head_gradients(model: &SmormModel, input: &Vec64, subset: &[String]) -> Result<Mat64> {
    let names: Vec<&str> = subset.iter().map(String::as_str).collect();
    let k = model.num_attributes();
    let mut g = Graph::new();
    let x = g.constant(input.to_row());
    let f = model.graph_features(&mut g, &model.params, x)?;
    let single = model.graph_single(&mut g, &model.params, f)?;
    let multi = model.graph_multi(&mut g, &model.params, f)?;
    let mut rows = vec![g.backward(single, &model.params)?.flatten(&names)?];
    for i in 0..k {
        let e = g.constant(Mat64::from_fn(k, 1, |r, _| if r == i { 1.0 } else { 0.0 }));
        let head = g.matmul(multi, e)?;
        rows.push(g.backward(head, &model.params)?.flatten(&names)?);
    }
    let p = rows[0].len();
    Mat64::new(k + 1, p, rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::stream_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn random_grads(n: usize, heads: usize, p: usize, seed: u64) -> Vec<Mat64> {
        let mut rng = stream_rng(seed, 0);
        (0..n)
            .map(|_| Mat64::from_fn(heads, p, |_, _| rng.sample(StandardNormal)))
            .collect()
    }

    #[test]
    fn one_sample_single_head_is_rank_one() {
        let g = Mat64::from_rows(&[&[1.0, 2.0, 0.0], &[0.0, 0.0, 0.0]]).unwrap();
        let r = fisher_matrices(&[g], &[2.0, 1.0], None).unwrap();
        assert_eq!(
            r.i_single,
            Mat64::outer(&[1.0, 2.0, 0.0], &[1.0, 2.0, 0.0]).scaled(0.5)
        );
        let eig = sym_eigen(&r.i_single).unwrap();
        assert_eq!(
            eig.eigenvalues.iter().filter(|v| v.abs() > 1e-12).count(),
            1
        );
    }

    #[test]
    fn added_head_contributes_its_outer_product() {
        let g = Mat64::from_rows(&[&[1.0, 2.0], &[3.0, -1.0]]).unwrap();
        let r = fisher_matrices(&[g], &[1.0, 4.0], None).unwrap();
        assert!(
            r.delta
                .max_abs_diff(&Mat64::outer(&[3.0, -1.0], &[3.0, -1.0]).scaled(0.25))
                < 1e-15
        );
        assert!(r.lambda_min_delta >= -1e-12);
    }

    #[test]
    fn delta_is_psd_on_random_instances() {
        for seed in 0..25 {
            let r = fisher_matrices(&random_grads(7, 4, 12, seed), &[0.5, 1.0, 2.0, 0.3], None)
                .unwrap();
            assert!(r.lambda_min_delta >= -1e-10, "{}", r.lambda_min_delta);
        }
    }

    #[test]
    fn singular_fisher_without_ridge() {
        let grads = random_grads(2, 2, 5, 1);
        assert!(matches!(
            fisher_matrices(&grads, &[1.0, 1.0], Some(0.0)),
            Err(Error::SingularFisher(_))
        ));
        assert!(fisher_matrices(&grads, &[1.0, 1.0], Some(1e-3)).is_ok());
    }

    #[test]
    fn predicted_mse_examples() {
        assert_eq!(
            predict_mse(&Mat64::identity(2), &[0.0, 0.0], 0.3).unwrap(),
            0.3
        );
        assert_eq!(
            predict_mse(&Mat64::identity(2), &[1.0, 1.0], 0.3).unwrap(),
            2.3
        );
    }

    #[test]
    fn correlated_heads_have_positive_overlap() {
        let mut m = SmormModel::new(ModelConfig::new(3, vec![6], 4, 2), 5).unwrap();
        let ws = m.params.get(HEAD_SINGLE).unwrap().clone();
        m.params
            .set(HEAD_MULTI, Mat64::from_fn(4, 2, |r, _| ws[(r, 0)]))
            .unwrap();
        let subset = fisher_subset(&m);
        let mut rng = stream_rng(6, 0);
        let grads: Vec<Mat64> = (0..30)
            .map(|_| {
                let x = Vec64::from_fn(3, |_| rng.sample(StandardNormal));
                head_gradients(&m, &x, &subset).unwrap()
            })
            .collect();
        let r = fisher_matrices(&grads, &[1.0, 1.0, 1.0], None).unwrap();
        let g0: Vec<f64> = (0..r.p)
            .map(|j| grads.iter().map(|g| g[(0, j)]).sum::<f64>() / grads.len() as f64)
            .collect();
        assert!(r.delta_quadratic(&g0).unwrap() > 0.0);
        assert!(r.lambda_min_delta >= -1e-10);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let m = SmormModel::new(ModelConfig::new(2, vec![5], 3, 2), 1).unwrap();
        let subset = fisher_subset(&m);
        let x = Vec64::new(vec![0.3, -0.8]).unwrap();
        let g = head_gradients(&m, &x, &subset).unwrap();
        let total = g.cols();
        let h = 1e-6;
        for j in [0, 4, total - 1] {
            let mut plus = m.clone();
            let mut minus = m.clone();
            perturb(&mut plus, &subset, j, h);
            perturb(&mut minus, &subset, j, -h);
            let hp = plus.heads(&x.to_row()).unwrap();
            let hm = minus.heads(&x.to_row()).unwrap();
            let fd0 = (hp.single[0] - hm.single[0]) / (2.0 * h);
            assert!((fd0 - g[(0, j)]).abs() < 1e-7);
            for k in 0..2 {
                let fd = (hp.multi[(0, k)] - hm.multi[(0, k)]) / (2.0 * h);
                assert!((fd - g[(k + 1, j)]).abs() < 1e-7);
            }
        }
    }

    fn perturb(m: &mut SmormModel, subset: &[String], mut j: usize, h: f64) {
        for name in subset {
            let t = m.params.get(name).unwrap().clone();
            if j < t.as_slice().len() {
                let mut t = t;
                t.as_mut_slice()[j] += h;
                m.params.set(name, t).unwrap();
                return;
            }
            j -= t.as_slice().len();
        }
    }

    /// OLS with Gaussian noise: the Fisher-based prediction matches the
    /// resampled test error.
    #[test]
    fn linear_gaussian_monte_carlo() {
        let (n, p, sigma2) = (40, 3, 0.5_f64);
        let theta = [1.0, -0.5, 0.25];
        let noise = Normal::new(0.0, sigma2.sqrt()).unwrap();
        let mut predicted = 0.0;
        let mut empirical = 0.0;
        let trainings = 50;
        let tests = 400;
        for t in 0..trainings {
            let mut rng = stream_rng(100 + t, 0);
            let x = Mat64::from_fn(n, p, |_, _| rng.sample(StandardNormal));
            let y: Vec<f64> = (0..n)
                .map(|i| crate::linalg::dot(x.row(i), &theta) + noise.sample(&mut rng))
                .collect();
            // Per-sample gradient of the linear predictor is the input row.
            let grads: Vec<Mat64> = (0..n)
                .map(|i| Mat64::new(2, p, [x.row(i), x.row(i)].concat()).unwrap())
                .collect();
            let f = fisher_matrices(&grads, &[sigma2, sigma2], Some(0.0)).unwrap();
            let cov = f.cov_single.unwrap();
            let xtx = x.transpose().matmul(&x).unwrap();
            let th = ridge_inverse(&xtx, 0.0)
                .unwrap()
                .matvec(&x.tmatvec(&y).unwrap())
                .unwrap();
            for _ in 0..tests {
                let xs: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let ys = crate::linalg::dot(&xs, &theta) + noise.sample(&mut rng);
                predicted += predict_mse(&cov, &xs, sigma2).unwrap();
                empirical += (crate::linalg::dot(&xs, &th) - ys).powi(2);
            }
        }
        let rel = (predicted - empirical).abs() / empirical;
        assert!(rel < 0.2, "relative error {rel}");
    }
}
