use serde::{Deserialize, Serialize};

use crate::diffnet::batch_matrix;
use crate::error::{Error, Result};
use crate::linalg::{ridge_inverse, sym_eigen, Mat64, Vec64, PD_THRESHOLD};
use crate::model::SmormModel;
use crate::world::{AttributeRecord, PairwiseRecord};

/// Second-order statistics of embedded preference and attribute data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// Mean of `f_c − f_r` over preference pairs.
    pub mu_s: Vec<f64>,
    /// Uncentered second moment of `f_c − f_r`.
    pub sigma_s: Mat64,
    /// Uncentered second moment of attribute-set embeddings.
    pub sigma_m: Mat64,
    /// `mean(f rᵀ)` over the attribute set, `d × K`.
    pub c_m: Mat64,
    /// Largest embedding norm seen.
    pub b: f64,
    pub lambda_min_s: f64,
    pub lambda_min_m: f64,
    pub n_s: usize,
    pub n_m: usize,
    /// `Σ_S` has no usable inverse.
    pub degenerate: bool,
}

fn max_row_norm(m: &Mat64) -> f64 {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// `(1/n) Xᵀ Y` for row-sample matrices.
fn cross_moment(x: &Mat64, y: &Mat64) -> Result<Mat64> {
    Ok(x.transpose().matmul(y)?.scaled(1.0 / x.rows() as f64))
}

/// Moments from chosen/rejected embeddings (`n_S × d` each) and attribute
/// embeddings with their targets (`n_M × d`, `n_M × K`).
pub fn estimate_moments(
    chosen: &Mat64,
    rejected: &Mat64,
    features_m: &Mat64,
    targets: &Mat64,
) -> Result<MomentReport> {
    if chosen.shape() != rejected.shape() {
        return Err(Error::ShapeMismatch {
            expected: chosen.shape(),
            found: rejected.shape(),
        });
    }
    let d = chosen.cols();
    if features_m.cols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: features_m.cols(),
        });
    }
    if targets.rows() != features_m.rows() {
        return Err(Error::LengthMismatch(features_m.rows(), targets.rows()));
    }
    for n in [chosen.rows(), features_m.rows()] {
        if n < d + 1 {
            return Err(Error::InsufficientSamples {
                needed: d + 1,
                found: n,
            });
        }
    }
    let diff = chosen.sub(rejected)?;
    let n_s = diff.rows();
    let mu_s: Vec<f64> = (0..d)
        .map(|c| (0..n_s).map(|r| diff[(r, c)]).sum::<f64>() / n_s as f64)
        .collect();
    let sigma_s = cross_moment(&diff, &diff)?.symmetrized()?;
    let sigma_m = cross_moment(features_m, features_m)?.symmetrized()?;
    let c_m = cross_moment(features_m, targets)?;
    let lambda_min_s = sym_eigen(&sigma_s)?.min_eigenvalue();
    let lambda_min_m = sym_eigen(&sigma_m)?.min_eigenvalue();
    let b = max_row_norm(chosen)
        .max(max_row_norm(rejected))
        .max(max_row_norm(features_m));
    Ok(MomentReport {
        mu_s,
        sigma_s,
        sigma_m,
        c_m,
        b,
        lambda_min_s,
        lambda_min_m,
        n_s,
        n_m: features_m.rows(),
        degenerate: lambda_min_s <= PD_THRESHOLD,
    })
}

/// Moments of dataset records, embedded by `model`'s backbone or taken
/// as raw latents when `model` is `None`.
pub fn record_moments(
    pairs: &[PairwiseRecord],
    attrs: &[AttributeRecord],
    model: Option<&SmormModel>,
) -> Result<MomentReport> {
    if pairs.is_empty() || attrs.is_empty() {
        return Err(Error::EmptyInput("moment records"));
    }
    let embed = |x: Mat64| match model {
        Some(m) => m.features(&x),
        None => Ok(x),
    };
    let chosen = embed(batch_matrix(pairs.iter().map(|p| &p.chosen))?)?;
    let rejected = embed(batch_matrix(pairs.iter().map(|p| &p.rejected))?)?;
    let fm = embed(batch_matrix(attrs.iter().map(|a| &a.input))?)?;
    let targets = batch_matrix(attrs.iter().map(|a| &a.scores))?;
    estimate_moments(&chosen, &rejected, &fm, &targets)
}

/// Moments when no attribute head is trained: `C_M = 0` and `Σ_M = I`, so
/// the attribute head is identically zero and the coupling constant is 0.
pub fn pairwise_only_moments(
    pairs: &[PairwiseRecord],
    num_attributes: usize,
    model: Option<&SmormModel>,
) -> Result<MomentReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("moment records"));
    }
    if num_attributes == 0 {
        return Err(Error::InvalidConfig("num_attributes must be >= 1".into()));
    }
    let embed = |x: Mat64| match model {
        Some(m) => m.features(&x),
        None => Ok(x),
    };
    let chosen = embed(batch_matrix(pairs.iter().map(|p| &p.chosen))?)?;
    let rejected = embed(batch_matrix(pairs.iter().map(|p| &p.rejected))?)?;
    let d = chosen.cols();
    let mut report = estimate_moments(
        &chosen,
        &rejected,
        &chosen,
        &Mat64::zeros(chosen.rows(), num_attributes),
    )?;
    report.sigma_m = Mat64::identity(d);
    report.lambda_min_m = 1.0;
    report.n_m = 0;
    Ok(report)
}

impl MomentReport {
    pub fn dim(&self) -> usize {
        self.mu_s.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.c_m.cols()
    }

    /// Raises `B` so that it also covers `features` (e.g. an evaluation set).
    pub fn extend_bound(&mut self, features: &Mat64) {
        self.b = self.b.max(max_row_norm(features));
    }
}

/// Normal-equation solutions `w_S = (Σ_S + ρI)⁻¹ μ_S` and
/// `W_M = (Σ_M + ρI)⁻¹ C_M`.
pub fn population_heads(report: &MomentReport, ridge: f64) -> Result<(Vec64, Mat64)> {
    if ridge < 0.0 {
        return Err(Error::InvalidConfig("ridge must be non-negative".into()));
    }
    let inv = |m: &Mat64, what: &str| {
        ridge_inverse(m, ridge).map_err(|e| match e {
            Error::SingularMatrix { min_eigenvalue } => Error::SingularCovariance(format!(
                "{what} has smallest eigenvalue {min_eigenvalue:e}"
            )),
            other => other,
        })
    };
    let ws = inv(&report.sigma_s, "Σ_S")?.matvec(&report.mu_s)?;
    let wm = inv(&report.sigma_m, "Σ_M")?.matmul(&report.c_m)?;
    Ok((Vec64::new(ws)?, wm))
}
