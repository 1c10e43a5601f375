use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt, ridge_inverse, sqrt_psd, sym_eigen, Mat64, Vec64, PD_THRESHOLD};
use crate::theory::moments::MomentReport;

/// Smallest `λ_min(Σ_S)` accepted by the assumption check.
pub const LAMBDA_MIN_FLOOR: f64 = 1e-6;
/// Violation tolerance of the lower-bound check.
pub const THEOREM1_TOL: f64 = 1e-9;

/// Decomposition of the whitened attribute cross-moment into a part
/// aligned with the whitened preference direction and a residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// `Σ_S^{-1/2} μ_S`.
    pub mu_tilde: Vec<f64>,
    /// `Σ_S^{1/2} Σ_M^{-1} C_M`.
    pub c_tilde: Mat64,
    /// Residual of `C̃_M` orthogonal to `μ̃_S`.
    pub e: Mat64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `max{0, 𝟙ᵀβ} / K`.
    pub c: f64,
    /// `B·‖E‖_op / √λ_min(Σ_S)`.
    pub eps: f64,
    /// `eps / K`.
    pub eps_proof: f64,
    pub one_t_alpha: f64,
    pub e_op_norm: f64,
    pub b: f64,
    pub lambda_min_s: f64,
    pub num_attributes: usize,
}

fn singular(what: &str, e: Error) -> Error {
    match e {
        Error::SingularMatrix { min_eigenvalue } => {
            Error::SingularCovariance(format!("{what} has smallest eigenvalue {min_eigenvalue:e}"))
        }
        other => other,
    }
}

pub fn coupling(report: &MomentReport) -> Result<CouplingReport> {
    let k = report.num_attributes();
    let s_inv_half = inv_sqrt(&report.sigma_s).map_err(|e| singular("Σ_S", e))?;
    let s_half = sqrt_psd(&report.sigma_s)?;
    let m_inv = ridge_inverse(&report.sigma_m, 0.0).map_err(|e| singular("Σ_M", e))?;
    let mu_tilde = s_inv_half.matvec(&report.mu_s)?;
    let c_tilde = s_half.matmul(&m_inv)?.matmul(&report.c_m)?;
    let nn = mu_tilde.iter().map(|v| v * v).sum::<f64>();
    let beta: Vec<f64> = if nn > 0.0 {
        c_tilde.tmatvec(&mu_tilde)?.iter().map(|v| v / nn).collect()
    } else {
        vec![0.0; k]
    };
    let e = c_tilde.sub(&Mat64::outer(&mu_tilde, &beta))?;
    // μ_Sᵀ Σ_S⁻¹ μ_S = ‖μ̃_S‖².
    let alpha: Vec<f64> = beta.iter().map(|b| b * nn).collect();
    let one_t_alpha = alpha.iter().sum();
    let c = beta.iter().sum::<f64>().max(0.0) / k as f64;
    let gram = e.transpose().matmul(&e)?.symmetrized()?;
    let e_op_norm = sym_eigen(&gram)?.max_eigenvalue().max(0.0).sqrt();
    let eps = report.b * e_op_norm / report.lambda_min_s.sqrt();
    Ok(CouplingReport {
        mu_tilde,
        c_tilde,
        e,
        alpha,
        beta,
        c,
        eps,
        eps_proof: eps / k as f64,
        one_t_alpha,
        e_op_norm,
        b: report.b,
        lambda_min_s: report.lambda_min_s,
        num_attributes: k,
    })
}

impl CouplingReport {
    /// `c·r_s − ε/K`, the guaranteed floor of the mean attribute score.
    pub fn lower_bound(&self, r_s: f64) -> f64 {
        self.c * r_s - self.eps_proof
    }

    /// `‖Eᵀμ̃_S‖`, zero up to rounding.
    pub fn orthogonality_error(&self) -> f64 {
        self.e
            .tmatvec(&self.mu_tilde)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .unwrap_or(f64::INFINITY)
    }

    /// Max-entry error of `C̃_M = μ̃_S βᵀ + E`.
    pub fn reconstruction_error(&self) -> f64 {
        Mat64::outer(&self.mu_tilde, &self.beta)
            .add(&self.e)
            .map(|m| m.max_abs_diff(&self.c_tilde))
            .unwrap_or(f64::INFINITY)
    }

    /// No aligned component: every attribute is orthogonal to the
    /// preference direction, so the bound carries no information.
    pub fn is_degenerate(&self) -> bool {
        self.c == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub lambda_min_s: f64,
    pub lambda_min_ok: bool,
    pub one_t_alpha: f64,
    pub alpha_ok: bool,
    pub max_feature_norm: f64,
    pub b: f64,
    pub bounded_ok: bool,
}

impl AssumptionCheck {
    pub fn holds(&self) -> bool {
        self.lambda_min_ok && self.alpha_ok && self.bounded_ok
    }
}

/// Slack summary for one choice of the subtracted constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlackSummary {
    pub offset: f64,
    pub violations: usize,
    pub min_slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub n: usize,
    pub c: f64,
    pub assumptions: AssumptionCheck,
    /// Offset `ε/K`; this is the checked bound.
    pub proof: SlackSummary,
    /// Offset `ε/√K`.
    pub sqrt_k: SlackSummary,
    /// Offset `ε`.
    pub statement: SlackSummary,
    /// Per-sample `r_m − (c·r_s − ε/K)`.
    pub slack: Vec<f64>,
    pub degenerate: bool,
}

impl Theorem1Report {
    pub fn violations(&self) -> usize {
        self.proof.violations
    }
}

/// Checks `r_m ≥ c·r_s − ε/K` on every row of `features`, with
/// `r_s = w_Sᵀf` and `r_m = (1/K) Σ_i w_M,iᵀf`.
pub fn verify_theorem1(
    w_s: &Vec64,
    w_m: &Mat64,
    cp: &CouplingReport,
    features: &Mat64,
) -> Result<Theorem1Report> {
    if w_s.len() != features.cols() || w_m.rows() != features.cols() {
        return Err(Error::DimensionMismatch {
            expected: features.cols(),
            found: w_s.len(),
        });
    }
    let k = w_m.cols() as f64;
    let rs = features.matvec(w_s)?;
    let mean_head: Vec<f64> = (0..w_m.rows())
        .map(|r| w_m.row(r).iter().sum::<f64>() / k)
        .collect();
    let rm = features.matvec(&mean_head)?;
    let summary = |offset: f64| {
        let mut s = SlackSummary {
            offset,
            violations: 0,
            min_slack: f64::INFINITY,
        };
        for (a, b) in rm.iter().zip(&rs) {
            let slack = a - (cp.c * b - offset);
            s.violations += usize::from(slack < -THEOREM1_TOL);
            s.min_slack = s.min_slack.min(slack);
        }
        s
    };
    let max_norm = (0..features.rows())
        .map(|r| features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let assumptions = AssumptionCheck {
        lambda_min_s: cp.lambda_min_s,
        lambda_min_ok: cp.lambda_min_s > LAMBDA_MIN_FLOOR,
        one_t_alpha: cp.one_t_alpha,
        alpha_ok: cp.one_t_alpha >= 0.0,
        max_feature_norm: max_norm,
        b: cp.b,
        bounded_ok: max_norm <= cp.b * (1.0 + 1e-12),
    };
    let slack = rm
        .iter()
        .zip(&rs)
        .map(|(a, b)| a - cp.lower_bound(*b))
        .collect();
    Ok(Theorem1Report {
        n: features.rows(),
        c: cp.c,
        assumptions,
        proof: summary(cp.eps_proof),
        sqrt_k: summary(cp.eps / k.sqrt()),
        statement: summary(cp.eps),
        slack,
        degenerate: cp.is_degenerate() || cp.lambda_min_s <= PD_THRESHOLD,
    })
}
