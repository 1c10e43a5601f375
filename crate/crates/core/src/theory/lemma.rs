use serde::{Deserialize, Serialize};

use crate::diffnet::sigmoid;
use crate::error::{Error, Result};

/// Tolerance for per-pair bound violations.
pub const LEMMA1_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub lhs: f64,
    pub rhs: f64,
}

impl PairBound {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Expectation-form bounds. `pointwise` averages `√(2·err²)` over the inputs,
/// `rms` uses `√(2·mean err²)`. Neither is implied by the per-pair bound in
/// general; both are reported with whether they held.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationForm {
    pub lhs: f64,
    pub rhs_pointwise: f64,
    pub rhs_rms: f64,
    pub pointwise_holds: bool,
    pub rms_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub single: Vec<PairBound>,
    pub multi: Vec<PairBound>,
    pub violations_single: usize,
    pub violations_multi: usize,
    pub min_slack: f64,
    pub max_slack: f64,
    pub expectation_single: ExpectationForm,
    pub expectation_multi: ExpectationForm,
}

impl LemmaReport {
    pub fn violations(&self) -> usize {
        self.violations_single + self.violations_multi
    }
}

fn expectation(lhs: f64, errs: &[f64], factor: f64) -> ExpectationForm {
    let n = errs.len().max(1) as f64;
    let rhs_pointwise = factor * errs.iter().map(|e| (2.0 * e * e).sqrt()).sum::<f64>() / n;
    let rhs_rms = factor * (2.0 * errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    ExpectationForm {
        lhs,
        rhs_pointwise,
        rhs_rms,
        pointwise_holds: lhs <= rhs_pointwise,
        rms_holds: lhs <= rhs_rms,
    }
}

/// Per-pair preference-error bounds for predicted overall scores `r_s`
/// and aggregate attribute scores `r_m` against their gold counterparts.
///
/// Single head: `|σ(Δr_s) − σ(Δg_s)| ≤ ¼·√(2(e_A² + e_B²))`.
/// Multi head: `|Δr_m − Δg_m| ≤ √(2(e_A² + e_B²))`.
pub fn verify_lemma1(
    r_s: &[f64],
    r_m: &[f64],
    g_s: &[f64],
    g_m: &[f64],
    pairs: &[(usize, usize)],
) -> Result<LemmaReport> {
    let n = r_s.len();
    for len in [r_m.len(), g_s.len(), g_m.len()] {
        if len != n {
            return Err(Error::LengthMismatch(n, len));
        }
    }
    if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= n || *b >= n) {
        return Err(Error::InvalidConfig(format!(
            "pair ({a}, {b}) indexes past {n} inputs"
        )));
    }
    let es: Vec<f64> = r_s.iter().zip(g_s).map(|(r, g)| r - g).collect();
    let em: Vec<f64> = r_m.iter().zip(g_m).map(|(r, g)| r - g).collect();
    let mut single = Vec::with_capacity(pairs.len());
    let mut multi = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let p = sigmoid(r_s[a] - r_s[b]);
        let p_star = sigmoid(g_s[a] - g_s[b]);
        single.push(PairBound {
            lhs: (p - p_star).abs(),
            rhs: 0.25 * (2.0 * (es[a] * es[a] + es[b] * es[b])).sqrt(),
        });
        let e_m = r_m[a] - r_m[b];
        let e_star = g_m[a] - g_m[b];
        multi.push(PairBound {
            lhs: (e_m - e_star).abs(),
            rhs: (2.0 * (em[a] * em[a] + em[b] * em[b])).sqrt(),
        });
    }
    let violated = |v: &[PairBound]| v.iter().filter(|p| p.lhs > p.rhs + LEMMA1_TOL).count();
    let slacks = single.iter().chain(&multi).map(PairBound::slack);
    let (min_slack, max_slack) = slacks.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    let mean_lhs = |v: &[PairBound]| v.iter().map(|p| p.lhs).sum::<f64>() / v.len().max(1) as f64;
    // Errors of every input that takes part in some pair, once per appearance.
    let pick = |e: &[f64]| {
        pairs
            .iter()
            .flat_map(|&(a, b)| [e[a], e[b]])
            .collect::<Vec<_>>()
    };
    Ok(LemmaReport {
        violations_single: violated(&single),
        violations_multi: violated(&multi),
        min_slack,
        max_slack,
        expectation_single: expectation(mean_lhs(&single), &pick(&es), 0.25),
        expectation_multi: expectation(mean_lhs(&multi), &pick(&em), 1.0),
        single,
        multi,
    })
}
