//! Central-difference validation of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffnet::graph::{Graph, NodeId};
use crate::diffnet::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Above this many scalar parameters a seeded random subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so that coordinates with
    /// vanishing gradients are compared in absolute terms.
    pub rel_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 400,
            seed: 0,
            rel_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved a ReLU, clamp or minimum across
    /// (or to within `10·eps` of) its switching point.
    pub skipped_kinks: usize,
    pub worst_param: Option<String>,
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences over (a subsample of) all parameters.
pub fn grad_check<F>(
    params: &ParamStore,
    opts: &GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::InvalidConfig(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let analytic = g.backward(loss, params)?;
    let base_switches = g.switch_values().to_vec();

    let total = params.num_scalars();
    let coords: Vec<usize> = if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, total, opts.max_coords).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..total).collect()
    };

    let eval = |p: &ParamStore| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let l = build(&mut g, p)?;
        Ok((g.scalar(l)?, g.switch_values().to_vec()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst_param: None,
    };
    let mut work = params.clone();
    for k in coords {
        let (ti, ei) = params.locate(k).expect("coordinate in range");
        let orig = params.tensor(ti).as_slice()[ei];
        work.tensor_mut(ti).as_mut_slice()[ei] = orig + opts.eps;
        let (lp, sp) = eval(&work)?;
        work.tensor_mut(ti).as_mut_slice()[ei] = orig - opts.eps;
        let (lm, sm) = eval(&work)?;
        work.tensor_mut(ti).as_mut_slice()[ei] = orig;

        if near_kink(&base_switches, &sp, &sm, opts.eps) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.eps);
        let exact = analytic.tensor(ti).as_slice()[ei];
        let denom = exact.abs().max(numeric.abs()).max(opts.rel_floor);
        let rel = (exact - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_param = Some(params.names()[ti].clone());
        }
    }
    Ok(report)
}

fn near_kink(base: &[f64], plus: &[f64], minus: &[f64], eps: f64) -> bool {
    base.iter().zip(plus).zip(minus).any(|((b, p), m)| {
        let flipped = (b > &0.0) != (p > &0.0) || (b > &0.0) != (m > &0.0);
        let affected = p != b || m != b;
        flipped || (affected && b.abs() < 10.0 * eps)
    })
}
