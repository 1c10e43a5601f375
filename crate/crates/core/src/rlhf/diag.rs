use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::{SmormModel, Strategy};
use crate::rlhf::bon::MIN_PROMPTS;
use crate::rlhf::normalize_from_start;
use crate::rlhf::policy::SyntheticPolicy;
use crate::rlhf::ppo::TrajectoryLog;
use crate::rng::stream_rng;
use crate::stats::{mean, variance};
use crate::world::{GoldWorld, PairwiseRecord};

/// Consecutive opposite-sign windows needed to call a divergence.
pub const PERSISTENCE: usize = 3;
/// `|t|` a window slope must exceed before its sign counts.
pub const SLOPE_T: f64 = 2.0;
pub const DEFAULT_WINDOW: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HackingVerdict {
    pub hacked: bool,
    pub divergence_step: Option<usize>,
    pub window: usize,
    pub final_proxy_slope: f64,
    pub final_gold_slope: f64,
}

/// Least-squares slope and its significance sign: `+1`/`−1` when
/// `|t| > SLOPE_T`, else `0`.
fn trend(x: &[f64], y: &[f64]) -> (f64, i8) {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || sxy == 0.0 {
        return (0.0, 0);
    }
    let slope = sxy / sxx;
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let se = (ssr / (n - 2.0) / sxx).sqrt();
    let significant = se == 0.0 || (slope / se).abs() > SLOPE_T;
    (slope, if significant { slope.signum() as i8 } else { 0 })
}

/// Slides a `window`-step least-squares fit over proxy and gold with stride
/// `window / 5`. The run is hacked when, over the final window, proxy rises
/// and gold falls; the divergence step is the centre of the first window
/// that opens a run of [`PERSISTENCE`] such windows.
pub fn detect_hacking(log: &TrajectoryLog, window: usize) -> Result<HackingVerdict> {
    let n = log.len();
    if window < 3 || n < 2 * window {
        return Err(Error::TooShort {
            needed: 2 * window.max(3),
            found: n,
        });
    }
    let stride = (window / 5).max(1);
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().expect("n >= window") != n - window {
        starts.push(n - window);
    }
    let x: Vec<f64> = log.steps.iter().map(|&s| s as f64).collect();
    let fits: Vec<((f64, i8), (f64, i8))> = starts
        .iter()
        .map(|&s| {
            let r = s..s + window;
            (
                trend(&x[r.clone()], &log.proxy[r.clone()]),
                trend(&x[r.clone()], &log.gold[r]),
            )
        })
        .collect();
    let diverging: Vec<bool> = fits
        .iter()
        .map(|((_, p), (_, g))| *p > 0 && *g < 0)
        .collect();
    let divergence_step = (0..diverging.len())
        .find(|&i| {
            i + PERSISTENCE <= diverging.len() && diverging[i..i + PERSISTENCE].iter().all(|d| *d)
        })
        .map(|i| log.steps[starts[i] + window / 2]);
    let ((final_proxy_slope, _), (final_gold_slope, _)) =
        *fits.last().expect("at least one window");
    Ok(HackingVerdict {
        hacked: *diverging.last().expect("at least one window"),
        divergence_step,
        window,
        final_proxy_slope,
        final_gold_slope,
    })
}

/// Per-attribute gold series of a trajectory, each shifted to start from 0.
pub fn attribute_trajectory(log: &TrajectoryLog) -> Vec<Vec<f64>> {
    (0..log.num_attributes())
        .map(|k| normalize_from_start(&log.attributes.iter().map(|a| a[k]).collect::<Vec<_>>()))
        .collect()
}

/// Anything that scores the `K` attributes of a batch of latents.
pub trait AttributeFn {
    fn attribute_scores(&self, inputs: &Mat64) -> Result<Mat64>;
}

impl AttributeFn for GoldWorld {
    fn attribute_scores(&self, inputs: &Mat64) -> Result<Mat64> {
        self.attributes_batch(inputs)
    }
}

impl AttributeFn for SmormModel {
    fn attribute_scores(&self, inputs: &Mat64) -> Result<Mat64> {
        self.attributes(inputs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffStat {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

/// Chosen-minus-rejected attribute scores after standardizing each attribute
/// over every chosen and rejected input of `pairs`.
pub fn pairwise_diff_stats(
    scorer: &dyn AttributeFn,
    pairs: &[PairwiseRecord],
) -> Result<Vec<DiffStat>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairs"));
    }
    let n = pairs.len();
    let d = pairs[0].chosen.len();
    let inputs = Mat64::from_fn(2 * n, d, |r, c| {
        if r < n {
            pairs[r].chosen[c]
        } else {
            pairs[r - n].rejected[c]
        }
    });
    let scores = scorer.attribute_scores(&inputs)?;
    Ok((0..scores.cols())
        .map(|k| {
            let col = scores.col(k);
            let (m, sd) = (mean(&col), variance(&col).sqrt());
            let z: Vec<f64> = col
                .iter()
                .map(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 })
                .collect();
            let diffs: Vec<f64> = (0..n).map(|i| z[i] - z[n + i]).collect();
            let var = variance(&diffs);
            DiffStat {
                mean: mean(&diffs),
                variance: var,
                std_error: (var / n as f64).sqrt(),
            }
        })
        .collect())
}

/// `(Σ_{k∈utility} Δh_k, Σ_{k∈style} Δh_k)` for one pair, where `Δh_k` is the
/// chosen-minus-rejected attribute-head score.
pub fn style_utility_decomposition(
    model: &SmormModel,
    chosen: &[f64],
    rejected: &[f64],
    utility: &[usize],
    style: &[usize],
) -> Result<(f64, f64)> {
    let k = model.num_attributes();
    let mut seen = vec![false; k];
    for &i in utility.iter().chain(style) {
        if i >= k || seen[i] {
            return Err(Error::BadPartition(i));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::BadPartition(missing));
    }
    if chosen.len() != rejected.len() {
        return Err(Error::LengthMismatch(chosen.len(), rejected.len()));
    }
    let d = chosen.len();
    let h = model.attributes(&Mat64::from_fn(2, d, |r, c| {
        if r == 0 {
            chosen[c]
        } else {
            rejected[c]
        }
    }))?;
    let delta = |set: &[usize]| set.iter().map(|&i| h[(0, i)] - h[(1, i)]).sum::<f64>();
    Ok((delta(utility), delta(style)))
}

/// `K·(L(chosen) − L(rejected))` under strategy L, the quantity the two
/// decomposition terms add up to.
pub fn strategy_l_gap(model: &SmormModel, chosen: &[f64], rejected: &[f64]) -> Result<f64> {
    let d = chosen.len();
    let s = model.score_batch(
        &Mat64::from_fn(2, d, |r, c| if r == 0 { chosen[c] } else { rejected[c] }),
        Strategy::L,
    )?;
    Ok(model.num_attributes() as f64 * (s[0] - s[1]))
}

/// Fraction of prompts where policy A's response has higher noiseless gold
/// than B's, ties counting one half. Both policies share the noise draw of
/// each prompt.
pub fn win_rate(
    a: &SyntheticPolicy,
    b: &SyntheticPolicy,
    prompts: &Mat64,
    gold: &GoldWorld,
    seed: u64,
) -> Result<f64> {
    if prompts.rows() < MIN_PROMPTS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PROMPTS,
            found: prompts.rows(),
        });
    }
    if a.response_dim() != b.response_dim() {
        return Err(Error::DimensionMismatch {
            expected: a.response_dim(),
            found: b.response_dim(),
        });
    }
    let dz = a.response_dim();
    let mut noise = Mat64::zeros(prompts.rows(), dz);
    for r in 0..prompts.rows() {
        let mut rng = stream_rng(seed, r as u64);
        for c in 0..dz {
            noise[(r, c)] = rng.sample(StandardNormal);
        }
    }
    let ga = gold.overall_batch(&a.responses(prompts, &noise)?)?;
    let gb = gold.overall_batch(&b.responses(prompts, &noise)?)?;
    let score: f64 = ga
        .iter()
        .zip(&gb)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(score / prompts.rows() as f64)
}
