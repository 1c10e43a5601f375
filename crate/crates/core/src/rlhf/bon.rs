use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat64;
use crate::model::RewardFn;
use crate::rlhf::policy::SyntheticPolicy;
use crate::rlhf::{fmt_f64, normalize_from_start};
use crate::rng::stream_rng;
use crate::world::GoldWorld;

/// Fewest prompts accepted by [`bon_sweep`] and [`crate::rlhf::win_rate`].
pub const MIN_PROMPTS: usize = 100;

/// `KL_BoN(n) = ln n − (n − 1)/n`.
pub fn kl_bon(n: i64) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidN(n));
    }
    let n = n as f64;
    Ok(n.ln() - (n - 1.0) / n)
}

/// Twelve log-spaced pool sizes from 1 to 405.
pub fn default_n_values() -> Vec<usize> {
    let top = 405f64.ln();
    (0..12)
        .map(|i| (top * i as f64 / 11.0).exp().round() as usize)
        .collect()
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Draws `n` responses for one prompt (a `1 × prompt_dim` row) and keeps the
/// proxy argmax, breaking ties toward the earliest sample.
pub fn bon_select<R: Rng + ?Sized>(
    policy: &SyntheticPolicy,
    prompt: &Mat64,
    n: usize,
    proxy: &dyn RewardFn,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if n == 0 {
        return Err(Error::InvalidN(0));
    }
    if prompt.rows() != 1 {
        return Err(Error::ShapeMismatch {
            expected: (1, policy.prompt_dim()),
            found: prompt.shape(),
        });
    }
    let repeated = Mat64::from_fn(n, prompt.cols(), |_, c| prompt[(0, c)]);
    let candidates = policy.sample(&repeated, rng)?;
    let scores = proxy.score_batch(&candidates)?;
    let best = argmax_first(&scores);
    debug_assert!(scores.iter().all(|s| *s <= scores[best]));
    Ok((candidates.row(best).to_vec(), scores[best]))
}

/// Mean proxy, noiseless gold and per-attribute gold of the BoN selection at
/// each pool size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoNSweep {
    pub n_values: Vec<usize>,
    pub kl: Vec<f64>,
    pub proxy: Vec<f64>,
    pub gold: Vec<f64>,
    /// `attributes[i][k]`: mean gold attribute `k` at `n_values[i]`.
    pub attributes: Vec<Vec<f64>>,
}

impl BoNSweep {
    /// Proxy, gold and attribute curves shifted to start from 0.
    pub fn normalized(&self) -> Self {
        let k = self.attributes.first().map_or(0, Vec::len);
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|j| {
                normalize_from_start(&self.attributes.iter().map(|a| a[j]).collect::<Vec<_>>())
            })
            .collect();
        Self {
            n_values: self.n_values.clone(),
            kl: self.kl.clone(),
            proxy: normalize_from_start(&self.proxy),
            gold: normalize_from_start(&self.gold),
            attributes: (0..self.n_values.len())
                .map(|i| cols.iter().map(|c| c[i]).collect())
                .collect(),
        }
    }

    /// `n,kl,proxy,gold,attr_1..attr_K`.
    pub fn to_csv(&self) -> String {
        let k = self.attributes.first().map_or(0, Vec::len);
        let mut out = String::from("n,kl,proxy,gold");
        for j in 1..=k {
            out.push_str(&format!(",attr_{j}"));
        }
        out.push('\n');
        for i in 0..self.n_values.len() {
            out.push_str(&format!(
                "{},{},{},{}",
                self.n_values[i],
                fmt_f64(self.kl[i]),
                fmt_f64(self.proxy[i]),
                fmt_f64(self.gold[i])
            ));
            for a in &self.attributes[i] {
                out.push(',');
                out.push_str(&fmt_f64(*a));
            }
            out.push('\n');
        }
        out
    }
}

struct PromptOutcome {
    proxy: Vec<f64>,
    gold: Vec<f64>,
    attributes: Vec<Vec<f64>>,
}

/// Best-of-n over nested candidate pools: prompt `i` draws one pool of
/// `max(n_values)` responses from stream `(seed, i)`, and each `n` selects
/// within its first `n` candidates.
pub fn bon_sweep(
    policy: &SyntheticPolicy,
    prompts: &Mat64,
    n_values: &[usize],
    proxy: &dyn RewardFn,
    gold: &GoldWorld,
    seed: u64,
) -> Result<BoNSweep> {
    if prompts.rows() < MIN_PROMPTS {
        return Err(Error::InsufficientSamples {
            needed: MIN_PROMPTS,
            found: prompts.rows(),
        });
    }
    if n_values.is_empty() {
        return Err(Error::EmptyInput("n_values"));
    }
    if let Some(w) = n_values.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "n_values must be strictly increasing, got {} then {}",
            w[0], w[1]
        )));
    }
    if n_values[0] == 0 {
        return Err(Error::InvalidN(0));
    }
    let pool = *n_values.last().expect("non-empty");
    let outcomes: Vec<PromptOutcome> = (0..prompts.rows())
        .into_par_iter()
        .map(|i| -> Result<PromptOutcome> {
            let repeated = Mat64::from_fn(pool, prompts.cols(), |_, c| prompts[(i, c)]);
            let candidates = policy.sample(&repeated, &mut stream_rng(seed, i as u64))?;
            let scores = proxy.score_batch(&candidates)?;
            let mut picks = Vec::with_capacity(n_values.len());
            let mut best = 0;
            let mut upto = 0;
            for &n in n_values {
                for j in upto..n {
                    if scores[j] > scores[best] {
                        best = j;
                    }
                }
                upto = n;
                picks.push(best);
            }
            let chosen = Mat64::from_fn(picks.len(), candidates.cols(), |r, c| {
                candidates[(picks[r], c)]
            });
            let attrs = gold.attributes_batch(&chosen)?;
            Ok(PromptOutcome {
                proxy: picks.iter().map(|&p| scores[p]).collect(),
                gold: (0..attrs.rows())
                    .map(|r| gold.aggregate(attrs.row(r)))
                    .collect(),
                attributes: (0..attrs.rows()).map(|r| attrs.row(r).to_vec()).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let m = outcomes.len() as f64;
    let k = gold.num_attributes();
    let mean_over = |f: &dyn Fn(&PromptOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / m;
    let mut sweep = BoNSweep {
        n_values: n_values.to_vec(),
        kl: n_values
            .iter()
            .map(|&n| kl_bon(n as i64))
            .collect::<Result<_>>()?,
        proxy: Vec::new(),
        gold: Vec::new(),
        attributes: Vec::new(),
    };
    for i in 0..n_values.len() {
        sweep.proxy.push(mean_over(&|o| o.proxy[i]));
        sweep.gold.push(mean_over(&|o| o.gold[i]));
        sweep
            .attributes
            .push((0..k).map(|j| mean_over(&|o| o.attributes[i][j])).collect());
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rlhf::policy::{sample_prompts, PolicyConfig};
    use crate::world::{PromptDistribution, RandomWorldParams};

    struct Constant;
    impl RewardFn for Constant {
        fn score_batch(&self, inputs: &Mat64) -> Result<Vec<f64>> {
            Ok(vec![1.0; inputs.rows()])
        }
    }

    fn setup() -> (GoldWorld, SyntheticPolicy) {
        let w = GoldWorld::random_mlp(&RandomWorldParams {
            latent_dim: 4,
            num_attributes: 2,
            ..Default::default()
        })
        .unwrap();
        let p = SyntheticPolicy::new(
            PolicyConfig {
                prompt_dim: 3,
                ..Default::default()
            },
            &PromptDistribution::standard("r", 4),
            0,
        )
        .unwrap();
        (w, p)
    }

    #[test]
    fn kl_formula() {
        assert_eq!(kl_bon(1).unwrap(), 0.0);
        assert!((kl_bon(2).unwrap() - (2f64.ln() - 0.5)).abs() < 1e-15);
        // ln 405 − 404/405 evaluated independently in double precision.
        assert!((kl_bon(405).unwrap() - 5.006356202909008).abs() < 1e-12);
        assert!(matches!(kl_bon(0), Err(Error::InvalidN(0))));
        let ks: Vec<f64> = (1..=1000).map(|n| kl_bon(n).unwrap()).collect();
        assert!(ks.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn default_grid() {
        assert_eq!(
            default_n_values(),
            vec![1, 2, 3, 5, 9, 15, 26, 46, 79, 136, 235, 405]
        );
    }

    #[test]
    fn selection_is_the_recorded_maximum() {
        let (w, p) = setup();
        let prompt = sample_prompts(1, 3, 5);
        let mut a = stream_rng(9, 0);
        let mut b = a.clone();
        let (best, score) = bon_select(&p, &prompt, 64, &w, &mut a).unwrap();
        let all = p
            .sample(&Mat64::from_fn(64, 3, |_, c| prompt[(0, c)]), &mut b)
            .unwrap();
        let scores = w.score_batch(&all).unwrap();
        assert_eq!(
            score,
            scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        );
        let i = scores.iter().position(|s| *s == score).unwrap();
        assert_eq!(best, all.row(i));
    }

    #[test]
    fn ties_keep_the_first_sample() {
        let (_, p) = setup();
        let prompt = sample_prompts(1, 3, 5);
        let mut a = stream_rng(1, 0);
        let mut b = a.clone();
        let (best, _) = bon_select(&p, &prompt, 8, &Constant, &mut a).unwrap();
        let first = p
            .sample(&Mat64::from_fn(8, 3, |_, c| prompt[(0, c)]), &mut b)
            .unwrap();
        assert_eq!(best, first.row(0));
    }

    #[test]
    fn gold_proxy_gives_monotone_curves() {
        let (w, p) = setup();
        let prompts = sample_prompts(120, 3, 2);
        let s = bon_sweep(&p, &prompts, &[1, 4, 16, 64], &w, &w, 3).unwrap();
        assert!(s.proxy.windows(2).all(|x| x[1] >= x[0]));
        assert!(s.gold.windows(2).all(|x| x[1] >= x[0]));
        assert_eq!(s.proxy, s.gold);
        let norm = s.normalized();
        assert_eq!(norm.gold[0], 0.0);
        assert!(norm.attributes[0].iter().all(|a| *a == 0.0));
        assert_eq!(
            s.to_csv().lines().next().unwrap(),
            "n,kl,proxy,gold,attr_1,attr_2"
        );
    }

    #[test]
    fn single_candidate_is_the_policy_mean_outcome() {
        let (w, p) = setup();
        let prompts = sample_prompts(100, 3, 2);
        let s = bon_sweep(&p, &prompts, &[1], &w, &w, 4).unwrap();
        let mut total = 0.0;
        for i in 0..100 {
            let z = p
                .sample(
                    &Mat64::from_fn(1, 3, |_, c| prompts[(i, c)]),
                    &mut stream_rng(4, i as u64),
                )
                .unwrap();
            total += w.overall_batch(&z).unwrap()[0];
        }
        assert!((s.gold[0] - total / 100.0).abs() < 1e-12);
        assert_eq!(s.to_csv().lines().count(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (w, p) = setup();
        assert!(matches!(
            bon_sweep(&p, &sample_prompts(10, 3, 0), &[1], &w, &w, 0),
            Err(Error::InsufficientSamples { .. })
        ));
        assert!(bon_sweep(&p, &sample_prompts(100, 3, 0), &[4, 2], &w, &w, 0).is_err());
    }
}
