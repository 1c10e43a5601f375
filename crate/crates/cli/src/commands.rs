use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use smorm_core::linalg::{Mat64, Vec64};
use smorm_core::model::{
    held_out, pairwise_accuracy, train, train_gating, EvalSet, InferenceStrategy, LossConfig,
    RewardFn, Scorer, SmormModel, StepRecord, Strategy, TrainingHistory, TrainingMode,
};
use smorm_core::rlhf::{
    bon_sweep, detect_hacking, normalize_from_start, ppo_train, sample_prompts, win_rate,
    SyntheticPolicy,
};
use smorm_core::rng::{derive_seed, stream_rng};
use smorm_core::stats::spearman;
use smorm_core::theory::{
    compare_mse_empirical, coupling, fisher_matrices, fisher_subset, head_gradients,
    pairwise_only_moments, population_heads, record_moments, verify_lemma1, verify_theorem1,
    MseComparisonConfig, Theorem1Report, MAX_FISHER_PARAMS,
};
use smorm_core::world::{AttributeRecord, GoldWorld, PairwiseRecord, PromptDistribution};

use crate::artifact::{Artifact, RESOLVED_CONFIG, RUN_LOG};
use crate::config::{BuiltWorld, Responses, RunConfig};
use crate::data::{self, Datasets, Split};
use crate::error::{CliError, Result};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const POPULATION: &str = "population";

/// Trains a fresh model of the configured architecture on the training split.
pub fn fit(
    cfg: &RunConfig,
    bw: &BuiltWorld,
    split: &Split,
    mode: TrainingMode,
) -> Result<(SmormModel, TrainingHistory)> {
    let seeds = cfg.seeds();
    let mut model = SmormModel::new(cfg.model_config(&bw.world), seeds.init)?;
    let loss = LossConfig {
        mode,
        ..cfg.train.loss_config()
    };
    let pairs: &[PairwiseRecord] = if mode.uses_pairs() {
        split.pairs()?
    } else {
        &[]
    };
    let attrs: &[AttributeRecord] = if mode.uses_attributes() {
        split.attrs()?
    } else {
        &[]
    };
    let history = train(
        &mut model,
        pairs,
        attrs,
        &loss,
        &cfg.train.train_config(cfg.train.steps, seeds.train),
    )?;
    if cfg.model.gating && cfg.train.gating_steps > 0 {
        let gate_cfg = cfg
            .train
            .train_config(cfg.train.gating_steps, derive_seed(seeds.train, "gating"));
        train_gating(&mut model, split.pairs()?, &gate_cfg)?;
    }
    Ok((model, history))
}

fn eval_set(world: &GoldWorld, attrs: &[AttributeRecord]) -> Result<EvalSet> {
    let d = world.latent_dim();
    let inputs = Mat64::from_fn(attrs.len(), d, |r, c| attrs[r].input[c]);
    let attributes = world.attributes_batch(&inputs)?;
    let overall = (0..attributes.rows())
        .map(|r| world.aggregate(attributes.row(r)))
        .collect();
    Ok(EvalSet {
        inputs,
        overall,
        attributes,
    })
}

/// Strategies a model can serve.
fn strategies(model: &SmormModel) -> Vec<Strategy> {
    let mut out = Vec::new();
    if model.loss_config().is_none_or(|l| l.mode.uses_pairs()) {
        out.push(Strategy::F);
    }
    if model.has_multi_head() {
        out.extend([Strategy::L, Strategy::M]);
    }
    if model.has_gating() {
        out.push(Strategy::Gated);
    }
    out
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::F => "F",
        Strategy::L => "L",
        Strategy::M => "M",
        Strategy::Gated => "gated",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitEval {
    pub pairs: usize,
    pub inputs: usize,
    /// Pairwise accuracy against the noiseless gold score, per strategy.
    pub accuracy: BTreeMap<String, f64>,
    pub mse_s: Option<f64>,
    pub mse_m: Option<f64>,
}

pub fn evaluate(model: &SmormModel, world: &GoldWorld, split: &Split) -> Result<SplitEval> {
    let mut accuracy = BTreeMap::new();
    let pairs = split.pairs.as_deref().unwrap_or(&[]);
    if !pairs.is_empty() {
        for s in strategies(model) {
            let scorer = Scorer::single(model.clone(), s)?;
            accuracy.insert(
                strategy_name(s).to_string(),
                pairwise_accuracy(&scorer, world, pairs)?,
            );
        }
    }
    let attrs = split.attrs.as_deref().unwrap_or(&[]);
    let (mse_s, mse_m) = if attrs.is_empty() {
        (None, None)
    } else {
        let h = held_out(model, &eval_set(world, attrs)?)?;
        let mode = model.loss_config().map(|l| l.mode);
        (
            mode.is_none_or(|m| m.uses_pairs()).then_some(h.mse_s),
            model.has_multi_head().then_some(h.mse_m),
        )
    };
    Ok(SplitEval {
        pairs: pairs.len(),
        inputs: attrs.len(),
        accuracy,
        mse_s,
        mse_m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub lambda_multi: f64,
    pub steps: usize,
    pub final_step: Option<StepRecord>,
    pub id_eval: Option<SplitEval>,
    pub ood_eval: Option<SplitEval>,
}

fn eval_report(
    cfg: &RunConfig,
    model: &SmormModel,
    history: &TrainingHistory,
    bw: &BuiltWorld,
    data: &Datasets,
) -> Result<EvalReport> {
    let present = |s: &Split| s.pairs.is_some() || s.attrs.is_some();
    let ev = |s: &Split| -> Result<Option<SplitEval>> {
        if present(s) {
            Ok(Some(evaluate(model, &bw.world, s)?))
        } else {
            Ok(None)
        }
    };
    Ok(EvalReport {
        mode: cfg.train.mode.as_str().into(),
        lambda_multi: cfg.train.lambda_multi,
        steps: cfg.train.steps,
        final_step: history.last().copied(),
        id_eval: ev(&data.id_eval)?,
        ood_eval: ev(&data.ood_eval)?,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    latent_dim: usize,
    num_attributes: usize,
    distributions: BTreeMap<&'a str, &'a PromptDistribution>,
    records: BTreeMap<String, usize>,
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let mut art = Artifact::create(out, "gen-data", cfg)?;
    let data = Datasets::generate(cfg, &bw)?;
    for name in data::write_all(art.dir(), &bw, &data)? {
        art.record(&name)?;
    }
    let mut records = BTreeMap::new();
    for s in data.splits() {
        records.insert(
            data::pairs_file(&s.name),
            s.pairs.as_ref().map_or(0, Vec::len),
        );
        records.insert(
            data::attrs_file(&s.name),
            s.attrs.as_ref().map_or(0, Vec::len),
        );
    }
    let manifest = Manifest {
        latent_dim: bw.world.latent_dim(),
        num_attributes: bw.world.num_attributes(),
        distributions: BTreeMap::from([
            ("train", &bw.train_dist),
            ("ood", &bw.ood_dist),
            ("attr", &bw.attr_dist),
        ]),
        records,
    };
    art.write_json("manifest.json", &manifest)?;
    art.write_json("world.json", &bw.world)?;
    art.finish()
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let data = Datasets::resolve(cfg, &bw, data_dir)?;
    let (model, history) = fit(cfg, &bw, &data.train, cfg.train.mode)?;
    let mut art = Artifact::create(out, "train", cfg)?;
    art.write(CHECKPOINT, model.to_json().as_bytes())?;
    art.write("history.csv", history.to_csv().as_bytes())?;
    art.write_json(
        "eval.json",
        &eval_report(cfg, &model, &history, &bw, &data)?,
    )?;
    art.finish()
}

#[derive(Serialize)]
struct BoundSummary<'a> {
    source: &'a str,
    /// No trained attribute head: `C_M = 0` and the bound degenerates.
    attribute_head_trained: bool,
    c: f64,
    eps: f64,
    eps_over_k: f64,
    one_t_alpha: f64,
    alpha: &'a [f64],
    degenerate: bool,
    population: BoundBody<'a>,
    trained_heads: Option<BoundBody<'a>>,
    notes: Vec<String>,
}

/// A bound report without its per-sample slack vector.
#[derive(Serialize)]
struct BoundBody<'a> {
    n: usize,
    violations: usize,
    assumptions_hold: bool,
    #[serde(flatten)]
    report: BoundFields<'a>,
}

#[derive(Serialize)]
struct BoundFields<'a> {
    assumptions: &'a smorm_core::theory::AssumptionCheck,
    proof: &'a smorm_core::theory::SlackSummary,
    sqrt_k: &'a smorm_core::theory::SlackSummary,
    statement: &'a smorm_core::theory::SlackSummary,
}

fn bound_body(t: &Theorem1Report) -> BoundBody<'_> {
    BoundBody {
        n: t.n,
        violations: t.violations(),
        assumptions_hold: t.assumptions.holds(),
        report: BoundFields {
            assumptions: &t.assumptions,
            proof: &t.proof,
            sqrt_k: &t.sqrt_k,
            statement: &t.statement,
        },
    }
}

fn random_pairs(n: usize, m: usize, seed: u64) -> Vec<(usize, usize)> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0);
    (0..m)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect()
}

pub fn cmd_verify(
    cfg: &RunConfig,
    out: &Path,
    data_dir: Option<&Path>,
    checkpoint: Option<&str>,
) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let world = &bw.world;
    let k = world.num_attributes();
    let seeds = cfg.seeds();
    let v = &cfg.verify;
    if v.eval_samples < 2 {
        return Err(CliError::config("verify.eval_samples must be >= 2"));
    }
    let data = Datasets::resolve(cfg, &bw, data_dir)?;
    let source = checkpoint.unwrap_or(POPULATION);
    let model = if source == POPULATION {
        None
    } else {
        let path = Path::new(source);
        if !path.exists() {
            return Err(CliError::config(format!(
                "checkpoint {source} does not exist"
            )));
        }
        Some(SmormModel::load(path)?)
    };
    let mut art = Artifact::create(out, "verify", cfg)?;

    // Implicit lower bound.
    let pairs = data.train.pairs()?;
    let attrs = data.train.attrs.as_deref().unwrap_or(&[]);
    let head_trained = !attrs.is_empty() && model.as_ref().is_none_or(|m| m.has_multi_head());
    let mut moments = if head_trained {
        record_moments(pairs, attrs, model.as_ref())?
    } else {
        pairwise_only_moments(pairs, k, model.as_ref())?
    };
    let eval = EvalSet::sample(world, &bw.train_dist, v.eval_samples, seeds.verify)?;
    let features = match &model {
        Some(m) => m.features(&eval.inputs)?,
        None => eval.inputs.clone(),
    };
    moments.extend_bound(&features);
    let cp = coupling(&moments)?;
    let (w_s, w_m) = population_heads(&moments, v.ridge)?;
    let pop = verify_theorem1(&w_s, &w_m, &cp, &features)?;
    let trained = match &model {
        Some(m) if head_trained => Some(verify_theorem1(
            &m.head_single(),
            m.head_multi(),
            &cp,
            &features,
        )?),
        _ => None,
    };
    let mut notes = Vec::new();
    if !head_trained {
        notes.push("no multi-attribute head is trained: C_M = 0, so c = 0 and the bound is the trivial r_m >= 0".to_string());
    } else if pop.degenerate {
        notes.push(
            "c = 0: the attribute targets carry no component along the preference direction"
                .to_string(),
        );
    }
    if !pop.assumptions.holds() {
        notes.push(
            "assumption checks failed; violations are reported but no guarantee applies"
                .to_string(),
        );
    }
    art.write_json(
        "coupling_bound.json",
        &BoundSummary {
            source,
            attribute_head_trained: head_trained,
            c: cp.c,
            eps: cp.eps,
            eps_over_k: cp.eps_proof,
            one_t_alpha: cp.one_t_alpha,
            alpha: &cp.alpha,
            degenerate: pop.degenerate,
            population: bound_body(&pop),
            trained_heads: trained.as_ref().map(bound_body),
            notes,
        },
    )?;

    // Per-pair preference error against the gold scores.
    let (r_s, r_m) = match &model {
        Some(m) => (
            m.score_batch(&eval.inputs, Strategy::F)?,
            if m.has_multi_head() {
                m.score_batch(&eval.inputs, Strategy::L)?
            } else {
                vec![0.0; eval.len()]
            },
        ),
        None => {
            let rs = features.matvec(&w_s)?;
            let rm = (0..features.rows())
                .map(|r| {
                    (0..k)
                        .map(|j| crate::commands::dot_col(&features, r, &w_m, j))
                        .sum::<f64>()
                        / k as f64
                })
                .collect();
            (rs, rm)
        }
    };
    let g_m: Vec<f64> = (0..eval.len())
        .map(|r| eval.attributes.row(r).iter().sum::<f64>() / k as f64)
        .collect();
    let lemma = verify_lemma1(
        &r_s,
        &r_m,
        &eval.overall,
        &g_m,
        &random_pairs(
            eval.len(),
            v.lemma_pairs,
            derive_seed(seeds.verify, "lemma"),
        ),
    )?;
    art.write_json(
        "pairwise_error.json",
        &serde_json::json!({
            "source": source,
            "pairs": v.lemma_pairs,
            "violations_single": lemma.violations_single,
            "violations_multi": lemma.violations_multi,
            "min_slack": lemma.min_slack,
            "max_slack": lemma.max_slack,
            "expectation_single": lemma.expectation_single,
            "expectation_multi": lemma.expectation_multi,
        }),
    )?;

    // Fisher ordering at the checkpoint, or at initialization.
    let fisher_model = match &model {
        Some(m) => m.clone(),
        None => SmormModel::new(cfg.model_config(world), seeds.init)?,
    };
    let mut subset = fisher_subset(&fisher_model);
    let size = |names: &[String]| {
        names
            .iter()
            .map(|n| {
                fisher_model
                    .params()
                    .get(n)
                    .map_or(0, |t| t.as_slice().len())
            })
            .sum::<usize>()
    };
    let mut fisher_notes = Vec::new();
    if size(&subset) > MAX_FISHER_PARAMS {
        subset.remove(0);
        fisher_notes.push(format!(
            "subset exceeds {MAX_FISHER_PARAMS} parameters; last backbone weight dropped"
        ));
    }
    if size(&subset) > MAX_FISHER_PARAMS {
        subset.remove(0);
        fisher_notes.push(format!(
            "subset exceeds {MAX_FISHER_PARAMS} parameters; last backbone bias dropped"
        ));
    }
    if size(&subset) > MAX_FISHER_PARAMS {
        return Err(CliError::config(format!(
            "head parameters alone exceed {MAX_FISHER_PARAMS}; reduce model.feature_dim"
        )));
    }
    let n_f = v.fisher_samples.min(eval.len());
    let grads: Vec<Mat64> = (0..n_f)
        .into_par_iter()
        .map(|r| {
            head_gradients(
                &fisher_model,
                &Vec64::new(eval.inputs.row(r).to_vec())?,
                &subset,
            )
        })
        .collect::<smorm_core::Result<_>>()?;
    let sigma: Vec<f64> = (0..=k).map(|j| world.noise_variance(j)).collect();
    let fisher = fisher_matrices(&grads, &sigma, None)?;
    let g0: Vec<f64> = (0..fisher.p)
        .map(|j| grads.iter().map(|g| g[(0, j)]).sum::<f64>() / grads.len() as f64)
        .collect();
    art.write_json(
        "fisher.json",
        &serde_json::json!({
            "source": source,
            "subset": subset,
            "n": fisher.n,
            "p": fisher.p,
            "lambda_min_delta": fisher.lambda_min_delta,
            "psd": fisher.lambda_min_delta >= -1e-10,
            "g0_delta_g0": fisher.delta_quadratic(&g0)?,
            "notes": fisher_notes,
        }),
    )?;

    if v.mse_comparison_seeds > 0 {
        let cmp = MseComparisonConfig {
            seeds: (0..v.mse_comparison_seeds as u64)
                .map(|i| cfg.seed.wrapping_add(i))
                .collect(),
            num_pairs: cfg.data.train_pairs,
            num_attrs: cfg.data.train_attrs,
            num_eval: cfg.data.eval_attrs,
            hidden: cfg.model.hidden.clone(),
            feature_dim: cfg.model.feature_dim,
            lambda_multi: cfg.train.lambda_multi,
            train: cfg.train.train_config(cfg.train.steps, seeds.train),
        };
        art.write_json(
            "mse_comparison.json",
            &compare_mse_empirical(world, &bw.train_dist, &cmp)?,
        )?;
    }
    art.finish()
}

pub(crate) fn dot_col(a: &Mat64, row: usize, b: &Mat64, col: usize) -> f64 {
    a.row(row)
        .iter()
        .enumerate()
        .map(|(i, x)| x * b[(i, col)])
        .sum()
}

/// The reward a policy is optimized against.
pub enum Proxy {
    Gold(GoldWorld),
    Model(Scorer),
}

impl Proxy {
    pub fn reward(&self) -> &dyn RewardFn {
        match self {
            Self::Gold(w) => w,
            Self::Model(s) => s,
        }
    }

    fn mode(&self) -> Option<&'static str> {
        match self {
            Self::Gold(_) => None,
            Self::Model(s) => s.models()[0].loss_config().map(|l| l.mode.as_str()),
        }
    }
}

fn build_proxy(
    cfg: &RunConfig,
    bw: &BuiltWorld,
    data_dir: Option<&Path>,
    strategy: &str,
    checkpoints: &[String],
    art: &mut Artifact,
) -> Result<Proxy> {
    if strategy == "gold" {
        return Ok(Proxy::Gold(bw.world.clone()));
    }
    let inference: InferenceStrategy = strategy.parse()?;
    let models = if !checkpoints.is_empty() {
        checkpoints
            .iter()
            .map(|p| {
                let path = Path::new(p);
                if !path.exists() {
                    return Err(CliError::config(format!("checkpoint {p} does not exist")));
                }
                Ok(SmormModel::load(path)?)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let data = Datasets::resolve(cfg, bw, data_dir)?;
        let modes = match inference {
            InferenceStrategy::BaselineSM => {
                vec![TrainingMode::SingleOnly, TrainingMode::MultiOnly]
            }
            InferenceStrategy::EnsembleMean | InferenceStrategy::EnsembleMin => {
                return Err(CliError::config(
                    "ensemble strategies need one --checkpoint per member",
                ));
            }
            _ => vec![cfg.train.mode],
        };
        let models = modes
            .iter()
            .map(|&m| Ok(fit(cfg, bw, &data.train, m)?.0))
            .collect::<Result<Vec<_>>>()?;
        for (i, m) in models.iter().enumerate() {
            let name = if models.len() == 1 {
                format!("proxy.{CHECKPOINT}")
            } else {
                format!("proxy{i}.{CHECKPOINT}")
            };
            art.write(&name, m.to_json().as_bytes())?;
        }
        models
    };
    Ok(Proxy::Model(Scorer::new(inference, models)?))
}

fn response_dist(bw: &BuiltWorld, r: Responses) -> &PromptDistribution {
    match r {
        Responses::Id => &bw.train_dist,
        Responses::Ood => &bw.ood_dist,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BonVerdict {
    pub strategy: String,
    pub proxy_mode: Option<String>,
    pub prompts: usize,
    pub kl_max: f64,
    pub gold_start: f64,
    pub gold_max: f64,
    pub gold_final: f64,
    /// `gold_max − gold_final`.
    pub gold_drop: f64,
    pub drop_threshold: f64,
    pub over_optimized: bool,
    /// Rank correlation of gold with `log n`; needs three pool sizes.
    pub spearman_gold_log_n: Option<f64>,
    pub proxy_final: f64,
}

pub fn cmd_bon(
    cfg: &RunConfig,
    out: &Path,
    data_dir: Option<&Path>,
    checkpoints: &[String],
) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let seeds = cfg.seeds();
    let mut art = Artifact::create(out, "bon", cfg)?;
    let proxy = build_proxy(cfg, &bw, data_dir, &cfg.bon.strategy, checkpoints, &mut art)?;
    let policy = SyntheticPolicy::new(
        cfg.bon.policy.clone(),
        response_dist(&bw, cfg.bon.responses),
        seeds.policy,
    )?;
    let prompts = sample_prompts(cfg.bon.prompts, policy.prompt_dim(), seeds.bon_prompts);
    let sweep = bon_sweep(
        &policy,
        &prompts,
        &cfg.bon.n_values,
        proxy.reward(),
        &bw.world,
        seeds.bon,
    )?;
    art.write("bon.csv", sweep.to_csv().as_bytes())?;
    let gold_max = sweep.gold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gold_final = *sweep.gold.last().expect("non-empty sweep");
    let log_n: Vec<f64> = sweep.n_values.iter().map(|&n| (n as f64).ln()).collect();
    let verdict = BonVerdict {
        strategy: cfg.bon.strategy.clone(),
        proxy_mode: proxy.mode().map(Into::into),
        prompts: cfg.bon.prompts,
        kl_max: *sweep.kl.last().expect("non-empty sweep"),
        gold_start: sweep.gold[0],
        gold_max,
        gold_final,
        gold_drop: gold_max - gold_final,
        drop_threshold: cfg.bon.drop_threshold,
        over_optimized: gold_max - gold_final >= cfg.bon.drop_threshold,
        spearman_gold_log_n: (sweep.gold.len() >= 3).then(|| spearman(&sweep.gold, &log_n)),
        proxy_final: *sweep.proxy.last().expect("non-empty sweep"),
    };
    art.write_json("bon_verdict.json", &verdict)?;
    art.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PpoVerdict {
    pub strategy: String,
    pub proxy_mode: Option<String>,
    pub hacked: bool,
    pub divergence_step: Option<usize>,
    pub window: usize,
    pub final_proxy_slope: f64,
    pub final_gold_slope: f64,
    pub steps: usize,
    pub gold_start: f64,
    pub gold_max: f64,
    pub gold_final: f64,
    pub proxy_start: f64,
    pub proxy_final: f64,
    pub kl_final: f64,
    pub policy_drift: f64,
    /// Gold win rate of the trained policy against the initial one.
    pub win_rate_vs_initial: Option<f64>,
}

pub fn cmd_ppo(
    cfg: &RunConfig,
    out: &Path,
    data_dir: Option<&Path>,
    checkpoints: &[String],
) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let seeds = cfg.seeds();
    let p = &cfg.ppo;
    let steps = p.ppo_config().num_steps(p.prompts) + 1;
    if steps < 2 * p.window {
        return Err(CliError::config(format!(
            "ppo run logs {steps} steps, but the hacking detector needs at least {} (2 × window)",
            2 * p.window
        )));
    }
    let mut art = Artifact::create(out, "ppo", cfg)?;
    let proxy = build_proxy(cfg, &bw, data_dir, &p.strategy, checkpoints, &mut art)?;
    let policy = SyntheticPolicy::new(
        p.policy.clone(),
        response_dist(&bw, p.responses),
        seeds.policy,
    )?;
    let prompts = sample_prompts(p.prompts, policy.prompt_dim(), seeds.ppo_prompts);
    let (trained, log) = ppo_train(
        policy.clone(),
        proxy.reward(),
        &bw.world,
        &prompts,
        &p.ppo_config(),
        seeds.ppo,
    )?;
    art.write("ppo.csv", log.to_csv().as_bytes())?;
    let v = detect_hacking(&log, p.window)?;
    let win = if p.win_rate_prompts > 0 {
        let wp = sample_prompts(p.win_rate_prompts, policy.prompt_dim(), seeds.win_prompts);
        Some(win_rate(&trained, &policy, &wp, &bw.world, seeds.win)?)
    } else {
        None
    };
    let last = |x: &[f64]| *x.last().expect("non-empty log");
    let verdict = PpoVerdict {
        strategy: p.strategy.clone(),
        proxy_mode: proxy.mode().map(Into::into),
        hacked: v.hacked,
        divergence_step: v.divergence_step,
        window: v.window,
        final_proxy_slope: v.final_proxy_slope,
        final_gold_slope: v.final_gold_slope,
        steps: log.len(),
        gold_start: log.gold[0],
        gold_max: log.gold.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        gold_final: last(&log.gold),
        proxy_start: log.proxy[0],
        proxy_final: last(&log.proxy),
        kl_final: last(&log.kl),
        policy_drift: trained.drift(),
        win_rate_vs_initial: win,
    };
    art.write_json("ppo_verdict.json", &verdict)?;
    art.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgePoint {
    pub value: f64,
    pub accuracy: f64,
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub parameter: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Grid values strictly inside the range; all values when fewer than three.
    pub inner_values: Vec<f64>,
    /// `max − min` accuracy over the inner values.
    pub inner_spread: f64,
    pub edges: Vec<EdgePoint>,
    pub edge_tolerance: f64,
    pub edge_degradation: bool,
}

/// Sweep accuracy metric: SMORM-F on the in-distribution evaluation pairs.
pub const SWEEP_METRIC: &str = "id_eval.accuracy.F";

pub fn sweep_report(cfg: &RunConfig, values: &[f64], accuracy: &[f64]) -> SweepReport {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let is_edge = |v: f64| values.len() >= 3 && (v == lo || v == hi);
    let inner: Vec<usize> = (0..values.len()).filter(|&i| !is_edge(values[i])).collect();
    let inner_acc: Vec<f64> = inner.iter().map(|&i| accuracy[i]).collect();
    let inner_min = inner_acc.iter().copied().fold(f64::INFINITY, f64::min);
    let inner_max = inner_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = cfg.sweep.edge_tolerance;
    let edges: Vec<EdgePoint> = (0..values.len())
        .filter(|&i| is_edge(values[i]))
        .map(|i| EdgePoint {
            value: values[i],
            accuracy: accuracy[i],
            degraded: accuracy[i] < inner_min - tol,
        })
        .collect();
    SweepReport {
        parameter: cfg.sweep.parameter.clone(),
        metric: SWEEP_METRIC.into(),
        values: values.to_vec(),
        accuracy: accuracy.to_vec(),
        inner_values: inner.iter().map(|&i| values[i]).collect(),
        inner_spread: if inner_acc.is_empty() {
            0.0
        } else {
            inner_max - inner_min
        },
        edge_degradation: edges.iter().any(|e| e.degraded),
        edges,
        edge_tolerance: tol,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:?}"))
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, data_dir: Option<&Path>) -> Result<PathBuf> {
    let bw = cfg.build_world()?;
    let data = Datasets::resolve(cfg, &bw, data_dir)?;
    let points: Vec<(RunConfig, SmormModel, TrainingHistory, EvalReport)> = cfg
        .sweep
        .values
        .par_iter()
        .map(|&value| {
            let mut c = cfg.clone();
            c.train.mode = TrainingMode::Smorm;
            c.train.lambda_multi = value;
            let (model, history) = fit(&c, &bw, &data.train, TrainingMode::Smorm)?;
            let report = eval_report(&c, &model, &history, &bw, &data)?;
            Ok((c, model, history, report))
        })
        .collect::<Result<_>>()?;
    let mut art = Artifact::create(out, "sweep", cfg)?;
    let mut csv = String::from(
        "lambda_multi,accuracy_id_f,accuracy_id_m,accuracy_ood_f,accuracy_ood_m,mse_s,mse_m\n",
    );
    let mut accuracy = Vec::new();
    for (i, (c, model, history, report)) in points.iter().enumerate() {
        let dir = format!("points/{i:02}");
        art.write(&format!("{dir}/{RESOLVED_CONFIG}"), c.to_toml().as_bytes())?;
        art.write(&format!("{dir}/{CHECKPOINT}"), model.to_json().as_bytes())?;
        art.write(&format!("{dir}/history.csv"), history.to_csv().as_bytes())?;
        art.write_json(&format!("{dir}/eval.json"), report)?;
        let acc = |s: &Option<SplitEval>, key: &str| {
            s.as_ref().and_then(|e| e.accuracy.get(key).copied())
        };
        let id_f = acc(&report.id_eval, "F")
            .ok_or_else(|| CliError::config("sweep needs id_eval pairs"))?;
        accuracy.push(id_f);
        csv.push_str(&format!(
            "{:?},{:?},{},{},{},{},{}\n",
            c.train.lambda_multi,
            id_f,
            fmt_opt(acc(&report.id_eval, "M")),
            fmt_opt(acc(&report.ood_eval, "F")),
            fmt_opt(acc(&report.ood_eval, "M")),
            fmt_opt(report.id_eval.as_ref().and_then(|e| e.mse_s)),
            fmt_opt(report.id_eval.as_ref().and_then(|e| e.mse_m)),
        ));
    }
    art.write("sweep.csv", csv.as_bytes())?;
    art.write_json(
        "sweep.json",
        &sweep_report(cfg, &cfg.sweep.values, &accuracy),
    )?;
    art.finish()
}

/// Curve files a run directory may hold, with their x column.
const CURVES: [(&str, &str, &str); 2] = [("bon", "bon.csv", "n"), ("ppo", "ppo.csv", "step")];
const VERDICTS: [&str; 3] = ["bon_verdict.json", "ppo_verdict.json", "sweep.json"];

#[derive(Serialize)]
struct ReportRun {
    run_id: String,
    dir: String,
    curves: Vec<String>,
    /// Last normalized value of every series, per curve.
    final_normalized: BTreeMap<String, BTreeMap<String, f64>>,
    verdicts: BTreeMap<String, serde_json::Value>,
}

fn read_curve(path: &Path, x_col: &str) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    if headers.first().map(String::as_str) != Some(x_col)
        || headers.get(1).map(String::as_str) != Some("kl")
    {
        return Err(CliError::config(format!(
            "{} must start with columns {x_col},kl",
            path.display()
        )));
    }
    let mut x = Vec::new();
    let mut cols = vec![Vec::new(); headers.len() - 1];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::config(format!("{}: `{field}` is not a number", path.display()))
            })?;
            if j == 0 {
                x.push(v);
            } else {
                cols[j - 1].push(v);
            }
        }
    }
    Ok((headers[1..].to_vec(), x, cols))
}

pub fn cmd_report(cfg: &RunConfig, out: &Path, runs: &[PathBuf]) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(CliError::config(
            "report needs at least one --runs directory",
        ));
    }
    let mut long = String::from("run_id,curve,x,kl,series,value\n");
    let mut summary = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for dir in runs {
        if !dir.join(RUN_LOG).exists() {
            return Err(CliError::config(format!(
                "{} is not a run directory (no {RUN_LOG})",
                dir.display()
            )));
        }
        let base = dir.file_name().map_or_else(
            || dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        let count = seen.entry(base.clone()).or_insert(0);
        *count += 1;
        let run_id = if *count == 1 {
            base
        } else {
            format!("{base}-{count}")
        };
        let mut run = ReportRun {
            run_id: run_id.clone(),
            dir: dir.display().to_string(),
            curves: Vec::new(),
            final_normalized: BTreeMap::new(),
            verdicts: BTreeMap::new(),
        };
        for (curve, file, x_col) in CURVES {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let (names, x, cols) = read_curve(&path, x_col)?;
            let kl = &cols[0];
            let mut finals = BTreeMap::new();
            for (name, col) in names.iter().zip(&cols).skip(1) {
                let norm = normalize_from_start(col);
                for i in 0..norm.len() {
                    long.push_str(&format!(
                        "{run_id},{curve},{:?},{:?},{name},{:?}\n",
                        x[i], kl[i], norm[i]
                    ));
                }
                if let Some(last) = norm.last() {
                    finals.insert(name.clone(), *last);
                }
            }
            run.curves.push(curve.into());
            run.final_normalized.insert(curve.into(), finals);
        }
        for file in VERDICTS {
            let path = dir.join(file);
            if path.exists() {
                let text = std::fs::read_to_string(&path)?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                run.verdicts
                    .insert(file.trim_end_matches(".json").into(), value);
            }
        }
        summary.push(run);
    }
    let mut art = Artifact::create(out, "report", cfg)?;
    art.write("report.csv", long.as_bytes())?;
    art.write_json("report.json", &serde_json::json!({ "runs": summary }))?;
    art.finish()
}
