//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! the stderr handle (bypassing the test harness capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use smorm_core::diffnet::{grad_check, GradCheckOptions};
use smorm_core::linalg::{Mat64, Vec64};
use smorm_core::model::{
    bt_loss, joint_loss, LossConfig, ModelConfig, SmormModel, TrainingMode, HEAD_MULTI, HEAD_SINGLE,
};
use smorm_core::rlhf::{kl_bon, ppo_loss, sample_prompts, PolicyConfig, SyntheticPolicy};
use smorm_core::rng::stream_rng;
use smorm_core::theory::{
    compare_mse_empirical, coupling, fisher_matrices, fisher_subset, head_gradients,
    pairwise_only_moments, population_heads, record_moments, verify_lemma1, verify_theorem1,
    MseComparisonConfig,
};
use smorm_core::world::{
    gen_multiattr, gen_pairwise, GoldWorld, PromptDistribution, RandomWorldParams,
};
use smorm_lab::artifact::RUN_LOG;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {id:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn check(id: u32, name: &str, pass: bool, detail: String) {
    report(id, name, pass, &detail);
    assert!(pass, "criterion {id} {name}: {detail}");
}

fn cli(cwd: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_smorm-lab"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn f(v: &serde_json::Value) -> f64 {
    v.as_f64().unwrap_or_else(|| panic!("not a number: {v}"))
}

/// The engineered spurious world: proxies trained on ID pairs, policies
/// sampling OOD responses.
const HACKING: &str = r#"
seed = 0
[world.spurious]
confounding = 0.99
[model]
feature_dim = 4
[train]
steps = 3000
[ppo]
win_rate_prompts = 500
"#;

/// Trains the baseline and joint proxies once; shared by the BoN and PPO
/// criteria.
fn hacking_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("c.toml"), HACKING).unwrap();
        std::thread::scope(|s| {
            s.spawn(|| {
                cli(
                    &dir,
                    &[
                        "train",
                        "--config",
                        "c.toml",
                        "--out",
                        "base",
                        "--mode",
                        "single_only",
                    ],
                )
            });
            s.spawn(|| cli(&dir, &["train", "--config", "c.toml", "--out", "smorm"]));
        });
        dir
    })
}

#[test]
fn c01_gradient_correctness() {
    let t = Instant::now();
    let mut worst = BTreeMap::<String, f64>::new();
    for seed in 0..3u64 {
        let world = GoldWorld::random_mlp(&RandomWorldParams {
            seed,
            latent_dim: 5,
            num_attributes: 3,
            ..Default::default()
        })
        .unwrap();
        let dist = PromptDistribution::standard("id", 5);
        let pairs = gen_pairwise(&world, 6, &dist, seed + 10).unwrap();
        let attrs = gen_multiattr(&world, 6, &dist, seed + 20).unwrap();
        let model = SmormModel::new(ModelConfig::new(5, vec![7, 6], 4, 3), seed).unwrap();
        let pr: Vec<_> = pairs.iter().collect();
        let ar: Vec<_> = attrs.iter().collect();
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        for mode in TrainingMode::ALL {
            let cfg = LossConfig {
                mode,
                lambda_multi: 0.7,
                margin: 0.5,
                label_smooth_eps: 0.1,
            };
            let r = grad_check(model.params(), &opts, |g, p| {
                Ok(joint_loss(g, &model, p, &pr, &ar, &cfg)?.total)
            })
            .unwrap();
            let e = worst.entry(mode.as_str().to_string()).or_insert(0.0);
            *e = e.max(r.max_rel_error);
        }

        let policy = SyntheticPolicy::new(
            PolicyConfig {
                prompt_dim: 3,
                hidden: vec![8, 6],
                init_scale: 1.0,
            },
            &dist,
            seed,
        )
        .unwrap();
        let prompts = sample_prompts(8, 3, seed + 30);
        let actions = policy.sample(&prompts, &mut stream_rng(seed, 1)).unwrap();
        let old: Vec<f64> = (0..8).map(|i| -6.0 + 0.2 * i as f64).collect();
        let adv: Vec<f64> = (0..8)
            .map(|i| if i % 3 == 0 { -0.8 } else { 1.1 })
            .collect();
        let r = grad_check(policy.params(), &opts, |g, p| {
            ppo_loss(g, &policy, p, &prompts, &actions, &old, &adv, 0.2)
        })
        .unwrap();
        let e = worst.entry("ppo_clipped".into()).or_insert(0.0);
        *e = e.max(r.max_rel_error);
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        1,
        "gradient correctness",
        max < 1e-5 && secs < 30.0,
        format!("max rel error {max:.2e} over {worst:?}, {secs:.1}s"),
    );
}

#[test]
fn c02_bt_stability() {
    let mut worst_naive = 0.0f64;
    for i in -3000..=3000 {
        let d = i as f64 * 0.01;
        let naive = (1.0 + (-d).exp()).ln();
        worst_naive = worst_naive.max((bt_loss(d, 0.0) - naive).abs());
    }
    let mut worst_asym = 0.0f64;
    for d in [1000.0, -1000.0] {
        let l = bt_loss(d, 0.0);
        let asym = f64::max(0.0, -d);
        assert!(l.is_finite());
        worst_asym = worst_asym.max((l - asym).abs() / asym.abs().max(1.0));
    }
    check(
        2,
        "BT numerical stability",
        worst_naive < 1e-12 && worst_asym < 1e-12,
        format!("max |stable − naive| {worst_naive:.1e} on |Δ| ≤ 30, asymptote error {worst_asym:.1e} at |Δ| = 1000"),
    );
}

#[test]
fn c03_pairwise_error_lemma() {
    let t = Instant::now();
    let n = 20_000;
    let mut rng = stream_rng(3, 0);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let g_s: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let g_m: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let r_s: Vec<f64> = g_s.iter().map(|g| g + noise.sample(&mut rng)).collect();
    let r_m: Vec<f64> = g_m.iter().map(|g| g + noise.sample(&mut rng)).collect();
    let pairs: Vec<(usize, usize)> = (0..100_000)
        .map(|_| {
            let a = rng.random_range(0..n);
            (a, (a + rng.random_range(1..n)) % n)
        })
        .collect();
    let r = verify_lemma1(&r_s, &r_m, &g_s, &g_m, &pairs).unwrap();
    let secs = t.elapsed().as_secs_f64();
    check(
        3,
        "pairwise error lemma",
        r.violations() == 0 && secs < 10.0,
        format!(
            "{} violations on {} pairs, min slack {:.3e}, {secs:.1}s",
            r.violations(),
            pairs.len(),
            r.min_slack
        ),
    );
}

#[test]
fn c04_implicit_multi_attribute_bound() {
    let t = Instant::now();
    let world = GoldWorld::random_mlp(&RandomWorldParams {
        seed: 4,
        latent_dim: 6,
        num_attributes: 3,
        ..Default::default()
    })
    .unwrap();
    let dist = PromptDistribution::standard("id", 6);
    let pairs = gen_pairwise(&world, 2000, &dist, 41).unwrap();
    let attrs = gen_multiattr(&world, 2000, &dist, 42).unwrap();
    let held_out: Vec<Vec64> = gen_multiattr(&world, 10_000, &dist, 43)
        .unwrap()
        .into_iter()
        .map(|r| r.input)
        .collect();
    let features = Mat64::from_fn(held_out.len(), 6, |r, c| held_out[r][c]);

    let mut m = record_moments(&pairs, &attrs, None).unwrap();
    m.extend_bound(&features);
    let cp = coupling(&m).unwrap();
    let (w_s, w_m) = population_heads(&m, 0.0).unwrap();
    let t1 = verify_theorem1(&w_s, &w_m, &cp, &features).unwrap();

    let mut m0 = pairwise_only_moments(&pairs, 3, None).unwrap();
    m0.extend_bound(&features);
    let cp0 = coupling(&m0).unwrap();
    let (w_s0, w_m0) = population_heads(&m0, 0.0).unwrap();
    let t0 = verify_theorem1(&w_s0, &w_m0, &cp0, &features).unwrap();

    let secs = t.elapsed().as_secs_f64();
    let pass = t1.assumptions.holds()
        && t1.violations() == 0
        && t1.n == 10_000
        && cp0.c == 0.0
        && t0.violations() == 0
        && secs < 60.0;
    check(
        4,
        "implicit multi-attribute bound",
        pass,
        format!(
            "c = {:.4}, eps/K = {:.4}, {} violations on {} samples (min slack {:.3e}); C_M = 0 gives c = {}; {secs:.1}s",
            cp.c, cp.eps_proof, t1.violations(), t1.n, t1.proof.min_slack, cp0.c
        ),
    );
}

#[test]
fn c05_fisher_ordering() {
    let mut rng = stream_rng(5, 0);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let heads = rng.random_range(2..6);
        let p = rng.random_range(2..20);
        let n = rng.random_range(1..30);
        let grads: Vec<Mat64> = (0..n)
            .map(|_| Mat64::from_fn(heads, p, |_, _| rng.sample(StandardNormal)))
            .collect();
        let sigma: Vec<f64> = (0..heads).map(|_| rng.random_range(0.1..3.0)).collect();
        worst = worst.min(
            fisher_matrices(&grads, &sigma, None)
                .unwrap()
                .lambda_min_delta,
        );
    }

    // Attribute heads aligned with the overall head.
    let mut m = SmormModel::new(ModelConfig::new(3, vec![6], 4, 2), 5).unwrap();
    let ws = m.params().get(HEAD_SINGLE).unwrap().clone();
    m.params_mut()
        .set(HEAD_MULTI, Mat64::from_fn(4, 2, |r, _| ws[(r, 0)]))
        .unwrap();
    let subset = fisher_subset(&m);
    let grads: Vec<Mat64> = (0..40)
        .map(|_| {
            head_gradients(
                &m,
                &Vec64::from_fn(3, |_| rng.sample(StandardNormal)),
                &subset,
            )
            .unwrap()
        })
        .collect();
    let fr = fisher_matrices(&grads, &[1.0, 1.0, 1.0], None).unwrap();
    let g0: Vec<f64> = (0..fr.p)
        .map(|j| grads.iter().map(|g| g[(0, j)]).sum::<f64>() / grads.len() as f64)
        .collect();
    let q = fr.delta_quadratic(&g0).unwrap();
    check(
        5,
        "Fisher ordering",
        worst >= -1e-10 && q > 0.0,
        format!("min λ_min(Δ) over 100 instances {worst:.3e}; aligned heads g0ᵀΔg0 = {q:.4e}"),
    );
}

#[test]
fn c06_joint_training_lowers_mse() {
    let t = Instant::now();
    let world = GoldWorld::random_mlp(&RandomWorldParams {
        latent_dim: 16,
        num_attributes: 3,
        sigma_kk: 1.0,
        ..Default::default()
    })
    .unwrap();
    let dist = PromptDistribution::standard("id", 16);
    let mut cfg = MseComparisonConfig {
        seeds: (0..20).collect(),
        ..Default::default()
    };
    cfg.train.steps = 3000;
    let r = compare_mse_empirical(&world, &dist, &cfg).unwrap();
    let secs = t.elapsed().as_secs_f64();
    check(
        6,
        "joint training lowers held-out MSE",
        r.test_mse_s.p_value < 0.05 && r.test_mse_m.p_value < 0.05 && secs < 300.0,
        format!(
            "MSE_S wins {}/{} (p = {:.2e}), MSE_M wins {}/{} (p = {:.2e}), {secs:.1}s",
            r.test_mse_s.wins,
            r.seeds.len(),
            r.test_mse_s.p_value,
            r.test_mse_m.wins,
            r.seeds.len(),
            r.test_mse_m.p_value
        ),
    );
}

#[test]
fn c07_bon_hacking() {
    let t = Instant::now();
    let dir = hacking_dir();
    std::thread::scope(|s| {
        s.spawn(|| {
            cli(
                dir,
                &[
                    "bon",
                    "--config",
                    "c.toml",
                    "--out",
                    "bon_base",
                    "--checkpoint",
                    "base/checkpoint.json",
                ],
            )
        });
        s.spawn(|| {
            cli(
                dir,
                &[
                    "bon",
                    "--config",
                    "c.toml",
                    "--out",
                    "bon_f",
                    "--checkpoint",
                    "smorm/checkpoint.json",
                ],
            )
        });
    });
    let base = json(&dir.join("bon_base/bon_verdict.json"));
    let sm = json(&dir.join("bon_f/bon_verdict.json"));
    let rho = f(&sm["spearman_gold_log_n"]);
    let drop = f(&base["gold_drop"]);
    let secs = t.elapsed().as_secs_f64();
    check(
        7,
        "BoN reward hacking",
        drop >= 0.1 && rho > 0.5 && f(&base["kl_max"]) > 5.0,
        format!("baseline gold drop from max {drop:.3}; SMORM-F spearman(gold, log n) {rho:.3}; {secs:.1}s"),
    );
}

#[test]
fn c08_ppo_hacking() {
    let t = Instant::now();
    let dir = hacking_dir();
    std::thread::scope(|s| {
        s.spawn(|| {
            cli(
                dir,
                &[
                    "ppo",
                    "--config",
                    "c.toml",
                    "--out",
                    "ppo_base",
                    "--checkpoint",
                    "base/checkpoint.json",
                ],
            )
        });
        s.spawn(|| {
            cli(
                dir,
                &[
                    "ppo",
                    "--config",
                    "c.toml",
                    "--out",
                    "ppo_f",
                    "--checkpoint",
                    "smorm/checkpoint.json",
                ],
            )
        });
        s.spawn(|| {
            cli(
                dir,
                &[
                    "ppo",
                    "--config",
                    "c.toml",
                    "--out",
                    "ppo_m",
                    "--checkpoint",
                    "smorm/checkpoint.json",
                    "--strategy",
                    "M",
                ],
            )
        });
    });
    let v = |name: &str| json(&dir.join(name).join("ppo_verdict.json"));
    let (base, sf, sm) = (v("ppo_base"), v("ppo_f"), v("ppo_m"));
    let (gf, gm) = (f(&sf["gold_final"]), f(&sm["gold_final"]));
    let within = (gf - gm).abs() <= 0.1 * gm.abs();
    let verdicts = base["hacked"] == true && sf["hacked"] == false && sm["hacked"] == false;
    let secs = t.elapsed().as_secs_f64();
    check(
        8,
        "PPO reward hacking",
        verdicts && within,
        format!(
            "hacked: baseline {} (diverges at {}), SMORM-F {}, SMORM-M {}; final gold F {gf:.3} vs M {gm:.3} (ratio {:.2}); {secs:.1}s",
            base["hacked"],
            base["divergence_step"],
            sf["hacked"],
            sm["hacked"],
            gf / gm
        ),
    );
}

#[test]
fn c09_kl_formula() {
    let kl405 = kl_bon(405).unwrap();
    let expected = (405f64).ln() - 404.0 / 405.0;
    let values: Vec<f64> = (1..=1000).map(|n| kl_bon(n).unwrap()).collect();
    let increasing = values.windows(2).all(|w| w[1] > w[0]);
    check(
        9,
        "BoN KL formula",
        (kl405 - 5.0063581).abs() <= 1e-6 && increasing && kl405 == expected,
        format!("kl_bon(405) = {kl405:.9} (pinned 5.0063581 ± 1e-6, log n − (n−1)/n = {expected:.9}); strictly increasing on 1..1000: {increasing}"),
    );
}

#[test]
fn c10_win_rate_separation() {
    let t = Instant::now();
    let dir = hacking_dir();
    cli(
        dir,
        &[
            "ppo",
            "--config",
            "c.toml",
            "--out",
            "ppo_gold",
            "--strategy",
            "gold",
        ],
    );
    let w = f(&json(&dir.join("ppo_gold/ppo_verdict.json"))["win_rate_vs_initial"]);
    let secs = t.elapsed().as_secs_f64();
    check(
        10,
        "win-rate separation",
        w > 0.65,
        format!("gold-trained vs initial policy win rate {w:.3} on 500 prompts; {secs:.1}s"),
    );
}

const SMALL: &str = r#"
seed = 11
[data]
train_pairs = 200
train_attrs = 200
eval_pairs = 200
eval_attrs = 200
[train]
steps = 80
[bon]
prompts = 100
n_values = [1, 3, 9, 27]
[ppo]
prompts = 1600
window = 20
win_rate_prompts = 100
[verify]
eval_samples = 500
lemma_pairs = 500
fisher_samples = 20
[sweep]
values = [0.1, 1.0]
"#;

fn run_all(root: &Path) {
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(root.join("c.toml"), SMALL).unwrap();
    let c = ["--config", "c.toml"];
    let go = |args: &[&str]| cli(root, &[args, &c].concat());
    go(&["gen-data", "--out", "g"]);
    go(&["train", "--out", "t", "--data", "g"]);
    go(&[
        "verify",
        "--out",
        "v",
        "--data",
        "g",
        "--checkpoint",
        "t/checkpoint.json",
    ]);
    go(&["verify", "--out", "vp", "--data", "g"]);
    go(&["bon", "--out", "b", "--data", "g"]);
    go(&["ppo", "--out", "p", "--checkpoint", "t/checkpoint.json"]);
    go(&["sweep", "--out", "s", "--data", "g"]);
    go(&["report", "--out", "r", "--runs", "b", "p"]);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn c11_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::thread::scope(|s| {
        s.spawn(|| run_all(&a));
        s.spawn(|| run_all(&b));
    });
    let (ta, tb) = (tree(&a), tree(&b));
    let outputs: Vec<&PathBuf> = ta
        .keys()
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("csv" | "json" | "tsv" | "toml")
            )
        })
        .collect();
    let differing: Vec<String> = outputs
        .iter()
        .filter(|p| tb.get(**p) != ta.get(**p))
        .map(|p| p.display().to_string())
        .collect();
    let logs = ta
        .keys()
        .filter(|p| p.file_name().and_then(|n| n.to_str()) == Some(RUN_LOG))
        .count();
    check(
        11,
        "determinism",
        differing.is_empty() && ta.len() == tb.len() && logs == 8,
        format!(
            "{} output files over {logs} commands compared by hash, differing: {differing:?}",
            outputs.len()
        ),
    );
}

#[test]
fn c12_lambda_sweep_stability() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), HACKING).unwrap();
    cli(dir.path(), &["sweep", "--config", "c.toml", "--out", "s"]);
    let sweep = json(&dir.path().join("s/sweep.json"));
    let values: Vec<f64> = sweep["values"].as_array().unwrap().iter().map(f).collect();
    let acc: Vec<f64> = sweep["accuracy"]
        .as_array()
        .unwrap()
        .iter()
        .map(f)
        .collect();
    let inner: Vec<f64> = values
        .iter()
        .zip(&acc)
        .filter(|(v, _)| [0.1, 1.0].contains(*v))
        .map(|(_, a)| *a)
        .collect();
    let spread = inner.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - inner.iter().copied().fold(f64::INFINITY, f64::min);
    let inner_min = inner.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = f(&sweep["edge_tolerance"]);
    let expected_flag = values
        .iter()
        .zip(&acc)
        .any(|(v, a)| [0.01, 10.0].contains(v) && *a < inner_min - tol);
    let consistent =
        sweep["edge_degradation"] == expected_flag && f(&sweep["inner_spread"]) == spread;
    let secs = t.elapsed().as_secs_f64();
    check(
        12,
        "lambda sweep stability",
        values == [0.01, 0.1, 1.0, 10.0] && spread < 0.10 && consistent,
        format!("SMORM-F accuracy {acc:?} at λ {values:?}; inner spread {:.1} pp; edge degradation flagged: {} ({secs:.1}s)", spread * 100.0, sweep["edge_degradation"]),
    );
}
