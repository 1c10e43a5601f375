use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smorm_lab::config::RunConfig;

const SMALL: &str = r#"
seed = 3
[data]
train_pairs = 200
train_attrs = 200
eval_pairs = 200
eval_attrs = 200
[train]
steps = 60
[bon]
prompts = 100
n_values = [1, 2, 5, 9]
[ppo]
prompts = 1600
window = 20
win_rate_prompts = 100
[verify]
eval_samples = 500
lemma_pairs = 500
fisher_samples = 20
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smorm-lab"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("c.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr)
        .unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&o.stderr)))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_round_trips_through_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let g = tmp.path().join("g");
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&g)])
        .status
        .success());
    let t1 = tmp.path().join("t1");
    let t2 = tmp.path().join("t2");
    assert!(run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&t1),
        "--data",
        s(&g)
    ])
    .status
    .success());
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&t2)])
        .status
        .success());
    // Data read back from disk trains the same model as data drawn in memory.
    for f in ["checkpoint.json", "history.csv", "eval.json"] {
        assert_eq!(
            std::fs::read(t1.join(f)).unwrap(),
            std::fs::read(t2.join(f)).unwrap(),
            "{f}"
        );
    }
    let history = std::fs::read_to_string(t1.join("history.csv")).unwrap();
    assert_eq!(
        history.lines().next().unwrap(),
        "step,bt_loss,mse_loss,total"
    );
    assert_eq!(history.lines().count(), 61);
    let resolved = RunConfig::load(&t1.join("config.resolved.toml")).unwrap();
    assert_eq!(resolved, RunConfig::from_toml(SMALL).unwrap());
}

#[test]
fn zero_records_give_header_only_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[data]\ntrain_pairs = 0\ntrain_attrs = 0\neval_pairs = 0\neval_attrs = 0\n",
    );
    let g = tmp.path().join("g");
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&g)])
        .status
        .success());
    for f in ["train.pairs.tsv", "train.attrs.tsv", "ood_eval.pairs.tsv"] {
        let text = std::fs::read_to_string(g.join(f)).unwrap();
        assert!(
            text.lines().all(|l| l.starts_with('#')) && !text.is_empty(),
            "{f}: {text}"
        );
    }
}

#[test]
fn unknown_key_is_a_config_error_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nstepz = 10\n");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("stepz"), "{e}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["launch", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--out", s(&out), "--mode", "nonsense"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["train", "--out", s(&out), "--config", "/nonexistent.toml"])
            .status
            .code(),
        Some(2)
    );
    // Output path under a regular file cannot be created: a runtime failure.
    let file = tmp.path().join("file");
    std::fs::write(&file, "x").unwrap();
    let o = run(&["gen-data", "--out", s(&file.join("sub"))]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"], "runtime");
}

#[test]
fn missing_attribute_file_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let g = tmp.path().join("g");
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&g)])
        .status
        .success());
    std::fs::remove_file(g.join("train.attrs.tsv")).unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("t")),
        "--data",
        s(&g),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("train.attrs.tsv"));
    // Pairwise-only training does not need it.
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("t")),
        "--data",
        s(&g),
        "--mode",
        "single_only",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn mismatched_data_header_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g");
    let cfg = write_config(
        tmp.path(),
        "[world]\nkind = \"zero_alignment\"\n[data]\ntrain_pairs = 10\n",
    );
    assert!(run(&["gen-data", "--config", s(&cfg), "--out", s(&g)])
        .status
        .success());
    let o = run(&["train", "--out", s(&tmp.path().join("t")), "--data", s(&g)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"].as_str().unwrap().contains("d_z"));
}

#[test]
fn too_few_mse_comparison_seeds_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[verify]\nmse_comparison_seeds = 1\n");
    let o = run(&[
        "verify",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("v")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("at least 10"));
}

#[test]
fn verify_writes_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let v = tmp.path().join("v");
    let o = run(&["verify", "--config", s(&cfg), "--out", s(&v)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t1 = json(&v.join("coupling_bound.json"));
    assert_eq!(t1["source"], "population");
    assert_eq!(t1["population"]["proof"]["violations"], 0);
    assert_eq!(json(&v.join("pairwise_error.json"))["violations_single"], 0);
    assert_eq!(json(&v.join("fisher.json"))["psd"], true);

    // A pairwise-only checkpoint has no attribute head: the bound degenerates.
    let t = tmp.path().join("t");
    assert!(run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&t),
        "--mode",
        "single_only"
    ])
    .status
    .success());
    let v2 = tmp.path().join("v2");
    let ck = t.join("checkpoint.json");
    assert!(run(&[
        "verify",
        "--config",
        s(&cfg),
        "--out",
        s(&v2),
        "--checkpoint",
        s(&ck)
    ])
    .status
    .success());
    let t1 = json(&v2.join("coupling_bound.json"));
    assert_eq!(t1["attribute_head_trained"], false);
    assert_eq!(t1["c"], 0.0);
    assert_eq!(t1["population"]["violations"], 0);
}

#[test]
fn single_pool_size_gives_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{SMALL}\n").replace("n_values = [1, 2, 5, 9]", "n_values = [1]"),
    );
    let b = tmp.path().join("b");
    let o = run(&["bon", "--config", s(&cfg), "--out", s(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(b.join("bon.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let v = json(&b.join("bon_verdict.json"));
    assert_eq!(v["spearman_gold_log_n"], serde_json::Value::Null);
    assert_eq!(v["kl_max"], 0.0);
}

#[test]
fn invalid_pool_size_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &SMALL.replace("n_values = [1, 2, 5, 9]", "n_values = [0, 2]"),
    );
    let o = run(&[
        "bon",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("b")),
        "--strategy",
        "gold",
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn ensemble_without_members_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let o = run(&[
        "bon",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("b")),
        "--strategy",
        "ensemble_mean",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn short_ppo_run_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("window = 20", "window = 50"));
    let o = run(&[
        "ppo",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("p")),
        "--strategy",
        "gold",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_point_matches_plain_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}[sweep]\nvalues = [1.0]\n"));
    let sw = tmp.path().join("s");
    let t = tmp.path().join("t");
    assert!(run(&["sweep", "--config", s(&cfg), "--out", s(&sw)])
        .status
        .success());
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&t)])
        .status
        .success());
    assert_eq!(
        std::fs::read(sw.join("points/00/eval.json")).unwrap(),
        std::fs::read(t.join("eval.json")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(sw.join("sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn default_sweep_grid_has_four_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let sw = tmp.path().join("s");
    assert!(run(&["sweep", "--config", s(&cfg), "--out", s(&sw)])
        .status
        .success());
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report = json(&sw.join("sweep.json"));
    assert_eq!(report["inner_values"].as_array().unwrap().len(), 2);
    assert_eq!(report["edges"].as_array().unwrap().len(), 2);
}

#[test]
fn empty_sweep_grid_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\nvalues = []\n");
    assert_eq!(
        run(&[
            "sweep",
            "--config",
            s(&cfg),
            "--out",
            s(&tmp.path().join("s"))
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn report_merges_and_normalizes_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let b = tmp.path().join("b");
    let p = tmp.path().join("p");
    assert!(run(&[
        "bon",
        "--config",
        s(&cfg),
        "--out",
        s(&b),
        "--strategy",
        "gold"
    ])
    .status
    .success());
    let o = run(&[
        "ppo",
        "--config",
        s(&cfg),
        "--out",
        s(&p),
        "--strategy",
        "gold",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = tmp.path().join("r");
    assert!(run(&["report", "--out", s(&r), "--runs", s(&b), s(&p)])
        .status
        .success());
    let mut rdr = csv::Reader::from_path(r.join("report.csv")).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        ["run_id", "curve", "x", "kl", "series", "value"]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    for run_id in ["b", "p"] {
        let first = rows.iter().find(|r| &r[0] == run_id).unwrap();
        assert_eq!(
            first[5].parse::<f64>().unwrap(),
            0.0,
            "series start at zero after normalization"
        );
    }
    // The gold proxy and gold series coincide.
    let finals = &json(&r.join("report.json"))["runs"][1]["final_normalized"]["ppo"];
    assert_eq!(finals["gold"], finals["proxy"]);
    assert!(finals["gold"].as_f64().unwrap() > 0.0);

    let o = run(&[
        "report",
        "--out",
        s(&tmp.path().join("r2")),
        "--runs",
        s(&tmp.path().join("nothing")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
