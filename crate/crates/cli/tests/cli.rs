use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regressformer::model::load_checkpoint;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_regressformer"));
    c.env_remove("REGRESSFORMER_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two records the tiny model can memorize. Runs end on a property phase.
const PAIR: &str = "{\"tokens\": [\"A\", \"B\", \"A\", \"C\"], \"props\": {\"y\": 0.25}}\n\
                    {\"tokens\": [\"C\", \"C\", \"B\", \"A\", \"B\"], \"props\": {\"y\": 0.75}}\n";

fn tiny_config(dir: &Path, data: &Path, steps: u64, extra: &str) -> PathBuf {
    let text = format!(
        "run_id = \"tiny\"\noutput_dir = {out:?}\n\
         [data]\ntrain = {data:?}\ntest = {data:?}\ndecimals = 2\n\
         [model]\nn_layers = 1\nd_e = 16\nd_ff = 32\nn_heads = 2\nmax_len = 32\n\
         [model.encoding]\nne_dim = 8\n\
         [trainer]\nsteps = {steps}\nbatch_size = 2\nalternation_period = 5\n{extra}\n\
         [trainer.optimizer]\nlr = 0.003\n",
        out = dir.join("runs"),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn pair_file(dir: &Path) -> PathBuf {
    let path = dir.join("pair.jsonl");
    fs::write(&path, PAIR).unwrap();
    path
}

#[test]
fn missing_config_exits_2() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[trainer]\nsteps = 1\nwarmup_steps = 3\n").unwrap();
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warmup_steps"), "{}", stderr(&o));
}

#[test]
fn unknown_protocol_exits_2() {
    let o = run(&["evaluate", "--protocol", "telepathy"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_numeral_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    fs::write(&input, "<y>0.5|A B\n<y>0.x5|A B\n").unwrap();
    let o = run(&["tokenize", "--in", p(&input), "--vocab", p(&dir.path().join("v.json"))]);
    assert!(!o.status.success());
    assert_ne!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn tokenize_round_trips_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    let lines = "<qed>0.297|CC(C)Cc1ccc(cc1)[C@@H](C)C(=O)O\n<qed>0.510|c1ccccc1\n";
    fs::write(&input, lines).unwrap();
    let vocab = dir.path().join("vocab.json");
    let ids = dir.path().join("ids.txt");
    let o = run(&["tokenize", "--in", p(&input), "--vocab", p(&vocab), "--out", p(&ids)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(&ids).unwrap();
    let vocab_text = fs::read_to_string(&vocab).unwrap();

    // a second pass reuses the vocabulary and yields the same ids
    let again = dir.path().join("ids2.txt");
    assert!(run(&["tokenize", "--in", p(&input), "--vocab", p(&vocab), "--out", p(&again)]).status.success());
    assert_eq!(fs::read_to_string(&again).unwrap(), first);
    assert_eq!(fs::read_to_string(&vocab).unwrap(), vocab_text);

    let back = dir.path().join("back.txt");
    let o = run(&["tokenize", "--decode", "--in", p(&ids), "--vocab", p(&vocab), "--out", p(&back)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&back).unwrap(), lines);
}

#[test]
fn train_resume_and_memorize() {
    let dir = tempfile::tempdir().unwrap();
    let data = pair_file(dir.path());
    let cfg = tiny_config(dir.path(), &data, 405, "checkpoint_every = 200");
    let o = run(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("runs/tiny");
    for f in ["config.toml", "vocab.json", "train.jsonl", "step_200.ckpt", "final.ckpt", "report.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 405);

    // resuming from the midpoint reproduces the uninterrupted run
    let resumed = dir.path().join("resumed");
    let o = run(&[
        "train",
        "--config",
        p(&cfg),
        "--resume",
        p(&run_dir.join("step_200.ckpt")),
        "--output-dir",
        p(&resumed),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(resumed.join("tiny/report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 405);
    let resumed_log = fs::read_to_string(resumed.join("tiny/train.jsonl")).unwrap();
    assert_eq!(resumed_log.lines().count(), 205);
    let first: Value = serde_json::from_str(resumed_log.lines().next().unwrap()).unwrap();
    let full_201: Value = serde_json::from_str(log.lines().nth(200).unwrap()).unwrap();
    assert_eq!(first, full_201);
    let a = load_checkpoint(run_dir.join("final.ckpt")).unwrap();
    let b = load_checkpoint(resumed.join("tiny/final.ckpt")).unwrap();
    assert_eq!((a.step, &a.params), (b.step, &b.params));

    // the model has memorized both records
    let out = dir.path().join("reg.json");
    let csv = dir.path().join("reg.csv");
    let ckpt = run_dir.join("final.ckpt");
    let o = run(&[
        "evaluate",
        "--protocol",
        "regression",
        "--ckpt",
        p(&ckpt),
        "--in",
        p(&data),
        "--out",
        p(&out),
        "--csv",
        p(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(rep["metrics"]["rmse"].as_f64().unwrap() < 0.02, "{rep}");
    assert_eq!(rep["provenance"]["checkpoint_step"], 405);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let preds = dir.path().join("pred.jsonl");
    let o = run(&["predict", "--ckpt", p(&ckpt), "--in", p(&data), "--out", p(&preds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for line in fs::read_to_string(&preds).unwrap().lines() {
        let row: Value = serde_json::from_str(line).unwrap();
        assert!((row["value"].as_f64().unwrap() - row["gold"].as_f64().unwrap()).abs() < 0.02, "{row}");
    }

    // generation keeps the primer and the record count
    let gen = dir.path().join("gen.jsonl");
    let o = run(&["generate", "--ckpt", p(&ckpt), "--in", p(&data), "--primer", "y=0.6", "--beam", "2", "--out", p(&gen)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<Value> = fs::read_to_string(&gen).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        for s in r["sequences"].as_array().unwrap() {
            assert!(s["line"].as_str().unwrap().starts_with("<y>0.60|"), "{s}");
        }
    }

    // sweep emits one row per primer and seed
    let sweep_cfg = dir.path().join("sweep.toml");
    fs::write(&sweep_cfg, "[eval.sweep]\nn_primers = 4\n").unwrap();
    let sweep_csv = dir.path().join("sweep.csv");
    let o = run(&[
        "evaluate",
        "--protocol",
        "sweep",
        "--ckpt",
        p(&ckpt),
        "--config",
        p(&sweep_cfg),
        "--in",
        p(&data),
        "--train",
        p(&data),
        "--csv",
        p(&sweep_csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&sweep_csv).unwrap().lines().count(), 1 + 2 * 4);
}

fn trained_seed(dir: &Path, env: Option<&str>, flag: Option<&str>) -> Output {
    let data = pair_file(dir);
    let cfg = tiny_config(dir, &data, 2, "");
    let mut c = bin();
    c.args(["train", "--config", p(&cfg)]);
    if let Some(s) = flag {
        c.args(["--seed", s]);
    }
    if let Some(s) = env {
        c.env("REGRESSFORMER_SEED", s);
    }
    c.output().unwrap()
}

fn resolved_seed(dir: &Path) -> u64 {
    let text = fs::read_to_string(dir.join("runs/tiny/config.toml")).unwrap();
    let cfg = regressformer::config::RunConfig::from_toml(&text).unwrap();
    cfg.trainer.seed
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    assert!(trained_seed(dir.path(), Some("7"), None).status.success());
    assert_eq!(resolved_seed(dir.path()), 7);
    assert!(trained_seed(dir.path(), Some("7"), Some("3")).status.success());
    assert_eq!(resolved_seed(dir.path()), 3);
    assert!(trained_seed(dir.path(), None, None).status.success());
    assert_eq!(resolved_seed(dir.path()), 0);
    assert_eq!(trained_seed(dir.path(), Some("seven"), None).status.code(), Some(2));
}

#[test]
fn knn_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = pair_file(dir.path());
    let o = run(&["evaluate", "--protocol", "knn", "--in", p(&data), "--train", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rep["protocol"], "knn");
    assert_eq!(rep["metrics"]["n"], 2);
    let o = run(&["evaluate", "--protocol", "regression", "--in", p(&data)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
