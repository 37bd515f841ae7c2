use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
n_train = 64
n_dev = 24
n_test = 24
n_unseen = 24
epochs = 1
detector_epochs = 20
d_model = 16
n_heads = 2
n_layers = 1
";

fn ith(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ith"))
        .args(args)
        .env("ITH_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn gen_data_writes_every_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("data");
    let o = ith(&[
        "gen-data",
        "--config",
        &cfg,
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "train.jsonl",
        "dev.jsonl",
        "test.jsonl",
        "unseen.jsonl",
        "lexicon.jsonl",
        "config.toml",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("train.jsonl")).unwrap().lines().count(), 64);
    assert!(fs::read_to_string(out.join("config.toml"))
        .unwrap()
        .contains("seed = 3"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(code(&ith(&["gen-data", "--out", out, "--no-such-flag"])), 1);
    assert_eq!(code(&ith(&["frobnicate"])), 1);
    assert_eq!(code(&ith(&["--help"])), 0);
    let missing = tmp.path().join("nothing");
    let o = ith(&["eval", "--out", out, "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "d_model = \"wide\"").unwrap();
    assert_eq!(
        code(&ith(&["train", "--config", bad.to_str().unwrap(), "--out", out])),
        2
    );
}

#[test]
fn train_then_eval_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = ith(&["train", "--config", &cfg, "--seed", "1", "--out", run_s]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "model.ckpt",
        "model_config.json",
        "detector.ckpt",
        "vocab.txt",
        "loss_curve.csv",
        "metrics.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let ev = tmp.path().join("eval");
    let o = ith(&[
        "eval",
        "--checkpoint",
        run_s,
        "--seed",
        "1",
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv(&ev.join("eval.csv"));
    assert!(rows.len() >= 4);
    for r in &rows[1..] {
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert_eq!(
        fs::read_to_string(ev.join("records_test.jsonl"))
            .unwrap()
            .lines()
            .count(),
        24
    );

    let line = fs::read_to_string(run.join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let words: Vec<&str> = first["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_str().unwrap())
        .collect();
    let text = words
        .iter()
        .filter(|w| **w != "[CLS]")
        .copied()
        .collect::<Vec<_>>()
        .join(" ");

    let gate = tmp.path().join("gate");
    let o = ith(&[
        "trace-gate",
        "--checkpoint",
        run_s,
        "--text",
        &text,
        "--out",
        gate.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv(&gate.join("gate_trace.csv")).len(), words.len() + 1);

    let audio = tmp.path().join("audio");
    let o = ith(&[
        "trace-audio",
        "--checkpoint",
        run_s,
        "--text",
        &text,
        "--out",
        audio.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trials = csv(&audio.join("trials.csv"));
    assert!(trials.len() > 1);
    assert!(audio.join("span_0.wav").is_file() || trials[1..].iter().all(|r| r[6] == "ignored"));
}

#[test]
fn ablate_writes_grid_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = ith(&[
        "ablate",
        "--config",
        &cfg,
        "--seeds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let grid = csv(&out.join("ablation.csv"));
    assert_eq!(
        grid[0].join(","),
        "variant,split,mean_accuracy,std_accuracy,n_seeds,n_failed"
    );
    let mut splits: Vec<&str> = grid[1..].iter().map(|r| r[1].as_str()).collect();
    splits.sort();
    splits.dedup();
    assert_eq!(grid.len() - 1, 5 * splits.len());
    for r in &grid[1..] {
        assert_eq!(r[4], "3");
    }

    let sweep = csv(&out.join("sweep.csv"));
    assert_eq!(
        sweep[0].join(","),
        "seed,tau,max_trials,split,accuracy,retention,rejected_after_n"
    );
    let mean: Vec<&Vec<String>> = sweep[1..].iter().filter(|r| r[0] == "mean").collect();
    assert_eq!(mean.len(), 9 * 3);
    let base_n = mean.iter().find(|r| r[1] == "-1").unwrap()[2].clone();
    for split in ["dev", "test", "unseen"] {
        let mut by_tau: Vec<(f64, f64, f64)> = mean
            .iter()
            .filter(|r| r[3] == split && r[2] == base_n)
            .map(|r| (r[1].parse().unwrap(), r[5].parse().unwrap(), r[6].parse().unwrap()))
            .collect();
        by_tau.sort_by(|a, b| a.0.total_cmp(&b.0));
        // nothing is rejected with rejection off; unresolvable spans are ignored either way
        assert_eq!((by_tau[0].0, by_tau[0].2), (-1.0, 0.0));
        assert!(
            by_tau.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12),
            "{split}: {by_tau:?}"
        );
        assert!(by_tau.iter().all(|t| t.1 + t.2 <= 1.0 + 1e-12));
    }
    assert!(out.join("tuned_tau.txt").is_file());
}
