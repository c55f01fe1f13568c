use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moex::chess::SyntheticCorpus;
use moex::interp::{read_activations, write_activations, ActivationDataset, ActivationRow, Split};

const TINY_MOE: &str = r#"
[model]
n_layer = 2
n_head = 2
d_model = 32
ctx_len = 96

[model.mlp]
kind = "moe"
experts = 4
k = 2
expert_hidden = 32
width = 32
router = "sparsity_aware"
activation = "relu"
balance_lambda = 0.01
sigma_mode = "std_dev"
detach_router_stats = false

[train]
max_iters = 12
warmup_iters = 2
batch_size = 2
eval_interval = 5
eval_batches = 1
checkpoint_interval = 0
init_lr = 0.003
min_lr = 0.0003
"#;

fn moex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moex"))
        .args(args)
        .env_remove("MOEX_SEED")
        .output()
        .expect("spawn moex")
}

fn ok(args: &[&str]) -> String {
    let o = moex(args);
    assert!(
        o.status.success(),
        "moex {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated games ingested into `<dir>/data`.
fn corpus(dir: &Path, games: usize) -> PathBuf {
    let txt = dir.join("games.txt");
    let data = dir.join("data");
    ok(&["gen-corpus", "--out", s(&txt), "--games", &games.to_string(), "--seed", "3"]);
    ok(&["ingest", "--pgn", s(&txt), "--out", s(&data), "--val-fraction", "0.25"]);
    data
}

fn train_tiny(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY_MOE).unwrap();
    let out = dir.join(name);
    ok(&["train", "--config", s(&cfg), "--data", s(data), "--out", s(&out)]);
    out
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(moex(&["--help"]).status.code(), Some(0));
    assert_eq!(moex(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(moex(&[]).status.code(), Some(1));
    let missing = dir.path().join("absent.pgn");
    let o = moex(&["ingest", "--pgn", s(&missing), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.pgn"));
    let bad = dir.path().join("bad.pgn");
    std::fs::write(&bad, "1. e4 e5 2. Ke3\n").unwrap();
    let o = moex(&["ingest", "--pgn", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("game 1"));
    // invalid config is rejected before any data is touched
    let o = moex(&["train", "--data", s(&dir.path().join("nothing")), "--set", "model.dropout=0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ingest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let da = corpus(dir.path(), 20);
    let db = dir.path().join("again");
    ok(&["ingest", "--pgn", s(&dir.path().join("games.txt")), "--out", s(&db), "--val-fraction", "0.25"]);
    for f in ["tokens.bin", "alignment.bin", "split.json"] {
        assert_eq!(std::fs::read(da.join(f)).unwrap(), std::fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_environment_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, seed: &str, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_moex"));
        c.args(["gen-corpus", "--games", "5", "--seed", seed, "--out", s(&dir.path().join(out))]);
        match env {
            Some(v) => c.env("MOEX_SEED", v),
            None => c.env_remove("MOEX_SEED"),
        };
        assert!(c.status().unwrap().success());
        std::fs::read_to_string(dir.path().join(out)).unwrap()
    };
    assert_eq!(run("a", "1", Some("9")), run("b", "9", None));
    assert_ne!(run("c", "1", None), run("d", "9", None));
}

#[test]
fn train_writes_logs_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 16);
    let out = train_tiny(dir.path(), &data, "run");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss_lm,loss_balance,loss_val");
    assert_eq!(lines.len(), 13);
    // validation loss at iterations 5, 10 and the last
    let with_val: Vec<&str> = lines[1..].iter().filter(|l| !l.ends_with(',')).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(with_val, ["4", "9", "11"]);
    let routing = std::fs::read_to_string(out.join("routing.csv")).unwrap();
    assert_eq!(routing.lines().count(), 1 + 12 * 2);
    assert!(out.join("gate_scatter.csv").is_file());
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["provenance"]["command"], "train");
    assert_eq!(run["provenance"]["input_hash"].as_str().unwrap().len(), 64);

    let ckpt = out.join("final.ckpt");
    ok(&["train", "--resume", s(&ckpt), "--data", s(&data), "--out", s(&out), "--max-iters", "15"]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let iters: Vec<u64> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(iters, (0..15).collect::<Vec<_>>());
}

#[test]
fn upcycle_checks_trunk_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 8);
    let dense = dir.path().join("dense");
    let dense_set = [
        "train", "--data", s(&data), "--out", s(&dense),
        "--set", "model.n_layer=2", "--set", "model.n_head=2", "--set", "model.d_model=32", "--set", "model.ctx_len=96",
        "--set", "model.mlp={kind=\"dense\", hidden_mult=1.0, activation=\"relu\"}",
        "--max-iters", "3", "--warmup-iters", "1", "--batch-size", "2", "--set", "train.eval_interval=0",
    ];
    ok(&dense_set);
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_MOE).unwrap();
    let ckpt = dense.join("final.ckpt");
    ok(&["train", "--config", s(&cfg), "--upcycle", s(&ckpt), "--data", s(&data), "--out", s(&dir.path().join("up")), "--max-iters", "3"]);
    let o = moex(&[
        "train", "--config", s(&cfg), "--upcycle", s(&ckpt), "--data", s(&data),
        "--out", s(&dir.path().join("up2")), "--set", "model.d_model=64", "--set", "model.mlp.width=64",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("d_model") && err.contains("32") && err.contains("64"), "{err}");
}

#[test]
fn harvest_rows_match_alignment_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 12);
    let out = train_tiny(dir.path(), &data, "run");
    let ckpt = out.join("final.ckpt");
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for p in [&a, &b] {
        ok(&["harvest", "--ckpt", s(&ckpt), "--data", s(&data), "--layer", "1", "--split", "all", "--out", s(p), "--batch-games", "5"]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let ds = read_activations(&a).unwrap();
    let corpus = moex::data::Corpus::read_dir(&data).unwrap();
    let expected: usize = (0..12u32)
        .map(|g| corpus.game_alignment(g).iter().filter(|(p, _)| *p < 96).count())
        .sum();
    assert_eq!(ds.rows(), expected);
    assert_eq!(ds.width(), 4 * 32);
    assert!(ds.positions().iter().all(|&p| p < 96));
    assert!(ds.splits().contains(&Split::Test) && ds.splits().contains(&Split::Train));

    let o = moex(&["harvest", "--ckpt", s(&ckpt), "--data", s(&data), "--layer", "2", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("layer 2"));
}

#[test]
fn interp_scores_indicator_features_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let games = SyntheticCorpus { games: 40, seed: 5, ..Default::default() }.generate();
    let corpus = moex::data::ingest(&games.join("\n"), None, 0.0, 0).unwrap();
    let rows: Vec<ActivationRow> = corpus
        .alignment
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut f = vec![0.0f32; 768];
            for b in r.bsp.ones() {
                f[b] = 1.0;
            }
            ActivationRow { game: r.game, position: i as u32, split: Split::Train, label: r.bsp, features: f }
        })
        .collect();
    let mut ds = ActivationDataset::from_rows(768, rows).unwrap();
    ds.assign_split_by_game(0.25, 1);
    let acts = dir.path().join("acts.bin");
    write_activations(&ds, &acts).unwrap();
    let out = dir.path().join("interp.json");
    let stdout = ok(&["interp", "--activations", s(&acts), "--out", s(&out)]);
    assert!(stdout.contains("coverage 1.000"), "{stdout}");
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep["coverage"]["mean"], 1.0);
    assert!(rep["reconstruction"]["mean"].as_f64().unwrap() > 0.95);
    assert!(rep["shuffled_coverage"].as_f64().unwrap() < 1.0);
    let csv = std::fs::read_to_string(dir.path().join("interp.csv")).unwrap();
    assert_eq!(csv.lines().count(), 769);
}

#[test]
fn report_merges_runs_and_lists_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), 10);
    let r1 = train_tiny(dir.path(), &data, "r1");
    let r2 = train_tiny(dir.path(), &data, "r2");
    let rep = dir.path().join("rep");
    ok(&["report", "--runs", s(&r1), s(&r2), "--out", s(&rep)]);
    let merged = std::fs::read_to_string(rep.join("metrics.csv")).unwrap();
    assert_eq!(merged.lines().next().unwrap(), "run,iter,lr,loss_lm,loss_balance,loss_val");
    assert_eq!(merged.lines().count(), 1 + 2 * 12);
    assert!(merged.lines().nth(13).unwrap().starts_with("r2,"));
    for f in ["coverage_vs_size.csv", "coverage_vs_l0.csv", "gate_scatter.csv", "report.json"] {
        assert!(rep.join(f).is_file(), "{f}");
    }

    let o = moex(&["report", "--runs", s(&r1), s(&dir.path().join("ghost")), s(&dir.path().join("phantom")), "--out", s(&rep)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ghost") && err.contains("phantom"), "{err}");
}
