//! Command implementations. Each returns its main product so tests can
//! drive the pipeline without a subprocess.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{load_run_config, load_run_config_over, seed_from_env, RunConfig, RunSection};
use super::{BenchArgs, GenCorpusArgs, HarvestArgs, IngestArgs, InterpArgs, ReportArgs, TrainArgs};
use crate::chess::SyntheticCorpus;
use crate::data::{self, content_hash, hash_files, Corpus, CorpusSplit};
use crate::error::{Error, Result};
use crate::interp::{self, ActivationDataset, ActivationRow, InterpReport, Split};
use crate::moe::bench::{self, BenchResult, CostFit};
use crate::moe::RouterKind;
use crate::numerics::Tape;
use crate::training::{eval_loss, load_checkpoint, save_checkpoint, upcycle_from_dense, TrainConfig, Trainer};
use crate::transformer::{harvest_hidden, ForwardOptions, Model, ModelConfig};

pub const METRICS_HEADER: &str = "iter,lr,loss_lm,loss_balance,loss_val";
pub const ROUTING_HEADER: &str = "iter,layer,mean_l0,fraction_std";
pub const BENCH_HEADER: &str = "router,N,M,D,d,mean_ms,std_ms";
pub const SCATTER_HEADER: &str = "token_id,expert,score,l0";

/// Embedded in every output: what produced it, with which settings, from
/// which inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config: serde_json::Value,
    pub input_hash: String,
}

impl Provenance {
    fn new(command: &str, config: impl Serialize, input_hash: String) -> Result<Self> {
        Ok(Self {
            tool: format!("moex {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            input_hash,
        })
    }
}

fn seed_or(arg: u64) -> Result<u64> {
    Ok(seed_from_env()?.unwrap_or(arg))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// `path` with `suffix` appended to the full file name.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    if a.min_plies > a.max_plies || !(0.0..=1.0).contains(&a.capture_bias) {
        return Err(Error::Config("need min_plies <= max_plies and capture_bias in [0, 1]".into()));
    }
    let corpus = SyntheticCorpus {
        games: a.games,
        min_plies: a.min_plies,
        max_plies: a.max_plies,
        capture_bias: a.capture_bias,
        seed: seed_or(a.seed)?,
        ..Default::default()
    };
    let mut text = corpus.generate().join("\n");
    text.push('\n');
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, &text)?;
    let config = serde_json::json!({
        "games": corpus.games,
        "min_plies": corpus.min_plies,
        "max_plies": corpus.max_plies,
        "max_chars": corpus.max_chars,
        "capture_bias": corpus.capture_bias,
        "seed": corpus.seed,
    });
    let prov = Provenance::new("gen-corpus", config, content_hash(b""))?;
    write_json(&sidecar(&a.out, ".json"), &serde_json::json!({ "provenance": prov, "output_hash": content_hash(text.as_bytes()) }))?;
    println!("wrote {} games to {}", corpus.games, a.out.display());
    Ok(())
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let text = read_text(&a.pgn)?;
    let seed = seed_or(a.seed)?;
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", a.val_fraction)));
    }
    let corpus = data::ingest(&text, a.max_games, a.val_fraction, seed)
        .map_err(|e| Error::Data(format!("{}: {e}", a.pgn.display())))?;
    let config = serde_json::json!({
        "pgn": a.pgn,
        "max_games": a.max_games,
        "val_fraction": a.val_fraction,
        "seed": seed,
    });
    let prov = Provenance::new("ingest", config, content_hash(text.as_bytes()))?;
    corpus.write_dir(&a.out, &serde_json::to_value(&prov)?)?;
    println!(
        "ingested {} games, {} tokens, {} plies ({} train / {} val games) into {}",
        corpus.split.games.len(),
        corpus.tokens.len(),
        corpus.alignment.len(),
        corpus.split.train.len(),
        corpus.split.val.len(),
        a.out.display()
    );
    Ok(())
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    [data::TOKENS_FILE, data::ALIGNMENT_FILE, data::SPLIT_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub provenance: Provenance,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub iters: u64,
    pub last_loss_lm: f64,
    pub last_val: Option<f64>,
}

fn train_overrides(a: &TrainArgs) -> Vec<String> {
    let mut o = a.overrides.clone();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push(format!("{k}={v}"));
        }
    };
    let q = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("{:?}", p.display().to_string()));
    push("run.data", q(&a.data));
    push("run.out", q(&a.out));
    push("train.init_lr", a.init_lr.map(|v| format!("{v:?}")));
    push("train.min_lr", a.min_lr.map(|v| format!("{v:?}")));
    push("train.warmup_iters", a.warmup_iters.map(|v| v.to_string()));
    push("train.max_iters", a.max_iters.map(|v| v.to_string()));
    push("train.batch_size", a.batch_size.map(|v| v.to_string()));
    push("train.grad_clip", a.grad_clip.map(|v| format!("{v:?}")));
    push("train.balance_lambda", a.balance_lambda.map(|v| format!("{v:?}")));
    push("train.seed", a.seed.map(|v| v.to_string()));
    o
}

/// The non-MLP architecture must agree for weights to transfer.
fn check_same_trunk(src: &ModelConfig, dst: &ModelConfig) -> Result<()> {
    let pairs = [
        ("n_layer", src.n_layer, dst.n_layer),
        ("n_head", src.n_head, dst.n_head),
        ("d_model", src.d_model, dst.d_model),
        ("vocab_size", src.vocab_size, dst.vocab_size),
        ("ctx_len", src.ctx_len, dst.ctx_len),
    ];
    for (name, a, b) in pairs {
        if a != b {
            return Err(Error::Config(format!("dense checkpoint has {name} = {a}, config has {b}")));
        }
    }
    Ok(())
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    if append && path.exists() {
        let first = read_text(path)?.lines().next().unwrap_or_default().to_string();
        if first != header {
            return Err(Error::format(path, format!("existing log header '{first}' differs from '{header}'")));
        }
        return Ok(BufWriter::new(std::fs::OpenOptions::new().append(true).open(path)?));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    Ok(w)
}

pub fn train(a: &TrainArgs) -> Result<TrainSummary> {
    // a resumed run starts from the checkpoint's settings; flags still apply
    let resumed = a.resume.as_deref().map(load_checkpoint::<f32>).transpose()?;
    let cfg = match &resumed {
        Some(ck) => {
            let base = RunConfig {
                model: ck.model.config.clone(),
                train: ck.train.clone(),
                run: RunSection { data: "data".into(), out: "run".into() },
            };
            let cfg = load_run_config_over(base, a.config.as_deref(), &train_overrides(a))?;
            if cfg.model != ck.model.config {
                return Err(Error::Config("the model configuration cannot change on resume".into()));
            }
            cfg
        }
        None => load_run_config(a.config.as_deref(), &train_overrides(a))?,
    };
    if a.resume.is_none() && a.upcycle.is_some() && cfg.model.moe().is_none() {
        return Err(Error::Config("upcycling needs model.mlp.kind = \"moe\"".into()));
    }
    let corpus = Corpus::read_dir(&cfg.run.data)?;
    if corpus.vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary has {} symbols but model.vocab_size = {}",
            corpus.vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let mut inputs = data_files(&cfg.run.data);
    inputs.extend(a.resume.iter().chain(&a.upcycle).cloned());
    let input_hash = hash_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;

    let mut trainer = if let Some(mut ck) = resumed {
        ck.train = cfg.train.clone();
        Trainer::from_checkpoint(ck)?
    } else if let Some(path) = &a.upcycle {
        let dense = load_checkpoint::<f32>(path)?.model;
        check_same_trunk(&dense.config, &cfg.model)?;
        let moe = cfg.model.moe().expect("checked above").clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        Trainer::new(upcycle_from_dense(&dense, moe, &mut rng)?, cfg.train.clone())?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        Trainer::new(Model::<f32>::init(cfg.model.clone(), &mut rng)?, cfg.train.clone())?
    };
    if trainer.model.config.vocab_size < corpus.vocab.len() {
        return Err(Error::Config("checkpoint vocabulary is smaller than the corpus".into()));
    }

    let out = cfg.run.out.clone();
    std::fs::create_dir_all(&out)?;
    let record = RunRecord {
        provenance: Provenance::new(
            "train",
            serde_json::json!({ "run": cfg.run, "resume": a.resume, "upcycle": a.upcycle }),
            input_hash,
        )?,
        model: trainer.model.config.clone(),
        train: trainer.cfg.clone(),
    };
    write_json(&out.join("run.json"), &record)?;

    let train_stream = corpus.stream(CorpusSplit::Train);
    let val_stream = corpus.stream(CorpusSplit::Val);
    let append = a.resume.is_some();
    let mut metrics = open_log(&out.join("metrics.csv"), METRICS_HEADER, append)?;
    let is_moe = trainer.model.config.moe().is_some();
    let mut routing = if is_moe {
        Some(open_log(&out.join("routing.csv"), ROUTING_HEADER, append)?)
    } else {
        None
    };
    let experts = trainer.model.config.moe().map_or(0, |m| m.experts);

    let max = trainer.cfg.max_iters;
    let eval_every = trainer.cfg.eval_interval;
    let ckpt_every = trainer.cfg.checkpoint_interval;
    let mut last_loss = f64::NAN;
    let mut last_val = None;
    while trainer.iter < max {
        let r = trainer.step(&train_stream)?;
        let done = trainer.iter;
        last_loss = r.loss_lm;
        let val = if eval_every > 0 && (done % eval_every == 0 || done == max) && val_stream.len() >= 2 {
            Some(eval_loss(&trainer.model, &val_stream, trainer.cfg.eval_batches)?)
        } else {
            None
        };
        if val.is_some() {
            last_val = val;
        }
        writeln!(
            metrics,
            "{},{},{},{},{}",
            r.iter,
            r.lr,
            r.loss_lm,
            r.loss_balance,
            val.map_or(String::new(), |v| v.to_string())
        )?;
        if let Some(w) = routing.as_mut() {
            for (stats, frac) in r.routing.iter().zip(r.expert_fractions(experts)) {
                let l0: Vec<usize> = stats.expert_l0.iter().map(|e| e.2).collect();
                let mean_l0 = l0.iter().sum::<usize>() as f64 / l0.len().max(1) as f64;
                let mean_f = 1.0 / experts as f64;
                let std = (frac.iter().map(|f| (f - mean_f).powi(2)).sum::<f64>() / experts as f64).sqrt();
                writeln!(w, "{},{},{},{}", r.iter, stats.layer, mean_l0, std)?;
            }
        }
        if ckpt_every > 0 && done % ckpt_every == 0 && done < max {
            save_checkpoint(&trainer.to_checkpoint(), &out.join(format!("ckpt_{done:07}.ckpt")))?;
        }
    }
    metrics.flush()?;
    if let Some(w) = routing.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&trainer.to_checkpoint(), &out.join("final.ckpt"))?;
    if is_moe {
        let probe = if val_stream.len() >= 2 { &val_stream } else { &train_stream };
        write_gate_scatter(&trainer.model, probe, &out.join("gate_scatter.csv"))?;
    }
    println!(
        "trained to iteration {} (lm loss {:.4}{}) in {}",
        trainer.iter,
        last_loss,
        last_val.map_or(String::new(), |v| format!(", val {v:.4}")),
        out.display()
    );
    Ok(TrainSummary {
        out,
        iters: trainer.iter,
        last_loss_lm: last_loss,
        last_val,
    })
}

/// Router score against `‖z‖₀` for every evaluated (token, expert) pair of
/// the block at depth `n_layer − 2`, over the first window of `stream`.
fn write_gate_scatter(model: &Model<f32>, stream: &[u8], path: &Path) -> Result<()> {
    let len = model.config.ctx_len.min(stream.len());
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &[&stream[..len]], ForwardOptions::default())?;
    let layer = model.config.n_layer.saturating_sub(2);
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SCATTER_HEADER}")?;
    if let Some(stats) = out.routing.iter().find(|r| r.layer == layer) {
        for &(t, j, l0) in &stats.expert_l0 {
            writeln!(w, "{t},{j},{},{l0}", stats.raw_scores.get2(t, j))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn harvest(a: &HarvestArgs) -> Result<ActivationDataset> {
    let ck = load_checkpoint::<f32>(&a.ckpt)?;
    let model = ck.model;
    if a.layer >= model.config.n_layer {
        return Err(Error::Config(format!(
            "layer {} out of range: the model has layers 0..{}",
            a.layer, model.config.n_layer
        )));
    }
    if !(0.0..1.0).contains(&a.test_fraction) {
        return Err(Error::Config(format!("test_fraction must be in [0, 1), got {}", a.test_fraction)));
    }
    let corpus = Corpus::read_dir(&a.data)?;
    let games = corpus.game_ids(a.split.into());
    if games.is_empty() {
        return Err(Error::Data(format!("split {:?} has no games", a.split)));
    }
    let ctx = model.config.ctx_len;
    let mut rows = Vec::new();
    for chunk in games.chunks(a.batch_games.max(1)) {
        let mut windows = Vec::with_capacity(chunk.len());
        let mut positions = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &g in chunk {
            let mut w = corpus.game_window(g);
            w.truncate(ctx);
            let align: Vec<_> = corpus.game_alignment(g).into_iter().filter(|(p, _)| *p < w.len()).collect();
            positions.push(align.iter().map(|(p, _)| *p).collect::<Vec<_>>());
            labels.push(align);
            windows.push(w);
        }
        let refs: Vec<&[u8]> = windows.iter().map(Vec::as_slice).collect();
        let feats = harvest_hidden(&model, &refs, a.layer, &positions)?;
        let mut it = feats.into_iter();
        for (&g, align) in chunk.iter().zip(&labels) {
            for &(pos, bsp) in align {
                let f = it.next().expect("one row per alignment point");
                rows.push(ActivationRow {
                    game: g,
                    position: pos as u32,
                    split: Split::Train,
                    label: bsp,
                    features: f.into_iter().map(|v| v as f32).collect(),
                });
            }
        }
    }
    let seed = seed_or(a.seed)?;
    let mut ds = ActivationDataset::from_rows(model.config.trace_width(), rows)?;
    ds.assign_split_by_game(a.test_fraction, seed);
    let mut inputs = vec![a.ckpt.clone()];
    inputs.extend(data_files(&a.data));
    let config = serde_json::json!({
        "ckpt": a.ckpt,
        "data": a.data,
        "layer": a.layer,
        "split": format!("{:?}", a.split).to_lowercase(),
        "test_fraction": a.test_fraction,
        "seed": seed,
        "width": model.config.trace_width(),
        "model": model.config,
    });
    let prov = Provenance::new(
        "harvest",
        config,
        hash_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
    )?;
    ds.meta = serde_json::to_value(prov)?;
    interp::write_activations(&ds, &a.out)?;
    let test = ds.splits().iter().filter(|s| **s == Split::Test).count();
    println!(
        "harvested {} rows x {} features ({} train / {} test) to {}",
        ds.rows(),
        ds.width(),
        ds.rows() - test,
        test,
        a.out.display()
    );
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpOutput {
    pub provenance: Provenance,
    /// Provenance of the activation file.
    pub source: serde_json::Value,
    #[serde(flatten)]
    pub report: InterpReport,
}

pub fn interp(a: &InterpArgs) -> Result<InterpOutput> {
    let ds = interp::read_activations(&a.activations)?;
    let grid = a.grid.clone().unwrap_or_else(interp::default_grid);
    let seed = seed_or(a.shuffle_seed)?;
    let report = interp::score(&ds, &grid, a.min_fire, (!a.no_baseline).then_some(seed))
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", a.activations.display())),
            other => other,
        })?;
    let config = serde_json::json!({
        "activations": a.activations,
        "grid": grid,
        "min_fire": a.min_fire,
        "shuffle_seed": (!a.no_baseline).then_some(seed),
    });
    let out = InterpOutput {
        provenance: Provenance::new("interp", config, hash_files(&[&a.activations])?)?,
        source: ds.meta.clone(),
        report,
    };
    write_json(&a.out, &out)?;
    std::fs::write(a.out.with_extension("csv"), interp::coverage_csv(&out.report.coverage))?;
    let r = &out.report;
    println!(
        "coverage {:.3}  reconstruction {:.3}{}  ({} train / {} test rows, {} classifiers)",
        r.coverage.mean,
        r.reconstruction.mean,
        r.shuffled_coverage.map_or(String::new(), |s| format!("  shuffled-label coverage {s:.3}")),
        r.train_rows,
        r.test_rows,
        r.index_size
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub provenance: Provenance,
    pub results: Vec<BenchResult>,
    pub fits: BTreeMap<String, CostFit>,
}

fn parse_routers(spec: &str) -> Result<Vec<RouterKind>> {
    if spec.trim() == "all" {
        return Ok(RouterKind::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

pub fn bench_router(a: &BenchArgs) -> Result<BenchOutput> {
    let shapes = bench::parse_shapes(&a.shapes)?;
    let routers = parse_routers(&a.routers)?;
    let seed = seed_or(a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut fits = BTreeMap::new();
    let mut csv = String::from(BENCH_HEADER);
    csv.push('\n');
    for &kind in &routers {
        let mut mine = Vec::new();
        for &s in &shapes {
            let r = bench::bench_router(kind, s, a.reps, &mut rng)?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                kind.name(),
                s.tokens,
                s.experts,
                s.hidden,
                s.width,
                r.mean_ms,
                r.std_ms
            )
            .expect("writing to a String");
            mine.push(r);
        }
        if let Ok(fit) = bench::fit_cost_model(&mine) {
            println!("{:<15} R^2 {:.4}  ({:.3e} ms per op)", kind.name(), fit.r2, fit.slope);
            fits.insert(kind.name().to_string(), fit);
        }
        results.extend(mine);
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, csv)?;
    let config = serde_json::json!({ "shapes": a.shapes, "routers": a.routers, "reps": a.reps, "seed": seed });
    let out = BenchOutput {
        provenance: Provenance::new("bench-router", config, content_hash(b""))?,
        results,
        fits,
    };
    write_json(&a.out.with_extension("json"), &out)?;
    Ok(out)
}

/// Data rows of a CSV file whose header must equal `header`.
fn csv_rows(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or_default();
    if first != header {
        return Err(Error::format(path, format!("expected header '{header}', found '{first}'")));
    }
    Ok(lines.filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Mean `‖z‖₀` over the layers logged at the last iteration of `routing.csv`.
fn final_mean_l0(path: &Path) -> Result<Option<f64>> {
    let rows = csv_rows(path, ROUTING_HEADER)?;
    let parsed: Vec<(u64, f64)> = rows
        .iter()
        .filter_map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            Some((f.first()?.parse().ok()?, f.get(2)?.parse().ok()?))
        })
        .collect();
    let Some(last) = parsed.iter().map(|p| p.0).max() else {
        return Ok(None);
    };
    let vals: Vec<f64> = parsed.iter().filter(|p| p.0 == last).map(|p| p.1).collect();
    Ok(Some(vals.iter().sum::<f64>() / vals.len() as f64))
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut missing = Vec::new();
    for dir in &a.runs {
        for f in ["metrics.csv", "run.json"] {
            if !dir.join(f).is_file() {
                missing.push(dir.join(f).display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing inputs: {}", missing.join(", "))));
    }
    let mut inputs = Vec::new();
    let mut metrics = format!("run,{METRICS_HEADER}\n");
    let mut size = String::from("run,activated_mlp_params,trace_width,coverage,reconstruction\n");
    let mut l0 = String::from("run,mean_l0,coverage,reconstruction\n");
    let mut scatter = format!("run,{SCATTER_HEADER}\n");
    for dir in &a.runs {
        let name = run_name(dir);
        inputs.push(dir.join("metrics.csv"));
        inputs.push(dir.join("run.json"));
        for row in csv_rows(&dir.join("metrics.csv"), METRICS_HEADER)? {
            writeln!(metrics, "{name},{row}").expect("writing to a String");
        }
        let run: RunRecord = serde_json::from_str(&read_text(&dir.join("run.json"))?)
            .map_err(|e| Error::format(dir.join("run.json"), e.to_string()))?;
        let interp_path = dir.join("interp.json");
        if interp_path.is_file() {
            inputs.push(interp_path.clone());
            let rep: InterpOutput = serde_json::from_str(&read_text(&interp_path)?)
                .map_err(|e| Error::format(&interp_path, e.to_string()))?;
            let (cov, rec) = (rep.report.coverage.mean, rep.report.reconstruction.mean);
            writeln!(
                size,
                "{name},{},{},{cov},{rec}",
                run.model.activated_mlp_params(),
                run.model.trace_width()
            )
            .expect("writing to a String");
            let routing = dir.join("routing.csv");
            if routing.is_file() {
                inputs.push(routing.clone());
                if let Some(m) = final_mean_l0(&routing)? {
                    writeln!(l0, "{name},{m},{cov},{rec}").expect("writing to a String");
                }
            }
        }
        let sc = dir.join("gate_scatter.csv");
        if sc.is_file() {
            inputs.push(sc.clone());
            for row in csv_rows(&sc, SCATTER_HEADER)? {
                writeln!(scatter, "{name},{row}").expect("writing to a String");
            }
        }
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("metrics.csv"), metrics)?;
    std::fs::write(a.out.join("coverage_vs_size.csv"), size)?;
    std::fs::write(a.out.join("coverage_vs_l0.csv"), l0)?;
    std::fs::write(a.out.join("gate_scatter.csv"), scatter)?;
    let prov = Provenance::new(
        "report",
        serde_json::json!({ "runs": a.runs }),
        hash_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?,
    )?;
    write_json(&a.out.join("report.json"), &prov)?;
    println!("merged {} runs into {}", a.runs.len(), a.out.display());
    Ok(())
}
