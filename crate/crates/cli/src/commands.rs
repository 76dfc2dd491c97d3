//! One function per subcommand. Stages exchange only the files listed in
//! the README.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ace_core::config::RunConfig;
use ace_core::data::{read_embeddings, read_queries, write_embeddings, write_jsonl, write_queries, Split};
use ace_core::decode::{beam_search_batch, Constraint, PrefixTree};
use ace_core::eval::{
    candidate_sweep, csv_table, default_workers, eval_rows, run_eval, text_table, BenchConfig, BENCH_HEADER, ENGINES, EVAL_HEADER,
};
use ace_core::ids::{build_identifiers, read_identifiers, write_identifiers, IdMode, IdentifierSet};
use ace_core::model::{FusionMode, FusionModel, VocabLayout};
use ace_core::pipeline::{generate_data, stage_seed, STAGE_IDS, STAGE_MODEL_INIT, STAGE_TRAIN};
use ace_core::train::{load_checkpoint, load_checkpoint_meta, make_examples, save_checkpoint, train_loop, write_tensors};
use ace_core::{CoreError, Exec};
use ace_tensor::Rng;
use serde::{Deserialize, Serialize};

use crate::{usage, BenchArgs, BuildIdsArgs, CliResult, Env, EvalArgs, FusionArg, GenDataArgs, IdModeArg, RetrieveArgs, SplitArg, TrainArgs};

pub const EMBEDDINGS: &str = "embeddings.bin";
pub const QUERIES: &str = "queries.jsonl";
pub const SPLIT: &str = "split.json";
pub const IDENTIFIERS: &str = "identifiers.jsonl";
pub const LAYOUT: &str = "layout.json";
pub const ID_CHECKPOINT: &str = "id_pipeline.ckpt";
pub const USAGE: &str = "usage.json";
pub const MODEL: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CoreError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        }
        .into()
    })
}

fn check_fraction(name: &str, v: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        usage(format!("--{name} must be in [0, 1], got {v}"))
    }
}

fn check_positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        usage(format!("--{name} must be > 0, got {v}"))
    }
}

/// Split manifest written next to the queries.
#[derive(Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fractions: [f64; 3],
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
}

pub fn gen_data(env: &Env, a: GenDataArgs) -> CliResult<()> {
    let mut cfg = env.base_config(None)?;
    let d = &mut cfg.data;
    if let Some(v) = a.items {
        d.corpus.n_items = v as usize;
    }
    if let Some(v) = a.concepts {
        d.corpus.n_concepts = v as usize;
    }
    if let Some(v) = a.dim {
        d.corpus.dim = v as usize;
    }
    if let Some(v) = a.queries_per_item {
        d.queries.queries_per_item = v as usize;
    }
    if let Some(v) = a.noise_rate {
        check_fraction("noise-rate", v)?;
        d.queries.noise_rate = v;
    }
    if let Some(v) = a.vocab_size {
        d.queries.vocab_size = v as usize;
        cfg.model.query_vocab_size = v as usize;
    }
    if let Some(v) = a.noise_sigma {
        if !(v >= 0.0 && v.is_finite()) {
            return usage(format!("--noise-sigma must be >= 0, got {v}"));
        }
        d.corpus.noise_sigma = v;
    }
    env.echo_config(&cfg)?;
    let (corpus, queries) = generate_data(&cfg.data, cfg.seed)?;
    write_embeddings(&env.out.join(EMBEDDINGS), &corpus.embeddings())?;
    write_queries(&env.out.join(QUERIES), &queries)?;
    let mut counts = BTreeMap::new();
    for s in Split::ALL {
        counts.insert(s.as_str().to_owned(), queries.iter().filter(|q| q.split == s).count());
    }
    write_json(
        &env.out.join(SPLIT),
        &SplitManifest {
            fractions: cfg.data.split,
            seed: cfg.seed,
            counts,
        },
    )?;
    env.log(format!(
        "wrote {} items and {} queries to {}",
        corpus.items.len(),
        queries.len(),
        env.out.display()
    ));
    Ok(())
}

/// Per-position token range sizes of an identifier set.
#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutFile {
    pub position_sizes: Vec<usize>,
    pub fingerprint: String,
}

pub fn build_ids(env: &Env, a: BuildIdsArgs) -> CliResult<()> {
    let data = a.data.clone().unwrap_or_else(|| env.out.clone());
    let mut cfg = env.base_config(Some(&data))?;
    let id = &mut cfg.identifier;
    if let Some(m) = a.mode {
        id.mode = match m {
            IdModeArg::CoarseFine => IdMode::CoarseFine,
            IdModeArg::NoKmeans => IdMode::NoKmeans,
            IdModeArg::HierarchicalKmeans => IdMode::HierarchicalKmeans,
        };
    }
    if let Some(v) = a.k {
        id.kmeans.k = v as usize;
    }
    if let Some(v) = a.codebooks {
        id.rqvae.levels = v as usize;
    }
    if let Some(v) = a.codebook_size {
        id.rqvae.codebook_size = v as usize;
    }
    if let Some(v) = a.alpha {
        check_positive("alpha", v)?;
        id.rqvae.alpha = v;
    }
    if let Some(v) = a.beta {
        check_positive("beta", v)?;
        id.rqvae.beta = v;
    }
    if let Some(v) = a.epochs {
        id.rqvae.epochs = v;
        id.rqvae.warmup_epochs = id.rqvae.warmup_epochs.min(v);
    }
    let x = read_embeddings(&data.join(EMBEDDINGS))?;
    env.echo_config(&cfg)?;
    env.log(format!("building identifiers for {} items", x.rows()));
    let built = build_identifiers(&x, &cfg.identifier, stage_seed(cfg.seed, STAGE_IDS), Exec::Parallel)?;
    write_identifiers(&env.out.join(IDENTIFIERS), &built.set.identifiers)?;
    let layout = VocabLayout::new(built.set.position_sizes.clone())?;
    write_json(
        &env.out.join(LAYOUT),
        &LayoutFile {
            position_sizes: built.set.position_sizes.clone(),
            fingerprint: layout.fingerprint(),
        },
    )?;
    let mut named: Vec<(String, &ace_tensor::Tensor<f32>)> = Vec::new();
    if let Some(km) = &built.kmeans {
        named.push(("kmeans.centers".into(), &km.centers));
    }
    if let Some(rq) = &built.rqvae {
        named.extend(rq.store.named_values().map(|(n, t)| (format!("rqvae.{n}"), t)));
    }
    write_tensors(&env.out.join(ID_CHECKPOINT), named.iter().map(|(n, t)| (n.as_str(), *t)))?;
    let collisions = built.set.identifiers.iter().filter(|i| i.unique() > 0).count();
    write_json(
        &env.out.join(USAGE),
        &serde_json::json!({
            "items": built.set.len(),
            "position_sizes": built.set.position_sizes,
            "layout_fingerprint": layout.fingerprint(),
            "items_with_nonzero_unique_token": collisions,
            "codebook_usage": built.usage,
            "dead_fraction": built.usage.as_ref().map(|u| u.dead_fraction()),
            "rqvae_log": built.rqvae_log,
        }),
    )?;
    env.log(format!(
        "{} identifiers, layout {}, {collisions} items needed a unique token above 0",
        built.set.len(),
        layout.fingerprint()
    ));
    Ok(())
}

/// Identifiers and their layout from a build-ids output directory.
fn load_ids(dir: &Path) -> CliResult<(IdentifierSet, VocabLayout)> {
    let lf: LayoutFile = read_json(&dir.join(LAYOUT))?;
    let layout = VocabLayout::new(lf.position_sizes.clone())?;
    if layout.fingerprint() != lf.fingerprint {
        return Err(CoreError::Format {
            path: dir.join(LAYOUT),
            offset: 0,
            msg: format!("fingerprint {} does not match sizes ({})", lf.fingerprint, layout.fingerprint()),
        }
        .into());
    }
    let ids = read_identifiers(&dir.join(IDENTIFIERS))?;
    let set = IdentifierSet::from_identifiers(ids, lf.position_sizes)?;
    Ok((set, layout))
}

/// Error unless the checkpoint was trained on `layout`.
fn check_layout(model_path: &Path, layout: &VocabLayout) -> CliResult<()> {
    let meta = load_checkpoint_meta(model_path)?;
    if meta.layout_fingerprint != layout.fingerprint() {
        return Err(CoreError::LayoutMismatch {
            checkpoint: meta.layout_fingerprint,
            identifiers: layout.fingerprint(),
        }
        .into());
    }
    Ok(())
}

pub fn train(env: &Env, a: TrainArgs) -> CliResult<()> {
    let data = a.data.clone().unwrap_or_else(|| env.out.clone());
    let ids_dir = a.ids.clone().unwrap_or_else(|| data.clone());
    let mut cfg = env.base_config(Some(&ids_dir))?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v as usize;
        t.warmup_epochs = t.warmup_epochs.min(v as usize);
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v as usize;
    }
    if let Some(v) = a.omega {
        if !(v >= 0.0 && v.is_finite()) {
            return usage(format!("--omega must be >= 0, got {v}"));
        }
        t.omega = v;
    }
    if let Some(v) = a.lr_peak {
        check_positive("lr-peak", v)?;
        t.lr_peak = v;
    }
    if let Some(v) = a.warmup_epochs {
        t.warmup_epochs = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.d_model {
        m.d_model = v as usize;
    }
    if let Some(v) = a.encoder_layers {
        m.encoder_layers = v as usize;
    }
    if let Some(v) = a.decoder_layers {
        m.decoder_layers = v as usize;
    }
    if let Some(f) = a.fusion {
        m.fusion = match f {
            FusionArg::CoarseFine => FusionMode::CoarseFine,
            FusionArg::LastLayer => FusionMode::LastLayer,
        };
    }
    if let Some(v) = a.dropout {
        if !(0.0..1.0).contains(&v) {
            return usage(format!("--dropout must be in [0, 1), got {v}"));
        }
        m.dropout = v;
    }
    if cfg.model.d_model % cfg.model.n_heads != 0 {
        return usage(format!("--d-model {} is not divisible by {} heads", cfg.model.d_model, cfg.model.n_heads));
    }
    let queries = read_queries(&data.join(QUERIES), Some(cfg.model.query_vocab_size))?;
    let (set, layout) = load_ids(&ids_dir)?;
    env.echo_config(&cfg)?;
    let train = make_examples(&queries, &set, &layout, Split::Train)?;
    let val = make_examples(&queries, &set, &layout, Split::Val)?;
    let mut model = FusionModel::new(cfg.model.clone(), layout.clone(), &mut Rng::new(stage_seed(cfg.seed, STAGE_MODEL_INIT)))?;
    env.log(format!(
        "training {} parameters on {} examples ({} validation), layout {}",
        model.num_params(),
        train.len(),
        val.len(),
        layout.fingerprint()
    ));
    let outcome = train_loop(&mut model, &train, &val, &cfg.train, stage_seed(cfg.seed, STAGE_TRAIN), Exec::Parallel, |e| {
        env.log(format!(
            "epoch {:>3} lr {:.2e} loss {:.4} ce {:.4} kl {:.4} val_nll {} ({:.1}s)",
            e.epoch + 1,
            e.lr,
            e.loss,
            e.ce,
            e.kl,
            e.val_nll.map_or("-".to_owned(), |v| format!("{v:.4}")),
            e.seconds
        ))
    })?;
    write_jsonl(&env.out.join(TRAIN_LOG), &outcome.log)?;
    save_checkpoint(&model, &env.out.join(MODEL), Some(&cfg.train), Some(cfg.seed))?;
    env.log(format!(
        "kept epoch {} by validation NLL; wrote {}",
        outcome.best_epoch.map_or("-".to_owned(), |e| (e + 1).to_string()),
        env.out.join(MODEL).display()
    ));
    Ok(())
}

fn model_path(env: &Env, p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| env.out.join(MODEL))
}

pub fn retrieve(env: &Env, a: RetrieveArgs) -> CliResult<()> {
    let ids_dir = a.ids.clone().unwrap_or_else(|| env.out.clone());
    let model_file = model_path(env, &a.model);
    let mut cfg = env.base_config(Some(&ids_dir))?;
    cfg.decode.beam = a.beam.map_or(cfg.decode.beam, |b| b as usize);
    let (set, layout) = load_ids(&ids_dir)?;
    check_layout(&model_file, &layout)?;
    let (model, _) = load_checkpoint(&model_file)?;
    if let Some(&t) = a.query_tokens.iter().find(|&&t| t as usize >= model.config.query_vocab_size) {
        return usage(format!("query token {t} outside the model vocabulary of {}", model.config.query_vocab_size));
    }
    env.echo_config(&cfg)?;
    let tree = PrefixTree::build(&set.identifiers, &layout)?;
    let constraint = if a.unconstrained { Constraint::Free { lookup: Some(&tree) } } else { Constraint::Tree(&tree) };
    let hits = beam_search_batch(&model, &[&a.query_tokens], tree.depth(), cfg.decode.beam, constraint, 1, Exec::Sequential)?.remove(0);
    let results: Vec<serde_json::Value> = hits
        .iter()
        .enumerate()
        .map(|(r, h)| {
            serde_json::json!({
                "rank": r + 1,
                "item_id": h.item_id,
                "score": h.score,
                "identifier": layout.from_global(&h.tokens).map(|i| i.0),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "query_tokens": a.query_tokens,
        "beam": cfg.decode.beam,
        "constrained": !a.unconstrained,
        "layout_fingerprint": layout.fingerprint(),
        "results": results,
    });
    write_json(&env.out.join("retrieval.json"), &doc)?;
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}

pub fn eval(env: &Env, a: EvalArgs) -> CliResult<()> {
    let ids_dir = a.ids.clone().unwrap_or_else(|| env.out.clone());
    let data = a.data.clone().unwrap_or_else(|| ids_dir.clone());
    let model_file = model_path(env, &a.model);
    let mut cfg = env.base_config(Some(&ids_dir))?;
    if let Some(b) = a.beams {
        if b.contains(&0) {
            return usage("--beams entries must be >= 1");
        }
        cfg.eval.beams = b;
    }
    if let Some(s) = a.split {
        cfg.eval.split = match s {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
        .into();
    }
    if a.unconstrained {
        cfg.eval.constrained = false;
    }
    let split = match cfg.eval.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return usage(format!("unknown split {other:?} in config")),
    };
    let (set, layout) = load_ids(&ids_dir)?;
    check_layout(&model_file, &layout)?;
    let (model, _) = load_checkpoint(&model_file)?;
    let queries = read_queries(&data.join(QUERIES), Some(model.config.query_vocab_size))?;
    env.echo_config(&cfg)?;
    let examples = make_examples(&queries, &set, &layout, split)?;
    let tree = PrefixTree::build(&set.identifiers, &layout)?;
    let reports = run_eval(&model, &tree, &examples, &cfg.eval.beams, split.as_str(), cfg.eval.constrained, Exec::Parallel)?;
    write_json(&env.out.join("eval_report.json"), &reports)?;
    let rows = eval_rows(&reports);
    if a.csv {
        let csv = csv_table(&EVAL_HEADER, &rows);
        let p = env.out.join("eval_report.csv");
        std::fs::write(&p, &csv).map_err(|e| CoreError::io(&p, e))?;
        print!("{csv}");
    } else {
        print!("{}", text_table(&EVAL_HEADER, &rows));
    }
    Ok(())
}

pub fn bench(env: &Env, a: BenchArgs) -> CliResult<()> {
    let mut cfg: RunConfig = env.base_config(None)?;
    let b = &mut cfg.bench;
    if let Some(v) = a.candidates {
        if v.contains(&0) {
            return usage("--candidates entries must be >= 1");
        }
        b.candidates = v;
    }
    if let Some(v) = a.concurrency {
        if v == 0 {
            return usage("--concurrency must be >= 1");
        }
        b.concurrency = v;
    }
    if let Some(v) = a.engines {
        if let Some(bad) = v.iter().find(|e| !ENGINES.contains(&e.as_str())) {
            return usage(format!("unknown engine {bad:?}, expected one of {ENGINES:?}"));
        }
        b.engines = v;
    }
    if let Some(v) = a.duration {
        check_positive("duration", v)?;
        b.duration_s = v;
    }
    if let Some(v) = a.warmup {
        if !(v >= 0.0 && v.is_finite()) {
            return usage(format!("--warmup must be >= 0, got {v}"));
        }
        b.warmup_s = v;
    }
    if let Some(v) = a.beam {
        if v == 0 {
            return usage("--beam must be >= 1");
        }
        b.beam = v;
    }
    if let Some(v) = a.prefix_sizes {
        if v.is_empty() || v.contains(&0) {
            return usage("--prefix-sizes entries must be >= 1");
        }
        b.prefix_sizes = v;
    }
    env.echo_config(&cfg)?;
    let bench_cfg = BenchConfig {
        concurrency: cfg.bench.concurrency,
        workers: default_workers(),
        duration_s: cfg.bench.duration_s,
        warmup_s: cfg.bench.warmup_s,
    };
    let report = candidate_sweep(&cfg.bench, &cfg.model, cfg.data.corpus.dim, &bench_cfg, cfg.seed, |r| {
        env.log(format!("{} n={}: {:.1} qps, p50 {:.3} ms", r.engine, r.n_candidates, r.throughput_qps, r.p50_ms))
    })?;
    write_json(&env.out.join("bench_report.json"), &report)?;
    let rows = report.table_rows();
    if a.csv {
        let csv = csv_table(&BENCH_HEADER, &rows);
        let p = env.out.join("bench_report.csv");
        std::fs::write(&p, &csv).map_err(|e| CoreError::io(&p, e))?;
        print!("{csv}");
    } else {
        print!("{}", text_table(&BENCH_HEADER, &rows));
        println!("{}", report.methodology);
    }
    Ok(())
}
