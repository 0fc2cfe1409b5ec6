//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use spq_core::data::{label_masks_from_tensor, labels_to_tensor, SyntheticSource, SyntheticSpec};
use spq_core::eval::{evaluate, kmeans_pq_baseline, RelevanceOracle};
use spq_core::index::{adc_search, build_index, LabelBlock};
use spq_core::numerics::{read_tensor, write_tensor};
use spq_core::trainer::{train_epoch, LossRecord};
use spq_core::{Checkpoint, Error, IndexFile, RunConfig, Tensor, TrainState, TrainingData};

use crate::datasets::{load_training, Loaded};
use crate::{BaselineArgs, Cli, Command, EncodeArgs, EvaluateArgs, QueryArgs, SearchArgs, SynthArgs, TrainArgs};

/// Rows encoded per encoder call.
const ENCODE_CHUNK: usize = 512;

pub fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the worker pool")?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Encode(a) => encode(cli, a),
        Command::Search(a) => search(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::BaselinePq(a) => baseline(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn read_f64(path: &Path) -> Result<Tensor<f64>> {
    read_tensor::<f64>(path).with_context(|| format!("reading {}", path.display()))
}

fn write_f64(path: &Path, t: &Tensor<f64>) -> Result<()> {
    write_tensor(path, t).with_context(|| format!("writing {}", path.display()))
}

/// Records the resolved arguments of a non-training run.
fn write_echo(cli: &Cli, name: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = format!("command={name}\nthreads={}\n", cli.threads);
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    let path = cli.out.join(format!("{name}.echo"));
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn show_opt(p: &Option<PathBuf>) -> String {
    p.as_deref().map(show).unwrap_or_default()
}

fn resolved_config(cli: &Cli, a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.output.checkpoint.get_or_insert_with(|| cli.out.join("model.spqm"));
    cfg.output.loss_log.get_or_insert_with(|| cli.out.join("loss.csv"));
    cfg.validate()?;
    Ok(cfg)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolved_config(cli, a)?;
    let echo = cli.out.join("config.echo");
    fs::write(&echo, cfg.to_text()).with_context(|| format!("writing {}", echo.display()))?;

    let loaded = load_training(&cfg.data, cfg.train.seed)?;
    let data = match &loaded {
        Loaded::Images(images) => TrainingData::Images {
            images,
            augment: &cfg.augment,
        },
        Loaded::Views(first, second) => TrainingData::ViewPairs { first, second },
    };
    let mut state = TrainState::initialize(&cfg.train, &data)?;

    let log_path = cfg.output.loss_log.clone().expect("resolved");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", LossRecord::CSV_HEADER)?;
    let mut log_err = None;
    while state.epoch < cfg.train.epochs {
        let mean = train_epoch(&mut state, &data, &cfg.train, &mut |r| {
            if let Err(e) = writeln!(log, "{}", r.csv_row()) {
                log_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_err.take() {
            return Err(e).context("writing the loss log");
        }
        eprintln!("epoch {:>4}  mean loss {mean:.6}", state.epoch);
    }
    log.flush()?;

    let ck_path = cfg.output.checkpoint.clone().expect("resolved");
    Checkpoint {
        config: cfg.train.clone(),
        state,
    }
    .save(&ck_path)
    .with_context(|| format!("writing {}", ck_path.display()))?;
    eprintln!("checkpoint written to {}", ck_path.display());
    Ok(())
}

/// Descriptors for raw inputs under a checkpoint's encoder.
fn encode_all(ck: &Checkpoint, inputs: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::Input("no rows to encode".into()).into());
    }
    let mut data = Vec::with_capacity(n * ck.config.d);
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        let d = ck.state.descriptors(&ck.config, &inputs.select_rows(&idx))?;
        data.extend_from_slice(d.data());
    }
    Ok(Tensor::new(vec![n, ck.config.d], data)?)
}

fn label_block(path: &Path) -> Result<LabelBlock> {
    let t = read_f64(path)?;
    let masks = label_masks_from_tensor(&t)?;
    let label_count = match t.shape() {
        [_, l] => *l as u32,
        _ => masks.iter().map(|m| 64 - m.leading_zeros()).max().unwrap_or(0),
    };
    Ok(LabelBlock { label_count, masks })
}

fn encode(cli: &Cli, a: &EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let desc = encode_all(&ck, &read_f64(&a.input)?)?;
    let index_path = match (&a.index, &a.descriptors) {
        (Some(p), _) => Some(p.clone()),
        (None, None) => Some(cli.out.join("index.spqi")),
        (None, Some(_)) => None,
    };
    if let Some(p) = &index_path {
        let mut index = build_index(&ck.state.codebooks, &desc)?;
        if let Some(l) = &a.labels {
            index.set_labels(label_block(l)?)?;
        }
        index.save(p).with_context(|| format!("writing {}", p.display()))?;
        eprintln!("indexed {} items ({} bits each) into {}", index.len(), index.code_bits(), p.display());
    }
    if let Some(p) = &a.descriptors {
        write_tensor(p, &desc.cast::<f32>()).with_context(|| format!("writing {}", p.display()))?;
    }
    write_echo(
        cli,
        "encode",
        &[
            ("checkpoint", show(&a.checkpoint)),
            ("input", show(&a.input)),
            ("labels", show_opt(&a.labels)),
            ("index", show_opt(&index_path)),
            ("descriptors", show_opt(&a.descriptors)),
        ],
    )
}

fn load_index(path: &Path) -> Result<IndexFile> {
    IndexFile::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_queries(q: &QueryArgs) -> Result<Tensor<f32>> {
    let raw = read_f64(&q.queries)?;
    let desc = match &q.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            encode_all(&ck, &raw)?
        }
        None => raw,
    };
    Ok(desc.cast())
}

fn query_entries(q: &QueryArgs) -> Vec<(&'static str, String)> {
    vec![
        ("index", show(&q.index)),
        ("queries", show(&q.queries)),
        ("checkpoint", show_opt(&q.checkpoint)),
    ]
}

fn search(cli: &Cli, a: &SearchArgs) -> Result<()> {
    let index = load_index(&a.query.index)?;
    let queries = load_queries(&a.query)?;
    if queries.rank() != 2 {
        return Err(Error::Input(format!("queries must be [Q, D], got {:?}", queries.shape())).into());
    }
    let top_k = a.top_k.min(index.len());
    let results: Vec<_> = (0..queries.rows())
        .into_par_iter()
        .map(|q| adc_search(&index, queries.row(q), top_k))
        .collect::<spq_core::Result<_>>()?;

    let out = a.output.clone().unwrap_or_else(|| cli.out.join("results.csv"));
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    writeln!(w, "query_id,rank,item_id,distance")?;
    for (q, hits) in results.iter().enumerate() {
        for (r, h) in hits.iter().enumerate() {
            writeln!(w, "{q},{},{},{}", r + 1, h.id, h.distance)?;
        }
    }
    w.flush()?;
    let mut entries = query_entries(&a.query);
    entries.push(("top_k", top_k.to_string()));
    entries.push(("output", show(&out)));
    write_echo(cli, "search", &entries)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let index = load_index(&a.query.index)?;
    let queries = load_queries(&a.query)?;
    let query_masks = label_masks_from_tensor(&read_f64(&a.query_labels)?)?;
    let gallery_masks = match (&a.gallery_labels, index.labels()) {
        (Some(p), _) => label_masks_from_tensor(&read_f64(p)?)?,
        (None, Some(block)) => block.masks.clone(),
        (None, None) => {
            return Err(Error::Usage("the index has no labels; pass --gallery-labels".into()).into())
        }
    };
    let oracle = RelevanceOracle::from_masks(query_masks, gallery_masks)?;
    let report = evaluate(&index, &queries, &oracle, a.r, &a.k)?;

    let files = [
        ("metrics.txt", report.to_text()),
        ("metrics.csv", report.to_csv()),
        ("pr.csv", report.pr_csv()),
    ];
    for (name, body) in files {
        let p = cli.out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_text());
    let mut entries = query_entries(&a.query);
    entries.push(("query_labels", show(&a.query_labels)));
    entries.push(("gallery_labels", show_opt(&a.gallery_labels)));
    entries.push(("r", a.r.to_string()));
    entries.push((
        "k",
        a.k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
    ));
    write_echo(cli, "evaluate", &entries)
}

fn baseline(cli: &Cli, a: &BaselineArgs) -> Result<()> {
    let gallery = read_f64(&a.gallery)?;
    let fit_on = match &a.fit {
        Some(p) => read_f64(p)?,
        None => gallery.clone(),
    };
    let seed = cli.seed.unwrap_or(0);
    let cb = kmeans_pq_baseline(&fit_on, a.m, a.k, a.iters, seed)?;
    let mut index = build_index(&cb, &gallery)?;
    if let Some(l) = &a.labels {
        index.set_labels(label_block(l)?)?;
    }
    let out = a.index.clone().unwrap_or_else(|| cli.out.join("baseline.spqi"));
    index.save(&out).with_context(|| format!("writing {}", out.display()))?;
    write_echo(
        cli,
        "baseline-pq",
        &[
            ("gallery", show(&a.gallery)),
            ("fit", show_opt(&a.fit)),
            ("labels", show_opt(&a.labels)),
            ("m", a.m.to_string()),
            ("k", a.k.to_string()),
            ("iters", a.iters.to_string()),
            ("seed", seed.to_string()),
            ("index", show(&out)),
        ],
    )
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    for (name, n) in [("train", a.train), ("query", a.query), ("gallery", a.gallery)] {
        if a.clusters == 0 || n % a.clusters != 0 {
            return Err(Error::Usage(format!("--{name} {n} is not a multiple of --clusters {}", a.clusters)).into());
        }
    }
    let seed = cli.seed.unwrap_or(0);
    let src = SyntheticSource::new(SyntheticSpec {
        clusters: a.clusters,
        dim: a.dim,
        noise: a.noise,
        seed,
    })?;
    let train = src.sample(a.train / a.clusters, 0)?;
    write_f64(&cli.out.join("train_a.spqt"), &train.view_a)?;
    write_f64(&cli.out.join("train_b.spqt"), &train.view_b)?;
    write_f64(&cli.out.join("train_items.spqt"), &train.items)?;
    write_f64(&cli.out.join("train_labels.spqt"), &labels_to_tensor(&train.labels))?;
    for (split, name, n) in [(1, "query", a.query), (2, "gallery", a.gallery)] {
        let s = src.sample(n / a.clusters, split)?;
        write_f64(&cli.out.join(format!("{name}.spqt")), &s.items)?;
        write_f64(&cli.out.join(format!("{name}_labels.spqt")), &labels_to_tensor(&s.labels))?;
    }
    write_echo(
        cli,
        "synth",
        &[
            ("clusters", a.clusters.to_string()),
            ("dim", a.dim.to_string()),
            ("noise", a.noise.to_string()),
            ("train", a.train.to_string()),
            ("query", a.query.to_string()),
            ("gallery", a.gallery.to_string()),
            ("seed", seed.to_string()),
        ],
    )
}
