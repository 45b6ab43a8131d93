//! The five subcommands. Each writes its human-readable report to `out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use darer_core::data::{build_token_vocab, load_corpus, save_corpus, split_dialogs};
use darer_core::graph::{build_drtg, build_satg, drtg_node, export_dot};
use darer_core::synth::{gen_synthetic, SynthConfig};
use darer_core::train::predict_all;
use darer_core::{
    evaluate, train, Convention, Corpus, Darer, DarerConfig, Dialog, EncodedDialog, LabelVocab,
    Metrics, TaskMetrics, TokenVocab,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

fn load(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "corpus {} does not exist",
            path.display()
        )));
    }
    Ok(load_corpus(path)?)
}

struct Splits {
    train: Vec<Dialog>,
    valid: Vec<Dialog>,
    test: Vec<Dialog>,
    labels: LabelVocab,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let data = &cfg.data;
    if let Some(synth) = &data.synthetic {
        let corpus = gen_synthetic(synth)?;
        let (train, valid, test) =
            split_dialogs(&corpus.dialogs, data.valid_frac, data.test_frac, synth.seed)?;
        return Ok(Splits {
            train,
            valid,
            test,
            labels: corpus.labels,
        });
    }
    let (Some(train_path), Some(valid_path)) = (&data.train, &data.valid) else {
        return Err(CliError::Usage(
            "data.train and data.valid are required".into(),
        ));
    };
    let train = load(train_path)?;
    let valid = load(valid_path)?.remap_labels(&train.labels)?;
    let test = match &data.test {
        Some(p) => load(p)?.remap_labels(&train.labels)?.dialogs,
        None => Vec::new(),
    };
    Ok(Splits {
        train: train.dialogs,
        valid: valid.dialogs,
        test,
        labels: train.labels,
    })
}

fn encode_all(model: &Darer, dialogs: &[Dialog], vocab: &TokenVocab) -> Result<Vec<EncodedDialog>> {
    Ok(dialogs
        .iter()
        .map(|d| model.encode_dialog(d, vocab))
        .collect::<darer_core::Result<_>>()?)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    convention: Convention,
    best_epoch: Option<usize>,
    epochs_run: usize,
    valid: Option<&'a Metrics>,
    test: Option<&'a Metrics>,
    diverged: Option<&'a str>,
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub best_epoch: Option<usize>,
    pub valid: Option<Metrics>,
    pub test: Option<Metrics>,
}

/// Trains from a config file. `seed` overrides `train.seed`.
pub fn cmd_train(
    config_path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<TrainSummary> {
    let mut cfg = RunConfig::load(config_path, overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    run_training(&cfg, out_dir, out)
}

pub fn run_training(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(CliError::Usage(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let vocab = build_token_vocab(&splits.train, cfg.data.min_count)?;
    let labels = &splits.labels;
    log::info!(
        "{} train / {} valid / {} test dialogs, {} tokens",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        vocab.len()
    );
    let model = Darer::new(
        cfg.model.clone(),
        vocab.len(),
        labels.n_sentiments(),
        labels.n_acts(),
        cfg.train.seed,
    )?;
    let train_set = encode_all(&model, &splits.train, &vocab)?;
    let valid_set = encode_all(&model, &splits.valid, &vocab)?;
    let test_set = encode_all(&model, &splits.test, &vocab)?;
    let neutral = labels.neutral_sentiment;
    let outcome = train(model, &train_set, &valid_set, &cfg.train, neutral)?;

    let test = if test_set.is_empty() {
        None
    } else {
        Some(evaluate(
            &outcome.model,
            &test_set,
            cfg.train.eval_convention,
            neutral,
        )?)
    };

    fs::create_dir_all(out_dir)?;
    outcome
        .model
        .save(out_dir.join(CHECKPOINT_FILE), &vocab, labels)?;
    let mut log_file = BufWriter::new(File::create(out_dir.join(LOG_FILE))?);
    for rec in &outcome.log {
        serde_json::to_writer(&mut log_file, rec)?;
        log_file.write_all(b"\n")?;
    }
    log_file.flush()?;
    let metrics = MetricsFile {
        convention: cfg.train.eval_convention,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.len(),
        valid: outcome.best_metrics.as_ref(),
        test: test.as_ref(),
        diverged: outcome.diverged.as_deref(),
    };
    fs::write(
        out_dir.join(METRICS_FILE),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), resolved)?;

    match (outcome.best_epoch, &outcome.best_metrics) {
        (Some(epoch), Some(m)) => {
            writeln!(out, "best epoch {epoch} of {}", outcome.log.len())?;
            write_table(out, "valid", m, labels)?;
        }
        _ => writeln!(out, "no epoch completed")?,
    }
    if let Some(m) = &test {
        write_table(out, "test", m, labels)?;
    }
    writeln!(out, "wrote {}", out_dir.display())?;
    if let Some(reason) = outcome.diverged {
        return Err(CliError::Diverged(reason));
    }
    Ok(TrainSummary {
        out_dir: out_dir.to_path_buf(),
        best_epoch: outcome.best_epoch,
        valid: outcome.best_metrics,
        test,
    })
}

fn write_task(
    out: &mut dyn Write,
    task: &str,
    m: &TaskMetrics,
    names: &[String],
) -> std::io::Result<()> {
    writeln!(
        out,
        "  {task:<10} P {:>6.2}  R {:>6.2}  F1 {:>6.2}  acc {:>6.2}",
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f1,
        100.0 * m.accuracy
    )?;
    for (name, c) in names.iter().zip(&m.per_class) {
        writeln!(
            out,
            "    {name:<14} P {:>6.2}  R {:>6.2}  F1 {:>6.2}  n {}",
            100.0 * c.precision,
            100.0 * c.recall,
            100.0 * c.f1,
            c.support
        )?;
    }
    Ok(())
}

fn write_table(
    out: &mut dyn Write,
    split: &str,
    m: &Metrics,
    labels: &LabelVocab,
) -> std::io::Result<()> {
    writeln!(out, "{split}:")?;
    write_task(out, "sentiment", &m.sentiment, &labels.sentiment_names)?;
    write_task(out, "act", &m.act, &labels.act_names)
}

fn load_checkpoint(path: &Path) -> Result<(Darer, TokenVocab, LabelVocab)> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(Darer::load(path)?)
}

/// Scores a checkpoint on a corpus. Prints a table, then the metrics as one
/// JSON line.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    convention: &str,
    out: &mut dyn Write,
) -> Result<Metrics> {
    let convention: Convention = convention.parse()?;
    let (model, vocab, labels) = load_checkpoint(checkpoint)?;
    let corpus = load(data)?.remap_labels(&labels)?;
    let encoded = encode_all(&model, &corpus.dialogs, &vocab)?;
    let metrics = evaluate(&model, &encoded, convention, labels.neutral_sentiment)?;
    writeln!(out, "convention {convention}, {} dialogs", encoded.len())?;
    write_table(out, "eval", &metrics, &labels)?;
    writeln!(out, "{}", serde_json::to_string(&metrics)?)?;
    Ok(metrics)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    sentiments: Vec<&'a str>,
    acts: Vec<&'a str>,
}

/// Writes one JSON line of predicted label names per dialog.
pub fn cmd_predict(checkpoint: &Path, data: &Path, out: &mut dyn Write) -> Result<()> {
    let (model, vocab, labels) = load_checkpoint(checkpoint)?;
    let corpus = load(data)?;
    let encoded = encode_all(&model, &corpus.dialogs, &vocab)?;
    let preds = predict_all(&model, &encoded)?;
    for (d, (s, a)) in corpus.dialogs.iter().zip(&preds) {
        let line = PredictionLine {
            id: &d.id,
            sentiments: s
                .iter()
                .map(|&i| labels.sentiment_names[i].as_str())
                .collect(),
            acts: a.iter().map(|&i| labels.act_names[i].as_str()).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Generates a synthetic corpus file and prints label counts.
pub fn cmd_gen(config: &SynthConfig, path: &Path, out: &mut dyn Write) -> Result<Corpus> {
    let corpus = gen_synthetic(config)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_corpus(path, &corpus)?;
    let n_utt: usize = corpus.dialogs.iter().map(Dialog::len).sum();
    writeln!(
        out,
        "{} dialogs, {n_utt} utterances -> {}",
        corpus.dialogs.len(),
        path.display()
    )?;
    let labels = &corpus.labels;
    for (task, names, pick) in [
        (
            "sentiment",
            &labels.sentiment_names,
            (|u: &darer_core::Utterance| u.sentiment) as fn(&_) -> usize,
        ),
        ("act", &labels.act_names, |u: &darer_core::Utterance| u.act),
    ] {
        let mut counts = vec![0usize; names.len()];
        for u in corpus.dialogs.iter().flat_map(|d| &d.utterances) {
            counts[pick(u)] += 1;
        }
        let parts: Vec<String> = names
            .iter()
            .zip(&counts)
            .map(|(n, c)| format!("{n}={c}"))
            .collect();
        writeln!(out, "  {task}: {}", parts.join(" "))?;
    }
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Satg,
    Drtg,
}

impl std::str::FromStr for GraphKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "satg" => Ok(GraphKind::Satg),
            "drtg" => Ok(GraphKind::Drtg),
            other => Err(CliError::Usage(format!(
                "unknown graph {other:?} (expected satg or drtg)"
            ))),
        }
    }
}

/// Builds one dialog's graph, writes it as DOT (to `dot_path`, or to `out`
/// if none) and prints the edge count of every relation. Returns that
/// histogram.
pub fn cmd_inspect_graph(
    data: &Path,
    dialog_id: &str,
    which: GraphKind,
    n_speakers: Option<usize>,
    dot_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<Vec<usize>> {
    let corpus = load(data)?;
    let dialog = corpus
        .dialogs
        .iter()
        .find(|d| d.id == dialog_id)
        .ok_or_else(|| CliError::Usage(format!("no dialog with id {dialog_id:?}")))?;
    if dialog.is_empty() {
        return Err(CliError::Usage(format!(
            "dialog {dialog_id:?} has no utterances"
        )));
    }
    let config = DarerConfig {
        n_speakers: n_speakers.unwrap_or_else(|| dialog.n_speakers().max(2)),
        ..Default::default()
    };
    let n = dialog.len();
    let (graph, labels): (_, Vec<String>) = match which {
        GraphKind::Satg => (
            build_satg(&dialog.speakers(), config.satg_scheme())?,
            dialog
                .utterances
                .iter()
                .enumerate()
                .map(|(i, u)| format!("u{} (speaker {})", i + 1, u.speaker))
                .collect(),
        ),
        GraphKind::Drtg => (
            build_drtg(n, config.drtg_scheme())?,
            (0..2 * n)
                .map(|k| {
                    let (task, i) = drtg_node(k, n);
                    format!("{}{}", task.tag(), i + 1)
                })
                .collect(),
        ),
    };
    let dot = export_dot(&graph, &labels)?;
    match dot_path {
        Some(p) => fs::write(p, dot)?,
        None => out.write_all(dot.as_bytes())?,
    }
    let hist = graph.relation_histogram();
    for (r, c) in hist.iter().enumerate() {
        writeln!(out, "relation {:>2}: {c}", r + 1)?;
    }
    writeln!(out, "total: {}", graph.n_edges())?;
    Ok(hist)
}
