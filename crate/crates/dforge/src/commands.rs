//! One function per subcommand. Each takes a resolved [`RunConfig`], does
//! its work and prints a short summary to stdout.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dforge_core::corruptor::{build_ngram_index, Tag, TagSequence, MAX_SPAN};
use dforge_core::eval::EvalReport;
use dforge_core::textproc::{build_vocab, normalize};
use dforge_core::trainer::{self, FinetuneData, PretrainData, TrainError, TrainingTask};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{self, CsvLog};
use crate::pipeline;
use crate::{sweep, synth};

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        "synth" => cmd_synth(cfg),
        "build-vocab" => cmd_build_vocab(cfg),
        "build-ngrams" => cmd_build_ngrams(cfg),
        "corrupt" => cmd_corrupt(cfg),
        "pretrain" => cmd_pretrain(cfg),
        "finetune" => cmd_finetune(cfg),
        "evaluate" => cmd_evaluate(cfg).map(|_| ()),
        "tag" => cmd_tag(cfg),
        "sweep" => sweep::cmd_sweep(cfg),
        other => Err(Error::usage(format!("unknown command {other:?}"))),
    }
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require_path("out")?;
    let (n, seed) = (cfg.usize("sentences")?, cfg.seed()?);
    match cfg.str("kind") {
        "raw" => {
            let mut text = synth::raw_corpus(n, seed).join("\n");
            text.push('\n');
            formats::write_bytes(&out, text.as_bytes())?;
            println!("wrote {n} raw sentences to {}", out.display());
        }
        "gold" => {
            let gold = synth::gold_corpus(n, seed);
            let text = formats::format_tagging(gold.iter().map(|s| (&s.tokens[..], &s.labels[..])));
            formats::write_bytes(&out, text.as_bytes())?;
            let disfluent = gold.iter().filter(|s| s.labels.contains(&Tag::D)).count();
            println!("wrote {n} gold sentences ({disfluent} disfluent) to {}", out.display());
        }
        other => return Err(Error::usage(format!("kind must be raw or gold, got {other:?}"))),
    }
    Ok(())
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<()> {
    let corpus = formats::read_corpus(&cfg.require_path("corpus")?)?;
    let out = cfg.require_path("out")?;
    let min_frequency: u32 =
        cfg.u64("min-frequency")?.try_into().map_err(|_| Error::usage("min-frequency too large"))?;
    let vocab = build_vocab(&corpus, min_frequency)?;
    formats::write_bytes(&out, formats::format_vocab(&vocab).as_bytes())?;
    println!("vocab size {} (min frequency {min_frequency}) from {} sentences", vocab.len(), corpus.len());
    Ok(())
}

pub fn cmd_build_ngrams(cfg: &RunConfig) -> Result<()> {
    let corpus = formats::read_corpus(&cfg.require_path("corpus")?)?;
    let out = cfg.require_path("out")?;
    let index = build_ngram_index(corpus, cfg.usize("capacity")?, cfg.seed()?)?;
    formats::write_bytes(&out, &formats::ngrams_to_bytes(&index))?;
    let counts: Vec<String> = (1..=MAX_SPAN).map(|m| format!("{m}:{}", index.count(m))).collect();
    println!("n-gram counts {} ({} distinct tokens)", counts.join(" "), index.table().len());
    Ok(())
}

pub fn cmd_corrupt(cfg: &RunConfig) -> Result<()> {
    let corpus_path = cfg.require_path("corpus")?;
    let ngrams = formats::read_ngrams(&cfg.require_path("ngrams")?)?;
    let (want_tagging, want_pairs) = match cfg.str("mode") {
        "tagging" => (true, false),
        "pairs" => (false, true),
        "both" => (true, true),
        other => return Err(Error::usage(format!("mode must be tagging, pairs or both, got {other:?}"))),
    };
    let n_tagging = if want_tagging { cfg.usize("n-tagging")? } else { 0 };
    let n_pairs = if want_pairs { cfg.usize("n-pairs")? } else { 0 };
    let tagging_out = if want_tagging { Some(cfg.require_path("tagging-out")?) } else { None };
    let pairs_out = if want_pairs { Some(cfg.require_path("pairs-out")?) } else { None };
    let corpus = formats::read_corpus(&corpus_path)?;
    let data = pipeline::pseudo_data(&corpus, cfg.usize("skip")?, &ngrams, n_tagging, n_pairs, cfg.seed()?)?;

    if let Some(path) = tagging_out {
        let text = formats::format_tagging(data.tagging.iter().map(|e| (&e.tokens[..], &e.labels[..])));
        formats::write_bytes(&path, text.as_bytes())?;
        let fluent = data.tagging.iter().filter(|e| e.is_fluent()).count();
        let tokens: usize = data.tagging.iter().map(|e| e.tokens.len()).sum();
        let d: usize = data.tagging.iter().map(|e| e.labels.iter().filter(|l| **l == Tag::D).count()).sum();
        println!(
            "tagging: {} sentences, {fluent} all-O, {} corrupted; {d} of {tokens} tokens labeled D ({:.1}%)",
            data.tagging.len(),
            data.tagging.len() - fluent,
            100.0 * d as f64 / tokens.max(1) as f64
        );
    }
    if let Some(path) = pairs_out {
        formats::write_bytes(&path, formats::format_pairs(&data.pairs).as_bytes())?;
        let mut by_label: BTreeMap<String, usize> = BTreeMap::new();
        for p in &data.pairs {
            *by_label.entry(p.label.to_string()).or_default() += 1;
        }
        let summary: Vec<String> = by_label.iter().map(|(l, n)| format!("{l}={n}")).collect();
        println!("pairs: {} ({})", data.pairs.len(), summary.join(" "));
    }
    println!("consumed {} corpus sentences", data.consumed);
    Ok(())
}

fn read_tagging_opt(path: Option<PathBuf>) -> Result<Vec<TagSequence>> {
    path.map_or(Ok(Vec::new()), |p| formats::read_tagging(&p))
}

/// Writes the last good parameters next to `out` when training diverged.
fn save_last_good(out: &Path, err: TrainError) -> Error {
    if let TrainError::Diverged { last_good, .. } = &err {
        let mut name = out.as_os_str().to_owned();
        name.push(".last-good");
        let path = PathBuf::from(name);
        if formats::write_checkpoint(&path, last_good).is_ok() {
            return Error::from(err).context(format!("last good checkpoint saved to {}", path.display()));
        }
    }
    err.into()
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let vocab = formats::read_vocab(&cfg.require_path("vocab")?)?;
    let out = cfg.require_path("out")?;
    let task = match cfg.str("task") {
        "multi" => TrainingTask::Multi,
        "tagging" => TrainingTask::Tagging,
        "classification" => TrainingTask::Classification,
        other => return Err(Error::usage(format!("task must be multi, tagging or classification, got {other:?}"))),
    };
    let config = cfg.model_config(vocab.len())?;
    let hyper = cfg.hyper("")?;
    let tagging = match task {
        TrainingTask::Classification => Vec::new(),
        _ => formats::read_tagging(&cfg.require_path("tagging")?)?,
    };
    let pairs = match task {
        TrainingTask::Tagging => Vec::new(),
        _ => formats::read_pairs(&cfg.require_path("pairs")?)?,
    };
    let heldout_tagging = read_tagging_opt(cfg.path("heldout-tagging"))?;
    let heldout_pairs = match cfg.path("heldout-pairs") {
        Some(p) => formats::read_pairs(&p)?,
        None => Vec::new(),
    };
    let (tag_items, pair_items) = (pipeline::encode_tagging(&tagging, &vocab), pipeline::encode_pairs(&pairs, &vocab));
    let heldout_tag_items = pipeline::encode_tagging(&heldout_tagging, &vocab);
    let heldout_pair_items = pipeline::encode_pairs(&heldout_pairs, &vocab);
    let data = PretrainData {
        tagging: &tag_items,
        pairs: &pair_items,
        heldout_tagging: &heldout_tag_items,
        heldout_pairs: &heldout_pair_items,
    };
    let mut log = CsvLog::create(cfg.path("log").as_deref(), false)?;
    let ckpt = trainer::pretrain(&config, &hyper, task, data, vocab.fingerprint(), &mut log)
        .map_err(|e| save_last_good(&out, e))?;
    log.finish()?;
    formats::write_checkpoint(&out, &ckpt)?;
    let last = ckpt.metadata.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "pre-trained {} parameters for {} epochs (final mean loss {last:.4}); checkpoint {}",
        ckpt.params.parameter_count(),
        hyper.epochs,
        out.display()
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let vocab = formats::read_vocab(&cfg.require_path("vocab")?)?;
    let out = cfg.require_path("out")?;
    let train = formats::read_tagging(&cfg.require_path("train")?)?;
    let dev = read_tagging_opt(cfg.path("dev"))?;
    let init = cfg.path("init-checkpoint").map(|p| formats::read_checkpoint(&p)).transpose()?;
    let config = cfg.model_config(vocab.len())?;
    let hyper = cfg.hyper("")?;
    let (train_items, dev_items) = (pipeline::encode_tagging(&train, &vocab), pipeline::encode_tagging(&dev, &vocab));
    let data = FinetuneData { train: &train_items, dev: &dev_items };
    let mut log = CsvLog::create(cfg.path("log").as_deref(), false)?;
    let ckpt = trainer::finetune(init.as_ref(), &config, &hyper, data, vocab.fingerprint(), &mut log)
        .map_err(|e| save_last_good(&out, e))?;
    log.finish()?;
    formats::write_checkpoint(&out, &ckpt)?;
    let arm = if init.is_some() { "pre-trained" } else { "random" };
    println!("fine-tuned from {arm} init; kept epoch {}; checkpoint {}", ckpt.metadata.epoch, out.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let gold = formats::read_tagging(&cfg.require_path("gold")?)?;
    let ckpt = cfg.path("checkpoint").map(|p| formats::read_checkpoint(&p)).transpose()?;
    let vocab = match (&ckpt, cfg.path("vocab")) {
        (Some(c), Some(p)) => {
            let v = formats::read_vocab(&p)?;
            pipeline::check_vocab(c, &v)?;
            Some(v)
        }
        (Some(_), None) => return Err(Error::usage("--vocab is required with --checkpoint")),
        (None, _) => None,
    };
    let mut report = match (cfg.path("pred"), &ckpt, &vocab) {
        (Some(pred), _, _) => pipeline::score_sequences(&formats::read_tagging(&pred)?, &gold)?,
        (None, Some(c), Some(v)) => pipeline::evaluate_model(&c.params, &gold, v)?,
        _ => return Err(Error::usage("either --pred or --checkpoint is required")),
    };
    if let Some(pairs_path) = cfg.path("pairs") {
        let (Some(c), Some(v)) = (&ckpt, &vocab) else {
            return Err(Error::usage("--pairs needs --checkpoint and --vocab"));
        };
        let pairs = formats::read_pairs(&pairs_path)?;
        let items = pipeline::encode_pairs(&pairs, v);
        report.pair_accuracy = Some(trainer::pair_accuracy(&c.params, &items, c.config().max_len)?);
    }
    print!("{}", formats::report_table(&report));
    let line = formats::report_json(&report);
    println!("{line}");
    if let Some(path) = cfg.path("report") {
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

pub fn cmd_tag(cfg: &RunConfig) -> Result<()> {
    let ckpt = formats::read_checkpoint(&cfg.require_path("checkpoint")?)?;
    let vocab = formats::read_vocab(&cfg.require_path("vocab")?)?;
    pipeline::check_vocab(&ckpt, &vocab)?;
    let text = formats::read_text(&cfg.require_path("input")?)?;
    let sentences: Vec<_> = text.lines().filter_map(normalize).collect();
    let tokens: Vec<&[String]> = sentences.iter().map(|s| s.tokens()).collect();
    let labels = pipeline::predict(&ckpt.params, &tokens, &vocab)?;
    let out = formats::format_tagging(tokens.iter().copied().zip(labels.iter().map(|l| &l[..])));
    match cfg.path("out") {
        Some(path) => formats::write_bytes(&path, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}
