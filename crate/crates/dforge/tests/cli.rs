//! End-to-end checks of the `dforge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dforge::formats;
use dforge_core::corruptor::{apply_repetition, Tag, TagSequence};
use dforge_core::model::ModelConfig;
use dforge_core::rng::seeded;
use dforge_core::textproc::{build_vocab, Sentence};
use dforge_core::trainer::{self, HyperParams, PretrainData, TrainingTask};
use rand::Rng;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

/// Owned argument list from mixed string expressions.
macro_rules! args {
    ($($a:expr),* $(,)?) => { vec![$(($a).to_string()),*] };
}

fn dforge<S: AsRef<str>>(args: &[S]) -> Run {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_dforge"))
        .args(args.iter().map(AsRef::as_ref))
        .env_remove("DFORGE_SEED")
        .output()
        .expect("binary runs");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

fn ok<S: AsRef<str>>(args: &[S]) -> Run {
    let run = dforge(args);
    let shown: Vec<&str> = args.iter().map(AsRef::as_ref).collect();
    assert_eq!(run.code, 0, "dforge {shown:?} failed:\n{}", run.stderr);
    run
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// A synthetic corpus, vocabulary and n-gram index in `dir`.
fn prepare(dir: &Path, sentences: usize) {
    let n = sentences.to_string();
    ok(&["synth", "--sentences", &n, "--seed", "3", "--out", &p(dir, "raw.txt")]);
    ok(&["build-vocab", "--corpus", &p(dir, "raw.txt"), "--out", &p(dir, "vocab.tsv")]);
    ok(&["build-ngrams", "--corpus", &p(dir, "raw.txt"), "--out", &p(dir, "ngrams.bin"), "--seed", "3"]);
}

#[test]
fn tiny_corpus_gives_deterministic_vocab_ids() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), "The cat sat.\nThe dog sat!\nA cat ran.\n").unwrap();
    let run = ok(&["build-vocab", "--corpus", &p(dir.path(), "c.txt"), "--out", &p(dir.path(), "v.tsv")]);
    assert!(run.stdout.contains("vocab size 7"), "{}", run.stdout);
    let text = fs::read_to_string(dir.path().join("v.tsv")).unwrap();
    // Reserved entries, then kept tokens (frequency >= 2) by count then spelling.
    assert_eq!(text, "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\ncat\t4\nsat\t5\nthe\t6\n");
}

#[test]
fn missing_input_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "nowhere.txt");
    let run = dforge(&["build-vocab", "--corpus", &missing, "--out", &p(dir.path(), "v.tsv")]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains(&missing), "{}", run.stderr);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(dforge(&["build-vocab", "--no-such-flag", "1"]).code, 1);
    assert_eq!(dforge(&["frobnicate"]).code, 1);
    assert_eq!(dforge(&["build-vocab"]).code, 1);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.conf"), "[pretrain]\nwarmup = 10\n").unwrap();
    let run = dforge(&["pretrain", "--config", &p(dir.path(), "bad.conf")]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("warmup"), "{}", run.stderr);
    assert_eq!(dforge(&["sweep", "--grid", "1,x", "--out", "o.csv"]).code, 1);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 400);
    for run in ["1", "2"] {
        ok(&["build-ngrams", "--corpus", &p(d, "raw.txt"), "--out", &p(d, &format!("ng{run}.bin")), "--seed", "7"]);
        ok(&[
            "corrupt",
            "--corpus",
            &p(d, "raw.txt"),
            "--ngrams",
            &p(d, "ngrams.bin"),
            "--n-tagging",
            "100",
            "--n-pairs",
            "100",
            "--seed",
            "7",
            "--tagging-out",
            &p(d, &format!("t{run}.tsv")),
            "--pairs-out",
            &p(d, &format!("p{run}.tsv")),
        ]);
    }
    for (a, b) in [("ng1.bin", "ng2.bin"), ("t1.tsv", "t2.tsv"), ("p1.tsv", "p2.tsv")] {
        assert_eq!(fs::read(d.join(a)).unwrap(), fs::read(d.join(b)).unwrap(), "{a} vs {b}");
    }
}

#[test]
fn corrupt_tagging_mode_leaves_half_fluent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 300);
    let run = ok(&[
        "corrupt",
        "--corpus",
        &p(d, "raw.txt"),
        "--ngrams",
        &p(d, "ngrams.bin"),
        "--mode",
        "tagging",
        "--n-tagging",
        "100",
        "--tagging-out",
        &p(d, "t.tsv"),
    ]);
    assert!(run.stdout.contains("50 all-O"), "{}", run.stdout);
    let seqs = formats::read_tagging(&d.join("t.tsv")).unwrap();
    assert_eq!(seqs.len(), 100);
    assert_eq!(seqs.iter().filter(|s| s.labels.iter().all(|l| *l == Tag::O)).count(), 50);
    assert!(!d.join("p.tsv").exists());
}

#[test]
fn corrupt_pairs_mode_balances_labels_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 300);
    let seeds = 20;
    let mut totals = [0usize; 4];
    for seed in 0..seeds {
        let out = p(d, &format!("p{seed}.tsv"));
        ok(&args![
            "corrupt",
            "--corpus",
            p(d, "raw.txt"),
            "--ngrams",
            p(d, "ngrams.bin"),
            "--mode",
            "pairs",
            "--n-pairs",
            "100",
            "--pairs-out",
            out,
            "--seed",
            seed
        ]);
        let pairs = formats::read_pairs(Path::new(&out)).unwrap();
        assert_eq!(pairs.len(), 100);
        let add = pairs.iter().filter(|p| p.label.to_string().starts_with("add")).count();
        assert_eq!(add, 50, "add/del split is exact");
        for pair in &pairs {
            totals[pair.label.index()] += 1;
        }
    }
    // Each label is Binomial(50, 1/2) per seed; the mean over 20 seeds has
    // standard deviation 3.54 / sqrt(20) = 0.79.
    for (label, &t) in totals.iter().enumerate() {
        let mean = t as f64 / seeds as f64;
        assert!((mean - 25.0).abs() < 4.0 * 0.79, "label {label}: mean {mean}");
    }
}

#[test]
fn evaluate_pred_equal_to_gold_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--kind", "gold", "--sentences", "60", "--out", &p(d, "gold.tsv")]);
    let report = p(d, "report.jsonl");
    let run = ok(&["evaluate", "--gold", &p(d, "gold.tsv"), "--pred", &p(d, "gold.tsv"), "--report", &report]);
    let line = run.stdout.lines().last().unwrap();
    let json: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(json["f1"], 1.0);
    assert_eq!(json["p"], 1.0);
    assert_eq!(json["fp"], 0);
    assert_eq!(fs::read_to_string(&report).unwrap().trim(), line);
    assert!(run.stdout.contains("repet_f1"));
}

#[test]
fn evaluate_rejects_misaligned_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("g.tsv"), "a\tD\na\tO\nb\tO\n\n").unwrap();
    fs::write(d.join("p.tsv"), "a\tD\na\tO\n\n").unwrap();
    let run = dforge(&["evaluate", "--gold", &p(d, "g.tsv"), "--pred", &p(d, "p.tsv")]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("sentence 0"), "{}", run.stderr);
}

#[test]
fn config_file_with_flag_overrides_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), "The cat sat.\nThe dog sat!\nA cat ran.\n").unwrap();
    let conf = format!("[build-vocab]\ncorpus = {}\nout = {}\nmin-frequency = 1\n", p(d, "c.txt"), p(d, "v.tsv"));
    fs::write(d.join("run.conf"), conf).unwrap();
    let run = ok(&["build-vocab", "--config", &p(d, "run.conf"), "--min-frequency", "2"]);
    assert!(run.stderr.contains("min-frequency = 2"), "{}", run.stderr);
    assert!(run.stdout.contains("vocab size 7"));
    // The echo is itself a config file that reproduces the run.
    let echo: String = run.stderr.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    fs::write(d.join("echo.conf"), echo).unwrap();
    fs::remove_file(d.join("v.tsv")).unwrap();
    ok(&["build-vocab", "--config", &p(d, "echo.conf")]);
    assert!(d.join("v.tsv").exists());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = Command::new(env!("CARGO_BIN_EXE_dforge"))
        .args(["synth", "--sentences", "5", "--out", &p(d, "a.txt")])
        .env("DFORGE_SEED", "77")
        .output()
        .unwrap();
    assert!(String::from_utf8(run.stderr).unwrap().contains("seed = 77"));
    ok(&["synth", "--sentences", "5", "--out", &p(d, "b.txt"), "--seed", "77"]);
    assert_eq!(fs::read(d.join("a.txt")).unwrap(), fs::read(d.join("b.txt")).unwrap());
}

#[test]
fn finetune_without_init_is_the_random_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 300);
    ok(&["synth", "--kind", "gold", "--sentences", "40", "--seed", "4", "--out", &p(d, "gold.tsv")]);
    let run = ok(&args![
        "finetune",
        "--epochs",
        "2",
        "--out",
        p(d, "ft.ckpt"),
        "--log",
        p(d, "ft.csv"),
        "--vocab",
        p(d, "vocab.tsv"),
        "--train",
        p(d, "gold.tsv"),
        "--hidden",
        "16",
        "--heads",
        "2"
    ]);
    assert!(run.stdout.contains("random init"), "{}", run.stdout);
    let log = fs::read_to_string(d.join("ft.csv")).unwrap();
    assert!(log.starts_with(formats::LOG_HEADER));
    assert!(log.lines().skip(1).any(|l| l.contains(",finetune,")));
    assert!(log.lines().any(|l| l.contains(",epoch,")));
    let ckpt = formats::read_checkpoint(&d.join("ft.ckpt")).unwrap();
    assert!(!ckpt.params.has_classifier());
    // A checkpoint trained against another vocabulary is refused verbatim.
    fs::write(d.join("other.tsv"), "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\nzzz\t4\n").unwrap();
    let run = dforge(&[
        "evaluate",
        "--gold",
        &p(d, "gold.tsv"),
        "--checkpoint",
        &p(d, "ft.ckpt"),
        "--vocab",
        &p(d, "other.tsv"),
    ]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("does not match data vocabulary"), "{}", run.stderr);
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.ckpt"), b"DFCK\x01\x00").unwrap();
    fs::write(d.join("v.tsv"), "[PAD]\t0\n[UNK]\t1\n[CLS]\t2\n[SEP]\t3\n").unwrap();
    fs::write(d.join("in.txt"), "a b\n").unwrap();
    let run =
        dforge(&["tag", "--checkpoint", &p(d, "bad.ckpt"), "--vocab", &p(d, "v.tsv"), "--input", &p(d, "in.txt")]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("corrupt checkpoint"), "{}", run.stderr);
}

/// Sentences over `letters` with no token equal to its neighbor.
fn letter_sentence(rng: &mut impl Rng, letters: &[&str]) -> Sentence {
    let len = rng.gen_range(2..=6);
    let mut out: Vec<String> = Vec::with_capacity(len);
    while out.len() < len {
        let t = letters[rng.gen_range(0..letters.len())];
        if out.last().map(String::as_str) != Some(t) {
            out.push(t.to_string());
        }
    }
    Sentence::new(out).unwrap()
}

#[test]
fn tag_marks_the_first_copy_of_a_repetition() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let letters = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let mut rng = seeded(11, 0);
    let sentences: Vec<Sentence> = (0..8000).map(|_| letter_sentence(&mut rng, &letters)).collect();
    let vocab = build_vocab(&sentences, 1).unwrap();
    let examples: Vec<TagSequence> = sentences
        .iter()
        .map(|s| {
            if rng.gen_bool(0.5) {
                TagSequence::fluent(s)
            } else {
                apply_repetition(s, rng.gen_range(0..s.len()), 1).unwrap().into_sequence()
            }
        })
        .collect();
    let items = dforge::pipeline::encode_tagging(&examples, &vocab);
    let config = ModelConfig { max_len: 16, ..ModelConfig::toy(vocab.len()) };
    let hyper = HyperParams { batch_size: 32, epochs: 8, seed: 5, ..HyperParams::pretrain_toy() };
    let data = PretrainData { tagging: &items, pairs: &[], heldout_tagging: &[], heldout_pairs: &[] };
    let ckpt = trainer::pretrain(&config, &hyper, TrainingTask::Tagging, data, vocab.fingerprint(), &mut ()).unwrap();
    formats::write_checkpoint(&d.join("rep.ckpt"), &ckpt).unwrap();
    fs::write(d.join("vocab.tsv"), formats::format_vocab(&vocab)).unwrap();
    fs::write(d.join("in.txt"), "a a b\n").unwrap();
    let run =
        ok(&["tag", "--checkpoint", &p(d, "rep.ckpt"), "--vocab", &p(d, "vocab.tsv"), "--input", &p(d, "in.txt")]);
    assert_eq!(run.stdout, "a\tD\na\tO\nb\tO\n\n");
}

#[test]
fn one_point_sweep_equals_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 300);
    ok(&["synth", "--kind", "gold", "--sentences", "40", "--seed", "4", "--out", &p(d, "train.tsv")]);
    ok(&["synth", "--kind", "gold", "--sentences", "30", "--seed", "5", "--out", &p(d, "test.tsv")]);
    let model = args!["--hidden", "16", "--heads", "2", "--layers", "1"];
    let mut sweep = args![
        "sweep",
        "--axis",
        "pseudo-data-size",
        "--grid",
        "0",
        "--seed",
        "9",
        "--corpus",
        p(d, "raw.txt"),
        "--vocab",
        p(d, "vocab.tsv"),
        "--gold-train",
        p(d, "train.tsv"),
        "--gold-test",
        p(d, "test.tsv"),
        "--finetune-epochs",
        "2",
        "--out",
        p(d, "curve.csv"),
    ];
    sweep.extend(model.iter().cloned());
    ok(&sweep);
    let csv = fs::read_to_string(d.join("curve.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let point_seed = dforge::sweep::point_seeds(9, 1)[0].to_string();
    assert_eq!(row[..3], ["pseudo-data-size", "0", point_seed.as_str()]);

    let mut finetune = args![
        "finetune",
        "--vocab",
        p(d, "vocab.tsv"),
        "--train",
        p(d, "train.tsv"),
        "--epochs",
        "2",
        "--seed",
        point_seed,
        "--out",
        p(d, "single.ckpt"),
    ];
    finetune.extend(model);
    ok(&finetune);
    let run = ok(&[
        "evaluate",
        "--gold",
        &p(d, "test.tsv"),
        "--checkpoint",
        &p(d, "single.ckpt"),
        "--vocab",
        &p(d, "vocab.tsv"),
    ]);
    let json: serde_json::Value = serde_json::from_str(run.stdout.lines().last().unwrap()).unwrap();
    let f1: f64 = row[5].parse().unwrap();
    assert_eq!(f1, json["f1"].as_f64().unwrap());
}

#[test]
fn failing_sweep_points_become_nan_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d, 300);
    ok(&["synth", "--kind", "gold", "--sentences", "20", "--out", &p(d, "gold.tsv")]);
    // 5000 pseudo examples need more sentences than the corpus holds.
    let run = ok(&[
        "sweep",
        "--axis",
        "pseudo-data-size",
        "--grid",
        "0,5000",
        "--corpus",
        &p(d, "raw.txt"),
        "--gold-train",
        &p(d, "gold.tsv"),
        "--gold-test",
        &p(d, "gold.tsv"),
        "--finetune-epochs",
        "1",
        "--hidden",
        "16",
        "--heads",
        "2",
        "--out",
        &p(d, "curve.csv"),
    ]);
    assert!(run.stdout.contains("1 failed"), "{}", run.stdout);
    let csv = fs::read_to_string(d.join("curve.csv")).unwrap();
    let failed = csv.lines().find(|l| l.contains(",5000,")).unwrap();
    assert!(failed.contains("NaN,NaN,NaN,corpus exhausted"), "{failed}");
}
