//! Acceptance criteria 1 to 11, run in order. Each prints one line; the
//! process fails if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dforge::{formats, pipeline, synth};
use dforge_core::checkpoint::TrainingTask;
use dforge_core::corruptor::{
    apply_additions, build_ngram_index, build_pretraining_corpus, corrupt_for_tagging, make_pair, NgramIndex, PairKind,
    PairLabel, Perturbation, Tag, TagSequence,
};
use dforge_core::eval::{category_prf, split_disfluency_spans, token_prf, SpanKind};
use dforge_core::model::{check_gradients, joint_loss, EncodedBatch, ModelConfig, ModelParameters};
use dforge_core::rng::seeded;
use dforge_core::textproc::{build_vocab, Sentence, Vocabulary, DEFAULT_MIN_FREQUENCY};
use dforge_core::trainer::{
    finetune, mixed_batch_sampler, pretrain, Checkpoint, FinetuneData, HyperParams, PairItem, PretrainData, TagItem,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn corpus_sentences(n: usize, seed: u64) -> Vec<Sentence> {
    synth::corpus(n, seed)
}

fn small_ngrams(corpus: &[Sentence]) -> NgramIndex {
    build_ngram_index(corpus.iter().cloned(), 10_000, 5).unwrap()
}

fn c1_round_trip() -> Outcome {
    let start = Instant::now();
    let corpus = corpus_sentences(10_000, 11);
    let ngrams = small_ngrams(&corpus);
    let mut rng = seeded(11, 1);
    let mut failures = 0;
    for s in &corpus {
        let ex = corrupt_for_tagging(s, &ngrams, &mut rng);
        let kept: Vec<&String> =
            ex.tokens.iter().zip(&ex.labels).filter(|(_, l)| **l == Tag::O).map(|(t, _)| t).collect();
        if kept.len() != s.len() || kept.iter().zip(s.tokens()).any(|(a, b)| *a != b) || ex.source != *s {
            failures += 1;
        }
    }
    let t = start.elapsed();
    check(
        failures == 0 && t < Duration::from_secs(10),
        format!("{} examples, {failures} failures, {:.2}s", corpus.len(), secs(t)),
    )
}

/// True when `short` can be obtained from `long` by deleting tokens.
fn is_subsequence(short: &[String], long: &[String]) -> bool {
    let mut it = long.iter();
    short.iter().all(|s| it.any(|l| l == s))
}

fn c2_pair_soundness() -> Outcome {
    let corpus = corpus_sentences(10_500, 12);
    let ngrams = small_ngrams(&corpus);
    let mut rng = seeded(12, 1);
    let (mut checked, mut failures) = (0, 0);
    for (i, s) in corpus.iter().filter(|s| s.len() >= 2).take(10_000).enumerate() {
        let kind = if i % 2 == 0 { PairKind::Add } else { PairKind::Del };
        let pair = make_pair(s, kind, &ngrams, &mut rng).unwrap();
        let (a, b) = (pair.s1.tokens(), pair.s2.tokens());
        // The sentence that is not the original was derived from it.
        let derived_first = a != s.tokens();
        let (derived, original) = if derived_first { (a, b) } else { (b, a) };
        let added = derived.len() > original.len() && is_subsequence(original, derived);
        let deleted = derived.len() < original.len() && is_subsequence(derived, original);
        let expected = match (added, deleted, derived_first) {
            (true, false, true) => Some(PairLabel::Add0),
            (true, false, false) => Some(PairLabel::Add1),
            (false, true, true) => Some(PairLabel::Del0),
            (false, true, false) => Some(PairLabel::Del1),
            _ => None,
        };
        checked += 1;
        if original != s.tokens() || expected != Some(pair.label) {
            failures += 1;
        }
    }
    check(checked == 10_000 && failures == 0, format!("{checked} pairs, {failures} disagreements"))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig { max_len: 16, ..ModelConfig::new(2, 8, 2, 12) };
    let mut worst = (0.0f64, String::new());
    for tagging in [true, false] {
        for (name, report) in check_gradients(&config, tagging, 21).map_err(|e| e.to_string())? {
            if report.max_rel_err > worst.0 {
                worst =
                    (report.max_rel_err, format!("{name} ({})", if tagging { "tagging" } else { "classification" }));
            }
        }
    }
    let t = start.elapsed();
    check(
        worst.0 < 1e-3 && t < Duration::from_secs(120),
        format!("max relative error {:.2e} at {}, {:.1}s", worst.0, worst.1, secs(t)),
    )
}

fn c4_metric_oracle() -> Outcome {
    let mut rng = seeded(14, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let sentences = rng.gen_range(1..8);
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        let (mut p_set, mut g_set) = (BTreeSet::new(), BTreeSet::new());
        let density = rng.gen_range(0.0..0.6);
        for s in 0..sentences {
            let len = rng.gen_range(1..12);
            let mut p = Vec::new();
            let mut g = Vec::new();
            for i in 0..len {
                let pd = rng.gen_bool(density);
                let gd = rng.gen_bool(density);
                if pd {
                    p_set.insert((s, i));
                }
                if gd {
                    g_set.insert((s, i));
                }
                p.push(if pd { Tag::D } else { Tag::O });
                g.push(if gd { Tag::D } else { Tag::O });
            }
            pred.push(p);
            gold.push(g);
        }
        let tp = p_set.intersection(&g_set).count();
        let precision = if p_set.is_empty() { 0.0 } else { tp as f64 / p_set.len() as f64 };
        let recall = if g_set.is_empty() { 0.0 } else { tp as f64 / g_set.len() as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let got = token_prf(&pred, &gold).map_err(|e| e.to_string())?;
        if (got.precision, got.recall, got.f1) != (precision, recall, f1) {
            mismatches += 1;
        }
    }
    // Gold D at positions 1, 2, 3; predicted D at 1 and 4.
    let gold = [vec![Tag::O, Tag::D, Tag::D, Tag::D, Tag::O]];
    let pred = [vec![Tag::O, Tag::D, Tag::O, Tag::O, Tag::D]];
    let worked = token_prf(&pred, &gold).map_err(|e| e.to_string())?;
    let worked_ok = worked.precision == 0.5 && worked.recall == 1.0 / 3.0 && worked.f1 == 0.4;
    check(
        mismatches == 0 && worked_ok,
        format!(
            "1000 corpora, {mismatches} mismatches; worked example P={} R={} F1={}",
            worked.precision, worked.recall, worked.f1
        ),
    )
}

fn random_ids(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(4..vocab as u32)).collect()
}

fn c5_additivity() -> Outcome {
    let vocab = 40;
    let config = ModelConfig { max_len: 32, ..ModelConfig::new(2, 16, 2, vocab) };
    let params = ModelParameters::<f64>::init(&config, 15, true).map_err(|e| e.to_string())?;
    let mut rng = seeded(15, 1);
    let mut worst = 0.0f64;
    for step in 0..100 {
        let n_tag = rng.gen_range(1..5);
        let tags: Vec<(Vec<u32>, Vec<usize>)> = (0..n_tag)
            .map(|_| {
                let len = rng.gen_range(1..10);
                (random_ids(&mut rng, len, vocab), (0..len).map(|_| rng.gen_range(0..2)).collect())
            })
            .collect();
        let n_pair = rng.gen_range(1..8);
        let pairs: Vec<(Vec<u32>, Vec<u32>, usize)> = (0..n_pair)
            .map(|_| {
                let (m, n) = (rng.gen_range(1..10), rng.gen_range(1..10));
                (random_ids(&mut rng, m, vocab), random_ids(&mut rng, n, vocab), rng.gen_range(0..4))
            })
            .collect();
        let tb = EncodedBatch::single(
            &tags.iter().map(|(i, l)| (i.as_slice(), Some(l.as_slice()))).collect::<Vec<_>>(),
            config.max_len,
        );
        let pb = EncodedBatch::pairs(
            &pairs.iter().map(|(a, b, l)| (a.as_slice(), b.as_slice(), Some(*l))).collect::<Vec<_>>(),
            config.max_len,
        );
        let seed = Some(step);
        let joint = joint_loss(&params, Some(&tb), Some(&pb), seed).map_err(|e| e.to_string())?;
        let tag = joint_loss(&params, Some(&tb), None, seed).map_err(|e| e.to_string())?.loss;
        let cl = joint_loss(&params, None, Some(&pb), seed).map_err(|e| e.to_string())?.loss;
        worst = worst.max((joint.loss - (tag + cl)).abs());
    }
    check(worst <= 1e-12, format!("100 batches, max |joint - (tag + cl)| = {worst:.1e}"))
}

fn c6_batch_composition() -> Outcome {
    let hyper = HyperParams { batch_size: 256, ..HyperParams::pretrain_toy() };
    let (per_tag, per_pair) = hyper.batch_split();
    let batches = mixed_batch_sampler(5_000, 9_000, per_tag, per_pair, 16, 0).map_err(|e| e.to_string())?;
    let bad = batches.iter().filter(|b| b.tagging.len() != 76 || b.pairs.len() != 180).count();
    check(
        (per_tag, per_pair) == (76, 180) && bad == 0,
        format!("split {per_tag}+{per_pair}, {} batches, {bad} off", batches.len()),
    )
}

/// Pre-training material for criteria 7 to 9.
struct Pseudo {
    vocab: Vocabulary,
    tagging: Vec<TagItem>,
    pairs: Vec<PairItem>,
    heldout_tagging: Vec<TagItem>,
    heldout_pairs: Vec<PairItem>,
}

const PSEUDO_TRAIN: usize = 50_000;
const PSEUDO_HELDOUT: usize = 1_000;
const CORPUS_SENTENCES: usize = 110_000;

fn pseudo_data() -> Pseudo {
    let corpus = corpus_sentences(CORPUS_SENTENCES, 7);
    let vocab = build_vocab(&corpus, DEFAULT_MIN_FREQUENCY).unwrap();
    let ngrams = build_ngram_index(corpus.iter().cloned(), 1_000_000, 7).unwrap();
    let n = PSEUDO_TRAIN + PSEUDO_HELDOUT;
    let built = build_pretraining_corpus(corpus, n, n, &ngrams, &mut seeded(7, 1)).unwrap();
    let seqs: Vec<TagSequence> = built.tagging.into_iter().map(|e| e.into_sequence()).collect();
    let mut tagging = pipeline::encode_tagging(&seqs, &vocab);
    let mut pairs = pipeline::encode_pairs(&built.pairs, &vocab);
    let heldout_tagging = tagging.split_off(PSEUDO_TRAIN);
    let heldout_pairs = pairs.split_off(PSEUDO_TRAIN);
    Pseudo { vocab, tagging, pairs, heldout_tagging, heldout_pairs }
}

fn pretrain_on(p: &Pseudo, task: TrainingTask) -> Result<Checkpoint, String> {
    let data = PretrainData {
        tagging: &p.tagging,
        pairs: if task == TrainingTask::Tagging { &[] } else { &p.pairs },
        heldout_tagging: &[],
        heldout_pairs: &[],
    };
    let hyper = HyperParams { seed: 7, ..HyperParams::pretrain_toy() };
    pretrain(&ModelConfig::toy(p.vocab.len()), &hyper, task, data, p.vocab.fingerprint(), &mut ())
        .map_err(|e| e.to_string())
}

fn c7_learnability(p: &Pseudo, multi: &Result<Checkpoint, String>, elapsed: Duration) -> Outcome {
    let ckpt = multi.as_ref().map_err(Clone::clone)?;
    let max_len = ckpt.config().max_len;
    let f1 = dforge_core::trainer::tagging_f1(&ckpt.params, &p.heldout_tagging, max_len).map_err(|e| e.to_string())?;
    let acc =
        dforge_core::trainer::pair_accuracy(&ckpt.params, &p.heldout_pairs, max_len).map_err(|e| e.to_string())?;
    check(
        f1 >= 0.90 && acc >= 0.95 && elapsed <= Duration::from_secs(30 * 60),
        format!("held-out tagging F1 {f1:.4}, pair accuracy {acc:.4}, {:.1} min", secs(elapsed) / 60.0),
    )
}

/// Synthetic gold benchmark shared by criteria 8 and 9.
struct Gold {
    pool: Vec<TagSequence>,
    dev: Vec<TagSequence>,
    test: Vec<TagSequence>,
}

const GOLD_TRAIN: usize = 200;
const SEEDS: [u64; 3] = [1, 2, 3];

fn gold_data() -> Gold {
    Gold { pool: synth::gold_corpus(2_000, 81), dev: synth::gold_corpus(200, 82), test: synth::gold_corpus(1_000, 83) }
}

/// Test-set F1 after fine-tuning from `init` (random when `None`) with
/// each seed.
fn finetune_arm(init: Option<&Checkpoint>, vocab: &Vocabulary, gold: &Gold) -> Result<Vec<f64>, String> {
    let config = ModelConfig::toy(vocab.len());
    let dev = pipeline::encode_tagging(&gold.dev, vocab);
    SEEDS
        .iter()
        .map(|&seed| {
            let train = pipeline::encode_tagging(&pipeline::subsample(&gold.pool, GOLD_TRAIN, seed), vocab);
            let hyper = HyperParams { seed, ..HyperParams::finetune_toy() };
            let data = FinetuneData { train: &train, dev: &dev };
            let ckpt =
                finetune(init, &config, &hyper, data, vocab.fingerprint(), &mut ()).map_err(|e| e.to_string())?;
            Ok(pipeline::evaluate_model(&ckpt.params, &gold.test, vocab).map_err(|e| e.to_string())?.f1)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn show(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

fn c8_transfer(pretrained: &Result<Vec<f64>, String>, random: &Result<Vec<f64>, String>, t: Duration) -> Outcome {
    let (pre, rnd) = (pretrained.as_ref().map_err(Clone::clone)?, random.as_ref().map_err(Clone::clone)?);
    let gap = 100.0 * (mean(pre) - mean(rnd));
    check(
        gap >= 10.0 && t < Duration::from_secs(15 * 60),
        format!(
            "pretrained {:.1} ({}) vs random {:.1} ({}), gap {gap:.1} points, {:.1} min",
            100.0 * mean(pre),
            show(pre),
            100.0 * mean(rnd),
            show(rnd),
            secs(t) / 60.0
        ),
    )
}

fn c9_multitask(
    multi: &Result<Vec<f64>, String>,
    tagging: &Result<Vec<f64>, String>,
    random: &Result<Vec<f64>, String>,
) -> Outcome {
    let m = mean(multi.as_ref().map_err(Clone::clone)?);
    let t = mean(tagging.as_ref().map_err(Clone::clone)?);
    let r = mean(random.as_ref().map_err(Clone::clone)?);
    check(
        m >= t && t >= r && m - r >= 0.05,
        format!("multi {:.1} >= tagging {:.1} >= random {:.1}", 100.0 * m, 100.0 * t, 100.0 * r),
    )
}

fn c10_determinism() -> Outcome {
    let corpus = corpus_sentences(3_000, 10);
    let ngram_bytes =
        |seed| formats::ngrams_to_bytes(&build_ngram_index(corpus.iter().cloned(), 50_000, seed).unwrap());
    let ngrams_same = ngram_bytes(3) == ngram_bytes(3);
    let ngrams = build_ngram_index(corpus.iter().cloned(), 50_000, 3).unwrap();
    let files = |seed| {
        let built = pipeline::pseudo_data(&corpus, 0, &ngrams, 400, 400, seed).unwrap();
        let seqs: Vec<TagSequence> = built.tagging.iter().map(|e| e.sequence()).collect();
        let tagging = formats::format_tagging(seqs.iter().map(|s| (&s.tokens[..], &s.labels[..])));
        (tagging, formats::format_pairs(&built.pairs))
    };
    let data_same = files(4) == files(4);

    let vocab = build_vocab(&corpus, DEFAULT_MIN_FREQUENCY).unwrap();
    let built = pipeline::pseudo_data(&corpus, 0, &ngrams, 300, 300, 4).unwrap();
    let seqs: Vec<TagSequence> = built.tagging.into_iter().map(|e| e.into_sequence()).collect();
    let tagging = pipeline::encode_tagging(&seqs, &vocab);
    let pairs = pipeline::encode_pairs(&built.pairs, &vocab);
    let config = ModelConfig::new(1, 16, 2, vocab.len());
    let hyper = HyperParams { epochs: 2, batch_size: 32, seed: 10, ..HyperParams::pretrain_toy() };
    let run = || {
        let data = PretrainData { tagging: &tagging, pairs: &pairs, heldout_tagging: &[], heldout_pairs: &[] };
        pretrain(&config, &hyper, TrainingTask::Multi, data, vocab.fingerprint(), &mut ()).unwrap().to_bytes()
    };
    let first = run();
    let ckpt_same = first == run();
    let reloaded = Checkpoint::from_bytes(&first).map_err(|e| e.to_string())?.to_bytes();
    let stable = reloaded == first;
    check(
        ngrams_same && data_same && ckpt_same && stable,
        format!(
            "n-gram files {ngrams_same}, dataset files {data_same}, checkpoints {ckpt_same}, save-load-save {stable}"
        ),
    )
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// `D` where the mask has `D`, `O` elsewhere.
fn mask(s: &str) -> Vec<Tag> {
    s.split_whitespace().map(|c| if c == "D" { Tag::D } else { Tag::O }).collect()
}

fn c11_categories() -> Outcome {
    // Ten templates, five copies each. Per template: tokens, gold, prediction,
    // then hand-counted (rep tp, rep fn, non tp, non fn, fp).
    let templates: [(&str, &str, &str, [u64; 5]); 10] = [
        ("i i want it", "D O O O", "D O O O", [1, 0, 0, 0, 0]),
        ("we want let us go", "D D O O O", "D O O O O", [0, 0, 1, 1, 0]),
        ("the cat the cat sat", "D D O O O", "D D O O O", [2, 0, 0, 0, 0]),
        ("the dog the cat sat", "D D O O O", "O D O O D", [0, 0, 1, 1, 1]),
        ("a b a b c", "D D O O O", "O O O O O", [0, 2, 0, 0, 0]),
        ("go to to the store", "O D O O O", "O D D O O", [1, 0, 0, 0, 1]),
        ("it was is good", "O D O O", "O D O O", [0, 0, 1, 0, 0]),
        ("so so i think i think", "D O D D O O", "D O D O O O", [2, 1, 0, 0, 0]),
        ("he said she said yes", "D O O O O", "D D O O O", [0, 0, 1, 0, 1]),
        ("we we went home", "D O O O", "O O O D", [0, 1, 0, 0, 1]),
    ];
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut expected = [0u64; 5];
    for (tokens, g, p, counts) in templates {
        for _ in 0..5 {
            gold.push((toks(tokens), mask(g)));
            pred.push(mask(p));
        }
        for (e, c) in expected.iter_mut().zip(counts) {
            *e += 5 * c;
        }
    }
    let got = category_prf(&pred, &gold).map_err(|e| e.to_string())?;
    let either_fp = got.either.counts.fp;
    let counted = [
        got.repetition.counts.tp,
        got.repetition.counts.fn_,
        got.non_repetition.counts.tp,
        got.non_repetition.counts.fn_,
        either_fp,
    ];
    let rep_p = |c: u64, f: u64| if c + f == 0 { 0.0 } else { c as f64 / (c + f) as f64 };
    let recall_ok = got.repetition.recall == rep_p(expected[0], expected[1])
        && got.non_repetition.recall == rep_p(expected[2], expected[3]);
    let counts_ok = counted == expected && got.repetition.counts.fp == 0 && got.non_repetition.counts.fp == 0;

    let corpus = corpus_sentences(2_000, 17);
    let mut rng = seeded(17, 1);
    let (mut spans, mut repetition) = (0, 0);
    for s in &corpus {
        let sites = rng.gen_range(1..=3).min(s.len());
        let ks = rand::seq::index::sample(&mut rng, s.len(), sites).into_vec();
        let ops: Vec<Perturbation> =
            ks.iter().map(|&k| Perturbation::Repetition { k, m: rng.gen_range(1..=6) }).collect();
        let ex = apply_additions(s, &ops).map_err(|e| e.to_string())?;
        for span in split_disfluency_spans(&ex.tokens, &ex.labels) {
            spans += 1;
            repetition += usize::from(span.kind == SpanKind::Repetition);
        }
    }
    check(
        counts_ok && recall_ok && spans == repetition,
        format!(
            "50-sentence oracle counts {counted:?} vs {expected:?}; {repetition}/{spans} repetition-only spans classified as repetition"
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status}: {detail}");
    };
    report(1, c1_round_trip());
    report(2, c2_pair_soundness());
    report(3, c3_gradients());
    report(4, c4_metric_oracle());
    report(5, c5_additivity());
    report(6, c6_batch_composition());

    let start = Instant::now();
    let pseudo = pseudo_data();
    let multi = pretrain_on(&pseudo, TrainingTask::Multi);
    let pretrain_time = start.elapsed();
    report(7, c7_learnability(&pseudo, &multi, pretrain_time));

    let gold = gold_data();
    let start = Instant::now();
    let from_multi = multi.as_ref().map_err(Clone::clone).and_then(|c| finetune_arm(Some(c), &pseudo.vocab, &gold));
    let random = finetune_arm(None, &pseudo.vocab, &gold);
    report(8, c8_transfer(&from_multi, &random, start.elapsed()));

    let from_tagging =
        pretrain_on(&pseudo, TrainingTask::Tagging).and_then(|c| finetune_arm(Some(&c), &pseudo.vocab, &gold));
    report(9, c9_multitask(&from_multi, &from_tagging, &random));

    report(10, c10_determinism());
    report(11, c11_categories());

    if failed == 0 {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
