//! On-disk formats: vocabularies, tagging and pair sets, n-gram indexes,
//! checkpoints, evaluation reports and training logs.
//!
//! Every writer is a pure function of its input, so identical inputs give
//! identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use dforge_core::corruptor::{NgramIndex, PairExample, PairLabel, Tag, TagSequence, MAX_SPAN};
use dforge_core::eval::EvalReport;
use dforge_core::textproc::{normalize, Sentence, Vocabulary, DEFAULT_MIN_FREQUENCY};
use dforge_core::trainer::{Checkpoint, EpochRecord, Observer, StepRecord};
use serde::Serialize;

use crate::error::{Error, Result};

pub const NGRAM_MAGIC: &[u8; 4] = b"DFNG";
pub const NGRAM_VERSION: u32 = 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, what: impl std::fmt::Display) -> Error {
    Error::data(format!("{}:{line}: {what}", path.display()))
}

/// Raw text, one sentence per line, normalized. Lines that normalize to
/// nothing are dropped.
pub fn read_corpus(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_text(path)?.lines().filter_map(normalize).collect())
}

/// Already normalized sentences, one per line with single spaces.
pub fn format_corpus(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join());
        out.push('\n');
    }
    out
}

/// `token<TAB>id` per line, in id order.
pub fn format_vocab(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        writeln!(out, "{tok}\t{id}").unwrap();
    }
    out
}

pub fn parse_vocab(path: &Path, text: &str) -> Result<Vocabulary> {
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (tok, id) = line.split_once('\t').ok_or_else(|| parse_err(path, i + 1, "expected token<TAB>id"))?;
        let id: usize = id.parse().map_err(|_| parse_err(path, i + 1, format!("bad id {id:?}")))?;
        if id != tokens.len() {
            return Err(parse_err(path, i + 1, format!("id {id} out of order, expected {}", tokens.len())));
        }
        tokens.push(tok.to_string());
    }
    Vocabulary::from_tokens(tokens, DEFAULT_MIN_FREQUENCY).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    parse_vocab(path, &read_text(path)?)
}

/// `token<TAB>label` per line, a blank line after every sentence.
pub fn format_tagging<'a>(seqs: impl IntoIterator<Item = (&'a [String], &'a [Tag])>) -> String {
    let mut out = String::new();
    for (tokens, labels) in seqs {
        for (t, l) in tokens.iter().zip(labels) {
            writeln!(out, "{t}\t{l}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_tagging(path: &Path, text: &str) -> Result<Vec<TagSequence>> {
    let mut out = Vec::new();
    let (mut tokens, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !tokens.is_empty() {
                out.push(TagSequence { tokens: std::mem::take(&mut tokens), labels: std::mem::take(&mut labels) });
            }
            continue;
        }
        let (tok, label) = line.split_once('\t').ok_or_else(|| parse_err(path, i + 1, "expected token<TAB>label"))?;
        let label: Tag = label.trim().parse().map_err(|e| parse_err(path, i + 1, e))?;
        if tok.is_empty() || tok.contains(char::is_whitespace) {
            return Err(parse_err(path, i + 1, format!("bad token {tok:?}")));
        }
        tokens.push(tok.to_string());
        labels.push(label);
    }
    if !tokens.is_empty() {
        out.push(TagSequence { tokens, labels });
    }
    Ok(out)
}

pub fn read_tagging(path: &Path) -> Result<Vec<TagSequence>> {
    parse_tagging(path, &read_text(path)?)
}

/// `s1<TAB>s2<TAB>label` per line with space-joined tokens.
pub fn format_pairs(pairs: &[PairExample]) -> String {
    let mut out = String::new();
    for p in pairs {
        writeln!(out, "{}\t{}\t{}", p.s1.join(), p.s2.join(), p.label).unwrap();
    }
    out
}

pub fn parse_pairs(path: &Path, text: &str) -> Result<Vec<PairExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [s1, s2, label] = cols[..] else {
            return Err(parse_err(path, i + 1, format!("expected 3 tab-separated columns, got {}", cols.len())));
        };
        let sentence = |s: &str| Sentence::from_whitespace(s).map_err(|e| parse_err(path, i + 1, e));
        let label: PairLabel = label.trim().parse().map_err(|e| parse_err(path, i + 1, e))?;
        out.push(PairExample { s1: sentence(s1)?, s2: sentence(s2)?, label });
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairExample>> {
    parse_pairs(path, &read_text(path)?)
}

/// Magic, u32 version, six u64 per-m counts, u32 table length followed by
/// u32-length-prefixed UTF-8 tokens, then the u32 ids of every bucket in
/// order of m. Little-endian throughout.
pub fn ngrams_to_bytes(index: &NgramIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NGRAM_MAGIC);
    out.extend_from_slice(&NGRAM_VERSION.to_le_bytes());
    for m in 1..=MAX_SPAN {
        out.extend_from_slice(&(index.count(m) as u64).to_le_bytes());
    }
    out.extend_from_slice(&(index.table().len() as u32).to_le_bytes());
    for tok in index.table() {
        out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
        out.extend_from_slice(tok.as_bytes());
    }
    for m in 1..=MAX_SPAN {
        for id in index.bucket(m) {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(format!("truncated n-gram file at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn ngrams_from_bytes(bytes: &[u8]) -> Result<NgramIndex> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != NGRAM_MAGIC {
        return Err(Error::data("not an n-gram file (bad magic)"));
    }
    let version = c.u32()?;
    if version != NGRAM_VERSION {
        return Err(Error::data(format!("n-gram file version {version} is not supported (expected {NGRAM_VERSION})")));
    }
    let mut counts = [0usize; MAX_SPAN];
    for count in &mut counts {
        *count = usize::try_from(c.u64()?).map_err(|_| Error::data("n-gram count overflows"))?;
    }
    let n = c.u32()? as usize;
    let mut table = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let tok = std::str::from_utf8(c.take(len)?).map_err(|_| Error::data("n-gram token is not UTF-8"))?;
        table.push(tok.to_string());
    }
    let mut buckets: [Vec<u32>; MAX_SPAN] = Default::default();
    for (i, bucket) in buckets.iter_mut().enumerate() {
        let ids = counts[i].checked_mul(i + 1).ok_or_else(|| Error::data("n-gram count overflows"))?;
        let raw = c.take(ids.checked_mul(4).ok_or_else(|| Error::data("n-gram count overflows"))?)?;
        *bucket = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    }
    if c.at != bytes.len() {
        return Err(Error::data(format!("{} trailing bytes after n-gram data", bytes.len() - c.at)));
    }
    Ok(NgramIndex::from_parts(table, buckets)?)
}

pub fn read_ngrams(path: &Path) -> Result<NgramIndex> {
    ngrams_from_bytes(&read_bytes(path)?).map_err(|e| e.context(path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?).map_err(|e| Error::from(e).context(path.display()))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &ckpt.to_bytes())
}

/// One JSON-lines evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRecord {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub repet_f1: f64,
    pub nonrepet_f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_accuracy: Option<f64>,
}

impl From<&EvalReport> for ReportRecord {
    fn from(r: &EvalReport) -> Self {
        ReportRecord {
            p: r.precision,
            r: r.recall,
            f1: r.f1,
            repet_f1: r.repetition_f1,
            nonrepet_f1: r.non_repetition_f1,
            tp: r.counts.tp,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
            pair_accuracy: r.pair_accuracy,
        }
    }
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string(&ReportRecord::from(report)).expect("report serializes")
}

/// Human-readable summary of a report.
pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "{:<14}{:>10}", "metric", "value").unwrap();
    for (name, v) in [
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
        ("repet_f1", report.repetition_f1),
        ("nonrepet_f1", report.non_repetition_f1),
        ("either_f1", report.either_f1),
    ] {
        writeln!(out, "{name:<14}{v:>10.4}").unwrap();
    }
    if let Some(acc) = report.pair_accuracy {
        writeln!(out, "{:<14}{acc:>10.4}", "pair_accuracy").unwrap();
    }
    writeln!(out, "{:<14}{:>10}", "tp", report.counts.tp).unwrap();
    writeln!(out, "{:<14}{:>10}", "fp", report.counts.fp).unwrap();
    writeln!(out, "{:<14}{:>10}", "fn", report.counts.fn_).unwrap();
    out
}

pub const LOG_HEADER: &str = "step,task,loss,lr,elapsed_s";

/// Training observer that appends `step,task,loss,lr,elapsed_s` rows to a
/// CSV file. Epoch summaries are rows whose task is `epoch`, carrying the
/// epoch-mean loss, and are also echoed to stderr with held-out scores.
pub struct CsvLog {
    file: Option<std::io::BufWriter<fs::File>>,
    start: Instant,
    last_step: u64,
    error: Option<Error>,
    quiet: bool,
}

impl CsvLog {
    pub fn create(path: Option<&Path>, quiet: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let mut f = std::io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?);
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(CsvLog { file, start: Instant::now(), last_step: 0, error: None, quiet })
    }

    fn row(&mut self, step: u64, task: &str, loss: f64, lr: f64) {
        if let Some(f) = &mut self.file {
            let elapsed = self.start.elapsed().as_secs_f64();
            if let Err(e) = writeln!(f, "{step},{task},{loss},{lr},{elapsed:.3}") {
                self.error.get_or_insert(Error::data(format!("training log: {e}")));
            }
        }
    }

    /// Flushes the log and reports the first write failure, if any.
    pub fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            if let Err(e) = f.flush() {
                self.error.get_or_insert(Error::data(format!("training log: {e}")));
            }
        }
        self.error.map_or(Ok(()), Err)
    }
}

impl Observer for CsvLog {
    fn on_step(&mut self, r: &StepRecord) {
        self.last_step = r.step;
        self.row(r.step, r.task, r.loss, r.learning_rate);
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        self.row(self.last_step, "epoch", r.mean_loss, f64::NAN);
        if !self.quiet {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "epoch {} mean_loss {:.4} heldout_f1 {} heldout_pair_acc {} ({:.1}s)",
                r.epoch,
                r.mean_loss,
                fmt(r.heldout_f1),
                fmt(r.heldout_pair_accuracy),
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}
