//! Run configuration: per-command keys with defaults, named presets,
//! `key = value` config files and command-line overrides.
//!
//! Resolution order, later wins: built-in defaults, the preset file, the
//! config file's top-level keys, its `[command]` section, then flags. The
//! resolved map is echoed in config-file syntax, so feeding the echo back in
//! reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dforge_core::model::ModelConfig;
use dforge_core::trainer::HyperParams;

use crate::error::{Error, Result};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "DFORGE_SEED";
pub const DEFAULT_SEED: u64 = 1;

pub const TOY_PRESET: &str = include_str!("../presets/toy.conf");
pub const PAPER_PRESET: &str = include_str!("../presets/paper.conf");

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

#[derive(Debug, Clone, Copy)]
pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [&'static [Key]],
}

const SEED: &[Key] = &[key("seed", "", "random seed (falls back to DFORGE_SEED, then 1)")];
const PRESET: &[Key] = &[key("preset", "toy", "named defaults: toy or paper")];

const MODEL: &[Key] = &[
    key("layers", "2", "encoder layers"),
    key("hidden", "64", "hidden size"),
    key("heads", "4", "attention heads"),
    key("ff-inner", "0", "feed-forward inner size, 0 for 4x hidden"),
    key("dropout", "0.1", "dropout rate"),
    key("max-len", "128", "longest input in positions, including [CLS] and [SEP]"),
];

const HYPER: &[Key] = &[
    key("learning-rate", "0.001", "Adam learning rate"),
    key("batch-size", "64", "examples per step"),
    key("epochs", "6", "passes over the training data"),
    key("tagging-fraction", "0.3", "share of a mixed batch given to tagging examples"),
    key("beta1", "0.9", "Adam first-moment decay"),
    key("beta2", "0.999", "Adam second-moment decay"),
    key("eps", "1e-8", "Adam denominator offset"),
    key("clip-norm", "1.0", "global gradient-norm ceiling, or none"),
];

const SYNTH: &[Key] = &[
    key("kind", "raw", "raw (plain text corpus) or gold (annotated tagging file)"),
    key("sentences", "100000", "sentences to generate"),
    key("out", "", "output path"),
];

const BUILD_VOCAB: &[Key] = &[
    key("corpus", "", "plain-text corpus, one sentence per line"),
    key("out", "", "vocabulary output path"),
    key("min-frequency", "2", "drop tokens seen fewer times"),
];

const BUILD_NGRAMS: &[Key] = &[
    key("corpus", "", "plain-text corpus, one sentence per line"),
    key("out", "", "n-gram index output path"),
    key("capacity", "1000000", "reservoir size per n-gram length"),
];

const CORRUPT: &[Key] = &[
    key("corpus", "", "plain-text corpus, one sentence per line"),
    key("ngrams", "", "n-gram index from build-ngrams"),
    key("mode", "both", "tagging, pairs or both"),
    key("n-tagging", "1000", "tagging examples to generate"),
    key("n-pairs", "1000", "sentence pairs to generate"),
    key("skip", "0", "corpus sentences to skip first"),
    key("tagging-out", "", "tagging set output path"),
    key("pairs-out", "", "pair set output path"),
];

const PRETRAIN: &[Key] = &[
    key("vocab", "", "vocabulary file"),
    key("tagging", "", "tagging set"),
    key("pairs", "", "pair set"),
    key("heldout-tagging", "", "held-out tagging set scored after every epoch"),
    key("heldout-pairs", "", "held-out pair set scored after every epoch"),
    key("task", "multi", "multi, tagging or classification"),
    key("out", "", "checkpoint output path"),
    key("log", "", "CSV training log path"),
];

const FINETUNE: &[Key] = &[
    key("vocab", "", "vocabulary file"),
    key("train", "", "gold tagging set to train on"),
    key("dev", "", "gold tagging set for best-epoch selection"),
    key("init-checkpoint", "", "pre-trained checkpoint; empty for random init"),
    key("out", "", "checkpoint output path"),
    key("log", "", "CSV training log path"),
];

const EVALUATE: &[Key] = &[
    key("gold", "", "gold tagging set"),
    key("pred", "", "predicted tagging set; empty to predict with a checkpoint"),
    key("checkpoint", "", "checkpoint used when no predictions are given"),
    key("vocab", "", "vocabulary of the checkpoint"),
    key("pairs", "", "pair set for classification accuracy (needs a checkpoint)"),
    key("report", "", "append the JSON-lines record here"),
];

const TAG: &[Key] = &[
    key("checkpoint", "", "checkpoint to tag with"),
    key("vocab", "", "vocabulary of the checkpoint"),
    key("input", "", "plain text, one sentence per line"),
    key("out", "", "output path; empty for stdout"),
];

const SWEEP: &[Key] = &[
    key("axis", "gold-data-size", "pseudo-data-size, gold-data-size or model-size"),
    key("grid", "", "comma-separated axis values"),
    key("seeds", "1", "seeds per point"),
    key("jobs", "1", "points run concurrently"),
    key("out", "", "curve CSV output path"),
    key("corpus", "", "plain-text corpus for pseudo data and the vocabulary"),
    key("vocab", "", "vocabulary file; empty to build one from the corpus"),
    key("gold-train", "", "gold tagging set to fine-tune on"),
    key("gold-dev", "", "gold tagging set for best-epoch selection"),
    key("gold-test", "", "gold tagging set to score"),
    key("init-checkpoint", "", "shared pre-trained checkpoint for the gold-data-size axis"),
    key("n-pseudo", "10000", "tagging and pair examples each, when not the swept axis"),
    key("n-gold", "0", "gold sentences, when not the swept axis; 0 for all"),
    key("pretrain-learning-rate", "0.001", "pre-training learning rate"),
    key("pretrain-batch-size", "64", "pre-training batch size"),
    key("pretrain-epochs", "6", "pre-training epochs"),
    key("finetune-learning-rate", "0.0003", "fine-tuning learning rate"),
    key("finetune-batch-size", "16", "fine-tuning batch size"),
    key("finetune-epochs", "20", "fine-tuning epochs"),
];

pub const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "synth",
        about: "Generate a synthetic raw corpus or gold disfluency set",
        keys: &[SYNTH, SEED],
    },
    CommandSpec { name: "build-vocab", about: "Build a vocabulary from a plain-text corpus", keys: &[BUILD_VOCAB] },
    CommandSpec {
        name: "build-ngrams",
        about: "Sample an n-gram index from a plain-text corpus",
        keys: &[BUILD_NGRAMS, SEED],
    },
    CommandSpec { name: "corrupt", about: "Generate pseudo tagging and pair sets", keys: &[CORRUPT, SEED] },
    CommandSpec {
        name: "pretrain",
        about: "Pre-train the encoder on pseudo data",
        keys: &[PRETRAIN, PRESET, MODEL, HYPER, SEED],
    },
    CommandSpec {
        name: "finetune",
        about: "Fine-tune the tagging path on gold data",
        keys: &[FINETUNE, PRESET, MODEL, HYPER, SEED],
    },
    CommandSpec { name: "evaluate", about: "Score predictions against gold labels", keys: &[EVALUATE] },
    CommandSpec { name: "tag", about: "Label plain sentences with a checkpoint", keys: &[TAG] },
    CommandSpec {
        name: "sweep",
        about: "Run a grid of pre-train/fine-tune/evaluate points and write a curve CSV",
        keys: &[SWEEP, PRESET, MODEL, SEED],
    },
];

impl CommandSpec {
    pub fn find(name: &str) -> Option<&'static CommandSpec> {
        COMMANDS.iter().find(|c| c.name == name)
    }

    pub fn all_keys(&self) -> impl Iterator<Item = &'static Key> {
        self.keys.iter().flat_map(|group| group.iter())
    }

    pub fn key(&self, name: &str) -> Option<&'static Key> {
        self.all_keys().find(|k| k.name == name)
    }
}

/// Parsed `key = value` file: top-level pairs and per-section pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: Vec<(String, String)>,
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

/// Parses config text. `#` starts a comment line; section names must be
/// commands and every key must belong to its section's command (top-level
/// keys to at least one command).
pub fn parse_config(origin: &str, text: &str) -> Result<ConfigFile> {
    let mut out = ConfigFile::default();
    let mut section: Option<&'static CommandSpec> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let at = || format!("{origin}:{}", i + 1);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let spec = CommandSpec::find(name.trim())
                .ok_or_else(|| Error::usage(format!("{}: unknown section [{}]", at(), name.trim())))?;
            out.sections.entry(spec.name.to_string()).or_default();
            section = Some(spec);
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("{}: expected key = value, got {line:?}", at())))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match section {
            Some(spec) => {
                if spec.key(&k).is_none() {
                    return Err(Error::usage(format!("{}: unknown key {k:?} for [{}]", at(), spec.name)));
                }
                out.sections.get_mut(spec.name).unwrap().push((k, v));
            }
            None => {
                if !COMMANDS.iter().any(|c| c.key(&k).is_some()) {
                    return Err(Error::usage(format!("{}: unknown key {k:?}", at())));
                }
                out.global.push((k, v));
            }
        }
    }
    Ok(out)
}

fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "toy" => Ok(TOY_PRESET),
        "paper" => Ok(PAPER_PRESET),
        other => Err(Error::usage(format!("unknown preset {other:?} (expected toy or paper)"))),
    }
}

/// Resolved configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    pub values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    /// Layers defaults, preset, file and flags. `env_seed` is the value of
    /// [`SEED_ENV`], if set.
    pub fn resolve(
        command: &str,
        file: Option<&ConfigFile>,
        flags: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let spec = CommandSpec::find(command).ok_or_else(|| Error::usage(format!("unknown command {command:?}")))?;
        let mut values: BTreeMap<&'static str, String> =
            spec.all_keys().map(|k| (k.name, k.default.to_string())).collect();

        let mut layers: Vec<&[(String, String)]> = Vec::new();
        if let Some(f) = file {
            layers.push(&f.global);
            if let Some(s) = f.sections.get(spec.name) {
                layers.push(s);
            }
        }
        layers.push(flags);

        let relevant = |k: &str| spec.key(k).map(|key| key.name);
        if spec.key("preset").is_some() {
            let mut preset = String::from("toy");
            for layer in &layers {
                for (k, v) in layer.iter() {
                    if k == "preset" {
                        preset = v.clone();
                    }
                }
            }
            let parsed = parse_config("preset", preset_text(&preset)?)?;
            if let Some(s) = parsed.sections.get(spec.name) {
                for (k, v) in s {
                    values.insert(relevant(k).expect("preset keys are valid"), v.clone());
                }
            }
        }
        for (n, layer) in layers.iter().enumerate() {
            let is_flags = n + 1 == layers.len();
            for (k, v) in layer.iter() {
                match relevant(k) {
                    Some(name) => {
                        values.insert(name, v.clone());
                    }
                    // Top-level file keys may target other commands.
                    None if !is_flags && n == 0 && file.is_some() => {}
                    None => return Err(Error::usage(format!("unknown key {k:?} for {}", spec.name))),
                }
            }
        }
        if let Some(seed) = values.get_mut("seed") {
            if seed.is_empty() {
                *seed = env_seed.map_or_else(|| DEFAULT_SEED.to_string(), str::to_string);
            }
        }
        let cfg = RunConfig { command: spec.name, values };
        if cfg.values.contains_key("seed") {
            cfg.u64("seed").map_err(|e| e.context(format!("(seed may come from {SEED_ENV})")))?;
        }
        Ok(cfg)
    }

    /// The effective configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        writeln!(out, "[{}]", self.command).unwrap();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("{key} is not a key of {}", self.command))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key);
        raw.parse().map_err(|_| Error::usage(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::usage(format!("{key}: {v} is not finite")))
        }
    }

    /// A path, or `None` when the key is empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.str(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::usage(format!("--{key} is required")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    /// Model sizes from the model keys.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let hidden = self.usize("hidden")?;
        let ff_inner = match self.usize("ff-inner")? {
            0 => 4 * hidden,
            n => n,
        };
        let config = ModelConfig {
            ff_inner,
            dropout: self.f64("dropout")?,
            max_len: self.usize("max-len")?,
            ..ModelConfig::new(self.usize("layers")?, hidden, self.usize("heads")?, vocab_size)
        };
        config.validate().map_err(|e| Error::usage(e.to_string()))?;
        Ok(config)
    }

    /// Optimizer settings; `prefix` selects e.g. `pretrain-` keys in a sweep.
    /// Keys the command lacks keep the preset-free defaults.
    pub fn hyper(&self, prefix: &str) -> Result<HyperParams> {
        let mut h = HyperParams::pretrain_toy();
        let has = |k: &str| self.values.contains_key(k);
        let name = |k: &str| format!("{prefix}{k}");
        h.learning_rate = self.f64(&name("learning-rate"))?;
        h.batch_size = self.usize(&name("batch-size"))?;
        h.epochs = self.usize(&name("epochs"))?;
        if has("tagging-fraction") {
            h.tagging_fraction = self.f64("tagging-fraction")?;
            h.beta1 = self.f64("beta1")?;
            h.beta2 = self.f64("beta2")?;
            h.eps = self.f64("eps")?;
            h.clip_norm = match self.str("clip-norm") {
                "none" | "" => None,
                _ => Some(self.f64("clip-norm")?),
            };
        }
        h.max_stream_tokens = self.usize("max-len")?;
        h.seed = self.seed()?;
        h.validate().map_err(|e| Error::usage(e.to_string()))?;
        Ok(h)
    }
}
