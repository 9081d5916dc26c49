//! Experiment manifests: INI text, one experiment per `[label]` section.
//!
//! Keys that appear before the first section are defaults for every
//! experiment; a section's own keys override them.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use adaptqa_core::cacnn::{CacnnConfig, Reduction};
use adaptqa_core::encoder::{AdapterConfig, EncoderConfig, FreezePolicy};
use adaptqa_core::model::{HeadConfig, ModelConfig};
use adaptqa_core::span::DatasetConfig;
use adaptqa_core::trainer::TrainConfig;
use ini::Ini;

use crate::error::{CliError, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "preset",
    "vocab_size",
    "hidden_size",
    "num_layers",
    "num_heads",
    "intermediate_size",
    "max_seq_len",
    "init_std",
    "layers_trainable",
    "embeddings_trainable",
    "adapter_size",
    "head",
    "variant",
    "n_f",
    "w1",
    "w_c",
    "m",
    "K",
    "w2",
    "reduction",
    "batch_size",
    "epochs",
    "learning_rate",
    "seed",
    "dataset_count",
    "dataset_len",
    "unanswerable_fraction",
    "needle_len",
    "eval_count",
    "max_answer_len",
    "out_dir",
];

const DEFAULT_PRESET: &str = "desk";
const DEFAULT_EVAL_COUNT: usize = 500;

/// Mixed into the experiment seed to get the held-out set's seed.
const EVAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub label: String,
    pub model: ModelConfig,
    pub policy: FreezePolicy,
    pub train: TrainConfig,
    pub data: DatasetConfig,
    /// Size of the held-out evaluation set.
    pub eval_count: usize,
    /// Where this experiment's loss CSV goes; the run directory when unset.
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn train_seed(&self) -> u64 {
        self.train.seed
    }

    pub fn eval_seed(&self) -> u64 {
        self.train.seed ^ EVAL_SEED_SALT
    }

    pub fn eval_data(&self) -> DatasetConfig {
        DatasetConfig {
            count: self.eval_count,
            ..self.data
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// `out_dir` from the defaults block.
    pub out_dir: Option<PathBuf>,
    pub experiments: Vec<ExperimentSpec>,
}

impl Manifest {
    /// Overrides every experiment's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        for e in &mut self.experiments {
            e.train.seed = seed;
        }
        self
    }
}

pub fn load(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<Manifest> {
    let ini = Ini::load_from_str(text).map_err(|e| CliError::Validation(format!("manifest: {e}")))?;
    let mut defaults = BTreeMap::new();
    let mut sections: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    for (name, props) in ini.iter() {
        let mut map = BTreeMap::new();
        for (k, v) in props.iter() {
            check_key(name.unwrap_or("defaults"), k)?;
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::Validation(format!(
                    "[{}] key `{k}` is given twice",
                    name.unwrap_or("defaults")
                )));
            }
        }
        match name {
            None => defaults.extend(map),
            Some(label) => sections.push((label.to_string(), map)),
        }
    }

    // A defaults-block out_dir names the run directory, not each experiment's.
    let run_dir = defaults.remove("out_dir").map(PathBuf::from);
    let mut seen = HashSet::new();
    let mut experiments = Vec::new();
    for (label, own) in sections {
        validate_label(&label)?;
        if !seen.insert(label.clone()) {
            return Err(CliError::Validation(format!("duplicate experiment label `{label}`")));
        }
        let mut keys = defaults.clone();
        keys.extend(own);
        experiments.push(build(&label, &keys)?);
    }
    Ok(Manifest {
        out_dir: run_dir,
        experiments,
    })
}

fn check_key(section: &str, key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        return Ok(());
    }
    let mut message = format!("[{section}] unknown key `{key}`");
    if let Some(s) = suggest(key) {
        message.push_str(&format!("; did you mean `{s}`?"));
    }
    Err(CliError::Validation(message))
}

/// Closest known key, if any is plausibly what was meant.
pub fn suggest(key: &str) -> Option<&'static str> {
    let lower = key.to_ascii_lowercase();
    KNOWN_KEYS
        .iter()
        .map(|k| (k, strsim::normalized_levenshtein(&lower, &k.to_ascii_lowercase())))
        .filter(|(_, s)| *s >= 0.6)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| *k)
}

pub fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(CliError::Validation(format!(
            "experiment label `{label}` must be non-empty and use only A-Z, a-z, 0-9, `_` and `-`"
        )));
    }
    Ok(())
}

/// Typed access to one experiment's merged keys, with errors naming the key.
struct Keys<'a> {
    label: &'a str,
    map: &'a BTreeMap<String, String>,
}

impl Keys<'_> {
    fn err(&self, key: &str, message: impl std::fmt::Display) -> CliError {
        CliError::Validation(format!("[{}] key `{key}`: {message}", self.label))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| self.err(key, format!("cannot parse `{v}`: {e}"))))
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&self, key: &str, why: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| self.err(key, format!("required {why}")))
    }
}

fn build(label: &str, map: &BTreeMap<String, String>) -> Result<ExperimentSpec> {
    let keys = Keys { label, map };
    let preset = keys.raw("preset").unwrap_or(DEFAULT_PRESET);
    let mut encoder = EncoderConfig::preset(preset)
        .ok_or_else(|| keys.err("preset", format!("no preset named `{preset}` (bert-base, desk, desk4)")))?;
    encoder.vocab_size = keys.or("vocab_size", encoder.vocab_size)?;
    encoder.hidden_size = keys.or("hidden_size", encoder.hidden_size)?;
    encoder.num_layers = keys.or("num_layers", encoder.num_layers)?;
    encoder.num_heads = keys.or("num_heads", encoder.num_heads)?;
    encoder.intermediate_size = keys.or("intermediate_size", encoder.intermediate_size)?;
    encoder.max_seq_len = keys.or("max_seq_len", encoder.max_seq_len)?;
    encoder.init_std = keys.or("init_std", encoder.init_std)?;
    let adapter_size: usize = keys.or("adapter_size", 0)?;
    if adapter_size > 0 {
        encoder.adapter = Some(AdapterConfig::new(adapter_size));
    }

    let n = encoder.num_layers;
    let k = match keys.raw("layers_trainable").unwrap_or("all") {
        "all" => n,
        "half" => n / 2,
        other => other
            .parse::<usize>()
            .map_err(|_| keys.err("layers_trainable", format!("expected a number, `half` or `all`, got `{other}`")))?,
    };
    let policy = FreezePolicy {
        top_layers_trainable: k,
        embeddings_trainable: keys.or("embeddings_trainable", k == n)?,
        adapters_trainable: true,
    };
    policy
        .validate(&encoder)
        .map_err(|e| keys.err("layers_trainable", e))?;

    let head = match keys.raw("head").unwrap_or("affine") {
        "affine" | "affine_span" => HeadConfig::AffineSpan,
        "cacnn" => {
            let n_f = keys.required("n_f", "for a cacnn head")?;
            let w1 = keys.required("w1", "for a cacnn head")?;
            let big_k = keys.required("K", "for a cacnn head")?;
            let w2 = keys.required("w2", "for a cacnn head")?;
            let mut cacnn = match keys.raw("variant").unwrap_or("context") {
                "context" | "context_vector" => CacnnConfig::context_vector(
                    n_f,
                    w1,
                    keys.required("w_c", "for the context variant")?,
                    keys.required("m", "for the context variant")?,
                    big_k,
                    w2,
                ),
                "simplified" => CacnnConfig::simplified(n_f, w1, big_k, w2),
                other => return Err(keys.err("variant", format!("expected `context` or `simplified`, got `{other}`"))),
            };
            cacnn.reduction = match keys.raw("reduction").unwrap_or("max") {
                "max" => Reduction::Max,
                "sum" => Reduction::Sum,
                other => return Err(keys.err("reduction", format!("expected `max` or `sum`, got `{other}`"))),
            };
            HeadConfig::Cacnn(cacnn)
        }
        other => return Err(keys.err("head", format!("expected `affine` or `cacnn`, got `{other}`"))),
    };

    let defaults = TrainConfig::default();
    let train = TrainConfig {
        batch_size: keys.or("batch_size", defaults.batch_size)?,
        epochs: keys.or("epochs", defaults.epochs)?,
        learning_rate: keys.or("learning_rate", defaults.learning_rate)?,
        seed: keys.or("seed", defaults.seed)?,
        max_answer_len: keys.or("max_answer_len", defaults.max_answer_len)?,
        ..defaults
    };
    train.validate().map_err(|e| CliError::Validation(format!("[{label}] {e}")))?;

    let base = DatasetConfig::default();
    let needle_len = match keys.raw("needle_len") {
        None => base.needle_len,
        Some(v) => parse_range(v).ok_or_else(|| keys.err("needle_len", format!("expected `n` or `lo-hi`, got `{v}`")))?,
    };
    let data = DatasetConfig {
        count: keys.or("dataset_count", base.count)?,
        seq_len: keys.or("dataset_len", base.seq_len.min(encoder.max_seq_len))?,
        vocab_size: encoder.vocab_size,
        needle_len,
        unanswerable_fraction: keys.or("unanswerable_fraction", base.unanswerable_fraction)?,
    };
    data.validate().map_err(|e| CliError::Validation(format!("[{label}] {e}")))?;
    let eval_count = keys.or("eval_count", DEFAULT_EVAL_COUNT)?;
    if eval_count == 0 {
        return Err(keys.err("eval_count", "must be at least 1"));
    }

    let model = ModelConfig::new(encoder, head);
    model
        .validate(Some(data.seq_len))
        .map_err(|e| CliError::Validation(format!("[{label}] {e}")))?;

    Ok(ExperimentSpec {
        label: label.to_string(),
        model,
        policy,
        train,
        data,
        eval_count,
        out_dir: keys.raw("out_dir").map(PathBuf::from),
    })
}

fn parse_range(v: &str) -> Option<(usize, usize)> {
    match v.split_once('-') {
        Some((lo, hi)) => Some((lo.trim().parse().ok()?, hi.trim().parse().ok()?)),
        None => {
            let n = v.parse().ok()?;
            Some((n, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_block_applies_to_every_section() {
        let m = parse("seed = 4\nbatch_size = 2\n[a]\n[b]\nseed = 9\n").unwrap();
        assert_eq!(m.experiments.len(), 2);
        assert_eq!(m.experiments[0].train.seed, 4);
        assert_eq!(m.experiments[1].train.seed, 9);
        assert!(m.experiments.iter().all(|e| e.train.batch_size == 2));
    }

    #[test]
    fn typo_gets_a_suggestion() {
        let err = parse("[L0]\nadaptersize = 64\n").unwrap_err().to_string();
        assert!(err.contains("`adaptersize`") && err.contains("`adapter_size`"), "{err}");
        assert_eq!(suggest("batchsize"), Some("batch_size"));
        assert_eq!(suggest("zzzzzz"), None);
    }

    #[test]
    fn policy_keys() {
        let m = parse("preset = bert-base\n[a]\nlayers_trainable = 0\n[b]\nlayers_trainable = half\n[c]\n").unwrap();
        let p: Vec<_> = m.experiments.iter().map(|e| e.policy).collect();
        assert_eq!(p[0], FreezePolicy::top(0));
        assert_eq!(p[1], FreezePolicy::top(6));
        assert_eq!(p[2], FreezePolicy::full(12));
    }

    #[test]
    fn cacnn_keys() {
        let m = parse("[c]\nhead = cacnn\nn_f = 8\nw1 = 3\nw_c = 3\nm = 2\nK = 2\nw2 = 3\nreduction = sum\n").unwrap();
        let HeadConfig::Cacnn(c) = m.experiments[0].model.head else { panic!() };
        assert_eq!(c.reduction, Reduction::Sum);
        assert_eq!(c.sample_filters, 2);
        let err = parse("[c]\nhead = cacnn\nn_f = 8\nw1 = 3\nK = 2\nw2 = 3\n").unwrap_err().to_string();
        assert!(err.contains("`w_c`"), "{err}");
    }

    #[test]
    fn bad_values_name_their_key() {
        for (text, key) in [
            ("[a]\nepochs = many\n", "epochs"),
            ("[a]\npreset = tiny\n", "preset"),
            ("[a]\nlayers_trainable = 7\n", "layers_trainable"),
            ("[a]\nneedle_len = 3-\n", "needle_len"),
        ] {
            let err = parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 1);
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn labels_are_restricted_and_unique() {
        assert!(parse("[a b]\n").is_err());
        assert!(parse("[a,b]\n").is_err());
        assert!(parse("[a]\n[a]\n").is_err());
        parse("[L0-A64_x]\n").unwrap();
    }

    #[test]
    fn empty_manifest_has_no_experiments() {
        assert!(parse("").unwrap().experiments.is_empty());
        assert!(parse("seed = 1\n").unwrap().experiments.is_empty());
    }

    #[test]
    fn top_level_out_dir_is_the_run_directory() {
        let m = parse("out_dir = runs/x\n[a]\n[b]\nout_dir = elsewhere\n").unwrap();
        assert_eq!(m.out_dir, Some(PathBuf::from("runs/x")));
        assert_eq!(m.experiments[0].out_dir, None);
        assert_eq!(m.experiments[1].out_dir, Some(PathBuf::from("elsewhere")));
    }

    #[test]
    fn eval_seed_differs_from_train_seed() {
        let e = &parse("[a]\n").unwrap().experiments[0];
        assert_ne!(e.train_seed(), e.eval_seed());
        assert_eq!(e.eval_data().count, DEFAULT_EVAL_COUNT);
    }
}
