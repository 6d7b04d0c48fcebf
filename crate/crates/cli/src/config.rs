use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use seqmix::data::GrammarSpec;
use seqmix::mixer::PartnerMode;
use seqmix::model::OracleConfig;
use seqmix::trainer::TrainConfig;
use seqmix::{Method, MethodConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    GenData,
    AugmentDump,
    Train,
    Eval,
    Experiment,
    OracleCheck,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::GenData => "gen-data",
            Task::AugmentDump => "augment-dump",
            Task::Train => "train",
            Task::Eval => "eval",
            Task::Experiment => "experiment",
            Task::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Corpus {
    #[default]
    Minigrammar,
    Reversal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReversalSpec {
    pub pairs: usize,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ReversalSpec {
    fn default() -> Self {
        ReversalSpec {
            pairs: 2000,
            vocab: 20,
            min_len: 3,
            max_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub trials: usize,
    pub mc_samples: usize,
    pub max_positions: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = OracleConfig::default();
        OracleSection {
            trials: d.trials,
            mc_samples: d.mc_samples,
            max_positions: d.max_positions,
            vocab: d.vocab,
            hidden: d.hidden,
            embed: d.embed,
        }
    }
}

/// Everything a run needs. Serialized with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub out: PathBuf,
    pub seed: u64,
    /// SCAN-format or TSV file; generated from `corpus` when absent.
    pub data: Option<PathBuf>,
    pub corpus: Corpus,
    pub grammar: GrammarSpec,
    pub reversal: ReversalSpec,
    /// Primitive held out of compositions; null disables the split.
    pub held_out: Option<String>,
    /// Extra copies of the isolated held-out example in training.
    pub primitive_repeats: usize,
    pub validation_fraction: f64,
    pub method: Method,
    pub methods: Vec<Method>,
    /// Seeds per method in `experiment`: seed, seed+1, …
    pub seeds: usize,
    pub alpha: f64,
    pub eta: f64,
    pub rho: f64,
    pub p_mix: f64,
    pub word_drop_source_only: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub hidden: usize,
    pub embed: usize,
    pub attention: bool,
    pub tie_embeddings: bool,
    pub eval_every: usize,
    pub partner_mode: PartnerMode,
    pub expansion_factor: usize,
    pub max_decode_len: usize,
    pub report_bleu: bool,
    pub record_wall_clock: bool,
    pub force_lambda: Option<f64>,
    /// Model for `eval`; defaults to `<out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub dump_batches: usize,
    pub oracle: OracleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let method = MethodConfig::default();
        let train = TrainConfig::new(method.clone(), 0);
        RunConfig {
            task: Task::GenData,
            out: PathBuf::new(),
            seed: 0,
            data: None,
            corpus: Corpus::Minigrammar,
            grammar: GrammarSpec::default(),
            reversal: ReversalSpec::default(),
            held_out: Some("jump".into()),
            primitive_repeats: 0,
            validation_fraction: 0.1,
            method: Method::Seqmix,
            methods: Method::ALL.to_vec(),
            seeds: 3,
            alpha: method.alpha,
            eta: method.eta,
            rho: method.rho,
            p_mix: method.p_mix,
            word_drop_source_only: method.word_drop_source_only,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            clip_norm: train.clip_norm,
            hidden: train.hidden,
            embed: train.embed,
            attention: train.attention,
            tie_embeddings: train.tie_embeddings,
            eval_every: train.eval_every,
            partner_mode: train.partner_mode,
            expansion_factor: train.expansion_factor,
            max_decode_len: train.max_decode_len,
            report_bleu: train.report_bleu,
            record_wall_clock: train.record_wall_clock,
            force_lambda: train.force_lambda,
            checkpoint: None,
            dump_batches: 1,
            oracle: OracleSection::default(),
        }
    }
}

impl RunConfig {
    pub fn method_config(&self, method: Method) -> MethodConfig {
        MethodConfig {
            method,
            alpha: self.alpha,
            eta: self.eta,
            rho: self.rho,
            p_mix: self.p_mix,
            word_drop_source_only: self.word_drop_source_only,
        }
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method_config(method),
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            clip_norm: self.clip_norm,
            seed,
            hidden: self.hidden,
            embed: self.embed,
            attention: self.attention,
            tie_embeddings: self.tie_embeddings,
            eval_every: self.eval_every,
            partner_mode: self.partner_mode,
            expansion_factor: self.expansion_factor,
            max_decode_len: self.max_decode_len,
            report_bleu: self.report_bleu,
            record_wall_clock: self.record_wall_clock,
            force_lambda: self.force_lambda,
        }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            trials: self.oracle.trials,
            mc_samples: self.oracle.mc_samples,
            max_positions: self.oracle.max_positions,
            vocab: self.oracle.vocab,
            hidden: self.oracle.hidden,
            embed: self.oracle.embed,
            alpha: self.alpha,
            seed: self.seed,
        }
    }
}

/// Values given on the command line; each overrides the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub rho: Option<f64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

const REQUIRED: [&str; 1] = ["out"];

fn known_keys() -> Vec<String> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

fn nearest<'a>(key: &str, candidates: &'a [String]) -> Option<&'a str> {
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(key, c), c))
        .filter(|(d, _)| *d <= 3)
        .min()
        .map(|(_, c)| c.as_str())
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Merges `file` (a JSON object), the subcommand's task and flag overrides,
/// then resolves every default.
pub fn resolve(file: Option<Value>, task: Task, flags: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut map = match file {
        None => Map::new(),
        Some(Value::Object(m)) => m,
        Some(other) => {
            return Err(ConfigError(format!(
                "config must be a JSON object, found {}",
                match other {
                    Value::Array(_) => "an array",
                    Value::String(_) => "a string",
                    Value::Number(_) => "a number",
                    Value::Bool(_) => "a boolean",
                    _ => "null",
                }
            )))
        }
    };
    let known = known_keys();
    let mut unknown: Vec<&String> = map.keys().filter(|k| !known.contains(k)).collect();
    unknown.sort();
    if let Some(k) = unknown.first() {
        return Err(ConfigError(match nearest(k, &known) {
            Some(s) => format!("unknown config key `{k}` (did you mean `{s}`?)"),
            None => format!("unknown config key `{k}`"),
        }));
    }
    if let Some(t) = map.get("task") {
        if t != &Value::String(task.key().into()) {
            return Err(ConfigError(format!(
                "config task {t} does not match the `{}` subcommand",
                task.key()
            )));
        }
    }
    map.insert("task".into(), Value::String(task.key().into()));
    // The held-out primitive belongs to the mini-grammar; the reversal corpus
    // has none unless one is named explicitly.
    if map.get("corpus") == Some(&Value::String("reversal".into())) && map.get("data").is_none() {
        map.entry("held_out").or_insert(Value::Null);
    }
    if let Some(v) = flags.seed {
        map.insert("seed".into(), v.into());
    }
    if let Some(v) = &flags.method {
        let m: Method = v.parse().map_err(|e| ConfigError(format!("--method: {e}")))?;
        map.insert("method".into(), Value::String(m.key().into()));
    }
    for (key, v) in [("alpha", flags.alpha), ("eta", flags.eta), ("rho", flags.rho)] {
        if let Some(v) = v {
            let n = serde_json::Number::from_f64(v).ok_or_else(|| ConfigError(format!("--{key} must be finite")))?;
            map.insert(key.into(), Value::Number(n));
        }
    }
    if let Some(p) = &flags.out {
        map.insert("out".into(), path_value(p));
    }
    if let Some(p) = &flags.data {
        map.insert("data".into(), path_value(p));
    }
    for key in REQUIRED {
        if !map.contains_key(key) {
            return Err(ConfigError(format!("missing required key `{key}`")));
        }
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(map))
        .map_err(|e| ConfigError(format!("config key `{}`: {}", e.path(), e.inner())))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let bad = |m: String| Err(ConfigError(m));
    if cfg.out.as_os_str().is_empty() {
        return bad("`out` must be a nonempty path".into());
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return bad(format!("validation_fraction {} outside [0, 1)", cfg.validation_fraction));
    }
    if cfg.task == Task::Experiment && (cfg.methods.is_empty() || cfg.seeds == 0) {
        return bad("experiment needs at least one method and one seed".into());
    }
    let r = &cfg.reversal;
    if r.vocab == 0 || r.min_len == 0 || r.min_len > r.max_len || r.pairs == 0 {
        return bad("reversal needs vocab ≥ 1, pairs ≥ 1 and 1 ≤ min_len ≤ max_len".into());
    }
    for m in [cfg.method].iter().chain(&cfg.methods) {
        cfg.train_config(*m, cfg.seed)
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
    }
    Ok(())
}

/// Reads and parses a config file as JSON.
pub fn read_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: invalid JSON: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = resolve(Some(json!({"task": "gen-data", "out": "d/"})), Task::GenData, &Overrides::default()).unwrap();
        assert_eq!(cfg.out, PathBuf::from("d/"));
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.learning_rate, RunConfig::default().learning_rate);
        assert_eq!(cfg.held_out.as_deref(), Some("jump"));
        assert_eq!(cfg.methods.len(), 5);
    }

    #[test]
    fn flags_override_file() {
        let flags = Overrides {
            alpha: Some(0.5),
            seed: Some(9),
            method: Some("SeqMix-Hard".into()),
            ..Default::default()
        };
        let cfg = resolve(Some(json!({"out": "x", "alpha": 1.0, "seed": 1})), Task::Train, &flags).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.method, Method::SeqmixHard);
    }

    #[test]
    fn typo_names_nearest_key() {
        let err = resolve(Some(json!({"out": "x", "alhpa": 1.0})), Task::Train, &Overrides::default()).unwrap_err();
        assert!(err.0.contains("`alhpa`") && err.0.contains("`alpha`"), "{err}");
    }

    #[test]
    fn missing_and_mistyped_keys_are_named() {
        let err = resolve(Some(json!({"seed": 1})), Task::Train, &Overrides::default()).unwrap_err();
        assert!(err.0.contains("`out`"), "{err}");
        let err = resolve(Some(json!({"out": "x", "epochs": "ten"})), Task::Train, &Overrides::default()).unwrap_err();
        assert!(err.0.contains("epochs") && err.0.contains("expected usize"), "{err}");
        let err = resolve(Some(json!({"out": "x", "reversal": {"pairz": 3}})), Task::Train, &Overrides::default()).unwrap_err();
        assert!(err.0.contains("pairz"), "{err}");
    }

    #[test]
    fn task_must_match_subcommand() {
        assert!(resolve(Some(json!({"out": "x", "task": "train"})), Task::Eval, &Overrides::default()).is_err());
    }

    #[test]
    fn non_object_and_invalid_values_are_rejected() {
        assert!(resolve(Some(json!([1, 2])), Task::Train, &Overrides::default()).is_err());
        assert!(resolve(Some(json!({"out": "x", "batch_size": 0})), Task::Train, &Overrides::default()).is_err());
        let flags = Overrides {
            method: Some("mixup".into()),
            ..Default::default()
        };
        assert!(resolve(Some(json!({"out": "x"})), Task::Train, &flags).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve(Some(json!({"out": "x", "held_out": null})), Task::Experiment, &Overrides::default()).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = resolve(Some(serde_json::from_str(&text).unwrap()), Task::Experiment, &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.held_out, None);
    }
}
