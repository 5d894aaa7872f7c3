//! Run configuration: one table of keys, resolved from command-line flags,
//! `SGRAG_*` environment variables, a TOML file and built-in defaults, in
//! that order of precedence.
//!
//! Every key has a dotted file name (`retrieval.k`), a flag (`--k`) and an
//! environment variable (`SGRAG_K`). In the file, dotted keys may also be
//! written as TOML tables:
//!
//! ```toml
//! [retrieval]
//! k = 4
//! [llm]
//! backend = "stub"
//! ```
//!
//! API keys are read only from `SGRAG_EMBED_API_KEY` and `SGRAG_LLM_API_KEY`
//! and are redacted when the configuration is dumped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use log::LevelFilter;
use sgrag_core::answer::DEFAULT_LLM_MODEL;
use sgrag_core::evaluation::ReportFormat;
use sgrag_core::scene_graph::{Adapter, DatasetFormat};
use thiserror::Error;

pub const EMBED_API_KEY_ENV: &str = "SGRAG_EMBED_API_KEY";
pub const LLM_API_KEY_ENV: &str = "SGRAG_LLM_API_KEY";
pub const CONFIG_ENV: &str = "SGRAG_CONFIG";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid value `{value}` for `{key}` (from {origin}): {reason}")]
    Invalid {
        key: String,
        value: String,
        origin: Source,
        reason: String,
    },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("`{key}` is required when {when}")]
    Missing { key: String, when: String },
    #[error("config file: {0}")]
    File(String),
}

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "config file",
            Source::Env => "environment",
            Source::Flag => "flag",
        })
    }
}

struct KeySpec {
    key: &'static str,
    flag: &'static str,
    default: Option<&'static str>,
}

const fn spec(key: &'static str, flag: &'static str, default: Option<&'static str>) -> KeySpec {
    KeySpec { key, flag, default }
}

const KEYS: &[KeySpec] = &[
    spec("dataset.path", "dataset", None),
    spec("dataset.format", "format", Some("dir")),
    spec("dataset.adapter", "adapter", Some("canonical")),
    spec("dataset.min_score", "min-score", Some("0")),
    spec("index.path", "index", None),
    spec("index.corpus", "corpus", Some("false")),
    spec("chunks.path", "chunks", None),
    spec("retrieval.k", "k", Some("4")),
    spec("ablation.k_values", "k-values", Some("1,2,4,8,16")),
    spec("embedder.kind", "embedder", Some("local")),
    spec("embedder.dim", "embed-dim", Some("256")),
    spec("embedder.url", "embed-url", None),
    spec("embedder.model", "embed-model", None),
    spec("embedder.timeout_ms", "embed-timeout-ms", Some("30000")),
    spec("llm.backend", "backend", Some("stub")),
    spec("llm.stub_mode", "stub-mode", Some("template")),
    spec("llm.stub_script", "stub-script", None),
    spec("llm.url", "llm-url", None),
    spec("llm.model", "llm-model", Some(DEFAULT_LLM_MODEL)),
    spec("llm.temperature", "temperature", Some("0")),
    spec("llm.max_tokens", "max-tokens", Some("512")),
    spec("llm.timeout_ms", "timeout-ms", Some("60000")),
    spec("llm.max_in_flight", "max-in-flight", Some("4")),
    spec("prompt.head", "prompt-head", None),
    spec("prompt.dump_dir", "dump-prompts", None),
    spec("relations.model", "relation-model", Some("annotated")),
    spec("relations.threshold", "relation-threshold", Some("0.5")),
    spec("relations.weights", "weights", None),
    spec("relations.prototypes", "prototypes", None),
    spec("questions.path", "questions", None),
    spec("query.image", "image", None),
    spec("query.question", "question", None),
    spec("output.path", "output", None),
    spec("output.format", "out", Some("md")),
    spec("output.scores", "scores-output", None),
    spec("output.transcript", "transcript", None),
    spec("report.scores", "scores", None),
    spec("run.seed", "seed", Some("42")),
    spec("run.jobs", "jobs", None),
    spec("run.dry_run", "dry-run", Some("false")),
    spec("run.log_level", "log-level", Some("warn")),
];

/// Keys read only from the environment and never dumped in clear.
const SECRETS: [(&str, &str); 2] = [
    ("embedder.api_key", EMBED_API_KEY_ENV),
    ("llm.api_key", LLM_API_KEY_ENV),
];

/// Whether `name` is a configuration flag (long name without dashes).
pub fn is_flag(name: &str) -> bool {
    KEYS.iter().any(|s| s.flag == name)
}

fn env_name(flag: &str) -> String {
    format!("SGRAG_{}", flag.to_uppercase().replace('-', "_"))
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedderKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubMode {
    Echo,
    Scripted,
    Template,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationSource {
    Annotated,
    PenetToy,
}

fn parse_choice<T: Copy>(value: &str, choices: &[(&str, T)]) -> Result<T, String> {
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            format!("expected one of {}", names.join("|"))
        })
}

/// Fully resolved configuration. Every default is materialized.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub adapter: Adapter,
    pub min_score: f64,
    pub index: Option<PathBuf>,
    pub corpus: bool,
    pub chunks: Option<PathBuf>,
    pub k: usize,
    pub k_values: Vec<usize>,
    pub embedder: EmbedderKind,
    pub embed_dim: usize,
    pub embed_url: Option<String>,
    pub embed_model: Option<String>,
    pub embed_timeout: Duration,
    pub embed_api_key: Option<String>,
    pub backend: BackendKind,
    pub stub_mode: StubMode,
    pub stub_script: Option<PathBuf>,
    pub llm_url: Option<String>,
    pub llm_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub llm_timeout: Duration,
    pub max_in_flight: usize,
    pub llm_api_key: Option<String>,
    pub prompt_head: Option<PathBuf>,
    pub dump_prompts: Option<PathBuf>,
    pub relation_model: RelationSource,
    pub relation_threshold: f64,
    pub weights: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub image: Option<String>,
    pub question: Option<String>,
    pub output: Option<PathBuf>,
    pub out_format: ReportFormat,
    pub scores_output: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub dry_run: bool,
    pub log_level: LevelFilter,
    resolved: BTreeMap<&'static str, (String, Source)>,
}

impl RunConfig {
    /// `key = "value"  # source` per line, secrets redacted.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (key, (value, source)) in &self.resolved {
            let shown = if SECRETS.iter().any(|(k, _)| k == key) {
                "<redacted>"
            } else {
                value.as_str()
            };
            out.push_str(&format!("{key} = {shown:?}  # {source}\n"));
        }
        out
    }

    pub fn source_of(&self, key: &str) -> Option<Source> {
        self.resolved.get(key).map(|(_, s)| *s)
    }
}

/// Flattens a TOML document into dotted keys. Arrays become comma lists.
fn flatten_toml(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::File(e.to_string()))?;
    let mut out = BTreeMap::new();
    fn walk(
        prefix: &str,
        value: &toml::Value,
        out: &mut BTreeMap<String, String>,
    ) -> Result<(), ConfigError> {
        let scalar = |v: &toml::Value| -> Result<String, ConfigError> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                toml::Value::Boolean(b) => Ok(b.to_string()),
                other => Err(ConfigError::File(format!(
                    "`{prefix}`: unsupported value {other}"
                ))),
            }
        };
        match value {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out)?;
                }
            }
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                out.insert(prefix.to_string(), parts.join(","));
            }
            v => {
                out.insert(prefix.to_string(), scalar(v)?);
            }
        }
        Ok(())
    }
    walk("", &toml::Value::Table(table), &mut out)?;
    Ok(out)
}

/// Resolves the configuration. `flags` is keyed by long flag name without
/// dashes prefix (`k`, `llm-url`), `env` by variable name, and `file` is
/// the TOML text of the config file if any.
pub fn resolve_config(
    flags: &BTreeMap<String, String>,
    env: &BTreeMap<String, String>,
    file: Option<&str>,
) -> Result<RunConfig, ConfigError> {
    let file_values = match file {
        Some(text) => flatten_toml(text)?,
        None => BTreeMap::new(),
    };
    for key in file_values.keys() {
        if !KEYS.iter().any(|s| s.key == key) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
    }
    for flag in flags.keys() {
        if !KEYS.iter().any(|s| s.flag == flag) {
            return Err(ConfigError::UnknownKey(flag.clone()));
        }
    }

    let jobs_default = default_jobs().to_string();
    let mut resolved: BTreeMap<&'static str, (String, Source)> = BTreeMap::new();
    for s in KEYS {
        let value = if let Some(v) = flags.get(s.flag) {
            Some((v.clone(), Source::Flag))
        } else if let Some(v) = env.get(&env_name(s.flag)) {
            Some((v.clone(), Source::Env))
        } else if let Some(v) = file_values.get(s.key) {
            Some((v.clone(), Source::File))
        } else if s.key == "run.jobs" {
            Some((jobs_default.clone(), Source::Default))
        } else {
            s.default.map(|d| (d.to_string(), Source::Default))
        };
        if let Some(v) = value {
            resolved.insert(s.key, v);
        }
    }
    for (key, var) in SECRETS {
        if let Some(v) = env.get(var).filter(|v| !v.is_empty()) {
            resolved.insert(key, (v.clone(), Source::Env));
        }
    }

    let r = Resolver {
        resolved: &resolved,
    };
    let config = RunConfig {
        dataset: r.opt("dataset.path").map(PathBuf::from),
        format: r.parse("dataset.format", DatasetFormat::from_str)?,
        adapter: r.parse("dataset.adapter", |v| {
            Adapter::from_str(v).map_err(|e| e.to_string())
        })?,
        min_score: r.parse("dataset.min_score", unit_interval)?,
        index: r.opt("index.path").map(PathBuf::from),
        corpus: r.parse("index.corpus", parse_bool)?,
        chunks: r.opt("chunks.path").map(PathBuf::from),
        k: r.parse("retrieval.k", positive)?,
        k_values: r.parse("ablation.k_values", |v| {
            let ks = v
                .split(',')
                .map(|p| positive(p.trim()))
                .collect::<Result<Vec<_>, _>>()?;
            if ks.is_empty() {
                return Err("expected a comma-separated list of positive integers".into());
            }
            Ok(ks)
        })?,
        embedder: r.parse("embedder.kind", |v| {
            parse_choice(
                v,
                &[
                    ("local", EmbedderKind::Local),
                    ("remote", EmbedderKind::Remote),
                ],
            )
        })?,
        embed_dim: r.parse("embedder.dim", positive)?,
        embed_url: r.opt("embedder.url"),
        embed_model: r.opt("embedder.model"),
        embed_timeout: Duration::from_millis(
            r.parse("embedder.timeout_ms", |v| positive(v).map(|n| n as u64))?,
        ),
        embed_api_key: r.opt("embedder.api_key"),
        backend: r.parse("llm.backend", |v| {
            parse_choice(
                v,
                &[("stub", BackendKind::Stub), ("remote", BackendKind::Remote)],
            )
        })?,
        stub_mode: r.parse("llm.stub_mode", |v| {
            parse_choice(
                v,
                &[
                    ("echo", StubMode::Echo),
                    ("scripted", StubMode::Scripted),
                    ("template", StubMode::Template),
                ],
            )
        })?,
        stub_script: r.opt("llm.stub_script").map(PathBuf::from),
        llm_url: r.opt("llm.url"),
        llm_model: r.opt("llm.model").unwrap_or_default(),
        temperature: r.parse("llm.temperature", |v| {
            let t: f64 = v.parse().map_err(|_| "expected a number".to_string())?;
            if t.is_finite() && t >= 0.0 {
                Ok(t)
            } else {
                Err("must be a finite number ≥ 0".into())
            }
        })?,
        max_tokens: r.parse("llm.max_tokens", |v| positive(v).map(|n| n as u32))?,
        llm_timeout: Duration::from_millis(
            r.parse("llm.timeout_ms", |v| positive(v).map(|n| n as u64))?,
        ),
        max_in_flight: r.parse("llm.max_in_flight", positive)?,
        llm_api_key: r.opt("llm.api_key"),
        prompt_head: r.opt("prompt.head").map(PathBuf::from),
        dump_prompts: r.opt("prompt.dump_dir").map(PathBuf::from),
        relation_model: r.parse("relations.model", |v| {
            parse_choice(
                v,
                &[
                    ("annotated", RelationSource::Annotated),
                    ("penet-toy", RelationSource::PenetToy),
                ],
            )
        })?,
        relation_threshold: r.parse("relations.threshold", |v| {
            let t: f64 = v.parse().map_err(|_| "expected a number".to_string())?;
            if (-1.0..=1.0).contains(&t) {
                Ok(t)
            } else {
                Err("must lie in [-1, 1]".into())
            }
        })?,
        weights: r.opt("relations.weights").map(PathBuf::from),
        prototypes: r.opt("relations.prototypes").map(PathBuf::from),
        questions: r.opt("questions.path").map(PathBuf::from),
        image: r.opt("query.image"),
        question: r.opt("query.question"),
        output: r.opt("output.path").map(PathBuf::from),
        out_format: r.parse("output.format", ReportFormat::from_str)?,
        scores_output: r.opt("output.scores").map(PathBuf::from),
        transcript: r.opt("output.transcript").map(PathBuf::from),
        scores: r.opt("report.scores").map(PathBuf::from),
        seed: r.parse("run.seed", |v| {
            v.parse::<u64>()
                .map_err(|_| "expected a non-negative integer".to_string())
        })?,
        jobs: r.parse("run.jobs", positive)?,
        dry_run: r.parse("run.dry_run", parse_bool)?,
        log_level: r.parse("run.log_level", |v| {
            LevelFilter::from_str(v)
                .map_err(|_| "expected off|error|warn|info|debug|trace".to_string())
        })?,
        resolved: resolved.clone(),
    };

    if config.embedder == EmbedderKind::Remote {
        for key in ["embedder.url", "embedder.model"] {
            if r.opt(key).is_none() {
                return Err(ConfigError::Missing {
                    key: key.into(),
                    when: "embedder.kind = remote".into(),
                });
            }
        }
    }
    if config.backend == BackendKind::Remote && config.llm_url.is_none() {
        return Err(ConfigError::Missing {
            key: "llm.url".into(),
            when: "llm.backend = remote".into(),
        });
    }
    if config.backend == BackendKind::Stub
        && config.stub_mode == StubMode::Scripted
        && config.stub_script.is_none()
    {
        return Err(ConfigError::Missing {
            key: "llm.stub_script".into(),
            when: "llm.stub_mode = scripted".into(),
        });
    }
    if config.llm_model.trim().is_empty() {
        return Err(r.invalid("llm.model", "must be non-empty"));
    }
    Ok(config)
}

struct Resolver<'a> {
    resolved: &'a BTreeMap<&'static str, (String, Source)>,
}

impl Resolver<'_> {
    fn opt(&self, key: &str) -> Option<String> {
        self.resolved
            .get(key)
            .map(|(v, _)| v.clone())
            .filter(|v| !v.is_empty())
    }

    fn invalid(&self, key: &str, reason: &str) -> ConfigError {
        let (value, source) = self
            .resolved
            .get(key)
            .cloned()
            .unwrap_or((String::new(), Source::Default));
        ConfigError::Invalid {
            key: display_key(key),
            value,
            origin: source,
            reason: reason.to_string(),
        }
    }

    fn parse<T>(
        &self,
        key: &str,
        f: impl FnOnce(&str) -> Result<T, String>,
    ) -> Result<T, ConfigError> {
        let (value, _) = self.resolved.get(key).expect("key with default");
        f(value.trim()).map_err(|reason| self.invalid(key, &reason))
    }
}

/// `retrieval.k (--k)`.
fn display_key(key: &str) -> String {
    match KEYS.iter().find(|s| s.key == key) {
        Some(s) => format!("{} (--{})", s.key, s.flag),
        None => key.to_string(),
    }
}

fn positive(v: &str) -> Result<usize, String> {
    match v.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(_) => Err("expected a positive integer".into()),
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn unit_interval(v: &str) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| "expected a number".to_string())?;
    if (0.0..=1.0).contains(&x) {
        Ok(x)
    } else {
        Err("must lie in [0, 1]".into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn empty_inputs_give_defaults() {
        let c = resolve_config(&map(&[]), &map(&[]), None).unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.seed, 42);
        assert_eq!(c.k_values, [1, 2, 4, 8, 16]);
        assert_eq!(c.embedder, EmbedderKind::Local);
        assert_eq!(c.embed_dim, 256);
        assert_eq!(c.backend, BackendKind::Stub);
        assert_eq!(c.stub_mode, StubMode::Template);
        assert_eq!(c.llm_model, "Qwen2-72B-Instruct");
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.relation_model, RelationSource::Annotated);
        assert_eq!(c.relation_threshold, 0.5);
        assert_eq!(c.jobs, default_jobs());
        assert!(c.jobs >= 1 && c.jobs <= 8);
        assert_eq!(c.source_of("retrieval.k"), Some(Source::Default));
    }

    #[test]
    fn precedence_flag_env_file_default() {
        let file = "[retrieval]\nk = 2\n[run]\nseed = 7\njobs = 3\n";
        let env = map(&[("SGRAG_K", "5"), ("SGRAG_SEED", "9")]);
        let flags = map(&[("k", "6")]);
        let c = resolve_config(&flags, &env, Some(file)).unwrap();
        assert_eq!((c.k, c.seed, c.jobs), (6, 9, 3));
        assert_eq!(c.source_of("retrieval.k"), Some(Source::Flag));
        assert_eq!(c.source_of("run.seed"), Some(Source::Env));
        assert_eq!(c.source_of("run.jobs"), Some(Source::File));
        let c = resolve_config(&map(&[]), &map(&[]), Some("retrieval.k = 8")).unwrap();
        assert_eq!(c.k, 8);
    }

    #[test]
    fn zero_k_names_the_key() {
        let err = resolve_config(&map(&[("k", "0")]), &map(&[]), None).unwrap_err();
        assert!(err.to_string().contains("retrieval.k (--k)"), "{err}");
        assert!(err.to_string().contains("flag"), "{err}");
        let err = resolve_config(&map(&[]), &map(&[]), Some("[ablation]\nk_values = [1, 0]"))
            .unwrap_err();
        assert!(err.to_string().contains("ablation.k_values"), "{err}");
    }

    #[test]
    fn unknown_and_malformed_keys() {
        assert_eq!(
            resolve_config(&map(&[]), &map(&[]), Some("[retrieval]\nkk = 1")).unwrap_err(),
            ConfigError::UnknownKey("retrieval.kk".into())
        );
        assert!(matches!(
            resolve_config(&map(&[]), &map(&[]), Some("k = ")),
            Err(ConfigError::File(_))
        ));
        let err = resolve_config(&map(&[("embedder", "cloud")]), &map(&[]), None).unwrap_err();
        assert!(err.to_string().contains("local|remote"), "{err}");
    }

    #[test]
    fn conflicting_values_are_usage_errors() {
        let err = resolve_config(&map(&[("backend", "remote")]), &map(&[]), None).unwrap_err();
        assert!(matches!(err, ConfigError::Missing { ref key, .. } if key == "llm.url"));
        let err = resolve_config(&map(&[("stub-mode", "scripted")]), &map(&[]), None).unwrap_err();
        assert!(matches!(err, ConfigError::Missing { ref key, .. } if key == "llm.stub_script"));
        let err = resolve_config(
            &map(&[("embedder", "remote"), ("embed-url", "http://x")]),
            &map(&[]),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Missing { ref key, .. } if key == "embedder.model"));
    }

    #[test]
    fn secrets_come_from_env_and_are_redacted() {
        let env = map(&[
            (LLM_API_KEY_ENV, "sk-secret"),
            (EMBED_API_KEY_ENV, "ek-secret"),
        ]);
        let c = resolve_config(&map(&[]), &env, None).unwrap();
        assert_eq!(c.llm_api_key.as_deref(), Some("sk-secret"));
        assert_eq!(c.embed_api_key.as_deref(), Some("ek-secret"));
        let dump = c.dump();
        assert!(!dump.contains("secret"), "{dump}");
        assert!(dump.contains("llm.api_key = \"<redacted>\""));
        assert!(dump.contains("retrieval.k = \"4\"  # default"));
        assert!(matches!(
            resolve_config(&map(&[]), &map(&[]), Some("[llm]\napi_key = \"x\"")),
            Err(ConfigError::UnknownKey(_))
        ));
    }
}
