//! Layered configuration: defaults, then a TOML file, then `CRAMF_*`
//! environment variables, then `key=value` overrides from the command line.
//!
//! Environment overrides use `CRAMF_<SECTION>__<KEY>` with `__` separating
//! path segments, so `CRAMF_RETRIEVAL__FINAL_TOP=2` sets `retrieval.final_top`.
//! Variables without a `__` (such as provider API keys) are ignored here.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::eval::{CommandCompiler, CommandCompilerConfig, Compiler, ScriptedCompiler};
use crate::eval::EvalSettings;
use crate::populate::PopulateOptions;
use crate::provider::http::{HttpChat, HttpEmbed, HttpProviderConfig, HttpRerank};
use crate::provider::mock::{CosineReranker, HashEmbedder, HeuristicChat, ScriptedChat};
use crate::provider::replay::{ReplayBackend, Tape};
use crate::provider::{
    ChatBackend, EmbedBackend, Gateway, GatewayLimits, RerankBackend, RetryPolicy, TemplateCatalog,
};
use crate::retrieval::RetrievalSettings;

pub const ENV_PREFIX: &str = "CRAMF_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("override {0:?} is not of the form key=value")]
    Override(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Deterministic builtin mock.
    #[default]
    Mock,
    /// Chat only: rules from `script`, falling back to the builtin mock.
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub script: Option<PathBuf>,
    pub http: Option<HttpProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ProvidersConfig {
    pub chat: ProviderConfig,
    pub embed: ProviderConfig,
    pub rerank: ProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_concurrent: usize,
    pub min_interval_ms: u64,
    pub max_retries: u32,
    pub retry_delay_ms: u64,
    pub embed_batch_size: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let limits = GatewayLimits::default();
        let retry = RetryPolicy::default();
        GatewayConfig {
            max_concurrent: limits.max_concurrent,
            min_interval_ms: limits.min_interval_ms,
            max_retries: retry.max_retries,
            retry_delay_ms: retry.base_delay_ms,
            embed_batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulateConfig {
    pub candidates: usize,
    pub temperature: f64,
    pub success_ratio: f64,
    pub checkpoint_every: usize,
}

impl Default for PopulateConfig {
    fn default() -> Self {
        let o = PopulateOptions::default();
        PopulateConfig {
            candidates: o.candidates,
            temperature: o.temperature,
            success_ratio: o.success_ratio,
            checkpoint_every: o.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompilerKind {
    /// Compiles everything except code containing a `fail_when_contains`
    /// needle.
    #[default]
    Mock,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CompilerConfig {
    pub kind: CompilerKind,
    pub fail_when_contains: Vec<String>,
    pub command: CommandCompilerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Worker threads for parallel stages.
    pub workers: usize,
    /// Directory of `*.txt` templates overriding the builtin catalog.
    pub templates_dir: Option<PathBuf>,
    pub providers: ProvidersConfig,
    pub gateway: GatewayConfig,
    pub retrieval: RetrievalSettings,
    pub populate: PopulateConfig,
    pub eval: EvalSettings,
    pub compiler: CompilerConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            workers: 4,
            templates_dir: None,
            providers: ProvidersConfig::default(),
            gateway: GatewayConfig::default(),
            retrieval: RetrievalSettings::default(),
            populate: PopulateConfig::default(),
            eval: EvalSettings::default(),
            compiler: CompilerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Default => "default",
            Layer::File => "file",
            Layer::Env => "env",
            Layer::Flag => "flag",
        })
    }
}

/// The merged configuration and the layer that set each leaf key.
#[derive(Debug, Clone)]
pub struct Effective {
    pub config: Config,
    pub sources: BTreeMap<String, Layer>,
    tree: Table,
}

#[derive(Debug, Clone, Default)]
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    pub env: Vec<(String, String)>,
    pub overrides: Vec<String>,
}

impl<'a> Sources<'a> {
    /// `CRAMF_*` variables of the current process.
    pub fn process_env(mut self) -> Self {
        self.env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        self
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn lookup<'t>(table: &'t Table, path: &[&str]) -> Option<&'t Value> {
    let (last, init) = path.split_last()?;
    let mut cur = table;
    for seg in init {
        cur = cur.get(*seg)?.as_table()?;
    }
    cur.get(*last)
}

/// Parses a raw override string, keeping it a string when the key already
/// holds one.
fn parse_scalar(raw: &str, existing: Option<&Value>) -> Value {
    if matches!(existing, Some(Value::String(_))) {
        return Value::String(raw.to_string());
    }
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &[&str], value: Value) {
    let (last, init) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for seg in init {
        let entry = cur
            .entry(seg.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("table");
    }
    cur.insert(last.to_string(), value);
}

fn record(sources: &mut BTreeMap<String, Layer>, prefix: &str, value: &Value, layer: Layer) {
    match value {
        Value::Table(t) => {
            let mut leaves = Vec::new();
            flatten(prefix, t, &mut leaves);
            for (k, _) in leaves {
                sources.insert(k, layer);
            }
        }
        _ => {
            sources.insert(prefix.to_string(), layer);
        }
    }
}

fn defaults_tree() -> Table {
    match Value::try_from(Config::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// Merges every layer, checks for unknown keys and validates the result.
pub fn load(sources: &Sources<'_>) -> Result<Effective, ConfigError> {
    let mut tree = defaults_tree();
    let mut provenance = BTreeMap::new();
    record(&mut provenance, "", &Value::Table(tree.clone()), Layer::Default);

    if let Some(path) = sources.file {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let file: Table = toml::from_str(&text).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        record(&mut provenance, "", &Value::Table(file.clone()), Layer::File);
        merge(&mut tree, &file);
    }

    let mut env: Vec<&(String, String)> = sources
        .env
        .iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
        .collect();
    env.sort();
    for (k, v) in env {
        let path: Vec<String> = k[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_lowercase)
            .collect();
        let path: Vec<&str> = path.iter().map(String::as_str).collect();
        apply(&mut tree, &mut provenance, &path, v, Layer::Env)?;
    }

    for o in &sources.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(o.clone()))?;
        let path: Vec<&str> = k.trim().split('.').collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(ConfigError::Override(o.clone()));
        }
        apply(&mut tree, &mut provenance, &path, v.trim(), Layer::Flag)?;
    }

    let config: Config = Value::Table(tree.clone())
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
    let known = match Value::try_from(&config).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!(),
    };
    let mut leaves = Vec::new();
    flatten("", &tree, &mut leaves);
    for (k, _) in &leaves {
        let path: Vec<&str> = k.split('.').collect();
        if lookup(&known, &path).is_none() {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
    }
    config.validate()?;
    provenance.retain(|k, _| leaves.iter().any(|(l, _)| l == k));
    Ok(Effective {
        config,
        sources: provenance,
        tree,
    })
}

fn apply(
    tree: &mut Table,
    provenance: &mut BTreeMap<String, Layer>,
    path: &[&str],
    raw: &str,
    layer: Layer,
) -> Result<(), ConfigError> {
    if path.is_empty() || path.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::UnknownKey(path.join(".")));
    }
    let value = parse_scalar(raw, lookup(tree, path));
    record(provenance, &path.join("."), &value, layer);
    set_path(tree, path, value);
    Ok(())
}

impl Effective {
    /// One `key = value  # layer` line per leaf, sorted by key.
    pub fn render(&self) -> String {
        let mut leaves = Vec::new();
        flatten("", &self.tree, &mut leaves);
        leaves.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (k, v) in leaves {
            let layer = self.sources.get(&k).copied().unwrap_or(Layer::Default);
            out.push_str(&format!("{k} = {v}  # {layer}\n"));
        }
        out
    }
}

fn ensure(ok: bool, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(message()))
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.retrieval.check().map_err(ConfigError::Invalid)?;
        ensure(self.workers >= 1, || "workers must be at least 1".into())?;
        ensure(self.gateway.max_concurrent >= 1, || {
            "gateway.max_concurrent must be at least 1".into()
        })?;
        ensure(self.gateway.embed_batch_size >= 1, || {
            "gateway.embed_batch_size must be at least 1".into()
        })?;
        ensure(self.populate.candidates >= 1, || {
            "populate.candidates must be at least 1".into()
        })?;
        ensure(self.populate.checkpoint_every >= 1, || {
            "populate.checkpoint_every must be at least 1".into()
        })?;
        ensure((0.0..=1.0).contains(&self.populate.success_ratio), || {
            "populate.success_ratio must lie in [0, 1]".into()
        })?;
        ensure(self.eval.attempts >= 1, || "eval.attempts must be at least 1".into())?;
        ensure(self.eval.hit_k >= 1, || "eval.hit_k must be at least 1".into())?;
        for (name, p) in [
            ("chat", &self.providers.chat),
            ("embed", &self.providers.embed),
            ("rerank", &self.providers.rerank),
        ] {
            match p.kind {
                ProviderKind::Mock => {}
                ProviderKind::Scripted => {
                    ensure(name == "chat", || {
                        format!("providers.{name}: only chat supports kind = \"scripted\"")
                    })?;
                    let script = p.script.as_ref().ok_or_else(|| {
                        ConfigError::Invalid("providers.chat.script is required".into())
                    })?;
                    ensure(script.is_file(), || {
                        format!("providers.chat.script {} does not exist", script.display())
                    })?;
                }
                ProviderKind::Http => {
                    ensure(p.http.is_some(), || format!("providers.{name}.http is required"))?;
                }
            }
        }
        if self.compiler.kind == CompilerKind::Command {
            CommandCompiler::new(self.compiler.command.clone())
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.templates()?;
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateCatalog, ConfigError> {
        match &self.templates_dir {
            None => Ok(TemplateCatalog::builtin()),
            Some(dir) => {
                ensure(dir.is_dir(), || {
                    format!("templates_dir {} is not a directory", dir.display())
                })?;
                TemplateCatalog::builtin_with_overrides(dir)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))
            }
        }
    }

    fn chat_backend(&self) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        let p = &self.providers.chat;
        Ok(match p.kind {
            ProviderKind::Mock => Arc::new(HeuristicChat),
            ProviderKind::Scripted => {
                let script = p.script.as_deref().unwrap_or(Path::new(""));
                Arc::new(
                    ScriptedChat::from_script(script)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?
                        .with_fallback(HeuristicChat),
                )
            }
            ProviderKind::Http => Arc::new(
                HttpChat::new(p.http.as_ref().expect("validated"))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    fn embed_backend(&self) -> Result<Arc<dyn EmbedBackend>, ConfigError> {
        let p = &self.providers.embed;
        Ok(match p.kind {
            ProviderKind::Http => Arc::new(
                HttpEmbed::new(p.http.as_ref().expect("validated"))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
            _ => Arc::new(HashEmbedder::default()),
        })
    }

    fn rerank_backend(&self) -> Result<Arc<dyn RerankBackend>, ConfigError> {
        let p = &self.providers.rerank;
        Ok(match p.kind {
            ProviderKind::Http => Arc::new(
                HttpRerank::new(p.http.as_ref().expect("validated"))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
            _ => Arc::new(CosineReranker::new(HashEmbedder::default())),
        })
    }

    /// Gateway over the configured providers, or over `replay` for every
    /// provider kind when given.
    pub fn gateway(&self, replay: Option<Arc<Tape>>) -> Result<Gateway, ConfigError> {
        let templates = self.templates()?;
        let gw = match replay {
            Some(tape) => {
                let backend = Arc::new(ReplayBackend::new(tape));
                Gateway::new(templates, backend.clone(), backend.clone(), backend)
            }
            None => Gateway::new(
                templates,
                self.chat_backend()?,
                self.embed_backend()?,
                self.rerank_backend()?,
            ),
        };
        Ok(gw
            .with_retry(RetryPolicy {
                max_retries: self.gateway.max_retries,
                base_delay_ms: self.gateway.retry_delay_ms,
            })
            .with_limits(GatewayLimits {
                max_concurrent: self.gateway.max_concurrent,
                min_interval_ms: self.gateway.min_interval_ms,
            })
            .with_embed_batch_size(self.gateway.embed_batch_size))
    }

    pub fn compiler(&self) -> Result<Box<dyn Compiler>, ConfigError> {
        Ok(match self.compiler.kind {
            CompilerKind::Mock => {
                let mut c = ScriptedCompiler::always(true);
                for needle in &self.compiler.fail_when_contains {
                    c = c.when_contains(needle.clone(), false);
                }
                Box::new(c)
            }
            CompilerKind::Command => Box::new(
                CommandCompiler::new(self.compiler.command.clone())
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn populate_options(&self) -> PopulateOptions {
        PopulateOptions {
            candidates: self.populate.candidates,
            temperature: self.populate.temperature,
            success_ratio: self.populate.success_ratio,
            checkpoint_every: self.populate.checkpoint_every,
            workers: self.workers,
            ..PopulateOptions::default()
        }
    }
}
