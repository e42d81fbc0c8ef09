//! Compiler adapters: a scripted map for tests and an external command.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileResult {
    pub compiled: bool,
    pub diagnostics: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompileError {
    #[error("compiler configuration error: {0}")]
    Config(String),
    #[error("could not run compiler: {0}")]
    Spawn(String),
}

pub trait Compiler: Send + Sync {
    fn compile(&self, formal_code: &str) -> Result<CompileResult, CompileError>;
}

/// Outcome by exact code, then by first matching substring rule, then the
/// default.
#[derive(Debug, Clone, Default)]
pub struct ScriptedCompiler {
    exact: BTreeMap<String, bool>,
    contains: Vec<(String, bool)>,
    default: bool,
}

impl ScriptedCompiler {
    pub fn always(compiled: bool) -> Self {
        ScriptedCompiler {
            default: compiled,
            ..ScriptedCompiler::default()
        }
    }

    pub fn code(mut self, code: impl Into<String>, compiled: bool) -> Self {
        self.exact.insert(code.into(), compiled);
        self
    }

    pub fn when_contains(mut self, needle: impl Into<String>, compiled: bool) -> Self {
        self.contains.push((needle.into(), compiled));
        self
    }
}

impl Compiler for ScriptedCompiler {
    fn compile(&self, formal_code: &str) -> Result<CompileResult, CompileError> {
        let compiled = self
            .exact
            .get(formal_code)
            .copied()
            .or_else(|| {
                self.contains
                    .iter()
                    .find(|(n, _)| formal_code.contains(n.as_str()))
                    .map(|(_, c)| *c)
            })
            .unwrap_or(self.default);
        Ok(CompileResult {
            compiled,
            diagnostics: if compiled {
                String::new()
            } else {
                "scripted failure".into()
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandCompilerConfig {
    /// Program and arguments; `{file}` is replaced by the path of a
    /// temporary file holding the code.
    pub command: Vec<String>,
    pub timeout_secs: u64,
    pub success_exit_codes: Vec<i32>,
    /// Extension of the temporary source file.
    pub extension: String,
    pub working_dir: Option<PathBuf>,
}

impl Default for CommandCompilerConfig {
    fn default() -> Self {
        CommandCompilerConfig {
            command: Vec::new(),
            timeout_secs: 120,
            success_exit_codes: vec![0],
            extension: "lean".into(),
            working_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CommandCompiler {
    config: CommandCompilerConfig,
}

impl CommandCompiler {
    pub fn new(config: CommandCompilerConfig) -> Result<Self, CompileError> {
        if config.command.is_empty() {
            return Err(CompileError::Config("compiler command is empty".into()));
        }
        if !config.command.iter().any(|a| a.contains("{file}")) {
            return Err(CompileError::Config(
                "compiler command must mention {file}".into(),
            ));
        }
        Ok(CommandCompiler { config })
    }
}

impl Compiler for CommandCompiler {
    fn compile(&self, formal_code: &str) -> Result<CompileResult, CompileError> {
        let file = tempfile::Builder::new()
            .prefix("cramf-")
            .suffix(&format!(".{}", self.config.extension))
            .tempfile()
            .map_err(|e| CompileError::Spawn(e.to_string()))?;
        std::fs::write(file.path(), formal_code).map_err(|e| CompileError::Spawn(e.to_string()))?;
        let path = file.path().to_string_lossy().to_string();
        let args: Vec<String> = self
            .config
            .command
            .iter()
            .map(|a| a.replace("{file}", &path))
            .collect();
        let mut cmd = Command::new(&args[0]);
        cmd.args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(dir) = &self.config.working_dir {
            cmd.current_dir(dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| CompileError::Spawn(format!("{}: {e}", args[0])))?;
        // Drain pipes on threads so a chatty compiler cannot block on a full
        // pipe while we wait.
        let drain = |r: Option<Box<dyn Read + Send>>| {
            std::thread::spawn(move || {
                let mut s = String::new();
                if let Some(mut r) = r {
                    let _ = r.read_to_string(&mut s);
                }
                s
            })
        };
        let out = drain(child.stdout.take().map(|r| Box::new(r) as Box<dyn Read + Send>));
        let err = drain(child.stderr.take().map(|r| Box::new(r) as Box<dyn Read + Send>));
        let status = child
            .wait_timeout(Duration::from_secs(self.config.timeout_secs))
            .map_err(|e| CompileError::Spawn(e.to_string()))?;
        let (compiled, note) = match status {
            Some(s) => (
                s.code().is_some_and(|c| self.config.success_exit_codes.contains(&c)),
                String::new(),
            ),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                (false, format!("timed out after {}s\n", self.config.timeout_secs))
            }
        };
        let diagnostics = format!(
            "{note}{}{}",
            out.join().unwrap_or_default(),
            err.join().unwrap_or_default()
        );
        Ok(CompileResult {
            compiled,
            diagnostics,
        })
    }
}
