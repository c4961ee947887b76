//! Experiment config files.
//!
//! The format is TOML restricted to flat `key = value` lines, with dotted keys
//! for nested sections:
//!
//! ```text
//! # comments start with '#'
//! clients = 8
//! rounds = 30
//! aggregation = "fedavg"          # fedavg | fedavgm | fedmedian | fedprox | fedcda
//! action_strategy = "normalized"  # normalized | weighted_metric | full
//! optimized_client = 0            # or "none"
//! data.alpha = 0.5
//! data.csv = "blobs.csv"          # optional; rows of features, label last
//! model.hidden = [32]
//! agent.gamma = 0.99
//! reward.tau = 10
//! ```
//!
//! `[section]` headers are accepted too. Missing keys take their defaults,
//! unknown keys are rejected, and every diagnostic names the offending key
//! and its line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fedopt_core::orchestrator::ExperimentConfig;
use fedopt_core::Error as CoreError;
use toml::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key `{key}`{}: {reason}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Invalid {
        key: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("cannot encode config: {0}")]
    Encode(String),
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut cfg = parse_config(&text)?;
    // A relative dataset path is relative to the config file.
    if let (Some(csv), Some(dir)) = (cfg.data.csv.as_mut(), path.parent()) {
        if csv.is_relative() {
            *csv = dir.join(&*csv);
        }
    }
    Ok(cfg)
}

/// Parse and validate config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(text, s.start));
        let src = text.lines().nth(line - 1).unwrap_or("").trim();
        ConfigError::Syntax {
            line,
            message: format!("`{src}`: {}", e.message().trim()),
        }
    })?;
    cfg.validate().map_err(|e| match e {
        CoreError::InvalidArgument { name, reason } => ConfigError::Invalid {
            key: name.to_string(),
            line: key_line(text, name),
            reason,
        },
        other => ConfigError::Invalid {
            key: "config".into(),
            line: None,
            reason: other.to_string(),
        },
    })?;
    Ok(cfg)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line where the dotted `key` is assigned, if anywhere.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = header.trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let local: String = lhs.split('.').map(|p| p.trim().trim_matches('"')).collect::<Vec<_>>().join(".");
        let full = if section.is_empty() { local } else { format!("{section}.{local}") };
        if full == key {
            return Some(i + 1);
        }
    }
    None
}

/// Emit the fully resolved config as flat dotted `key = value` lines.
pub fn emit_config(cfg: &ExperimentConfig) -> Result<String, ConfigError> {
    let value = Value::try_from(cfg).map_err(|e| ConfigError::Encode(e.to_string()))?;
    let mut out = String::new();
    if let Value::Table(table) = value {
        // Scalars first so that section keys follow their plain siblings.
        let (sections, plain): (Vec<_>, Vec<_>) = table.into_iter().partition(|(_, v)| v.is_table());
        for (k, v) in plain.into_iter().chain(sections) {
            flatten(&k, &v, &mut out);
        }
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Table(t) => {
            for (k, inner) in t {
                flatten(&format!("{prefix}.{k}"), inner, out);
            }
        }
        other => {
            let _ = writeln!(out, "{prefix} = {other}");
        }
    }
}
