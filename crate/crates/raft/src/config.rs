//! `key: value` configuration files for the client agent and the server.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use raft_core::digest::HashAlgorithm;
use raft_core::model::DEFAULT_CHUNK_SIZE;
use raft_core::session::DEFAULT_RETRY_LIMIT;

use crate::transport::{FaultPlan, LatencyModel, DEFAULT_PORT};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {detail}")]
    Invalid { key: String, detail: String },
    #[error("unknown key `{key}` on line {line}")]
    UnknownKey { key: String, line: usize },
}

/// Splits config text into `(line, key, value)` triples. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, detail: "expected `key: value`".into() })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, detail: "empty key".into() });
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Invalid { key: key.into(), detail: e.to_string() })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::Invalid { key: key.into(), detail: format!("`{value}` is not a boolean") }),
    }
}

/// A device declared explicitly in the agent config:
/// `device: <id> <path> [label]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfiguredDevice {
    pub device_id: String,
    pub path: PathBuf,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub server_host: String,
    pub server_port: u16,
    /// Lowercase hex SHA-512 of the unlock passphrase.
    pub passphrase_digest: Option<String>,
    pub scan_root: Option<PathBuf>,
    pub devices: Vec<ConfiguredDevice>,
    pub case_id: String,
    pub chunk_size: u64,
    pub chunk_digest_algorithm: HashAlgorithm,
    pub whole_image_algorithm: HashAlgorithm,
    pub insecure_transport_ok: bool,
    pub retry_limit: u32,
    pub max_reconnects: u32,
    pub reply_timeout: Duration,
    pub parallel_acquisition: bool,
    pub control_bind: String,
    pub fault: Option<FaultPlan>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            server_host: "127.0.0.1".into(),
            server_port: DEFAULT_PORT,
            passphrase_digest: None,
            scan_root: None,
            devices: Vec::new(),
            case_id: "case".into(),
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_digest_algorithm: HashAlgorithm::Sha512,
            whole_image_algorithm: HashAlgorithm::Sha512,
            insecure_transport_ok: false,
            retry_limit: DEFAULT_RETRY_LIMIT,
            max_reconnects: 3,
            reply_timeout: Duration::from_secs(120),
            parallel_acquisition: false,
            control_bind: "127.0.0.1:8473".into(),
            fault: None,
        }
    }
}

impl AgentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = AgentConfig::parse(&read(path)?)?;
        if let Some(base) = path.parent() {
            if let Some(root) = &cfg.scan_root {
                cfg.scan_root = Some(base.join(root));
            }
            for d in &mut cfg.devices {
                d.path = base.join(&d.path);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = AgentConfig::default();
        let mut fault = FaultPlan::passthrough(0);
        let mut any_fault = false;
        for (line, key, value) in parse_pairs(text)? {
            let v = value.as_str();
            match key.as_str() {
                "server_host" => cfg.server_host = value,
                "server_port" => cfg.server_port = parse(&key, v)?,
                "passphrase_digest" => {
                    let hex = v.to_ascii_lowercase();
                    if hex.len() != 128 || !hex.bytes().all(|b| b.is_ascii_hexdigit()) {
                        return Err(ConfigError::Invalid { key, detail: "expected 128 hex digits of SHA-512".into() });
                    }
                    cfg.passphrase_digest = Some(hex);
                }
                "scan_root" => cfg.scan_root = Some(PathBuf::from(v)),
                "device" => {
                    let mut parts = v.splitn(3, char::is_whitespace).filter(|s| !s.is_empty());
                    let (Some(id), Some(path)) = (parts.next(), parts.next()) else {
                        return Err(ConfigError::Invalid { key, detail: "expected `<id> <path> [label]`".into() });
                    };
                    cfg.devices.push(ConfiguredDevice {
                        device_id: id.into(),
                        path: path.into(),
                        label: parts.next().map(|l| l.trim().to_string()),
                    });
                }
                "case_id" => cfg.case_id = value,
                "chunk_size" => {
                    cfg.chunk_size = parse(&key, v)?;
                    if cfg.chunk_size == 0 {
                        return Err(ConfigError::Invalid { key, detail: "must be positive".into() });
                    }
                }
                "chunk_digest_algorithm" => cfg.chunk_digest_algorithm = parse(&key, v)?,
                "whole_image_algorithm" => cfg.whole_image_algorithm = parse(&key, v)?,
                "insecure_transport_ok" => cfg.insecure_transport_ok = parse_bool(&key, v)?,
                "retry_limit" => cfg.retry_limit = parse(&key, v)?,
                "max_reconnects" => cfg.max_reconnects = parse(&key, v)?,
                "reply_timeout_secs" => cfg.reply_timeout = Duration::from_secs_f64(parse(&key, v)?),
                "parallel_acquisition" => cfg.parallel_acquisition = parse_bool(&key, v)?,
                "control_bind" => cfg.control_bind = value,
                k if k.starts_with("fault_") => {
                    any_fault = true;
                    apply_fault_key(&mut fault, &key, v)?;
                }
                _ => return Err(ConfigError::UnknownKey { key, line }),
            }
        }
        if any_fault {
            cfg.fault = Some(fault);
        }
        Ok(cfg)
    }
}

fn apply_fault_key(plan: &mut FaultPlan, key: &str, v: &str) -> Result<(), ConfigError> {
    match key {
        "fault_seed" => plan.seed = parse(key, v)?,
        "fault_corrupt_chunk_probability" => {
            let p: f64 = parse(key, v)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid { key: key.into(), detail: "must be within [0, 1]".into() });
            }
            plan.corrupt_chunk_probability = p;
        }
        "fault_drop_connection_after_bytes" => plan.drop_connection_after_bytes = Some(parse(key, v)?),
        "fault_latency_ms" => plan.latency = LatencyModel { fixed_ms: parse(key, v)?, ..plan.latency },
        "fault_jitter_ms" => plan.latency = LatencyModel { jitter_ms: parse(key, v)?, ..plan.latency },
        "fault_bandwidth_limit_bps" => plan.bandwidth_limit_bps = Some(parse(key, v)?),
        _ => return Err(ConfigError::UnknownKey { key: key.into(), line: 0 }),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerFileConfig {
    pub store: Option<PathBuf>,
    pub bind_host: String,
    pub port: u16,
    pub passphrase: Option<String>,
    pub idle_timeout: Duration,
}

impl Default for ServerFileConfig {
    fn default() -> Self {
        ServerFileConfig {
            store: None,
            bind_host: "0.0.0.0".into(),
            port: DEFAULT_PORT,
            passphrase: None,
            idle_timeout: Duration::from_secs(300),
        }
    }
}

impl ServerFileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        ServerFileConfig::parse(&read(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ServerFileConfig::default();
        for (line, key, value) in parse_pairs(text)? {
            match key.as_str() {
                "store" => cfg.store = Some(value.into()),
                "bind_host" => cfg.bind_host = value,
                "port" => cfg.port = parse(&key, &value)?,
                "passphrase" => cfg.passphrase = Some(value),
                "idle_timeout_secs" => cfg.idle_timeout = Duration::from_secs(parse(&key, &value)?),
                _ => return Err(ConfigError::UnknownKey { key, line }),
            }
        }
        Ok(cfg)
    }
}
