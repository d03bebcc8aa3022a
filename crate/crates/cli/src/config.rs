//! The run configuration: one TOML document holding the solver settings at
//! top level plus a few run-level keys, with `--set` overrides applied to
//! the raw document before it is interpreted.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};

use she_core::experiments::ExperimentPlan;
use she_core::util::config_digest;
use she_core::{KernelParams, ProbeSpec, SolverConfig};

use crate::exit::CliError;

/// Keys that belong to the run rather than to the solver.
const RUN_KEYS: &[&str] = &[
    "name",
    "n_trajectories",
    "output_dir",
    "workers",
    "log_level",
    "write_trajectories",
    "record_wall_time",
    "kernel",
    "probes",
];

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "SHE_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "she-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSettings {
    /// Defaults to the smallest certified order for the requested time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_order: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub abs_tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-12
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings {
            truncation_order: None,
            abs_tolerance: default_tolerance(),
        }
    }
}

impl KernelSettings {
    pub fn params_for(&self, t: f64) -> she_core::Result<KernelParams> {
        match self.truncation_order {
            Some(n) => KernelParams::new(n, self.abs_tolerance),
            None => KernelParams::for_time(t, self.abs_tolerance),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSettings {
    #[serde(default = "default_name")]
    name: String,
    #[serde(default = "one")]
    n_trajectories: usize,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default = "default_log_level")]
    log_level: String,
    #[serde(default)]
    write_trajectories: bool,
    #[serde(default)]
    record_wall_time: bool,
    #[serde(default)]
    kernel: KernelSettings,
    #[serde(default)]
    probes: Vec<ProbeSpec>,
}

fn default_name() -> String {
    "run".into()
}

fn one() -> usize {
    1
}

fn default_log_level() -> String {
    "warn".into()
}

/// A parsed and override-applied run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub solver: SolverConfig,
    pub n_trajectories: usize,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub log_level: String,
    pub write_trajectories: bool,
    pub record_wall_time: bool,
    pub kernel: KernelSettings,
    pub probes: Vec<ProbeSpec>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, overrides).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut run = toml::Table::new();
        let mut solver = toml::Table::new();
        for (k, v) in doc {
            if RUN_KEYS.contains(&k.as_str()) {
                run.insert(k, v);
            } else {
                solver.insert(k, v);
            }
        }
        let settings: RunSettings = toml::Value::Table(run)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        if !solver.contains_key("dt") {
            // default step: a quarter of the explicit stability limit
            let n = solver.get("n_space").and_then(toml::Value::as_integer).unwrap_or(0);
            let nu = solver
                .get("diffusion")
                .and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64)))
                .unwrap_or(1.0);
            if n > 0 {
                let dx = 2.0 / n as f64;
                solver.insert("dt".into(), toml::Value::Float(dx * dx / (4.0 * nu)));
            }
        }
        let solver: SolverConfig = toml::Value::Table(solver)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        Ok(RunConfig {
            name: settings.name,
            solver,
            n_trajectories: settings.n_trajectories,
            output_dir: settings.output_dir,
            workers: settings.workers,
            log_level: settings.log_level,
            write_trajectories: settings.write_trajectories,
            record_wall_time: settings.record_wall_time,
            kernel: settings.kernel,
            probes: settings.probes,
        })
    }

    /// The effective configuration as echoed into manifests. Execution-only
    /// settings (output directory, worker count, log level) are left out so
    /// they cannot change any artifact.
    pub fn effective(&self) -> Value {
        let mut map = match serde_json::to_value(&self.solver) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        map.insert("name".into(), Value::from(self.name.clone()));
        map.insert("n_trajectories".into(), Value::from(self.n_trajectories));
        map.insert("kernel".into(), serde_json::to_value(&self.kernel).unwrap_or(Value::Null));
        if !self.probes.is_empty() {
            map.insert("probes".into(), serde_json::to_value(&self.probes).unwrap_or(Value::Null));
            map.insert("write_trajectories".into(), Value::from(self.write_trajectories));
            map.insert("record_wall_time".into(), Value::from(self.record_wall_time));
        }
        Value::Object(map)
    }

    pub fn digest(&self) -> Result<String, CliError> {
        Ok(config_digest(&self.effective())?)
    }

    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            name: self.name.clone(),
            solver: self.solver.clone(),
            n_trajectories: self.n_trajectories,
            probes: self.probes.clone(),
            write_trajectories: self.write_trajectories,
            record_wall_time: self.record_wall_time,
        }
    }

    /// `flag`, then the config, then `SHE_OUTPUT_DIR`, then `she-out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        resolve_output_dir(flag, self.output_dir.as_deref())
    }
}

pub fn resolve_output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise. Numeric segments index arrays.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not of the form key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("override `{assignment}` has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let segments: Vec<&str> = path.split('.').collect();
    let mut root = toml::Value::Table(std::mem::take(doc));
    let result = assign(&mut root, &segments, value, assignment);
    if let toml::Value::Table(t) = root {
        *doc = t;
    }
    result
}

fn assign(root: &mut toml::Value, segments: &[&str], value: toml::Value, assignment: &str) -> Result<(), CliError> {
    let (last, parents) = segments.split_last().expect("nonempty path");
    let mut cursor = root;
    for seg in parents {
        cursor = step(cursor, seg, assignment)?;
    }
    match cursor {
        toml::Value::Table(t) => {
            t.insert((*last).to_string(), value);
        }
        toml::Value::Array(a) => {
            let i = index(last, a.len() + 1, assignment)?;
            if i == a.len() {
                a.push(value);
            } else {
                a[i] = value;
            }
        }
        _ => return Err(CliError::config(format!("override `{assignment}` descends into a scalar"))),
    }
    Ok(())
}

fn step<'a>(
    cursor: &'a mut toml::Value,
    seg: &str,
    assignment: &str,
) -> Result<&'a mut toml::Value, CliError> {
    match cursor {
        toml::Value::Table(t) => {
            if !t.contains_key(seg) {
                t.insert(seg.to_string(), toml::Value::Table(toml::Table::new()));
            }
            Ok(t.get_mut(seg).expect("present"))
        }
        toml::Value::Array(a) => {
            let i = index(seg, a.len(), assignment)?;
            Ok(&mut a[i])
        }
        _ => Err(CliError::config(format!("override `{assignment}` descends into a scalar"))),
    }
}

fn index(seg: &str, len: usize, assignment: &str) -> Result<usize, CliError> {
    seg.parse::<usize>()
        .ok()
        .filter(|&i| i < len)
        .ok_or_else(|| CliError::config(format!("override `{assignment}`: bad array index `{seg}`")))
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
