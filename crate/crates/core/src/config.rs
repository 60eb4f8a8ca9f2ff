//! Scenario files: flat `key = value` lines grouped under `[section]` headers.
//!
//! ```text
//! # comment
//! [workload]
//! n_requests = 8
//! planted_blocks = 4, 40
//! ```
//!
//! Lists are comma separated. Unknown sections or keys are errors so that a
//! typo never silently falls back to a default.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::{PsaConfig, RankingMode};
use crate::error::{PsaError, Result};
use crate::metadata::Estimator;
use crate::serving::BatchingConfig;
use crate::store::{EvictionPolicy, PoolPolicy, StoreConfig};
use crate::workload::{ContextDist, PlantedDist, WorkloadSpec};

#[derive(Debug)]
struct Entry {
    value: String,
    line: usize,
    used: Cell<bool>,
}

#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| PsaError::Parse {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                let name = name.trim().to_string();
                cfg.sections.entry(name.clone()).or_default();
                section = Some(name);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PsaError::Parse {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let sec = section.as_ref().ok_or_else(|| PsaError::Parse {
                line: line_no,
                message: "key outside of any section".into(),
            })?;
            let key = key.trim().to_string();
            let entry = Entry {
                value: value.trim().to_string(),
                line: line_no,
                used: Cell::new(false),
            };
            if cfg.sections.get_mut(sec).expect("section exists").insert(key.clone(), entry).is_some() {
                return Err(PsaError::Parse {
                    line: line_no,
                    message: format!("duplicate key '{key}' in [{sec}]"),
                });
            }
        }
        Ok(cfg)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        let e = self.sections.get(section)?.get(key)?;
        e.used.set(true);
        Some(e)
    }

    pub fn has(&self, section: &str, key: &str) -> bool {
        self.sections.get(section).is_some_and(|s| s.contains_key(key))
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entry(section, key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err| PsaError::Parse {
                line: e.line,
                message: format!("[{section}] {key}: {err}"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|err| PsaError::Parse {
                    line: e.line,
                    message: format!("[{section}] {key}: '{s}': {err}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key that no getter asked for.
    pub fn ensure_all_used(&self) -> Result<()> {
        for (sec, keys) in &self.sections {
            for (key, e) in keys {
                if !e.used.get() {
                    return Err(PsaError::Parse {
                        line: e.line,
                        message: format!("unknown key '{key}' in [{sec}]"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = PsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(PsaError::config(format!("unknown report format '{other}'"))),
        }
    }
}

impl FromStr for PoolPolicy {
    type Err = PsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unified" => Ok(PoolPolicy::Unified),
            "layer_partitioned" | "partitioned" => Ok(PoolPolicy::LayerPartitioned),
            other => Err(PsaError::config(format!("unknown pool policy '{other}'"))),
        }
    }
}

impl FromStr for EvictionPolicy {
    type Err = PsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lru" => Ok(EvictionPolicy::Lru),
            "fifo" => Ok(EvictionPolicy::Fifo),
            other => Err(PsaError::config(format!("unknown eviction policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub workload: WorkloadSpec,
    pub engine: PsaConfig,
    pub store: StoreConfig,
    pub batching: BatchingConfig,
    pub epsilons: Vec<f64>,
    pub ks: Vec<usize>,
    /// Coverage targets for the trade-off comparison.
    pub targets: Vec<f64>,
    pub output_path: PathBuf,
    pub format: ReportFormat,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Self::parse(&text, &stem)
    }

    pub fn parse(text: &str, default_name: &str) -> Result<Self> {
        let f = ConfigFile::parse(text)?;
        let dw = WorkloadSpec::default();

        let context = match (
            f.get::<usize>("workload", "context_len")?,
            f.get::<usize>("workload", "context_min")?,
            f.get::<usize>("workload", "context_max")?,
        ) {
            (Some(n), None, None) => ContextDist::Fixed(n),
            (None, Some(min), Some(max)) => ContextDist::Uniform { min, max },
            (None, None, None) => dw.context.clone(),
            _ => {
                return Err(PsaError::config(
                    "use either context_len or context_min/context_max",
                ))
            }
        };
        let planted = match (
            f.get::<f64>("workload", "planted_fraction")?,
            f.list::<usize>("workload", "planted_blocks")?,
        ) {
            (Some(x), None) => PlantedDist::Fraction(x),
            (None, Some(c)) => PlantedDist::Choices(c),
            (None, None) => dw.planted.clone(),
            _ => {
                return Err(PsaError::config(
                    "use either planted_fraction or planted_blocks",
                ))
            }
        };
        let skew = f.get::<f64>("workload", "skew")?;
        let workload = WorkloadSpec {
            n_requests: f.get_or("workload", "n_requests", dw.n_requests)?,
            n_layers: f.get_or("workload", "n_layers", dw.n_layers)?,
            d: f.get_or("workload", "d", dw.d)?,
            block_size: f.get_or("workload", "block_size", dw.block_size)?,
            context,
            decode_steps: f.get_or("workload", "decode_steps", dw.decode_steps)?,
            skew_min: f.get_or("workload", "skew_min", skew.unwrap_or(dw.skew_min))?,
            skew_max: f.get_or("workload", "skew_max", skew.unwrap_or(dw.skew_max))?,
            planted,
            rho: f.get_or("workload", "rho", dw.rho)?,
            arrival_rate: f.get_or("workload", "arrival_rate", dw.arrival_rate)?,
            seed: f.get_or("workload", "seed", dw.seed)?,
        };
        workload.validate()?;

        let de = PsaConfig::default();
        let engine = PsaConfig {
            epsilon: f.get_or("engine", "epsilon", de.epsilon)?,
            microbatch_size: f.get_or("engine", "microbatch_size", de.microbatch_size)?,
            block_size: workload.block_size,
            estimator: f.get_or::<Estimator>("engine", "estimator", de.estimator)?,
            ranking_mode: f.get_or::<RankingMode>("engine", "ranking", de.ranking_mode)?,
            scale: f.get("engine", "scale")?,
            audit: f.get_or("engine", "audit", true)?,
        };
        engine.validate()?;

        let ds = StoreConfig::default();
        let store = StoreConfig {
            fast_capacity_slots: f.get_or("store", "fast_capacity_slots", ds.fast_capacity_slots)?,
            n_layers: workload.n_layers,
            block_size: workload.block_size,
            policy: f.get_or("store", "policy", ds.policy)?,
            eviction: f.get_or("store", "eviction", ds.eviction)?,
            write_allocate: f.get_or("store", "write_allocate", ds.write_allocate)?,
            load_latency: ds.load_latency,
            record_trace: false,
        };
        store.validate()?;

        let db = BatchingConfig::default();
        let batching = BatchingConfig {
            max_batch: f.get_or("batching", "max_batch", db.max_batch)?,
            load_ms_per_block: f.get_or("batching", "load_ms_per_block", db.load_ms_per_block)?,
            compute_ms_per_block: f.get_or("batching", "compute_ms_per_block", db.compute_ms_per_block)?,
            step_overhead_ms: f.get_or("batching", "step_overhead_ms", db.step_overhead_ms)?,
            pipelined: f.get_or("batching", "pipelined", db.pipelined)?,
        };
        batching.validate()?;

        let epsilons = f.list("sweep", "epsilons")?.unwrap_or_else(|| vec![engine.epsilon]);
        let ks = f.list("sweep", "ks")?.unwrap_or_default();
        let targets = f.list("tradeoff", "targets")?.unwrap_or_else(|| vec![0.95]);
        if epsilons.is_empty() {
            return Err(PsaError::config("sweep epsilons must not be empty"));
        }
        for &e in epsilons.iter().chain(&targets) {
            if !(e > 0.0 && e <= 1.0) {
                return Err(PsaError::config(format!("coverage value {e} outside (0, 1]")));
            }
        }
        if ks.contains(&0) {
            return Err(PsaError::config("k values must be at least 1"));
        }

        let name = f.get_or("scenario", "name", default_name.to_string())?;
        let output_path = f.get_or("output", "path", PathBuf::from(format!("{name}_report.json")))?;
        let format = f.get_or("output", "format", ReportFormat::Json)?;
        f.ensure_all_used()?;

        Ok(ScenarioConfig {
            name,
            workload,
            engine,
            store,
            batching,
            epsilons,
            ks,
            targets,
            output_path,
            format,
        })
    }
}
