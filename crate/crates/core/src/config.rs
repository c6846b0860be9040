//! Run configuration: a TOML file merged over defaults, then dotted
//! `key=value` overrides from the command line. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::denoiser::{DenoiserConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{BenchOptions, ScorerConfig};
use crate::region_query::{HttpClient, API_KEY_VAR, DEFAULT_MODEL, ENDPOINT_VAR, MODEL_VAR};

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSettings {
    pub count: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Train/val/test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            count: 64,
            canvas: 64,
            split: [0.8, 0.1, 0.1],
        }
    }
}

/// Base training before the composite-objective run: denoising loss only,
/// no modulation, all parameters trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 0,
            learning_rate: 2e-3,
        }
    }
}

/// Vision-language backend. Endpoint, key and model fall back to the
/// environment; the key is never written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySettings {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    /// Attempts per protocol stage.
    pub attempts: usize,
    /// Reply cache directory, relative to the run directory.
    pub cache: Option<PathBuf>,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            endpoint: None,
            model: None,
            temperature: 0.0,
            attempts: 2,
            cache: Some(PathBuf::from("vlm-cache")),
        }
    }
}

impl QuerySettings {
    /// Fills unset fields from the environment.
    pub fn resolve_env(&mut self) {
        if self.endpoint.is_none() {
            self.endpoint = std::env::var(ENDPOINT_VAR).ok();
        }
        if self.model.is_none() {
            self.model = Some(std::env::var(MODEL_VAR).unwrap_or_else(|_| DEFAULT_MODEL.into()));
        }
    }

    pub fn http_client(&self, run_dir: &Path) -> Result<HttpClient> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("no query endpoint: set query.endpoint or {ENDPOINT_VAR}")))?;
        let model = self.model.clone().unwrap_or_else(|| DEFAULT_MODEL.into());
        let mut c = HttpClient::new(endpoint, std::env::var(API_KEY_VAR).ok(), model)?.with_temperature(self.temperature);
        if let Some(dir) = &self.cache {
            c = c.with_cache(run_dir.join(dir));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Appearance-loss view count.
    pub views: usize,
    pub model: DenoiserConfig,
    pub pretrain: PretrainSettings,
    pub train: TrainOptions,
    pub dataset: DatasetSettings,
    pub bench: BenchOptions,
    pub query: QuerySettings,
    pub scorers: Vec<ScorerConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            views: 6,
            model: DenoiserConfig::default(),
            pretrain: PretrainSettings::default(),
            train: TrainOptions::default(),
            dataset: DatasetSettings::default(),
            bench: BenchOptions::default(),
            query: QuerySettings::default(),
            scorers: Vec::new(),
        }
    }
}

/// Parses a command-line value as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (when given), then `overrides` as `(dotted key, value)`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.coefficients.validate()?;
        if self.views == 0 {
            return Err(Error::Config("views must be at least 1".into()));
        }
        if self.dataset.canvas != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset.canvas {} differs from model.image_size {}",
                self.dataset.canvas, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
