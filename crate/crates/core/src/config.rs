//! Layered run configuration: built-in defaults, then TOML files in order,
//! then dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::builder::BuildConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::GeneratorConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_resamples: usize,
    /// Exclude the rated pathologist from the consensus it is compared to.
    pub leave_one_out: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_resamples: 400,
            leave_one_out: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Master seed. Generation, graph building, splitting and bootstrap
    /// derive from it; the trainer uses `seed + train.seed`.
    pub seed: u64,
    /// Worker threads; `0` means all available cores.
    pub jobs: usize,
    pub generator: GeneratorConfig,
    pub graph: BuildConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            jobs: 0,
            generator: GeneratorConfig::default(),
            graph: BuildConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.n_resamples == 0 {
            return Err(Error::Config("eval.n_resamples must be positive".into()));
        }
        let f = [self.split.train, self.split.val, self.split.test];
        if f.iter().any(|&v| !(v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {f:?}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Seed handed to the trainer.
    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(self.train.seed)
    }
}

/// Accumulates configuration layers.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    table: Table,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        let table = Table::try_from(AppConfig::default()).expect("defaults serialize");
        ConfigLoader { table }
    }

    /// Merges a TOML document. `origin` names it in diagnostics.
    pub fn merge_str(&mut self, text: &str, origin: &str) -> Result<()> {
        // Parsing straight into the typed config reports unknown fields and
        // bad types with line and column.
        toml::from_str::<AppConfig>(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let layer: Table = text.parse().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        deep_merge(&mut self.table, layer);
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.merge_str(&text, &path.display().to_string())
    }

    /// Applies one `dotted.key=value` override. The value is read as a TOML
    /// literal when possible, otherwise as a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{assignment}`")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        let mut node = &mut self.table;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            node = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("`{key}`: `{p}` is not a section"))),
            };
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
        Table::clone(&self.table)
            .try_into::<AppConfig>()
            .map(|_| ())
            .map_err(|e| Error::Config(format!("--set {key}: {}", e.message())))
    }

    pub fn finish(self) -> Result<AppConfig> {
        let cfg: AppConfig = self.table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn deep_merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => deep_merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Defaults, then `files` in order, then `sets` in order.
pub fn load(files: &[&Path], sets: &[String]) -> Result<AppConfig> {
    let mut loader = ConfigLoader::new();
    for f in files {
        loader.merge_file(f)?;
    }
    for s in sets {
        loader.set(s)?;
    }
    loader.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Strategy;
    use crate::graph::Endpoint;

    #[test]
    fn defaults_round_trip() {
        let cfg = ConfigLoader::new().finish().unwrap();
        assert_eq!(cfg, AppConfig::default());
        let again: AppConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.train.max_iterations, 7000);
        assert_eq!(cfg.eval.n_resamples, 400);
    }

    #[test]
    fn layers_apply_in_order() {
        let mut l = ConfigLoader::new();
        l.merge_str("seed = 5\n[model]\nstrategy = \"gaimp\"\nhidden = 64\n", "a").unwrap();
        l.merge_str("[model]\nhidden = 32\n", "b").unwrap();
        l.set("train.endpoint=steatosis").unwrap();
        l.set("model.head_layers = 2").unwrap();
        let cfg = l.finish().unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.strategy, Strategy::Gaimp);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.model.head_layers, Some(2));
        assert_eq!(cfg.train.endpoint, Endpoint::Steatosis);
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ConfigLoader::new()
            .merge_str("[train]\nmax_iterations = 10\nbogus = 1\n", "run.toml")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.toml") && msg.contains("line 3") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn bad_override_rejected() {
        let mut l = ConfigLoader::new();
        assert!(matches!(l.set("model.hidden=abc"), Err(Error::Config(_))));
        assert!(matches!(l.set("nokey"), Err(Error::Config(_))));
        let mut l = ConfigLoader::new();
        l.set("train.patience=0").unwrap();
        assert!(matches!(l.finish(), Err(Error::Config(_))));
    }
}
