//! Hierarchical run configuration: TOML file, dotted-path flag overrides,
//! unknown keys rejected, and a resolved echo written next to every run's
//! artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dive_core::invert::InversionConfig;
use dive_core::labels::Metric;
use dive_core::models::{ModelConfig, PriorMode};
use dive_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the DIVE_OUT environment variable overrides it.
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub invert: InvertSection,
    pub prior: PriorSection,
    pub classify: ClassifySection,
    pub eval: EvalSection,
    pub compare: CompareSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct DataSection {
    pub kind: String,
    pub n_images: usize,
    pub img_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { kind: "detection".into(), n_images: 5000, img_size: 32, num_classes: 4, max_objects: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ModelSection {
    pub d: usize,
    pub feat: usize,
    pub conv_blocks: usize,
    pub enc_blocks: usize,
    pub time_dim: usize,
    pub cross_dk: usize,
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d: m.d,
            feat: m.feat,
            conv_blocks: m.conv_blocks,
            enc_blocks: m.enc_blocks,
            time_dim: m.time_dim,
            cross_dk: m.cross_dk,
            t_max: m.t_max,
            beta_min: m.beta_min,
            beta_max: m.beta_max,
            init_seed: 0,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, data: &DataSection) -> ModelConfig {
        ModelConfig {
            d: self.d,
            feat: self.feat,
            num_classes: data.num_classes,
            img_size: data.img_size,
            img_channels: 3,
            max_objects: data.max_objects,
            conv_blocks: self.conv_blocks,
            enc_blocks: self.enc_blocks,
            time_dim: self.time_dim,
            cross_dk: self.cross_dk,
            t_max: self.t_max,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct TrainSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cond_noise: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            iterations: t.iterations,
            batch: t.batch,
            lr: t.lr,
            weight_decay: t.weight_decay,
            cond_noise: t.cond_noise,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            cond_noise: self.cond_noise,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct InvertSection {
    pub max_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub timestep_interval: usize,
    pub monitor_frequency: usize,
    pub metric: String,
    pub use_prior: bool,
    pub early_stop_patience: usize,
    pub straight_through: bool,
}

impl Default for InvertSection {
    fn default() -> Self {
        let i = InversionConfig::default();
        InvertSection {
            max_steps: i.max_steps,
            lr: i.lr,
            weight_decay: i.weight_decay,
            batch: i.batch,
            timestep_interval: i.timestep_interval,
            monitor_frequency: i.monitor_frequency,
            metric: "cosine".into(),
            use_prior: i.use_prior,
            early_stop_patience: i.early_stop_patience,
            straight_through: i.straight_through,
        }
    }
}

impl InvertSection {
    pub fn to_inversion_config(&self, seed: u64) -> Result<InversionConfig> {
        let metric = match self.metric.as_str() {
            "cosine" => Metric::Cosine,
            "euclidean" => Metric::Euclidean,
            other => bail!("invert.metric must be \"cosine\" or \"euclidean\", got {other:?}"),
        };
        Ok(InversionConfig {
            max_steps: self.max_steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch: self.batch,
            timestep_interval: self.timestep_interval,
            monitor_frequency: self.monitor_frequency,
            metric,
            use_prior: self.use_prior,
            early_stop_patience: self.early_stop_patience,
            straight_through: self.straight_through,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct PriorSection {
    pub mode: String,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { mode: "joint".into() }
    }
}

impl PriorSection {
    pub fn to_mode(&self) -> Result<PriorMode> {
        match self.mode.as_str() {
            "joint" => Ok(PriorMode::Joint),
            "decoupled" => Ok(PriorMode::Decoupled),
            other => bail!("prior.mode must be \"joint\" or \"decoupled\", got {other:?}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ClassifySection {
    pub mode: String,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection { mode: "optimize".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct EvalSection {
    /// Evaluate only the first N examples when set.
    pub max_images: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct CompareSection {
    pub max_images: Option<usize>,
    pub entries: Vec<CompareEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct CompareEntry {
    pub name: String,
    pub cond_checkpoint: PathBuf,
    #[serde(default)]
    pub prior_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub cond_checkpoint: Option<PathBuf>,
    pub prior_checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

/// Parse the TOML file, apply `--set dotted.key=value` overrides onto the raw
/// value tree, then deserialize strictly (unknown keys are rejected by name).
pub fn parse_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&raw).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for setting in sets {
        let (key, value) = setting
            .split_once('=')
            .with_context(|| format!("override {setting:?} is not of the form key=value"))?;
        apply_override(&mut table, key.trim(), value.trim())
            .with_context(|| format!("applying override {setting:?}"))?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("validating configuration")?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, dotted: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("empty path segment in {dotted:?}");
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{part:?} is not a table"))?;
    }
    // parse as TOML scalar when possible, else keep the raw string
    let parsed: toml::Value = value
        .parse::<toml::Value>()
        .unwrap_or_else(|_| toml::Value::String(value.to_string()));
    cursor.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Write the fully resolved config and seed into the output directory.
pub fn echo_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let text = toml::to_string_pretty(cfg).context("serializing resolved config")?;
    std::fs::write(out_dir.join("resolved.toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.invert.lr, 0.01);
    }

    #[test]
    fn file_contents_pass_through_without_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 9\n[invert]\nlr = 0.02\n").unwrap();
        let cfg = parse_config(Some(&p), &[]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.invert.lr, 0.02);
    }

    #[test]
    fn flag_override_wins_and_echoes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[invert]\nlr = 0.02\n").unwrap();
        let cfg = parse_config(Some(&p), &["invert.lr=0.5".into()]).unwrap();
        assert_eq!(cfg.invert.lr, 0.5);
        echo_resolved(&cfg, dir.path()).unwrap();
        let echoed = std::fs::read_to_string(dir.path().join("resolved.toml")).unwrap();
        assert!(echoed.contains("lr = 0.5"), "{echoed}");
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = parse_config(None, &["invert.bogus_knob=1".into()]).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("bogus_knob"), "{msg}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[traim]\niterations = 3\n").unwrap();
        let err = parse_config(Some(&p), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("traim"));
    }

    #[test]
    fn type_errors_are_reported() {
        let err = parse_config(None, &["train.iterations=notanumber".into()]).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("iterations"), "{msg}");
    }
}
