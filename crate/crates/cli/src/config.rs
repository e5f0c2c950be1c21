//! Flat run configuration, overrides, and the data pipeline it describes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vsfm::datasets::{
    compute_norm_stats, generate_synthetic_nonlinear, generate_synthetic_uncorrelated, load_csv, make_windows,
    NormStats, Role, SeriesFamily, Split, Window, WindowSpec,
};
use vsfm::engine::TrainConfig;
use vsfm::model::ModelConfig;
use vsfm::numerics::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SyntheticUncorrelated,
    SyntheticNonlinear,
    Csv,
}

/// Everything a run depends on besides the code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    /// CSV columns that are virtual sensors; all others are inputs.
    pub virtual_columns: Vec<String>,
    pub inputs: usize,
    pub samples: usize,
    /// Inputs (1-based) copied as virtual sensors.
    pub targets: Vec<usize>,
    /// Input pairs (1-based) whose products are virtual sensors.
    pub factor_pairs: Vec<(usize, usize)>,
    pub frequencies_per_signal: usize,
    pub train_fraction: f64,

    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub hidden: usize,
    pub patch: usize,
    pub dropout: f64,

    /// Slots per training window.
    pub train_slots: usize,
    pub context: usize,
    pub cycles: usize,
    pub stride: usize,

    pub n_train: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub warmup: u64,
    pub warmup_start_factor: f64,
    pub decay_step: u64,
    pub decay_gamma: f64,
    pub relevance_lr_scale: f64,
    pub threshold: Option<f64>,
    pub sparsify_from_epoch: usize,
    pub max_steps_per_epoch: Option<usize>,
    pub max_val_windows: Option<usize>,

    pub bptt_epochs: usize,
    pub bptt_lr: f64,

    /// Sensors to forecast (0-based); empty means all.
    pub sensors: Vec<usize>,
    pub forecast_threshold: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 2025,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetKind::SyntheticUncorrelated,
            data_path: None,
            virtual_columns: Vec::new(),
            inputs: 64,
            samples: 8192,
            targets: vec![10, 20],
            factor_pairs: Vec::new(),
            frequencies_per_signal: 3,
            train_fraction: 0.7,
            layers: model.layers,
            heads: model.heads,
            d: model.d,
            hidden: model.hidden,
            patch: model.patch,
            dropout: model.dropout,
            train_slots: 4,
            context: 2,
            cycles: 6,
            stride: 16,
            n_train: 1,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            lr: train.schedule.base,
            warmup: train.schedule.warmup,
            warmup_start_factor: train.schedule.start_factor,
            decay_step: train.schedule.step_size,
            decay_gamma: train.schedule.gamma,
            relevance_lr_scale: 1.0,
            threshold: None,
            sparsify_from_epoch: 0,
            max_steps_per_epoch: None,
            max_val_windows: None,
            bptt_epochs: 1,
            bptt_lr: 1e-5,
            sensors: Vec::new(),
            forecast_threshold: None,
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Loads an optional config file and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not of the form key=value");
            };
            table.insert(k.trim().to_string(), override_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid run configuration")?;
        cfg.model()?.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_resolved(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        fs::write(self.out_dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            hidden: self.hidden,
            patch: self.patch,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            n_train: self.n_train,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            schedule: LrSchedule {
                base: self.lr,
                warmup: self.warmup,
                start_factor: self.warmup_start_factor,
                step_size: self.decay_step,
                gamma: self.decay_gamma,
            },
            adam: Default::default(),
            dropout: self.dropout,
            threshold: self.threshold,
            sparsify_from_epoch: self.sparsify_from_epoch,
            relevance_lr_scale: self.relevance_lr_scale,
            max_steps_per_epoch: self.max_steps_per_epoch,
            max_val_windows: self.max_val_windows,
        }
    }

    pub fn family(&self) -> Result<SeriesFamily> {
        Ok(match self.dataset {
            DatasetKind::SyntheticUncorrelated => generate_synthetic_uncorrelated(
                self.inputs,
                self.samples,
                &self.targets,
                self.frequencies_per_signal,
                self.seed,
            )?,
            DatasetKind::SyntheticNonlinear => generate_synthetic_nonlinear(
                self.inputs,
                self.samples,
                &self.factor_pairs,
                self.frequencies_per_signal,
                self.seed,
            )?,
            DatasetKind::Csv => {
                let Some(path) = &self.data_path else {
                    bail!("dataset = \"csv\" needs data_path");
                };
                let roles: HashMap<String, Role> = self
                    .virtual_columns
                    .iter()
                    .map(|c| (c.clone(), Role::Virtual))
                    .collect();
                load_csv(path, &roles)?
            }
        })
    }

    pub fn sensors_or_all(&self, n: usize) -> Vec<usize> {
        if self.sensors.is_empty() {
            (0..n).collect()
        } else {
            self.sensors.clone()
        }
    }
}

/// Family, normalization and windows of one run.
pub struct RunData {
    pub family: SeriesFamily,
    pub stats: NormStats,
    pub train: Vec<Window>,
    /// Validation windows long enough for `context + cycles` slots.
    pub val: Vec<Window>,
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let family = cfg.family()?;
        let stats = compute_norm_stats(&family, cfg.train_fraction)?;
        if cfg.train_slots < 2 {
            bail!("train_slots must be at least 2");
        }
        let train_spec = WindowSpec {
            context: 1,
            horizon: cfg.train_slots - 1,
            patch: cfg.patch,
            stride: cfg.stride,
        };
        let val_spec = WindowSpec {
            context: cfg.context,
            horizon: cfg.cycles,
            patch: cfg.patch,
            stride: cfg.stride,
        };
        let train = make_windows(&family, &train_spec, &stats, cfg.train_fraction, Split::Train)?;
        let val = make_windows(&family, &val_spec, &stats, cfg.train_fraction, Split::Validation)?;
        Ok(RunData {
            family,
            stats,
            train,
            val,
        })
    }

    /// Training windows long enough for a `context + cycles` rollout.
    pub fn rollout_train(&self, cfg: &RunConfig) -> Result<Vec<Window>> {
        let spec = WindowSpec {
            context: cfg.context,
            horizon: cfg.cycles,
            patch: cfg.patch,
            stride: cfg.stride,
        };
        Ok(make_windows(&self.family, &spec, &self.stats, cfg.train_fraction, Split::Train)?)
    }

    /// Validation windows capped by `max_val_windows`.
    pub fn val_slice(&self, cfg: &RunConfig) -> &[Window] {
        let take = cfg.max_val_windows.unwrap_or(self.val.len()).min(self.val.len());
        &self.val[..take]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_values() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "epochs=3".into(),
                "lr = 0.001".into(),
                "targets=[1, 2]".into(),
                "dataset=synthetic-nonlinear".into(),
                "threshold=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.targets, vec![1, 2]);
        assert_eq!(cfg.dataset, DatasetKind::SyntheticNonlinear);
        assert_eq!(cfg.threshold, Some(0.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &["epoch=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["heads=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = RunConfig::resolve(None, &["factor_pairs=[[1, 2], [3, 4]]".into()]).unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
