//! Optional JSON config file and the flag/file/default resolution rules.

use std::fs;
use std::path::{Path, PathBuf};

use biaslens::audit::{AuditConfig, AuditOptions, DataSource, SyntheticConfig};
use biaslens::nn::{Architecture, LrSchedule, ModelKind, TrainConfig};
use biaslens::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::cli::{DataArgs, ModelArg, OptionOverrides, TrainOverrides};

pub const DEFAULT_PRESET: &str = "imbalanced-90-5-5";

/// Keys accepted in `--config` files. Every key is optional; flags win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelArg>,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<String>,
    pub n_samples: Option<usize>,
    pub strategy: Option<String>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub dropout: Option<f64>,
    pub box_loss_weight: Option<f64>,
    pub lr_schedule: Option<String>,
    pub iou_threshold: Option<f64>,
    pub train_fraction: Option<f64>,
    pub val_fraction: Option<f64>,
    pub probe_per_class: Option<usize>,
    pub sensitivity_neurons: Option<usize>,
    pub plateau_delta: Option<f64>,
    pub plateau_window: Option<usize>,
    pub tau_att: Option<f64>,
    pub kappa: Option<f64>,
    pub tau_rel: Option<f64>,
    pub fn_rate_drop: Option<f64>,
    pub ap_gain: Option<f64>,
    pub max_iterations: Option<usize>,
    pub epsilon_gap: Option<f64>,
    pub eta: Option<f64>,
    pub target_recall: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))
    }
}

/// `constant`, `step:FACTOR:EVERY` or `linear:TO`.
pub fn parse_schedule(s: &str) -> Result<LrSchedule> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::InvalidArgument(format!("--lr-schedule '{s}': expected constant, step:FACTOR:EVERY or linear:TO"));
    match parts.as_slice() {
        ["constant"] => Ok(LrSchedule::Constant),
        ["step", f, n] => Ok(LrSchedule::StepDecay {
            factor: f.parse().map_err(|_| bad())?,
            every_n: n.parse().map_err(|_| bad())?,
        }),
        ["linear", to] => Ok(LrSchedule::LinearDecay {
            to: to.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

pub fn resolve_seed(flag: Option<u64>, file: &RunConfig) -> u64 {
    flag.or(file.seed).unwrap_or(0)
}

pub fn resolve_model(flag: Option<ModelArg>, file: &RunConfig) -> ModelKind {
    flag.or(file.model).unwrap_or(ModelArg::TinyCnn).into()
}

/// Manifest wins over a synthetic preset; with neither, the default preset.
pub fn resolve_source(data: &DataArgs, file: &RunConfig, seed: u64) -> Result<DataSource> {
    let manifest = data.manifest.clone().or_else(|| {
        if data.synthetic.is_some() {
            None
        } else {
            file.manifest.clone()
        }
    });
    if let Some(m) = manifest {
        return Ok(DataSource::Manifest(m));
    }
    let preset = data
        .synthetic
        .clone()
        .or_else(|| file.synthetic.clone())
        .unwrap_or_else(|| DEFAULT_PRESET.to_string());
    let mut cfg = SyntheticConfig::preset(&preset, seed)?;
    if let Some(n) = data.n_samples.or(file.n_samples) {
        cfg.n = n;
    }
    cfg.validate()?;
    Ok(DataSource::Synthetic(cfg))
}

pub fn resolve_train(kind: ModelKind, seed: u64, t: &TrainOverrides, file: &RunConfig) -> Result<TrainConfig> {
    let mut c = TrainConfig::default_for(kind, seed);
    if let Some(v) = t.epochs.or(file.epochs) {
        c.epochs = v;
    }
    if let Some(v) = t.learning_rate.or(file.learning_rate) {
        c.learning_rate = v;
    }
    if let Some(v) = t.batch_size.or(file.batch_size) {
        c.batch_size = v;
    }
    if let Some(v) = t.weight_decay.or(file.weight_decay) {
        c.weight_decay = v;
    }
    if let Some(v) = t.dropout.or(file.dropout) {
        c.dropout = v;
    }
    if let Some(v) = t.box_loss_weight.or(file.box_loss_weight) {
        c.box_loss_weight = v;
    }
    if let Some(s) = t.lr_schedule.as_ref().or(file.lr_schedule.as_ref()) {
        c.lr_schedule = parse_schedule(s)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn resolve_options(o: &OptionOverrides, file: &RunConfig) -> AuditOptions {
    let mut a = AuditOptions::default();
    macro_rules! set {
        ($field:ident => $($target:tt)+) => {
            if let Some(v) = o.$field.or(file.$field) {
                a.$($target)+ = v;
            }
        };
    }
    set!(iou_threshold => iou_threshold);
    set!(train_fraction => train_fraction);
    set!(val_fraction => val_fraction);
    set!(probe_per_class => behavior.probe_per_class);
    set!(sensitivity_neurons => behavior.sensitivity_neurons);
    set!(plateau_delta => behavior.plateau_delta);
    set!(plateau_window => behavior.plateau_window);
    set!(tau_att => attention_plan.tau_att);
    set!(kappa => attention_plan.kappa);
    set!(tau_rel => tau_rel);
    set!(fn_rate_drop => verdict.fn_rate_drop);
    set!(ap_gain => verdict.ap_gain);
    set!(max_iterations => recalibration.max_iterations);
    set!(epsilon_gap => recalibration.epsilon_gap);
    set!(eta => recalibration.eta);
    set!(target_recall => recalibration.target_recall);
    a
}

/// Full audit configuration; `n_classes` comes from the loaded data.
pub fn resolve_audit(
    source: DataSource,
    kind: ModelKind,
    n_classes: usize,
    seed: u64,
    train: &TrainOverrides,
    options: &OptionOverrides,
    file: &RunConfig,
) -> Result<AuditConfig> {
    let cfg = AuditConfig {
        seed,
        source,
        model: Architecture::default_for(kind, n_classes),
        train: resolve_train(kind, seed, train, file)?,
        options: resolve_options(options, file),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_parse() {
        assert_eq!(parse_schedule("constant").unwrap(), LrSchedule::Constant);
        assert_eq!(
            parse_schedule("step:0.9:10").unwrap(),
            LrSchedule::StepDecay {
                factor: 0.9,
                every_n: 10
            }
        );
        assert_eq!(parse_schedule("linear:1e-5").unwrap(), LrSchedule::LinearDecay { to: 1e-5 });
        assert!(parse_schedule("cosine").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let file = RunConfig {
            epochs: Some(7),
            learning_rate: Some(0.01),
            ..Default::default()
        };
        let flags = TrainOverrides {
            epochs: Some(2),
            ..Default::default()
        };
        let c = resolve_train(ModelKind::TinyCnn, 1, &flags, &file).unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.batch_size, 32);
    }
}
