//! Run configuration: a TOML file with sections `dataset`, `train`, `loss`,
//! `model`, `tv` and `ablation`, plus `key=value` overrides addressed by
//! dotted keys such as `train.iterations=200`. Precedence is
//! overrides > file > built-in defaults. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{PretrainConfig, TvConfig};
use crate::dataset::{DatasetSpec, PairMode};
use crate::deformation::SyntheticFieldConfig;
use crate::error::{Error, Result};
use crate::models::{ReconConfig, RegConfig};
use crate::objectives::{Distance, RecLossConfig, RegLossConfig};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
    pub acceleration: f64,
    pub center_lines: usize,
    pub pair_mode: PairMode,
    pub n_points: usize,
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub sigma: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DatasetSection {
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            size: d.size,
            acceleration: d.acceleration,
            center_lines: d.center_lines,
            pair_mode: d.pair_mode,
            n_points: d.field.n_points,
            delta_lo: d.field.value_range.0,
            delta_hi: d.field.value_range.1,
            sigma: d.field.sigma,
            snr_db: d.snr_db,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_rec: f64,
    pub lr_reg: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub oracle_inverse_iterations: usize,
    /// Registration pre-training for the frozen-registration mode.
    pub pretrain_iterations: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            mode: t.mode,
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr_rec: t.lr_rec,
            lr_reg: t.lr_reg,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            oracle_inverse_iterations: t.oracle_inverse_iterations,
            pretrain_iterations: t.iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub gamma: f64,
    /// `l1`, `l2` or `huber`.
    pub distance: String,
    pub huber_delta: f64,
    pub lambda: f64,
    pub lcc_window: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let (r, g) = (RecLossConfig::default(), RegLossConfig::default());
        LossSection {
            gamma: r.gamma,
            distance: r.distance.name().into(),
            huber_delta: 1.0,
            lambda: g.lambda,
            lcc_window: g.lcc_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub recon_blocks: usize,
    pub recon_width: usize,
    pub reg_levels: usize,
    pub reg_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let (r, g) = (ReconConfig::default(), RegConfig::default());
        ModelSection {
            recon_blocks: r.blocks,
            recon_width: r.width,
            reg_levels: g.levels,
            reg_width: g.base_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvSection {
    /// Fixed τ; when absent τ is chosen from `tau_grid` on the validation split.
    pub tau: Option<f64>,
    pub tau_grid: Vec<f64>,
    pub step: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub tolerance: f64,
}

impl Default for TvSection {
    fn default() -> Self {
        let t = TvConfig::default();
        TvSection {
            tau: None,
            tau_grid: vec![0.001, 0.002, 0.005, 0.01, 0.02],
            step: t.step,
            iterations: t.iterations,
            inner_iterations: t.inner_iterations,
            tolerance: t.tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub accelerations: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            accelerations: vec![3.0],
            sigmas: vec![10.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub model: ModelSection,
    pub tv: TvSection,
    pub ablation: AblationSection,
}

/// Parses an override value as a TOML scalar/array, falling back to a
/// bare string (so `train.mode=decolearn` needs no quotes).
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key '{key}' must look like section.name"
        )));
    }
    let section = root
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match section {
        toml::Value::Table(t) => {
            t.insert(parts[1].to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("'{}' is not a section", parts[0]))),
    }
}

impl RunConfig {
    /// Layers `overrides` (`key=value`) over `file_text` over the defaults.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = match file_text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        // A run manifest carries the full configuration under `config`.
        if root.contains_key("tool_version") {
            root = match root.remove("config") {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(Error::Config("run manifest has no [config] table".into())),
            };
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' must be key=value")))?;
            set_path(&mut root, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.train_config(self.train.mode)?.validate()?;
        self.tv_config(self.tv.tau.unwrap_or(1.0)).validate()?;
        if self.tv.tau.is_none() && self.tv.tau_grid.is_empty() {
            return Err(Error::Config(
                "tv.tau_grid must be nonempty when tv.tau is unset".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            n_train: d.n_train,
            n_val: d.n_val,
            n_test: d.n_test,
            size: d.size,
            acceleration: d.acceleration,
            center_lines: d.center_lines,
            pair_mode: d.pair_mode,
            field: SyntheticFieldConfig::new(d.n_points, (d.delta_lo, d.delta_hi), d.sigma),
            snr_db: d.snr_db,
            seed: d.seed,
        }
    }

    pub fn rec_loss(&self) -> Result<RecLossConfig> {
        Ok(RecLossConfig {
            gamma: self.loss.gamma,
            distance: Distance::parse(&self.loss.distance, self.loss.huber_delta)?,
        })
    }

    pub fn reg_loss(&self) -> RegLossConfig {
        RegLossConfig {
            lambda: self.loss.lambda,
            lcc_window: self.loss.lcc_window,
        }
    }

    pub fn recon(&self) -> ReconConfig {
        ReconConfig {
            blocks: self.model.recon_blocks,
            width: self.model.recon_width,
        }
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig {
            levels: self.model.reg_levels,
            base_width: self.model.reg_width,
        }
    }

    pub fn train_config(&self, mode: TrainMode) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            mode,
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr_rec: t.lr_rec,
            lr_reg: t.lr_reg,
            rec_loss: self.rec_loss()?,
            reg_loss: self.reg_loss(),
            recon: self.recon(),
            reg: self.reg(),
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            oracle_inverse_iterations: t.oracle_inverse_iterations,
        })
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            reg: self.reg(),
            loss: self.reg_loss(),
            iterations: self.train.pretrain_iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr_reg,
            seed: self.train.seed,
        }
    }

    pub fn tv_config(&self, tau: f64) -> TvConfig {
        TvConfig {
            tau,
            step: self.tv.step,
            iterations: self.tv.iterations,
            inner_iterations: self.tv.inner_iterations,
            tolerance: self.tv.tolerance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_component_defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.dataset_spec(), DatasetSpec::default());
        assert_eq!(
            c.train_config(TrainMode::Decolearn).unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let file = "[train]\niterations = 50\nbatch_size = 2\n[loss]\ndistance = \"l1\"\n";
        let c = RunConfig::resolve(
            Some(file),
            &["train.iterations=7".into(), "train.mode=a2a_oracle".into()],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.train.mode, TrainMode::A2aOracle);
        assert_eq!(c.rec_loss().unwrap().distance, Distance::L1);
        assert_eq!(c.model.recon_width, 32);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::resolve(None, &["train.iters=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nosection=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.iterations=0".into()]).is_err());
        assert!(RunConfig::resolve(Some("[dataset]\nsize = \"big\""), &[]).is_err());
    }

    #[test]
    fn arrays_and_roundtrip() {
        let c = RunConfig::resolve(
            None,
            &["ablation.sigmas=[10, 24]".into(), "tv.tau=0.01".into()],
        )
        .unwrap();
        assert_eq!(c.ablation.sigmas, vec![10.0, 24.0]);
        let back = RunConfig::resolve(Some(&c.to_toml().unwrap()), &[]).unwrap();
        assert_eq!(back, c);
    }
}
