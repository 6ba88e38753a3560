//! Training configuration: one JSON document, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::interact::{BciConfig, Direction};
use crate::router::{RouterConfig, RouterMode};
use crate::segnet::NetworkConfig;
use crate::synthdata::GeneratorParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { labeled: 2, unlabeled: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_power: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0005, poly_power: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against the config file.
    pub dir: PathBuf,
    pub n_cases: usize,
    pub n_test: usize,
    pub labeled_ratio: f64,
    pub seed: u64,
    pub generator: GeneratorParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            n_cases: 50,
            n_test: 10,
            labeled_ratio: 0.1,
            seed: 0,
            generator: GeneratorParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ssp: bool,
    pub bci: bool,
    pub cr: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { ssp: true, bci: true, cr: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5 }
    }
}

/// One ablation cell: overrides applied on top of the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    pub toggles: Option<Toggles>,
    pub k: Option<usize>,
    pub direction: Option<Direction>,
    pub mode: Option<RouterMode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub cells: Vec<AblationCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub t_max: usize,
    pub batch: BatchConfig,
    pub optimizer: OptimizerConfig,
    /// Steps between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub router: RouterConfig,
    pub bci: BciConfig,
    pub augment: AugmentConfig,
    pub toggles: Toggles,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            t_max: 2000,
            batch: BatchConfig::default(),
            optimizer: OptimizerConfig::default(),
            checkpoint_every: 500,
            data: DataConfig::default(),
            network: NetworkConfig::default(),
            router: RouterConfig::default(),
            bci: BciConfig::default(),
            augment: AugmentConfig::default(),
            toggles: Toggles::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving a relative `data.dir` against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.data.dir.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.data.dir = base.join(&cfg.data.dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Bottleneck spatial extent of training crops.
    pub fn bottleneck_dims(&self) -> Result<[usize; 3]> {
        self.network.bottleneck_dims(self.augment.crop_size)
    }

    /// Token length `L = d·h·w` at the bottleneck.
    pub fn token_len(&self) -> Result<usize> {
        Ok(self.bottleneck_dims()?.iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be ≥ 1".into()));
        }
        if self.batch.labeled == 0 || self.batch.unlabeled == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr = {} must be > 0", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::Config(format!("optimizer.momentum = {} must lie in [0, 1)", o.momentum)));
        }
        if !(o.weight_decay >= 0.0) || !(o.poly_power >= 0.0) {
            return Err(Error::Config("optimizer.weight_decay and poly_power must be ≥ 0".into()));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.labeled_ratio) {
            return Err(Error::Config(format!("data.labeled_ratio = {} must lie in [0, 1]", d.labeled_ratio)));
        }
        if d.n_test >= d.n_cases {
            return Err(Error::Config(format!("data.n_test = {} leaves no training cases", d.n_test)));
        }
        d.generator.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.network.validate()?;
        self.augment.validate()?;
        let crop = self.augment.crop_size;
        let dims = d.generator.dims;
        if (0..3).any(|i| crop[i] > dims[i]) {
            return Err(Error::Config(format!("augment.crop_size {crop:?} exceeds volume dims {dims:?}")));
        }
        self.network.bottleneck_dims(crop).map_err(|e| Error::Config(e.to_string()))?;
        self.network.bottleneck_dims(dims).map_err(|e| Error::Config(e.to_string()))?;
        self.router.validate(self.network.bottleneck_channels)?;
        self.bci.validate()?;
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold = {} must lie in (0, 1)", self.eval.threshold)));
        }
        Ok(())
    }

    /// Applies an ablation cell without validating the result.
    pub fn with_cell(&self, cell: &AblationCell) -> TrainConfig {
        let mut cfg = self.clone();
        if let Some(t) = cell.toggles {
            cfg.toggles = t;
        }
        if let Some(k) = cell.k {
            cfg.router.k = k;
        }
        if let Some(d) = cell.direction {
            cfg.bci.direction = d;
        }
        if let Some(m) = cell.mode {
            cfg.router.mode = m;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.token_len().unwrap(), 216);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            r#"{"t_max": 0}"#,
            r#"{"augment": {"crop_size": [40, 24, 24]}}"#,
            r#"{"augment": {"crop_size": [22, 24, 24]}}"#,
            r#"{"router": {"k": 65}}"#,
            r#"{"unknown": 1}"#,
            r#"{"optimizer": {"momentum": 1.0}}"#,
            r#"{"data": {"n_cases": 5, "n_test": 5}}"#,
        ] {
            assert!(matches!(TrainConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn cells_override() {
        let cell = AblationCell { k: Some(4), mode: Some(RouterMode::Random), ..Default::default() };
        let cfg = TrainConfig::default().with_cell(&cell);
        assert_eq!(cfg.router.k, 4);
        assert_eq!(cfg.router.mode, RouterMode::Random);
        assert_eq!(cfg.toggles, Toggles::default());
    }
}
