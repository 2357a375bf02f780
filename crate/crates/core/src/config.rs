//! Run configuration: a JSON file whose fields can be overridden from the
//! command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Normalization, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::lirpa::Engine;
use crate::net::{presets, Architecture};
use crate::sparsity::Budget;
use crate::train::{BoundMix, EpsSchedule, LrDecay, RampShape, SgdConfig, TrainPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchConfig {
    Preset { preset: String },
    Inline(Architecture),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
        }
    }

    pub fn sample_shape(self) -> [usize; 3] {
        match self {
            DatasetName::Mnist => [1, 28, 28],
            DatasetName::Cifar10 => [3, 32, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub dataset: DatasetName,
    pub data_dir: Option<PathBuf>,
    /// Per-channel normalization; the dataset's standard constants if unset.
    pub normalization: Option<Normalization>,
    pub eps_max: f64,
    pub ramp_start: usize,
    pub ramp_length: usize,
    pub ramp_shape: RampShape,
    pub epochs: usize,
    pub t_exp: usize,
    pub budget: Budget,
    pub optimizer: SgdConfig,
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_engine: Engine,
    pub bound_mix: BoundMix,
    pub eval_engine: Engine,
    pub strict_determinism: bool,
    pub freeze_after: Option<usize>,
    pub train_subset: Option<usize>,
    pub eval_subset: Option<usize>,
    /// Intersect perturbation balls with the `[0, 1]` pixel range.
    pub clip: bool,
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = TrainPlan::default();
        Self {
            arch: ArchConfig::Preset {
                preset: "cnn-small".into(),
            },
            dataset: DatasetName::Mnist,
            data_dir: None,
            normalization: None,
            eps_max: 0.1,
            ramp_start: 10,
            ramp_length: 60,
            ramp_shape: RampShape::Linear,
            epochs: plan.epochs,
            t_exp: plan.t_exp,
            budget: plan.budget,
            optimizer: plan.optimizer,
            lr_decay: plan.lr_decay,
            batch_size: plan.batch_size,
            seed: 0,
            out_dir: PathBuf::from("out"),
            train_engine: Engine::CrownIbp,
            bound_mix: plan.bound_mix,
            eval_engine: Engine::Ibp,
            strict_determinism: false,
            freeze_after: None,
            train_subset: None,
            eval_subset: None,
            clip: true,
            augment: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn schedule(&self) -> EpsSchedule {
        EpsSchedule {
            eps_max: self.eps_max,
            start: self.ramp_start,
            length: self.ramp_length,
            shape: self.ramp_shape,
        }
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            t_exp: self.t_exp,
            budget: self.budget,
            optimizer: self.optimizer.clone(),
            lr_decay: self.lr_decay.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
            engine: self.train_engine,
            bound_mix: self.bound_mix,
            freeze_after: self.freeze_after,
            eval_eps: None,
            eval_engine: self.eval_engine,
            train_subset: self.train_subset,
            eval_subset: self.eval_subset,
            clip: self.clip_range(),
            augment: self.augment,
        }
    }

    pub fn clip_range(&self) -> Option<(f64, f64)> {
        self.clip.then_some((0.0, 1.0))
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let shape = self.dataset.sample_shape();
        match &self.arch {
            ArchConfig::Preset { preset } => presets::architecture(preset, &shape, 10),
            ArchConfig::Inline(a) => {
                if a.input_shape != shape {
                    return Err(Error::Config(format!(
                        "architecture input {:?} does not match {} samples {shape:?}",
                        a.input_shape,
                        self.dataset.as_str()
                    )));
                }
                a.shapes().map_err(|e| Error::Config(e.to_string()))?;
                Ok(a.clone())
            }
        }
    }

    /// The configured directory, else the environment variable, else
    /// `data/<dataset>`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data").join(self.dataset.as_str()))
    }

    /// Checks every training input without touching data or outputs.
    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture()?;
        self.schedule().validate()?;
        let backbone = crate::net::Network::<f32>::build(arch, self.seed)?.total_param_count();
        self.plan().validate(backbone)?;
        Ok(())
    }

    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let dir = self.resolved_data_dir();
        let (mut tr, mut te) = match self.dataset {
            DatasetName::Mnist => data::load_mnist(&dir)?,
            DatasetName::Cifar10 => data::load_cifar10(&dir)?,
        };
        if let Some(n) = &self.normalization {
            if n.channels() != tr.sample_shape()[0] {
                return Err(Error::Config(format!(
                    "normalization has {} channels, data has {}",
                    n.channels(),
                    tr.sample_shape()[0]
                )));
            }
            tr.normalization = n.clone();
            te.normalization = n.clone();
        }
        Ok((tr, te))
    }
}
