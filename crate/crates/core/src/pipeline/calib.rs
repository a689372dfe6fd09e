use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::tensor::{DetRng, Matrix, Seed, TensorContainer};

/// Default number of calibration samples.
pub const DEFAULT_CALIB_SAMPLES: usize = 128;

pub const SAMPLES_KEY: &str = "samples";
pub const TARGETS_KEY: &str = "targets";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CalibrationSource {
    SyntheticGaussian { seed: Seed },
    ContainerFile { path: PathBuf },
    InMemory,
}

/// Calibration inputs (`input_dim × L`, one sample per column) with
/// optional regression targets (`output_dim × L`).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet<T: Scalar> {
    pub samples: Matrix<T>,
    pub targets: Option<Matrix<T>>,
    pub source: CalibrationSource,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn new(samples: Matrix<T>, targets: Option<Matrix<T>>) -> Result<Self> {
        if samples.cols() == 0 {
            return Err(TrimError::contract("calibration set needs at least one sample"));
        }
        if let Some(t) = &targets {
            if t.cols() != samples.cols() {
                return Err(TrimError::shape(format!(
                    "{} targets for {} samples",
                    t.cols(),
                    samples.cols()
                )));
            }
        }
        Ok(CalibrationSet {
            samples,
            targets,
            source: CalibrationSource::InMemory,
        })
    }

    /// `n` i.i.d. standard normal samples.
    pub fn synthetic_gaussian(input_dim: usize, n: usize, seed: impl Into<Seed>) -> Result<Self> {
        let seed = seed.into();
        let samples = DetRng::new(seed).gaussian_matrix(input_dim, n, 1.0);
        let mut c = Self::new(samples, None)?;
        c.source = CalibrationSource::SyntheticGaussian { seed };
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.samples.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.cols() == 0
    }

    pub fn with_targets(mut self, targets: Matrix<T>) -> Result<Self> {
        if targets.cols() != self.samples.cols() {
            return Err(TrimError::shape("targets must have one column per sample"));
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_matrix(SAMPLES_KEY, &self.samples)?;
        if let Some(t) = &self.targets {
            c.insert_matrix(TARGETS_KEY, t)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let samples = c.matrix(SAMPLES_KEY)?;
        let targets = if c.contains(TARGETS_KEY) {
            Some(c.matrix(TARGETS_KEY)?)
        } else {
            None
        };
        Self::new(samples, targets).map_err(|e| TrimError::format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = Self::from_container(&TensorContainer::load(path)?)?;
        c.source = CalibrationSource::ContainerFile {
            path: path.to_path_buf(),
        };
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }
}
