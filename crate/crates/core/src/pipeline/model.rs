//! Multi-layer perceptron chains used as desk-scale pruning targets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::tensor::{write_atomic, DetRng, Matrix, Seed, TensorContainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
    #[default]
    None,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::None => "none",
        }
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Activation::None => v,
        }
    }

    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (v + GELU_K * v * v * v);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du
            }
            Activation::None => 1.0,
        }
    }

    pub fn apply_matrix<T: Scalar>(self, m: &Matrix<T>) -> Result<Matrix<T>> {
        if self == Activation::None {
            return Ok(m.clone());
        }
        m.map(|v| T::narrow(self.apply(v.widen())))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = TrimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "none" => Ok(Activation::None),
            _ => Err(TrimError::contract(format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Scalar> {
    pub name: String,
    /// `D × N`: one row per output dimension.
    pub weight: Matrix<T>,
    pub activation: Activation,
}

/// Ordered chain of dense layers, `h_{l+1} = act_l(W_l · h_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T: Scalar> {
    layers: Vec<Layer<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMeta {
    name: String,
    activation: Activation,
}

/// JSON sidecar stored next to a model container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    layers: Vec<LayerMeta>,
    input_dim: usize,
}

impl<T: Scalar> ToyModel<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(TrimError::contract("model has no layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(TrimError::shape(format!(
                    "layer {i} outputs {} dims but layer {} expects {}",
                    pair[0].weight.rows(),
                    i + 1,
                    pair[1].weight.cols()
                )));
            }
        }
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(TrimError::contract("layer names must be unique"));
        }
        Ok(ToyModel { layers })
    }

    /// Random Gaussian layers with dims `dims[0] → dims[1] → …`, scaled by
    /// `1/sqrt(fan_in)`. Hidden layers use `hidden`, the last layer none.
    pub fn random(dims: &[usize], hidden: Activation, seed: impl Into<Seed>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(TrimError::contract("need at least input and output dims"));
        }
        let mut rng = DetRng::new(seed);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| Layer {
                name: format!("layer{i}"),
                weight: rng.gaussian_matrix(dims[i + 1], dims[i], 1.0 / (dims[i] as f64).sqrt()),
                activation: if i + 1 == n_layers { Activation::None } else { hidden },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer<T> {
        &self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// `(name, parameter count)` per layer.
    pub fn layer_sizes(&self) -> Vec<(String, u64)> {
        self.layers
            .iter()
            .map(|l| (l.name.clone(), l.weight.len() as u64))
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    /// Replaces the weights of layer `i`, keeping its shape.
    pub fn set_weight(&mut self, i: usize, w: Matrix<T>) -> Result<()> {
        if w.shape() != self.layers[i].weight.shape() {
            return Err(TrimError::shape(format!(
                "replacement {:?} for layer {} of shape {:?}",
                w.shape(),
                i,
                self.layers[i].weight.shape()
            )));
        }
        self.layers[i].weight = w;
        Ok(())
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(TrimError::shape(format!(
                "model expects {} input features, batch has {}",
                self.input_dim(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Applies layer `i` to `h`.
    pub fn layer_forward(&self, i: usize, h: &Matrix<T>) -> Result<Matrix<T>> {
        let l = &self.layers[i];
        l.activation.apply_matrix(&l.weight.matmul(h)?)
    }

    /// Model output for a batch with one sample per column.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            h = self.layer_forward(i, &h)?;
        }
        Ok(h)
    }

    /// The input of every layer for a batch.
    pub fn layer_inputs(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, &h)?;
            inputs.push(h);
            h = next;
        }
        Ok(inputs)
    }

    /// Weights as `layer{i}.weight` container entries.
    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        for (i, l) in self.layers.iter().enumerate() {
            c.insert_matrix(format!("layer{i}.weight"), &l.weight)?;
        }
        Ok(c)
    }

    pub fn sidecar_json(&self) -> String {
        let meta = ModelMeta {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMeta {
                    name: l.name.clone(),
                    activation: l.activation,
                })
                .collect(),
            input_dim: self.input_dim(),
        };
        serde_json::to_string_pretty(&meta).expect("model meta serializes") + "\n"
    }

    pub fn from_parts(container: &TensorContainer, sidecar: &str) -> Result<Self> {
        let meta: ModelMeta =
            serde_json::from_str(sidecar).map_err(|e| TrimError::format(format!("model sidecar: {e}")))?;
        let layers = meta
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(Layer {
                    name: m.name,
                    weight: container.matrix(&format!("layer{i}.weight"))?,
                    activation: m.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self::new(layers).map_err(|e| TrimError::format(e.to_string()))?;
        if model.input_dim() != meta.input_dim {
            return Err(TrimError::format(format!(
                "sidecar input_dim {} but first layer takes {}",
                meta.input_dim,
                model.input_dim()
            )));
        }
        Ok(model)
    }

    /// Saves `path` (container) and its sidecar [`sidecar_path`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_container()?.save(path)?;
        write_atomic(&sidecar_path(path), self.sidecar_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = TensorContainer::load(path)?;
        let meta = std::fs::read_to_string(sidecar_path(path))?;
        Self::from_parts(&c, &meta)
    }
}

/// `model.tnsr` → `model.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}
