//! Reverse-mode gradients of a regression loss and a small trainer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::ToyModel;
use crate::error::{Result, TrimError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Per-entry loss on the residual `r = f(x) − target`, summed over outputs
/// and samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientLoss {
    /// `r²`
    #[default]
    SquaredError,
    /// `|r|`, with zero slope at `r = 0`
    AbsoluteError,
}

impl GradientLoss {
    pub const ALL: [GradientLoss; 2] = [GradientLoss::SquaredError, GradientLoss::AbsoluteError];

    pub fn as_str(self) -> &'static str {
        match self {
            GradientLoss::SquaredError => "squared_error",
            GradientLoss::AbsoluteError => "absolute_error",
        }
    }

    pub fn value(self, r: f64) -> f64 {
        match self {
            GradientLoss::SquaredError => r * r,
            GradientLoss::AbsoluteError => r.abs(),
        }
    }

    pub fn derivative(self, r: f64) -> f64 {
        match self {
            GradientLoss::SquaredError => 2.0 * r,
            GradientLoss::AbsoluteError => {
                if r == 0.0 {
                    0.0
                } else {
                    r.signum()
                }
            }
        }
    }
}

impl fmt::Display for GradientLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradientLoss {
    type Err = TrimError;

    fn from_str(s: &str) -> Result<Self> {
        GradientLoss::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrimError::contract(format!("unknown gradient loss {s:?}")))
    }
}

/// Loss `Σ (f(x) − target)²` over every output and sample, with signed
/// gradients for each layer's weights (`f64`).
pub fn loss_and_gradients<T: Scalar>(
    model: &ToyModel<T>,
    x: &Matrix<T>,
    targets: &Matrix<T>,
) -> Result<(f64, Vec<Matrix<f64>>)> {
    loss_and_gradients_with(model, x, targets, GradientLoss::SquaredError)
}

/// [`loss_and_gradients`] for any [`GradientLoss`].
pub fn loss_and_gradients_with<T: Scalar>(
    model: &ToyModel<T>,
    x: &Matrix<T>,
    targets: &Matrix<T>,
    loss_fn: GradientLoss,
) -> Result<(f64, Vec<Matrix<f64>>)> {
    if x.rows() != model.input_dim() {
        return Err(TrimError::shape(format!(
            "model expects {} inputs, batch has {}",
            model.input_dim(),
            x.rows()
        )));
    }
    if targets.shape() != (model.output_dim(), x.cols()) {
        return Err(TrimError::shape(format!(
            "targets {:?}, expected {:?}",
            targets.shape(),
            (model.output_dim(), x.cols())
        )));
    }
    let weights: Vec<Matrix<f64>> = model
        .layers()
        .iter()
        .map(|l| l.weight.cast())
        .collect::<Result<_>>()?;
    let mut inputs = Vec::with_capacity(weights.len());
    let mut pre = Vec::with_capacity(weights.len());
    let mut h: Matrix<f64> = x.cast()?;
    for (w, layer) in weights.iter().zip(model.layers()) {
        let z = w.matmul(&h)?;
        let next = layer.activation.apply_matrix(&z)?;
        inputs.push(h);
        pre.push(z);
        h = next;
    }

    let t: Matrix<f64> = targets.cast()?;
    let resid: Vec<f64> = h.as_slice().iter().zip(t.as_slice()).map(|(o, t)| o - t).collect();
    let loss = resid.iter().map(|&r| loss_fn.value(r)).sum();
    let mut g = Matrix::from_vec(h.rows(), h.cols(), resid.iter().map(|&r| loss_fn.derivative(r)).collect())?;

    let mut grads = vec![Matrix::<f64>::zeros(0, 0); weights.len()];
    for l in (0..weights.len()).rev() {
        let act = model.layer(l).activation;
        let z = &pre[l];
        let gz = Matrix::from_vec(
            g.rows(),
            g.cols(),
            g.as_slice()
                .iter()
                .zip(z.as_slice())
                .map(|(gv, zv)| gv * act.derivative(*zv))
                .collect(),
        )?;
        grads[l] = gz.matmul(&inputs[l].transpose())?;
        if l > 0 {
            g = weights[l].transpose().matmul(&gz)?;
        }
    }
    Ok((loss, grads))
}

/// Entrywise `|∂L/∂W|` per layer for `loss` against `targets`.
pub fn capture_gradients<T: Scalar>(
    model: &ToyModel<T>,
    x: &Matrix<T>,
    targets: &Matrix<T>,
    loss: GradientLoss,
) -> Result<Vec<Matrix<T>>> {
    let (_, grads) = loss_and_gradients_with(model, x, targets, loss)?;
    grads
        .iter()
        .map(|g| g.map(f64::abs).and_then(|a| a.cast()))
        .collect()
}

/// Full-batch Adam on the mean squared error. Returns the final mean loss.
pub fn train_regressor<T: Scalar>(
    model: &mut ToyModel<T>,
    x: &Matrix<T>,
    targets: &Matrix<T>,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let scale = 1.0 / targets.len().max(1) as f64;
    let mut m: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.weight.len()]).collect();
    let mut v = m.clone();
    for step in 1..=steps {
        let (_, grads) = loss_and_gradients(model, x, targets)?;
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for (i, g) in grads.iter().enumerate() {
            let w = &model.layer(i).weight;
            let mut data = w.to_f64_vec();
            for (k, gk) in g.as_slice().iter().enumerate() {
                let gk = gk * scale;
                m[i][k] = b1 * m[i][k] + (1.0 - b1) * gk;
                v[i][k] = b2 * v[i][k] + (1.0 - b2) * gk * gk;
                data[k] -= lr * (m[i][k] / c1) / ((v[i][k] / c2).sqrt() + eps);
            }
            let (r, c) = w.shape();
            model.set_weight(i, Matrix::from_vec(r, c, data.into_iter().map(T::narrow).collect())?)?;
        }
    }
    Ok(loss_and_gradients(model, x, targets)?.0 * scale)
}
