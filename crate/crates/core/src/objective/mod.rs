//! Training losses, evaluation metrics and per-cell error statistics.
//!
//! All losses take `[B, T, N]` trajectories in normalized log space and
//! return scalar tape nodes. Time derivatives are finite-difference stencils
//! along `T` on the unit grid.

mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ChemNNEModel;
use crate::nn::Bound;
use crate::tensor::{Tensor, TensorError, Var};

pub use stats::{error_stats, ErrorStats, STATS_CSV_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub d1: f64,
    pub d2: f64,
    pub identity: f64,
    pub mass: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            d1: 10.0,
            d2: 10.0,
            identity: 1.0,
            mass: 0.001,
        }
    }
}

impl LossWeights {
    pub fn mse_only() -> Self {
        LossWeights {
            recon: 1.0,
            d1: 0.0,
            d2: 0.0,
            identity: 0.0,
            mass: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.recon, self.d1, self.d2, self.identity, self.mass]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["recon", "d1", "d2", "identity", "mass"];
        for (name, w) in names.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn mse<'t>(op: &'static str, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, TensorError> {
    same_shape(op, a, b)?;
    Ok(a.sub(b)?.square().mean_all())
}

/// Mean squared error over all elements.
pub fn loss_recon<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>, TensorError> {
    mse("loss_recon", pred, truth)
}

/// Finite-difference operator along a length-`n` axis as a matrix.
///
/// Order 1 is `n x n`: central differences inside, one-sided at both ends.
/// Order 2 is `(n-2) x n`: `x[t+1] - 2x[t] + x[t-1]` on interior points.
pub fn stencil(n: usize, order: usize) -> Result<Tensor, TensorError> {
    match order {
        1 if n >= 2 => {
            let mut d = Tensor::zeros(&[n, n]);
            d.set(&[0, 0], -1.0);
            d.set(&[0, 1], 1.0);
            for t in 1..n - 1 {
                d.set(&[t, t - 1], -0.5);
                d.set(&[t, t + 1], 0.5);
            }
            d.set(&[n - 1, n - 2], -1.0);
            d.set(&[n - 1, n - 1], 1.0);
            Ok(d)
        }
        2 if n >= 3 => {
            let mut d = Tensor::zeros(&[n - 2, n]);
            for r in 0..n - 2 {
                d.set(&[r, r], 1.0);
                d.set(&[r, r + 1], -2.0);
                d.set(&[r, r + 2], 1.0);
            }
            Ok(d)
        }
        1 | 2 => Err(TensorError::Contract(format!(
            "order-{order} derivative needs at least {} time steps, got {n}",
            order + 1
        ))),
        _ => Err(TensorError::Contract(format!("unsupported derivative order {order}"))),
    }
}

/// MSE between time derivatives of `pred` and `truth` (`[B, T, N]`).
pub fn loss_derivative<'t>(
    pred: Var<'t>,
    truth: Var<'t>,
    order: usize,
) -> Result<Var<'t>, TensorError> {
    same_shape("loss_derivative", pred, truth)?;
    let s = pred.shape();
    if s.len() != 3 {
        return Err(TensorError::Dimension {
            op: "loss_derivative",
            lhs: s,
            rhs: vec![0, 0, 0],
        });
    }
    let d = pred.tape().constant(stencil(s[1], order)?);
    let dp = d.matmul(pred)?;
    let dt = d.matmul(truth)?;
    mse("loss_derivative", dp, dt)
}

/// MSE between per-step species totals.
pub fn loss_mass<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>, TensorError> {
    same_shape("loss_mass", pred, truth)?;
    let last = pred.shape().len().saturating_sub(1);
    mse("loss_mass", pred.sum(Some(last))?, truth.sum(Some(last))?)
}

/// Mass loss on denormalized concentrations `10^(D v)`.
pub fn loss_mass_raw<'t>(
    pred: Var<'t>,
    truth: Var<'t>,
    divisor: f64,
) -> Result<Var<'t>, TensorError> {
    let k = divisor * std::f64::consts::LN_10;
    loss_mass(pred.scale(k).exp(), truth.scale(k).exp())
}

/// Input species positions paired with their output positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeciesMap {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl SpeciesMap {
    pub fn identity(n: usize) -> Self {
        SpeciesMap {
            input: (0..n).collect(),
            output: (0..n).collect(),
        }
    }

    /// Species present in both lists, in input order.
    pub fn shared(inputs: &[String], outputs: &[String]) -> Self {
        let mut map = SpeciesMap::default();
        for (i, name) in inputs.iter().enumerate() {
            if let Some(o) = outputs.iter().position(|n| n == name) {
                map.input.push(i);
                map.output.push(o);
            }
        }
        map
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }
}

/// MSE between `x0` and the model's reconstruction at `t = 0`, restricted to
/// shared species.
pub fn loss_identity<'t>(
    model: &ChemNNEModel,
    p: &Bound<'t>,
    x0: Var<'t>,
    k: Var<'t>,
    map: &SpeciesMap,
) -> Result<Var<'t>> {
    if map.is_empty() {
        return Err(Error::Config(
            "identity loss needs at least one species shared by inputs and outputs".into(),
        ));
    }
    let init = model.initial(p, x0, k)?;
    Ok(mse(
        "loss_identity",
        init.select(1, &map.output)?,
        x0.select(1, &map.input)?,
    )?)
}

/// Per-term loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub d1: f64,
    pub d2: f64,
    pub identity: f64,
    pub mass: f64,
}

/// The five loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub recon: Var<'t>,
    pub d1: Var<'t>,
    pub d2: Var<'t>,
    /// Absent when no species are shared.
    pub identity: Option<Var<'t>>,
    pub mass: Var<'t>,
}

impl<'t> LossTerms<'t> {
    /// All terms for one batch. `pred`/`truth` are `[B, T, N]`.
    pub fn compute(
        model: &ChemNNEModel,
        p: &Bound<'t>,
        x0: Var<'t>,
        k: Var<'t>,
        pred: Var<'t>,
        truth: Var<'t>,
        map: &SpeciesMap,
    ) -> Result<LossTerms<'t>> {
        let identity = if map.is_empty() {
            None
        } else {
            Some(loss_identity(model, p, x0, k, map)?)
        };
        Ok(LossTerms {
            recon: loss_recon(pred, truth)?,
            d1: loss_derivative(pred, truth, 1)?,
            d2: loss_derivative(pred, truth, 2)?,
            identity,
            mass: loss_mass(pred, truth)?,
        })
    }
}

/// Weighted sum of the terms. Zero-weighted terms are left out of the graph.
pub fn loss_total<'t>(terms: &LossTerms<'t>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    w.validate()?;
    if w.identity > 0.0 && terms.identity.is_none() {
        return Err(Error::Config(
            "identity loss weight is positive but no species are shared by inputs and outputs".into(),
        ));
    }
    let mut total: Option<Var<'t>> = None;
    let parts = [
        (w.recon, Some(terms.recon)),
        (w.d1, Some(terms.d1)),
        (w.d2, Some(terms.d2)),
        (w.identity, terms.identity),
        (w.mass, Some(terms.mass)),
    ];
    for (alpha, term) in parts {
        let Some(term) = term else { continue };
        if alpha == 0.0 {
            continue;
        }
        let scaled = term.scale(alpha);
        total = Some(match total {
            Some(acc) => acc.add(scaled)?,
            None => scaled,
        });
    }
    let tape = terms.recon.tape();
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let breakdown = LossBreakdown {
        total: total.value().item(),
        recon: terms.recon.value().item(),
        d1: terms.d1.value().item(),
        d2: terms.d2.value().item(),
        identity: terms.identity.map_or(0.0, |v| v.value().item()),
        mass: terms.mass.value().item(),
    };
    Ok((total, breakdown))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mbe: f64,
}

/// MAE, RMSE and MBE of `pred - truth` pooled over every element.
pub fn metrics(pred: &Tensor, truth: &Tensor) -> Result<Metrics, TensorError> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::Dimension {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let n = pred.numel();
    if n == 0 {
        return Err(TensorError::Contract("metrics of an empty set".into()));
    }
    let (mut abs, mut sq, mut bias) = (0.0, 0.0, 0.0);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
        bias += e;
    }
    let n = n as f64;
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mbe: bias / n,
    })
}

#[cfg(test)]
mod tests;
