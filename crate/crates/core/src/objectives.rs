//! L1 regression, symmetric InfoNCE and their weighted sum, with gradients.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("row {0} has zero norm")]
    DegenerateInput(usize),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_cont: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_reg: 1.0, lambda_cont: 0.2, temperature: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidWeights(m.into()));
        if !(self.lambda_reg >= 0.0 && self.lambda_cont >= 0.0) {
            return bad("lambdas must be non-negative");
        }
        if self.lambda_reg == 0.0 && self.lambda_cont == 0.0 {
            return bad("lambda_reg and lambda_cont cannot both be zero");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub fn total_loss(reg: f64, contrastive: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown { reg, contrastive, total: weights.lambda_reg * reg + weights.lambda_cont * contrastive }
}

fn check_pair(a: usize, b: usize) -> Result<(), ObjectiveError> {
    if a != b {
        return Err(ObjectiveError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(())
}

/// Mean absolute residual.
pub fn l1_regression(predictions: &[f64], targets: &[f64]) -> Result<f64, ObjectiveError> {
    check_pair(predictions.len(), targets.len())?;
    let sum: f64 = predictions.iter().zip(targets).map(|(p, t)| (t - p).abs()).sum();
    Ok(sum / predictions.len() as f64)
}

/// Loss and dL/dprediction. The subgradient at a zero residual is 0.
pub fn l1_regression_grad(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let loss = l1_regression(predictions, targets)?;
    let b = predictions.len() as f64;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let r = p - t;
            if r > 0.0 {
                1.0 / b
            } else if r < 0.0 {
                -1.0 / b
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>), ObjectiveError> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
        return Err(ObjectiveError::DegenerateInput(i));
    }
    Ok((m / &norms.view().insert_axis(Axis(1)), norms))
}

/// Row-wise softmax and per-row log-sum-exp.
fn softmax_rows(s: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut p = s.clone();
    let mut lse = Array1::zeros(s.nrows());
    for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row /= sum;
        lse[i] = m + sum.ln();
    }
    (p, lse)
}

/// Symmetric InfoNCE over the cosine-similarity matrix divided by `temperature`.
pub fn info_nce(z: &Array2<f64>, t: &Array2<f64>, temperature: f64) -> Result<f64, ObjectiveError> {
    Ok(info_nce_grad(z, t, temperature)?.0)
}

/// Loss with dL/dz and dL/dt.
pub fn info_nce_grad(
    z: &Array2<f64>,
    t: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>), ObjectiveError> {
    check_pair(z.nrows(), t.nrows())?;
    if z.ncols() != t.ncols() {
        return Err(ObjectiveError::LengthMismatch(z.ncols(), t.ncols()));
    }
    let b = z.nrows();
    let (zn, z_norm) = normalize_rows(z)?;
    let (tn, t_norm) = normalize_rows(t)?;
    let s = zn.dot(&tn.t()) / temperature;
    let (p_row, lse_row) = softmax_rows(&s);
    let st = s.t().to_owned();
    let (p_col_t, lse_col) = softmax_rows(&st);
    let diag = s.diag();
    let l_row = (&lse_row - &diag).sum() / b as f64;
    let l_col = (&lse_col - &diag).sum() / b as f64;
    let loss = 0.5 * (l_row + l_col);

    let eye = Array2::<f64>::eye(b);
    let ds = ((&p_row - &eye) + (&p_col_t.t() - &eye)) / (2.0 * b as f64);
    let dzn = ds.dot(&tn) / temperature;
    let dtn = ds.t().dot(&zn) / temperature;
    let back = |un: &Array2<f64>, du: Array2<f64>, norms: &Array1<f64>| {
        let mut out = du;
        for ((mut row, u), n) in out.axis_iter_mut(Axis(0)).zip(un.axis_iter(Axis(0))).zip(norms.iter()) {
            let proj = row.dot(&u);
            row.zip_mut_with(&u, |g, &uv| *g = (*g - uv * proj) / n);
        }
        out
    };
    Ok((loss, back(&zn, dzn, &z_norm), back(&tn, dtn, &t_norm)))
}
