//! Training objectives: the contrastive loss over paired views, supervised
//! cross-entropy, and their weighted joint combination.
//!
//! Everything here is pure f64 so gradients can be checked against central
//! finite differences at tight tolerances.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{FktError, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over the 2N anchor terms; loss magnitude independent of batch size.
    #[default]
    Mean,
    /// Literal sum over anchor terms.
    Sum,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.5,
            reduction: Reduction::Mean,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(FktError::InvalidConfig(format!(
                "temperature: must be a positive finite scalar, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Scalar loss components for one step. `fkt_loss` is always constructed as
/// `ce_loss + lambda * ssl_loss` in that exact arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ssl_loss: f64,
    pub ce_loss: f64,
    pub fkt_loss: f64,
    pub lambda: f64,
}

fn check_finite(name: &str, z: &Array2<f64>) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(FktError::DegenerateEmbedding(format!(
            "{name} contains a non-finite value"
        )));
    }
    Ok(())
}

/// L2-normalize each row. Errors on zero-norm rows.
fn normalize_rows(z: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = z.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(FktError::DegenerateEmbedding(format!(
                "row {i} has zero norm"
            )));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Pairwise cosine similarities between the rows of `z`.
///
/// The result is exactly symmetric and the diagonal is pinned to 1.0.
pub fn cosine_similarity_matrix(z: &Array2<f64>) -> Result<Array2<f64>> {
    if z.nrows() < 2 {
        return Err(FktError::InvalidInput(format!(
            "need at least 2 rows, got {}",
            z.nrows()
        )));
    }
    check_finite("embeddings", z)?;
    let unit = normalize_rows(z)?;
    let mut sim = unit.dot(&unit.t());
    for i in 0..sim.nrows() {
        sim[[i, i]] = 1.0;
    }
    Ok(sim)
}

/// Index of the sibling view for anchor `x` in the stacked 2N ordering
/// (rows 0..N are view A, rows N..2N are view B).
#[inline]
fn positive_index(x: usize, n: usize) -> usize {
    (x + n) % (2 * n)
}

/// Contrastive loss over N paired embeddings.
///
/// For each of the 2N anchors the positive is its sibling view and the
/// denominator runs over every other sample in the stacked batch (positive
/// included, self excluded). Rows are L2-normalized internally; scaled
/// similarities go through log-sum-exp with per-anchor max subtraction.
pub fn nt_xent(z_a: &Array2<f64>, z_b: &Array2<f64>, cfg: &ContrastiveConfig) -> Result<f64> {
    Ok(nt_xent_with_grad(z_a, z_b, cfg)?.0)
}

/// [`nt_xent`] plus the gradients with respect to the raw (unnormalized)
/// inputs, in the same row order.
pub fn nt_xent_with_grad(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    cfg: &ContrastiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    cfg.validate()?;
    if z_a.dim() != z_b.dim() {
        return Err(FktError::InvalidInput(format!(
            "view shapes differ: {:?} vs {:?}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    let (n, dim) = z_a.dim();
    if n < 1 || dim < 1 {
        return Err(FktError::InvalidInput("empty embedding batch".into()));
    }
    check_finite("view A", z_a)?;
    check_finite("view B", z_b)?;

    let two_n = 2 * n;
    let mut stacked = Array2::<f64>::zeros((two_n, dim));
    stacked.slice_mut(ndarray::s![..n, ..]).assign(z_a);
    stacked.slice_mut(ndarray::s![n.., ..]).assign(z_b);

    let unit = normalize_rows(&stacked)?;
    let sim = unit.dot(&unit.t());
    let tau = cfg.temperature;

    // Per-anchor loss term and softmax row of the gradient, self excluded.
    let rows: Vec<(f64, Vec<f64>)> = par::map_indexed(two_n, |x| {
        let pos = positive_index(x, n);
        let mut max_s = f64::NEG_INFINITY;
        for k in 0..two_n {
            if k != x {
                max_s = max_s.max(sim[[x, k]] / tau);
            }
        }
        let mut denom = 0.0;
        let mut probs = vec![0.0f64; two_n];
        for k in 0..two_n {
            if k != x {
                let e = ((sim[[x, k]] / tau) - max_s).exp();
                probs[k] = e;
                denom += e;
            }
        }
        for p in probs.iter_mut() {
            *p /= denom;
        }
        let term = denom.ln() + max_s - sim[[x, pos]] / tau;
        (term, probs)
    });

    let weight = match cfg.reduction {
        Reduction::Mean => 1.0 / two_n as f64,
        Reduction::Sum => 1.0,
    };
    let loss = match cfg.reduction {
        Reduction::Mean => rows.iter().map(|(t, _)| t).sum::<f64>() / two_n as f64,
        Reduction::Sum => rows.iter().map(|(t, _)| t).sum::<f64>(),
    };

    // dL/dS restricted to off-diagonal entries used by the anchors.
    let mut grad_sim = Array2::<f64>::zeros((two_n, two_n));
    for (x, (_, probs)) in rows.iter().enumerate() {
        let pos = positive_index(x, n);
        for k in 0..two_n {
            if k != x {
                let indicator = if k == pos { 1.0 } else { 0.0 };
                grad_sim[[x, k]] = weight * (probs[k] - indicator);
            }
        }
    }

    // S = U Uᵀ / τ on the entries we use, so dL/dU = (G + Gᵀ) U / τ.
    let sym = &grad_sim + &grad_sim.t();
    let grad_unit = sym.dot(&unit) / tau;

    // Back through row normalization u = z / ‖z‖.
    let mut grad_stacked = Array2::<f64>::zeros((two_n, dim));
    for i in 0..two_n {
        let norm = stacked.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = unit.row(i);
        let g = grad_unit.row(i);
        let dot = g.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>();
        for d in 0..dim {
            grad_stacked[[i, d]] = (g[d] - dot * u[d]) / norm;
        }
    }

    let grad_a = grad_stacked.slice(ndarray::s![..n, ..]).to_owned();
    let grad_b = grad_stacked.slice(ndarray::s![n.., ..]).to_owned();
    Ok((loss, grad_a, grad_b))
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// [`cross_entropy`] plus dL/dlogits = (softmax − onehot) / N.
pub fn cross_entropy_with_grad(
    logits: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if classes < 2 {
        return Err(FktError::InvalidInput(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if labels.len() != n {
        return Err(FktError::InvalidInput(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(FktError::InvalidInput("empty logit batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(FktError::InvalidInput(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    check_finite("logits", logits)?;

    let mut grad = Array2::<f64>::zeros((n, classes));
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..classes {
            denom += (row[c] - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom + max - row[labels[i]];
        for c in 0..classes {
            let p = (row[c] - max).exp() / denom;
            let indicator = if c == labels[i] { 1.0 } else { 0.0 };
            grad[[i, c]] = (p - indicator) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Combine the two objectives: fkt = ce + lambda * ssl.
pub fn fkt_loss(ssl: f64, ce: f64, lambda: f64) -> Result<LossBreakdown> {
    if !ssl.is_finite() || !ce.is_finite() || !lambda.is_finite() {
        return Err(FktError::InvalidInput(format!(
            "non-finite loss inputs: ssl={ssl} ce={ce} lambda={lambda}"
        )));
    }
    if lambda < 0.0 {
        return Err(FktError::InvalidInput(format!(
            "lambda: must be >= 0, got {lambda}"
        )));
    }
    Ok(LossBreakdown {
        ssl_loss: ssl,
        ce_loss: ce,
        fkt_loss: ce + lambda * ssl,
        lambda,
    })
}
