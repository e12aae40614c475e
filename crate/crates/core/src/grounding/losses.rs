use ndarray::{Array1, Array2, Axis};

use super::GroundingBatch;
use crate::error::{Error, Result};
use crate::numeric::check_temperature;

#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub loss: f64,
    /// Gradient with respect to the student (text) embeddings.
    pub grad: Array2<f64>,
}

/// Unit-normalised rows and the original row norms.
fn normalize_rows(e: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = e.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroVector);
    }
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::NonFinite("embeddings".into()));
    }
    let u = e / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Row-wise log-probabilities `log P(i, j)` over `j != i` from cosine
/// similarities scaled by `1/tau`. The diagonal is set to `-inf`.
fn log_rows(cos: &Array2<f64>, tau: f64) -> Array2<f64> {
    let n = cos.nrows();
    let mut out = Array2::from_elem((n, n), f64::NEG_INFINITY);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                max = max.max(cos[[i, k]] / tau);
            }
        }
        let mut sum = 0.0;
        for k in 0..n {
            if k != i {
                sum += (cos[[i, k]] / tau - max).exp();
            }
        }
        let lse = max + sum.ln();
        for j in 0..n {
            if j != i {
                out[[i, j]] = cos[[i, j]] / tau - lse;
            }
        }
    }
    out
}

/// In-batch similarity distribution: entry `(i, j)` is the probability of
/// `j` among all rows `k != i`; diagonal entries are zero.
pub fn similarity_distribution(embeddings: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_temperature(tau)?;
    let (u, _) = normalize_rows(embeddings)?;
    Ok(log_rows(&u.dot(&u.t()), tau).mapv(f64::exp))
}

/// Probability that row `i` picks row `j` (0-based, `i != j`).
pub fn pair_probability(embeddings: &Array2<f64>, i: usize, j: usize, tau: f64) -> Result<f64> {
    let n = embeddings.nrows();
    if i >= n || j >= n {
        return Err(Error::invalid(format!("index out of range for {n} embeddings")));
    }
    if i == j {
        return Err(Error::invalid("self-probability is undefined"));
    }
    Ok(similarity_distribution(embeddings, tau)?[[i, j]])
}

/// Back-propagates `dL/dC` (C = cosine matrix of the rows of `e`) to `dL/de`.
fn cosine_backward(u: &Array2<f64>, norms: &Array1<f64>, d_cos: &Array2<f64>) -> Array2<f64> {
    let sym = d_cos + &d_cos.t();
    let du = sym.dot(u);
    let mut de = Array2::zeros(u.raw_dim());
    for i in 0..u.nrows() {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = dui.dot(&ui);
        let mut row = de.row_mut(i);
        for k in 0..ui.len() {
            row[k] = (dui[k] - proj * ui[k]) / norms[i];
        }
    }
    de
}

fn check_batch(batch: &GroundingBatch, tau: f64) -> Result<usize> {
    check_temperature(tau)?;
    let b = batch.pairs.len();
    if b == 0 {
        return Err(Error::Empty("grounding batch".into()));
    }
    if batch.text_embeddings.nrows() != 2 * b {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", 2 * b),
            actual: batch.text_embeddings.nrows().to_string(),
        });
    }
    Ok(b)
}

/// In-batch InfoNCE over `2B` rows where row `i` and row `(i + B) mod 2B`
/// are mutual positives:
///
/// `L = -1/(2B) Σ_i log P(i, partner(i))`.
pub fn contrastive_loss(batch: &GroundingBatch, tau: f64) -> Result<LossWithGrad> {
    let b = check_batch(batch, tau)?;
    let n = 2 * b;
    let (u, norms) = normalize_rows(&batch.text_embeddings)?;
    let logp = log_rows(&u.dot(&u.t()), tau);
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_cos = Array2::zeros((n, n));
    for i in 0..n {
        let partner = (i + b) % n;
        loss -= logp[[i, partner]];
        for j in 0..n {
            if j != i {
                let target = if j == partner { 1.0 } else { 0.0 };
                d_cos[[i, j]] = scale * (logp[[i, j]].exp() - target) / tau;
            }
        }
    }
    Ok(LossWithGrad {
        loss: loss * scale,
        grad: cosine_backward(&u, &norms, &d_cos),
    })
}

/// KL divergence from the teacher's in-batch similarity rows to the
/// student's, averaged over the `2B` rows. Self-pairs are excluded so every
/// row is a proper distribution.
pub fn kd_loss(batch: &GroundingBatch, tau: f64) -> Result<LossWithGrad> {
    let b = check_batch(batch, tau)?;
    let teacher = batch
        .teacher_id_embeddings
        .as_ref()
        .ok_or_else(|| Error::Empty("teacher embeddings".into()))?;
    let n = 2 * b;
    let (u, norms) = normalize_rows(&batch.text_embeddings)?;
    let (ut, _) = normalize_rows(teacher)?;
    let logp = log_rows(&u.dot(&u.t()), tau);
    let logq = log_rows(&ut.dot(&ut.t()), tau);
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_cos = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let q = logq[[i, j]].exp();
            if q > 0.0 {
                loss += q * (logq[[i, j]] - logp[[i, j]]);
            }
            d_cos[[i, j]] = scale * (logp[[i, j]].exp() - q) / tau;
        }
    }
    Ok(LossWithGrad {
        loss: (loss * scale).max(0.0),
        grad: cosine_backward(&u, &norms, &d_cos),
    })
}
