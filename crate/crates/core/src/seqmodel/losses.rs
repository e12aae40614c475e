//! SFT objectives: level-masked next-token prediction over the SID prefix and
//! InfoNCE over fused item embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::numeric::log_softmax;

/// Mean negative log-likelihood of `codes` where row `t` of `logits` holds the
/// outputs at the position predicting level `t + 1`. Only columns
/// `[t·K, (t+1)·K)` are legal for that row; the rest are masked out.
///
/// Returns the loss and its gradient with respect to `logits`.
pub fn ntp_loss(logits: &ArrayView2<f64>, codes: &[u16], codebook_size: usize) -> Result<(f64, Array2<f64>)> {
    let l = codes.len();
    if logits.nrows() != l || logits.ncols() < l * codebook_size {
        return Err(Error::ShapeMismatch {
            expected: format!("{l} x >= {}", l * codebook_size),
            actual: format!("{} x {}", logits.nrows(), logits.ncols()),
        });
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    if l == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (t, &c) in codes.iter().enumerate() {
        if c as usize >= codebook_size {
            return Err(Error::CodeOutOfRange {
                level: t + 1,
                code: c as usize,
                size: codebook_size,
            });
        }
        let lo = t * codebook_size;
        let row: Vec<f64> = logits.row(t).iter().skip(lo).take(codebook_size).copied().collect();
        let lp = log_softmax(&row);
        loss -= lp[c as usize];
        for (k, v) in lp.iter().enumerate() {
            grad[[t, lo + k]] = v.exp() / l as f64;
        }
        grad[[t, lo + c as usize]] -= 1.0 / l as f64;
    }
    Ok((loss / l as f64, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub dh: Array1<f64>,
    pub dtarget: Array1<f64>,
    /// One row per negative.
    pub dnegatives: Array2<f64>,
}

/// Cosine and its gradients with respect to both arguments.
fn cosine_grad(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Result<(f64, Array1<f64>, Array1<f64>)> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = a.dot(b) / (na * nb);
    let da = (b / nb - a * (c / na)) / na;
    let db = (a / na - b * (c / nb)) / nb;
    Ok((c, da, db))
}

/// `-log(e^{cos(h,v)/τ} / (e^{cos(h,v)/τ} + Σ_j e^{cos(h,n_j)/τ}))` with
/// gradients for `h`, the target and every negative.
pub fn id_infonce_loss(h: &ArrayView1<f64>, target: &ArrayView1<f64>, negatives: &ArrayView2<f64>, tau: f64) -> Result<InfoNceOutput> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let d = h.len();
    if target.len() != d || (negatives.nrows() > 0 && negatives.ncols() != d) {
        return Err(Error::ShapeMismatch {
            expected: format!("dimension {d}"),
            actual: format!("target {}, negatives {}", target.len(), negatives.ncols()),
        });
    }
    let n = negatives.nrows();
    if n == 0 {
        log::warn!("InfoNCE with no negatives; loss is 0");
        return Ok(InfoNceOutput {
            loss: 0.0,
            dh: Array1::zeros(d),
            dtarget: Array1::zeros(d),
            dnegatives: Array2::zeros((0, d)),
        });
    }
    let mut cos = Vec::with_capacity(n + 1);
    let (c0, dh0, dv0) = cosine_grad(h, target)?;
    cos.push(c0);
    let mut parts = Vec::with_capacity(n);
    for j in 0..n {
        let (c, dh, dn) = cosine_grad(h, &negatives.row(j))?;
        cos.push(c);
        parts.push((dh, dn));
    }
    let s: Vec<f64> = cos.iter().map(|c| c / tau).collect();
    let lp = log_softmax(&s);
    let loss = -lp[0];
    // dL/ds_0 = p_0 - 1, dL/ds_j = p_j; chain through s = cos / τ.
    let w0 = (lp[0].exp() - 1.0) / tau;
    let mut dh = &dh0 * w0;
    let dtarget = &dv0 * w0;
    let mut dnegatives = Array2::zeros((n, d));
    for (j, (dhj, dnj)) in parts.iter().enumerate() {
        let wj = lp[j + 1].exp() / tau;
        dh.scaled_add(wj, dhj);
        dnegatives.row_mut(j).assign(&(dnj * wj));
    }
    Ok(InfoNceOutput {
        loss,
        dh,
        dtarget,
        dnegatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use crate::numeric::nn::random_matrix;
    use crate::numeric::rng::stream_rng;
    use ndarray::{array, Array};

    #[test]
    fn uniform_level_logits_give_log_k() {
        for k in [2usize, 7, 16, 256] {
            for l in 1..=3 {
                let mut logits = Array2::from_elem((l, l * k), 3.0);
                // Out-of-level columns must not matter.
                for t in 0..l {
                    for c in 0..l * k {
                        if c / k != t {
                            logits[[t, c]] = 40.0 * (c as f64).sin();
                        }
                    }
                }
                let codes: Vec<u16> = (0..l).map(|t| (t % k) as u16).collect();
                let (loss, _) = ntp_loss(&logits.view(), &codes, k).unwrap();
                assert!((loss - (k as f64).ln()).abs() <= 1e-9, "k={k} l={l}: {loss}");
            }
        }
    }

    #[test]
    fn certain_codes_give_zero() {
        let mut logits = Array2::from_elem((2, 8), -800.0);
        logits[[0, 1]] = 0.0;
        logits[[1, 4 + 3]] = 0.0;
        let (loss, _) = ntp_loss(&logits.view(), &[1, 3], 4).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn ntp_matches_scripted_softmax() {
        let logits = array![[0.3, -1.2, 2.0, 0.1, 9.0, 9.0], [5.0, 5.0, 5.0, 0.4, 0.9, -0.7]];
        let (loss, _) = ntp_loss(&logits.view(), &[2, 1], 3).unwrap();
        let p1 = 2.0f64.exp() / (0.3f64.exp() + (-1.2f64).exp() + 2.0f64.exp());
        let p2 = 0.9f64.exp() / (0.4f64.exp() + 0.9f64.exp() + (-0.7f64).exp());
        assert!((loss + 0.5 * (p1.ln() + p2.ln())).abs() < 1e-12);
    }

    #[test]
    fn ntp_gradient_matches_finite_differences() {
        let mut rng = stream_rng(5, "ntp");
        let (l, k) = (2, 4);
        let logits = random_matrix(l, l * k, 1.5, &mut rng);
        let codes = [3u16, 0];
        let f = |x: &[f64]| {
            let a = Array::from_shape_vec((l, l * k), x.to_vec()).unwrap();
            let (loss, g) = ntp_loss(&a.view(), &codes, k).unwrap();
            (loss, g.into_raw_vec_and_offset().0)
        };
        let err = grad_check(f, logits.as_slice().unwrap(), 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn infonce_negatives_equal_to_target() {
        let h = array![0.3, -0.4, 1.0];
        let v = array![1.0, 2.0, 0.5];
        for n in [1usize, 4, 9] {
            let negs = Array2::from_shape_fn((n, 3), |(_, j)| v[j]);
            let out = id_infonce_loss(&h.view(), &v.view(), &negs.view(), 0.05).unwrap();
            assert!((out.loss - ((1 + n) as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_orthogonal_negatives() {
        let h = array![1.0, 0.0, 0.0, 0.0];
        let v = array![2.0, 0.0, 0.0, 0.0];
        let negs = array![[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0], [0.0, 0.0, 0.0, 0.5]];
        let out = id_infonce_loss(&h.view(), &v.view(), &negs.view(), 0.05).unwrap();
        let scripted = -(20.0f64.exp() / (20.0f64.exp() + 3.0)).ln();
        assert!((out.loss - scripted).abs() < 1e-12, "{} vs {scripted}", out.loss);
        assert!(out.loss < 1e-8);
    }

    #[test]
    fn infonce_empty_negatives() {
        let h = array![1.0, 2.0];
        let out = id_infonce_loss(&h.view(), &h.view(), &Array2::zeros((0, 2)).view(), 0.05).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = stream_rng(9, "infonce");
        let (d, n) = (8, 4);
        let x0 = random_matrix(1, d * (n + 2), 1.0, &mut rng).into_raw_vec_and_offset().0;
        let f = |x: &[f64]| {
            let h = ArrayView1::from(&x[..d]);
            let v = ArrayView1::from(&x[d..2 * d]);
            let negs = ArrayView2::from_shape((n, d), &x[2 * d..]).unwrap();
            let o = id_infonce_loss(&h, &v, &negs, 0.05).unwrap();
            let mut g = o.dh.to_vec();
            g.extend(o.dtarget.iter());
            g.extend(o.dnegatives.iter());
            (o.loss, g)
        };
        let err = grad_check(f, &x0, 1e-6).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn infonce_decreases_as_target_aligns() {
        let mut rng = stream_rng(2, "mono");
        let negs = random_matrix(6, 5, 1.0, &mut rng);
        let h = random_matrix(1, 5, 1.0, &mut rng).row(0).to_owned();
        let other = random_matrix(1, 5, 1.0, &mut rng).row(0).to_owned();
        let mut last = f64::INFINITY;
        // Moving the target from `other` towards `h` raises cos(h, v) monotonically.
        for step in 0..=20 {
            let a = step as f64 / 20.0;
            let v = &other * (1.0 - a) + &h * (a * 4.0);
            let out = id_infonce_loss(&h.view(), &v.view(), &negs.view(), 0.05).unwrap();
            assert!(out.loss < last);
            last = out.loss;
        }
    }
}
