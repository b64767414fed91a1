use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean negative log-softmax of the true class, and its gradient
/// `(softmax - onehot) / N` with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    const OP: &str = "softmax_cross_entropy";
    let [n, k] = logits.dims2(OP)?;
    if labels.len() != n {
        return Err(Error::dim(OP, "labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let z = logits.data();
    let mut grad = vec![0.0f32; n * k];
    let mut total = 0.0f32;
    let inv_n = 1.0 / n as f32;
    for r in 0..n {
        let row = &z[r * k..][..k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (row[labels[r]] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
            grad[r * k + j] = (p - onehot) * inv_n;
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            context: OP.into(),
            reason: "non-finite loss".into(),
        });
    }
    Ok((loss, Tensor::new(vec![n, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{random_tensor, relative_error, STEP, TOL};

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[3, 7]), &[0, 3, 6]).unwrap();
        assert!((loss - 7f32.ln()).abs() < 1e-6);
        assert!((loss - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut z = Tensor::zeros(&[1, 7]);
        z.data_mut()[2] = 100.0;
        let (loss, g) = softmax_cross_entropy(&z, &[2]).unwrap();
        assert!(loss < 1e-6);
        assert!(g.all_finite());
    }

    #[test]
    fn out_of_range_label() {
        let err = softmax_cross_entropy(&Tensor::zeros(&[1, 7]), &[7]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 7, classes: 7 }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for trial in 0..20u64 {
            let mut z = random_tensor(&[2, 7], 70 + trial);
            z.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            let labels = [(trial % 7) as usize, ((trial * 3 + 1) % 7) as usize];
            let (_, g) = softmax_cross_entropy(&z, &labels).unwrap();
            for i in 0..z.len() {
                let mut p = z.clone();
                let mut m = z.clone();
                p.data_mut()[i] += STEP;
                m.data_mut()[i] -= STEP;
                let h = (p.data()[i] - m.data()[i]) as f64;
                let lp = softmax_cross_entropy(&p, &labels).unwrap().0 as f64;
                let lm = softmax_cross_entropy(&m, &labels).unwrap().0 as f64;
                let err = relative_error(g.data()[i] as f64, (lp - lm) / h);
                assert!(err < TOL, "trial {trial} elem {i}: {err:e}");
            }
        }
    }
}
