//! Per-channel batch normalization over `[N, C, H, W]` activations.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.1;
pub const DEFAULT_EPSILON: f32 = 1e-5;

/// Running statistics and hyperparameters of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub running_mean: Tensor,
    /// Population variance, always `>= 0`.
    pub running_var: Tensor,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BnStats {
    pub fn new(channels: usize, momentum: f32, epsilon: f32) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// A standalone BN layer: learnable affine plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            stats: BnStats::new(channels, DEFAULT_MOMENTUM, DEFAULT_EPSILON),
        }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode, update_running: bool) -> Result<(Tensor, BnCache)> {
        batchnorm_forward(input, &self.gamma, &self.beta, &mut self.stats, mode, update_running)
    }
}

#[derive(Clone, Debug)]
pub struct BnCache {
    mode: Mode,
    dims: [usize; 4],
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    gamma: Vec<f32>,
}

impl BnCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: Mode,
    update_running: bool,
) -> Result<(Tensor, BnCache)> {
    const OP: &str = "batchnorm_forward";
    let [n, c, h, w] = input.dims4(OP)?;
    gamma.expect_vec(OP, "gamma", c)?;
    beta.expect_vec(OP, "beta", c)?;
    stats.running_mean.expect_vec(OP, "running_mean", c)?;
    stats.running_var.expect_vec(OP, "running_var", c)?;
    let hw = h * w;
    let count = n * hw;
    if mode == Mode::Train && count < 2 {
        return Err(Error::DegenerateBatch(count));
    }

    let x = input.data();
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; c];

    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f32;
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..][..hw] {
                        sum += v;
                    }
                }
                let mean = sum / count as f32;
                let mut sq = 0.0f32;
                for b in 0..n {
                    for &v in &x[(b * c + ch) * hw..][..hw] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count as f32;
                if update_running {
                    let m = stats.momentum;
                    let rm = &mut stats.running_mean.data_mut()[ch];
                    *rm = (1.0 - m) * *rm + m * mean;
                    let rv = &mut stats.running_var.data_mut()[ch];
                    *rv = (1.0 - m) * *rv + m * var;
                }
                (mean, var)
            }
            Mode::Eval => (stats.running_mean.data()[ch], stats.running_var.data()[ch]),
        };
        let istd = 1.0 / (var + stats.epsilon).sqrt();
        inv_std[ch] = istd;
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }

    let cache = BnCache {
        mode,
        dims: [n, c, h, w],
        xhat,
        inv_std,
        gamma: gamma.data().to_vec(),
    };
    Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
}

fn check_grad_shape(op: &'static str, cache: &BnCache, grad_out: &Tensor) -> Result<()> {
    let dims = grad_out.dims4(op)?;
    if dims != cache.dims {
        return Err(Error::dim(op, "grad_out", format!("{:?}", cache.dims), format!("{dims:?}")));
    }
    Ok(())
}

fn affine_grads(cache: &BnCache, g: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = cache.dims;
    let hw = h * w;
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                ggamma[ch] += g[i] * cache.xhat[i];
                gbeta[ch] += g[i];
            }
        }
    }
    (ggamma, gbeta)
}

/// Exact gradients through batch-statistic normalization. Only defined for
/// caches produced in [`Mode::Train`].
pub fn batchnorm_backward(cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    const OP: &str = "batchnorm_backward";
    if cache.mode != Mode::Train {
        return Err(Error::Contract(
            "batchnorm_backward requires a train-mode cache".into(),
        ));
    }
    check_grad_shape(OP, cache, grad_out)?;
    let [n, c, h, w] = cache.dims;
    let hw = h * w;
    let m = (n * hw) as f32;
    let g = grad_out.data();
    let (ggamma, gbeta) = affine_grads(cache, g);

    let mut gx = vec![0.0f32; g.len()];
    for ch in 0..c {
        // dxhat = g * gamma; sums reuse the affine gradients.
        let gam = cache.gamma[ch];
        let sum_dxhat = gbeta[ch] * gam;
        let sum_dxhat_xhat = ggamma[ch] * gam;
        let scale = cache.inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let dxhat = g[i] * gam;
                gx[i] = scale * (m * dxhat - sum_dxhat - cache.xhat[i] * sum_dxhat_xhat);
            }
        }
    }

    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], ggamma)?,
        beta: Tensor::new(vec![c], gbeta)?,
    })
}

/// Gradients through normalization by fixed running statistics (a frozen
/// layer that still passes gradient to shallower layers).
pub fn batchnorm_eval_backward(cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    const OP: &str = "batchnorm_eval_backward";
    if cache.mode != Mode::Eval {
        return Err(Error::Contract(
            "batchnorm_eval_backward requires an eval-mode cache".into(),
        ));
    }
    check_grad_shape(OP, cache, grad_out)?;
    let [n, c, h, w] = cache.dims;
    let hw = h * w;
    let g = grad_out.data();
    let (ggamma, gbeta) = affine_grads(cache, g);
    let mut gx = vec![0.0f32; g.len()];
    for ch in 0..c {
        let s = cache.gamma[ch] * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = g[i] * s;
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], ggamma)?,
        beta: Tensor::new(vec![c], gbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_grad, random_tensor};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn normalizes_four_values() {
        // Oracle: mean 2.5, population variance 1.25.
        let raw = [1.0f64, 2.0, 3.0, 4.0];
        let mean = raw.iter().sum::<f64>() / 4.0;
        let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let expected: Vec<f64> = raw.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();

        let mut bn = BnState::new(1);
        let (y, _) = bn.forward(&t(&[4, 1, 1, 1], &[1., 2., 3., 4.]), Mode::Train, false).unwrap();
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((*a as f64 - e).abs() < 1e-5, "{a} vs {e}");
        }
        assert!((y.data()[0] + 1.3416).abs() < 1e-4);
        assert!((y.data()[3] - 1.3416).abs() < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let mut bn = BnState::new(2);
        let x = Tensor::full(&[2, 2, 3, 3], 0.7);
        let (y, _) = bn.forward(&x, Mode::Train, false).unwrap();
        // |out| <= |x - mean| / sqrt(eps); the mean is exact to f32 rounding.
        let bound = 0.7 * f32::EPSILON * 4.0 / 1e-5f32.sqrt();
        assert!(y.data().iter().all(|v| v.abs() <= bound), "{:?}", y.data());
    }

    #[test]
    fn eval_with_unit_stats_is_affine() {
        let mut bn = BnState::new(1);
        bn.gamma = t(&[1], &[2.0]);
        bn.beta = t(&[1], &[1.0]);
        bn.stats.epsilon = 0.0;
        let x = t(&[1, 1, 2, 2], &[-1., 0., 0.5, 3.]);
        let (y, _) = bn.forward(&x, Mode::Eval, true).unwrap();
        assert_eq!(y.data(), &[-1., 1., 2., 7.]);
        assert_eq!(bn.stats, BnStats { epsilon: 0.0, ..BnStats::new(1, DEFAULT_MOMENTUM, 0.0) });
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let mut bn = BnState::new(3);
        let err = bn.forward(&Tensor::zeros(&[1, 3, 1, 1]), Mode::Train, true).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
        assert!(bn.forward(&Tensor::zeros(&[1, 3, 1, 1]), Mode::Eval, false).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BnState::new(1);
        let x = t(&[4, 1, 1, 1], &[1., 2., 3., 4.]);
        bn.forward(&x, Mode::Train, true).unwrap();
        assert!((bn.stats.running_mean.data()[0] - 0.25).abs() < 1e-7);
        assert!((bn.stats.running_var.data()[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-7);
        let before = bn.stats.clone();
        bn.forward(&x, Mode::Train, false).unwrap();
        assert_eq!(bn.stats, before);
    }

    #[test]
    fn train_output_is_standardized() {
        for seed in 0..20 {
            let mut bn = BnState::new(3);
            let x = random_tensor(&[4, 3, 5, 5], seed);
            let (y, _) = bn.forward(&x, Mode::Train, false).unwrap();
            let hw = 25;
            for ch in 0..3 {
                let vals: Vec<f64> = (0..4)
                    .flat_map(|b| y.data()[(b * 3 + ch) * hw..][..hw].iter().map(|&v| v as f64))
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-5, "mean {m}");
                assert!((v - 1.0).abs() < 1e-3, "var {v}");
            }
        }
    }

    #[test]
    fn backward_contracts() {
        let mut bn = BnState::new(2);
        let x = random_tensor(&[2, 2, 2, 2], 4);
        let (y, cache) = bn.forward(&x, Mode::Eval, false).unwrap();
        assert!(matches!(batchnorm_backward(&cache, &y), Err(Error::Contract(_))));
        let (y, cache) = bn.forward(&x, Mode::Train, false).unwrap();
        assert!(matches!(batchnorm_eval_backward(&cache, &y), Err(Error::Contract(_))));

        let g = batchnorm_backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.input.data().iter().chain(g.gamma.data()).chain(g.beta.data()).all(|&v| v == 0.0));

        let up = random_tensor(y.shape(), 9);
        let g = batchnorm_backward(&cache, &up).unwrap();
        for ch in 0..2 {
            let s: f32 = (0..2).flat_map(|b| up.data()[(b * 2 + ch) * 4..][..4].to_vec()).sum();
            assert!((g.beta.data()[ch] - s).abs() < 1e-6);
        }
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let x = random_tensor(&[2, 3, 2, 2], 300 + trial);
            let mut gamma = random_tensor(&[3], 400 + trial);
            gamma.data_mut().iter_mut().for_each(|v| *v += 1.5);
            let beta = random_tensor(&[3], 500 + trial);
            let mut stats = BnStats::new(3, DEFAULT_MOMENTUM, DEFAULT_EPSILON);
            let (y, cache) = batchnorm_forward(&x, &gamma, &beta, &mut stats, Mode::Train, false).unwrap();
            let proj = random_tensor(y.shape(), 600 + trial);
            let g = batchnorm_backward(&cache, &proj).unwrap();
            let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
                let mut s = BnStats::new(3, DEFAULT_MOMENTUM, DEFAULT_EPSILON);
                batchnorm_forward(x, gm, bt, &mut s, Mode::Train, false).unwrap().0
            };
            check_grad(&x, g.input.data(), &proj, |p| f(p, &gamma, &beta));
            check_grad(&gamma, g.gamma.data(), &proj, |p| f(&x, p, &beta));
            check_grad(&beta, g.beta.data(), &proj, |p| f(&x, &gamma, p));
        }
    }

    #[test]
    fn eval_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let x = random_tensor(&[2, 3, 2, 2], 700 + trial);
            let gamma = random_tensor(&[3], 800 + trial);
            let beta = random_tensor(&[3], 900 + trial);
            let mut stats = BnStats::new(3, DEFAULT_MOMENTUM, DEFAULT_EPSILON);
            stats.running_mean = random_tensor(&[3], 950 + trial);
            let (y, cache) = batchnorm_forward(&x, &gamma, &beta, &mut stats.clone(), Mode::Eval, false).unwrap();
            let proj = random_tensor(y.shape(), 990 + trial);
            let g = batchnorm_eval_backward(&cache, &proj).unwrap();
            let f = |x: &Tensor, gm: &Tensor| {
                batchnorm_forward(x, gm, &beta, &mut stats.clone(), Mode::Eval, false).unwrap().0
            };
            check_grad(&x, g.input.data(), &proj, |p| f(p, &gamma));
            check_grad(&gamma, g.gamma.data(), &proj, |p| f(&x, p));
        }
    }
}
