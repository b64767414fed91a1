//! Global average pooling and 2x2 average downsampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PoolCache {
    dims: [usize; 4],
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let x = input.data();
    let out = (0..n * c)
        .map(|i| {
            let mut s = 0.0f32;
            for &v in &x[i * hw..][..hw] {
                s += v;
            }
            s / hw as f32
        })
        .collect();
    Ok((Tensor::new(vec![n, c], out)?, PoolCache { dims: [n, c, h, w] }))
}

pub fn global_avg_pool_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = cache.dims;
    let dims = grad_out.dims2("global_avg_pool_backward")?;
    if dims != [n, c] {
        return Err(Error::dim("global_avg_pool_backward", "grad_out", format!("{:?}", [n, c]), format!("{dims:?}")));
    }
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect();
    Tensor::new(vec![n, c, h, w], data)
}

#[derive(Clone, Debug)]
pub struct DownsampleCache {
    dims: [usize; 4],
}

/// Non-overlapping 2x2 mean; `H` and `W` must be even.
pub fn avg_downsample_forward(input: &Tensor) -> Result<(Tensor, DownsampleCache)> {
    const OP: &str = "avg_downsample";
    let [n, c, h, w] = input.dims4(OP)?;
    if h % 2 != 0 || h < 2 {
        return Err(Error::dim(OP, "height", "even", h));
    }
    if w % 2 != 0 || w < 2 {
        return Err(Error::dim(OP, "width", "even", w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let plane = &x[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (r0, r1) = (2 * oy * w, (2 * oy + 1) * w);
                let s = plane[r0 + 2 * ox] + plane[r0 + 2 * ox + 1] + plane[r1 + 2 * ox] + plane[r1 + 2 * ox + 1];
                out.push(s * 0.25);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, DownsampleCache { dims: [n, c, h, w] }))
}

pub fn avg_downsample_backward(cache: &DownsampleCache, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = cache.dims;
    let (oh, ow) = (h / 2, w / 2);
    let dims = grad_out.dims4("avg_downsample_backward")?;
    if dims != [n, c, oh, ow] {
        return Err(Error::dim("avg_downsample_backward", "grad_out", format!("{:?}", [n, c, oh, ow]), format!("{dims:?}")));
    }
    let g = grad_out.data();
    let mut gx = vec![0.0f32; n * c * h * w];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                gx[p * h * w + y * w + x] = g[p * oh * ow + (y / 2) * ow + x / 2] * 0.25;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_grad, random_tensor};

    #[test]
    fn global_mean() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (y, cache) = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.data(), &[2.5]);
        let g = global_avg_pool_backward(&cache, &Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let (y, _) = global_avg_pool_forward(&Tensor::full(&[2, 3, 4, 4], 1.75)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn downsample_averages_blocks() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let (y, _) = avg_downsample_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5]);
        assert!(avg_downsample_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let x = random_tensor(&[2, 3, 4, 2], 20 + trial);
            let (y, cache) = global_avg_pool_forward(&x).unwrap();
            let proj = random_tensor(y.shape(), 60 + trial);
            let g = global_avg_pool_backward(&cache, &proj).unwrap();
            check_grad(&x, g.data(), &proj, |p| global_avg_pool_forward(p).unwrap().0);

            let (y, cache) = avg_downsample_forward(&x).unwrap();
            let proj = random_tensor(y.shape(), 160 + trial);
            let g = avg_downsample_backward(&cache, &proj).unwrap();
            check_grad(&x, g.data(), &proj, |p| avg_downsample_forward(p).unwrap().0);
        }
    }
}
