//! 2-D cross-correlation with zero padding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct Conv2dCache {
    input: Tensor,
    kernel: Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    out_dims: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Range of output positions `o` for which `o * stride + k - pad` lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, stride, pad, len) = (k as isize, stride as isize, pad as isize, len as isize);
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
    let hi_num = len - 1 + pad - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / stride + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Conv2dCache)> {
    const OP: &str = "conv2d_forward";
    let [n, cin, h, w] = input.dims4(OP)?;
    let [cout, kcin, kh, kw] = kernel.dims4(OP)?;
    if stride == 0 {
        return Err(Error::dim(OP, "stride", "positive", 0));
    }
    if kcin != cin {
        return Err(Error::dim(OP, "in_channels", cin, kcin));
    }
    if h + 2 * pad < kh {
        return Err(Error::dim(OP, "height", format!(">= {kh} after padding"), h + 2 * pad));
    }
    if w + 2 * pad < kw {
        return Err(Error::dim(OP, "width", format!(">= {kw} after padding"), w + 2 * pad));
    }
    if let Some(b) = bias {
        b.expect_vec(OP, "bias", cout)?;
    }
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(w, kw, stride, pad);

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0f32; n * cout * oh * ow];
    let col_ranges: Vec<(usize, usize)> =
        (0..kw).map(|kx| valid_range(ow, w, kx, stride, pad)).collect();

    for b in 0..n {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * oh * ow..][..oh * ow];
            // Per output element the terms are added in (ci, ky, kx) order.
            for ci in 0..cin {
                let xin = &x[(b * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kv = k[((co * cin + ci) * kh + ky) * kw + kx];
                        let (ox0, ox1) = col_ranges[kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * w..][..w];
                            let orow = &mut plane[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                orow[ox] += row[ix] * kv;
                            }
                        }
                    }
                }
            }
            if let Some(bt) = bias {
                let bv = bt.data()[co];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        }
    }

    let out = Tensor::new(vec![n, cout, oh, ow], out)?;
    let cache = Conv2dCache {
        input: input.clone(),
        kernel: kernel.clone(),
        has_bias: bias.is_some(),
        stride,
        pad,
        out_dims: [n, cout, oh, ow],
    };
    Ok((out, cache))
}

pub fn conv2d_backward(cache: &Conv2dCache, grad_out: &Tensor) -> Result<Conv2dGrads> {
    const OP: &str = "conv2d_backward";
    let dims = grad_out.dims4(OP)?;
    if dims != cache.out_dims {
        return Err(Error::dim(
            OP,
            "grad_out",
            format!("{:?}", cache.out_dims),
            format!("{dims:?}"),
        ));
    }
    let [n, cin, h, w] = cache.input.dims4(OP)?;
    let [cout, _, kh, kw] = cache.kernel.dims4(OP)?;
    let [_, _, oh, ow] = cache.out_dims;
    let (stride, pad) = (cache.stride, cache.pad);

    let x = cache.input.data();
    let k = cache.kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f32; x.len()];
    let mut gk = vec![0.0f32; k.len()];
    let mut gb = vec![0.0f32; cout];
    let col_ranges: Vec<(usize, usize)> =
        (0..kw).map(|kx| valid_range(ow, w, kx, stride, pad)).collect();

    for b in 0..n {
        for co in 0..cout {
            let gplane = &g[(b * cout + co) * oh * ow..][..oh * ow];
            for &v in gplane {
                gb[co] += v;
            }
            for ci in 0..cin {
                let base = (b * cin + ci) * h * w;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let kidx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let kv = k[kidx];
                        let (ox0, ox1) = col_ranges[kx];
                        let mut acc = gk[kidx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let roff = base + iy as usize * w;
                            let grow = &gplane[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                acc += grow[ox] * x[roff + ix];
                                gx[roff + ix] += grow[ox] * kv;
                            }
                        }
                        gk[kidx] = acc;
                    }
                }
            }
        }
    }

    Ok(Conv2dGrads {
        input: Tensor::new(cache.input.shape().to_vec(), gx)?,
        kernel: Tensor::new(cache.kernel.shape().to_vec(), gk)?,
        bias: if cache.has_bias {
            Some(Tensor::new(vec![cout], gb)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_grad, random_tensor};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Element-at-a-time loops over an explicitly zero-padded copy of the input.
    fn naive_conv(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let [n, cin, h, w] = x.dims4("naive").unwrap();
        let [cout, _, kh, kw] = k.dims4("naive").unwrap();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut padded = vec![0.0f32; n * cin * ph * pw];
        for b in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for xx in 0..w {
                        padded[((b * cin + c) * ph + y + pad) * pw + xx + pad] =
                            x.data()[((b * cin + c) * h + y) * w + xx];
                    }
                }
            }
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;
        let mut out = Vec::with_capacity(n * cout * oh * ow);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for c in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    // Padding cells are skipped, matching the kernel.
                                    if iy < pad || ix < pad || iy >= h + pad || ix >= w + pad {
                                        continue;
                                    }
                                    let iv = padded[((b * cin + c) * ph + iy) * pw + ix];
                                    acc += iv * k.data()[((co * cin + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.push(acc + bias.map_or(0.0, |bt| bt.data()[co]));
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 1, 1], &[2.]);
        let (y, _) = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn windowed_sum() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let (y, _) = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.]);
    }

    #[test]
    fn diagonal_kernel_matches_oracle() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let (y, _) = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
        assert_eq!(naive_conv(&x, &k, None, 1, 0).data(), y.data());
    }

    #[test]
    fn matches_naive_oracle_across_shapes() {
        let mut seed = 0;
        for &(n, cin, h, w, cout, kh, kw, stride, pad) in &[
            (1, 1, 5, 5, 1, 3, 3, 1, 1),
            (2, 3, 6, 5, 4, 3, 3, 1, 1),
            (1, 2, 7, 7, 3, 3, 2, 2, 0),
            (2, 2, 4, 4, 2, 1, 1, 1, 0),
            (1, 3, 5, 6, 2, 3, 3, 2, 1),
            (1, 1, 2, 2, 1, 3, 3, 1, 1),
            (3, 2, 8, 8, 2, 5, 5, 3, 2),
        ] {
            seed += 1;
            let x = random_tensor(&[n, cin, h, w], seed);
            let k = random_tensor(&[cout, cin, kh, kw], seed + 100);
            let b = random_tensor(&[cout], seed + 200);
            for bias in [None, Some(&b)] {
                let (y, _) = conv2d_forward(&x, &k, bias, stride, pad).unwrap();
                let oracle = naive_conv(&x, &k, bias, stride, pad);
                assert_eq!(y.shape(), oracle.shape());
                assert_eq!(y.data(), oracle.data(), "shape {:?}", (n, cin, h, w, cout, kh, kw, stride, pad));
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let k = Tensor::zeros(&[1, 2, 5, 3]);
        let err = conv2d_forward(&x, &k, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        let (_, cache) = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert!(conv2d_backward(&cache, &Tensor::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let x = random_tensor(&[1, 2, 4, 4], 1);
        let k = random_tensor(&[3, 2, 3, 3], 2);
        let b = random_tensor(&[3], 3);
        let (y, cache) = conv2d_forward(&x, &k, Some(&b), 1, 1).unwrap();
        let g = conv2d_backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.kernel.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_kernel_gradient_is_input_sum() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 1, 1], &[2.]);
        let (y, cache) = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        let g = conv2d_backward(&cache, &Tensor::full(y.shape(), 1.0)).unwrap();
        assert_eq!(g.kernel.data(), &[10.]);
        assert_eq!(g.input.data(), &[2., 2., 2., 2.]);
        assert!(g.bias.is_none());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let x = random_tensor(&[1, 2, 4, 4], 10 + trial);
            let k = random_tensor(&[3, 2, 3, 3], 50 + trial);
            let b = random_tensor(&[3], 90 + trial);
            let (y, cache) = conv2d_forward(&x, &k, Some(&b), 1, 1).unwrap();
            let proj = random_tensor(y.shape(), 130 + trial);
            let g = conv2d_backward(&cache, &proj).unwrap();
            let f = |x: &Tensor, k: &Tensor, b: &Tensor| conv2d_forward(x, k, Some(b), 1, 1).unwrap().0;
            check_grad(&x, g.input.data(), &proj, |p| f(p, &k, &b));
            check_grad(&k, g.kernel.data(), &proj, |p| f(&x, p, &b));
            check_grad(&b, g.bias.as_ref().unwrap().data(), &proj, |p| f(&x, &k, p));
        }
    }
}
