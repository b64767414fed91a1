use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Tensor,
    weight: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `out = input · weightᵀ + bias`, with `weight` stored as `[Dout, Din]`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, LinearCache)> {
    const OP: &str = "linear_forward";
    let [n, din] = input.dims2(OP)?;
    let [dout, wdin] = weight.dims2(OP)?;
    if wdin != din {
        return Err(Error::dim(OP, "in_features", din, wdin));
    }
    bias.expect_vec(OP, "bias", dout)?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * dout);
    for r in 0..n {
        let xr = &x[r * din..][..din];
        for o in 0..dout {
            let wr = &w[o * din..][..din];
            let mut acc = 0.0f32;
            for i in 0..din {
                acc += xr[i] * wr[i];
            }
            out.push(acc + b[o]);
        }
    }
    let cache = LinearCache {
        input: input.clone(),
        weight: weight.clone(),
    };
    Ok((Tensor::new(vec![n, dout], out)?, cache))
}

pub fn linear_backward(cache: &LinearCache, grad_out: &Tensor) -> Result<LinearGrads> {
    const OP: &str = "linear_backward";
    let [n, din] = cache.input.dims2(OP)?;
    let [dout, _] = cache.weight.dims2(OP)?;
    let dims = grad_out.dims2(OP)?;
    if dims != [n, dout] {
        return Err(Error::dim(OP, "grad_out", format!("{:?}", [n, dout]), format!("{dims:?}")));
    }
    let (x, w, g) = (cache.input.data(), cache.weight.data(), grad_out.data());
    let mut gx = vec![0.0f32; n * din];
    let mut gw = vec![0.0f32; dout * din];
    let mut gb = vec![0.0f32; dout];
    for r in 0..n {
        for o in 0..dout {
            let go = g[r * dout + o];
            gb[o] += go;
            for i in 0..din {
                gw[o * din + i] += go * x[r * din + i];
                gx[r * din + i] += go * w[o * din + i];
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![n, din], gx)?,
        weight: Tensor::new(vec![dout, din], gw)?,
        bias: Tensor::new(vec![dout], gb)?,
    })
}
