//! 1D convolution along the leading (time) axis, applied independently at
//! every trailing position. Input `[T, C, ...]`, weight `[O, C, k]`.

use super::gemm::gemm_strided;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Geometry {
    t: usize,
    c: usize,
    o: usize,
    k: usize,
    pad: usize,
    s: usize,
}

fn geometry(input: &Tensor, weight: &Tensor, pad: usize) -> Result<Geometry> {
    if input.rank() < 2 {
        return Err(Error::shape(
            "conv1d_temporal",
            format!("input must be [T, C, ...], got {:?}", input.shape()),
        ));
    }
    weight.expect_rank("conv1d_temporal", 3)?;
    let (t, c) = (input.dim(0), input.dim(1));
    let (o, wc, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
    if wc != c {
        return Err(Error::shape(
            "conv1d_temporal",
            format!("channels: input C={c}, weight expects C={wc}"),
        ));
    }
    if k % 2 == 0 {
        return Err(Error::invalid("conv1d_temporal", format!("kernel size {k} must be odd")));
    }
    if pad != (k - 1) / 2 {
        return Err(Error::invalid(
            "conv1d_temporal",
            format!("same padding requires pad {} for k={k}, got {pad}", (k - 1) / 2),
        ));
    }
    let s = input.shape()[2..].iter().product();
    Ok(Geometry { t, c, o, k, pad, s })
}

/// Zero-padded temporal convolution; output length equals input length.
pub fn conv1d_temporal(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(input, weight, pad)?;
    bias.expect_shape("conv1d_temporal", &[g.o])?;
    let mut out = vec![0.0f32; g.t * g.o * g.s];
    for (i, v) in out.iter_mut().enumerate() {
        *v = bias.data()[(i / g.s) % g.o];
    }
    let x = input.data();
    let w = weight.data();
    for t in 0..g.t {
        let dst = &mut out[t * g.o * g.s..(t + 1) * g.o * g.s];
        for tap in 0..g.k {
            let src_t = t as isize + tap as isize - g.pad as isize;
            if src_t < 0 || src_t >= g.t as isize {
                continue;
            }
            let src = &x[src_t as usize * g.c * g.s..(src_t as usize + 1) * g.c * g.s];
            // W_tap is the strided [O, C] slice weight[:, :, tap]
            gemm_strided(
                g.o,
                g.c,
                g.s,
                1.0,
                &w[tap..],
                (g.c * g.k) as isize,
                g.k as isize,
                src,
                g.s as isize,
                1,
                1.0,
                dst,
                g.s as isize,
                1,
            );
        }
    }
    let mut shape = input.shape().to_vec();
    shape[1] = g.o;
    Ok(Tensor::from_parts(shape, out))
}

pub struct Conv1dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv1d_temporal_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    pad: usize,
) -> Result<Conv1dGrads> {
    let g = geometry(input, weight, pad)?;
    let mut out_shape = input.shape().to_vec();
    out_shape[1] = g.o;
    grad_out.expect_shape("conv1d_temporal_backward", &out_shape)?;
    let x = input.data();
    let w = weight.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; input.numel()];
    let mut dw = vec![0.0f32; weight.numel()];
    let mut db = vec![0.0f64; g.o];
    for (i, &v) in dy.iter().enumerate() {
        db[(i / g.s) % g.o] += v as f64;
    }
    for t in 0..g.t {
        let dyt = &dy[t * g.o * g.s..(t + 1) * g.o * g.s];
        for tap in 0..g.k {
            let src_t = t as isize + tap as isize - g.pad as isize;
            if src_t < 0 || src_t >= g.t as isize {
                continue;
            }
            let st = src_t as usize;
            // dx[src_t] += W_tap^T (C x O) * dy[t] (O x S)
            gemm_strided(
                g.c,
                g.o,
                g.s,
                1.0,
                &w[tap..],
                g.k as isize,
                (g.c * g.k) as isize,
                dyt,
                g.s as isize,
                1,
                1.0,
                &mut dx[st * g.c * g.s..(st + 1) * g.c * g.s],
                g.s as isize,
                1,
            );
            // dW_tap += dy[t] (O x S) * x[src_t]^T (S x C)
            let src = &x[st * g.c * g.s..(st + 1) * g.c * g.s];
            gemm_strided(
                g.o,
                g.s,
                g.c,
                1.0,
                dyt,
                g.s as isize,
                1,
                src,
                1,
                g.s as isize,
                1.0,
                &mut dw[tap..],
                (g.c * g.k) as isize,
                g.k as isize,
            );
        }
    }
    Ok(Conv1dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![g.o], db.into_iter().map(|v| v as f32).collect()),
    })
}

/// Delta-at-center kernel with an identity channel map: the convolution
/// returns its input unchanged.
pub fn identity_temporal_kernel(channels: usize, k: usize) -> Tensor {
    let mut w = Tensor::zeros(&[channels, channels, k]);
    let center = k / 2;
    for c in 0..channels {
        w.data_mut()[(c * channels + c) * k + center] = 1.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[5, 3, 2, 2], |i| (i as f32).cos());
        let w = identity_temporal_kernel(3, 3);
        let y = conv1d_temporal(&x, &w, &Tensor::zeros(&[3]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn moving_average_with_zero_padding() {
        let x = Tensor::new(&[3, 1], vec![0.0, 3.0, 6.0]).unwrap();
        let w = Tensor::full(&[1, 1, 3], 1.0 / 3.0);
        let y = conv1d_temporal(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        let want = [1.0, 3.0, 3.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", y.data());
        }
    }

    #[test]
    fn shape_is_preserved() {
        let x = Tensor::zeros(&[16, 4]);
        let w = Tensor::zeros(&[4, 4, 3]);
        let y = conv1d_temporal(&x, &w, &Tensor::zeros(&[4]), 1).unwrap();
        assert_eq!(y.shape(), &[16, 4]);
        assert!(conv1d_temporal(&x, &w, &Tensor::zeros(&[4]), 0).is_err());
    }
}
