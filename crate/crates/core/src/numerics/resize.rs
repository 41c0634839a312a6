//! Spatial resampling over the two trailing axes of a tensor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn planes(input: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if input.rank() < 2 {
        return Err(Error::shape(op, format!("need [..., H, W], got {:?}", input.shape())));
    }
    let r = input.rank();
    let (h, w) = (input.dim(r - 2), input.dim(r - 1));
    Ok((input.numel() / (h * w), h, w))
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

/// Half-pixel (align-corners-false) source taps for doubling an axis of length `n`.
fn taps_2x(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f32);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers and edge clamping.
pub fn bilinear_resize2d(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor != 2 {
        return Err(Error::invalid("bilinear_resize2d", format!("factor must be 2, got {factor}")));
    }
    let (p, h, w) = planes(input, "bilinear_resize2d")?;
    let (ty, tx) = (taps_2x(h), taps_2x(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; p * oh * ow];
    for pi in 0..p {
        let src = &input.data()[pi * h * w..(pi + 1) * h * w];
        let dst = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(Tensor::from_parts(with_hw(input.shape(), oh, ow), out))
}

/// Resize the trailing two axes to `(h, w)` when both ratios are the same
/// power of two: repeated bilinear doubling going up, box averaging (the
/// bilinear half-size sample with half-pixel centers) going down.
pub fn resize_pow2(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, ih, iw) = planes(input, "resize_pow2")?;
    let bad = || Error::shape("resize_pow2", format!("cannot resize {ih}x{iw} to {h}x{w} by a power of two"));
    if h >= ih {
        let k = h / ih;
        if h % ih != 0 || !k.is_power_of_two() || w != iw * k {
            return Err(bad());
        }
        let mut out = input.clone();
        for _ in 0..k.trailing_zeros() {
            out = bilinear_resize2d(&out, 2)?;
        }
        Ok(out)
    } else {
        let k = ih / h;
        if ih % h != 0 || !k.is_power_of_two() || iw != w * k {
            return Err(bad());
        }
        box_downsample(input, k)
    }
}

/// Adjoint of [`bilinear_resize2d`] with factor 2.
pub fn bilinear_resize2d_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    grad_out.expect_shape("bilinear_resize2d_backward", &with_hw(input_shape, 2 * h, 2 * w))?;
    let p = grad_out.numel() / (4 * h * w);
    let (ty, tx) = (taps_2x(h), taps_2x(w));
    let ow = 2 * w;
    let mut dx = vec![0.0f32; p * h * w];
    for pi in 0..p {
        let g = &grad_out.data()[pi * 4 * h * w..(pi + 1) * 4 * h * w];
        let d = &mut dx[pi * h * w..(pi + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    let (p, h, w) = planes(input, "upsample_nearest2x")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; p * oh * ow];
    for pi in 0..p {
        let src = &input.data()[pi * h * w..(pi + 1) * h * w];
        let dst = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Ok(Tensor::from_parts(with_hw(input.shape(), oh, ow), out))
}

pub fn upsample_nearest2x_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    grad_out.expect_shape("upsample_nearest2x_backward", &with_hw(input_shape, 2 * h, 2 * w))?;
    let p = grad_out.numel() / (4 * h * w);
    let ow = 2 * w;
    let mut dx = vec![0.0f32; p * h * w];
    for pi in 0..p {
        let g = &grad_out.data()[pi * 4 * h * w..(pi + 1) * 4 * h * w];
        let d = &mut dx[pi * h * w..(pi + 1) * h * w];
        for oy in 0..2 * h {
            for ox in 0..ow {
                d[(oy / 2) * w + ox / 2] += g[oy * ow + ox];
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn box_downsample(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (p, h, w) = planes(input, "box_downsample")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "box_downsample",
            format!("{h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; p * oh * ow];
    for pi in 0..p {
        let src = &input.data()[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += src[y * w + x] as f64;
                    }
                }
                out[pi * oh * ow + oy * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    Ok(Tensor::from_parts(with_hw(input.shape(), oh, ow), out))
}

pub fn box_downsample_backward(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (oh, ow) = (h / factor, w / factor);
    grad_out.expect_shape("box_downsample_backward", &with_hw(input_shape, oh, ow))?;
    let p = grad_out.numel() / (oh * ow);
    let inv = 1.0 / (factor * factor) as f32;
    let mut dx = vec![0.0f32; p * h * w];
    for pi in 0..p {
        for y in 0..h {
            for x in 0..w {
                dx[pi * h * w + y * w + x] =
                    grad_out.data()[pi * oh * ow + (y / factor) * ow + x / factor] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[4, 3, 5], 3.0);
        let y = bilinear_resize2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[4, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn half_pixel_row() {
        let x = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        for row in y.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn ramp_interior_is_linear() {
        let x = Tensor::from_fn(&[1, 1, 8], |i| i as f32);
        let y = bilinear_resize2d(&x, 2).unwrap();
        // interior output d samples source (d + 0.5) / 2 - 0.5
        for d in 1..15 {
            let want = (d as f32 + 0.5) / 2.0 - 0.5;
            assert!((y.data()[16 + d] - want).abs() < 1e-6);
        }
        assert!(bilinear_resize2d(&x, 3).is_err());
    }

    #[test]
    fn shape_doubles() {
        let y = bilinear_resize2d(&Tensor::zeros(&[4, 16, 16]), 2).unwrap();
        assert_eq!(y.shape(), &[4, 32, 32]);
    }

    #[test]
    fn box_downsample_averages() {
        let x = Tensor::from_fn(&[1, 2, 4], |i| i as f32);
        let y = box_downsample(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5]);
        assert!(box_downsample(&x, 3).is_err());
    }
}
