//! Separable Gaussian low-pass over the two trailing axes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized 1D Gaussian taps with radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("lowpass_gaussian", format!("sigma must be > 0, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| (t / total) as f32).collect())
}

fn blur_axis(src: &[f32], dst: &mut [f32], h: usize, w: usize, taps: &[f32], horizontal: bool) {
    let r = (taps.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, &t) in taps.iter().enumerate() {
                let off = k as isize - r;
                let (sy, sx) = if horizontal {
                    (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                } else {
                    ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                };
                acc += (t * src[sy * w + sx]) as f64;
            }
            dst[y * w + x] = acc as f32;
        }
    }
}

/// Edge-clamped separable Gaussian blur of every `[H, W]` plane.
pub fn lowpass_gaussian(input: &Tensor, sigma: f32) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma)?;
    if input.rank() < 2 {
        return Err(Error::shape("lowpass_gaussian", format!("need [..., H, W], got {:?}", input.shape())));
    }
    let r = input.rank();
    let (h, w) = (input.dim(r - 2), input.dim(r - 1));
    let mut out = vec![0.0f32; input.numel()];
    let mut tmp = vec![0.0f32; h * w];
    for (src, dst) in input.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        blur_axis(src, &mut tmp, h, w, &taps, true);
        blur_axis(&tmp, dst, h, w, &taps, false);
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 1.0, 1.5, 2.7] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            let s: f32 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn constant_passes_unchanged() {
        let x = Tensor::full(&[2, 7, 9], -0.75);
        let y = lowpass_gaussian(&x, 1.5).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn interior_impulse_mass_is_preserved() {
        let mut x = Tensor::zeros(&[1, 15, 15]);
        x.data_mut()[7 * 15 + 7] = 1.0;
        let y = lowpass_gaussian(&x, 1.0).unwrap();
        assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ramp_interior_mean_is_preserved() {
        let x = Tensor::from_fn(&[1, 20, 20], |i| 0.1 * (i % 20) as f32 - 0.03 * (i / 20) as f32);
        let y = lowpass_gaussian(&x, 1.5).unwrap();
        let r = 5;
        let (mut a, mut b, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for yy in r..20 - r {
            for xx in r..20 - r {
                a += x.data()[yy * 20 + xx] as f64;
                b += y.data()[yy * 20 + xx] as f64;
                n += 1.0;
            }
        }
        assert!(((a - b) / n).abs() < 1e-5);
    }

    #[test]
    fn checkerboard_is_attenuated() {
        let x = Tensor::from_fn(&[1, 16, 16], |i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { -1.0 });
        let y = lowpass_gaussian(&x, 2.0).unwrap();
        // edge clamping duplicates border samples, so measure away from the
        // border (radius 6)
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for r in 6..10 {
            for c in 6..10 {
                lo = lo.min(y.data()[r * 16 + c]);
                hi = hi.max(y.data()[r * 16 + c]);
            }
        }
        assert!((hi - lo) * 10.0 <= 2.0, "range {}", hi - lo);
    }
}
