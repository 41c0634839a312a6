//! Backward warping: `out(p) = input(p + flow(p))`, bilinear, border clamp.
//!
//! `flow` channel 0 is the horizontal displacement, channel 1 vertical, both
//! in pixels of the input grid. Accepts `[C, h, w]` with `[2, h, w]`, or a
//! batched `[N, C, h, w]` with `[N, 2, h, w]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn geometry(input: &Tensor, flow: &Tensor) -> Result<Geometry> {
    let g = match input.shape() {
        [c, h, w] => Geometry { n: 1, c: *c, h: *h, w: *w },
        [n, c, h, w] => Geometry { n: *n, c: *c, h: *h, w: *w },
        s => return Err(Error::shape("warp_bilinear", format!("input rank 3 or 4, got {s:?}"))),
    };
    let want: Vec<usize> = if input.rank() == 3 {
        vec![2, g.h, g.w]
    } else {
        vec![g.n, 2, g.h, g.w]
    };
    if flow.shape() != want.as_slice() {
        return Err(Error::shape(
            "warp_bilinear",
            format!("flow must be {want:?} for input {:?}, got {:?}", input.shape(), flow.shape()),
        ));
    }
    Ok(g)
}

/// Clamped sample position along one axis: `(i0, i1, frac, inside)`.
/// `inside` is false when the position was clamped, where the sample does not
/// vary with the displacement.
#[inline]
fn tap(pos: f32, n: usize) -> (usize, usize, f32, bool) {
    let max = (n - 1) as f32;
    let inside = pos > 0.0 && pos < max;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f32, inside)
}

pub fn warp_bilinear(input: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let g = geometry(input, flow)?;
    let plane = g.h * g.w;
    let mut out = vec![0.0f32; input.numel()];
    for n in 0..g.n {
        let fl = &flow.data()[n * 2 * plane..(n + 1) * 2 * plane];
        for y in 0..g.h {
            for x in 0..g.w {
                let p = y * g.w + x;
                let (x0, x1, fx, _) = tap(x as f32 + fl[p], g.w);
                let (y0, y1, fy, _) = tap(y as f32 + fl[plane + p], g.h);
                for c in 0..g.c {
                    let src = &input.data()[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    let top = src[y0 * g.w + x0] * (1.0 - fx) + src[y0 * g.w + x1] * fx;
                    let bot = src[y1 * g.w + x0] * (1.0 - fx) + src[y1 * g.w + x1] * fx;
                    out[(n * g.c + c) * plane + p] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub struct WarpGrads {
    pub input: Tensor,
    pub flow: Tensor,
}

pub fn warp_bilinear_backward(input: &Tensor, flow: &Tensor, grad_out: &Tensor) -> Result<WarpGrads> {
    let g = geometry(input, flow)?;
    grad_out.expect_shape("warp_bilinear_backward", input.shape())?;
    let plane = g.h * g.w;
    let mut dx = vec![0.0f32; input.numel()];
    let mut dflow = vec![0.0f32; flow.numel()];
    for n in 0..g.n {
        let fl = &flow.data()[n * 2 * plane..(n + 1) * 2 * plane];
        for y in 0..g.h {
            for x in 0..g.w {
                let p = y * g.w + x;
                let (x0, x1, fx, in_x) = tap(x as f32 + fl[p], g.w);
                let (y0, y1, fy, in_y) = tap(y as f32 + fl[plane + p], g.h);
                let mut dfx = 0.0f32;
                let mut dfy = 0.0f32;
                for c in 0..g.c {
                    let base = (n * g.c + c) * plane;
                    let go = grad_out.data()[base + p];
                    let src = &input.data()[base..base + plane];
                    let d = &mut dx[base..base + plane];
                    d[y0 * g.w + x0] += go * (1.0 - fy) * (1.0 - fx);
                    d[y0 * g.w + x1] += go * (1.0 - fy) * fx;
                    d[y1 * g.w + x0] += go * fy * (1.0 - fx);
                    d[y1 * g.w + x1] += go * fy * fx;
                    let (v00, v01) = (src[y0 * g.w + x0], src[y0 * g.w + x1]);
                    let (v10, v11) = (src[y1 * g.w + x0], src[y1 * g.w + x1]);
                    dfx += go * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
                    dfy += go * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
                }
                if in_x {
                    dflow[n * 2 * plane + p] = dfx;
                }
                if in_y {
                    dflow[n * 2 * plane + plane + p] = dfy;
                }
            }
        }
    }
    Ok(WarpGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        flow: Tensor::from_parts(flow.shape().to_vec(), dflow),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_is_exact_identity() {
        let x = Tensor::from_fn(&[3, 5, 6], |i| (i as f32 * 1.3).sin());
        let y = warp_bilinear(&x, &Tensor::zeros(&[2, 5, 6])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn integer_shift_with_edge_clamp() {
        let x = Tensor::from_fn(&[1, 3, 5], |i| (i * i) as f32);
        let mut flow = Tensor::zeros(&[2, 3, 5]);
        flow.data_mut()[..15].fill(1.0);
        let y = warp_bilinear(&x, &flow).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                let src = (c + 1).min(4);
                assert_eq!(y.data()[r * 5 + c], x.data()[r * 5 + src]);
            }
        }
    }

    #[test]
    fn half_pixel_shift_on_ramp() {
        let x = Tensor::from_fn(&[1, 1, 6], |i| i as f32);
        let mut flow = Tensor::zeros(&[2, 1, 6]);
        flow.data_mut()[..6].fill(0.5);
        let y = warp_bilinear(&x, &flow).unwrap();
        for c in 0..5 {
            assert!((y.data()[c] - (c as f32 + 0.5)).abs() < 1e-6);
        }
        assert_eq!(y.data()[5], 5.0);
    }

    #[test]
    fn mismatched_flow_rejected() {
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(warp_bilinear(&x, &Tensor::zeros(&[2, 4, 5])).is_err());
    }
}
