//! 2D cross-correlation over `[N, C, H, W]` via im2col + GEMM.

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        }
        if weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [O,C,kh,kw], got {weight:?}"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has C={c}, weight expects C={wc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("height/width: {h}x{w} with pad {pad} smaller than kernel {kh}x{kw}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Conv2dGeometry { n, c, h, w, o, kh, kw, stride, pad, oh, ow })
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.col_cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.col_cols();
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard cross-correlation: `H' = (H + 2*pad - kh) / stride + 1`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = Conv2dGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.shape() != [g.o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{}], got {:?}", g.o, bias.shape()),
        ));
    }
    let rows = g.col_rows();
    let p = g.col_cols();
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * p;
    let mut out = vec![0.0f32; g.n * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * p] };
    let x = input.data();
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[o]);
        }
        let b: &[f32] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        gemm(g.o, rows, p, 1.0, weight.data(), false, b, false, 1.0, dst);
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.oh, g.ow], out))
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads> {
    let g = Conv2dGeometry::new(input.shape(), weight.shape(), stride, pad)?;
    grad_out.expect_shape("conv2d_backward", &[g.n, g.o, g.oh, g.ow])?;
    let rows = g.col_rows();
    let p = g.col_cols();
    let in_img = g.c * g.h * g.w;
    let out_img = g.o * p;
    let mut dx = vec![0.0f32; g.n * in_img];
    let mut dw = vec![0.0f32; weight.numel()];
    let mut db = vec![0.0f64; g.o];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * p] };
    let mut dcols = vec![0.0f32; rows * p];
    let x = input.data();
    let dy = grad_out.data();
    for n in 0..g.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dimg = &dy[n * out_img..(n + 1) * out_img];
        for (o, row) in dimg.chunks(p).enumerate() {
            db[o] += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        let b: &[f32] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        // dW += dY (O x P) * cols^T (P x rows)
        gemm(g.o, p, rows, 1.0, dimg, false, b, true, 1.0, &mut dw);
        let dxi = &mut dx[n * in_img..(n + 1) * in_img];
        if g.is_pointwise() {
            gemm(rows, g.o, p, 1.0, weight.data(), true, dimg, false, 0.0, dxi);
        } else {
            gemm(rows, g.o, p, 1.0, weight.data(), true, dimg, false, 0.0, &mut dcols);
            g.col2im_add(&dcols, dxi);
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![g.o], db.into_iter().map(|v| v as f32).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity() {
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn same_padding_shape() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[5]), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8, 8]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[5]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let w = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_err());
    }
}
