//! Numeric kernels. Forward functions are pure; `*_backward` functions
//! return vector-Jacobian products used by the autodiff tape.

pub mod attention;
pub mod conv;
pub mod filter;
pub(crate) mod gemm;
pub mod norm;
pub mod resize;
pub mod temporal;
pub mod warp;

pub use attention::attention;
pub use conv::conv2d;
pub use filter::lowpass_gaussian;
pub use norm::group_norm;
pub use resize::bilinear_resize2d;
pub use temporal::conv1d_temporal;
pub use warp::warp_bilinear;

/// Matrix product `[N, Din] x W^T + b` for `W: [Dout, Din]`.
pub fn linear(
    input: &crate::Tensor,
    weight: &crate::Tensor,
    bias: &crate::Tensor,
) -> crate::Result<crate::Tensor> {
    use crate::error::Error;
    let din = *input.shape().last().unwrap();
    if weight.rank() != 2 || weight.dim(1) != din {
        return Err(Error::shape(
            "linear",
            format!("input feature dim {din} vs weight {:?}", weight.shape()),
        ));
    }
    let dout = weight.dim(0);
    bias.expect_shape("linear", &[dout])?;
    let rows = input.numel() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm::gemm(rows, din, dout, 1.0, input.data(), false, weight.data(), true, 1.0, &mut out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    crate::Tensor::new(&shape, out)
}
