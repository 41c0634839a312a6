//! Group normalization over `[N, C, ...]` with per-channel affine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f32 = 1e-5;

struct Geometry {
    n: usize,
    c: usize,
    s: usize,
    groups: usize,
}

fn geometry(input: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Geometry> {
    if input.rank() < 2 {
        return Err(Error::shape(
            "group_norm",
            format!("input must be [N, C, ...], got {:?}", input.shape()),
        ));
    }
    let (n, c) = (input.dim(0), input.dim(1));
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("channels {c} not divisible by groups {groups}"),
        ));
    }
    gamma.expect_shape("group_norm", &[c])?;
    beta.expect_shape("group_norm", &[c])?;
    Ok(Geometry { n, c, s: input.shape()[2..].iter().product(), groups })
}

/// Per-(sample, group) mean and inverse std.
fn group_stats(x: &[f32], g: &Geometry, eps: f32) -> Vec<(f32, f32)> {
    let block = (g.c / g.groups) * g.s;
    x.chunks(block)
        .map(|chunk| {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / block as f64;
            let var = chunk
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / block as f64;
            (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
        })
        .collect()
}

pub fn group_norm(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let g = geometry(input, groups, gamma, beta)?;
    let stats = group_stats(input.data(), &g, eps);
    let cpg = g.c / g.groups;
    let mut out = vec![0.0f32; input.numel()];
    for n in 0..g.n {
        for c in 0..g.c {
            let (mean, inv) = stats[n * g.groups + c / cpg];
            let (ga, be) = (gamma.data()[c], beta.data()[c]);
            let base = (n * g.c + c) * g.s;
            for i in base..base + g.s {
                out[i] = (input.data()[i] - mean) * inv * ga + be;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub struct GroupNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn group_norm_backward(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    grad_out: &Tensor,
) -> Result<GroupNormGrads> {
    let g = geometry(input, groups, gamma, beta)?;
    grad_out.expect_shape("group_norm_backward", input.shape())?;
    let stats = group_stats(input.data(), &g, eps);
    let cpg = g.c / g.groups;
    let block = cpg * g.s;
    let x = input.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; input.numel()];
    let mut dgamma = vec![0.0f64; g.c];
    let mut dbeta = vec![0.0f64; g.c];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let (mean, inv) = stats[n * g.groups + grp];
            let start = (n * g.c + grp * cpg) * g.s;
            // mean(dxhat) and mean(dxhat * xhat) over the group
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for ci in 0..cpg {
                let c = grp * cpg + ci;
                let ga = gamma.data()[c];
                for i in start + ci * g.s..start + (ci + 1) * g.s {
                    let xhat = (x[i] - mean) * inv;
                    let dxhat = dy[i] * ga;
                    sum_d += dxhat as f64;
                    sum_dx += (dxhat * xhat) as f64;
                    dgamma[c] += (dy[i] * xhat) as f64;
                    dbeta[c] += dy[i] as f64;
                }
            }
            let mean_d = (sum_d / block as f64) as f32;
            let mean_dx = (sum_dx / block as f64) as f32;
            for ci in 0..cpg {
                let ga = gamma.data()[grp * cpg + ci];
                for i in start + ci * g.s..start + (ci + 1) * g.s {
                    let xhat = (x[i] - mean) * inv;
                    dx[i] = inv * (dy[i] * ga - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    Ok(GroupNormGrads {
        input: Tensor::from_parts(input.shape().to_vec(), dx),
        gamma: Tensor::from_parts(vec![g.c], dgamma.into_iter().map(|v| v as f32).collect()),
        beta: Tensor::from_parts(vec![g.c], dbeta.into_iter().map(|v| v as f32).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[2, 4, 3, 3], 5.0);
        let y = group_norm(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i as f32).sin() * 3.0);
        let beta = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = group_norm(&x, 4, &Tensor::zeros(&[4]), &beta, DEFAULT_EPS).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[i / 5]);
        }
    }

    #[test]
    fn output_stats_are_standardized() {
        let x = Tensor::from_fn(&[2, 6, 7, 5], |i| 4.0 + 2.5 * ((i * 7919 % 101) as f32 / 50.0 - 1.0));
        let y = group_norm(&x, 3, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), DEFAULT_EPS).unwrap();
        let block = 2 * 35;
        for chunk in y.data().chunks(block) {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / block as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / block as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let x = Tensor::zeros(&[1, 6, 2]);
        assert!(group_norm(&x, 4, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), DEFAULT_EPS).is_err());
    }
}
