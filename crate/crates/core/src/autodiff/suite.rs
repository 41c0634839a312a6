//! Finite-difference checks for every differentiable tape operation, five
//! or more shapes each.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, F32_STEP};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::numerics::{self, norm::DEFAULT_EPS, resize};
use crate::tensor::Tensor;

type Plain = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
type Taped = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    inputs: Vec<Tensor>,
    plain: Plain,
    taped: Taped,
    step: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub shapes: usize,
    /// Largest relative error over all shapes and inputs.
    pub max_error: f64,
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand(shape, rng).map(|v| if v >= 0.0 { 0.2 + v } else { v - 0.2 })
}

const SHAPES: [&[usize]; 5] = [&[1, 1, 2, 2], &[2, 3, 3, 4], &[1, 2, 4, 4], &[3, 1, 1, 5], &[2, 2, 6, 2]];

fn case(op: &'static str, inputs: Vec<Tensor>, plain: Plain, taped: Taped) -> Case {
    Case { op, inputs, plain, taped, step: F32_STEP }
}

/// Flow field kept away from grid lines and the border, where bilinear
/// sampling has kinks.
fn smooth_flow(n: usize, h: usize, w: usize) -> Tensor {
    let mut flow = Tensor::from_fn(&[n, 2, h, w], |i| {
        let base = [0.3f32, -0.35, 0.4, -0.25][i % 4];
        base + 0.1 * ((i * 37 % 11) as f32 / 11.0)
    });
    for ni in 0..n {
        for axis in 0..2 {
            let extent = if axis == 0 { w } else { h };
            for y in 0..h {
                for x in 0..w {
                    let idx = ((ni * 2 + axis) * h + y) * w + x;
                    let pos = if axis == 0 { x } else { y };
                    let v = flow.data()[idx];
                    if pos == 0 {
                        flow.data_mut()[idx] = v.abs();
                    } else if pos == extent - 1 {
                        flow.data_mut()[idx] = -v.abs();
                    }
                }
            }
        }
    }
    flow
}

fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();

    let convs: [([usize; 4], [usize; 4], usize, usize); 5] = [
        ([1, 1, 4, 4], [1, 1, 3, 3], 1, 1),
        ([2, 3, 5, 4], [2, 3, 3, 3], 1, 1),
        ([1, 2, 6, 6], [3, 2, 3, 3], 2, 1),
        ([2, 2, 3, 5], [4, 2, 1, 1], 1, 0),
        ([1, 3, 5, 5], [2, 3, 5, 3], 1, 2),
    ];
    for (xs, ws, stride, pad) in convs {
        out.push(case(
            "conv2d",
            vec![rand(&xs, rng), rand(&ws, rng), rand(&[ws[0]], rng)],
            Box::new(move |t| numerics::conv2d(&t[0], &t[1], &t[2], stride, pad)),
            Box::new(move |tp, v| tp.conv2d(v[0], v[1], v[2], stride, pad)),
        ));
    }

    let tconvs: [(&[usize], [usize; 3]); 5] = [
        (&[4, 2], [2, 2, 3]),
        (&[5, 3, 2], [2, 3, 3]),
        (&[3, 2, 2, 2], [4, 2, 3]),
        (&[1, 2, 3], [2, 2, 3]),
        (&[6, 1, 4], [1, 1, 5]),
    ];
    for (xs, ws) in tconvs {
        let pad = (ws[2] - 1) / 2;
        out.push(case(
            "temporal_conv",
            vec![rand(xs, rng), rand(&ws, rng), rand(&[ws[0]], rng)],
            Box::new(move |t| numerics::conv1d_temporal(&t[0], &t[1], &t[2], pad)),
            Box::new(move |tp, v| tp.temporal_conv(v[0], v[1], v[2], pad)),
        ));
    }

    for (rows, din, dout) in [(1, 1, 1), (3, 4, 2), (5, 2, 6), (2, 8, 3), (7, 3, 3)] {
        out.push(case(
            "linear",
            vec![rand(&[rows, din], rng), rand(&[dout, din], rng), rand(&[dout], rng)],
            Box::new(|t| numerics::linear(&t[0], &t[1], &t[2])),
            Box::new(|tp, v| tp.linear(v[0], v[1], v[2])),
        ));
    }

    for (b, lq, lk, d, dv) in [(1, 3, 4, 2, 3), (2, 2, 2, 4, 2), (1, 5, 1, 3, 2), (3, 4, 3, 2, 1), (2, 6, 5, 4, 4)] {
        out.push(case(
            "attention",
            vec![rand(&[b, lq, d], rng), rand(&[b, lk, d], rng), rand(&[b, lk, dv], rng)],
            Box::new(|t| numerics::attention(&t[0], &t[1], &t[2])),
            Box::new(|tp, v| tp.attention(v[0], v[1], v[2])),
        ));
    }

    let norms: [(&[usize], usize); 5] =
        [(&[1, 2, 4], 1), (&[2, 4, 3, 3], 2), (&[1, 6, 5], 3), (&[3, 4, 2, 2], 4), (&[2, 8, 4, 2], 2)];
    for (xs, groups) in norms {
        let c = xs[1];
        out.push(case(
            "group_norm",
            // spread the values so group variances sit well above eps
            vec![rand(xs, rng).scale(2.0), rand(&[c], rng), rand(&[c], rng)],
            Box::new(move |t| numerics::group_norm(&t[0], groups, &t[1], &t[2], DEFAULT_EPS)),
            Box::new(move |tp, v| tp.group_norm(v[0], v[1], v[2], groups)),
        ));
    }

    for s in SHAPES {
        out.push(case(
            "silu",
            vec![rand(s, rng).scale(2.0)],
            Box::new(|t| Ok(t[0].map(|v| v / (1.0 + (-v).exp())))),
            Box::new(|tp, v| Ok(tp.silu(v[0]))),
        ));
        out.push(case(
            "exp",
            vec![rand(s, rng)],
            Box::new(|t| Ok(t[0].map(f32::exp))),
            Box::new(|tp, v| Ok(tp.exp(v[0]))),
        ));
        out.push(case(
            "add",
            vec![rand(s, rng), rand(s, rng)],
            Box::new(|t| t[0].add(&t[1])),
            Box::new(|tp, v| tp.add(v[0], v[1])),
        ));
        out.push(case(
            "sub",
            vec![rand(s, rng), rand(s, rng)],
            Box::new(|t| t[0].sub(&t[1])),
            Box::new(|tp, v| tp.sub(v[0], v[1])),
        ));
        out.push(case(
            "mul",
            vec![rand(s, rng), rand(s, rng)],
            Box::new(|t| t[0].zip_map(&t[1], |a, b| a * b)),
            Box::new(|tp, v| tp.mul(v[0], v[1])),
        ));
        out.push(case(
            "scale",
            vec![rand(s, rng)],
            Box::new(|t| Ok(t[0].scale(-1.7))),
            Box::new(|tp, v| Ok(tp.scale(v[0], -1.7))),
        ));
        out.push(case(
            "add_const",
            vec![rand(s, rng)],
            Box::new(|t| Ok(t[0].map(|v| v + 0.3))),
            Box::new(|tp, v| Ok(tp.add_const(v[0], 0.3))),
        ));
        out.push(case(
            "clamp",
            // values in (-1.2, -0.2] or [0.2, 1.2): both sides of the
            // bounds +-0.5 occur, but none within the step of them
            vec![off_zero(s, rng).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { v })],
            Box::new(|t| Ok(t[0].map(|v| v.clamp(-0.5, 0.5)))),
            Box::new(|tp, v| Ok(tp.clamp(v[0], -0.5, 0.5))),
        ));
        let bias_rows = if s[0] > 1 { s[0] } else { 1 };
        out.push(case(
            "add_channel_bias",
            vec![rand(s, rng), rand(&[bias_rows, s[1]], rng)],
            Box::new(|t| {
                let (n, c) = (t[0].dim(0), t[0].dim(1));
                let inner = t[0].numel() / (n * c);
                let rows = t[1].dim(0);
                Ok(Tensor::from_fn(t[0].shape(), |i| {
                    let (ni, ci) = (i / (c * inner), (i / inner) % c);
                    t[0].data()[i] + t[1].data()[if rows == 1 { ci } else { ni * c + ci }]
                }))
            }),
            Box::new(|tp, v| tp.add_channel_bias(v[0], v[1])),
        ));
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        out.push(case(
            "concat_narrow",
            vec![rand(s, rng), rand(&[n, 2, h, w], rng)],
            Box::new(move |t| Tensor::concat_channels(&[&t[0], &t[1]])?.narrow_channels(c - 1, 2)),
            Box::new(move |tp, v| {
                let cat = tp.concat_channels(&[v[0], v[1]])?;
                tp.narrow_channels(cat, c - 1, 2)
            }),
        ));
        out.push(case(
            "permute_reshape",
            vec![rand(s, rng)],
            Box::new(move |t| t[0].permute(&[0, 2, 3, 1])?.reshape(&[n, h * w * c])),
            Box::new(move |tp, v| {
                let p = tp.permute(v[0], &[0, 2, 3, 1])?;
                tp.reshape(p, &[n, h * w * c])
            }),
        ));
        out.push(case(
            "upsample_bilinear2x",
            vec![rand(s, rng)],
            Box::new(|t| resize::bilinear_resize2d(&t[0], 2)),
            Box::new(|tp, v| tp.upsample_bilinear2x(v[0])),
        ));
        out.push(case(
            "upsample_nearest2x",
            vec![rand(s, rng)],
            Box::new(|t| resize::upsample_nearest2x(&t[0])),
            Box::new(|tp, v| tp.upsample_nearest2x(v[0])),
        ));
        out.push(case(
            "box_downsample",
            vec![rand(&[n, c, 2 * h, 2 * w], rng)],
            Box::new(|t| resize::box_downsample(&t[0], 2)),
            Box::new(|tp, v| tp.box_downsample(v[0], 2)),
        ));
        out.push(case(
            "mse",
            vec![rand(s, rng), rand(s, rng)],
            Box::new(|t| {
                let d = t[0].sub(&t[1])?;
                Ok(Tensor::scalar((d.data().iter().map(|&e| (e as f64).powi(2)).sum::<f64>() / d.numel() as f64) as f32))
            }),
            Box::new(|tp, v| tp.mse(v[0], v[1])),
        ));
        let a = rand(s, rng);
        let b = a.add(&off_zero(s, rng))?;
        out.push(case(
            "l1",
            vec![a, b],
            Box::new(|t| {
                let d = t[0].sub(&t[1])?;
                Ok(Tensor::scalar((d.data().iter().map(|&e| e.abs() as f64).sum::<f64>() / d.numel() as f64) as f32))
            }),
            Box::new(|tp, v| tp.l1(v[0], v[1])),
        ));
        out.push(case(
            "mean",
            vec![rand(s, rng)],
            Box::new(|t| Ok(Tensor::scalar(t[0].mean() as f32))),
            Box::new(|tp, v| Ok(tp.mean(v[0]))),
        ));
    }

    for (n, c, h, w) in [(1, 1, 4, 4), (2, 2, 5, 4), (1, 3, 6, 6), (2, 1, 3, 7), (1, 2, 8, 5)] {
        out.push(Case {
            op: "warp",
            inputs: vec![rand(&[n, c, h, w], rng), smooth_flow(n, h, w)],
            plain: Box::new(|t| numerics::warp_bilinear(&t[0], &t[1])),
            taped: Box::new(|tp, v| tp.warp(v[0], v[1])),
            step: 1e-3,
        });
    }
    Ok(out)
}

/// Run every case and summarize per operation, in first-seen order.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<OpReport> = Vec::new();
    for (i, c) in cases(&mut rng)?.into_iter().enumerate() {
        let errs = check(&c.plain, &c.taped, &c.inputs, c.step, seed.wrapping_add(i as u64))?;
        let worst = errs.iter().copied().fold(0.0, f64::max);
        match reports.iter_mut().find(|r| r.op == c.op) {
            Some(r) => {
                r.shapes += 1;
                r.max_error = r.max_error.max(worst);
            }
            None => reports.push(OpReport { op: c.op, shapes: 1, max_error: worst }),
        }
    }
    Ok(reports)
}
