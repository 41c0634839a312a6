//! Reverse-mode tape. Every op evaluates eagerly and records what its
//! vector-Jacobian product needs; [`Tape::backward`] replays the record in
//! reverse.

use crate::error::{Error, Result};
use crate::numerics::{
    attention as attn, conv, norm, resize, temporal,
    warp::{self, warp_bilinear_backward},
};
use crate::tensor::{inverse_permutation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    TemporalConv { x: Var, w: Var, b: Var, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, probs: Vec<f32> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f32 },
    Silu(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    AddChannelBias { x: Var, bias: Var },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    UpNearest(Var),
    UpBilinear(Var),
    BoxDown { x: Var, factor: usize },
    Warp { x: Var, flow: Var },
    Mse(Var, Var),
    L1(Var, Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by [`Var`].
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let y = temporal::conv1d_temporal(self.value(x), self.value(w), self.value(b), pad)?;
        Ok(self.push(y, Op::TemporalConv { x, w, b, pad }, &[x, w, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = crate::numerics::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (y, probs) = attn::attention_with_probs(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(y, Op::Attention { q, k, v, probs }, &[q, k, v]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let eps = norm::DEFAULT_EPS;
        let y = norm::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::GroupNorm { x, gamma, beta, groups, eps }, &[x, gamma, beta]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        self.push(y, Op::Silu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f32::exp);
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        let y = self.value(a).map(|v| v + c);
        self.push(y, Op::AddConst(a), &[a])
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let y = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(y, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `x [N, C, ...] + bias [B, C]` with `B` equal to 1 or `N`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        if xs.rank() < 2 || bs.rank() != 2 || bs.dim(1) != xs.dim(1) || (bs.dim(0) != 1 && bs.dim(0) != xs.dim(0)) {
            return Err(Error::shape(
                "add_channel_bias",
                format!("x {:?} with bias {:?}", xs.shape(), bs.shape()),
            ));
        }
        let (n, c) = (xs.dim(0), xs.dim(1));
        let s = xs.numel() / (n * c);
        let per_sample = bs.dim(0) != 1;
        let mut y = xs.clone();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            let ni = i / (c * s);
            let ci = (i / s) % c;
            *v += bs.data()[if per_sample { ni * c + ci } else { ci }];
        }
        Ok(self.push(y, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = Tensor::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(xs.to_vec()), xs))
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).narrow_channels(start, len)?;
        Ok(self.push(y, Op::Narrow { x, start }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(x).permute(perm)?;
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let y = resize::upsample_nearest2x(self.value(x))?;
        Ok(self.push(y, Op::UpNearest(x), &[x]))
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let y = resize::bilinear_resize2d(self.value(x), 2)?;
        Ok(self.push(y, Op::UpBilinear(x), &[x]))
    }

    pub fn box_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = resize::box_downsample(self.value(x), factor)?;
        Ok(self.push(y, Op::BoxDown { x, factor }, &[x]))
    }

    pub fn warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let y = warp::warp_bilinear(self.value(x), self.value(flow))?;
        Ok(self.push(y, Op::Warp { x, flow }, &[x, flow]))
    }

    /// Mean squared error, a scalar `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let v = d.data().iter().map(|&e| (e as f64) * (e as f64)).sum::<f64>() / d.numel() as f64;
        Ok(self.push(Tensor::scalar(v as f32), Op::Mse(a, b), &[a, b]))
    }

    /// Mean absolute error, a scalar `[1]`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let v = d.data().iter().map(|&e| e.abs() as f64).sum::<f64>() / d.numel() as f64;
        Ok(self.push(Tensor::scalar(v as f32), Op::L1(a, b), &[a, b]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push(Tensor::scalar(v as f32), Op::Mean(x), &[x])
    }

    /// Gradients of `root` with respect to every node that needs one. `root`
    /// is seeded with ones of its own shape.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        self.backward_with(root, Tensor::ones(self.value(root).shape()))
    }

    /// Vector-Jacobian product: gradients of `<seed, root>`.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Grads> {
        seed.expect_shape("backward", self.value(root).shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // keep leaf gradients for the caller
                    acc(Var(i), g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let r = conv::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?;
                    acc(*x, r.input);
                    acc(*w, r.weight);
                    acc(*b, r.bias);
                }
                Op::TemporalConv { x, w, b, pad } => {
                    let r = temporal::conv1d_temporal_backward(self.value(*x), self.value(*w), &g, *pad)?;
                    acc(*x, r.input);
                    acc(*w, r.weight);
                    acc(*b, r.bias);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), &g);
                    acc(*x, dx);
                    acc(*w, dw);
                    acc(*b, db);
                }
                Op::Attention { q, k, v, probs } => {
                    let r = attn::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, &g)?;
                    acc(*q, r.q);
                    acc(*k, r.k);
                    acc(*v, r.v);
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let r = norm::group_norm_backward(
                        self.value(*x),
                        *groups,
                        self.value(*gamma),
                        self.value(*beta),
                        *eps,
                        &g,
                    )?;
                    acc(*x, r.input);
                    acc(*gamma, r.gamma);
                    acc(*beta, r.beta);
                }
                Op::Silu(x) => {
                    let d = self.value(*x).zip_map(&g, |v, gv| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gv * (s + v * s * (1.0 - s))
                    })?;
                    acc(*x, d);
                }
                Op::Exp(x) => acc(*x, node.value.zip_map(&g, |y, gv| y * gv)?),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                    acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddConst(a) => acc(*a, g),
                Op::Clamp { x, lo, hi } => {
                    let d = self.value(*x).zip_map(&g, |v, gv| if v >= *lo && v <= *hi { gv } else { 0.0 })?;
                    acc(*x, d);
                }
                Op::AddChannelBias { x, bias } => {
                    let bs = self.value(*bias).shape().to_vec();
                    let (n, c) = (g.dim(0), g.dim(1));
                    let s = g.numel() / (n * c);
                    let per_sample = bs[0] != 1;
                    let mut db = vec![0.0f64; bs[0] * c];
                    for (idx, &v) in g.data().iter().enumerate() {
                        let ni = idx / (c * s);
                        let ci = (idx / s) % c;
                        db[if per_sample { ni * c + ci } else { ci }] += v as f64;
                    }
                    acc(*bias, Tensor::from_parts(bs, db.into_iter().map(|v| v as f32).collect()));
                    acc(*x, g);
                }
                Op::Concat(xs) => {
                    let mut start = 0;
                    for &x in xs {
                        let len = self.value(x).dim(1);
                        acc(x, g.narrow_channels(start, len)?);
                        start += len;
                    }
                }
                Op::Narrow { x, start } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let len = g.dim(1);
                    let mut d = vec![0.0f32; self.value(*x).numel()];
                    for ni in 0..n {
                        let dst = (ni * c + start) * inner;
                        let src = ni * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(*x, Tensor::from_parts(xs, d));
                }
                Op::Permute { x, perm } => acc(*x, g.permute(&inverse_permutation(perm))?),
                Op::Reshape(x) => acc(*x, g.into_reshaped(self.value(*x).shape())?),
                Op::UpNearest(x) => acc(*x, resize::upsample_nearest2x_backward(self.value(*x).shape(), &g)?),
                Op::UpBilinear(x) => acc(*x, resize::bilinear_resize2d_backward(self.value(*x).shape(), &g)?),
                Op::BoxDown { x, factor } => {
                    acc(*x, resize::box_downsample_backward(self.value(*x).shape(), *factor, &g)?)
                }
                Op::Warp { x, flow } => {
                    let r = warp_bilinear_backward(self.value(*x), self.value(*flow), &g)?;
                    acc(*x, r.input);
                    acc(*flow, r.flow);
                }
                Op::Mse(a, b) => {
                    let scale = 2.0 * g.data()[0] / self.value(*a).numel() as f32;
                    let d = self.value(*a).zip_map(self.value(*b), |p, q| (p - q) * scale)?;
                    acc(*b, d.scale(-1.0));
                    acc(*a, d);
                }
                Op::L1(a, b) => {
                    let scale = g.data()[0] / self.value(*a).numel() as f32;
                    let d = self.value(*a).zip_map(self.value(*b), |p, q| {
                        if p > q {
                            scale
                        } else if p < q {
                            -scale
                        } else {
                            0.0
                        }
                    })?;
                    acc(*b, d.scale(-1.0));
                    acc(*a, d);
                }
                Op::Mean(x) => {
                    let xs = self.value(*x);
                    acc(*x, Tensor::full(xs.shape(), g.data()[0] / xs.numel() as f32));
                }
            }
        }
        Ok(Grads(grads))
    }
}

fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    use crate::numerics::gemm::gemm;
    let (dout, din) = (w.dim(0), w.dim(1));
    let rows = x.numel() / din;
    let mut dx = vec![0.0f32; x.numel()];
    gemm(rows, dout, din, 1.0, g.data(), false, w.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0f32; w.numel()];
    gemm(dout, rows, din, 1.0, g.data(), true, x.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0f64; dout];
    for row in g.data().chunks(dout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![dout], db.into_iter().map(|v| v as f32).collect()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_through_scale_and_mean() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.scale(x, 3.0);
        let z = t.mul(y, x).unwrap(); // 3x^2
        let m = t.mean(z);
        let g = t.backward(m).unwrap();
        // d/dx mean(3x^2) = 2x
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::ones(&[2]));
        let c = t.constant(Tensor::full(&[2], 5.0));
        let l = t.mse(a, c).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(a).unwrap().data(), &[-4.0, -4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[1, 2, 1], vec![1.0, -1.0]).unwrap());
        let c = t.concat_channels(&[x, x]).unwrap();
        let m = t.mean(c);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);
    }
}
