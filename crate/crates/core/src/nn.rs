//! Parameterized layers shared by the codec, the denoisers and the flow net.
//! Each layer owns [`ParamId`]s into a [`ParamStore`] and runs on a [`Graph`].

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::numerics::temporal::identity_temporal_kernel;
use crate::tensor::Tensor;

fn fan_in_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f32).sqrt() * 3f32.sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Largest group count <= 8 dividing `channels`.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), fan_in_init(&[cout, cin, k, k], cin * k * k, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { weight, bias, stride, pad: k / 2 }
    }

    /// Zero weights and bias: the layer outputs zeros until trained.
    pub fn new_zero(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { weight, bias, stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Temporal convolution initialized to the identity map.
#[derive(Clone, Debug)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl TemporalConv {
    pub fn new_identity(ps: &mut ParamStore, name: &str, channels: usize, k: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), identity_temporal_kernel(channels, k));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[channels]));
        TemporalConv { weight, bias, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.temporal_conv(x, w, b, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = ps.add(format!("{name}.weight"), fan_in_init(&[dout, din], din, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { weight, bias }
    }

    pub fn new_zero(ps: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros(&[dout, din]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups: default_groups(channels) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.tape.group_norm(x, ga, be, self.groups)
    }
}

/// Query/key/value/output projections of one attention head.
#[derive(Clone, Debug)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionProj {
    /// `zero_out` zero-initializes the output projection so the residual
    /// branch starts out contributing nothing.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        context_dim: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Self {
        let q = Linear::new(ps, &format!("{name}.q"), channels, channels, rng);
        let k = Linear::new(ps, &format!("{name}.k"), context_dim, channels, rng);
        let v = Linear::new(ps, &format!("{name}.v"), context_dim, channels, rng);
        let out = if zero_out {
            Linear::new_zero(ps, &format!("{name}.out"), channels, channels)
        } else {
            Linear::new(ps, &format!("{name}.out"), channels, channels, rng)
        };
        AttentionProj { q, k, v, out }
    }

    /// `tokens [B, L, C]` attending to `context [B', Lc, Dc]`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, tokens)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.tape.attention(q, k, v)?;
        self.out.forward(g, a)
    }
}

/// `[N, C, H, W]` → `[N, H*W, C]` tokens.
pub fn to_spatial_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    let flat = g.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.tape.permute(flat, &[0, 2, 1])
}

pub fn from_spatial_tokens(g: &mut Graph, tokens: Var, shape: &[usize]) -> Result<Var> {
    let t = g.tape.permute(tokens, &[0, 2, 1])?;
    g.tape.reshape(t, shape)
}

/// `[T, C, H, W]` → `[H*W, T, C]`: one token sequence per spatial position.
pub fn to_temporal_tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.value(x).shape().to_vec();
    let flat = g.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.tape.permute(flat, &[2, 0, 1])
}

pub fn from_temporal_tokens(g: &mut Graph, tokens: Var, shape: &[usize]) -> Result<Var> {
    let t = g.tape.permute(tokens, &[1, 2, 0])?;
    g.tape.reshape(t, shape)
}

/// Sinusoidal embedding of a scalar position with geometric frequencies
/// `w_i = 10000^(-i / (dim/2))`: `[sin(p w_0..), cos(p w_0..)]`.
pub fn sinusoidal_embedding(position: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = position as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    Tensor::from_parts(vec![dim], out)
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), din, dout, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), dout, dout, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.silu(h);
        self.fc2.forward(g, h)
    }
}

/// GroupNorm → SiLU → conv (→ temporal conv), twice, plus a skip path.
/// An optional embedding projection adds a per-channel bias between the two
/// halves.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub tconv1: Option<TemporalConv>,
    pub emb: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub tconv2: Option<TemporalConv>,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        temporal_kernel: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let tconv = |ps: &mut ParamStore, n: &str| temporal_kernel.map(|k| TemporalConv::new_identity(ps, n, cout, k));
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            tconv1: tconv(ps, &format!("{name}.tconv1")),
            emb: emb_dim.map(|d| Linear::new(ps, &format!("{name}.emb"), d, cout, rng)),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            tconv2: tconv(ps, &format!("{name}.tconv2")),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    /// `x [N, C, H, W]`; `emb [1, D]`. Temporal convs run only when
    /// `temporal` is set (N is then the frame axis).
    pub fn forward(&self, g: &mut Graph, x: Var, emb: Option<Var>, temporal: bool) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.tape.silu(h);
        let mut h = self.conv1.forward(g, h)?;
        if let (true, Some(tc)) = (temporal, &self.tconv1) {
            h = tc.forward(g, h)?;
        }
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = g.tape.silu(e);
            let b = proj.forward(g, e)?;
            h = g.tape.add_channel_bias(h, b)?;
        }
        let h = self.norm2.forward(g, h)?;
        let h = g.tape.silu(h);
        let mut h = self.conv2.forward(g, h)?;
        if let (true, Some(tc)) = (temporal, &self.tconv2) {
            h = tc.forward(g, h)?;
        }
        let skip = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.tape.add(h, skip)
    }
}

/// Residual self-attention over the pixels of each frame.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub norm: GroupNorm,
    pub proj: AttentionProj,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        SpatialAttention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels),
            proj: AttentionProj::new(ps, name, channels, channels, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let h = self.norm.forward(g, x)?;
        let tokens = to_spatial_tokens(g, h)?;
        let a = self.proj.forward(g, tokens, tokens)?;
        let a = from_spatial_tokens(g, a, &shape)?;
        g.tape.add(x, a)
    }
}

/// Residual self-attention across frames at each pixel. The output
/// projection starts at zero so a fresh block is the identity.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub proj: AttentionProj,
    /// Learned `[T, C]` frame embedding added before attending.
    pub position: Option<ParamId>,
}

impl TemporalAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        num_frames: Option<usize>,
        rng: &mut R,
    ) -> Self {
        TemporalAttention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels),
            proj: AttentionProj::new(ps, name, channels, channels, true, rng),
            position: num_frames.map(|t| ps.add(format!("{name}.position"), Tensor::randn(&[t, channels], 0.1, rng))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let mut h = self.norm.forward(g, x)?;
        if let Some(p) = self.position {
            let p = g.param(p);
            h = g.tape.add_channel_bias(h, p)?;
        }
        let tokens = to_temporal_tokens(g, h)?;
        let a = self.proj.forward(g, tokens, tokens)?;
        let a = from_temporal_tokens(g, a, &shape)?;
        g.tape.add(x, a)
    }
}

/// Residual cross-attention from every pixel of every frame to a `[L, D]`
/// context sequence.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub proj: AttentionProj,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, context_dim: usize, rng: &mut R) -> Self {
        CrossAttention {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels),
            proj: AttentionProj::new(ps, name, channels, context_dim, false, rng),
        }
    }

    /// `context` is `[1, L, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let h = self.norm.forward(g, x)?;
        let tokens = to_spatial_tokens(g, h)?;
        let flat = g.tape.reshape(tokens, &[1, shape[0] * shape[2] * shape[3], shape[1]])?;
        let a = self.proj.forward(g, flat, context)?;
        let a = g.tape.reshape(a, &[shape[0], shape[2] * shape[3], shape[1]])?;
        let a = from_spatial_tokens(g, a, &shape)?;
        g.tape.add(x, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_divide_channels() {
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(12), 6);
        assert_eq!(default_groups(3), 3);
        assert_eq!(default_groups(7), 7);
        assert_eq!(default_groups(11), 1);
    }

    #[test]
    fn token_layouts_round_trip() {
        let ps = ParamStore::new();
        let mut g = Graph::inference(&ps);
        let x = Tensor::from_fn(&[3, 2, 2, 4], |i| i as f32);
        let v = g.input(x.clone());
        let sp = to_spatial_tokens(&mut g, v).unwrap();
        assert_eq!(g.value(sp).shape(), &[3, 8, 2]);
        let back = from_spatial_tokens(&mut g, sp, &[3, 2, 2, 4]).unwrap();
        assert_eq!(g.value(back), &x);
        let tm = to_temporal_tokens(&mut g, v).unwrap();
        assert_eq!(g.value(tm).shape(), &[8, 3, 2]);
        // token (s, t, c) == x[t, c, s]
        assert_eq!(g.value(tm).data()[5 * 6 + 2 * 2 + 1], x.data()[2 * 16 + 8 + 5]);
        let back = from_temporal_tokens(&mut g, tm, &[3, 2, 2, 4]).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn sinusoid_components() {
        let e = sinusoidal_embedding(8.0, 6);
        for i in 0..3 {
            let w = 10000f64.powf(-(i as f64) / 3.0);
            assert!((e.data()[i] as f64 - (8.0 * w).sin()).abs() < 1e-6);
            assert!((e.data()[3 + i] as f64 - (8.0 * w).cos()).abs() < 1e-6);
        }
    }
}
