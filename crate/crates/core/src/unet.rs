//! Factorized spatio-temporal denoising UNet.
//!
//! Every 2D convolution is followed by a temporal convolution and every
//! spatial attention by a temporal attention; both start as the identity, so
//! a fresh model equals its 2D counterpart applied frame by frame. Text
//! enters through cross-attention, frame rate through the timestep
//! embedding, and the reference image through the input channels.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint;
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_embedding, Conv2d, CrossAttention, GroupNorm, Mlp, ResBlock, SpatialAttention, TemporalAttention,
    TemporalConv,
};
use crate::tensor::Tensor;
use crate::text::TextEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct STUNetConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attn_levels: BTreeSet<usize>,
    pub temporal_enabled: bool,
    /// Width of text tokens; 0 removes cross-attention.
    pub text_dim: usize,
    pub num_frames: usize,
    pub latent_channels: usize,
    /// Super-resolution stages take the upsampled previous stage as input.
    #[serde(default)]
    pub prev_stage: bool,
    #[serde(default = "default_temporal_kernel")]
    pub temporal_kernel: usize,
    /// Learned per-frame embedding ahead of temporal attention.
    #[serde(default = "yes")]
    pub temporal_position: bool,
}

fn default_temporal_kernel() -> usize {
    3
}

fn yes() -> bool {
    true
}

impl Default for STUNetConfig {
    fn default() -> Self {
        STUNetConfig {
            base_channels: 32,
            channel_mults: vec![1, 2],
            attn_levels: BTreeSet::from([1]),
            temporal_enabled: true,
            text_dim: 64,
            num_frames: 8,
            latent_channels: 4,
            prev_stage: false,
            temporal_kernel: 3,
            temporal_position: true,
        }
    }
}

impl STUNetConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "stunet_config";
        if self.channel_mults.len() < 2 {
            return Err(Error::invalid(OP, "channel_mults needs at least 2 levels"));
        }
        if self.num_frames == 0 {
            return Err(Error::invalid(OP, "num_frames must be >= 1"));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::invalid(OP, "base_channels must be even and >= 2"));
        }
        if self.channel_mults.contains(&0) || self.latent_channels == 0 {
            return Err(Error::invalid(OP, "channel counts must be positive"));
        }
        if let Some(&l) = self.attn_levels.iter().find(|&&l| l >= self.channel_mults.len()) {
            return Err(Error::invalid(OP, format!("attention level {l} does not exist")));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::invalid(OP, "temporal_kernel must be odd"));
        }
        Ok(())
    }

    /// Noisy latent, reference block, and (SR stages) the previous stage.
    pub fn in_channels(&self) -> usize {
        self.latent_channels * if self.prev_stage { 3 } else { 2 }
    }

    fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

/// Everything a stage is conditioned on besides the noisy latent.
#[derive(Clone, Debug)]
pub struct ConditionSet {
    pub text: TextEmbedding,
    pub fps: u32,
    /// `[C, h, w]` at the stage resolution.
    pub ref_latent: Tensor,
    /// `[T, C, h, w]`, already upsampled to the stage resolution.
    pub prev_stage: Option<Tensor>,
}

/// `[x_t | reference at frame 0, zeros after | previous stage]` along
/// channels.
pub fn assemble_conditions(x_t: &Tensor, cond: &ConditionSet, expects_prev: bool) -> Result<Tensor> {
    const OP: &str = "assemble_conditions";
    x_t.expect_rank(OP, 4)?;
    let (t, c, h, w) = (x_t.dim(0), x_t.dim(1), x_t.dim(2), x_t.dim(3));
    if cond.ref_latent.shape() != [c, h, w] {
        return Err(Error::shape(
            OP,
            format!("reference latent {:?} does not match the stage latent [{c}, {h}, {w}]", cond.ref_latent.shape()),
        ));
    }
    let mut ref_block = vec![0.0f32; t * c * h * w];
    ref_block[..c * h * w].copy_from_slice(cond.ref_latent.data());
    let ref_block = Tensor::new(x_t.shape(), ref_block)?;
    match (&cond.prev_stage, expects_prev) {
        (Some(prev), true) => {
            if prev.shape() != x_t.shape() {
                return Err(Error::shape(
                    OP,
                    format!("previous stage {:?} does not match {:?}", prev.shape(), x_t.shape()),
                ));
            }
            Tensor::concat_channels(&[x_t, &ref_block, prev])
        }
        (None, false) => Tensor::concat_channels(&[x_t, &ref_block]),
        (None, true) => Err(Error::invalid(OP, "super-resolution stage needs the previous stage output")),
        (Some(_), false) => Err(Error::invalid(OP, "base stage does not take a previous stage output")),
    }
}

/// Sinusoidal features of a frame rate, before the learned projection.
pub fn fps_sinusoid(fps: u32, dim: usize) -> Result<Tensor> {
    if fps < 1 {
        return Err(Error::invalid("fps_embedding", "fps must be >= 1"));
    }
    Ok(sinusoidal_embedding(fps as f32, dim))
}

/// True for parameters that belong to the temporal layers.
pub fn is_temporal_param(name: &str) -> bool {
    name.split('.').any(|part| part.starts_with("tconv") || part == "tattn")
}

#[derive(Clone, Debug)]
struct AttnStack {
    spatial: SpatialAttention,
    temporal: Option<TemporalAttention>,
    cross: Option<CrossAttention>,
}

impl AttnStack {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, cfg: &STUNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let frames = cfg.temporal_position.then_some(cfg.num_frames);
        AttnStack {
            spatial: SpatialAttention::new(ps, &format!("{name}.sattn"), ch, rng),
            temporal: cfg
                .temporal_enabled
                .then(|| TemporalAttention::new(ps, &format!("{name}.tattn"), ch, frames, rng)),
            cross: (cfg.text_dim > 0).then(|| CrossAttention::new(ps, &format!("{name}.xattn"), ch, cfg.text_dim, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, context: Option<Var>, temporal: bool) -> Result<Var> {
        let mut h = self.spatial.forward(g, x)?;
        if let (true, Some(ta)) = (temporal, &self.temporal) {
            h = ta.forward(g, h)?;
        }
        if let (Some(xa), Some(ctx)) = (&self.cross, context) {
            h = xa.forward(g, h, ctx)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct Resample {
    conv: Conv2d,
    tconv: Option<TemporalConv>,
}

impl Resample {
    fn forward(&self, g: &mut Graph, x: Var, temporal: bool) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        match (temporal, &self.tconv) {
            (true, Some(tc)) => tc.forward(g, h),
            _ => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<AttnStack>,
    resample: Option<Resample>,
}

#[derive(Clone, Debug)]
pub struct STUNet {
    pub cfg: STUNetConfig,
    pub params: ParamStore,
    time_mlp: Mlp,
    fps_mlp: Mlp,
    conv_in: Conv2d,
    tconv_in: Option<TemporalConv>,
    down: Vec<Level>,
    mid_res: ResBlock,
    mid_attn: AttnStack,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl STUNet {
    /// Random 2D layers, identity temporal layers.
    pub fn new(cfg: STUNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let ps_ = &mut ps;
        let tk = cfg.temporal_enabled.then_some(cfg.temporal_kernel);
        let emb = cfg.emb_dim();
        let levels = cfg.channel_mults.len();
        let tconv = |ps: &mut ParamStore, name: String, c: usize| tk.map(|k| TemporalConv::new_identity(ps, &name, c, k));

        let time_mlp = Mlp::new(ps_, "time_mlp", cfg.base_channels, emb, rng);
        let fps_mlp = Mlp::new(ps_, "fps_mlp", cfg.base_channels, emb, rng);
        let conv_in = Conv2d::new(ps_, "conv_in", cfg.in_channels(), cfg.width(0), 3, 1, rng);
        let tconv_in = tconv(ps_, "tconv_in".into(), cfg.width(0));

        let mut down = Vec::with_capacity(levels);
        let mut cin = cfg.width(0);
        for i in 0..levels {
            let ch = cfg.width(i);
            let res = ResBlock::new(ps_, &format!("down.{i}.res"), cin, ch, Some(emb), tk, rng);
            let attn = cfg.attn_levels.contains(&i).then(|| AttnStack::new(ps_, &format!("down.{i}.attn"), ch, &cfg, rng));
            let resample = (i + 1 < levels).then(|| Resample {
                conv: Conv2d::new(ps_, &format!("down.{i}.downsample"), ch, ch, 3, 2, rng),
                tconv: tconv(ps_, format!("down.{i}.downsample.tconv"), ch),
            });
            down.push(Level { res, attn, resample });
            cin = ch;
        }
        let top = cfg.width(levels - 1);
        let mid_res = ResBlock::new(ps_, "mid.res", top, top, Some(emb), tk, rng);
        let mid_attn = AttnStack::new(ps_, "mid.attn", top, &cfg, rng);

        let mut up = Vec::with_capacity(levels);
        let mut cur = top;
        for i in (0..levels).rev() {
            let ch = cfg.width(i);
            let res = ResBlock::new(ps_, &format!("up.{i}.res"), cur + ch, ch, Some(emb), tk, rng);
            let attn = cfg.attn_levels.contains(&i).then(|| AttnStack::new(ps_, &format!("up.{i}.attn"), ch, &cfg, rng));
            let resample = (i > 0).then(|| Resample {
                conv: Conv2d::new(ps_, &format!("up.{i}.upsample"), ch, cfg.width(i - 1), 3, 1, rng),
                tconv: tconv(ps_, format!("up.{i}.upsample.tconv"), cfg.width(i - 1)),
            });
            up.push(Level { res, attn, resample });
            cur = if i > 0 { cfg.width(i - 1) } else { ch };
        }
        let norm_out = GroupNorm::new(ps_, "norm_out", cfg.width(0));
        let conv_out = Conv2d::new(ps_, "conv_out", cfg.width(0), cfg.latent_channels, 3, 1, rng);
        Ok(STUNet { cfg, params: ps, time_mlp, fps_mlp, conv_in, tconv_in, down, mid_res, mid_attn, up, norm_out, conv_out })
    }

    /// `[E]`: learned projection of the frame-rate sinusoid.
    pub fn fps_embedding(&self, fps: u32) -> Result<Tensor> {
        let s = fps_sinusoid(fps, self.cfg.base_channels)?;
        let mut g = Graph::inference(&self.params);
        let x = g.input(s.into_reshaped(&[1, self.cfg.base_channels])?);
        let e = self.fps_mlp.forward(&mut g, x)?;
        g.value(e).reshape(&[self.cfg.emb_dim()])
    }

    fn embedding(&self, g: &mut Graph, t: usize, fps: u32) -> Result<Var> {
        let b = self.cfg.base_channels;
        let ts = g.input(sinusoidal_embedding(t as f32, b).into_reshaped(&[1, b])?);
        let fs = g.input(fps_sinusoid(fps, b)?.into_reshaped(&[1, b])?);
        let te = self.time_mlp.forward(g, ts)?;
        let fe = self.fps_mlp.forward(g, fs)?;
        g.tape.add(te, fe)
    }

    fn check_input(&self, op: &'static str, x: &Tensor) -> Result<()> {
        x.expect_rank(op, 4)?;
        if x.dim(1) != self.cfg.in_channels() {
            return Err(Error::shape(
                op,
                format!("expected {} input channels, got {:?}", self.cfg.in_channels(), x.shape()),
            ));
        }
        let m = self.cfg.size_multiple();
        if x.dim(2) % m != 0 || x.dim(3) % m != 0 {
            return Err(Error::shape(op, format!("spatial size {:?} must be divisible by {m}", &x.shape()[2..])));
        }
        Ok(())
    }

    /// Build the network on `g`. `x` is the assembled `[T, C_in, h, w]`
    /// input; `text` is `[L, D]`. With `temporal` false every frame is
    /// processed independently (the 2D path).
    pub fn forward_graph(&self, g: &mut Graph, x: Var, t: usize, fps: u32, text: Option<&Tensor>, temporal: bool) -> Result<Var> {
        let temporal = temporal && self.cfg.temporal_enabled;
        let context = match (self.cfg.text_dim, text) {
            (0, _) => None,
            (d, Some(txt)) => {
                if txt.rank() != 2 || txt.dim(1) != d {
                    return Err(Error::shape("forward_denoise", format!("text must be [L, {d}], got {:?}", txt.shape())));
                }
                Some(g.input(txt.reshape(&[1, txt.dim(0), d])?))
            }
            (_, None) => return Err(Error::invalid("forward_denoise", "this model needs a text embedding")),
        };
        let emb = self.embedding(g, t, fps)?;
        let mut h = self.conv_in.forward(g, x)?;
        if let (true, Some(tc)) = (temporal, &self.tconv_in) {
            h = tc.forward(g, h)?;
        }
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(g, h, Some(emb), temporal)?;
            if let Some(a) = &level.attn {
                h = a.forward(g, h, context, temporal)?;
            }
            skips.push(h);
            if let Some(r) = &level.resample {
                h = r.forward(g, h, temporal)?;
            }
        }
        h = self.mid_res.forward(g, h, Some(emb), temporal)?;
        h = self.mid_attn.forward(g, h, context, temporal)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = g.tape.concat_channels(&[h, skip])?;
            h = level.res.forward(g, h, Some(emb), temporal)?;
            if let Some(a) = &level.attn {
                h = a.forward(g, h, context, temporal)?;
            }
            if let Some(r) = &level.resample {
                h = g.tape.upsample_nearest2x(h)?;
                h = r.forward(g, h, temporal)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.tape.silu(h);
        self.conv_out.forward(g, h)
    }

    fn run(&self, x_in: &Tensor, t: usize, fps: u32, text: &Tensor, temporal: bool) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let x = g.input(x_in.clone());
        let out = self.forward_graph(&mut g, x, t, fps, Some(text), temporal)?;
        Ok(g.value(out).clone())
    }

    /// Noise prediction for an assembled `[T, C_in, h, w]` input.
    pub fn forward_denoise(&self, x_in: &Tensor, t: usize, cond: &ConditionSet) -> Result<Tensor> {
        self.check_input("forward_denoise", x_in)?;
        if x_in.dim(0) != self.cfg.num_frames {
            return Err(Error::shape(
                "forward_denoise",
                format!("model is built for {} frames, got {}", self.cfg.num_frames, x_in.dim(0)),
            ));
        }
        self.run(x_in, t, cond.fps, cond.text.tensor(), true)
    }

    /// The 2D path: temporal layers skipped, any number of frames, each
    /// processed on its own.
    pub fn forward_2d(&self, x_in: &Tensor, t: usize, cond: &ConditionSet) -> Result<Tensor> {
        self.check_input("forward_2d", x_in)?;
        self.run(x_in, t, cond.fps, cond.text.tensor(), false)
    }

    /// The non-temporal parameters.
    pub fn image_weights(&self) -> Vec<(String, Tensor)> {
        self.params.to_named().into_iter().filter(|(n, _)| !is_temporal_param(n)).collect()
    }

    /// Load 2D weights from an image model; temporal layers keep their
    /// identity initialization. Every mismatch is reported, in order.
    pub fn import_image_weights(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut bad = Vec::new();
        for (name, t) in named {
            match self.params.by_name(name) {
                None => bad.push(format!("{name}: no such parameter")),
                Some(p) if p.shape() != t.shape() => {
                    bad.push(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.shape()))
                }
                Some(_) => {}
            }
        }
        if !bad.is_empty() {
            return Err(Error::shape("import_image_weights", bad.join("; ")));
        }
        self.params.copy_matching(named);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.params.to_named(), path)
    }

    pub fn load(cfg: STUNetConfig, path: &Path) -> Result<Self> {
        let named = checkpoint::load_checkpoint(path)?;
        let mut model = STUNet::new(cfg, 0)?;
        model
            .params
            .load_named(&named)
            .map_err(|e| Error::format(path, format!("weights do not match the model config: {e}")))?;
        Ok(model)
    }
}

/// A stage model bound to its conditions, for the sampler. The
/// unconditional branch zeroes the text only.
pub struct StageDenoiser<'a> {
    pub model: &'a STUNet,
    pub cond: &'a ConditionSet,
}

impl Denoiser for StageDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor> {
        let x_in = assemble_conditions(x_t, self.cond, self.model.cfg.prev_stage)?;
        if conditional {
            self.model.forward_denoise(&x_in, t, self.cond)
        } else {
            let null = Tensor::zeros(self.cond.text.tensor().shape());
            self.model.check_input("forward_denoise", &x_in)?;
            self.model.run(&x_in, t, self.cond.fps, &null, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TextConfig;

    fn tiny(frames: usize) -> STUNetConfig {
        STUNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            attn_levels: BTreeSet::from([1]),
            text_dim: 8,
            num_frames: frames,
            ..STUNetConfig::default()
        }
    }

    fn cond(c: usize, h: usize, rng: &mut ChaCha8Rng) -> ConditionSet {
        let tc = TextConfig { max_tokens: 3, dim: 8, seed: 1 };
        ConditionSet {
            text: TextEmbedding::new(Tensor::randn(&[3, 8], 1.0, rng), &tc).unwrap(),
            fps: 8,
            ref_latent: Tensor::randn(&[c, h, h], 1.0, rng),
            prev_stage: None,
        }
    }

    #[test]
    fn assembled_reference_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = cond(4, 4, &mut rng);
        let x = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut rng);
        let a = assemble_conditions(&x, &c, false).unwrap();
        assert_eq!(a.shape(), &[3, 8, 4, 4]);
        assert_eq!(a.narrow_channels(4, 4).unwrap().index0(0), c.ref_latent);
        for t in 1..3 {
            assert!(a.index0(t).data()[64..].iter().all(|&v| v == 0.0));
        }
        assert!(assemble_conditions(&x, &c, true).is_err());
    }

    #[test]
    fn identity_init_matches_2d_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = STUNet::new(tiny(3), 2).unwrap();
        let c = cond(4, 4, &mut rng);
        let x = Tensor::randn(&[3, 8, 4, 4], 1.0, &mut rng);
        let y3 = model.forward_denoise(&x, 17, &c).unwrap();
        for i in 0..3 {
            let xi = x.index0(i).into_reshaped(&[1, 8, 4, 4]).unwrap();
            let y2 = model.forward_2d(&xi, 17, &c).unwrap();
            assert!(y3.index0(i).max_abs_diff(&y2.index0(0)) < 1e-5);
        }
    }

    #[test]
    fn wrong_frame_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = STUNet::new(tiny(3), 2).unwrap();
        let c = cond(4, 4, &mut rng);
        assert!(model.forward_denoise(&Tensor::zeros(&[2, 8, 4, 4]), 0, &c).is_err());
    }

    #[test]
    fn fps_embedding_contract() {
        let model = STUNet::new(tiny(1), 0).unwrap();
        assert!(model.fps_embedding(0).is_err());
        let a = model.fps_embedding(8).unwrap();
        let b = model.fps_embedding(30).unwrap();
        assert!(a.l2_distance(&b) > 0.0);
    }

    #[test]
    fn temporal_names() {
        assert!(is_temporal_param("down.0.res.tconv1.weight"));
        assert!(is_temporal_param("mid.attn.tattn.q.weight"));
        assert!(is_temporal_param("tconv_in.bias"));
        assert!(!is_temporal_param("mid.attn.sattn.q.weight"));
    }

    #[test]
    fn import_reports_mismatches() {
        let mut model = STUNet::new(tiny(2), 0).unwrap();
        let other = STUNet::new(STUNetConfig { base_channels: 4, ..tiny(2) }, 0).unwrap();
        let err = model.import_image_weights(&other.image_weights()).unwrap_err().to_string();
        assert!(err.contains("time_mlp.fc1.weight"), "{err}");
        let donor = STUNet::new(STUNetConfig { temporal_enabled: false, ..tiny(2) }, 5).unwrap();
        model.import_image_weights(&donor.image_weights()).unwrap();
        assert_eq!(model.params.by_name("conv_in.weight"), donor.params.by_name("conv_in.weight"));
    }
}
