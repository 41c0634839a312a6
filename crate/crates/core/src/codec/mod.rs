//! The latent space: a small convolutional VAE, its per-frame image decoder,
//! and a temporally extended video decoder that starts out identical to it.
//!
//! Latents handed out by [`Codec::encode_image`] are posterior means
//! multiplied by `latent_scale` (set after training to 1 / std of the
//! corpus latents); every decoder divides it back out.

pub mod degrade;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ResBlock, SpatialAttention, TemporalAttention, TemporalConv};
use crate::tensor::Tensor;

pub use degrade::{degrade, DegradationConfig};

/// Frames pushed through one inference graph at a time.
const FRAME_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial downsampling factor; a power of two.
    pub factor: usize,
    pub latent_channels: usize,
    /// Widths from full resolution down; `log2(factor) + 1` entries.
    pub channels: Vec<usize>,
    pub kl_weight: f32,
    pub temporal_kernel: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { factor: 4, latent_channels: 4, channels: vec![16, 32, 64], kl_weight: 1e-6, temporal_kernel: 3 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "codec_config";
        if self.factor < 2 || !self.factor.is_power_of_two() {
            return Err(Error::invalid(OP, format!("factor must be a power of two >= 2, got {}", self.factor)));
        }
        let levels = self.factor.trailing_zeros() as usize + 1;
        if self.channels.len() != levels {
            return Err(Error::invalid(
                OP,
                format!("factor {} needs {levels} channel widths, got {}", self.factor, self.channels.len()),
            ));
        }
        if self.latent_channels == 0 || self.channels.contains(&0) {
            return Err(Error::invalid(OP, "channel counts must be positive"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::invalid(OP, "temporal_kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.channels;
        let n = ch.len();
        Encoder {
            conv_in: Conv2d::new(ps, "encoder.conv_in", 3, ch[0], 3, 1, rng),
            blocks: (0..n).map(|i| ResBlock::new(ps, &format!("encoder.block.{i}"), ch[i], ch[i], None, None, rng)).collect(),
            downs: (0..n - 1)
                .map(|i| Conv2d::new(ps, &format!("encoder.down.{i}"), ch[i], ch[i + 1], 3, 2, rng))
                .collect(),
            norm_out: GroupNorm::new(ps, "encoder.norm_out", ch[n - 1]),
            conv_out: Conv2d::new(ps, "encoder.conv_out", ch[n - 1], 2 * cfg.latent_channels, 3, 1, rng),
        }
    }

    /// `[N, 3, H, W]` → (mean, logvar), each `[N, C, H/f, W/f]`, unscaled.
    pub fn forward(&self, g: &mut Graph, x: Var, latent_channels: usize) -> Result<(Var, Var)> {
        let mut h = self.conv_in.forward(g, x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, None, false)?;
            if let Some(down) = self.downs.get(i) {
                h = down.forward(g, h)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.tape.silu(h);
        let moments = self.conv_out.forward(g, h)?;
        let mean = g.tape.narrow_channels(moments, 0, latent_channels)?;
        let logvar = g.tape.narrow_channels(moments, latent_channels, latent_channels)?;
        let logvar = g.tape.clamp(logvar, -20.0, 10.0);
        Ok((mean, logvar))
    }
}

/// The image decoder, or (with temporal layers) the video decoder. Both
/// share parameter names for their 2D layers.
#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    tconv_in: Option<TemporalConv>,
    mid: ResBlock,
    mid_attn: SpatialAttention,
    mid_tattn: Option<TemporalAttention>,
    blocks: Vec<ResBlock>,
    ups: Vec<(Conv2d, Option<TemporalConv>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    tconv_out: Option<TemporalConv>,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &CodecConfig, temporal: bool, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.channels;
        let n = ch.len();
        let tk = temporal.then_some(cfg.temporal_kernel);
        let tconv = |ps: &mut ParamStore, name: &str, c: usize| tk.map(|k| TemporalConv::new_identity(ps, name, c, k));
        let conv_in = Conv2d::new(ps, "decoder.conv_in", cfg.latent_channels, ch[n - 1], 3, 1, rng);
        let tconv_in = tconv(ps, "decoder.tconv_in", ch[n - 1]);
        let mid = ResBlock::new(ps, "decoder.mid", ch[n - 1], ch[n - 1], None, tk, rng);
        let mid_attn = SpatialAttention::new(ps, "decoder.mid_attn", ch[n - 1], rng);
        let mid_tattn = temporal.then(|| TemporalAttention::new(ps, "decoder.mid_tattn", ch[n - 1], None, rng));
        let mut blocks = Vec::new();
        let mut ups = Vec::new();
        for i in (0..n).rev() {
            blocks.push(ResBlock::new(ps, &format!("decoder.block.{i}"), ch[i], ch[i], None, tk, rng));
            if i > 0 {
                let conv = Conv2d::new(ps, &format!("decoder.up.{i}"), ch[i], ch[i - 1], 3, 1, rng);
                ups.push((conv, tconv(ps, &format!("decoder.up.{i}.tconv"), ch[i - 1])));
            }
        }
        Decoder {
            conv_in,
            tconv_in,
            mid,
            mid_attn,
            mid_tattn,
            blocks,
            ups,
            norm_out: GroupNorm::new(ps, "decoder.norm_out", ch[0]),
            conv_out: Conv2d::new(ps, "decoder.conv_out", ch[0], 3, 3, 1, rng),
            tconv_out: tconv(ps, "decoder.tconv_out", 3),
        }
    }

    pub fn has_temporal(&self) -> bool {
        self.tconv_in.is_some()
    }

    /// Unscaled latents `[T, C, h, w]` → unclamped pixels `[T, 3, H, W]`.
    /// With `temporal` false (or no temporal layers) frames are independent.
    pub fn forward(&self, g: &mut Graph, z: Var, temporal: bool) -> Result<Var> {
        let t = |g: &mut Graph, tc: &Option<TemporalConv>, h: Var| -> Result<Var> {
            match (temporal, tc) {
                (true, Some(tc)) => tc.forward(g, h),
                _ => Ok(h),
            }
        };
        let h = self.conv_in.forward(g, z)?;
        let h = t(g, &self.tconv_in, h)?;
        let h = self.mid.forward(g, h, None, temporal)?;
        let mut h = self.mid_attn.forward(g, h)?;
        if let (true, Some(ta)) = (temporal, &self.mid_tattn) {
            h = ta.forward(g, h)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, h, None, temporal)?;
            if let Some((conv, tc)) = self.ups.get(i) {
                h = g.tape.upsample_nearest2x(h)?;
                h = conv.forward(g, h)?;
                h = t(g, tc, h)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.tape.silu(h);
        let h = self.conv_out.forward(g, h)?;
        t(g, &self.tconv_out, h)
    }
}

fn check_pixels(op: &'static str, frames: &Tensor, factor: usize) -> Result<()> {
    frames.expect_rank(op, 4)?;
    if frames.dim(1) != 3 {
        return Err(Error::shape(op, format!("expected 3 colour channels, got {:?}", frames.shape())));
    }
    crate::data::check_divisible(frames.dim(2), frames.dim(3), factor)
}

fn check_latents(op: &'static str, latents: &Tensor, channels: usize) -> Result<()> {
    latents.expect_rank(op, 4)?;
    if latents.dim(1) != channels {
        return Err(Error::shape(op, format!("expected {channels} latent channels, got {:?}", latents.shape())));
    }
    Ok(())
}

fn clamp_unit(t: Tensor) -> Tensor {
    t.map(|v| v.clamp(-1.0, 1.0))
}

fn load_scale(named: &[(String, Tensor)], path: &Path) -> Result<f32> {
    let t = checkpoint::find(named, "latent_scale").ok_or_else(|| Error::format(path, "missing tensor latent_scale"))?;
    match t.data() {
        [s] if s.is_finite() && *s > 0.0 => Ok(*s),
        _ => Err(Error::format(path, "latent_scale must be a single positive value")),
    }
}

fn without_scale(named: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().filter(|(n, _)| n != "latent_scale").collect()
}

/// Image encoder plus per-frame image decoder.
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub latent_scale: f32,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &cfg, &mut rng);
        let decoder = Decoder::new(&mut params, &cfg, false, &mut rng);
        Ok(Codec { cfg, params, encoder, decoder, latent_scale: 1.0 })
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.cfg.latent_channels
    }

    /// Scaled posterior means for `frames [T, 3, H, W]`.
    pub fn encode_frames(&self, frames: &Tensor) -> Result<Tensor> {
        check_pixels("encode_image", frames, self.cfg.factor)?;
        let mut out = Vec::with_capacity(frames.dim(0));
        for start in (0..frames.dim(0)).step_by(FRAME_CHUNK) {
            let chunk = slice_frames(frames, start, FRAME_CHUNK)?;
            let mut g = Graph::inference(&self.params);
            let x = g.input(chunk);
            let (mean, _) = self.encoder.forward(&mut g, x, self.cfg.latent_channels)?;
            let z = g.value(mean).scale(self.latent_scale);
            out.extend((0..z.dim(0)).map(|i| z.index0(i)));
        }
        Tensor::stack(&out)
    }

    /// `[3, H, W]` in `[-1, 1]` → `[C, H/f, W/f]`.
    pub fn encode_image(&self, img: &Tensor) -> Result<Tensor> {
        img.expect_rank("encode_image", 3)?;
        let batch = img.reshape(&[1, img.dim(0), img.dim(1), img.dim(2)])?;
        Ok(self.encode_frames(&batch)?.index0(0))
    }

    /// Independent per-frame decode, clamped to `[-1, 1]`.
    pub fn decode_image_frames(&self, latents: &Tensor) -> Result<Tensor> {
        check_latents("decode_image_frames", latents, self.cfg.latent_channels)?;
        let mut out = Vec::with_capacity(latents.dim(0));
        for start in (0..latents.dim(0)).step_by(FRAME_CHUNK) {
            let chunk = slice_frames(latents, start, FRAME_CHUNK)?.scale(1.0 / self.latent_scale);
            let mut g = Graph::inference(&self.params);
            let z = g.input(chunk);
            let x = self.decoder.forward(&mut g, z, false)?;
            let x = clamp_unit(g.value(x).clone());
            out.extend((0..x.dim(0)).map(|i| x.index0(i)));
        }
        Tensor::stack(&out)
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut named = self.params.to_named();
        named.push(("latent_scale".into(), Tensor::new(&[1], vec![self.latent_scale]).expect("[1]")));
        named
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.to_named(), path)
    }

    pub fn load(cfg: CodecConfig, path: &Path) -> Result<Self> {
        let named = checkpoint::load_checkpoint(path)?;
        let mut codec = Codec::new(cfg, 0)?;
        codec.latent_scale = load_scale(&named, path)?;
        codec
            .params
            .load_named(&without_scale(named))
            .map_err(|e| Error::format(path, format!("codec weights do not match the config: {e}")))?;
        Ok(codec)
    }
}

/// The temporally extended decoder. Its 2D layers carry the image
/// decoder's parameter names so weights transfer by name.
#[derive(Clone, Debug)]
pub struct VideoDecoder {
    pub cfg: CodecConfig,
    pub params: ParamStore,
    pub decoder: Decoder,
    pub latent_scale: f32,
}

impl VideoDecoder {
    /// Fresh temporal layers (identity) around a copy of the codec's image
    /// decoder.
    pub fn from_codec(codec: &Codec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let decoder = Decoder::new(&mut params, &codec.cfg, true, &mut rng);
        params.copy_matching(&codec.params.to_named());
        VideoDecoder { cfg: codec.cfg.clone(), params, decoder, latent_scale: codec.latent_scale }
    }

    /// Decode a whole clip jointly, clamped to `[-1, 1]`.
    pub fn decode_video(&self, latents: &Tensor) -> Result<Tensor> {
        check_latents("decode_video", latents, self.cfg.latent_channels)?;
        let mut g = Graph::inference(&self.params);
        let z = g.input(latents.scale(1.0 / self.latent_scale));
        let x = self.decoder.forward(&mut g, z, true)?;
        Ok(clamp_unit(g.value(x).clone()))
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut named = self.params.to_named();
        named.push(("latent_scale".into(), Tensor::new(&[1], vec![self.latent_scale]).expect("[1]")));
        named
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.to_named(), path)
    }

    pub fn load(cfg: CodecConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let named = checkpoint::load_checkpoint(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let decoder = Decoder::new(&mut params, &cfg, true, &mut rng);
        let latent_scale = load_scale(&named, path)?;
        params
            .load_named(&without_scale(named))
            .map_err(|e| Error::format(path, format!("video decoder weights do not match the config: {e}")))?;
        Ok(VideoDecoder { cfg, params, decoder, latent_scale })
    }
}

/// Frames `start..start+len` (clipped) of a `[T, ...]` tensor.
pub fn slice_frames(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let end = (start + len).min(x.dim(0));
    let frames: Vec<Tensor> = (start..end).map(|i| x.index0(i)).collect();
    Tensor::stack(&frames)
}

/// Peak signal-to-noise ratio for signals in `[-1, 1]` (peak-to-peak 2).
/// Identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig { channels: vec![8, 8, 16], ..CodecConfig::default() }
    }

    #[test]
    fn shapes_and_determinism() {
        let codec = Codec::new(tiny(), 1).unwrap();
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i % 7) as f32 - 3.0) / 3.0);
        let z = codec.encode_image(&img).unwrap();
        assert_eq!(z.shape(), &[4, 4, 4]);
        assert_eq!(codec.encode_image(&img).unwrap(), z);
        let x = codec.decode_image_frames(&Tensor::stack(&[z.clone(), z]).unwrap()).unwrap();
        assert_eq!(x.shape(), &[2, 3, 16, 16]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let codec = Codec::new(tiny(), 1).unwrap();
        let err = codec.encode_image(&Tensor::zeros(&[3, 18, 16])).unwrap_err();
        assert!(err.is_contract_violation());
    }

    #[test]
    fn fresh_video_decoder_matches_image_decoder() {
        let codec = Codec::new(tiny(), 2).unwrap();
        let vd = VideoDecoder::from_codec(&codec, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[5, 4, 4, 4], 1.0, &mut rng);
        let a = codec.decode_image_frames(&z).unwrap();
        let b = vd.decode_video(&z).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let a = Tensor::ones(&[2, 2]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = a.map(|v| v - 0.2);
        assert!((psnr(&a, &b).unwrap() - 10.0 * (4.0f64 / 0.04).log10()).abs() < 1e-3);
    }
}
