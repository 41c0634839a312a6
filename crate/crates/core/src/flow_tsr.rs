//! Temporal super-resolution in latent space: a coarse-to-fine flow network
//! warps the two neighbours of a missing frame toward it, an optional
//! diffusion refiner sharpens the average, and a frequency split keeps the
//! warped low band with the refined high band.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::checkpoint;
use crate::diffusion::{derive_seed, refine_loop, NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::numerics::{lowpass_gaussian, warp_bilinear};
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextEmbedding};
use crate::unet::{ConditionSet, STUNet, STUNetConfig, StageDenoiser};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    /// Feature width per pyramid level, finest first.
    pub widths: Vec<usize>,
    /// Largest flow magnitude per axis; defaults to half the latent height.
    #[serde(default)]
    pub max_flow: Option<f32>,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig { widths: vec![32, 64], max_flow: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub sigma: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { sigma: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub model: STUNetConfig,
    pub sampler: SamplerConfig,
    /// Fraction of the schedule the refinement starts from (1 = pure noise).
    pub strength: f64,
}

impl RefinerConfig {
    pub fn desk(latent_channels: usize) -> Self {
        RefinerConfig {
            model: STUNetConfig {
                base_channels: 32,
                channel_mults: vec![1, 2],
                attn_levels: Default::default(),
                temporal_enabled: false,
                text_dim: 0,
                num_frames: 1,
                latent_channels,
                prev_stage: false,
                temporal_kernel: 3,
                temporal_position: false,
            },
            sampler: SamplerConfig { num_inference_steps: 10, eta: 0.0, guidance_scale: 1.0 },
            strength: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsrConfig {
    pub flow: FlowNetConfig,
    pub refiner: RefinerConfig,
    pub fusion: FusionConfig,
    pub schedule: ScheduleConfig,
}

impl TsrConfig {
    pub fn desk(latent_channels: usize) -> Self {
        TsrConfig {
            flow: FlowNetConfig::default(),
            refiner: RefinerConfig::desk(latent_channels),
            fusion: FusionConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "tsr_config";
        if self.flow.widths.is_empty() || self.flow.widths.contains(&0) {
            return Err(Error::invalid(OP, "flow net needs at least one level of positive width"));
        }
        if matches!(self.flow.max_flow, Some(m) if !(m > 0.0)) {
            return Err(Error::invalid(OP, "max_flow must be positive"));
        }
        if !(self.fusion.sigma > 0.0) {
            return Err(Error::invalid(OP, "fusion sigma must be > 0"));
        }
        let r = &self.refiner;
        r.model.validate()?;
        if r.model.num_frames != 1 || r.model.prev_stage || r.model.text_dim != 0 {
            return Err(Error::invalid(OP, "refiner must be single-frame, text-free, without a previous stage"));
        }
        r.sampler.validate(&self.schedule.build()?)?;
        if !(r.strength > 0.0 && r.strength <= 1.0) {
            return Err(Error::invalid(OP, "refiner strength must be in (0, 1]"));
        }
        Ok(())
    }
}

/// IFRNet-style bidirectional flow estimator.
#[derive(Clone, Debug)]
pub struct FlowNet {
    pub cfg: FlowNetConfig,
    pub latent_channels: usize,
    pub params: ParamStore,
    encoder: Vec<(Conv2d, Conv2d)>,
    /// Per level, finest first: hidden conv and zero-initialized head.
    decoder: Vec<(Conv2d, Conv2d)>,
}

impl FlowNet {
    pub fn new(cfg: FlowNetConfig, latent_channels: usize, seed: u64) -> Result<Self> {
        if cfg.widths.is_empty() {
            return Err(Error::invalid("flow_net", "needs at least one level"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let w = &cfg.widths;
        let levels = w.len();
        let mut encoder = Vec::with_capacity(levels);
        let mut decoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let (cin, stride) = if l == 0 { (latent_channels, 1) } else { (w[l - 1], 2) };
            let a = Conv2d::new(&mut ps, &format!("flow.enc.{l}.conv1"), cin, w[l], 3, stride, &mut rng);
            let b = Conv2d::new(&mut ps, &format!("flow.enc.{l}.conv2"), w[l], w[l], 3, 1, &mut rng);
            encoder.push((a, b));
            let din = if l + 1 == levels { 2 * w[l] } else { 2 * w[l] + 4 };
            let hidden = Conv2d::new(&mut ps, &format!("flow.dec.{l}.conv"), din, w[l], 3, 1, &mut rng);
            let head = Conv2d::new_zero(&mut ps, &format!("flow.dec.{l}.head"), w[l], 4, 3);
            decoder.push((hidden, head));
        }
        Ok(FlowNet { cfg, latent_channels, params: ps, encoder, decoder })
    }

    fn size_multiple(&self) -> usize {
        1 << (self.cfg.widths.len() - 1)
    }

    fn features(&self, g: &mut Graph, z: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = z;
        for (a, b) in &self.encoder {
            h = a.forward(g, h)?;
            h = g.tape.silu(h);
            h = b.forward(g, h)?;
            h = g.tape.silu(h);
            feats.push(h);
        }
        Ok(feats)
    }

    /// `[N, C, h, w]` pairs → `[N, 4, h, w]`: channels 0..2 sample `z_a`,
    /// channels 2..4 sample `z_b`, both toward the midframe.
    pub fn forward(&self, g: &mut Graph, za: Var, zb: Var) -> Result<Var> {
        let shape = g.value(za).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.latent_channels || g.value(zb).shape() != shape.as_slice() {
            return Err(Error::shape(
                "estimate_flow",
                format!("latent pair {:?} / {:?} (expected {} channels)", shape, g.value(zb).shape(), self.latent_channels),
            ));
        }
        let m = self.size_multiple();
        if shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::shape("estimate_flow", format!("latent size {:?} must be divisible by {m}", &shape[2..])));
        }
        let max_flow = self.cfg.max_flow.unwrap_or(shape[2] as f32 / 2.0);
        let fa = self.features(g, za)?;
        let fb = self.features(g, zb)?;
        let mut flow: Option<Var> = None;
        for l in (0..self.encoder.len()).rev() {
            let (hidden, head) = &self.decoder[l];
            let input = match flow {
                None => g.tape.concat_channels(&[fa[l], fb[l]])?,
                Some(coarse) => {
                    let up = g.tape.upsample_bilinear2x(coarse)?;
                    let up = g.tape.scale(up, 2.0);
                    flow = Some(up);
                    let (wa, wb) = self.warp_pair(g, fa[l], fb[l], up)?;
                    g.tape.concat_channels(&[wa, wb, up])?
                }
            };
            let h = hidden.forward(g, input)?;
            let h = g.tape.silu(h);
            let delta = head.forward(g, h)?;
            let f = match flow {
                None => delta,
                Some(prev) => g.tape.add(prev, delta)?,
            };
            flow = Some(g.tape.clamp(f, -max_flow, max_flow));
        }
        Ok(flow.expect("at least one level"))
    }

    fn warp_pair(&self, g: &mut Graph, a: Var, b: Var, flows: Var) -> Result<(Var, Var)> {
        let fa = g.tape.narrow_channels(flows, 0, 2)?;
        let fb = g.tape.narrow_channels(flows, 2, 2)?;
        Ok((g.tape.warp(a, fa)?, g.tape.warp(b, fb)?))
    }

    /// Mean of both warped neighbours, on the tape.
    pub fn coarse_midframe(&self, g: &mut Graph, za: Var, zb: Var, flows: Var) -> Result<Var> {
        let (wa, wb) = self.warp_pair(g, za, zb, flows)?;
        let sum = g.tape.add(wa, wb)?;
        Ok(g.tape.scale(sum, 0.5))
    }

    /// Batched inference: `[N, C, h, w]` pairs → `[N, 4, h, w]`.
    pub fn estimate_flow_batch(&self, za: &Tensor, zb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let (a, b) = (g.input(za.clone()), g.input(zb.clone()));
        let f = self.forward(&mut g, a, b)?;
        Ok(g.value(f).clone())
    }

    /// Flows `[2, h, w]` sampling `z_a` and `z_b` toward their midframe.
    pub fn estimate_flow(&self, za: &Tensor, zb: &Tensor) -> Result<(Tensor, Tensor)> {
        if za.shape() != zb.shape() || za.rank() != 3 {
            return Err(Error::shape("estimate_flow", format!("{:?} vs {:?}", za.shape(), zb.shape())));
        }
        let s = [1, za.dim(0), za.dim(1), za.dim(2)];
        let f = self.estimate_flow_batch(&za.reshape(&s)?, &zb.reshape(&s)?)?.index0(0);
        Ok((f.narrow_first(0, 2)?, f.narrow_first(2, 2)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(&self.params.to_named(), path)
    }

    pub fn load(cfg: FlowNetConfig, latent_channels: usize, path: &Path) -> Result<Self> {
        let named = checkpoint::load_checkpoint(path)?;
        let mut net = FlowNet::new(cfg, latent_channels, 0)?;
        net.params
            .load_named(&named)
            .map_err(|e| Error::format(path, format!("flow net weights do not match the config: {e}")))?;
        Ok(net)
    }
}

trait NarrowFirst {
    fn narrow_first(&self, start: usize, len: usize) -> Result<Tensor>;
}

impl NarrowFirst for Tensor {
    /// Rows `start..start+len` of the leading axis.
    fn narrow_first(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows: Vec<Tensor> = (start..start + len).map(|i| self.index0(i)).collect();
        Tensor::stack(&rows)
    }
}

/// `lowpass(warped) + (refined - lowpass(refined))`.
pub fn fuse_frequency(warped: &Tensor, refined: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    if warped.shape() != refined.shape() {
        return Err(Error::shape("fuse_frequency", format!("{:?} vs {:?}", warped.shape(), refined.shape())));
    }
    let lw = lowpass_gaussian(warped, cfg.sigma)?;
    let lr = lowpass_gaussian(refined, cfg.sigma)?;
    let mut out = refined.sub(&lr)?;
    out.add_assign(&lw);
    Ok(out)
}

/// Mean of `z_a` warped by `flow_a` and `z_b` warped by `flow_b`.
pub fn coarse_midframe(za: &Tensor, zb: &Tensor, flow_a: &Tensor, flow_b: &Tensor) -> Result<Tensor> {
    let wa = warp_bilinear(za, flow_a)?;
    let wb = warp_bilinear(zb, flow_b)?;
    Ok(wa.zip_map(&wb, |a, b| 0.5 * (a + b))?)
}

/// The single-frame conditional denoiser used to refine coarse midframes.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    pub model: STUNet,
}

/// Frame rate fed to the refiner's embedding; it never varies.
const REFINER_FPS: u32 = 1;

impl Refiner {
    pub fn new(cfg: RefinerConfig, seed: u64) -> Result<Self> {
        let model = STUNet::new(cfg.model.clone(), seed)?;
        Ok(Refiner { cfg, model })
    }

    /// Conditions placing the coarse midframe in the reference slot.
    pub fn conditions(coarse: &Tensor) -> Result<ConditionSet> {
        let tc = TextConfig { max_tokens: 1, dim: 1, seed: 0 };
        Ok(ConditionSet { text: TextEmbedding::null(&tc), fps: REFINER_FPS, ref_latent: coarse.clone(), prev_stage: None })
    }

    pub fn refine(&self, coarse: &Tensor, sched: &NoiseSchedule, seed: u64) -> Result<Tensor> {
        let cond = Self::conditions(coarse)?;
        let denoiser = StageDenoiser { model: &self.model, cond: &cond };
        let init = coarse.reshape(&[1, coarse.dim(0), coarse.dim(1), coarse.dim(2)])?;
        Ok(refine_loop(&denoiser, &init, self.cfg.strength, sched, &self.cfg.sampler, seed)?.index0(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(cfg: RefinerConfig, path: &Path) -> Result<Self> {
        let model = STUNet::load(cfg.model.clone(), path)?;
        Ok(Refiner { cfg, model })
    }
}

/// Trained (or fresh) TSR components.
pub struct TsrModels {
    pub cfg: TsrConfig,
    pub flow: FlowNet,
    pub refiner: Option<Refiner>,
    pub sched: NoiseSchedule,
}

impl TsrModels {
    pub fn new(cfg: TsrConfig, flow: FlowNet, refiner: Option<Refiner>) -> Result<Self> {
        cfg.validate()?;
        let sched = cfg.schedule.build()?;
        Ok(TsrModels { cfg, flow, refiner, sched })
    }
}

/// One midframe from its neighbours: coarse warp average, then (with a
/// refiner) diffusion refinement fused by frequency split.
pub fn synthesize_midframe(
    za: &Tensor,
    zb: &Tensor,
    flows: (&Tensor, &Tensor),
    refiner: Option<&Refiner>,
    sched: &NoiseSchedule,
    fusion: &FusionConfig,
    seed: u64,
) -> Result<Tensor> {
    let coarse = coarse_midframe(za, zb, flows.0, flows.1)?;
    match refiner {
        None => Ok(coarse),
        Some(r) => {
            let refined = r.refine(&coarse, sched, seed)?;
            fuse_frequency(&coarse, &refined, fusion)
        }
    }
}

/// Insert one midframe between every adjacent pair, `passes` times:
/// `T -> 2T - 1` per pass. Original frames are copied untouched.
pub fn temporal_upsample(z: &Tensor, passes: usize, models: &TsrModels, seed: u64) -> Result<Tensor> {
    const OP: &str = "temporal_upsample";
    z.expect_rank(OP, 4)?;
    if z.dim(0) < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 frames, got {}", z.dim(0))));
    }
    if passes == 0 {
        return Err(Error::invalid(OP, "passes must be >= 1"));
    }
    let mut frames: Vec<Tensor> = (0..z.dim(0)).map(|i| z.index0(i)).collect();
    for pass in 0..passes {
        let n = frames.len();
        let za = Tensor::stack(&frames[..n - 1])?;
        let zb = Tensor::stack(&frames[1..])?;
        let flows = models.flow.estimate_flow_batch(&za, &zb)?;
        let mids: Vec<Tensor> = (0..n - 1)
            .into_par_iter()
            .map(|i| {
                let f = flows.index0(i);
                let (fa, fb) = (f.narrow_first(0, 2)?, f.narrow_first(2, 2)?);
                synthesize_midframe(
                    &frames[i],
                    &frames[i + 1],
                    (&fa, &fb),
                    models.refiner.as_ref(),
                    &models.sched,
                    &models.cfg.fusion,
                    derive_seed(seed, &[pass as u64, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let mut next = Vec::with_capacity(2 * n - 1);
        for (i, f) in frames.into_iter().enumerate() {
            next.push(f);
            if i < n - 1 {
                next.push(mids[i].clone());
            }
        }
        frames = next;
    }
    Tensor::stack(&frames)
}

/// `2T - 1` applied `passes` times.
pub fn upsampled_len(t: usize, passes: usize) -> usize {
    (0..passes).fold(t, |n, _| 2 * n - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_models(with_refiner: bool) -> TsrModels {
        let mut cfg = TsrConfig::desk(4);
        cfg.flow.widths = vec![4, 8];
        cfg.refiner.model.base_channels = 4;
        cfg.refiner.sampler.num_inference_steps = 2;
        cfg.schedule.steps = 20;
        let flow = FlowNet::new(cfg.flow.clone(), 4, 1).unwrap();
        let refiner = with_refiner.then(|| Refiner::new(cfg.refiner.clone(), 2).unwrap());
        TsrModels::new(cfg, flow, refiner).unwrap()
    }

    #[test]
    fn fuse_identity_and_dc() {
        let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 13) % 7) as f32 - 3.0);
        let cfg = FusionConfig::default();
        assert!(fuse_frequency(&x, &x, &cfg).unwrap().max_abs_diff(&x) < 1e-6);
        let shifted = x.map(|v| v + 0.75);
        assert!(fuse_frequency(&x, &shifted, &cfg).unwrap().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn untrained_flow_is_finite_zero() {
        let m = tiny_models(false);
        let z = Tensor::from_fn(&[4, 8, 8], |i| (i as f32 * 0.1).sin());
        let (fa, fb) = m.flow.estimate_flow(&z, &z.map(|v| -v)).unwrap();
        assert_eq!(fa.shape(), &[2, 8, 8]);
        assert!(fa.all_finite() && fb.all_finite());
        assert!(m.flow.estimate_flow(&z, &Tensor::zeros(&[4, 8, 6])).is_err());
    }

    #[test]
    fn identical_frames_zero_flow_give_same_midframe() {
        let z = Tensor::from_fn(&[4, 8, 8], |i| (i as f32 * 0.3).cos());
        let zero = Tensor::zeros(&[2, 8, 8]);
        let m = tiny_models(false);
        let mid = synthesize_midframe(&z, &z, (&zero, &zero), None, &m.sched, &m.cfg.fusion, 0).unwrap();
        assert_eq!(mid, z);
    }

    #[test]
    fn insertion_counts_and_endpoints() {
        let m = tiny_models(true);
        let z = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f32 * 0.01).sin());
        let out = temporal_upsample(&z, 1, &m, 3).unwrap();
        assert_eq!(out.dim(0), 3);
        assert_eq!(out.index0(0), z.index0(0));
        assert_eq!(out.index0(2), z.index0(1));
        assert_eq!(out, temporal_upsample(&z, 1, &m, 3).unwrap());
        assert!(temporal_upsample(&z.index0(0).reshape(&[1, 4, 8, 8]).unwrap(), 1, &m, 3).is_err());
        assert_eq!(upsampled_len(16, 3), 121);
    }
}
