//! Three chained denoisers: a base stage at the lowest latent resolution and
//! two super-resolution stages that each double it, every stage conditioned
//! on the reference image encoded at its own resolution.

use log::info;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::diffusion::{derive_seed, sample_loop, NoiseSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::bilinear_resize2d;
use crate::numerics::resize::resize_pow2;
use crate::tensor::Tensor;
use crate::text::TextEmbedding;
use crate::unet::{ConditionSet, STUNet, STUNetConfig, StageDenoiser};

pub const NUM_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub model: STUNetConfig,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Latent side length per stage; each doubles the previous.
    pub stage_resolutions: [usize; NUM_STAGES],
    pub num_frames: usize,
    pub schedule: ScheduleConfig,
    pub stages: [StageConfig; NUM_STAGES],
}

impl CascadeConfig {
    /// Desk-scale defaults: `[16, 32, 64]` latents over `frames` frames.
    pub fn desk(num_frames: usize, base_resolution: usize) -> Self {
        let stage = |prev_stage: bool| StageConfig {
            model: STUNetConfig { num_frames, prev_stage, ..STUNetConfig::default() },
            sampler: SamplerConfig { num_inference_steps: 25, eta: 0.0, guidance_scale: 1.0 },
        };
        CascadeConfig {
            stage_resolutions: [base_resolution, 2 * base_resolution, 4 * base_resolution],
            num_frames,
            schedule: ScheduleConfig::default(),
            stages: [stage(false), stage(true), stage(true)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "cascade_config";
        let r = self.stage_resolutions;
        if r[0] == 0 || r[1] != 2 * r[0] || r[2] != 2 * r[1] {
            return Err(Error::invalid(OP, format!("stage resolutions must double, got {r:?}")));
        }
        let sched = self.schedule.build()?;
        let channels = self.stages[0].model.latent_channels;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            s.model.validate().map_err(|e| e.within(format!("stage {n}")))?;
            s.sampler.validate(&sched).map_err(|e| e.within(format!("stage {n}")))?;
            if s.model.num_frames != self.num_frames {
                return Err(Error::invalid(OP, format!("stage {n} is built for {} frames, cascade uses {}", s.model.num_frames, self.num_frames)));
            }
            if s.model.prev_stage != (i > 0) {
                return Err(Error::invalid(OP, format!("stage {n}: prev_stage must be {}", i > 0)));
            }
            if s.model.latent_channels != channels {
                return Err(Error::invalid(OP, "all stages must share the latent channel count"));
            }
            if r[i] % s.model.size_multiple() != 0 {
                return Err(Error::invalid(OP, format!("stage {n}: resolution {} not divisible by {}", r[i], s.model.size_multiple())));
            }
        }
        Ok(())
    }
}

/// The reference image resized to each stage's pixel size and encoded.
pub fn encode_reference_pyramid(codec: &Codec, image: &Tensor, resolutions: &[usize; NUM_STAGES]) -> Result<[Tensor; NUM_STAGES]> {
    image.expect_rank("encode_reference", 3)?;
    let f = codec.factor();
    let enc = |r: usize| -> Result<Tensor> {
        let px = resize_pow2(image, r * f, r * f).map_err(|e| e.within("reference image"))?;
        codec.encode_image(&px)
    };
    Ok([enc(resolutions[0])?, enc(resolutions[1])?, enc(resolutions[2])?])
}

/// Sample all three stages. Stage `i > 1` sees the bilinearly doubled
/// output of stage `i - 1`. Returns `[T, C, 4h, 4w]` for base side `h`.
pub fn run_cascade(
    models: &[STUNet; NUM_STAGES],
    cfg: &CascadeConfig,
    text: &TextEmbedding,
    fps: u32,
    ref_latents: &[Tensor; NUM_STAGES],
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let sched: NoiseSchedule = cfg.schedule.build()?;
    let mut prev: Option<Tensor> = None;
    for i in 0..NUM_STAGES {
        let n = i + 1;
        let model = &models[i];
        let r = cfg.stage_resolutions[i];
        let c = model.cfg.latent_channels;
        if model.cfg != cfg.stages[i].model {
            return Err(Error::invalid("run_cascade", format!("stage {n}: model does not match its configuration")));
        }
        let prev_stage = match prev.take() {
            Some(p) => Some(bilinear_resize2d(&p, 2).map_err(|e| e.within(format!("stage {n}")))?),
            None => None,
        };
        let cond = ConditionSet { text: text.clone(), fps, ref_latent: ref_latents[i].clone(), prev_stage };
        let denoiser = StageDenoiser { model, cond: &cond };
        let shape = [cfg.num_frames, c, r, r];
        let out = sample_loop(&denoiser, &shape, &sched, &cfg.stages[i].sampler, derive_seed(seed, &[n as u64]))
            .map_err(|e| e.within(format!("stage {n}")))?;
        info!("cascade stage {n}: {:?}", out.shape());
        prev = Some(out);
    }
    Ok(prev.expect("three stages ran"))
}

/// Initialize the next stage from a trained one. Tensors whose name and
/// shape match are copied; the input convolution keeps the shared input
/// channels and zeroes the extra previous-stage block. Returns the model and
/// the names left freshly initialized.
pub fn init_from_previous(prev: &STUNet, next_cfg: STUNetConfig, seed: u64) -> Result<(STUNet, Vec<String>)> {
    let mut next = STUNet::new(next_cfg, seed)?;
    let mut fresh = next.params.copy_matching(&prev.params.to_named());
    if let Some(pos) = fresh.iter().position(|n| n == "conv_in.weight") {
        let (Some(src), Some(id)) = (prev.params.by_name("conv_in.weight"), next.params.id("conv_in.weight")) else {
            unreachable!("both models have an input convolution")
        };
        let dst = next.params.get_mut(id);
        let (ds, ss) = (dst.shape().to_vec(), src.shape().to_vec());
        if ds[0] == ss[0] && ds[2..] == ss[2..] && ds[1] > ss[1] {
            let k = ds[2] * ds[3];
            let (cin_d, cin_s) = (ds[1], ss[1]);
            let d = dst.data_mut();
            for o in 0..ds[0] {
                for ci in 0..cin_d {
                    let row = &mut d[(o * cin_d + ci) * k..(o * cin_d + ci + 1) * k];
                    if ci < cin_s {
                        row.copy_from_slice(&src.data()[(o * cin_s + ci) * k..(o * cin_s + ci + 1) * k]);
                    } else {
                        row.fill(0.0);
                    }
                }
            }
            fresh.remove(pos);
        }
    }
    for name in &fresh {
        info!("init_from_previous: freshly initialized {name}");
    }
    Ok((next, fresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TextConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn tiny_cfg() -> CascadeConfig {
        let model = |prev_stage| STUNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            attn_levels: BTreeSet::new(),
            text_dim: 8,
            num_frames: 2,
            prev_stage,
            ..STUNetConfig::default()
        };
        let sampler = SamplerConfig { num_inference_steps: 2, eta: 0.0, guidance_scale: 1.0 };
        CascadeConfig {
            stage_resolutions: [2, 4, 8],
            num_frames: 2,
            schedule: ScheduleConfig { steps: 50, ..ScheduleConfig::default() },
            stages: [
                StageConfig { model: model(false), sampler: sampler.clone() },
                StageConfig { model: model(true), sampler: sampler.clone() },
                StageConfig { model: model(true), sampler },
            ],
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = tiny_cfg();
        let models = [0, 1, 2].map(|i| STUNet::new(cfg.stages[i].model.clone(), i as u64).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tc = TextConfig { max_tokens: 4, dim: 8, seed: 0 };
        let text = TextEmbedding::new(Tensor::randn(&[4, 8], 1.0, &mut rng), &tc).unwrap();
        let refs = [2, 4, 8].map(|r| Tensor::randn(&[4, r, r], 1.0, &mut rng));
        let a = run_cascade(&models, &cfg, &text, 8, &refs, 7).unwrap();
        assert_eq!(a.shape(), &[2, 4, 8, 8]);
        assert_eq!(a, run_cascade(&models, &cfg, &text, 8, &refs, 7).unwrap());
        let bad = [refs[0].clone(), refs[0].clone(), refs[2].clone()];
        let err = run_cascade(&models, &cfg, &text, 8, &bad, 7).unwrap_err();
        assert!(err.to_string().contains("stage 2"), "{err}");
    }

    #[test]
    fn next_stage_copies_and_zeroes() {
        let cfg = tiny_cfg();
        let s1 = STUNet::new(cfg.stages[0].model.clone(), 1).unwrap();
        let (s2, fresh) = init_from_previous(&s1, cfg.stages[1].model.clone(), 2).unwrap();
        assert!(fresh.is_empty(), "{fresh:?}");
        for (name, t) in s1.params.iter() {
            if name != "conv_in.weight" {
                assert_eq!(s2.params.by_name(name).unwrap(), t, "{name}");
            }
        }
        let w = s2.params.by_name("conv_in.weight").unwrap();
        let k = 9;
        for o in 0..w.dim(0) {
            assert!(w.data()[(o * 12 + 8) * k..(o * 12 + 12) * k].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn doubling_is_enforced() {
        let mut cfg = tiny_cfg();
        cfg.stage_resolutions = [2, 4, 6];
        assert!(cfg.validate().is_err());
    }
}
