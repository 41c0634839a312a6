//! The pipeline configuration file: one JSON document covering every model,
//! training run and data source. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, NUM_STAGES};
use crate::codec::{CodecConfig, DegradationConfig};
use crate::data::SceneSampler;
use crate::error::{Error, Result};
use crate::flow_tsr::TsrConfig;
use crate::text::TextConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub degradation: DegradationConfig,
    /// Latent patch side for decoder training; `None` trains on full frames.
    #[serde(default)]
    pub train_crop: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub codec: TrainConfig,
    pub stages: [TrainConfig; NUM_STAGES],
    pub flow: TrainConfig,
    pub refiner: TrainConfig,
    pub decoder: TrainConfig,
    /// Add L1 to analytic flow on top of the warp loss when targets exist.
    pub supervise_flow: bool,
}

/// Synthetic corpora written by `make-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Captioned clips for the diffusion stages.
    pub paired: SceneSampler,
    pub paired_clips: usize,
    /// Caption-free clips for TSR and the video decoder (odd frame count).
    pub unpaired: SceneSampler,
    pub unpaired_clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Checkpoint directory, relative to the config file.
    pub checkpoints: PathBuf,
    /// Optional precomputed prompt embeddings (see `text::load_embeddings`).
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    pub data: u64,
    pub generate: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub codec: CodecConfig,
    pub text: TextConfig,
    pub cascade: CascadeConfig,
    pub flow_tsr: TsrConfig,
    pub decoder: DecoderSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub paths: PathsSection,
    pub seeds: SeedsSection,
}

/// Checkpoint file names inside `paths.checkpoints`.
pub mod names {
    pub const CODEC: &str = "codec.vgck";
    pub const FLOW: &str = "flow.vgck";
    pub const REFINER: &str = "refiner.vgck";
    pub const DECODER: &str = "decoder.vgck";

    pub fn stage(n: usize) -> String {
        format!("stage{n}.vgck")
    }
}

impl PipelineConfig {
    /// The desk-scale setup: 64x64 training clips, 16x16 base latents.
    pub fn desk() -> Self {
        let codec = CodecConfig::default();
        let c = codec.latent_channels;
        let frames = 8;
        let sampler = SceneSampler {
            height: 64,
            width: 64,
            frames,
            fps: 8,
            max_objects: 2,
            min_size: 12,
            max_size: 20,
            speeds: vec![2.0, 4.0],
            static_prob: 0.1,
            texture: 0.1,
        };
        let train = |steps: usize, batch_size: usize, lr: f32, seed: u64| TrainConfig {
            steps,
            batch_size,
            lr,
            seed,
            cond_dropout: 0.0,
            log_every: 50,
            warmup: 0,
        };
        let stage = |n: u64| TrainConfig { cond_dropout: 0.1, ..train(300, 1, 2e-3, 10 + n) };
        PipelineConfig {
            codec,
            text: TextConfig::default(),
            cascade: CascadeConfig::desk(frames, 16),
            flow_tsr: TsrConfig::desk(c),
            decoder: DecoderSection { degradation: DegradationConfig::default(), train_crop: None },
            training: TrainingSection {
                codec: train(1500, 4, 2e-3, 1),
                stages: [stage(1), stage(2), stage(3)],
                flow: train(2000, 8, 5e-3, 20),
                refiner: train(1000, 4, 2e-3, 21),
                decoder: TrainConfig { warmup: 50, ..train(600, 1, 1e-4, 30) },
                supervise_flow: true,
            },
            data: DataSection {
                paired: sampler.clone(),
                paired_clips: 64,
                unpaired: SceneSampler { frames: 9, speeds: vec![4.0], static_prob: 0.25, ..sampler },
                unpaired_clips: 128,
            },
            paths: PathsSection { checkpoints: PathBuf::from("checkpoints"), embeddings: None },
            seeds: SeedsSection { data: 1, generate: 7 },
        }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Read, parse and validate; relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.paths.checkpoints.is_relative() {
            cfg.paths.checkpoints = base.join(&cfg.paths.checkpoints);
        }
        if let Some(e) = &cfg.paths.embeddings {
            if e.is_relative() {
                cfg.paths.embeddings = Some(base.join(e));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.cascade.validate()?;
        self.flow_tsr.validate()?;
        self.decoder.degradation.validate()?;
        let c = self.codec.latent_channels;
        for (i, s) in self.cascade.stages.iter().enumerate() {
            if s.model.latent_channels != c {
                return Err(Error::Config(format!("stage {}: latent_channels {} but codec has {c}", i + 1, s.model.latent_channels)));
            }
            if s.model.text_dim != self.text.dim {
                return Err(Error::Config(format!("stage {}: text_dim {} but text.dim is {}", i + 1, s.model.text_dim, self.text.dim)));
            }
        }
        if self.flow_tsr.refiner.model.latent_channels != c {
            return Err(Error::Config("flow_tsr refiner latent_channels must match the codec".into()));
        }
        let t = &self.training;
        for (name, tc) in [("codec", &t.codec), ("flow", &t.flow), ("refiner", &t.refiner), ("decoder", &t.decoder)]
            .into_iter()
            .chain(t.stages.iter().enumerate().map(|(i, s)| (["stage1", "stage2", "stage3"][i], s)))
        {
            tc.validate().map_err(|e| Error::Config(format!("training.{name}: {e}")))?;
        }
        let d = &self.data;
        if d.paired.frames != self.cascade.num_frames {
            return Err(Error::Config(format!(
                "data.paired.frames {} must equal cascade.num_frames {}",
                d.paired.frames, self.cascade.num_frames
            )));
        }
        if d.unpaired.frames < 3 || d.unpaired.frames % 2 == 0 {
            return Err(Error::Config("data.unpaired.frames must be odd and >= 3 for stride-2 pairs".into()));
        }
        for (name, s) in [("paired", &d.paired), ("unpaired", &d.unpaired)] {
            let f = self.codec.factor;
            if s.height % f != 0 || s.width % f != 0 {
                return Err(Error::Config(format!("data.{name}: size {}x{} not divisible by {f}", s.height, s.width)));
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoints.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trips_and_validates() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json(), Path::new("c.json")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::desk().to_json()).unwrap();
        v["codec"]["bogus"] = serde_json::json!(1);
        let err = PipelineConfig::from_json(&v.to_string(), Path::new("c.json")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn even_unpaired_frames_rejected() {
        let mut cfg = PipelineConfig::desk();
        cfg.data.unpaired.frames = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
