//! Command-line driver: data creation, training, generation, interpolation,
//! decoding and evaluation. `run_command` maps errors to exit codes so it
//! can be driven in-process by tests.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use videogen::cascade::{encode_reference_pyramid, run_cascade, NUM_STAGES};
use videogen::checkpoint::{find, load_checkpoint, save_checkpoint};
use videogen::codec::{psnr, Codec, VideoDecoder};
use videogen::config::{names, PipelineConfig};
use videogen::data::{load_clip, load_scene, make_corpus, read_image, save_clip, save_scene, UnpairedClip, VideoClip};
use videogen::diffusion::derive_seed;
use videogen::flow_tsr::{temporal_upsample, upsampled_len, FlowNet, Refiner, TsrModels};
use videogen::text::{load_embeddings, HashEmbedder, TextEmbedding};
use videogen::trainer::{
    prepare_stage_data, prepare_tsr_data, train_codec, train_diffusion_stage, train_flow_tsr, train_video_decoder,
    TrainLog,
};
use videogen::unet::STUNet;
use videogen::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "videogen", version, about = "Reference-guided cascaded latent video diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    /// Captioned clips for the diffusion stages.
    Paired,
    /// Caption-free clips for TSR and the video decoder.
    Unpaired,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Pipeline config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory; overrides `paths.checkpoints`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic clip corpus.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the image autoencoder.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Output directory (default: the checkpoint directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one cascade stage; stages 2 and 3 start from the previous one.
    TrainStage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the flow network and the midframe refiner.
    TrainTsr {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on the warp loss alone.
        #[arg(long)]
        no_flow_supervision: bool,
    },
    /// Train the temporal video decoder on degraded latents.
    TrainDecoder {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prompt + reference image -> video clip directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        /// Reference image (PPM) for frame 0.
        #[arg(long)]
        ref_image: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        tsr_passes: usize,
        /// Frame rate of the generated key frames.
        #[arg(long)]
        fps: Option<u32>,
        /// Also save the final latents to this checkpoint file.
        #[arg(long)]
        latents_out: Option<PathBuf>,
    },
    /// Insert midframes into a clip: N -> 2N-1 frames per pass.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        passes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a latent file written by `generate --latents-out`.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        fps: u32,
        #[arg(long)]
        out: PathBuf,
        /// Use the per-frame image decoder instead of the video decoder.
        #[arg(long)]
        image_decoder: bool,
    },
    /// PSNR between two clip directories.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Write the report as JSON here instead of only printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

/// Tensor name used in latent files.
pub const LATENTS: &str = "latents";

/// Parse `argv` (including the program name), run, and return the exit
/// code: 0 on success, 2 for shape or contract violations, 1 otherwise.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_contract_violation() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeData { common, kind, out, count, seed } => make_data(&common, kind, &out, count, seed),
        Command::TrainCodec { common, data, out } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, out);
            let target = guard_file(&out.join(names::CODEC), common.force)?;
            let clips = load_clips(&data, cfg.codec.factor)?;
            let videos: Vec<Tensor> = clips.into_iter().map(|c| c.frames).collect();
            let mut log = train_log("codec", &out, common.force)?;
            let codec = train_codec(&videos, cfg.codec.clone(), &cfg.training.codec, &mut log)?;
            codec.save(&target)
        }
        Command::TrainStage { common, stage, data, out } => train_stage(&common, stage as usize, &data, out),
        Command::TrainTsr { common, data, out, no_flow_supervision } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, out);
            let flow_path = guard_file(&out.join(names::FLOW), common.force)?;
            let refiner_path = guard_file(&out.join(names::REFINER), common.force)?;
            let codec = load_codec(&cfg)?;
            let clips = load_unpaired(&data, cfg.codec.factor)?;
            let examples = prepare_tsr_data(&codec, &clips)?;
            info!("{} TSR pairs from {} clips", examples.len(), clips.len());
            let mut flow_log = train_log("flow", &out, common.force)?;
            let mut refiner_log = train_log("refiner", &out, common.force)?;
            let t = &cfg.training;
            let (flow, refiner) = train_flow_tsr(
                &cfg.flow_tsr,
                cfg.codec.latent_channels,
                &examples,
                &t.flow,
                &t.refiner,
                t.supervise_flow && !no_flow_supervision,
                &mut flow_log,
                &mut refiner_log,
            )?;
            flow.save(&flow_path)?;
            refiner.save(&refiner_path)
        }
        Command::TrainDecoder { common, data, out } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&cfg, out);
            let target = guard_file(&out.join(names::DECODER), common.force)?;
            let codec = load_codec(&cfg)?;
            let clips = load_unpaired(&data, cfg.codec.factor)?;
            let mut log = train_log("decoder", &out, common.force)?;
            let vd = train_video_decoder(
                &codec,
                &clips,
                &cfg.decoder.degradation,
                cfg.decoder.train_crop,
                &cfg.training.decoder,
                &mut log,
            )?;
            vd.save(&target)
        }
        Command::Generate { common, prompt, ref_image, seed, out, tsr_passes, fps, latents_out } => {
            let ref_image = ref_image.ok_or_else(|| {
                Error::Config(
                    "generate needs --ref-image: a PPM image used as frame 0 of the video. \
                     Text-to-image generation of the reference is not built in."
                        .into(),
                )
            })?;
            generate(&common, &prompt, &ref_image, seed, &out, tsr_passes, fps, latents_out.as_deref())
        }
        Command::Interpolate { common, input, passes, seed, out } => {
            let cfg = load_config(&common)?;
            guard_dir(&out, common.force)?;
            let codec = load_codec(&cfg)?;
            let clip = load_clip(&input, cfg.codec.factor)?;
            let tsr = load_tsr(&cfg)?;
            let z = codec.encode_frames(&clip.frames)?;
            let up = temporal_upsample(&z, passes, &tsr, seed.unwrap_or(cfg.seeds.generate))?;
            let frames = load_decoder(&cfg)?.decode_video(&up)?;
            let fps = clip.fps.saturating_mul(1 << passes.min(16));
            write_clip(frames, fps, clip.caption, &out)
        }
        Command::Decode { common, input, fps, out, image_decoder } => {
            let cfg = load_config(&common)?;
            guard_dir(&out, common.force)?;
            let named = load_checkpoint(&input)?;
            let z = find(&named, LATENTS)
                .ok_or_else(|| Error::format(&input, format!("no tensor named {LATENTS:?}")))?
                .clone();
            z.expect_rank("decode", 4)?;
            let frames = if image_decoder {
                load_codec(&cfg)?.decode_image_frames(&z)?
            } else {
                load_decoder(&cfg)?.decode_video(&z)?
            };
            write_clip(frames, fps, None, &out)
        }
        Command::Eval { a, b, out, force } => {
            if let Some(o) = &out {
                guard_file(o, force)?;
            }
            let ca = load_clip(&a, 1)?;
            let cb = load_clip(&b, 1)?;
            let p = psnr(&ca.frames, &cb.frames)?;
            let shown = if p.is_infinite() { "inf".to_string() } else { format!("{p:.4}") };
            println!("psnr_db: {shown}");
            if let Some(o) = out {
                let report = serde_json::json!({
                    "psnr_db": if p.is_infinite() { serde_json::json!("inf") } else { serde_json::json!(p) },
                    "frames": ca.num_frames(),
                });
                fs::write(&o, report.to_string()).map_err(|e| Error::io(format!("write {}", o.display()), e))?;
            }
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(dir) = &common.checkpoints {
        cfg.paths.checkpoints = dir.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.paths.checkpoints.clone())
}

fn guard_file(path: &Path, force: bool) -> Result<PathBuf> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
    }
    Ok(path.to_path_buf())
}

/// Refuse a non-empty output directory unless forced; forced outputs are
/// cleared first so no stale frames survive.
fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.exists()
        && fs::read_dir(dir).map_err(|e| Error::io(format!("list {}", dir.display()), e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clear {}", dir.display()), e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))
}

fn train_log(name: &str, out: &Path, force: bool) -> Result<TrainLog> {
    let path = guard_file(&out.join(format!("{name}.log.jsonl")), force)?;
    TrainLog::to_file(name, &path)
}

/// Clip directories under each root (or the root itself if it is a clip),
/// in sorted order.
fn clip_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for root in roots {
        if root.join("meta.json").exists() {
            dirs.push(root.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(format!("list {}", root.display()), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("meta.json").exists())
            .collect();
        if found.is_empty() {
            return Err(Error::NotFound(format!("no clip directories under {}", root.display())));
        }
        found.sort();
        dirs.extend(found);
    }
    Ok(dirs)
}

fn load_clips(roots: &[PathBuf], factor: usize) -> Result<Vec<VideoClip>> {
    clip_dirs(roots)?.iter().map(|d| load_clip(d, factor)).collect()
}

/// Clips for TSR and decoder training; captions are dropped here so those
/// trainers cannot see them.
fn load_unpaired(roots: &[PathBuf], factor: usize) -> Result<Vec<UnpairedClip>> {
    clip_dirs(roots)?
        .iter()
        .map(|d| Ok(load_clip(d, factor)?.unpaired(load_scene(d)?)))
        .collect()
}

fn need(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::NotFound(format!("{what} checkpoint {}", path.display())))
    }
}

fn load_codec(cfg: &PipelineConfig) -> Result<Codec> {
    Codec::load(cfg.codec.clone(), &need(cfg.checkpoint(names::CODEC), "codec")?)
}

fn load_decoder(cfg: &PipelineConfig) -> Result<VideoDecoder> {
    VideoDecoder::load(cfg.codec.clone(), &need(cfg.checkpoint(names::DECODER), "video decoder")?)
}

fn load_tsr(cfg: &PipelineConfig) -> Result<TsrModels> {
    let t = &cfg.flow_tsr;
    let flow = FlowNet::load(t.flow.clone(), cfg.codec.latent_channels, &need(cfg.checkpoint(names::FLOW), "flow net")?)?;
    let refiner = Refiner::load(t.refiner.clone(), &need(cfg.checkpoint(names::REFINER), "refiner")?)?;
    TsrModels::new(t.clone(), flow, Some(refiner))
}

fn write_clip(frames: Tensor, fps: u32, caption: Option<String>, out: &Path) -> Result<()> {
    let clip = VideoClip::new(frames, fps.max(1), caption)?;
    save_clip(&clip, out)?;
    info!("wrote {} frames to {}", clip.num_frames(), out.display());
    Ok(())
}

fn make_data(common: &Common, kind: DataKind, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(common)?;
    guard_dir(out, common.force)?;
    let (sampler, default_count, stream) = match kind {
        DataKind::Paired => (&cfg.data.paired, cfg.data.paired_clips, 0),
        DataKind::Unpaired => (&cfg.data.unpaired, cfg.data.unpaired_clips, 1),
    };
    let seed = seed.unwrap_or_else(|| derive_seed(cfg.seeds.data, &[stream]));
    let corpus = make_corpus(sampler, count.unwrap_or(default_count), seed)?;
    for (i, item) in corpus.iter().enumerate() {
        let dir = out.join(format!("clip_{i:05}"));
        let clip = match kind {
            DataKind::Paired => item.clip.clone(),
            DataKind::Unpaired => VideoClip { caption: None, ..item.clip.clone() },
        };
        save_clip(&clip, &dir)?;
        save_scene(&item.scene, &dir)?;
    }
    info!("wrote {} clips to {}", corpus.len(), out.display());
    Ok(())
}

fn train_stage(common: &Common, stage: usize, data: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(&cfg, out);
    let target = guard_file(&out.join(names::stage(stage)), common.force)?;
    let codec = load_codec(&cfg)?;
    let model_cfg = cfg.cascade.stages[stage - 1].model.clone();
    let prev = if stage > 1 {
        let path = need(cfg.checkpoint(&names::stage(stage - 1)), &format!("stage {}", stage - 1))?;
        Some(STUNet::load(cfg.cascade.stages[stage - 2].model.clone(), &path)?)
    } else {
        None
    };
    let clips = load_clips(data, cfg.codec.factor)?;
    let embedder = HashEmbedder::new(cfg.text.clone());
    let examples = prepare_stage_data(&codec, &clips, &embedder, cfg.cascade.stage_resolutions[stage - 1], stage > 1)?;
    let sched = cfg.cascade.schedule.build()?;
    let mut log = train_log(&format!("stage{stage}"), &out, common.force)?;
    let model = train_diffusion_stage(
        stage,
        model_cfg,
        prev.as_ref(),
        &examples,
        &sched,
        &cfg.training.stages[stage - 1],
        &mut log,
    )?;
    model.save(&target)
}

fn embed_prompt(cfg: &PipelineConfig, prompt: &str) -> Result<TextEmbedding> {
    match &cfg.paths.embeddings {
        Some(path) => Ok(load_embeddings(path, &cfg.text)?.get(prompt)?.clone()),
        None => HashEmbedder::new(cfg.text.clone()).embed(prompt),
    }
}

#[allow(clippy::too_many_arguments)]
fn generate(
    common: &Common,
    prompt: &str,
    ref_image: &Path,
    seed: Option<u64>,
    out: &Path,
    tsr_passes: usize,
    fps: Option<u32>,
    latents_out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    guard_dir(out, common.force)?;
    if let Some(p) = latents_out {
        guard_file(p, common.force)?;
    }
    let seed = seed.unwrap_or(cfg.seeds.generate);
    let fps = fps.unwrap_or(cfg.data.paired.fps);
    let codec = load_codec(&cfg)?;
    let text = embed_prompt(&cfg, prompt)?;
    let image = read_image(ref_image)?;
    let refs = encode_reference_pyramid(&codec, &image, &cfg.cascade.stage_resolutions)?;
    let models: Vec<STUNet> = (1..=NUM_STAGES)
        .map(|n| {
            let path = need(cfg.checkpoint(&names::stage(n)), &format!("stage {n}"))?;
            STUNet::load(cfg.cascade.stages[n - 1].model.clone(), &path)
        })
        .collect::<Result<_>>()?;
    let models: [STUNet; NUM_STAGES] = models.try_into().map_err(|_| Error::invalid("generate", "stage count"))?;
    let mut z = run_cascade(&models, &cfg.cascade, &text, fps, &refs, derive_seed(seed, &[0]))?;
    let mut out_fps = fps;
    if tsr_passes > 0 {
        let tsr = load_tsr(&cfg)?;
        info!("temporal upsampling {} -> {} frames", z.dim(0), upsampled_len(z.dim(0), tsr_passes));
        z = temporal_upsample(&z, tsr_passes, &tsr, derive_seed(seed, &[1]))?;
        out_fps = fps.saturating_mul(1 << tsr_passes.min(16));
    }
    if let Some(p) = latents_out {
        save_checkpoint(&[(LATENTS.to_string(), z.clone())], p)?;
    }
    let frames = load_decoder(&cfg)?.decode_video(&z)?;
    write_clip(frames, out_fps, Some(prompt.to_string()), out)
}
