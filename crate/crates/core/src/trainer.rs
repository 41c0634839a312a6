//! Training loops for every learned component, plus the evaluations used to
//! check them. All randomness flows from `TrainConfig::seed`, so a run is
//! reproducible on a fixed platform.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_grads, scale_grads, Adam, AdamConfig, Graph, ParamStore, Var};
use crate::codec::{degrade, psnr, Codec, CodecConfig, DegradationConfig, VideoDecoder};
use crate::data::{make_tsr_pairs, to_latent_flow, UnpairedClip, VideoClip};
use crate::diffusion::{derive_seed, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::flow_tsr::{FlowNet, Refiner, TsrConfig, TsrModels, synthesize_midframe};
use crate::numerics::bilinear_resize2d;
use crate::numerics::resize::resize_pow2;
use crate::tensor::Tensor;
use crate::text::{HashEmbedder, TextEmbedding};
use crate::unet::{assemble_conditions, STUNet, STUNetConfig};
use crate::cascade::init_from_previous;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    /// Chance of zeroing the text for a training sample.
    #[serde(default)]
    pub cond_dropout: f64,
    /// Steps between progress log lines.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Learning-rate warmup steps.
    #[serde(default)]
    pub warmup: usize,
}

fn default_log_every() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 300, batch_size: 2, lr: 1e-3, seed: 0, cond_dropout: 0.1, log_every: 50, warmup: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "train_config";
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid(OP, "steps and batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(OP, "lr must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(OP, "cond_dropout must lie in [0, 1]"));
        }
        Ok(())
    }

    fn adam(&self, params: &ParamStore) -> Adam {
        Adam::new(params, AdamConfig { lr: self.lr, warmup: self.warmup as u32, ..AdamConfig::default() })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[stream]))
    }
}

/// Per-step losses, optionally mirrored to a JSON-lines file as
/// `{"step": n, "loss": x}`.
pub struct TrainLog {
    name: String,
    writer: Option<BufWriter<File>>,
    losses: Vec<f64>,
    every: usize,
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    loss: f64,
}

impl TrainLog {
    pub fn memory(name: impl Into<String>) -> Self {
        TrainLog { name: name.into(), writer: None, losses: Vec::new(), every: default_log_every() }
    }

    pub fn to_file(name: impl Into<String>, path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
        Ok(TrainLog { writer: Some(BufWriter::new(file)), ..Self::memory(name) })
    }

    fn record(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::invalid("train", format!("{}: loss became {loss} at step {step}", self.name)));
        }
        self.losses.push(loss);
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&LogLine { step, loss }).expect("log line serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("write training log", e))?;
        }
        if self.every > 0 && (step % self.every == 0) {
            info!("{} step {step}: loss {loss:.5}", self.name);
        }
        Ok(())
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("flush training log", e))?;
        }
        Ok(())
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Mean of the last `window` losses over the mean of the first `window`.
pub fn loss_ratio(losses: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, losses.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&losses[losses.len() - w..]) / mean(&losses[..w])
}

fn step_with(
    params: &mut ParamStore,
    adam: &mut Adam,
    mut loss_of: impl FnMut(&mut Graph, usize) -> Result<Var>,
    batch: usize,
) -> Result<f64> {
    let mut acc = Vec::new();
    let mut total = 0.0;
    for b in 0..batch {
        let mut g = Graph::new(params);
        let loss = loss_of(&mut g, b)?;
        total += g.value(loss).data()[0] as f64;
        accumulate_grads(&mut acc, g.param_grads(loss)?);
    }
    scale_grads(&mut acc, 1.0 / batch as f32);
    adam.step(params, &acc);
    Ok(total / batch as f64)
}

// ---------------------------------------------------------------------------
// codec

/// Reconstruction MSE plus the weighted Gaussian KL of the posterior.
fn codec_loss(codec: &Codec, g: &mut Graph, x: &Tensor, noise: Tensor) -> Result<Var> {
    let xv = g.input(x.clone());
    let (mean, logvar) = codec.encoder.forward(g, xv, codec.cfg.latent_channels)?;
    let half = g.tape.scale(logvar, 0.5);
    let std = g.tape.exp(half);
    let nv = g.input(noise);
    let jitter = g.tape.mul(std, nv)?;
    let z = g.tape.add(mean, jitter)?;
    let recon = codec.decoder.forward(g, z, false)?;
    let rec = g.tape.mse(recon, xv)?;
    let m2 = g.tape.mul(mean, mean)?;
    let var = g.tape.exp(logvar);
    let s = g.tape.add(m2, var)?;
    let s = g.tape.sub(s, logvar)?;
    let s = g.tape.add_const(s, -1.0);
    let kl = g.tape.mean(s);
    let kl = g.tape.scale(kl, 0.5 * codec.cfg.kl_weight);
    g.tape.add(rec, kl)
}

fn all_frames(clips: &[Tensor]) -> Vec<(usize, usize)> {
    clips.iter().enumerate().flat_map(|(c, v)| (0..v.dim(0)).map(move |f| (c, f))).collect()
}

/// Train the image autoencoder on individual frames, then set
/// `latent_scale` to 1 / std of the posterior means.
pub fn train_codec(videos: &[Tensor], cfg: CodecConfig, tc: &TrainConfig, log: &mut TrainLog) -> Result<Codec> {
    tc.validate()?;
    let frames = all_frames(videos);
    if frames.is_empty() {
        return Err(Error::invalid("train_codec", "no frames to train on"));
    }
    for v in videos {
        crate::data::check_divisible(v.dim(2), v.dim(3), cfg.factor)?;
    }
    let mut codec = Codec::new(cfg, tc.seed)?;
    let mut adam = tc.adam(&codec.params);
    let mut rng = tc.rng(1);
    for step in 0..tc.steps {
        let picks: Vec<Tensor> = (0..tc.batch_size)
            .map(|_| {
                let (c, f) = frames[rng.random_range(0..frames.len())];
                videos[c].index0(f)
            })
            .collect();
        let x = Tensor::stack(&picks)?;
        let (h, w) = (x.dim(2) / codec.cfg.factor, x.dim(3) / codec.cfg.factor);
        let noise = Tensor::randn(&[x.dim(0), codec.cfg.latent_channels, h, w], 1.0, &mut rng);
        let mut g = Graph::new(&codec.params);
        let loss = codec_loss(&codec, &mut g, &x, noise)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.param_grads(loss)?;
        drop(g);
        adam.step(&mut codec.params, &grads);
        log.record(step, value)?;
    }
    log.finish()?;
    calibrate_latent_scale(&mut codec, videos, &mut rng)?;
    Ok(codec)
}

fn calibrate_latent_scale(codec: &mut Codec, videos: &[Tensor], rng: &mut ChaCha8Rng) -> Result<()> {
    codec.latent_scale = 1.0;
    let frames = all_frames(videos);
    let sample: Vec<Tensor> = (0..frames.len().min(64))
        .map(|_| {
            let (c, f) = frames[rng.random_range(0..frames.len())];
            videos[c].index0(f)
        })
        .collect();
    let z = codec.encode_frames(&Tensor::stack(&sample)?)?;
    let mean = z.mean();
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.numel() as f64;
    if var > 0.0 {
        codec.latent_scale = (1.0 / var.sqrt()) as f32;
    }
    info!("latent scale {:.4}", codec.latent_scale);
    Ok(())
}

// ---------------------------------------------------------------------------
// diffusion stages

/// One encoded, captioned training clip at a stage's resolution.
#[derive(Clone, Debug)]
pub struct StageExample {
    /// `[T, C, r, r]`
    pub latents: Tensor,
    pub text: TextEmbedding,
    pub fps: u32,
    pub ref_latent: Tensor,
    /// Upsampled lower-resolution latents for SR stages.
    pub prev: Option<Tensor>,
}

fn encode_at(codec: &Codec, frames: &Tensor, resolution: usize) -> Result<Tensor> {
    let px = resolution * codec.factor();
    codec.encode_frames(&resize_pow2(frames, px, px)?)
}

/// Encode captioned clips for a stage with latent side `resolution`. The
/// reference is frame 0 at the same resolution; SR stages also get the clip
/// encoded at half resolution and bilinearly doubled.
pub fn prepare_stage_data(
    codec: &Codec,
    clips: &[VideoClip],
    embedder: &HashEmbedder,
    resolution: usize,
    with_prev: bool,
) -> Result<Vec<StageExample>> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let caption = clip
                .caption
                .as_deref()
                .ok_or_else(|| Error::invalid("prepare_stage_data", format!("clip {i} has no caption")))?;
            let latents = encode_at(codec, &clip.frames, resolution)?;
            let ref_latent = latents.index0(0);
            let prev = if with_prev {
                if resolution % 2 != 0 {
                    return Err(Error::invalid("prepare_stage_data", "SR stage resolution must be even"));
                }
                Some(bilinear_resize2d(&encode_at(codec, &clip.frames, resolution / 2)?, 2)?)
            } else {
                None
            };
            Ok(StageExample { latents, text: embedder.embed(caption)?, fps: clip.fps, ref_latent, prev })
        })
        .collect()
}

/// Epsilon-MSE for one example at timestep `t`.
pub fn diffusion_loss(
    model: &STUNet,
    g: &mut Graph,
    ex: &StageExample,
    t: usize,
    eps: &Tensor,
    drop_text: bool,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x_t = q_sample(&ex.latents, t, eps, sched)?;
    let cond = crate::unet::ConditionSet {
        text: ex.text.clone(),
        fps: ex.fps,
        ref_latent: ex.ref_latent.clone(),
        prev_stage: ex.prev.clone(),
    };
    let x_in = assemble_conditions(&x_t, &cond, model.cfg.prev_stage)?;
    let xv = g.input(x_in);
    let text = if drop_text { Tensor::zeros(ex.text.tensor().shape()) } else { ex.text.tensor().clone() };
    let pred = model.forward_graph(g, xv, t, ex.fps, Some(&text), true)?;
    let target = g.input(eps.clone());
    g.tape.mse(pred, target)
}

/// Train stage `stage` (1, 2 or 3). Stages 2 and 3 start from the previous
/// stage's weights, which must be supplied.
pub fn train_diffusion_stage(
    stage: usize,
    model_cfg: STUNetConfig,
    prev: Option<&STUNet>,
    data: &[StageExample],
    sched: &NoiseSchedule,
    tc: &TrainConfig,
    log: &mut TrainLog,
) -> Result<STUNet> {
    const OP: &str = "train_diffusion_stage";
    tc.validate()?;
    if !(1..=3).contains(&stage) {
        return Err(Error::invalid(OP, format!("stage must be 1, 2 or 3, got {stage}")));
    }
    if data.is_empty() {
        return Err(Error::invalid(OP, "no training clips"));
    }
    if let Some(bad) = data.iter().position(|e| e.latents.dim(0) != model_cfg.num_frames) {
        return Err(Error::shape(
            OP,
            format!("clip {bad} has {} frames, model expects {}", data[bad].latents.dim(0), model_cfg.num_frames),
        ));
    }
    let mut model = match (stage, prev) {
        (1, _) => STUNet::new(model_cfg, tc.seed)?,
        (_, Some(p)) => init_from_previous(p, model_cfg, tc.seed)?.0,
        (_, None) => {
            return Err(Error::NotFound(format!("stage {stage} needs the trained stage {} checkpoint", stage - 1)));
        }
    };
    let mut adam = tc.adam(&model.params);
    let mut rng = tc.rng(2);
    for step in 0..tc.steps {
        let draws: Vec<(usize, usize, Tensor, bool)> = (0..tc.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                let t = rng.random_range(0..sched.steps());
                let eps = Tensor::randn(data[i].latents.shape(), 1.0, &mut rng);
                let drop = rng.random_bool(tc.cond_dropout);
                (i, t, eps, drop)
            })
            .collect();
        let frozen = model.clone();
        let loss = step_with(
            &mut model.params,
            &mut adam,
            |g, b| {
                let (i, t, eps, drop) = &draws[b];
                diffusion_loss(&frozen, g, &data[*i], *t, eps, *drop, sched)
            },
            tc.batch_size,
        )?;
        log.record(step, loss)?;
    }
    log.finish()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// temporal super-resolution

/// A low-rate neighbour pair with its encoded midframe.
#[derive(Clone, Debug)]
pub struct TsrExample {
    pub za: Tensor,
    pub zb: Tensor,
    pub zmid: Tensor,
    /// `[4, h, w]` analytic flows toward the midframe, when known.
    pub target_flow: Option<Tensor>,
    /// Latent pixels fully inside a single moving object at mid time.
    pub moving_mask: Option<Vec<bool>>,
    pub is_static: bool,
}

/// Latent pixels whose whole `f x f` block is covered by one moving object.
fn moving_mask(scene: &crate::data::SyntheticSceneSpec, t: f32, f: usize) -> Vec<bool> {
    let (h, w) = (scene.height / f, scene.width / f);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let first = scene.top_object(t, x * f, y * f);
            let uniform = (0..f).all(|dy| (0..f).all(|dx| scene.top_object(t, x * f + dx, y * f + dy) == first));
            mask[y * w + x] = uniform && first.is_some_and(|i| scene.objects[i].velocity != [0.0, 0.0]);
        }
    }
    mask
}

/// Encode stride-2 pairs of unpaired clips; synthetic clips also get
/// analytic flow targets.
pub fn prepare_tsr_data(codec: &Codec, clips: &[UnpairedClip]) -> Result<Vec<TsrExample>> {
    let f = codec.factor();
    let mut out = Vec::new();
    for clip in clips {
        let pairs = make_tsr_pairs(clip, codec)?;
        for k in 0..pairs.targets.dim(0) {
            let (ta, tm, tb) = ((2 * k) as f32, (2 * k + 1) as f32, (2 * k + 2) as f32);
            let (target_flow, moving, is_static) = match &clip.scene {
                Some(scene) => {
                    let fa = to_latent_flow(&scene.sampling_flow(tm, ta), f)?;
                    let fb = to_latent_flow(&scene.sampling_flow(tm, tb), f)?;
                    let still = scene.objects.iter().all(|o| o.velocity == [0.0, 0.0]);
                    (Some(Tensor::concat_channels(&[&fa.reshape(&[1, 2, fa.dim(1), fa.dim(2)])?, &fb.reshape(&[1, 2, fb.dim(1), fb.dim(2)])?])?.index0(0)), Some(moving_mask(scene, tm, f)), still)
                }
                None => (None, None, false),
            };
            out.push(TsrExample {
                za: pairs.low.index0(k),
                zb: pairs.low.index0(k + 1),
                zmid: pairs.targets.index0(k),
                target_flow,
                moving_mask: moving,
                is_static,
            });
        }
    }
    Ok(out)
}

fn stack_field(items: &[&TsrExample], field: impl Fn(&TsrExample) -> Tensor) -> Result<Tensor> {
    Tensor::stack(&items.iter().map(|e| field(e)).collect::<Vec<_>>())
}

/// Warp-reconstruction L1, plus L1 to the analytic flow when `supervise`.
pub fn train_flow_net(
    cfg: &TsrConfig,
    latent_channels: usize,
    data: &[TsrExample],
    tc: &TrainConfig,
    supervise: bool,
    log: &mut TrainLog,
) -> Result<FlowNet> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_flow_tsr", "no TSR pairs"));
    }
    let mut net = FlowNet::new(cfg.flow.clone(), latent_channels, tc.seed)?;
    let mut adam = tc.adam(&net.params);
    let mut rng = tc.rng(3);
    for step in 0..tc.steps {
        let batch: Vec<&TsrExample> = (0..tc.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let za = stack_field(&batch, |e| e.za.clone())?;
        let zb = stack_field(&batch, |e| e.zb.clone())?;
        let zm = stack_field(&batch, |e| e.zmid.clone())?;
        let targets = if supervise && batch.iter().all(|e| e.target_flow.is_some()) {
            Some(stack_field(&batch, |e| e.target_flow.clone().expect("checked"))?)
        } else {
            None
        };
        let mut g = Graph::new(&net.params);
        let (a, b, m) = (g.input(za), g.input(zb), g.input(zm));
        let flows = net.forward(&mut g, a, b)?;
        let coarse = net.coarse_midframe(&mut g, a, b, flows)?;
        let mut loss = g.tape.l1(coarse, m)?;
        if let Some(t) = targets {
            let tv = g.input(t);
            let fl = g.tape.l1(flows, tv)?;
            loss = g.tape.add(loss, fl)?;
        }
        let value = g.value(loss).data()[0] as f64;
        let grads = g.param_grads(loss)?;
        drop(g);
        adam.step(&mut net.params, &grads);
        log.record(step, value)?;
    }
    log.finish()?;
    Ok(net)
}

/// Coarse midframes from a trained flow net, the refiner's condition.
pub fn coarse_midframes(flow: &FlowNet, data: &[TsrExample]) -> Result<Vec<Tensor>> {
    data.iter()
        .map(|e| {
            let (fa, fb) = flow.estimate_flow(&e.za, &e.zb)?;
            crate::flow_tsr::coarse_midframe(&e.za, &e.zb, &fa, &fb)
        })
        .collect()
}

/// Epsilon-MSE for the refiner, conditioned on flow-net coarse midframes.
/// Timesteps are drawn from the range the refinement actually visits.
pub fn train_refiner(cfg: &TsrConfig, flow: &FlowNet, data: &[TsrExample], tc: &TrainConfig, log: &mut TrainLog) -> Result<Refiner> {
    tc.validate()?;
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let coarse = coarse_midframes(flow, data)?;
    let mut refiner = Refiner::new(cfg.refiner.clone(), tc.seed)?;
    let mut adam = tc.adam(&refiner.model.params);
    let mut rng = tc.rng(4);
    let t_max = ((cfg.refiner.strength * sched.steps() as f64).round() as usize).clamp(1, sched.steps());
    for step in 0..tc.steps {
        let draws: Vec<(usize, usize, Tensor)> = (0..tc.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                (i, rng.random_range(0..t_max), Tensor::randn(data[i].zmid.shape(), 1.0, &mut rng))
            })
            .collect();
        let frozen = refiner.model.clone();
        let loss = step_with(
            &mut refiner.model.params,
            &mut adam,
            |g, b| {
                let (i, t, eps) = &draws[b];
                let ex = &data[*i];
                let s = [1, ex.zmid.dim(0), ex.zmid.dim(1), ex.zmid.dim(2)];
                let x_t = q_sample(&ex.zmid.reshape(&s)?, *t, &eps.reshape(&s)?, &sched)?;
                let cond = Refiner::conditions(&coarse[*i])?;
                let x_in = assemble_conditions(&x_t, &cond, false)?;
                let xv = g.input(x_in);
                let pred = frozen.forward_graph(g, xv, *t, cond.fps, None, false)?;
                let target = g.input(eps.reshape(&s)?);
                g.tape.mse(pred, target)
            },
            tc.batch_size,
        )?;
        log.record(step, loss)?;
    }
    log.finish()?;
    Ok(refiner)
}

/// Flow net first, then the refiner on its predictions.
pub fn train_flow_tsr(
    cfg: &TsrConfig,
    latent_channels: usize,
    data: &[TsrExample],
    flow_tc: &TrainConfig,
    refiner_tc: &TrainConfig,
    supervise_flow: bool,
    flow_log: &mut TrainLog,
    refiner_log: &mut TrainLog,
) -> Result<(FlowNet, Refiner)> {
    let flow = train_flow_net(cfg, latent_channels, data, flow_tc, supervise_flow, flow_log)?;
    let refiner = train_refiner(cfg, &flow, data, refiner_tc, refiner_log)?;
    Ok((flow, refiner))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEval {
    /// Mean flow magnitude over static examples (both directions).
    pub static_mean_magnitude: f64,
    /// Median endpoint error on moving-object interiors.
    pub moving_median_error: f64,
    pub moving_pixels: usize,
}

pub fn evaluate_flow(flow: &FlowNet, data: &[TsrExample]) -> Result<FlowEval> {
    let mut static_sum = 0.0;
    let mut static_n = 0usize;
    let mut errors = Vec::new();
    for e in data {
        let (fa, fb) = flow.estimate_flow(&e.za, &e.zb)?;
        let hw = fa.dim(1) * fa.dim(2);
        let mag = |f: &Tensor, i: usize| (f.data()[i] as f64).hypot(f.data()[hw + i] as f64);
        if e.is_static {
            for i in 0..hw {
                static_sum += mag(&fa, i) + mag(&fb, i);
                static_n += 2;
            }
        }
        if let (Some(target), Some(mask)) = (&e.target_flow, &e.moving_mask) {
            let td = target.data();
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                let ea = ((fa.data()[i] - td[i]) as f64).hypot((fa.data()[hw + i] - td[hw + i]) as f64);
                let eb = ((fb.data()[i] - td[2 * hw + i]) as f64).hypot((fb.data()[hw + i] - td[3 * hw + i]) as f64);
                errors.push(ea);
                errors.push(eb);
            }
        }
    }
    errors.sort_by(f64::total_cmp);
    Ok(FlowEval {
        static_mean_magnitude: if static_n > 0 { static_sum / static_n as f64 } else { f64::NAN },
        moving_median_error: errors.get(errors.len() / 2).copied().unwrap_or(f64::NAN),
        moving_pixels: errors.len() / 2,
    })
}

/// Summed L2 error of synthesized midframes and of naive averaging, over
/// the examples with moving content.
pub fn evaluate_midframes(models: &TsrModels, data: &[TsrExample], seed: u64) -> Result<(f64, f64)> {
    let (mut tsr, mut naive) = (0.0, 0.0);
    for (i, e) in data.iter().enumerate().filter(|(_, e)| !e.is_static) {
        let (fa, fb) = models.flow.estimate_flow(&e.za, &e.zb)?;
        let mid = synthesize_midframe(
            &e.za,
            &e.zb,
            (&fa, &fb),
            models.refiner.as_ref(),
            &models.sched,
            &models.cfg.fusion,
            derive_seed(seed, &[i as u64]),
        )?;
        let avg = e.za.zip_map(&e.zb, |a, b| 0.5 * (a + b))?;
        tsr += mid.l2_distance(&e.zmid);
        naive += avg.l2_distance(&e.zmid);
    }
    Ok((tsr, naive))
}

// ---------------------------------------------------------------------------
// video decoder

/// Consecutive frames per decoder training window.
pub const DECODER_WINDOW: usize = 8;

fn window(frames: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let t = frames.dim(0);
    let len = t.min(DECODER_WINDOW);
    let start = rng.random_range(0..=t - len);
    crate::codec::slice_frames(frames, start, len)
}

/// `[T, C, H, W]` → `[T, C, size, size]` window at `(y0, x0)`.
fn crop_spatial(x: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (t, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    Tensor::from_fn(&[t, c, size, size], |i| {
        let (plane, yy, xx) = (i / (size * size), (i / size) % size, i % size);
        x.data()[(plane * h + y0 + yy) * w + x0 + xx]
    })
    .reshape(&[t, c, size, size])
    .expect("crop keeps its shape")
}

/// L1 between the video decoder's output on degraded-then-encoded clips and
/// the clean clips. Starts from the codec's image decoder. With `crop`,
/// each window is cut to a random `crop x crop` latent patch after encoding
/// the full frames.
pub fn train_video_decoder(
    codec: &Codec,
    clips: &[UnpairedClip],
    degradation: &DegradationConfig,
    crop: Option<usize>,
    tc: &TrainConfig,
    log: &mut TrainLog,
) -> Result<VideoDecoder> {
    tc.validate()?;
    degradation.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("train_video_decoder", "no clips"));
    }
    let mut vd = VideoDecoder::from_codec(codec, tc.seed);
    let mut adam = tc.adam(&vd.params);
    let mut rng = tc.rng(5);
    for step in 0..tc.steps {
        let mut pairs = Vec::with_capacity(tc.batch_size);
        for b in 0..tc.batch_size {
            let clean = window(&clips[rng.random_range(0..clips.len())].frames, &mut rng)?;
            let degraded = degrade(&clean, degradation, derive_seed(tc.seed, &[6, step as u64, b as u64]))?;
            let z = codec.encode_frames(&degraded)?.scale(1.0 / vd.latent_scale);
            let (h, w) = (z.dim(2), z.dim(3));
            match crop.filter(|&c| c < h.min(w)) {
                Some(c) => {
                    let (y0, x0) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
                    let f = codec.factor();
                    pairs.push((crop_spatial(&z, y0, x0, c), crop_spatial(&clean, y0 * f, x0 * f, c * f)));
                }
                None => pairs.push((z, clean)),
            }
        }
        let frozen = vd.decoder.clone();
        let loss = step_with(
            &mut vd.params,
            &mut adam,
            |g, b| {
                let (z, clean) = &pairs[b];
                let zv = g.input(z.clone());
                let out = frozen.forward(g, zv, true)?;
                let target = g.input(clean.clone());
                g.tape.l1(out, target)
            },
            tc.batch_size,
        )?;
        log.record(step, loss)?;
    }
    log.finish()?;
    Ok(vd)
}

/// Mean PSNR against the clean clips of the image decoder and of the video
/// decoder, both fed latents of degraded clips.
pub fn decoder_psnr(
    codec: &Codec,
    vd: &VideoDecoder,
    clips: &[UnpairedClip],
    degradation: &DegradationConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let (mut image, mut video) = (0.0, 0.0);
    for (i, clip) in clips.iter().enumerate() {
        let degraded = degrade(&clip.frames, degradation, derive_seed(seed, &[i as u64]))?;
        let z = codec.encode_frames(&degraded)?;
        image += psnr(&codec.decode_image_frames(&z)?, &clip.frames)?;
        video += psnr(&vd.decode_video(&z)?, &clip.frames)?;
    }
    let n = clips.len().max(1) as f64;
    Ok((image / n, video / n))
}

/// Mean PSNR of plain encode/decode over all frames of `videos`.
pub fn codec_psnr(codec: &Codec, videos: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for v in videos {
        total += psnr(&codec.decode_image_frames(&codec.encode_frames(v)?)?, v)?;
    }
    Ok(total / videos.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_and_ratio() {
        let l = [4.0, 2.0, 2.0, 1.0];
        assert_eq!(smoothed(&l, 2), vec![4.0, 3.0, 2.0, 1.5]);
        assert!((loss_ratio(&l, 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_contract() {
        assert!(TrainConfig { steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
