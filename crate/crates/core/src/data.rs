//! Synthetic clips with analytic motion, clip-directory IO, and the frame
//! bookkeeping used to build training pairs.
//!
//! Clip directory layout: `frame_%05d.ppm` (binary P6, maxval 255) plus
//! `meta.json` with `{"fps": int, "caption": string}`. Synthetic clips also
//! carry `scene.json`, the scene description their analytic flow is derived
//! from.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::resize::box_downsample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, 3, H, W]` in `[-1, 1]`.
    pub frames: Tensor,
    pub fps: u32,
    pub caption: Option<String>,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: u32, caption: Option<String>) -> Result<Self> {
        if frames.rank() != 4 || frames.dim(1) != 3 {
            return Err(Error::shape("video_clip", format!("frames must be [T,3,H,W], got {:?}", frames.shape())));
        }
        if fps == 0 {
            return Err(Error::invalid("video_clip", "fps must be >= 1"));
        }
        Ok(VideoClip { frames, fps, caption })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn height(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(3)
    }

    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        check_divisible(self.height(), self.width(), factor)
    }
}

pub fn check_divisible(h: usize, w: usize, factor: usize) -> Result<()> {
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "clip",
            format!(
                "frame size {h}x{w} is not divisible by the codec factor {factor}; \
                 crop or resize frames to a multiple of {factor} (e.g. {}x{})",
                h / factor * factor,
                w / factor * factor
            ),
        ));
    }
    Ok(())
}

/// A clip without its caption, for the components trained on unpaired
/// video. Synthetic clips keep their scene so flow targets can be derived.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedClip {
    pub frames: Tensor,
    pub fps: u32,
    pub scene: Option<SyntheticSceneSpec>,
}

impl VideoClip {
    pub fn unpaired(&self, scene: Option<SyntheticSceneSpec>) -> UnpairedClip {
        UnpairedClip { frames: self.frames.clone(), fps: self.fps, scene }
    }
}

/// The reference image used for training: frame 0, unmodified.
pub fn first_frame_reference(clip: &VideoClip) -> Tensor {
    clip.frames.index0(0)
}

// ---------------------------------------------------------------------------
// synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub size: f32,
    pub color: [f32; 3],
    /// Top-left corner `(x, y)` at frame 0, in pixels.
    pub start: [f32; 2],
    /// Pixels per frame.
    pub velocity: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SceneObject>,
    pub background: [f32; 3],
    /// Amplitude of the static seeded background pattern (0 = flat).
    #[serde(default)]
    pub texture: f32,
    pub frames: usize,
    pub fps: u32,
}

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, -0.8, -0.8]),
    ("green", [-0.8, 0.8, -0.8]),
    ("blue", [-0.8, -0.6, 0.9]),
    ("yellow", [0.9, 0.8, -0.8]),
    ("cyan", [-0.8, 0.8, 0.9]),
    ("magenta", [0.9, -0.8, 0.9]),
    ("white", [0.9, 0.9, 0.9]),
    ("orange", [0.9, 0.1, -0.9]),
];

fn color_name(c: [f32; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let d = |p: [f32; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f32>();
            d(a.1).total_cmp(&d(b.1))
        })
        .map(|p| p.0)
        .unwrap()
}

fn direction(v: [f32; 2]) -> &'static str {
    let (vx, vy) = (v[0], v[1]);
    if vx == 0.0 && vy == 0.0 {
        "standing still"
    } else if vx.abs() >= vy.abs() {
        if vx > 0.0 { "moving right" } else { "moving left" }
    } else if vy > 0.0 {
        "moving down"
    } else {
        "moving up"
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "synthetic_scene";
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.fps == 0 {
            return Err(Error::invalid(OP, "height, width, frames and fps must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let finite = o.velocity.iter().chain(&o.start).all(|v| v.is_finite());
            if !finite || !(o.size > 0.0) {
                return Err(Error::invalid(OP, format!("object {i}: non-finite motion or size <= 0")));
            }
        }
        Ok(())
    }

    /// Top-left corner of object `i` at (possibly fractional) time `t`,
    /// clamped to keep the shape on the canvas.
    pub fn position(&self, i: usize, t: f32) -> [f32; 2] {
        let o = &self.objects[i];
        let x = (o.start[0] + t * o.velocity[0]).clamp(0.0, (self.width as f32 - o.size).max(0.0));
        let y = (o.start[1] + t * o.velocity[1]).clamp(0.0, (self.height as f32 - o.size).max(0.0));
        [x, y]
    }

    fn covers(&self, i: usize, t: f32, px: usize, py: usize) -> bool {
        let o = &self.objects[i];
        let [x, y] = self.position(i, t);
        match o.kind {
            ShapeKind::Square => {
                let (fx, fy) = (px as f32, py as f32);
                fx >= x && fx < x + o.size && fy >= y && fy < y + o.size
            }
            ShapeKind::Circle => {
                let r = o.size / 2.0;
                let dx = px as f32 + 0.5 - (x + r);
                let dy = py as f32 + 0.5 - (y + r);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    /// Index of the topmost object covering a pixel at time `t`.
    pub fn top_object(&self, t: f32, px: usize, py: usize) -> Option<usize> {
        (0..self.objects.len()).rev().find(|&i| self.covers(i, t, px, py))
    }

    pub fn caption(&self) -> String {
        if self.objects.is_empty() {
            return "an empty scene".into();
        }
        self.objects
            .iter()
            .map(|o| {
                let kind = match o.kind {
                    ShapeKind::Square => "square",
                    ShapeKind::Circle => "circle",
                };
                format!("{} {kind} {}", color_name(o.color), direction(o.velocity))
            })
            .collect::<Vec<_>>()
            .join(" and ")
    }

    fn background_pattern(&self, seed: u64) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p1, p2): (f32, f32) = (rng.random_range(0.0..6.28), rng.random_range(0.0..6.28));
        let (k1, k2): (f32, f32) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let mut bg = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 / w as f32 * std::f32::consts::TAU;
                    let v = y as f32 / h as f32 * std::f32::consts::TAU;
                    let pat = (k1 * u + p1 + c as f32).sin() * 0.5 + (k2 * v + p2).cos() * 0.5;
                    bg[(c * h + y) * w + x] = self.background[c] + self.texture * pat;
                }
            }
        }
        Tensor::from_parts(vec![3, h, w], bg)
    }

    /// Frame at time `t` as `[3, H, W]`.
    pub fn render(&self, t: f32, seed: u64) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut img = self.background_pattern(seed);
        for y in 0..h {
            for x in 0..w {
                if let Some(i) = self.top_object(t, x, y) {
                    for c in 0..3 {
                        img.data_mut()[(c * h + y) * w + x] = self.objects[i].color[c];
                    }
                }
            }
        }
        img
    }

    /// Backward-warp displacement that samples frame `t_source` to build
    /// frame `t_target`: on pixels covered at `t_target` it is the object's
    /// displacement between the two times, elsewhere zero. `[2, H, W]`.
    pub fn sampling_flow(&self, t_target: f32, t_source: f32) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut flow = vec![0.0f32; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                if let Some(i) = self.top_object(t_target, x, y) {
                    let (a, b) = (self.position(i, t_target), self.position(i, t_source));
                    flow[y * w + x] = b[0] - a[0];
                    flow[h * w + y * w + x] = b[1] - a[1];
                }
            }
        }
        Tensor::from_parts(vec![2, h, w], flow)
    }

    /// Per-step motion `k -> k+1`: each object's velocity on the pixels it
    /// covers at `k+1`, zero elsewhere.
    pub fn motion_flows(&self) -> Vec<Tensor> {
        (0..self.frames.saturating_sub(1))
            .map(|k| self.sampling_flow(k as f32 + 1.0, k as f32).scale(-1.0))
            .collect()
    }
}

/// Pixel flow averaged over `f x f` blocks and rescaled to latent pixels.
pub fn to_latent_flow(pixel_flow: &Tensor, factor: usize) -> Result<Tensor> {
    Ok(box_downsample(pixel_flow, factor)?.scale(1.0 / factor as f32))
}

/// Analytic per-step motion in latent units.
pub fn make_flow_target(scene: &SyntheticSceneSpec, factor: usize) -> Result<Vec<Tensor>> {
    scene.motion_flows().iter().map(|f| to_latent_flow(f, factor)).collect()
}

/// A synthetic clip, its per-step pixel motion, and its caption.
pub struct SyntheticClip {
    pub clip: VideoClip,
    pub flows: Vec<Tensor>,
    pub caption: String,
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticClip> {
    spec.validate()?;
    let frames: Vec<Tensor> = (0..spec.frames).map(|t| spec.render(t as f32, seed)).collect();
    let caption = spec.caption();
    Ok(SyntheticClip {
        clip: VideoClip::new(Tensor::stack(&frames)?, spec.fps, Some(caption.clone()))?,
        flows: spec.motion_flows(),
        caption,
    })
}

/// Parameters for drawing random scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: u32,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Candidate per-axis speeds in pixels per frame (sign chosen at random).
    pub speeds: Vec<f32>,
    /// Probability that a scene is entirely static.
    pub static_prob: f64,
    pub texture: f32,
}

impl SceneSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticSceneSpec {
        let n_obj = rng.random_range(1..=self.max_objects.max(1));
        let is_static = rng.random_bool(self.static_prob.clamp(0.0, 1.0));
        let span = (self.frames.saturating_sub(1)) as f32;
        let bg_idx = rng.random_range(0..3);
        let background = [[-0.6, -0.6, -0.5], [-0.3, -0.5, -0.7], [-0.5, -0.2, -0.4]][bg_idx];
        let objects = (0..n_obj)
            .map(|_| {
                let size = rng.random_range(self.min_size..=self.max_size) as f32;
                let kind = if rng.random_bool(0.5) { ShapeKind::Square } else { ShapeKind::Circle };
                let color = PALETTE[rng.random_range(0..PALETTE.len())].1;
                let mut velocity = [0.0f32; 2];
                if !is_static && !self.speeds.is_empty() {
                    // move mostly along one axis so captions stay unambiguous
                    let axis = rng.random_range(0..2);
                    let speed = self.speeds[rng.random_range(0..self.speeds.len())];
                    velocity[axis] = if rng.random_bool(0.5) { speed } else { -speed };
                }
                let extent = [self.width as f32, self.height as f32];
                let mut start = [0.0f32; 2];
                for a in 0..2 {
                    let travel = velocity[a] * span;
                    let lo = (-travel).max(0.0);
                    let hi = extent[a] - size - travel.max(0.0);
                    if hi < lo {
                        velocity[a] = 0.0;
                        start[a] = rng.random_range(0.0..=(extent[a] - size).max(0.0)).floor();
                    } else {
                        start[a] = rng.random_range(lo..=hi).floor();
                    }
                }
                SceneObject { kind, size, color, start, velocity }
            })
            .collect();
        SyntheticSceneSpec {
            height: self.height,
            width: self.width,
            objects,
            background,
            texture: self.texture,
            frames: self.frames,
            fps: self.fps,
        }
    }
}

/// A clip plus the scene it was rendered from.
pub struct CorpusItem {
    pub clip: VideoClip,
    pub scene: SyntheticSceneSpec,
    pub seed: u64,
}

pub fn make_corpus(sampler: &SceneSampler, count: usize, seed: u64) -> Result<Vec<CorpusItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = sampler.sample(&mut rng);
            let clip_seed = rng.random();
            let clip = generate_synthetic(&scene, clip_seed)?.clip;
            Ok(CorpusItem { clip, scene, seed: clip_seed })
        })
        .collect()
}

/// Frame indices for temporal super-resolution pairs with stride 2: the
/// kept low-rate frames and the skipped in-between frames.
pub fn tsr_indices(num_frames: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_frames < 3 {
        return Err(Error::invalid("make_tsr_pairs", format!("need at least 3 frames, got {num_frames}")));
    }
    if num_frames % 2 == 0 {
        return Err(Error::invalid(
            "make_tsr_pairs",
            format!("need an odd frame count so every low-rate pair has a midframe, got {num_frames}"),
        ));
    }
    Ok(((0..num_frames).step_by(2).collect(), (1..num_frames).step_by(2).collect()))
}

/// The stride-2 low-rate clip (half the fps) and the skipped frames.
pub fn split_low_high(clip: &VideoClip) -> Result<(VideoClip, Tensor)> {
    let (low, mid) = tsr_indices(clip.num_frames())?;
    let pick = |idx: &[usize]| Tensor::stack(&idx.iter().map(|&i| clip.frames.index0(i)).collect::<Vec<_>>());
    let low_clip = VideoClip { frames: pick(&low)?, fps: (clip.fps / 2).max(1), caption: None };
    Ok((low_clip, pick(&mid)?))
}

/// Low-rate latents and the latents of the frames between them.
#[derive(Clone, Debug)]
pub struct TsrPairs {
    /// `[n, C, h, w]` from frames `0, 2, 4, ...`.
    pub low: Tensor,
    /// `[n - 1, C, h, w]` from frames `1, 3, ...`.
    pub targets: Tensor,
    pub low_fps: u32,
}

/// Stride-2 split of a clip, both halves encoded.
pub fn make_tsr_pairs(clip: &UnpairedClip, codec: &crate::codec::Codec) -> Result<TsrPairs> {
    let (low_idx, mid_idx) = tsr_indices(clip.frames.dim(0))?;
    let pick = |idx: &[usize]| Tensor::stack(&idx.iter().map(|&i| clip.frames.index0(i)).collect::<Vec<_>>());
    Ok(TsrPairs {
        low: codec.encode_frames(&pick(&low_idx)?)?,
        targets: codec.encode_frames(&pick(&mid_idx)?)?,
        low_fps: (clip.fps / 2).max(1),
    })
}

// ---------------------------------------------------------------------------
// clip directories

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: u32,
    pub caption: String,
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.ppm"))
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Binary P6 encoding of a `[3, H, W]` image in `[-1, 1]`.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.rank() != 3 || img.dim(0) != 3 {
        return Err(Error::shape("ppm", format!("expected [3,H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(img.data()[(c * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("PPM maxval must be 255"));
    }
    if w == 0 || h == 0 {
        return Err(bad("empty PPM"));
    }
    pos += 1; // single whitespace byte after maxval
    let px = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("PPM pixel data truncated"))?;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = from_byte(px[(y * w + x) * 3 + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    decode_ppm(&bytes, path)
}

/// Write frames and metadata into `dir` (created if needed).
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    for t in 0..clip.num_frames() {
        write_image(&frame_path(dir, t), &clip.frames.index0(t))?;
    }
    let meta = ClipMeta { fps: clip.fps, caption: clip.caption.clone().unwrap_or_default() };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), json).map_err(|e| Error::io(format!("write {}/meta.json", dir.display()), e))
}

pub fn save_scene(scene: &SyntheticSceneSpec, dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(scene).expect("scene serializes");
    fs::write(dir.join("scene.json"), json).map_err(|e| Error::io(format!("write {}/scene.json", dir.display()), e))
}

pub fn load_scene(dir: &Path) -> Result<Option<SyntheticSceneSpec>> {
    let path = dir.join("scene.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, e.to_string()))
}

/// Load a clip directory; frames must be numbered contiguously from 0 and
/// their size divisible by `factor`.
pub fn load_clip(dir: &Path, factor: usize) -> Result<VideoClip> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(format!("read {}", meta_path.display()), e))?;
    let meta: ClipMeta = serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("list {}", dir.display()), e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("list {}", dir.display()), e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".ppm")) {
            let i: usize = idx.parse().map_err(|_| Error::format(entry.path(), "frame index is not a number"))?;
            indices.push(i);
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::format(dir, "no frame_%05d.ppm files"));
    }
    for (expect, &got) in indices.iter().enumerate() {
        if got != expect {
            return Err(Error::format(dir, format!("missing frame index {expect} (next present index is {got})")));
        }
    }
    let frames: Vec<Tensor> = indices.iter().map(|&i| read_image(&frame_path(dir, i))).collect::<Result<_>>()?;
    let first = frames[0].shape().to_vec();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != first.as_slice()) {
        return Err(Error::format(frame_path(dir, i), format!("size {:?} differs from frame 0 {:?}", f.shape(), first)));
    }
    check_divisible(first[1], first[2], factor)?;
    let caption = (!meta.caption.is_empty()).then_some(meta.caption);
    VideoClip::new(Tensor::stack(&frames)?, meta.fps, caption)
}
