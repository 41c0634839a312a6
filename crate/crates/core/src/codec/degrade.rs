//! Synthetic degradations for training the video decoder: Gaussian blur,
//! additive Gaussian noise, and blockwise uniform quantization as a stand-in
//! for lossy compression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::lowpass_gaussian;
use crate::tensor::Tensor;

pub const QUANT_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    /// Inclusive range the per-clip noise std is drawn from.
    pub noise_sigma: [f32; 2],
    /// Inclusive range the per-clip blur std (pixels) is drawn from.
    pub blur_sigma: [f32; 2],
    pub quant_levels: Option<usize>,
    /// Chance that quantization is applied to a clip.
    #[serde(default = "one")]
    pub quant_prob: f64,
}

fn one() -> f64 {
    1.0
}

impl DegradationConfig {
    pub fn off() -> Self {
        DegradationConfig { noise_sigma: [0.0, 0.0], blur_sigma: [0.0, 0.0], quant_levels: None, quant_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "degradation_config";
        for (name, r) in [("noise_sigma", self.noise_sigma), ("blur_sigma", self.blur_sigma)] {
            if !(r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(Error::invalid(OP, format!("{name} must be a range 0 <= lo <= hi, got {r:?}")));
            }
        }
        if matches!(self.quant_levels, Some(l) if l < 2) {
            return Err(Error::invalid(OP, "quant_levels must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.quant_prob) {
            return Err(Error::invalid(OP, "quant_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig { noise_sigma: [0.05, 0.2], blur_sigma: [1.0, 2.0], quant_levels: Some(4), quant_prob: 0.5 }
    }
}

/// The parameters drawn for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationDraw {
    pub noise_sigma: f32,
    pub blur_sigma: f32,
    pub quant_levels: Option<usize>,
}

fn draw_range<R: Rng>(rng: &mut R, r: [f32; 2]) -> f32 {
    if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..=r[1]) }
}

impl DegradationConfig {
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DegradationDraw {
        let noise_sigma = draw_range(rng, self.noise_sigma);
        let blur_sigma = draw_range(rng, self.blur_sigma);
        let quant_levels = self.quant_levels.filter(|_| rng.random_bool(self.quant_prob));
        DegradationDraw { noise_sigma, blur_sigma, quant_levels }
    }
}

/// Uniform quantization to `levels` values between each block's per-channel
/// min and max. Operates on the last two axes.
pub fn quantize_blocks(input: &Tensor, levels: usize) -> Result<Tensor> {
    if levels < 2 {
        return Err(Error::invalid("quantize_blocks", "levels must be >= 2"));
    }
    if input.rank() < 2 {
        return Err(Error::shape("quantize_blocks", format!("need [..., H, W], got {:?}", input.shape())));
    }
    let (h, w) = (input.dim(input.rank() - 2), input.dim(input.rank() - 1));
    let mut out = input.clone();
    let steps = (levels - 1) as f32;
    for plane in out.data_mut().chunks_mut(h * w) {
        for by in (0..h).step_by(QUANT_BLOCK) {
            for bx in (0..w).step_by(QUANT_BLOCK) {
                let (ye, xe) = ((by + QUANT_BLOCK).min(h), (bx + QUANT_BLOCK).min(w));
                let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                for y in by..ye {
                    for &v in &plane[y * w + bx..y * w + xe] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if hi <= lo {
                    continue;
                }
                let span = hi - lo;
                for y in by..ye {
                    for v in &mut plane[y * w + bx..y * w + xe] {
                        *v = lo + ((*v - lo) / span * steps).round() / steps * span;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Blur, then noise, then quantize `video [T, 3, H, W]`, with one parameter
/// draw shared by every frame. Values are not clamped.
pub fn degrade(video: &Tensor, cfg: &DegradationConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    video.expect_rank("degrade", 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.draw(&mut rng);
    let mut out = video.clone();
    if d.blur_sigma > 0.0 {
        out = lowpass_gaussian(&out, d.blur_sigma)?;
    }
    if d.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, d.noise_sigma).expect("sigma is finite and positive");
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    if let Some(levels) = d.quant_levels {
        out = quantize_blocks(&out, levels)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video() -> Tensor {
        Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0)
    }

    #[test]
    fn off_is_bitwise_identity() {
        let v = video();
        assert_eq!(degrade(&v, &DegradationConfig::off(), 5).unwrap(), v);
    }

    #[test]
    fn deterministic_given_seed() {
        let v = video();
        let cfg = DegradationConfig::default();
        assert_eq!(degrade(&v, &cfg, 9).unwrap(), degrade(&v, &cfg, 9).unwrap());
    }

    #[test]
    fn noise_std_matches() {
        let v = Tensor::zeros(&[1, 1, 100, 100]);
        let cfg = DegradationConfig { noise_sigma: [0.1, 0.1], ..DegradationConfig::off() };
        let out = degrade(&v, &cfg, 1).unwrap();
        let mean = out.mean();
        let var = out.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / out.numel() as f64;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn two_levels_give_two_values_per_block() {
        let ramp = Tensor::from_fn(&[3, 8, 8], |i| (i % 64) as f32 / 63.0 * 2.0 - 1.0);
        let q = quantize_blocks(&ramp, 2).unwrap();
        for c in 0..3 {
            let mut vals: Vec<f32> = q.data()[c * 64..(c + 1) * 64].to_vec();
            vals.sort_by(f32::total_cmp);
            vals.dedup();
            assert_eq!(vals, vec![-1.0, 1.0]);
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        let cfg = DegradationConfig { noise_sigma: [0.3, 0.1], ..DegradationConfig::off() };
        assert!(cfg.validate().is_err());
    }
}
