//! Noise schedules, the forward process, and the deterministic DDIM reverse
//! sampler with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        const OP: &str = "make_schedule";
        if steps < 2 {
            return Err(Error::invalid(OP, format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                OP,
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"),
            ));
        }
        let betas = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (0..steps).map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).clamp(1e-8, 0.999)).collect()
            }
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("make_schedule", "betas must lie in (0, 1), at least 2 of them"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal level at `t`; `None` denotes the clean end (1).
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(op, format!("timestep {t} out of range 0..{}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t("q_sample", t)?;
    let ab = sched.alpha_bars[t];
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One DDIM update from `t` to `t_prev` (`None` = fully denoised).
/// With `eta > 0` a `noise` tensor of the same shape must be supplied.
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    const OP: &str = "ddim_step";
    sched.check_t(OP, t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::invalid(OP, format!("t_prev {tp} must be below t {t}")));
        }
    }
    let ab_t = sched.alpha_bars[t];
    let ab_p = sched.alpha_bar(t_prev);
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
    } else {
        0.0
    };
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let mut out = x_t.zip_map(eps_pred, |x, e| {
        let x0 = (x as f64 - sb_t * e as f64) / sa_t;
        (ab_p.sqrt() * x0 + dir * e as f64) as f32
    })?;
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::invalid(OP, "eta > 0 requires a noise tensor"))?;
        let scaled = z.scale(sigma as f32);
        out = out.add(&scaled)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_inference_steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "one")]
    pub guidance_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_inference_steps: 50, eta: 0.0, guidance_scale: 1.0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        const OP: &str = "sampler";
        if self.num_inference_steps == 0 || self.num_inference_steps > sched.steps() {
            return Err(Error::invalid(
                OP,
                format!("num_inference_steps {} must be in 1..={}", self.num_inference_steps, sched.steps()),
            ));
        }
        if self.eta < 0.0 {
            return Err(Error::invalid(OP, "eta must be >= 0"));
        }
        if self.guidance_scale < 1.0 {
            return Err(Error::invalid(OP, "guidance_scale must be >= 1"));
        }
        Ok(())
    }
}

/// A network predicting the noise in `x_t`. `conditional = false` asks for
/// the unconditional prediction used by classifier-free guidance.
pub trait Denoiser {
    fn predict_eps(&self, x_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, bool) -> Result<Tensor>,
{
    fn predict_eps(&self, x_t: &Tensor, t: usize, conditional: bool) -> Result<Tensor> {
        self(x_t, t, conditional)
    }
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn guided_eps(eps_cond: &Tensor, eps_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    let s = scale as f32;
    eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))
}

/// Independent child seed for `(base, parts...)`, via the SplitMix64 mix.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Evenly spaced descending timesteps, always starting at `steps - 1`.
pub fn inference_timesteps(steps: usize, n: usize) -> Vec<usize> {
    (0..n).rev().map(|i| ((i + 1) * steps).div_ceil(n) - 1).collect()
}

fn guided_prediction<D: Denoiser + ?Sized>(
    model: &D,
    x: &Tensor,
    t: usize,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    let eps_c = model.predict_eps(x, t, true)?;
    if eps_c.shape() != x.shape() {
        return Err(Error::shape(
            "sample_loop",
            format!("model returned {:?} for input {:?}", eps_c.shape(), x.shape()),
        ));
    }
    if sampler.guidance_scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = model.predict_eps(x, t, false)?;
    guided_eps(&eps_c, &eps_u, sampler.guidance_scale)
}

fn run_chain<D: Denoiser + ?Sized>(
    model: &D,
    mut x: Tensor,
    timesteps: &[usize],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied();
        let eps = guided_prediction(model, &x, t, sampler)?;
        let noise = (sampler.eta > 0.0).then(|| Tensor::randn(x.shape(), 1.0, rng));
        x = ddim_step(&x, &eps, t, t_prev, sched, sampler.eta, noise.as_ref())?;
    }
    Ok(x)
}

/// Full reverse chain from seeded Gaussian noise.
pub fn sample_loop<D: Denoiser + ?Sized>(
    model: &D,
    shape: &[usize],
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    sampler.validate(sched)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(shape, 1.0, &mut rng);
    let ts = inference_timesteps(sched.steps(), sampler.num_inference_steps);
    run_chain(model, x, &ts, sched, sampler, &mut rng)
}

/// Partial reverse chain starting from `init` noised to the timestep at
/// fraction `strength` of the schedule.
pub fn refine_loop<D: Denoiser + ?Sized>(
    model: &D,
    init: &Tensor,
    strength: f64,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    sampler.validate(sched)?;
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::invalid("refine_loop", format!("strength {strength} must be in (0, 1]")));
    }
    let t_start = ((strength * sched.steps() as f64).round() as usize).clamp(1, sched.steps()) - 1;
    let n = sampler.num_inference_steps.min(t_start + 1);
    let ts: Vec<usize> = inference_timesteps(t_start + 1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::randn(init.shape(), 1.0, &mut rng);
    let x = q_sample(init, ts[0], &eps, sched)?;
    run_chain(model, x, &ts, sched, sampler, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_alpha_bars_are_products() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4, 0.1, 0.4).unwrap();
        let want = [0.9, 0.72, 0.504, 0.3024];
        for (a, b) in s.alpha_bars().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", s.alpha_bars());
        }
    }

    #[test]
    fn schedules_are_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(kind, 1000, 1e-4, 2e-2).unwrap();
            assert_eq!(s.alpha_bars()[0], s.alphas()[0]);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn cosine_ends_near_zero() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bars()[999] < 1e-3);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
    }

    fn quarter_schedule() -> NoiseSchedule {
        // alpha_bars [0.5, 0.25]
        NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn q_sample_formula() {
        let s = quarter_schedule();
        let y = q_sample(&Tensor::scalar(1.0), 1, &Tensor::scalar(0.0), &s).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-7);
        let y = q_sample(&Tensor::scalar(0.0), 1, &Tensor::scalar(2.0), &s).unwrap();
        assert!((y.data()[0] - 1.7320508).abs() < 1e-6);
        assert!(q_sample(&Tensor::scalar(0.0), 2, &Tensor::scalar(0.0), &s).is_err());
    }

    #[test]
    fn ddim_rejects_non_monotone_steps() {
        let s = quarter_schedule();
        let x = Tensor::scalar(0.3);
        assert!(ddim_step(&x, &x, 1, Some(1), &s, 0.0, None).is_err());
        assert!(ddim_step(&x, &x, 0, Some(1), &s, 0.0, None).is_err());
    }

    #[test]
    fn timesteps_start_at_the_end() {
        assert_eq!(inference_timesteps(1000, 1), vec![999]);
        assert_eq!(inference_timesteps(4, 4), vec![3, 2, 1, 0]);
        assert_eq!(inference_timesteps(10, 3), vec![9, 6, 3]);
    }

    #[test]
    fn zero_model_single_step() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let zero = |x: &Tensor, _t: usize, _c: bool| Ok(Tensor::zeros(x.shape()));
        let cfg = SamplerConfig { num_inference_steps: 1, ..Default::default() };
        let out = sample_loop(&zero, &[2, 3], &s, &cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let want = x_t.scale((1.0 / s.alpha_bars()[9].sqrt()) as f32);
        assert!(out.max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn model_shape_mismatch_is_error() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 10, 1e-3, 0.2).unwrap();
        let bad = |_x: &Tensor, _t: usize, _c: bool| Ok(Tensor::zeros(&[1]));
        let cfg = SamplerConfig { num_inference_steps: 2, ..Default::default() };
        assert!(sample_loop(&bad, &[2, 3], &s, &cfg, 0).is_err());
    }
}
