//! Noise schedule, signal-space normalization, forward corruption and
//! deterministic DDIM steps over `(start_x, start_y, angle)` triples.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// `(start_x, start_y, angle)`, either normalized to `[0, 1]` or in signal
/// space `[-scale, scale]`.
pub type Triple = [f64; 3];

/// Offset of the cosine schedule.
pub const COSINE_S: f64 = 0.008;

/// Floor on `alpha_bar`; the last steps of a 1000-step schedule fall below it.
pub const ALPHA_BAR_MIN: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("ddim step must move backward in time, got t_now={t_now} t_next={t_next}")]
    NotBackward { t_now: i64, t_next: i64 },
    #[error("time step {t} outside schedule of length {t_max}")]
    OutOfRange { t: i64, t_max: usize },
}

/// Cumulative signal rates `alpha_cumprod[t]` for `t in 0..t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `f(t) / f(0)` with
    /// `f(t) = cos^2(((t / t_max + s) / (1 + s)) * pi / 2)`, clipped into
    /// `[ALPHA_BAR_MIN, 1]`.
    pub fn cosine(t_max: usize) -> Self {
        let t_max = t_max.max(1);
        let f = |t: f64| {
            let v = ((t / t_max as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
            v.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_cumprod = (0..t_max).map(|t| (f(t as f64) / f0).clamp(ALPHA_BAR_MIN, 1.0)).collect();
        Self { alpha_cumprod }
    }

    pub fn t_max(&self) -> usize {
        self.alpha_cumprod.len()
    }

    pub fn alpha_cumprod(&self) -> &[f64] {
        &self.alpha_cumprod
    }

    pub fn alpha_bar(&self, t: i64) -> Result<f64, DiffusionError> {
        usize::try_from(t)
            .ok()
            .and_then(|i| self.alpha_cumprod.get(i).copied())
            .ok_or(DiffusionError::OutOfRange { t, t_max: self.t_max() })
    }
}

/// Multiplier applied to normalized parameters before corruption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleConfig {
    pub noise_scale: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self { noise_scale: 2.0 }
    }
}

impl ScaleConfig {
    pub fn normalize(&self, p: Triple) -> Triple {
        p.map(|v| (v * 2.0 - 1.0) * self.noise_scale)
    }

    /// Inverse of [`normalize`](Self::normalize); out-of-range signals are
    /// clamped first, so the result always lies in `[0, 1]`.
    pub fn denormalize(&self, s: Triple) -> Triple {
        self.clamp_signal(s).map(|v| (v / self.noise_scale + 1.0) / 2.0)
    }

    pub fn clamp_signal(&self, s: Triple) -> Triple {
        let k = self.noise_scale;
        s.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-k, k) })
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn corrupt(x0: Triple, t: i64, eps: Triple, sched: &NoiseSchedule) -> Result<Triple, DiffusionError> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok([0, 1, 2].map(|k| a * x0[k] + b * eps[k]))
}

/// Deterministic (eta = 0) DDIM update from `t_now` to `t_next`.
/// `t_next = -1` is the terminal step and returns the clamped prediction.
pub fn ddim_step(
    x_t: Triple,
    x0_pred: Triple,
    t_now: i64,
    t_next: i64,
    sched: &NoiseSchedule,
    scale: &ScaleConfig,
) -> Result<Triple, DiffusionError> {
    if t_next >= t_now {
        return Err(DiffusionError::NotBackward { t_now, t_next });
    }
    let x0 = scale.clamp_signal(x0_pred);
    let ab_now = sched.alpha_bar(t_now)?;
    if t_next < 0 {
        return Ok(x0);
    }
    let ab_next = sched.alpha_bar(t_next)?;
    let (sa, sb) = (ab_now.sqrt(), (1.0 - ab_now).sqrt());
    Ok([0, 1, 2].map(|k| {
        let eps = (x_t[k] - sa * x0[k]) / sb;
        ab_next.sqrt() * x0[k] + (1.0 - ab_next).sqrt() * eps
    }))
}

/// Consecutive `(t_now, t_next)` pairs from `t_max - 1` down to `-1`.
///
/// `steps` is clamped into `1..=t_max`.
pub fn time_pairs(steps: usize, t_max: usize) -> Vec<(i64, i64)> {
    let t_max = t_max.max(1);
    let steps = steps.clamp(1, t_max);
    let lo = -1.0;
    let hi = t_max as f64 - 1.0;
    let mut times: Vec<i64> = (0..=steps).map(|i| (hi - (hi - lo) * i as f64 / steps as f64).round() as i64).collect();
    times.dedup();
    times.windows(2).map(|w| (w[0], w[1])).collect()
}

/// One standard-normal triple.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R) -> Triple {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}
