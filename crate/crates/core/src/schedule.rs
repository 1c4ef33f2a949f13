//! Discrete diffusion noise schedules and the noise-level/timestep mapping.

use crate::error::{domain, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(crate::Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return domain(format!("schedule needs T >= 2, got {steps}"));
        }
        let t_max = steps as f64;
        let alpha_bar = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let phase = (t / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
                    phase.cos().powi(2)
                };
                let f0 = f(0.0);
                (0..=steps).map(|t| f(t as f64) / f0).collect()
            }
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 0.02);
                let mut acc = 1.0;
                let mut table = Vec::with_capacity(steps + 1);
                table.push(1.0);
                for i in 1..=steps {
                    let beta = lo + (hi - lo) * (i - 1) as f64 / (steps - 1) as f64;
                    acc *= 1.0 - beta;
                    table.push(acc);
                }
                table
            }
        };
        Self::from_alpha_bar(alpha_bar)
    }

    /// Wraps an explicit table; it must start at (numerically) one, decrease
    /// strictly and stay positive.
    pub fn from_alpha_bar(mut alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return domain("schedule table needs at least two entries");
        }
        if (alpha_bar[0] - 1.0).abs() > 1e-9 {
            return domain(format!("alpha_bar[0] = {} is not 1", alpha_bar[0]));
        }
        alpha_bar[0] = 1.0;
        // The cosine formula hits exactly zero at t = T; keep the tail invertible.
        let last = alpha_bar.len() - 1;
        if alpha_bar[last] <= 0.0 {
            alpha_bar[last] = (alpha_bar[last - 1] * 0.5).max(f64::MIN_POSITIVE);
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return domain("alpha_bar must be strictly decreasing and positive");
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Number of diffusion steps `T`; valid timesteps are `0..=T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn table(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Noise-to-signal ratio `sqrt((1 - alpha_bar)/alpha_bar)` at `t`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        let a = self.alpha_bar[t];
        ((1.0 - a) / a).sqrt()
    }
}

/// Result of matching a smoothing noise level onto the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimestepMatch {
    pub t_hat: usize,
    pub alpha_bar_t: f64,
    /// `|(1 - alpha_bar)/alpha_bar - sigma^2|` at `t_hat`.
    pub residual: f64,
}

/// Multiplier on the conditioning timestep of the self-conditioned denoiser.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorrectionFactor(f64);

impl CorrectionFactor {
    pub fn new(k: f64) -> Result<Self> {
        if k > 0.0 && k.is_finite() {
            Ok(Self(k))
        } else {
            domain(format!("correction factor must be positive, got {k}"))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for CorrectionFactor {
    fn default() -> Self {
        Self(1.8)
    }
}

/// `alpha_bar` whose noise-to-signal ratio equals `sigma`: `1/(1 + sigma^2)`.
pub fn sigma_to_alpha(sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return domain(format!("sigma must be non-negative, got {sigma}"));
    }
    Ok(1.0 / (1.0 + sigma * sigma))
}

/// Linear scan for the timestep whose noise-to-signal ratio is closest to `sigma^2`.
/// Ties go to the smaller timestep.
pub fn sigma_to_timestep(schedule: &NoiseSchedule, sigma: f64) -> Result<TimestepMatch> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return domain(format!("sigma must be positive, got {sigma}"));
    }
    let target = sigma * sigma;
    let mut best = TimestepMatch { t_hat: 0, alpha_bar_t: 1.0, residual: f64::INFINITY };
    for (t, &a) in schedule.table().iter().enumerate() {
        let residual = ((1.0 - a) / a - target).abs();
        if residual < best.residual {
            best = TimestepMatch { t_hat: t, alpha_bar_t: a, residual };
        }
    }
    Ok(best)
}

/// `clamp(round(k * t_hat), 0, T)`.
pub fn corrected_timestep(t_hat: usize, k: CorrectionFactor, steps: usize) -> usize {
    let scaled = (k.get() * t_hat as f64).round();
    if scaled >= steps as f64 {
        steps
    } else {
        scaled.max(0.0) as usize
    }
}

/// Noise level in `[-1, 1]` model space for a level given in `[0, 1]` input space.
pub fn effective_sigma(sigma_unit: f64) -> Result<f64> {
    if !(sigma_unit >= 0.0) {
        return domain(format!("sigma must be non-negative, got {sigma_unit}"));
    }
    Ok(2.0 * sigma_unit)
}
