use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β endpoints for a 1000-step chain; shorter chains scale both by
/// `1000 / T` so the chain still ends close to pure noise.
const REFERENCE_STEPS: f64 = 1000.0;
const REFERENCE_START: f64 = 1e-4;
const REFERENCE_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn linear(steps: usize) -> Self {
        let scale = REFERENCE_STEPS / steps.max(1) as f64;
        let beta_end = (REFERENCE_END * scale).min(0.999);
        ScheduleConfig {
            steps,
            beta_start: (REFERENCE_START * scale).min(beta_end),
            beta_end,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::linear(1000)
    }
}

/// Per-step variances and their cumulative products. Index `t` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_end
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let end = *alpha_bars.last().unwrap();
        if end >= 0.01 {
            return Err(Error::Config(format!(
                "schedule leaves too much signal at t=T (alpha_bar = {end:.4})"
            )));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(&ScheduleConfig::linear(steps))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Config(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        crate::error::ensure_dim("noise", x0.len(), eps.len())?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Visited timesteps for a `count`-step sampler, descending from T.
    pub fn respaced(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::Config(format!("step count {count} outside 1..={t}")));
        }
        let mut ts: Vec<usize> = (1..=count).map(|i| (i * t + count / 2) / count).collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// Interleaved `[sin(t·ω_0), cos(t·ω_0), sin(t·ω_1), …]` with
/// `ω_i = 10000^(−2i/width)`.
pub fn sinusoidal_embed(t: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || !width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding width must be even and positive, got {width}"
        )));
    }
    let mut out = Vec::with_capacity(width);
    for i in 0..width / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / width as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_and_noisy_at_the_end() {
        for steps in [25, 50, 100, 1000] {
            let s = NoiseSchedule::linear(steps).unwrap();
            for t in 2..=steps {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            assert!(s.beta(1) > 0.0 && s.beta(steps) < 1.0);
            assert!(s.alpha_bar(steps) < 0.01);
        }
        let reference = ScheduleConfig::linear(1000);
        assert_eq!((reference.beta_start, reference.beta_end), (1e-4, 0.02));
    }

    #[test]
    fn weak_schedules_are_rejected() {
        let weak = ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        };
        assert!(NoiseSchedule::new(&weak).is_err());
    }

    #[test]
    fn out_of_range_timestep_is_an_error() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert!(s.forward_diffuse(&[1.0], 0, &[0.0]).is_err());
        assert!(s.forward_diffuse(&[1.0], 51, &[0.0]).is_err());
        assert!(s.forward_diffuse(&[1.0], 50, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn respacing_ends_at_t_and_descends() {
        let s = NoiseSchedule::linear(100).unwrap();
        assert_eq!(
            s.respaced(100).unwrap(),
            (1..=100).rev().collect::<Vec<_>>()
        );
        let r = s.respaced(7).unwrap();
        assert_eq!(r[0], 100);
        assert!(r.windows(2).all(|w| w[0] > w[1]));
        assert!(s.respaced(0).is_err() && s.respaced(101).is_err());
    }

    #[test]
    fn embedding_rejects_odd_width() {
        assert!(sinusoidal_embed(1.0, 5).is_err());
    }
}
