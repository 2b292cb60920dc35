//! Noise schedules for the forward diffusion process.
//!
//! Timesteps are 1-based: `beta(t)` is defined for `t` in `1..=T`, and the
//! cumulative product `alpha_bar` is extended with `alpha_bar_level(0) == 1`
//! so boundary formulas hold at the clean-data end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` at t=1 to `beta_end` at t=T.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= 1.0 && beta_end > 0.0 && beta_end <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "betas must lie in (0, 1], got start={beta_start}, end={beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidSchedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas = if t_steps == 1 {
            vec![beta_start]
        } else {
            (0..t_steps)
                .map(|i| {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                })
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, enforcing the type invariants.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta_{} = {} outside (0, 1]",
                    i + 1,
                    b
                )));
            }
            if i > 0 && betas[i - 1] >= b {
                return Err(Error::InvalidSchedule(format!(
                    "betas must be strictly increasing, violated at t={}",
                    i + 1
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        if alpha_bars.iter().any(|&ab| !(ab > 0.0 && ab < 1.0)) {
            return Err(Error::InvalidSchedule(
                "alpha_bar left (0, 1); schedule too aggressive".into(),
            ));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Test-only constructor that skips the monotonicity checks, used to pin
    /// formula values at hand-picked (alpha, alpha_bar) operating points.
    #[cfg(test)]
    pub(crate) fn from_betas_unchecked(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.t_steps(),
            });
        }
        Ok(())
    }

    /// `beta_t` for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to t, for t in 1..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `alpha_bar` extended to level 0, where it is 1 by definition.
    pub fn alpha_bar_level(&self, level: usize) -> f64 {
        if level == 0 {
            1.0
        } else {
            self.alpha_bars[level - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}
