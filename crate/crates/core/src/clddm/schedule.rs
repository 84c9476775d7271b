use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

/// Variance schedule of the forward noising process. Timesteps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Betas evenly spaced from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            bail!(Config, "betas must lie in (0, 1)");
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            bail!(Config, "betas must be non-decreasing");
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            bail!(Input, "timestep {t} outside 1..={}", self.len());
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`, elementwise.
    pub fn q_sample<S: Scalar>(&self, z0: &[S], t: usize, eps: &[S]) -> Result<Vec<S>> {
        if z0.len() != eps.len() {
            bail!(Dimension, "z0 has {} values, eps {}", z0.len(), eps.len());
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
        Ok(z0.iter().zip(eps).map(|(&z, &e)| a * z + b * e).collect())
    }

    /// Row-wise `q_sample` of `[B, L]` with one timestep per row.
    pub fn q_sample_rows<S: Scalar>(&self, z0: &Tensor<S>, t: &[usize], eps: &Tensor<S>) -> Result<Tensor<S>> {
        if z0.rank() != 2 || z0.shape() != eps.shape() || t.len() != z0.shape()[0] {
            bail!(Dimension, "q_sample rows: z0 {:?}, eps {:?}, {} timesteps", z0.shape(), eps.shape(), t.len());
        }
        let mut out = Vec::with_capacity(z0.len());
        for (i, &ti) in t.iter().enumerate() {
            out.extend(self.q_sample(z0.row(i), ti, eps.row(i))?);
        }
        Tensor::new(z0.shape(), out)
    }

    /// Evenly spaced subsequence of `steps` timesteps ending at `T`, each with
    /// its cumulative `abar`. `steps == T` keeps every step.
    pub fn respaced(&self, steps: usize) -> Result<Vec<(usize, f64)>> {
        if steps == 0 || steps > self.len() {
            bail!(Config, "sampling steps {steps} must be in 1..={}", self.len());
        }
        let t = self.len();
        Ok((1..=steps)
            .map(|i| {
                let ti = (i * t + steps / 2) / steps;
                (ti, self.alpha_bars[ti - 1])
            })
            .collect())
    }
}
