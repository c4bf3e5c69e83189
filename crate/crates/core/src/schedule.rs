//! Noise schedules, forward noising and the ε / v target parameterizations.
//!
//! Steps are 1-based: `t = 1` is the least noisy step and `t = T` the most.
//! Step 0 is reserved for the clean sample (ᾱ₀ = 1) in the sampler.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    Epsilon,
    V,
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::V => "v",
        })
    }
}

impl FromStr for Parameterization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "epsilon" | "eps" => Ok(Parameterization::Epsilon),
            "v" | "v_prediction" => Ok(Parameterization::V),
            other => Err(format!("unknown parameterization `{other}` (expected epsilon or v)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sqrt_alpha_bar: Vec<f64>,
    mode: Parameterization,
    zero_snr: bool,
}

impl NoiseSchedule {
    /// Scaled-linear betas: linear in √β from `beta_start` to `beta_end`, then
    /// squared; ᾱ_t is the running product of (1 − β). The mode is v.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Param(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = 1.0;
        let sqrt_alpha_bar = (0..steps)
            .map(|i| {
                let root = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
                alpha_bar *= 1.0 - root * root;
                alpha_bar.sqrt()
            })
            .collect();
        Ok(Self { sqrt_alpha_bar, mode: Parameterization::V, zero_snr: false })
    }

    /// A schedule from explicit √ᾱ values (t = 1..T).
    pub fn from_sqrt_alpha_bar(values: Vec<f64>, mode: Parameterization) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Param("schedule needs at least 2 steps".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Param("√ᾱ values must lie in [0, 1]".into()));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Param("√ᾱ must be strictly decreasing".into()));
        }
        let zero_snr = *values.last().expect("non-empty") == 0.0;
        if zero_snr && mode == Parameterization::Epsilon {
            return Err(Error::Param("a zero terminal SNR schedule requires v mode".into()));
        }
        Ok(Self { sqrt_alpha_bar: values, mode, zero_snr })
    }

    pub fn with_mode(mut self, mode: Parameterization) -> Result<Self> {
        if self.zero_snr && mode == Parameterization::Epsilon {
            return Err(Error::Param("epsilon mode is singular at zero terminal SNR; use v".into()));
        }
        self.mode = mode;
        Ok(self)
    }

    /// Shifts and scales √ᾱ so the last step is exactly zero while the first
    /// step keeps its value.
    pub fn rescale_zero_terminal_snr(&self) -> Result<Self> {
        if self.mode == Parameterization::Epsilon {
            return Err(Error::Param("epsilon mode is singular at zero terminal SNR; use v".into()));
        }
        let first = self.sqrt_alpha_bar[0];
        let last = *self.sqrt_alpha_bar.last().expect("non-empty");
        if first <= last {
            return Err(Error::DegenerateSchedule(format!("√ᾱ_1 = {first} does not exceed √ᾱ_T = {last}")));
        }
        let gain = first / (first - last);
        let mut values: Vec<f64> = self.sqrt_alpha_bar.iter().map(|s| (s - last) * gain).collect();
        values[0] = first;
        *values.last_mut().expect("non-empty") = 0.0;
        Ok(Self { sqrt_alpha_bar: values, mode: self.mode, zero_snr: true })
    }

    pub fn steps(&self) -> usize {
        self.sqrt_alpha_bar.len()
    }

    pub fn mode(&self) -> Parameterization {
        self.mode
    }

    pub fn zero_snr(&self) -> bool {
        self.zero_snr
    }

    pub fn sqrt_alpha_bars(&self) -> &[f64] {
        &self.sqrt_alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Param(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// (√ᾱ_t, √(1 − ᾱ_t)); step 0 is the clean sample.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 {
            return Ok((1.0, 0.0));
        }
        self.check_step(t)?;
        let s = self.sqrt_alpha_bar[t - 1];
        Ok((s, (1.0 - s * s).max(0.0).sqrt()))
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        let (s, _) = self.coefficients(t)?;
        Ok(s * s)
    }

    /// ᾱ_t / (1 − ᾱ_t).
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }

    /// z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let (s, n) = self.coefficients(t)?;
        z0.scale(s).add(&eps.scale(n))
    }

    /// The regression target: ε itself, or v = √ᾱ_t·ε − √(1−ᾱ_t)·z0.
    pub fn prediction_target(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
        }
        match self.mode {
            Parameterization::Epsilon => Ok(eps.clone()),
            Parameterization::V => {
                let (s, n) = self.coefficients(t)?;
                eps.scale(s).sub(&z0.scale(n))
            }
        }
    }

    /// Inverts the parameterization to estimate the clean sample.
    pub fn reconstruct_z0(&self, z_t: &Tensor, pred: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        let (s, n) = self.coefficients(t)?;
        match self.mode {
            Parameterization::V => z_t.scale(s).sub(&pred.scale(n)),
            Parameterization::Epsilon => {
                if s == 0.0 {
                    return Err(Error::SingularStep(format!("ᾱ_{t} = 0 cannot be inverted in epsilon mode")));
                }
                Ok(z_t.sub(&pred.scale(n))?.scale(1.0 / s))
            }
        }
    }

    /// Noise estimate implied by a model output.
    pub fn reconstruct_eps(&self, z_t: &Tensor, pred: &Tensor, t: usize) -> Result<Tensor> {
        self.check_step(t)?;
        match self.mode {
            Parameterization::Epsilon => Ok(pred.clone()),
            Parameterization::V => {
                let (s, n) = self.coefficients(t)?;
                pred.scale(s).add(&z_t.scale(n))
            }
        }
    }

    /// `k` sampling steps spaced from `T` downward, starting exactly at `T`.
    pub fn trailing_timesteps(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.steps() {
            return Err(Error::Param(format!("sampling steps must be in 1..={}, got {k}", self.steps())));
        }
        let total = self.steps() as f64;
        let mut ts: Vec<usize> = (0..k).map(|i| (total - i as f64 * total / k as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }

    /// Deterministic DDIM update from step `t` to `t_prev` (0 = clean).
    pub fn ddim_step(&self, z_t: &Tensor, pred: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
        if t_prev >= t {
            return Err(Error::Param(format!("t_prev {t_prev} must precede t {t}")));
        }
        let z0 = self.reconstruct_z0(z_t, pred, t)?;
        if t_prev == 0 {
            return Ok(z0);
        }
        let eps = self.reconstruct_eps(z_t, pred, t)?;
        let (s, n) = self.coefficients(t_prev)?;
        z0.scale(s).add(&eps.scale(n))
    }
}
