//! Variance schedules for the forward noising process.
//!
//! `alpha_bars[t]` is the cumulative product `prod_{s<=t} (1 - beta_s)`, with
//! `alpha_bars[0] = 1` so that step 1 needs no special case. Some write-ups
//! call this product `alpha_t`; the `_bars` suffix here avoids confusing it
//! with the per-step `1 - beta_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COSINE_OFFSET: f64 = 0.008;
pub const COSINE_BETA_CLIP: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Everything needed to rebuild a schedule exactly; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleSpec {
    Linear { steps: usize, beta_start: f64, beta_end: f64 },
    Cosine { steps: usize, offset: f64, beta_clip: f64 },
}

impl ScheduleSpec {
    /// The default parameters for a kind: 1e-4..0.02 for linear, s = 0.008 and clip 0.999 for cosine.
    pub fn standard(kind: ScheduleKind, steps: usize) -> Self {
        match kind {
            ScheduleKind::Linear => Self::Linear { steps, beta_start: 1e-4, beta_end: 0.02 },
            ScheduleKind::Cosine => Self::Cosine { steps, offset: COSINE_OFFSET, beta_clip: COSINE_BETA_CLIP },
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            Self::Linear { steps, beta_start, beta_end } => linear_schedule(steps, beta_start, beta_end),
            Self::Cosine { steps, offset, beta_clip } => cosine_schedule(steps, offset, beta_clip),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        let mut one_minus_alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        one_minus_alpha_bars.push(0.0);
        for (t, &b) in betas.iter().enumerate() {
            alpha_bars.push(alpha_bars[t] * (1.0 - b));
            // Accumulated directly instead of as 1 - alpha_bar, which cancels badly
            // for small t; at t = 1 this gives exactly beta_1.
            one_minus_alpha_bars.push(one_minus_alpha_bars[t] + alpha_bars[t] * b);
        }
        Self { spec, betas, alpha_bars, one_minus_alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// `beta_1..beta_T`; index `t - 1` holds `beta_t`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Length `T + 1`, starting at 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `1 - alpha_bars[t]`, accumulated without cancellation.
    pub fn one_minus_alpha_bars(&self) -> &[f64] {
        &self.one_minus_alpha_bars
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::StepOutOfRange { t, steps: self.steps() })
        }
    }
}

pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidScheduleParams("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidScheduleParams(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (steps - 1) as f64;
        (0..steps).map(|i| if i == steps - 1 { beta_end } else { beta_start + span * i as f64 }).collect()
    };
    Ok(NoiseSchedule::from_betas(ScheduleSpec::Linear { steps, beta_start, beta_end }, betas))
}

pub fn cosine_schedule(steps: usize, offset: f64, beta_clip: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidScheduleParams("need at least one step".into()));
    }
    if !(offset > 0.0 && offset.is_finite()) {
        return Err(Error::InvalidScheduleParams(format!("offset must be positive, got {offset}")));
    }
    if !(beta_clip > 0.0 && beta_clip < 1.0) {
        return Err(Error::InvalidScheduleParams(format!("beta_clip must lie in (0, 1), got {beta_clip}")));
    }
    let f = |u: f64| {
        let c = ((u / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let f0 = f(0.0);
    let raw: Vec<f64> = (0..=steps).map(|t| f(t as f64) / f0).collect();
    let betas = (1..=steps).map(|t| (1.0 - raw[t] / raw[t - 1]).min(beta_clip)).collect();
    Ok(NoiseSchedule::from_betas(ScheduleSpec::Cosine { steps, offset, beta_clip }, betas))
}
