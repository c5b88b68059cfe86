//! Temperature sampling and the temperature-heating schedule.
//!
//! A task sampling distribution `p` is flattened by temperature `T` via
//! `p_n^{1/T} / sum_m p_m^{1/T}`: `T = 1` leaves `p` unchanged and
//! `T -> inf` approaches uniform. The heating schedule raises the
//! temperature across epochs, starting at `t_s` and growing with a square
//! root factor controlled by the conduction coefficient `k` and the maximum
//! epoch count `C`:
//!
//! `t(e) = t_s * sqrt(1 + k * e / sqrt(C))`
//!
//! so epoch 0 always samples at exactly `t_s`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-task sampling weights. Entries are nonnegative with at least one
/// positive entry; a rescaled distribution sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights(Vec<f64>);

impl TaskWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("task weights must be nonempty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain(
                "task weights must be finite and nonnegative".into(),
            ));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Domain(
                "task weights must have at least one positive entry".into(),
            ));
        }
        Ok(TaskWeights(weights))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Parameters of the heating schedule: starting temperature `t_s`,
/// conduction coefficient `k`, and maximum number of epochs `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatingConfig {
    pub t_s: f64,
    pub k: f64,
    pub max_epochs: u32,
}

impl HeatingConfig {
    pub fn new(t_s: f64, k: f64, max_epochs: u32) -> Result<Self> {
        if !t_s.is_finite() || t_s <= 0.0 {
            return Err(Error::Domain(format!(
                "starting temperature must be positive, got {t_s}"
            )));
        }
        if !k.is_finite() || k < 0.0 {
            return Err(Error::Domain(format!(
                "conduction coefficient must be nonnegative, got {k}"
            )));
        }
        if max_epochs == 0 {
            return Err(Error::Domain("max epochs must be at least 1".into()));
        }
        Ok(HeatingConfig { t_s, k, max_epochs })
    }
}

/// Epoch index together with the temperature in effect for that epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub epoch: u32,
    pub temperature: f64,
}

impl ScheduleState {
    pub fn at(epoch: u32, cfg: &HeatingConfig) -> Self {
        ScheduleState {
            epoch,
            temperature: temperature_at(epoch, cfg),
        }
    }
}

/// Rescales `p` by temperature `T`: `out_n = p_n^{1/T} / sum_m p_m^{1/T}`.
/// Zero entries stay zero; the output sums to 1.
pub fn rescale(p: &TaskWeights, temperature: f64) -> Result<TaskWeights> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let inv = 1.0 / temperature;
    let powed: Vec<f64> = p.as_slice().iter().map(|&w| w.powf(inv)).collect();
    let total: f64 = powed.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Domain(
            "rescale produced a degenerate distribution".into(),
        ));
    }
    Ok(TaskWeights(powed.into_iter().map(|w| w / total).collect()))
}

/// Temperature in effect at (0-indexed) epoch `e`. Epoch 0 returns `t_s`
/// exactly; epochs beyond `max_epochs` extrapolate with the same formula.
pub fn temperature_at(epoch: u32, cfg: &HeatingConfig) -> f64 {
    cfg.t_s * (1.0 + cfg.k * f64::from(epoch) / f64::from(cfg.max_epochs).sqrt()).sqrt()
}

/// The full `(epoch, temperature)` table for epochs `0..max_epochs`.
pub fn schedule_table(cfg: &HeatingConfig) -> Vec<(u32, f64)> {
    (0..cfg.max_epochs)
        .map(|e| (e, temperature_at(e, cfg)))
        .collect()
}
