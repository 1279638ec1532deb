//! Per-slot scheduling: the drift-plus-penalty opportunistic scheduler,
//! the round-robin baseline and the sleep-switching extension.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::minimize_scalar_with_grid;
use crate::phy::LinkModel;
use crate::sim::ArrivalProcess;

/// Exponent cap in the queue weight.
pub const WEIGHT_EXPONENT_CAP: f64 = 700.0;
/// Grid size for the per-mode energy search (log-energy axis).
pub const ENERGY_GRID_POINTS: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("V must exceed 1, got {0}")]
    InvalidV(f64),
    #[error("P_max must be positive, got {0}")]
    InvalidPeak(f64),
    #[error("arrival bound must be non-negative, got {0}")]
    InvalidArrivalBound(f64),
    #[error("tau must be at least 1, got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Opportunistic,
    RoundRobin,
    OpportunisticSleep,
}

impl PolicyKind {
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Opportunistic => "opportunistic",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::OpportunisticSleep => "opportunistic_sleep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub v: f64,
    pub p_max: f64,
    pub a_max: f64,
    pub delta_max: f64,
    pub nu: f64,
    pub zeta: f64,
    pub q_th: f64,
}

/// Scheduler constants from `V`, the arrival bound and the top mode rate.
pub fn derive_constants(v: f64, a_max: f64, max_rate: f64, p_max: f64) -> Result<SchedulerConfig, PolicyError> {
    if !(v > 1.0) || !v.is_finite() {
        return Err(PolicyError::InvalidV(v));
    }
    if !(p_max > 0.0) {
        return Err(PolicyError::InvalidPeak(p_max));
    }
    if !(a_max >= 0.0) {
        return Err(PolicyError::InvalidArrivalBound(a_max));
    }
    let delta_max = a_max.max(max_rate);
    let nu = 1.0 / v.sqrt();
    let zeta = nu / (delta_max * delta_max) * (-nu / delta_max).exp();
    let q_th = 6.0 / zeta * (1.0 / nu).ln();
    Ok(SchedulerConfig { v, p_max, a_max, delta_max, nu, zeta, q_th })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weight {
    pub value: f64,
    pub saturated: bool,
}

pub fn weight(q: f64, x: f64, cfg: &SchedulerConfig) -> Weight {
    let d = cfg.zeta * (q - cfg.q_th);
    let (sign, expo) = if q >= cfg.q_th { (1.0, d) } else { (-1.0, -d) };
    let saturated = expo > WEIGHT_EXPONENT_CAP;
    let value = sign * cfg.zeta * expo.min(WEIGHT_EXPONENT_CAP).exp() + 2.0 * x;
    Weight { value, saturated }
}

pub fn update_aux_queue(x: f64, served_rate: f64, q: f64, arrival: f64, cfg: &SchedulerConfig) -> f64 {
    let (drain, bias) = if q < cfg.q_th { (cfg.nu, 0.0) } else { (0.0, cfg.nu) };
    (x - served_rate - drain).max(0.0) + arrival + bias
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyChoice {
    pub energy: f64,
    pub mode: usize,
    /// `V e - [W]_+ mu(e S)` at the chosen energy.
    pub objective: f64,
}

/// Minimizes `V e - [W]_+ mu(e S)` over `e` in `[snr0 / S, P_max]`.
pub fn energy_opt(
    w: f64,
    s: f64,
    cfg: &SchedulerConfig,
    link: &dyn LinkModel,
    thresholds: Option<&[f64]>,
) -> EnergyChoice {
    let snr0 = link.snr0();
    let e_null = snr0 / s;
    let mut best = EnergyChoice { energy: e_null, mode: 0, objective: cfg.v * e_null };
    if !(w > 0.0) {
        return best;
    }
    let e_hi = cfg.p_max.max(e_null);
    let objective = |e: f64| cfg.v * e - w * link.effective_rate(e * s).0;
    let consider = |e: f64, best: &mut EnergyChoice| {
        let o = objective(e);
        if o < best.objective {
            best.energy = e;
            best.objective = o;
        }
    };
    if e_hi > e_null && e_null > 0.0 {
        let (u0, u1) = (e_null.ln(), e_hi.ln());
        for l in 1..=link.num_modes() {
            let rate = link.rate(l);
            let f = |u: f64| {
                let e = u.exp();
                cfg.v * e - w * rate * link.success_probability(l, e * s)
            };
            if let Ok((u, _)) = minimize_scalar_with_grid(f, u0, u1, 1e-9, ENERGY_GRID_POINTS) {
                consider(u.exp(), &mut best);
            }
        }
    } else if e_hi > e_null {
        // snr0 = 0: the log axis starts at the smallest useful energy
        let lo = (1e-9 * e_hi).ln();
        for l in 1..=link.num_modes() {
            let rate = link.rate(l);
            let f = |u: f64| {
                let e = u.exp();
                cfg.v * e - w * rate * link.success_probability(l, e * s)
            };
            if let Ok((u, _)) = minimize_scalar_with_grid(f, lo, e_hi.ln(), 1e-9, ENERGY_GRID_POINTS) {
                consider(u.exp(), &mut best);
            }
        }
    }
    if let Some(a) = thresholds {
        for &x in a {
            let e = x / s;
            if e >= e_null && e <= e_hi {
                consider(e, &mut best);
            }
        }
    }
    best.mode = link.effective_rate(best.energy * s).1;
    best
}

/// Per-slot view of one sensor's queues and connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub slot: u64,
    pub q: Vec<f64>,
    pub x: Vec<f64>,
    pub connected: Vec<bool>,
    /// Slot of each sensor's most recent nonzero arrival.
    pub last_arrival: Vec<Option<u64>>,
}

impl SchedulerState {
    pub fn new(k: usize) -> Self {
        Self { slot: 0, q: vec![0.0; k], x: vec![0.0; k], connected: vec![true; k], last_arrival: vec![None; k] }
    }

    pub fn sensors(&self) -> usize {
        self.q.len()
    }

    pub fn connected_count(&self) -> usize {
        self.connected.iter().filter(|c| **c).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDecision {
    /// `None` when every sensor is asleep.
    pub sensor: Option<usize>,
    pub mode: usize,
    pub energy: f64,
    pub is_null: bool,
}

impl SlotDecision {
    pub fn idle() -> Self {
        Self { sensor: None, mode: 0, energy: 0.0, is_null: false }
    }
}

/// Polls the connected sensor with the smallest per-slot objective.
pub fn schedule_slot(
    state: &SchedulerState,
    weights: &[f64],
    s: &[f64],
    cfg: &SchedulerConfig,
    link: &dyn LinkModel,
    thresholds: Option<&[f64]>,
) -> SlotDecision {
    let mut best: Option<(usize, EnergyChoice)> = None;
    for k in 0..state.sensors() {
        if !state.connected[k] {
            continue;
        }
        let c = energy_opt(weights[k], s[k], cfg, link, thresholds);
        if best.as_ref().is_none_or(|b| c.objective < b.1.objective) {
            best = Some((k, c));
        }
    }
    match best {
        None => SlotDecision::idle(),
        Some((k, c)) => SlotDecision { sensor: Some(k), mode: c.mode, energy: c.energy, is_null: c.mode == 0 },
    }
}

/// Polls sensor `t mod K` with its own single-sensor energy choice.
pub fn round_robin_slot(
    state: &SchedulerState,
    weights: &[f64],
    s: &[f64],
    cfgs: &[SchedulerConfig],
    link: &dyn LinkModel,
    thresholds: Option<&[f64]>,
) -> SlotDecision {
    let k = (state.slot % state.sensors() as u64) as usize;
    let c = energy_opt(weights[k], s[k], &cfgs[k], link, thresholds);
    SlotDecision { sensor: Some(k), mode: c.mode, energy: c.energy, is_null: c.mode == 0 }
}

/// Sensors to put to sleep this slot. Only fires when every connected
/// sensor has a non-positive weight; sensor `k` sleeps when its expected
/// remaining idle slots, excluding the current one, exceed `tau` times the
/// number of connected sensors.
pub fn sleep_check(
    state: &SchedulerState,
    weights: &[f64],
    arrivals: &[ArrivalProcess],
    tau: f64,
) -> Vec<usize> {
    let connected = state.connected_count();
    if connected == 0 {
        return Vec::new();
    }
    let all_idle = (0..state.sensors()).filter(|&k| state.connected[k]).all(|k| weights[k] <= 0.0);
    if !all_idle {
        return Vec::new();
    }
    (0..state.sensors())
        .filter(|&k| state.connected[k])
        .filter(|&k| {
            let delta = arrivals[k].expected_idle_slots(state.slot, state.last_arrival[k]);
            delta - 1.0 > tau * connected as f64
        })
        .collect()
}

/// Reconnection charge for a sleeping sensor that received data.
pub fn wake_up_charge(tau: f64, null_energy_mean: f64) -> f64 {
    tau * null_energy_mean
}
