//! Block-fading channel laws: truncated Ricean power gains and small
//! discrete laws used for exact checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{bessel_i0e, gauss_kronrod_15, integrate, marcum_q1, RngStream};

pub const DEFAULT_RICE_FACTOR_DB: f64 = 6.95;
pub const DEFAULT_S_MIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("s_min must be positive and finite, got {0}")]
    InvalidSMin(f64),
    #[error("rice factor must be finite, got {0} dB")]
    InvalidRiceFactor(f64),
    #[error("mean power must be positive and finite, got {0}")]
    InvalidMeanPower(f64),
    #[error("s_min = {0} leaves no probability mass")]
    EmptyTruncation(f64),
    #[error("discrete law needs positive gains and probabilities summing to 1: {0}")]
    InvalidLaw(String),
}

/// Distribution of the per-slot power gain `S`.
pub trait FadingLaw: Send + Sync {
    fn sample_one(&self, rng: &mut RngStream) -> f64;

    fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        for s in out.iter_mut() {
            *s = self.sample_one(rng);
        }
    }

    fn sample(&self, rng: &mut RngStream, k_sensors: usize) -> Vec<f64> {
        let mut out = vec![0.0; k_sensors];
        self.sample_into(rng, &mut out);
        out
    }

    /// Smallest gain in the support.
    fn s_min(&self) -> f64;

    /// `P(lo < S <= hi)`.
    fn interval_probability(&self, lo: f64, hi: f64) -> f64;

    /// `E[1/S ; lo < S <= hi]`.
    fn interval_inverse_moment(&self, lo: f64, hi: f64) -> f64;

    fn mean_inverse_gain(&self) -> f64 {
        self.interval_inverse_moment(0.0, f64::INFINITY)
    }

    /// Support points and masses, for laws with finite support.
    fn atoms(&self) -> Option<&[(f64, f64)]> {
        None
    }
}

/// Ricean power gain with unit (or `mean_power`) mean before truncation,
/// conditioned on `S >= s_min`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ChannelParams", into = "ChannelParams")]
pub struct ChannelModel {
    rice_factor_db: f64,
    s_min: f64,
    mean_power: f64,
    k: f64,
    nu: f64,
    sigma: f64,
    tables: RiceTables,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChannelParams {
    rice_factor_db: f64,
    s_min: f64,
    mean_power: f64,
}

impl TryFrom<ChannelParams> for ChannelModel {
    type Error = ChannelError;
    fn try_from(p: ChannelParams) -> Result<Self, Self::Error> {
        ChannelModel::with_mean_power(p.rice_factor_db, p.s_min, p.mean_power)
    }
}

impl From<ChannelModel> for ChannelParams {
    fn from(c: ChannelModel) -> Self {
        Self { rice_factor_db: c.rice_factor_db, s_min: c.s_min, mean_power: c.mean_power }
    }
}

/// Cumulative mass and inverse moment on a log-gain grid, unit mean power.
#[derive(Debug, Clone)]
struct RiceTables {
    k: f64,
    v_lo: f64,
    v_hi: f64,
    dv: f64,
    cum_mass: Vec<f64>,
    cum_inv: Vec<f64>,
    retained: f64,
    mean: f64,
}

const TABLE_CELLS: usize = 2000;

fn untruncated_pdf_unit(k: f64, s: f64) -> f64 {
    if s < 0.0 {
        return 0.0;
    }
    let z = 2.0 * (k * (k + 1.0) * s).sqrt();
    (k + 1.0) * (-k - (k + 1.0) * s + z).exp() * bessel_i0e(z)
}

impl RiceTables {
    fn new(k: f64, s_min: f64) -> Self {
        // amplitude mean + 9 standard deviations, mass beyond is below 1e-17
        let s_upper = (k.sqrt() + 9.0).powi(2) / (k + 1.0);
        let v_lo = s_min.ln();
        let v_hi = s_upper.max(s_min * 2.0).ln();
        let dv = (v_hi - v_lo) / TABLE_CELLS as f64;
        let mut cum_mass = Vec::with_capacity(TABLE_CELLS + 1);
        let mut cum_inv = Vec::with_capacity(TABLE_CELLS + 1);
        let (mut m, mut g) = (0.0, 0.0);
        cum_mass.push(0.0);
        cum_inv.push(0.0);
        for i in 0..TABLE_CELLS {
            let a = v_lo + dv * i as f64;
            let b = a + dv;
            m += gauss_kronrod_15(|v| untruncated_pdf_unit(k, v.exp()) * v.exp(), a, b).0;
            g += gauss_kronrod_15(|v| untruncated_pdf_unit(k, v.exp()), a, b).0;
            cum_mass.push(m);
            cum_inv.push(g);
        }
        let mean = integrate(|v| untruncated_pdf_unit(k, v.exp()) * (2.0 * v).exp(), v_lo, v_hi, 1e-12, 0.0).value;
        Self { k, v_lo, v_hi, dv, retained: m, mean: mean / m, cum_mass, cum_inv }
    }

    /// Unnormalized integrals of `f` and `f/s` over `[s_min, s]`.
    fn cumulative(&self, s: f64) -> (f64, f64) {
        if !(s > self.v_lo.exp()) {
            return (0.0, 0.0);
        }
        let v = s.ln();
        if v >= self.v_hi {
            return (self.retained, self.cum_inv[TABLE_CELLS]);
        }
        let i = (((v - self.v_lo) / self.dv) as usize).min(TABLE_CELLS - 1);
        let a = self.v_lo + self.dv * i as f64;
        if v <= a {
            return (self.cum_mass[i], self.cum_inv[i]);
        }
        let k = self.k;
        let dm = gauss_kronrod_15(|x| untruncated_pdf_unit(k, x.exp()) * x.exp(), a, v).0;
        let dg = gauss_kronrod_15(|x| untruncated_pdf_unit(k, x.exp()), a, v).0;
        (self.cum_mass[i] + dm, self.cum_inv[i] + dg)
    }
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::new(DEFAULT_RICE_FACTOR_DB, DEFAULT_S_MIN).expect("default channel is valid")
    }
}

impl ChannelModel {
    pub fn new(rice_factor_db: f64, s_min: f64) -> Result<Self, ChannelError> {
        Self::with_mean_power(rice_factor_db, s_min, 1.0)
    }

    pub fn with_mean_power(rice_factor_db: f64, s_min: f64, mean_power: f64) -> Result<Self, ChannelError> {
        if !rice_factor_db.is_finite() {
            return Err(ChannelError::InvalidRiceFactor(rice_factor_db));
        }
        if !(s_min > 0.0) || !s_min.is_finite() {
            return Err(ChannelError::InvalidSMin(s_min));
        }
        if !(mean_power > 0.0) || !mean_power.is_finite() {
            return Err(ChannelError::InvalidMeanPower(mean_power));
        }
        let k = 10f64.powf(rice_factor_db / 10.0);
        let tables = RiceTables::new(k, s_min / mean_power);
        if !(tables.retained > 1e-12) {
            return Err(ChannelError::EmptyTruncation(s_min));
        }
        Ok(Self {
            rice_factor_db,
            s_min,
            mean_power,
            k,
            nu: (k * mean_power / (k + 1.0)).sqrt(),
            sigma: (0.5 * mean_power / (k + 1.0)).sqrt(),
            tables,
        })
    }

    pub fn rice_factor_db(&self) -> f64 {
        self.rice_factor_db
    }

    /// Linear rice factor.
    pub fn rice_factor(&self) -> f64 {
        self.k
    }

    pub fn mean_power(&self) -> f64 {
        self.mean_power
    }

    /// Density of the Ricean power gain before truncation.
    pub fn untruncated_pdf(&self, s: f64) -> f64 {
        untruncated_pdf_unit(self.k, s / self.mean_power) / self.mean_power
    }

    pub fn untruncated_cdf(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        let k = self.k;
        1.0 - marcum_q1((2.0 * k).sqrt(), (2.0 * (k + 1.0) * s / self.mean_power).sqrt())
    }

    /// Probability kept by the truncation, `P(S >= s_min)` before conditioning.
    pub fn retained_mass(&self) -> f64 {
        self.tables.retained
    }

    pub fn pdf(&self, s: f64) -> f64 {
        if s < self.s_min {
            0.0
        } else {
            self.untruncated_pdf(s) / self.tables.retained
        }
    }

    pub fn cdf(&self, s: f64) -> f64 {
        (self.tables.cumulative(s / self.mean_power).0 / self.tables.retained).min(1.0)
    }

    pub fn mean(&self) -> f64 {
        self.tables.mean * self.mean_power
    }
}

impl FadingLaw for ChannelModel {
    fn sample_one(&self, rng: &mut RngStream) -> f64 {
        loop {
            let x = self.nu + self.sigma * rng.standard_normal();
            let y = self.sigma * rng.standard_normal();
            let s = x * x + y * y;
            if s >= self.s_min {
                return s;
            }
        }
    }

    fn s_min(&self) -> f64 {
        self.s_min
    }

    fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        let (m_hi, _) = self.tables.cumulative(hi / self.mean_power);
        let (m_lo, _) = self.tables.cumulative(lo / self.mean_power);
        ((m_hi - m_lo) / self.tables.retained).clamp(0.0, 1.0)
    }

    fn interval_inverse_moment(&self, lo: f64, hi: f64) -> f64 {
        if !(hi > lo) {
            return 0.0;
        }
        let (_, g_hi) = self.tables.cumulative(hi / self.mean_power);
        let (_, g_lo) = self.tables.cumulative(lo / self.mean_power);
        ((g_hi - g_lo) / self.tables.retained / self.mean_power).max(0.0)
    }
}

/// Finite-support gain law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteChannel {
    atoms: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl DiscreteChannel {
    /// `atoms` are `(gain, probability)` pairs.
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self, ChannelError> {
        if atoms.is_empty() {
            return Err(ChannelError::InvalidLaw("no atoms".into()));
        }
        if atoms.iter().any(|&(s, p)| !(s > 0.0) || !s.is_finite() || !(p >= 0.0)) {
            return Err(ChannelError::InvalidLaw(format!("{atoms:?}")));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ChannelError::InvalidLaw(format!("total probability {total}")));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let cumulative = atoms
            .iter()
            .map(|a| {
                acc += a.1;
                acc
            })
            .collect();
        Ok(Self { atoms, cumulative })
    }

    pub fn deterministic(s: f64) -> Result<Self, ChannelError> {
        Self::new(vec![(s, 1.0)])
    }
}

impl FadingLaw for DiscreteChannel {
    fn sample_one(&self, rng: &mut RngStream) -> f64 {
        let u = rng.uniform() * self.cumulative[self.cumulative.len() - 1];
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.atoms.len() - 1);
        self.atoms[i].0
    }

    fn s_min(&self) -> f64 {
        self.atoms[0].0
    }

    fn interval_probability(&self, lo: f64, hi: f64) -> f64 {
        self.atoms.iter().filter(|a| a.0 > lo && a.0 <= hi).map(|a| a.1).sum()
    }

    fn interval_inverse_moment(&self, lo: f64, hi: f64) -> f64 {
        self.atoms.iter().filter(|a| a.0 > lo && a.0 <= hi).map(|a| a.1 / a.0).sum()
    }

    fn atoms(&self) -> Option<&[(f64, f64)]> {
        Some(&self.atoms)
    }
}

/// Rice factor (linear) from the first two moments of power samples.
pub fn estimate_rice_factor(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let gamma = var / (mean * mean);
    if gamma >= 1.0 {
        return 0.0;
    }
    ((1.0 - gamma) + (1.0 - gamma).sqrt()) / gamma
}
