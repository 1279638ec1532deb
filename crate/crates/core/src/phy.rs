//! Bluetooth-like PHY: bit error rates, access-code/header/payload success
//! chains, packet formats and the effective rate function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{bessel_i0e, clamp_probability, gaussian_q, marcum_q1};

/// GFSK modulation index used for access code and header.
pub const GFSK_MODULATION_INDEX: f64 = 0.29;
pub const SYNC_WORD_BITS: u32 = 64;
pub const HEADER_INFO_BITS: u32 = 18;
pub const DEFAULT_CORRELATOR_MARGIN: u32 = 6;
pub const DEFAULT_SNR0_DB: f64 = 8.0;
/// Payload header plus CRC bytes not counted as user data.
const PAYLOAD_OVERHEAD_BYTES: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhyError {
    #[error("unknown packet type `{0}` (expected one of 2dh1, 2dh3, 2dh5, 3dh1, 3dh3, 3dh5)")]
    UnknownLabel(String),
    #[error("the NULL mode carries no payload")]
    NullHasNoPayload,
    #[error("mode index {0} out of range")]
    ModeOutOfRange(usize),
    #[error("effective rates must be strictly increasing, got {0:?}")]
    RatesNotIncreasing(Vec<f64>),
    #[error("at least one data mode is required")]
    NoModes,
    #[error("invalid NULL threshold snr0 = {0}")]
    InvalidSnr0(f64),
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Gfsk,
    Dqpsk,
    Dpsk8,
}

impl Modulation {
    pub fn bit_error_rate(self, snr: f64) -> f64 {
        match self {
            Modulation::Gfsk => ber_gfsk(snr),
            Modulation::Dqpsk => ber_dqpsk(snr),
            Modulation::Dpsk8 => ber_8dpsk(snr),
        }
    }
}

/// Enhanced data rate packet types: (label, raw bit/s/Hz, slots, payload bits).
pub const PACKET_TYPES: [(&str, u32, u8, u32); 6] = [
    ("2dh1", 2, 1, 464),
    ("2dh3", 2, 3, 2968),
    ("2dh5", 2, 5, 5464),
    ("3dh1", 3, 1, 696),
    ("3dh3", 3, 3, 4448),
    ("3dh5", 3, 5, 8200),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyMode {
    pub index: usize,
    pub label: String,
    /// `None` for the NULL mode.
    pub modulation: Option<Modulation>,
    /// Raw spectral efficiency, bit/s/Hz.
    pub raw_rate: f64,
    pub slots: u8,
    pub payload_bits: u32,
    /// Raw rate net of payload header and CRC.
    pub effective_rate: f64,
}

impl PhyMode {
    pub fn null() -> Self {
        Self {
            index: 0,
            label: "null".to_string(),
            modulation: None,
            raw_rate: 0.0,
            slots: 1,
            payload_bits: 0,
            effective_rate: 0.0,
        }
    }

    pub fn from_label(label: &str) -> Result<Self, PhyError> {
        let key = label.trim().to_ascii_lowercase();
        let &(name, raw, slots, bits) = PACKET_TYPES
            .iter()
            .find(|p| p.0 == key)
            .ok_or_else(|| PhyError::UnknownLabel(label.to_string()))?;
        let modulation = if raw == 2 { Modulation::Dqpsk } else { Modulation::Dpsk8 };
        let bytes = bits as f64 / 8.0;
        Ok(Self {
            index: 0,
            label: name.to_string(),
            modulation: Some(modulation),
            raw_rate: raw as f64,
            slots,
            payload_bits: bits,
            effective_rate: raw as f64 * (bytes - PAYLOAD_OVERHEAD_BYTES) / bytes,
        })
    }

    pub fn is_null(&self) -> bool {
        self.modulation.is_none()
    }
}

/// `(a, b)` arguments of the noncoherent GFSK error expression, `a <= b`.
pub fn gfsk_arguments(snr: f64) -> (f64, f64) {
    let x = 2.0 * std::f64::consts::PI * GFSK_MODULATION_INDEX;
    let c = x.sin() / x;
    let root = (1.0 - c * c).sqrt();
    let half = 0.5 * snr.max(0.0);
    ((half * (1.0 - root)).sqrt(), (half * (1.0 + root)).sqrt())
}

pub fn ber_gfsk(snr: f64) -> f64 {
    let (a, b) = gfsk_arguments(snr);
    // exp(-(a^2+b^2)/2) I0(ab) == exp(-(a-b)^2/2) i0e(ab)
    let eps = marcum_q1(a, b) - 0.5 * (-(a - b) * (a - b) / 2.0).exp() * bessel_i0e(a * b);
    eps.clamp(0.0, 0.5)
}

pub fn ber_dqpsk(snr: f64) -> f64 {
    gaussian_q((snr.max(0.0) * (2.0 - std::f64::consts::SQRT_2)).sqrt())
}

pub fn ber_8dpsk(snr: f64) -> f64 {
    let s = (std::f64::consts::PI / 8.0).sin();
    let d = (1.0 + s).sqrt() - (1.0 - s).sqrt();
    2.0 / 3.0 * gaussian_q(snr.max(0.0).sqrt() * d)
}

fn ln_choose(n: u32, k: u32) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Probability that at most `margin` of the 64 sync-word bits are in error.
pub fn access_code_success(eps: f64, margin: u32) -> f64 {
    if eps <= 0.0 {
        return 1.0;
    }
    let margin = margin.min(SYNC_WORD_BITS);
    if eps >= 1.0 {
        return if margin >= SYNC_WORD_BITS { 1.0 } else { 0.0 };
    }
    let ln_e = eps.ln();
    let ln_1me = (-eps).ln_1p();
    let total: f64 = (0..=margin)
        .map(|k| {
            (ln_choose(SYNC_WORD_BITS, k) + k as f64 * ln_e + (SYNC_WORD_BITS - k) as f64 * ln_1me).exp()
        })
        .sum();
    clamp_probability(total)
}

/// 18 header bits, each protected by a (3,1) repetition code.
pub fn header_success(eps: f64) -> f64 {
    if eps <= 0.0 {
        return 1.0;
    }
    if eps >= 1.0 {
        return 0.0;
    }
    // (1-e)^3 + 3e(1-e)^2 == (1-e)^2 (1+2e)
    let ln_bit = 2.0 * (-eps).ln_1p() + (2.0 * eps).ln_1p();
    clamp_probability((HEADER_INFO_BITS as f64 * ln_bit).exp())
}

/// Uncoded payload of `bits` bits.
pub fn payload_success(eps: f64, bits: u32) -> f64 {
    if eps <= 0.0 {
        return 1.0;
    }
    if eps >= 1.0 {
        return if bits == 0 { 1.0 } else { 0.0 };
    }
    clamp_probability((bits as f64 * (-eps).ln_1p()).exp())
}

pub fn p_access_code(snr: f64, margin: u32) -> f64 {
    access_code_success(ber_gfsk(snr), margin)
}

pub fn p_header(snr: f64) -> f64 {
    header_success(ber_gfsk(snr))
}

pub fn p_null(snr: f64, margin: u32) -> f64 {
    let eps = ber_gfsk(snr);
    access_code_success(eps, margin) * header_success(eps)
}

pub fn p_payload(mode: &PhyMode, snr: f64) -> Result<f64, PhyError> {
    let modulation = mode.modulation.ok_or(PhyError::NullHasNoPayload)?;
    Ok(payload_success(modulation.bit_error_rate(snr), mode.payload_bits))
}

pub fn p_packet(mode: &PhyMode, snr: f64, margin: u32) -> Result<f64, PhyError> {
    let payload = p_payload(mode, snr)?;
    Ok(p_null(snr, margin) * payload)
}

/// Rate and success-probability view of a set of transmission modes.
///
/// Mode `0` is the NULL mode with rate zero; data modes are `1..=num_modes()`
/// with strictly increasing rates.
pub trait LinkModel: Send + Sync {
    fn num_modes(&self) -> usize;

    fn rate(&self, mode: usize) -> f64;

    fn success_probability(&self, mode: usize, snr: f64) -> f64;

    /// Minimum received SNR for the NULL mode.
    fn snr0(&self) -> f64;

    fn success_probability_db(&self, mode: usize, snr_db: f64) -> f64 {
        self.success_probability(mode, db_to_linear(snr_db))
    }

    /// Fills `out[l]` with `P_l(snr)` for `l = 0..=num_modes()`.
    fn success_probabilities_into(&self, snr: f64, out: &mut [f64]) {
        for (l, p) in out.iter_mut().enumerate().take(self.num_modes() + 1) {
            *p = self.success_probability(l, snr);
        }
    }

    /// SNR values where some `P_l` is discontinuous.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    fn max_rate(&self) -> f64 {
        self.rate(self.num_modes())
    }

    /// `max_l R_l P_l(snr)` and its arg-max, zero at or below `snr0`.
    /// Ties go to the smaller mode index.
    fn effective_rate(&self, snr: f64) -> (f64, usize) {
        if !(snr > self.snr0()) {
            return (0.0, 0);
        }
        let mut best = (0.0, 0);
        for l in 1..=self.num_modes() {
            let v = self.rate(l) * self.success_probability(l, snr);
            if v > best.0 {
                best = (v, l);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhyModeSet {
    modes: Vec<PhyMode>,
    snr0: f64,
    correlator_margin: u32,
}

impl PhyModeSet {
    pub fn new(labels: &[&str], snr0_db: f64, correlator_margin: u32) -> Result<Self, PhyError> {
        let data = labels
            .iter()
            .map(|l| PhyMode::from_label(l))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_modes(data, db_to_linear(snr0_db), correlator_margin)
    }

    pub fn from_modes(mut data: Vec<PhyMode>, snr0: f64, correlator_margin: u32) -> Result<Self, PhyError> {
        if data.is_empty() {
            return Err(PhyError::NoModes);
        }
        if !(snr0 >= 0.0) || !snr0.is_finite() {
            return Err(PhyError::InvalidSnr0(snr0));
        }
        data.sort_by(|a, b| a.effective_rate.total_cmp(&b.effective_rate));
        let rates: Vec<f64> = data.iter().map(|m| m.effective_rate).collect();
        if rates.windows(2).any(|w| w[1] <= w[0]) || rates[0] <= 0.0 {
            return Err(PhyError::RatesNotIncreasing(rates));
        }
        let mut modes = vec![PhyMode::null()];
        modes.extend(data);
        for (i, m) in modes.iter_mut().enumerate() {
            m.index = i;
        }
        Ok(Self { modes, snr0, correlator_margin: correlator_margin.min(SYNC_WORD_BITS) })
    }

    /// 2dh3 and 3dh3 with an 8 dB NULL threshold and correlator margin 6.
    pub fn default_bluetooth() -> Self {
        Self::new(&["2dh3", "3dh3"], DEFAULT_SNR0_DB, DEFAULT_CORRELATOR_MARGIN)
            .expect("default mode set is valid")
    }

    pub fn modes(&self) -> &[PhyMode] {
        &self.modes
    }

    pub fn mode(&self, index: usize) -> Result<&PhyMode, PhyError> {
        self.modes.get(index).ok_or(PhyError::ModeOutOfRange(index))
    }

    pub fn correlator_margin(&self) -> u32 {
        self.correlator_margin
    }

    pub fn p_null(&self, snr: f64) -> f64 {
        p_null(snr, self.correlator_margin)
    }

    pub fn p_packet(&self, index: usize, snr: f64) -> Result<f64, PhyError> {
        p_packet(self.mode(index)?, snr, self.correlator_margin)
    }
}

impl LinkModel for PhyModeSet {
    fn num_modes(&self) -> usize {
        self.modes.len() - 1
    }

    fn rate(&self, mode: usize) -> f64 {
        self.modes[mode].effective_rate
    }

    fn success_probability(&self, mode: usize, snr: f64) -> f64 {
        let m = &self.modes[mode];
        match m.modulation {
            None => self.p_null(snr),
            Some(modulation) => {
                self.p_null(snr) * payload_success(modulation.bit_error_rate(snr), m.payload_bits)
            }
        }
    }

    fn snr0(&self) -> f64 {
        self.snr0
    }

    fn success_probabilities_into(&self, snr: f64, out: &mut [f64]) {
        let overhead = self.p_null(snr);
        for (m, p) in self.modes.iter().zip(out.iter_mut()) {
            *p = match m.modulation {
                None => overhead,
                Some(modulation) => overhead * payload_success(modulation.bit_error_rate(snr), m.payload_bits),
            };
        }
    }
}

/// Step-function success probabilities `P_l(snr) = 1{snr >= a_l}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorModes {
    snr0: f64,
    thresholds: Vec<f64>,
    rates: Vec<f64>,
}

impl IndicatorModes {
    /// `thresholds` and `rates` list data modes only.
    pub fn new(snr0: f64, thresholds: Vec<f64>, rates: Vec<f64>) -> Result<Self, PhyError> {
        if thresholds.is_empty() || thresholds.len() != rates.len() {
            return Err(PhyError::NoModes);
        }
        if !(snr0 >= 0.0) {
            return Err(PhyError::InvalidSnr0(snr0));
        }
        if rates.windows(2).any(|w| w[1] <= w[0]) || rates[0] <= 0.0 {
            return Err(PhyError::RatesNotIncreasing(rates));
        }
        Ok(Self { snr0, thresholds, rates })
    }

    /// Capacity-achieving thresholds `2^R - 1`.
    pub fn capacity(rates: Vec<f64>, snr0: f64) -> Result<Self, PhyError> {
        let thresholds = rates.iter().map(|r| 2f64.powf(*r) - 1.0).collect();
        Self::new(snr0, thresholds, rates)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

impl LinkModel for IndicatorModes {
    fn num_modes(&self) -> usize {
        self.rates.len()
    }

    fn rate(&self, mode: usize) -> f64 {
        if mode == 0 {
            0.0
        } else {
            self.rates[mode - 1]
        }
    }

    fn success_probability(&self, mode: usize, snr: f64) -> f64 {
        let a = if mode == 0 { self.snr0 } else { self.thresholds[mode - 1] };
        if snr >= a {
            1.0
        } else {
            0.0
        }
    }

    fn snr0(&self) -> f64 {
        self.snr0
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.thresholds.clone()
    }
}

/// Dense dB-grid tabulation of another link model, linearly interpolated.
/// Queries outside the grid fall through to the wrapped model.
#[derive(Debug, Clone)]
pub struct TabulatedLink<M> {
    exact: M,
    db_lo: f64,
    db_hi: f64,
    inv_step: f64,
    /// Row-major `[point][mode]`.
    table: Vec<f64>,
    stride: usize,
    rates: Vec<f64>,
}

impl<M: LinkModel> TabulatedLink<M> {
    pub const DEFAULT_STEP_DB: f64 = 0.005;

    pub fn new(exact: M, db_lo: f64, db_hi: f64, step_db: f64) -> Self {
        let n = ((db_hi - db_lo) / step_db).ceil() as usize + 1;
        let step = (db_hi - db_lo) / (n - 1) as f64;
        let stride = exact.num_modes() + 1;
        let mut table = vec![0.0; n * stride];
        for (i, row) in table.chunks_mut(stride).enumerate() {
            exact.success_probabilities_into(db_to_linear(db_lo + step * i as f64), row);
        }
        let rates = (0..stride).map(|l| exact.rate(l)).collect();
        Self { exact, db_lo, db_hi, inv_step: 1.0 / step, table, stride, rates }
    }

    pub fn with_default_grid(exact: M) -> Self {
        Self::new(exact, -10.0, 45.0, Self::DEFAULT_STEP_DB)
    }

    pub fn exact(&self) -> &M {
        &self.exact
    }
}

impl<M: LinkModel> LinkModel for TabulatedLink<M> {
    fn num_modes(&self) -> usize {
        self.stride - 1
    }

    fn rate(&self, mode: usize) -> f64 {
        self.rates[mode]
    }

    fn success_probability(&self, mode: usize, snr: f64) -> f64 {
        self.success_probability_db(mode, linear_to_db(snr))
    }

    fn success_probability_db(&self, mode: usize, snr_db: f64) -> f64 {
        if !(snr_db >= self.db_lo && snr_db < self.db_hi) {
            return self.exact.success_probability(mode, db_to_linear(snr_db));
        }
        let pos = (snr_db - self.db_lo) * self.inv_step;
        let i = pos as usize;
        let frac = pos - i as f64;
        let p0 = self.table[i * self.stride + mode];
        let p1 = self.table[(i + 1) * self.stride + mode];
        p0 + frac * (p1 - p0)
    }

    fn snr0(&self) -> f64 {
        self.exact.snr0()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.exact.breakpoints()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::find_root_monotone;

    fn defaults() -> PhyModeSet {
        PhyModeSet::default_bluetooth()
    }

    #[test]
    fn packet_table_matches_edr_formats() {
        let bits: Vec<u32> = ["2dh1", "2dh3", "2dh5", "3dh1", "3dh3", "3dh5"]
            .iter()
            .map(|l| PhyMode::from_label(l).unwrap().payload_bits)
            .collect();
        assert_eq!(bits, vec![464, 2968, 5464, 696, 4448, 8200]);
        let m = defaults();
        assert!((m.rate(1) - 2.0 * 367.0 / 371.0).abs() < 1e-15);
        assert!((m.rate(2) - 3.0 * 552.0 / 556.0).abs() < 1e-15);
        assert_eq!(m.rate(0), 0.0);
        assert!(matches!(PhyMode::from_label("dm1"), Err(PhyError::UnknownLabel(_))));
    }

    #[test]
    fn gfsk_ber_limits() {
        assert!((ber_gfsk(0.0) - 0.5).abs() < 1e-15);
        assert!(ber_gfsk(100.0) < 1e-3);
        assert!(ber_gfsk(10.0) > ber_gfsk(20.0));
    }

    #[test]
    fn gfsk_ber_oracle_values() {
        // noncentral chi-square survival evaluation of the same expression
        assert!((ber_gfsk(100.0) / 4.636_318_615_755e-12 - 1.0).abs() < 1e-8);
        assert!((ber_gfsk(db_to_linear(8.0)) - 0.055_210_732_735_014).abs() < 1e-12);
    }

    #[test]
    fn dpsk_bers() {
        assert_eq!(ber_dqpsk(0.0), 0.5);
        assert!((ber_8dpsk(0.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((ber_dqpsk(10.0) - 0.007_753_8).abs() < 1e-5);
    }

    #[test]
    fn success_chain_edges() {
        assert_eq!(access_code_success(0.0, 6), 1.0);
        assert_eq!(access_code_success(1.0, 6), 0.0);
        assert_eq!(header_success(0.0), 1.0);
        assert_eq!(header_success(1.0), 0.0);
        assert!((header_success(0.5) - 0.5f64.powi(18)).abs() < 1e-20);
        assert_eq!(payload_success(0.0, 2968), 1.0);
        assert_eq!(payload_success(1.0, 2968), 0.0);
        // (1 - 1e-5)^2968 by log-domain arithmetic
        assert!((payload_success(1e-5, 2968) - 0.970_755_981_750_2).abs() < 1e-12);
        assert!(matches!(p_payload(&PhyMode::null(), 10.0), Err(PhyError::NullHasNoPayload)));
    }

    #[test]
    fn null_probability_at_reference_snr() {
        let m = defaults();
        assert!(m.p_null(0.0) < 1e-6);
        assert!((m.p_null(1e6) - 1.0).abs() < 1e-12);
        let p8 = m.p_null(db_to_linear(8.0));
        assert!((p8 - 0.799_590_277_578).abs() < 1e-9);
    }

    #[test]
    fn packet_probability_limits() {
        let m = defaults();
        assert!(m.p_packet(1, 0.0).unwrap() < 1e-10);
        assert!((m.p_packet(2, db_to_linear(45.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn waterfall_crossing_anchor() {
        let m = defaults();
        let x = find_root_monotone(|db| m.success_probability_db(1, db) - 0.99, 5.0, 30.0, 1e-12).unwrap();
        assert!((10.0..=25.0).contains(&x));
        assert!((x - 15.388_244_276).abs() < 1e-6, "crossing at {x}");
    }

    #[test]
    fn monotone_curves_and_ordering() {
        let m = defaults();
        let mut prev = vec![0.0; 3];
        let mut prev_mu = 0.0;
        for i in 0..200 {
            let db = 40.0 * i as f64 / 199.0;
            let snr = db_to_linear(db);
            let mut p = vec![0.0; 3];
            m.success_probabilities_into(snr, &mut p);
            for l in 0..3 {
                assert!(p[l] >= prev[l] - 1e-15, "mode {l} at {db} dB");
                assert!(p[l] <= p[0] + 1e-15);
            }
            let (mu, _) = m.effective_rate(snr);
            assert!(mu >= prev_mu - 1e-12);
            prev = p;
            prev_mu = mu;
        }
    }

    #[test]
    fn effective_rate_picks_max_mode() {
        let m = defaults();
        assert_eq!(m.effective_rate(m.snr0() * 0.99), (0.0, 0));
        assert_eq!(m.effective_rate(m.snr0()), (0.0, 0));
        let (mu, l) = m.effective_rate(db_to_linear(60.0));
        assert_eq!(l, 2);
        assert!((mu - m.max_rate()).abs() < 1e-9);
        // SNR where the 2dh3 goodput is 1.5
        let db = find_root_monotone(|db| m.rate(1) * m.success_probability_db(1, db) - 1.5, 8.0, 30.0, 1e-13).unwrap();
        let snr = db_to_linear(db);
        let r2 = m.rate(2) * m.success_probability(2, snr);
        assert!(r2 < 1.5);
        let (mu, l) = m.effective_rate(snr);
        assert_eq!(l, 1);
        assert!((mu - 1.5).abs() < 1e-9);
    }

    #[test]
    fn indicator_modes() {
        let ind = IndicatorModes::capacity(vec![2.0, 3.0], 0.0).unwrap();
        assert_eq!(ind.thresholds(), &[3.0, 7.0]);
        assert_eq!(ind.effective_rate(2.9), (0.0, 0));
        assert_eq!(ind.effective_rate(3.0), (2.0, 1));
        assert_eq!(ind.effective_rate(7.5), (3.0, 2));
        assert!(IndicatorModes::new(0.0, vec![1.0, 2.0], vec![2.0, 1.0]).is_err());
    }

    #[test]
    fn tabulated_link_tracks_exact() {
        let exact = defaults();
        let tab = TabulatedLink::with_default_grid(exact.clone());
        for i in 0..400 {
            let db = -5.0 + 0.1237 * i as f64;
            for l in 0..=2 {
                let e = exact.success_probability_db(l, db);
                let t = tab.success_probability_db(l, db);
                assert!((e - t).abs() < 2e-5, "mode {l} at {db} dB: {e} vs {t}");
            }
        }
        assert_eq!(tab.effective_rate(tab.snr0()).1, 0);
    }
}
