use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Hardware imperfections of one transmitter. These are the ground-truth
/// fingerprint the classifier has to pick up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterProfile {
    pub emitter_id: usize,
    /// Quadrature branch gain relative to in-phase (1.0 is balanced).
    pub iq_gain_imbalance: f64,
    /// Quadrature skew in radians.
    pub iq_phase_skew: f64,
    pub dc_offset_i: f64,
    pub dc_offset_q: f64,
    /// Standard deviation of the per-sample phase random walk, radians.
    pub phase_noise_std: f64,
    /// Cubic term of the amplifier, `y = x (1 + a3 |x|²)`; never positive.
    pub pa_coeff3: f64,
    pub rng_seed: u64,
}

// Per-unit-scale ranges of each impairment.
const LOG_GAIN_SPAN: f64 = 0.10;
const PHASE_SKEW_SPAN: f64 = 0.10;
const DC_SPAN: f64 = 0.08;
const PHASE_NOISE_RANGE: (f64, f64) = (0.001, 0.010);
const PA_RANGE: (f64, f64) = (0.02, 0.12);

impl EmitterProfile {
    /// A perfect transmitter.
    pub fn ideal(emitter_id: usize, rng_seed: u64) -> Self {
        Self {
            emitter_id,
            iq_gain_imbalance: 1.0,
            iq_phase_skew: 0.0,
            dc_offset_i: 0.0,
            dc_offset_q: 0.0,
            phase_noise_std: 0.0,
            pa_coeff3: 0.0,
            rng_seed,
        }
    }

    /// Impairments as a vector, gain expressed as log-gain so the ideal
    /// profile is the origin.
    pub fn impairment_vector(&self) -> [f64; 6] {
        [
            self.iq_gain_imbalance.ln(),
            self.iq_phase_skew,
            self.dc_offset_i,
            self.dc_offset_q,
            self.phase_noise_std,
            self.pa_coeff3,
        ]
    }
}

/// Deterministic profile for `emitter_id` under `master_seed`. Each
/// impairment (log-gain for the imbalance) is a fixed random draw times
/// `impairment_scale`, so scale 0 gives the ideal transmitter.
pub fn make_profile(emitter_id: usize, master_seed: u64, impairment_scale: f64) -> EmitterProfile {
    let scale = impairment_scale.max(0.0);
    let mut rng = seed::rng_for(master_seed, "emitter", &[emitter_id as u64]);
    let mut sym = |span: f64| rng.random_range(-span..=span);
    let log_gain = sym(LOG_GAIN_SPAN);
    let skew = sym(PHASE_SKEW_SPAN);
    let dc_i = sym(DC_SPAN);
    let dc_q = sym(DC_SPAN);
    let pn = rng.random_range(PHASE_NOISE_RANGE.0..PHASE_NOISE_RANGE.1);
    let pa = rng.random_range(PA_RANGE.0..PA_RANGE.1);
    let rng_seed: u64 = rng.random();
    EmitterProfile {
        emitter_id,
        iq_gain_imbalance: (scale * log_gain).exp(),
        iq_phase_skew: scale * skew,
        dc_offset_i: scale * dc_i,
        dc_offset_q: scale * dc_q,
        phase_noise_std: scale * pn,
        pa_coeff3: -scale * pa,
        rng_seed,
    }
}
