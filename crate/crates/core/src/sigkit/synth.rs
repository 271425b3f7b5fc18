//! Received-signal synthesis: shaped QPSK payload, transmitter impairments,
//! channel and additive noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmitterProfile, IQSignal, SigError};
use crate::seed;

pub const SAMPLES_PER_SYMBOL: usize = 4;
pub const RRC_ROLLOFF: f64 = 0.35;
pub const RRC_SPAN_SYMBOLS: usize = 8;
pub const MIN_SAMPLE_LEN: usize = 16;

/// Static channel impulse response. `Flat` is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    #[default]
    Flat,
    /// Three complex taps `[h0, h1, h2]` as `(re, im)` pairs.
    Multipath([(f64, f64); 3]),
}

/// Root-raised-cosine taps with unit energy.
pub fn rrc_taps(sps: usize, span: usize, rolloff: f64) -> Vec<f64> {
    use std::f64::consts::PI;
    let half = (span * sps / 2) as isize;
    let b = rolloff;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| {
            let t = i as f64 / sps as f64;
            if i == 0 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-12 {
                b / 2f64.sqrt()
                    * ((1.0 + 2.0 / PI) * (PI / (4.0 * b)).sin()
                        + (1.0 - 2.0 / PI) * (PI / (4.0 * b)).cos())
            } else {
                ((PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos())
                    / (PI * t * (1.0 - (4.0 * b * t).powi(2)))
            }
        })
        .collect();
    let energy = taps.iter().map(|h| h * h).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|h| *h /= energy);
    taps
}

/// Clean RRC-shaped QPSK of `n` samples with unit nominal power. Depends
/// only on `payload_seed`.
pub fn shaped_qpsk(payload_seed: u64, n: usize) -> Vec<(f64, f64)> {
    let sps = SAMPLES_PER_SYMBOL;
    let taps = rrc_taps(sps, RRC_SPAN_SYMBOLS, RRC_ROLLOFF);
    let delay = taps.len() / 2;
    let n_sym = n.div_ceil(sps) + RRC_SPAN_SYMBOLS + 1;
    let mut rng = seed::rng_for(payload_seed, "payload", &[]);
    let a = std::f64::consts::FRAC_1_SQRT_2;
    let symbols: Vec<(f64, f64)> = (0..n_sym)
        .map(|_| {
            let bits: u8 = rng.random_range(0..4);
            (
                if bits & 1 == 0 { a } else { -a },
                if bits & 2 == 0 { a } else { -a },
            )
        })
        .collect();
    let gain = (sps as f64).sqrt();
    // output sample m = Σ_s sym[s] · h[m + delay − s·sps]
    (0..n)
        .map(|m| {
            let pos = m + delay;
            let mut acc = (0.0, 0.0);
            let s_lo = (pos + 1).saturating_sub(taps.len()).div_ceil(sps);
            let s_hi = (pos / sps).min(n_sym - 1);
            for s in s_lo..=s_hi {
                let h = taps[pos - s * sps];
                acc.0 += symbols[s].0 * h;
                acc.1 += symbols[s].1 * h;
            }
            (acc.0 * gain, acc.1 * gain)
        })
        .collect()
}

fn check_snr(snr_db: f64) -> Result<(), SigError> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(SigError::NonFiniteSnr(snr_db));
    }
    Ok(())
}

/// One received record from `profile`. `snr_db = +∞` disables the noise.
pub fn synthesize_sample(
    profile: &EmitterProfile,
    payload_seed: u64,
    snr_db: f64,
    n: usize,
) -> Result<IQSignal, SigError> {
    synthesize_with_channel(profile, payload_seed, snr_db, n, &Channel::Flat)
}

pub fn synthesize_with_channel(
    profile: &EmitterProfile,
    payload_seed: u64,
    snr_db: f64,
    n: usize,
    channel: &Channel,
) -> Result<IQSignal, SigError> {
    check_snr(snr_db)?;
    if n < MIN_SAMPLE_LEN {
        return Err(SigError::InvalidConfig(format!(
            "sample length {n} below minimum {MIN_SAMPLE_LEN}"
        )));
    }
    let clean = shaped_qpsk(payload_seed, n);
    let mut rng = seed::rng_for(profile.rng_seed, "impairment", &[payload_seed]);

    let (sin_phi, cos_phi) = profile.iq_phase_skew.sin_cos();
    let g = profile.iq_gain_imbalance;
    let a3 = profile.pa_coeff3;
    let mut theta = 0.0f64;
    let mut tx: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &(i, q) in &clean {
        // quadrature imbalance
        let (i1, q1) = (i, g * (q * cos_phi - i * sin_phi));
        // carrier leakage
        let (i2, q2) = (i1 + profile.dc_offset_i, q1 + profile.dc_offset_q);
        // oscillator phase walk
        let step: f64 = rng.sample(StandardNormal);
        theta += profile.phase_noise_std * step;
        let (s, c) = theta.sin_cos();
        let (i3, q3) = (i2 * c - q2 * s, i2 * s + q2 * c);
        // compressive amplifier
        let k = 1.0 + a3 * (i3 * i3 + q3 * q3);
        tx.push((i3 * k, q3 * k));
    }

    let rx: Vec<(f64, f64)> = match channel {
        Channel::Flat => tx,
        Channel::Multipath(taps) => (0..n)
            .map(|t| {
                let mut acc = (0.0, 0.0);
                for (d, &(hr, hi)) in taps.iter().enumerate() {
                    if t >= d {
                        let (xr, xi) = tx[t - d];
                        acc.0 += hr * xr - hi * xi;
                        acc.1 += hr * xi + hi * xr;
                    }
                }
                acc
            })
            .collect(),
    };

    let sigma = if snr_db.is_finite() {
        (10f64.powf(-snr_db / 10.0) / 2.0).sqrt()
    } else {
        0.0
    };
    let mut noise_rng = seed::rng_for(profile.rng_seed, "awgn", &[payload_seed]);
    let samples = rx
        .into_iter()
        .map(|(i, q)| {
            if sigma > 0.0 {
                let ni: f64 = noise_rng.sample(StandardNormal);
                let nq: f64 = noise_rng.sample(StandardNormal);
                [(i + sigma * ni) as f32, (q + sigma * nq) as f32]
            } else {
                [i as f32, q as f32]
            }
        })
        .collect();
    Ok(IQSignal {
        samples,
        label: Some(profile.emitter_id),
        snr_db,
    })
}
