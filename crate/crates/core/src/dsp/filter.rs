//! Butterworth and notch designs realized as second-order-section cascades.
//!
//! Butterworth stages start from the analog prototype poles, map them through
//! the lowpass or lowpass-to-bandpass transform with pre-warped corners, and
//! discretize with the bilinear transform. Every section is normalized to
//! `a0 = 1`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    fn scaled(self, gain: f64) -> Self {
        Biquad {
            b0: self.b0 * gain,
            b1: self.b1 * gain,
            b2: self.b2 * gain,
            ..self
        }
    }

    /// Section with numerator `numerator` and the conjugate pole pair `pole`.
    fn from_pole(numerator: [f64; 3], pole: Complex64) -> Self {
        Biquad {
            b0: numerator[0],
            b1: numerator[1],
            b2: numerator[2],
            a1: -2.0 * pole.re,
            a2: pole.norm_sqr(),
        }
    }
}

/// A cascade of biquads applied in order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SosCascade {
    pub sections: Vec<Biquad>,
}

impl SosCascade {
    pub fn new(sections: Vec<Biquad>) -> Self {
        SosCascade { sections }
    }

    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude_db(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        20.0 * self.response(freq_hz, sample_rate_hz).norm().log10()
    }

    /// Causal filtering (transposed direct form II) from zero initial state.
    pub fn filter_in_place(&self, signal: &mut [f64]) {
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for x in signal.iter_mut() {
                let input = *x;
                let y = s.b0 * input + z1;
                z1 = s.b1 * input - s.a1 * y + z2;
                z2 = s.b2 * input - s.a2 * y;
                *x = y;
            }
        }
    }

    pub fn filter(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        self.filter_in_place(&mut out);
        out
    }

    /// True when every section's poles lie strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.a2.abs() < 1.0 && s.a1.abs() < 1.0 + s.a2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterKind {
    /// `order` is the prototype order; the band-pass has `2·order` poles.
    Bandpass { order: usize, low_hz: f64, high_hz: f64 },
    Lowpass { order: usize, corner_hz: f64 },
    /// Second-order notches at `k·base_hz`, `k = 1..=harmonics`. `q` is the
    /// quality factor of the fundamental; harmonic `k` uses `k·q`, so every
    /// notch has the same `base_hz / q` bandwidth.
    Notch { base_hz: f64, harmonics: usize, q: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    pub sample_rate_hz: f64,
}

impl FilterSpec {
    pub fn bandpass(order: usize, low_hz: f64, high_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Bandpass {
                order,
                low_hz,
                high_hz,
            },
            sample_rate_hz,
        }
    }

    pub fn lowpass(order: usize, corner_hz: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Lowpass { order, corner_hz },
            sample_rate_hz,
        }
    }

    pub fn notch(base_hz: f64, harmonics: usize, q: f64, sample_rate_hz: f64) -> Self {
        FilterSpec {
            kind: FilterKind::Notch {
                base_hz,
                harmonics,
                q,
            },
            sample_rate_hz,
        }
    }

    pub fn design(&self) -> Result<SosCascade> {
        match self.kind {
            FilterKind::Notch {
                base_hz,
                harmonics,
                q,
            } => design_notch_bank(base_hz, harmonics, self.sample_rate_hz, q),
            _ => design_butterworth(self),
        }
    }
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(Error::Design(format!(
            "Butterworth order must be a positive even integer, got {order}"
        )));
    }
    Ok(())
}

fn check_corner(hz: f64, fs: f64) -> Result<()> {
    let nyquist = fs / 2.0;
    if !(hz > 0.0 && hz < nyquist) {
        return Err(Error::Design(format!(
            "corner {hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    Ok(())
}

/// Pre-warped analog frequency (rad/s) for a digital corner.
fn prewarp(hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * hz / fs).tan()
}

fn bilinear(s: Complex64, fs: f64) -> Complex64 {
    let k = 2.0 * fs;
    (k + s) / (k - s)
}

/// Upper-half-plane poles of the normalized Butterworth prototype.
fn prototype_poles(order: usize) -> impl Iterator<Item = Complex64> {
    (0..order / 2).map(move |k| {
        let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
        Complex64::new(-theta.sin(), theta.cos())
    })
}

/// Designs a Butterworth low-pass or band-pass cascade.
pub fn design_butterworth(spec: &FilterSpec) -> Result<SosCascade> {
    let fs = spec.sample_rate_hz;
    if !(fs > 0.0 && fs.is_finite()) {
        return Err(Error::Design(format!("sample rate {fs} must be positive")));
    }
    match spec.kind {
        FilterKind::Lowpass { order, corner_hz } => {
            check_order(order)?;
            check_corner(corner_hz, fs)?;
            let wc = prewarp(corner_hz, fs);
            let sections = prototype_poles(order)
                .map(|p| {
                    let z = bilinear(p * wc, fs);
                    let s = Biquad::from_pole([1.0, 2.0, 1.0], z);
                    // unity gain at DC
                    s.scaled((1.0 + s.a1 + s.a2) / 4.0)
                })
                .collect();
            Ok(SosCascade::new(sections))
        }
        FilterKind::Bandpass {
            order,
            low_hz,
            high_hz,
        } => {
            check_order(order)?;
            check_corner(low_hz, fs)?;
            check_corner(high_hz, fs)?;
            if low_hz >= high_hz {
                return Err(Error::Design(format!(
                    "band-pass corners must satisfy low < high, got {low_hz} ≥ {high_hz}"
                )));
            }
            let (w1, w2) = (prewarp(low_hz, fs), prewarp(high_hz, fs));
            let bw = w2 - w1;
            let w0_sq = w1 * w2;
            let center_hz = (w0_sq.sqrt() / (2.0 * fs)).atan() * fs / PI;
            let mut sections = Vec::with_capacity(order);
            for p in prototype_poles(order) {
                // roots of s² − p·B·s + ω0² = 0
                let pb = p * bw;
                let disc = (pb * pb - 4.0 * w0_sq).sqrt();
                for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
                    let z = bilinear(s, fs);
                    sections.push(Biquad::from_pole([1.0, 0.0, -1.0], z));
                }
            }
            let sections = sections
                .into_iter()
                .map(|s| {
                    let single = SosCascade::new(vec![s]);
                    s.scaled(1.0 / single.response(center_hz, fs).norm())
                })
                .collect();
            Ok(SosCascade::new(sections))
        }
        FilterKind::Notch { .. } => Err(Error::Design(
            "notch specs are designed with design_notch_bank".into(),
        )),
    }
}

/// Cascade of second-order notches at `k·base_hz` for `k = 1..=harmonics`.
pub fn design_notch_bank(base_hz: f64, harmonics: usize, fs: f64, q: f64) -> Result<SosCascade> {
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Design(format!("notch Q must be positive, got {q}")));
    }
    if harmonics == 0 {
        return Err(Error::Design("notch bank needs at least one harmonic".into()));
    }
    let nyquist = fs / 2.0;
    let top = base_hz * harmonics as f64;
    if !(base_hz > 0.0) || top >= nyquist {
        return Err(Error::Design(format!(
            "harmonic {harmonics} of {base_hz} Hz ({top} Hz) is not below Nyquist ({nyquist} Hz)"
        )));
    }
    let sections = (1..=harmonics)
        .map(|k| {
            let w0 = 2.0 * PI * base_hz * k as f64 / fs;
            let alpha = w0.sin() / (2.0 * q * k as f64);
            let a0 = 1.0 + alpha;
            let c = -2.0 * w0.cos() / a0;
            Biquad {
                b0: 1.0 / a0,
                b1: c,
                b2: 1.0 / a0,
                a1: c,
                a2: (1.0 - alpha) / a0,
            }
        })
        .collect();
    Ok(SosCascade::new(sections))
}
