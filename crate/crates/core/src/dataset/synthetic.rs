//! Synthetic two-day HD-sEMG sessions.
//!
//! Each gesture owns a spatial activation template: a few Gaussian blobs per
//! 8×8 grid. A subject sees the global templates translated by a small
//! subject-specific offset with jittered blob amplitudes. A recording is
//! `template × envelope(t) × carrier(t) + baseline noise`, where the
//! envelope ramps from rest to full contraction over the one-second
//! repetition and the carrier mixes a source shared by all channels with
//! independent per-channel sources, both band-limited to 20–450 Hz.
//!
//! Day 2 scales templates by `1 − template_gain_drift`, translates them by
//! `spatial_shift_electrodes` rows, and adds white noise with standard
//! deviation `noise_sigma_ratio` times the clean record RMS.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{channel_index, Day, Provenance, Recording, GRIDS, GRID_COLS, GRID_ROWS, N_GESTURES, REPETITIONS};
use super::{CHANNELS, DEFAULT_SAMPLE_RATE_HZ};
use crate::dsp::{FilterSpec, SosCascade};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Samples per synthetic repetition (one second).
pub const SYNTHETIC_SAMPLES: usize = 2048;
const WARMUP: usize = 256;
const REST_LEVEL: f64 = 0.1;
const SHARED_CARRIER: f64 = 0.6;
const BASELINE_NOISE: f64 = 0.25;
const BLOBS_PER_GRID: usize = 2;
const SUBJECT_OFFSET: f64 = 0.5;
const AMPLITUDE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticShiftConfig {
    /// Fractional loss of template gain on Day 2.
    pub template_gain_drift: f64,
    pub spatial_shift_electrodes: u32,
    pub noise_sigma_ratio: f64,
    /// Seeds the Day-2 extra noise.
    pub seed: u64,
}

impl Default for SyntheticShiftConfig {
    fn default() -> Self {
        SyntheticShiftConfig {
            template_gain_drift: 0.2,
            spatial_shift_electrodes: 1,
            noise_sigma_ratio: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticShiftConfig {
    pub fn none() -> Self {
        SyntheticShiftConfig {
            template_gain_drift: 0.0,
            spatial_shift_electrodes: 0,
            noise_sigma_ratio: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.spatial_shift_electrodes > 3 {
            problems.push(format!(
                "spatial_shift_electrodes = {} must be in [0, 3]",
                self.spatial_shift_electrodes
            ));
        }
        if !(self.noise_sigma_ratio >= 0.0 && self.noise_sigma_ratio.is_finite()) {
            problems.push(format!(
                "noise_sigma_ratio = {} must be finite and ≥ 0",
                self.noise_sigma_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.template_gain_drift) {
            problems.push(format!(
                "template_gain_drift = {} must be in [0, 1)",
                self.template_gain_drift
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    grid: usize,
    row: f64,
    col: f64,
    width: f64,
    amplitude: f64,
}

fn global_blobs(seed: u64, gesture: usize) -> Vec<Blob> {
    let mut rng = stream(seed, &format!("synthetic/template/{gesture}"));
    (0..GRIDS)
        .flat_map(|grid| (0..BLOBS_PER_GRID).map(move |_| grid))
        .map(|grid| Blob {
            grid,
            row: rng.gen_range(0.0..(GRID_ROWS - 1) as f64),
            col: rng.gen_range(0.0..(GRID_COLS - 1) as f64),
            width: rng.gen_range(0.6..1.0),
            amplitude: rng.gen_range(0.2..1.0),
        })
        .collect()
}

/// Spatial activation (one gain per grid-major channel) of `gesture` for
/// `subject` on `day`.
pub fn gesture_template(
    subject: u32,
    gesture: usize,
    day: Day,
    shift: &SyntheticShiftConfig,
    seed: u64,
) -> Vec<f64> {
    let mut rng = stream(seed, &format!("synthetic/subject/{subject}"));
    let dr = rng.gen_range(-SUBJECT_OFFSET..SUBJECT_OFFSET);
    let dc = rng.gen_range(-SUBJECT_OFFSET..SUBJECT_OFFSET);
    let mut jitter = stream(seed, &format!("synthetic/subject/{subject}/{gesture}"));
    let mut blobs = global_blobs(seed, gesture);
    for b in &mut blobs {
        b.amplitude *= jitter.gen_range(0.8..1.2);
        b.row += dr;
        b.col += dc;
    }
    let (gain, row_shift) = match day {
        Day::Day1 => (1.0, 0.0),
        Day::Day2 => (
            1.0 - shift.template_gain_drift,
            f64::from(shift.spatial_shift_electrodes),
        ),
    };
    let mut template = vec![0.0; CHANNELS];
    for b in &blobs {
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let d2 = (r as f64 - b.row - row_shift).powi(2) + (c as f64 - b.col).powi(2);
                template[channel_index(b.grid, r, c)] +=
                    AMPLITUDE * gain * b.amplitude * (-d2 / (2.0 * b.width * b.width)).exp();
            }
        }
    }
    template
}

/// Rest-to-contraction ramp over the repetition.
fn envelope(t: usize, samples: usize) -> f64 {
    let x = t as f64 / (samples - 1) as f64;
    REST_LEVEL + (1.0 - REST_LEVEL) * x * x * (3.0 - 2.0 * x)
}

fn band_limited(rng: &mut crate::rng::Rng, filter: &SosCascade, out: &mut [f64]) {
    let mut buf: Vec<f64> = (0..WARMUP + out.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    filter.filter_in_place(&mut buf);
    let tail = &buf[WARMUP..];
    let std = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
    for (o, v) in out.iter_mut().zip(tail) {
        *o = v / std;
    }
}

fn carrier_filter() -> SosCascade {
    FilterSpec::bandpass(2, 20.0, 450.0, DEFAULT_SAMPLE_RATE_HZ)
        .design()
        .expect("carrier band is valid")
}

fn synthesize(
    provenance: Provenance,
    template: &[f64],
    shift: &SyntheticShiftConfig,
    seed: u64,
    filter: &SosCascade,
) -> Result<Recording> {
    let n = SYNTHETIC_SAMPLES;
    let label = format!(
        "synthetic/record/{}/{}/{}/{}",
        provenance.subject, provenance.gesture, provenance.day, provenance.repetition
    );
    let mut rng = stream(seed, &label);
    let rep_gain: f64 = rng.gen_range(0.9..1.1);
    let mut shared = vec![0.0; n];
    band_limited(&mut rng, filter, &mut shared);
    let env: Vec<f64> = (0..n).map(|t| envelope(t, n) * rep_gain).collect();
    let (a, b) = (SHARED_CARRIER.sqrt(), (1.0 - SHARED_CARRIER).sqrt());
    let mut signal = vec![0.0; CHANNELS * n];
    let mut own = vec![0.0; n];
    for (ch, out) in signal.chunks_exact_mut(n).enumerate() {
        band_limited(&mut rng, filter, &mut own);
        for t in 0..n {
            out[t] = template[ch] * env[t] * (a * shared[t] + b * own[t]);
        }
    }
    if provenance.day == Day::Day2 && shift.noise_sigma_ratio > 0.0 {
        let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
        let sigma = shift.noise_sigma_ratio * rms;
        let mut extra = stream(shift.seed, &format!("{label}/shift"));
        for v in &mut signal {
            let e: f64 = StandardNormal.sample(&mut extra);
            *v += sigma * e;
        }
    }
    for v in &mut signal {
        let noise: f64 = StandardNormal.sample(&mut rng);
        *v += BASELINE_NOISE * noise;
    }
    Recording::new(provenance, DEFAULT_SAMPLE_RATE_HZ, signal)
}

/// All 11 gestures × 6 repetitions × 2 days for one subject, ordered by
/// day, gesture, repetition.
pub fn generate_subject(subject: u32, shift: &SyntheticShiftConfig, seed: u64) -> Result<Vec<Recording>> {
    shift.validate()?;
    let filter = carrier_filter();
    let jobs: Vec<(Provenance, Vec<f64>)> = [Day::Day1, Day::Day2]
        .into_iter()
        .flat_map(|day| {
            (0..N_GESTURES).flat_map(move |g| {
                (1..=REPETITIONS).map(move |rep| Provenance {
                    subject,
                    gesture: g as u8,
                    day,
                    repetition: rep,
                })
            })
        })
        .map(|p| {
            let template = gesture_template(subject, p.gesture as usize, p.day, shift, seed);
            (p, template)
        })
        .collect();
    jobs.par_iter()
        .map(|(p, template)| synthesize(*p, template, shift, seed, &filter))
        .collect()
}

/// Synthetic sessions for subjects `1..=subjects`.
pub fn generate_synthetic(subjects: u32, shift: &SyntheticShiftConfig, seed: u64) -> Result<Vec<Recording>> {
    if subjects == 0 {
        return Err(Error::InvalidArgument("subjects must be ≥ 1".into()));
    }
    let mut out = Vec::with_capacity(subjects as usize * N_GESTURES * REPETITIONS as usize * 2);
    for s in 1..=subjects {
        out.extend(generate_subject(s, shift, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_lengths() {
        let recs = generate_synthetic(2, &SyntheticShiftConfig::default(), 7).unwrap();
        assert_eq!(recs.len(), 264);
        assert!(recs.iter().all(|r| r.samples() == 2048));
        let day2 = recs.iter().filter(|r| r.provenance.day == Day::Day2).count();
        assert_eq!(day2, 132);
    }

    #[test]
    fn same_seed_same_bytes() {
        let shift = SyntheticShiftConfig::default();
        let a = generate_subject(3, &shift, 11).unwrap();
        let b = generate_subject(3, &shift, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_subject(3, &shift, 12).unwrap();
        assert_ne!(a[0].signal(), c[0].signal());
    }

    #[test]
    fn zero_shift_keeps_templates() {
        let none = SyntheticShiftConfig::none();
        for g in 0..N_GESTURES {
            assert_eq!(
                gesture_template(2, g, Day::Day1, &none, 5),
                gesture_template(2, g, Day::Day2, &none, 5)
            );
        }
        let shifted = SyntheticShiftConfig::default();
        assert_ne!(
            gesture_template(2, 0, Day::Day1, &shifted, 5),
            gesture_template(2, 0, Day::Day2, &shifted, 5)
        );
    }

    #[test]
    fn day_two_energy_reflects_drift() {
        let shift = SyntheticShiftConfig {
            noise_sigma_ratio: 0.0,
            spatial_shift_electrodes: 0,
            ..SyntheticShiftConfig::default()
        };
        let d1: f64 = gesture_template(1, 4, Day::Day1, &shift, 3).iter().sum();
        let d2: f64 = gesture_template(1, 4, Day::Day2, &shift, 3).iter().sum();
        assert!((d2 / d1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn gestures_have_distinct_templates() {
        let none = SyntheticShiftConfig::none();
        let t: Vec<Vec<f64>> = (0..N_GESTURES)
            .map(|g| gesture_template(1, g, Day::Day1, &none, 0))
            .collect();
        for i in 0..N_GESTURES {
            for j in i + 1..N_GESTURES {
                let dot: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                let ni: f64 = t[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj: f64 = t[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(dot / (ni * nj) < 0.95, "gestures {i} and {j} nearly identical");
            }
        }
    }

    #[test]
    fn invalid_shift_is_rejected() {
        let bad = SyntheticShiftConfig {
            spatial_shift_electrodes: 4,
            noise_sigma_ratio: -1.0,
            ..SyntheticShiftConfig::default()
        };
        match bad.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
        assert!(generate_synthetic(0, &SyntheticShiftConfig::default(), 0).is_err());
    }
}
