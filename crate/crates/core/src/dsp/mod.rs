//! Preprocessing: band-pass, power-line notch bank, low-pass, reaction-time
//! trim and sliding-window segmentation.
//!
//! Filtering is causal (single forward pass) so the chain can run online.
//! Windows are not normalized after segmentation.

pub mod cache;
mod filter;
mod window;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use filter::{
    design_butterworth, design_notch_bank, Biquad, FilterKind, FilterSpec, SosCascade,
};
pub use window::{segment_windows, window_samples_for_ms, WindowSet, WindowSpec, WindowTensor};

use crate::dataset::Recording;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandpassConfig {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NotchConfig {
    pub base_hz: f64,
    pub harmonics: usize,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowpassConfig {
    pub order: usize,
    pub corner_hz: f64,
}

/// Filter chain and window parameters as they appear in the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub bandpass: BandpassConfig,
    pub notch: NotchConfig,
    pub lowpass: LowpassConfig,
    pub window: WindowSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bandpass: BandpassConfig {
                order: 8,
                low_hz: 10.0,
                high_hz: 500.0,
            },
            notch: NotchConfig {
                base_hz: 50.0,
                harmonics: 8,
                q: 15.0,
            },
            lowpass: LowpassConfig {
                order: 8,
                corner_hz: 200.0,
            },
            window: WindowSpec::default(),
        }
    }
}

/// The designed cascades, applied band-pass → notch bank → low-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessChain {
    pub bandpass: SosCascade,
    pub notch: SosCascade,
    pub lowpass: SosCascade,
}

impl PreprocessChain {
    pub fn design(cfg: &PreprocessConfig, sample_rate_hz: f64) -> Result<Self> {
        let b = cfg.bandpass;
        let n = cfg.notch;
        let l = cfg.lowpass;
        Ok(PreprocessChain {
            bandpass: FilterSpec::bandpass(b.order, b.low_hz, b.high_hz, sample_rate_hz)
                .design()?,
            notch: FilterSpec::notch(n.base_hz, n.harmonics, n.q, sample_rate_hz).design()?,
            lowpass: FilterSpec::lowpass(l.order, l.corner_hz, sample_rate_hz).design()?,
        })
    }

    pub fn stages(&self) -> [&SosCascade; 3] {
        [&self.bandpass, &self.notch, &self.lowpass]
    }

    pub fn apply(&self, rec: &Recording) -> Result<Recording> {
        filter_record(rec, &self.stages())
    }
}

/// Filters every channel independently through `chain`, in order.
pub fn filter_record(rec: &Recording, chain: &[&SosCascade]) -> Result<Recording> {
    let mut out = rec.clone();
    let samples = rec.samples();
    out.signal_mut()
        .par_chunks_mut(samples)
        .for_each(|channel| chain.iter().for_each(|c| c.filter_in_place(channel)));
    if let Some(pos) = out.signal().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{}: filter output became non-finite at channel {}",
            rec.provenance,
            pos / samples
        )));
    }
    Ok(out)
}
