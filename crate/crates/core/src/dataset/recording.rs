use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Electrode grids per recording.
pub const GRIDS: usize = 4;
/// Rows per electrode grid.
pub const GRID_ROWS: usize = 8;
/// Columns per electrode grid.
pub const GRID_COLS: usize = 8;
/// Channels per recording, `GRIDS · GRID_ROWS · GRID_COLS`.
pub const CHANNELS: usize = GRIDS * GRID_ROWS * GRID_COLS;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 2048.0;
pub const REPETITIONS: u8 = 6;

/// The eleven dynamic gestures, in label order.
pub const GESTURES: [&str; 11] = [
    "IFE", "LFE", "WF", "ETIF", "EIMF", "WSHC", "WFHO", "EMRLF", "EIMRLF", "HC", "HO",
];
pub const N_GESTURES: usize = GESTURES.len();

/// Grid-major channel index of electrode `(grid, row, col)`.
pub fn channel_index(grid: usize, row: usize, col: usize) -> usize {
    (grid * GRID_ROWS + row) * GRID_COLS + col
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Day {
    Day1,
    Day2,
}

impl Day {
    pub fn from_number(n: u8) -> Option<Day> {
        match n {
            1 => Some(Day::Day1),
            2 => Some(Day::Day2),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Day::Day1 => 1,
            Day::Day2 => 2,
        }
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "day{}", self.number())
    }
}

/// Where a recording (and every window cut from it) came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: u32,
    pub gesture: u8,
    pub day: Day,
    pub repetition: u8,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subject {} {} gesture {} rep {}",
            self.subject,
            self.day,
            GESTURES
                .get(self.gesture as usize)
                .copied()
                .unwrap_or("?"),
            self.repetition
        )
    }
}

/// One repetition of one gesture: a `CHANNELS × samples` signal stored
/// channel-major in grid-major channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub provenance: Provenance,
    pub sample_rate_hz: f64,
    signal: Vec<f64>,
    samples: usize,
}

impl Recording {
    pub fn new(provenance: Provenance, sample_rate_hz: f64, signal: Vec<f64>) -> Result<Self> {
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::Data(format!(
                "{provenance}: sample rate {sample_rate_hz} must be positive"
            )));
        }
        if provenance.gesture as usize >= N_GESTURES {
            return Err(Error::Data(format!(
                "gesture id {} outside 0..{}",
                provenance.gesture,
                N_GESTURES - 1
            )));
        }
        if !(1..=REPETITIONS).contains(&provenance.repetition) {
            return Err(Error::Data(format!(
                "repetition {} outside 1..={REPETITIONS}",
                provenance.repetition
            )));
        }
        if signal.is_empty() || !signal.len().is_multiple_of(CHANNELS) {
            return Err(Error::Layout(format!(
                "{provenance}: {} values do not form {CHANNELS} channels",
                signal.len()
            )));
        }
        if let Some(pos) = signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{provenance}: non-finite sample at channel {}, index {}",
                pos / (signal.len() / CHANNELS),
                pos % (signal.len() / CHANNELS)
            )));
        }
        let samples = signal.len() / CHANNELS;
        Ok(Recording {
            provenance,
            sample_rate_hz,
            signal,
            samples,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        &self.signal[ch * self.samples..(ch + 1) * self.samples]
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        self.signal.chunks_exact(self.samples)
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub(crate) fn signal_mut(&mut self) -> &mut [f64] {
        &mut self.signal
    }

    pub fn into_signal(self) -> Vec<f64> {
        self.signal
    }
}
