use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Provenance, Recording, CHANNELS, GRIDS, GRID_COLS, GRID_ROWS};
use crate::error::{Error, Result};

/// Sliding-window segmentation parameters, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_samples: usize,
    pub stride_samples: usize,
    pub trim_samples: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            window_samples: 100,
            stride_samples: 20,
            trim_samples: 512,
        }
    }
}

/// Samples for a window of `ms` milliseconds. 50 ms at 2048 Hz is pinned to
/// the 100-sample model input; other lengths round `ms·fs/1000`.
pub fn window_samples_for_ms(ms: f64, sample_rate_hz: f64) -> usize {
    if ms == 50.0 && sample_rate_hz == 2048.0 {
        return 100;
    }
    (ms * sample_rate_hz / 1000.0).round() as usize
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_samples == 0 || self.stride_samples == 0 {
            return Err(Error::InvalidArgument(
                "window and stride must be positive".into(),
            ));
        }
        if self.stride_samples > self.window_samples {
            return Err(Error::InvalidArgument(format!(
                "stride {} exceeds window {}",
                self.stride_samples, self.window_samples
            )));
        }
        Ok(())
    }

    /// Windows produced from a record of `samples` samples.
    pub fn window_count(&self, samples: usize) -> Result<usize> {
        self.validate()?;
        let needed = self.trim_samples + self.window_samples;
        if samples < needed {
            return Err(Error::Segmentation(format!(
                "record of {samples} samples is shorter than trim + window = {needed}"
            )));
        }
        Ok((samples - needed) / self.stride_samples + 1)
    }
}

/// One model input of shape `(T × GRIDS × GRID_ROWS × GRID_COLS)`, stored
/// time-major: sample `t` of channel `c` lives at `t·CHANNELS + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTensor {
    data: Vec<f32>,
    window_samples: usize,
    pub provenance: Provenance,
    /// Position of the window within its recording.
    pub index: u32,
}

impl WindowTensor {
    pub fn from_flat(
        window_samples: usize,
        data: Vec<f32>,
        provenance: Provenance,
        index: u32,
    ) -> Result<Self> {
        if data.len() != window_samples * CHANNELS {
            return Err(Error::Shape(format!(
                "window of {window_samples} samples needs {} values, got {}",
                window_samples * CHANNELS,
                data.len()
            )));
        }
        Ok(WindowTensor {
            data,
            window_samples,
            provenance,
            index,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.window_samples, GRIDS, GRID_ROWS, GRID_COLS]
    }

    pub fn label(&self) -> usize {
        self.provenance.gesture as usize
    }

    pub fn at(&self, t: usize, grid: usize, row: usize, col: usize) -> f32 {
        self.data[t * CHANNELS + crate::dataset::channel_index(grid, row, col)]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.data
    }
}

/// Drops the reaction-time prefix and cuts overlapping windows.
pub fn segment_windows(rec: &Recording, spec: &WindowSpec) -> Result<Vec<WindowTensor>> {
    let count = spec.window_count(rec.samples())?;
    let segmented = SegmentedRecord::from_recording(rec, spec)?;
    Ok((0..count)
        .map(|i| {
            let start = i * spec.stride_samples;
            WindowTensor {
                data: segmented.rows(start, spec.window_samples).to_vec(),
                window_samples: spec.window_samples,
                provenance: rec.provenance,
                index: i as u32,
            }
        })
        .collect())
}

/// A trimmed recording in time-major `f32` layout.
#[derive(Debug)]
struct SegmentedRecord {
    provenance: Provenance,
    data: Vec<f32>,
}

impl SegmentedRecord {
    fn from_recording(rec: &Recording, spec: &WindowSpec) -> Result<Self> {
        spec.window_count(rec.samples())?;
        let kept = rec.samples() - spec.trim_samples;
        let mut data = vec![0.0f32; kept * CHANNELS];
        for (c, channel) in rec.channels().enumerate() {
            for (t, &v) in channel[spec.trim_samples..].iter().enumerate() {
                data[t * CHANNELS + c] = v as f32;
            }
        }
        Ok(SegmentedRecord {
            provenance: rec.provenance,
            data,
        })
    }

    fn rows(&self, start: usize, len: usize) -> &[f32] {
        &self.data[start * CHANNELS..(start + len) * CHANNELS]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct WindowRef {
    record: u32,
    start: u32,
    index: u32,
}

/// A labeled collection of windows that share the underlying trimmed
/// recordings. Subsets are cheap: they copy indices, never samples.
#[derive(Debug, Clone)]
pub struct WindowSet {
    window_samples: usize,
    records: Vec<Arc<SegmentedRecord>>,
    windows: Vec<WindowRef>,
}

impl WindowSet {
    pub fn empty(window_samples: usize) -> Self {
        WindowSet {
            window_samples,
            records: Vec::new(),
            windows: Vec::new(),
        }
    }

    pub fn from_recordings<'a>(
        recordings: impl IntoIterator<Item = &'a Recording>,
        spec: &WindowSpec,
    ) -> Result<Self> {
        let mut set = WindowSet::empty(spec.window_samples);
        for rec in recordings {
            set.push_recording(rec, spec)?;
        }
        Ok(set)
    }

    pub fn push_recording(&mut self, rec: &Recording, spec: &WindowSpec) -> Result<()> {
        if spec.window_samples != self.window_samples {
            return Err(Error::Shape(format!(
                "window set holds {}-sample windows, spec asks for {}",
                self.window_samples, spec.window_samples
            )));
        }
        let count = spec.window_count(rec.samples())?;
        let record = self.records.len() as u32;
        self.records
            .push(Arc::new(SegmentedRecord::from_recording(rec, spec)?));
        self.windows.extend((0..count).map(|i| WindowRef {
            record,
            start: (i * spec.stride_samples) as u32,
            index: i as u32,
        }));
        Ok(())
    }

    /// Adds standalone windows (e.g. loaded from a cache file).
    pub fn push_window(&mut self, window: WindowTensor) -> Result<()> {
        if window.window_samples != self.window_samples {
            return Err(Error::Shape(format!(
                "window set holds {}-sample windows, got {}",
                self.window_samples, window.window_samples
            )));
        }
        let record = self.records.len() as u32;
        self.records.push(Arc::new(SegmentedRecord {
            provenance: window.provenance,
            data: window.data,
        }));
        self.windows.push(WindowRef {
            record,
            start: 0,
            index: window.index,
        });
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        self.window_samples
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Time-major samples of window `i` (`T × CHANNELS`).
    pub fn samples(&self, i: usize) -> &[f32] {
        let w = self.windows[i];
        self.records[w.record as usize].rows(w.start as usize, self.window_samples)
    }

    pub fn provenance(&self, i: usize) -> Provenance {
        self.records[self.windows[i].record as usize].provenance
    }

    pub fn label(&self, i: usize) -> usize {
        self.provenance(i).gesture as usize
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn window(&self, i: usize) -> WindowTensor {
        WindowTensor {
            data: self.samples(i).to_vec(),
            window_samples: self.window_samples,
            provenance: self.provenance(i),
            index: self.windows[i].index,
        }
    }

    pub fn window_index(&self, i: usize) -> u32 {
        self.windows[i].index
    }

    /// Windows whose provenance satisfies `keep`, sharing storage with `self`.
    pub fn filter(&self, keep: impl Fn(&Provenance) -> bool) -> WindowSet {
        WindowSet {
            window_samples: self.window_samples,
            records: self.records.clone(),
            windows: self
                .windows
                .iter()
                .copied()
                .filter(|w| keep(&self.records[w.record as usize].provenance))
                .collect(),
        }
    }

    /// Concatenation of `sets`, in order.
    pub fn concat(sets: &[&WindowSet]) -> Result<WindowSet> {
        let window_samples = sets.first().map(|s| s.window_samples).unwrap_or(0);
        let mut out = WindowSet::empty(window_samples);
        for set in sets {
            if set.window_samples != window_samples {
                return Err(Error::Shape("cannot concatenate window sets of different lengths".into()));
            }
            let offset = out.records.len() as u32;
            out.records.extend(set.records.iter().cloned());
            out.windows.extend(set.windows.iter().map(|w| WindowRef {
                record: w.record + offset,
                ..*w
            }));
        }
        Ok(out)
    }

    /// Writes window `i` into `out` as `f64`.
    pub fn write_f64(&self, i: usize, out: &mut [f64]) {
        for (o, &v) in out.iter_mut().zip(self.samples(i)) {
            *o = f64::from(v);
        }
    }
}
