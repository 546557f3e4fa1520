//! Manifest-driven loader for recorded sessions.
//!
//! A manifest is a TOML file with one `[layout]` table describing how signal
//! files are encoded and one `[[record]]` entry per repetition:
//!
//! ```toml
//! [layout]
//! format = "binary"           # "binary" or "csv"
//! dtype = "i16"               # binary only: "i16", "f32" or "f64"
//! endian = "little"           # binary only: "little" or "big"
//! interleave = "sample_major" # "sample_major" (frames of all channels) or "channel_major"
//! channels = 256
//! sample_rate_hz = 2048.0
//! scale = 1.0                 # multiplier applied to every raw value
//! header_bytes = 0            # binary only: bytes skipped at the start of each file
//! csv_header = false          # csv only: first row holds column names
//! # channel_map[i] = grid-major destination of file channel i (identity if absent)
//!
//! [[record]]
//! path = "s01/IFE_day1_rep1.bin"   # relative to the manifest root
//! subject = 1
//! gesture = 0
//! day = 1
//! repetition = 1
//! ```
//!
//! CSV payloads hold one row per sample and one column per channel.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Day, Provenance, Recording, CHANNELS, DEFAULT_SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadFormat {
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleType {
    I16,
    F32,
    F64,
}

impl SampleType {
    fn width(self) -> usize {
        match self {
            SampleType::I16 => 2,
            SampleType::F32 => 4,
            SampleType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endian {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    SampleMajor,
    ChannelMajor,
}

fn default_rate() -> f64 {
    DEFAULT_SAMPLE_RATE_HZ
}

fn default_channels() -> usize {
    CHANNELS
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layout {
    pub format: PayloadFormat,
    #[serde(default = "default_dtype")]
    pub dtype: SampleType,
    #[serde(default = "default_endian")]
    pub endian: Endian,
    #[serde(default = "default_interleave")]
    pub interleave: Interleave,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub header_bytes: usize,
    #[serde(default)]
    pub csv_header: bool,
    #[serde(default)]
    pub channel_map: Option<Vec<usize>>,
}

fn default_dtype() -> SampleType {
    SampleType::F32
}

fn default_endian() -> Endian {
    Endian::Little
}

fn default_interleave() -> Interleave {
    Interleave::SampleMajor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub path: PathBuf,
    pub subject: u32,
    pub gesture: u8,
    pub day: u8,
    pub repetition: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub layout: Layout,
    #[serde(rename = "record", default)]
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Layout(format!("manifest: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_toml(&text)
    }
}

/// Reads every record listed in `manifest`, with paths resolved against
/// `root`. Records come back in manifest order with channels in grid-major
/// order.
pub fn load_dataset(root: &Path, manifest: &Manifest) -> Result<Vec<Recording>> {
    check_layout(&manifest.layout)?;
    manifest
        .records
        .par_iter()
        .map(|entry| load_record(root, &manifest.layout, entry))
        .collect()
}

/// Convenience wrapper: reads the manifest at `path` and loads relative to
/// its directory.
pub fn load_manifest_file(path: &Path) -> Result<Vec<Recording>> {
    let manifest = Manifest::from_path(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    load_dataset(root, &manifest)
}

fn check_layout(layout: &Layout) -> Result<()> {
    if layout.channels != CHANNELS {
        return Err(Error::Layout(format!(
            "manifest declares {} channels, expected {CHANNELS}",
            layout.channels
        )));
    }
    if let Some(map) = &layout.channel_map {
        let mut seen = vec![false; CHANNELS];
        if map.len() != CHANNELS {
            return Err(Error::Layout(format!(
                "channel_map has {} entries, expected {CHANNELS}",
                map.len()
            )));
        }
        for &dst in map {
            if dst >= CHANNELS || std::mem::replace(&mut seen[dst], true) {
                return Err(Error::Layout(format!(
                    "channel_map is not a permutation of 0..{CHANNELS} (entry {dst})"
                )));
            }
        }
    }
    Ok(())
}

fn load_record(root: &Path, layout: &Layout, entry: &RecordEntry) -> Result<Recording> {
    let name = entry.path.display().to_string();
    let ingest = |reason: String| Error::Ingest {
        record: name.clone(),
        reason,
    };
    let day = Day::from_number(entry.day).ok_or_else(|| ingest(format!("day {} is not 1 or 2", entry.day)))?;
    let provenance = Provenance {
        subject: entry.subject,
        gesture: entry.gesture,
        day,
        repetition: entry.repetition,
    };
    let path = root.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| ingest(format!("cannot read {}: {e}", path.display())))?;
    let (values, frames) = match layout.format {
        PayloadFormat::Binary => decode_binary(&bytes, layout, &name)?,
        PayloadFormat::Csv => decode_csv(&bytes, layout, &name)?,
    };
    let mut signal = vec![0.0; CHANNELS * frames];
    for src in 0..CHANNELS {
        let dst = layout.channel_map.as_ref().map_or(src, |m| m[src]);
        let out = &mut signal[dst * frames..(dst + 1) * frames];
        for (t, o) in out.iter_mut().enumerate() {
            let raw = match layout.interleave {
                Interleave::SampleMajor => values[t * CHANNELS + src],
                Interleave::ChannelMajor => values[src * frames + t],
            };
            *o = raw * layout.scale;
        }
    }
    Recording::new(provenance, layout.sample_rate_hz, signal).map_err(|e| match e {
        Error::Data(reason) => Error::Data(format!("{name}: {reason}")),
        other => other,
    })
}

fn decode_binary(bytes: &[u8], layout: &Layout, name: &str) -> Result<(Vec<f64>, usize)> {
    let body = bytes.get(layout.header_bytes..).ok_or_else(|| Error::Ingest {
        record: name.to_string(),
        reason: "file shorter than header".into(),
    })?;
    let width = layout.dtype.width();
    if body.len() % width != 0 {
        return Err(Error::Layout(format!(
            "{name}: {} payload bytes is not a multiple of the {width}-byte sample width",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(width)
        .map(|c| {
            let little = layout.endian == Endian::Little;
            match layout.dtype {
                SampleType::I16 => {
                    let b = [c[0], c[1]];
                    f64::from(if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) })
                }
                SampleType::F32 => {
                    let b = c.try_into().unwrap();
                    f64::from(if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) })
                }
                SampleType::F64 => {
                    let b = c.try_into().unwrap();
                    if little {
                        f64::from_le_bytes(b)
                    } else {
                        f64::from_be_bytes(b)
                    }
                }
            }
        })
        .collect();
    if !values.len().is_multiple_of(CHANNELS) {
        return Err(Error::Layout(format!(
            "{name}: {} values do not divide into {CHANNELS} channels",
            values.len()
        )));
    }
    let frames = values.len() / CHANNELS;
    Ok((values, frames))
}

fn decode_csv(bytes: &[u8], layout: &Layout, name: &str) -> Result<(Vec<f64>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(layout.csv_header)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Ingest {
            record: name.to_string(),
            reason: format!("csv row {i}: {e}"),
        })?;
        if row.len() != CHANNELS {
            return Err(Error::Layout(format!(
                "{name}: row {i} has {} channels, expected {CHANNELS}",
                row.len()
            )));
        }
        let parsed = row
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Ingest {
                    record: name.to_string(),
                    reason: format!("csv row {i}: {v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(parsed);
    }
    let frames = rows.len();
    let values = match layout.interleave {
        Interleave::SampleMajor => rows.concat(),
        // CSV rows are always samples; channel-major has no meaning here.
        Interleave::ChannelMajor => {
            return Err(Error::Layout(format!(
                "{name}: csv payloads must be sample-major"
            )))
        }
    };
    Ok((values, frames))
}
