//! Recordings, manifest ingestion, synthetic two-day sessions and the
//! train/validation/calibration/test split protocol.

mod manifest;
mod recording;
mod split;
mod synthetic;

pub use manifest::{
    load_dataset, load_manifest_file, Endian, Interleave, Layout, Manifest, PayloadFormat,
    RecordEntry, SampleType,
};
pub use recording::*;
pub use split::{calibration_folds, make_splits, Partition, SplitDataset, SplitPlan};
pub use synthetic::{
    generate_subject, generate_synthetic, gesture_template, SyntheticShiftConfig,
    SYNTHETIC_SAMPLES,
};
