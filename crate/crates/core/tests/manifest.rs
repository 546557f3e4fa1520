use std::fs;
use std::path::Path;

use mdhgr_core::dataset::{load_manifest_file, Day, CHANNELS};
use mdhgr_core::experiment::{prepare_subjects, DatasetSource, ExperimentConfig};
use mdhgr_core::{Error, ErrorKind};
use tempfile::TempDir;

const FRAMES: usize = 2048;

/// Raw value of file channel `ch` at frame `t`, small enough for i16.
fn raw(ch: usize, t: usize) -> i16 {
    ((ch * 7 + t * 3) % 2001) as i16 - 1000
}

/// Grid-major destination of file channel `ch`: a fixed permutation.
fn dest(ch: usize) -> usize {
    (ch * 37 + 11) % CHANNELS
}

fn write_binary_be_channel_major(path: &Path, header: usize) {
    let mut bytes = vec![0xAB; header];
    for ch in 0..CHANNELS {
        for t in 0..FRAMES {
            bytes.extend_from_slice(&raw(ch, t).to_be_bytes());
        }
    }
    fs::write(path, bytes).unwrap();
}

fn binary_manifest(dir: &Path, records: &[(&str, u32, u8, u8, u8)]) -> std::path::PathBuf {
    let map: Vec<String> = (0..CHANNELS).map(|c| dest(c).to_string()).collect();
    let mut text = format!(
        "[layout]\nformat = \"binary\"\ndtype = \"i16\"\nendian = \"big\"\ninterleave = \"channel_major\"\n\
         channels = 256\nsample_rate_hz = 2048.0\nscale = 0.5\nheader_bytes = 16\nchannel_map = [{}]\n",
        map.join(", ")
    );
    for (path, subject, gesture, day, rep) in records {
        text += &format!(
            "\n[[record]]\npath = \"{path}\"\nsubject = {subject}\ngesture = {gesture}\nday = {day}\nrepetition = {rep}\n"
        );
    }
    let manifest = dir.join("manifest.toml");
    fs::write(&manifest, text).unwrap();
    manifest
}

#[test]
fn binary_layout_is_decoded_scaled_and_remapped() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("s01")).unwrap();
    write_binary_be_channel_major(&tmp.path().join("s01/a.bin"), 16);
    let manifest = binary_manifest(tmp.path(), &[("s01/a.bin", 1, 4, 2, 3)]);
    let recs = load_manifest_file(&manifest).unwrap();
    assert_eq!(recs.len(), 1);
    let rec = &recs[0];
    assert_eq!(rec.samples(), FRAMES);
    assert_eq!(rec.provenance.subject, 1);
    assert_eq!(rec.provenance.gesture, 4);
    assert_eq!(rec.provenance.day, Day::Day2);
    assert_eq!(rec.provenance.repetition, 3);
    for ch in [0, 1, 100, 255] {
        let got = rec.channel(dest(ch));
        for t in [0, 1, 777, FRAMES - 1] {
            assert_eq!(got[t], 0.5 * f64::from(raw(ch, t)), "file channel {ch}, frame {t}");
        }
    }
}

#[test]
fn csv_layout_with_header() {
    let tmp = TempDir::new().unwrap();
    let mut text: String = (0..CHANNELS).map(|c| format!("ch{c}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for t in 0..FRAMES {
        let row: Vec<String> = (0..CHANNELS).map(|c| format!("{}", raw(c, t))).collect();
        text += &row.join(", ");
        text.push('\n');
    }
    fs::write(tmp.path().join("r.csv"), text).unwrap();
    fs::write(
        tmp.path().join("m.toml"),
        "[layout]\nformat = \"csv\"\ncsv_header = true\n\n[[record]]\npath = \"r.csv\"\nsubject = 3\ngesture = 0\nday = 1\nrepetition = 6\n",
    )
    .unwrap();
    let recs = load_manifest_file(&tmp.path().join("m.toml")).unwrap();
    assert_eq!(recs[0].samples(), FRAMES);
    assert_eq!(recs[0].channel(9)[5], f64::from(raw(9, 5)));
}

fn load_err(manifest_text: &str, files: &[(&str, Vec<u8>)]) -> Error {
    let tmp = TempDir::new().unwrap();
    for (name, bytes) in files {
        fs::write(tmp.path().join(name), bytes).unwrap();
    }
    let path = tmp.path().join("m.toml");
    fs::write(&path, manifest_text).unwrap();
    load_manifest_file(&path).unwrap_err()
}

fn f32_record(frames: usize) -> Vec<u8> {
    (0..frames * CHANNELS).flat_map(|i| (i as f32).to_le_bytes()).collect()
}

const ONE_RECORD: &str = "\n[[record]]\npath = \"r.bin\"\nsubject = 1\ngesture = 0\nday = 1\nrepetition = 1\n";

#[test]
fn malformed_inputs_are_data_errors() {
    let layout = "[layout]\nformat = \"binary\"\n";
    type Case<'a> = (String, Vec<(&'a str, Vec<u8>)>);
    let cases: Vec<Case> = vec![
        // missing payload
        (format!("{layout}{ONE_RECORD}"), vec![]),
        // truncated payload
        (format!("{layout}{ONE_RECORD}"), vec![("r.bin", f32_record(FRAMES)[..1001].to_vec())]),
        // wrong channel count
        (format!("[layout]\nformat = \"binary\"\nchannels = 128\n{ONE_RECORD}"), vec![("r.bin", f32_record(FRAMES))]),
        // day out of range
        (format!("{layout}{}", ONE_RECORD.replace("day = 1", "day = 3")), vec![("r.bin", f32_record(FRAMES))]),
        // channel map that is not a permutation
        (
            format!("[layout]\nformat = \"binary\"\nchannel_map = [{}]\n{ONE_RECORD}", vec!["0"; CHANNELS].join(",")),
            vec![("r.bin", f32_record(FRAMES))],
        ),
        // unknown key
        (format!("[layout]\nformat = \"binary\"\ncolour = 1\n{ONE_RECORD}"), vec![]),
        // non-numeric csv cell
        (
            format!("[layout]\nformat = \"csv\"\n{}", ONE_RECORD.replace("r.bin", "r.csv")),
            vec![("r.csv", format!("{}x\n", "1,".repeat(CHANNELS - 1)).into_bytes())],
        ),
    ];
    for (i, (text, files)) in cases.iter().enumerate() {
        let err = load_err(text, files);
        assert_eq!(err.kind(), ErrorKind::Data, "case {i}: {err}");
    }
}

#[test]
fn manifest_dataset_runs_through_preprocessing() {
    let tmp = TempDir::new().unwrap();
    let mut records = Vec::new();
    let mut names = Vec::new();
    for subject in [2u32, 5] {
        for (day, rep) in [(1u8, 1u8), (2, 2)] {
            names.push(format!("s{subject}_d{day}_r{rep}.bin"));
        }
    }
    for name in &names {
        write_binary_be_channel_major(&tmp.path().join(name), 16);
    }
    let mut i = 0;
    for subject in [2u32, 5] {
        for (day, rep) in [(1u8, 1u8), (2, 2)] {
            records.push((names[i].as_str(), subject, 7u8, day, rep));
            i += 1;
        }
    }
    binary_manifest(tmp.path(), &records);
    let cfg_path = tmp.path().join("exp.toml");
    let mut cfg = ExperimentConfig::desk();
    cfg.dataset = DatasetSource::Manifest {
        path: "manifest.toml".into(),
    };
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let subjects = prepare_subjects(&cfg).unwrap();
    assert_eq!(subjects.iter().map(|(s, _)| *s).collect::<Vec<_>>(), [2, 5]);
    // (2048 − 512 − 100) / 100 + 1 windows per record, two records each.
    for (_, set) in &subjects {
        assert_eq!(set.len(), 2 * 15);
        assert!(set.labels().iter().all(|&g| g == 7));
    }
}
