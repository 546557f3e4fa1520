use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Day, Provenance, Recording, REPETITIONS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Calib,
    Test,
}

/// Which repetitions of which day feed each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub train_reps: BTreeSet<u8>,
    pub val_reps: BTreeSet<u8>,
    pub calib_reps: BTreeSet<u8>,
    pub test_reps: BTreeSet<u8>,
    pub train_day: Day,
    pub test_day: Day,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            train_reps: [1, 3, 4, 6].into(),
            val_reps: [2, 5].into(),
            calib_reps: [1, 3, 4, 6].into(),
            test_reps: [2, 5].into(),
            train_day: Day::Day1,
            test_day: Day::Day2,
        }
    }
}

impl SplitPlan {
    fn parts(&self) -> [(Partition, Day, &BTreeSet<u8>); 4] {
        [
            (Partition::Train, self.train_day, &self.train_reps),
            (Partition::Val, self.train_day, &self.val_reps),
            (Partition::Calib, self.test_day, &self.calib_reps),
            (Partition::Test, self.test_day, &self.test_reps),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.parts();
        for (p, _, reps) in &parts {
            if let Some(r) = reps.iter().find(|&&r| r == 0 || r > REPETITIONS) {
                return Err(Error::Split(format!("{p:?} repetition {r} is outside 1..={REPETITIONS}")));
            }
        }
        for (i, (pa, da, ra)) in parts.iter().enumerate() {
            for (pb, db, rb) in &parts[i + 1..] {
                if da != db {
                    continue;
                }
                if let Some(r) = ra.intersection(rb).next() {
                    return Err(Error::Split(format!(
                        "repetition {r} of {da} is in both {pa:?} and {pb:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Partition a window or recording belongs to, if any.
    pub fn partition_of(&self, p: &Provenance) -> Option<Partition> {
        self.parts()
            .into_iter()
            .find(|(_, day, reps)| *day == p.day && reps.contains(&p.repetition))
            .map(|(part, _, _)| part)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset<'a> {
    pub train: Vec<&'a Recording>,
    pub val: Vec<&'a Recording>,
    pub calib: Vec<&'a Recording>,
    pub test: Vec<&'a Recording>,
}

/// Partitions `recordings` by `plan`. Every (subject, gesture) pair present
/// must supply all repetitions the plan references.
pub fn make_splits<'a>(recordings: &'a [Recording], plan: &SplitPlan) -> Result<SplitDataset<'a>> {
    plan.validate()?;
    let mut have: BTreeMap<(u32, u8), BTreeSet<(Day, u8)>> = BTreeMap::new();
    for r in recordings {
        let p = r.provenance;
        have.entry((p.subject, p.gesture)).or_default().insert((p.day, p.repetition));
    }
    for ((subject, gesture), present) in &have {
        for (part, day, reps) in plan.parts() {
            if let Some(r) = reps.iter().find(|&&r| !present.contains(&(day, r))) {
                return Err(Error::Split(format!(
                    "subject {subject} gesture {gesture}: {part:?} needs {day} repetition {r}, which is missing"
                )));
            }
        }
    }
    let mut out = SplitDataset::default();
    for r in recordings {
        match plan.partition_of(&r.provenance) {
            Some(Partition::Train) => out.train.push(r),
            Some(Partition::Val) => out.val.push(r),
            Some(Partition::Calib) => out.calib.push(r),
            Some(Partition::Test) => out.test.push(r),
            None => {}
        }
    }
    Ok(out)
}

/// All `k`-element subsets of `calib_reps`, in lexicographic order. `k = 0`
/// yields the single empty fold.
pub fn calibration_folds(calib_reps: &BTreeSet<u8>, k: usize) -> Result<Vec<BTreeSet<u8>>> {
    let reps: Vec<u8> = calib_reps.iter().copied().collect();
    if k > reps.len() {
        return Err(Error::Split(format!(
            "cannot choose {k} calibration repetitions from {}",
            reps.len()
        )));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| reps[i]).collect());
        // advance to the next combination
        let Some(pos) = (0..k).rev().find(|&i| idx[i] < reps.len() - k + i) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CHANNELS;

    fn rec(subject: u32, gesture: u8, day: Day, repetition: u8) -> Recording {
        let p = Provenance {
            subject,
            gesture,
            day,
            repetition,
        };
        Recording::new(p, 2048.0, vec![0.0; CHANNELS * 4]).unwrap()
    }

    fn full_set() -> Vec<Recording> {
        let mut out = Vec::new();
        for day in [Day::Day1, Day::Day2] {
            for g in 0..2 {
                for r in 1..=6 {
                    out.push(rec(1, g, day, r));
                }
            }
        }
        out
    }

    #[test]
    fn default_plan_partitions() {
        let recs = full_set();
        let s = make_splits(&recs, &SplitPlan::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.calib.len(), s.test.len()), (8, 4, 8, 4));
        assert!(s.test.iter().all(|r| r.provenance.day == Day::Day2
            && [2, 5].contains(&r.provenance.repetition)));
        assert!(s.train.iter().all(|r| r.provenance.day == Day::Day1));
    }

    #[test]
    fn missing_repetition_is_named() {
        let mut recs = full_set();
        recs.retain(|r| !(r.provenance.day == Day::Day2 && r.provenance.repetition == 5 && r.provenance.gesture == 1));
        let err = make_splits(&recs, &SplitPlan::default()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Split(_)));
        assert!(msg.contains("gesture 1") && msg.contains("repetition 5"), "{msg}");
    }

    #[test]
    fn overlapping_reps_rejected() {
        let plan = SplitPlan {
            test_reps: [2, 3].into(),
            ..SplitPlan::default()
        };
        assert!(matches!(plan.validate(), Err(Error::Split(_))));
        let same_day = SplitPlan {
            test_day: Day::Day1,
            ..SplitPlan::default()
        };
        assert!(same_day.validate().is_err());
        let intraday = SplitPlan {
            train_reps: [1, 3].into(),
            val_reps: [4].into(),
            calib_reps: [6].into(),
            test_reps: [2, 5].into(),
            train_day: Day::Day2,
            test_day: Day::Day2,
        };
        intraday.validate().unwrap();
    }

    #[test]
    fn fold_enumeration() {
        let calib: BTreeSet<u8> = [1, 3, 4, 6].into();
        let one = calibration_folds(&calib, 1).unwrap();
        let expect: Vec<BTreeSet<u8>> = vec![[1].into(), [3].into(), [4].into(), [6].into()];
        assert_eq!(one, expect);
        let two = calibration_folds(&calib, 2).unwrap();
        assert_eq!(two.len(), 6);
        assert!(two.contains(&[1, 3].into()));
        assert_eq!(two.iter().collect::<BTreeSet<_>>().len(), 6);
        assert_eq!(calibration_folds(&calib, 0).unwrap(), vec![BTreeSet::new()]);
        assert_eq!(calibration_folds(&calib, 4).unwrap().len(), 1);
        assert!(calibration_folds(&calib, 5).is_err());
    }
}
