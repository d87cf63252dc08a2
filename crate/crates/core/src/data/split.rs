use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest};
use crate::error::{Error, Result};
use crate::seed::{rng_for, Role};

pub const TEST_PER_CLASS: usize = 15;

/// Disjoint per-class subject id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: BTreeMap<Label, Vec<String>>,
    pub validation: BTreeMap<Label, Vec<String>>,
    pub test: BTreeMap<Label, Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "val" | "validation" => Ok(Subset::Validation),
            "test" => Ok(Subset::Test),
            _ => Err(Error::config(format!("unknown subset {s:?} (train, val, test)"))),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        })
    }
}

fn validation_count(remaining: usize) -> usize {
    remaining / 10
}

/// Shuffle `pool` and cut off the validation share; both halves come back sorted.
fn partition(mut pool: Vec<String>, rng: &mut impl rand::Rng) -> (Vec<String>, Vec<String>) {
    pool.sort();
    pool.shuffle(rng);
    let mut train = pool.split_off(validation_count(pool.len()));
    let mut val = pool;
    train.sort();
    val.sort();
    (train, val)
}

/// Per class: 15 test subjects, then a tenth (rounded down) of the rest for
/// validation, the remainder for training.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Result<DatasetSplit> {
    let mut split = DatasetSplit {
        train: BTreeMap::new(),
        validation: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for (label, mut ids) in manifest.ids_by_label() {
        if ids.len() <= TEST_PER_CLASS {
            return Err(Error::InsufficientSubjects(format!(
                "class {label} has {} subjects, at least {} needed",
                ids.len(),
                TEST_PER_CLASS + 1
            )));
        }
        let mut rng = rng_for(seed, Role::Split, label as u64);
        ids.sort();
        ids.shuffle(&mut rng);
        let rest = ids.split_off(TEST_PER_CLASS);
        ids.sort();
        let (train, val) = partition(rest, &mut rng);
        split.test.insert(label, ids);
        split.train.insert(label, train);
        split.validation.insert(label, val);
    }
    Ok(split)
}

/// Re-partition train and validation per class; the test set is untouched.
pub fn reshuffle_train_val(split: &DatasetSplit, seed: u64) -> DatasetSplit {
    let mut out = split.clone();
    for (&label, train) in &split.train {
        let mut pool = train.clone();
        pool.extend(split.validation.get(&label).into_iter().flatten().cloned());
        let mut rng = rng_for(seed, Role::Reshuffle, label as u64);
        let (t, v) = partition(pool, &mut rng);
        out.train.insert(label, t);
        out.validation.insert(label, v);
    }
    out
}

impl DatasetSplit {
    pub fn subset(&self, which: Subset) -> &BTreeMap<Label, Vec<String>> {
        match which {
            Subset::Train => &self.train,
            Subset::Validation => &self.validation,
            Subset::Test => &self.test,
        }
    }

    /// (train, validation, test) sizes of one class.
    pub fn sizes(&self, label: Label) -> (usize, usize, usize) {
        let n = |m: &BTreeMap<Label, Vec<String>>| m.get(&label).map_or(0, Vec::len);
        (n(&self.train), n(&self.validation), n(&self.test))
    }

    /// Check that every id appears exactly once and belongs to the manifest
    /// under the same label.
    pub fn validate(&self, manifest: &Manifest) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for part in [&self.train, &self.validation, &self.test] {
            for (label, ids) in part {
                for id in ids {
                    let rec = manifest
                        .get(id)
                        .ok_or_else(|| Error::config(format!("split names unknown subject {id:?}")))?;
                    if rec.label != *label {
                        return Err(Error::config(format!("split lists {id:?} under {label}")));
                    }
                    if !seen.insert(id.as_str()) {
                        return Err(Error::DuplicateSubject(id.clone()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
