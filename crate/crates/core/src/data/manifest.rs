use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagnostic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    AD,
    MCI,
    NC,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::AD, Label::MCI, Label::NC];

    pub fn name(self) -> &'static str {
        match self {
            Label::AD => "AD",
            Label::MCI => "MCI",
            Label::NC => "NC",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidLabel(s.to_string()))
    }
}

/// Classification task: which labels take part, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "AD_NC")]
    AdNc,
    #[serde(rename = "AD_MCI")]
    AdMci,
    #[serde(rename = "MCI_NC")]
    MciNc,
    #[serde(rename = "AD_MCI_NC")]
    AdMciNc,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::AdNc, Task::AdMci, Task::MciNc, Task::AdMciNc];

    pub fn classes(self) -> &'static [Label] {
        match self {
            Task::AdNc => &[Label::AD, Label::NC],
            Task::AdMci => &[Label::AD, Label::MCI],
            Task::MciNc => &[Label::MCI, Label::NC],
            Task::AdMciNc => &[Label::AD, Label::MCI, Label::NC],
        }
    }

    pub fn class_index(self, label: Label) -> Option<usize> {
        self.classes().iter().position(|&l| l == label)
    }

    /// Positive class for sensitivity/specificity: the more progressed
    /// diagnosis. `None` for the ternary task.
    pub fn positive_class(self) -> Option<usize> {
        match self {
            Task::AdNc | Task::AdMci | Task::MciNc => Some(0),
            Task::AdMciNc => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::AdNc => "AD_NC",
            Task::AdMci => "AD_MCI",
            Task::MciNc => "MCI_NC",
            Task::AdMciNc => "AD_MCI_NC",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown task {s:?}")))
    }
}

/// One ROI volume column of the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Roi {
    #[serde(rename = "smri_l")]
    SmriL,
    #[serde(rename = "smri_r")]
    SmriR,
    #[serde(rename = "dti_l")]
    DtiL,
    #[serde(rename = "dti_r")]
    DtiR,
}

impl Roi {
    pub const ALL: [Roi; 4] = [Roi::SmriL, Roi::SmriR, Roi::DtiL, Roi::DtiR];

    pub fn column(self) -> &'static str {
        match self {
            Roi::SmriL => "smri_l",
            Roi::SmriR => "smri_r",
            Roi::DtiL => "dti_l",
            Roi::DtiR => "dti_r",
        }
    }
}

impl FromStr for Roi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Roi::ALL
            .into_iter()
            .find(|r| r.column() == s)
            .ok_or_else(|| Error::config(format!("unknown ROI input {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    /// Resolved file per available ROI.
    pub volumes: BTreeMap<Roi, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub subjects: Vec<SubjectRecord>,
}

impl Manifest {
    /// Validate uniqueness of subject ids.
    pub fn new(subjects: Vec<SubjectRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::DuplicateSubject(s.subject_id.clone()));
            }
        }
        Ok(Manifest { subjects })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Subject ids per label, in manifest order.
    pub fn ids_by_label(&self) -> BTreeMap<Label, Vec<String>> {
        let mut out: BTreeMap<Label, Vec<String>> = BTreeMap::new();
        for s in &self.subjects {
            out.entry(s.label).or_default().push(s.subject_id.clone());
        }
        out
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        self.ids_by_label().into_iter().map(|(l, v)| (l, v.len())).collect()
    }
}

const HEADER: [&str; 6] = ["subject_id", "label", "smri_l", "smri_r", "dti_l", "dti_r"];

/// Read a manifest CSV; relative volume paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse(format!(
            "{}: header must be {}",
            path.display(),
            HEADER.join(",")
        )));
    }
    let mut subjects = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 2)))?;
        let id = &row[0];
        if id.is_empty() {
            return Err(Error::Parse(format!("{} row {}: empty subject_id", path.display(), i + 2)));
        }
        let label: Label = row[1].parse()?;
        let volumes = Roi::ALL
            .iter()
            .zip(row.iter().skip(2))
            .filter(|(_, cell)| !cell.is_empty())
            .map(|(&roi, cell)| (roi, base.join(cell)))
            .collect();
        subjects.push(SubjectRecord {
            subject_id: id.to_string(),
            label,
            volumes,
        });
    }
    Manifest::new(subjects)
}

/// Write a manifest CSV with paths relative to `dir` where possible.
pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(HEADER).map_err(io)?;
    for s in &manifest.subjects {
        let mut row = vec![s.subject_id.clone(), s.label.to_string()];
        for roi in Roi::ALL {
            row.push(match s.volumes.get(&roi) {
                Some(p) => p.strip_prefix(&base).unwrap_or(p).to_string_lossy().into_owned(),
                None => String::new(),
            });
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
