//! Label vocabulary shared by the labeler, the evaluator and the prompting
//! layer: the thirteen pathologies, the four-valued uncertainty class, and
//! the label CSV convention.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the thirteen chest X-ray findings. Declaration order is the
/// alphabetical order used for label-file columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pathology {
    Atelectasis,
    Cardiomegaly,
    Consolidation,
    Edema,
    #[serde(rename = "Enlarged Cardiomediastinum")]
    EnlargedCardiomediastinum,
    Fracture,
    #[serde(rename = "Lung Lesion")]
    LungLesion,
    #[serde(rename = "Lung Opacity")]
    LungOpacity,
    #[serde(rename = "Pleural Effusion")]
    PleuralEffusion,
    #[serde(rename = "Pleural Other")]
    PleuralOther,
    Pneumonia,
    Pneumothorax,
    #[serde(rename = "Support Devices")]
    SupportDevices,
}

impl Pathology {
    pub const COUNT: usize = 13;

    /// Column order of label files.
    pub const ALL: [Pathology; 13] = [
        Pathology::Atelectasis,
        Pathology::Cardiomegaly,
        Pathology::Consolidation,
        Pathology::Edema,
        Pathology::EnlargedCardiomediastinum,
        Pathology::Fracture,
        Pathology::LungLesion,
        Pathology::LungOpacity,
        Pathology::PleuralEffusion,
        Pathology::PleuralOther,
        Pathology::Pneumonia,
        Pathology::Pneumothorax,
        Pathology::SupportDevices,
    ];

    /// Order in which findings are listed in the prompt template.
    pub const TEMPLATE_ORDER: [Pathology; 13] = [
        Pathology::EnlargedCardiomediastinum,
        Pathology::Cardiomegaly,
        Pathology::LungOpacity,
        Pathology::LungLesion,
        Pathology::Edema,
        Pathology::Consolidation,
        Pathology::Pneumonia,
        Pathology::Atelectasis,
        Pathology::Pneumothorax,
        Pathology::PleuralEffusion,
        Pathology::PleuralOther,
        Pathology::Fracture,
        Pathology::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathology::Atelectasis => "Atelectasis",
            Pathology::Cardiomegaly => "Cardiomegaly",
            Pathology::Consolidation => "Consolidation",
            Pathology::Edema => "Edema",
            Pathology::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Pathology::Fracture => "Fracture",
            Pathology::LungLesion => "Lung Lesion",
            Pathology::LungOpacity => "Lung Opacity",
            Pathology::PleuralEffusion => "Pleural Effusion",
            Pathology::PleuralOther => "Pleural Other",
            Pathology::Pneumonia => "Pneumonia",
            Pathology::Pneumothorax => "Pneumothorax",
            Pathology::SupportDevices => "Support Devices",
        }
    }

    /// Identifier form used in rule files, e.g. `pleural_effusion`.
    pub fn slug(self) -> String {
        self.name().to_ascii_lowercase().replace(' ', "_")
    }

    /// Accepts the display name or the slug, ignoring case.
    pub fn parse(text: &str) -> Option<Pathology> {
        let wanted = text.trim().to_ascii_lowercase().replace('_', " ");
        Pathology::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == wanted)
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Four-valued label. The derived order is the aggregation priority:
/// `Null < Negative < Uncertain < Positive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum UncertaintyClass {
    #[default]
    Null,
    Negative,
    Uncertain,
    Positive,
}

impl UncertaintyClass {
    /// Row/column order of confusion matrices.
    pub const ALL: [UncertaintyClass; 4] = [
        UncertaintyClass::Null,
        UncertaintyClass::Negative,
        UncertaintyClass::Uncertain,
        UncertaintyClass::Positive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Negation: swaps Positive and Negative; Uncertain and Null are fixed points.
    pub fn flip(self) -> Self {
        match self {
            UncertaintyClass::Positive => UncertaintyClass::Negative,
            UncertaintyClass::Negative => UncertaintyClass::Positive,
            other => other,
        }
    }

    /// Label-file cell: blank, `1.0`, `0.0` or `-1.0`.
    pub fn csv_cell(self) -> &'static str {
        match self {
            UncertaintyClass::Null => "",
            UncertaintyClass::Positive => "1.0",
            UncertaintyClass::Negative => "0.0",
            UncertaintyClass::Uncertain => "-1.0",
        }
    }

    pub fn from_csv_cell(cell: &str) -> Option<Self> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Some(UncertaintyClass::Null);
        }
        let value: f64 = cell.parse().ok()?;
        if value == 1.0 {
            Some(UncertaintyClass::Positive)
        } else if value == 0.0 {
            Some(UncertaintyClass::Negative)
        } else if value == -1.0 {
            Some(UncertaintyClass::Uncertain)
        } else {
            None
        }
    }

    /// The word used in prompts and answers.
    pub fn answer_word(self) -> &'static str {
        match self {
            UncertaintyClass::Null => "Undefined",
            UncertaintyClass::Negative => "No",
            UncertaintyClass::Uncertain => "Maybe",
            UncertaintyClass::Positive => "Yes",
        }
    }

    pub fn from_answer_word(word: &str) -> Option<Self> {
        match word.trim().to_ascii_lowercase().as_str() {
            "yes" => Some(UncertaintyClass::Positive),
            "no" => Some(UncertaintyClass::Negative),
            "maybe" => Some(UncertaintyClass::Uncertain),
            "undefined" => Some(UncertaintyClass::Null),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyClass::Null => "NULL",
            UncertaintyClass::Negative => "NEGATIVE",
            UncertaintyClass::Uncertain => "UNCERTAIN",
            UncertaintyClass::Positive => "POSITIVE",
        }
    }
}

impl fmt::Display for UncertaintyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UncertaintyClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UncertaintyClass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown class `{s}`"))
    }
}

/// A value for every pathology, indexed by [`Pathology`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathologyMap<T>([T; 13]);

impl<T: Default> Default for PathologyMap<T> {
    fn default() -> Self {
        PathologyMap(std::array::from_fn(|_| T::default()))
    }
}

impl<T> PathologyMap<T> {
    pub fn from_fn(mut f: impl FnMut(Pathology) -> T) -> Self {
        PathologyMap(std::array::from_fn(|i| f(Pathology::ALL[i])))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Pathology, &T)> {
        Pathology::ALL.into_iter().zip(self.0.iter())
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.0.iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(Pathology, &T) -> U) -> PathologyMap<U> {
        PathologyMap::from_fn(|p| f(p, &self[p]))
    }
}

impl<T> Index<Pathology> for PathologyMap<T> {
    type Output = T;

    fn index(&self, p: Pathology) -> &T {
        &self.0[p.index()]
    }
}

impl<T> IndexMut<Pathology> for PathologyMap<T> {
    fn index_mut(&mut self, p: Pathology) -> &mut T {
        &mut self.0[p.index()]
    }
}

impl<T: Serialize> Serialize for PathologyMap<T> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(Pathology::COUNT))?;
        for (p, v) in self.iter() {
            map.serialize_entry(p.name(), v)?;
        }
        map.end()
    }
}

/// One row of a label file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub report_id: String,
    pub labels: PathologyMap<UncertaintyClass>,
}

#[derive(Debug, Error)]
pub enum LabelFileError {
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: expected `{expected}`, found `{found}`")]
    BadHeader { expected: String, found: String },
    #[error("line {line}: invalid cell `{cell}` for {pathology}")]
    BadCell {
        line: u64,
        pathology: Pathology,
        cell: String,
    },
}

pub fn label_file_header() -> Vec<&'static str> {
    std::iter::once("report_id")
        .chain(Pathology::ALL.iter().map(|p| p.name()))
        .collect()
}

pub fn write_label_csv<W: Write>(out: W, rows: &[LabelRow]) -> Result<(), LabelFileError> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    writer.write_record(label_file_header())?;
    for row in rows {
        let mut record = Vec::with_capacity(Pathology::COUNT + 1);
        record.push(row.report_id.as_str());
        record.extend(row.labels.values().map(|c| c.csv_cell()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_label_csv<R: Read>(input: R) -> Result<Vec<LabelRow>, LabelFileError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected = label_file_header();
    if header != expected {
        return Err(LabelFileError::BadHeader {
            expected: expected.join(","),
            found: header.join(","),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut labels = PathologyMap::default();
        for (i, p) in Pathology::ALL.into_iter().enumerate() {
            let cell = record.get(i + 1).unwrap_or("");
            labels[p] = UncertaintyClass::from_csv_cell(cell).ok_or_else(|| LabelFileError::BadCell {
                line,
                pathology: p,
                cell: cell.to_string(),
            })?;
        }
        rows.push(LabelRow {
            report_id: record.get(0).unwrap_or("").to_string(),
            labels,
        });
    }
    Ok(rows)
}
