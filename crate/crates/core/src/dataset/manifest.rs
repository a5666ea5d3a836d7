use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic};

pub const MANIFEST_HEADER: [&str; 5] = ["image_path", "patient_id", "labels", "mask_path", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub patient_id: String,
    pub labels: BTreeSet<String>,
    pub mask_path: Option<String>,
    pub split: Option<Split>,
}

impl SampleRecord {
    /// Image file name without directory or extension; used as the sample id.
    pub fn sample_id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let bytes = read_bytes(path)?;
    read_manifest(bytes.as_slice(), &path.display().to_string())
}

/// Parses manifest CSV. `source_name` is used in error messages.
pub fn read_manifest(reader: impl Read, source_name: &str) -> Result<Vec<SampleRecord>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut required = [0usize; 3];
    for (slot, name) in required.iter_mut().zip(&MANIFEST_HEADER[..3]) {
        *slot = column(name).ok_or_else(|| parse_err(1, format!("missing required column '{name}'")))?;
    }
    let [image_col, patient_col, labels_col] = required;
    let mask_col = column("mask_path");
    let split_col = column("split");

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let cell = |i: usize| row.get(i).unwrap_or("").trim();
        let image_path = cell(image_col).to_string();
        let patient_id = cell(patient_col).to_string();
        if image_path.is_empty() {
            return Err(parse_err(line, "empty image_path".into()));
        }
        if patient_id.is_empty() {
            return Err(parse_err(line, "empty patient_id".into()));
        }
        if let Some(first) = seen.insert(image_path.clone(), line) {
            return Err(parse_err(
                line,
                format!("duplicate image_path '{image_path}' (first seen on line {first}, again on line {line})"),
            ));
        }
        let labels = cell(labels_col)
            .split('|')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let mask_path = mask_col.map(cell).filter(|m| !m.is_empty()).map(str::to_string);
        let split = match split_col.map(cell).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse().map_err(|e: Error| parse_err(line, e.to_string()))?),
            None => None,
        };
        records.push(SampleRecord {
            image_path,
            patient_id,
            labels,
            mask_path,
            split,
        });
    }
    Ok(records)
}

pub fn manifest_bytes(records: &[SampleRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let labels = r.labels.iter().map(String::as_str).collect::<Vec<_>>().join("|");
        w.write_record([
            r.image_path.as_str(),
            r.patient_id.as_str(),
            labels.as_str(),
            r.mask_path.as_deref().unwrap_or(""),
            r.split.map(Split::as_str).unwrap_or(""),
        ])?;
    }
    w.into_inner().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    write_atomic(path, &manifest_bytes(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_rows() {
        let text = "image_path,patient_id,labels,mask_path,split\n\
                    a.pgm,p1,pneumonia|nodule,m/a.pgm,train\n\
                    b.pgm,p2,,,\n";
        let recs = read_manifest(text.as_bytes(), "t").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].labels.len(), 2);
        assert_eq!(recs[0].split, Some(Split::Train));
        assert_eq!(recs[0].mask_path.as_deref(), Some("m/a.pgm"));
        assert!(recs[1].labels.is_empty());
        assert_eq!(recs[1].mask_path, None);
    }

    #[test]
    fn optional_columns_may_be_absent() {
        let recs = read_manifest("image_path,patient_id,labels\nx.pgm,p,a\n".as_bytes(), "t").unwrap();
        assert_eq!(recs[0].split, None);
    }

    #[test]
    fn missing_column_rejected() {
        let err = read_manifest("image_path,labels\nx,y\n".as_bytes(), "t").unwrap_err();
        assert!(err.to_string().contains("patient_id"), "{err}");
    }

    #[test]
    fn duplicate_path_names_both_lines() {
        let text = "image_path,patient_id,labels\na.pgm,p1,\nb.pgm,p2,\na.pgm,p3,\n";
        let err = read_manifest(text.as_bytes(), "t").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("line 4"), "{err}");
    }

    #[test]
    fn written_manifest_reads_back() {
        let recs = read_manifest(
            "image_path,patient_id,labels,mask_path,split\na.pgm,p1,x|y,,test\n".as_bytes(),
            "t",
        )
        .unwrap();
        let bytes = manifest_bytes(&recs).unwrap();
        assert_eq!(read_manifest(bytes.as_slice(), "t").unwrap(), recs);
    }
}
