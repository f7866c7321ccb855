use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ClassLabel, Location, Split};
use crate::error::{csv_at, Error, Result};
use crate::SAMPLE_RATE;

pub const MANIFEST_HEADER: [&str; 5] = ["patient_id", "location", "split", "label", "path"];

/// One recording row of the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecordingMeta {
    pub patient_id: String,
    pub location: Location,
    pub split: Split,
    /// Patient-level label, replicated onto every recording.
    pub label: ClassLabel,
    /// Path as written in the manifest, relative to the manifest directory.
    pub path: String,
    pub sample_rate: u32,
}

/// Per-split patient and recording counts, indexed by label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub patients: BTreeMap<Split, [usize; 3]>,
    pub recordings: BTreeMap<Split, [usize; 3]>,
}

impl SplitCounts {
    pub fn patients_in(&self, split: Split) -> usize {
        self.patients.get(&split).map_or(0, |c| c.iter().sum())
    }

    pub fn recordings_in(&self, split: Split) -> usize {
        self.recordings.get(&split).map_or(0, |c| c.iter().sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<RecordingMeta>,
}

impl DatasetManifest {
    /// Validates and wraps entries whose paths are relative to `root`.
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<RecordingMeta>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::ManifestContent("no entries".into()));
        }
        let mut seen = HashSet::new();
        let mut patient: BTreeMap<&str, (Split, ClassLabel)> = BTreeMap::new();
        for e in &entries {
            if !seen.insert((e.patient_id.as_str(), e.path.as_str())) {
                return Err(Error::ManifestContent(format!(
                    "duplicate recording {} for patient {}",
                    e.path, e.patient_id
                )));
            }
            let first = *patient.entry(&e.patient_id).or_insert((e.split, e.label));
            if first.0 != e.split {
                return Err(Error::ManifestContent(format!(
                    "patient {} appears in splits {} and {}",
                    e.patient_id, first.0, e.split
                )));
            }
            if first.1 != e.label {
                return Err(Error::ManifestContent(format!(
                    "patient {} has labels {} and {}",
                    e.patient_id, first.1, e.label
                )));
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[RecordingMeta] {
        &self.entries
    }

    pub fn resolve(&self, meta: &RecordingMeta) -> PathBuf {
        self.root.join(&meta.path)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &RecordingMeta> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Patients in id order with their split and label.
    pub fn patients(&self) -> Vec<(&str, Split, ClassLabel)> {
        let mut map: BTreeMap<&str, (Split, ClassLabel)> = BTreeMap::new();
        for e in &self.entries {
            map.entry(&e.patient_id).or_insert((e.split, e.label));
        }
        map.into_iter().map(|(p, (s, l))| (p, s, l)).collect()
    }

    pub fn counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for (_, split, label) in self.patients() {
            counts.patients.entry(split).or_default()[label.index()] += 1;
        }
        for e in &self.entries {
            counts.recordings.entry(e.split).or_default()[e.label.index()] += 1;
        }
        counts
    }

    /// Writes the canonical comma-separated form.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_at(path))?;
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.patient_id.as_str(),
                e.location.as_str(),
                e.split.as_str(),
                e.label.as_str(),
                e.path.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reads a `patient_id,location,split,label,path` manifest. Audio paths
/// are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_at(path))?;
    let mut entries = Vec::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Manifest {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if !header_seen {
            header_seen = true;
            let fields: Vec<&str> = record.iter().collect();
            if fields != MANIFEST_HEADER {
                return Err(Error::Manifest {
                    line,
                    msg: format!(
                        "expected header {:?}, got {fields:?}",
                        MANIFEST_HEADER.join(",")
                    ),
                });
            }
            continue;
        }
        if record.len() != 5 {
            return Err(Error::Manifest {
                line,
                msg: format!("expected 5 fields, got {}", record.len()),
            });
        }
        let bad = |msg: String| Error::Manifest { line, msg };
        let patient_id = record[0].to_string();
        if patient_id.is_empty() {
            return Err(bad("empty patient_id".into()));
        }
        if record[4].is_empty() {
            return Err(bad("empty path".into()));
        }
        entries.push(RecordingMeta {
            patient_id,
            location: record[1].parse().map_err(bad)?,
            split: record[2].parse().map_err(bad)?,
            label: record[3].parse().map_err(bad)?,
            path: record[4].to_string(),
            sample_rate: SAMPLE_RATE,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::from_entries(root, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(contents.as_bytes())
            .unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_manifest() {
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train,Absent,a.wav\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.entries().len(), 1);
        assert_eq!(m.entries()[0].label, ClassLabel::Absent);
        assert_eq!(m.entries()[0].location, Location::AV);
        assert_eq!(
            m.resolve(&m.entries()[0]),
            p.parent().unwrap().join("a.wav")
        );
    }

    #[test]
    fn empty_file_has_no_entries() {
        let (_d, p) = write_tmp("");
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("no entries"), "{err}");
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n");
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("no entries"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train,absent,a.wav\n1,XX,train,absent,b.wav\n");
        match load_manifest(&p).unwrap_err() {
            Error::Manifest { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("location"));
            }
            e => panic!("{e}"),
        }
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train,maybe,a.wav\n");
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            Error::Manifest { line: 2, .. }
        ));
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train\n");
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            Error::Manifest { line: 2, .. }
        ));
        let (_d, p) = write_tmp("id,loc\n");
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            Error::Manifest { line: 1, .. }
        ));
    }

    #[test]
    fn duplicate_and_inconsistent_patients_rejected() {
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train,absent,a.wav\n1,PV,train,absent,a.wav\n");
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
        let (_d, p) = write_tmp("patient_id,location,split,label,path\n1,AV,train,absent,a.wav\n1,PV,test,absent,b.wav\n");
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("splits"));
    }

    #[test]
    fn counts_match_dataset_table_shape() {
        // train split of the reference corpus: 942 patients, 3163 recordings
        let mut entries = Vec::new();
        let mut rec = 0;
        for (label, patients, recordings) in [
            (ClassLabel::Absent, 695, 2391),
            (ClassLabel::Present, 179, 616),
            (ClassLabel::Unknown, 68, 156),
        ] {
            for i in 0..patients {
                // spread recordings as evenly as possible over the class's patients
                let n = recordings / patients + usize::from(i < recordings % patients);
                for j in 0..n {
                    entries.push(RecordingMeta {
                        patient_id: format!("{label}{i}"),
                        location: Location::ALL[j % 5],
                        split: Split::Train,
                        label,
                        path: format!("{rec}.wav"),
                        sample_rate: SAMPLE_RATE,
                    });
                    rec += 1;
                }
            }
        }
        let m = DatasetManifest::from_entries("", entries).unwrap();
        let c = m.counts();
        assert_eq!(c.patients_in(Split::Train), 942);
        assert_eq!(c.recordings_in(Split::Train), 3163);
        assert_eq!(c.patients[&Split::Train], [695, 179, 68]);
        assert_eq!(c.recordings[&Split::Train], [2391, 616, 156]);
    }
}
