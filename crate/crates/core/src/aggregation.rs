//! Segment → record → patient decisions and confidence roll-up.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::ClassLabel;
use crate::error::{csv_at, invalid, Error, Result};

/// Tie-break order among equally frequent labels.
const PRIORITY: [ClassLabel; 3] = [ClassLabel::Present, ClassLabel::Unknown, ClassLabel::Absent];

fn counts(labels: &[ClassLabel]) -> [usize; 3] {
    let mut c = [0; 3];
    labels.iter().for_each(|l| c[l.index()] += 1);
    c
}

/// Majority label; ties go to present, then unknown, then absent.
pub fn record_label(segment_labels: &[ClassLabel]) -> Result<ClassLabel> {
    if segment_labels.is_empty() {
        return Err(invalid("record has no segments"));
    }
    let c = counts(segment_labels);
    let top = *c.iter().max().expect("three counts");
    Ok(PRIORITY
        .into_iter()
        .find(|l| c[l.index()] == top)
        .expect("some label reaches the maximum"))
}

/// Present if any record is present, else unknown if any is unknown, else absent.
pub fn patient_label(record_labels: &[ClassLabel]) -> Result<ClassLabel> {
    if record_labels.is_empty() {
        return Err(invalid("patient has no records"));
    }
    Ok(PRIORITY
        .into_iter()
        .find(|l| record_labels.contains(l))
        .expect("nonempty input holds some label"))
}

/// Mean confidence of the items labelled `label`; `None` when none are.
pub fn roll_up_confidence(items: &[(ClassLabel, f64)], label: ClassLabel) -> Option<f64> {
    let matching: Vec<f64> = items
        .iter()
        .filter(|(l, _)| *l == label)
        .map(|(_, c)| *c)
        .collect();
    (!matching.is_empty()).then(|| matching.iter().sum::<f64>() / matching.len() as f64)
}

/// A segment's prediction as it enters aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub label: ClassLabel,
    /// Probability of `label`.
    pub confidence: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDecision {
    pub label: ClassLabel,
    pub confidence: f64,
    pub contributing_segments: Vec<usize>,
    /// Mean entropy of the contributing segments.
    pub entropy_mean: f64,
    /// The label won a tie rather than a strict majority.
    pub tie_break: bool,
}

pub fn decide_record(segments: &[SegmentOutcome]) -> Result<RecordDecision> {
    let labels: Vec<ClassLabel> = segments.iter().map(|s| s.label).collect();
    let label = record_label(&labels)?;
    let c = counts(&labels);
    let tie_break = c.iter().filter(|&&n| n == c[label.index()]).count() > 1;
    let contributing: Vec<usize> = (0..segments.len())
        .filter(|&i| segments[i].label == label)
        .collect();
    assert!(
        !contributing.is_empty(),
        "majority label always has a segment"
    );
    let items: Vec<(ClassLabel, f64)> = segments.iter().map(|s| (s.label, s.confidence)).collect();
    let n = contributing.len() as f64;
    Ok(RecordDecision {
        label,
        confidence: roll_up_confidence(&items, label).expect("contributing set is nonempty"),
        entropy_mean: contributing
            .iter()
            .map(|&i| segments[i].entropy)
            .sum::<f64>()
            / n,
        contributing_segments: contributing,
        tie_break,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub label: ClassLabel,
    pub confidence: f64,
    pub contributing_records: Vec<usize>,
    /// Mean segment entropy over the contributing records' contributing segments.
    pub entropy_mean: f64,
    /// Some contributing record's label came from a tie-break.
    pub low_support: bool,
}

pub fn decide_patient(patient_id: &str, records: &[RecordDecision]) -> Result<PatientDecision> {
    let labels: Vec<ClassLabel> = records.iter().map(|r| r.label).collect();
    let label = patient_label(&labels)?;
    let contributing: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].label == label)
        .collect();
    let items: Vec<(ClassLabel, f64)> = records.iter().map(|r| (r.label, r.confidence)).collect();
    let (mut h_sum, mut h_n) = (0.0, 0usize);
    for &i in &contributing {
        let r = &records[i];
        h_sum += r.entropy_mean * r.contributing_segments.len() as f64;
        h_n += r.contributing_segments.len();
    }
    Ok(PatientDecision {
        patient_id: patient_id.to_string(),
        label,
        confidence: roll_up_confidence(&items, label).expect("patient label comes from a record"),
        entropy_mean: if h_n > 0 { h_sum / h_n as f64 } else { 0.0 },
        low_support: contributing.iter().any(|&i| records[i].tie_break),
        contributing_records: contributing,
    })
}

#[derive(Serialize, Deserialize)]
struct PatientRow {
    patient_id: String,
    label: ClassLabel,
    confidence: f64,
    entropy_mean: f64,
}

/// Writes `patient_id,label,confidence,entropy_mean`.
pub fn write_patient_csv(path: &Path, decisions: &[PatientDecision]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_at(path))?;
    for d in decisions {
        w.serialize(PatientRow {
            patient_id: d.patient_id.clone(),
            label: d.label,
            confidence: d.confidence,
            entropy_mean: d.entropy_mean,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back `(patient_id, label, confidence, entropy_mean)` rows.
pub fn read_patient_csv(path: &Path) -> Result<Vec<(String, ClassLabel, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_at(path))?;
    r.deserialize::<PatientRow>()
        .map(|row| {
            let row = row?;
            Ok((row.patient_id, row.label, row.confidence, row.entropy_mean))
        })
        .collect()
}
