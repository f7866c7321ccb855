//! End-to-end stages shared by the command-line tool and the tests:
//! synthesise → featurise → train → predict → calibrate → evaluate → report.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use murmur_autodiff::StreamKey;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    decide_patient, decide_record, write_patient_csv, PatientDecision, RecordDecision,
    SegmentOutcome,
};
use crate::calibration::{
    fit_temperature_mc, minimise_over_temperature, reliability_data, write_bins_csv,
    CalibrationReport, Level, TemperatureFit, ECE_BINS,
};
use crate::config::RunConfig;
use crate::dataio::{
    load_audio, synth_dataset, ClassLabel, DatasetManifest, Location, RecordingMeta, Split,
};
use crate::error::{csv_at, invalid, Error, Result};
use crate::features::{
    featurize, read_feature_cache, write_feature_cache, MelExtractor, SegmentFeatures,
};
use crate::metrics::{ConfusionMatrix3, MetricsReport};
use crate::model::{ModelConfig, ModelState};
use crate::training::{train, write_json, Labeled, TrainOutcome, TrainOutputs};
use crate::uncertainty::{entropy, mc_predict_batch, McOptions, McResult, ProbVector};
use crate::N_CLASSES;

/// Reads a JSON artifact written by an earlier stage.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the synthetic fixture and its run config under `out`.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = synth_dataset(&cfg.synth, out)?;
    cfg.write_to_dir(out)?;
    Ok(manifest)
}

/// Segment features of every recording, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub recordings: Vec<(RecordingMeta, Vec<SegmentFeatures>)>,
}

impl FeatureSet {
    /// Extracts features from audio, one recording per task.
    pub fn extract(
        manifest: &DatasetManifest,
        cfg: &crate::features::FeatureConfig,
    ) -> Result<Self> {
        let extractor = MelExtractor::new();
        let recordings = manifest
            .entries()
            .par_iter()
            .map(|meta| {
                let wave = load_audio(manifest, meta)?;
                Ok((meta.clone(), featurize(&extractor, &wave, cfg)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { recordings })
    }

    /// Labelled segments of one split.
    pub fn labeled(&self, split: Split) -> Vec<Labeled<'_>> {
        self.recordings
            .iter()
            .filter(|(m, _)| m.split == split)
            .flat_map(|(m, segs)| segs.iter().map(move |s| (&s.map, m.label)))
            .collect()
    }

    pub fn segment_count(&self) -> usize {
        self.recordings.iter().map(|(_, s)| s.len()).sum()
    }
}

/// Cache file name of a recording: its relative path with separators flattened.
pub fn feature_file_name(meta: &RecordingMeta) -> String {
    let stem = meta.path.strip_suffix(".wav").unwrap_or(&meta.path);
    format!("{}.feat", stem.replace(['/', '\\'], "__"))
}

/// Featurises every recording into `out`, one cache file each.
pub fn run_featurize(
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    out: &Path,
) -> Result<FeatureSet> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let set = FeatureSet::extract(manifest, &cfg.features)?;
    set.recordings
        .par_iter()
        .map(|(meta, segs)| write_feature_cache(&out.join(feature_file_name(meta)), segs))
        .collect::<Result<()>>()?;
    cfg.write_to_dir(out)?;
    Ok(set)
}

/// Loads cached features for every manifest entry.
pub fn load_features(manifest: &DatasetManifest, dir: &Path) -> Result<FeatureSet> {
    let recordings = manifest
        .entries()
        .par_iter()
        .map(|meta| {
            Ok((
                meta.clone(),
                read_feature_cache(&dir.join(feature_file_name(meta)))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet { recordings })
}

/// Initialises a model from the run config and trains it.
pub fn run_train(
    cfg: &RunConfig,
    features: &FeatureSet,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let model =
        ModelState::<f32>::init(cfg.model.clone(), StreamKey::root(cfg.seed).derive("init"))?;
    let (train_set, val_set) = (
        features.labeled(Split::Train),
        features.labeled(Split::Validation),
    );
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid(
            "training needs segments in both the train and validation splits",
        ));
    }
    let outputs = out.map(|dir| TrainOutputs {
        dir: dir.to_path_buf(),
    });
    let outcome = train(model, &train_set, &val_set, &cfg.train, outputs.as_ref())?;
    if let Some(dir) = out {
        cfg.write_to_dir(dir)?;
        write_json(&dir.join("train_summary.json"), &outcome.summary)?;
    }
    Ok(outcome)
}

/// Fails when a checkpoint's architecture differs from the configured one.
pub fn check_model_config(model: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    if model != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture (config hash {:016x}) differs from the run config ({:016x})",
            crate::model::config_hash(model),
            crate::model::config_hash(expected)
        )));
    }
    Ok(())
}

/// One segment's MC prediction with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPrediction {
    pub patient_id: String,
    pub location: Location,
    pub split: Split,
    pub truth: ClassLabel,
    pub path: String,
    pub offset_s: f64,
    pub mc: McResult,
}

impl SegmentPrediction {
    /// Probabilities after per-pass temperature scaling.
    pub fn probs(&self, temperature: f64) -> Result<ProbVector> {
        if temperature == 1.0 {
            Ok(self.mc.mean)
        } else {
            self.mc.rescaled(temperature)
        }
    }
}

/// MC predictions for every segment of the selected splits.
///
/// Segment `k` of recording `path` uses the key `mc/<path>/k`, so results
/// do not depend on which other segments are predicted alongside.
pub fn run_predict(
    model: &ModelState<f32>,
    features: &FeatureSet,
    splits: &[Split],
    passes: usize,
    seed: u64,
) -> Result<Vec<SegmentPrediction>> {
    let root = StreamKey::root(seed).derive("mc");
    let mut maps = Vec::new();
    let mut keys = Vec::new();
    let mut info = Vec::new();
    for (meta, segs) in features
        .recordings
        .iter()
        .filter(|(m, _)| splits.contains(&m.split))
    {
        for (k, s) in segs.iter().enumerate() {
            maps.push(&s.map);
            keys.push(root.derive(&meta.path).index(k as u64));
            info.push((meta, s.offset_s));
        }
    }
    let opts = McOptions {
        passes,
        keep_passes: true,
        ..McOptions::default()
    };
    let results = mc_predict_batch(model, &maps, &keys, &opts)?;
    Ok(info
        .into_iter()
        .zip(results)
        .map(|((meta, offset_s), mc)| SegmentPrediction {
            patient_id: meta.patient_id.clone(),
            location: meta.location,
            split: meta.split,
            truth: meta.label,
            path: meta.path.clone(),
            offset_s,
            mc,
        })
        .collect())
}

const PASSES_MAGIC: [u8; 4] = *b"MMPP";

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    patient_id: String,
    location: Location,
    split: Split,
    label: ClassLabel,
    path: String,
    offset_s: f64,
    p_absent: f64,
    p_present: f64,
    p_unknown: f64,
    entropy: f64,
    pred: ClassLabel,
}

/// Writes `predictions.csv` and the per-pass logits `passes.bin`.
pub fn write_predictions(dir: &Path, preds: &[SegmentPrediction]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_at(&csv_path))?;
    for p in preds {
        let m = p.mc.mean.0;
        w.serialize(PredictionRow {
            patient_id: p.patient_id.clone(),
            location: p.location,
            split: p.split,
            label: p.truth,
            path: p.path.clone(),
            offset_s: p.offset_s,
            p_absent: m[0],
            p_present: m[1],
            p_unknown: m[2],
            entropy: p.mc.entropy,
            pred: p.mc.mean.argmax(),
        })?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let path = dir.join("passes.bin");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut b = BufWriter::new(file);
    let passes = preds.first().map(|p| p.mc.n_passes).unwrap_or(0);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&PASSES_MAGIC);
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(preds.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(passes as u32).to_le_bytes());
    for p in preds {
        let rows =
            p.mc.per_pass
                .as_ref()
                .ok_or_else(|| invalid("prediction lacks per-pass logits"))?;
        if rows.len() != passes {
            return Err(invalid("predictions disagree on the number of passes"));
        }
        for v in rows.iter().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    b.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    b.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_predictions(dir: &Path) -> Result<Vec<SegmentPrediction>> {
    let csv_path = dir.join("predictions.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(csv_at(&csv_path))?;
    let rows: Vec<PredictionRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let path = dir.join("passes.bin");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |m: &str| Error::InvalidInput(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || bytes[..4] != PASSES_MAGIC {
        return Err(bad("not a pass-logit file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (n, passes) = (word(8), word(12));
    if n != rows.len() || bytes.len() != 16 + n * passes * N_CLASSES * 8 {
        return Err(bad("does not match predictions.csv"));
    }
    let mut values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    rows.into_iter()
        .map(|row| {
            let per_pass: Vec<[f64; N_CLASSES]> = (0..passes)
                .map(|_| std::array::from_fn(|_| values.next().expect("length checked")))
                .collect();
            Ok(SegmentPrediction {
                patient_id: row.patient_id,
                location: row.location,
                split: row.split,
                truth: row.label,
                path: row.path,
                offset_s: row.offset_s,
                mc: McResult {
                    mean: ProbVector([row.p_absent, row.p_present, row.p_unknown]),
                    entropy: row.entropy,
                    n_passes: passes,
                    per_pass: Some(per_pass),
                },
            })
        })
        .collect()
}

/// Decisions at all three levels for one split and temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct Decisions {
    /// `(outcome, truth)` per segment.
    pub segments: Vec<(SegmentOutcome, ClassLabel)>,
    /// `(patient, path, decision, truth)` per record.
    pub records: Vec<(String, String, RecordDecision, ClassLabel)>,
    /// `(decision, truth)` per patient.
    pub patients: Vec<(PatientDecision, ClassLabel)>,
}

impl Decisions {
    pub fn segment_confidences(&self) -> Vec<(f64, bool)> {
        self.segments
            .iter()
            .map(|(o, t)| (o.confidence, o.label == *t))
            .collect()
    }

    pub fn patient_confidences(&self) -> Vec<(f64, bool)> {
        self.patients
            .iter()
            .map(|(d, t)| (d.confidence, d.label == *t))
            .collect()
    }

    pub fn metrics(&self) -> Result<LevelMetrics> {
        Ok(LevelMetrics {
            segment: MetricsReport::from_matrix(ConfusionMatrix3::from_pairs(
                self.segments.iter().map(|(o, t)| (o.label, *t)),
            ))?,
            record: MetricsReport::from_matrix(ConfusionMatrix3::from_pairs(
                self.records.iter().map(|(_, _, d, t)| (d.label, *t)),
            ))?,
            patient: MetricsReport::from_matrix(ConfusionMatrix3::from_pairs(
                self.patients.iter().map(|(d, t)| (d.label, *t)),
            ))?,
        })
    }
}

/// Aggregates segment predictions of `split` at temperature `t`.
pub fn decide(preds: &[SegmentPrediction], split: Split, t: f64) -> Result<Decisions> {
    let mut records: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    let mut segments = Vec::new();
    for p in preds.iter().filter(|p| p.split == split) {
        let probs = p.probs(t)?;
        let outcome = SegmentOutcome {
            label: probs.argmax(),
            confidence: probs.confidence(),
            entropy: entropy(&probs),
        };
        records
            .entry((&p.patient_id, &p.path))
            .or_default()
            .push(segments.len());
        segments.push((outcome, p.truth));
    }
    if segments.is_empty() {
        return Err(invalid(format!("no predictions for the {split} split")));
    }
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut record_out = Vec::new();
    for ((pid, path), idx) in &records {
        let outs: Vec<SegmentOutcome> = idx.iter().map(|&i| segments[i].0).collect();
        let mut dec = decide_record(&outs)?;
        dec.contributing_segments = dec.contributing_segments.iter().map(|&k| idx[k]).collect();
        patients.entry(pid).or_default().push(record_out.len());
        record_out.push((pid.to_string(), path.to_string(), dec, segments[idx[0]].1));
    }
    let patient_out = patients
        .iter()
        .map(|(pid, idx)| {
            let recs: Vec<RecordDecision> = idx.iter().map(|&i| record_out[i].2.clone()).collect();
            let mut dec = decide_patient(pid, &recs)?;
            dec.contributing_records = dec.contributing_records.iter().map(|&k| idx[k]).collect();
            Ok((dec, record_out[idx[0]].3))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Decisions {
        segments,
        records: record_out,
        patients: patient_out,
    })
}

/// Temperatures chosen on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub segment: TemperatureFit,
    /// Temperature used for record and patient decisions.
    pub patient: f64,
    pub refit_patient: bool,
}

impl Temperatures {
    pub fn identity() -> Self {
        Self {
            segment: TemperatureFit {
                temperature: 1.0,
                nll: f64::NAN,
                nll_at_one: f64::NAN,
                degenerate: false,
            },
            patient: 1.0,
            refit_patient: false,
        }
    }
}

/// Calibration results on the validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub temperatures: Temperatures,
    pub segment: CalibrationReport,
    pub patient: CalibrationReport,
}

/// Binary log loss of patient confidences against correctness.
fn patient_log_loss(preds: &[SegmentPrediction], t: f64) -> f64 {
    let Ok(d) = decide(preds, Split::Validation, t) else {
        return f64::INFINITY;
    };
    let pairs = d.patient_confidences();
    let eps = 1e-12;
    -pairs
        .iter()
        .map(|&(c, ok)| {
            if ok {
                c.max(eps).ln()
            } else {
                (1.0 - c).max(eps).ln()
            }
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Fits the temperature on validation segments (scale-then-average over
/// MC passes) and reports ECE before and after at both levels.
pub fn run_calibrate(
    preds: &[SegmentPrediction],
    refit_patient: bool,
) -> Result<CalibrationOutcome> {
    let val: Vec<&SegmentPrediction> = preds
        .iter()
        .filter(|p| p.split == Split::Validation)
        .collect();
    if val.is_empty() {
        return Err(invalid("calibration needs validation predictions"));
    }
    let passes: Vec<Vec<[f64; N_CLASSES]>> = val
        .iter()
        .map(|p| {
            p.mc.per_pass
                .clone()
                .ok_or_else(|| invalid("calibration needs per-pass logits"))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<ClassLabel> = val.iter().map(|p| p.truth).collect();
    let fit = fit_temperature_mc(&passes, &labels)?;
    if fit.degenerate {
        eprintln!("warning: validation labels hold a single class; temperature left at 1");
    }
    let patient_t = if refit_patient {
        minimise_over_temperature(|t| patient_log_loss(preds, t)).temperature
    } else {
        fit.temperature
    };
    let before = decide(preds, Split::Validation, 1.0)?;
    let seg_after = decide(preds, Split::Validation, fit.temperature)?;
    let pat_after = decide(preds, Split::Validation, patient_t)?;
    Ok(CalibrationOutcome {
        segment: CalibrationReport::new(
            Level::Segment,
            fit.temperature,
            &before.segment_confidences(),
            &seg_after.segment_confidences(),
        )?,
        patient: CalibrationReport::new(
            Level::Patient,
            patient_t,
            &before.patient_confidences(),
            &pat_after.patient_confidences(),
        )?,
        temperatures: Temperatures {
            segment: fit,
            patient: patient_t,
            refit_patient,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub segment: MetricsReport,
    pub record: MetricsReport,
    pub patient: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub temperatures: Temperatures,
    pub before: LevelMetrics,
    pub after: LevelMetrics,
    pub ece_segment: (f64, f64),
    pub ece_patient: (f64, f64),
    /// Published system scores on the full corpus, for reference only.
    pub reference: ReferenceScores,
    pub patients_low_support: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub weighted_accuracy: f64,
    pub macro_f1: f64,
}

/// Metrics of `split` before and after calibration, plus the decisions
/// made with the calibrated temperatures.
pub fn run_evaluate(
    preds: &[SegmentPrediction],
    temps: &Temperatures,
    split: Split,
) -> Result<(EvaluationReport, Decisions)> {
    let before = decide(preds, split, 1.0)?;
    let seg_after = decide(preds, split, temps.segment.temperature)?;
    let after = decide(preds, split, temps.patient)?;
    let ece = |d: &Decisions, patient: bool| -> Result<f64> {
        let pairs = if patient {
            d.patient_confidences()
        } else {
            d.segment_confidences()
        };
        Ok(reliability_data(&pairs, ECE_BINS)?.ece())
    };
    let mut after_metrics = after.metrics()?;
    after_metrics.segment = seg_after.metrics()?.segment;
    let report = EvaluationReport {
        split,
        temperatures: temps.clone(),
        before: before.metrics()?,
        after: after_metrics,
        ece_segment: (ece(&before, false)?, ece(&seg_after, false)?),
        ece_patient: (ece(&before, true)?, ece(&after, true)?),
        reference: ReferenceScores {
            weighted_accuracy: 0.798,
            macro_f1: 0.651,
        },
        patients_low_support: after
            .patients
            .iter()
            .filter(|(d, _)| d.low_support)
            .map(|(d, _)| d.patient_id.clone())
            .collect(),
    };
    Ok((report, after))
}

pub fn write_patient_decisions(path: &Path, d: &Decisions) -> Result<()> {
    let decisions: Vec<PatientDecision> = d.patients.iter().map(|(p, _)| p.clone()).collect();
    write_patient_csv(path, &decisions)
}

fn write_histogram_csv(path: &Path, bins: &[crate::calibration::ReliabilityBin]) -> Result<()> {
    let total: usize = bins.iter().map(|b| b.count).sum();
    let mut w = csv::Writer::from_path(path).map_err(csv_at(path))?;
    w.write_record(["bin_lo", "bin_hi", "count", "fraction"])?;
    for b in bins {
        w.write_record([
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            (b.count as f64 / total.max(1) as f64).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reliability and confidence-histogram CSVs for both levels, before and
/// after calibration. Returns the files written.
pub fn run_report(
    preds: &[SegmentPrediction],
    temps: &Temperatures,
    split: Split,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let before = decide(preds, split, 1.0)?;
    let seg_after = decide(preds, split, temps.segment.temperature)?;
    let pat_after = decide(preds, split, temps.patient)?;
    let sets = [
        ("segment", "before", before.segment_confidences()),
        ("segment", "after", seg_after.segment_confidences()),
        ("patient", "before", before.patient_confidences()),
        ("patient", "after", pat_after.patient_confidences()),
    ];
    let mut written = Vec::new();
    for (level, stage, pairs) in sets {
        let r = reliability_data(&pairs, ECE_BINS)?;
        let rel = out.join(format!("reliability_{level}_{stage}.csv"));
        write_bins_csv(&rel, &r.bins)?;
        let hist = out.join(format!("histogram_{level}_{stage}.csv"));
        write_histogram_csv(&hist, &r.bins)?;
        let summary = out.join(format!("summary_{level}_{stage}.json"));
        write_json(
            &summary,
            &serde_json::json!({
                "n": r.n,
                "accuracy": r.accuracy,
                "mean_confidence": r.mean_confidence,
                "ece": r.ece(),
            }),
        )?;
        written.extend([rel, hist, summary]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(
        pid: &str,
        path: &str,
        split: Split,
        truth: ClassLabel,
        z: [f64; 3],
    ) -> SegmentPrediction {
        let mean = ProbVector::from_logits(&z, 1.0);
        SegmentPrediction {
            patient_id: pid.into(),
            location: Location::AV,
            split,
            truth,
            path: path.into(),
            offset_s: 0.0,
            mc: McResult {
                mean,
                entropy: entropy(&mean),
                n_passes: 1,
                per_pass: Some(vec![z]),
            },
        }
    }

    #[test]
    fn decisions_follow_hierarchy() {
        use ClassLabel::*;
        let preds = vec![
            pred("A", "a1", Split::Test, Present, [0.0, 2.0, 0.0]),
            pred("A", "a1", Split::Test, Present, [2.0, 0.0, 0.0]),
            pred("A", "a2", Split::Test, Present, [3.0, 0.0, 0.0]),
            pred("B", "b1", Split::Test, Absent, [3.0, 0.0, 0.0]),
            pred("C", "c1", Split::Validation, Absent, [3.0, 0.0, 0.0]),
        ];
        let d = decide(&preds, Split::Test, 1.0).unwrap();
        assert_eq!(d.segments.len(), 4);
        assert_eq!(d.records.len(), 3);
        assert_eq!(d.patients.len(), 2);
        let a = &d.patients[0].0;
        assert_eq!((a.patient_id.as_str(), a.label), ("A", Present));
        assert!(a.low_support);
        let m = d.metrics().unwrap();
        assert_eq!(m.patient.weighted_accuracy, 1.0);
        assert!(decide(&preds, Split::Train, 1.0).is_err());
    }

    #[test]
    fn prediction_files_round_trip() {
        let preds = vec![
            pred(
                "A",
                "audio/a.wav",
                Split::Test,
                ClassLabel::Present,
                [0.1, 2.25, -0.5],
            ),
            pred(
                "B",
                "audio/b.wav",
                Split::Validation,
                ClassLabel::Absent,
                [1.0, -3.0, 0.125],
            ),
        ];
        let d = tempfile::tempdir().unwrap();
        write_predictions(d.path(), &preds).unwrap();
        assert_eq!(read_predictions(d.path()).unwrap(), preds);
    }

    #[test]
    fn identity_temperature_keeps_predictions() {
        let preds = vec![
            pred(
                "A",
                "a",
                Split::Test,
                ClassLabel::Present,
                [0.1, 2.25, -0.5],
            ),
            pred(
                "B",
                "b",
                Split::Test,
                ClassLabel::Absent,
                [1.0, -3.0, 0.125],
            ),
        ];
        let (report, after) = run_evaluate(&preds, &Temperatures::identity(), Split::Test).unwrap();
        assert_eq!(report.before, report.after);
        for ((o, _), p) in after.segments.iter().zip(&preds) {
            assert_eq!(o.label, p.mc.mean.argmax());
        }
    }

    #[test]
    fn patient_refit_never_worsens_patient_log_loss() {
        use ClassLabel::*;
        let mut preds = Vec::new();
        let mut rng = StreamKey::root(3).rng();
        for i in 0..30 {
            let truth = [Absent, Present, Unknown][i % 3];
            for r in 0..2 {
                let mut z: [f64; 3] = std::array::from_fn(|_| rand::Rng::random_range(&mut rng, -2.0..2.0));
                z[truth.index()] += 1.5;
                preds.push(pred(&format!("P{i}"), &format!("P{i}_{r}"), Split::Validation, truth, z.map(|v| 4.0 * v)));
            }
        }
        let plain = run_calibrate(&preds, false).unwrap();
        let refit = run_calibrate(&preds, true).unwrap();
        assert_eq!(plain.temperatures.segment, refit.temperatures.segment);
        assert_eq!(plain.temperatures.patient, plain.temperatures.segment.temperature);
        let t = refit.temperatures.patient;
        assert!(patient_log_loss(&preds, t) <= patient_log_loss(&preds, 1.0));
        assert!(plain.segment.ece_after <= plain.segment.ece_before);
    }
}
