use std::f64::consts::TAU;
use std::path::Path;

use murmur_autodiff::StreamKey;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use super::audio::{write_wav, Waveform};
use super::manifest::{DatasetManifest, RecordingMeta};
use super::split::stratified_split;
use super::{ClassLabel, Location};
use crate::error::{invalid, Error, Result};
use crate::SAMPLE_RATE;

/// Parameters of the synthetic phonocardiogram fixture.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Proportions of (absent, present, unknown) patients.
    pub class_mix: [f64; 3],
    /// Shares of each class sent to (validation, test).
    pub holdout: (f64, f64),
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_patients: 24,
            class_mix: [0.5, 0.3, 0.2],
            holdout: (0.2, 0.2),
            min_duration_s: 4.0,
            max_duration_s: 8.0,
        }
    }
}

/// Writes `manifest.csv` and `audio/*.wav` under `out_dir`.
///
/// Every byte of output is a function of the config alone. Absent
/// recordings hold only heart sounds over a faint noise floor, present
/// recordings add a band-limited (150–450 Hz) burst in each systole, and
/// unknown recordings are buried in broadband noise.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.n_patients < 1 {
        return Err(invalid("synth_dataset needs at least one patient"));
    }
    let total: f64 = cfg.class_mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 || cfg.class_mix.iter().any(|&p| p < 0.0) {
        return Err(invalid(format!(
            "class mix {:?} must be non-negative and sum to 1",
            cfg.class_mix
        )));
    }
    if !(cfg.min_duration_s > 0.0 && cfg.max_duration_s >= cfg.min_duration_s) {
        return Err(invalid("synth durations must satisfy 0 < min <= max"));
    }
    let root = StreamKey::root(cfg.seed).derive("dataio");
    let mut labels = quota_labels(cfg.n_patients, cfg.class_mix);
    labels.shuffle(&mut root.derive("labels").rng());

    let patients: Vec<(String, ClassLabel)> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (format!("P{i:04}"), l))
        .collect();
    let splits = stratified_split(&patients, cfg.holdout, root.derive("split"));

    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut entries = Vec::new();
    for (pid, label) in &patients {
        let pkey = root.derive("patient").derive(pid);
        let mut rng = pkey.rng();
        let n_rec = rng.random_range(1..=4usize);
        let locations: Vec<Location> = Location::ALL
            .choose_multiple(&mut rng, n_rec)
            .copied()
            .collect();
        for loc in locations {
            let wave = synth_recording(
                pkey.derive(loc.as_str()),
                *label,
                cfg.min_duration_s,
                cfg.max_duration_s,
            );
            let rel = format!("audio/{pid}_{}.wav", loc.as_str());
            write_wav(&out_dir.join(&rel), &wave)?;
            entries.push(RecordingMeta {
                patient_id: pid.clone(),
                location: loc,
                split: splits[pid],
                label: *label,
                path: rel,
                sample_rate: SAMPLE_RATE,
            });
        }
    }
    let manifest = DatasetManifest::from_entries(out_dir, entries)?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Largest-remainder allocation of `n` patients to the class proportions.
fn quota_labels(n: usize, mix: [f64; 3]) -> Vec<ClassLabel> {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    ClassLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .collect()
}

/// One synthetic recording; a pure function of `key` and the label.
pub(crate) fn synth_recording(
    key: StreamKey,
    label: ClassLabel,
    min_s: f64,
    max_s: f64,
) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let mut rng = key.rng();
    let duration = if max_s > min_s {
        rng.random_range(min_s..=max_s)
    } else {
        min_s
    };
    let n = (duration * fs).round() as usize;
    let mut x: Vec<f64> = (0..n)
        .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let period = 60.0 / rng.random_range(70.0..130.0);
    let systole = 0.35 * period;
    let murmur_amp = rng.random_range(0.12..0.25);
    let mut beat = -rng.random_range(0.0..period);
    while beat < duration {
        let s1 = (rng.random_range(35.0..60.0), rng.random_range(0.35..0.5));
        let s2 = (rng.random_range(50.0..90.0), rng.random_range(0.25..0.4));
        add_thump(&mut x, beat, s1.0, s1.1, fs);
        add_thump(&mut x, beat + systole, s2.0, s2.1, fs);
        if label == ClassLabel::Present {
            add_band_burst(
                &mut x,
                beat + 0.05,
                systole - 0.08,
                murmur_amp,
                &mut rng,
                fs,
            );
        }
        beat += period * rng.random_range(0.97..1.03);
    }
    if label == ClassLabel::Unknown {
        let level = rng.random_range(0.15..0.3);
        x.iter_mut()
            .for_each(|v| *v += level * rng.sample::<f64, _>(StandardNormal));
    }
    Waveform {
        samples: x.iter().map(|&v| v.clamp(-0.99, 0.99) as f32).collect(),
        sample_rate: SAMPLE_RATE,
    }
}

/// Exponentially damped sinusoid (an S1 or S2 heart sound).
fn add_thump(x: &mut [f64], start: f64, freq: f64, amp: f64, fs: f64) {
    let tau = 0.02;
    let first = (start * fs).ceil().max(0.0) as usize;
    let last = (((start + 0.1) * fs) as usize).min(x.len());
    for (i, v) in x.iter_mut().enumerate().take(last).skip(first) {
        let t = i as f64 / fs - start;
        *v += amp * (-t / tau).exp() * (TAU * freq * t).sin();
    }
}

/// Hann-tapered sum of random tones in 150–450 Hz.
fn add_band_burst<R: Rng>(x: &mut [f64], start: f64, len: f64, amp: f64, rng: &mut R, fs: f64) {
    let tones: Vec<(f64, f64)> = (0..16)
        .map(|_| (rng.random_range(150.0..450.0), rng.random_range(0.0..TAU)))
        .collect();
    let norm = amp * (2.0 / tones.len() as f64).sqrt();
    let first = (start * fs).ceil().max(0.0) as usize;
    let last = (((start + len) * fs) as usize).min(x.len());
    for (i, v) in x.iter_mut().enumerate().take(last).skip(first) {
        let t = i as f64 / fs;
        let env = 0.5 - 0.5 * (TAU * (t - start) / len).cos();
        let s: f64 = tones.iter().map(|(f, ph)| (TAU * f * t + ph).sin()).sum();
        *v += norm * env * s;
    }
}
