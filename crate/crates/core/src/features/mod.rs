//! Fixed-geometry log-Mel features: 3 s windows, 128 Mel bins × 241 frames.

mod cache;
mod mel;

pub use cache::{read_feature_cache, write_feature_cache, CACHE_MAGIC, CACHE_VERSION};
pub use mel::{hz_to_mel, mel_to_hz, MelExtractor};

use crate::dataio::Waveform;
use crate::error::{invalid, Result};
use crate::SAMPLE_RATE;

/// Samples in one 3 s segment.
pub const SEGMENT_SAMPLES: usize = 12_000;
pub const SEGMENT_SECONDS: f64 = 3.0;
/// STFT frame length (25 ms).
pub const FRAME_LEN: usize = 100;
/// STFT frame hop (12.5 ms).
pub const FRAME_HOP: usize = 50;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 128;
pub const N_FRAMES: usize = SEGMENT_SAMPLES / FRAME_HOP + 1;
/// Added to Mel power before the logarithm.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    /// Window hop in seconds.
    pub hop_s: f64,
    /// Standardize each Mel bin across its frames.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            hop_s: 2.0,
            normalize: false,
        }
    }
}

impl FeatureConfig {
    pub fn hop_samples(&self) -> Result<usize> {
        let hop = (self.hop_s * SAMPLE_RATE as f64).round();
        if hop.is_nan() || hop < 1.0 {
            return Err(invalid(format!(
                "segment hop must be positive, got {} s",
                self.hop_s
            )));
        }
        Ok(hop as usize)
    }
}

/// One 3 s slice of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentAudio {
    pub samples: Vec<f32>,
    pub offset_s: f64,
}

/// A 128 × 241 log-Mel matrix stored Mel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Vec<f32>,
}

impl FeatureMap {
    pub const SHAPE: [usize; 2] = [N_MELS, N_FRAMES];

    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != N_MELS * N_FRAMES {
            return Err(invalid(format!(
                "feature map needs {} values, got {}",
                N_MELS * N_FRAMES,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * N_FRAMES + frame]
    }

    /// Mean over frames of each Mel bin.
    pub fn mel_profile(&self) -> Vec<f64> {
        self.values
            .chunks(N_FRAMES)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / N_FRAMES as f64)
            .collect()
    }
}

/// Feature map plus where it sits in its recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFeatures {
    pub offset_s: f64,
    pub map: FeatureMap,
}

/// Slices a waveform into 3 s windows at the configured hop.
///
/// Recordings shorter than one window yield a single zero-padded segment.
pub fn segment(w: &Waveform, cfg: &FeatureConfig) -> Result<Vec<SegmentAudio>> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(invalid(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        )));
    }
    let hop = cfg.hop_samples()?;
    let n = w.samples.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n < SEGMENT_SAMPLES {
        let mut samples = w.samples.clone();
        samples.resize(SEGMENT_SAMPLES, 0.0);
        return Ok(vec![SegmentAudio {
            samples,
            offset_s: 0.0,
        }]);
    }
    let count = (n - SEGMENT_SAMPLES) / hop + 1;
    Ok((0..count)
        .map(|k| SegmentAudio {
            samples: w.samples[k * hop..k * hop + SEGMENT_SAMPLES].to_vec(),
            offset_s: (k * hop) as f64 / SAMPLE_RATE as f64,
        })
        .collect())
}

/// Segments a recording and extracts every segment's feature map.
pub fn featurize(
    extractor: &MelExtractor,
    w: &Waveform,
    cfg: &FeatureConfig,
) -> Result<Vec<SegmentFeatures>> {
    segment(w, cfg)?
        .iter()
        .map(|s| {
            let mut map = extractor.extract(&s.samples)?;
            if cfg.normalize {
                standardize_rows(&mut map);
            }
            Ok(SegmentFeatures {
                offset_s: s.offset_s,
                map,
            })
        })
        .collect()
}

fn standardize_rows(map: &mut FeatureMap) {
    for row in map.values.chunks_mut(N_FRAMES) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / N_FRAMES as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / N_FRAMES as f64;
        let scale = 1.0 / (var.sqrt() + 1e-5);
        row.iter_mut()
            .for_each(|v| *v = ((*v as f64 - mean) * scale) as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(seconds: f64) -> Waveform {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        Waveform {
            samples: (0..n).map(|i| (i as f32 * 0.01).sin()).collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn ten_seconds_gives_four_windows() {
        let segs = segment(&wave(10.0), &FeatureConfig::default()).unwrap();
        let offsets: Vec<f64> = segs.iter().map(|s| s.offset_s).collect();
        assert_eq!(offsets, vec![0.0, 2.0, 4.0, 6.0]);
        assert!(segs.iter().all(|s| s.samples.len() == SEGMENT_SAMPLES));
        let w = wave(10.0);
        assert_eq!(segs[2].samples[..], w.samples[16_000..28_000]);
    }

    #[test]
    fn exact_fit_and_short_recordings() {
        let cfg = FeatureConfig::default();
        let exact = segment(&wave(3.0), &cfg).unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].offset_s, 0.0);

        let short = segment(&wave(2.0), &cfg).unwrap();
        assert_eq!(short.len(), 1);
        assert_eq!(short[0].samples.len(), SEGMENT_SAMPLES);
        assert!(short[0].samples[8000..].iter().all(|&v| v == 0.0));
        assert_eq!(short[0].samples[..8000], wave(2.0).samples[..]);
    }

    #[test]
    fn hop_is_configurable() {
        let cfg = FeatureConfig {
            hop_s: 1.0,
            ..FeatureConfig::default()
        };
        assert_eq!(segment(&wave(10.0), &cfg).unwrap().len(), 8);
        let bad = FeatureConfig {
            hop_s: 0.0,
            ..FeatureConfig::default()
        };
        assert!(segment(&wave(10.0), &bad).is_err());
    }

    #[test]
    fn window_count_formula() {
        for tenths in 30..200usize {
            let secs = tenths as f64 / 10.0;
            let n = segment(&wave(secs), &FeatureConfig::default())
                .unwrap()
                .len();
            assert_eq!(
                n,
                ((secs - 3.0) / 2.0 + 1e-9).floor() as usize + 1,
                "{secs} s"
            );
        }
    }

    #[test]
    fn wrong_rate_rejected() {
        let w = Waveform {
            samples: vec![0.0; 100],
            sample_rate: 8000,
        };
        assert!(segment(&w, &FeatureConfig::default()).is_err());
    }

    #[test]
    fn geometry_constants() {
        assert_eq!(N_FRAMES, 241);
        assert_eq!(FeatureMap::SHAPE, [128, 241]);
    }

    #[test]
    fn normalization_switch() {
        let ex = MelExtractor::new();
        let cfg = FeatureConfig {
            normalize: true,
            ..FeatureConfig::default()
        };
        let f = featurize(&ex, &wave(3.0), &cfg).unwrap();
        let row = &f[0].map.values()[5 * N_FRAMES..6 * N_FRAMES];
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / N_FRAMES as f64;
        assert!(mean.abs() < 1e-4);
        let raw = featurize(&ex, &wave(3.0), &FeatureConfig::default()).unwrap();
        assert_ne!(raw[0].map, f[0].map);
    }
}
