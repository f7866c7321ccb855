use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureMap, FRAME_HOP, FRAME_LEN, LOG_EPS, N_FFT, N_FRAMES, N_MELS, SEGMENT_SAMPLES};
use crate::error::{invalid, Result};
use crate::SAMPLE_RATE;

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Reusable STFT + Mel filter bank. Cheap to share across threads.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Rows of `N_FFT / 2 + 1` weights, one per Mel bin.
    filters: Vec<Vec<f64>>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..FRAME_LEN)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / FRAME_LEN as f64).cos())
            .collect();
        Self {
            fft,
            window,
            filters: filter_bank(),
        }
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Centre frequency (Hz) of each Mel filter.
    pub fn centers_hz() -> Vec<f64> {
        mel_edges_hz()[1..=N_MELS].to_vec()
    }

    pub fn extract(&self, samples: &[f32]) -> Result<FeatureMap> {
        if samples.len() != SEGMENT_SAMPLES {
            return Err(invalid(format!(
                "segment must have {SEGMENT_SAMPLES} samples, got {}",
                samples.len()
            )));
        }
        let padded = reflect_pad(samples, FRAME_HOP);
        let n_bins = N_FFT / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n_bins];
        let mut out = vec![0.0f32; N_MELS * N_FRAMES];
        for t in 0..N_FRAMES {
            let frame = &padded[t * FRAME_HOP..t * FRAME_HOP + FRAME_LEN];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                b.re = x * w;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, row) in self.filters.iter().enumerate() {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[m * N_FRAMES + t] = (e + LOG_EPS).ln() as f32;
            }
        }
        FeatureMap::new(out)
    }
}

/// Mirror padding that excludes the edge sample.
fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len();
    (0..n + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            let k = if j < 0 {
                -j
            } else if j >= n as isize {
                2 * (n as isize - 1) - j
            } else {
                j
            };
            x[k as usize] as f64
        })
        .collect()
}

fn mel_edges_hz() -> Vec<f64> {
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

fn filter_bank() -> Vec<Vec<f64>> {
    let edges = mel_edges_hz();
    let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
    (0..N_MELS)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=N_FFT / 2)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect()
        })
        .collect()
}
