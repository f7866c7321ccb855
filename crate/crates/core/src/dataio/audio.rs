use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::manifest::{DatasetManifest, RecordingMeta};
use crate::error::{Error, Result};

/// Mono PCM audio scaled to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Loads the recording behind a manifest row, enforcing its expected sample rate.
pub fn load_audio(manifest: &DatasetManifest, meta: &RecordingMeta) -> Result<Waveform> {
    let path = manifest.resolve(meta);
    let wave = read_wav(&path)?;
    if wave.sample_rate != meta.sample_rate {
        return Err(Error::Audio {
            path,
            msg: format!(
                "sample rate {} Hz does not match expected {} Hz (resampling is not supported)",
                wave.sample_rate, meta.sample_rate
            ),
        });
    }
    Ok(wave)
}

/// Decodes a mono 16-bit PCM WAV file. Samples are `i16 / 32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let audio_err = |msg: String| Error::Audio {
        path: path.to_path_buf(),
        msg,
    };
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(format!(
            "mono required, file has {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "unsupported encoding: {:?} {}-bit (16-bit PCM required)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    if samples.is_empty() {
        return Err(audio_err("zero-length audio".into()));
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes mono 16-bit PCM; values are clamped to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wave.samples {
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{ClassLabel, Location, Split};
    use crate::SAMPLE_RATE;

    /// Hand-assembled RIFF header for 16-bit PCM.
    fn wav_bytes(channels: u16, rate: u32, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * channels as u32 * 2).to_le_bytes());
        b.extend_from_slice(&(channels * 2).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn full_scale_square_wave_decodes_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sq.wav");
        std::fs::write(&p, wav_bytes(1, 4000, &[32767, -32767, 32767, -32767])).unwrap();
        let w = read_wav(&p).unwrap();
        let hi = 32767.0f32 / 32768.0;
        assert_eq!(w.samples, vec![hi, -hi, hi, -hi]);
        assert_eq!(w.sample_rate, 4000);
    }

    #[test]
    fn ten_seconds_at_4khz_is_40000_samples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ten.wav");
        let wave = Waveform {
            samples: vec![0.1; 40_000],
            sample_rate: 4000,
        };
        write_wav(&p, &wave).unwrap();
        assert_eq!(read_wav(&p).unwrap().samples.len(), 40_000);
    }

    #[test]
    fn stereo_zero_length_and_wrong_rate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("st.wav");
        std::fs::write(&stereo, wav_bytes(2, 4000, &[1, 2, 3, 4])).unwrap();
        assert!(read_wav(&stereo)
            .unwrap_err()
            .to_string()
            .contains("mono required"));

        let empty = dir.path().join("empty.wav");
        std::fs::write(&empty, wav_bytes(1, 4000, &[])).unwrap();
        assert!(read_wav(&empty)
            .unwrap_err()
            .to_string()
            .contains("zero-length"));

        let fast = dir.path().join("fast.wav");
        std::fs::write(&fast, wav_bytes(1, 8000, &[1, 2, 3])).unwrap();
        let meta = RecordingMeta {
            patient_id: "1".into(),
            location: Location::AV,
            split: Split::Train,
            label: ClassLabel::Absent,
            path: "fast.wav".into(),
            sample_rate: SAMPLE_RATE,
        };
        let manifest = DatasetManifest::from_entries(dir.path(), vec![meta.clone()]).unwrap();
        assert!(load_audio(&manifest, &meta)
            .unwrap_err()
            .to_string()
            .contains("sample rate"));
    }

    #[test]
    fn non_pcm16_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 4000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p)
            .unwrap_err()
            .to_string()
            .contains("unsupported encoding"));
    }
}
