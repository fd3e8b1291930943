//! Waveform ingestion: PCM16 mono WAV files and seeded synthetic signals.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use crate::rng::SplitMix;

/// Fixed-point scale for PCM16: `sample = raw / 32768`.
pub const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("duration must be positive and yield at least one sample, got {0} s")]
    BadDuration(f64),
    #[error("invalid audio buffer: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono samples in `[-1, 1]` at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Invalid("no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::Invalid("sample rate 0".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::Invalid(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an in-memory RIFF/WAVE image. Unknown chunks are skipped.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }
    let mut pos = 12;
    let mut sample_rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(AudioError::Truncated("fmt chunk".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(AudioError::UnsupportedFormat(format!("format tag {format}, expected PCM (1)")));
                }
                if channels != 1 {
                    return Err(AudioError::UnsupportedFormat(format!("{channels} channels, expected mono")));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedFormat(format!("{bits} bits per sample, expected 16")));
                }
                sample_rate = Some(u32_at(bytes, body + 4));
            }
            b"data" => {
                let rate = sample_rate.ok_or_else(|| AudioError::UnsupportedFormat("data chunk before fmt".into()))?;
                if size == 0 {
                    return Err(AudioError::Truncated("empty data chunk".into()));
                }
                let available = bytes.len() - body;
                if available < size {
                    return Err(AudioError::Truncated(format!("data chunk declares {size} bytes, {available} present")));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|p| i16::from_le_bytes([p[0], p[1]]) as f64 / PCM16_SCALE)
                    .collect::<Vec<_>>();
                if samples.is_empty() {
                    return Err(AudioError::Truncated("data chunk holds no complete sample".into()));
                }
                return AudioBuffer::new(samples, rate);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    if sample_rate.is_none() {
        Err(AudioError::UnsupportedFormat("missing fmt chunk".into()))
    } else {
        Err(AudioError::Truncated("missing data chunk".into()))
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    parse_wav(&std::fs::read(path)?)
}

/// Encodes `audio` as PCM16 mono. Samples are rounded to the nearest step and
/// clamped to the int16 range.
pub fn encode_wav(audio: &AudioBuffer) -> Vec<u8> {
    let data_len = audio.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &audio.samples {
        let q = (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), AudioError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_wav(audio))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// 440 Hz tone, amplitude 0.5, seed-dependent phase.
    Sine,
    /// Linear sweep 100 Hz -> 4 kHz, amplitude 0.5, seed-dependent phase.
    Chirp,
    /// Uniform white noise in `[-0.5, 0.5)`.
    Noise,
}

impl std::str::FromStr for SignalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sine" => Ok(Self::Sine),
            "chirp" => Ok(Self::Chirp),
            "noise" => Ok(Self::Noise),
            other => Err(format!("unknown signal kind {other:?} (sine, chirp, noise)")),
        }
    }
}

fn sample_count(duration_s: f64, sample_rate: u32) -> Result<usize, AudioError> {
    if !(duration_s.is_finite() && duration_s > 0.0) || sample_rate == 0 {
        return Err(AudioError::BadDuration(duration_s));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(AudioError::BadDuration(duration_s));
    }
    Ok(n)
}

/// Deterministic test signal of `round(duration_s * sample_rate)` samples.
pub fn synth_signal(kind: SignalKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<AudioBuffer, AudioError> {
    let n = sample_count(duration_s, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = SplitMix::new(seed);
    let samples = match kind {
        SignalKind::Sine => {
            let phase = TAU * rng.next_f64();
            (0..n).map(|i| 0.5 * (TAU * 440.0 * i as f64 / sr + phase).sin()).collect()
        }
        SignalKind::Chirp => {
            let phase = TAU * rng.next_f64();
            let (f0, f1) = (100.0, 4000.0);
            let rate = (f1 - f0) / duration_s;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    0.5 * (TAU * (f0 * t + 0.5 * rate * t * t) + phase).sin()
                })
                .collect()
        }
        SignalKind::Noise => (0..n).map(|_| rng.next_f64() - 0.5).collect(),
    };
    AudioBuffer::new(samples, sample_rate)
}

/// Concatenated constant-frequency segments of equal length, amplitude 0.5.
/// Phase is continuous across segment boundaries.
pub fn tone_sequence(freqs_hz: &[f64], duration_s: f64, sample_rate: u32) -> Result<AudioBuffer, AudioError> {
    let n = sample_count(duration_s, sample_rate)?;
    if freqs_hz.is_empty() {
        return Err(AudioError::Invalid("no tones".into()));
    }
    let sr = sample_rate as f64;
    let mut phase = 0.0f64;
    let samples = (0..n)
        .map(|i| {
            let f = freqs_hz[i * freqs_hz.len() / n];
            let s = 0.5 * phase.sin();
            phase = (phase + TAU * f / sr) % TAU;
            s
        })
        .collect();
    AudioBuffer::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_with(format: u16, channels: u16, bits: u16, data: &[u8], declared: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&declared.to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    fn pcm(values: &[i16]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn reads_four_samples() {
        let data = pcm(&[0, 16384, -16384, 32767]);
        let a = parse_wav(&wav_with(1, 1, 16, &data, 8)).unwrap();
        assert_eq!(a.samples(), &[0.0, 0.5, -0.5, 32767.0 / 32768.0]);
        assert_eq!(a.sample_rate(), 16000);
    }

    #[test]
    fn zero_length_data_is_truncated() {
        let err = parse_wav(&wav_with(1, 1, 16, &[], 0)).unwrap_err();
        assert!(matches!(err, AudioError::Truncated(_)));
    }

    #[test]
    fn short_data_chunk_is_truncated() {
        let err = parse_wav(&wav_with(1, 1, 16, &pcm(&[1, 2]), 100)).unwrap_err();
        assert!(matches!(err, AudioError::Truncated(_)));
    }

    #[test]
    fn stereo_is_unsupported() {
        let err = parse_wav(&wav_with(1, 2, 16, &pcm(&[1, 2]), 4)).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat(_)));
        let err = parse_wav(&wav_with(3, 1, 16, &pcm(&[1, 2]), 4)).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat(_)));
        let err = parse_wav(&wav_with(1, 1, 8, &pcm(&[1, 2]), 4)).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat(_)));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(parse_wav(b"RIFX\0\0\0\0WAVE"), Err(AudioError::NotWav)));
        assert!(matches!(parse_wav(b"RI"), Err(AudioError::NotWav)));
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = wav_with(1, 1, 16, &pcm(&[100, -100]), 4);
        // splice a LIST chunk with odd size (plus pad byte) before "data"
        let at = 36;
        let list: Vec<u8> = [b"LIST".as_slice(), &3u32.to_le_bytes(), b"abc\0"].concat();
        bytes.splice(at..at, list);
        let a = parse_wav(&bytes).unwrap();
        assert_eq!(a.samples(), &[100.0 / 32768.0, -100.0 / 32768.0]);
    }

    #[test]
    fn synth_lengths_and_bounds() {
        let s = synth_signal(SignalKind::Sine, 1.0, 16000, 3).unwrap();
        assert_eq!(s.len(), 16000);
        assert!(s.samples().iter().all(|v| v.abs() <= 1.0));
        let c = synth_signal(SignalKind::Chirp, 0.25, 16000, 3).unwrap();
        assert_eq!(c.len(), 4000);
        assert!(matches!(synth_signal(SignalKind::Noise, 0.0, 16000, 1), Err(AudioError::BadDuration(_))));
        assert!(matches!(synth_signal(SignalKind::Noise, -1.0, 16000, 1), Err(AudioError::BadDuration(_))));
        assert!(matches!(synth_signal(SignalKind::Noise, 1e-9, 16000, 1), Err(AudioError::BadDuration(_))));
    }

    #[test]
    fn noise_is_seeded() {
        let a = synth_signal(SignalKind::Noise, 0.5, 16000, 7).unwrap();
        let b = synth_signal(SignalKind::Noise, 0.5, 16000, 7).unwrap();
        let c = synth_signal(SignalKind::Noise, 0.5, 16000, 8).unwrap();
        assert_eq!(a, b);
        assert!(a.samples().iter().zip(c.samples()).any(|(x, y)| x != y));
    }

    #[test]
    fn wav_roundtrip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chirp.wav");
        let a = synth_signal(SignalKind::Chirp, 0.1, 16000, 11).unwrap();
        write_wav(&path, &a).unwrap();
        let b = read_wav(&path).unwrap();
        assert_eq!(b.sample_rate(), 16000);
        let worst = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0);
    }
}
