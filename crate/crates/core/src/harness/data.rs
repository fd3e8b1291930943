//! Synthetic CTC dataset: stepped tones labeled by their quantized frequency.

use crate::audio::{tone_sequence, AudioBuffer};
use crate::ctc::LabelSeq;
use crate::harness::HarnessError;
use crate::rng::SplitMix;

/// Frequency bins; token `i + 1` labels `TOY_TONES_HZ[i]`, token 0 is blank.
pub const TOY_TONES_HZ: [f64; 4] = [300.0, 800.0, 1800.0, 3500.0];
pub const TOY_VOCAB: usize = TOY_TONES_HZ.len() + 1;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub audio: AudioBuffer,
    pub labels: LabelSeq,
}

/// `n` utterances of 2 or 3 tone segments with no two neighbours equal.
pub fn ctc_toy_dataset(n: usize, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Vec<Utterance>, HarnessError> {
    let mut rng = SplitMix::fork(seed, 0xDA7A);
    (0..n)
        .map(|_| {
            let len = 2 + rng.below(2);
            let mut tokens: Vec<usize> = Vec::with_capacity(len);
            while tokens.len() < len {
                let t = 1 + rng.below(TOY_TONES_HZ.len());
                if tokens.last() != Some(&t) {
                    tokens.push(t);
                }
            }
            let freqs: Vec<f64> = tokens.iter().map(|t| TOY_TONES_HZ[t - 1]).collect();
            Ok(Utterance { audio: tone_sequence(&freqs, duration_s, sample_rate)?, labels: LabelSeq::new(tokens)? })
        })
        .collect()
}
