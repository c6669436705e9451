use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::composer::SpeechEmbeddingSequence;
use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::rng;

/// Deterministic stand-in for a speech encoder: every character becomes a
/// run of noisy copies of a fixed unit vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoEncoderConfig {
    pub d_speech: usize,
    /// Inclusive range of frames per character.
    pub frames_per_char: (usize, usize),
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for PseudoEncoderConfig {
    fn default() -> Self {
        PseudoEncoderConfig {
            d_speech: 32,
            frames_per_char: (2, 4),
            jitter_std: 0.05,
            seed: 0,
        }
    }
}

impl PseudoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_speech < 8 {
            return Err(Error::Config(format!("d_speech {} below 8", self.d_speech)));
        }
        let (lo, hi) = self.frames_per_char;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad frames_per_char range {lo}..={hi}")));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::Config("jitter_std must be non-negative".into()));
        }
        Ok(())
    }

    /// The fixed unit-norm vector of one character.
    pub fn char_vector(&self, c: char) -> Vec<f64> {
        let mut r = rng::stream(self.seed, &[0xc4a2, c as u64]);
        let mut v: Vec<f64> = (0..self.d_speech).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Frames for `transcript` plus the per-character durations used.
pub fn pseudo_encode_with_durations(
    transcript: &str,
    cfg: &PseudoEncoderConfig,
    utterance_seed: u64,
) -> Result<(SpeechEmbeddingSequence, Vec<usize>)> {
    cfg.validate()?;
    if transcript.is_empty() {
        return Err(Error::invalid("cannot encode an empty transcript"));
    }
    let mut r = rng::stream(utterance_seed, &[0xd0a7]);
    let (lo, hi) = cfg.frames_per_char;
    let mut cache: HashMap<char, Vec<f64>> = HashMap::new();
    let mut data = Vec::new();
    let mut durations = Vec::with_capacity(transcript.len());
    for c in transcript.chars() {
        let v = cache.entry(c).or_insert_with(|| cfg.char_vector(c));
        let n = r.random_range(lo..=hi);
        durations.push(n);
        for _ in 0..n {
            data.extend_from_slice(v);
        }
    }
    if cfg.jitter_std > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_std).map_err(|e| Error::Config(e.to_string()))?;
        for x in data.iter_mut() {
            *x += noise.sample(&mut r);
        }
    }
    let s = durations.iter().sum();
    let frames = Tensor::new(vec![s, cfg.d_speech], data)?;
    Ok((SpeechEmbeddingSequence::new(frames, "")?, durations))
}

pub fn pseudo_encode(
    transcript: &str,
    cfg: &PseudoEncoderConfig,
    utterance_seed: u64,
) -> Result<SpeechEmbeddingSequence> {
    pseudo_encode_with_durations(transcript, cfg, utterance_seed).map(|(s, _)| s)
}
