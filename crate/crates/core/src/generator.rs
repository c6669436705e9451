//! Mask-append decoding: the text so far is followed by `[MASK]`, the model
//! fills it in, and the filled token is appended until `[EOS]`.

use std::cell::OnceCell;
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::composer::{compose, SpeechEmbeddingSequence};
use crate::error::{Error, Result};
use crate::model::{SlpModel, SpeechCache};
use crate::numkit::kernels;
use crate::tokenizer::{SpecialIds, TokenId, Vocabulary, SPECIALS};

/// Source of next-token logits for a text prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Longest prefix plus one the scorer accepts.
    fn max_text(&self) -> usize;
    /// Raw logits for the token following `prefix`.
    fn step_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// A model conditioned on one utterance. The speech part is run once, on
/// the first step, and reused by every later step.
pub struct ModelScorer<'a> {
    pub model: &'a SlpModel,
    pub speech: &'a SpeechEmbeddingSequence,
    cache: OnceCell<SpeechCache>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SlpModel, speech: &'a SpeechEmbeddingSequence) -> Self {
        ModelScorer {
            model,
            speech,
            cache: OnceCell::new(),
        }
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_text(&self) -> usize {
        self.model.config.max_text
    }

    /// Composes `[BOS] speech [SEP] prefix [MASK]` and reads the logits at
    /// the `[MASK]` position.
    fn step_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let cfg = self.model.config.composer();
        if prefix.len() + 1 > cfg.max_text {
            return Err(Error::Length {
                len: prefix.len() + 1,
                limit: cfg.max_text,
            });
        }
        let mut input = compose(self.speech, prefix, &cfg)?;
        let slot = input.eos_position();
        input.token_ids[slot] = SpecialIds::FIXED.mask;
        if self.cache.get().is_none() {
            let _ = self.cache.set(self.model.speech_cache(&input)?);
        }
        let cache = self.cache.get().expect("cache set above");
        self.model.logits_cached(&input, cache, slot)
    }
}

/// Whether decoding may emit `id`.
pub fn is_allowed(id: TokenId) -> bool {
    let sp = SpecialIds::FIXED;
    id >= SPECIALS.len() || id == sp.eos || id == sp.slu
}

/// Log-probabilities of the next token; banned specials get `-inf` before
/// normalization.
pub fn step_distribution(scorer: &dyn StepScorer, prefix: &[TokenId]) -> Result<Vec<f64>> {
    let mut z = scorer.step_logits(prefix)?;
    if z.len() != scorer.vocab_size() {
        return Err(Error::shape(format!(
            "scorer returned {} logits for vocabulary {}",
            z.len(),
            scorer.vocab_size()
        )));
    }
    for (i, x) in z.iter_mut().enumerate() {
        if !is_allowed(i) {
            *x = f64::NEG_INFINITY;
        }
    }
    let mut out = vec![0.0; z.len()];
    kernels::log_softmax_row(&z, &mut out).ok_or(Error::DegenerateRow { row: 0 })?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending in `[EOS]` when finished.
    pub token_ids: Vec<TokenId>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            token_ids: Vec::new(),
            logprob: 0.0,
            finished: false,
        }
    }

    fn extend(&self, tok: TokenId, lp: f64) -> Self {
        let mut token_ids = self.token_ids.clone();
        token_ids.push(tok);
        Hypothesis {
            token_ids,
            logprob: self.logprob + lp,
            finished: tok == SpecialIds::FIXED.eos,
        }
    }

    /// Output tokens without the trailing `[EOS]`.
    pub fn output(&self) -> &[TokenId] {
        if self.finished {
            &self.token_ids[..self.token_ids.len() - 1]
        } else {
            &self.token_ids
        }
    }
}

/// Higher log-probability first; ties broken by ascending token sequence.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Transcript,
    Slu,
    AsrSlu,
    TwoPass,
}

impl OutputKind {
    pub fn name(self) -> &'static str {
        match self {
            OutputKind::Transcript => "transcript",
            OutputKind::Slu => "slu",
            OutputKind::AsrSlu => "asr-slu",
            OutputKind::TwoPass => "two-pass",
        }
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transcript" => Ok(OutputKind::Transcript),
            "slu" => Ok(OutputKind::Slu),
            "asr-slu" => Ok(OutputKind::AsrSlu),
            "two-pass" => Ok(OutputKind::TwoPass),
            other => Err(Error::Config(format!("unknown output kind {other:?}"))),
        }
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(SearchMode::Greedy),
            "beam" => Ok(SearchMode::Beam),
            other => Err(Error::Config(format!("unknown search mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub mode: SearchMode,
    pub beam_size: usize,
    pub max_len: usize,
    pub output: OutputKind,
}

impl DecodeConfig {
    pub fn new(output: OutputKind, max_len: usize) -> Self {
        DecodeConfig {
            mode: SearchMode::Beam,
            beam_size: 4,
            max_len,
            output,
        }
    }

    pub fn validate(&self, max_text: usize) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 || self.max_len > max_text {
            return Err(Error::Config(format!(
                "max_len {} outside 1..={max_text}",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Best hypothesis plus the final beam in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
    /// Stopped by `max_len` rather than `[EOS]`.
    pub truncated: bool,
}

impl Generation {
    pub fn ids(&self) -> &[TokenId] {
        self.best.output()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until `[EOS]` or `max_len` tokens.
/// Ties go to the lowest id.
pub fn greedy_generate(scorer: &dyn StepScorer, max_len: usize) -> Result<Generation> {
    let mut h = Hypothesis::empty();
    while !h.finished && h.token_ids.len() < max_len {
        let lp = step_distribution(scorer, &h.token_ids)?;
        let t = argmax(&lp);
        h = h.extend(t, lp[t]);
    }
    Ok(Generation {
        truncated: !h.finished,
        nbest: vec![h.clone()],
        best: h,
    })
}

/// Beam search over [`step_distribution`]. Finished hypotheses stay in the
/// beam and compete on total log-probability with growing ones.
pub fn beam_generate(scorer: &dyn StepScorer, beam_size: usize, max_len: usize) -> Result<Generation> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis::empty()];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut cand = Vec::new();
        for h in &beam {
            if h.finished {
                cand.push(h.clone());
                continue;
            }
            let lp = step_distribution(scorer, &h.token_ids)?;
            for (t, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cand.push(h.extend(t, l));
                }
            }
        }
        cand.sort_by(rank_order);
        cand.truncate(beam_size);
        beam = cand;
    }
    beam.sort_by(rank_order);
    let best = beam[0].clone();
    Ok(Generation {
        truncated: !best.finished,
        best,
        nbest: beam,
    })
}

pub fn generate(scorer: &dyn StepScorer, cfg: &DecodeConfig) -> Result<Generation> {
    cfg.validate(scorer.max_text())?;
    match cfg.mode {
        SearchMode::Greedy => greedy_generate(scorer, cfg.max_len),
        SearchMode::Beam => beam_generate(scorer, cfg.beam_size, cfg.max_len),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitAnomaly {
    /// No `[SLU]` token: everything is taken as transcript.
    MissingBoundary,
    /// `[SLU]` came first: the transcript is empty.
    EmptyTranscript,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitOutput {
    pub transcript: Vec<TokenId>,
    pub slu: Vec<TokenId>,
    pub anomaly: Option<SplitAnomaly>,
}

/// Splits joint output at the first `[SLU]` token.
pub fn split_asr_slu(ids: &[TokenId]) -> SplitOutput {
    match ids.iter().position(|&t| t == SpecialIds::FIXED.slu) {
        None => SplitOutput {
            transcript: ids.to_vec(),
            slu: Vec::new(),
            anomaly: Some(SplitAnomaly::MissingBoundary),
        },
        Some(i) => SplitOutput {
            transcript: ids[..i].to_vec(),
            slu: ids[i + 1..].to_vec(),
            anomaly: (i == 0).then_some(SplitAnomaly::EmptyTranscript),
        },
    }
}

/// Decoded outputs for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub transcript: Option<Vec<TokenId>>,
    pub slu: Option<Vec<TokenId>>,
    /// Generations in pass order, for n-best output.
    pub passes: Vec<Generation>,
    pub anomalies: Vec<String>,
}

/// Transcript from `pretrained`, SLU string from `finetuned`.
pub fn two_pass_generate(
    speech: &SpeechEmbeddingSequence,
    pretrained: Option<&SlpModel>,
    finetuned: Option<&SlpModel>,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    let (p, f) = match (pretrained, finetuned) {
        (Some(p), Some(f)) => (p, f),
        _ => return Err(Error::Config("two-pass decoding needs both checkpoints".into())),
    };
    let asr = generate(&ModelScorer::new(p, speech), cfg)?;
    let slu = generate(&ModelScorer::new(f, speech), cfg)?;
    let mut anomalies = Vec::new();
    if asr.truncated {
        anomalies.push("transcript truncated".to_string());
    }
    if slu.truncated {
        anomalies.push("slu truncated".to_string());
    }
    Ok(Decoded {
        transcript: Some(asr.ids().to_vec()),
        slu: Some(slu.ids().to_vec()),
        passes: vec![asr, slu],
        anomalies,
    })
}

/// Decodes one utterance according to `cfg.output`. `second` is the
/// fine-tuned model for two-pass output and ignored otherwise.
pub fn decode_utterance(
    speech: &SpeechEmbeddingSequence,
    model: &SlpModel,
    second: Option<&SlpModel>,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    if cfg.output == OutputKind::TwoPass {
        return two_pass_generate(speech, Some(model), second, cfg);
    }
    let g = generate(&ModelScorer::new(model, speech), cfg)?;
    let mut anomalies = Vec::new();
    if g.truncated {
        anomalies.push("truncated".to_string());
    }
    let ids = g.ids().to_vec();
    let (transcript, slu) = match cfg.output {
        OutputKind::Transcript => (Some(ids), None),
        OutputKind::Slu => (None, Some(ids)),
        _ => {
            let s = split_asr_slu(&ids);
            if let Some(a) = s.anomaly {
                anomalies.push(format!("{a:?}"));
            }
            (Some(s.transcript), Some(s.slu))
        }
    };
    Ok(Decoded {
        transcript,
        slu,
        passes: vec![g],
        anomalies,
    })
}

/// `<rank>\t<logprob>\t<text>` lines, ranks from 1.
pub fn format_nbest(g: &Generation, vocab: &Vocabulary) -> Result<String> {
    let mut s = String::new();
    for (i, h) in g.nbest.iter().enumerate() {
        let text = vocab.detokenize(h.output())?;
        s.push_str(&format!("{}\t{:.6}\t{}\n", i + 1, h.logprob, text));
    }
    Ok(s)
}
