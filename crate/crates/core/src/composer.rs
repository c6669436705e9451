//! Joint input layout: `[BOS] speech… [SEP] text… [EOS] [PAD]…`.
//!
//! Speech frames are projected to the model width; every position then gets
//! a position embedding (absolute index over the joint sequence) and a
//! segment embedding. `[BOS]` and `[SEP]` belong to the speech segment,
//! `[EOS]` to the text segment. Padding is always trailing.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, Tensor, Var};
use crate::tokenizer::{SpecialIds, TokenId};

/// Placeholder id stored at speech-frame positions.
pub const SPEECH_SLOT: TokenId = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Speech = 0,
    Text = 1,
}

/// Frame matrix `[S × d_speech]` for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechEmbeddingSequence {
    pub frames: Tensor,
    pub source_id: String,
}

impl SpeechEmbeddingSequence {
    pub fn new(frames: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let (s, _) = frames.dims2()?;
        if s == 0 {
            return Err(Error::invalid("speech sequence with no frames"));
        }
        if frames.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("speech frames must be finite"));
        }
        Ok(SpeechEmbeddingSequence {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComposerConfig {
    pub max_frames: usize,
    pub max_text: usize,
}

impl ComposerConfig {
    /// Total joint length after padding.
    pub fn joint_len(&self) -> usize {
        self.max_frames + self.max_text + 3
    }
}

/// Parameter handles the embedding layer needs.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub speech_weight: ParamId,
    pub speech_bias: ParamId,
}

/// Layout of one composed utterance. Embeddings are materialized on a
/// [`Graph`] by [`embed`].
#[derive(Clone, Debug, PartialEq)]
pub struct JointInput {
    pub token_ids: Vec<TokenId>,
    pub segment_ids: Vec<Segment>,
    pub is_pad: Vec<bool>,
    /// `[BOS]`, frames and `[SEP]`.
    pub speech_span: Range<usize>,
    /// Text tokens and `[EOS]`.
    pub text_span: Range<usize>,
    pub frames: Tensor,
}

impl JointInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading non-pad positions.
    pub fn active_len(&self) -> usize {
        self.text_span.end
    }

    pub fn frame_range(&self) -> Range<usize> {
        self.speech_span.start + 1..self.speech_span.end - 1
    }

    /// Positions of the text tokens, excluding `[EOS]`.
    pub fn text_token_range(&self) -> Range<usize> {
        self.text_span.start..self.text_span.end - 1
    }

    pub fn sep_position(&self) -> usize {
        self.speech_span.end - 1
    }

    pub fn eos_position(&self) -> usize {
        self.text_span.end - 1
    }
}

/// Lays out speech and text, trimming each to its budget and padding the
/// tail to the configured joint length.
pub fn compose(
    speech: &SpeechEmbeddingSequence,
    text_ids: &[TokenId],
    cfg: &ComposerConfig,
) -> Result<JointInput> {
    let sp = SpecialIds::FIXED;
    if speech.num_frames() == 0 {
        return Err(Error::invalid("empty speech input"));
    }
    if let Some(&bad) = text_ids
        .iter()
        .find(|&&t| t == sp.pad || t == sp.bos || t == sp.sep || t == sp.eos)
    {
        return Err(Error::invalid(format!("layout token {bad} inside text")));
    }
    let s = speech.num_frames().min(cfg.max_frames);
    let t = text_ids.len().min(cfg.max_text);
    let total = cfg.joint_len();

    let mut token_ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    token_ids.push(sp.bos);
    token_ids.extend(std::iter::repeat_n(SPEECH_SLOT, s));
    token_ids.push(sp.sep);
    segment_ids.extend(std::iter::repeat_n(Segment::Speech, s + 2));
    token_ids.extend_from_slice(&text_ids[..t]);
    token_ids.push(sp.eos);
    segment_ids.extend(std::iter::repeat_n(Segment::Text, t + 1));
    let active = token_ids.len();
    token_ids.resize(total, sp.pad);
    segment_ids.resize(total, Segment::Text);
    let mut is_pad = vec![false; active];
    is_pad.resize(total, true);

    let d = speech.dim();
    let frames = Tensor::new(vec![s, d], speech.frames.data()[..s * d].to_vec())?;
    Ok(JointInput {
        token_ids,
        segment_ids,
        is_pad,
        speech_span: 0..s + 2,
        text_span: s + 2..active,
        frames,
    })
}

/// Affine per-frame projection `frames · W + b`.
pub fn project_speech(g: &mut Graph, frames: Var, weight: Var, bias: Var) -> Result<Var> {
    let proj = g.matmul(frames, weight)?;
    g.add_row_bias(proj, bias)
}

/// Embeddings `[active_len × d_model]` for the non-pad positions.
pub fn embed(g: &mut Graph, input: &JointInput, ids: &EmbeddingIds) -> Result<Var> {
    let n = input.active_len();
    let tok = g.param(ids.token);
    let pos = g.param(ids.position);
    let seg = g.param(ids.segment);
    let w = g.param(ids.speech_weight);
    let b = g.param(ids.speech_bias);

    let frames = g.constant(input.frames.clone());
    let speech = project_speech(g, frames, w, b)?;
    let sp = SpecialIds::FIXED;
    let bos = g.embedding(tok, &[sp.bos])?;
    let tail_ids = &input.token_ids[input.sep_position()..n];
    let tail = g.embedding(tok, tail_ids)?;
    let base = g.concat_rows(&[bos, speech, tail])?;

    let positions: Vec<usize> = (0..n).collect();
    let p = g.embedding(pos, &positions)?;
    let segs: Vec<usize> = input.segment_ids[..n].iter().map(|&s| s as usize).collect();
    let s = g.embedding(seg, &segs)?;
    let x = g.add(base, p)?;
    g.add(x, s)
}
