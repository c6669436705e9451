use std::ops::Range;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

/// Additive attention mask: `0` where attention is allowed, `-inf` where it
/// is blocked.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub m: Tensor,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.m.at(row, col) == 0.0
    }

    /// Leading `n × n` block.
    pub fn leading(&self, n: usize) -> Tensor {
        self.block(0..n, n)
    }

    /// Rows `rows`, leading `cols` columns.
    pub fn block(&self, rows: Range<usize>, cols: usize) -> Tensor {
        let l = self.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows.clone() {
            data.extend_from_slice(&self.m.data()[r * l..r * l + cols]);
        }
        Tensor::from_parts(vec![rows.len(), cols], data)
    }
}

/// Prefix-bidirectional / causal mask.
///
/// Speech-part rows see every non-pad speech-part column. Text-part rows see
/// the whole speech part plus text columns at or left of themselves. Pad
/// columns are blocked everywhere; pad rows are fully blocked and must not be
/// fed to a softmax.
pub fn build_mask(
    speech_span: Range<usize>,
    text_span: Range<usize>,
    is_pad: &[bool],
) -> Result<AttentionMask> {
    let l = is_pad.len();
    let overlap = speech_span.start.max(text_span.start) < speech_span.end.min(text_span.end);
    if overlap {
        return Err(Error::invalid(format!(
            "speech span {speech_span:?} overlaps text span {text_span:?}"
        )));
    }
    if speech_span.end > l || text_span.end > l {
        return Err(Error::invalid(format!(
            "spans {speech_span:?} / {text_span:?} exceed length {l}"
        )));
    }
    if speech_span.start > text_span.start {
        return Err(Error::invalid("text span precedes speech span"));
    }
    let mut m = Tensor::full(&[l, l], f64::NEG_INFINITY);
    for r in 0..l {
        if is_pad[r] {
            continue;
        }
        let in_speech = speech_span.contains(&r);
        let in_text = text_span.contains(&r);
        for (c, &pad) in is_pad.iter().enumerate() {
            if pad {
                continue;
            }
            let allowed = if speech_span.contains(&c) {
                in_speech || in_text
            } else if text_span.contains(&c) {
                in_text && c <= r
            } else {
                false
            };
            if allowed {
                m.set(r, c, 0.0);
            }
        }
    }
    Ok(AttentionMask { m })
}
