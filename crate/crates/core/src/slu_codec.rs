//! Semantic frames, their linearized target strings, and evaluation metrics.
//!
//! A frame linearizes as `intent1+intent2 & type value words & type value`.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tokenizer::normalize;

pub const FIELD_SEP: &str = " & ";
pub const INTENT_JOINER: char = '+';

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Slot {
    pub slot_type: String,
    pub value: String,
}

impl Slot {
    pub fn new(slot_type: impl Into<String>, value: impl Into<String>) -> Self {
        Slot {
            slot_type: slot_type.into(),
            value: value.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SemanticFrame {
    pub intents: Vec<String>,
    pub slots: Vec<Slot>,
}

impl SemanticFrame {
    pub fn new(intents: Vec<String>, slots: Vec<Slot>) -> Self {
        SemanticFrame { intents, slots }
    }

    pub fn intent_set(&self) -> BTreeSet<&str> {
        self.intents.iter().map(String::as_str).collect()
    }
}

/// Closed label inventories used when parsing model output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    pub intents: BTreeSet<String>,
    pub slot_types: BTreeSet<String>,
    /// Accept any label.
    pub open: bool,
}

impl LabelSet {
    pub fn new<I, S, J, T>(intents: I, slot_types: J) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
        J: IntoIterator<Item = T>,
        T: Into<String>,
    {
        LabelSet {
            intents: intents.into_iter().map(Into::into).collect(),
            slot_types: slot_types.into_iter().map(Into::into).collect(),
            open: false,
        }
    }

    pub fn open() -> Self {
        LabelSet {
            open: true,
            ..Default::default()
        }
    }

    /// Labels appearing in `frames`.
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a SemanticFrame>) -> Self {
        let mut set = LabelSet::default();
        for f in frames {
            set.intents.extend(f.intents.iter().cloned());
            set.slot_types.extend(f.slots.iter().map(|s| s.slot_type.clone()));
        }
        set
    }

    fn has_intent(&self, l: &str) -> bool {
        self.open || self.intents.contains(l)
    }

    fn has_slot_type(&self, l: &str) -> bool {
        self.open || self.slot_types.contains(l)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Anomaly {
    NoIntent,
    UnknownIntent(String),
    UnknownSlotType(String),
    EmptySlotValue(String),
}

pub fn linearize(frame: &SemanticFrame) -> String {
    let mut s = frame.intents.join(&INTENT_JOINER.to_string());
    for slot in &frame.slots {
        s.push_str(FIELD_SEP);
        s.push_str(&slot.slot_type);
        s.push(' ');
        s.push_str(&slot.value);
    }
    s
}

/// Tolerant inverse of [`linearize`]. Unknown labels and empty values are
/// dropped and reported; nothing is rejected.
pub fn parse(text: &str, labels: &LabelSet) -> (SemanticFrame, Vec<Anomaly>) {
    let text = normalize(text);
    let mut anomalies = Vec::new();
    let mut frame = SemanticFrame::default();
    let mut fields = text.split('&').map(str::trim);

    let head = fields.next().unwrap_or("");
    for intent in head.split(INTENT_JOINER).map(str::trim).filter(|s| !s.is_empty()) {
        if labels.has_intent(intent) {
            frame.intents.push(intent.to_string());
        } else {
            anomalies.push(Anomaly::UnknownIntent(intent.to_string()));
        }
    }
    if frame.intents.is_empty() {
        anomalies.push(Anomaly::NoIntent);
    }
    for field in fields {
        let (ty, value) = match field.split_once(' ') {
            Some((t, v)) => (t, v.trim()),
            None => (field, ""),
        };
        if ty.is_empty() {
            continue;
        }
        if !labels.has_slot_type(ty) {
            anomalies.push(Anomaly::UnknownSlotType(ty.to_string()));
        } else if value.is_empty() {
            anomalies.push(Anomaly::EmptySlotValue(ty.to_string()));
        } else {
            frame.slots.push(Slot::new(ty, value));
        }
    }
    (frame, anomalies)
}

fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level Levenshtein distance, unit costs.
pub fn word_edit_distance(reference: &[&str], hypothesis: &[&str]) -> usize {
    edit_distance(reference, hypothesis)
}

/// Word error rate of one pair: edits / reference length.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("word error rate needs a non-empty reference"));
    }
    Ok(word_edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words, after normalization.
pub fn corpus_wer(pairs: &[(String, String)]) -> Result<(f64, usize, usize)> {
    let mut edits = 0;
    let mut words = 0;
    for (r, h) in pairs {
        let r = normalize(r);
        let h = normalize(h);
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        if rw.is_empty() {
            return Err(Error::invalid("empty reference transcript"));
        }
        edits += word_edit_distance(&rw, &hw);
        words += rw.len();
    }
    if words == 0 {
        return Err(Error::invalid("no reference transcripts"));
    }
    Ok((edits as f64 / words as f64, edits, words))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub wer: Option<f64>,
    pub wer_edits: Option<usize>,
    pub wer_ref_words: Option<usize>,
    pub intent_acc: f64,
    pub intent_correct: usize,
    pub slot_precision: Option<f64>,
    pub slot_recall: Option<f64>,
    pub slot_f1: Option<f64>,
    pub ref_slots: usize,
    pub hyp_slots: usize,
    pub matched_slots: usize,
}

fn multiset_matches(reference: &[Slot], hypothesis: &[Slot]) -> usize {
    let mut counts: HashMap<(String, String), usize> = HashMap::new();
    for s in reference {
        *counts
            .entry((s.slot_type.clone(), normalize(&s.value)))
            .or_default() += 1;
    }
    let mut matched = 0;
    for s in hypothesis {
        if let Some(c) = counts.get_mut(&(s.slot_type.clone(), normalize(&s.value))) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    matched
}

/// Intent accuracy (exact intent-set match) and micro-averaged slot
/// precision/recall/F1 over multiset (type, value) matches. When the
/// references carry no slots at all, slot metrics are absent.
pub fn score(refs: &[SemanticFrame], hyps: &[SemanticFrame]) -> Result<EvalReport> {
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::invalid("nothing to score"));
    }
    let mut intent_correct = 0;
    let (mut ref_slots, mut hyp_slots, mut matched) = (0, 0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        if !r.intents.is_empty() && r.intent_set() == h.intent_set() {
            intent_correct += 1;
        }
        ref_slots += r.slots.len();
        hyp_slots += h.slots.len();
        matched += multiset_matches(&r.slots, &h.slots);
    }
    let (p, rc, f1) = if ref_slots == 0 {
        (None, None, None)
    } else {
        let p = if hyp_slots == 0 {
            0.0
        } else {
            matched as f64 / hyp_slots as f64
        };
        let rc = matched as f64 / ref_slots as f64;
        let f1 = if matched == 0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        (Some(p), Some(rc), Some(f1))
    };
    Ok(EvalReport {
        utterances: refs.len(),
        wer: None,
        wer_edits: None,
        wer_ref_words: None,
        intent_acc: intent_correct as f64 / refs.len() as f64,
        intent_correct,
        slot_precision: p,
        slot_recall: rc,
        slot_f1: f1,
        ref_slots,
        hyp_slots,
        matched_slots: matched,
    })
}

impl EvalReport {
    pub fn with_wer(mut self, wer: f64, edits: usize, words: usize) -> Self {
        self.wer = Some(wer);
        self.wer_edits = Some(edits);
        self.wer_ref_words = Some(words);
        self
    }

    /// `metric<TAB>value` lines; absent metrics are written as `absent`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        s.push_str(&format!("utterances\t{}\n", self.utterances));
        s.push_str(&format!("wer\t{}\n", opt(self.wer)));
        s.push_str(&format!("intent_acc\t{:.6}\n", self.intent_acc));
        s.push_str(&format!("slot_precision\t{}\n", opt(self.slot_precision)));
        s.push_str(&format!("slot_recall\t{}\n", opt(self.slot_recall)));
        s.push_str(&format!("slot_f1\t{}\n", opt(self.slot_f1)));
        s.push_str(&format!("ref_slots\t{}\n", self.ref_slots));
        s.push_str(&format!("hyp_slots\t{}\n", self.hyp_slots));
        s.push_str(&format!("matched_slots\t{}\n", self.matched_slots));
        s
    }

    /// Single-line JSON record.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atis_frame() -> SemanticFrame {
        SemanticFrame::new(
            vec!["flight_info".into()],
            vec![
                Slot::new("from_city", "pittsburgh"),
                Slot::new("to_city", "baltimore"),
                Slot::new("depart_date", "thursday"),
                Slot::new("depart_time", "morning"),
            ],
        )
    }

    #[test]
    fn linearize_examples() {
        assert_eq!(
            linearize(&atis_frame()),
            "flight_info & from_city pittsburgh & to_city baltimore & depart_date thursday & depart_time morning"
        );
        assert_eq!(linearize(&SemanticFrame::new(vec!["i".into()], vec![])), "i");
        let multi = SemanticFrame::new(vec!["a".into(), "b".into()], vec![Slot::new("t", "v")]);
        assert_eq!(linearize(&multi), "a+b & t v");
    }

    #[test]
    fn parse_round_trip_and_tolerance() {
        let labels = LabelSet::new(
            ["flight_info"],
            ["from_city", "to_city", "depart_date", "depart_time"],
        );
        let f = atis_frame();
        let (back, anomalies) = parse(&linearize(&f), &labels);
        assert_eq!(back, f);
        assert!(anomalies.is_empty());

        let (partial, anomalies) = parse("flight_info & from_city", &labels);
        assert_eq!(partial.intents, vec!["flight_info".to_string()]);
        assert!(partial.slots.is_empty());
        assert_eq!(anomalies, vec![Anomaly::EmptySlotValue("from_city".into())]);

        let (empty, anomalies) = parse("", &labels);
        assert!(empty.intents.is_empty());
        assert_eq!(anomalies, vec![Anomaly::NoIntent]);

        let (unk, anomalies) = parse("bogus & airline delta", &labels);
        assert!(unk.intents.is_empty() && unk.slots.is_empty());
        assert_eq!(anomalies.len(), 3);
    }

    #[test]
    fn wer_examples() {
        let r = ["turn", "on", "the", "lights"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_eq!(wer(&r, &["turn", "off", "the", "lights"]).unwrap(), 0.25);
        assert_eq!(wer(&r, &[]).unwrap(), 1.0);
        assert_eq!(wer(&["a"], &["b", "c", "d"]).unwrap(), 3.0);
        assert!(wer(&[], &["a"]).is_err());
    }

    #[test]
    fn score_examples() {
        let f = atis_frame();
        let perfect = score(std::slice::from_ref(&f), std::slice::from_ref(&f)).unwrap();
        assert_eq!(perfect.intent_acc, 1.0);
        assert_eq!(perfect.slot_f1, Some(1.0));

        let r = SemanticFrame::new(vec!["x".into()], vec![Slot::new("a", "1"), Slot::new("b", "2")]);
        let h = SemanticFrame::new(vec!["x".into()], vec![Slot::new("a", "1")]);
        let rep = score(&[r], &[h]).unwrap();
        assert_eq!(rep.slot_precision, Some(1.0));
        assert_eq!(rep.slot_recall, Some(0.5));
        assert!((rep.slot_f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);

        assert!(score(std::slice::from_ref(&f), &[]).is_err());
    }

    #[test]
    fn intent_only_corpus_has_absent_slot_metrics() {
        let a = SemanticFrame::new(vec!["activate_lights_kitchen".into()], vec![]);
        let b = SemanticFrame::new(vec!["deactivate_music_none".into()], vec![]);
        let rep = score(&[a.clone(), a.clone()], &[a, b]).unwrap();
        assert_eq!(rep.intent_acc, 0.5);
        assert_eq!(rep.slot_f1, None);
        assert!(rep.to_tsv().contains("slot_f1\tabsent"));
    }

    #[test]
    fn multiset_matching_counts_repeats_once_each() {
        let r = SemanticFrame::new(vec!["i".into()], vec![Slot::new("t", "v"), Slot::new("t", "v")]);
        let h = SemanticFrame::new(vec!["i".into()], vec![Slot::new("t", "v"); 3]);
        let rep = score(&[r], &[h]).unwrap();
        assert_eq!(rep.matched_slots, 2);
        assert_eq!(rep.hyp_slots, 3);
    }

    #[test]
    fn report_json_is_one_line() {
        let f = atis_frame();
        let rep = score(std::slice::from_ref(&f), std::slice::from_ref(&f)).unwrap().with_wer(0.0, 0, 4);
        let j = rep.to_json();
        assert!(!j.contains('\n'));
        assert!(j.contains("\"intent_acc\":1.0"));
    }
}
