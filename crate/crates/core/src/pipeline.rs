//! Glue between manifests on disk and the training / decoding / scoring
//! stages.

use std::path::Path;

use crate::composer::SpeechEmbeddingSequence;
use crate::config::RunConfig;
use crate::corpus::{generate_corpus, read_embeddings, resolve, CorpusSummary, Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::generator::{decode_utterance, format_nbest, DecodeConfig, Decoded, OutputKind};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, SlpModel};
use crate::slu_codec::{corpus_wer, parse, score, EvalReport, LabelSet, SemanticFrame, INTENT_JOINER};
use crate::tokenizer::{normalize, Vocabulary, SPECIALS};
use crate::trainer::{run_regime, Regime, RegimeOutcome, TrainingExample};

/// A manifest record with its embeddings loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub speech: SpeechEmbeddingSequence,
}

pub fn load_utterances(manifest_path: &Path, exec: Execution) -> Result<Vec<Utterance>> {
    let m = Manifest::load(manifest_path, true)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    exec.try_map_indexed(m.records.len(), |i| {
        let r = &m.records[i];
        let mut speech = read_embeddings(&resolve(base, &r.embedding))?;
        speech.source_id = r.id.clone();
        Ok(Utterance {
            record: r.clone(),
            speech,
        })
    })
}

/// Labels named in linearized frames: intents and slot types.
pub fn labels_of(frames: &[&str]) -> LabelSet {
    let parsed: Vec<SemanticFrame> = frames.iter().map(|f| parse(f, &LabelSet::open()).0).collect();
    LabelSet::from_frames(&parsed)
}

/// Trains a subword vocabulary over transcripts and linearized frames, then
/// adds every label and the frame delimiters as atomic tokens.
pub fn build_vocabulary(records: &[ManifestRecord], target_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::Data("no records to build a vocabulary from".into()));
    }
    let corpus = records
        .iter()
        .flat_map(|r| [r.transcript.as_str(), r.frame.as_str()]);
    let mut vocab = Vocabulary::train(corpus, target_size, min_freq)?;
    let frames: Vec<&str> = records.iter().map(|r| r.frame.as_str()).collect();
    let labels = labels_of(&frames);
    for l in labels.intents.iter().chain(&labels.slot_types) {
        vocab.inject_atomic(l)?;
    }
    vocab.inject_atomic("&")?;
    vocab.inject_atomic(&INTENT_JOINER.to_string())?;
    Ok(vocab)
}

/// Training examples for `regime`. Utterances whose target tokenizes to
/// nothing are rejected.
pub fn training_examples(utts: &[Utterance], vocab: &Vocabulary, regime: Regime) -> Result<Vec<TrainingExample>> {
    utts.iter()
        .map(|u| {
            let t = vocab.tokenize(&u.record.transcript);
            let s = vocab.tokenize(&u.record.frame);
            TrainingExample::new(u.speech.clone(), regime.target(&t, &s))
        })
        .collect()
}

/// Longest target length in tokens under `regime`, for sizing `max_text`.
pub fn max_target_len(records: &[ManifestRecord], vocab: &Vocabulary, regime: Regime) -> usize {
    records
        .iter()
        .map(|r| regime.target(&vocab.tokenize(&r.transcript), &vocab.tokenize(&r.frame)).len())
        .max()
        .unwrap_or(0)
}

/// Decodes every utterance and returns a hypothesis manifest with the same
/// ids and embedding paths. Fields the output kind does not produce are
/// left empty.
pub fn decode_all(
    utts: &[Utterance],
    vocab: &Vocabulary,
    model: &SlpModel,
    second: Option<&SlpModel>,
    cfg: &DecodeConfig,
    exec: Execution,
) -> Result<(Manifest, Vec<Decoded>)> {
    let decoded = exec.try_map_indexed(utts.len(), |i| {
        decode_utterance(&utts[i].speech, model, second, cfg)
    })?;
    let detok = |ids: &Option<Vec<usize>>| -> Result<String> {
        match ids {
            Some(ids) => vocab.detokenize(ids),
            None => Ok(String::new()),
        }
    };
    let mut m = Manifest {
        comments: vec![format!(
            "slp hypotheses output={} mode={:?} beam={} max_len={}",
            cfg.output, cfg.mode, cfg.beam_size, cfg.max_len
        )],
        records: Vec::with_capacity(utts.len()),
    };
    for (u, d) in utts.iter().zip(&decoded) {
        m.records.push(ManifestRecord {
            id: u.record.id.clone(),
            embedding: u.record.embedding.clone(),
            transcript: detok(&d.transcript)?,
            frame: detok(&d.slu)?,
        });
    }
    Ok((m, decoded))
}

/// Scores hypotheses against references matched by utterance id. WER is
/// computed when any hypothesis carries a transcript.
pub fn evaluate(refs: &Manifest, hyps: &Manifest) -> Result<EvalReport> {
    if refs.len() != hyps.len() {
        return Err(Error::Data(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let by_id: std::collections::HashMap<&str, &ManifestRecord> =
        hyps.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for r in &refs.records {
        let h = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::Data(format!("no hypothesis for {}", r.id)))?;
        pairs.push((r, *h));
    }
    let ref_frames: Vec<&str> = refs.records.iter().map(|r| r.frame.as_str()).collect();
    let labels = labels_of(&ref_frames);
    let rf: Vec<SemanticFrame> = pairs.iter().map(|(r, _)| parse(&r.frame, &labels).0).collect();
    let hf: Vec<SemanticFrame> = pairs.iter().map(|(_, h)| parse(&h.frame, &labels).0).collect();
    let mut report = score(&rf, &hf)?;
    if pairs.iter().any(|(_, h)| !h.transcript.trim().is_empty()) {
        let tp: Vec<(String, String)> = pairs
            .iter()
            .map(|(r, h)| (r.transcript.clone(), h.transcript.clone()))
            .collect();
        let (w, e, n) = corpus_wer(&tp)?;
        report = report.with_wer(w, e, n);
    }
    Ok(report)
}

/// Decoding config whose output kind matches a training regime.
pub fn output_for(regime: Regime) -> OutputKind {
    match regime {
        Regime::PretrainAsr => OutputKind::Transcript,
        Regime::FinetuneSlu | Regime::OnestepSlu => OutputKind::Slu,
        Regime::OnestepAsrSlu => OutputKind::AsrSlu,
    }
}

/// Smallest vocabulary size the BPE trainer accepts for these records.
pub fn min_vocab_size(records: &[ManifestRecord]) -> usize {
    let mut syms = std::collections::BTreeSet::new();
    for r in records {
        for w in normalize(&r.transcript).split(' ').chain(normalize(&r.frame).split(' ')) {
            for (i, c) in w.chars().enumerate() {
                syms.insert((i > 0, c));
            }
        }
    }
    SPECIALS.len() + syms.len() + 1
}

/// Writes the corpus described by `cfg` under `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, exec: Execution) -> Result<CorpusSummary> {
    generate_corpus(&cfg.grammar()?, &cfg.corpus_request()?, out, exec)
}

/// Builds a vocabulary from a training manifest and saves it to `out`.
pub fn cmd_build_vocab(cfg: &RunConfig, train_manifest: &Path, out: &Path) -> Result<Vocabulary> {
    let m = Manifest::load(train_manifest, false)?;
    let size: usize = cfg.parse("vocab.size")?;
    let vocab = build_vocabulary(&m.records, size, cfg.parse("vocab.min_freq")?)?;
    vocab.save(out)?;
    Ok(vocab)
}

/// Frame budget `auto` resolves to: the longest training utterance plus a
/// quarter, so slightly longer test utterances are not cut.
pub fn auto_max_frames(utts: &[Utterance]) -> usize {
    let m = utts.iter().map(|u| u.speech.num_frames()).max().unwrap_or(1);
    m + m.div_ceil(4)
}

/// Text budget `auto` resolves to: the longest target under any regime plus
/// room for two more tokens.
pub fn auto_max_text(records: &[ManifestRecord], vocab: &Vocabulary) -> usize {
    max_target_len(records, vocab, Regime::OnestepAsrSlu) + 2
}

/// Checkpoint header: the run configuration with the model keys replaced
/// by the resolved model shape.
pub fn checkpoint_config(cfg: &RunConfig, model: &ModelConfig) -> Vec<(String, String)> {
    let model_pairs = model.to_pairs();
    let mut out: Vec<(String, String)> = cfg
        .pairs()
        .into_iter()
        .filter(|(k, _)| !k.starts_with("model."))
        .collect();
    out.extend(model_pairs);
    out.sort();
    out
}

pub struct TrainRequest<'a> {
    pub train_manifest: &'a Path,
    pub vocab: &'a Path,
    pub init: Option<&'a Path>,
    pub out: &'a Path,
    /// Loss log destination, `epoch <n> step <k> loss <f>` per line.
    pub log: Option<&'a Path>,
}

/// Trains under `train.regime` and writes the checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    req: &TrainRequest,
    exec: Execution,
    progress: &mut dyn FnMut(&str),
) -> Result<RegimeOutcome> {
    let mut tc = cfg.train_config()?;
    tc.execution = exec;
    let policy = cfg.masking()?;
    let vocab = Vocabulary::load(req.vocab)?;
    let utts = load_utterances(req.train_manifest, exec)?;
    let records: Vec<ManifestRecord> = utts.iter().map(|u| u.record.clone()).collect();
    let init = match req.init {
        Some(p) => {
            let m = load_checkpoint(p)?.into_model()?;
            if m.config.vocab_size != vocab.len() {
                return Err(Error::Data(format!(
                    "checkpoint vocabulary {} differs from vocabulary file {}",
                    m.config.vocab_size,
                    vocab.len()
                )));
            }
            Some(m)
        }
        None => None,
    };
    let examples = training_examples(&utts, &vocab, tc.regime)?;
    let fresh = || {
        let mc = cfg.model_config(vocab.len(), auto_max_frames(&utts), auto_max_text(&records, &vocab))?;
        SlpModel::init(mc, tc.seed)
    };
    let mut lines = String::new();
    let mut log = |l: &str| {
        if !l.starts_with('#') {
            lines.push_str(l);
            lines.push('\n');
        }
        progress(l);
    };
    let outcome = run_regime(&examples, &tc, &policy, init, fresh, &mut log)?;
    save_checkpoint(req.out, &checkpoint_config(cfg, &outcome.model.config), &outcome.model.params)?;
    if let Some(p) = req.log {
        std::fs::write(p, lines).map_err(|e| Error::io(p, e))?;
    }
    Ok(outcome)
}

pub struct GenerateRequest<'a> {
    pub checkpoint: &'a Path,
    /// Fine-tuned checkpoint for two-pass output.
    pub second: Option<&'a Path>,
    pub vocab: &'a Path,
    pub manifest: &'a Path,
    pub out: &'a Path,
    pub nbest: Option<&'a Path>,
}

/// Decodes a manifest and writes the hypothesis manifest (and optionally
/// the n-best lists).
pub fn cmd_generate(cfg: &RunConfig, req: &GenerateRequest, exec: Execution) -> Result<Manifest> {
    let vocab = Vocabulary::load(req.vocab)?;
    let model = load_checkpoint(req.checkpoint)?.into_model()?;
    let second = req
        .second
        .map(|p| load_checkpoint(p).and_then(|c| c.into_model()))
        .transpose()?;
    let dc = cfg.decode_config(model.config.max_text)?;
    if dc.output == OutputKind::TwoPass && second.is_none() {
        return Err(Error::Config("two-pass output needs a second (fine-tuned) checkpoint".into()));
    }
    for m in std::iter::once(&model).chain(second.as_ref()) {
        if m.config.vocab_size != vocab.len() {
            return Err(Error::Data("checkpoint and vocabulary sizes differ".into()));
        }
    }
    let utts = load_utterances(req.manifest, exec)?;
    let (mut hyp, decoded) = decode_all(&utts, &vocab, &model, second.as_ref(), &dc, exec)?;
    hyp.comments.extend(cfg.pairs().into_iter().map(|(k, v)| format!("config {k}={v}")));
    hyp.save(req.out)?;
    if let Some(p) = req.nbest {
        let mut s = String::new();
        for (u, d) in utts.iter().zip(&decoded) {
            for (k, g) in d.passes.iter().enumerate() {
                s.push_str(&format!("# {} pass {}\n", u.record.id, k + 1));
                s.push_str(&format_nbest(g, &vocab)?);
            }
        }
        std::fs::write(p, s).map_err(|e| Error::io(p, e))?;
    }
    Ok(hyp)
}

pub fn cmd_evaluate(refs: &Path, hyps: &Path) -> Result<EvalReport> {
    evaluate(&Manifest::load(refs, false)?, &Manifest::load(hyps, false)?)
}

/// Report text: `# config key=value` header lines, then metric lines.
pub fn report_text(cfg: &RunConfig, report: &EvalReport) -> String {
    let mut s: String = cfg
        .pairs()
        .into_iter()
        .map(|(k, v)| format!("# config {k}={v}\n"))
        .collect();
    s.push_str(&report.to_tsv());
    s
}

/// Single-line JSON with the configuration and the metrics.
pub fn report_json(cfg: &RunConfig, report: &EvalReport) -> String {
    let config: serde_json::Map<String, serde_json::Value> = cfg
        .pairs()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    serde_json::json!({ "config": config, "report": report }).to_string()
}
