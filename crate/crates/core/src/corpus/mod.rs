//! Synthetic paired data: template grammars, a character-level
//! pseudo speech encoder, and the manifest / embedding-file formats.

mod encoder;
mod grammar;
mod io;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

pub use encoder::{pseudo_encode, pseudo_encode_with_durations, PseudoEncoderConfig};
pub use grammar::{Instance, Piece, Production, TemplateGrammar};
pub use io::{
    decode_embeddings, encode_embeddings, read_embeddings, resolve, write_embeddings, Manifest,
    ManifestRecord, SLPE_MAGIC, SLPE_VERSION,
};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng;
use crate::slu_codec::linearize;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Share of slot-value combinations reserved for dev/test when the grammar
/// asks for held-out combinations, in percent.
const HELD_OUT_PERCENT: u64 = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRequest {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub encoder: PseudoEncoderConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    /// Manifests in `SPLITS` order.
    pub manifests: Vec<Manifest>,
    /// Test transcripts that also occur in train.
    pub test_train_overlap: usize,
    pub frames_total: usize,
}

fn held_out(seed: u64, inst: &Instance) -> bool {
    rng::derive_seed(seed, &[0x4e1d, rng::hash_str(&inst.combination())]) % 100 < HELD_OUT_PERCENT
}

/// Draws the instances of every split. With held-out combinations, train
/// only uses combinations outside the reserved share and dev/test only
/// inside it.
pub fn sample_splits(
    grammar: &TemplateGrammar,
    counts: [usize; 3],
    seed: u64,
) -> Result<[Vec<Instance>; 3]> {
    grammar.validate()?;
    let mut out: [Vec<Instance>; 3] = Default::default();
    for (k, &n) in counts.iter().enumerate() {
        let mut r = rng::stream(seed, &[0x9e11, k as u64]);
        let budget = 1000 + 200 * n;
        let mut tries = 0;
        while out[k].len() < n {
            tries += 1;
            if tries > budget {
                return Err(Error::Data(format!(
                    "grammar {} too small: only {} of {n} {} utterances satisfy the split constraint",
                    grammar.name,
                    out[k].len(),
                    SPLITS[k]
                )));
            }
            let inst = grammar.sample(&mut r);
            if grammar.held_out_combinations && held_out(seed, &inst) != (k > 0) {
                continue;
            }
            out[k].push(inst);
        }
    }
    Ok(out)
}

/// Samples the splits, encodes every utterance and writes
/// `<out>/<split>.manifest` plus `<out>/emb/<split>/<id>.slpe`.
pub fn generate_corpus(
    grammar: &TemplateGrammar,
    req: &CorpusRequest,
    out: &Path,
    exec: Execution,
) -> Result<CorpusSummary> {
    req.encoder.validate()?;
    let splits = sample_splits(grammar, [req.n_train, req.n_dev, req.n_test], req.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifests = Vec::with_capacity(3);
    let mut frames_total = 0;
    for (k, insts) in splits.iter().enumerate() {
        let split = SPLITS[k];
        let encoded = exec.try_map_indexed(insts.len(), |i| {
            let useed = rng::derive_seed(req.seed, &[0x5eec, k as u64, i as u64]);
            pseudo_encode(&insts[i].transcript, &req.encoder, useed)
        })?;
        let mut m = Manifest {
            comments: vec![format!(
                "slp manifest grammar={} split={split} seed={}",
                grammar.name, req.seed
            )],
            records: Vec::with_capacity(insts.len()),
        };
        for (i, (inst, speech)) in insts.iter().zip(&encoded).enumerate() {
            let id = format!("{split}-{i:05}");
            let rel = format!("emb/{split}/{id}.slpe");
            write_embeddings(&out.join(&rel), &speech.frames)?;
            frames_total += speech.num_frames();
            m.records.push(ManifestRecord {
                id,
                embedding: rel,
                transcript: inst.transcript.clone(),
                frame: linearize(&inst.frame),
            });
        }
        m.save(&out.join(format!("{split}.manifest")))?;
        manifests.push(m);
    }
    let train: HashSet<&str> = splits[0].iter().map(|i| i.transcript.as_str()).collect();
    let test_train_overlap = splits[2]
        .iter()
        .filter(|i| train.contains(i.transcript.as_str()))
        .count();
    Ok(CorpusSummary {
        manifests,
        test_train_overlap,
        frames_total,
    })
}
