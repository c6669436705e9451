//! Self-checks run by `slp verify`: gradient check, attention-mask
//! causality, beam search against exhaustive enumeration, and the frame
//! codec round trip.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::composer::{compose, SpeechEmbeddingSequence};
use crate::error::Result;
use crate::generator::{beam_generate, greedy_generate, rank_order, step_distribution, Hypothesis, StepScorer};
use crate::model::{build_mask, ModelConfig, SlpModel};
use crate::numkit::{Graph, Tensor};
use crate::rng::{self, SlpRng};
use crate::slu_codec::{linearize, parse, LabelSet, SemanticFrame, Slot};
use crate::tokenizer::{SpecialIds, TokenId, SPECIALS};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const SUITES: [&str; 4] = ["gradcheck", "mask", "beam", "codec"];

pub fn run_suite(name: &str, seed: u64) -> Option<Result<SuiteResult>> {
    match name {
        "gradcheck" => Some(gradcheck(seed)),
        "mask" => Some(mask_causality(seed, 50)),
        "beam" => Some(beam_oracle(seed, 50)),
        "codec" => Some(Ok(codec_round_trip(seed, 2000))),
        _ => None,
    }
}

fn random_speech(r: &mut SlpRng, frames: usize, d: usize) -> Result<SpeechEmbeddingSequence> {
    let data = (0..frames * d).map(|_| StandardNormal.sample(r)).collect();
    SpeechEmbeddingSequence::new(Tensor::new(vec![frames, d], data)?, "random")
}

fn random_text(r: &mut SlpRng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| r.random_range(SPECIALS.len()..vocab)).collect()
}

/// Model used by the small checks.
pub fn check_model(seed: u64, n_layers: usize, d_model: usize, n_heads: usize, vocab: usize) -> Result<SlpModel> {
    let mut cfg = ModelConfig::desk(vocab);
    cfg.n_layers = n_layers;
    cfg.d_model = d_model;
    cfg.n_heads = n_heads;
    cfg.d_ff = 2 * d_model;
    cfg.d_speech = 8;
    cfg.max_frames = 5;
    cfg.max_text = 4;
    cfg.init_std = 0.3;
    SlpModel::init(cfg, seed)
}

/// Central differences against the tape gradient over every parameter of a
/// small model. Passes when the largest relative error is below 1e-4; the
/// denominator is floored at 1e-4 so structurally zero gradients are held
/// to an absolute 1e-8.
pub fn gradcheck(seed: u64) -> Result<SuiteResult> {
    let mut model = check_model(seed, 1, 8, 2, 12)?;
    let mut r = rng::stream(seed, &[0x67c4]);
    let speech = random_speech(&mut r, 4, 8)?;
    let text = random_text(&mut r, 3, 12);
    let input = compose(&speech, &text, &model.config.composer())?;
    let positions: Vec<usize> = input.text_span.clone().collect();
    let targets: Vec<TokenId> = positions.iter().map(|_| r.random_range(0..12)).collect();
    let rows: Vec<usize> = (0..positions.len()).collect();
    let loss_of = |m: &SlpModel| -> Result<f64> {
        let mut g = Graph::new(&m.params);
        let z = m.logits_at(&mut g, &input, &positions)?;
        let l = g.cross_entropy_masked(z, &targets, &rows)?;
        Ok(g.value(l).item())
    };
    let grads = {
        let mut g = Graph::new(&model.params);
        let z = model.logits_at(&mut g, &input, &positions)?;
        let l = g.cross_entropy_masked(z, &targets, &rows)?;
        g.backward(l)?
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = model.params.get(id).value.numel();
        for i in 0..n {
            let orig = model.params.get(id).value.data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + h;
            let up = loss_of(&model)?;
            model.params.get_mut(id).value.data_mut()[i] = orig - h;
            let down = loss_of(&model)?;
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    Ok(SuiteResult {
        name: "gradcheck",
        passed: worst < 1e-4,
        detail: format!("{} parameters, max relative error {worst:.3e}", model.num_parameters()),
    })
}

/// Perturbs text after a position, text anywhere, and pad content, and
/// checks which outputs may change.
pub fn mask_causality(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut failures = 0;
    for t in 0..trials {
        let mut r = rng::stream(seed, &[0x3a5c, t as u64]);
        let model = check_model(seed ^ t as u64, 2, 8, 2, 12)?;
        let cfg = model.config.composer();
        let s = r.random_range(1..=cfg.max_frames);
        let n = r.random_range(1..=cfg.max_text);
        let speech = random_speech(&mut r, s, 8)?;
        let text = random_text(&mut r, n, 12);
        let cut = r.random_range(0..n);
        let mut changed = text.clone();
        for x in changed.iter_mut().skip(cut + 1) {
            *x = r.random_range(SPECIALS.len()..12);
        }
        changed[r.random_range(0..n)] = SpecialIds::FIXED.mask;

        let hidden = |ids: &[TokenId], pad_fill: Option<TokenId>| -> Result<Tensor> {
            let mut input = compose(&speech, ids, &cfg)?;
            if let Some(f) = pad_fill {
                let active = input.active_len();
                input.token_ids[active..].iter_mut().for_each(|x| *x = f);
            }
            let mask = build_mask(input.speech_span.clone(), input.text_span.clone(), &input.is_pad)?;
            let mut g = Graph::new(&model.params);
            let h = model.forward(&mut g, &input, &mask)?;
            Ok(g.value(h).clone())
        };
        let a = hidden(&text, None)?;
        let b = hidden(&changed, None)?;
        let c = hidden(&text, Some(7))?;
        let text_start = s + 2;
        // Positions up to the cut keep the original prefix only if the
        // random overwrite landed after the cut.
        let keep = (0..=text_start + cut).filter(|&p| p < text_start || changed[..=p - text_start] == text[..=p - text_start]);
        for p in keep {
            if a.row(p) != b.row(p) {
                failures += 1;
            }
        }
        if a != c {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "mask",
        passed: failures == 0,
        detail: format!("{trials} trials, {failures} leaks"),
    })
}

/// Prefix-dependent random logits over a small vocabulary.
pub struct RandomScorer {
    pub vocab: usize,
    pub seed: u64,
    pub max_text: usize,
}

impl StepScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn max_text(&self) -> usize {
        self.max_text
    }

    fn step_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let coords: Vec<u64> = std::iter::once(prefix.len() as u64)
            .chain(prefix.iter().map(|&t| t as u64))
            .collect();
        let mut r = rng::stream(self.seed, &coords);
        Ok((0..self.vocab)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                2.0 * z
            })
            .collect())
    }
}

/// Best sequence by brute force: every finished sequence up to `max_len`
/// tokens and every unfinished one of exactly `max_len`.
pub fn exhaustive_best(s: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![Hypothesis {
        token_ids: vec![],
        logprob: 0.0,
        finished: false,
    }];
    while let Some(h) = stack.pop() {
        if h.finished || h.token_ids.len() == max_len {
            if best.as_ref().is_none_or(|b| rank_order(&h, b).is_lt()) {
                best = Some(h);
            }
            continue;
        }
        let lp = step_distribution(s, &h.token_ids)?;
        for (t, &l) in lp.iter().enumerate() {
            if l.is_finite() {
                let mut ids = h.token_ids.clone();
                ids.push(t);
                stack.push(Hypothesis {
                    token_ids: ids,
                    logprob: h.logprob + l,
                    finished: t == SpecialIds::FIXED.eos,
                });
            }
        }
    }
    Ok(best.expect("at least one sequence"))
}

/// Full-width beam against exhaustive search, and width one against greedy,
/// on scorers with at most eight emittable tokens.
pub fn beam_oracle(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut failures = 0;
    for t in 0..trials {
        let mut r = rng::stream(seed, &[0xbea3, t as u64]);
        // Emittable tokens: [EOS], [SLU] and up to six regular ids.
        let allowed = r.random_range(3..=8usize);
        let max_len = r.random_range(1..=4);
        let s = RandomScorer {
            vocab: SPECIALS.len() + allowed - 2,
            seed: r.random(),
            max_text: 4,
        };
        let width = allowed.pow(max_len as u32);
        let beam = beam_generate(&s, width, max_len)?;
        let oracle = exhaustive_best(&s, max_len)?;
        if beam.best.token_ids != oracle.token_ids {
            failures += 1;
        }
        let g = greedy_generate(&s, max_len)?;
        let b1 = beam_generate(&s, 1, max_len)?;
        if g.best != b1.best {
            failures += 1;
        }
    }
    Ok(SuiteResult {
        name: "beam",
        passed: failures == 0,
        detail: format!("{trials} trials, {failures} mismatches"),
    })
}

/// Random frame over small label sets.
pub fn random_frame(r: &mut SlpRng, intents: &[&str], slot_types: &[&str], words: &[&str]) -> SemanticFrame {
    let n_int = r.random_range(1..=2);
    let mut chosen: Vec<String> = Vec::new();
    while chosen.len() < n_int {
        let i = intents[r.random_range(0..intents.len())].to_string();
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    let n_slots = r.random_range(0..=4);
    let slots = (0..n_slots)
        .map(|_| {
            let n_words = r.random_range(1..=3);
            let value: Vec<&str> = (0..n_words).map(|_| words[r.random_range(0..words.len())]).collect();
            Slot::new(slot_types[r.random_range(0..slot_types.len())], value.join(" "))
        })
        .collect();
    SemanticFrame::new(chosen, slots)
}

pub fn codec_round_trip(seed: u64, n: usize) -> SuiteResult {
    let intents = ["flight", "airfare", "airline", "ground_service"];
    let types = ["from_city", "to_city", "depart_date", "class_type"];
    let words = ["boston", "new", "york", "monday", "first", "class", "morning"];
    let labels = LabelSet::new(intents, types);
    let mut r = rng::stream(seed, &[0xc0de]);
    let mut failures = 0;
    for _ in 0..n {
        let f = random_frame(&mut r, &intents, &types, &words);
        let (back, anomalies) = parse(&linearize(&f), &labels);
        if back != f || !anomalies.is_empty() {
            failures += 1;
        }
    }
    SuiteResult {
        name: "codec",
        passed: failures == 0,
        detail: format!("{n} frames, {failures} mismatches"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for name in SUITES {
            let r = run_suite(name, 1).unwrap().unwrap();
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(run_suite("nope", 1).is_none());
    }
}
