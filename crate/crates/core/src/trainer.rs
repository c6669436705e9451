//! Conditional masked-LM training: span masking of the text part, masked
//! cross-entropy under the prefix/causal mask, and the training regimes.
//!
//! The maskable sequence is the target text followed by `[EOS]`, so the
//! model also learns where to stop.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::composer::{compose, SpeechEmbeddingSequence};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::SlpModel;
use crate::numkit::{adam_step, init_states, AdamConfig, AdamState, Gradients, Graph};
use crate::rng::{self, SlpRng};
use crate::tokenizer::{SpecialIds, TokenId, SPECIALS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub replace_mask_p: f64,
    pub replace_random_p: f64,
    pub keep_original_p: f64,
    pub unigram_p: f64,
    pub multigram_p: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_rate: 0.15,
            replace_mask_p: 0.8,
            replace_random_p: 0.1,
            keep_original_p: 0.1,
            unigram_p: 0.8,
            multigram_p: 0.2,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.replace_mask_p,
            self.replace_random_p,
            self.keep_original_p,
            self.unigram_p,
            self.multigram_p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        if (self.replace_mask_p + self.replace_random_p + self.keep_original_p - 1.0).abs() > 1e-9 {
            return Err(Error::Config("replacement probabilities must sum to 1".into()));
        }
        if (self.unigram_p + self.multigram_p - 1.0).abs() > 1e-9 {
            return Err(Error::Config("unigram_p + multigram_p must be 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config(format!(
                "mask_rate {} outside (0, 1)",
                self.mask_rate
            )));
        }
        Ok(())
    }

    /// Number of positions to select in a sequence of length `len`.
    pub fn budget(&self, len: usize) -> usize {
        ((self.mask_rate * len as f64).ceil() as usize).clamp(1, len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

/// Result of corrupting one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedText {
    pub corrupted: Vec<TokenId>,
    /// Selected indices into the sequence, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<TokenId>,
    pub replacements: Vec<Replacement>,
    /// Span lengths as drawn (1, 2 or 3), before truncation to the budget.
    pub drawn_spans: Vec<usize>,
}

fn draw_span_len(policy: &MaskingPolicy, rng: &mut SlpRng) -> usize {
    if rng.random::<f64>() < policy.unigram_p {
        1
    } else if rng.random::<bool>() {
        2
    } else {
        3
    }
}

/// Selects `⌈rate·len⌉` positions by repeated non-overlapping span draws and
/// corrupts each selected token independently.
///
/// A drawn span is truncated to the remaining budget; if no free window of
/// that length exists it shrinks until one does. Random replacements are
/// drawn uniformly from the non-special ids `SPECIALS.len()..vocab_size`.
pub fn apply_masking(
    text_ids: &[TokenId],
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut SlpRng,
) -> Result<MaskedText> {
    if text_ids.is_empty() {
        return Err(Error::invalid("cannot mask an empty sequence"));
    }
    let first_regular = SPECIALS.len();
    if vocab_size <= first_regular && policy.replace_random_p > 0.0 {
        return Err(Error::invalid("no regular tokens to draw random replacements from"));
    }
    let n = text_ids.len();
    let budget = policy.budget(n);
    let mut selected = vec![false; n];
    let mut count = 0;
    let mut drawn_spans = Vec::new();
    let mut starts = Vec::with_capacity(n);
    while count < budget {
        let drawn = draw_span_len(policy, rng);
        drawn_spans.push(drawn);
        let mut len = drawn.min(budget - count);
        loop {
            starts.clear();
            starts.extend((0..=n - len).filter(|&s| selected[s..s + len].iter().all(|&x| !x)));
            if !starts.is_empty() || len == 1 {
                break;
            }
            len -= 1;
        }
        let s = starts[rng.random_range(0..starts.len())];
        selected[s..s + len].fill(true);
        count += len;
    }

    let mut corrupted = text_ids.to_vec();
    let mut positions = Vec::with_capacity(budget);
    let mut targets = Vec::with_capacity(budget);
    let mut replacements = Vec::with_capacity(budget);
    for (i, _) in selected.iter().enumerate().filter(|(_, &s)| s) {
        let u: f64 = rng.random();
        let kind = if u < policy.replace_mask_p {
            corrupted[i] = SpecialIds::FIXED.mask;
            Replacement::Mask
        } else if u < policy.replace_mask_p + policy.replace_random_p {
            corrupted[i] = rng.random_range(first_regular..vocab_size);
            Replacement::Random
        } else {
            Replacement::Keep
        };
        positions.push(i);
        targets.push(text_ids[i]);
        replacements.push(kind);
    }
    Ok(MaskedText {
        corrupted,
        positions,
        targets,
        replacements,
        drawn_spans,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    PretrainAsr,
    FinetuneSlu,
    OnestepSlu,
    OnestepAsrSlu,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::PretrainAsr => "pretrain",
            Regime::FinetuneSlu => "finetune",
            Regime::OnestepSlu => "onestep-slu",
            Regime::OnestepAsrSlu => "onestep-asr-slu",
        }
    }

    /// Target text for one utterance under this regime.
    pub fn target(self, transcript: &[TokenId], slu: &[TokenId]) -> Vec<TokenId> {
        match self {
            Regime::PretrainAsr => transcript.to_vec(),
            Regime::FinetuneSlu | Regime::OnestepSlu => slu.to_vec(),
            Regime::OnestepAsrSlu => {
                let mut t = transcript.to_vec();
                t.push(SpecialIds::FIXED.slu);
                t.extend_from_slice(slu);
                t
            }
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Regime::PretrainAsr),
            "finetune" => Ok(Regime::FinetuneSlu),
            "onestep-slu" => Ok(Regime::OnestepSlu),
            "onestep-asr-slu" => Ok(Regime::OnestepAsrSlu),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Global gradient-norm clip. Off when `None`.
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
    pub execution: Execution,
}

impl TrainConfig {
    pub fn new(regime: Regime) -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-4,
            epochs: 1,
            seed: 0,
            regime,
            clip_norm: None,
            shuffle: true,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if matches!(self.clip_norm, Some(c) if c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub speech: SpeechEmbeddingSequence,
    pub target_text: Vec<TokenId>,
}

impl TrainingExample {
    pub fn new(speech: SpeechEmbeddingSequence, target_text: Vec<TokenId>) -> Result<Self> {
        let sp = SpecialIds::FIXED;
        if target_text.is_empty() {
            return Err(Error::Data(format!("{}: empty target text", speech.source_id)));
        }
        if let Some(&bad) = target_text
            .iter()
            .find(|&&t| t != sp.slu && t != sp.unk && t < SPECIALS.len())
        {
            return Err(Error::Data(format!(
                "{}: special token {bad} in target text",
                speech.source_id
            )));
        }
        Ok(TrainingExample { speech, target_text })
    }
}

/// Masked loss of one example: summed cross-entropy, masked count and the
/// gradient of the sum. `None` when masking selected nothing twice.
pub struct ExampleLoss {
    pub loss_sum: f64,
    pub masked: usize,
    pub grads: Gradients,
}

/// Loss and gradient of one example under the given corruption rng.
pub fn example_loss(
    model: &SlpModel,
    example: &TrainingExample,
    policy: &MaskingPolicy,
    rng: &mut SlpRng,
) -> Result<Option<ExampleLoss>> {
    let cfg = model.config.composer();
    let sp = SpecialIds::FIXED;
    let t = example.target_text.len().min(cfg.max_text);
    let mut seq = example.target_text[..t].to_vec();
    seq.push(sp.eos);

    let mut masked = apply_masking(&seq, policy, model.config.vocab_size, rng)?;
    if masked.positions.is_empty() {
        masked = apply_masking(&seq, policy, model.config.vocab_size, rng)?;
        if masked.positions.is_empty() {
            return Ok(None);
        }
    }
    let mut input = compose(&example.speech, &masked.corrupted[..t], &cfg)?;
    let eos = input.eos_position();
    input.token_ids[eos] = masked.corrupted[t];

    let offset = input.text_span.start;
    let joint: Vec<usize> = masked.positions.iter().map(|&p| p + offset).collect();
    let mut g = Graph::new(&model.params);
    let logits = model.logits_at(&mut g, &input, &joint)?;
    let rows: Vec<usize> = (0..joint.len()).collect();
    let loss = g.cross_entropy_masked(logits, &masked.targets, &rows)?;
    let loss_sum = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok(Some(ExampleLoss {
        loss_sum,
        masked: joint.len(),
        grads,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean cross-entropy per masked position.
    pub loss: f64,
    pub loss_sum: f64,
    pub masked: usize,
    pub skipped: usize,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: SlpModel,
    pub states: Vec<AdamState>,
    pub adam: AdamConfig,
    pub policy: MaskingPolicy,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: SlpModel, config: TrainConfig, policy: MaskingPolicy) -> Result<Self> {
        config.validate()?;
        policy.validate()?;
        let states = init_states(&model.params);
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Trainer {
            model,
            states,
            adam,
            policy,
            config,
        })
    }

    /// Losses and gradients for `batch`, where `batch[i]` uses the rng
    /// stream `(seed, epoch, indices[i])`. Parameters are not touched.
    pub fn batch_gradients(
        &self,
        batch: &[&TrainingExample],
        indices: &[usize],
        epoch: usize,
    ) -> Result<Vec<Option<ExampleLoss>>> {
        let seed = self.config.seed;
        self.config.execution.try_map_indexed(batch.len(), |i| {
            let mut r = rng::stream(seed, &[0x7e41, epoch as u64, indices[i] as u64]);
            example_loss(&self.model, batch[i], &self.policy, &mut r)
        })
    }

    /// One optimizer step on `batch`; the loss is normalized by the total
    /// number of masked positions in the batch.
    pub fn training_step(
        &mut self,
        batch: &[&TrainingExample],
        indices: &[usize],
        epoch: usize,
    ) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.len() != indices.len() {
            return Err(Error::invalid("batch and index lists differ in length"));
        }
        let parts = self.batch_gradients(batch, indices, epoch)?;
        let mut total = Gradients::empty(self.model.params.len());
        let (mut loss_sum, mut masked, mut skipped) = (0.0, 0, 0);
        for part in parts {
            match part {
                Some(p) => {
                    loss_sum += p.loss_sum;
                    masked += p.masked;
                    total.add_assign(&p.grads);
                }
                None => skipped += 1,
            }
        }
        if masked == 0 {
            return Err(Error::invalid("no masked positions in batch"));
        }
        total.scale(1.0 / masked as f64);
        if let Some(c) = self.config.clip_norm {
            let norm = total.norm();
            if norm > c {
                total.scale(c / norm);
            }
        }
        self.model.params.zero_grad();
        self.model.params.accumulate(&total)?;
        adam_step(&mut self.model.params, &mut self.states, &self.adam)?;
        Ok(StepOutcome {
            loss: loss_sum / masked as f64,
            loss_sum,
            masked,
            skipped,
        })
    }

    /// Example order for one epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            use rand::seq::SliceRandom;
            let mut r = rng::stream(self.config.seed, &[0x5bf1, epoch as u64]);
            order.shuffle(&mut r);
        }
        order
    }

    /// Runs one epoch, calling `log` with one line per step. Returns the
    /// epoch loss (total cross-entropy over total masked positions).
    pub fn run_epoch(
        &mut self,
        dataset: &[TrainingExample],
        epoch: usize,
        log: &mut dyn FnMut(&str),
    ) -> Result<f64> {
        let order = self.epoch_order(dataset.len(), epoch);
        let (mut sum, mut count) = (0.0, 0);
        for (k, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let out = self.training_step(&batch, chunk, epoch)?;
            sum += out.loss_sum;
            count += out.masked;
            log(&format!("epoch {} step {} loss {:.6}", epoch + 1, k + 1, out.loss));
        }
        Ok(sum / count.max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

pub struct RegimeOutcome {
    pub model: SlpModel,
    pub epochs: Vec<EpochLoss>,
}

/// Trains `init` on `dataset` under `config.regime`. Fine-tuning requires a
/// pretrained `init`; the other regimes accept a fresh one.
pub fn run_regime(
    dataset: &[TrainingExample],
    config: &TrainConfig,
    policy: &MaskingPolicy,
    init: Option<SlpModel>,
    fresh: impl FnOnce() -> Result<SlpModel>,
    log: &mut dyn FnMut(&str),
) -> Result<RegimeOutcome> {
    let model = match (config.regime, init) {
        (_, Some(m)) => m,
        (Regime::FinetuneSlu, None) => {
            return Err(Error::Config("fine-tuning needs an initial checkpoint".into()))
        }
        (_, None) => fresh()?,
    };
    if config.epochs > 0 && dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut trainer = Trainer::new(model, config.clone(), *policy)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let loss = trainer.run_epoch(dataset, e, log)?;
        log(&format!("# epoch {} mean loss {:.6}", e + 1, loss));
        epochs.push(EpochLoss { epoch: e + 1, loss });
    }
    Ok(RegimeOutcome {
        model: trainer.model,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numkit::Tensor;

    fn seq(n: usize) -> Vec<TokenId> {
        (0..n).map(|i| 7 + i % 5).collect()
    }

    #[test]
    fn default_policy_is_valid() {
        MaskingPolicy::default().validate().unwrap();
        let mut bad = MaskingPolicy {
            keep_original_p: 0.2,
            ..MaskingPolicy::default()
        };
        assert!(bad.validate().is_err());
        bad = MaskingPolicy::default();
        bad.mask_rate = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn budget_of_one() {
        let policy = MaskingPolicy {
            mask_rate: 0.1,
            ..Default::default()
        };
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let m = apply_masking(&seq(7), &policy, 20, &mut r).unwrap();
            assert_eq!(m.positions.len(), 1);
        }
    }

    #[test]
    fn degenerate_policy_masks_everything_selected() {
        let policy = MaskingPolicy {
            mask_rate: 0.5,
            replace_mask_p: 1.0,
            replace_random_p: 0.0,
            keep_original_p: 0.0,
            unigram_p: 1.0,
            multigram_p: 0.0,
        };
        let mut r = rng::stream(2, &[]);
        let text = seq(10);
        let m = apply_masking(&text, &policy, 20, &mut r).unwrap();
        assert_eq!(m.positions.len(), 5);
        assert!(m.drawn_spans.iter().all(|&s| s == 1));
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            assert_eq!(m.corrupted[p], SpecialIds::FIXED.mask);
            assert_eq!(t, text[p]);
        }
        for p in (0..10).filter(|p| !m.positions.contains(p)) {
            assert_eq!(m.corrupted[p], text[p]);
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut r = rng::stream(0, &[]);
        assert!(apply_masking(&[], &MaskingPolicy::default(), 20, &mut r).is_err());
    }

    #[test]
    fn regime_targets() {
        let t = [10, 11];
        let s = [20];
        assert_eq!(Regime::PretrainAsr.target(&t, &s), vec![10, 11]);
        assert_eq!(Regime::OnestepSlu.target(&t, &s), vec![20]);
        assert_eq!(Regime::OnestepAsrSlu.target(&t, &s), vec![10, 11, 6, 20]);
        for r in [
            Regime::PretrainAsr,
            Regime::FinetuneSlu,
            Regime::OnestepSlu,
            Regime::OnestepAsrSlu,
        ] {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
    }

    fn tiny_model() -> SlpModel {
        let mut cfg = ModelConfig::desk(16);
        cfg.n_layers = 1;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        cfg.d_speech = 4;
        cfg.max_frames = 6;
        cfg.max_text = 5;
        SlpModel::init(cfg, 3).unwrap()
    }

    fn tiny_example() -> TrainingExample {
        let frames = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let speech = SpeechEmbeddingSequence::new(frames, "u0").unwrap();
        TrainingExample::new(speech, vec![8, 9, 10]).unwrap()
    }

    #[test]
    fn finetune_without_init_is_an_error() {
        let cfg = TrainConfig::new(Regime::FinetuneSlu);
        let r = run_regime(&[], &cfg, &MaskingPolicy::default(), None, || Ok(tiny_model()), &mut |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut cfg = TrainConfig::new(Regime::PretrainAsr);
        cfg.epochs = 0;
        let init = tiny_model();
        let before: Vec<Tensor> = init.params.iter().map(|(_, p)| p.value.clone()).collect();
        let out = run_regime(&[tiny_example()], &cfg, &MaskingPolicy::default(), Some(init), || unreachable!(), &mut |_| {}).unwrap();
        let after: Vec<Tensor> = out.model.params.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn step_is_reproducible() {
        let ex = tiny_example();
        let mut cfg = TrainConfig::new(Regime::PretrainAsr);
        cfg.lr = 1e-3;
        let run = |exec| {
            let mut c = cfg.clone();
            c.execution = exec;
            let mut t = Trainer::new(tiny_model(), c, MaskingPolicy::default()).unwrap();
            let a = t.training_step(&[&ex, &ex], &[0, 1], 0).unwrap();
            let b = t.training_step(&[&ex, &ex], &[0, 1], 1).unwrap();
            (a.loss.to_bits(), b.loss.to_bits(), t.model.params.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
        };
        let x = run(Execution::Sequential);
        let y = run(Execution::Sequential);
        let z = run(Execution::Parallel);
        assert_eq!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn special_tokens_rejected_in_targets() {
        let ex = tiny_example();
        assert!(TrainingExample::new(ex.speech.clone(), vec![8, 4]).is_err());
        assert!(TrainingExample::new(ex.speech.clone(), vec![]).is_err());
        assert!(TrainingExample::new(ex.speech, vec![8, 6, 9]).is_ok());
    }
}
