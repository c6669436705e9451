//! Transformer stack over the joint speech/text sequence.
//!
//! Post-norm blocks (attention, add & norm, feed-forward, add & norm) after
//! an embedding layer norm. The MLM head shares its weight with the token
//! embedding table.

mod checkpoint;
mod mask;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CKPT_HEADER};
pub use mask::{build_mask, AttentionMask};

use rand_distr::{Distribution, Normal};

use crate::composer::{self, ComposerConfig, EmbeddingIds, JointInput};
use crate::error::{Error, Result};
use crate::numkit::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub d_speech: usize,
    pub max_frames: usize,
    pub max_text: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Amplitude of a sinusoidal starting point for the position table;
    /// 0 draws it like every other weight. The table is trained either way.
    pub position_sinusoid: f64,
    /// Reserved; only 0 is accepted.
    pub dropout: f64,
}

impl ModelConfig {
    /// Small CPU-friendly preset.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            d_speech: 32,
            max_frames: 64,
            max_text: 24,
            ln_eps: 1e-12,
            init_std: 0.02,
            position_sinusoid: 0.0,
            dropout: 0.0,
        }
    }

    /// BERT-Base-sized preset with 1024-dim speech features, 500 frames and
    /// 30 text tokens.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            vocab_size,
            d_speech: 1024,
            max_frames: 500,
            max_text: 30,
            ln_eps: 1e-12,
            init_std: 0.02,
            position_sinusoid: 0.0,
            dropout: 0.0,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn max_positions(&self) -> usize {
        self.composer().joint_len()
    }

    pub fn composer(&self) -> ComposerConfig {
        ComposerConfig {
            max_frames: self.max_frames,
            max_text: self.max_text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("d_speech", self.d_speech),
            ("max_frames", self.max_frames),
            ("max_text", self.max_text),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps <= 0.0 || self.init_std <= 0.0 {
            return Err(Error::Config("ln_eps and init_std must be positive".into()));
        }
        if !(self.position_sinusoid >= 0.0 && self.position_sinusoid.is_finite()) {
            return Err(Error::Config("position_sinusoid must be finite and non-negative".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is reserved and must be 0".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("model.n_layers", self.n_layers.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.d_ff", self.d_ff.to_string()),
            ("model.vocab_size", self.vocab_size.to_string()),
            ("model.d_speech", self.d_speech.to_string()),
            ("model.max_frames", self.max_frames.to_string()),
            ("model.max_text", self.max_text.to_string()),
            ("model.ln_eps", format!("{:e}", self.ln_eps)),
            ("model.init_std", format!("{:e}", self.init_std)),
            ("model.position_sinusoid", self.position_sinusoid.to_string()),
            ("model.dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads the `model.*` keys; other keys are ignored.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{k} is not an integer")))
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{k} is not a number")))
        };
        let cfg = ModelConfig {
            n_layers: int("model.n_layers")?,
            n_heads: int("model.n_heads")?,
            d_model: int("model.d_model")?,
            d_ff: int("model.d_ff")?,
            vocab_size: int("model.vocab_size")?,
            d_speech: int("model.d_speech")?,
            max_frames: int("model.max_frames")?,
            max_text: int("model.max_text")?,
            ln_eps: float("model.ln_eps")?,
            init_std: float("model.init_std")?,
            position_sinusoid: float("model.position_sinusoid")?,
            dropout: float("model.dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `amp * sin` / `amp * cos` of `p / 10000^(2i/d)` in alternating columns.
fn sinusoid(table: &mut Tensor, amp: f64) {
    let d = table.shape()[1];
    for (p, row) in table.data_mut().chunks_mut(d).enumerate() {
        for (c, x) in row.iter_mut().enumerate() {
            let w = p as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
            *x = amp * if c % 2 == 0 { w.sin() } else { w.cos() };
        }
    }
}

/// Per-layer keys and values of an utterance's speech part.
#[derive(Clone, Debug)]
pub struct SpeechCache {
    speech_len: usize,
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: Norm,
}

#[derive(Clone, Debug)]
struct ParamLayout {
    embed: EmbeddingIds,
    embed_norm: Norm,
    layers: Vec<LayerIds>,
    head_bias: ParamId,
}

/// Parameter names and shapes implied by a config, in creation order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("embed.token".into(), vec![cfg.vocab_size, d]),
        ("embed.position".into(), vec![cfg.max_positions(), d]),
        ("embed.segment".into(), vec![2, d]),
        ("embed.speech_proj.weight".into(), vec![cfg.d_speech, d]),
        ("embed.speech_proj.bias".into(), vec![d]),
        ("embed.norm.gain".into(), vec![d]),
        ("embed.norm.bias".into(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        for part in ["query", "key", "value", "output"] {
            v.push((format!("layer{l}.attn.{part}.weight"), vec![d, d]));
            v.push((format!("layer{l}.attn.{part}.bias"), vec![d]));
        }
        v.push((format!("layer{l}.attn_norm.gain"), vec![d]));
        v.push((format!("layer{l}.attn_norm.bias"), vec![d]));
        v.push((format!("layer{l}.ffn.in.weight"), vec![d, cfg.d_ff]));
        v.push((format!("layer{l}.ffn.in.bias"), vec![cfg.d_ff]));
        v.push((format!("layer{l}.ffn.out.weight"), vec![cfg.d_ff, d]));
        v.push((format!("layer{l}.ffn.out.bias"), vec![d]));
        v.push((format!("layer{l}.ffn_norm.gain"), vec![d]));
        v.push((format!("layer{l}.ffn_norm.bias"), vec![d]));
    }
    v.push(("head.bias".into(), vec![cfg.vocab_size]));
    v
}

impl ParamLayout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        for (name, shape) in parameter_shapes(cfg) {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    store.value(id).shape()
                )));
            }
        }
        let id = |name: &str| store.id(name).expect("checked above");
        let linear = |p: &str| Linear {
            weight: id(&format!("{p}.weight")),
            bias: id(&format!("{p}.bias")),
        };
        let norm = |p: &str| Norm {
            gain: id(&format!("{p}.gain")),
            bias: id(&format!("{p}.bias")),
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIds {
                query: linear(&format!("layer{l}.attn.query")),
                key: linear(&format!("layer{l}.attn.key")),
                value: linear(&format!("layer{l}.attn.value")),
                output: linear(&format!("layer{l}.attn.output")),
                attn_norm: norm(&format!("layer{l}.attn_norm")),
                ffn_in: linear(&format!("layer{l}.ffn.in")),
                ffn_out: linear(&format!("layer{l}.ffn.out")),
                ffn_norm: norm(&format!("layer{l}.ffn_norm")),
            })
            .collect();
        Ok(ParamLayout {
            embed: EmbeddingIds {
                token: id("embed.token"),
                position: id("embed.position"),
                segment: id("embed.segment"),
                speech_weight: id("embed.speech_proj.weight"),
                speech_bias: id("embed.speech_proj.bias"),
            },
            embed_norm: norm("embed.norm"),
            layers,
            head_bias: id("head.bias"),
        })
    }
}

/// Config plus parameters of one unified speech-language model.
#[derive(Clone, Debug)]
pub struct SlpModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: ParamLayout,
}

impl SlpModel {
    /// Random initialization: weights ~ N(0, init_std²), biases 0, norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut store = ParamStore::new();
        for (i, (name, shape)) in parameter_shapes(&config).into_iter().enumerate() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let mut r = rng::stream(seed, &[0x1417, i as u64]);
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut r)).collect())?
            };
            store.add(name, t)?;
        }
        if config.position_sinusoid > 0.0 {
            let id = store
                .id("embed.position")
                .ok_or_else(|| Error::Config("no position table".into()))?;
            sinusoid(&mut store.get_mut(id).value, config.position_sinusoid);
        }
        Self::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::resolve(&params, &config)?;
        Ok(SlpModel {
            config,
            params,
            layout,
        })
    }

    pub fn embedding_ids(&self) -> &EmbeddingIds {
        &self.layout.embed
    }

    pub fn token_embedding(&self) -> ParamId {
        self.layout.embed.token
    }

    pub fn head_bias(&self) -> ParamId {
        self.layout.head_bias
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn linear(g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(l.weight);
        let b = g.param(l.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm(x, gain, bias, self.config.ln_eps)
    }

    /// Multi-head masked self-attention with output projection (no residual).
    /// `mask` is the additive `[n × n]` block for the rows of `x`.
    pub fn self_attention(&self, g: &mut Graph, x: Var, layer: usize, mask: &Tensor) -> Result<Var> {
        Ok(self.attention(g, x, layer, mask, None)?.0)
    }

    /// Attention for the rows of `x`, with `prior` keys and values placed
    /// before those of `x`. Also returns the keys and values of `x`.
    fn attention(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        mask: &Tensor,
        prior: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Var, Var)> {
        let ids = self.layout.layers.get(layer).copied().ok_or_else(|| {
            Error::invalid(format!("layer {layer} of {}", self.config.n_layers))
        })?;
        let q = Self::linear(g, x, ids.query)?;
        let k = Self::linear(g, x, ids.key)?;
        let v = Self::linear(g, x, ids.value)?;
        let (keys, values) = match prior {
            None => (k, v),
            Some((pk, pv)) => {
                let pk = g.constant(pk.clone());
                let pv = g.constant(pv.clone());
                (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?)
            }
        };
        let dk = self.config.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, keys, values)
            } else {
                (
                    g.slice_cols(q, h * dk, dk)?,
                    g.slice_cols(keys, h * dk, dk)?,
                    g.slice_cols(values, h * dk, dk)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let scores = g.add_const(scores, mask)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        Ok((Self::linear(g, cat, ids.output)?, k, v))
    }

    fn block(&self, g: &mut Graph, x: Var, layer: usize, mask: &Tensor) -> Result<Var> {
        Ok(self.block_kv(g, x, layer, mask, None)?.0)
    }

    fn block_kv(
        &self,
        g: &mut Graph,
        x: Var,
        layer: usize,
        mask: &Tensor,
        prior: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Var, Var)> {
        let ids = self.layout.layers[layer];
        let (a, k, v) = self.attention(g, x, layer, mask, prior)?;
        let x = g.add(x, a)?;
        let x = self.norm(g, x, ids.attn_norm)?;
        let h = Self::linear(g, x, ids.ffn_in)?;
        let h = g.gelu(h);
        let f = Self::linear(g, h, ids.ffn_out)?;
        let x = g.add(x, f)?;
        Ok((self.norm(g, x, ids.ffn_norm)?, k, v))
    }

    fn check_input(&self, input: &JointInput, mask_len: usize) -> Result<()> {
        if mask_len != input.len() {
            return Err(Error::shape(format!(
                "mask of length {mask_len} for input of length {}",
                input.len()
            )));
        }
        if input.frames.cols() != self.config.d_speech {
            return Err(Error::shape(format!(
                "speech width {} but model expects {}",
                input.frames.cols(),
                self.config.d_speech
            )));
        }
        if input.len() > self.config.max_positions() {
            return Err(Error::Length {
                len: input.len(),
                limit: self.config.max_positions(),
            });
        }
        Ok(())
    }

    /// Hidden states for the non-pad prefix, `[active_len × d_model]`.
    /// Pad rows are never computed: they are masked out of every column and
    /// their own outputs are unused.
    pub fn forward_active(&self, g: &mut Graph, input: &JointInput, mask: &AttentionMask) -> Result<Var> {
        self.check_input(input, mask.len())?;
        let n = input.active_len();
        let block_mask = mask.leading(n);
        let e = composer::embed(g, input, &self.layout.embed)?;
        let mut x = self.norm(g, e, self.layout.embed_norm)?;
        for l in 0..self.config.n_layers {
            x = self.block(g, x, l, &block_mask)?;
        }
        Ok(x)
    }

    /// Hidden states `[L × d_model]`; pad rows are zero.
    pub fn forward(&self, g: &mut Graph, input: &JointInput, mask: &AttentionMask) -> Result<Var> {
        let h = self.forward_active(g, input, mask)?;
        let pads = input.len() - input.active_len();
        if pads == 0 {
            return Ok(h);
        }
        let z = g.constant(Tensor::zeros(&[pads, self.config.d_model]));
        g.concat_rows(&[h, z])
    }

    /// Tied-weight MLM head: `hidden · Eᵀ + b`.
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let e = g.param(self.layout.embed.token);
        let b = g.param(self.layout.head_bias);
        let z = g.matmul_nt(hidden, e)?;
        g.add_row_bias(z, b)
    }

    /// Logits at selected joint positions, `[positions.len() × vocab]`.
    pub fn logits_at(&self, g: &mut Graph, input: &JointInput, positions: &[usize]) -> Result<Var> {
        let mask = build_mask(input.speech_span.clone(), input.text_span.clone(), &input.is_pad)?;
        let h = self.forward_active(g, input, &mask)?;
        let rows = g.gather_rows(h, positions)?;
        self.mlm_logits(g, rows)
    }

    /// Runs the speech part of `input` on its own and keeps every layer's
    /// keys and values.
    pub fn speech_cache(&self, input: &JointInput) -> Result<SpeechCache> {
        let mask = build_mask(input.speech_span.clone(), input.text_span.clone(), &input.is_pad)?;
        self.check_input(input, mask.len())?;
        let s = input.speech_span.end;
        let block_mask = mask.leading(s);
        let mut g = Graph::new(&self.params);
        let e = composer::embed(&mut g, input, &self.layout.embed)?;
        let rows: Vec<usize> = (0..s).collect();
        let e = g.gather_rows(e, &rows)?;
        let mut x = self.norm(&mut g, e, self.layout.embed_norm)?;
        let mut cache = SpeechCache {
            speech_len: s,
            keys: Vec::with_capacity(self.config.n_layers),
            values: Vec::with_capacity(self.config.n_layers),
        };
        for l in 0..self.config.n_layers {
            let (y, k, v) = self.block_kv(&mut g, x, l, &block_mask, None)?;
            cache.keys.push(g.value(k).clone());
            cache.values.push(g.value(v).clone());
            x = y;
        }
        Ok(cache)
    }

    /// Logits at text position `position`, computing only the text rows and
    /// taking the speech part from `cache`. Equal bit for bit to
    /// [`SlpModel::logits_at`] on the same input.
    pub fn logits_cached(&self, input: &JointInput, cache: &SpeechCache, position: usize) -> Result<Vec<f64>> {
        let mask = build_mask(input.speech_span.clone(), input.text_span.clone(), &input.is_pad)?;
        self.check_input(input, mask.len())?;
        let s = input.speech_span.end;
        let n = input.active_len();
        if cache.speech_len != s || cache.keys.len() != self.config.n_layers {
            return Err(Error::shape(format!(
                "cache for {} speech rows and {} layers, input has {s} and model {}",
                cache.speech_len,
                cache.keys.len(),
                self.config.n_layers
            )));
        }
        if !(s..n).contains(&position) {
            return Err(Error::invalid(format!("position {position} outside text rows {s}..{n}")));
        }
        let block_mask = mask.block(s..n, n);
        let mut g = Graph::new(&self.params);
        let e = composer::embed(&mut g, input, &self.layout.embed)?;
        let rows: Vec<usize> = (s..n).collect();
        let e = g.gather_rows(e, &rows)?;
        let mut x = self.norm(&mut g, e, self.layout.embed_norm)?;
        for l in 0..self.config.n_layers {
            let prior = Some((&cache.keys[l], &cache.values[l]));
            x = self.block_kv(&mut g, x, l, &block_mask, prior)?.0;
        }
        let row = g.gather_rows(x, &[position - s])?;
        let z = self.mlm_logits(&mut g, row)?;
        Ok(g.value(z).data().to_vec())
    }
}
