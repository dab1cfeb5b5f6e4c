//! Encoder-decoder transformer with a frozen token-embedding table shared by
//! encoder, decoder and the tied output layer, learned position embeddings,
//! and no language-code embedding.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TokenId, TokenSeq, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::seed;
use crate::xembed::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub tied_output: bool,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            d_model: 64,
            d_ffn: 256,
            max_positions: 64,
            dropout: 0.1,
            tied_output: true,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Model(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Model("need at least one encoder and one decoder layer".into()));
        }
        if self.d_ffn == 0 || self.max_positions < 2 {
            return Err(Error::Model("d_ffn must be positive and max_positions at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// `max_positions` must leave room for bos/eos around the longest sentence.
    pub fn check_sentence_length(&self, longest: usize) -> Result<()> {
        if self.max_positions < longest + 2 {
            return Err(Error::Model(format!(
                "max_positions {} is too small for sentences of {longest} tokens",
                self.max_positions
            )));
        }
        Ok(())
    }
}

/// One teacher-forced example. The decoder reads `dec_input[i]` at absolute
/// position `dec_positions[i]` and must predict `target[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: TokenSeq,
    pub dec_input: TokenSeq,
    pub dec_positions: Vec<usize>,
    pub target: TokenSeq,
}

impl Example {
    /// Full-sentence target: decoder reads `<s> t0 .. t(n-1)` and predicts
    /// `t0 .. t(n-1) </s>`.
    pub fn full(src: TokenSeq, target: &[TokenId]) -> Self {
        let mut dec_input = Vec::with_capacity(target.len() + 1);
        dec_input.push(BOS);
        dec_input.extend_from_slice(target);
        let mut tgt = target.to_vec();
        tgt.push(EOS);
        Example { src, dec_positions: (0..dec_input.len()).collect(), dec_input, target: tgt }
    }
}

struct Linear {
    w: Var,
    b: Var,
    out: usize,
}

struct LayerNorm {
    g: Var,
    b: Var,
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

struct FeedForward {
    up: Linear,
    down: Linear,
}

struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

struct Builder<'a> {
    rng: seed::Rng,
    dtype: DType,
    device: &'a Device,
    named: Vec<(String, Var)>,
    loaded: Option<&'a HashMap<String, Tensor>>,
}

impl Builder<'_> {
    fn var(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        let var = if let Some(loaded) = self.loaded {
            let t = loaded.get(&name).ok_or_else(|| Error::Model(format!("checkpoint is missing tensor `{name}`")))?;
            if t.dims() != shape {
                return Err(Error::Model(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.dims())));
            }
            Var::from_tensor(&t.to_dtype(self.dtype)?)?
        } else {
            let n: usize = shape.iter().product();
            let vals: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Model(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut self.rng)).collect()
                }
            };
            Var::from_tensor(&Tensor::from_vec(vals, shape, self.device)?.to_dtype(self.dtype)?)?
        };
        self.named.push((name, var.clone()));
        Ok(var)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let w = self.var(format!("{name}.w"), &[din, dout], Init::Normal((1.0 / din as f64).sqrt()))?;
        let b = self.var(format!("{name}.b"), &[dout], Init::Zeros)?;
        Ok(Linear { w, b, out: dout })
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm { g: self.var(format!("{name}.g"), &[d], Init::Ones)?, b: self.var(format!("{name}.b"), &[d], Init::Zeros)? })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward { up: self.linear(&format!("{name}.up"), d, f)?, down: self.linear(&format!("{name}.down"), f, d)? })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Per-call dropout state; `None` disables dropout.
pub struct Dropout {
    rng: seed::Rng,
    p: f64,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Option<Self> {
        (p > 0.0).then(|| Dropout { rng: seed::rng(seed), p })
    }

    fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / (1.0 - self.p);
        let n = x.elem_count();
        let mask: Vec<f32> = (0..n).map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { scale as f32 }).collect();
        let m = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&m)?)
    }
}

fn dropout(x: Tensor, drop: &mut Option<Dropout>) -> Result<Tensor> {
    match drop {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, din) = x.dims3()?;
        let y = x.reshape((b * t, din))?.matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())?;
        Ok(y.reshape((b, t, self.out))?)
    }
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&var.affine(1.0, 1e-5)?.sqrt()?)?;
        Ok(xn.broadcast_mul(self.g.as_tensor())?.broadcast_add(self.b.as_tensor())?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

impl Attention {
    fn heads(&self, x: &Tensor, l: &Linear, h: usize) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(l.forward(x)?.reshape((b, t, h, d / h))?.transpose(1, 2)?.contiguous()?)
    }

    /// `q_in` attends over pre-split keys/values `[b, h, tk, dh]`.
    fn attend(&self, q_in: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>, h: usize) -> Result<Tensor> {
        let (b, tq, d) = q_in.dims3()?;
        let q = self.heads(q_in, &self.q, h)?;
        let scale = 1.0 / ((d / h) as f64).sqrt();
        let mut scores = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let out = softmax_last(&scores)?.matmul(v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, tq, d))?;
        self.o.forward(&out)
    }

    fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>, h: usize) -> Result<Tensor> {
        let k = self.heads(kv_in, &self.k, h)?;
        let v = self.heads(kv_in, &self.v, h)?;
        self.attend(q_in, &k, &v, mask, h)
    }
}

impl FeedForward {
    fn forward(&self, x: &Tensor, drop: &mut Option<Dropout>) -> Result<Tensor> {
        let hidden = dropout(self.up.forward(x)?.relu()?, drop)?;
        self.down.forward(&hidden)
    }
}

pub struct ModelState {
    config: ModelConfig,
    vocab_size: usize,
    device: Device,
    /// Frozen `[V, d]` table; a plain tensor, never handed to the optimizer.
    token_embedding: Tensor,
    token_embedding_t: Tensor,
    position_embedding: Var,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_final: LayerNorm,
    dec_final: LayerNorm,
    output: Option<Var>,
    output_bias: Var,
    named: Vec<(String, Var)>,
}

/// Mean token-level cross entropy plus the number of scored tokens.
pub struct Loss {
    pub value: Tensor,
    pub tokens: usize,
}

impl ModelState {
    pub fn build(config: &ModelConfig, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.dim != config.d_model {
            return Err(Error::Model(format!(
                "embedding dimension {} does not match d_model {}",
                embeddings.dim, config.d_model
            )));
        }
        let device = Device::Cpu;
        let emb = Tensor::from_vec(embeddings.data.clone(), (embeddings.rows, embeddings.dim), &device)?
            .to_dtype(config.precision.dtype())?;
        Self::assemble(config, emb, seed::rng(seed::derive(seed, &["model-init"])), None)
    }

    fn assemble(config: &ModelConfig, emb: Tensor, rng: seed::Rng, loaded: Option<&HashMap<String, Tensor>>) -> Result<Self> {
        let device = emb.device().clone();
        let (v, d) = emb.dims2()?;
        let mut b = Builder { rng, dtype: config.precision.dtype(), device: &device, named: Vec::new(), loaded };
        let position_embedding =
            b.var("pos".into(), &[config.max_positions, d], Init::Normal((1.0 / d as f64).sqrt()))?;
        let mut encoder = Vec::new();
        for i in 0..config.enc_layers {
            encoder.push(EncoderLayer {
                ln_attn: b.layer_norm(&format!("enc{i}.ln_attn"), d)?,
                attn: b.attention(&format!("enc{i}.attn"), d)?,
                ln_ff: b.layer_norm(&format!("enc{i}.ln_ff"), d)?,
                ff: b.ff(&format!("enc{i}.ff"), d, config.d_ffn)?,
            });
        }
        let mut decoder = Vec::new();
        for i in 0..config.dec_layers {
            decoder.push(DecoderLayer {
                ln_self: b.layer_norm(&format!("dec{i}.ln_self"), d)?,
                self_attn: b.attention(&format!("dec{i}.self"), d)?,
                ln_cross: b.layer_norm(&format!("dec{i}.ln_cross"), d)?,
                cross_attn: b.attention(&format!("dec{i}.cross"), d)?,
                ln_ff: b.layer_norm(&format!("dec{i}.ln_ff"), d)?,
                ff: b.ff(&format!("dec{i}.ff"), d, config.d_ffn)?,
            });
        }
        let enc_final = b.layer_norm("enc.ln_final", d)?;
        let dec_final = b.layer_norm("dec.ln_final", d)?;
        let output = if config.tied_output {
            None
        } else {
            let var = match loaded {
                Some(l) => Var::from_tensor(l.get("out.w").ok_or_else(|| Error::Model("checkpoint is missing `out.w`".into()))?)?,
                None => Var::from_tensor(&emb.copy()?)?,
            };
            b.named.push(("out.w".into(), var.clone()));
            Some(var)
        };
        let output_bias = b.var("out.b".into(), &[v], Init::Zeros)?;
        let named = b.named;
        Ok(ModelState {
            config: config.clone(),
            vocab_size: v,
            token_embedding_t: emb.t()?.contiguous()?,
            token_embedding: emb,
            device,
            position_embedding,
            encoder,
            decoder,
            enc_final,
            dec_final,
            output,
            output_bias,
            named,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Trainable parameters with stable names.
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.named
    }

    pub fn vars(&self) -> Vec<Var> {
        self.named.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn output_bias(&self) -> &Var {
        &self.output_bias
    }

    pub fn position_embedding(&self) -> &Var {
        &self.position_embedding
    }

    /// sha256 over the frozen token-embedding bytes.
    pub fn embedding_checksum(&self) -> Result<String> {
        let vals = self.token_embedding.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut h = Sha256::new();
        for v in vals {
            h.update(v.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Rows of the learned position table as f64.
    pub fn position_table(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.position_embedding.as_tensor().to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    fn ids(&self, rows: &[Vec<u32>], width: usize) -> Result<Tensor> {
        let mut flat = Vec::with_capacity(rows.len() * width);
        for r in rows {
            flat.extend_from_slice(r);
            flat.extend(std::iter::repeat_n(0u32, width - r.len()));
        }
        Ok(Tensor::from_vec(flat, (rows.len(), width), &self.device)?)
    }

    fn embed(&self, tokens: &Tensor, positions: &Tensor) -> Result<Tensor> {
        let (b, t) = tokens.dims2()?;
        let d = self.config.d_model;
        let tok = self.token_embedding.index_select(&tokens.flatten_all()?, 0)?;
        let pos = self.position_embedding.as_tensor().index_select(&positions.flatten_all()?, 0)?;
        Ok((tok + pos)?.reshape((b, t, d))?)
    }

    /// `token_embedding[tokens[i]] + position_embedding[i]`, shape `[n, d]`.
    pub fn input_representation(&self, tokens: &[TokenId]) -> Result<Tensor> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::Model(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        self.check_ids(tokens)?;
        let ids = Tensor::from_vec(tokens.to_vec(), (1, tokens.len()), &self.device)?;
        let pos = Tensor::from_vec((0..tokens.len() as u32).collect::<Vec<_>>(), (1, tokens.len()), &self.device)?;
        Ok(self.embed(&ids, &pos)?.squeeze(0)?)
    }

    fn check_ids(&self, tokens: &[TokenId]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Model(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    fn key_mask(&self, lens: &[usize], width: usize, tq: usize, causal: bool) -> Result<Tensor> {
        let b = lens.len();
        let mut m = vec![0f32; b * tq * width];
        for (r, &len) in lens.iter().enumerate() {
            for i in 0..tq {
                for j in 0..width {
                    if j >= len || (causal && j > i) {
                        m[(r * tq + i) * width + j] = -1e9;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(m, (b, 1, tq, width), &self.device)?.to_dtype(self.dtype())?)
    }

    /// Encoder states `[b, s, d]` and the additive key mask `[b, 1, 1, s]`.
    fn encode(&self, src: &[TokenSeq], drop: &mut Option<Dropout>) -> Result<(Tensor, Tensor)> {
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let width = *lens.iter().max().unwrap_or(&0);
        if width == 0 || lens.contains(&0) {
            return Err(Error::Model("encoder input contains an empty sentence".into()));
        }
        if width > self.config.max_positions {
            return Err(Error::Model(format!("source of {width} tokens exceeds max_positions {}", self.config.max_positions)));
        }
        for s in src {
            self.check_ids(s)?;
        }
        let ids = self.ids(src, width)?;
        let pos_rows: Vec<Vec<u32>> = src.iter().map(|_| (0..width as u32).collect()).collect();
        let pos = self.ids(&pos_rows, width)?;
        let mask = self.key_mask(&lens, width, 1, false)?;
        let h = self.config.heads;
        let mut x = dropout(self.embed(&ids, &pos)?, drop)?;
        for layer in &self.encoder {
            let y = layer.ln_attn.forward(&x)?;
            x = (x + dropout(layer.attn.forward(&y, &y, Some(&mask), h)?, drop)?)?;
            let y = layer.ln_ff.forward(&x)?;
            x = (x + dropout(layer.ff.forward(&y, drop)?, drop)?)?;
        }
        Ok((self.enc_final.forward(&x)?, mask))
    }

    fn output_weight(&self) -> Result<Tensor> {
        Ok(match &self.output {
            Some(w) => w.as_tensor().t()?.contiguous()?,
            None => self.token_embedding_t.clone(),
        })
    }

    /// Decoder hidden states for teacher-forced inputs.
    fn decode_full(
        &self,
        enc: &Tensor,
        enc_mask: &Tensor,
        dec_in: &[TokenSeq],
        dec_pos: &[Vec<usize>],
        drop: &mut Option<Dropout>,
    ) -> Result<Tensor> {
        let lens: Vec<usize> = dec_in.iter().map(Vec::len).collect();
        let width = *lens.iter().max().unwrap_or(&0);
        if let Some(&p) = dec_pos.iter().flatten().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Model(format!("decoder position {p} exceeds max_positions {}", self.config.max_positions)));
        }
        for s in dec_in {
            self.check_ids(s)?;
        }
        let ids = self.ids(dec_in, width)?;
        let pos_rows: Vec<Vec<u32>> = dec_pos.iter().map(|r| r.iter().map(|&p| p as u32).collect()).collect();
        let pos = self.ids(&pos_rows, width)?;
        let self_mask = self.key_mask(&lens, width, width, true)?;
        let h = self.config.heads;
        let mut x = dropout(self.embed(&ids, &pos)?, drop)?;
        for layer in &self.decoder {
            let y = layer.ln_self.forward(&x)?;
            x = (x + dropout(layer.self_attn.forward(&y, &y, Some(&self_mask), h)?, drop)?)?;
            let y = layer.ln_cross.forward(&x)?;
            x = (x + dropout(layer.cross_attn.forward(&y, enc, Some(enc_mask), h)?, drop)?)?;
            let y = layer.ln_ff.forward(&x)?;
            x = (x + dropout(layer.ff.forward(&y, drop)?, drop)?)?;
        }
        self.dec_final.forward(&x)
    }

    fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let (b, t, d) = hidden.dims3()?;
        let w = self.output_weight()?;
        let l = hidden.reshape((b * t, d))?.matmul(&w)?.broadcast_add(self.output_bias.as_tensor())?;
        Ok(l.reshape((b, t, self.vocab_size))?)
    }

    /// Teacher-forced logits `[b, t, V]` (no dropout).
    pub fn forward_logits(&self, batch: &[Example]) -> Result<Tensor> {
        let src: Vec<TokenSeq> = batch.iter().map(|e| e.src.clone()).collect();
        let (enc, mask) = self.encode(&src, &mut None)?;
        let dec_in: Vec<TokenSeq> = batch.iter().map(|e| e.dec_input.clone()).collect();
        let dec_pos: Vec<Vec<usize>> = batch.iter().map(|e| e.dec_positions.clone()).collect();
        self.logits(&self.decode_full(&enc, &mask, &dec_in, &dec_pos, &mut None)?)
    }

    /// Mean cross entropy over non-pad target tokens.
    pub fn forward_loss(&self, batch: &[Example], drop: &mut Option<Dropout>) -> Result<Loss> {
        if batch.is_empty() {
            return Err(Error::Model("empty batch".into()));
        }
        for e in batch {
            if e.dec_input.len() != e.target.len() || e.dec_positions.len() != e.target.len() {
                return Err(Error::Model("decoder input, positions and target lengths differ".into()));
            }
        }
        let n_tokens: usize = batch.iter().map(|e| e.target.iter().filter(|&&t| t != PAD).count()).sum();
        if n_tokens == 0 {
            return Err(Error::Model("target batch is entirely padding".into()));
        }
        let src: Vec<TokenSeq> = batch.iter().map(|e| e.src.clone()).collect();
        let (enc, mask) = self.encode(&src, drop)?;
        let dec_in: Vec<TokenSeq> = batch.iter().map(|e| e.dec_input.clone()).collect();
        let dec_pos: Vec<Vec<usize>> = batch.iter().map(|e| e.dec_positions.clone()).collect();
        let hidden = self.decode_full(&enc, &mask, &dec_in, &dec_pos, drop)?;
        let logits = self.logits(&hidden)?;
        let (b, t, v) = logits.dims3()?;
        let logp = log_softmax_last(&logits.reshape((b * t, v))?)?;
        let tgt_rows: Vec<Vec<u32>> = batch.iter().map(|e| e.target.clone()).collect();
        for r in &tgt_rows {
            self.check_ids(r)?;
        }
        let targets = self.ids(&tgt_rows, t)?.reshape((b * t, 1))?;
        let picked = logp.gather(&targets, 1)?.squeeze(1)?;
        let mut weights = Vec::with_capacity(b * t);
        for r in &tgt_rows {
            weights.extend(r.iter().map(|&x| if x == PAD { 0f32 } else { 1.0 }));
            weights.extend(std::iter::repeat_n(0f32, t - r.len()));
        }
        let w = Tensor::from_vec(weights, b * t, &self.device)?.to_dtype(self.dtype())?;
        let value = picked.mul(&w)?.sum_all()?.affine(-1.0 / n_tokens as f64, 0.0)?;
        Ok(Loss { value, tokens: n_tokens })
    }

    /// Batched greedy decoding from `<s>` until `</s>` or `max_len` tokens,
    /// with an incremental key/value cache. `allowed` restricts the argmax to
    /// a subset of the vocabulary (eos is always allowed).
    pub fn greedy_decode(&self, sources: &[TokenSeq], max_len: usize, allowed: Option<&[bool]>) -> Result<Vec<TokenSeq>> {
        if sources.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = max_len.min(self.config.max_positions);
        let (enc, enc_mask) = self.encode(sources, &mut None)?;
        let b = sources.len();
        let h = self.config.heads;
        let bias = self.allowed_bias(allowed)?;
        let cross: Vec<(Tensor, Tensor)> = self
            .decoder
            .iter()
            .map(|l| Ok((l.cross_attn.heads(&enc, &l.cross_attn.k, h)?, l.cross_attn.heads(&enc, &l.cross_attn.v, h)?)))
            .collect::<Result<_>>()?;
        let mut cache: Vec<Option<(Tensor, Tensor)>> = vec![None; self.decoder.len()];
        let mut current = vec![BOS; b];
        let mut out: Vec<TokenSeq> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let w = self.output_weight()?;
        for step in 0..max_len {
            let ids = Tensor::from_vec(current.clone(), (b, 1), &self.device)?;
            let pos = Tensor::from_vec(vec![step as u32; b], (b, 1), &self.device)?;
            let mut x = self.embed(&ids, &pos)?;
            for (li, layer) in self.decoder.iter().enumerate() {
                let y = layer.ln_self.forward(&x)?;
                let k = layer.self_attn.heads(&y, &layer.self_attn.k, h)?;
                let v = layer.self_attn.heads(&y, &layer.self_attn.v, h)?;
                let (k, v) = match cache[li].take() {
                    Some((pk, pv)) => (Tensor::cat(&[&pk, &k], 2)?, Tensor::cat(&[&pv, &v], 2)?),
                    None => (k, v),
                };
                x = (x + layer.self_attn.attend(&y, &k, &v, None, h)?)?;
                cache[li] = Some((k, v));
                let y = layer.ln_cross.forward(&x)?;
                let (ck, cv) = &cross[li];
                x = (x + layer.cross_attn.attend(&y, ck, cv, Some(&enc_mask), h)?)?;
                let y = layer.ln_ff.forward(&x)?;
                x = (x + layer.ff.forward(&y, &mut None)?)?;
            }
            let hidden = self.dec_final.forward(&x)?.squeeze(1)?;
            let mut logits = hidden.matmul(&w)?.broadcast_add(self.output_bias.as_tensor())?;
            if let Some(bias) = &bias {
                logits = logits.broadcast_add(bias)?;
            }
            let next = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            for r in 0..b {
                if done[r] {
                    continue;
                }
                if next[r] == EOS {
                    done[r] = true;
                } else {
                    out[r].push(next[r]);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            current = next;
        }
        Ok(out)
    }

    fn allowed_bias(&self, allowed: Option<&[bool]>) -> Result<Option<Tensor>> {
        let Some(allowed) = allowed else { return Ok(None) };
        if allowed.len() != self.vocab_size {
            return Err(Error::Model(format!("allowed mask has {} entries for a vocabulary of {}", allowed.len(), self.vocab_size)));
        }
        let bias: Vec<f32> = allowed
            .iter()
            .enumerate()
            .map(|(i, &a)| if a || i as TokenId == EOS { 0.0 } else { -1e9 })
            .collect();
        Ok(Some(Tensor::from_vec(bias, self.vocab_size, &self.device)?.to_dtype(self.dtype())?))
    }

    /// Reference decoder without the cache: recomputes the whole prefix each
    /// step. Slow; kept for cross-checking.
    pub fn greedy_decode_uncached(&self, source: &TokenSeq, max_len: usize, allowed: Option<&[bool]>) -> Result<TokenSeq> {
        let bias = self.allowed_bias(allowed)?;
        let (enc, mask) = self.encode(std::slice::from_ref(source), &mut None)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len.min(self.config.max_positions) {
            let pos: Vec<usize> = (0..prefix.len()).collect();
            let hidden = self.decode_full(&enc, &mask, std::slice::from_ref(&prefix), &[pos], &mut None)?;
            let logits = self.logits(&hidden)?.squeeze(0)?;
            let mut last = logits.get(prefix.len() - 1)?;
            if let Some(b) = &bias {
                last = last.broadcast_add(b)?;
            }
            let next = last.argmax(0)?.to_scalar::<u32>()?;
            if next == EOS {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, vocab_fingerprint: &str, progress: &serde_json::Value) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> =
            self.named.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        tensors.push(("token_embedding".into(), self.token_embedding.clone()));
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), "unmt-checkpoint".to_string());
        meta.insert("format_version".to_string(), CHECKPOINT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("vocab_fingerprint".to_string(), vocab_fingerprint.to_string());
        meta.insert("progress".to_string(), serde_json::to_string(progress)?);
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(tensors, Some(meta), &tmp)
            .map_err(|e| Error::Artifact { path: path.to_path_buf(), msg: e.to_string() })?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a checkpoint; returns the model, its vocab fingerprint and the
    /// stored progress metadata.
    pub fn load(path: &Path) -> Result<(Self, String, serde_json::Value)> {
        let bytes = std::fs::read(path)?;
        let art = |msg: String| Error::Artifact { path: path.to_path_buf(), msg };
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| art(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| art("checkpoint has no metadata".into()))?;
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| art(format!("checkpoint metadata lacks `{k}`")));
        if get("format")? != "unmt-checkpoint" {
            return Err(art("not a model checkpoint".into()));
        }
        let version: u32 = get("format_version")?.parse().map_err(|_| art("bad format_version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(art(format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&get("config")?)?;
        let progress: serde_json::Value = serde_json::from_str(&get("progress")?)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let emb = tensors.get("token_embedding").ok_or_else(|| art("checkpoint lacks token_embedding".into()))?;
        let emb = emb.to_dtype(config.precision.dtype())?;
        let state = Self::assemble(&config, emb, seed::rng(0), Some(&tensors))?;
        Ok((state, get("vocab_fingerprint")?, progress))
    }

    /// Independent copy of all parameters.
    pub fn try_clone(&self) -> Result<Self> {
        let tensors: HashMap<String, Tensor> =
            self.named.iter().map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?))).collect::<Result<_>>()?;
        Self::assemble(&self.config, self.token_embedding.clone(), seed::rng(0), Some(&tensors))
    }

    /// Overwrites the output bias; used to rig decoding in tests and tools.
    pub fn set_output_bias(&self, values: &[f64]) -> Result<()> {
        let t = Tensor::from_vec(values.to_vec(), values.len(), &self.device)?.to_dtype(self.dtype())?;
        self.output_bias.set(&t)?;
        Ok(())
    }

    pub fn set_position_table(&self, rows: &[Vec<f64>]) -> Result<()> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (rows.len(), self.config.d_model), &self.device)?.to_dtype(self.dtype())?;
        self.position_embedding.set(&t)?;
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------- optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { learning_rate: 1e-3, warmup_steps: 400, clip_norm: 5.0, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

impl OptimConfig {
    /// Linear warmup to the peak rate, then inverse square-root decay.
    pub fn rate_at(&self, step: usize) -> f64 {
        let s = (step + 1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.learning_rate * (s / w).min((w / s).sqrt())
    }
}

/// Adam with the warmup / inverse-sqrt schedule and global-norm clipping.
pub struct Optimizer {
    adam: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    step: usize,
}

impl Optimizer {
    pub fn new(state: &ModelState, cfg: OptimConfig) -> Result<Self> {
        let vars = state.vars();
        let params = ParamsAdamW { lr: cfg.rate_at(0), beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: 0.0 };
        Ok(Optimizer { adam: AdamW::new(vars.clone(), params)?, vars, cfg, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Backward + clip + update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Model(format!("non-finite gradient norm at step {}", self.step)));
        }
        if norm > self.cfg.clip_norm {
            let scale = self.cfg.clip_norm / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v) {
                    grads.insert(v, g.affine(scale, 0.0)?);
                }
            }
        }
        self.adam.set_learning_rate(self.cfg.rate_at(self.step));
        self.adam.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }
}
