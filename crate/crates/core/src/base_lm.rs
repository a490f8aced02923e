//! The shared base encoder: vocabulary, tokenizer, masked-LM pretraining,
//! freezing, and the `PIBM` model file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::codec::{self, Reader, Writer};
use crate::encoder::{block_forward, BlockDims, BoundBlock, EncoderBlock, Pass, BLOCK_TENSORS};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const MODEL_MAGIC: &[u8; 4] = b"PIBM";
pub const MODEL_VERSION: u32 = 1;
/// Lowercased whitespace/punctuation splitting, see [`split_words`].
const TOKENIZER_WORD_PUNCT: u32 = 1;
const FLAG_FROZEN: u32 = 1;

/// Lowercases and splits into runs of alphanumerics; every other
/// non-whitespace character is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then every distinct corpus token in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    split_words(text).iter().map(|w| vocab.id(w)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff_base: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff_base: 128,
            max_seq_len: 64,
            dropout_p: 0.1,
        }
    }
}

impl BaseConfig {
    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_ff: self.d_ff_base,
            n_heads: self.n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("n_layers and max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: BaseConfig,
    pub mask_prob: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: BaseConfig::default(),
            mask_prob: 0.15,
            lr: 2e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Hidden states of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    /// `T x d_model`
    pub hidden: Tensor,
    pub token_ids: Vec<usize>,
    pub cls_index: usize,
    /// The input exceeded `max_seq_len` and was cut.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseLM {
    pub config: BaseConfig,
    pub vocab: Vocab,
    token_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<EncoderBlock>,
    /// Output bias of the masked-LM head; its weights are tied to `token_emb`.
    mlm_bias: Tensor,
    frozen: bool,
    weights_checksum: u64,
}

const EMB_STD: f32 = 0.05;

impl BaseLM {
    pub fn init(config: BaseConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token_emb = Tensor::normal("base.token_emb", &[vocab.len(), d], EMB_STD, &mut rng);
        let pos_emb = Tensor::normal("base.pos_emb", &[config.max_seq_len, d], EMB_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|l| EncoderBlock::init(&format!("base.layer{l}"), config.block_dims(), &mut rng))
            .collect::<Result<_>>()?;
        let mlm_bias = Tensor::zeros("base.mlm_bias", &[vocab.len()]);
        Ok(BaseLM {
            config,
            vocab,
            token_emb,
            pos_emb,
            blocks,
            mlm_bias,
            frozen: false,
            weights_checksum: 0,
        })
    }

    /// Every weight tensor in storage order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.token_emb, &self.pos_emb];
        v.extend(self.blocks.iter().flat_map(|b| b.tensors.iter()));
        v.push(&self.mlm_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.token_emb, &mut self.pos_emb];
        v.extend(self.blocks.iter_mut().flat_map(|b| b.tensors.iter_mut()));
        v.push(&mut self.mlm_bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Digest recorded at freeze time.
    pub fn checksum(&self) -> u64 {
        self.weights_checksum
    }

    /// Digest of the current weight bytes.
    pub fn compute_checksum(&self) -> u64 {
        codec::tensors_checksum(self.tensors())
    }

    /// Marks every weight as non-trainable and records the weight digest. Idempotent.
    pub fn freeze(mut self) -> Self {
        for t in self.tensors_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
        self.frozen = true;
        self.weights_checksum = self.compute_checksum();
        self
    }

    /// Binds all weights into `g`, as tracked leaves when `trainable`.
    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, trainable: bool) -> Vec<NodeId> {
        self.tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// Hidden states for `token_ids` given weights bound by [`BaseLM::bind`]
    /// (or any node list in the same order).
    pub fn forward_graph<S: Scalar, R: Rng>(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        token_ids: &[usize],
        pass: &mut Pass<'_, R>,
    ) -> Result<NodeId> {
        if token_ids.is_empty() {
            return Err(Error::Data("cannot encode an empty sequence".into()));
        }
        if token_ids.len() > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                token_ids.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        model_forward_with(&self.config, g, ids, token_ids, pass)
    }

    /// Deterministic eval-mode encoding. Inputs longer than `max_seq_len` are
    /// truncated and flagged.
    pub fn encode(&self, input_ids: &[usize]) -> Result<Encoding> {
        let truncated = input_ids.len() > self.config.max_seq_len;
        let token_ids = input_ids[..input_ids.len().min(self.config.max_seq_len)].to_vec();
        let mut g = Graph::<f32>::new();
        let ids = self.bind(&mut g, false);
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass {
            dropout_p: 0.0,
            training: false,
            rng: &mut rng,
        };
        let h = self.forward_graph(&mut g, &ids, &token_ids, &mut pass)?;
        Ok(Encoding {
            hidden: g.to_tensor(h, "hidden"),
            token_ids,
            cls_index: 0,
            truncated,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MODEL_MAGIC, MODEL_VERSION);
        w.u32(if self.frozen { FLAG_FROZEN } else { 0 });
        w.u64(self.weights_checksum);
        w.u32(TOKENIZER_WORD_PUNCT);
        let c = &self.config;
        for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff_base, c.max_seq_len] {
            w.u32(v as u32);
        }
        w.u64(c.dropout_p.to_bits());
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        let tensors = self.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, MODEL_MAGIC, path)?;
        if version != MODEL_VERSION {
            return Err(r.corrupted(format!("unsupported model version {version}")));
        }
        let flags = r.u32()?;
        let stored_checksum = r.u64()?;
        let tokenizer = r.u32()?;
        if tokenizer != TOKENIZER_WORD_PUNCT {
            return Err(r.corrupted(format!("unknown tokenizer kind {tokenizer}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = BaseConfig {
            d_model: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            d_ff_base: dims[3],
            max_seq_len: dims[4],
            dropout_p: f64::from_bits(r.u64()?),
        };
        config.validate().map_err(|e| r.corrupted(e.to_string()))?;
        let n_vocab = r.u32()? as usize;
        let tokens = (0..n_vocab).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens).map_err(|e| r.corrupted(e.to_string()))?;

        let mut model = BaseLM::init(config, vocab, 0)?;
        let n_tensors = r.u32()? as usize;
        if n_tensors != model.tensors().len() {
            return Err(r.corrupted(format!("{n_tensors} tensors, expected {}", model.tensors().len())));
        }
        for t in model.tensors_mut() {
            let loaded = r.tensor(&t.name, t.shape())?;
            t.data_mut().copy_from_slice(loaded.data());
        }
        r.expect_end()?;
        if flags & FLAG_FROZEN != 0 {
            model = model.freeze();
            if model.weights_checksum != stored_checksum {
                return Err(r.corrupted("weights checksum mismatch"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Builds a vocabulary from `corpus`, trains a fresh encoder by masked
/// language modeling, and returns the (unfrozen) model with the mean loss of
/// every epoch.
pub fn pretrain_mlm(corpus: &[String], cfg: &PretrainConfig) -> Result<(BaseLM, Vec<f32>)> {
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if !(cfg.mask_prob > 0.0 && cfg.mask_prob < 1.0) {
        return Err(Error::Config(format!("mask_prob {} outside (0, 1)", cfg.mask_prob)));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let vocab = Vocab::build(corpus.iter().map(String::as_str));
    if vocab.len() < 10 {
        return Err(Error::Data(format!(
            "corpus yields a vocabulary of {} tokens (reserved included); at least 10 required",
            vocab.len()
        )));
    }
    let mut model = BaseLM::init(cfg.model, vocab, cfg.seed)?;
    let max_len = cfg.model.max_seq_len;
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            let mut ids = vec![CLS];
            ids.extend(tokenize(s, &model.vocab));
            ids.truncate(max_len - 1);
            ids.push(SEP);
            ids
        })
        .collect();

    let mut opt = Adam::new(&model.tensors(), cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c_6d5f_7072_6574);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let masked: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = batch
                .iter()
                .filter_map(|&i| mask_sequence(&sequences[i], cfg.mask_prob, &mut rng))
                .collect();
            if masked.is_empty() {
                continue;
            }
            let scale = 1.0 / masked.len() as f64;
            let mut params = model.tensors_mut();
            params.iter_mut().for_each(|t| t.zero_grad());
            let mut batch_loss = 0.0f64;
            for (input, positions, targets) in &masked {
                let mut g = Graph::<f32>::new();
                let ids: Vec<NodeId> = params.iter().map(|t| g.param(t)).collect();
                let mut pass = Pass {
                    dropout_p: cfg.model.dropout_p,
                    training: true,
                    rng: &mut rng,
                };
                let h = model_forward_with(&cfg.model, &mut g, &ids, input, &mut pass)?;
                let logits = mlm_logits_with(&mut g, &ids, h, positions)?;
                let ce = g.cross_entropy(logits, targets)?;
                batch_loss += g.value(ce)[0] as f64;
                let loss = g.scale(ce, scale);
                g.backward(loss)?;
                for (t, &id) in params.iter_mut().zip(&ids) {
                    if let Some(gr) = g.grad(id) {
                        t.accumulate_grad(gr);
                    }
                }
            }
            opt.step(&mut params);
            batch_losses.push(batch_loss * scale);
        }
        let mean = batch_losses.iter().sum::<f64>() / batch_losses.len().max(1) as f64;
        history.push(mean as f32);
    }
    for t in model.tensors_mut() {
        t.grad = None;
    }
    Ok((model, history))
}

/// Replaces each maskable token with `[MASK]` with probability `p`, forcing at
/// least one. Returns (input, masked positions, original ids), or `None` when
/// the sequence has no maskable token.
fn mask_sequence<R: Rng>(seq: &[usize], p: f64, rng: &mut R) -> Option<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] >= RESERVED.len()).collect();
    if candidates.is_empty() {
        return None;
    }
    let mut positions: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
    if positions.is_empty() {
        positions.push(*candidates.choose(rng).unwrap());
    }
    let targets = positions.iter().map(|&i| seq[i]).collect();
    let mut input = seq.to_vec();
    for &i in &positions {
        input[i] = MASK;
    }
    Some((input, positions, targets))
}

// Free-standing forms used while the model is mutably borrowed by training.
fn model_forward_with<S: Scalar, R: Rng>(
    config: &BaseConfig,
    g: &mut Graph<S>,
    ids: &[NodeId],
    token_ids: &[usize],
    pass: &mut Pass<'_, R>,
) -> Result<NodeId> {
    let positions: Vec<usize> = (0..token_ids.len()).collect();
    let tok = g.gather(ids[0], token_ids)?;
    let pos = g.gather(ids[1], &positions)?;
    let mut h = g.add(tok, pos)?;
    for l in 0..config.n_layers {
        let start = 2 + l * BLOCK_TENSORS;
        h = block_forward(g, BoundBlock::new(&ids[start..start + BLOCK_TENSORS]), config.block_dims(), h, None, pass)?
            .hidden;
    }
    Ok(h)
}

/// Masked-LM logits (`rows x |V|`) for selected rows of `hidden`, using the tied embedding.
fn mlm_logits_with<S: Scalar>(g: &mut Graph<S>, ids: &[NodeId], hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
    let picked = g.gather(hidden, rows)?;
    let emb_t = g.transpose(ids[0])?;
    let logits = g.matmul(picked, emb_t)?;
    g.add_row(logits, *ids.last().unwrap())
}
