//! Per-user classifier heads over frozen base encodings.
//!
//! [`PersonalizationHead`] is one encoder block followed by a 2-way output
//! layer read at the `[CLS]` position. [`LinearHead`] is the output layer alone,
//! applied directly to the base encoding. Logit index 0 is `True`, 1 is `False`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::base_lm::Encoding;
use crate::codec::{self, Reader, Writer};
use crate::cost;
use crate::encoder::{block_forward, BlockDims, BoundBlock, EncoderBlock, Pass, BLOCK_TENSORS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const TRUE_INDEX: usize = 0;
pub const FALSE_INDEX: usize = 1;

pub const HEAD_MAGIC: &[u8; 4] = b"PIPH";
pub const HEAD_VERSION: u32 = 1;
const HEAD_TENSORS: usize = BLOCK_TENSORS + 2;
/// Bytes in a head file beyond the raw `f32` weights: magic, version, config,
/// tensor count, one length prefix per tensor and the trailing CRC.
pub const HEAD_FILE_OVERHEAD: usize = 4 + 4 + 3 * 4 + 8 + 8 + 4 + HEAD_TENSORS * 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PHConfig {
    pub d_model: usize,
    /// Feed-forward hidden width, the main size knob.
    pub d_ff: usize,
    pub n_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dropout() -> f64 {
    0.1
}

impl PHConfig {
    pub fn new(d_model: usize, d_ff: usize, n_heads: usize) -> Self {
        PHConfig {
            d_model,
            d_ff,
            n_heads,
            dropout_p: default_dropout(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_dims().validate()?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// A trainable classifier over base encodings.
pub trait PairClassifier: Clone + Send + Sync {
    fn d_model(&self) -> usize;
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// `[1 x 2]` logits for an encoding bound at `hidden`, with the
    /// classifier's weights bound at `ids` (in [`PairClassifier::tensors`] order).
    fn logits_graph<S: Scalar, R: Rng>(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        hidden: NodeId,
        cls_index: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Logits for one encoding. Eval mode is deterministic and ignores `rng`.
    fn forward<R: Rng>(&self, enc: &Encoding, training: bool, rng: &mut R) -> Result<[f32; 2]> {
        let width = enc.hidden.shape().get(1).copied().unwrap_or(0);
        if width != self.d_model() {
            return Err(Error::Config(format!(
                "encoding width {width} does not match head d_model {}",
                self.d_model()
            )));
        }
        let mut g = Graph::<f32>::new();
        let ids: Vec<NodeId> = self.tensors().into_iter().map(|t| g.constant(t)).collect();
        let h = g.constant(&enc.hidden);
        let out = self.logits_graph(&mut g, &ids, h, enc.cls_index, training, rng)?;
        let v = g.value(out);
        Ok([v[0], v[1]])
    }

    /// Eval-mode `P(True)` for one encoding.
    fn confidence(&self, enc: &Encoding) -> Result<f32> {
        // eval mode never draws from the rng
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(confidence(self.forward(enc, false, &mut rng)?))
    }
}

/// Probability of the `True` logit under a two-way softmax.
pub fn confidence(logits: [f32; 2]) -> f32 {
    let (t, f) = (logits[TRUE_INDEX] as f64, logits[FALSE_INDEX] as f64);
    (1.0 / (1.0 + (f - t).exp())) as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizationHead {
    pub config: PHConfig,
    block: EncoderBlock,
    w_out: Tensor,
    b_out: Tensor,
}

impl PersonalizationHead {
    /// Glorot-uniform weights drawn from `config.seed`; unit layer-norm gains, zero biases.
    pub fn init(config: PHConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let block = EncoderBlock::init("ph", config.block_dims(), &mut rng)?;
        let w_out = Tensor::glorot("ph.w_out", config.d_model, 2, &mut rng);
        let b_out = Tensor::zeros("ph.b_out", &[2]);
        Ok(PersonalizationHead {
            config,
            block,
            w_out,
            b_out,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(HEAD_MAGIC, HEAD_VERSION);
        let c = &self.config;
        for v in [c.d_model, c.d_ff, c.n_heads] {
            w.u32(v as u32);
        }
        w.u64(c.dropout_p.to_bits());
        w.u64(c.seed);
        let tensors = self.tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, HEAD_MAGIC, path)?;
        if version != HEAD_VERSION {
            return Err(r.corrupted(format!("unsupported head version {version}")));
        }
        let (d_model, d_ff, n_heads) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let config = PHConfig {
            d_model,
            d_ff,
            n_heads,
            dropout_p: f64::from_bits(r.u64()?),
            seed: r.u64()?,
        };
        config.validate().map_err(|e| r.corrupted(e.to_string()))?;
        let mut head = PersonalizationHead::init(config)?;
        let n = r.u32()? as usize;
        if n != HEAD_TENSORS {
            return Err(r.corrupted(format!("{n} tensors, expected {HEAD_TENSORS}")));
        }
        for t in head.tensors_mut() {
            let loaded = r.tensor(&t.name, t.shape())?;
            t.data_mut().copy_from_slice(loaded.data());
        }
        r.expect_end()?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

impl PairClassifier for PersonalizationHead {
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.block.tensors.iter().collect();
        v.push(&self.w_out);
        v.push(&self.b_out);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.block.tensors.iter_mut().collect();
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    fn logits_graph<S: Scalar, R: Rng>(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        hidden: NodeId,
        cls_index: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let mut pass = Pass {
            dropout_p: self.config.dropout_p,
            training,
            rng,
        };
        // only the [CLS] row reaches the output layer
        let out = block_forward(
            g,
            BoundBlock::new(&ids[..BLOCK_TENSORS]),
            self.config.block_dims(),
            hidden,
            Some(&[cls_index]),
            &mut pass,
        )?;
        g.linear(out.hidden, ids[BLOCK_TENSORS], ids[BLOCK_TENSORS + 1])
    }
}

/// The output layer alone: logits = encoding[cls] * W + b.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    d_model: usize,
    w_out: Tensor,
    b_out: Tensor,
}

impl LinearHead {
    pub fn init(d_model: usize, seed: u64) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LinearHead {
            d_model,
            w_out: Tensor::glorot("linear.w_out", d_model, 2, &mut rng),
            b_out: Tensor::zeros("linear.b_out", &[2]),
        })
    }
}

impl PairClassifier for LinearHead {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_out, &self.b_out]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_out, &mut self.b_out]
    }

    fn logits_graph<S: Scalar, R: Rng>(
        &self,
        g: &mut Graph<S>,
        ids: &[NodeId],
        hidden: NodeId,
        cls_index: usize,
        _training: bool,
        _rng: &mut R,
    ) -> Result<NodeId> {
        let cls = g.gather(hidden, &[cls_index])?;
        g.linear(cls, ids[0], ids[1])
    }
}

/// Reads the config from a head file's header without verifying the checksum
/// or loading weights; `None` when the header is not a head header.
pub fn peek_config(bytes: &[u8]) -> Option<PHConfig> {
    if bytes.len() < 36 || &bytes[..4] != HEAD_MAGIC {
        return None;
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    Some(PHConfig {
        d_model: u32_at(8),
        d_ff: u32_at(12),
        n_heads: u32_at(16),
        dropout_p: f64::from_bits(u64_at(20)),
        seed: u64_at(28),
    })
}

/// Expected on-disk size of a head with `config`.
pub fn head_file_size(config: &PHConfig) -> usize {
    4 * cost::count_ph_params(config.d_model, config.d_ff, true) + HEAD_FILE_OVERHEAD
}
