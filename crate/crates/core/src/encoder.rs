//! Post-norm transformer encoder block shared by the base model and the heads.
//!
//! ```text
//! H'  = LayerNorm(H + MHSA(H))
//! H'' = LayerNorm(H' + Dropout(W2 * relu(W1 * H' + b1) + b2))
//! ```

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Number of tensors in one block, in storage order.
pub const BLOCK_TENSORS: usize = 16;

const NAMES: [&str; BLOCK_TENSORS] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain",
    "ln2_bias",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config(format!("block dims must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn shapes(&self) -> [Vec<usize>; BLOCK_TENSORS] {
        let (d, f) = (self.d_model, self.d_ff);
        [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub dims: BlockDims,
    pub tensors: Vec<Tensor>,
}

/// Node ids of a block bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock<'a> {
    ids: &'a [NodeId],
}

impl<'a> BoundBlock<'a> {
    pub fn new(ids: &'a [NodeId]) -> Self {
        assert_eq!(ids.len(), BLOCK_TENSORS);
        BoundBlock { ids }
    }
}

pub struct BlockOutput {
    pub hidden: NodeId,
    /// Attention probabilities per head, each `queries x T`.
    pub attention: Vec<NodeId>,
}

/// Runtime switches for one forward pass.
pub struct Pass<'r, R> {
    pub dropout_p: f64,
    pub training: bool,
    pub rng: &'r mut R,
}

impl EncoderBlock {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init<R: Rng>(prefix: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let tensors = NAMES
            .iter()
            .zip(dims.shapes())
            .map(|(n, shape)| {
                let name = format!("{prefix}.{n}");
                match (shape.as_slice(), n.starts_with("ln") && n.ends_with("gain")) {
                    ([_], true) => Tensor::filled(name, &shape, 1.0),
                    ([_], false) => Tensor::zeros(name, &shape),
                    ([i, o], _) => Tensor::glorot(name, *i, *o, rng),
                    _ => unreachable!(),
                }
            })
            .collect();
        Ok(EncoderBlock { dims, tensors })
    }

    pub fn from_tensors(prefix: &str, dims: BlockDims, tensors: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        if tensors.len() != BLOCK_TENSORS {
            return Err(Error::Data(format!("expected {BLOCK_TENSORS} block tensors, got {}", tensors.len())));
        }
        let mut out = Vec::with_capacity(BLOCK_TENSORS);
        for ((mut t, shape), n) in tensors.into_iter().zip(dims.shapes()).zip(NAMES) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("encoder block", t.shape(), &shape));
            }
            t.name = format!("{prefix}.{n}");
            out.push(t);
        }
        Ok(EncoderBlock { dims, tensors: out })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Runs one block over `x` (`T x d_model`).
///
/// With `query_rows = Some(rows)` only those output rows are produced. Keys and
/// values still span the whole sequence, so each produced row is identical to
/// the same row of the full output.
pub fn block_forward<S: Scalar, R: Rng>(
    g: &mut Graph<S>,
    p: BoundBlock<'_>,
    dims: BlockDims,
    x: NodeId,
    query_rows: Option<&[usize]>,
    pass: &mut Pass<'_, R>,
) -> Result<BlockOutput> {
    let ids = p.ids;
    let (d, dk) = (dims.d_model, dims.head_dim());
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::Config(format!(
            "block expects inputs of width {d}, got shape {shape:?}"
        )));
    }
    let xq = match query_rows {
        Some(rows) => g.gather(x, rows)?,
        None => x,
    };
    let q = g.linear(xq, ids[0], ids[1])?;
    let k = g.linear(x, ids[2], ids[3])?;
    let v = g.linear(x, ids[4], ids[5])?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.n_heads);
    let mut attention = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax(scores);
        attention.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn = g.linear(cat, ids[6], ids[7])?;
    let res1 = g.add(xq, attn)?;
    let h1 = g.layer_norm(res1, ids[8], ids[9], LN_EPS)?;

    let f = g.linear(h1, ids[10], ids[11])?;
    let f = g.relu(f);
    let f = g.linear(f, ids[12], ids[13])?;
    let f = g.dropout(f, pass.dropout_p, pass.training, pass.rng)?;
    let res2 = g.add(h1, f)?;
    let hidden = g.layer_norm(res2, ids[14], ids[15], LN_EPS)?;
    Ok(BlockOutput { hidden, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(g: &mut Graph<f64>, b: &EncoderBlock) -> Vec<NodeId> {
        b.tensors.iter().map(|t| g.constant(t)).collect()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = BlockDims {
            d_model: 10,
            d_ff: 4,
            n_heads: 3,
        };
        assert!(matches!(EncoderBlock::init("b", dims, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn query_subset_matches_full_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = BlockDims {
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
        };
        let block = EncoderBlock::init("b", dims, &mut rng).unwrap();
        let x = Tensor::normal("x", &[5, 8], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let ids = bind(&mut g, &block);
        let xn = g.constant(&x);
        let mut pass = Pass {
            dropout_p: 0.1,
            training: false,
            rng: &mut rng,
        };
        let full = block_forward(&mut g, BoundBlock::new(&ids), dims, xn, None, &mut pass).unwrap();
        let part = block_forward(&mut g, BoundBlock::new(&ids), dims, xn, Some(&[0, 3]), &mut pass).unwrap();
        let fv = g.value(full.hidden).to_vec();
        let pv = g.value(part.hidden);
        for j in 0..8 {
            assert!((fv[j] - pv[j]).abs() < 1e-12);
            assert!((fv[3 * 8 + j] - pv[8 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = BlockDims {
            d_model: 16,
            d_ff: 8,
            n_heads: 4,
        };
        let block = EncoderBlock::init("b", dims, &mut rng).unwrap();
        let x = Tensor::normal("x", &[7, 16], 2.0, &mut rng);
        let mut g = Graph::<f32>::new();
        let ids: Vec<_> = block.tensors.iter().map(|t| g.constant(t)).collect();
        let xn = g.constant(&x);
        let mut pass = Pass {
            dropout_p: 0.0,
            training: false,
            rng: &mut rng,
        };
        let out = block_forward(&mut g, BoundBlock::new(&ids), dims, xn, None, &mut pass).unwrap();
        assert_eq!(out.attention.len(), 4);
        for a in out.attention {
            for row in g.value(a).chunks(7) {
                assert!(row.iter().all(|&p| p > 0.0));
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
