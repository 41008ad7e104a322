use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Score written into blocked attention positions before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

/// Boolean `[Lq, Lk]` attention mask; `true` blocks the query/key pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != rows * cols {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                len: blocked.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            blocked,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let blocked = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self {
            rows,
            cols,
            blocked,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.cols + k]
    }

    fn additive(&self) -> Tensor {
        let data = self
            .blocked
            .iter()
            .map(|&b| if b { MASKED_SCORE } else { 0.0 })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }
}

/// Output of [`Graph::scaled_dot_product_attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

impl Graph {
    /// `softmax(Q Kᵀ / sqrt(d) + mask) V` over inputs shaped
    /// `[..., L, d]`; leading axes (batch, heads) must agree.
    pub fn scaled_dot_product_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Attention> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        let rank = sq.len();
        let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "attention",
            lhs: sq.clone(),
            rhs: rhs.to_vec(),
        };
        if rank < 2 || sk.len() != rank || sv.len() != rank {
            return Err(mismatch(&sk));
        }
        if sk[rank - 2] == 0 {
            return Err(TensorError::invalid(
                "attention",
                "key axis has length zero",
            ));
        }
        if sk[rank - 1] != sq[rank - 1] || sk[..rank - 2] != sq[..rank - 2] {
            return Err(mismatch(&sk));
        }
        if sv[..rank - 1] != sk[..rank - 1] {
            return Err(mismatch(&sv));
        }
        if let Some(m) = mask {
            if m.shape() != [sq[rank - 2], sk[rank - 2]] {
                return Err(mismatch(&m.shape()));
            }
        }
        let d = sq[rank - 1] as f64;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let mut scores = self.scale(scores, 1.0 / d.sqrt());
        if let Some(m) = mask {
            let additive = self.constant(m.additive());
            scores = self.add(scores, additive)?;
        }
        let weights = self.softmax(scores)?;
        let output = self.matmul(weights, v)?;
        Ok(Attention { output, weights })
    }
}
