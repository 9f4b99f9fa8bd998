//! Reusable neural blocks: parameter storage, linear layers, multi-head
//! attention, feed-forward sublayers, and pre-norm residual transformer
//! blocks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub trainable: bool,
}

/// Flat, named store for every parameter of a model. Modules hold
/// [`ParamId`]s into it; the optimizer and checkpoints walk it by name.
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

/// Tape leaves for one forward/backward pass, one per parameter.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Adds a tensor initialized uniformly in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    /// Init values are drawn in f64 so f32 and f64 runs start from the same
    /// point up to rounding.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (1.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<T> =
            (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        self.push(name.into(), shape, data, trainable)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: f64,
        trainable: bool,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let data = vec![T::from_f64(value); numel];
        self.push(name.into(), shape, data, trainable)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>, trainable: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name, shape, data, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, p: ParamId) -> &ParamEntry<T> {
        &self.entries[p.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn data_mut(&mut self, p: ParamId) -> &mut [T] {
        &mut self.entries[p.0].data
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name)
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Creates tape leaves for every parameter. Trainable entries get
    /// gradient tracking; with `frozen` all leaves are created grad-free
    /// (inference mode).
    pub fn bind(&self, tape: &mut Tape<T>, frozen: bool) -> Result<Bound> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let rg = e.trainable && !frozen;
            ids.push(tape.leaf(e.data.clone(), e.shape.clone(), rg)?);
        }
        Ok(Bound { ids })
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Affine map `x * W^T + b` with weight stored as [out, in]. The bias is
/// optional: attention key projections omit it because softmax is invariant
/// to the per-row constant it would add.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Linear {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![out_dim, in_dim],
            in_dim,
            trainable,
            rng,
        );
        let bias = store.add_const(format!("{name}.bias"), vec![out_dim], 0.0, trainable);
        Linear { weight, bias: Some(bias) }
    }

    pub fn new_no_bias<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        trainable: bool,
    ) -> Linear {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![out_dim, in_dim],
            in_dim,
            trainable,
            rng,
        );
        Linear { weight, bias: None }
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
    ) -> Result<TensorId> {
        let wt = tape.transpose(bound.id(self.weight))?;
        let y = tape.matmul(x, wt)?;
        match self.bias {
            Some(bias) => tape.add_row(y, bound.id(bias)),
            None => Ok(y),
        }
    }
}

/// Layer-norm parameters (gamma initialized to 1, beta to 0).
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        trainable: bool,
    ) -> LayerNorm {
        let gamma = store.add_const(format!("{name}.gamma"), vec![dim], 1.0, trainable);
        let beta = store.add_const(format!("{name}.beta"), vec![dim], 0.0, trainable);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
    ) -> Result<TensorId> {
        tape.layer_norm(x, bound.id(self.gamma), bound.id(self.beta), self.eps)
    }
}

/// Attention masking modes. `Keys` excludes padded key positions for every
/// query row; `Causal` restricts row p to keys 0..=p.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    Keys(Vec<bool>),
    Causal,
}

impl AttnMask {
    /// Expands to a dense [n_q, n_k] boolean matrix (true = attend), or
    /// `None` when unmasked. Fails if any query row has no visible key.
    fn build(&self, n_q: usize, n_k: usize) -> Result<Option<Arc<Vec<bool>>>> {
        match self {
            AttnMask::None => Ok(None),
            AttnMask::Keys(keep) => {
                if keep.len() != n_k {
                    return Err(Error::MaskError {
                        detail: format!("key mask length {} vs {} keys", keep.len(), n_k),
                    });
                }
                if !keep.iter().any(|&k| k) {
                    return Err(Error::MaskError { detail: "all keys masked".into() });
                }
                let mut m = Vec::with_capacity(n_q * n_k);
                for _ in 0..n_q {
                    m.extend_from_slice(keep);
                }
                Ok(Some(Arc::new(m)))
            }
            AttnMask::Causal => {
                let mut m = vec![false; n_q * n_k];
                for q in 0..n_q {
                    for k in 0..n_k.min(q + 1) {
                        m[q * n_k + k] = true;
                    }
                }
                Ok(Some(Arc::new(m)))
            }
        }
    }
}

/// Multi-head scaled dot-product attention. Self-attention when the same
/// tensor is passed for queries and keys/values; cross-attention otherwise.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Attention> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(store, rng, &format!("{name}.wq"), dim, dim, trainable),
            k: Linear::new_no_bias(store, rng, &format!("{name}.wk"), dim, dim, trainable),
            v: Linear::new(store, rng, &format!("{name}.wv"), dim, dim, trainable),
            o: Linear::new(store, rng, &format!("{name}.wo"), dim, dim, trainable),
            heads,
            dim,
        })
    }

    /// `queries: [n_q, d]`, `keys_values: [n_k, d]` -> `[n_q, d]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        queries: TensorId,
        keys_values: TensorId,
        mask: &AttnMask,
    ) -> Result<TensorId> {
        let n_q = tape.shape(queries)[0];
        let n_k = tape.shape(keys_values)[0];
        let mask_matrix = mask.build(n_q, n_k)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q = self.q.forward(tape, bound, queries)?;
        let k = self.k.forward(tape, bound, keys_values)?;
        let v = self.v.forward(tape, bound, keys_values)?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let weights = tape.softmax_masked(scaled, 1, mask_matrix.clone())?;
            head_outputs.push(tape.matmul(weights, vh)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        self.o.forward(tape, bound, concat)
    }
}

/// Position-wise feed-forward sublayer: d -> 4d -> d with GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        trainable: bool,
    ) -> FeedForward {
        FeedForward {
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), dim, 4 * dim, trainable),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), 4 * dim, dim, trainable),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
    ) -> Result<TensorId> {
        let h = self.lin1.forward(tape, bound, x)?;
        let a = tape.gelu(h)?;
        self.lin2.forward(tape, bound, a)
    }
}

/// Pre-norm residual transformer block: `x + Attn(LN(x))`, then
/// `y + FFN(LN(y))`. Input and output shapes are identical.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<TransformerBlock> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, trainable),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads, trainable)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, trainable),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, trainable),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: TensorId,
        mask: &AttnMask,
    ) -> Result<TensorId> {
        let normed = self.ln1.forward(tape, bound, x)?;
        let attended = self.attn.forward(tape, bound, normed, normed, mask)?;
        let mid = tape.add(x, attended)?;
        let normed2 = self.ln2.forward(tape, bound, mid)?;
        let ff = self.ffn.forward(tape, bound, normed2)?;
        tape.add(mid, ff)
    }
}

/// Row gather from an embedding table parameter.
pub fn embed_lookup<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    table: ParamId,
    ids: &[usize],
) -> Result<TensorId> {
    tape.embed_rows(bound.id(table), ids)
}
