//! Image side of the network: a patch-based transformer encoder over the
//! input image, followed by a Q-Former whose learned query tokens
//! cross-attend to the patch features. The Q query outputs are mean-pooled
//! into a single image embedding.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, AttnMask, Bound, FeedForward, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

/// A C×H×W image with values in [0, 1], stored row-major in f32 regardless
/// of the compute precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{}x{}x{} needs {} values, got {}", channels, height, width, channels * height * width, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParams {
                detail: "image values must be finite and within [0, 1]".into(),
            });
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Patch-based transformer image encoder.
pub struct VitEncoder {
    pub patch_proj: Linear,
    pub pos_emb: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub patch_size: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl VitEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<VitEncoder> {
        let trainable = !cfg.freeze_image;
        let patch_dim = cfg.image_channels * cfg.patch_size * cfg.patch_size;
        let tokens = cfg.patch_tokens();
        let patch_proj = Linear::new(store, rng, "vit.patch_proj", patch_dim, cfg.d_model, trainable);
        let pos_emb = store.add_uniform(
            "vit.pos_emb",
            vec![tokens, cfg.d_model],
            cfg.d_model,
            trainable,
            rng,
        );
        let blocks = (0..cfg.vit_depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    rng,
                    &format!("vit.block{i}"),
                    cfg.d_model,
                    cfg.heads,
                    trainable,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VitEncoder {
            patch_proj,
            pos_emb,
            blocks,
            patch_size: cfg.patch_size,
            channels: cfg.image_channels,
            height: cfg.image_height,
            width: cfg.image_width,
        })
    }

    pub fn token_count(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Flattens non-overlapping P×P patches into a [T, C*P*P] matrix,
    /// row-major over the patch grid, channel-major within each patch.
    pub fn patchify(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.channels != self.channels || img.height != self.height || img.width != self.width {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "image {}x{}x{} does not match encoder {}x{}x{}",
                    img.channels, img.height, img.width, self.channels, self.height, self.width
                ),
            ));
        }
        if img.height % self.patch_size != 0 || img.width % self.patch_size != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("image {}x{} not divisible by patch size {}", img.height, img.width, self.patch_size),
            ));
        }
        let p = self.patch_size;
        let grid_h = img.height / p;
        let grid_w = img.width / p;
        let patch_dim = img.channels * p * p;
        let mut out = vec![0.0f64; grid_h * grid_w * patch_dim];
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let t = gy * grid_w + gx;
                let mut f = 0usize;
                for c in 0..img.channels {
                    for py in 0..p {
                        for px in 0..p {
                            out[t * patch_dim + f] = img.pixel(c, gy * p + py, gx * p + px) as f64;
                            f += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch extraction, linear projection, positional embedding: [T, d].
    pub fn patch_embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        img: &ImageTensor,
    ) -> Result<TensorId> {
        let patches = self.patchify(img)?;
        let patch_dim = self.channels * self.patch_size * self.patch_size;
        let tokens = self.token_count();
        let x = tape.leaf_f64(&patches, &[tokens, patch_dim], false)?;
        let projected = self.patch_proj.forward(tape, bound, x)?;
        tape.add(projected, bound.id(self.pos_emb))
    }

    /// Full encoder: patch embedding followed by the transformer blocks,
    /// unmasked self-attention. Output [T, d].
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        img: &ImageTensor,
    ) -> Result<TensorId> {
        let mut x = self.patch_embed(tape, bound, img)?;
        for block in &self.blocks {
            x = block.forward(tape, bound, x, &AttnMask::None)?;
        }
        Ok(x)
    }
}

/// One Q-Former block: query self-attention, cross-attention from queries to
/// patch features, then feed-forward, all pre-norm residual.
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl QFormerBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<QFormerBlock> {
        Ok(QFormerBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim, trainable),
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), dim, heads, trainable)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim, trainable),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross_attn"), dim, heads, trainable)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim, trainable),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, trainable),
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        queries: TensorId,
        patch_feats: TensorId,
    ) -> Result<TensorId> {
        let normed = self.ln_self.forward(tape, bound, queries)?;
        let self_out = self.self_attn.forward(tape, bound, normed, normed, &AttnMask::None)?;
        let q = tape.add(queries, self_out)?;
        let normed_q = self.ln_cross.forward(tape, bound, q)?;
        let cross_out =
            self.cross_attn.forward(tape, bound, normed_q, patch_feats, &AttnMask::None)?;
        let q = tape.add(q, cross_out)?;
        let normed_f = self.ln_ffn.forward(tape, bound, q)?;
        let ff = self.ffn.forward(tape, bound, normed_f)?;
        tape.add(q, ff)
    }
}

/// Learned query tokens that distill a variable number of patch features
/// into a fixed Q×d representation.
pub struct QFormer {
    pub query_tokens: ParamId,
    pub blocks: Vec<QFormerBlock>,
    pub queries: usize,
}

impl QFormer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<QFormer> {
        let trainable = !cfg.freeze_image;
        let query_tokens = store.add_uniform(
            "qformer.query_tokens",
            vec![cfg.queries, cfg.d_model],
            cfg.d_model,
            trainable,
            rng,
        );
        let blocks = (0..cfg.qformer_depth)
            .map(|i| {
                QFormerBlock::new(
                    store,
                    rng,
                    &format!("qformer.block{i}"),
                    cfg.d_model,
                    cfg.heads,
                    trainable,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QFormer { query_tokens, blocks, queries: cfg.queries })
    }

    /// Runs the query tokens through every block against the given patch
    /// features. Output shape [Q, d] regardless of the patch count.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        patch_feats: TensorId,
    ) -> Result<TensorId> {
        if tape.shape(patch_feats)[0] == 0 {
            return Err(Error::MaskError { detail: "no patch tokens to attend to".into() });
        }
        let mut q = bound.id(self.query_tokens);
        for block in &self.blocks {
            q = block.forward(tape, bound, q, patch_feats)?;
        }
        Ok(q)
    }
}

/// Whole image pathway: ViT encode, Q-Former, mean-pool over the Q query
/// outputs. Output [1, d].
pub fn encode_image<T: Scalar>(
    vit: &VitEncoder,
    qformer: &QFormer,
    tape: &mut Tape<T>,
    bound: &Bound,
    img: &ImageTensor,
) -> Result<TensorId> {
    let patch_feats = vit.encode(tape, bound, img)?;
    let queries = qformer.encode(tape, bound, patch_feats)?;
    tape.mean_rows(queries, qformer.queries)
}
