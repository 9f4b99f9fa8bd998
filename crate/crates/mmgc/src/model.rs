//! Fusion head and full network: vision/text projectors, L2-normalization,
//! concatenation into the joint feature, classifier, cross-entropy loss, and
//! the variant-specific forward paths (image-only / text-only / fused).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use crate::text::{ReportEncoder, TokenSequence};
use crate::vision::{encode_image, ImageTensor, QFormer, VitEncoder};

/// Projectors, classifier, and the variant tag. The classifier input width
/// is 2*d_proj for the fused variant and d_proj otherwise.
pub struct FusionHead {
    vision_proj: Vec<Linear>,
    text_proj: Vec<Linear>,
    classifier: Vec<Linear>,
    pub variant: Variant,
    pub d_proj: usize,
}

impl FusionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> FusionHead {
        let mlp = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, depth: usize, d_in: usize, d_out: usize| {
            (0..depth)
                .map(|i| {
                    let li = if i == 0 { d_in } else { d_out };
                    Linear::new(store, rng, &format!("{name}{i}"), li, d_out, true)
                })
                .collect::<Vec<_>>()
        };
        let vision_proj = mlp(store, rng, "head.vision_proj", cfg.projector_depth, cfg.d_model, cfg.d_proj);
        let text_proj = mlp(store, rng, "head.text_proj", cfg.projector_depth, cfg.d_text, cfg.d_proj);
        let classifier = mlp(
            store,
            rng,
            "head.classifier",
            cfg.classifier_depth,
            cfg.classifier_input_width(),
            ModelConfig::NUM_CLASSES,
        );
        FusionHead { vision_proj, text_proj, classifier, variant: cfg.variant, d_proj: cfg.d_proj }
    }

    fn run_mlp<T: Scalar>(
        layers: &[Linear],
        tape: &mut Tape<T>,
        bound: &Bound,
        mut x: TensorId,
    ) -> Result<TensorId> {
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 {
                x = tape.gelu(x)?;
            }
            x = layer.forward(tape, bound, x)?;
        }
        Ok(x)
    }

    /// Maps the image embedding into the joint space: [1, d] -> [1, d_proj].
    pub fn project_vision<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        v: TensorId,
    ) -> Result<TensorId> {
        Self::run_mlp(&self.vision_proj, tape, bound, v)
    }

    /// Maps the text embedding into the joint space: [1, d_t] -> [1, d_proj].
    pub fn project_text<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        t: TensorId,
    ) -> Result<TensorId> {
        Self::run_mlp(&self.text_proj, tape, bound, t)
    }

    /// Combines the normalized modality features according to the variant:
    /// fused concatenates [vision || text] in that fixed order, the
    /// single-modality variants pass their feature through. Inputs present
    /// must match the variant exactly.
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        v_norm: Option<TensorId>,
        t_norm: Option<TensorId>,
    ) -> Result<TensorId> {
        match (self.variant, v_norm, t_norm) {
            (Variant::M1, Some(v), None) => Ok(v),
            (Variant::M2, None, Some(t)) => Ok(t),
            (Variant::M3, Some(v), Some(t)) => tape.concat_cols(&[v, t]),
            (variant, v, t) => Err(Error::VariantMismatch {
                detail: format!(
                    "variant {variant} given vision={} text={}",
                    v.is_some(),
                    t.is_some()
                ),
            }),
        }
    }

    /// Classifier logits and probabilities from the joint feature.
    pub fn classify<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        joint: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let logits = Self::run_mlp(&self.classifier, tape, bound, joint)?;
        let probs = tape.softmax(logits, 1)?;
        Ok((logits, probs))
    }
}

/// Output handles of one sample's forward pass.
pub struct SampleOutput {
    pub logits: TensorId,
    pub probs: TensorId,
    pub loss: Option<TensorId>,
}

/// The complete network. All parameters live in `store`; the image and text
/// pathways are only executed (and therefore only receive gradients) when
/// the variant uses them.
pub struct Network<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub vit: VitEncoder,
    pub qformer: QFormer,
    pub report: ReportEncoder,
    pub head: FusionHead,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with deterministic seeded initialization. Parameter
    /// creation order is fixed, so a given seed always produces the same
    /// weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Network<T>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = VitEncoder::new(&mut store, &mut rng, &config)?;
        let qformer = QFormer::new(&mut store, &mut rng, &config)?;
        let report = ReportEncoder::new(&mut store, &mut rng, &config)?;
        let head = FusionHead::new(&mut store, &mut rng, &config);
        Ok(Network { config, store, vit, qformer, report, head })
    }

    pub fn bind(&self, tape: &mut Tape<T>, frozen: bool) -> Result<Bound> {
        self.store.bind(tape, frozen)
    }

    /// Full pipeline for one sample: encoders for the variant's modalities,
    /// projection, L2-normalization, fusion, classification, and (when a
    /// label is given) cross-entropy loss.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Option<&ImageTensor>,
        tokens: Option<&TokenSequence>,
        label: Option<usize>,
    ) -> Result<SampleOutput> {
        let variant = self.head.variant;
        let v_norm = if variant.uses_image() {
            let img = image.ok_or_else(|| Error::VariantMismatch {
                detail: format!("variant {variant} requires an image"),
            })?;
            let v = encode_image(&self.vit, &self.qformer, tape, bound, img)?;
            let projected = self.head.project_vision(tape, bound, v)?;
            Some(tape.l2_normalize(projected)?)
        } else {
            None
        };
        let t_norm = if variant.uses_text() {
            let seq = tokens.ok_or_else(|| Error::VariantMismatch {
                detail: format!("variant {variant} requires a report"),
            })?;
            let t = self.report.encode(tape, bound, seq)?;
            let projected = self.head.project_text(tape, bound, t)?;
            Some(tape.l2_normalize(projected)?)
        } else {
            None
        };
        let joint = self.head.fuse(tape, v_norm, t_norm)?;
        let (logits, probs) = self.head.classify(tape, bound, joint)?;
        let loss = match label {
            Some(l) => Some(tape.cross_entropy(logits, l)?),
            None => None,
        };
        Ok(SampleOutput { logits, probs, loss })
    }
}
