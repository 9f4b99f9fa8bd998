//! Model and training configuration, including the plain-text `key=value`
//! config-file format used by the CLI. Unknown keys are errors; flags
//! override file values and the merged result is echoed into output
//! directories for provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation variant: image-only, text-only, or full fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "m1")]
    M1,
    #[serde(rename = "m2")]
    M2,
    #[serde(rename = "m3")]
    M3,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "m1" | "M1" => Ok(Variant::M1),
            "m2" | "M2" => Ok(Variant::M2),
            "m3" | "M3" => Ok(Variant::M3),
            other => Err(Error::VariantMismatch {
                detail: format!("unknown variant '{other}' (expected m1, m2, or m3)"),
            }),
        }
    }

    pub fn uses_image(self) -> bool {
        matches!(self, Variant::M1 | Variant::M3)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Variant::M2 | Variant::M3)
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Architecture hyperparameters. `vocab_size` is filled in from the dataset
/// vocabulary before a model is built; `variant` selects the forward path
/// and classifier width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub vit_depth: usize,
    pub heads: usize,
    pub queries: usize,
    pub qformer_depth: usize,
    pub d_text: usize,
    pub text_depth: usize,
    pub max_len: usize,
    pub d_proj: usize,
    pub projector_depth: usize,
    pub classifier_depth: usize,
    pub freeze_image: bool,
    pub freeze_text: bool,
    pub vocab_size: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            d_model: 64,
            vit_depth: 2,
            heads: 4,
            queries: 8,
            qformer_depth: 2,
            d_text: 64,
            text_depth: 2,
            max_len: 16,
            d_proj: 64,
            projector_depth: 1,
            classifier_depth: 1,
            freeze_image: false,
            freeze_text: false,
            vocab_size: 0,
            variant: Variant::M3,
        }
    }
}

impl ModelConfig {
    /// Number of output classes (VCD, GC). Fixed by the task.
    pub const NUM_CLASSES: usize = 2;

    pub fn patch_tokens(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn classifier_input_width(&self) -> usize {
        match self.variant {
            Variant::M3 => 2 * self.d_proj,
            Variant::M1 | Variant::M2 => self.d_proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: &[(&str, usize)] = &[
            ("image_channels", self.image_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("vit_depth", self.vit_depth),
            ("heads", self.heads),
            ("queries", self.queries),
            ("qformer_depth", self.qformer_depth),
            ("d_text", self.d_text),
            ("text_depth", self.text_depth),
            ("max_len", self.max_len),
            ("d_proj", self.d_proj),
            ("projector_depth", self.projector_depth),
            ("classifier_depth", self.classifier_depth),
        ];
        for (name, value) in positive {
            if *value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_text % self.heads != 0 {
            return Err(Error::config(format!(
                "d_text {} not divisible by heads {}",
                self.d_text, self.heads
            )));
        }
        Ok(())
    }
}

/// Optimization schedule knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            peak_lr: 3e-4,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            trials: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.trials == 0 {
            return Err(Error::config("epochs, batch_size, and trials must be positive"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything a run needs besides the dataset, the variant, and the seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses the plain-text `key=value` format. Lines may be blank or start
    /// with `#`. Every key must belong to the published schema.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("bad value '{v}' for key {key}")))
        }
        match key {
            "image_channels" => self.model.image_channels = num(key, value)?,
            "image_height" => self.model.image_height = num(key, value)?,
            "image_width" => self.model.image_width = num(key, value)?,
            "patch_size" => self.model.patch_size = num(key, value)?,
            "d_model" => self.model.d_model = num(key, value)?,
            "vit_depth" => self.model.vit_depth = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "queries" => self.model.queries = num(key, value)?,
            "qformer_depth" => self.model.qformer_depth = num(key, value)?,
            "d_text" => self.model.d_text = num(key, value)?,
            "text_depth" => self.model.text_depth = num(key, value)?,
            "max_len" => self.model.max_len = num(key, value)?,
            "d_proj" => self.model.d_proj = num(key, value)?,
            "projector_depth" => self.model.projector_depth = num(key, value)?,
            "classifier_depth" => self.model.classifier_depth = num(key, value)?,
            "freeze_image" => self.model.freeze_image = num(key, value)?,
            "freeze_text" => self.model.freeze_text = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "peak_lr" => self.train.peak_lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "warmup_frac" => self.train.warmup_frac = num(key, value)?,
            "trials" => self.train.trials = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Renders the effective configuration back into the file format, for
    /// echoing into output directories. The output is itself parseable.
    pub fn to_key_values(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        format!(
            "image_channels={}\nimage_height={}\nimage_width={}\npatch_size={}\n\
             d_model={}\nvit_depth={}\nheads={}\nqueries={}\nqformer_depth={}\n\
             d_text={}\ntext_depth={}\nmax_len={}\n\
             d_proj={}\nprojector_depth={}\nclassifier_depth={}\n\
             freeze_image={}\nfreeze_text={}\n\
             epochs={}\nbatch_size={}\npeak_lr={}\nweight_decay={}\nwarmup_frac={}\ntrials={}\n",
            m.image_channels,
            m.image_height,
            m.image_width,
            m.patch_size,
            m.d_model,
            m.vit_depth,
            m.heads,
            m.queries,
            m.qformer_depth,
            m.d_text,
            m.text_depth,
            m.max_len,
            m.d_proj,
            m.projector_depth,
            m.classifier_depth,
            m.freeze_image,
            m.freeze_text,
            t.epochs,
            t.batch_size,
            t.peak_lr,
            t.weight_decay,
            t.warmup_frac,
            t.trials,
        )
    }
}
