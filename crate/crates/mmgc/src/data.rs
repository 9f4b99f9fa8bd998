//! Synthetic paired image/report generator with controllable per-modality
//! ambiguity, a closed-form Bayes oracle, the 8:1:1 split, and dataset
//! persistence.
//!
//! Each sample is a centered disk on a textured background plus a short
//! report. Informative renderings separate the two classes by disk radius
//! and intensity (images) or by template wording (reports); an ambiguous
//! rendering is drawn from a distribution that is identical for both
//! classes, so it carries zero class information in that modality. At most
//! one modality per sample is ambiguous, which pins the fused Bayes
//! accuracy at 1.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::ImageTensor;

pub const IMAGE_CHANNELS: usize = 1;
pub const IMAGE_SIZE: usize = 32;

const VCD_RADIUS: f64 = 5.0;
const GC_RADIUS: f64 = 9.0;
const AMBIGUOUS_RADIUS: f64 = 7.0;
const VCD_INTENSITY: f64 = 0.6;
const GC_INTENSITY: f64 = 0.9;
const AMBIGUOUS_INTENSITY: f64 = 0.75;

const VCD_TEMPLATE: &str = "smooth white leukoplakia patch on vocal cord";
const GC_TEMPLATE: &str = "irregular ulcerated exophytic mass on vocal cord";
const NEUTRAL_TEMPLATE: &str = "lesion on vocal cord observed";
const FILLERS: [&str; 12] = [
    "anterior", "posterior", "left", "right", "mild", "margin", "surface", "small", "large",
    "area", "noted", "mucosa",
];

const IMAGE_MAGIC: &[u8; 4] = b"MMGI";

// Stream tag separating the split shuffle from per-sample generation.
const SPLIT_STREAM: u64 = 0x5114;

/// Generator parameters. Ambiguity buckets are disjoint: a sample is
/// image-ambiguous with probability `ambiguous_image_frac`, text-ambiguous
/// with `ambiguous_text_frac`, and fully informative otherwise.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenParams {
    pub n_samples: usize,
    pub class_prior_gc: f64,
    pub ambiguous_image_frac: f64,
    pub ambiguous_text_frac: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_samples: 2000,
            class_prior_gc: 0.5,
            ambiguous_image_frac: 0.3,
            ambiguous_text_frac: 0.3,
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParams { detail: "n_samples must be positive".into() });
        }
        for (name, v) in [
            ("class_prior_gc", self.class_prior_gc),
            ("ambiguous_image_frac", self.ambiguous_image_frac),
            ("ambiguous_text_frac", self.ambiguous_text_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams { detail: format!("{name}={v} outside [0, 1]") });
            }
        }
        if self.ambiguous_image_frac + self.ambiguous_text_frac > 1.0 {
            return Err(Error::InvalidParams {
                detail: "ambiguous fractions must sum to at most 1".into(),
            });
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParams { detail: "noise_sigma must be >= 0".into() });
        }
        Ok(())
    }
}

/// Which modality (if any) of a sample was rendered ambiguously.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ambiguity {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "text")]
    Text,
}

/// One image/report pair with its class label (0 = VCD, 1 = GC).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub image: ImageTensor,
    pub report: String,
    pub label: usize,
    pub ambiguity: Ambiguity,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from (seed, sample index, stream tag).
pub(crate) fn mix(seed: u64, index: u64, stream: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ splitmix64(index));
    splitmix64(h ^ splitmix64(stream))
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, index as u64, stream))
}

/// Renders the image for a (label, ambiguity) pair from its own RNG stream.
/// The ambiguous rendering never reads the label, so two ambiguous samples
/// with the same stream but different labels produce identical pixels.
pub(crate) fn render_image(
    label: usize,
    ambiguity: Ambiguity,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let (radius, intensity) = if ambiguity == Ambiguity::Image {
        (AMBIGUOUS_RADIUS, AMBIGUOUS_INTENSITY)
    } else if label == 1 {
        (GC_RADIUS, GC_INTENSITY)
    } else {
        (VCD_RADIUS, VCD_INTENSITY)
    };
    let h = IMAGE_SIZE;
    let w = IMAGE_SIZE;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0f64; h * w];
    for p in pixels.iter_mut() {
        *p = rng.gen_range(0.1..0.3);
    }
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                pixels[y * w + x] = intensity;
            }
        }
    }
    let data: Vec<f32> = pixels
        .into_iter()
        .map(|p| {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            (p + noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(IMAGE_CHANNELS, h, w, data).expect("clamped pixels are valid")
}

/// Renders the report. Ambiguous text is the neutral template verbatim;
/// informative text is the class template with 1-2 filler tokens inserted.
pub(crate) fn render_report(label: usize, ambiguity: Ambiguity, rng: &mut ChaCha8Rng) -> String {
    if ambiguity == Ambiguity::Text {
        return NEUTRAL_TEMPLATE.to_string();
    }
    let template = if label == 1 { GC_TEMPLATE } else { VCD_TEMPLATE };
    let mut words: Vec<&str> = template.split(' ').collect();
    let inserts = rng.gen_range(1..=2);
    for _ in 0..inserts {
        let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
        let pos = rng.gen_range(0..=words.len());
        words.insert(pos, filler);
    }
    words.join(" ")
}

/// Deterministically generates the dataset: the output is a pure function
/// of the parameters. Per-sample randomness comes from streams derived from
/// (seed, sample index), so generation order does not matter.
pub fn generate(params: &GenParams) -> Result<Vec<PairedSample>> {
    params.validate()?;
    let mut samples = Vec::with_capacity(params.n_samples);
    for i in 0..params.n_samples {
        let label = if sample_rng(params.seed, i, 0).gen::<f64>() < params.class_prior_gc {
            1
        } else {
            0
        };
        let u = sample_rng(params.seed, i, 1).gen::<f64>();
        let ambiguity = if u < params.ambiguous_image_frac {
            Ambiguity::Image
        } else if u < params.ambiguous_image_frac + params.ambiguous_text_frac {
            Ambiguity::Text
        } else {
            Ambiguity::None
        };
        let report = render_report(label, ambiguity, &mut sample_rng(params.seed, i, 2));
        let image = render_image(label, ambiguity, params.noise_sigma, &mut sample_rng(params.seed, i, 3));
        samples.push(PairedSample { id: format!("s{i:06}"), image, report, label, ambiguity });
    }
    Ok(samples)
}

/// The modality an oracle (or model) is allowed to look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
    Fused,
}

/// Best achievable accuracy given the generator's latent parameters.
/// Informative renderings are assumed separable, which holds for
/// `noise_sigma <= 0.1` at the default rendering constants; ambiguous
/// renderings carry no class information, so the best guess there is the
/// larger prior.
pub fn bayes_accuracy(params: &GenParams, modality: Modality) -> Result<f64> {
    params.validate()?;
    if params.noise_sigma > 0.1 {
        return Err(Error::InvalidParams {
            detail: format!(
                "noise_sigma {} too large for a separable-rendering oracle (max 0.1)",
                params.noise_sigma
            ),
        });
    }
    let best_prior = params.class_prior_gc.max(1.0 - params.class_prior_gc);
    Ok(match modality {
        Modality::Image => {
            (1.0 - params.ambiguous_image_frac) + params.ambiguous_image_frac * best_prior
        }
        Modality::Text => {
            (1.0 - params.ambiguous_text_frac) + params.ambiguous_text_frac * best_prior
        }
        // Ambiguity buckets are disjoint, so every sample has at least one
        // informative modality.
        Modality::Fused => 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPart {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test")]
    Test,
}

impl SplitPart {
    pub fn parse(s: &str) -> Result<SplitPart> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// Disjoint, exhaustive train/val/test id lists.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[String] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

/// Seeded 8:1:1 split: train = floor(0.8 n), val = floor(0.1 n), test = rest.
pub fn split_ids(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::TooFewSamples { n, min: 10 });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0, SPLIT_STREAM));
    shuffled.shuffle(&mut rng);
    let n_train = (n as f64 * 0.8).floor() as usize;
    let n_val = (n as f64 * 0.1).floor() as usize;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test })
}

// ── persistence ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    label: usize,
    report: String,
    image: String,
    ambiguous: Ambiguity,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    id: String,
    split: SplitPart,
}

fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data.len() * 4);
    buf.extend_from_slice(IMAGE_MAGIC);
    for dim in [img.channels, img.height, img.width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_image(path: &Path) -> Result<ImageTensor> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(format!("{}: bad image magic", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = 16 + c * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: truncated image ({} bytes, expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::new(c, h, w, data)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes the manifest, image files, and split file under `dir`. The split
/// file lists train, then val, then test ids so a round trip preserves
/// order exactly.
pub fn save_dataset(samples: &[PairedSample], split: &DatasetSplit, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;

    let mut manifest = String::new();
    for s in samples {
        let rel = format!("images/{}.mmgi", s.id);
        write_image(&dir.join(&rel), &s.image)?;
        let record = ManifestRecord {
            id: s.id.clone(),
            label: s.label,
            report: s.report.clone(),
            image: rel,
            ambiguous: s.ambiguity,
        };
        manifest.push_str(&serde_json::to_string(&record).expect("manifest serializes"));
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;

    let mut splits = String::new();
    for (part, ids) in
        [(SplitPart::Train, &split.train), (SplitPart::Val, &split.val), (SplitPart::Test, &split.test)]
    {
        for id in ids {
            let record = SplitRecord { id: id.clone(), split: part };
            splits.push_str(&serde_json::to_string(&record).expect("split serializes"));
            splits.push('\n');
        }
    }
    let splits_path = dir.join("splits.jsonl");
    fs::write(&splits_path, splits)
        .map_err(|e| Error::io(format!("writing {}", splits_path.display()), e))
}

/// Loads a dataset directory written by [`save_dataset`]. The split must be
/// a disjoint, exhaustive partition of the manifest ids.
pub fn load_dataset(dir: &Path) -> Result<(Vec<PairedSample>, DatasetSplit)> {
    let manifest_path = dir.join("manifest.jsonl");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let mut samples = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("manifest record: {e}")))?;
        if record.label > 1 {
            return Err(Error::format(format!("sample {}: label {} not in {{0,1}}", record.id, record.label)));
        }
        let image_path = dir.join(&record.image);
        if !image_path.exists() {
            return Err(Error::io(
                format!("sample {}: image file {} missing", record.id, image_path.display()),
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
        let image = read_image(&image_path)?;
        samples.push(PairedSample {
            id: record.id,
            image,
            report: record.report,
            label: record.label,
            ambiguity: record.ambiguous,
        });
    }

    let splits_path = dir.join("splits.jsonl");
    let splits_text = fs::read_to_string(&splits_path)
        .map_err(|e| Error::io(format!("reading {}", splits_path.display()), e))?;
    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for line in splits_text.lines().filter(|l| !l.trim().is_empty()) {
        let record: SplitRecord =
            serde_json::from_str(line).map_err(|e| Error::format(format!("split record: {e}")))?;
        match record.split {
            SplitPart::Train => split.train.push(record.id),
            SplitPart::Val => split.val.push(record.id),
            SplitPart::Test => split.test.push(record.id),
        }
    }

    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    let mut assigned = 0usize;
    for part in [&split.train, &split.val, &split.test] {
        for id in part {
            if !seen.insert(id.as_str()) {
                return Err(Error::format(format!("id {id} assigned to multiple splits")));
            }
            assigned += 1;
        }
    }
    if assigned != samples.len() || !samples.iter().all(|s| seen.contains(s.id.as_str())) {
        return Err(Error::format(format!(
            "split covers {assigned} ids but the manifest has {}",
            samples.len()
        )));
    }
    Ok((samples, split))
}
