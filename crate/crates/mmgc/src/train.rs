//! Training loop, evaluation, multi-seed trials, and the three-variant
//! ablation runner.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::{RunConfig, Variant};
use crate::data::{self, DatasetSplit, PairedSample, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::{metrics_from_predictions, summarize, MetricsReport, MetricsSummary};
use crate::model::Network;
use crate::optim::{AdamW, Schedule};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use crate::text::{TokenSequence, Vocabulary};

const SHUFFLE_STREAM: u64 = 0xE70C;

/// Samples, split, and vocabulary bundled for training and evaluation.
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub split: DatasetSplit,
    pub vocab: Vocabulary,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        samples: Vec<PairedSample>,
        split: DatasetSplit,
        vocab: Vocabulary,
    ) -> Result<Dataset> {
        let by_id: HashMap<String, usize> =
            samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        for part in [&split.train, &split.val, &split.test] {
            for id in part {
                if !by_id.contains_key(id) {
                    return Err(Error::format(format!("split references unknown id {id}")));
                }
            }
        }
        Ok(Dataset { samples, split, vocab, by_id })
    }

    /// Loads the directory layout written by `gen-data`.
    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let (samples, split) = data::load_dataset(dir)?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        Dataset::new(samples, split, vocab)
    }

    pub fn sample(&self, id: &str) -> &PairedSample {
        &self.samples[self.by_id[id]]
    }

    fn indices_of(&self, part: SplitPart) -> Vec<usize> {
        self.split.part(part).iter().map(|id| self.by_id[id]).collect()
    }
}

/// Per-epoch evaluation trace and the selected checkpoint of one run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub epoch_val: Vec<MetricsReport>,
    pub epoch_train: Vec<MetricsReport>,
    pub epochs_run: usize,
    pub test: MetricsReport,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Also evaluate the train split each epoch (capacity experiments).
    pub eval_train: bool,
    /// Stop as soon as train accuracy reaches 1.0 (requires `eval_train`).
    pub stop_at_perfect_train: bool,
    /// Start from these weights instead of seeded initialization.
    pub resume_from: Option<&'a Checkpoint>,
}

/// Trains one model. Deterministic function of (config, dataset, seed):
/// seeded init, per-epoch seeded shuffles, minibatch AdamW steps under the
/// warmup+cosine schedule, validation after every epoch, and best-val
/// checkpoint selection (ties keep the earlier epoch).
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    variant: Variant,
    ds: &Dataset,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_options::<T>(cfg, variant, ds, seed, TrainOptions::default())
}

pub fn train_with_options<T: Scalar>(
    cfg: &RunConfig,
    variant: Variant,
    ds: &Dataset,
    seed: u64,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = ds.vocab.len();
    model_cfg.variant = variant;

    let mut net: Network<T> = Network::new(model_cfg.clone(), seed)?;
    if let Some(ckpt) = opts.resume_from {
        net.restore_into_self(ckpt)?;
    }

    let tokens: Vec<TokenSequence> =
        ds.samples.iter().map(|s| ds.vocab.tokenize(&s.report, model_cfg.max_len)).collect();

    let train_indices = ds.indices_of(SplitPart::Train);
    if train_indices.is_empty() {
        return Err(Error::TooFewSamples { n: 0, min: 1 });
    }
    let batches_per_epoch = train_indices.len().div_ceil(cfg.train.batch_size);
    let total_steps = cfg.train.epochs * batches_per_epoch;
    let warmup = (total_steps as f64 * cfg.train.warmup_frac).floor() as usize;
    let sched = Schedule::new(cfg.train.peak_lr, warmup, total_steps)?;
    let mut opt = AdamW::new(&net.store, cfg.train.weight_decay);

    let mut best: Option<(f64, usize, Vec<crate::checkpoint::NamedTensor>)> = None;
    let mut epoch_val = Vec::new();
    let mut epoch_train = Vec::new();
    let mut global_step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.train.epochs {
        let mut order = train_indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(data::mix(seed, epoch as u64, SHUFFLE_STREAM));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.train.batch_size) {
            let mut tape: Tape<T> = Tape::new();
            let bound = net.bind(&mut tape, false)?;
            let mut batch_loss = None;
            for &idx in batch {
                let sample = &ds.samples[idx];
                let out = net.forward(
                    &mut tape,
                    &bound,
                    variant.uses_image().then_some(&sample.image),
                    variant.uses_text().then(|| &tokens[idx]),
                    Some(sample.label),
                )?;
                let loss = out.loss.expect("labelled forward produces a loss");
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
            tape.backward(mean)?;
            let lr = sched.lr_at(global_step)?;
            opt.apply(&mut net.store, &mut tape, &bound, lr)?;
            global_step += 1;
        }
        epochs_run = epoch + 1;

        let val = evaluate_network(&net, ds, &tokens, SplitPart::Val)?;
        let is_better = best.as_ref().map_or(true, |(acc, _, _)| val.accuracy > *acc);
        if is_better {
            let snapshot = snapshot_tensors(&net);
            best = Some((val.accuracy, epoch, snapshot));
        }
        epoch_val.push(val);

        if opts.eval_train {
            let tr = evaluate_network(&net, ds, &tokens, SplitPart::Train)?;
            let perfect = tr.accuracy == 1.0;
            epoch_train.push(tr);
            if opts.stop_at_perfect_train && perfect {
                break;
            }
        }
    }

    let (_, best_epoch, best_tensors) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        tensors: best_tensors,
        meta: CheckpointMeta {
            config: model_cfg,
            seed,
            epoch: best_epoch,
            vocab: ds.vocab.tokens().to_vec(),
            vocab_path: "vocab.txt".to_string(),
        },
    };
    checkpoint.restore_into(&mut net)?;
    let test = evaluate_network(&net, ds, &tokens, SplitPart::Test)?;

    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        epoch_val,
        epoch_train,
        epochs_run,
        test,
    })
}

fn snapshot_tensors<T: Scalar>(net: &Network<T>) -> Vec<crate::checkpoint::NamedTensor> {
    net.store
        .entries()
        .map(|(_, e)| crate::checkpoint::NamedTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|v| v.to_f64() as f32).collect(),
        })
        .collect()
}

impl<T: Scalar> Network<T> {
    fn restore_into_self(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.restore_into(self)
    }
}

/// Argmax prediction with ties resolved to class 0.
fn predict<T: Scalar>(probs: &[T]) -> usize {
    usize::from(probs[1].to_f64() > probs[0].to_f64())
}

fn evaluate_network<T: Scalar>(
    net: &Network<T>,
    ds: &Dataset,
    tokens: &[TokenSequence],
    part: SplitPart,
) -> Result<MetricsReport> {
    let variant = net.head.variant;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for idx in ds.indices_of(part) {
        let sample = &ds.samples[idx];
        let mut tape: Tape<T> = Tape::new();
        let bound = net.bind(&mut tape, true)?;
        let out = net.forward(
            &mut tape,
            &bound,
            variant.uses_image().then_some(&sample.image),
            variant.uses_text().then(|| &tokens[idx]),
            None,
        )?;
        preds.push(predict(tape.data(out.probs)));
        labels.push(sample.label);
    }
    Ok(metrics_from_predictions(&preds, &labels))
}

/// Evaluates a checkpoint on one split of a dataset. The checkpoint's
/// embedded vocabulary is used for tokenization; the dataset only supplies
/// samples and the split.
pub fn evaluate<T: Scalar>(
    ckpt: &Checkpoint,
    ds: &Dataset,
    part: SplitPart,
) -> Result<MetricsReport> {
    let vocab = Vocabulary::from_token_list(ckpt.meta.vocab.clone())?;
    let net: Network<T> = ckpt.into_network()?;
    if net.config.vocab_size != vocab.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "checkpoint vocab has {} tokens but config says {}",
                vocab.len(),
                net.config.vocab_size
            ),
        });
    }
    let tokens: Vec<TokenSequence> =
        ds.samples.iter().map(|s| vocab.tokenize(&s.report, net.config.max_len)).collect();
    evaluate_network(&net, ds, &tokens, part)
}

/// Results of `n_trials` independently seeded runs of one variant.
#[derive(Serialize)]
pub struct TrialResults {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    pub summary: MetricsSummary,
}

/// Runs trials with seeds `base_seed .. base_seed + n_trials`, reporting
/// test-split metrics per trial plus mean and population std.
pub fn run_trials<T: Scalar>(
    cfg: &RunConfig,
    variant: Variant,
    ds: &Dataset,
    n_trials: usize,
    base_seed: u64,
) -> Result<TrialResults> {
    if n_trials == 0 {
        return Err(Error::InvalidParams { detail: "n_trials must be positive".into() });
    }
    let seeds: Vec<u64> = (0..n_trials as u64).map(|i| base_seed + i).collect();
    let reports: Vec<MetricsReport> = seeds
        .iter()
        .map(|&seed| train::<T>(cfg, variant, ds, seed).map(|o| o.test))
        .collect::<Result<_>>()?;
    let summary = summarize(&reports);
    Ok(TrialResults { variant, seeds, reports, summary })
}

/// Table-shaped ablation output: one row per variant over identical
/// dataset, split, and seeds.
#[derive(Serialize)]
pub struct AblationResults {
    pub rows: Vec<TrialResults>,
}

/// Runs every (variant, seed) pair, optionally fanning out over `jobs`
/// worker threads. Results are merged in (variant, seed) order regardless
/// of scheduling, so the output is independent of `jobs`.
pub fn run_ablation<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    n_trials: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<AblationResults> {
    if n_trials == 0 {
        return Err(Error::InvalidParams { detail: "n_trials must be positive".into() });
    }
    let variants = [Variant::M1, Variant::M2, Variant::M3];
    let tasks: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| (0..n_trials as u64).map(move |i| (v, base_seed + i)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParams { detail: format!("thread pool: {e}") })?;
    let outcomes: Vec<Result<MetricsReport>> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .map(|&(variant, seed)| train::<T>(cfg, variant, ds, seed).map(|o| o.test))
            .collect()
    });

    let mut rows = Vec::new();
    let mut iter = outcomes.into_iter();
    for &variant in &variants {
        let mut reports = Vec::with_capacity(n_trials);
        let mut seeds = Vec::with_capacity(n_trials);
        for i in 0..n_trials as u64 {
            seeds.push(base_seed + i);
            reports.push(iter.next().expect("one outcome per task")?);
        }
        let summary = summarize(&reports);
        rows.push(TrialResults { variant, seeds, reports, summary });
    }
    Ok(AblationResults { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{generate, split_ids, GenParams};

    pub(crate) fn tiny_dataset(n: usize, gen_seed: u64) -> Dataset {
        let params = GenParams { n_samples: n, seed: gen_seed, ..GenParams::default() };
        let samples = generate(&params).unwrap();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let split = split_ids(&ids, 99).unwrap();
        let vocab = Vocabulary::build(
            &samples.iter().map(|s| s.report.as_str()).collect::<Vec<_>>(),
        )
        .unwrap();
        Dataset::new(samples, split, vocab).unwrap()
    }

    pub(crate) fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            image_channels: 1,
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            d_model: 16,
            vit_depth: 1,
            heads: 2,
            queries: 2,
            qformer_depth: 1,
            d_text: 16,
            text_depth: 1,
            max_len: 12,
            d_proj: 16,
            ..ModelConfig::default()
        };
        cfg.train.epochs = 2;
        cfg.train.batch_size = 8;
        cfg
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset(40, 5);
        let cfg = tiny_cfg();
        let a = train::<f32>(&cfg, Variant::M3, &ds, 1).unwrap();
        let b = train::<f32>(&cfg, Variant::M3, &ds, 1).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.epoch_val, b.epoch_val);
        assert_eq!(a.checkpoint.tensors, b.checkpoint.tensors);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn m1_leaves_text_params_at_init() {
        let ds = tiny_dataset(40, 6);
        let cfg = tiny_cfg();
        let outcome = train::<f32>(&cfg, Variant::M1, &ds, 2).unwrap();

        let mut model_cfg = cfg.model.clone();
        model_cfg.vocab_size = ds.vocab.len();
        model_cfg.variant = Variant::M1;
        let fresh: Network<f32> = Network::new(model_cfg, 2).unwrap();
        let init_text = fresh.store.by_name("report.token_emb").unwrap().1.data.clone();
        let trained_text = outcome
            .checkpoint
            .tensors
            .iter()
            .find(|t| t.name == "report.token_emb")
            .unwrap();
        assert_eq!(trained_text.data, init_text);

        // And the image path did move.
        let init_vit = fresh.store.by_name("vit.patch_proj.weight").unwrap().1.data.clone();
        let trained_vit = outcome
            .checkpoint
            .tensors
            .iter()
            .find(|t| t.name == "vit.patch_proj.weight")
            .unwrap();
        assert_ne!(trained_vit.data, init_vit);
    }

    #[test]
    fn evaluate_checkpoint_reproduces_recorded_test_metrics() {
        let ds = tiny_dataset(40, 7);
        let cfg = tiny_cfg();
        let outcome = train::<f32>(&cfg, Variant::M3, &ds, 3).unwrap();
        let again = evaluate::<f32>(&outcome.checkpoint, &ds, SplitPart::Test).unwrap();
        assert_eq!(again, outcome.test);
    }

    #[test]
    fn first_epoch_loss_decreases_on_tiny_run() {
        // Smoke property over three seeds: validation accuracy after two
        // epochs should beat random guessing on the easy synthetic task.
        let ds = tiny_dataset(60, 8);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 3;
        for seed in [0u64, 1, 2] {
            let outcome = train::<f32>(&cfg, Variant::M3, &ds, seed).unwrap();
            let last = outcome.epoch_val.last().unwrap().accuracy;
            assert!(last >= 0.5, "seed {seed}: val accuracy {last}");
        }
    }

    #[test]
    fn run_trials_single_trial_has_zero_std() {
        let ds = tiny_dataset(40, 9);
        let cfg = tiny_cfg();
        let trials = run_trials::<f32>(&cfg, Variant::M2, &ds, 1, 5).unwrap();
        assert_eq!(trials.summary.std.accuracy, 0.0);
        assert_eq!(trials.reports.len(), 1);
    }

    #[test]
    fn ablation_rows_and_job_independence() {
        let ds = tiny_dataset(40, 10);
        let mut cfg = tiny_cfg();
        cfg.train.epochs = 1;
        let a = run_ablation::<f32>(&cfg, &ds, 2, 0, 1).unwrap();
        let b = run_ablation::<f32>(&cfg, &ds, 2, 0, 2).unwrap();
        assert_eq!(a.rows.len(), 3);
        assert_eq!(
            a.rows.iter().map(|r| r.variant).collect::<Vec<_>>(),
            vec![Variant::M1, Variant::M2, Variant::M3]
        );
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.reports, rb.reports);
        }
    }
}
