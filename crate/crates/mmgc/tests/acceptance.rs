//! Acceptance suite. Each criterion is one test that prints a PASS line;
//! a failed assertion is the FAIL line. Criterion 2 trains the full
//! three-variant ablation at default scale and dominates the runtime.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmgc::checkpoint::Checkpoint;
use mmgc::config::{ModelConfig, RunConfig, Variant};
use mmgc::data::{self, generate, split_ids, GenParams, SplitPart};
use mmgc::gradcheck::run_component_suite;
use mmgc::metrics::{metrics_from_predictions, MetricsReport};
use mmgc::model::Network;
use mmgc::nn::ParamStore;
use mmgc::optim::{AdamW, Schedule};
use mmgc::tensor::Tape;
use mmgc::text::{TokenSequence, Vocabulary};
use mmgc::train::{self, Dataset, TrainOptions};
use mmgc::vision::ImageTensor;

fn default_dataset(n: usize, seed: u64) -> Dataset {
    let params = GenParams { n_samples: n, seed, ..GenParams::default() };
    let samples = generate(&params).unwrap();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(&ids, seed).unwrap();
    let vocab =
        Vocabulary::build(&samples.iter().map(|s| s.report.as_str()).collect::<Vec<_>>()).unwrap();
    Dataset::new(samples, split, vocab).unwrap()
}

fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        d_model: 16,
        vit_depth: 1,
        heads: 2,
        queries: 2,
        qformer_depth: 1,
        d_text: 16,
        text_depth: 1,
        d_proj: 16,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let rows = run_component_suite().expect("suite runs");
    let elapsed = start.elapsed();
    assert!(rows.len() >= 8, "only {} components", rows.len());
    for row in &rows {
        assert!(
            row.max_rel_err <= 1e-5,
            "{} rel err {} above 1e-5",
            row.name,
            row.max_rel_err
        );
    }
    for name in ["forward_m1", "forward_m2", "forward_m3"] {
        assert!(rows.iter().any(|r| r.name == name), "{name} missing from suite");
    }
    assert!(elapsed.as_secs() < 120, "suite took {elapsed:?}, budget is 2 minutes");
    println!(
        "ACCEPTANCE 1 (gradient correctness): PASS — {} components, worst {:.3e}, {:?}",
        rows.len(),
        rows.iter().map(|r| r.max_rel_err).fold(0.0f64, f64::max),
        elapsed
    );
}

#[test]
fn criterion_2_fusion_dominance() {
    let ds = default_dataset(2000, 7);
    let cfg = RunConfig::default();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let results = train::run_ablation::<f32>(&cfg, &ds, 5, 0, jobs).expect("ablation runs");

    let acc = |v: Variant| {
        results.rows.iter().find(|r| r.variant == v).expect("variant row").summary.mean.accuracy
    };
    let (m1, m2, m3) = (acc(Variant::M1), acc(Variant::M2), acc(Variant::M3));
    assert!(m3 >= 0.93, "M3 mean accuracy {m3:.4} below 0.93");
    assert!(m1 <= 0.88, "M1 mean accuracy {m1:.4} above 0.88");
    assert!(m2 <= 0.88, "M2 mean accuracy {m2:.4} above 0.88");
    assert!(
        m3 - m1.max(m2) >= 0.05,
        "fusion margin {:.4} below 0.05 (m1 {m1:.4}, m2 {m2:.4}, m3 {m3:.4})",
        m3 - m1.max(m2)
    );
    println!(
        "ACCEPTANCE 2 (fusion dominance): PASS — M1 {m1:.4}, M2 {m2:.4}, M3 {m3:.4}, margin {:.4}",
        m3 - m1.max(m2)
    );
}

#[test]
fn criterion_3_single_modality_invariance() {
    let ds = default_dataset(160, 21);
    let cfg = small_run_config();

    // m1: noise reports must leave every test logit bit-identical.
    let outcome = train::train::<f32>(&cfg, Variant::M1, &ds, 1).unwrap();
    let net: Network<f32> = outcome.checkpoint.into_network().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for id in ds.split.part(SplitPart::Test) {
        let sample = ds.sample(id);
        let seq = ds.vocab.tokenize(&sample.report, net.config.max_len);
        let noise_words: Vec<String> =
            (0..rng.gen_range(1..10)).map(|_| format!("junk{}", rng.gen::<u32>())).collect();
        let noise_seq = ds.vocab.tokenize(&noise_words.join(" "), net.config.max_len);
        let logits = |s: &TokenSequence| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = net.bind(&mut tape, true).unwrap();
            let out = net.forward(&mut tape, &bound, Some(&sample.image), Some(s), None).unwrap();
            tape.data(out.logits).iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(logits(&seq), logits(&noise_seq), "m1 logits moved for {id}");
    }

    // m2: noise images must leave every test logit bit-identical.
    let outcome2 = train::train::<f32>(&cfg, Variant::M2, &ds, 1).unwrap();
    let net2: Network<f32> = outcome2.checkpoint.into_network().unwrap();
    for id in ds.split.part(SplitPart::Test) {
        let sample = ds.sample(id);
        let seq = ds.vocab.tokenize(&sample.report, net2.config.max_len);
        let noise: Vec<f32> = (0..sample.image.data.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let noise_img = ImageTensor::new(
            sample.image.channels,
            sample.image.height,
            sample.image.width,
            noise,
        )
        .unwrap();
        let logits = |img: &ImageTensor| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = net2.bind(&mut tape, true).unwrap();
            let out = net2.forward(&mut tape, &bound, Some(img), Some(&seq), None).unwrap();
            tape.data(out.logits).iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(logits(&sample.image), logits(&noise_img), "m2 logits moved for {id}");
    }
    println!("ACCEPTANCE 3 (single-modality invariance): PASS — bit-identical logits under noise");
}

#[test]
fn criterion_4_normalization_invariants() {
    let cfg = ModelConfig { vocab_size: 8, ..ModelConfig::default() };
    let net: Network<f32> = Network::new(cfg, 5).unwrap();
    let d = net.config.d_model;
    let d_t = net.config.d_text;
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for _ in 0..10_000 {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..d_t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape: Tape<f32> = Tape::new();
        let bound = net.bind(&mut tape, true).unwrap();
        let vi = tape.leaf_f64(&v, &[1, d], false).unwrap();
        let ti = tape.leaf_f64(&t, &[1, d_t], false).unwrap();
        let vp = net.head.project_vision(&mut tape, &bound, vi).unwrap();
        let tp = net.head.project_text(&mut tape, &bound, ti).unwrap();
        let vn = tape.l2_normalize(vp).unwrap();
        let tn = tape.l2_normalize(tp).unwrap();
        let norm = |xs: &[f32]| xs.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
        let nv = norm(tape.data(vn));
        let nt = norm(tape.data(tn));
        assert!((nv - 1.0).abs() <= 1e-5, "|v''| = {nv}");
        assert!((nt - 1.0).abs() <= 1e-5, "|t''| = {nt}");

        let g = net.head.fuse(&mut tape, Some(vn), Some(tn)).unwrap();
        let sq: f64 = tape.data(g).iter().map(|x| (*x as f64) * (*x as f64)).sum();
        assert!((sq - 2.0).abs() <= 1e-4, "|g|^2 = {sq}");

        let (_, probs) = net.head.classify(&mut tape, &bound, g).unwrap();
        let sum: f64 = tape.data(probs).iter().map(|p| *p as f64).sum();
        assert!((sum - 1.0).abs() <= 1e-6, "sum(yhat) = {sum}");
    }
    println!("ACCEPTANCE 4 (normalization invariants): PASS — 10^4 random forwards in bounds");
}

/// Brute-force confusion-matrix oracle, written independently of the
/// library's metric code: explicit counting loops and the textbook
/// formulas, with degenerate classes contributing zero.
fn oracle_metrics(preds: &[usize], labels: &[usize]) -> MetricsReport {
    let n = preds.len();
    let mut tp = [0usize; 2];
    let mut fp = [0usize; 2];
    let mut fn_ = [0usize; 2];
    let mut correct = 0usize;
    for i in 0..n {
        if preds[i] == labels[i] {
            correct += 1;
        }
        for c in 0..2 {
            if preds[i] == c && labels[i] == c {
                tp[c] += 1;
            }
            if preds[i] == c && labels[i] != c {
                fp[c] += 1;
            }
            if preds[i] != c && labels[i] == c {
                fn_[c] += 1;
            }
        }
    }
    let prec = |c: usize| {
        if tp[c] + fp[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        }
    };
    let rec = |c: usize| {
        if tp[c] + fn_[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fn_[c]) as f64
        }
    };
    let f1 = |c: usize| {
        let (p, r) = (prec(c), rec(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    MetricsReport {
        accuracy: correct as f64 / n as f64,
        precision: (prec(0) + prec(1)) / 2.0,
        recall: (rec(0) + rec(1)) / 2.0,
        f1: (f1(0) + f1(1)) / 2.0,
        recall_per_class: mmgc::metrics::PerClassRecall { vcd: rec(0), gc: rec(1) },
    }
}

#[test]
fn criterion_5_metrics_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut cases: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    // Degenerate cases first: constant predictors, constant labels,
    // single-element sets.
    cases.push((vec![0; 8], (0..8).map(|i| i % 2).collect()));
    cases.push((vec![1; 8], (0..8).map(|i| i % 2).collect()));
    cases.push(((0..8).map(|i| i % 2).collect(), vec![0; 8]));
    cases.push(((0..8).map(|i| i % 2).collect(), vec![1; 8]));
    cases.push((vec![0], vec![1]));
    cases.push((vec![1], vec![1]));
    while cases.len() < 1000 {
        let n = rng.gen_range(1..60);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        cases.push((preds, labels));
    }
    for (preds, labels) in &cases {
        let ours = metrics_from_predictions(preds, labels);
        let oracle = oracle_metrics(preds, labels);
        assert_eq!(ours, oracle, "mismatch on preds={preds:?} labels={labels:?}");
    }
    println!("ACCEPTANCE 5 (metrics oracle equivalence): PASS — {} cases exact", cases.len());
}

#[test]
fn criterion_6_capacity_overfits_32_samples() {
    // n = 40 gives a train split of exactly floor(0.8 * 40) = 32 samples.
    let ds = default_dataset(40, 13);
    assert_eq!(ds.split.train.len(), 32);
    let mut cfg = RunConfig::default();
    cfg.train.epochs = 200;
    for seed in [0u64, 1, 2] {
        let outcome = train::train_with_options::<f32>(
            &cfg,
            Variant::M3,
            &ds,
            seed,
            TrainOptions { eval_train: true, stop_at_perfect_train: true, resume_from: None },
        )
        .unwrap();
        let reached = outcome.epoch_train.iter().any(|m| m.accuracy == 1.0);
        assert!(
            reached,
            "seed {seed}: train accuracy never hit 100% in {} epochs",
            outcome.epochs_run
        );
    }
    println!("ACCEPTANCE 6 (capacity): PASS — 100% train accuracy within 200 epochs on 3 seeds");
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let ds = default_dataset(60, 31);
    let cfg = small_run_config();

    // Identical (config, data, seed) -> identical metrics, bit for bit.
    let a = train::train::<f32>(&cfg, Variant::M3, &ds, 9).unwrap();
    let b = train::train::<f32>(&cfg, Variant::M3, &ds, 9).unwrap();
    let json_a = serde_json::to_string(&a.test).unwrap();
    let json_b = serde_json::to_string(&b.test).unwrap();
    assert_eq!(json_a, json_b);
    assert_eq!(
        serde_json::to_string(&a.epoch_val).unwrap(),
        serde_json::to_string(&b.epoch_val).unwrap()
    );
    assert_eq!(a.checkpoint.tensors, b.checkpoint.tensors);

    // Dataset round trip is bit-exact.
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    std::fs::create_dir_all(&ds_dir).unwrap();
    data::save_dataset(&ds.samples, &ds.split, &ds_dir).unwrap();
    let (loaded, loaded_split) = data::load_dataset(&ds_dir).unwrap();
    assert_eq!(loaded, ds.samples);
    assert_eq!(loaded_split, ds.split);

    // Checkpoint round trip is bit-exact.
    let ckpt_path = dir.path().join("model.ckpt");
    a.checkpoint.save(&ckpt_path).unwrap();
    let reloaded = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(reloaded, a.checkpoint);
    let ckpt_path2 = dir.path().join("model2.ckpt");
    reloaded.save(&ckpt_path2).unwrap();
    assert_eq!(std::fs::read(&ckpt_path).unwrap(), std::fs::read(&ckpt_path2).unwrap());

    // Corruption yields FormatError, never garbage output.
    let mut bytes = std::fs::read(&ckpt_path).unwrap();
    bytes[0] = b'Z';
    std::fs::write(dir.path().join("bad.ckpt"), &bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(&dir.path().join("bad.ckpt")),
        Err(mmgc::Error::FormatError { .. })
    ));
    let img_path = ds_dir.join("images/s000000.mmgi");
    let mut img_bytes = std::fs::read(&img_path).unwrap();
    img_bytes[2] = b'!';
    std::fs::write(&img_path, &img_bytes).unwrap();
    assert!(matches!(data::load_dataset(&ds_dir), Err(mmgc::Error::FormatError { .. })));

    println!("ACCEPTANCE 7 (determinism & persistence): PASS");
}

#[test]
fn criterion_8_schedule_and_optimizer_anchors() {
    // lr_at(warmup) equals the peak, with the peak pinned to the
    // fine-tuning value 1e-5.
    let sched = Schedule::new(1e-5, 25, 250).unwrap();
    let lr = sched.lr_at(25).unwrap();
    assert!((lr - 1e-5).abs() < 1e-18, "lr at warmup = {lr}");

    // First AdamW step on (w=1, g=0.5, lr=0.1, decay=0.01) lands at 0.899.
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = store.add_uniform("w", vec![1], 1, true, &mut rng);
    store.data_mut(p)[0] = 1.0;
    let mut opt = AdamW::new(&store, 0.01);
    let mut tape: Tape<f64> = Tape::new();
    let bound = store.bind(&mut tape, false).unwrap();
    let half = tape.leaf(vec![0.5], vec![1], false).unwrap();
    let prod = tape.mul(bound.id(p), half).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    opt.apply(&mut store, &mut tape, &bound, 0.1).unwrap();
    let w = store.entry(p).data[0];
    assert!((w - 0.899).abs() <= 1e-6, "first AdamW step gave {w}");

    // Cross-entropy of the uniform prediction is ln 2.
    let mut tape2: Tape<f64> = Tape::new();
    let z = tape2.leaf(vec![0.0, 0.0], vec![2], false).unwrap();
    let ce = tape2.cross_entropy(z, 0).unwrap();
    assert!((tape2.scalar_value(ce) - std::f64::consts::LN_2).abs() <= 1e-6);

    println!("ACCEPTANCE 8 (unit anchors): PASS");
}
