//! Central-difference gradient verification.
//!
//! [`finite_diff_check`] compares the reverse-mode gradient of a scalar
//! function against `(f(x+h) - f(x-h)) / 2h`, elementwise, and reports the
//! worst relative error with denominator `max(|a|, |b|, 1e-8)`. It is the
//! independent oracle for every differentiable block in this crate.
//! [`run_component_suite`] sweeps it (in f64) over every primitive op,
//! every block, and the three full forward variants at micro scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::model::Network;
use crate::nn::{Attention, AttnMask, Bound, Linear, ParamStore, TransformerBlock};
use crate::scalar::Scalar;
use crate::tensor::{rel_err, Tape, TensorId};
use crate::text::TokenSequence;
use crate::vision::ImageTensor;

/// Checks the autodiff gradient of `f` with respect to the single input
/// tensor `x`. Returns the maximum relative error over all coordinates.
///
/// `f` must build a scalar loss from the given tensor id on a fresh tape.
pub fn finite_diff_check<T, F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    let mut tape: Tape<T> = Tape::new();
    let xid = tape.leaf_f64(x, shape, true)?;
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape.grad(xid).expect("leaf gradient").iter().map(|v| v.to_f64()).collect();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t: Tape<T> = Tape::new();
        let id = t.leaf_f64(data, shape, false)?;
        let l = f(&mut t, id)?;
        Ok(t.scalar_value(l))
    };

    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = eval(&probe)?;
        probe[i] = x[i] - h;
        let fm = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Per-coordinate central difference evaluated at the given step and at
/// 10x the step, keeping the better-conditioned estimate. Truncation error
/// shrinks with the step while roundoff noise grows as it shrinks, and no
/// single step suits both a high-curvature coordinate and a near-zero
/// gradient one.
fn best_fd_err(
    analytic: f64,
    h: f64,
    mut eval_at: impl FnMut(f64) -> Result<f64>,
) -> Result<f64> {
    let mut best = f64::INFINITY;
    for step in [h, 10.0 * h] {
        let fp = eval_at(step)?;
        let fm = eval_at(-step)?;
        let numeric = (fp - fm) / (2.0 * step);
        best = best.min(rel_err(analytic, numeric));
    }
    Ok(best)
}

/// Checks every trainable parameter of a store against central differences.
/// `forward` must rebuild the same scalar loss from a fresh tape each call.
pub fn check_store_params<F>(store: &mut ParamStore<f64>, forward: F, h: f64) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>, &Bound) -> Result<TensorId>,
{
    let mut tape: Tape<f64> = Tape::new();
    let bound = store.bind(&mut tape, false)?;
    let loss = forward(store, &mut tape, &bound)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Vec<f64>>> = store
        .entries()
        .map(|(p, _)| tape.grad(bound.id(p)).map(|g| g.to_vec()))
        .collect();

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t: Tape<f64> = Tape::new();
        let b = store.bind(&mut t, true)?;
        let l = forward(store, &mut t, &b)?;
        Ok(t.scalar_value(l))
    };

    let mut worst = 0.0f64;
    let param_ids: Vec<_> = store.entries().map(|(p, _)| p).collect();
    for p in param_ids {
        let Some(analytic) = &grads[p.0] else { continue };
        for i in 0..analytic.len() {
            let orig = store.entry(p).data[i];
            let err = best_fd_err(analytic[i], h, |delta| {
                store.data_mut(p)[i] = orig + delta;
                let v = eval(store);
                store.data_mut(p)[i] = orig;
                v
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One row of the verification report.
#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        image_channels: 1,
        image_height: 8,
        image_width: 8,
        patch_size: 4,
        d_model: 8,
        vit_depth: 1,
        heads: 2,
        queries: 2,
        qformer_depth: 1,
        d_text: 8,
        text_depth: 1,
        max_len: 4,
        d_proj: 8,
        projector_depth: 1,
        classifier_depth: 1,
        freeze_image: false,
        freeze_text: false,
        vocab_size: 6,
        variant,
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rand::Rng::gen_range(rng, -scale..scale)).collect()
}

/// Weights a tensor by fixed pseudo-random coefficients and sums, so the
/// probed function has a non-degenerate gradient even through row-stochastic
/// or norm-preserving ops.
fn weighted_sum(tape: &mut Tape<f64>, x: TensorId, salt: u64) -> Result<TensorId> {
    let n = tape.numel(x);
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = tape.leaf(rand_vec(&mut rng, n, 1.5), shape, false)?;
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

fn micro_image(value_seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(value_seed);
    let data: Vec<f32> =
        (0..64).map(|_| rand::Rng::gen_range(&mut rng, 0.0f32..1.0f32)).collect();
    ImageTensor::new(1, 8, 8, data).expect("valid micro image")
}

/// Runs the full 64-bit verification suite. Every component row reports the
/// worst finite-difference relative error across its probed tensors.
pub fn run_component_suite() -> Result<Vec<ComponentReport>> {
    let h = f64::FD_STEP;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut rows = Vec::new();

    // ── primitive ops, probed through the single-tensor checker ────────
    let b_data = rand_vec(&mut rng, 12, 1.0);
    let err_a = finite_diff_check::<f64, _>(
        |tape, a| {
            let b = tape.leaf(b_data.clone(), vec![4, 3], false)?;
            let c = tape.matmul(a, b)?;
            weighted_sum(tape, c, 1)
        },
        &rand_vec(&mut rng, 12, 1.0),
        &[3, 4],
        h,
    )?;
    rows.push(ComponentReport { name: "matmul", max_rel_err: err_a });

    let err = finite_diff_check::<f64, _>(
        |tape, x| {
            let s = tape.softmax(x, 1)?;
            weighted_sum(tape, s, 2)
        },
        &rand_vec(&mut rng, 12, 2.0),
        &[3, 4],
        h,
    )?;
    rows.push(ComponentReport { name: "softmax", max_rel_err: err });

    let gamma = rand_vec(&mut rng, 4, 1.0);
    let beta = rand_vec(&mut rng, 4, 1.0);
    let err = finite_diff_check::<f64, _>(
        |tape, x| {
            let g = tape.leaf(gamma.clone(), vec![4], true)?;
            let b = tape.leaf(beta.clone(), vec![4], true)?;
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            weighted_sum(tape, y, 3)
        },
        &rand_vec(&mut rng, 8, 1.0),
        &[2, 4],
        h,
    )?;
    rows.push(ComponentReport { name: "layer_norm", max_rel_err: err });

    let err = finite_diff_check::<f64, _>(
        |tape, x| {
            let y = tape.gelu(x)?;
            weighted_sum(tape, y, 4)
        },
        &rand_vec(&mut rng, 6, 2.0),
        &[6],
        h,
    )?;
    rows.push(ComponentReport { name: "gelu", max_rel_err: err });

    let err = finite_diff_check::<f64, _>(
        |tape, table| {
            let e = tape.embed_rows(table, &[0, 2, 2, 1])?;
            weighted_sum(tape, e, 5)
        },
        &rand_vec(&mut rng, 12, 1.0),
        &[3, 4],
        h,
    )?;
    rows.push(ComponentReport { name: "embed_lookup", max_rel_err: err });

    let err = finite_diff_check::<f64, _>(
        |tape, x| {
            let y = tape.l2_normalize(x)?;
            weighted_sum(tape, y, 6)
        },
        &rand_vec(&mut rng, 5, 1.0),
        &[5],
        h,
    )?;
    rows.push(ComponentReport { name: "l2_normalize", max_rel_err: err });

    let err = finite_diff_check::<f64, _>(
        |tape, logits| tape.cross_entropy(logits, 1),
        &rand_vec(&mut rng, 2, 1.5),
        &[2],
        h,
    )?;
    rows.push(ComponentReport { name: "cross_entropy", max_rel_err: err });

    // ── parameterized blocks, probed through the store sweep ───────────
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(11);
        let lin = Linear::new(&mut store, &mut brng, "lin", 4, 3, true);
        let x = rand_vec(&mut rng, 8, 1.0);
        let err = check_store_params(
            &mut store,
            |_, tape, bound| {
                let xi = tape.leaf(x.clone(), vec![2, 4], false)?;
                let y = lin.forward(tape, bound, xi)?;
                weighted_sum(tape, y, 7)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "linear", max_rel_err: err });
    }

    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(12);
        let attn = Attention::new(&mut store, &mut brng, "attn", 8, 2, true)?;
        let q = rand_vec(&mut rng, 24, 0.5);
        let kv = rand_vec(&mut rng, 40, 0.5);
        let err = check_store_params(
            &mut store,
            |_, tape, bound| {
                let qi = tape.leaf(q.clone(), vec![3, 8], false)?;
                let ki = tape.leaf(kv.clone(), vec![5, 8], false)?;
                let y = attn.forward(tape, bound, qi, ki, &AttnMask::None)?;
                weighted_sum(tape, y, 8)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "attention", max_rel_err: err });
    }

    {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut brng = ChaCha8Rng::seed_from_u64(13);
        let block = TransformerBlock::new(&mut store, &mut brng, "blk", 8, 2, true)?;
        let x = rand_vec(&mut rng, 32, 1.0);
        let err = check_store_params(
            &mut store,
            |_, tape, bound| {
                let xi = tape.leaf(x.clone(), vec![4, 8], false)?;
                let y = block.forward(tape, bound, xi, &AttnMask::Causal)?;
                weighted_sum(tape, y, 9)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "transformer_block", max_rel_err: err });
    }

    // ── encoders and full variants at micro scale ───────────────────────
    {
        let mut net: Network<f64> = Network::new(micro_config(Variant::M3), 31)?;
        let img = micro_image(41);
        let err = check_network_params(
            &mut net,
            |net, tape, bound| {
                let feats = net.vit.encode(tape, bound, &img)?;
                weighted_sum(tape, feats, 10)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "vit_encoder", max_rel_err: err });
    }

    {
        let mut net: Network<f64> = Network::new(micro_config(Variant::M3), 32)?;
        let feats = rand_vec(&mut rng, 4 * 8, 1.0);
        let err = check_network_params(
            &mut net,
            |net, tape, bound| {
                let f = tape.leaf(feats.clone(), vec![4, 8], false)?;
                let q = net.qformer.encode(tape, bound, f)?;
                weighted_sum(tape, q, 11)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "qformer", max_rel_err: err });
    }

    {
        let mut net: Network<f64> = Network::new(micro_config(Variant::M3), 33)?;
        let seq = TokenSequence { ids: vec![2, 4, 3, 0], len: 3 };
        let err = check_network_params(
            &mut net,
            |net, tape, bound| {
                let t = net.report.encode(tape, bound, &seq)?;
                weighted_sum(tape, t, 12)
            },
            h,
        )?;
        rows.push(ComponentReport { name: "report_encoder", max_rel_err: err });
    }

    for (name, variant, seed) in [
        ("forward_m1", Variant::M1, 34u64),
        ("forward_m2", Variant::M2, 35),
        ("forward_m3", Variant::M3, 36),
    ] {
        let mut net: Network<f64> = Network::new(micro_config(variant), seed)?;
        let samples = [
            (micro_image(50), TokenSequence { ids: vec![2, 4, 0, 0], len: 2 }, 0usize),
            (micro_image(51), TokenSequence { ids: vec![3, 5, 2, 0], len: 3 }, 1usize),
        ];
        let err = check_network_params(
            &mut net,
            |net, tape, bound| {
                let mut total = None;
                for (img, seq, label) in &samples {
                    let out = net.forward(
                        tape,
                        bound,
                        variant.uses_image().then_some(img),
                        variant.uses_text().then_some(seq),
                        Some(*label),
                    )?;
                    let loss = out.loss.expect("labelled forward");
                    total = Some(match total {
                        None => loss,
                        Some(acc) => tape.add(acc, loss)?,
                    });
                }
                tape.scale(total.expect("two samples"), 0.5)
            },
            h,
        )?;
        rows.push(ComponentReport { name, max_rel_err: err });
    }

    Ok(rows)
}

/// Sweeps every trainable parameter of a network against central
/// differences of an arbitrary scalar loss built on top of it.
pub fn check_network_params<F>(net: &mut Network<f64>, loss: F, h: f64) -> Result<f64>
where
    F: Fn(&Network<f64>, &mut Tape<f64>, &Bound) -> Result<TensorId>,
{
    let mut tape: Tape<f64> = Tape::new();
    let bound = net.bind(&mut tape, false)?;
    let l = loss(net, &mut tape, &bound)?;
    tape.backward(l)?;
    let grads: Vec<Option<Vec<f64>>> = net
        .store
        .entries()
        .map(|(p, _)| tape.grad(bound.id(p)).map(|g| g.to_vec()))
        .collect();

    fn eval<F>(net: &Network<f64>, loss: &F) -> Result<f64>
    where
        F: Fn(&Network<f64>, &mut Tape<f64>, &Bound) -> Result<TensorId>,
    {
        let mut t: Tape<f64> = Tape::new();
        let b = net.bind(&mut t, true)?;
        let l = loss(net, &mut t, &b)?;
        Ok(t.scalar_value(l))
    }

    let param_ids: Vec<_> = net.store.entries().map(|(p, _)| p).collect();
    let mut worst = 0.0f64;
    for p in param_ids {
        let Some(analytic) = &grads[p.0] else { continue };
        for i in 0..analytic.len() {
            let orig = net.store.entry(p).data[i];
            let err = best_fd_err(analytic[i], h, |delta| {
                net.store.data_mut(p)[i] = orig + delta;
                let v = eval(net, &loss);
                net.store.data_mut(p)[i] = orig;
                v
            })?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
