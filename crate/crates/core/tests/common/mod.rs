//! Checks shared by the acceptance runner and the ordinary test targets.
//!
//! Each check returns `Ok(summary)` or `Err(reason)`; nothing here panics on
//! a failed comparison, so the runner can report every criterion.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;

use cascade_seg::autodiff::gradcheck::{central_difference, max_relative_error};
use cascade_seg::autodiff::{Padding, Tape, Var};
use cascade_seg::data_io::{
    decode_checkpoint, decode_image_pgm, decode_label_pgm, encode_checkpoint, encode_image_pgm,
    encode_label_pgm, generate_phantom, make_dataset, PhantomSpec, Sample, SplitSizes,
};
use cascade_seg::losses::{
    balanced_alpha, balanced_class_weights, binary_ce_weighted, binary_cross_entropy,
    categorical_cross_entropy_grad, BalanceMode, BinaryWeights,
};
use cascade_seg::metrics::{
    confusion, evaluate_model, iou, pixel_accuracy, rand_index, restricted_roc, Aggregation, Band,
};
use cascade_seg::pipeline::{
    derive_masks, final_classify, masked_input, predict_binary, sequential_predict_batch,
    threshold, CascadeThresholds, WindowSpec,
};
use cascade_seg::train::{
    evaluate_joint_objective, init_network, label_snapshot, select_tumor_threshold,
    train_liver_net, LossMode, NetRole, TrainConfig, TrainReport, TrainRngs, TumorStage,
};
use cascade_seg::{
    build_unet, BinaryMask, Head, Image, Label, LabelMap, Network, ProbabilityMap, SeededRng,
    Tensor, UNetConfig,
};

pub type Outcome = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs `f`, turning a panic into a failed outcome.
pub fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(match p.downcast_ref::<String>() {
            Some(s) => format!("panicked: {s}"),
            None => match p.downcast_ref::<&str>() {
                Some(s) => format!("panicked: {s}"),
                None => "panicked".into(),
            },
        }),
    }
}

pub fn random_mask(rng: &mut SeededRng, w: usize, h: usize, density: f64) -> BinaryMask {
    BinaryMask::new(w, h, (0..w * h).map(|_| rng.uniform() < density).collect()).unwrap()
}

pub fn random_labels(rng: &mut SeededRng, w: usize, h: usize) -> LabelMap {
    let raw: Vec<u8> = (0..w * h).map(|_| rng.below(3) as u8).collect();
    LabelMap::from_u8(w, h, &raw).unwrap()
}

fn uniform_vec(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// Gradient correctness

pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;
/// A whole network has thousands of relus; the larger step crosses some.
pub const UNET_STEP: f64 = 1e-6;

type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> cascade_seg::Result<Var>;

/// Scalar `Σ r ⊙ op(inputs)` with fixed random `r`, through the tape.
fn projected(
    inputs: &[Tensor<f64>],
    build: &Builder,
    proj_seed: u64,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let mut rng = SeededRng::new(proj_seed, 99);
    let r = tape
        .constant(shape, uniform_vec(&mut rng, n, -1.0, 1.0))
        .unwrap();
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss)[0];
    if !want_grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    let mut flat = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g),
            None => flat.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    (value, flat)
}

/// Worst relative error between the tape gradient and central differences.
pub fn op_gradient_error(inputs: &[Tensor<f64>], build: &Builder, proj_seed: u64) -> f64 {
    let (_, analytic) = projected(inputs, build, proj_seed, true);
    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = central_difference(&x, FD_STEP, |x| {
        let mut at = 0;
        let probe: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|t| {
                let part = x[at..at + t.len()].to_vec();
                at += t.len();
                tensor(t.shape(), part)
            })
            .collect();
        projected(&probe, build, proj_seed, false).0
    });
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

/// Values bounded away from zero so a finite-difference probe never crosses
/// the relu kink.
fn away_from_zero(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.01, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect()
}

/// Distinct values at least 0.01 apart, so max-pool winners are stable.
fn distinct(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.01 + rng.uniform_in(0.0, 0.001))
        .collect();
    rng.shuffle(&mut v);
    v
}

fn dims(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

type Case = (Vec<Tensor<f64>>, Box<Builder>);

fn op_cases(name: &str, rng: &mut SeededRng, instance: u64) -> Case {
    let n = dims(rng, 1, 2);
    let c = dims(rng, 1, 3);
    let h = dims(rng, 2, 5);
    let w = dims(rng, 2, 5);
    let normal =
        |rng: &mut SeededRng, len: usize| (0..len).map(|_| rng.normal()).collect::<Vec<_>>();
    match name {
        "conv2d_same" | "conv2d_valid" => {
            let f = dims(rng, 1, 3);
            let valid = name == "conv2d_valid";
            let kmax = if valid { h.min(w) } else { 5 };
            let k = [1, 3, 5]
                .into_iter()
                .filter(|&k| k <= kmax.max(1))
                .collect::<Vec<_>>();
            let k = k[rng.below(k.len())];
            let x = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            let kern = tensor(&[f, c, k, k], normal(rng, f * c * k * k));
            let bias = tensor(&[f], normal(rng, f));
            let pad = if valid { Padding::Valid } else { Padding::Same };
            (
                vec![x, kern, bias],
                Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], pad)),
            )
        }
        "max_pool_2x2" => {
            let x = tensor(&[n, c, 2 * h, 2 * w], distinct(rng, n * c * 4 * h * w));
            (vec![x], Box::new(|t, v| t.max_pool_2x2(v[0])))
        }
        "upsample_nearest_2x" => {
            let x = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            (vec![x], Box::new(|t, v| t.upsample_nearest_2x(v[0])))
        }
        "concat_channels" => {
            let c2 = dims(rng, 1, 3);
            let a = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            let b = tensor(&[n, c2, h, w], normal(rng, n * c2 * h * w));
            (vec![a, b], Box::new(|t, v| t.concat_channels(v[0], v[1])))
        }
        "relu" => {
            let x = tensor(&[n, c, h, w], away_from_zero(rng, n * c * h * w));
            (vec![x], Box::new(|t, v| Ok(t.relu(v[0]))))
        }
        "sigmoid" => {
            let x = tensor(
                &[n, c, h, w],
                normal(rng, n * c * h * w).iter().map(|v| 2.0 * v).collect(),
            );
            (vec![x], Box::new(|t, v| Ok(t.sigmoid(v[0]))))
        }
        "softmax_channels" => {
            let c = dims(rng, 2, 4);
            let x = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            (vec![x], Box::new(|t, v| t.softmax_channels(v[0])))
        }
        "dropout" => {
            let rate = rng.uniform_in(0.1, 0.6);
            let x = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            (
                vec![x],
                Box::new(move |t, v| t.dropout(v[0], rate, true, &mut SeededRng::new(instance, 7))),
            )
        }
        "sum" => {
            let x = tensor(&[n * c * h * w], normal(rng, n * c * h * w));
            (vec![x], Box::new(|t, v| Ok(t.sum(v[0]))))
        }
        "mul" => {
            let a = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            let b = tensor(&[n, c, h, w], normal(rng, n * c * h * w));
            (vec![a, b], Box::new(|t, v| t.mul(v[0], v[1])))
        }
        "scalar_fn" => {
            // A loss attached the way training attaches it: sigmoid output
            // into the weighted binary cross-entropy.
            let x = tensor(&[1, 1, h, w], normal(rng, h * w));
            let target = random_mask(rng, w, h, 0.4);
            let alpha = rng.uniform_in(0.05, 0.95);
            (
                vec![x],
                Box::new(move |t, v| {
                    let p = t.sigmoid(v[0]);
                    let e =
                        binary_ce_weighted(t.value(p), &target, BinaryWeights::from_alpha(alpha))?;
                    let l = t.scalar_fn(p, e.value, e.grad)?;
                    // Broadcast the scalar so the projection has something to weigh.
                    let ones = t.constant(vec![1], vec![1.0])?;
                    t.mul(l, ones)
                }),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 12] = [
    "conv2d_same",
    "conv2d_valid",
    "max_pool_2x2",
    "upsample_nearest_2x",
    "concat_channels",
    "relu",
    "sigmoid",
    "softmax_channels",
    "dropout",
    "sum",
    "mul",
    "scalar_fn",
];

/// Worst error of each op over `instances` random cases.
pub fn op_gradient_errors(instances: u64) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    for (k, &op) in OPS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = SeededRng::new(1000 + k as u64, i);
            let (inputs, build) = op_cases(op, &mut rng, i);
            worst = worst.max(op_gradient_error(&inputs, &*build, i));
        }
        out.insert(op, worst);
    }
    out
}

fn prob_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    uniform_vec(rng, n, 0.02, 0.98)
}

/// Worst error of the loss gradients (`∂loss/∂p`) over random instances.
pub fn loss_gradient_errors(instances: u64) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    let mut bce: f64 = 0.0;
    let mut cce: f64 = 0.0;
    for i in 0..instances {
        let mut rng = SeededRng::new(2000, i);
        let (w, h) = (dims(&mut rng, 1, 6), dims(&mut rng, 1, 6));
        let density = rng.uniform();
        let target = random_mask(&mut rng, w, h, density);
        let p = prob_vec(&mut rng, w * h);
        let weights = match i % 4 {
            0 => BinaryWeights::UNIFORM,
            1 => BinaryWeights::from_alpha(rng.uniform_in(0.01, 0.99)),
            2 => BinaryWeights::from_alpha(BalanceMode::InverseFrequency.alpha(&target)),
            _ => BinaryWeights::from_alpha(BalanceMode::Literal.alpha(&target)),
        };
        let analytic = binary_ce_weighted(&p, &target, weights).unwrap().grad;
        let numeric = central_difference(&p, FD_STEP, |q| {
            binary_ce_weighted(q, &target, weights).unwrap().value
        });
        bce = bce.max(max_relative_error(&analytic, &numeric, FD_FLOOR));

        let labels = random_labels(&mut rng, w, h);
        let m = derive_masks(&labels);
        let hot = m.one_hot();
        let p = prob_vec(&mut rng, 3 * w * h);
        let cw = (i % 2 == 1).then(|| balanced_class_weights(hot[0], hot[1], hot[2]).unwrap());
        let analytic = categorical_cross_entropy_grad(&p, hot, cw).unwrap().grad;
        let numeric = central_difference(&p, FD_STEP, |q| {
            categorical_cross_entropy_grad(q, hot, cw).unwrap().value
        });
        cce = cce.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    out.insert("weighted_bce", bce);
    out.insert("categorical_ce", cce);
    out
}

/// Parameter gradients of a whole small U-Net (dropout active with a fixed
/// mask) against central differences.
pub fn unet_gradient_error(instances: u64) -> f64 {
    (0..instances)
        .map(unet_gradient_error_one)
        .fold(0.0, f64::max)
}

pub fn unet_gradient_error_one(i: u64) -> f64 {
    let mut worst: f64 = 0.0;
    {
        let head = if i.is_multiple_of(2) {
            Head::BinarySigmoid
        } else {
            Head::Softmax3
        };
        let depth = 1 + (i as usize % 3 == 2) as usize;
        let cfg = UNetConfig {
            input_size: 4 << depth,
            depth,
            base_channels: 2,
            dropout_rate: 0.3,
            head,
        };
        let mut rng = SeededRng::new(3000, i);
        let mut net = build_unet::<f64>(cfg, &mut rng).unwrap();
        // Zero biases put relus exactly on their kink wherever a patch is
        // all zeros; nudge them off it.
        for t in net.params_mut().tensors_mut() {
            if t.shape().len() == 1 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = 0.1 * rng.normal());
            }
        }
        let s = cfg.input_size;
        let x = tensor(&[1, 1, s, s], uniform_vec(&mut rng, s * s, 0.0, 1.0));
        let out_len = cfg.head.out_channels() * s * s;
        let r = uniform_vec(&mut rng, out_len, -1.0, 1.0);
        let objective = |net: &Network<f64>| -> f64 {
            let y = net.forward(&x, true, &mut SeededRng::new(i, 5)).unwrap();
            y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::<f64>::new();
        let xin = tape.leaf(&x);
        let rec = net
            .record(&mut tape, xin, true, &mut SeededRng::new(i, 5))
            .unwrap();
        let rv = tape
            .constant(tape.shape(rec.output).to_vec(), r.clone())
            .unwrap();
        let prod = tape.mul(rec.output, rv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = rec
            .params
            .iter()
            .zip(net.params().iter())
            .flat_map(|(v, (_, t))| grads.get(*v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();

        let flat: Vec<f64> = net
            .params()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let mut probe = net.clone();
        let numeric = central_difference(&flat, UNET_STEP, |p| {
            let mut at = 0;
            for t in probe.params_mut().tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[at..at + n]);
                at += n;
            }
            objective(&probe)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

pub fn check_gradients(instances: u64) -> Outcome {
    let mut all = op_gradient_errors(instances);
    all.extend(loss_gradient_errors(instances));
    all.insert("unet", unet_gradient_error(instances));
    let (worst_op, worst) = all
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (*k, *v))
        .unwrap();
    let failing: Vec<String> = all
        .iter()
        .filter(|(_, &e)| !(e <= GRAD_TOL))
        .map(|(k, e)| format!("{k} {e:.2e}"))
        .collect();
    ensure(failing.is_empty(), || {
        format!("relative error above {GRAD_TOL}: {}", failing.join(", "))
    })?;
    Ok(format!(
        "{} ops x {instances} instances, worst {worst:.2e} ({worst_op})",
        all.len()
    ))
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Rand index by enumerating every unordered pixel pair.
pub fn rand_index_pairs(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len();
    let mut agree: u64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n as u64 * (n as u64 - 1) / 2) as f64
}

/// Restricted ROC area by brute force: every distinct in-band score is a
/// threshold, each point counted from scratch.
pub fn auc_sweep(scores: &[(f64, bool)], band: Band) -> Option<(f64, f64)> {
    let pos = scores.iter().filter(|s| s.1).count() as f64;
    let neg = scores.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.push(band.hi());
    thresholds.push(band.lo());
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pts: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().filter(|s| s.1 && s.0 > t).count() as f64;
            let fp = scores.iter().filter(|s| !s.1 && s.0 > t).count() as f64;
            (t, fp / neg, tp / pos)
        })
        .collect();
    let area = pts
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) * (w[0].2 + w[1].2) / 2.0)
        .sum();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &(t, f, tp) in &pts {
        if tp - f > best.0 {
            best = (tp - f, t);
        }
    }
    Some((area, best.1))
}

/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` over in-band pairs.
pub fn auc_mann_whitney(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut u = 0.0;
    for &p in &pos {
        for &n in &neg {
            u += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (pos.len() * neg.len()) as f64
}

/// A score map mixing continuous values, a coarse grid (ties) and the band
/// edges themselves.
pub fn random_scores(rng: &mut SeededRng, n: usize, band: Band) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.below(6) {
            0 => band.lo(),
            1 => band.hi(),
            2 | 3 => rng.below(21) as f64 / 20.0,
            _ => rng.uniform(),
        })
        .collect()
}

pub fn random_band(rng: &mut SeededRng) -> Band {
    if rng.uniform() < 0.5 {
        Band::default()
    } else {
        let a = rng.uniform_in(0.0, 0.5);
        let b = rng.uniform_in(0.5, 1.0);
        Band::new(a, b).unwrap()
    }
}

pub fn check_metric_oracles(cases: u64) -> Outcome {
    let mut auc_worst: f64 = 0.0;
    let mut curves = 0;
    for i in 0..cases {
        let mut rng = SeededRng::new(4000, i);
        let (w, h) = loop {
            let d = (dims(&mut rng, 1, 12), dims(&mut rng, 1, 12));
            if d.0 * d.1 >= 2 {
                break d;
            }
        };
        let dp = rng.uniform();
        let dt = rng.uniform();
        let pred = random_mask(&mut rng, w, h, dp);
        let truth = random_mask(&mut rng, w, h, dt);

        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.pixels().iter().zip(truth.pixels()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let c = confusion(&pred, &truth).unwrap();
        let iou_oracle = if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fn_) as f64
        };
        ensure(iou(&c) == iou_oracle, || {
            format!("case {i}: iou {} vs {iou_oracle}", iou(&c))
        })?;
        let acc_oracle = (tp + tn) as f64 / (w * h) as f64;
        ensure(pixel_accuracy(&c) == acc_oracle, || {
            format!("case {i}: accuracy {} vs {acc_oracle}", pixel_accuracy(&c))
        })?;

        let bits = |m: &BinaryMask| m.pixels().iter().map(|&b| b as u8).collect::<Vec<_>>();
        let ri = rand_index(&pred, &truth).unwrap();
        let ri_oracle = rand_index_pairs(&bits(&pred), &bits(&truth));
        ensure(ri == ri_oracle, || {
            format!("case {i}: binary rand index {ri} vs {ri_oracle}")
        })?;
        let la = random_labels(&mut rng, w, h);
        let lb = random_labels(&mut rng, w, h);
        let raw = |m: &LabelMap| m.pixels().iter().map(|l| l.as_u8()).collect::<Vec<_>>();
        let ri = rand_index(&la, &lb).unwrap();
        let ri_oracle = rand_index_pairs(&raw(&la), &raw(&lb));
        ensure(ri == ri_oracle, || {
            format!("case {i}: label rand index {ri} vs {ri_oracle}")
        })?;

        let band = random_band(&mut rng);
        let scores = ProbabilityMap::new(w, h, random_scores(&mut rng, w * h, band)).unwrap();
        let roc = restricted_roc(&[&scores], &[&truth], band).unwrap();
        let in_band: Vec<(f64, bool)> = scores
            .pixels()
            .iter()
            .zip(truth.pixels())
            .filter(|(&s, _)| s > band.lo() && s < band.hi())
            .map(|(&s, &t)| (s, t))
            .collect();
        match (roc, auc_sweep(&in_band, band)) {
            (None, None) => {}
            (Some(roc), Some((area, best))) => {
                curves += 1;
                let mw = auc_mann_whitney(&in_band);
                let err = (roc.auc() - area).abs().max((roc.auc() - mw).abs());
                auc_worst = auc_worst.max(err);
                ensure(err <= 1e-12, || {
                    format!("case {i}: auc {} vs sweep {area} vs pairs {mw}", roc.auc())
                })?;
                ensure(roc.best_threshold() == best, || {
                    format!(
                        "case {i}: threshold {} vs sweep {best}",
                        roc.best_threshold()
                    )
                })?;
            }
            (a, b) => {
                return Err(format!(
                    "case {i}: curve presence differs: {} vs {}",
                    a.is_some(),
                    b.is_some()
                ))
            }
        }
    }
    Ok(format!(
        "{cases} cases: iou/accuracy/rand index exact, {curves} ROC curves with worst auc gap {auc_worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Loss weights

pub fn check_balance_weights(cases: u64) -> Outcome {
    for i in 0..cases {
        let mut rng = SeededRng::new(5000, i);
        let (w, h) = (dims(&mut rng, 1, 16), dims(&mut rng, 1, 16));
        let d = match i % 5 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.uniform(),
        };
        let m = random_mask(&mut rng, w, h, d);
        let n = (w * h) as f64;
        let ones = m.pixels().iter().filter(|&&b| b).count() as f64;
        let bg = 1.0 - ones / n;
        let fg = ones / n;
        ensure(balanced_alpha(&m) == bg, || {
            format!("case {i}: balanced_alpha {} vs {bg}", balanced_alpha(&m))
        })?;
        ensure(balanced_alpha(&m) + fg == 1.0, || {
            format!("case {i}: alpha + fg fraction != 1")
        })?;
        let clamp = |a: f64| a.clamp(1e-7, 1.0 - 1e-7);
        ensure(BalanceMode::InverseFrequency.alpha(&m) == clamp(fg), || {
            format!("case {i}: inverse-frequency alpha")
        })?;
        ensure(BalanceMode::Literal.alpha(&m) == clamp(bg), || {
            format!("case {i}: literal alpha")
        })?;

        let labels = random_labels(&mut rng, w, h);
        let mut counts = [0.0f64; 3];
        for l in labels.pixels() {
            counts[match l {
                Label::Tumor => 0,
                Label::Liver => 1,
                Label::Background => 2,
            }] += 1.0;
        }
        let dm = derive_masks(&labels);
        let [t, l, o] = dm.one_hot();
        let cw = balanced_class_weights(t, l, o).unwrap();
        let oracle = counts.map(|c| 1.0 - c / n);
        ensure(cw == oracle, || {
            format!("case {i}: class weights {cw:?} vs {oracle:?}")
        })?;
        let sum: f64 = cw.iter().sum();
        ensure((sum - 2.0).abs() <= 4.0 * f64::EPSILON, || {
            format!("case {i}: class weights sum to {sum}")
        })?;
    }
    Ok(format!(
        "{cases} masks: alpha and class weights equal pixel counts, weights sum to 2"
    ))
}

// ---------------------------------------------------------------------------
// Cascade algebra

pub fn check_cascade_rule(cases: u64) -> Outcome {
    let mut pixels = 0usize;
    for i in 0..cases {
        let mut rng = SeededRng::new(6000, i);
        let (w, h) = (dims(&mut rng, 1, 16), dims(&mut rng, 1, 16));
        let dm = rng.uniform();
        let dt = rng.uniform();
        let m = random_mask(&mut rng, w, h, dm);
        let t = random_mask(&mut rng, w, h, dt);
        let out = final_classify(&m, &t).unwrap();
        for ((&mi, &ti), &l) in m.pixels().iter().zip(t.pixels()).zip(out.pixels()) {
            let want = match (mi, ti) {
                (false, _) => Label::Background,
                (true, false) => Label::Liver,
                (true, true) => Label::Tumor,
            };
            ensure(l == want, || {
                format!("case {i}: (M={mi}, T={ti}) gave {l:?}")
            })?;
        }
        let tumor = out.mask_where(|l| l == Label::Tumor);
        ensure(tumor.is_subset_of(&m), || {
            format!("case {i}: tumor pixel outside M")
        })?;
        pixels += w * h;
    }
    Ok(format!(
        "{cases} mask pairs, {pixels} pixels, rule table and subset hold"
    ))
}

// ---------------------------------------------------------------------------
// End-to-end learning

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub tumor_threshold: f64,
    pub liver_iou: f64,
    pub tumor_iou: f64,
    pub pixel_accuracy: f64,
    pub restricted_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub balanced: VariantResult,
    pub plain: VariantResult,
    pub seconds: f64,
}

fn evaluate_variant(
    liver: &Network<f32>,
    tumor: &Network<f32>,
    val: &[Sample],
    test: &[Sample],
) -> cascade_seg::Result<VariantResult> {
    let window = WindowSpec::default();
    let base = CascadeThresholds::default();
    let tb =
        select_tumor_threshold(liver, tumor, val, base, window, Band::default())?.unwrap_or(0.5);
    let th = CascadeThresholds::new(base.liver(), tb)?;
    let images: Vec<&Image> = test.iter().map(|s| &s.image).collect();
    let outs = sequential_predict_batch(liver, tumor, &images, th, window)?;
    let preds: Vec<&LabelMap> = outs.iter().map(|o| &o.labels).collect();
    let truths: Vec<&LabelMap> = test.iter().map(|s| &s.labels).collect();
    let probs: Vec<&ProbabilityMap> = outs.iter().map(|o| &o.tumor_probs).collect();
    let report = evaluate_model(
        &preds,
        &truths,
        Some(&probs),
        Band::default(),
        Aggregation::Pooled,
    )?;
    let owned_p: Vec<LabelMap> = outs.iter().map(|o| o.labels.clone()).collect();
    let owned_t: Vec<LabelMap> = test.iter().map(|s| s.labels.clone()).collect();
    let snap = label_snapshot(&owned_p, &owned_t)?;
    Ok(VariantResult {
        tumor_threshold: tb,
        liver_iou: report.liver.iou,
        tumor_iou: report.tumor.iou,
        pixel_accuracy: snap.pixel_acc,
        restricted_auc: report.restricted_auc,
    })
}

/// Trains the default sequential model for `seed`, branching the tumor
/// network's refinement into the balanced (default) and plain losses.
pub fn learning_run(seed: u64) -> cascade_seg::Result<SeedRun> {
    let start = std::time::Instant::now();
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let data = make_dataset(&spec, SplitSizes::default())?;
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let unet = UNetConfig::default();
    let th = CascadeThresholds::default();
    let window = WindowSpec::default();

    let mut liver = init_network::<f32>(NetRole::Liver, unet, seed)?;
    train_liver_net(
        &mut liver,
        &data,
        &cfg,
        &mut TrainRngs::new(seed, NetRole::Liver),
    )?;
    let stage = TumorStage::build(&liver, &data, &cfg, th, window)?;
    let mut tumor = init_network::<f32>(NetRole::Tumor, unet, seed)?;
    let mut rngs = TrainRngs::new(seed, NetRole::Tumor);
    let mut report = TrainReport {
        role: NetRole::Tumor,
        epochs: Vec::new(),
        wall_time: Default::default(),
    };
    stage.train_main(&mut tumor, &cfg, &mut rngs, &mut report)?;

    let variant = |mode: LossMode| -> cascade_seg::Result<VariantResult> {
        let mut net = tumor.clone();
        let mut r = rngs.clone();
        let mut rep = report.clone();
        let c = TrainConfig {
            loss_mode: mode,
            ..cfg.clone()
        };
        stage.refine(&mut net, &c, &mut r, &mut rep)?;
        evaluate_variant(&liver, &net, &data.val, &data.test)
    };
    let balanced = variant(LossMode::Balanced)?;
    let plain = variant(LossMode::Plain)?;
    Ok(SeedRun {
        seed,
        balanced,
        plain,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub const LEARNING_SEEDS: [u64; 3] = [42, 43, 44];

pub fn meets_learning_targets(v: &VariantResult) -> bool {
    v.liver_iou >= 0.85 && v.tumor_iou >= 0.50 && v.pixel_accuracy >= 0.98
}

pub fn balanced_beats_plain(run: &SeedRun) -> bool {
    match (run.balanced.restricted_auc, run.plain.restricted_auc) {
        (Some(b), Some(p)) => b > p,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Determinism of the command line

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cascade-seg")
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .env_remove(cascade_seg::cli::SEED_ENV)
        .output()
        .expect("spawn cascade-seg")
}

pub fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = run_cli(args);
    ensure(out.status.success(), || {
        format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Every file under `dir` (relative path → bytes), skipping `config.resolved`
/// which records the output path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "config.resolved" {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn check_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (d1, d2) = (root.join("data1"), root.join("data2"));
    run_ok(&["gen-data", "--out", &s(&d1)])?;
    run_ok(&["gen-data", "--out", &s(&d2)])?;
    let (a, b) = (snapshot(&d1), snapshot(&d2));
    ensure(a.len() == 640, || {
        format!("expected 640 files, found {}", a.len())
    })?;
    ensure(a == b, || "gen-data reruns differ".into())?;

    let mut checkpoints = 0;
    for model in ["sequential", "one-step"] {
        let mut snaps = Vec::new();
        for run in 0..2 {
            let out = root.join(format!("{model}{run}"));
            run_ok(&[
                "train",
                "--model",
                model,
                "--data",
                &s(&d1),
                "--out",
                &s(&out),
                "--epochs-main",
                "1",
                "--epochs-finetune",
                "1",
            ])?;
            snaps.push(snapshot(&out));
        }
        let ck = snaps[0].keys().filter(|k| k.ends_with(".segc")).count();
        ensure(ck == if model == "sequential" { 2 } else { 1 }, || {
            format!("{model}: {ck} checkpoints")
        })?;
        ensure(snaps[0] == snaps[1], || {
            format!("{model} training reruns differ")
        })?;
        checkpoints += ck;
    }
    Ok(format!(
        "640 data files and {checkpoints} checkpoints byte-identical across reruns"
    ))
}

// ---------------------------------------------------------------------------
// Format robustness

#[derive(Clone, Copy, Debug)]
pub enum Mutation {
    Truncate(usize),
    Flip {
        at: usize,
        xor: u8,
    },
    Burst {
        at: usize,
        bytes: [u8; 4],
        len: usize,
    },
    Append(u8),
}

pub fn apply(bytes: &[u8], m: Mutation) -> Vec<u8> {
    let mut b = bytes.to_vec();
    match m {
        Mutation::Truncate(n) => b.truncate(n),
        Mutation::Flip { at, xor } => b[at] ^= xor,
        Mutation::Burst { at, bytes, len } => {
            for k in 0..len.min(b.len() - at) {
                b[at + k] = bytes[k];
            }
        }
        Mutation::Append(v) => b.push(v),
    }
    b
}

fn checkpoint_mutation(rng: &mut SeededRng, len: usize) -> Mutation {
    match rng.below(4) {
        0 => Mutation::Truncate(rng.below(len)),
        1 => Mutation::Flip {
            at: rng.below(len),
            xor: 1 + rng.below(255) as u8,
        },
        2 => Mutation::Burst {
            at: rng.below(len),
            bytes: [0; 4].map(|_| rng.below(256) as u8),
            len: 2 + rng.below(3),
        },
        _ => Mutation::Append(rng.below(256) as u8),
    }
}

/// Bytes that can never be part of a valid header token.
const GARBAGE: [u8; 8] = [b'x', b'P', b'-', b'.', 0x00, 0x7f, 0xff, b'+'];

fn header_len(pgm: &[u8]) -> usize {
    let mut newlines = 0;
    pgm.iter()
        .position(|&b| {
            newlines += (b == b'\n') as usize;
            newlines == 3
        })
        .unwrap()
        + 1
}

fn pgm_mutation(rng: &mut SeededRng, bytes: &[u8], label: bool) -> Mutation {
    let hl = header_len(bytes);
    let kinds = if label { 4 } else { 3 };
    match rng.below(kinds) {
        0 => Mutation::Truncate(rng.below(bytes.len())),
        1 => Mutation::Flip {
            at: rng.below(hl),
            xor: 0,
        },
        2 => Mutation::Append(rng.below(256) as u8),
        _ => Mutation::Flip {
            at: hl + rng.below(bytes.len() - hl),
            xor: 0,
        },
    }
}

fn pgm_apply(rng: &mut SeededRng, bytes: &[u8], m: Mutation) -> Vec<u8> {
    let hl = header_len(bytes);
    match m {
        Mutation::Flip { at, .. } if at < hl => {
            let mut b = bytes.to_vec();
            b[at] = GARBAGE[rng.below(GARBAGE.len())];
            b
        }
        Mutation::Flip { at, .. } => {
            let mut b = bytes.to_vec();
            b[at] = loop {
                let v = rng.below(256) as u8;
                if ![0, 127, 255].contains(&v) {
                    break v;
                }
            };
            b
        }
        m => apply(bytes, m),
    }
}

pub fn sample_files() -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let spec = PhantomSpec {
        size: 16,
        ..PhantomSpec::default()
    };
    let s = generate_phantom(&spec, 3).unwrap();
    let cfg = UNetConfig {
        input_size: 8,
        depth: 1,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let net = build_unet::<f32>(cfg, &mut SeededRng::new(9, 0)).unwrap();
    (
        encode_checkpoint(net.params(), &cfg.digest()),
        encode_image_pgm(&s.image).unwrap(),
        encode_label_pgm(&s.labels),
    )
}

pub fn check_format_robustness(cases: u64) -> Outcome {
    let (ck, img, lbl) = sample_files();

    let back = decode_checkpoint(&ck).map_err(|e| e.to_string())?;
    ensure(encode_checkpoint(&back.params, &back.digest) == ck, || {
        "checkpoint roundtrip not bit-exact".into()
    })?;
    let image = decode_image_pgm(&img).map_err(|e| e.to_string())?;
    ensure(encode_image_pgm(&image).unwrap() == img, || {
        "image PGM roundtrip not bit-exact".into()
    })?;
    let labels = decode_label_pgm(&lbl).map_err(|e| e.to_string())?;
    ensure(encode_label_pgm(&labels) == lbl, || {
        "label PGM roundtrip not bit-exact".into()
    })?;

    let mut rejected = 0;
    for i in 0..cases {
        let mut rng = SeededRng::new(7000, i);
        let m = checkpoint_mutation(&mut rng, ck.len());
        let bad = apply(&ck, m);
        if bad == ck {
            continue;
        }
        let r = catch_unwind(|| decode_checkpoint(&bad));
        let err = match r {
            Err(_) => return Err(format!("checkpoint {m:?} panicked")),
            Ok(Ok(_)) => return Err(format!("checkpoint {m:?} accepted")),
            Ok(Err(e)) => e.to_string(),
        };
        ensure(err.contains("at byte"), || {
            format!("checkpoint {m:?}: diagnostic `{err}` lacks an offset")
        })?;
        rejected += 1;

        let label = i % 2 == 0;
        let good = if label { &lbl } else { &img };
        let m = pgm_mutation(&mut rng, good, label);
        let bad = pgm_apply(&mut rng, good, m);
        if &bad == good {
            continue;
        }
        let r = catch_unwind(|| {
            if label {
                decode_label_pgm(&bad).map(|_| ())
            } else {
                decode_image_pgm(&bad).map(|_| ())
            }
        });
        let err = match r {
            Err(_) => return Err(format!("pgm {m:?} panicked")),
            Ok(Ok(())) => return Err(format!("pgm {m:?} accepted")),
            Ok(Err(e)) => e.to_string(),
        };
        ensure(err.contains("byte"), || {
            format!("pgm {m:?}: diagnostic `{err}` lacks an offset")
        })?;
        rejected += 1;
    }
    Ok(format!(
        "{rejected} corrupted files rejected with offsets, 3 formats roundtrip bit-exactly"
    ))
}

// ---------------------------------------------------------------------------
// Joint objective

pub fn check_joint_objective() -> Outcome {
    let spec = PhantomSpec {
        size: 16,
        seed: 5,
        ..PhantomSpec::default()
    };
    let samples: Vec<Sample> = (0..4)
        .map(|i| generate_phantom(&spec, i).unwrap())
        .collect();
    let cfg = UNetConfig {
        input_size: 16,
        depth: 2,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let liver = build_unet::<f64>(cfg, &mut SeededRng::new(11, 0)).unwrap();
    let tumor = build_unet::<f64>(cfg, &mut SeededRng::new(12, 0)).unwrap();
    let th = CascadeThresholds::default();
    let window = WindowSpec::default();

    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let lp = predict_binary(&liver, &images).unwrap();
    let mut la = 0.0;
    let mut lb = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let d = derive_masks(&s.labels);
        let m = threshold(&lp[k], th.liver()).unwrap();
        la += binary_cross_entropy(lp[k].pixels(), &d.liver_or_tumor).unwrap();
        let x = masked_input(&s.image, &m, window).unwrap();
        let tp = predict_binary(&tumor, &[&x]).unwrap().remove(0);
        lb += binary_cross_entropy(tp.pixels(), &m.and(&d.tumor).unwrap()).unwrap();
    }
    la /= 4.0;
    lb /= 4.0;
    let mut worst: f64 = 0.0;
    for c in [0.0, 0.5, 1.0] {
        let j = evaluate_joint_objective(&liver, &tumor, &samples, c, th, window).unwrap();
        let want = c * la + (1.0 - c) * lb;
        worst = worst.max((j - want).abs());
        ensure((j - want).abs() <= 1e-12, || {
            format!("c = {c}: {j} vs {want}")
        })?;
    }
    Ok(format!(
        "c in {{0, 0.5, 1}} within {worst:.1e} of c*{la:.4} + (1-c)*{lb:.4}"
    ))
}
