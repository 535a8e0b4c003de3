//! Brute-force oracles and random instance builders shared by the
//! integration tests and the acceptance target.
#![allow(dead_code)]

pub mod props;

use std::collections::BTreeMap;

use evseg_core::event::{Event, EventStream, Polarity, VoxelGrid, VoxelizationConfig};
use evseg_core::labels::{LabelMode, PointLabel, PointLabelSet};
use evseg_core::network::{
    init_branch, BranchPass, Direction, FeatureMap, LogitMap, NetworkConfig, ProjectionPair,
};
use evseg_core::prototypes::{
    distill_loss, proto_contrast_loss, Branch, ClassPrototype, ContrastConfig, PrototypeMap,
};
use evseg_core::supervision::{
    dual_loss, softmax_probs, weak_loss, ProbMap, PseudoLabelMap, ReliabilityMap,
};
use evseg_core::synth::{DenseLabelMap, IGNORE_LABEL};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between `analytic[i]` and a central difference of
/// `f` at `x` along coordinate `i`, over `indices`.
pub fn central_diff_check<F>(f: F, x: &[f64], analytic: &[f64], indices: &[usize], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for &i in indices {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_events(rng: &mut ChaCha8Rng, w: u16, h: u16, n: usize, t_max: u64) -> EventStream {
    let events = (0..n)
        .map(|_| {
            Event::new(
                rng.random_range(0..w),
                rng.random_range(0..h),
                rng.random_range(0..t_max),
                if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative },
            )
        })
        .collect();
    EventStream::from_unsorted(w, h, events).unwrap()
}

pub fn random_logits(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> LogitMap {
    LogitMap {
        classes: c,
        height: h,
        width: w,
        data: random_vec(rng, c * h * w, 3.0),
    }
}

pub fn random_probs(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ProbMap {
    softmax_probs(&random_logits(rng, c, h, w)).unwrap()
}

pub fn random_pseudo(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, ignore_p: f64) -> PseudoLabelMap {
    PseudoLabelMap {
        height: h,
        width: w,
        data: (0..h * w)
            .map(|_| {
                if rng.random_bool(ignore_p) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..c as u8)
                }
            })
            .collect(),
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, n: usize) -> PointLabelSet {
    let picks = sample(rng, h * w, n.min(h * w));
    let points = picks
        .iter()
        .map(|i| PointLabel {
            x: (i % w) as u16,
            y: (i / w) as u16,
            class: rng.random_range(0..c as u8),
        })
        .collect();
    PointLabelSet::new(LabelMode::TenClicks, points)
}

pub fn random_features(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        channels: d,
        height: h,
        width: w,
        data: random_vec(rng, d * h * w, 1.0),
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit(&random_vec(rng, d, 1.0))
}

pub fn random_protos(rng: &mut ChaCha8Rng, classes: &[u8], d: usize) -> PrototypeMap {
    classes
        .iter()
        .map(|&c| {
            (
                c,
                ClassPrototype {
                    class_id: c,
                    branch: Branch::Forward,
                    vector: random_unit(rng, d),
                },
            )
        })
        .collect()
}

pub fn random_dense(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, ignore_p: f64) -> DenseLabelMap {
    DenseLabelMap {
        width: w,
        height: h,
        data: (0..h * w)
            .map(|_| {
                if rng.random_bool(ignore_p) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..c as u8)
                }
            })
            .collect(),
    }
}

// ---- brute-force oracles ----

/// Voxel grid by enumerating each event's interpolation weights.
pub fn voxel_oracle(stream: &EventStream, cfg: &VoxelizationConfig) -> Vec<f64> {
    let (b, h, w) = (cfg.num_bins, usize::from(cfg.height), usize::from(cfg.width));
    let mut out = vec![0.0; b * h * w];
    let span = (cfg.t_end - cfg.t_start) as f64;
    for e in stream.events() {
        let ts = (b as f64 - 1.0) * (e.t - cfg.t_start) as f64 / span;
        for bin in 0..b {
            let weight = (1.0 - (bin as f64 - ts).abs()).max(0.0);
            out[(bin * h + usize::from(e.y)) * w + usize::from(e.x)] += e.p.as_f64() * weight;
        }
    }
    out
}

/// `(gt, pred)` tally with a map.
pub fn confusion_oracle(pred: &[u8], gt: &[u8]) -> BTreeMap<(u8, u8), u64> {
    let mut m = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p != IGNORE_LABEL && g != IGNORE_LABEL {
            *m.entry((g, p)).or_insert(0) += 1;
        }
    }
    m
}

/// mIoU from a tally, straight from the definition.
pub fn miou_oracle(tally: &BTreeMap<(u8, u8), u64>, classes: u8) -> Option<f64> {
    let mut ious = Vec::new();
    for k in 0..classes {
        let tp = tally.get(&(k, k)).copied().unwrap_or(0);
        let fn_: u64 = tally.iter().filter(|((g, p), _)| *g == k && *p != k).map(|(_, v)| v).sum();
        let fp: u64 = tally.iter().filter(|((g, p), _)| *g != k && *p == k).map(|(_, v)| v).sum();
        if tp + fn_ + fp > 0 {
            ious.push(tp as f64 / (tp + fn_ + fp) as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Per-pixel pseudo-label rule.
pub fn pseudo_oracle(probs: &ProbMap, th: f64) -> Vec<u8> {
    let n = probs.height * probs.width;
    (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..probs.classes).map(|k| probs.data[k * n + i]).collect();
            let max = col.iter().copied().fold(f64::MIN, f64::max);
            let arg = col.iter().position(|&v| v == max).unwrap();
            if max > th {
                arg as u8
            } else {
                IGNORE_LABEL
            }
        })
        .collect()
}

/// Weighted sum of unit features per class, then normalized.
pub fn intra_oracle(z: &FeatureMap, r: &ReliabilityMap, a: &PseudoLabelMap) -> BTreeMap<u8, Vec<f64>> {
    let n = z.height * z.width;
    let mut sums: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        if a.data[i] == IGNORE_LABEL {
            continue;
        }
        let v: Vec<f64> = (0..z.channels).map(|c| z.data[c * n + i]).collect();
        let u = unit(&v);
        let s = sums.entry(a.data[i]).or_insert_with(|| vec![0.0; z.channels]);
        for (s, x) in s.iter_mut().zip(&u) {
            *s += r.data[i] * x;
        }
    }
    sums.into_iter().map(|(k, v)| (k, unit(&v))).collect()
}

/// Per-pixel log-sum-exp evaluation of the prototype contrast.
pub fn contrast_oracle(z: &FeatureMap, protos: &PrototypeMap, targets: &PseudoLabelMap, beta: f64) -> f64 {
    let n = z.height * z.width;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        let Some(pt) = protos.get(&targets.data[i]) else { continue };
        let v: Vec<f64> = (0..z.channels).map(|c| z.data[c * n + i]).collect();
        let u = unit(&v);
        let sim = |p: &[f64]| (u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / beta).exp();
        let denom: f64 = protos.values().map(|p| sim(&p.vector)).sum();
        total += -(sim(&pt.vector) / denom).ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// ---- gradient cases: each returns the worst relative error ----

pub fn small_network(rng: &mut ChaCha8Rng) -> NetworkConfig {
    let stride = if rng.random_bool(0.5) { 2 } else { 4 };
    let classes = rng.random_range(2..=4);
    NetworkConfig {
        classes,
        feature_dim: rng.random_range(classes..=6),
        stride,
        recurrent_steps: rng.random_range(1..=3),
        trunk_widths: [rng.random_range(2..=4), rng.random_range(2..=4)],
        decoder_width: rng.random_range(2..=4),
        input_bins: rng.random_range(1..=3),
        height: stride * rng.random_range(2..=3),
        width: stride * rng.random_range(2..=3),
        init_seed: rng.random(),
    }
}

pub fn random_voxels(rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Vec<VoxelGrid> {
    (0..cfg.recurrent_steps)
        .map(|_| VoxelGrid {
            num_bins: cfg.input_bins,
            height: cfg.height,
            width: cfg.width,
            t_start: 0,
            t_end: 1,
            data: random_vec(rng, cfg.input_bins * cfg.height * cfg.width, 2.0),
        })
        .collect()
}

/// Encoder + decoder parameters against a linear readout of logits and
/// features.
pub fn network_grad_case(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let cfg = small_network(&mut rng);
    let params = init_branch(&cfg, cfg.init_seed).unwrap();
    let voxels = random_voxels(&mut rng, &cfg);
    let pass = BranchPass::run(&params, &cfg, &voxels).unwrap();
    let wl = random_vec(&mut rng, pass.logits.data.len(), 1.0);
    let wz = random_vec(&mut rng, pass.features().data.len(), 1.0);
    let mut grads = params.zeros_like();
    pass.backward(&params, &cfg, Some(&wl), Some(&wz), &mut grads).unwrap();

    let flat: Vec<f64> = params.iter_scalars().collect();
    let analytic: Vec<f64> = grads.iter_scalars().collect();
    let readout = |x: &[f64]| {
        let mut p = params.clone();
        for (i, v) in x.iter().enumerate() {
            p.set_scalar(i, *v);
        }
        let pass = BranchPass::run(&p, &cfg, &voxels).unwrap();
        pass.logits.data.iter().zip(&wl).map(|(a, b)| a * b).sum::<f64>()
            + pass.features().data.iter().zip(&wz).map(|(a, b)| a * b).sum::<f64>()
    };
    // a few coordinates from every array
    let mut indices = Vec::new();
    let mut offset = 0;
    for p in params.params() {
        for _ in 0..3 {
            indices.push(offset + rng.random_range(0..p.data.len()));
        }
        offset += p.data.len();
    }
    central_diff_check(readout, &flat, &analytic, &indices, 1e-6)
}

pub fn weak_grad_case(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (c, h, w) = (rng.random_range(2..=5), rng.random_range(2..=6), rng.random_range(2..=6));
    let lf = random_logits(&mut rng, c, h, w);
    let lb = random_logits(&mut rng, c, h, w);
    let n = rng.random_range(1..=4);
    let labels = random_labels(&mut rng, c, h, w, n);
    let (gf, gb) = weak_loss(&softmax_probs(&lf).unwrap(), &softmax_probs(&lb).unwrap(), &labels).unwrap();
    let eval = |f: &[f64], b: &[f64]| {
        let pf = softmax_probs(&LogitMap { data: f.to_vec(), ..lf.clone() }).unwrap();
        let pb = softmax_probs(&LogitMap { data: b.to_vec(), ..lb.clone() }).unwrap();
        weak_loss(&pf, &pb, &labels).unwrap().0.value
    };
    let idx: Vec<usize> = (0..lf.data.len()).collect();
    let ef = central_diff_check(|x| eval(x, &lb.data), &lf.data, &gf.grad, &idx, 1e-6);
    let eb = central_diff_check(|x| eval(&lf.data, x), &lb.data, &gb.grad, &idx, 1e-6);
    ef.max(eb)
}

/// Pseudo maps are held fixed while the logits move.
pub fn dual_grad_case(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (c, h, w) = (rng.random_range(2..=5), rng.random_range(2..=6), rng.random_range(2..=6));
    let lf = random_logits(&mut rng, c, h, w);
    let lb = random_logits(&mut rng, c, h, w);
    let af = random_pseudo(&mut rng, c, h, w, 0.3);
    let ab = random_pseudo(&mut rng, c, h, w, 0.3);
    let pf = softmax_probs(&lf).unwrap();
    let pb = softmax_probs(&lb).unwrap();
    let (_, gf, gb) = dual_loss(&pf, &ab, &pb, &af).unwrap();
    let eval = |f: &[f64], b: &[f64]| {
        let pf = softmax_probs(&LogitMap { data: f.to_vec(), ..lf.clone() }).unwrap();
        let pb = softmax_probs(&LogitMap { data: b.to_vec(), ..lb.clone() }).unwrap();
        dual_loss(&pf, &ab, &pb, &af).unwrap().0
    };
    let idx: Vec<usize> = (0..lf.data.len()).collect();
    let ef = central_diff_check(|x| eval(x, &lb.data), &lf.data, &gf.grad, &idx, 1e-6);
    let eb = central_diff_check(|x| eval(&lf.data, x), &lb.data, &gb.grad, &idx, 1e-6);
    ef.max(eb)
}

/// Prototype contrast w.r.t. features; the prototypes stay fixed.
pub fn proto_grad_case(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(2..=6);
    let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let c = rng.random_range(2..=4u8);
    let classes: Vec<u8> = (0..c).filter(|_| rng.random_bool(0.8)).collect();
    let classes = if classes.is_empty() { vec![0] } else { classes };
    let protos = random_protos(&mut rng, &classes, d);
    let z = random_features(&mut rng, d, h, w);
    let targets = random_pseudo(&mut rng, c as usize, h, w, 0.2);
    let cfg = ContrastConfig {
        temperature: rng.random_range(0.1..1.0),
        ..ContrastConfig::default()
    };
    let loss = proto_contrast_loss(&z, &protos, &targets, &cfg).unwrap();
    let eval = |x: &[f64]| {
        proto_contrast_loss(&FeatureMap { data: x.to_vec(), ..z.clone() }, &protos, &targets, &cfg)
            .unwrap()
            .value
    };
    let idx: Vec<usize> = (0..z.data.len()).collect();
    central_diff_check(eval, &z.data, &loss.grad, &idx, 1e-6)
}

/// Distillation w.r.t. the projection parameters; features stay fixed.
pub fn distill_grad_case(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let d = rng.random_range(2..=6);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let pair = ProjectionPair::init(d, rng.random(), 0.5);
    let zf = random_features(&mut rng, d, h, w);
    let zb = random_features(&mut rng, d, h, w);
    let loss = distill_loss(&zf, &zb, &pair).unwrap();
    let flat: Vec<f64> = pair.params.iter_scalars().collect();
    let analytic: Vec<f64> = loss.grad.iter_scalars().collect();
    let eval = |x: &[f64]| {
        let mut p = pair.clone();
        for (i, v) in x.iter().enumerate() {
            p.params.set_scalar(i, *v);
        }
        distill_loss(&zf, &zb, &p).unwrap().value
    };
    // piecewise linear, so a wide step is exact between kinks
    let idx: Vec<usize> = (0..flat.len()).collect();
    central_diff_check(eval, &flat, &analytic, &idx, 1e-5)
}

/// Projection output against an explicit matrix-vector product.
pub fn projection_oracle(pair: &ProjectionPair, v: &[f64], direction: Direction) -> Vec<f64> {
    let d = pair.dim();
    let (wt, b) = (pair.weight(direction), pair.bias(direction));
    (0..d).map(|i| b[i] + (0..d).map(|j| wt[i * d + j] * v[j]).sum::<f64>()).collect()
}
