//! Invariant checks. Each returns `Err` with a description of the first
//! counterexample so the same code backs the unit-style tests and the
//! acceptance report.

use std::collections::BTreeSet;

use evseg_core::event::{reverse, slice_window, voxelize, Event, EventStream, Polarity, VoxelizationConfig};
use evseg_core::evaluator::{confusion, evaluate, miou, ConfusionMatrix};
use evseg_core::labels::LabelMode;
use evseg_core::event::VoxelGrid;
use evseg_core::network::{init_branch, predict, BranchPass, FeatureMap};
use evseg_core::prototypes::{
    inter_aggregate, intra_aggregate, proto_contrast_loss, queue_push, Branch, ClassPrototype, ContrastConfig,
    PrototypeBank, PrototypeMap,
};
use evseg_core::supervision::{dual_loss, pseudo_gt, softmax_probs, weak_loss, ProbMap, ReliabilityMap};
use evseg_core::synth::{
    corrupt_drop, corrupt_swap, generate_sample, random_scene, simulate_events, BenchmarkConfig, SimConfig,
    IGNORE_LABEL,
};
use evseg_core::trainer::{prepare_sample, train_step, Mode, Model, PreparedSample, TrainConfig, TrainerState};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use super::*;

pub type Check = Result<(), String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

pub fn event_strategy(w: u16, h: u16, t_max: u64, max_len: usize) -> impl Strategy<Value = EventStream> {
    prop::collection::vec((0..w, 0..h, 0..t_max, any::<bool>()), 0..max_len).prop_map(move |raw| {
        let events = raw
            .into_iter()
            .map(|(x, y, t, pos)| Event::new(x, y, t, if pos { Polarity::Positive } else { Polarity::Negative }))
            .collect();
        EventStream::from_unsorted(w, h, events).unwrap()
    })
}

fn pixel_counts(s: &EventStream) -> Vec<usize> {
    let mut out = vec![0; usize::from(s.width()) * usize::from(s.height())];
    for e in s.events() {
        out[usize::from(e.y) * usize::from(s.width()) + usize::from(e.x)] += 1;
    }
    out
}

// ---- events ----

pub fn reversal_involution() -> Check {
    run(256, event_strategy(8, 6, 1_000, 64), |s| {
        ensure(reverse(&reverse(&s)) == s, || "reverse twice differs".into())
    })
}

pub fn reversal_preserves_counts() -> Check {
    run(256, event_strategy(8, 6, 1_000, 64), |s| {
        let r = reverse(&s);
        ensure(r.len() == s.len(), || "count changed".into())?;
        ensure(pixel_counts(&r) == pixel_counts(&s), || "per-pixel counts changed".into())?;
        ensure(r.polarity_sum() == -s.polarity_sum(), || "polarity sum not negated".into())
    })
}

pub fn voxel_mass_conservation() -> Check {
    run(256, (event_strategy(8, 6, 1_000, 80), 1usize..8, 0u64..500, 1u64..500), |(s, bins, t0, len)| {
        let t1 = t0 + len;
        let inside = slice_window(&s, t0, t1).unwrap();
        let cfg = VoxelizationConfig::new(8, 6, t0, t1).with_bins(bins);
        let grid = voxelize(&inside, &cfg).unwrap();
        let expected = inside.polarity_sum() as f64;
        let err = (grid.sum() - expected).abs() / expected.abs().max(1.0);
        ensure(err <= 1e-5, || format!("grid sum {} vs polarity sum {expected}", grid.sum()))
    })
}

pub fn voxel_additivity() -> Check {
    let strat = (event_strategy(7, 5, 400, 40), event_strategy(7, 5, 400, 40), 1usize..7);
    run(256, strat, |(a, b, bins)| {
        let cfg = VoxelizationConfig::new(7, 5, 0, 400).with_bins(bins);
        let mut all = a.events().to_vec();
        all.extend_from_slice(b.events());
        let union = EventStream::from_unsorted(7, 5, all).unwrap();
        let (ga, gb, gu) = (voxelize(&a, &cfg).unwrap(), voxelize(&b, &cfg).unwrap(), voxelize(&union, &cfg).unwrap());
        for i in 0..gu.data.len() {
            let d = (gu.data[i] - ga.data[i] - gb.data[i]).abs();
            ensure(d <= 1e-6, || format!("cell {i} differs by {d:e}"))?;
        }
        Ok(())
    })
}

pub fn slice_is_subsequence() -> Check {
    run(256, (event_strategy(5, 5, 300, 60), 0u64..300, 1u64..300), |(s, t0, len)| {
        let out = slice_window(&s, t0, t0 + len).unwrap();
        let expected: Vec<Event> = s.events().iter().copied().filter(|e| e.t >= t0 && e.t < t0 + len).collect();
        ensure(out.events() == expected.as_slice(), || "window is not the in-range subsequence".into())
    })
}

// ---- simulator ----

fn small_bench() -> BenchmarkConfig {
    BenchmarkConfig {
        width: 24,
        height: 20,
        duration_us: 40_000,
        target_time_us: 20_000,
        ..BenchmarkConfig::default()
    }
}

pub fn synth_events_in_bounds_and_deterministic() -> Check {
    run(16, any::<u64>(), |seed| {
        let cfg = small_bench();
        let scene = random_scene(&cfg, &mut rng(seed));
        let sim = SimConfig::default();
        let a = simulate_events(&scene, &sim).unwrap();
        let b = simulate_events(&scene, &sim).unwrap();
        ensure(a == b, || "simulation is not deterministic".into())?;
        for e in a.events() {
            ensure(e.x < cfg.width && e.y < cfg.height && e.t <= cfg.duration_us, || format!("{e:?} out of bounds"))?;
        }
        Ok(())
    })
}

pub fn synth_labels_valid() -> Check {
    run(16, (any::<u64>(), 1usize..=10), |(seed, k)| {
        let cfg = small_bench();
        let scene = random_scene(&cfg, &mut rng(seed));
        let s = generate_sample("s".into(), scene, &SimConfig::default(), cfg.target_time_us, k, seed).unwrap();
        ensure(s.labels.validate(cfg.width, cfg.height, 6).is_ok(), || "labels invalid".into())?;
        for p in &s.labels.points {
            ensure(s.gt.at(usize::from(p.x), usize::from(p.y)) == p.class, || format!("{p:?} disagrees with gt"))?;
        }
        Ok(())
    })
}

pub fn corruption_invariants() -> Check {
    run(128, (any::<u64>(), 0.0..=1.0f64, 0.0..=1.0f64), |(seed, rate, p)| {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, 6, 12, 12, 20);
        let confusing: BTreeSet<u8> = [1, 4].into();
        let dropped = corrupt_drop(&labels, &confusing, rate, &mut r).unwrap();
        ensure(dropped.points.iter().all(|p| labels.points.contains(p)), || "drop invented a point".into())?;
        let swapped = corrupt_swap(&labels, p, &mut r).unwrap();
        ensure(swapped.len() == labels.len(), || "swap changed the count".into())?;
        let pos = |s: &evseg_core::labels::PointLabelSet| {
            let mut v: Vec<(u16, u16)> = s.points.iter().map(|p| (p.x, p.y)).collect();
            v.sort_unstable();
            v
        };
        ensure(pos(&swapped) == pos(&labels), || "swap moved a point".into())?;
        ensure(swapped.mode == LabelMode::TenClicks, || "mode changed".into())
    })
}

// ---- network ----

pub fn branches_are_independent() -> Check {
    run(12, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let cfg = small_network(&mut r);
        let mut model = Model::new(cfg.clone(), 0.01).unwrap();
        let voxels = random_voxels(&mut r, &cfg);
        let before = predict(&model.forward, &cfg, &voxels).unwrap();
        for v in model.backward.get_mut(0) {
            *v += 1.0;
        }
        let after = predict(&model.forward, &cfg, &voxels).unwrap();
        ensure(before == after, || "touching the backward branch moved forward outputs".into())
    })
}

/// Translating the input by one stride shifts interior features by one cell.
pub fn encoder_shift_consistency() -> Check {
    run(8, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let mut cfg = small_network(&mut r);
        cfg.height = cfg.stride * 4;
        cfg.width = cfg.stride * 10;
        let params = init_branch(&cfg, cfg.init_seed).unwrap();
        let base = random_voxels(&mut r, &cfg);
        let s = cfg.stride;
        let shifted: Vec<_> = base.iter().map(|g| shift_right(g, s)).collect();
        let za = BranchPass::run(&params, &cfg, &base).unwrap().features().clone();
        let zb = BranchPass::run(&params, &cfg, &shifted).unwrap().features().clone();
        // the receptive field reaches under three cells past each side
        for c in 0..za.channels {
            for y in 0..za.height {
                for x in 3..za.width - 4 {
                    let a = za.data[(c * za.height + y) * za.width + x];
                    let b = zb.data[(c * zb.height + y) * zb.width + x + 1];
                    ensure((a - b).abs() <= 1e-5, || format!("cell ({c},{y},{x}) {a} vs {b}"))?;
                }
            }
        }
        Ok(())
    })
}

fn shift_right(g: &VoxelGrid, by: usize) -> VoxelGrid {
    let mut out = VoxelGrid { data: vec![0.0; g.data.len()], ..g.clone() };
    for b in 0..g.num_bins {
        for y in 0..g.height {
            for x in by..g.width {
                out.data[(b * g.height + y) * g.width + x] = g.data[(b * g.height + y) * g.width + x - by];
            }
        }
    }
    out
}

// ---- supervision ----

pub fn weak_loss_properties() -> Check {
    run(128, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(2..=6), r.random_range(2..=6));
        let n = r.random_range(1..=4);
        let labels = random_labels(&mut r, c, h, w, n);
        let lf = random_logits(&mut r, c, h, w);
        let lb = random_logits(&mut r, c, h, w);
        let v = weak_loss(&softmax_probs(&lf).unwrap(), &softmax_probs(&lb).unwrap(), &labels).unwrap().0.value;
        ensure(v >= 0.0, || format!("negative weak loss {v}"))?;
        // scramble every unlabeled pixel
        let labeled: BTreeSet<usize> = labels.points.iter().map(|p| usize::from(p.y) * w + usize::from(p.x)).collect();
        let (mut lf2, mut lb2) = (lf.clone(), lb.clone());
        for k in 0..c {
            for i in 0..h * w {
                if !labeled.contains(&i) {
                    lf2.data[k * h * w + i] = r.random_range(-9.0..9.0);
                    lb2.data[k * h * w + i] = r.random_range(-9.0..9.0);
                }
            }
        }
        let v2 = weak_loss(&softmax_probs(&lf2).unwrap(), &softmax_probs(&lb2).unwrap(), &labels).unwrap().0.value;
        ensure(v == v2, || format!("unlabeled pixels changed the loss: {v} vs {v2}"))?;
        // one-hot at every labeled pixel drives it to zero
        let onehot = |hw: usize| {
            let mut p = ProbMap { classes: c, height: h, width: w, data: vec![0.0; c * hw] };
            for i in 0..hw {
                p.data[i] = 1.0;
            }
            for q in &labels.points {
                let i = usize::from(q.y) * w + usize::from(q.x);
                for k in 0..c {
                    p.data[k * hw + i] = if k == usize::from(q.class) { 1.0 } else { 0.0 };
                }
            }
            p
        };
        let zero = weak_loss(&onehot(h * w), &onehot(h * w), &labels).unwrap().0.value;
        ensure(zero == 0.0, || format!("perfect predictions give {zero}"))
    })
}

pub fn pseudo_threshold_monotone() -> Check {
    run(256, (any::<u64>(), 0.01..0.99f64, 0.01..0.99f64), |(seed, a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut r = rng(seed);
        let c = r.random_range(2..=6);
        let probs = random_probs(&mut r, c, 5, 7);
        let low = pseudo_gt(&probs, lo).unwrap();
        let high = pseudo_gt(&probs, hi).unwrap();
        for i in 0..low.data.len() {
            if high.data[i] != IGNORE_LABEL {
                ensure(low.data[i] == high.data[i], || format!("pixel {i} lost at the lower threshold"))?;
            }
        }
        Ok(())
    })
}

pub fn dual_loss_symmetry() -> Check {
    run(256, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(2..=6), r.random_range(2..=6));
        let pf = random_probs(&mut r, c, h, w);
        let pb = random_probs(&mut r, c, h, w);
        let af = random_pseudo(&mut r, c, h, w, 0.3);
        let ab = random_pseudo(&mut r, c, h, w, 0.3);
        let (v1, _, _) = dual_loss(&pf, &ab, &pb, &af).unwrap();
        let (v2, _, _) = dual_loss(&pb, &af, &pf, &ab).unwrap();
        ensure(v1 == v2, || format!("{v1} vs {v2}"))
    })
}

/// The pseudo map produced by a branch carries no gradient back to it: the
/// forward gradient ignores the forward pseudo map entirely.
pub fn pseudo_gradient_masked() -> Check {
    run(128, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let (c, h, w) = (r.random_range(2..=5), r.random_range(2..=6), r.random_range(2..=6));
        let pf = random_probs(&mut r, c, h, w);
        let pb = random_probs(&mut r, c, h, w);
        let ab = random_pseudo(&mut r, c, h, w, 0.3);
        let af1 = random_pseudo(&mut r, c, h, w, 0.3);
        let af2 = random_pseudo(&mut r, c, h, w, 0.3);
        let (_, g1, _) = dual_loss(&pf, &ab, &pb, &af1).unwrap();
        let (_, g2, _) = dual_loss(&pf, &ab, &pb, &af2).unwrap();
        ensure(g1.grad == g2.grad, || "forward gradient depends on the forward pseudo map".into())
    })
}

// ---- prototypes ----

pub fn bank_prototypes_unit_norm() -> Check {
    run(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let d = r.random_range(2..=8);
        let cap = r.random_range(1..=5);
        let mut bank = PrototypeBank::new(Branch::Forward, d, cap);
        for _ in 0..r.random_range(1..=12) {
            let z = random_features(&mut r, d, 4, 4);
            let rel = ReliabilityMap { height: 4, width: 4, data: random_vec(&mut r, 16, 1.0).iter().map(|v| v.abs()).collect() };
            let a = random_pseudo(&mut r, 4, 4, 4, 0.3);
            let intra = intra_aggregate(&z, &rel, &a, Branch::Forward, 1).unwrap();
            for p in intra.values() {
                ensure((norm(&p.vector) - 1.0).abs() <= 1e-6, || "intra prototype off the sphere".into())?;
            }
            queue_push(&mut bank, &intra).unwrap();
            for v in bank.all_vectors() {
                ensure((norm(v) - 1.0).abs() <= 1e-6, || "bank vector off the sphere".into())?;
            }
            ensure(bank.classes().all(|k| bank.queue(k).unwrap().len() <= cap), || "queue over capacity".into())?;
        }
        Ok(())
    })
}

pub fn intra_scale_invariant() -> Check {
    run(128, (any::<u64>(), 1e-3..1e3f64), |(seed, lambda)| {
        let mut r = rng(seed);
        let d = r.random_range(2..=6);
        let z = random_features(&mut r, d, 5, 5);
        let rel = ReliabilityMap { height: 5, width: 5, data: (0..25).map(|_| r.random_range(0.0..1.0)).collect() };
        let a = random_pseudo(&mut r, 4, 5, 5, 0.2);
        let scaled = FeatureMap { data: z.data.iter().map(|v| v * lambda).collect(), ..z.clone() };
        let p1 = intra_aggregate(&z, &rel, &a, Branch::Forward, 1).unwrap();
        let p2 = intra_aggregate(&scaled, &rel, &a, Branch::Forward, 1).unwrap();
        ensure(p1.keys().eq(p2.keys()), || "class sets differ".into())?;
        for (k, p) in &p1 {
            let diff = p.vector.iter().zip(&p2[k].vector).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(diff < 1e-6, || format!("class {k} moved by {diff:e}"))?;
        }
        Ok(())
    })
}

fn contrast_setup(r: &mut ChaCha8Rng) -> (FeatureMap, PrototypeMap, evseg_core::supervision::PseudoLabelMap, ContrastConfig) {
    let d = r.random_range(2..=6);
    let c = r.random_range(2..=5u8);
    let classes: Vec<u8> = (0..c).collect();
    let protos = random_protos(r, &classes, d);
    let z = random_features(r, d, 4, 5);
    let targets = random_pseudo(r, usize::from(c), 4, 5, 0.2);
    let cfg = ContrastConfig { temperature: r.random_range(0.05..1.0), ..ContrastConfig::default() };
    (z, protos, targets, cfg)
}

pub fn contrast_non_negative() -> Check {
    run(256, any::<u64>(), |seed| {
        let (z, protos, targets, cfg) = contrast_setup(&mut rng(seed));
        let v = proto_contrast_loss(&z, &protos, &targets, &cfg).unwrap().value;
        ensure(v >= 0.0, || format!("negative contrast loss {v}"))
    })
}

/// Random orthogonal matrix by Gram-Schmidt on a random square.
pub fn random_rotation(r: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < d {
        let mut v = random_vec(r, d, 1.0);
        for q in &rows {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(q) {
                *x -= dot * y;
            }
        }
        if norm(&v) > 1e-3 {
            rows.push(unit(&v));
        }
    }
    rows
}

fn rotate(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

pub fn contrast_rotation_invariant() -> Check {
    run(128, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let (z, protos, targets, cfg) = contrast_setup(&mut r);
        let m = random_rotation(&mut r, z.channels);
        let n = z.height * z.width;
        let mut zr = z.clone();
        for i in 0..n {
            let mut v = vec![0.0; z.channels];
            z.vector_at(i, &mut v);
            let v = rotate(&m, &v);
            for c in 0..z.channels {
                zr.data[c * n + i] = v[c];
            }
        }
        let pr: PrototypeMap = protos
            .iter()
            .map(|(k, p)| (*k, ClassPrototype { vector: rotate(&m, &p.vector), ..p.clone() }))
            .collect();
        let a = proto_contrast_loss(&z, &protos, &targets, &cfg).unwrap().value;
        let b = proto_contrast_loss(&zr, &pr, &targets, &cfg).unwrap().value;
        ensure((a - b).abs() <= 1e-6, || format!("{a} vs {b}"))
    })
}

/// Recomputing the inter-level prototypes from the queue contents alone
/// agrees with what the bank keeps after incremental pushes.
pub fn inter_stateless() -> Check {
    run(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let d = r.random_range(2..=5);
        let mut bank = PrototypeBank::new(Branch::Backward, d, r.random_range(1..=4));
        for _ in 0..r.random_range(1..=10) {
            let classes: Vec<u8> = (0..4).filter(|_| r.random_bool(0.6)).collect();
            queue_push(&mut bank, &random_protos(&mut r, &classes, d)).unwrap();
        }
        for k in bank.classes().collect::<Vec<_>>() {
            let fresh = inter_aggregate(&bank, k).unwrap();
            let kept = &bank.inter()[&k];
            ensure(fresh.vector == kept.vector, || format!("class {k} inter prototype is stale"))?;
        }
        Ok(())
    })
}

// ---- trainer ----

pub fn tiny_setup(seed: u64) -> (Vec<PreparedSample>, NetworkConfig) {
    let bench = BenchmarkConfig {
        scenes: 6,
        width: 16,
        height: 16,
        duration_us: 40_000,
        target_time_us: 20_000,
        seed,
        ..BenchmarkConfig::default()
    };
    let b = evseg_core::synth::generate_benchmark(&bench).unwrap();
    let net = NetworkConfig {
        feature_dim: 6,
        trunk_widths: [3, 4],
        decoder_width: 3,
        height: 16,
        width: 16,
        init_seed: seed,
        ..NetworkConfig::default()
    };
    let cfg = TrainConfig { window_us: 10_000, ..TrainConfig::default() };
    let data = b.train.iter().map(|s| prepare_sample(s, &net, &cfg).unwrap()).collect();
    (data, net)
}

pub fn tiny_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        steps: 6,
        batch_size: 2,
        window_us: 10_000,
        ..TrainConfig::default()
    }
}

pub fn baseline_backward_frozen() -> Check {
    let (data, net) = tiny_setup(1);
    let mut st = TrainerState::init(net, tiny_config(Mode::Baseline, 1)).map_err(|e| e.to_string())?;
    let before = st.model.backward.fingerprint();
    let fwd = st.model.forward.fingerprint();
    for _ in 0..5 {
        st.step_on(&data).map_err(|e| e.to_string())?;
        if st.model.backward.fingerprint() != before {
            return Err(format!("backward branch changed at step {}", st.step));
        }
    }
    if st.model.forward.fingerprint() == fwd {
        return Err("forward branch never moved".into());
    }
    Ok(())
}

pub fn zero_distill_weight_freezes_projection() -> Check {
    let (data, net) = tiny_setup(2);
    let mut cfg = tiny_config(Mode::Full, 2);
    cfg.weights.distill = 0.0;
    let mut st = TrainerState::init(net, cfg).map_err(|e| e.to_string())?;
    let before = st.model.projection.params.fingerprint();
    for _ in 0..5 {
        st.step_on(&data).map_err(|e| e.to_string())?;
    }
    if st.model.projection.params.fingerprint() != before {
        return Err("projection moved with zero distillation weight".into());
    }
    Ok(())
}

/// Distillation only trains the projection: branch parameters after a step
/// do not depend on its weight.
pub fn distill_gradient_masked() -> Check {
    let (data, net) = tiny_setup(3);
    let batch: Vec<&PreparedSample> = data.iter().take(2).collect();
    let mut runs = Vec::new();
    for w in [0.0, 1.0, 7.0] {
        let mut cfg = tiny_config(Mode::DualProtoDistill, 3);
        cfg.weights.distill = w;
        let mut st = TrainerState::init(net.clone(), cfg).map_err(|e| e.to_string())?;
        train_step(&mut st, &batch).map_err(|e| e.to_string())?;
        runs.push((st.model.forward, st.model.backward, st.model.projection));
    }
    if runs.windows(2).any(|p| p[0].0 != p[1].0 || p[0].1 != p[1].1) {
        return Err("distillation weight leaked into branch parameters".into());
    }
    if runs[1].2 == runs[2].2 || runs[0].2 == runs[1].2 {
        return Err("projection did not respond to distillation".into());
    }
    Ok(())
}

/// Prototypes built from `z` act as constants in the contrast gradient: it
/// matches differences taken with the prototypes frozen.
pub fn prototype_gradient_masked() -> Check {
    run(32, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let d = r.random_range(2..=5);
        let z = random_features(&mut r, d, 4, 4);
        let rel = ReliabilityMap { height: 4, width: 4, data: vec![1.0; 16] };
        let a = random_pseudo(&mut r, 3, 4, 4, 0.0);
        let cfg = ContrastConfig::default();
        let protos = intra_aggregate(&z, &rel, &a, Branch::Forward, 1).unwrap();
        let loss = proto_contrast_loss(&z, &protos, &a, &cfg).unwrap();
        let fixed = |x: &[f64]| {
            let zz = FeatureMap { data: x.to_vec(), ..z.clone() };
            proto_contrast_loss(&zz, &protos, &a, &cfg).unwrap().value
        };
        // scaled by the largest component: pixels sitting on their own
        // prototype have near-zero gradients that differences cannot resolve
        let scale = loss.grad.iter().fold(1e-3f64, |m, g| m.max(g.abs()));
        let mut probe = z.data.clone();
        for i in 0..z.data.len() {
            probe[i] = z.data[i] + 1e-6;
            let up = fixed(&probe);
            probe[i] = z.data[i] - 1e-6;
            let down = fixed(&probe);
            probe[i] = z.data[i];
            let err = (loss.grad[i] - (up - down) / 2e-6).abs() / scale;
            ensure(err < 1e-4, || format!("coordinate {i} off by {err:e}"))?;
        }
        Ok(())
    })
}

pub fn bookkeeping_identity() -> Check {
    let (data, net) = tiny_setup(4);
    for mode in Mode::ALL {
        let cfg = TrainConfig {
            weights: evseg_core::trainer::LossWeights { weak: 0.7, dual: 1.3, proto: 0.4, distill: 2.1 },
            ..tiny_config(mode, 4)
        };
        let w = cfg.weights;
        let mut st = TrainerState::init(net.clone(), cfg).map_err(|e| e.to_string())?;
        for _ in 0..3 {
            let batch: Vec<&PreparedSample> = data.iter().take(2).collect();
            let b = train_step(&mut st, &batch).map_err(|e| e.to_string())?;
            if (b.weighted_total(&w) - b.total).abs() > 1e-8 {
                return Err(format!("{mode}: logged total {} vs weighted sum {}", b.total, b.weighted_total(&w)));
            }
        }
    }
    Ok(())
}

pub fn deterministic_logs() -> Check {
    let (data, net) = tiny_setup(5);
    let mut cfg = tiny_config(Mode::Full, 5);
    cfg.steps = 20;
    let run = || {
        let mut st = TrainerState::init(net.clone(), cfg.clone()).unwrap();
        evseg_core::trainer::fit(&mut st, &data, |_| Ok(())).unwrap()
    };
    let (a, b) = (run(), run());
    let same = a.len() == 20
        && a.iter().zip(&b).all(|(x, y)| serde_json::to_string(x).unwrap() == serde_json::to_string(y).unwrap());
    if same {
        Ok(())
    } else {
        Err("two runs with one seed produced different logs".into())
    }
}

pub fn mirror_symmetry() -> Check {
    let (data, net) = tiny_setup(6);
    let cfg = tiny_config(Mode::Dual, 6);
    let st = TrainerState::init(net.clone(), cfg.clone()).map_err(|e| e.to_string())?;
    let mut mirrored_model = st.model.clone();
    std::mem::swap(&mut mirrored_model.forward, &mut mirrored_model.backward);
    let mut a = st;
    let mut b = TrainerState::new(mirrored_model, cfg).map_err(|e| e.to_string())?;
    let flipped: Vec<PreparedSample> = data
        .iter()
        .take(2)
        .map(|s| PreparedSample { forward: s.backward.clone(), backward: s.forward.clone(), ..s.clone() })
        .collect();
    let la = train_step(&mut a, &data.iter().take(2).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let lb = train_step(&mut b, &flipped.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6;
    if close(la.weak_parts[0], lb.weak_parts[1])
        && close(la.weak_parts[1], lb.weak_parts[0])
        && close(la.dual_parts[0], lb.dual_parts[1])
        && close(la.dual_parts[1], lb.dual_parts[0])
    {
        Ok(())
    } else {
        Err(format!("{la:?} vs {lb:?}"))
    }
}

// ---- evaluator ----

pub fn confusion_additive() -> Check {
    run(128, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let c = r.random_range(2..=6);
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let gt = random_dense(&mut r, c, h, w, 0.1);
        let pred = random_dense(&mut r, c, h, w, 0.1).data;
        let full = confusion(&pred, &gt, c).unwrap();
        let cut = r.random_range(0..=h * w);
        let mask = |keep_first: bool| {
            let mut g = gt.clone();
            for (i, v) in g.data.iter_mut().enumerate() {
                if (i < cut) != keep_first {
                    *v = IGNORE_LABEL;
                }
            }
            g
        };
        let mut parts = confusion(&pred, &mask(true), c).unwrap();
        parts.merge(&confusion(&pred, &mask(false), c).unwrap()).unwrap();
        ensure(parts == full, || "partition sums differ".into())
    })
}

pub fn miou_bounds() -> Check {
    run(256, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let c = r.random_range(2..=6);
        let gt = random_dense(&mut r, c, 6, 6, 0.0);
        let perfect = r.random_bool(0.3);
        let pred = if perfect { gt.data.clone() } else { random_dense(&mut r, c, 6, 6, 0.0).data };
        let cm: ConfusionMatrix = confusion(&pred, &gt, c).unwrap();
        let diagonal = (0..c).all(|g| (0..c).all(|p| g == p || cm.at(g, p) == 0));
        let m = miou(&cm).unwrap().miou;
        ensure((0.0..=1.0).contains(&m), || format!("mIoU {m} out of range"))?;
        ensure((m == 1.0) == diagonal, || format!("mIoU {m} but diagonal = {diagonal}"))
    })
}

pub fn evaluation_is_read_only() -> Check {
    let bench = BenchmarkConfig { scenes: 10, width: 16, height: 16, duration_us: 40_000, target_time_us: 20_000, ..BenchmarkConfig::default() };
    let b = evseg_core::synth::generate_benchmark(&bench).map_err(|e| e.to_string())?;
    let (_, net) = tiny_setup(7);
    let model = Model::new(net, 0.01).map_err(|e| e.to_string())?;
    let before = model.fingerprint();
    evaluate(&model, &b.eval, 10_000).map_err(|e| e.to_string())?;
    evaluate(&model, &b.train, 10_000).map_err(|e| e.to_string())?;
    if model.fingerprint() == before {
        Ok(())
    } else {
        Err("evaluation changed the parameters".into())
    }
}

/// Every property with its display name.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("reversal involution", reversal_involution),
        ("reversal preserves counts, negates polarity", reversal_preserves_counts),
        ("voxel mass conservation", voxel_mass_conservation),
        ("voxel additivity", voxel_additivity),
        ("slice_window subsequence", slice_is_subsequence),
        ("simulator bounds and determinism", synth_events_in_bounds_and_deterministic),
        ("sampled labels valid and match gt", synth_labels_valid),
        ("corruption invariants", corruption_invariants),
        ("branch independence", branches_are_independent),
        ("encoder stride shift", encoder_shift_consistency),
        ("weak loss properties", weak_loss_properties),
        ("pseudo-GT threshold monotone", pseudo_threshold_monotone),
        ("dual loss symmetry", dual_loss_symmetry),
        ("pseudo-GT gradient masking", pseudo_gradient_masked),
        ("prototype unit norm", bank_prototypes_unit_norm),
        ("intra aggregation scale invariance", intra_scale_invariant),
        ("contrast non-negative", contrast_non_negative),
        ("contrast rotation invariance", contrast_rotation_invariant),
        ("inter prototype stateless", inter_stateless),
        ("prototype gradient masking", prototype_gradient_masked),
        ("distillation gradient masking", distill_gradient_masked),
        ("baseline freezes backward branch", baseline_backward_frozen),
        ("zero distill weight freezes projection", zero_distill_weight_freezes_projection),
        ("loss bookkeeping identity", bookkeeping_identity),
        ("deterministic logs", deterministic_logs),
        ("dual mirror symmetry", mirror_symmetry),
        ("confusion additivity", confusion_additive),
        ("mIoU bounds", miou_bounds),
        ("evaluation read-only", evaluation_is_read_only),
    ]
}
