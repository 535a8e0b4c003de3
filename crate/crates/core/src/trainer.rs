//! Dual-branch training loop and its single-branch comparison modes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{reverse, select_backward, slice_window, voxel_sequence, EventStream, VoxelGrid};
use crate::labels::PointLabelSet;
use crate::math;
use crate::network::{self, derive_seed, BranchPass, FeatureMap, LogitMap, NetworkConfig, ParamSet, ProjectionPair};
use crate::optim::{RAdamConfig, RAdamState};
use crate::prototypes::{
    combine_banks, distill_loss, intra_aggregate, proto_contrast_loss, queue_push, Branch, ContrastConfig,
    PrototypeBank,
};
use crate::supervision::{
    downsample_labels, downsample_reliability, dual_loss, masked_cross_entropy, point_cross_entropy, pseudo_gt,
    reliability, softmax_probs, weak_loss,
};
use crate::synth::SyntheticSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "self")]
    SelfTraining,
    #[serde(rename = "ema")]
    Ema,
    #[serde(rename = "dual")]
    Dual,
    #[serde(rename = "dual+proto")]
    DualProto,
    #[serde(rename = "dual+proto+distill")]
    DualProtoDistill,
    #[serde(rename = "full")]
    Full,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Baseline,
        Mode::SelfTraining,
        Mode::Ema,
        Mode::Dual,
        Mode::DualProto,
        Mode::DualProtoDistill,
        Mode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::SelfTraining => "self",
            Mode::Ema => "ema",
            Mode::Dual => "dual",
            Mode::DualProto => "dual+proto",
            Mode::DualProtoDistill => "dual+proto+distill",
            Mode::Full => "full",
        }
    }

    /// Whether the backward branch is trained at all.
    pub fn uses_backward(self) -> bool {
        matches!(self, Mode::Dual | Mode::DualProto | Mode::DualProtoDistill | Mode::Full)
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Mode::DualProto | Mode::DualProtoDistill | Mode::Full)
    }

    pub fn uses_distill(self) -> bool {
        matches!(self, Mode::DualProtoDistill | Mode::Full)
    }

    /// Contrast against prototypes combined with the projected opposite branch.
    pub fn combines_prototypes(self) -> bool {
        self == Mode::Full
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub weak: f64,
    pub dual: f64,
    pub proto: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            weak: 1.0,
            dual: 1.0,
            proto: 1.0,
            distill: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Reliability threshold for pseudo labels.
    pub threshold: f64,
    pub temperature: f64,
    /// Backward events per forward event.
    pub backward_ratio: usize,
    /// Length of the forward window ending at the target time (us).
    pub window_us: u64,
    /// Steps before any pseudo-label or projection loss switches on.
    pub warmup_steps: u64,
    pub ema_momentum: f64,
    pub queue_capacity: usize,
    pub min_pixels: usize,
    pub optimizer: RAdamConfig,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Checkpoint period in steps; `None` checkpoints only at the end.
    pub checkpoint_every: Option<u64>,
    pub projection_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            threshold: 0.5,
            temperature: 0.1,
            backward_ratio: 5,
            window_us: 20_000,
            warmup_steps: 0,
            ema_momentum: 0.99,
            queue_capacity: 32,
            min_pixels: 1,
            optimizer: RAdamConfig::default(),
            grad_clip: None,
            checkpoint_every: None,
            projection_noise: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.weak, w.dual, w.proto, w.distill].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0, 1)"));
        }
        if self.backward_ratio == 0 || self.batch_size == 0 || self.window_us == 0 {
            return Err(Error::invalid("backward_ratio, batch_size and window_us must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid("ema_momentum must lie in [0, 1]"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        self.contrast().validate()
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            queue_capacity: self.queue_capacity,
            min_pixels: self.min_pixels,
        }
    }
}

/// Both branches and the projection pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub network: NetworkConfig,
    pub forward: ParamSet,
    pub backward: ParamSet,
    pub projection: ProjectionPair,
}

impl Model {
    pub fn new(network: NetworkConfig, projection_noise: f64) -> Result<Self> {
        let seed = network.init_seed;
        Ok(Self {
            forward: network::init_branch(&network, derive_seed(seed, 0))?,
            backward: network::init_branch(&network, derive_seed(seed, 1))?,
            projection: ProjectionPair::init(network.feature_dim, derive_seed(seed, 2), projection_noise),
            network,
        })
    }

    /// Inference uses the forward branch only.
    pub fn predict(&self, voxels: &[VoxelGrid]) -> Result<LogitMap> {
        network::predict(&self.forward, &self.network, voxels)
    }

    pub fn fingerprint(&self) -> u64 {
        self.forward.fingerprint() ^ self.backward.fingerprint().rotate_left(21) ^ self.projection.params.fingerprint().rotate_left(42)
    }
}

/// Voxel sequences and labels for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub forward: Vec<VoxelGrid>,
    pub backward: Vec<VoxelGrid>,
    pub labels: PointLabelSet,
}

/// Recurrent voxel sequence over `[target - window, target)`.
pub fn forward_voxels(
    events: &EventStream,
    target: u64,
    window_us: u64,
    network: &NetworkConfig,
) -> Result<Vec<VoxelGrid>> {
    let start = target.saturating_sub(window_us);
    if target <= start {
        return Err(Error::invalid("target time leaves an empty forward window"));
    }
    voxel_sequence(events, start, target, network.recurrent_steps, network.input_bins)
}

/// Future events (`ratio` times the forward count) reversed in time and
/// voxelized over their own span, so the last recurrent step sits next to
/// the target time.
pub fn backward_voxels(
    events: &EventStream,
    target: u64,
    n_forward: usize,
    ratio: usize,
    network: &NetworkConfig,
) -> Result<Vec<VoxelGrid>> {
    let reversed = reverse(&select_backward(events, target, n_forward, ratio));
    let steps = network.recurrent_steps as u64;
    let (start, end) = match reversed.time_span() {
        Some((lo, hi)) => (lo, (hi + 1).max(lo + steps)),
        None => (target, target + steps),
    };
    voxel_sequence(&reversed, start, end, network.recurrent_steps, network.input_bins)
}

pub fn prepare_sample(sample: &SyntheticSample, network: &NetworkConfig, cfg: &TrainConfig) -> Result<PreparedSample> {
    prepare_parts(&sample.id, &sample.events, sample.target_time, &sample.labels, network, cfg)
}

pub fn prepare_parts(
    id: &str,
    events: &EventStream,
    target: u64,
    labels: &PointLabelSet,
    network: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<PreparedSample> {
    let forward = forward_voxels(events, target, cfg.window_us, network)?;
    let n_forward = slice_window(events, target.saturating_sub(cfg.window_us), target)?.len();
    let backward = backward_voxels(events, target, n_forward, cfg.backward_ratio, network)?;
    labels.validate(events.width(), events.height(), network.classes)?;
    Ok(PreparedSample {
        id: id.into(),
        forward,
        backward,
        labels: labels.clone(),
    })
}

/// Per-term batch means. `None` marks a term that is switched off by the
/// mode or still in warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub weak: f64,
    pub dual: Option<f64>,
    pub proto_f: Option<f64>,
    pub proto_b: Option<f64>,
    pub distill: Option<f64>,
    pub total: f64,
    /// Per-branch halves of the weak and cross-branch terms, `[forward, backward]`.
    pub weak_parts: [f64; 2],
    pub dual_parts: [f64; 2],
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.weak * self.weak
            + w.dual * self.dual.unwrap_or(0.0)
            + w.proto * (self.proto_f.unwrap_or(0.0) + self.proto_b.unwrap_or(0.0))
            + w.distill * self.distill.unwrap_or(0.0)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_weak: f64,
    pub l_dual: Option<f64>,
    pub l_proto_f: Option<f64>,
    pub l_proto_b: Option<f64>,
    pub l_distill: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub model: Model,
    /// Shadow copy of the forward branch (ema mode only).
    pub teacher: Option<ParamSet>,
    pub bank_f: PrototypeBank,
    pub bank_b: PrototypeBank,
    pub opt_forward: RAdamState,
    pub opt_backward: RAdamState,
    pub opt_projection: RAdamState,
    pub step: u64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

struct Grads {
    forward: ParamSet,
    backward: ParamSet,
    projection: ParamSet,
}

#[derive(Default)]
struct Sums {
    weak: [f64; 2],
    dual: [f64; 2],
    proto: [f64; 2],
    distill: f64,
}

impl TrainerState {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.network.validate()?;
        let d = model.network.feature_dim;
        let teacher = (config.mode == Mode::Ema).then(|| model.forward.clone());
        Ok(Self {
            teacher,
            bank_f: PrototypeBank::new(Branch::Forward, d, config.queue_capacity),
            bank_b: PrototypeBank::new(Branch::Backward, d, config.queue_capacity),
            opt_forward: RAdamState::new(&model.forward),
            opt_backward: RAdamState::new(&model.backward),
            opt_projection: RAdamState::new(&model.projection.params),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
            model,
            config,
        })
    }

    /// Fresh model from `network` (its init seed) and trainer state.
    pub fn init(network: NetworkConfig, config: TrainConfig) -> Result<Self> {
        let model = Model::new(network, config.projection_noise)?;
        Self::new(model, config)
    }

    /// Checks a deserialized state against the layout its configs imply.
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let network = &self.model.network;
        let reference = Model::new(network.clone(), 0.0)?;
        let layout_err = |what: &str| Error::invalid(format!("{what} does not match the network config"));
        let pairs = [
            (&self.model.forward, &reference.forward, &self.opt_forward, "forward branch"),
            (&self.model.backward, &reference.backward, &self.opt_backward, "backward branch"),
            (&self.model.projection.params, &reference.projection.params, &self.opt_projection, "projection"),
        ];
        for (have, want, opt, what) in pairs {
            have.check_shapes()?;
            if !have.same_layout(want) {
                return Err(layout_err(what));
            }
            if !opt.matches(want) {
                return Err(layout_err("optimizer state"));
            }
        }
        if let Some(t) = &self.teacher {
            t.check_shapes()?;
            if !t.same_layout(&reference.forward) {
                return Err(layout_err("teacher"));
            }
        }
        for bank in [&self.bank_f, &self.bank_b] {
            if bank.dim != network.feature_dim || bank.all_vectors().any(|v| v.len() != bank.dim) {
                return Err(layout_err("prototype bank"));
            }
        }
        Ok(())
    }

    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() || self.order.len() != len {
                self.order = (0..len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// Draws the next shuffled batch from `data` and takes one step.
    pub fn step_on(&mut self, data: &[PreparedSample]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let idx = self.next_batch(data.len());
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &data[i]).collect();
        let losses = train_step(self, &batch)?;
        Ok(LogRecord {
            step: self.step,
            l_weak: losses.weak,
            l_dual: losses.dual,
            l_proto_f: losses.proto_f,
            l_proto_b: losses.proto_b,
            l_distill: losses.distill,
            total: losses.total,
            lr: self.config.optimizer.lr,
        })
    }
}

pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, momentum: f64) {
    for slot in 0..teacher.len() {
        for (t, s) in teacher.get_mut(slot).iter_mut().zip(student.get(slot)) {
            *t = momentum * *t + (1.0 - momentum) * s;
        }
    }
}

fn check_finite(step: u64, name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, loss: name })
    }
}

fn scaled(grad: &[f64], factor: f64) -> Vec<f64> {
    grad.iter().map(|g| g * factor).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn single_branch_sample(
    state: &TrainerState,
    s: &PreparedSample,
    active: bool,
    bw: f64,
    grads: &mut Grads,
    sums: &mut Sums,
) -> Result<bool> {
    let cfg = &state.config;
    let net = &state.model.network;
    let pass = BranchPass::run(&state.model.forward, net, &s.forward)?;
    let probs = softmax_probs(&pass.logits)?;
    let weak = point_cross_entropy(&probs, &s.labels)?;
    sums.weak[0] += bw * weak.value;
    let mut dlogits = scaled(&weak.grad, cfg.weights.weak * bw);
    let pseudo_active = active && cfg.mode != Mode::Baseline;
    if pseudo_active {
        let targets = match (&state.teacher, cfg.mode) {
            (Some(teacher), Mode::Ema) => {
                let t_logits = network::predict(teacher, net, &s.forward)?;
                pseudo_gt(&softmax_probs(&t_logits)?, cfg.threshold)?
            }
            _ => pseudo_gt(&probs, cfg.threshold)?,
        };
        let ce = masked_cross_entropy(&probs, &targets)?;
        sums.dual[0] += bw * ce.value;
        add_into(&mut dlogits, &ce.grad, cfg.weights.dual * bw);
    }
    pass.backward(&state.model.forward, net, Some(&dlogits), None, &mut grads.forward)?;
    Ok(pseudo_active)
}

fn dual_branch_sample(
    state: &mut TrainerState,
    s: &PreparedSample,
    active: bool,
    bw: f64,
    grads: &mut Grads,
    sums: &mut Sums,
) -> Result<()> {
    let cfg = state.config.clone();
    let mode = cfg.mode;
    let net = state.model.network.clone();
    let pass_f = BranchPass::run(&state.model.forward, &net, &s.forward)?;
    let pass_b = BranchPass::run(&state.model.backward, &net, &s.backward)?;
    let probs_f = softmax_probs(&pass_f.logits)?;
    let probs_b = softmax_probs(&pass_b.logits)?;

    let (wf, wb) = weak_loss(&probs_f, &probs_b, &s.labels)?;
    let halves = [
        point_cross_entropy(&probs_f, &s.labels)?.value,
        point_cross_entropy(&probs_b, &s.labels)?.value,
    ];
    sums.weak[0] += bw * 0.5 * halves[0];
    sums.weak[1] += bw * 0.5 * halves[1];
    let mut dl_f = scaled(&wf.grad, cfg.weights.weak * bw);
    let mut dl_b = scaled(&wb.grad, cfg.weights.weak * bw);
    let mut dz_f: Option<Vec<f64>> = None;
    let mut dz_b: Option<Vec<f64>> = None;

    if active {
        let a_f = pseudo_gt(&probs_f, cfg.threshold)?;
        let a_b = pseudo_gt(&probs_b, cfg.threshold)?;
        let (_, df, db) = dual_loss(&probs_f, &a_b, &probs_b, &a_f)?;
        sums.dual[0] += bw * df.value;
        sums.dual[1] += bw * db.value;
        add_into(&mut dl_f, &df.grad, cfg.weights.dual * bw);
        add_into(&mut dl_b, &db.grad, cfg.weights.dual * bw);

        if mode.uses_prototypes() {
            let stride = net.stride;
            let r_f = downsample_reliability(&reliability(&probs_f), stride);
            let r_b = downsample_reliability(&reliability(&probs_b), stride);
            let a_f_s = downsample_labels(&a_f, stride);
            let a_b_s = downsample_labels(&a_b, stride);
            let z_f = pass_f.features();
            let z_b = pass_b.features();
            let intra_f = intra_aggregate(z_f, &r_f, &a_f_s, Branch::Forward, cfg.min_pixels)?;
            let intra_b = intra_aggregate(z_b, &r_b, &a_b_s, Branch::Backward, cfg.min_pixels)?;
            queue_push(&mut state.bank_f, &intra_f)?;
            queue_push(&mut state.bank_b, &intra_b)?;
            let (protos_f, protos_b) = if mode.combines_prototypes() {
                let pair = &state.model.projection;
                (
                    combine_banks(state.bank_f.inter(), state.bank_b.inter(), pair, Branch::Forward)?,
                    combine_banks(state.bank_b.inter(), state.bank_f.inter(), pair, Branch::Backward)?,
                )
            } else {
                (state.bank_f.inter().clone(), state.bank_b.inter().clone())
            };
            state.bank_f.set_combined(protos_f);
            state.bank_b.set_combined(protos_b);
            let contrast = cfg.contrast();
            let lf = proto_contrast_loss(z_f, state.bank_f.combined(), &a_b_s, &contrast)?;
            let lb = proto_contrast_loss(z_b, state.bank_b.combined(), &a_f_s, &contrast)?;
            sums.proto[0] += bw * lf.value;
            sums.proto[1] += bw * lb.value;
            dz_f = Some(scaled(&lf.grad, cfg.weights.proto * bw));
            dz_b = Some(scaled(&lb.grad, cfg.weights.proto * bw));
        }
        if mode.uses_distill() {
            let d = distill_loss(pass_f.features(), pass_b.features(), &state.model.projection)?;
            sums.distill += bw * d.value;
            grads.projection.add_scaled(&d.grad, cfg.weights.distill * bw);
        }
    }
    pass_f.backward(&state.model.forward, &net, Some(&dl_f), dz_f.as_deref(), &mut grads.forward)?;
    pass_b.backward(&state.model.backward, &net, Some(&dl_b), dz_b.as_deref(), &mut grads.backward)?;
    Ok(())
}

/// One optimizer update on the mean loss over `batch`.
///
/// Pseudo-label, prototype and distillation terms stay off until
/// `warmup_steps` updates have been taken. On a non-finite loss the step is
/// rejected before any parameter changes.
pub fn train_step(state: &mut TrainerState, batch: &[&PreparedSample]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = state.config.mode;
    let active = state.step >= state.config.warmup_steps;
    let bw = 1.0 / batch.len() as f64;
    let mut grads = Grads {
        forward: state.model.forward.zeros_like(),
        backward: state.model.backward.zeros_like(),
        projection: state.model.projection.params.zeros_like(),
    };
    let mut sums = Sums::default();
    let mut pseudo_active = false;
    let step = state.step;
    let banks = (state.bank_f.clone(), state.bank_b.clone());
    for s in batch {
        let outcome = if mode.uses_backward() {
            dual_branch_sample(state, s, active, bw, &mut grads, &mut sums)
        } else {
            single_branch_sample(state, s, active, bw, &mut grads, &mut sums).map(|on| pseudo_active |= on)
        };
        if let Err(e) = outcome {
            (state.bank_f, state.bank_b) = banks;
            // every loss reads the logits, so report the first one computed
            return Err(match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step, loss: "l_weak" },
                e => e,
            });
        }
    }

    let dual_active = if mode.uses_backward() { active } else { pseudo_active };
    let breakdown = {
        let weak = sums.weak[0] + sums.weak[1];
        let dual = dual_active.then_some(sums.dual[0] + sums.dual[1]);
        let proto_on = active && mode.uses_prototypes();
        let mut b = LossBreakdown {
            weak,
            dual,
            proto_f: proto_on.then_some(sums.proto[0]),
            proto_b: proto_on.then_some(sums.proto[1]),
            distill: (active && mode.uses_distill()).then_some(sums.distill),
            total: 0.0,
            weak_parts: sums.weak,
            dual_parts: sums.dual,
        };
        b.total = b.weighted_total(&state.config.weights);
        b
    };
    let checked = check_finite(step, "l_weak", breakdown.weak).and_then(|_| {
        [
            ("l_dual", breakdown.dual),
            ("l_proto_f", breakdown.proto_f),
            ("l_proto_b", breakdown.proto_b),
            ("l_distill", breakdown.distill),
        ]
        .into_iter()
        .try_for_each(|(name, v)| check_finite(step, name, v.unwrap_or(0.0)))
    });
    if let Err(e) = checked {
        (state.bank_f, state.bank_b) = banks;
        return Err(e);
    }

    if let Some(clip) = state.config.grad_clip {
        let mut sq = math::sqrt(
            grads.forward.iter_scalars().map(|g| g * g).sum::<f64>()
                + grads.backward.iter_scalars().map(|g| g * g).sum::<f64>()
                + grads.projection.iter_scalars().map(|g| g * g).sum::<f64>(),
        );
        if sq > clip {
            sq = clip / sq;
            grads.forward.scale(sq);
            grads.backward.scale(sq);
            grads.projection.scale(sq);
        }
    }
    let opt = state.config.optimizer;
    state.opt_forward.update(&opt, &mut state.model.forward, &grads.forward)?;
    if mode.uses_backward() {
        state.opt_backward.update(&opt, &mut state.model.backward, &grads.backward)?;
    }
    if breakdown.distill.is_some() && state.config.weights.distill > 0.0 {
        state
            .opt_projection
            .update(&opt, &mut state.model.projection.params, &grads.projection)?;
    }
    if let Some(teacher) = state.teacher.as_mut() {
        ema_update(teacher, &state.model.forward, state.config.ema_momentum);
    }
    state.step += 1;
    Ok(breakdown)
}

/// [`train_step`] restricted to the self-training mode.
pub fn self_supervised_step(state: &mut TrainerState, batch: &[&PreparedSample]) -> Result<LossBreakdown> {
    if state.config.mode != Mode::SelfTraining {
        return Err(Error::invalid("self_supervised_step needs mode `self`"));
    }
    train_step(state, batch)
}

/// [`train_step`] restricted to the EMA-teacher mode.
pub fn ema_teacher_step(state: &mut TrainerState, batch: &[&PreparedSample]) -> Result<LossBreakdown> {
    if state.config.mode != Mode::Ema {
        return Err(Error::invalid("ema_teacher_step needs mode `ema`"));
    }
    train_step(state, batch)
}

/// Callbacks raised by [`fit`].
pub enum FitEvent<'a> {
    Step { state: &'a TrainerState, record: &'a LogRecord },
    Checkpoint { state: &'a TrainerState },
}

/// Training stopped early; `log` holds every completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct FitAbort {
    pub error: Error,
    pub log: Vec<LogRecord>,
}

/// Runs [`train_step`] until `state.step == config.steps`. A checkpoint event
/// fires every `checkpoint_every` steps and once at the end; an observer
/// error aborts the run.
pub fn fit<F>(state: &mut TrainerState, data: &[PreparedSample], mut observer: F) -> core::result::Result<Vec<LogRecord>, FitAbort>
where
    F: FnMut(FitEvent<'_>) -> core::result::Result<(), String>,
{
    let mut log = Vec::new();
    if state.step >= state.config.steps {
        return Ok(log);
    }
    if data.is_empty() {
        return Err(FitAbort {
            error: Error::EmptyDataset,
            log,
        });
    }
    while state.step < state.config.steps {
        let record = match state.step_on(data) {
            Ok(r) => r,
            Err(error) => return Err(FitAbort { error, log }),
        };
        let notify = observer(FitEvent::Step { state, record: &record });
        log.push(record);
        if let Err(msg) = notify {
            return Err(FitAbort {
                error: Error::Observer(msg),
                log,
            });
        }
        let periodic = state.config.checkpoint_every.is_some_and(|k| state.step % k == 0);
        if periodic || state.step == state.config.steps {
            if let Err(msg) = observer(FitEvent::Checkpoint { state }) {
                return Err(FitAbort {
                    error: Error::Observer(msg),
                    log,
                });
            }
        }
    }
    Ok(log)
}

pub fn prepare_dataset(samples: &[SyntheticSample], network: &NetworkConfig, cfg: &TrainConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(s, network, cfg)).collect()
}

/// Features and logits of the forward branch (for inspection).
pub fn forward_features(model: &Model, voxels: &[VoxelGrid]) -> Result<FeatureMap> {
    Ok(network::encode(&model.forward, &model.network, voxels, None)?.features)
}
