//! Class prototypes: per-sample aggregation, FIFO memory banks, cross-branch
//! combination, the prototype contrastive loss and feature distillation.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::{Direction, FeatureMap, ParamSet, ProjectionPair};
use crate::supervision::{PseudoLabelMap, ReliabilityMap};
use crate::synth::IGNORE_LABEL;

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: u8,
    pub branch: Branch,
    pub vector: Vec<f64>,
}

pub type PrototypeMap = BTreeMap<u8, ClassPrototype>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub queue_capacity: usize,
    /// Minimum number of pseudo-labeled pixels before a class gets a
    /// per-sample prototype.
    pub min_pixels: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            queue_capacity: 32,
            min_pixels: 1,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || self.queue_capacity == 0 {
            return Err(Error::invalid("temperature must be positive and queue capacity at least 1"));
        }
        Ok(())
    }
}

/// `v / |v|`, or `None` when `|v|` is numerically zero.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = math::norm(v);
    if n < NORM_EPS || !n.is_finite() {
        None
    } else {
        Some(v.iter().map(|x| x / n).collect())
    }
}

/// Reliability-weighted sum of unit features per pseudo class, normalized.
/// Pixels with zero-norm features carry no direction and are skipped.
pub fn intra_aggregate(
    z: &FeatureMap,
    r: &ReliabilityMap,
    a: &PseudoLabelMap,
    branch: Branch,
    min_pixels: usize,
) -> Result<PrototypeMap> {
    let n = z.pixels();
    if r.data.len() != n || a.data.len() != n {
        return Err(Error::ShapeMismatch {
            context: "intra_aggregate",
            expected: vec![z.height, z.width],
            actual: vec![a.height, a.width],
        });
    }
    let d = z.channels;
    let mut sums: BTreeMap<u8, (Vec<f64>, usize)> = BTreeMap::new();
    let mut v = vec![0.0; d];
    for i in 0..n {
        let class = a.data[i];
        if class == IGNORE_LABEL {
            continue;
        }
        let entry = sums.entry(class).or_insert_with(|| (vec![0.0; d], 0));
        entry.1 += 1;
        z.vector_at(i, &mut v);
        let norm = math::norm(&v);
        if norm < NORM_EPS {
            continue;
        }
        let w = r.data[i] / norm;
        for (s, x) in entry.0.iter_mut().zip(&v) {
            *s += w * x;
        }
    }
    Ok(sums
        .into_iter()
        .filter(|(_, (_, count))| *count >= min_pixels.max(1))
        .filter_map(|(class_id, (sum, _))| {
            normalized(&sum).map(|vector| {
                (
                    class_id,
                    ClassPrototype {
                        class_id,
                        branch,
                        vector,
                    },
                )
            })
        })
        .collect())
}

/// Per-class FIFO queues of unit prototypes for one branch, plus the derived
/// averaged and combined prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub branch: Branch,
    pub dim: usize,
    pub capacity: usize,
    queues: BTreeMap<u8, VecDeque<Vec<f64>>>,
    inter: PrototypeMap,
    combined: PrototypeMap,
}

impl PrototypeBank {
    pub fn new(branch: Branch, dim: usize, capacity: usize) -> Self {
        Self {
            branch,
            dim,
            capacity: capacity.max(1),
            queues: BTreeMap::new(),
            inter: PrototypeMap::new(),
            combined: PrototypeMap::new(),
        }
    }

    pub fn queue(&self, class: u8) -> Option<&VecDeque<Vec<f64>>> {
        self.queues.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u8> + '_ {
        self.queues.keys().copied()
    }

    /// Queue averages, refreshed on every push.
    pub fn inter(&self) -> &PrototypeMap {
        &self.inter
    }

    /// Prototypes after cross-branch combination (empty until set).
    pub fn combined(&self) -> &PrototypeMap {
        &self.combined
    }

    pub fn set_combined(&mut self, combined: PrototypeMap) {
        self.combined = combined;
    }

    /// Every vector the bank exposes.
    pub fn all_vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.queues
            .values()
            .flat_map(|q| q.iter().map(Vec::as_slice))
            .chain(self.inter.values().map(|p| p.vector.as_slice()))
            .chain(self.combined.values().map(|p| p.vector.as_slice()))
    }
}

pub fn queue_push(bank: &mut PrototypeBank, protos: &PrototypeMap) -> Result<()> {
    if let Some(p) = protos.values().find(|p| p.vector.len() != bank.dim) {
        return Err(Error::ShapeMismatch {
            context: "queue_push",
            expected: vec![bank.dim],
            actual: vec![p.vector.len()],
        });
    }
    for (&class, p) in protos {
        let q = bank.queues.entry(class).or_default();
        q.push_back(p.vector.clone());
        while q.len() > bank.capacity {
            q.pop_front();
        }
    }
    for &class in protos.keys() {
        let p = inter_aggregate(bank, class)?;
        bank.inter.insert(class, p);
    }
    Ok(())
}

/// Mean of the queued vectors, normalized; the most recent entry when the
/// mean vanishes.
pub fn inter_aggregate(bank: &PrototypeBank, class: u8) -> Result<ClassPrototype> {
    let q = bank
        .queues
        .get(&class)
        .filter(|q| !q.is_empty())
        .ok_or(Error::AbsentClass(class))?;
    let mut mean = vec![0.0; bank.dim];
    for v in q {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let inv = 1.0 / q.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let vector = normalized(&mean).unwrap_or_else(|| q.back().cloned().unwrap_or_default());
    Ok(ClassPrototype {
        class_id: class,
        branch: bank.branch,
        vector,
    })
}

/// `normalize(own + delivered)`; `own` when the sum vanishes.
pub fn dual_combine(own: &ClassPrototype, delivered: &ClassPrototype) -> Result<ClassPrototype> {
    if own.class_id != delivered.class_id {
        return Err(Error::invalid("cannot combine prototypes of different classes"));
    }
    if own.vector.len() != delivered.vector.len() {
        return Err(Error::ShapeMismatch {
            context: "dual_combine",
            expected: vec![own.vector.len()],
            actual: vec![delivered.vector.len()],
        });
    }
    let sum: Vec<f64> = own.vector.iter().zip(&delivered.vector).map(|(a, b)| a + b).collect();
    Ok(ClassPrototype {
        vector: normalized(&sum).unwrap_or_else(|| own.vector.clone()),
        ..own.clone()
    })
}

/// Maps the opposite branch's prototype into this branch's space and
/// normalizes it. `None` if the projection collapses it to zero.
pub fn deliver(pair: &ProjectionPair, opposite: &ClassPrototype, into: Branch) -> Result<Option<ClassPrototype>> {
    let direction = match into {
        Branch::Forward => Direction::BackwardToForward,
        Branch::Backward => Direction::ForwardToBackward,
    };
    let projected = pair.project_vector(&opposite.vector, direction)?;
    Ok(normalized(&projected).map(|vector| ClassPrototype {
        class_id: opposite.class_id,
        branch: into,
        vector,
    }))
}

/// Combines each of `own` with the delivered counterpart from `opposite`;
/// classes the opposite bank lacks keep their own prototype.
pub fn combine_banks(
    own: &PrototypeMap,
    opposite: &PrototypeMap,
    pair: &ProjectionPair,
    into: Branch,
) -> Result<PrototypeMap> {
    let mut out = PrototypeMap::new();
    for (&class, p) in own {
        let combined = match opposite.get(&class) {
            Some(o) => match deliver(pair, o, into)? {
                Some(d) => dual_combine(p, &d)?,
                None => p.clone(),
            },
            None => p.clone(),
        };
        out.insert(class, combined);
    }
    Ok(out)
}

/// InfoNCE value with its gradient w.r.t. the raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub contributing: usize,
    pub degenerate: bool,
}

/// Mean over pixels with a target present in `protos` of
/// `-log softmax_k(ẑ·pt_k / temperature)[target]`. Prototypes are constants.
pub fn proto_contrast_loss(
    z: &FeatureMap,
    protos: &PrototypeMap,
    targets: &PseudoLabelMap,
    config: &ContrastConfig,
) -> Result<ContrastLoss> {
    config.validate()?;
    let n = z.pixels();
    let d = z.channels;
    if targets.data.len() != n {
        return Err(Error::ShapeMismatch {
            context: "proto_contrast_loss",
            expected: vec![z.height, z.width],
            actual: vec![targets.height, targets.width],
        });
    }
    if let Some(p) = protos.values().find(|p| p.vector.len() != d) {
        return Err(Error::ShapeMismatch {
            context: "proto_contrast_loss",
            expected: vec![d],
            actual: vec![p.vector.len()],
        });
    }
    let mut grad = vec![0.0; z.data.len()];
    let classes: Vec<u8> = protos.keys().copied().collect();
    let vectors: Vec<&[f64]> = protos.values().map(|p| p.vector.as_slice()).collect();
    let inv_t = 1.0 / config.temperature;

    let contributing: Vec<(usize, usize)> = targets
        .data
        .iter()
        .enumerate()
        .filter_map(|(i, t)| classes.iter().position(|c| c == t).map(|k| (i, k)))
        .collect();
    if contributing.is_empty() {
        return Ok(ContrastLoss {
            value: 0.0,
            grad,
            contributing: 0,
            degenerate: true,
        });
    }
    let scale = 1.0 / contributing.len() as f64;
    let mut v = vec![0.0; d];
    let mut logits = vec![0.0; vectors.len()];
    let mut g = vec![0.0; d];
    let mut value = 0.0;
    for &(i, target) in &contributing {
        z.vector_at(i, &mut v);
        let norm = math::norm(&v);
        let unit: Vec<f64> = if norm < NORM_EPS {
            vec![0.0; d]
        } else {
            v.iter().map(|x| x / norm).collect()
        };
        for (l, p) in logits.iter_mut().zip(&vectors) {
            *l = math::dot(&unit, p) * inv_t;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| math::exp(l - max)).sum();
        value += max + math::ln(sum) - logits[target];
        if norm < NORM_EPS {
            continue;
        }
        // d/d unit = (E_q[pt] - pt_target) / temperature
        g.fill(0.0);
        for (l, p) in logits.iter().zip(&vectors) {
            let q = math::exp(l - max) / sum;
            for (gj, pj) in g.iter_mut().zip(p.iter()) {
                *gj += q * pj;
            }
        }
        for (gj, pj) in g.iter_mut().zip(vectors[target]) {
            *gj = (*gj - pj) * inv_t;
        }
        // through the normalization: (I - û ûᵀ) g / |v|
        let along = math::dot(&unit, &g);
        for c in 0..d {
            grad[c * n + i] = scale * (g[c] - along * unit[c]) / norm;
        }
    }
    Ok(ContrastLoss {
        value: value * scale,
        grad,
        contributing: contributing.len(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    /// Gradient w.r.t. the projection parameters; features get none.
    pub grad: ParamSet,
}

/// `½ mean|G_b2f(z_b) − z_f| + ½ mean|G_f2b(z_f) − z_b|`.
pub fn distill_loss(z_f: &FeatureMap, z_b: &FeatureMap, pair: &ProjectionPair) -> Result<DistillLoss> {
    if z_f.shape() != z_b.shape() {
        return Err(Error::ShapeMismatch {
            context: "distill_loss",
            expected: z_f.shape().to_vec(),
            actual: z_b.shape().to_vec(),
        });
    }
    let d = pair.dim();
    if z_f.channels != d {
        return Err(Error::ShapeMismatch {
            context: "distill_loss",
            expected: vec![d],
            actual: vec![z_f.channels],
        });
    }
    let n = z_f.pixels();
    let scale = 0.5 / (d * n) as f64;
    let mut grad = pair.params.zeros_like();
    let mut value = 0.0;
    for (src, dst, direction, (ws, bs)) in [
        (z_b, z_f, Direction::BackwardToForward, (2, 3)),
        (z_f, z_b, Direction::ForwardToBackward, (0, 1)),
    ] {
        let projected = pair.apply(&src.data, n, direction)?;
        let mut sign = vec![0.0; d * n];
        for ((s, p), t) in sign.iter_mut().zip(&projected).zip(&dst.data) {
            let e = p - t;
            value += scale * e.abs();
            *s = if e > 0.0 {
                scale
            } else if e < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        crate::nn::gemm(d, n, d, &sign, false, &src.data, true, grad.get_mut(ws), true);
        for (b, row) in grad.get_mut(bs).iter_mut().zip(sign.chunks_exact(n)) {
            *b += row.iter().sum::<f64>();
        }
    }
    Ok(DistillLoss { value, grad })
}
