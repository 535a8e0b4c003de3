//! Confusion matrices, mIoU and the ablation harness.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::NetworkConfig;
use crate::synth::{corrupt_drop, corrupt_swap, smallest_area_classes, DenseLabelMap, SyntheticSample, IGNORE_LABEL};
use crate::trainer::{fit, forward_voxels, prepare_dataset, LogRecord, LossWeights, Mode, Model, TrainConfig, TrainerState};

/// `classes x classes` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    #[inline]
    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Tallies `(gt, pred)` over pixels where neither is 255.
    pub fn accumulate(&mut self, pred: &[u8], gt: &DenseLabelMap) -> Result<()> {
        if pred.len() != gt.data.len() {
            return Err(Error::ShapeMismatch {
                context: "confusion",
                expected: vec![gt.height, gt.width],
                actual: vec![pred.len()],
            });
        }
        for (&p, &g) in pred.iter().zip(&gt.data) {
            if p == IGNORE_LABEL || g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (usize::from(p), usize::from(g));
            if p >= self.classes || g >= self.classes {
                return Err(Error::invalid(format!("label {} outside {} classes", p.max(g), self.classes)));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }
}

pub fn confusion(pred: &[u8], gt: &DenseLabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub config_hash: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Ground-truth pixel count per class.
    pub pixel_counts: Vec<u64>,
    pub meta: RunMeta,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let mut pixel_counts = Vec::with_capacity(c);
    for k in 0..c {
        let row: u64 = (0..c).map(|j| cm.at(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.at(i, k)).sum();
        let tp = cm.at(k, k);
        let denom = row + col - tp;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
        pixel_counts.push(row);
    }
    let supported: Vec<f64> = per_class.iter().flatten().copied().collect();
    if supported.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    Ok(MetricsReport {
        miou: supported.iter().sum::<f64>() / supported.len() as f64,
        per_class_iou: per_class,
        pixel_counts,
        meta: RunMeta::default(),
    })
}

/// Forward-branch argmax at each sample's target time.
pub fn predict_sample(model: &Model, sample: &SyntheticSample, window_us: u64) -> Result<Vec<u8>> {
    let voxels = forward_voxels(&sample.events, sample.target_time, window_us, &model.network)?;
    Ok(model.predict(&voxels)?.argmax())
}

/// Dataset-level confusion over `samples`, then mIoU.
pub fn evaluate(model: &Model, samples: &[SyntheticSample], window_us: u64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::new(model.network.classes);
    for s in samples {
        cm.accumulate(&predict_sample(model, s, window_us)?, &s.gt)?;
    }
    miou(&cm)
}

/// Network and training settings of the synthetic benchmark protocol:
/// 2000 steps, pseudo-label and prototype terms switched on after 500.
pub fn benchmark_protocol() -> (NetworkConfig, TrainConfig) {
    let train = TrainConfig {
        warmup_steps: 500,
        weights: LossWeights {
            proto: 0.1,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    };
    (NetworkConfig::default(), train)
}

/// Overrides applied on top of the base configuration for one grid row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCell {
    pub label: String,
    pub mode: Option<Mode>,
    pub threshold: Option<f64>,
    pub steps: Option<u64>,
    /// Probability of one class swap per training sample.
    pub swap_p: Option<f64>,
    /// Drop rate applied to points of the confusing classes.
    pub drop_rate: Option<f64>,
    pub weights: Option<LossWeights>,
    pub warmup_steps: Option<u64>,
}

impl GridCell {
    pub fn mode(label: &str, mode: Mode) -> Self {
        Self {
            label: label.into(),
            mode: Some(mode),
            ..Self::default()
        }
    }

    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(w) = self.weights {
            cfg.weights = w;
        }
        if let Some(w) = self.warmup_steps {
            cfg.warmup_steps = w;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Classes hit by `drop_rate`; the two smallest-area object classes of
    /// the training split when `None`.
    pub confusing_classes: Option<BTreeSet<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub runs: Vec<SeedRun>,
    /// Median over the seeds that finished; `None` if none did.
    pub median_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split_hash: u64,
    pub rows: Vec<CellResult>,
}

fn corrupted_train_set(
    train: &[SyntheticSample],
    cell: &GridCell,
    confusing: &BTreeSet<u8>,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if cell.swap_p.is_none() && cell.drop_rate.is_none() {
        return Ok(train.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00_d15e_a5e5);
    train
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let Some(rate) = cell.drop_rate {
                s.labels = corrupt_drop(&s.labels, confusing, rate, &mut rng)?;
            }
            if let Some(p) = cell.swap_p {
                s.labels = corrupt_swap(&s.labels, p, &mut rng)?;
            }
            Ok(s)
        })
        .collect()
}

/// Stable hash of a training configuration, for report metadata.
pub fn config_hash(network: &NetworkConfig, train: &TrainConfig) -> u64 {
    let text = format!("{network:?}|{train:?}");
    math::fingerprint_f64(&text.bytes().map(f64::from).collect::<Vec<_>>())
}

/// Trains one model for a grid cell and seed, then evaluates it.
pub fn run_cell(
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    setup: &AblationSetup,
    cell: &GridCell,
    confusing: &BTreeSet<u8>,
    seed: u64,
) -> Result<(MetricsReport, Vec<LogRecord>)> {
    let mut cfg = cell.apply(&setup.train);
    cfg.seed = seed;
    let network = NetworkConfig {
        init_seed: seed,
        ..setup.network.clone()
    };
    let samples = corrupted_train_set(train, cell, confusing, seed)?;
    let prepared = prepare_dataset(&samples, &network, &cfg)?;
    let mut state = TrainerState::init(network.clone(), cfg.clone())?;
    let log = fit(&mut state, &prepared, |_| Ok(())).map_err(|a| a.error)?;
    let mut report = evaluate(&state.model, eval, cfg.window_us)?;
    report.meta = RunMeta {
        mode: Some(cfg.mode),
        seed: Some(seed),
        config_hash: Some(config_hash(&network, &cfg)),
    };
    Ok((report, log))
}

/// Trains and evaluates every grid cell for every seed. A failing run is
/// recorded in its row and the harness moves on. `progress` sees each
/// finished run.
pub fn run_ablation<F>(
    train: &[SyntheticSample],
    eval: &[SyntheticSample],
    split_hash: u64,
    setup: &AblationSetup,
    grid: &[GridCell],
    mut progress: F,
) -> AblationReport
where
    F: FnMut(&GridCell, &SeedRun),
{
    let confusing = setup
        .confusing_classes
        .clone()
        .unwrap_or_else(|| smallest_area_classes(train.iter().map(|s| &s.gt), 2));
    let rows = grid
        .iter()
        .map(|cell| {
            let runs: Vec<SeedRun> = setup
                .seeds
                .iter()
                .map(|&seed| {
                    let run = match run_cell(train, eval, setup, cell, &confusing, seed) {
                        Ok((report, log)) => SeedRun {
                            seed,
                            report: Some(report),
                            error: None,
                            log,
                        },
                        Err(e) => SeedRun {
                            seed,
                            report: None,
                            error: Some(e.to_string()),
                            log: Vec::new(),
                        },
                    };
                    progress(cell, &run);
                    run
                })
                .collect();
            let finished: Vec<f64> = runs.iter().filter_map(|r| r.report.as_ref().map(|m| m.miou)).collect();
            CellResult {
                cell: cell.clone(),
                median_miou: math::median(&finished),
                runs,
            }
        })
        .collect();
    AblationReport { split_hash, rows }
}
