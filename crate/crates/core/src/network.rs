//! Recurrent encoder, U-Net style decoder and the cross-branch projection
//! pair, with hand-written reverse-mode gradients.
//!
//! Branch architecture (stride `s`, feature dim `D`, trunk widths `t1, t2`):
//!
//! ```text
//! per recurrent step:  voxels(B) -conv3x3/2-> t1 -conv3x3/(s/2)-> t2 -conv3x3-> D -> ConvGRU(1x1) -> h
//! decoder:             up(h, s/2) ++ skip(t1, last step) -conv3x3-> dec -conv1x1-> C -> up(x2)
//! ```
//!
//! Parameters live in a [`ParamSet`]: an ordered list of named arrays. The
//! same layout doubles as the gradient buffer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::VoxelGrid;
use crate::math::{self, fingerprint_f64};
use crate::nn::{self, ConvGeom};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        for p in &params {
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    context: "ParamSet::new",
                    expected: p.shape.clone(),
                    actual: vec![p.data.len()],
                });
            }
        }
        Ok(Self { params })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, slot: usize) -> &[f64] {
        &self.params[slot].data
    }

    #[inline]
    pub fn get_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.params[slot].data
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (slot, p) in self.params.iter().enumerate() {
            if flat < p.data.len() {
                return (slot, flat);
            }
            flat -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Scalar at a flat index across all arrays, in declaration order.
    pub fn scalar(&self, flat: usize) -> f64 {
        let (slot, i) = self.locate(flat);
        self.params[slot].data[i]
    }

    pub fn set_scalar(&mut self, flat: usize, value: f64) {
        let (slot, i) = self.locate(flat);
        self.params[slot].data[i] = value;
    }

    /// Bit-exact content hash.
    pub fn fingerprint(&self) -> u64 {
        self.params
            .iter()
            .fold(0u64, |acc, p| acc.rotate_left(7) ^ fingerprint_f64(&p.data))
    }

    /// Every array's length matches its shape (deserialized sets skip
    /// the check in [`ParamSet::new`]).
    pub fn check_shapes(&self) -> Result<()> {
        match self.params.iter().find(|p| p.shape.iter().product::<usize>() != p.data.len()) {
            Some(p) => Err(Error::ShapeMismatch {
                context: "ParamSet",
                expected: p.shape.clone(),
                actual: vec![p.data.len()],
            }),
            None => Ok(()),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.params.iter_mut().flat_map(|p| p.data.iter_mut()) {
            *v *= factor;
        }
    }

    /// `self += factor * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += factor * y;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(
            self.params
                .iter()
                .flat_map(|p| p.data.iter())
                .map(|v| v * v)
                .sum(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flat_map(|p| p.data.iter()).all(|v| v.is_finite())
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.data.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub classes: usize,
    pub feature_dim: usize,
    /// Total encoder downsampling; 2 or 4.
    pub stride: usize,
    /// Number of consecutive voxel sub-windows folded through the recurrent cell.
    pub recurrent_steps: usize,
    pub trunk_widths: [usize; 2],
    pub decoder_width: usize,
    pub input_bins: usize,
    pub height: usize,
    pub width: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            feature_dim: 32,
            stride: 4,
            recurrent_steps: 2,
            trunk_widths: [8, 16],
            decoder_width: 8,
            input_bins: 5,
            height: 64,
            width: 64,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 2 | 4) {
            return Err(Error::invalid(format!("stride must be 2 or 4, got {}", self.stride)));
        }
        if self.height == 0 || self.width == 0 || self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be non-empty and divisible by stride {}",
                self.height, self.width, self.stride
            )));
        }
        if self.classes < 2 || self.feature_dim < self.classes {
            return Err(Error::invalid("need at least 2 classes and feature_dim >= classes"));
        }
        if self.recurrent_steps == 0
            || self.input_bins == 0
            || self.decoder_width == 0
            || self.trunk_widths.contains(&0)
        {
            return Err(Error::invalid("network widths and step count must be positive"));
        }
        Ok(())
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    fn half_dims(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    fn conv1(&self) -> ConvGeom {
        ConvGeom {
            cin: self.input_bins,
            cout: self.trunk_widths[0],
            k: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn conv2(&self) -> ConvGeom {
        ConvGeom {
            cin: self.trunk_widths[0],
            cout: self.trunk_widths[1],
            k: 3,
            stride: self.stride / 2,
            pad: 1,
        }
    }

    fn conv3(&self) -> ConvGeom {
        ConvGeom {
            cin: self.trunk_widths[1],
            cout: self.feature_dim,
            k: 3,
            stride: 1,
            pad: 1,
        }
    }

    fn fuse(&self) -> ConvGeom {
        ConvGeom {
            cin: self.feature_dim + self.trunk_widths[0],
            cout: self.decoder_width,
            k: 3,
            stride: 1,
            pad: 1,
        }
    }
}

// Parameter slots of a branch.
const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const CONV3_W: usize = 4;
const CONV3_B: usize = 5;
const UPD_X: usize = 6;
const UPD_H: usize = 7;
const UPD_B: usize = 8;
const RST_X: usize = 9;
const RST_H: usize = 10;
const RST_B: usize = 11;
const CND_X: usize = 12;
const CND_H: usize = 13;
const CND_B: usize = 14;
const FUSE_W: usize = 15;
const FUSE_B: usize = 16;
const HEAD_W: usize = 17;
const HEAD_B: usize = 18;

fn normal_param(rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>, std: f64) -> Param {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Param {
        name: name.into(),
        shape,
        data,
    }
}

fn zero_param(name: &str, shape: Vec<usize>) -> Param {
    let n = shape.iter().product();
    Param {
        name: name.into(),
        shape,
        data: vec![0.0; n],
    }
}

/// Derives an independent sub-seed, so branches never share initial weights.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        ^ 0x94d0_49bb_1331_11eb
}

/// Scaled-normal initialization of one encoder/decoder branch.
pub fn init_branch(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.feature_dim;
    let conv = |rng: &mut ChaCha8Rng, name: &str, g: ConvGeom| {
        let fan_in = (g.cin * g.k * g.k) as f64;
        normal_param(rng, name, vec![g.cout, g.cin, g.k, g.k], math::sqrt(2.0 / fan_in))
    };
    let gru_std = math::sqrt(1.0 / d as f64);
    let params = vec![
        conv(&mut rng, "encoder.conv1.weight", cfg.conv1()),
        zero_param("encoder.conv1.bias", vec![cfg.trunk_widths[0]]),
        conv(&mut rng, "encoder.conv2.weight", cfg.conv2()),
        zero_param("encoder.conv2.bias", vec![cfg.trunk_widths[1]]),
        conv(&mut rng, "encoder.conv3.weight", cfg.conv3()),
        zero_param("encoder.conv3.bias", vec![d]),
        normal_param(&mut rng, "encoder.gru.update.input", vec![d, d], gru_std),
        normal_param(&mut rng, "encoder.gru.update.hidden", vec![d, d], gru_std),
        zero_param("encoder.gru.update.bias", vec![d]),
        normal_param(&mut rng, "encoder.gru.reset.input", vec![d, d], gru_std),
        normal_param(&mut rng, "encoder.gru.reset.hidden", vec![d, d], gru_std),
        zero_param("encoder.gru.reset.bias", vec![d]),
        normal_param(&mut rng, "encoder.gru.candidate.input", vec![d, d], gru_std),
        normal_param(&mut rng, "encoder.gru.candidate.hidden", vec![d, d], gru_std),
        zero_param("encoder.gru.candidate.bias", vec![d]),
        conv(&mut rng, "decoder.fuse.weight", cfg.fuse()),
        zero_param("decoder.fuse.bias", vec![cfg.decoder_width]),
        normal_param(
            &mut rng,
            "decoder.head.weight",
            vec![cfg.classes, cfg.decoder_width],
            math::sqrt(1.0 / cfg.decoder_width as f64),
        ),
        zero_param("decoder.head.bias", vec![cfg.classes]),
    ];
    ParamSet::new(params)
}

fn check_branch(params: &ParamSet, cfg: &NetworkConfig) -> Result<()> {
    let expected = init_layout(cfg);
    if params.len() != expected.len()
        || params.params().iter().zip(&expected).any(|(p, s)| &p.shape != s)
    {
        return Err(Error::invalid("parameter set does not match the network configuration"));
    }
    Ok(())
}

fn init_layout(cfg: &NetworkConfig) -> Vec<Vec<usize>> {
    let d = cfg.feature_dim;
    let g = |g: ConvGeom| vec![g.cout, g.cin, g.k, g.k];
    vec![
        g(cfg.conv1()),
        vec![cfg.trunk_widths[0]],
        g(cfg.conv2()),
        vec![cfg.trunk_widths[1]],
        g(cfg.conv3()),
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d, d],
        vec![d],
        g(cfg.fuse()),
        vec![cfg.decoder_width],
        vec![cfg.classes, cfg.decoder_width],
        vec![cfg.classes],
    ]
}

/// `D x H' x W'` features, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Copies the channel vector at pixel index `i` into `out`.
    pub fn vector_at(&self, i: usize, out: &mut [f64]) {
        let n = self.pixels();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * n + i];
        }
    }
}

/// `C x H x W` unnormalized class scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl LogitMap {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax; ties go to the lower class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Encoder output: final recurrent state and the trunk skip features of the
/// last step (consumed by the decoder).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub features: FeatureMap,
    pub skip: Vec<f64>,
}

struct StepTape {
    cols1: Vec<f64>,
    a1: Vec<f64>,
    cols2: Vec<f64>,
    a2: Vec<f64>,
    cols3: Vec<f64>,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

struct DecoderTape {
    cols: Vec<f64>,
    d: Vec<f64>,
}

fn check_voxels(cfg: &NetworkConfig, voxels: &[VoxelGrid]) -> Result<()> {
    if voxels.is_empty() {
        return Err(Error::invalid("voxel sequence is empty"));
    }
    let expected = [cfg.input_bins, cfg.height, cfg.width];
    if let Some(v) = voxels.iter().find(|v| v.shape() != expected || v.data.len() != expected.iter().product::<usize>()) {
        return Err(Error::ShapeMismatch {
            context: "encode",
            expected: expected.to_vec(),
            actual: v.shape().to_vec(),
        });
    }
    Ok(())
}

fn gru_gate(
    params: &ParamSet,
    wx: usize,
    wh: usize,
    b: usize,
    x: &[f64],
    h: &[f64],
    d: usize,
    n: usize,
) -> Vec<f64> {
    let mut pre = vec![0.0; d * n];
    for (row, &bias) in pre.chunks_exact_mut(n).zip(params.get(b)) {
        row.fill(bias);
    }
    nn::gemm(d, d, n, params.get(wx), false, x, false, &mut pre, true);
    nn::gemm(d, d, n, params.get(wh), false, h, false, &mut pre, true);
    pre
}

fn encode_taped(
    params: &ParamSet,
    cfg: &NetworkConfig,
    voxels: &[VoxelGrid],
    initial: Option<&FeatureMap>,
) -> Result<(Encoded, Vec<StepTape>)> {
    cfg.validate()?;
    check_branch(params, cfg)?;
    check_voxels(cfg, voxels)?;
    let d = cfg.feature_dim;
    let (fh, fw) = cfg.feature_dims();
    let (hh, hw) = cfg.half_dims();
    let n = fh * fw;
    let mut h = match initial {
        Some(state) => {
            if state.shape() != [d, fh, fw] {
                return Err(Error::ShapeMismatch {
                    context: "encode initial state",
                    expected: vec![d, fh, fw],
                    actual: state.shape().to_vec(),
                });
            }
            state.data.clone()
        }
        None => vec![0.0; d * n],
    };
    let mut tapes = Vec::with_capacity(voxels.len());
    for v in voxels {
        let (mut a1, cols1) = nn::conv_forward(
            &v.data,
            cfg.height,
            cfg.width,
            &cfg.conv1(),
            params.get(CONV1_W),
            params.get(CONV1_B),
        );
        nn::relu_in_place(&mut a1);
        let (mut a2, cols2) = nn::conv_forward(&a1, hh, hw, &cfg.conv2(), params.get(CONV2_W), params.get(CONV2_B));
        nn::relu_in_place(&mut a2);
        let (mut x, cols3) = nn::conv_forward(&a2, fh, fw, &cfg.conv3(), params.get(CONV3_W), params.get(CONV3_B));
        nn::relu_in_place(&mut x);

        let mut z = gru_gate(params, UPD_X, UPD_H, UPD_B, &x, &h, d, n);
        z.iter_mut().for_each(|v| *v = math::sigmoid(*v));
        let mut r = gru_gate(params, RST_X, RST_H, RST_B, &x, &h, d, n);
        r.iter_mut().for_each(|v| *v = math::sigmoid(*v));
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let mut cand = gru_gate(params, CND_X, CND_H, CND_B, &x, &rh, d, n);
        cand.iter_mut().for_each(|v| *v = math::tanh(*v));
        let h_next: Vec<f64> = (0..d * n).map(|i| (1.0 - z[i]) * cand[i] + z[i] * h[i]).collect();

        tapes.push(StepTape {
            cols1,
            a1,
            cols2,
            a2,
            cols3,
            x,
            h_prev: core::mem::replace(&mut h, h_next),
            z,
            r,
            n: cand,
            rh,
        });
    }
    let skip = tapes.last().map(|t| t.a1.clone()).unwrap_or_default();
    Ok((
        Encoded {
            features: FeatureMap {
                channels: d,
                height: fh,
                width: fw,
                data: h,
            },
            skip,
        },
        tapes,
    ))
}

fn decode_taped(params: &ParamSet, cfg: &NetworkConfig, enc: &Encoded) -> Result<(LogitMap, DecoderTape)> {
    cfg.validate()?;
    check_branch(params, cfg)?;
    let (fh, fw) = cfg.feature_dims();
    let (hh, hw) = cfg.half_dims();
    let d = cfg.feature_dim;
    if enc.features.shape() != [d, fh, fw] || enc.skip.len() != cfg.trunk_widths[0] * hh * hw {
        return Err(Error::ShapeMismatch {
            context: "decode",
            expected: vec![d, fh, fw],
            actual: enc.features.shape().to_vec(),
        });
    }
    let mut cat = nn::upsample(&enc.features.data, d, fh, fw, cfg.stride / 2);
    cat.extend_from_slice(&enc.skip);
    let (mut dmap, cols) = nn::conv_forward(&cat, hh, hw, &cfg.fuse(), params.get(FUSE_W), params.get(FUSE_B));
    nn::relu_in_place(&mut dmap);
    let n2 = hh * hw;
    let c = cfg.classes;
    let mut half = vec![0.0; c * n2];
    for (row, &b) in half.chunks_exact_mut(n2).zip(params.get(HEAD_B)) {
        row.fill(b);
    }
    nn::gemm(c, cfg.decoder_width, n2, params.get(HEAD_W), false, &dmap, false, &mut half, true);
    // a 1x1 head commutes with nearest upsampling, so it runs at half resolution
    let data = nn::upsample(&half, c, hh, hw, 2);
    Ok((
        LogitMap {
            classes: c,
            height: cfg.height,
            width: cfg.width,
            data,
        },
        DecoderTape { cols, d: dmap },
    ))
}

/// Folds the voxel sequence through the recurrent trunk. `initial` seeds the
/// hidden state (zeros when `None`).
pub fn encode(
    params: &ParamSet,
    cfg: &NetworkConfig,
    voxels: &[VoxelGrid],
    initial: Option<&FeatureMap>,
) -> Result<Encoded> {
    encode_taped(params, cfg, voxels, initial).map(|(e, _)| e)
}

pub fn decode(params: &ParamSet, cfg: &NetworkConfig, encoded: &Encoded) -> Result<LogitMap> {
    decode_taped(params, cfg, encoded).map(|(l, _)| l)
}

/// Inference-only forward pass.
pub fn predict(params: &ParamSet, cfg: &NetworkConfig, voxels: &[VoxelGrid]) -> Result<LogitMap> {
    let enc = encode(params, cfg, voxels, None)?;
    decode(params, cfg, &enc)
}

/// Forward pass that records what the backward pass needs.
pub struct BranchPass {
    pub encoded: Encoded,
    pub logits: LogitMap,
    steps: Vec<StepTape>,
    decoder: DecoderTape,
}

impl BranchPass {
    pub fn run(params: &ParamSet, cfg: &NetworkConfig, voxels: &[VoxelGrid]) -> Result<Self> {
        let (encoded, steps) = encode_taped(params, cfg, voxels, None)?;
        let (logits, decoder) = decode_taped(params, cfg, &encoded)?;
        Ok(Self {
            encoded,
            logits,
            steps,
            decoder,
        })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.encoded.features
    }

    /// Accumulates into `grads` the gradient of a scalar whose partials are
    /// `dlogits` (w.r.t. the logits) and `dfeatures` (w.r.t. the encoder output).
    pub fn backward(
        &self,
        params: &ParamSet,
        cfg: &NetworkConfig,
        dlogits: Option<&[f64]>,
        dfeatures: Option<&[f64]>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        check_branch(grads, cfg)?;
        let d = cfg.feature_dim;
        let (fh, fw) = cfg.feature_dims();
        let (hh, hw) = cfg.half_dims();
        let n = fh * fw;
        let n2 = hh * hw;
        let c = cfg.classes;
        let t1 = cfg.trunk_widths[0];

        let mut dh = vec![0.0; d * n];
        let mut dskip = vec![0.0; t1 * n2];
        if let Some(dl) = dlogits {
            if dl.len() != self.logits.data.len() {
                return Err(Error::ShapeMismatch {
                    context: "backward logits",
                    expected: vec![self.logits.data.len()],
                    actual: vec![dl.len()],
                });
            }
            let dhalf = nn::upsample_backward(dl, c, hh, hw, 2);
            let (hw_grad, rest) = split_two(grads, HEAD_W, HEAD_B);
            nn::gemm(c, n2, cfg.decoder_width, &dhalf, false, &self.decoder.d, true, hw_grad, true);
            for (b, row) in rest.iter_mut().zip(dhalf.chunks_exact(n2)) {
                *b += row.iter().sum::<f64>();
            }
            let mut dd = vec![0.0; cfg.decoder_width * n2];
            nn::gemm(cfg.decoder_width, c, n2, params.get(HEAD_W), true, &dhalf, false, &mut dd, false);
            nn::relu_mask(&mut dd, &self.decoder.d);
            let (fw_grad, fb_grad) = split_two(grads, FUSE_W, FUSE_B);
            let dcat = nn::conv_backward(
                &dd,
                &self.decoder.cols,
                hh,
                hw,
                &cfg.fuse(),
                params.get(FUSE_W),
                fw_grad,
                fb_grad,
                true,
            )
            .unwrap_or_default();
            let du = &dcat[..d * n2];
            dskip.copy_from_slice(&dcat[d * n2..]);
            dh = nn::upsample_backward(du, d, fh, fw, cfg.stride / 2);
        }
        if let Some(df) = dfeatures {
            if df.len() != d * n {
                return Err(Error::ShapeMismatch {
                    context: "backward features",
                    expected: vec![d * n],
                    actual: vec![df.len()],
                });
            }
            for (a, b) in dh.iter_mut().zip(df) {
                *a += b;
            }
        }

        let last = self.steps.len() - 1;
        for (t, step) in self.steps.iter().enumerate().rev() {
            let mut dh_prev: Vec<f64> = dh.iter().zip(&step.z).map(|(g, z)| g * z).collect();
            let dz_pre: Vec<f64> = (0..d * n)
                .map(|i| dh[i] * (step.h_prev[i] - step.n[i]) * step.z[i] * (1.0 - step.z[i]))
                .collect();
            let dn_pre: Vec<f64> = (0..d * n)
                .map(|i| dh[i] * (1.0 - step.z[i]) * (1.0 - step.n[i] * step.n[i]))
                .collect();

            let mut dx = vec![0.0; d * n];
            // candidate
            nn::gemm(d, n, d, &dn_pre, false, &step.x, true, grads.get_mut(CND_X), true);
            nn::gemm(d, n, d, &dn_pre, false, &step.rh, true, grads.get_mut(CND_H), true);
            add_row_sums(grads.get_mut(CND_B), &dn_pre, n);
            nn::gemm(d, d, n, params.get(CND_X), true, &dn_pre, false, &mut dx, true);
            let mut drh = vec![0.0; d * n];
            nn::gemm(d, d, n, params.get(CND_H), true, &dn_pre, false, &mut drh, false);
            let dr_pre: Vec<f64> = (0..d * n)
                .map(|i| drh[i] * step.h_prev[i] * step.r[i] * (1.0 - step.r[i]))
                .collect();
            for i in 0..d * n {
                dh_prev[i] += drh[i] * step.r[i];
            }
            // update and reset gates
            for (pre, wx, wh, b) in [(&dz_pre, UPD_X, UPD_H, UPD_B), (&dr_pre, RST_X, RST_H, RST_B)] {
                nn::gemm(d, n, d, pre, false, &step.x, true, grads.get_mut(wx), true);
                nn::gemm(d, n, d, pre, false, &step.h_prev, true, grads.get_mut(wh), true);
                add_row_sums(grads.get_mut(b), pre, n);
                nn::gemm(d, d, n, params.get(wx), true, pre, false, &mut dx, true);
                nn::gemm(d, d, n, params.get(wh), true, pre, false, &mut dh_prev, true);
            }

            nn::relu_mask(&mut dx, &step.x);
            let (w3, b3) = split_two(grads, CONV3_W, CONV3_B);
            let mut da2 = nn::conv_backward(&dx, &step.cols3, fh, fw, &cfg.conv3(), params.get(CONV3_W), w3, b3, true)
                .unwrap_or_default();
            nn::relu_mask(&mut da2, &step.a2);
            let (w2, b2) = split_two(grads, CONV2_W, CONV2_B);
            let mut da1 = nn::conv_backward(&da2, &step.cols2, hh, hw, &cfg.conv2(), params.get(CONV2_W), w2, b2, true)
                .unwrap_or_default();
            if t == last {
                for (a, b) in da1.iter_mut().zip(&dskip) {
                    *a += b;
                }
            }
            nn::relu_mask(&mut da1, &step.a1);
            let (w1, b1) = split_two(grads, CONV1_W, CONV1_B);
            nn::conv_backward(
                &da1,
                &step.cols1,
                cfg.height,
                cfg.width,
                &cfg.conv1(),
                params.get(CONV1_W),
                w1,
                b1,
                false,
            );
            dh = dh_prev;
        }
        Ok(())
    }
}

fn add_row_sums(dst: &mut [f64], m: &[f64], n: usize) {
    for (d, row) in dst.iter_mut().zip(m.chunks_exact(n)) {
        *d += row.iter().sum::<f64>();
    }
}

/// Mutable access to two distinct slots (`a < b`).
fn split_two(set: &mut ParamSet, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = set.params.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "f2b")]
    ForwardToBackward,
    #[serde(rename = "b2f")]
    BackwardToForward,
}

impl Direction {
    fn slots(self) -> (usize, usize) {
        match self {
            Direction::ForwardToBackward => (0, 1),
            Direction::BackwardToForward => (2, 3),
        }
    }
}

/// Two channel-wise affine maps `R^D -> R^D` bridging the branch feature spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub params: ParamSet,
}

impl ProjectionPair {
    pub fn identity(dim: usize) -> Self {
        Self::init(dim, 0, 0.0)
    }

    /// Identity plus `N(0, noise^2)` perturbation of the weights; zero bias.
    pub fn init(dim: usize, seed: u64, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = |rng: &mut ChaCha8Rng, name: &str| {
            let mut p = normal_param(rng, name, vec![dim, dim], noise);
            for i in 0..dim {
                p.data[i * dim + i] += 1.0;
            }
            p
        };
        let params = vec![
            weight(&mut rng, "projection.f2b.weight"),
            zero_param("projection.f2b.bias", vec![dim]),
            weight(&mut rng, "projection.b2f.weight"),
            zero_param("projection.b2f.bias", vec![dim]),
        ];
        Self {
            params: ParamSet { params },
        }
    }

    pub fn dim(&self) -> usize {
        self.params.get(1).len()
    }

    pub fn weight(&self, direction: Direction) -> &[f64] {
        self.params.get(direction.slots().0)
    }

    pub fn bias(&self, direction: Direction) -> &[f64] {
        self.params.get(direction.slots().1)
    }

    /// Applies the selected map to a `dim x n` channel-major block.
    pub fn apply(&self, v: &[f64], n: usize, direction: Direction) -> Result<Vec<f64>> {
        let dim = self.dim();
        if v.len() != dim * n {
            return Err(Error::ShapeMismatch {
                context: "project",
                expected: vec![dim, n],
                actual: vec![v.len()],
            });
        }
        let mut out = vec![0.0; dim * n];
        for (row, &b) in out.chunks_exact_mut(n.max(1)).zip(self.bias(direction)) {
            row.fill(b);
        }
        nn::gemm(dim, dim, n, self.weight(direction), false, v, false, &mut out, true);
        Ok(out)
    }

    pub fn project_vector(&self, v: &[f64], direction: Direction) -> Result<Vec<f64>> {
        self.apply(v, 1, direction)
    }

    pub fn project_map(&self, z: &FeatureMap, direction: Direction) -> Result<FeatureMap> {
        if z.channels != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "project",
                expected: vec![self.dim()],
                actual: vec![z.channels],
            });
        }
        Ok(FeatureMap {
            data: self.apply(&z.data, z.pixels(), direction)?,
            ..z.clone()
        })
    }

    /// Exchanges the two directions (used to mirror branches).
    pub fn swapped(&self) -> Self {
        let p = self.params.params();
        let rename = |src: &Param, name: &str| Param {
            name: name.into(),
            shape: src.shape.clone(),
            data: src.data.clone(),
        };
        Self {
            params: ParamSet {
                params: vec![
                    rename(&p[2], "projection.f2b.weight"),
                    rename(&p[3], "projection.f2b.bias"),
                    rename(&p[0], "projection.b2f.weight"),
                    rename(&p[1], "projection.b2f.bias"),
                ],
            },
        }
    }
}

/// Projects onto `v / |v|` direction only by the selected map: convenience for
/// prototype delivery.
pub fn project(pair: &ProjectionPair, v: &[f64], direction: Direction) -> Result<Vec<f64>> {
    pair.project_vector(v, direction)
}
