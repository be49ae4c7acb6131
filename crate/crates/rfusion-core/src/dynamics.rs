//! Stochastic transition models for the latent high-resolution state.
//!
//! Two variants: a random walk whose process noise comes from the historical
//! per-pixel variance rate `q0`, and a location-aware convolutional network
//! that predicts a nonnegative mean increment and a variance correction from
//! the previous state plus auxiliary channels (position, q0, date). The
//! network is trained by full-batch gradient descent on a Gaussian negative
//! log-likelihood with L1 weight decay; reverse-mode gradients are
//! implemented directly on the convolution stack.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{GridDims, GridImage};

/// Floor applied to every predicted process variance (reflectance² per day
/// scale). ReLU can return exact zero and the filter needs PD process noise.
pub const EPSILON_VAR: f64 = 1e-9;

/// Day count used to normalize the date channel to O(1).
const DATE_SCALE: f64 = 365.0;

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Padding behaviour at the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Replicate,
}

/// Dense 2-D convolution, stride 1, square kernel, "same" padding.
///
/// Weights are stored as `[out_ch][in_ch][ky][kx]` row-major; images are
/// channel-planar (`channel * h * w + y * w + x`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, pad_mode: PadMode) -> Self {
        Conv2d {
            in_ch,
            out_ch,
            kernel,
            pad: kernel / 2,
            pad_mode,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    #[inline]
    fn src_coord(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let s = o as isize + k as isize - self.pad as isize;
        match self.pad_mode {
            PadMode::Zeros => {
                if s < 0 || s >= limit as isize {
                    None
                } else {
                    Some(s as usize)
                }
            }
            PadMode::Replicate => Some(s.clamp(0, limit as isize - 1) as usize),
        }
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_ch * h * w);
        let k = self.kernel;
        let hw = h * w;
        let mut out = vec![0.0; self.out_ch * hw];
        for oc in 0..self.out_ch {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = self.bias[oc];
                    for ic in 0..self.in_ch {
                        let wbase = ((oc * self.in_ch + ic) * k) * k;
                        let ibase = ic * hw;
                        for ky in 0..k {
                            let Some(sy) = self.src_coord(oy, ky, h) else { continue };
                            for kx in 0..k {
                                let Some(sx) = self.src_coord(ox, kx, w) else { continue };
                                acc += self.weight[wbase + ky * k + kx] * input[ibase + sy * w + sx];
                            }
                        }
                    }
                    out[oc * hw + oy * w + ox] = acc;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        h: usize,
        w: usize,
        grad: &mut Conv2d,
    ) -> Vec<f64> {
        let k = self.kernel;
        let hw = h * w;
        let mut grad_in = vec![0.0; self.in_ch * hw];
        for oc in 0..self.out_ch {
            for oy in 0..h {
                for ox in 0..w {
                    let g = grad_out[oc * hw + oy * w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    grad.bias[oc] += g;
                    for ic in 0..self.in_ch {
                        let wbase = ((oc * self.in_ch + ic) * k) * k;
                        let ibase = ic * hw;
                        for ky in 0..k {
                            let Some(sy) = self.src_coord(oy, ky, h) else { continue };
                            for kx in 0..k {
                                let Some(sx) = self.src_coord(ox, kx, w) else { continue };
                                let widx = wbase + ky * k + kx;
                                grad.weight[widx] += g * input[ibase + sy * w + sx];
                                grad_in[ibase + sy * w + sx] += g * self.weight[widx];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Per-element affine map `y = a*x + b` (a kernel-1 single-channel conv over
/// the flattened feature map).
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: f64,
    pub bias: f64,
}

/// One network head: conv → ReLU → conv → ReLU → per-element affine.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub affine: Affine,
}

/// Intermediate activations kept for the backward pass.
pub struct StackCache {
    pub pre1: Vec<f64>,
    pub act1: Vec<f64>,
    pub pre2: Vec<f64>,
    pub out: Vec<f64>,
}

impl ConvStack {
    fn zeros(in_ch: usize, mid_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvStack {
            conv1: Conv2d::zeros(in_ch, mid_ch, kernel, PadMode::Zeros),
            conv2: Conv2d::zeros(mid_ch, out_ch, kernel, PadMode::Replicate),
            affine: Affine { weight: 0.0, bias: 0.0 },
        }
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> StackCache {
        let pre1 = self.conv1.forward(input, h, w);
        let act1: Vec<f64> = pre1.iter().map(|&v| relu(v)).collect();
        let pre2 = self.conv2.forward(&act1, h, w);
        let out: Vec<f64> = pre2
            .iter()
            .map(|&v| self.affine.weight * relu(v) + self.affine.bias)
            .collect();
        StackCache { pre1, act1, pre2, out }
    }

    /// Backpropagates `grad_out` through the stack, accumulating parameter
    /// gradients into `grad` (a zero-initialized stack of the same shape).
    pub fn backward(
        &self,
        input: &[f64],
        cache: &StackCache,
        grad_out: &[f64],
        h: usize,
        w: usize,
        grad: &mut ConvStack,
    ) {
        let mut grad_pre2 = vec![0.0; cache.pre2.len()];
        for (i, &g) in grad_out.iter().enumerate() {
            let a2 = relu(cache.pre2[i]);
            grad.affine.weight += g * a2;
            grad.affine.bias += g;
            if cache.pre2[i] > 0.0 {
                grad_pre2[i] = g * self.affine.weight;
            }
        }
        let grad_act1 = self.conv2.backward(&cache.act1, &grad_pre2, h, w, &mut grad.conv2);
        let mut grad_pre1 = grad_act1;
        for (gp, &p) in grad_pre1.iter_mut().zip(cache.pre1.iter()) {
            if p <= 0.0 {
                *gp = 0.0;
            }
        }
        self.conv1.backward(input, &grad_pre1, h, w, &mut grad.conv1);
    }
}

/// Auxiliary per-step inputs `u_k`: historical variance-rate image, the day
/// count of the target acquisition, and the time since the previous one.
#[derive(Debug, Clone)]
pub struct AuxInput {
    /// Per-band per-day variance image, planar band-major, length `bands*h*w`.
    pub q0: Vec<f64>,
    /// Day count of the acquisition being predicted.
    pub date_k: f64,
    /// Days elapsed since the previous state, > 0.
    pub delta_days: f64,
}

impl AuxInput {
    pub fn new(q0: Vec<f64>, date_k: f64, delta_days: f64) -> Result<Self> {
        if !(delta_days > 0.0) {
            return Err(Error::InvalidArgument(String::from("delta_days must be > 0")));
        }
        if q0.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(String::from("q0 entries must be finite and >= 0")));
        }
        Ok(AuxInput { q0, date_k, delta_days })
    }
}

/// Number of input channels for a given band count: state bands, (x, y)
/// position, q0 bands, date.
pub fn input_channels(bands: usize) -> usize {
    2 * bands + 3
}

/// Assembles the network input tensor: channels ordered as
/// `[s(bands), pos_x, pos_y, q0(bands), date]`, positions normalized to
/// `[0,1]` from the top-left corner and the date scaled by 365.
pub fn build_input(s_prev: &[f64], aux: &AuxInput, dims: GridDims) -> Result<Vec<f64>> {
    let (h, w, bands) = (dims.height, dims.width, dims.bands);
    let hw = h * w;
    if s_prev.len() != bands * hw {
        return Err(Error::DimensionMismatch {
            expected: bands * hw,
            got: s_prev.len(),
            what: "dynamics state length",
        });
    }
    if aux.q0.len() != bands * hw {
        return Err(Error::DimensionMismatch {
            expected: bands * hw,
            got: aux.q0.len(),
            what: "q0 length",
        });
    }
    let nc = input_channels(bands);
    let mut input = vec![0.0; nc * hw];
    input[..bands * hw].copy_from_slice(s_prev);
    let px = bands * hw;
    let py = (bands + 1) * hw;
    for y in 0..h {
        for x in 0..w {
            input[px + y * w + x] = if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 };
            input[py + y * w + x] = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        }
    }
    input[(bands + 2) * hw..(2 * bands + 2) * hw].copy_from_slice(&aux.q0);
    let date = aux.date_k / DATE_SCALE;
    for v in &mut input[(2 * bands + 2) * hw..] {
        *v = date;
    }
    Ok(input)
}

/// All learnable parameters of the network dynamics model.
#[derive(Debug, Clone)]
pub struct DynamicsParams {
    pub mean: ConvStack,
    pub var: ConvStack,
    pub w1: f64,
    pub w2: f64,
    pub bands: usize,
}

pub const CONV_KERNEL: usize = 9;
pub const CONV_MID_CH: usize = 12;

impl DynamicsParams {
    pub fn zeros(bands: usize) -> Self {
        let in_ch = input_channels(bands);
        DynamicsParams {
            mean: ConvStack::zeros(in_ch, CONV_MID_CH, bands, CONV_KERNEL),
            var: ConvStack::zeros(in_ch, CONV_MID_CH, bands, CONV_KERNEL),
            w1: 1.0,
            w2: 0.0,
            bands,
        }
    }

    /// Seeded init: conv and affine weights uniform in
    /// `±1/sqrt(fan_in * k²)`, biases zero, `(W1, W2) = (1, 0)`.
    pub fn seeded(bands: usize, seed: u64) -> Self {
        let mut p = Self::zeros(bands);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in [
            &mut p.mean.conv1,
            &mut p.mean.conv2,
            &mut p.var.conv1,
            &mut p.var.conv2,
        ] {
            let bound = 1.0 / libm::sqrt((conv.in_ch * conv.kernel * conv.kernel) as f64);
            for wv in conv.weight.iter_mut() {
                *wv = (2.0 * rng.gen::<f64>() - 1.0) * bound;
            }
        }
        p.mean.affine.weight = 2.0 * rng.gen::<f64>() - 1.0;
        p.var.affine.weight = 2.0 * rng.gen::<f64>() - 1.0;
        p
    }

    fn stacks(&self) -> [&ConvStack; 2] {
        [&self.mean, &self.var]
    }

    /// Number of entries in the flat parameter vector.
    pub fn flat_len(&self) -> usize {
        let per_stack = |s: &ConvStack| {
            s.conv1.weight.len() + s.conv1.bias.len() + s.conv2.weight.len() + s.conv2.bias.len() + 2
        };
        per_stack(&self.mean) + per_stack(&self.var) + 2
    }

    /// Flattens every parameter in a fixed order (both conv stacks, then
    /// W1, W2); `set_from_flat` is the inverse.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for s in self.stacks() {
            out.extend_from_slice(&s.conv1.weight);
            out.extend_from_slice(&s.conv1.bias);
            out.extend_from_slice(&s.conv2.weight);
            out.extend_from_slice(&s.conv2.bias);
            out.push(s.affine.weight);
            out.push(s.affine.bias);
        }
        out.push(self.w1);
        out.push(self.w2);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.flat_len());
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        for s in [&mut self.mean, &mut self.var] {
            let n = s.conv1.weight.len();
            s.conv1.weight.copy_from_slice(take(n));
            let n = s.conv1.bias.len();
            s.conv1.bias.copy_from_slice(take(n));
            let n = s.conv2.weight.len();
            s.conv2.weight.copy_from_slice(take(n));
            let n = s.conv2.bias.len();
            s.conv2.bias.copy_from_slice(take(n));
            s.affine.weight = take(1)[0];
            s.affine.bias = take(1)[0];
        }
        self.w1 = take(1)[0];
        self.w2 = take(1)[0];
    }

    /// L1 norm of the network weights φ (everything except W1, W2).
    pub fn phi_l1(&self) -> f64 {
        let flat = self.to_flat();
        flat[..flat.len() - 2].iter().map(|v| libm::fabs(*v)).sum()
    }

    /// Named parameter tensors for serialization, in flat order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (prefix, s) in [("mean", &self.mean), ("var", &self.var)] {
            let names: [&'static str; 6] = match prefix {
                "mean" => [
                    "mean.conv1.weight",
                    "mean.conv1.bias",
                    "mean.conv2.weight",
                    "mean.conv2.bias",
                    "mean.affine.weight",
                    "mean.affine.bias",
                ],
                _ => [
                    "var.conv1.weight",
                    "var.conv1.bias",
                    "var.conv2.weight",
                    "var.conv2.bias",
                    "var.affine.weight",
                    "var.affine.bias",
                ],
            };
            let k = s.conv1.kernel;
            out.push((names[0], vec![s.conv1.out_ch, s.conv1.in_ch, k, k], s.conv1.weight.clone()));
            out.push((names[1], vec![s.conv1.out_ch], s.conv1.bias.clone()));
            out.push((names[2], vec![s.conv2.out_ch, s.conv2.in_ch, k, k], s.conv2.weight.clone()));
            out.push((names[3], vec![s.conv2.out_ch], s.conv2.bias.clone()));
            out.push((names[4], vec![1], vec![s.affine.weight]));
            out.push((names[5], vec![1], vec![s.affine.bias]));
        }
        out
    }

    /// Rebuilds parameters from named tensors plus `(w1, w2)`; the band count
    /// is inferred from `mean.conv2.bias`.
    pub fn from_tensors(tensors: &[(String, Vec<usize>, Vec<f64>)], w1: f64, w2: f64) -> Result<Self> {
        let find = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>)> {
            tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::InvalidArgument(alloc::format!("missing tensor {name}")))
        };
        let bands = find("mean.conv2.bias")?.2.len();
        let mut p = Self::zeros(bands);
        p.w1 = w1;
        p.w2 = w2;
        for (name, _, expect_len, slot) in [
            ("mean.conv1.weight", 0, p.mean.conv1.weight.len(), 0usize),
            ("mean.conv1.bias", 0, p.mean.conv1.bias.len(), 1),
            ("mean.conv2.weight", 0, p.mean.conv2.weight.len(), 2),
            ("mean.conv2.bias", 0, p.mean.conv2.bias.len(), 3),
            ("var.conv1.weight", 1, p.var.conv1.weight.len(), 4),
            ("var.conv1.bias", 1, p.var.conv1.bias.len(), 5),
            ("var.conv2.weight", 1, p.var.conv2.weight.len(), 6),
            ("var.conv2.bias", 1, p.var.conv2.bias.len(), 7),
        ] {
            let t = find(name)?;
            if t.2.len() != expect_len {
                return Err(Error::DimensionMismatch {
                    expected: expect_len,
                    got: t.2.len(),
                    what: "weight tensor length",
                });
            }
            match slot {
                0 => p.mean.conv1.weight.copy_from_slice(&t.2),
                1 => p.mean.conv1.bias.copy_from_slice(&t.2),
                2 => p.mean.conv2.weight.copy_from_slice(&t.2),
                3 => p.mean.conv2.bias.copy_from_slice(&t.2),
                4 => p.var.conv1.weight.copy_from_slice(&t.2),
                5 => p.var.conv1.bias.copy_from_slice(&t.2),
                6 => p.var.conv2.weight.copy_from_slice(&t.2),
                _ => p.var.conv2.bias.copy_from_slice(&t.2),
            }
        }
        p.mean.affine.weight = find("mean.affine.weight")?.2[0];
        p.mean.affine.bias = find("mean.affine.bias")?.2[0];
        p.var.affine.weight = find("var.affine.weight")?.2[0];
        p.var.affine.bias = find("var.affine.bias")?.2[0];
        Ok(p)
    }
}

/// Transition model used by the filter's prediction step.
#[derive(Debug, Clone)]
pub enum TransitionModel {
    /// Mean is the previous state; variance is `Δ_k · q0`.
    RandomWalk,
    /// Location-aware network mean/variance heads.
    Nn(DynamicsParams),
}

impl TransitionModel {
    /// Predicted mean, planar band-major layout matching `s_prev`.
    pub fn predict_mean(&self, s_prev: &[f64], aux: &AuxInput, dims: GridDims) -> Result<Vec<f64>> {
        Ok(self.predict(s_prev, aux, dims)?.0)
    }

    /// Predicted per-element process variance (diagonal), floored at
    /// [`EPSILON_VAR`] and proportional to `Δ_k`.
    pub fn predict_variance(&self, s_prev: &[f64], aux: &AuxInput, dims: GridDims) -> Result<Vec<f64>> {
        Ok(self.predict(s_prev, aux, dims)?.1)
    }

    /// Mean and variance in one pass (shares the input tensor build).
    pub fn predict(&self, s_prev: &[f64], aux: &AuxInput, dims: GridDims) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = dims.state_len();
        if s_prev.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s_prev.len(), what: "state length" });
        }
        match self {
            TransitionModel::RandomWalk => {
                let var = aux
                    .q0
                    .iter()
                    .map(|&q| (aux.delta_days * q).max(EPSILON_VAR))
                    .collect();
                Ok((s_prev.to_vec(), var))
            }
            TransitionModel::Nn(p) => {
                if p.bands != dims.bands {
                    return Err(Error::DimensionMismatch {
                        expected: p.bands,
                        got: dims.bands,
                        what: "model band count",
                    });
                }
                let input = build_input(s_prev, aux, dims)?;
                let (h, w) = (dims.height, dims.width);
                let nn_s = p.mean.forward(&input, h, w).out;
                let nn_q = p.var.forward(&input, h, w).out;
                let mean: Vec<f64> = s_prev.iter().zip(&nn_s).map(|(&s, &d)| relu(s + d)).collect();
                let var: Vec<f64> = aux
                    .q0
                    .iter()
                    .zip(&nn_q)
                    .map(|(&q, &g)| (aux.delta_days * relu(p.w1 * q + p.w2 * g)).max(EPSILON_VAR))
                    .collect();
                Ok((mean, var))
            }
        }
    }
}

/// Historical per-pixel variance rate (per band, per day):
/// `(1/n_D)(1/Δ_median) Σ (s − mean)²` with the pixelwise dataset mean and
/// the median gap between consecutive acquisition dates.
pub fn compute_q0(images: &[GridImage]) -> Result<Vec<f64>> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(String::from("q0 needs at least 2 historical images")));
    }
    let dims = images[0].dims();
    let n = dims.state_len();
    let mut gaps: Vec<f64> = Vec::with_capacity(images.len() - 1);
    for pair in images.windows(2) {
        if pair[1].date <= pair[0].date {
            return Err(Error::InvalidArgument(String::from("historical dates must be strictly increasing")));
        }
        gaps.push((pair[1].date - pair[0].date) as f64);
    }
    for img in images {
        if img.dims() != dims {
            return Err(Error::DimensionMismatch { expected: n, got: img.data.len(), what: "historical image dims" });
        }
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = gaps.len();
    let delta_median = if m % 2 == 1 { gaps[m / 2] } else { 0.5 * (gaps[m / 2 - 1] + gaps[m / 2]) };
    if delta_median <= 0.0 {
        return Err(Error::InvalidArgument(String::from("median acquisition gap must be positive")));
    }
    let nd = images.len() as f64;
    let mut mean = vec![0.0; n];
    for img in images {
        for (m, &v) in mean.iter_mut().zip(img.data.iter()) {
            *m += v / nd;
        }
    }
    let mut q0 = vec![0.0; n];
    for img in images {
        for (q, (&v, &m)) in q0.iter_mut().zip(img.data.iter().zip(mean.iter())) {
            *q += (v - m) * (v - m);
        }
    }
    let scale = 1.0 / (nd * delta_median);
    for q in &mut q0 {
        *q *= scale;
    }
    Ok(q0)
}

/// One supervised example: consecutive states and the auxiliary input of the
/// later acquisition.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub s_prev: Vec<f64>,
    pub s_next: Vec<f64>,
    pub aux: AuxInput,
}

/// Forms consecutive training pairs from a historical dataset; `q0` must come
/// from [`compute_q0`] on the same images.
pub fn training_pairs(images: &[GridImage], q0: &[f64]) -> Result<Vec<TrainPair>> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument(String::from("need at least 2 images for training pairs")));
    }
    let mut pairs = Vec::with_capacity(images.len() - 1);
    for win in images.windows(2) {
        let delta = (win[1].date - win[0].date) as f64;
        pairs.push(TrainPair {
            s_prev: win[0].data.clone(),
            s_next: win[1].data.clone(),
            aux: AuxInput::new(q0.to_vec(), win[1].date as f64, delta)?,
        });
    }
    Ok(pairs)
}

/// Training hyperparameters; regularization defaults follow the reference
/// configuration (λ₁ = 0.1, λ₂ = 0.001).
#[derive(Debug, Clone, Copy)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 0.05, epochs: 200, lambda1: 0.1, lambda2: 0.001 }
    }
}

fn loss_and_grad(
    params: &DynamicsParams,
    pairs: &[TrainPair],
    dims: GridDims,
    lambda1: f64,
    lambda2: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(String::from("empty training set")));
    }
    let (h, w) = (dims.height, dims.width);
    let n_s = dims.state_len() as f64;
    let c = 1.0 / (2.0 * n_s);
    let mut loss = 0.0;
    let mut grad = if want_grad { Some(DynamicsParams::zeros(params.bands)) } else { None };
    let (mut g_w1, mut g_w2) = (0.0, 0.0);

    for pair in pairs {
        let input = build_input(&pair.s_prev, &pair.aux, dims)?;
        let mc = params.mean.forward(&input, h, w);
        let vc = params.var.forward(&input, h, w);
        let delta = pair.aux.delta_days;
        let mut g_nns = vec![0.0; mc.out.len()];
        let mut g_nnq = vec![0.0; vc.out.len()];
        for e in 0..mc.out.len() {
            let pre_mu = pair.s_prev[e] + mc.out[e];
            let mu = relu(pre_mu);
            let t = params.w1 * pair.aux.q0[e] + params.w2 * vc.out[e];
            let v_raw = delta * relu(t);
            let var = v_raw.max(EPSILON_VAR);
            let r = pair.s_next[e] - mu;
            loss += c * (r * r / var + libm::log(var));
            if want_grad {
                if pre_mu > 0.0 {
                    g_nns[e] = -2.0 * c * r / var;
                }
                if v_raw > EPSILON_VAR && t > 0.0 {
                    let g_var = c * (1.0 / var - r * r / (var * var));
                    let g_t = g_var * delta;
                    g_w1 += g_t * pair.aux.q0[e];
                    g_w2 += g_t * vc.out[e];
                    g_nnq[e] = g_t * params.w2;
                }
            }
        }
        if let Some(g) = grad.as_mut() {
            params.mean.backward(&input, &mc, &g_nns, h, w, &mut g.mean);
            params.var.backward(&input, &vc, &g_nnq, h, w, &mut g.var);
        }
    }

    loss += lambda1 * ((params.w1 - 1.0) * (params.w1 - 1.0) + params.w2 * params.w2);
    loss += lambda2 * params.phi_l1();
    if !loss.is_finite() {
        return Err(Error::NonFinite("training objective"));
    }
    let flat_grad = match grad {
        None => None,
        Some(mut g) => {
            g.w1 = g_w1 + 2.0 * lambda1 * (params.w1 - 1.0);
            g.w2 = g_w2 + 2.0 * lambda1 * params.w2;
            let mut flat = g.to_flat();
            let phi = params.to_flat();
            let np = flat.len() - 2;
            for (gv, pv) in flat[..np].iter_mut().zip(phi[..np].iter()) {
                *gv += lambda2 * if *pv > 0.0 { 1.0 } else if *pv < 0.0 { -1.0 } else { 0.0 };
            }
            Some(flat)
        }
    };
    Ok((loss, flat_grad))
}

/// Minimization objective: mean Gaussian NLL of the one-step predictions plus
/// `λ₁[(W₁−1)² + W₂²] + λ₂‖φ‖₁`.
pub fn nll_objective(
    params: &DynamicsParams,
    pairs: &[TrainPair],
    dims: GridDims,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    Ok(loss_and_grad(params, pairs, dims, lambda1, lambda2, false)?.0)
}

/// Exact reverse-mode gradient of [`nll_objective`] in flat parameter order
/// (subgradient 0 at ReLU kinks and L1 zeros). Returns `(loss, gradient)`.
pub fn gradient(
    params: &DynamicsParams,
    pairs: &[TrainPair],
    dims: GridDims,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, Vec<f64>)> {
    let (loss, g) = loss_and_grad(params, pairs, dims, lambda1, lambda2, true)?;
    Ok((loss, g.expect("gradient requested")))
}

/// Full-batch gradient descent with halving-on-increase backoff. Deterministic
/// given the initial parameters. Returns the trained parameters and the
/// accepted-objective trace (one entry per epoch, starting with the initial
/// objective).
pub fn train(
    params: &DynamicsParams,
    pairs: &[TrainPair],
    dims: GridDims,
    hyper: &TrainHyper,
) -> Result<(DynamicsParams, Vec<f64>)> {
    let mut current = params.clone();
    let (mut loss, mut grad) = gradient(&current, pairs, dims, hyper.lambda1, hyper.lambda2)?;
    let mut trace = vec![loss];
    let lr0 = hyper.lr;
    let mut lr = hyper.lr;
    for _ in 0..hyper.epochs {
        let flat = current.to_flat();
        let mut accepted = false;
        while lr >= 1e-15 {
            let mut cand = current.clone();
            let step: Vec<f64> = flat.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
            cand.set_from_flat(&step);
            match nll_objective(&cand, pairs, dims, hyper.lambda1, hyper.lambda2) {
                Ok(cl) if cl <= loss => {
                    current = cand;
                    loss = cl;
                    accepted = true;
                    break;
                }
                _ => lr *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        trace.push(loss);
        lr = (lr * 1.5).min(lr0);
        let (l, g) = gradient(&current, pairs, dims, hyper.lambda1, hyper.lambda2)?;
        loss = l;
        grad = g;
    }
    Ok((current, trace))
}

/// Incremental network evaluator for the distributed prediction step.
///
/// Caches the first-layer pre-activations of both heads for a base input
/// image; evaluating the network output at one pixel after replacing that
/// pixel's state values then only touches the 9×9 window of first-layer
/// outputs around it (first conv uses zero padding, so the delta is a plain
/// weighted sum; the replicate-padded second conv reads clamped coordinates
/// that stay inside the same window).
pub struct NnPredictContext<'a> {
    params: &'a DynamicsParams,
    dims: GridDims,
    input: Vec<f64>,
    pre1_mean: Vec<f64>,
    pre1_var: Vec<f64>,
    pub delta_days: f64,
}

impl<'a> NnPredictContext<'a> {
    pub fn new(params: &'a DynamicsParams, s_prev: &[f64], aux: &AuxInput, dims: GridDims) -> Result<Self> {
        let input = build_input(s_prev, aux, dims)?;
        let pre1_mean = params.mean.conv1.forward(&input, dims.height, dims.width);
        let pre1_var = params.var.conv1.forward(&input, dims.height, dims.width);
        Ok(NnPredictContext { params, dims, input, pre1_mean, pre1_var, delta_days: aux.delta_days })
    }

    /// Base state values at `pixel` (one per band).
    pub fn base_state(&self, pixel: usize) -> Vec<f64> {
        let hw = self.dims.n_pixels();
        (0..self.dims.bands).map(|c| self.input[c * hw + pixel]).collect()
    }

    fn head_at_pixel(&self, stack: &ConvStack, pre1: &[f64], pixel: usize, s_vals: &[f64]) -> Vec<f64> {
        let (h, w, bands) = (self.dims.height, self.dims.width, self.dims.bands);
        let hw = h * w;
        let (px, py) = (pixel % w, pixel / w);
        let k = stack.conv1.kernel;
        let pad = stack.conv1.pad;
        let mid = stack.conv1.out_ch;
        // Updated first-layer pre-activations on the affected window,
        // indexed by (local_y * k + local_x) * mid + oc.
        let mut window = vec![0.0; k * k * mid];
        let mut in_window = vec![false; k * k];
        for wy in 0..k {
            let oy = py as isize + wy as isize - pad as isize;
            if oy < 0 || oy >= h as isize {
                continue;
            }
            for wx in 0..k {
                let ox = px as isize + wx as isize - pad as isize;
                if ox < 0 || ox >= w as isize {
                    continue;
                }
                let (oy, ox) = (oy as usize, ox as usize);
                // Output (oy, ox) reads input pixel (py, px) at kernel
                // offset (py - oy + pad, px - ox + pad).
                let ky = py + pad - oy;
                let kx = px + pad - ox;
                let local = wy * k + wx;
                in_window[local] = true;
                for oc in 0..mid {
                    let mut d = 0.0;
                    for c in 0..bands {
                        let widx = ((oc * stack.conv1.in_ch + c) * k + ky) * k + kx;
                        d += stack.conv1.weight[widx] * (s_vals[c] - self.input[c * hw + pixel]);
                    }
                    window[local * mid + oc] = pre1[oc * hw + oy * w + ox] + d;
                }
            }
        }
        // Second conv (replicate padding) evaluated at (py, px) only; every
        // clamped source coordinate lies inside the window above.
        let k2 = stack.conv2.kernel;
        let pad2 = stack.conv2.pad as isize;
        let mut out = Vec::with_capacity(stack.conv2.out_ch);
        for oc2 in 0..stack.conv2.out_ch {
            let mut acc = stack.conv2.bias[oc2];
            for ky in 0..k2 {
                let sy = (py as isize + ky as isize - pad2).clamp(0, h as isize - 1) as usize;
                for kx in 0..k2 {
                    let sx = (px as isize + kx as isize - pad2).clamp(0, w as isize - 1) as usize;
                    let ly = sy as isize - py as isize + pad as isize;
                    let lx = sx as isize - px as isize + pad as isize;
                    debug_assert!((0..k as isize).contains(&ly) && (0..k as isize).contains(&lx));
                    let local = (ly as usize) * k + lx as usize;
                    debug_assert!(in_window[local]);
                    for ic in 0..stack.conv2.in_ch {
                        let widx = ((oc2 * stack.conv2.in_ch + ic) * k2 + ky) * k2 + kx;
                        acc += stack.conv2.weight[widx] * relu(window[local * mid + ic]);
                    }
                }
            }
            out.push(stack.affine.weight * relu(acc) + stack.affine.bias);
        }
        out
    }

    /// Raw network outputs `(NN_s, NN_Q)` at `pixel` for a state that equals
    /// the base image everywhere except `pixel`, where it takes `s_vals`.
    pub fn eval_pixel(&self, pixel: usize, s_vals: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(s_vals.len(), self.dims.bands);
        let nn_s = self.head_at_pixel(&self.params.mean, &self.pre1_mean, pixel, s_vals);
        let nn_q = self.head_at_pixel(&self.params.var, &self.pre1_var, pixel, s_vals);
        (nn_s, nn_q)
    }

    /// Predicted mean and variance at `pixel` (one entry per band) for the
    /// single-pixel-replaced state.
    pub fn predict_pixel(&self, pixel: usize, s_vals: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (nn_s, nn_q) = self.eval_pixel(pixel, s_vals);
        let hw = self.dims.n_pixels();
        let bands = self.dims.bands;
        let mut mean = Vec::with_capacity(bands);
        let mut var = Vec::with_capacity(bands);
        for c in 0..bands {
            mean.push(relu(s_vals[c] + nn_s[c]));
            let q = self.input[(bands + 2 + c) * hw + pixel];
            var.push((self.delta_days * relu(self.params.w1 * q + self.params.w2 * nn_q[c])).max(EPSILON_VAR));
        }
        (mean, var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(w: usize, h: usize, bands: usize, date: i32, data: Vec<f64>) -> GridImage {
        GridImage::new(w, h, bands, data, date, crate::raster::Modality::Fine).unwrap()
    }

    fn rand_state(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn q0_identical_images_is_zero() {
        let d = vec![0.3; 8];
        let ims = [img(2, 2, 2, 0, d.clone()), img(2, 2, 2, 5, d)];
        let q0 = compute_q0(&ims).unwrap();
        assert!(q0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q0_two_point_example() {
        // values {0, 2}, dates {0, 1}: mean 1, sum of squared deviations 2,
        // n_D = 2, median gap 1 -> q0 = 1
        let ims = [img(1, 1, 1, 0, vec![0.0]), img(1, 1, 1, 1, vec![2.0])];
        let q0 = compute_q0(&ims).unwrap();
        assert!((q0[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn q0_quadratic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ims: Vec<GridImage> = (0..4)
            .map(|k| img(3, 2, 2, 7 * k, rand_state(&mut rng, 12)))
            .collect();
        let scaled: Vec<GridImage> = ims
            .iter()
            .map(|im| img(3, 2, 2, im.date, im.data.iter().map(|v| 3.0 * v).collect()))
            .collect();
        let q0 = compute_q0(&ims).unwrap();
        let q0s = compute_q0(&scaled).unwrap();
        for (a, b) in q0.iter().zip(q0s.iter()) {
            assert!((9.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn q0_rejects_short_or_unordered() {
        assert!(compute_q0(&[img(1, 1, 1, 0, vec![1.0])]).is_err());
        let ims = [img(1, 1, 1, 5, vec![1.0]), img(1, 1, 1, 5, vec![2.0])];
        assert!(compute_q0(&ims).is_err());
    }

    #[test]
    fn random_walk_mean_is_identity_and_variance_scales() {
        let dims = GridDims::new(2, 2, 2);
        let s: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let aux = AuxInput::new(vec![1.0; 8], 100.0, 16.0).unwrap();
        let (mean, var) = TransitionModel::RandomWalk.predict(&s, &aux, dims).unwrap();
        assert_eq!(mean, s);
        assert!(var.iter().all(|&v| (v - 16.0).abs() < 1e-15));
    }

    #[test]
    fn zero_network_mean_is_relu_of_previous() {
        let dims = GridDims::new(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = rand_state(&mut rng, dims.state_len());
        let aux = AuxInput::new(vec![0.5; dims.state_len()], 40.0, 2.0).unwrap();
        let model = TransitionModel::Nn(DynamicsParams::zeros(2));
        let mean = model.predict_mean(&s, &aux, dims).unwrap();
        assert_eq!(mean, s);
        // W1=1, W2=0, zero NN -> variance = delta * q0
        let var = model.predict_variance(&s, &aux, dims).unwrap();
        assert!(var.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn nn_mean_nonnegative_and_variance_floored() {
        let dims = GridDims::new(5, 5, 2);
        let params = DynamicsParams::seeded(2, 9);
        let model = TransitionModel::Nn(params);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..dims.state_len()).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
            let q0: Vec<f64> = (0..dims.state_len()).map(|_| rng.gen::<f64>()).collect();
            let aux = AuxInput::new(q0, 200.0, 1.0).unwrap();
            let (mean, var) = model.predict(&s, &aux, dims).unwrap();
            assert!(mean.iter().all(|&v| v >= 0.0));
            assert!(var.iter().all(|&v| v >= EPSILON_VAR));
        }
    }

    #[test]
    fn variance_linear_in_delta() {
        let dims = GridDims::new(5, 4, 2);
        let params = DynamicsParams::seeded(2, 11);
        let model = TransitionModel::Nn(params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_state(&mut rng, dims.state_len());
        let q0 = rand_state(&mut rng, dims.state_len());
        let v1 = model
            .predict_variance(&s, &AuxInput::new(q0.clone(), 10.0, 3.0).unwrap(), dims)
            .unwrap();
        let v2 = model
            .predict_variance(&s, &AuxInput::new(q0, 10.0, 6.0).unwrap(), dims)
            .unwrap();
        for (a, b) in v1.iter().zip(v2.iter()) {
            if *a > EPSILON_VAR {
                assert!((2.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn nesting_matches_random_walk_scaled_by_w1() {
        let dims = GridDims::new(3, 3, 2);
        let mut params = DynamicsParams::zeros(2);
        params.w1 = 2.5;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = rand_state(&mut rng, dims.state_len());
        let q0 = rand_state(&mut rng, dims.state_len());
        let aux = AuxInput::new(q0.clone(), 1.0, 4.0).unwrap();
        let nn = TransitionModel::Nn(params).predict_variance(&s, &aux, dims).unwrap();
        let rw = TransitionModel::RandomWalk.predict_variance(&s, &aux, dims).unwrap();
        for ((a, b), &q) in nn.iter().zip(rw.iter()).zip(q0.iter()) {
            if q > 0.0 {
                assert!((a / b - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_zero_residual_unit_variance() {
        let dims = GridDims::new(2, 2, 1);
        let params = DynamicsParams::zeros(1);
        let s: Vec<f64> = vec![0.2, 0.4, 0.6, 0.8];
        let aux = AuxInput::new(vec![1.0; 4], 0.0, 1.0).unwrap();
        let pairs = [TrainPair { s_prev: s.clone(), s_next: s, aux }];
        let loss = nll_objective(&params, &pairs, dims, 0.0, 0.0).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn loss_scalar_hand_value() {
        // residual 2, variance 4, n_s = 1: 0.5 * (4/4 + ln 4)
        let dims = GridDims::new(1, 1, 1);
        let params = DynamicsParams::zeros(1);
        let aux = AuxInput::new(vec![4.0], 0.0, 1.0).unwrap();
        let pairs = [TrainPair { s_prev: vec![1.0], s_next: vec![3.0], aux }];
        let loss = nll_objective(&params, &pairs, dims, 0.0, 0.0).unwrap();
        let expect = 0.5 * (1.0 + libm::log(4.0));
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn lambda1_arithmetic() {
        let dims = GridDims::new(1, 1, 1);
        let mut params = DynamicsParams::zeros(1);
        params.w1 = 0.0;
        let aux = AuxInput::new(vec![1.0], 0.0, 1.0).unwrap();
        // w1 = 0 makes the variance hit the floor; use a zero residual so only
        // the log term and regularizer remain, then difference the lambdas.
        let pairs = [TrainPair { s_prev: vec![0.5], s_next: vec![0.5], aux }];
        let base = nll_objective(&params, &pairs, dims, 0.0, 0.0).unwrap();
        let with = nll_objective(&params, &pairs, dims, 0.1, 0.0).unwrap();
        assert!((with - base - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_pairs_rejected() {
        let params = DynamicsParams::zeros(1);
        assert!(nll_objective(&params, &[], GridDims::new(1, 1, 1), 0.0, 0.0).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = DynamicsParams::seeded(2, 77);
        let flat = p.to_flat();
        let mut q = DynamicsParams::zeros(2);
        q.set_from_flat(&flat);
        assert_eq!(q.to_flat(), flat);
        let r = DynamicsParams::from_tensors(
            &p.tensors()
                .into_iter()
                .map(|(n, d, v)| (String::from(n), d, v))
                .collect::<Vec<_>>(),
            p.w1,
            p.w2,
        )
        .unwrap();
        assert_eq!(r.to_flat(), flat);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = GridDims::new(5, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = DynamicsParams::seeded(2, 22);
        // Positive states and q0 keep most units active (away from kinks).
        let s_prev: Vec<f64> = (0..dims.state_len()).map(|_| 0.5 + rng.gen::<f64>()).collect();
        let s_next: Vec<f64> = s_prev.iter().map(|v| v + 0.1 * (rng.gen::<f64>() - 0.5)).collect();
        let q0: Vec<f64> = (0..dims.state_len()).map(|_| 0.5 + rng.gen::<f64>()).collect();
        let aux = AuxInput::new(q0, 120.0, 2.0).unwrap();
        let pairs = [TrainPair { s_prev, s_next, aux }];
        let (l1, l2) = (0.1, 0.001);
        let (_, grad) = gradient(&params, &pairs, dims, l1, l2).unwrap();
        let flat = params.to_flat();
        let n = flat.len();
        let h = 1e-5;
        let mut worst = 0.0_f64;
        for t in 0..40 {
            // deterministic spread of coordinates, incl. w1/w2 at the end
            let idx = if t < 2 { n - 1 - t } else { (t * 7919) % (n - 2) };
            let mut fp = flat.clone();
            fp[idx] += h;
            let mut pp = params.clone();
            pp.set_from_flat(&fp);
            let lp = nll_objective(&pp, &pairs, dims, l1, l2).unwrap();
            fp[idx] -= 2.0 * h;
            pp.set_from_flat(&fp);
            let lm = nll_objective(&pp, &pairs, dims, l1, l2).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            worst = worst.max((fd - grad[idx]).abs() / denom);
        }
        assert!(worst < 1e-3, "max relative gradient error {worst}");
    }

    #[test]
    fn regularizer_gradient_zero_at_minimum() {
        let dims = GridDims::new(2, 2, 1);
        let params = DynamicsParams::zeros(1); // w1 = 1, w2 = 0
        let aux = AuxInput::new(vec![1.0; 4], 0.0, 1.0).unwrap();
        let s = vec![0.5; 4];
        let pairs = [TrainPair { s_prev: s.clone(), s_next: s, aux }];
        // d/dW1 of lambda1 (W1-1)^2 vanishes at W1=1: turning the
        // regularizer on must not change the W1 gradient there.
        let (_, g_off) = gradient(&params, &pairs, dims, 0.0, 0.0).unwrap();
        let (_, g_on) = gradient(&params, &pairs, dims, 0.1, 0.0).unwrap();
        let n = g_on.len();
        assert_eq!(g_on[n - 2], g_off[n - 2]);
    }

    #[test]
    fn training_decreases_objective_and_is_deterministic() {
        let dims = GridDims::new(6, 6, 2);
        let n = dims.state_len();
        // Ramp dataset with a constant per-step drift the network can learn.
        let mut images = Vec::new();
        for k in 0..5 {
            let data: Vec<f64> = (0..n).map(|i| 0.2 + 0.01 * k as f64 + 0.001 * (i % 7) as f64).collect();
            images.push(img(6, 6, 2, 8 * k as i32, data));
        }
        let q0 = compute_q0(&images).unwrap();
        let pairs = training_pairs(&images, &q0).unwrap();
        let hyper = TrainHyper { lr: 0.05, epochs: 50, ..TrainHyper::default() };
        let init = DynamicsParams::seeded(2, 42);
        let l0 = nll_objective(&init, &pairs, dims, hyper.lambda1, hyper.lambda2).unwrap();
        let (trained, trace) = train(&init, &pairs, dims, &hyper).unwrap();
        let l1 = nll_objective(&trained, &pairs, dims, hyper.lambda1, hyper.lambda2).unwrap();
        assert!(l1 < l0, "objective did not decrease: {l0} -> {l1}");
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));

        let (again, _) = train(&init, &pairs, dims, &hyper).unwrap();
        assert_eq!(trained.to_flat(), again.to_flat());

        let frozen = TrainHyper { lr: 0.0, epochs: 5, ..hyper };
        let (same, _) = train(&init, &pairs, dims, &frozen).unwrap();
        assert_eq!(same.to_flat(), init.to_flat());
    }

    #[test]
    fn translation_covariance_in_the_interior() {
        // Shifting every input channel by one pixel shifts the head output by
        // one pixel, for outputs farther than the receptive field from the
        // border.
        let (h, w) = (22, 22);
        let params = DynamicsParams::seeded(2, 60);
        let nc = input_channels(2);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let base: Vec<f64> = (0..nc * h * w).map(|_| rng.gen::<f64>()).collect();
        let mut shifted = vec![0.0; nc * h * w];
        for c in 0..nc {
            for y in 0..h {
                for x in 1..w {
                    shifted[c * h * w + y * w + x] = base[c * h * w + y * w + (x - 1)];
                }
            }
        }
        let a = params.mean.forward(&base, h, w).out;
        let b = params.mean.forward(&shifted, h, w).out;
        let hw = h * w;
        for c in 0..2 {
            for y in 9..h - 9 {
                for x in 10..w - 9 {
                    let d = (b[c * hw + y * w + x] - a[c * hw + y * w + (x - 1)]).abs();
                    assert!(d < 1e-12, "covariance violated at ({y},{x}): {d}");
                }
            }
        }
    }

    #[test]
    fn pixel_context_matches_full_forward() {
        let dims = GridDims::new(12, 10, 2);
        let params = DynamicsParams::seeded(2, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s_prev = rand_state(&mut rng, dims.state_len());
        let q0 = rand_state(&mut rng, dims.state_len());
        let aux = AuxInput::new(q0, 50.0, 3.0).unwrap();
        let ctx = NnPredictContext::new(&params, &s_prev, &aux, dims).unwrap();
        let hw = dims.n_pixels();
        for &pixel in &[0usize, 5, 11, 47, 60, hw - 1] {
            let s_vals = [rng.gen::<f64>() * 2.0 - 0.5, rng.gen::<f64>() * 2.0 - 0.5];
            // brute force: rebuild the full input with the replaced pixel
            let mut s_mod = s_prev.clone();
            s_mod[pixel] = s_vals[0];
            s_mod[hw + pixel] = s_vals[1];
            let input = build_input(&s_mod, &aux, dims).unwrap();
            let full_s = params.mean.forward(&input, dims.height, dims.width).out;
            let full_q = params.var.forward(&input, dims.height, dims.width).out;
            let (nn_s, nn_q) = ctx.eval_pixel(pixel, &s_vals);
            for c in 0..2 {
                assert!((nn_s[c] - full_s[c * hw + pixel]).abs() < 1e-12);
                assert!((nn_q[c] - full_q[c * hw + pixel]).abs() < 1e-12);
            }
            // predict_pixel applies the mean/variance heads consistently
            let model = TransitionModel::Nn(params.clone());
            let (fm, fv) = model.predict(&s_mod, &aux, dims).unwrap();
            let (pm, pv) = ctx.predict_pixel(pixel, &s_vals);
            for c in 0..2 {
                assert!((pm[c] - fm[c * hw + pixel]).abs() < 1e-12);
                assert!((pv[c] - fv[c * hw + pixel]).abs() < 1e-12);
            }
        }
    }
}
