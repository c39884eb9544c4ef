//! Positional encoding, the coordinate MLP with hand-written backprop, Adam,
//! and the parameter checkpoint format.
//!
//! The network maps an encoded colored point `[γ(x), γ(y), γ(z), r, g, b]` to
//! a scalar depth correction. Layers are dense with a rectifier between them
//! and a linear output; weights are stored `inputs x outputs`, row-major.

use crate::geometry::Point3H;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::{Read, Write};
use thiserror::Error;

pub const HIDDEN_WIDTH: usize = 256;
pub const DEFAULT_LEVELS: usize = 6;

/// `γ(p) = [sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp)]`.
pub fn positional_encode(p: f64, levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels);
    encode_scalar_into(p, levels, &mut out);
    out
}

fn encode_scalar_into(p: f64, levels: usize, out: &mut Vec<f64>) {
    let mut freq = PI;
    for _ in 0..levels {
        let (s, c) = (freq * p).sin_cos();
        out.push(s);
        out.push(c);
        freq *= 2.0;
    }
}

pub fn encoded_len(levels: usize) -> usize {
    6 * levels + 3
}

/// Network input for one colored point.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput(pub Vec<f64>);

impl EncodedInput {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Encode a point whose coordinates have already been divided by the scene
/// scale.
pub fn encode_point(x: &Point3H, rgb: [f64; 3], levels: usize) -> EncodedInput {
    let mut out = Vec::with_capacity(encoded_len(levels));
    encode_into(x, rgb, levels, &mut out);
    EncodedInput(out)
}

/// Append the encoding of `x` to `out`.
pub(crate) fn encode_into(x: &Point3H, rgb: [f64; 3], levels: usize, out: &mut Vec<f64>) {
    encode_scalar_into(x.x, levels, out);
    encode_scalar_into(x.y, levels, out);
    encode_scalar_into(x.z, levels, out);
    out.extend_from_slice(&rgb);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, o: usize) -> f64 {
        self.weights[i * self.outputs + o]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    /// Panics if consecutive layer shapes do not chain.
    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty(), "an MLP needs at least one layer");
        for pair in layers.windows(2) {
            assert_eq!(pair[0].outputs, pair[1].inputs, "layer shapes do not chain");
        }
        for l in &layers {
            assert_eq!(l.weights.len(), l.inputs * l.outputs);
            assert_eq!(l.bias.len(), l.outputs);
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.outputs)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }
}

/// Default architecture: `(6L+3) → 256 → 256 → 256 → 1`, hidden layers with
/// He-uniform weights, zero biases, and an all-zero output layer so the
/// initial correction is exactly zero.
pub fn init_params(seed: u64, levels: usize) -> MlpParams {
    init_params_with_dims(seed, &[encoded_len(levels), HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, 1])
}

pub fn init_params_with_dims(seed: u64, dims: &[usize]) -> MlpParams {
    assert!(dims.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut layer = Dense::zeros(w[0], w[1]);
            if i + 1 < n {
                let bound = (6.0 / w[0] as f64).sqrt();
                layer.weights.iter_mut().for_each(|x| *x = rng.random_range(-bound..bound));
            }
            layer
        })
        .collect();
    MlpParams::from_layers(layers)
}

/// Activations kept from a single forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` the rectified output of layer `l`.
    activations: Vec<Vec<f64>>,
}

/// Single-input forward pass.
pub fn mlp_forward(params: &MlpParams, input: &EncodedInput) -> (f64, ForwardCache) {
    let x = input.as_slice();
    assert_eq!(x.len(), params.input_dim(), "input length does not match first layer");
    assert_eq!(params.output_dim(), 1);
    let mut activations = vec![x.to_vec()];
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let prev = activations.last().unwrap();
        let mut out = layer.bias.clone();
        for (i, &a) in prev.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        if li != last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        activations.push(out);
    }
    let y = activations.last().unwrap()[0];
    (y, ForwardCache { activations })
}

/// Parameter gradients, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Backpropagate `upstream = ∂L/∂y` through a cached forward pass. Returns the
/// parameter gradients and `∂L/∂input`.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, upstream: f64) -> (MlpGrads, Vec<f64>) {
    let mut grads = params.zero_grads();
    let input_grad = mlp_backward_accumulate(params, cache, upstream, &mut grads);
    (grads, input_grad)
}

/// Like [`mlp_backward`] but adds into existing gradient buffers, so a
/// minibatch can be accumulated sample by sample.
pub fn mlp_backward_accumulate(params: &MlpParams, cache: &ForwardCache, upstream: f64, grads: &mut MlpGrads) -> Vec<f64> {
    let mut delta = vec![upstream];
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &cache.activations[li];
        let g = &mut grads.layers[li];
        for (o, d) in delta.iter().enumerate() {
            g.bias[o] += d;
        }
        let mut prev_delta = vec![0.0; layer.inputs];
        for (i, &a) in input.iter().enumerate() {
            let row = i * layer.outputs;
            let mut acc = 0.0;
            for (o, &d) in delta.iter().enumerate() {
                g.weights[row + o] += a * d;
                acc += layer.weights[row + o] * d;
            }
            prev_delta[i] = acc;
        }
        if li > 0 {
            // Rectifier: no gradient through inactive units.
            for (pd, &a) in prev_delta.iter_mut().zip(input) {
                if a <= 0.0 {
                    *pd = 0.0;
                }
            }
        }
        delta = prev_delta;
    }
    delta
}

/// Scalar types the batched engine can run in.
pub trait GemmScalar: Copy + Default + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `C = alpha * A·B + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize);
}

macro_rules! impl_gemm_scalar {
    ($t:ty, $f:path) => {
        impl GemmScalar for $t {
            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, beta: Self, c: &mut [Self], rsc: isize, csc: isize) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every element the kernel reads
                // or writes; strides are non-negative and the slices do not alias.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_gemm_scalar!(f64, matrixmultiply::dgemm);
impl_gemm_scalar!(f32, matrixmultiply::sgemm);

/// Reusable buffers for batched forward/backward passes in precision `T`.
#[derive(Debug, Clone)]
pub struct BatchEngine<T: GemmScalar> {
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
    dims: Vec<usize>,
    batch: usize,
    /// Rectified outputs per layer, `activations[0]` is the input batch.
    activations: Vec<Vec<T>>,
    delta: Vec<T>,
    prev_delta: Vec<T>,
    grad_w: Vec<Vec<T>>,
}

impl<T: GemmScalar> BatchEngine<T> {
    pub fn new(params: &MlpParams) -> Self {
        let dims = params.dims();
        let mut engine = Self {
            weights: Vec::new(),
            biases: Vec::new(),
            dims: dims.clone(),
            batch: 0,
            activations: vec![Vec::new(); dims.len()],
            delta: Vec::new(),
            prev_delta: Vec::new(),
            grad_w: params.layers.iter().map(|l| vec![T::default(); l.weights.len()]).collect(),
        };
        engine.load(params);
        engine
    }

    /// Copy (and convert) the current parameters in.
    pub fn load(&mut self, params: &MlpParams) {
        assert_eq!(params.dims(), self.dims);
        self.weights = params.layers.iter().map(|l| l.weights.iter().map(|&x| T::from_f64(x)).collect()).collect();
        self.biases = params.layers.iter().map(|l| l.bias.iter().map(|&x| T::from_f64(x)).collect()).collect();
    }

    /// Forward a row-major `batch x input_dim` block of inputs (given in f64).
    /// Returns one output per row.
    pub fn forward(&mut self, inputs: &[f64], batch: usize) -> Vec<f64> {
        let in_dim = self.dims[0];
        assert_eq!(inputs.len(), batch * in_dim);
        self.batch = batch;
        self.activations[0].clear();
        self.activations[0].extend(inputs.iter().map(|&x| T::from_f64(x)));
        let n_layers = self.dims.len() - 1;
        for l in 0..n_layers {
            let (k, n) = (self.dims[l], self.dims[l + 1]);
            let (head, tail) = self.activations.split_at_mut(l + 1);
            let x = &head[l];
            let out = &mut tail[0];
            out.clear();
            for _ in 0..batch {
                out.extend_from_slice(&self.biases[l]);
            }
            T::gemm(batch, k, n, x, k as isize, 1, &self.weights[l], n as isize, 1, T::from_f64(1.0), out, n as isize, 1);
            if l + 1 < n_layers {
                let zero = T::default();
                out.iter_mut().for_each(|v| {
                    if *v < zero {
                        *v = zero
                    }
                });
            }
        }
        let out_dim = *self.dims.last().unwrap();
        assert_eq!(out_dim, 1);
        self.activations[n_layers].iter().map(|&v| v.to_f64()).collect()
    }

    /// Backpropagate per-row upstream gradients of the last forward batch and
    /// add the result into `grads`.
    pub fn backward_accumulate(&mut self, upstream: &[f64], grads: &mut MlpGrads) {
        let batch = self.batch;
        assert_eq!(upstream.len(), batch);
        let n_layers = self.dims.len() - 1;
        self.delta.clear();
        self.delta.extend(upstream.iter().map(|&g| T::from_f64(g)));
        for l in (0..n_layers).rev() {
            let (k, n) = (self.dims[l], self.dims[l + 1]);
            let x = &self.activations[l];
            // dW = Xᵀ · Δ
            self.grad_w[l].iter_mut().for_each(|g| *g = T::default());
            T::gemm(k, batch, n, x, 1, k as isize, &self.delta, n as isize, 1, T::default(), &mut self.grad_w[l], n as isize, 1);
            // db = column sums of Δ, accumulated in f64.
            let gb = &mut grads.layers[l].bias;
            for row in self.delta.chunks_exact(n) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d.to_f64();
                }
            }
            for (g, w) in grads.layers[l].weights.iter_mut().zip(&self.grad_w[l]) {
                *g += w.to_f64();
            }
            if l == 0 {
                break;
            }
            // ΔX = Δ · Wᵀ, masked by the rectifier of the previous layer.
            self.prev_delta.clear();
            self.prev_delta.resize(batch * k, T::default());
            T::gemm(batch, n, k, &self.delta, n as isize, 1, &self.weights[l], 1, n as isize, T::default(), &mut self.prev_delta, k as isize, 1);
            let zero = T::default();
            for (d, a) in self.prev_delta.iter_mut().zip(x.iter()) {
                if !(*a > zero) {
                    *d = zero;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.prev_delta);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam moments for the MLP and an optional explicit field (the confidence
/// map). The step counter is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    weights: Vec<Moments>,
    biases: Vec<Moments>,
    field: Moments,
}

impl AdamState {
    pub fn new(params: &MlpParams, field_len: usize) -> Self {
        Self::with_config(params, field_len, AdamConfig::default())
    }

    pub fn with_config(params: &MlpParams, field_len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            weights: params.layers.iter().map(|l| Moments::new(l.weights.len())).collect(),
            biases: params.layers.iter().map(|l| Moments::new(l.bias.len())).collect(),
            field: Moments::new(field_len),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter and update the MLP parameters.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads, lr: f64) {
        self.step += 1;
        let (t, cfg) = (self.step, self.config);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            adam_update(&mut layer.weights, &grads.layers[li].weights, &mut self.weights[li], t, lr, &cfg);
            adam_update(&mut layer.bias, &grads.layers[li].bias, &mut self.biases[li], t, lr, &cfg);
        }
    }

    /// Update the explicit field with the bias correction of the current step
    /// (call after [`AdamState::step`]), then clamp to `[lo, hi]`.
    pub fn step_field(&mut self, field: &mut [f32], grads: &[f64], lr: f64, lo: f32, hi: f32) {
        assert_eq!(field.len(), self.field.m.len());
        assert_eq!(grads.len(), field.len());
        let t = self.step.max(1);
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (i, (p, &g)) in field.iter_mut().zip(grads).enumerate() {
            let m = &mut self.field.m[i];
            let v = &mut self.field.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            *p = ((*p as f64 - upd) as f32).clamp(lo, hi);
        }
    }
}

fn adam_update(params: &mut [f64], grads: &[f64], mom: &mut Moments, t: u64, lr: f64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
    }
}

/// Convenience wrapper: one Adam update of `params`.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGrads, lr: f64) {
    state.step(params, grads, lr);
}

/// Exponential schedule `base · decay^epoch`.
pub fn lr_at_epoch(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to evaluate a trained network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub levels: u32,
    pub seed: u64,
    pub coord_scale: f64,
    pub params: MlpParams,
}

/// Layout (little-endian): magic `MBCK`, u32 version, u32 L, u64 seed,
/// f64 coordinate scale, u32 layer count n, n+1 u32 widths, then for each
/// layer its weights (inputs x outputs, row-major) followed by its biases as
/// f64.
pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.levels.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.coord_scale.to_le_bytes())?;
    let dims = ckpt.params.dims();
    w.write_all(&((dims.len() - 1) as u32).to_le_bytes())?;
    for d in &dims {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(ckpt.params.num_params() * 8);
    for l in &ckpt.params.layers {
        for x in l.weights.iter().chain(&l.bias) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let levels = read_u32(&mut r)?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let coord_scale = f64::from_le_bytes(b8);
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(CheckpointError::Corrupt(format!("layer count {n_layers}")));
    }
    let dims = (0..=n_layers)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if dims.iter().any(|&d| d == 0 || d > 1 << 20) {
        return Err(CheckpointError::Corrupt(format!("layer widths {dims:?}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let mut layer = Dense::zeros(w[0], w[1]);
        for x in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            r.read_exact(&mut b8).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("truncated parameter block".into()),
                _ => CheckpointError::Io(e),
            })?;
            *x = f64::from_le_bytes(b8);
        }
        layers.push(layer);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(Checkpoint {
        levels,
        seed,
        coord_scale,
        params: MlpParams::from_layers(layers),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn random_params(seed: u64, dims: &[usize]) -> MlpParams {
        let mut p = init_params_with_dims(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        for l in p.layers_mut() {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
        p
    }

    #[test]
    fn encoding_examples() {
        let g = positional_encode(0.0, 4);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let g = positional_encode(0.5, 2);
        let expected = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for l in 1..=10 {
            assert_eq!(positional_encode(0.37, l).len(), 2 * l);
        }
    }

    #[test]
    fn encode_point_layout() {
        let e = encode_point(&Point3::origin(), [0.0; 3], 6);
        assert_eq!(e.len(), 39);
        for (i, v) in e.as_slice()[..36].iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(&e.as_slice()[36..], &[0.0, 0.0, 0.0]);

        let x = Point3::new(0.1, -0.2, 0.3);
        let a = encode_point(&x, [0.1, 0.2, 0.3], 6);
        let b = encode_point(&x, [0.3, 0.1, 0.2], 6);
        assert_eq!(a.as_slice()[..36], b.as_slice()[..36]);
        assert_eq!(&b.as_slice()[36..], &[0.3, 0.1, 0.2]);
    }

    #[test]
    fn init_output_is_zero_and_deterministic() {
        let p = init_params(7, 6);
        assert_eq!(p.dims(), vec![39, 256, 256, 256, 1]);
        for s in [0.0, 0.3, -1.7] {
            let x = encode_point(&Point3::new(s, s * 0.5, 0.4), [0.2, 0.5, 0.9], 6);
            assert_eq!(mlp_forward(&p, &x).0, 0.0);
        }
        assert_eq!(p, init_params(7, 6));
        assert_ne!(p.layers()[0].weights, init_params(8, 6).layers()[0].weights);
        assert!(p.layers()[0].bias.iter().all(|&b| b == 0.0));
        assert!(p.layers()[3].weights.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn toy_network_by_hand() {
        // y = 0.5 * relu(2x + 1) - 0.25
        let l1 = Dense {
            inputs: 1,
            outputs: 1,
            weights: vec![2.0],
            bias: vec![1.0],
        };
        let l2 = Dense {
            inputs: 1,
            outputs: 1,
            weights: vec![0.5],
            bias: vec![-0.25],
        };
        let p = MlpParams::from_layers(vec![l1, l2]);
        let (y, cache) = mlp_forward(&p, &EncodedInput(vec![3.0]));
        assert_eq!(y, 3.25);
        let (g, gx) = mlp_backward(&p, &cache, 1.0);
        assert_eq!(g.layers[1].weights, vec![7.0]);
        assert_eq!(g.layers[1].bias, vec![1.0]);
        assert_eq!(g.layers[0].weights, vec![1.5]);
        assert_eq!(g.layers[0].bias, vec![0.5]);
        assert_eq!(gx, vec![1.0]);

        // Negative pre-activation: hidden unit is dead.
        let (y, cache) = mlp_forward(&p, &EncodedInput(vec![-3.0]));
        assert_eq!(y, -0.25);
        let (g, gx) = mlp_backward(&p, &cache, 1.0);
        assert_eq!(g.layers[0].weights, vec![0.0]);
        assert_eq!(gx, vec![0.0]);
    }

    #[test]
    fn linear_layer_input_gradient_is_weight_vector() {
        let l = Dense {
            inputs: 3,
            outputs: 1,
            weights: vec![0.5, -1.0, 2.0],
            bias: vec![0.1],
        };
        let p = MlpParams::from_layers(vec![l]);
        let (_, cache) = mlp_forward(&p, &EncodedInput(vec![1.0, 2.0, 3.0]));
        let (_, gx) = mlp_backward(&p, &cache, 1.0);
        assert_eq!(gx, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(1, &[5, 8, 8, 1]);
        let (_, cache) = mlp_forward(&p, &EncodedInput(vec![0.1, -0.4, 0.3, 0.9, -0.2]));
        let (g, gx) = mlp_backward(&p, &cache, 0.0);
        assert_eq!(g.max_abs(), 0.0);
        assert!(gx.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dims = [7, 12, 12, 12, 1];
        let p = random_params(3, &dims);
        let x = EncodedInput((0..7).map(|i| (i as f64 * 0.37).sin()).collect());
        let (_, cache) = mlp_forward(&p, &x);
        let (g, gx) = mlp_backward(&p, &cache, 1.0);
        let h = 1e-6;
        for li in 0..p.layers().len() {
            let n = p.layers()[li].weights.len();
            for i in 0..n {
                let mut pp = p.clone();
                pp.layers_mut()[li].weights[i] += h;
                let mut pm = p.clone();
                pm.layers_mut()[li].weights[i] -= h;
                let fd = (mlp_forward(&pp, &x).0 - mlp_forward(&pm, &x).0) / (2.0 * h);
                let an = g.layers[li].weights[i];
                assert!((an - fd).abs() / (an.abs() + 1e-8) < 1e-4, "layer {li} w{i}: {an} vs {fd}");
            }
        }
        for i in 0..7 {
            let mut xp = x.clone();
            xp.0[i] += h;
            let mut xm = x.clone();
            xm.0[i] -= h;
            let fd = (mlp_forward(&p, &xp).0 - mlp_forward(&p, &xm).0) / (2.0 * h);
            assert!((gx[i] - fd).abs() / (gx[i].abs() + 1e-8) < 1e-4);
        }
    }

    #[test]
    fn batch_engine_matches_single_path() {
        let dims = [9, 16, 16, 1];
        let p = random_params(11, &dims);
        let batch = 5;
        let inputs: Vec<f64> = (0..batch * 9).map(|i| ((i * 7) as f64 * 0.13).cos()).collect();
        let upstream: Vec<f64> = (0..batch).map(|i| 0.3 - 0.2 * i as f64).collect();

        let mut engine = BatchEngine::<f64>::new(&p);
        let out = engine.forward(&inputs, batch);
        let mut g_batch = p.zero_grads();
        engine.backward_accumulate(&upstream, &mut g_batch);

        let mut g_single = p.zero_grads();
        for b in 0..batch {
            let x = EncodedInput(inputs[b * 9..(b + 1) * 9].to_vec());
            let (y, cache) = mlp_forward(&p, &x);
            assert!((y - out[b]).abs() < 1e-12);
            mlp_backward_accumulate(&p, &cache, upstream[b], &mut g_single);
        }
        for (a, b) in g_batch.layers.iter().zip(&g_single.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights).chain(a.bias.iter().zip(&b.bias)) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        let mut engine32 = BatchEngine::<f32>::new(&p);
        let out32 = engine32.forward(&inputs, batch);
        for (a, b) in out.iter().zip(&out32) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = random_params(2, &[3, 4, 1]);
        let before = p.clone();
        let mut state = AdamState::new(&p, 0);
        let zero = p.zero_grads();
        state.step(&mut p, &zero, 1e-3);
        assert_eq!(p, before);

        let mut g = p.zero_grads();
        g.layers[1].bias[0] = -0.37;
        let mut state = AdamState::new(&p, 0);
        state.step(&mut p, &g, 1e-5);
        let moved = p.layers()[1].bias[0] - before.layers()[1].bias[0];
        assert!((moved - 1e-5).abs() / 1e-5 < 1e-6);

        // Moments decay under zero gradients.
        let m0 = state.biases[1].m[0].abs();
        state.step(&mut p, &zero, 1e-5);
        state.step(&mut p, &zero, 1e-5);
        assert!(state.biases[1].m[0].abs() < m0);
        assert!(state.biases[1].v[0] > 0.0);
    }

    #[test]
    fn adam_field_is_clamped() {
        let p = random_params(2, &[3, 1]);
        let mut state = AdamState::new(&p, 3);
        let mut pp = p.clone();
        state.step(&mut pp, &p.zero_grads(), 0.0);
        let mut field = vec![1.0f32, 0.5, 0.0];
        state.step_field(&mut field, &[-1.0, 1.0, 1.0], 0.1, 0.0, 1.0);
        assert_eq!(field[0], 1.0);
        assert!((field[1] - 0.4).abs() < 1e-6);
        assert_eq!(field[2], 0.0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_epoch(1e-5, 0.985, 0), 1e-5);
        let lr = lr_at_epoch(1e-5, 0.985, 200);
        assert!((lr - 1e-5 * (200.0 * 0.985f64.ln()).exp()).abs() < 1e-18, "{lr}");
        assert!((lr / 4.85e-7 - 1.0).abs() < 0.01, "{lr}");
        assert_eq!(lr_at_epoch(3e-4, 1.0, 57), 3e-4);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let ckpt = Checkpoint {
            levels: 2,
            seed: 99,
            coord_scale: 0.75,
            params: random_params(5, &[15, 6, 1]),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), ckpt);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..]), Err(CheckpointError::BadMagic)));
        let mut future = buf.clone();
        future[4] = 9;
        assert!(matches!(read_checkpoint(&future[..]), Err(CheckpointError::Version(9))));
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
