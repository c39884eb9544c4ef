//! Training loop.

use super::chain::{confidence_taps, draw_query_samples, geometric_regularizer, to_reference_frame, PhotometricChain, ReferencePoint};
use super::{Bundle, ConfidenceMap, Precision, RefineError, RefinementModel, TrainConfig};
use crate::geometry::{project_with_min, PixelCoord};
use crate::image::{median_filter_5x5, PatchKernel};
use crate::neural::{encode_into, encode_point, init_params, lr_at_epoch, mlp_backward_accumulate, mlp_forward, AdamState, BatchEngine, MlpGrads};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Per-epoch means over all drawn samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_photometric: f64,
    pub mean_geometric: f64,
    pub mean_total: f64,
    pub samples: usize,
    /// Samples whose photometric term was dropped (patch out of bounds).
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    /// One `epoch, lr, mean_photometric, mean_geometric, mean_total` line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}", format_log_line(e)).unwrap();
        }
        s
    }
}

pub fn format_log_line(e: &EpochStats) -> String {
    format!("{}, {:e}, {:e}, {:e}, {:e}", e.epoch, e.lr, e.mean_photometric, e.mean_geometric, e.mean_total)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: RefinementModel,
    pub log: TrainLog,
}

/// Loss terms of one sample and the derivatives of its contribution.
#[derive(Debug, Clone, Copy, Default)]
struct Terms {
    photometric: f64,
    geometric: f64,
    d_raw: f64,
    d_confidence: f64,
    dropped: bool,
}

/// `raw` is the network output, `c` the confidence at `x_r`, `z_hat` the
/// z-depth of the transformed point.
#[allow(clippy::too_many_arguments)]
fn sample_terms(chain: &PhotometricChain, x_r: PixelCoord, z_hat: f64, raw: f64, c: f64, alpha: f64, direct: bool, z_min: f64) -> Terms {
    let (z, dz_applied, applied_scale) = if direct {
        (raw, raw - z_hat, 1.0)
    } else {
        (z_hat + c * raw, c * raw, c)
    };
    let (geometric, g_sign) = geometric_regularizer(dz_applied);
    let (photometric, d_z, dropped) = if z > z_min {
        match chain.loss_and_grad(x_r, z) {
            Some((l, g)) => (l, g, false),
            None => (0.0, 0.0, true),
        }
    } else {
        (0.0, 0.0, true)
    };
    // d/d(applied correction) of photometric + α·|applied|; in direct mode the
    // output is the depth itself.
    let d_applied = d_z + alpha * g_sign;
    Terms {
        photometric,
        geometric,
        d_raw: applied_scale * d_applied,
        d_confidence: if direct { 0.0 } else { raw * d_applied },
        dropped,
    }
}

/// Mean total loss over a batch and its gradients.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub photometric: f64,
    pub geometric: f64,
    pub grads: MlpGrads,
    /// Dense gradient with respect to every confidence texel.
    pub confidence_grad: Vec<f64>,
    /// Points that projected into the reference image.
    pub used: usize,
    pub dropped: usize,
}

/// Evaluate the training objective for a fixed set of reference-frame points
/// in double precision, one point at a time. Points that do not project into
/// the reference image are skipped; the mean is over all given points.
pub fn batch_objective(model: &RefinementModel, chain: &PhotometricChain, points: &[ReferencePoint], alpha: f64) -> Result<BatchObjective, RefineError> {
    let grid = model.confidence.grid();
    let mut out = BatchObjective {
        loss: 0.0,
        photometric: 0.0,
        geometric: 0.0,
        grads: model.params.zero_grads(),
        confidence_grad: vec![0.0; grid.width() * grid.height()],
        used: 0,
        dropped: 0,
    };
    if points.is_empty() {
        return Ok(out);
    }
    let n = points.len() as f64;
    for p in points {
        let Some(x_r) = project_with_min(&p.point, &chain.reference_intrinsics(), crate::geometry::DEFAULT_Z_MIN).ok() else {
            continue;
        };
        let Some(taps) = confidence_taps(&model.confidence, x_r) else {
            continue;
        };
        let c: f64 = taps.iter().map(|&(i, w)| w * grid.data()[i] as f64).sum();
        let input = encode_point(&(p.point / model.coord_scale), p.rgb, model.levels);
        let (raw, cache) = mlp_forward(&model.params, &input);
        let t = sample_terms(chain, x_r, p.point.z, raw, c, alpha, model.direct_depth, crate::geometry::DEFAULT_Z_MIN);
        out.used += 1;
        out.dropped += t.dropped as usize;
        out.photometric += t.photometric / n;
        out.geometric += t.geometric / n;
        mlp_backward_accumulate(&model.params, &cache, t.d_raw / n, &mut out.grads);
        for (i, w) in taps {
            out.confidence_grad[i] += w * t.d_confidence / n;
        }
    }
    out.loss = out.photometric + alpha * out.geometric;
    Ok(out)
}

enum Engine {
    F32(BatchEngine<f32>),
    F64(BatchEngine<f64>),
}

impl Engine {
    fn forward(&mut self, inputs: &[f64], batch: usize) -> Vec<f64> {
        match self {
            Engine::F32(e) => e.forward(inputs, batch),
            Engine::F64(e) => e.forward(inputs, batch),
        }
    }

    fn backward(&mut self, upstream: &[f64], grads: &mut MlpGrads) {
        match self {
            Engine::F32(e) => e.backward_accumulate(upstream, grads),
            Engine::F64(e) => e.backward_accumulate(upstream, grads),
        }
    }

    fn load(&mut self, params: &crate::neural::MlpParams) {
        match self {
            Engine::F32(e) => e.load(params),
            Engine::F64(e) => e.load(params),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct StepSums {
    photometric: f64,
    geometric: f64,
    samples: usize,
    dropped: usize,
}

/// Stateful trainer; [`train`] runs it to completion.
pub struct Trainer {
    bundle: Bundle,
    config: TrainConfig,
    kernel: PatchKernel,
    model: RefinementModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    queries: Vec<usize>,
    engine: Engine,
    grads: MlpGrads,
    confidence_grad: Vec<f64>,
    inputs: Vec<f64>,
    epoch: usize,
    step: usize,
    log: TrainLog,
}

impl Trainer {
    pub fn new(bundle: &Bundle, config: &TrainConfig) -> Result<Self, RefineError> {
        config.validate()?;
        let bundle = match config.constant_init_depth {
            Some(z) => bundle.with_constant_depth(z)?,
            None => bundle.clone(),
        };
        let (h, w, _, _) = bundle.dims();
        let kernel = config.kernel();
        let queries = bundle.query_indices(config.frame_stride);
        if queries.is_empty() && config.epochs > 0 {
            return Err(RefineError::InvalidBundle("no query frames to train on".into()));
        }
        let params = init_params(config.seed, config.levels);
        let model = RefinementModel {
            params,
            confidence: ConfidenceMap::ones(h, w),
            levels: config.levels,
            coord_scale: config.coord_scale,
            direct_depth: config.direct_depth,
        };
        let engine = match config.precision {
            Precision::F32 => Engine::F32(BatchEngine::new(&model.params)),
            Precision::F64 => Engine::F64(BatchEngine::new(&model.params)),
        };
        Ok(Self {
            adam: AdamState::new(&model.params, h * w),
            grads: model.params.zero_grads(),
            confidence_grad: vec![0.0; h * w],
            inputs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f5a_3e1e_c7ed),
            bundle,
            config: config.clone(),
            kernel,
            model,
            queries,
            engine,
            epoch: 0,
            step: 0,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &RefinementModel {
        &self.model
    }

    pub fn bundle(&self) -> &Bundle {
        &self.bundle
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    fn fail(&self, what: &'static str, detail: String) -> RefineError {
        RefineError::NonFinite {
            what,
            epoch: self.epoch,
            step: self.step,
            detail,
        }
    }

    fn train_step(&mut self, lr: f64, confidence_lr: f64) -> Result<StepSums, RefineError> {
        let cfg = &self.config;
        let qi = self.queries[self.rng.random_range(0..self.queries.len())];
        let frame = &self.bundle.frames()[qi];
        let reference = self.bundle.reference();
        let k_r = reference.intrinsics_rgb;
        let samples = draw_query_samples(&frame.image, &frame.depth, cfg.samples, cfg.patch_half_width, cfg.max_draw_attempts, &mut self.rng)
            .map_err(|e| match e {
                RefineError::SamplingStarvation { requested, drawn, .. } => RefineError::SamplingStarvation { frame: qi, requested, drawn },
                e => e,
            })?;
        let chain = PhotometricChain::new(&reference.image, k_r, &frame.image, frame.intrinsics_rgb, &frame.pose, &self.kernel)?.with_z_min(cfg.z_min);

        let conf = self.model.confidence.grid();
        let mut prepared = Vec::with_capacity(samples.len());
        self.inputs.clear();
        for s in &samples {
            let p = to_reference_frame(s, &frame.pose, &frame.intrinsics_rgb)?;
            let Ok(x_r) = project_with_min(&p.point, &k_r, cfg.z_min) else {
                continue;
            };
            let Some(taps) = confidence_taps(&self.model.confidence, x_r) else {
                continue;
            };
            let c: f64 = taps.iter().map(|&(i, w)| w * conf.data()[i] as f64).sum();
            encode_into(&(p.point / cfg.coord_scale), p.rgb, cfg.levels, &mut self.inputs);
            prepared.push((x_r, p.point.z, c, taps));
        }
        let n = samples.len() as f64;
        let mut sums = StepSums {
            samples: samples.len(),
            dropped: samples.len() - prepared.len(),
            ..Default::default()
        };
        let raw = self.engine.forward(&self.inputs, prepared.len());
        let mut upstream = Vec::with_capacity(prepared.len());
        self.confidence_grad.iter_mut().for_each(|g| *g = 0.0);
        for (&(x_r, z_hat, c, taps), &y) in prepared.iter().zip(&raw) {
            let t = sample_terms(&chain, x_r, z_hat, y, c, cfg.alpha, cfg.direct_depth, cfg.z_min);
            sums.photometric += t.photometric;
            sums.geometric += t.geometric;
            sums.dropped += t.dropped as usize;
            upstream.push(t.d_raw / n);
            for (i, w) in taps {
                self.confidence_grad[i] += w * t.d_confidence / n;
            }
        }
        if !(sums.photometric.is_finite() && sums.geometric.is_finite()) {
            return Err(self.fail(
                "loss",
                format!("query frame {qi}: photometric sum {}, geometric sum {}", sums.photometric, sums.geometric),
            ));
        }
        self.grads.zero();
        self.engine.backward(&upstream, &mut self.grads);
        if !self.grads.is_finite() || self.confidence_grad.iter().any(|g| !g.is_finite()) {
            return Err(self.fail("gradient", format!("query frame {qi}: max |grad| {}", self.grads.max_abs())));
        }
        self.adam.step(&mut self.model.params, &self.grads, lr);
        if !cfg.direct_depth {
            let field = self.model.confidence.values_mut().data_mut();
            self.adam.step_field(field, &self.confidence_grad, confidence_lr, 0.0, 1.0);
        }
        self.engine.load(&self.model.params);
        self.step += 1;
        Ok(sums)
    }

    /// One pass: one step per stride-filtered query frame.
    pub fn run_epoch(&mut self) -> Result<EpochStats, RefineError> {
        let lr = lr_at_epoch(self.config.base_lr, self.config.decay, self.epoch);
        let confidence_lr = lr_at_epoch(self.config.confidence_lr, self.config.decay, self.epoch);
        let mut total = StepSums::default();
        for _ in 0..self.queries.len() {
            let s = self.train_step(lr, confidence_lr)?;
            total.photometric += s.photometric;
            total.geometric += s.geometric;
            total.samples += s.samples;
            total.dropped += s.dropped;
        }
        if self.config.median_filter_confidence && !self.config.direct_depth {
            let filtered = median_filter_5x5(self.model.confidence.grid())?;
            self.model.confidence = ConfidenceMap::from_grid(filtered)?;
        }
        let n = total.samples.max(1) as f64;
        let (mp, mg) = (total.photometric / n, total.geometric / n);
        let stats = EpochStats {
            epoch: self.epoch,
            lr,
            mean_photometric: mp,
            mean_geometric: mg,
            mean_total: mp + self.config.alpha * mg,
            samples: total.samples,
            dropped: total.dropped,
        };
        self.log.epochs.push(stats.clone());
        self.epoch += 1;
        Ok(stats)
    }

    pub fn finish(self) -> TrainOutput {
        TrainOutput {
            model: self.model,
            log: self.log,
        }
    }
}

pub fn train(bundle: &Bundle, config: &TrainConfig) -> Result<TrainOutput, RefineError> {
    train_with_progress(bundle, config, |_| {})
}

/// Like [`train`], calling `progress` after every epoch.
pub fn train_with_progress(bundle: &Bundle, config: &TrainConfig, mut progress: impl FnMut(&EpochStats)) -> Result<TrainOutput, RefineError> {
    let mut trainer = Trainer::new(bundle, config)?;
    for _ in 0..config.epochs {
        let stats = trainer.run_epoch()?;
        progress(&stats);
    }
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::image::ImageGrid;
    use crate::neural::init_params_with_dims;
    use crate::refine::Frame;
    use nalgebra::Vector3;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 23.5, 17.5).unwrap()
    }

    fn bundle(texture: bool, frames: usize) -> Bundle {
        let frames = (0..frames)
            .map(|i| {
                let t = Vector3::new(0.001 * i as f64, -0.0005 * i as f64, 0.0);
                let pose = if i == 0 { Pose::identity() } else { Pose::from_translation(t) };
                // Fronto-parallel plane at 0.5 m rendered exactly.
                let img = ImageGrid::from_fn(36, 48, 3, |r, c, ch| {
                    if !texture {
                        return 0.5;
                    }
                    let x = (c as f64 - 23.5) / 60.0 * 0.5 + t.x;
                    let y = (r as f64 - 17.5) / 60.0 * 0.5 + t.y;
                    (0.5 + 0.25 * (90.0 * x + ch as f64).sin() * (70.0 * y).cos()) as f32
                })
                .unwrap();
                let depth = ImageGrid::filled(9, 12, 1, 0.52);
                Frame::new(img, depth, pose, k(), i as u64 * 16_666_667)
            })
            .collect();
        Bundle::new(frames).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            samples: 64,
            patch_half_width: 3,
            levels: 2,
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let b = bundle(true, 3);
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let out = train(&b, &cfg).unwrap();
        assert_eq!(out.model.params, init_params(cfg.seed, cfg.levels));
        assert!(out.model.confidence.grid().data().iter().all(|&c| c == 1.0));
        assert!(out.log.epochs.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let b = bundle(true, 4);
        let a = train(&b, &small_config()).unwrap();
        let c = train(&b, &small_config()).unwrap();
        assert_eq!(a.model.params, c.model.params);
        assert_eq!(a.log, c.log);
    }

    #[test]
    fn confidence_stays_in_unit_interval() {
        let b = bundle(true, 4);
        let cfg = TrainConfig {
            confidence_lr: 0.5,
            base_lr: 1e-3,
            ..small_config()
        };
        let out = train(&b, &cfg).unwrap();
        assert!(out.model.confidence.grid().data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn textureless_without_regularizer_stays_put() {
        let b = bundle(false, 4);
        let cfg = TrainConfig { alpha: 0.0, ..small_config() };
        let out = train(&b, &cfg).unwrap();
        let init = init_params(cfg.seed, cfg.levels);
        assert_eq!(out.model.params, init);
        for e in &out.log.epochs {
            assert!(e.mean_photometric.abs() < 1e-20);
        }
    }

    #[test]
    fn log_lines_have_five_fields() {
        let b = bundle(true, 3);
        let out = train(&b, &small_config()).unwrap();
        let text = out.log.to_text();
        assert_eq!(text.lines().count(), 3);
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<f64> = line.split(", ").map(|f| f.parse().unwrap()).collect();
            assert_eq!(fields.len(), 5);
            assert_eq!(fields[0], i as f64);
        }
    }

    #[test]
    fn rejects_bundle_without_queries() {
        let b = bundle(true, 1);
        assert!(matches!(train(&b, &small_config()), Err(RefineError::InvalidBundle(_))));
    }

    #[test]
    fn batch_objective_gradient_matches_finite_differences() {
        let b = bundle(true, 2);
        let kernel = PatchKernel::with_default_sigma(3);
        let (r, q) = (b.reference(), &b.frames()[1]);
        let chain = PhotometricChain::new(&r.image, r.intrinsics_rgb, &q.image, q.intrinsics_rgb, &q.pose, &kernel).unwrap();
        let mut params = init_params_with_dims(4, &[crate::neural::encoded_len(2), 8, 8, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in params.layers_mut().last_mut().unwrap().weights.iter_mut() {
            *v = rng.random_range(-0.02..0.02);
        }
        let model = RefinementModel {
            params,
            confidence: ConfidenceMap::ones(36, 48),
            levels: 2,
            coord_scale: 1.0,
            direct_depth: false,
        };
        let samples = draw_query_samples(&q.image, &q.depth, 8, 3, 4, &mut rng).unwrap();
        let points: Vec<_> = samples.iter().map(|s| to_reference_frame(s, &q.pose, &q.intrinsics_rgb).unwrap()).collect();
        let obj = batch_objective(&model, &chain, &points, 0.01).unwrap();
        let h = 1e-6;
        for li in 0..model.params.layers().len() {
            for wi in [0usize, 3, 7] {
                let mut plus = model.clone();
                plus.params.layers_mut()[li].weights[wi] += h;
                let mut minus = model.clone();
                minus.params.layers_mut()[li].weights[wi] -= h;
                let fd = (batch_objective(&plus, &chain, &points, 0.01).unwrap().loss - batch_objective(&minus, &chain, &points, 0.01).unwrap().loss) / (2.0 * h);
                let an = obj.grads.layers[li].weights[wi];
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "layer {li} w{wi}: {an} vs {fd}");
            }
        }
    }
}
