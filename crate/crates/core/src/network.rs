//! Miniature FPN-style fully convolutional network, its SGD training loop
//! and a finite-difference gradient checker.
//!
//! Encoder: `depth` blocks of 3×3 conv → ReLU → 2×2 max-pool. Every block
//! whose output is at ¼ resolution or coarser gets a lateral 3×3 conv + ReLU
//! projecting it to `c` channels; the top-down path upsamples ×2 and sums
//! with the next lateral until it reaches ¼ resolution. Three heads (3×3 conv
//! + ReLU, then 1×1 conv) produce instance logits (`n + 1`), semantic logits
//! (`C + 1`) and a 2-channel centre offset.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Fault, Gradients, LossEval, LossTerm, Tape, Var};
use crate::error::{bail, Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig, LossTargets, ProbMap};
use crate::rng;
use crate::sampling::{self, PairSet, SamplerConfig};
use crate::scene::{self, Image, Scene, SceneGenConfig};
use crate::tensor::Tensor;

/// Output stride of the network.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_factor: f64,
    /// Epochs between decays; 0 disables decay.
    pub decay_every_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.01, decay_factor: 0.1, decay_every_epochs: 20 }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_every_epochs == 0 {
            return self.initial;
        }
        self.initial * libm::pow(self.decay_factor, (epoch / self.decay_every_epochs) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct MiniFpnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Instance indices, background excluded.
    pub n: usize,
    /// Semantic categories, background excluded.
    pub classes: usize,
    pub depth: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for MiniFpnConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, channels: 16, n: 8, classes: 2, depth: 3, lr: LrSchedule::default(), momentum: 0.9, seed: 0 }
    }
}

impl MiniFpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            bail!(Config, "depth must be at least 2 to reach quarter resolution, got {}", self.depth);
        }
        let unit = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % unit != 0 || self.width % unit != 0 {
            bail!(Config, "input {}x{} must be a positive multiple of {}", self.height, self.width, unit);
        }
        if self.channels < 4 {
            bail!(Config, "channels must be at least 4, got {}", self.channels);
        }
        if self.n < 1 || self.classes < 1 {
            bail!(Config, "n and classes must be at least 1");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if !(self.lr.initial >= 0.0) || !(self.lr.decay_factor > 0.0) {
            bail!(Config, "invalid learning-rate schedule");
        }
        Ok(())
    }

    pub fn output_shape(&self) -> (usize, usize) {
        (self.height / OUTPUT_STRIDE, self.width / OUTPUT_STRIDE)
    }

    /// Shapes of every parameter tensor, in store order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.w"), alloc::vec![o, i, k, k]));
            out.push((format!("{name}.b"), alloc::vec![o]));
        };
        for d in 1..=self.depth {
            conv(format!("enc{d}"), c, if d == 1 { 3 } else { c }, 3);
        }
        for d in 2..=self.depth {
            conv(format!("lat{d}"), c, c, 3);
        }
        for (head, k) in [("inst", self.n + 1), ("sem", self.classes + 1), ("ctr", 2)] {
            conv(format!("{head}.hidden"), c, c, 3);
            conv(format!("{head}.out"), k, c, 1);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named network weights in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    entries: Vec<(String, Tensor)>,
}

impl ParameterStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Checks that names and shapes agree with `cfg`.
    pub fn check_against(&self, cfg: &MiniFpnConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        if expected.len() != self.entries.len() {
            bail!(Shape, "expected {} parameter tensors, found {}", expected.len(), self.entries.len());
        }
        for ((name, dims), (have, t)) in expected.iter().zip(&self.entries) {
            if name != have || dims.as_slice() != t.dims() {
                bail!(Shape, "parameter {} {:?} does not match {} {:?}", have, t.dims(), name, dims);
            }
        }
        Ok(())
    }
}

/// Fan-in scaled Gaussian initialisation; biases start at zero. Final 1×1
/// layers use unit gain, hidden layers the ReLU gain √2.
pub fn init_network(cfg: &MiniFpnConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let entries = cfg
        .parameter_shapes()
        .into_iter()
        .map(|(name, dims)| {
            let len: usize = dims.iter().product();
            let data = if name.ends_with(".b") {
                alloc::vec![0.0; len]
            } else {
                let fan_in = (dims[1] * dims[2] * dims[3]) as f64;
                let gain = if name.ends_with(".out.w") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, libm::sqrt(gain / fan_in)).expect("finite std");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            Ok((name, Tensor::from_vec(&dims, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(ParameterStore { entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutputs {
    /// `[n + 1, h/4, w/4]`, softmax-normalised.
    pub instance_probs: ProbMap,
    /// `[C + 1, h/4, w/4]`, softmax-normalised.
    pub semantic_probs: Tensor,
    /// `[2, h/4, w/4]` offsets in output-grid units.
    pub center_pred: Tensor,
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub instance_probs: Var,
    pub semantic_probs: Var,
    pub center_pred: Var,
    pub outputs: NetworkOutputs,
}

/// `[3, H, W]` network input, centred around zero.
pub fn image_tensor(image: &Image) -> Result<Tensor> {
    let (h, w) = image.shape();
    let mut data = alloc::vec![0.0; 3 * h * w];
    for (i, px) in image.as_slice().iter().enumerate() {
        for c in 0..3 {
            if !px[c].is_finite() {
                return Err(Error::NonFinite(format!("input pixel {i}")));
            }
            data[c * h * w + i] = px[c] - 0.5;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn forward(cfg: &MiniFpnConfig, params: &ParameterStore, image: &Image) -> Result<Forward> {
    forward_with_fault(cfg, params, image, None)
}

#[doc(hidden)]
pub fn forward_with_fault(cfg: &MiniFpnConfig, params: &ParameterStore, image: &Image, fault: Option<Fault>) -> Result<Forward> {
    if image.shape() != (cfg.height, cfg.width) {
        bail!(Shape, "image {:?} but network expects {}x{}", image.shape(), cfg.height, cfg.width);
    }
    params.check_against(cfg)?;
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = params.entries().iter().map(|(n, t)| tape.param(n, t.clone())).collect();
    let mut next = vars.into_iter();
    let mut take = || {
        let w = next.next().expect("parameter order");
        let b = next.next().expect("parameter order");
        (w, b)
    };
    let x = tape.constant(image_tensor(image)?);
    let mut blocks = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for _ in 0..cfg.depth {
        let (w, b) = take();
        let c = tape.conv2d(h, w, Some(b))?;
        let r = tape.relu(c)?;
        h = tape.max_pool2(r)?;
        blocks.push(h);
    }
    let mut laterals = Vec::with_capacity(cfg.depth - 1);
    for block in &blocks[1..] {
        let (w, b) = take();
        let c = tape.conv2d(*block, w, Some(b))?;
        laterals.push(tape.relu(c)?);
    }
    let mut top = *laterals.last().expect("depth >= 2");
    for lat in laterals.iter().rev().skip(1) {
        let up = tape.upsample2(top)?;
        top = tape.add(up, *lat)?;
    }
    let feature_map = top;
    let mut head = |tape: &mut Tape| -> Result<Var> {
        let (w1, b1) = take();
        let (w2, b2) = take();
        let c = tape.conv2d(feature_map, w1, Some(b1))?;
        let r = tape.relu(c)?;
        tape.conv2d(r, w2, Some(b2))
    };
    let inst_logits = head(&mut tape)?;
    let sem_logits = head(&mut tape)?;
    let center_pred = head(&mut tape)?;
    for (what, v) in [("instance logits", inst_logits), ("semantic logits", sem_logits), ("centre offsets", center_pred)] {
        if !tape.value(v)?.is_finite() {
            return Err(Error::NonFinite(format!("{what} of the forward pass")));
        }
    }
    let instance_probs = tape.softmax_channels(inst_logits)?;
    let semantic_probs = tape.softmax_channels(sem_logits)?;
    let outputs = NetworkOutputs {
        instance_probs: ProbMap::new(tape.value(instance_probs)?.clone())?,
        semantic_probs: tape.value(semantic_probs)?.clone(),
        center_pred: tape.value(center_pred)?.clone(),
    };
    Ok(Forward { tape, instance_probs, semantic_probs, center_pred, outputs })
}

struct PairTerm<'a> {
    ps: &'a PairSet,
    cfg: &'a LossConfig,
    frozen: Option<&'a Tensor>,
}

impl LossTerm for PairTerm<'_> {
    fn evaluate(&self, input: &Tensor) -> Result<LossEval> {
        let (value, grad, branch) = losses::pair_loss_kernel(self.frozen.unwrap_or(input), input, self.ps, self.cfg)?;
        Ok(LossEval { value, grad, branch })
    }
}

struct BackgroundTerm<'a> {
    targets: &'a LossTargets,
    clamp: f64,
}

impl LossTerm for BackgroundTerm<'_> {
    fn evaluate(&self, input: &Tensor) -> Result<LossEval> {
        let (value, grad) = losses::background_loss_with_grad(input, &self.targets.instances, self.clamp)?;
        Ok(LossEval { value, grad, branch: 0 })
    }
}

struct SemanticTerm<'a> {
    targets: &'a LossTargets,
    clamp: f64,
}

impl LossTerm for SemanticTerm<'_> {
    fn evaluate(&self, input: &Tensor) -> Result<LossEval> {
        let (value, grad) = losses::semantic_ce_loss_with_grad(input, &self.targets.semantics, self.clamp)?;
        Ok(LossEval { value, grad, branch: 0 })
    }
}

struct CenterTerm<'a> {
    targets: &'a LossTargets,
}

impl LossTerm for CenterTerm<'_> {
    fn evaluate(&self, input: &Tensor) -> Result<LossEval> {
        let (value, grad) = losses::center_smooth_l1_loss_with_grad(input, &self.targets.centers, &self.targets.instances)?;
        Ok(LossEval { value, grad, branch: 0 })
    }
}

/// Records the full objective on the forward tape and returns the total
/// node together with its breakdown. A scene with no foreground on the
/// output grid contributes no centre term.
pub fn attach_loss(fwd: &mut Forward, targets: &LossTargets, ps: &PairSet, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    attach_loss_frozen(fwd, targets, ps, cfg, None)
}

/// [`attach_loss`] with the constant side of every pair KL read from
/// `frozen` instead of the current instance probabilities.
pub fn attach_loss_frozen(
    fwd: &mut Forward,
    targets: &LossTargets,
    ps: &PairSet,
    cfg: &LossConfig,
    frozen: Option<&Tensor>,
) -> Result<(Var, LossBreakdown)> {
    let tape = &mut fwd.tape;
    let clamp = cfg.log_clamp;
    let pair = tape.loss(fwd.instance_probs, &PairTerm { ps, cfg, frozen })?;
    let bg = tape.loss(fwd.instance_probs, &BackgroundTerm { targets, clamp })?;
    let sem = tape.loss(fwd.semantic_probs, &SemanticTerm { targets, clamp })?;
    let has_fg = targets.instances.as_slice().iter().any(|&id| id != 0);
    let ctr = if cfg.weights.center != 0.0 && has_fg { Some(tape.loss(fwd.center_pred, &CenterTerm { targets })?) } else { None };
    let w = cfg.weights;
    let mut terms = alloc::vec![(pair, w.instance), (bg, w.instance), (sem, w.semantic)];
    if let Some(c) = ctr {
        terms.push((c, w.center));
    }
    let total = tape.weighted_sum(&terms)?;
    let value = |v: Var| tape.value(v).map(|t| t.item());
    let l_ctr = match ctr {
        Some(c) => value(c)?,
        None => 0.0,
    };
    let breakdown = LossBreakdown::combine(value(pair)?, value(bg)?, value(sem)?, l_ctr, ps.len(), &w);
    Ok((total, breakdown))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(Vec<Tensor>);

impl Velocity {
    pub fn zeros_like(params: &ParameterStore) -> Self {
        Self(params.entries().iter().map(|(_, t)| Tensor::zeros(t.dims())).collect())
    }
}

/// `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step(params: &mut ParameterStore, velocity: &mut Velocity, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if grads.entries.len() != params.entries.len() || velocity.0.len() != params.entries.len() {
        bail!(Shape, "gradient/velocity count does not match {} parameters", params.entries.len());
    }
    for (((name, p), (gname, g)), v) in params.entries.iter_mut().zip(&grads.entries).zip(&mut velocity.0) {
        if name != gname || !p.same_shape(g) || !p.same_shape(v) {
            bail!(Shape, "gradient {} {:?} does not match parameter {} {:?}", gname, g.dims(), name, p.dims());
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub net: MiniFpnConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Global gradient-norm ceiling applied before each update.
    #[cfg_attr(feature = "serde", serde(default))]
    pub clip_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        if self.loss.n != self.net.n {
            bail!(Config, "loss n = {} but network n = {}", self.loss.n, self.net.n);
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                bail!(Config, "clip_grad_norm must be positive, got {}", c);
            }
        }
        if self.loss.stride != OUTPUT_STRIDE {
            bail!(Config, "loss stride {} but the network outputs at stride {}", self.loss.stride, OUTPUT_STRIDE);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParameterStore,
    pub log: Vec<StepRecord>,
}

/// Pair set used for a given scene at a given step.
pub fn step_pair_set(scene: &Scene, sampler: &SamplerConfig, seed: u64, step: usize) -> Result<PairSet> {
    sampling::build_grid_pair_set(&scene.instances, sampler, OUTPUT_STRIDE, rng::derive_seed(seed, step as u64))
}

/// Trains from a fresh initialisation.
pub fn train(cfg: &TrainConfig, dataset: &[Scene], steps: usize, on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = init_network(&cfg.net)?;
    train_from(cfg, params, dataset, steps, on_step)
}

/// One scene per step, scenes reshuffled each epoch; the learning rate
/// follows the epoch schedule. Aborts on a non-finite loss or parameter.
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ParameterStore,
    dataset: &[Scene],
    steps: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.check_against(&cfg.net)?;
    if dataset.is_empty() {
        bail!(Config, "training dataset is empty");
    }
    let mut velocity = Velocity::zeros_like(&params);
    let mut log = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for step in 0..steps {
        let epoch = step / dataset.len();
        if step % dataset.len() == 0 {
            order.sort_unstable();
            order.shuffle(&mut rng::seeded(rng::derive_seed(cfg.seed ^ 0x5eed, epoch as u64)));
        }
        let scene = &dataset[order[step % dataset.len()]];
        let lr = cfg.net.lr.at_epoch(epoch);
        let ps = step_pair_set(scene, &cfg.sampler, cfg.seed, step)?;
        let targets = LossTargets::from_scene(scene, OUTPUT_STRIDE);
        let mut fwd = forward(&cfg.net, &params, &scene.image)?;
        let (total, breakdown) = attach_loss(&mut fwd, &targets, &ps, &cfg.loss)?;
        if !breakdown.l_total.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}")));
        }
        let mut grads = fwd.tape.backward(total)?;
        let grad_norm = grads.global_norm();
        if let Some(c) = cfg.clip_grad_norm {
            grads.clip_global_norm(c);
        }
        sgd_step(&mut params, &mut velocity, &grads, lr, cfg.net.momentum)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at step {step}")));
        }
        let rec = StepRecord { step, lr, grad_norm, breakdown };
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome { params, log })
}

/// Loss breakdown of `params` on one scene with a given pair set.
pub fn evaluate_loss(cfg: &TrainConfig, params: &ParameterStore, scene: &Scene, ps: &PairSet) -> Result<LossBreakdown> {
    let mut fwd = forward(&cfg.net, params, &scene.image)?;
    let targets = LossTargets::from_scene(scene, OUTPUT_STRIDE);
    attach_loss(&mut fwd, &targets, ps, &cfg.loss).map(|(_, b)| b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub net: MiniFpnConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub scene: SceneGenConfig,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates (a fixed random subsample).
    pub max_coords: Option<usize>,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            net: MiniFpnConfig { height: 16, width: 16, channels: 8, n: 4, classes: 2, ..Default::default() },
            loss: LossConfig { n: 4, weights: losses::LossWeights { instance: 1.0, semantic: 1.0, center: 1.0 }, ..Default::default() },
            sampler: SamplerConfig { per_instance_count: 8, epsilon: None, include_self_pairs: true },
            scene: SceneGenConfig { height: 16, width: 16, min_instances: 2, max_instances: 3, min_size: 6, max_size: 9, min_visible_pixels: 8, ..Default::default() },
            seed: 0,
            step: 1e-4,
            max_coords: None,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ± perturbations crossed a ReLU/pool/hinge kink.
    pub skipped_nonsmooth: usize,
}

/// Compares the analytic gradient of the total loss with central finite
/// differences of the same loss expression. The pair KLs hold their starred
/// argument constant, so the finite differences do the same: the starred
/// distributions stay at their unperturbed values. Relative error per
/// coordinate is `|a − f| / max(1e-8, |a| + |f|)`.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut net = cfg.net.clone();
    net.seed = cfg.seed;
    net.validate()?;
    cfg.loss.validate()?;
    let scene = scene::gen_shapes_scene(&cfg.scene, rng::derive_seed(cfg.seed, 11))?;
    let ps = sampling::build_pair_set(&scene.instances, &cfg.sampler, rng::derive_seed(cfg.seed, 12))?;
    let targets = LossTargets::from_scene(&scene, OUTPUT_STRIDE);
    let mut params = init_network(&net)?;
    // Non-zero biases so that bias gradients are exercised off the symmetric point.
    {
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, 13));
        let normal = Normal::new(0.0, 0.1).expect("std");
        for (name, t) in params.entries_mut() {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = normal.sample(&mut r);
                }
            }
        }
    }
    let mut fwd = forward_with_fault(&net, &params, &scene.image, cfg.fault)?;
    let frozen = fwd.outputs.instance_probs.tensor().clone();
    let (total, _) = attach_loss(&mut fwd, &targets, &ps, &cfg.loss)?;
    let eval = |p: &ParameterStore| -> Result<(f64, u64)> {
        let mut fwd = forward_with_fault(&net, p, &scene.image, cfg.fault)?;
        let (_, b) = attach_loss_frozen(&mut fwd, &targets, &ps, &cfg.loss, Some(&frozen))?;
        Ok((b.l_total, fwd.tape.branch_signature()))
    };
    let grads = fwd.tape.backward(total)?;
    for (name, g) in &grads.entries {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of {name}")));
        }
    }
    let mut coords: Vec<(usize, usize)> = params
        .entries()
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, t))| (0..t.len()).map(move |i| (ti, i)))
        .collect();
    if let Some(limit) = cfg.max_coords {
        if limit < coords.len() {
            coords.shuffle(&mut rng::seeded(rng::derive_seed(cfg.seed, 14)));
            coords.truncate(limit);
            coords.sort_unstable();
        }
    }
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_nonsmooth: 0 };
    let h = cfg.step;
    for (ti, i) in coords {
        let base = params.entries()[ti].1.data()[i];
        params.entries_mut()[ti].1.data_mut()[i] = base + h;
        let (fp, sp) = eval(&params)?;
        params.entries_mut()[ti].1.data_mut()[i] = base - h;
        let (fm, sm) = eval(&params)?;
        params.entries_mut()[ti].1.data_mut()[i] = base;
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFinite(format!("finite difference at {}[{i}]", params.entries()[ti].0)));
        }
        if sp != sm {
            report.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.entries[ti].1.data()[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.entries()[ti].0.clone(), i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MiniFpnConfig {
        MiniFpnConfig { height: 32, width: 32, channels: 8, n: 4, classes: 2, depth: 3, ..Default::default() }
    }

    #[test]
    fn output_shapes() {
        let cfg = small();
        let params = init_network(&cfg).unwrap();
        let scene = scene::gen_shapes_scene(&SceneGenConfig { height: 32, width: 32, ..Default::default() }, 1).unwrap();
        let fwd = forward(&cfg, &params, &scene.image).unwrap();
        assert_eq!(fwd.outputs.instance_probs.tensor().dims(), &[5, 8, 8]);
        assert_eq!(fwd.outputs.semantic_probs.dims(), &[3, 8, 8]);
        assert_eq!(fwd.outputs.center_pred.dims(), &[2, 8, 8]);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = small();
        assert_eq!(init_network(&cfg).unwrap(), init_network(&cfg).unwrap());
        let other = MiniFpnConfig { seed: 1, ..small() };
        assert_ne!(init_network(&cfg).unwrap(), init_network(&other).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(MiniFpnConfig { height: 30, ..small() }.validate().is_err());
        assert!(MiniFpnConfig { channels: 2, ..small() }.validate().is_err());
        assert!(MiniFpnConfig { depth: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn image_shape_mismatch() {
        let cfg = small();
        let params = init_network(&cfg).unwrap();
        let img = crate::grid::Grid::filled(16, 16, [0.0; 3]);
        assert!(matches!(forward(&cfg, &params, &img), Err(Error::Shape(_))));
        let img = crate::grid::Grid::filled(32, 32, [f64::NAN; 3]);
        assert!(matches!(forward(&cfg, &params, &img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sgd_arithmetic() {
        let mut params = ParameterStore::new(alloc::vec![("p".into(), Tensor::scalar(1.0))]);
        let grads = Gradients { entries: alloc::vec![("p".into(), Tensor::scalar(0.5))] };
        let mut v = Velocity::zeros_like(&params);
        sgd_step(&mut params, &mut v, &grads, 0.0, 0.9).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 1.0);
        let mut v = Velocity::zeros_like(&params);
        sgd_step(&mut params, &mut v, &grads, 0.1, 0.0).unwrap();
        assert_eq!(params.get("p").unwrap().item(), 0.95);
    }

    #[test]
    fn sgd_two_step_momentum() {
        // v1 = g1, p1 = p0 - lr g1; v2 = μ g1 + g2, p2 = p1 - lr v2
        let (p0, g1, g2, lr, mu) = (1.0, 0.5, -0.25, 0.1, 0.9);
        let mut params = ParameterStore::new(alloc::vec![("p".into(), Tensor::scalar(p0))]);
        let mut v = Velocity::zeros_like(&params);
        for g in [g1, g2] {
            let grads = Gradients { entries: alloc::vec![("p".into(), Tensor::scalar(g))] };
            sgd_step(&mut params, &mut v, &grads, lr, mu).unwrap();
        }
        let expected = p0 - lr * g1 - lr * (mu * g1 + g2);
        assert!((params.get("p").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut params = ParameterStore::new(alloc::vec![("p".into(), Tensor::scalar(1.0))]);
        let grads = Gradients { entries: alloc::vec![("p".into(), Tensor::zeros(&[2]))] };
        let mut v = Velocity::zeros_like(&params);
        assert!(sgd_step(&mut params, &mut v, &grads, 0.1, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_decays_per_period() {
        let s = LrSchedule { initial: 0.01, decay_factor: 0.1, decay_every_epochs: 20 };
        assert_eq!(s.at_epoch(0), 0.01);
        assert_eq!(s.at_epoch(19), 0.01);
        assert!((s.at_epoch(20) - 0.001).abs() < 1e-15);
        assert!((s.at_epoch(45) - 0.0001).abs() < 1e-15);
    }
}
