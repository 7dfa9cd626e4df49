//! The training objective.
//!
//! Instance outputs are per-pixel distributions over `n + 1` indices with
//! index 0 reserved for background. Pixels of the same instance are pulled
//! together by a symmetric KL cost, pixels of different instances pushed
//! apart by a hinge on each directed KL. In every directed term
//! `KL(P* ‖ Q)` the first argument is held constant, so gradients reach
//! only `Q`. Background is supervised per pixel with a binary
//! cross-entropy against the summed non-background mass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::sampling::PairSet;
use crate::scene::{CenterOffsetMap, InstanceLabelMap, Scene, SemanticLabelMap};
use crate::tensor::Tensor;

pub const DEFAULT_LOG_CLAMP: f64 = 1e-12;

/// Per-pixel distributions stored as a `[n + 1, h, w]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Wraps a tensor, checking non-negativity and unit channel sums.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.dims().len() != 3 || t.dims()[0] < 2 {
            bail!(Shape, "probability map needs [channels>=2, h, w], got {:?}", t.dims());
        }
        let (k, h, w) = t.chw();
        let d = t.data();
        for p in 0..h * w {
            let mut s = 0.0;
            for c in 0..k {
                let v = d[c * h * w + p];
                if !(v >= 0.0) {
                    bail!(Domain, "negative or NaN probability at pixel {}", p);
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-6 {
                bail!(Domain, "channel sum {} at pixel {} is not 1", s, p);
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }

    /// The distribution at one grid cell.
    pub fn at(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.0.at3(c, row, col)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub instance: f64,
    pub semantic: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { instance: 1.0, semantic: 0.1, center: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LossConfig {
    /// Hinge margin for different-instance pairs.
    pub sigma: f64,
    /// Number of instance indices (background excluded).
    pub n: usize,
    pub weights: LossWeights,
    pub log_clamp: f64,
    /// Ratio between input and output resolution.
    pub stride: usize,
    /// Index reuse across distant instances; requires `n >= 4`.
    pub coloring: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sigma: 2.0, n: 8, weights: LossWeights::default(), log_clamp: DEFAULT_LOG_CLAMP, stride: 4, coloring: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            bail!(Config, "sigma must be positive, got {}", self.sigma);
        }
        let w = self.weights;
        if !(w.instance >= 0.0 && w.semantic >= 0.0 && w.center >= 0.0) {
            bail!(Config, "loss weights must be non-negative");
        }
        if self.coloring && self.n < 4 {
            bail!(Config, "coloring mode needs n >= 4 instance indices (four colours suffice for planar adjacency), got n = {}", self.n);
        }
        if self.n < 1 {
            bail!(Config, "n must be at least 1");
        }
        if !(self.log_clamp > 0.0) {
            bail!(Config, "log_clamp must be positive");
        }
        if self.stride < 1 {
            bail!(Config, "stride must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub l_pair: f64,
    pub l_bg: f64,
    pub l_ins: f64,
    pub l_sem: f64,
    pub l_ctr: f64,
    pub l_total: f64,
    pub pair_count: usize,
}

impl LossBreakdown {
    /// Assembles the weighted total from its components.
    pub fn combine(l_pair: f64, l_bg: f64, l_sem: f64, l_ctr: f64, pair_count: usize, w: &LossWeights) -> Self {
        let l_ins = l_pair + l_bg;
        Self { l_pair, l_bg, l_ins, l_sem, l_ctr, l_total: w.instance * l_ins + w.semantic * l_sem + w.center * l_ctr, pair_count }
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        bail!(Shape, "distributions of length {} and {}", p.len(), q.len());
    }
    Ok(())
}

/// `Σ p_k ln((p_k + δ) / (q_k + δ))`.
pub fn kl_div(p: &[f64], q: &[f64], clamp: f64) -> Result<f64> {
    check_len(p, q)?;
    Ok(p.iter().zip(q).map(|(&a, &b)| a * libm::log((a + clamp) / (b + clamp))).sum())
}

/// Same-instance cost: both directed KLs.
pub fn loss_same(pi: &[f64], pj: &[f64], clamp: f64) -> Result<f64> {
    Ok(kl_div(pi, pj, clamp)? + kl_div(pj, pi, clamp)?)
}

#[inline]
fn hinge(e: f64, sigma: f64) -> f64 {
    (sigma - e).max(0.0)
}

/// Different-instance cost: a hinge on each directed KL.
pub fn loss_diff(pi: &[f64], pj: &[f64], sigma: f64, clamp: f64) -> Result<f64> {
    Ok(hinge(kl_div(pi, pj, clamp)?, sigma) + hinge(kl_div(pj, pi, clamp)?, sigma))
}

/// Contrastive pair cost selected by the relation `r ∈ {0, 1}`.
pub fn pair_loss(pi: &[f64], pj: &[f64], relation: u8, sigma: f64, clamp: f64) -> Result<f64> {
    match relation {
        1 => loss_same(pi, pj, clamp),
        0 => loss_diff(pi, pj, sigma, clamp),
        r => bail!(Domain, "relation must be 0 or 1, got {}", r),
    }
}

fn check_map(pm: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if pm.dims().len() != 3 {
        bail!(Shape, "{} must be [c, h, w], got {:?}", what, pm.dims());
    }
    Ok(pm.chw())
}

/// Mean pair cost over `ps` together with its gradient w.r.t. the
/// probability tensor, honouring the constant-first-argument rule.
///
/// Sampled pixel coordinates are divided by `cfg.stride` to index `pm`.
pub fn averaged_pair_loss_with_grad(pm: &Tensor, ps: &PairSet, cfg: &LossConfig) -> Result<(f64, Tensor)> {
    pair_loss_kernel(pm, pm, ps, cfg).map(|(v, g, _)| (v, g))
}

/// The pair objective with its constant arguments read from `frozen` and
/// its live arguments from `live`. With `frozen == live` this is the
/// training loss; its derivative w.r.t. `live` is exactly the gradient the
/// tape propagates, which makes it the finite-difference reference.
pub fn averaged_pair_loss_frozen(frozen: &Tensor, live: &Tensor, ps: &PairSet, cfg: &LossConfig) -> Result<f64> {
    pair_loss_kernel(frozen, live, ps, cfg).map(|(v, _, _)| v)
}

/// Shared kernel; the third output hashes which hinges were active.
pub(crate) fn pair_loss_kernel(frozen: &Tensor, live: &Tensor, ps: &PairSet, cfg: &LossConfig) -> Result<(f64, Tensor, u64)> {
    let (k, h, w) = check_map(live, "probability map")?;
    if !frozen.same_shape(live) {
        bail!(Shape, "frozen map {:?} vs live map {:?}", frozen.dims(), live.dims());
    }
    if ps.pairs.is_empty() {
        bail!(Degenerate, "empty pair set");
    }
    let hw = h * w;
    let clamp = cfg.log_clamp;
    let sigma = cfg.sigma;
    let cells: Vec<usize> = ps
        .pixels
        .iter()
        .map(|p| {
            let (r, c) = (p.row as usize / cfg.stride, p.col as usize / cfg.stride);
            if r >= h || c >= w {
                bail!(Shape, "sampled pixel ({}, {}) falls outside the {}x{} output grid", p.row, p.col, h, w);
            }
            Ok(r * w + c)
        })
        .collect::<Result<_>>()?;
    let n = cells.len();
    let (fd, ld) = (frozen.data(), live.data());
    // Starred (constant) side: p and Σ p ln p; live side: q and ln q.
    let mut star = vec![0.0; n * k];
    let mut neg_ent = vec![0.0; n];
    let mut live_p = vec![0.0; n * k];
    let mut live_log = vec![0.0; n * k];
    for (s, &cell) in cells.iter().enumerate() {
        let mut e = 0.0;
        for ch in 0..k {
            let p = fd[ch * hw + cell];
            let q = ld[ch * hw + cell];
            star[s * k + ch] = p;
            e += p * libm::log(p + clamp);
            live_p[s * k + ch] = q;
            live_log[s * k + ch] = libm::log(q + clamp);
        }
        neg_ent[s] = e;
    }
    // acc[b] collects Σ coeff · p_a over pairs whose KL(P_a* ‖ Q_b) is live.
    let mut acc = vec![0.0; n * k];
    let mut total = 0.0;
    let mut branch = 0xcbf2_9ce4_8422_2325u64;
    for pair in &ps.pairs {
        let (a, b) = (pair.a as usize, pair.b as usize);
        if a >= n || b >= n {
            bail!(Shape, "pair ({}, {}) indexes past {} pixels", a, b, n);
        }
        let pa = &star[a * k..a * k + k];
        let pb = &star[b * k..b * k + k];
        let la = &live_log[a * k..a * k + k];
        let lb = &live_log[b * k..b * k + k];
        let cross_ab: f64 = pa.iter().zip(lb).map(|(x, y)| x * y).sum();
        let cross_ba: f64 = pb.iter().zip(la).map(|(x, y)| x * y).sum();
        let kl_ab = neg_ent[a] - cross_ab;
        let kl_ba = neg_ent[b] - cross_ba;
        let (value, c_ab, c_ba) = match pair.relation {
            1 => (kl_ab + kl_ba, 1.0, 1.0),
            0 => {
                let c_ab = if sigma - kl_ab > 0.0 { -1.0 } else { 0.0 };
                let c_ba = if sigma - kl_ba > 0.0 { -1.0 } else { 0.0 };
                branch = (branch ^ (u64::from(c_ab != 0.0) | u64::from(c_ba != 0.0) << 1)).wrapping_mul(0x0100_0000_01b3);
                (hinge(kl_ab, sigma) + hinge(kl_ba, sigma), c_ab, c_ba)
            }
            r => bail!(Domain, "relation must be 0 or 1, got {}", r),
        };
        total += value;
        if c_ab != 0.0 {
            for (s, &v) in acc[b * k..b * k + k].iter_mut().zip(pa) {
                *s += c_ab * v;
            }
        }
        if c_ba != 0.0 {
            for (s, &v) in acc[a * k..a * k + k].iter_mut().zip(pb) {
                *s += c_ba * v;
            }
        }
    }
    let scale = 1.0 / ps.pairs.len() as f64;
    let mut grad = Tensor::zeros(&[k, h, w]);
    let g = grad.data_mut();
    for (s, &cell) in cells.iter().enumerate() {
        for ch in 0..k {
            let a = acc[s * k + ch];
            if a != 0.0 {
                // d KL(P* ‖ Q) / d q_k = -p_k / (q_k + δ)
                g[ch * hw + cell] -= scale * a / (live_p[s * k + ch] + clamp);
            }
        }
    }
    Ok((total * scale, grad, branch))
}

/// Mean pair cost over `ps` (value only).
pub fn averaged_pair_loss(pm: &ProbMap, ps: &PairSet, cfg: &LossConfig) -> Result<f64> {
    averaged_pair_loss_with_grad(pm.tensor(), ps, cfg).map(|(v, _)| v)
}

/// Unary background cross-entropy with its gradient. The foreground term
/// uses the log of the summed non-background channels.
pub fn background_loss_with_grad(pm: &Tensor, instances: &InstanceLabelMap, clamp: f64) -> Result<(f64, Tensor)> {
    let (k, h, w) = check_map(pm, "probability map")?;
    if instances.shape() != (h, w) {
        bail!(Shape, "label map {:?} vs output grid {:?}", instances.shape(), (h, w));
    }
    let hw = h * w;
    let n = hw as f64;
    let d = pm.data();
    let mut grad = Tensor::zeros(&[k, h, w]);
    let g = grad.data_mut();
    let mut total = 0.0;
    for (p, &id) in instances.as_slice().iter().enumerate() {
        if id == 0 {
            let t0 = d[p] + clamp;
            total -= libm::log(t0);
            g[p] = -1.0 / (n * t0);
        } else {
            let s: f64 = (1..k).map(|c| d[c * hw + p]).sum::<f64>() + clamp;
            total -= libm::log(s);
            for c in 1..k {
                g[c * hw + p] = -1.0 / (n * s);
            }
        }
    }
    Ok((total / n, grad))
}

pub fn background_loss(pm: &ProbMap, instances: &InstanceLabelMap, clamp: f64) -> Result<f64> {
    background_loss_with_grad(pm.tensor(), instances, clamp).map(|(v, _)| v)
}

/// Mean `-ln(p[gt] + δ)` over all pixels, with gradient.
pub fn semantic_ce_loss_with_grad(probs: &Tensor, gt: &SemanticLabelMap, clamp: f64) -> Result<(f64, Tensor)> {
    let (k, h, w) = check_map(probs, "semantic map")?;
    if gt.shape() != (h, w) {
        bail!(Shape, "semantic labels {:?} vs output grid {:?}", gt.shape(), (h, w));
    }
    let hw = h * w;
    let n = hw as f64;
    let d = probs.data();
    let mut grad = Tensor::zeros(&[k, h, w]);
    let g = grad.data_mut();
    let mut total = 0.0;
    for (p, &cls) in gt.as_slice().iter().enumerate() {
        let cls = cls as usize;
        if cls >= k {
            bail!(Domain, "class {} out of range for {} channels", cls, k);
        }
        let v = d[cls * hw + p] + clamp;
        total -= libm::log(v);
        g[cls * hw + p] = -1.0 / (n * v);
    }
    Ok((total / n, grad))
}

pub fn semantic_ce_loss(probs: &Tensor, gt: &SemanticLabelMap, clamp: f64) -> Result<f64> {
    semantic_ce_loss_with_grad(probs, gt, clamp).map(|(v, _)| v)
}

#[inline]
fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() < 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

/// Smooth-L1 over foreground pixels and both offset components.
/// `pred` is `[2, h, w]` with channel 0 = dx, 1 = dy.
pub fn center_smooth_l1_loss_with_grad(pred: &Tensor, gt: &CenterOffsetMap, instances: &InstanceLabelMap) -> Result<(f64, Tensor)> {
    let (k, h, w) = check_map(pred, "center prediction")?;
    if k != 2 || gt.shape() != (h, w) || instances.shape() != (h, w) {
        bail!(Shape, "center prediction {:?} vs targets {:?}", pred.dims(), gt.shape());
    }
    let hw = h * w;
    let fg = instances.as_slice().iter().filter(|&&id| id != 0).count();
    if fg == 0 {
        bail!(Degenerate, "no foreground pixels for center regression");
    }
    let norm = 2.0 * fg as f64;
    let d = pred.data();
    let mut grad = Tensor::zeros(&[2, h, w]);
    let g = grad.data_mut();
    let mut total = 0.0;
    for (p, (&id, target)) in instances.as_slice().iter().zip(gt.as_slice()).enumerate() {
        if id == 0 {
            continue;
        }
        for c in 0..2 {
            let (v, dv) = smooth_l1(d[c * hw + p] - target[c]);
            total += v;
            g[c * hw + p] = dv / norm;
        }
    }
    Ok((total / norm, grad))
}

pub fn center_smooth_l1_loss(pred: &Tensor, gt: &CenterOffsetMap, instances: &InstanceLabelMap) -> Result<f64> {
    center_smooth_l1_loss_with_grad(pred, gt, instances).map(|(v, _)| v)
}

/// Ground truth brought down to the output grid: label maps are sampled
/// nearest-neighbour, centre offsets are converted to grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub instances: InstanceLabelMap,
    pub semantics: SemanticLabelMap,
    pub centers: CenterOffsetMap,
}

impl LossTargets {
    pub fn from_scene(scene: &Scene, stride: usize) -> Self {
        let s = stride as f64;
        Self {
            instances: scene.instances.downsample_nearest(stride),
            semantics: scene.semantics.downsample_nearest(stride),
            centers: scene.centers.downsample_nearest(stride).map(|o| [o[0] / s, o[1] / s]),
        }
    }
}

/// Values of every objective component for given network outputs.
pub fn total_loss(
    instance_probs: &ProbMap,
    semantic_probs: &Tensor,
    center_pred: &Tensor,
    targets: &LossTargets,
    ps: &PairSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let l_pair = averaged_pair_loss(instance_probs, ps, cfg)?;
    let l_bg = background_loss(instance_probs, &targets.instances, cfg.log_clamp)?;
    let l_sem = semantic_ce_loss(semantic_probs, &targets.semantics, cfg.log_clamp)?;
    let l_ctr = if cfg.weights.center == 0.0 {
        0.0
    } else {
        center_smooth_l1_loss(center_pred, &targets.centers, &targets.instances)?
    };
    Ok(LossBreakdown::combine(l_pair, l_bg, l_sem, l_ctr, ps.len(), &cfg.weights))
}
