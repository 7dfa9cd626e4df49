//! From network outputs to instance predictions.
//!
//! The instance head is turned into an ID map by a per-pixel argmax. Since
//! indices may be reused by distant objects, each maximal 8-connected
//! region of one ID is a candidate instance. Fragments whose predicted
//! centres nearly coincide are merged, each result takes the dominant
//! semantic class inside it, and the confidence grows with size up to a
//! threshold.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::losses::ProbMap;
use crate::mask::Mask;
use crate::network::{NetworkOutputs, OUTPUT_STRIDE};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Per-pixel instance index, 0 = background.
pub type IdMap = Grid<u16>;

/// A connected region of a single predicted index.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub mask: Mask,
    pub color_id: u16,
    /// `[x, y]` mean of (pixel + predicted offset), in grid units.
    pub mean_center: [f64; 2],
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    /// Full-resolution mask.
    pub mask: Mask,
    pub category: u8,
    pub confidence: f64,
}

/// Reference full-resolution image area for scaling the size threshold.
pub const REFERENCE_AREA: f64 = 2_097_152.0;
/// Reference full-resolution width for scaling the merge threshold.
pub const REFERENCE_WIDTH: f64 = 2048.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PostprocessConfig {
    /// Centre distance (full-resolution pixels) below which fragments merge.
    pub merge_threshold: f64,
    /// Size (full-resolution pixels) at which confidence saturates.
    pub size_threshold: f64,
    pub allow_cross_color_merge: bool,
    /// Ratio between the output grid and the full-resolution image.
    pub stride: usize,
    /// Lane groups smaller than this (full-resolution pixels) are discarded.
    pub min_lane_pixels: usize,
}

impl PostprocessConfig {
    /// Thresholds scaled from a 2048×1024 reference to an `h`×`w` image.
    pub fn for_image(height: usize, width: usize) -> Self {
        Self {
            merge_threshold: 20.0 * width as f64 / REFERENCE_WIDTH,
            size_threshold: 1500.0 * (height * width) as f64 / REFERENCE_AREA,
            allow_cross_color_merge: true,
            stride: OUTPUT_STRIDE,
            min_lane_pixels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.merge_threshold > 0.0) || !self.merge_threshold.is_finite() {
            bail!(Config, "merge_threshold must be positive, got {}", self.merge_threshold);
        }
        if !(self.size_threshold > 0.0) || !self.size_threshold.is_finite() {
            bail!(Config, "size_threshold must be positive, got {}", self.size_threshold);
        }
        if self.stride == 0 {
            bail!(Config, "stride must be at least 1");
        }
        Ok(())
    }
}

fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn channel_argmax(t: &Tensor) -> Grid<u16> {
    let (k, h, w) = t.chw();
    let d = t.data();
    let hw = h * w;
    let data = (0..hw).map(|p| argmax_lowest((0..k).map(|c| d[c * hw + p])) as u16).collect();
    Grid::from_vec(h, w, data).expect("h*w cells")
}

/// Per-pixel argmax over the index channels; ties go to the lowest index.
pub fn argmax_labeling(pm: &ProbMap) -> IdMap {
    channel_argmax(pm.tensor())
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn unite(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Maximal 8-connected regions of equal non-zero ID, ordered by their
/// first pixel in row-major order. `mean_center` is the plain centroid;
/// see [`attach_centers`].
pub fn connected_components(ids: &IdMap) -> Vec<Segment> {
    let (h, w) = ids.shape();
    let v = ids.as_slice();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if v[i] == 0 {
                continue;
            }
            // Already-visited neighbours: W, NW, N, NE.
            let mut link = |j: usize| {
                if v[j] == v[i] {
                    unite(&mut parent, i, j);
                }
            };
            if c > 0 {
                link(i - 1);
            }
            if r > 0 {
                if c > 0 {
                    link(i - w - 1);
                }
                link(i - w);
                if c + 1 < w {
                    link(i - w + 1);
                }
            }
        }
    }
    let mut slot = vec![usize::MAX; h * w];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..h * w {
        if v[i] == 0 {
            continue;
        }
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = members.len();
            members.push(Vec::new());
        }
        members[slot[root]].push(i);
    }
    members
        .into_iter()
        .map(|idx| {
            let n = idx.len() as f64;
            let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| (x + (i % w) as f64, y + (i / w) as f64));
            Segment {
                color_id: v[idx[0]],
                mean_center: [sx / n, sy / n],
                size: idx.len(),
                mask: Mask::from_indices(h, w, idx).expect("indices come from the grid"),
            }
        })
        .collect()
}

/// Sets each segment's `mean_center` to the mean of pixel + predicted
/// offset. `center_pred` is `[2, h, w]` holding `[dx, dy]`.
pub fn attach_centers(segs: &mut [Segment], center_pred: &Tensor) -> Result<()> {
    for s in segs.iter_mut() {
        if center_pred.dims() != [2, s.mask.height(), s.mask.width()] {
            bail!(Shape, "centre map {:?} vs segment grid {:?}", center_pred.dims(), s.mask.shape());
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for (r, c) in s.mask.pixels() {
            sx += c as f64 + center_pred.at3(0, r, c);
            sy += r as f64 + center_pred.at3(1, r, c);
        }
        let n = s.size as f64;
        s.mean_center = [sx / n, sy / n];
    }
    Ok(())
}

/// Merges every group of segments connected by "centres within
/// `threshold`" (transitive closure). The merged centre is the size
/// weighted mean; the colour is that of the largest member.
pub fn merge_by_center(segs: &[Segment], threshold: f64, allow_cross_color: bool) -> Result<Vec<Segment>> {
    if !(threshold > 0.0) {
        bail!(Config, "merge threshold must be positive, got {}", threshold);
    }
    let m = segs.len();
    let mut parent: Vec<usize> = (0..m).collect();
    for a in 0..m {
        for b in a + 1..m {
            if !allow_cross_color && segs[a].color_id != segs[b].color_id {
                continue;
            }
            let (ca, cb) = (segs[a].mean_center, segs[b].mean_center);
            if libm::hypot(ca[0] - cb[0], ca[1] - cb[1]) <= threshold {
                unite(&mut parent, a, b);
            }
        }
    }
    let mut out: Vec<Segment> = Vec::new();
    let mut slot = vec![usize::MAX; m];
    let mut largest = vec![0usize; m];
    for i in 0..m {
        let root = find(&mut parent, i);
        let s = &segs[i];
        if slot[root] == usize::MAX {
            slot[root] = out.len();
            largest[out.len()] = s.size;
            out.push(s.clone());
            continue;
        }
        let k = slot[root];
        let t = &mut out[k];
        let total = (t.size + s.size) as f64;
        for d in 0..2 {
            t.mean_center[d] = (t.mean_center[d] * t.size as f64 + s.mean_center[d] * s.size as f64) / total;
        }
        t.mask = t.mask.union(&s.mask)?;
        if s.size > largest[k] {
            largest[k] = s.size;
            t.color_id = s.color_id;
        }
        t.size += s.size;
    }
    // Order by first pixel so the result does not depend on input order.
    out.sort_by_key(|s| s.mask.runs()[0].0);
    Ok(out)
}

/// Dominant class `1..=C` by mean probability over the segment, and the
/// segment clipped to pixels whose semantic argmax is that class. `None`
/// when the clipped mask is empty.
pub fn assign_category(seg: &Segment, semantic_probs: &Tensor) -> Result<Option<(u8, Mask)>> {
    let (k, h, w) = semantic_probs.chw();
    if semantic_probs.dims().len() != 3 || k < 2 || (h, w) != seg.mask.shape() {
        bail!(Shape, "semantic map {:?} vs segment grid {:?}", semantic_probs.dims(), seg.mask.shape());
    }
    if seg.mask.is_empty() {
        return Ok(None);
    }
    let mut mean = vec![0.0; k];
    for (r, c) in seg.mask.pixels() {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += semantic_probs.at3(ch, r, c);
        }
    }
    let category = 1 + argmax_lowest(mean[1..].iter().copied());
    let clipped =
        seg.mask.filter(|r, c| argmax_lowest((0..k).map(|ch| semantic_probs.at3(ch, r, c))) == category);
    Ok((!clipped.is_empty()).then_some((category as u8, clipped)))
}

/// `min(1, size / threshold)`.
pub fn score_confidence(size: usize, size_threshold: f64) -> f64 {
    let s = size as f64;
    if s >= size_threshold {
        1.0
    } else {
        s / size_threshold
    }
}

fn check_outputs(outputs: &NetworkOutputs) -> Result<(usize, usize)> {
    let (h, w) = (outputs.instance_probs.height(), outputs.instance_probs.width());
    for (name, t) in [("semantic", &outputs.semantic_probs), ("centre", &outputs.center_pred)] {
        if t.dims().len() != 3 || t.dims()[1..] != [h, w] {
            bail!(Shape, "{} map {:?} does not match instance grid {}x{}", name, t.dims(), h, w);
        }
    }
    if outputs.center_pred.dims()[0] != 2 {
        bail!(Shape, "centre map needs 2 channels, got {}", outputs.center_pred.dims()[0]);
    }
    Ok((h, w))
}

/// Argmax, components, centre merge, categorisation and scoring; masks
/// are returned at full resolution.
pub fn predict_instances(outputs: &NetworkOutputs, cfg: &PostprocessConfig) -> Result<Vec<InstancePrediction>> {
    cfg.validate()?;
    check_outputs(outputs)?;
    let s = cfg.stride;
    let ids = argmax_labeling(&outputs.instance_probs);
    let mut segs = connected_components(&ids);
    attach_centers(&mut segs, &outputs.center_pred)?;
    let merged = merge_by_center(&segs, cfg.merge_threshold / s as f64, cfg.allow_cross_color_merge)?;
    let mut preds = Vec::new();
    for seg in &merged {
        if let Some((category, clipped)) = assign_category(seg, &outputs.semantic_probs)? {
            let confidence = score_confidence(clipped.area() * s * s, cfg.size_threshold);
            preds.push(InstancePrediction { mask: clipped.upsample_nearest(s), category, confidence });
        }
    }
    Ok(preds)
}

/// Lane masks at full resolution: components of the ID map, merged by
/// predicted centre, with small groups dropped. No semantic clipping
/// (lane scenes have a single class).
pub fn predict_lanes(outputs: &NetworkOutputs, cfg: &PostprocessConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    check_outputs(outputs)?;
    let s = cfg.stride;
    let mut segs = connected_components(&argmax_labeling(&outputs.instance_probs));
    attach_centers(&mut segs, &outputs.center_pred)?;
    Ok(merge_by_center(&segs, cfg.merge_threshold / s as f64, cfg.allow_cross_color_merge)?
        .into_iter()
        .filter(|g| g.size * s * s >= cfg.min_lane_pixels)
        .map(|g| g.mask.upsample_nearest(s))
        .collect())
}

fn one_hot(labels: &Grid<u16>, channels: usize) -> Result<Tensor> {
    let (h, w) = labels.shape();
    let mut t = Tensor::zeros(&[channels, h, w]);
    for (i, &v) in labels.as_slice().iter().enumerate() {
        if v as usize >= channels {
            bail!(Domain, "label {} needs more than {} channels", v, channels);
        }
        t.data_mut()[v as usize * h * w + i] = 1.0;
    }
    Ok(t)
}

/// Outputs that reproduce a scene's ground truth exactly at full
/// resolution (use with `stride = 1`). Every instance keeps its own
/// index, so `n` equals the instance count (at least 1).
pub fn ground_truth_outputs(scene: &Scene, classes: usize) -> Result<NetworkOutputs> {
    let m = scene.instance_count().max(1);
    let instance_probs = ProbMap::new(one_hot(&scene.instances, m + 1)?)?;
    let semantic_probs = one_hot(&scene.semantics.map(|&c| u16::from(c)), classes + 1)?;
    let (h, w) = scene.instances.shape();
    let mut center_pred = Tensor::zeros(&[2, h, w]);
    for (r, c, off) in scene.centers.indexed() {
        center_pred.data_mut()[r * w + c] = off[0];
        center_pred.data_mut()[h * w + r * w + c] = off[1];
    }
    Ok(NetworkOutputs { instance_probs, semantic_probs, center_pred })
}
