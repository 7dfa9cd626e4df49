//! Scoring: mask AP over IoU thresholds, the lane point-match metric, and
//! the region adjacency graph with an exact chromatic-number solver.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::mask::Mask;
use crate::postprocess::InstancePrediction;
use crate::scene::InstanceLabelMap;

/// `|a ∩ b| / |a ∪ b|`; two empty masks are a domain error.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        bail!(Domain, "IoU of two empty masks");
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub mask: Mask,
    pub category: u8,
}

impl GtInstance {
    /// One entry per instance ID, category from the semantic map.
    pub fn from_label_maps(instances: &InstanceLabelMap, semantics: &crate::scene::SemanticLabelMap) -> Vec<Self> {
        let m = instances.as_slice().iter().copied().max().unwrap_or(0);
        (1..=m)
            .filter_map(|id| {
                let mask = Mask::from_grid(instances, |&v| v == id);
                let (r, c) = mask.pixels().next()?;
                Some(GtInstance { category: *semantics.get(r, c), mask })
            })
            .collect()
    }
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub preds: Vec<InstancePrediction>,
    pub gts: Vec<GtInstance>,
}

/// Recall and precision after a confidence cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Area under the monotone (non-increasing) envelope of a PR curve given
/// in ranking order.
pub fn envelope_area(curve: &[PrPoint]) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (p, e) in curve.iter().zip(env) {
        area += (p.recall - prev) * e;
        prev = p.recall;
    }
    area
}

/// Ranked PR curve of one category at one IoU threshold, plus the GT count.
///
/// Predictions are ranked by confidence (ties: larger mask, then input
/// order across images). Each one is matched to the still-unmatched GT of
/// the same category and image with the highest IoU, if that IoU reaches
/// `iou_thr`.
pub fn pr_curve(images: &[EvalImage], category: u8, iou_thr: f64) -> Result<(Vec<PrPoint>, usize)> {
    let mut ranked: Vec<(usize, &InstancePrediction)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.preds.iter().filter(|p| p.category == category).map(move |p| (i, p)))
        .collect();
    // Stable sort keeps input order among exact ties.
    ranked.sort_by(|a, b| {
        b.1.confidence.total_cmp(&a.1.confidence).then_with(|| b.1.mask.area().cmp(&a.1.mask.area()))
    });
    let gts: Vec<Vec<&GtInstance>> =
        images.iter().map(|im| im.gts.iter().filter(|g| g.category == category).collect()).collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, (img, pred)) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*img].iter().enumerate() {
            if used[*img][j] {
                continue;
            }
            let iou = mask_iou(&pred.mask, &g.mask)?;
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[*img][j] = true;
            tp += 1;
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        curve.push(PrPoint { recall, precision: tp as f64 / (k + 1) as f64 });
    }
    Ok((curve, n_gt))
}

/// Categories present among the predictions or the ground truth.
pub fn categories(images: &[EvalImage]) -> Vec<u8> {
    let mut cats: Vec<u8> =
        images.iter().flat_map(|im| im.preds.iter().map(|p| p.category).chain(im.gts.iter().map(|g| g.category))).collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

/// Per-category AP at one IoU threshold. A category with predictions but
/// no ground truth scores 0.
pub fn average_precision(images: &[EvalImage], iou_thr: f64) -> Result<BTreeMap<u8, f64>> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        bail!(Domain, "IoU threshold must lie in (0, 1), got {}", iou_thr);
    }
    let mut out = BTreeMap::new();
    for cat in categories(images) {
        let (curve, n_gt) = pr_curve(images, cat, iou_thr)?;
        out.insert(cat, if n_gt == 0 { 0.0 } else { envelope_area(&curve) });
    }
    Ok(out)
}

pub const AP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ApSummary {
    /// Mean over thresholds and categories; `None` when nothing was present.
    pub ap_mean: Option<f64>,
    /// Per category, averaged over thresholds.
    pub ap_per_category: BTreeMap<u8, f64>,
    /// Category mean at IoU 0.5.
    pub ap50: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// AP averaged over the IoU thresholds 0.50, 0.55, …, 0.95.
pub fn cityscapes_ap(images: &[EvalImage]) -> Result<ApSummary> {
    let per_thr: Vec<BTreeMap<u8, f64>> =
        AP_THRESHOLDS.iter().map(|&t| average_precision(images, t)).collect::<Result<_>>()?;
    let ap_per_category: BTreeMap<u8, f64> = categories(images)
        .into_iter()
        .map(|c| (c, per_thr.iter().map(|m| m[&c]).sum::<f64>() / AP_THRESHOLDS.len() as f64))
        .collect();
    Ok(ApSummary {
        ap_mean: mean(ap_per_category.values().copied()),
        ap50: mean(per_thr[0].values().copied()),
        ap_per_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LaneScoreConfig {
    /// Vertical distance between sampling rows; the first row is `spacing / 2`.
    pub spacing: usize,
    /// A point matches when the horizontal distance is strictly below this.
    pub match_dist: f64,
    /// A paired prediction matching fewer than this share of its GT points
    /// counts as a false positive.
    pub min_match_rate: f64,
    /// Scale accuracy down when there are more than `N + 2` predictions.
    pub penalize_extra: bool,
}

impl Default for LaneScoreConfig {
    fn default() -> Self {
        Self { spacing: 10, match_dist: 20.0, min_match_rate: 0.85, penalize_extra: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LaneScore {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub matched_points: usize,
    pub gt_points: usize,
}

/// Mean column of `lane` on each sampling row (`None` where absent).
pub fn lane_points(lane: &Mask, spacing: usize) -> Vec<Option<f64>> {
    let h = lane.height();
    let rows: Vec<usize> = (spacing / 2..h).step_by(spacing.max(1)).collect();
    let mut sums = vec![(0.0, 0usize); h];
    for (r, c) in lane.pixels() {
        sums[r].0 += c as f64;
        sums[r].1 += 1;
    }
    rows.iter().map(|&r| (sums[r].1 > 0).then(|| sums[r].0 / sums[r].1 as f64)).collect()
}

fn matched_points(gt: &[Option<f64>], pred: &[Option<f64>], dist: f64) -> usize {
    gt.iter().zip(pred).filter(|(g, p)| matches!((g, p), (Some(a), Some(b)) if (a - b).abs() < dist)).count()
}

/// Maximum-weight assignment of rows to distinct columns (`rows <= cols`).
/// Returns the column chosen for each row.
fn max_assignment(weight: &[Vec<i64>], cols: usize) -> Vec<usize> {
    // Shortest augmenting path with potentials on the negated weights.
    let n = weight.len();
    let inf = i64::MAX / 4;
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; cols + 1]);
    let mut way = vec![0usize; cols + 1];
    let mut row_of = vec![0usize; cols + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut done = vec![false; cols + 1];
        loop {
            done[j0] = true;
            let i0 = row_of[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=cols {
                if !done[j] {
                    let cur = -weight[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if done[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=cols {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Lane accuracy: matched sampled points over GT points.
///
/// GT and predicted lanes are paired one-to-one so that the total number
/// of matched points is maximal; a pair with no matched point counts as
/// unpaired. Predictions are false positives when unpaired or below
/// `min_match_rate`; GT lanes are misses when unpaired.
pub fn lane_score(pred: &[Mask], gt: &[Mask], cfg: &LaneScoreConfig) -> Result<LaneScore> {
    if gt.is_empty() {
        bail!(Domain, "lane score needs at least one ground-truth lane");
    }
    if cfg.spacing == 0 || !(cfg.match_dist > 0.0) {
        bail!(Config, "lane spacing and match distance must be positive");
    }
    let shape = gt[0].shape();
    if let Some(m) = gt.iter().chain(pred).find(|m| m.shape() != shape) {
        bail!(Shape, "lane mask grid {:?} differs from {:?}", m.shape(), shape);
    }
    let gp: Vec<Vec<Option<f64>>> = gt.iter().map(|m| lane_points(m, cfg.spacing)).collect();
    let pp: Vec<Vec<Option<f64>>> = pred.iter().map(|m| lane_points(m, cfg.spacing)).collect();
    let gt_counts: Vec<usize> = gp.iter().map(|g| g.iter().flatten().count()).collect();
    let gt_points: usize = gt_counts.iter().sum();
    if gt_points == 0 {
        bail!(Domain, "ground-truth lanes cover no sampling row");
    }
    let score: Vec<Vec<usize>> =
        gp.iter().map(|g| pp.iter().map(|p| matched_points(g, p, cfg.match_dist)).collect()).collect();
    // (gt, pred, matched) for each pair with at least one matched point.
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    if !pred.is_empty() {
        if gt.len() <= pred.len() {
            let w: Vec<Vec<i64>> = score.iter().map(|r| r.iter().map(|&s| s as i64).collect()).collect();
            for (g, p) in max_assignment(&w, pred.len()).into_iter().enumerate() {
                pairs.push((g, p, score[g][p]));
            }
        } else {
            let w: Vec<Vec<i64>> = (0..pred.len()).map(|p| score.iter().map(|r| r[p] as i64).collect()).collect();
            for (p, g) in max_assignment(&w, gt.len()).into_iter().enumerate() {
                pairs.push((g, p, score[g][p]));
            }
        }
    }
    pairs.retain(|&(_, _, s)| s > 0);
    let matched: usize = pairs.iter().map(|t| t.2).sum();
    let good = pairs.iter().filter(|&&(g, _, s)| s as f64 >= cfg.min_match_rate * gt_counts[g] as f64).count();
    let n = gt.len();
    let mut accuracy = matched as f64 / gt_points as f64;
    if cfg.penalize_extra && pred.len() > n + 2 {
        let extra = (pred.len() - n - 2) as f64;
        accuracy *= (1.0 - extra / n as f64).max(0.0);
    }
    Ok(LaneScore {
        accuracy,
        fp_rate: if pred.is_empty() { 0.0 } else { (pred.len() - good) as f64 / pred.len() as f64 },
        fn_rate: (n - pairs.len()) as f64 / n as f64,
        matched_points: matched,
        gt_points,
    })
}

/// Pooled lane score over many images: points are summed before dividing,
/// lane rates are averaged per image.
pub fn lane_score_many(images: &[(Vec<Mask>, Vec<Mask>)], cfg: &LaneScoreConfig) -> Result<LaneScore> {
    if images.is_empty() {
        bail!(Domain, "no images to score");
    }
    let mut acc = LaneScore::default();
    let mut weighted = 0.0;
    for (pred, gt) in images {
        let s = lane_score(pred, gt, cfg)?;
        weighted += s.accuracy * s.gt_points as f64;
        acc.gt_points += s.gt_points;
        acc.matched_points += s.matched_points;
        acc.fp_rate += s.fp_rate;
        acc.fn_rate += s.fn_rate;
    }
    let k = images.len() as f64;
    Ok(LaneScore {
        accuracy: weighted / acc.gt_points as f64,
        fp_rate: acc.fp_rate / k,
        fn_rate: acc.fn_rate / k,
        ..acc
    })
}

/// Undirected simple graph on instance regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    /// Instance ID of each vertex.
    pub ids: Vec<u16>,
    adj: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Graph on vertices `0..n`; duplicate and self edges are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                bail!(Domain, "invalid edge ({}, {}) on {} vertices", a, b, n);
            }
            if adj[a].contains(&b) {
                bail!(Domain, "duplicate edge ({}, {})", a, b);
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        Ok(Self { ids: (1..=n as u16).collect(), adj })
    }

    pub fn vertex_count(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    /// Edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> =
            self.adj.iter().enumerate().flat_map(|(a, l)| l.iter().filter(move |&&b| a < b).map(move |&b| (a, b))).collect();
        e.sort_unstable();
        e
    }

    pub fn max_degree(&self) -> usize {
        self.adj.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Connects two instances when some pair of their pixels lies within
/// Euclidean distance `epsilon`. Vertices are the IDs present, ascending.
pub fn build_adjacency_graph(instances: &InstanceLabelMap, epsilon: f64) -> Result<AdjacencyGraph> {
    if !(epsilon >= 0.0) {
        bail!(Domain, "epsilon must be non-negative, got {}", epsilon);
    }
    let (h, w) = instances.shape();
    let mut by_id: BTreeMap<u16, Vec<(i64, i64)>> = BTreeMap::new();
    for (r, c, &id) in instances.indexed() {
        if id == 0 {
            continue;
        }
        // The closest pixel pair always lies on the region boundaries.
        let inside = |rr: usize, cc: usize| *instances.get(rr, cc) == id;
        let interior = r > 0 && c > 0 && r + 1 < h && c + 1 < w && inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1);
        let entry = by_id.entry(id).or_default();
        if !interior {
            entry.push((r as i64, c as i64));
        }
    }
    let ids: Vec<u16> = by_id.keys().copied().collect();
    let pts: Vec<&Vec<(i64, i64)>> = by_id.values().collect();
    let bbox: Vec<[i64; 4]> = pts
        .iter()
        .map(|p| {
            p.iter().fold([i64::MAX, i64::MAX, i64::MIN, i64::MIN], |b, &(r, c)| [b[0].min(r), b[1].min(c), b[2].max(r), b[3].max(c)])
        })
        .collect();
    let eps2 = epsilon * epsilon;
    let mut edges = Vec::new();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            let (x, y) = (bbox[a], bbox[b]);
            let dr = (y[0] - x[2]).max(x[0] - y[2]).max(0);
            let dc = (y[1] - x[3]).max(x[1] - y[3]).max(0);
            if ((dr * dr + dc * dc) as f64) > eps2 {
                continue;
            }
            let near = pts[a].iter().any(|&(r1, c1)| {
                pts[b].iter().any(|&(r2, c2)| (((r1 - r2).pow(2) + (c1 - c2).pow(2)) as f64) <= eps2)
            });
            if near {
                edges.push((a, b));
            }
        }
    }
    let mut g = AdjacencyGraph::from_edges(ids.len(), &edges)?;
    g.ids = ids;
    Ok(g)
}

pub const MAX_COLORING_VERTICES: usize = 16;

fn colorable(g: &AdjacencyGraph, order: &[usize], k: usize, colors: &mut [usize], pos: usize) -> bool {
    if pos == order.len() {
        return true;
    }
    let v = order[pos];
    // Symmetry breaking: a vertex may open at most one new colour.
    let used = order[..pos].iter().map(|&u| colors[u] + 1).max().unwrap_or(0);
    for c in 0..k.min(used + 1) {
        if g.neighbors(v).iter().all(|&u| colors[u] != c) {
            colors[v] = c;
            if colorable(g, order, k, colors, pos + 1) {
                return true;
            }
        }
    }
    colors[v] = usize::MAX;
    false
}

/// Exact chromatic number by exhaustive search, or `None` if it exceeds
/// `k_max`. Limited to [`MAX_COLORING_VERTICES`] vertices.
pub fn chromatic_number_bruteforce(g: &AdjacencyGraph, k_max: usize) -> Result<Option<usize>> {
    let n = g.vertex_count();
    if n > MAX_COLORING_VERTICES {
        bail!(Domain, "{} vertices exceed the exhaustive search bound of {}", n, MAX_COLORING_VERTICES);
    }
    if n == 0 {
        return Ok(Some(0));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&v| core::cmp::Reverse(g.neighbors(v).len()));
    for k in 1..=k_max {
        let mut colors = vec![usize::MAX; n];
        if colorable(g, &order, k, &mut colors, 0) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}
