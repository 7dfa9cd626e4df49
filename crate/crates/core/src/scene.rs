//! Deterministic synthetic scenes with full ground truth.
//!
//! Two families are produced: occluding solid shapes (boxes and discs, one
//! semantic class each) and lane-style polylines of fixed width (a single
//! class). Each instance is filled with its own random colour plus
//! per-pixel uniform noise; the background is a dark grey.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::rng::{self, Rng};

pub type Image = Grid<[f64; 3]>;
/// 0 = background, `1..=m` = instance IDs.
pub type InstanceLabelMap = Grid<u16>;
/// 0 = background, `1..=C` = category.
pub type SemanticLabelMap = Grid<u8>;
/// Per-pixel `[dx, dy]` from the pixel to its instance centroid.
pub type CenterOffsetMap = Grid<[f64; 2]>;

pub const BACKGROUND_LEVEL: f64 = 0.1;
pub const NOISE_AMPLITUDE: f64 = 0.05;
pub const MAX_LANES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShapeKind {
    Box,
    Disc,
}

impl ShapeKind {
    pub fn category(self) -> u8 {
        match self {
            ShapeKind::Box => 1,
            ShapeKind::Disc => 2,
        }
    }
}

/// Placement policy for shape scenes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Layout {
    /// Uniform placement anywhere in the image, later shapes on top.
    Random,
    /// One shape per randomly chosen cell of a `rows × cols` grid, kept
    /// `margin` pixels away from the cell border. Neighbouring instances
    /// never touch and only cells in a 3×3 neighbourhood can be close.
    Grid { rows: usize, cols: usize, margin: usize },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneGenConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub shape_kinds: Vec<ShapeKind>,
    pub min_size: usize,
    pub max_size: usize,
    pub layout: Layout,
    pub lane_width: usize,
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Minimum horizontal distance between neighbouring lane centre lines.
    pub lane_spacing: usize,
    pub min_visible_pixels: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 1,
            max_instances: 4,
            shape_kinds: vec![ShapeKind::Box, ShapeKind::Disc],
            min_size: 12,
            max_size: 28,
            layout: Layout::Random,
            lane_width: 10,
            min_lanes: 3,
            max_lanes: 5,
            lane_spacing: 22,
            min_visible_pixels: 8,
        }
    }
}

impl SceneGenConfig {
    pub fn validate_shapes(&self) -> Result<()> {
        self.validate_common()?;
        if self.max_instances < 1 {
            bail!(Config, "max_instances must be at least 1");
        }
        if self.min_instances > self.max_instances {
            bail!(Config, "min_instances {} exceeds max_instances {}", self.min_instances, self.max_instances);
        }
        if self.shape_kinds.is_empty() {
            bail!(Config, "shape_kinds is empty");
        }
        if self.min_size < 1 || self.min_size > self.max_size {
            bail!(Config, "size range [{}, {}] is empty", self.min_size, self.max_size);
        }
        if self.min_size > self.height.min(self.width) {
            bail!(Config, "shape min size {} exceeds image {}x{}", self.min_size, self.height, self.width);
        }
        if self.max_size > self.height.min(self.width) {
            bail!(Config, "shape max size {} exceeds image {}x{}", self.max_size, self.height, self.width);
        }
        if let Layout::Grid { rows, cols, margin } = self.layout {
            if rows == 0 || cols == 0 {
                bail!(Config, "grid layout needs at least one row and column");
            }
            let cell = (self.height / rows).min(self.width / cols);
            if self.max_size + 2 * margin > cell {
                bail!(Config, "shape max size {} plus margins does not fit a {}px grid cell", self.max_size, cell);
            }
            if self.min_instances > rows * cols {
                bail!(Config, "min_instances {} exceeds grid cells {}", self.min_instances, rows * cols);
            }
        }
        Ok(())
    }

    pub fn validate_lanes(&self) -> Result<()> {
        self.validate_common()?;
        if self.lane_width < 1 {
            bail!(Config, "lane width must be at least 1");
        }
        if self.min_lanes < 1 || self.min_lanes > self.max_lanes {
            bail!(Config, "lane count range [{}, {}] is empty", self.min_lanes, self.max_lanes);
        }
        if self.max_lanes > MAX_LANES {
            bail!(Config, "at most {} lanes are supported, got {}", MAX_LANES, self.max_lanes);
        }
        if self.lane_spacing < self.lane_width {
            bail!(Config, "lane spacing {} narrower than lane width {}", self.lane_spacing, self.lane_width);
        }
        if self.lane_slack(self.max_lanes).is_none() {
            bail!(Config, "{} lanes spaced {}px do not fit a width of {}", self.max_lanes, self.lane_spacing, self.width);
        }
        Ok(())
    }

    fn validate_common(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            bail!(Config, "image must be non-empty");
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            bail!(Config, "image too large");
        }
        Ok(())
    }

    fn lane_margin(&self) -> usize {
        self.lane_width / 2 + 1
    }

    /// Horizontal freedom left once `count` lanes sit at minimum spacing.
    fn lane_slack(&self, count: usize) -> Option<usize> {
        let used = 2 * self.lane_margin() + (count.saturating_sub(1)) * self.lane_spacing;
        self.width.checked_sub(used)
    }
}

/// Synthetic RGB image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub instances: InstanceLabelMap,
    pub semantics: SemanticLabelMap,
    pub centers: CenterOffsetMap,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.as_slice().iter().copied().max().unwrap_or(0) as usize
    }

    /// Checks shape agreement, ID compactness, background consistency and
    /// per-instance category uniformity.
    pub fn check_invariants(&self, min_visible_pixels: usize) -> Result<()> {
        let shape = self.image.shape();
        if self.instances.shape() != shape || self.semantics.shape() != shape || self.centers.shape() != shape {
            bail!(Shape, "scene maps disagree in shape");
        }
        let m = self.instance_count();
        let mut sizes = vec![0usize; m + 1];
        let mut category = vec![0u8; m + 1];
        for ((&id, &sem), off) in self.instances.as_slice().iter().zip(self.semantics.as_slice()).zip(self.centers.as_slice()) {
            let id = id as usize;
            sizes[id] += 1;
            if (id == 0) != (sem == 0) {
                bail!(Domain, "semantic and instance maps disagree on background");
            }
            if id == 0 {
                if off != &[0.0, 0.0] {
                    bail!(Domain, "nonzero center offset on background");
                }
                continue;
            }
            if category[id] == 0 {
                category[id] = sem;
            } else if category[id] != sem {
                bail!(Domain, "instance {} spans several categories", id);
            }
        }
        for (id, &n) in sizes.iter().enumerate().skip(1) {
            if n == 0 {
                bail!(Domain, "instance IDs are not contiguous: {} missing", id);
            }
            if n < min_visible_pixels {
                bail!(Domain, "instance {} has only {} pixels", id, n);
            }
        }
        Ok(())
    }
}

/// An explicitly placed shape; discs are the ellipse inscribed in the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub color: [f64; 3],
}

impl ShapeSpec {
    fn covers(&self, row: usize, col: usize) -> bool {
        if row < self.top || col < self.left || row >= self.top + self.height || col >= self.left + self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Box => true,
            ShapeKind::Disc => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (row - self.top) as f64 + 0.5 - ry;
                let dx = (col - self.left) as f64 + 0.5 - rx;
                (dy / ry) * (dy / ry) + (dx / rx) * (dx / rx) <= 1.0
            }
        }
    }
}

/// A lane centre line given as `(row, col)` control points, sorted by row.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneSpec {
    pub points: Vec<(f64, f64)>,
    pub color: [f64; 3],
}

impl LaneSpec {
    /// Centre-line column at `row`, extrapolating flat past the ends.
    pub fn col_at(&self, row: f64) -> f64 {
        let pts = &self.points;
        if row <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let (y0, x0) = w[0];
            let (y1, x1) = w[1];
            if row <= y1 {
                if y1 == y0 {
                    return x1;
                }
                return x0 + (x1 - x0) * (row - y0) / (y1 - y0);
            }
        }
        pts[pts.len() - 1].1
    }
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)]
}

/// Random shape scene. Deterministic in `(cfg, seed)`.
pub fn gen_shapes_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene> {
    cfg.validate_shapes()?;
    let mut rng = rng::seeded(seed);
    let shapes = match cfg.layout {
        Layout::Random => {
            let count = rng.random_range(cfg.min_instances..=cfg.max_instances);
            (0..count).map(|_| random_shape(cfg, &mut rng, 0, 0, cfg.height, cfg.width)).collect::<Vec<_>>()
        }
        Layout::Grid { rows, cols, margin } => {
            let cells = rows * cols;
            let count = rng.random_range(cfg.min_instances..=cfg.max_instances.min(cells));
            let mut order: Vec<usize> = (0..cells).collect();
            order.shuffle(&mut rng);
            let mut picked = order[..count].to_vec();
            picked.sort_unstable();
            let ch = cfg.height / rows;
            let cw = cfg.width / cols;
            picked
                .into_iter()
                .map(|cell| {
                    let (r, c) = (cell / cols, cell % cols);
                    random_shape(cfg, &mut rng, r * ch + margin, c * cw + margin, ch - 2 * margin, cw - 2 * margin)
                })
                .collect()
        }
    };
    Ok(render_shapes(cfg.height, cfg.width, &shapes, cfg.min_visible_pixels, rng::derive_seed(seed, 1), seed))
}

fn random_shape(cfg: &SceneGenConfig, rng: &mut Rng, top: usize, left: usize, region_h: usize, region_w: usize) -> ShapeSpec {
    let kind = cfg.shape_kinds[rng.random_range(0..cfg.shape_kinds.len())];
    let max_h = cfg.max_size.min(region_h);
    let max_w = cfg.max_size.min(region_w);
    let (height, width) = match kind {
        ShapeKind::Box => (rng.random_range(cfg.min_size..=max_h), rng.random_range(cfg.min_size..=max_w)),
        ShapeKind::Disc => {
            let d = rng.random_range(cfg.min_size..=max_h.min(max_w));
            (d, d)
        }
    };
    let top = top + rng.random_range(0..=region_h - height);
    let left = left + rng.random_range(0..=region_w - width);
    ShapeSpec { kind, top, left, height, width, color: random_color(rng) }
}

/// Paints `shapes` back to front, prunes instances with fewer than
/// `min_visible_pixels` visible pixels and re-compacts IDs in paint order.
pub fn render_shapes(
    height: usize,
    width: usize,
    shapes: &[ShapeSpec],
    min_visible_pixels: usize,
    noise_seed: u64,
    scene_seed: u64,
) -> Scene {
    let mut owner = Grid::filled(height, width, usize::MAX);
    for (k, s) in shapes.iter().enumerate() {
        for r in s.top..(s.top + s.height).min(height) {
            for c in s.left..(s.left + s.width).min(width) {
                if s.covers(r, c) {
                    owner.set(r, c, k);
                }
            }
        }
    }
    let categories: Vec<u8> = shapes.iter().map(|s| s.kind.category()).collect();
    let colors: Vec<[f64; 3]> = shapes.iter().map(|s| s.color).collect();
    finish_scene(owner, &categories, &colors, min_visible_pixels, noise_seed, scene_seed, None)
}

/// Random lane scene: 3–6 non-crossing polylines, one instance each.
pub fn gen_lane_scene(cfg: &SceneGenConfig, seed: u64) -> Result<Scene> {
    cfg.validate_lanes()?;
    let mut rng = rng::seeded(seed);
    let count = rng.random_range(cfg.min_lanes..=cfg.max_lanes);
    let slack = cfg.lane_slack(count).unwrap_or(0) as f64;
    let margin = cfg.lane_margin() as f64;
    let last = (cfg.height - 1) as f64;
    let control_rows = [0.0, last / 2.0, last];
    // Sorted columns with at least `lane_spacing` between neighbours at
    // every control row; linear interpolation preserves the ordering.
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(count); control_rows.len()];
    for cols in columns.iter_mut() {
        let mut offsets: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..=slack)).collect();
        offsets.sort_by(f64::total_cmp);
        for (i, o) in offsets.into_iter().enumerate() {
            cols.push(margin + o + (i * cfg.lane_spacing) as f64);
        }
    }
    let lanes: Vec<LaneSpec> = (0..count)
        .map(|i| LaneSpec {
            points: control_rows.iter().zip(&columns).map(|(&y, cols)| (y, cols[i])).collect(),
            color: random_color(&mut rng),
        })
        .collect();
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut rng);
    Ok(render_lanes_with_order(cfg.height, cfg.width, &lanes, cfg.lane_width, cfg.min_visible_pixels, rng::derive_seed(seed, 1), seed, Some(&ids)))
}

/// Rasterises lanes at `lane_width` pixels per row; IDs follow list order.
pub fn render_lanes(
    height: usize,
    width: usize,
    lanes: &[LaneSpec],
    lane_width: usize,
    min_visible_pixels: usize,
    noise_seed: u64,
) -> Scene {
    render_lanes_with_order(height, width, lanes, lane_width, min_visible_pixels, noise_seed, noise_seed, None)
}

#[allow(clippy::too_many_arguments)]
fn render_lanes_with_order(
    height: usize,
    width: usize,
    lanes: &[LaneSpec],
    lane_width: usize,
    min_visible_pixels: usize,
    noise_seed: u64,
    scene_seed: u64,
    id_order: Option<&[usize]>,
) -> Scene {
    let mut owner = Grid::filled(height, width, usize::MAX);
    for (k, lane) in lanes.iter().enumerate() {
        for r in 0..height {
            let x = lane.col_at(r as f64);
            let start = libm::round(x - lane_width as f64 / 2.0) as i64;
            for c in start..start + lane_width as i64 {
                if c >= 0 && (c as usize) < width {
                    owner.set(r, c as usize, k);
                }
            }
        }
    }
    let categories = vec![1u8; lanes.len()];
    let colors: Vec<[f64; 3]> = lanes.iter().map(|l| l.color).collect();
    finish_scene(owner, &categories, &colors, min_visible_pixels, noise_seed, scene_seed, id_order)
}

/// Turns an owner map (index into the painted objects, `usize::MAX` for
/// background) into a full scene. Surviving objects are numbered in
/// `id_order` (paint order by default).
fn finish_scene(
    owner: Grid<usize>,
    categories: &[u8],
    colors: &[[f64; 3]],
    min_visible_pixels: usize,
    noise_seed: u64,
    scene_seed: u64,
    id_order: Option<&[usize]>,
) -> Scene {
    let k = categories.len();
    let mut visible = vec![0usize; k];
    for &o in owner.as_slice() {
        if o != usize::MAX {
            visible[o] += 1;
        }
    }
    let default_order: Vec<usize> = (0..k).collect();
    let order = id_order.unwrap_or(&default_order);
    let mut new_id = vec![0u16; k];
    let mut next = 1u16;
    for &o in order {
        if visible[o] > 0 && visible[o] >= min_visible_pixels {
            new_id[o] = next;
            next += 1;
        }
    }
    let (h, w) = owner.shape();
    let mut rng = rng::seeded(noise_seed);
    let mut instances = Grid::filled(h, w, 0u16);
    let mut semantics = Grid::filled(h, w, 0u8);
    let mut image = Grid::filled(h, w, [0.0; 3]);
    for (i, &o) in owner.as_slice().iter().enumerate() {
        let (id, base) = if o != usize::MAX && new_id[o] != 0 {
            semantics.as_mut_slice()[i] = categories[o];
            (new_id[o], colors[o])
        } else {
            (0, [BACKGROUND_LEVEL; 3])
        };
        instances.as_mut_slice()[i] = id;
        let px = &mut image.as_mut_slice()[i];
        for ch in 0..3 {
            let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
            px[ch] = (base[ch] + noise).clamp(0.0, 1.0);
        }
    }
    let centers = compute_center_offsets(&instances);
    Scene { image, instances, semantics, centers, seed: scene_seed }
}

/// Offsets from each pixel to its instance's pixel-mass centroid, `[dx, dy]`
/// with `dx` along columns. Zero on background.
pub fn compute_center_offsets(instances: &InstanceLabelMap) -> CenterOffsetMap {
    let m = instances.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut sum = vec![[0.0f64; 2]; m + 1];
    let mut count = vec![0usize; m + 1];
    for (r, c, &id) in instances.indexed() {
        if id != 0 {
            sum[id as usize][0] += c as f64;
            sum[id as usize][1] += r as f64;
            count[id as usize] += 1;
        }
    }
    let centroid: Vec<[f64; 2]> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { [0.0; 2] } else { [s[0] / n as f64, s[1] / n as f64] })
        .collect();
    let mut out = Grid::filled(instances.height(), instances.width(), [0.0; 2]);
    for (r, c, &id) in instances.indexed() {
        if id != 0 {
            let cen = centroid[id as usize];
            out.set(r, c, [cen[0] - c as f64, cen[1] - r as f64]);
        }
    }
    out
}
