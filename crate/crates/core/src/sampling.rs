//! Per-instance pixel sampling and ordered pair enumeration.
//!
//! Every instance receives the same number of samples regardless of its
//! size. All ordered pairs of the samples (self-pairs included) form the
//! supervision set; an optional distance threshold keeps only pairs whose
//! pixels lie within `epsilon` of each other, which turns the objective
//! into a relaxed graph-colouring constraint between nearby instances.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{bail, Error, Result};
use crate::rng;
use crate::scene::InstanceLabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pixel {
    pub row: u32,
    pub col: u32,
    pub instance_id: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Pair {
    pub a: u32,
    pub b: u32,
    pub relation: u8,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub pixels: Vec<Pixel>,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SamplerConfig {
    pub per_instance_count: usize,
    /// Pair distance threshold in full-resolution pixels; `None` = ∞.
    pub epsilon: Option<f64>,
    pub include_self_pairs: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { per_instance_count: 50, epsilon: None, include_self_pairs: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_instance_count < 1 {
            bail!(Config, "per_instance_count must be at least 1");
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                bail!(Config, "epsilon must be positive, got {}", eps);
            }
        }
        Ok(())
    }

    pub fn epsilon_or_inf(&self) -> f64 {
        self.epsilon.unwrap_or(f64::INFINITY)
    }
}

/// 1 when both pixels carry the same instance ID. Background has no
/// pairwise supervision and is rejected.
pub fn relationship(instances: &InstanceLabelMap, p: &Pixel, q: &Pixel) -> Result<u8> {
    let lookup = |x: &Pixel| -> Result<u16> {
        let (r, c) = (x.row as usize, x.col as usize);
        if r >= instances.height() || c >= instances.width() {
            bail!(Domain, "pixel ({}, {}) outside {}x{} map", r, c, instances.height(), instances.width());
        }
        match *instances.get(r, c) {
            0 => bail!(Domain, "pixel ({}, {}) is background", r, c),
            id => Ok(id),
        }
    };
    Ok(u8::from(lookup(p)? == lookup(q)?))
}

/// Draws `per_instance_count` pixels from each instance, in ascending ID
/// order. Instances at least as large as the quota are sampled without
/// replacement; smaller ones with replacement.
pub fn sample_pixels(instances: &InstanceLabelMap, cfg: &SamplerConfig, seed: u64) -> Result<Vec<Pixel>> {
    cfg.validate()?;
    let m = instances.as_slice().iter().copied().max().unwrap_or(0) as usize;
    if m == 0 {
        return Err(Error::EmptySample);
    }
    let mut members: Vec<Vec<u32>> = (0..=m).map(|_| Vec::new()).collect();
    for (i, &id) in instances.as_slice().iter().enumerate() {
        if id != 0 {
            members[id as usize].push(i as u32);
        }
    }
    let mut rng = rng::seeded(seed);
    let quota = cfg.per_instance_count;
    let w = instances.width() as u32;
    let mut out = Vec::with_capacity(m * quota);
    for (id, pool) in members.iter().enumerate().skip(1) {
        if pool.is_empty() {
            continue;
        }
        let mut push = |lin: u32| out.push(Pixel { row: lin / w, col: lin % w, instance_id: id as u16 });
        if pool.len() >= quota {
            for k in index::sample(&mut rng, pool.len(), quota).into_iter() {
                push(pool[k]);
            }
        } else {
            for _ in 0..quota {
                push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok(out)
}

/// All ordered pairs `(a, b)` in row-major order over `a`, including
/// self-pairs: `|pairs| = |pixels|²`. Relations are recomputed from the map.
pub fn enumerate_pairs(pixels: &[Pixel], instances: &InstanceLabelMap) -> Result<PairSet> {
    let ids: Vec<u16> = pixels
        .iter()
        .map(|p| {
            relationship(instances, p, p)?;
            Ok(*instances.get(p.row as usize, p.col as usize))
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(pixels.len() * pixels.len());
    for (a, pa) in pixels.iter().enumerate() {
        for (b, pb) in pixels.iter().enumerate() {
            pairs.push(Pair {
                a: a as u32,
                b: b as u32,
                relation: u8::from(ids[a] == ids[b]),
                distance: pixel_distance(pa, pb),
            });
        }
    }
    let pixels = pixels.iter().zip(&ids).map(|(p, &id)| Pixel { instance_id: id, ..*p }).collect();
    Ok(PairSet { pixels, pairs })
}

pub fn pixel_distance(p: &Pixel, q: &Pixel) -> f64 {
    let dr = p.row as f64 - q.row as f64;
    let dc = p.col as f64 - q.col as f64;
    libm::sqrt(dr * dr + dc * dc)
}

/// Keeps pairs with `distance <= epsilon`, preserving order. Applies to
/// same-instance and different-instance pairs alike.
pub fn filter_pairs(ps: &PairSet, epsilon: f64) -> PairSet {
    PairSet {
        pixels: ps.pixels.clone(),
        pairs: ps.pairs.iter().filter(|p| p.distance <= epsilon).copied().collect(),
    }
}

/// Sample, enumerate and threshold in one go.
pub fn build_pair_set(instances: &InstanceLabelMap, cfg: &SamplerConfig, seed: u64) -> Result<PairSet> {
    let pixels = sample_pixels(instances, cfg, seed)?;
    finish_pair_set(&pixels, instances, cfg)
}

fn finish_pair_set(pixels: &[Pixel], instances: &InstanceLabelMap, cfg: &SamplerConfig) -> Result<PairSet> {
    let mut ps = enumerate_pairs(pixels, instances)?;
    if !cfg.include_self_pairs {
        ps.pairs.retain(|p| p.a != p.b);
    }
    Ok(match cfg.epsilon {
        Some(eps) => filter_pairs(&ps, eps),
        None => ps,
    })
}

/// Like [`build_pair_set`], but draws only pixels that a stride-`stride`
/// output grid represents exactly: `(stride·r + stride/2, stride·c +
/// stride/2)`, the same positions `Grid::downsample_nearest` reads.
/// Coordinates stay in full-resolution units. Falls back to
/// [`build_pair_set`] when no instance survives on the coarse grid.
pub fn build_grid_pair_set(instances: &InstanceLabelMap, cfg: &SamplerConfig, stride: usize, seed: u64) -> Result<PairSet> {
    if stride == 0 {
        bail!(Config, "stride must be at least 1");
    }
    let coarse = instances.downsample_nearest(stride);
    if coarse.as_slice().iter().all(|&v| v == 0) {
        return build_pair_set(instances, cfg, seed);
    }
    let (s, off) = (stride as u32, (stride / 2) as u32);
    let pixels: Vec<Pixel> = sample_pixels(&coarse, cfg, seed)?
        .into_iter()
        .map(|p| Pixel { row: p.row * s + off, col: p.col * s + off, ..p })
        .collect();
    finish_pair_set(&pixels, instances, cfg)
}
