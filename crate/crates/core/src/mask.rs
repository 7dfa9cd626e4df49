//! Binary pixel masks stored as row-major runs.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;

/// A set of pixels on an H×W grid, kept as sorted, non-touching runs of
/// row-major indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    runs: Vec<(usize, usize)>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, runs: Vec::new() }
    }

    /// Builds a mask from arbitrary row-major indices; duplicates are fine.
    pub fn from_indices(height: usize, width: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut idx: Vec<usize> = indices.into_iter().collect();
        idx.sort_unstable();
        idx.dedup();
        if let Some(&last) = idx.last() {
            if last >= height * width {
                bail!(Shape, "pixel index {} outside a {}x{} grid", last, height, width);
            }
        }
        Ok(Self::from_sorted(height, width, &idx))
    }

    fn from_sorted(height: usize, width: usize, idx: &[usize]) -> Self {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &i in idx {
            match runs.last_mut() {
                Some((s, l)) if *s + *l == i => *l += 1,
                _ => runs.push((i, 1)),
            }
        }
        Self { height, width, runs }
    }

    /// Pixels of `grid` whose value satisfies `pred`.
    pub fn from_grid<T>(grid: &Grid<T>, mut pred: impl FnMut(&T) -> bool) -> Self {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for (i, v) in grid.as_slice().iter().enumerate() {
            if pred(v) {
                match runs.last_mut() {
                    Some((s, l)) if *s + *l == i => *l += 1,
                    _ => runs.push((i, 1)),
                }
            }
        }
        Self { height: grid.height(), width: grid.width(), runs }
    }

    /// Parses a flat `[start, len, start, len, ...]` encoding.
    pub fn from_flat_runs(height: usize, width: usize, flat: &[u64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            bail!(Shape, "run list has odd length {}", flat.len());
        }
        let mut runs: Vec<(usize, usize)> = Vec::with_capacity(flat.len() / 2);
        let mut end = 0usize;
        for ch in flat.chunks_exact(2) {
            let (s, l) = (ch[0] as usize, ch[1] as usize);
            if l == 0 || s < end || (s == end && !runs.is_empty()) || s + l > height * width {
                bail!(Domain, "malformed run ({}, {}) on a {}x{} grid", s, l, height, width);
            }
            runs.push((s, l));
            end = s + l;
        }
        Ok(Self { height, width, runs })
    }

    pub fn to_flat_runs(&self) -> Vec<u64> {
        self.runs.iter().flat_map(|&(s, l)| [s as u64, l as u64]).collect()
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.runs
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn area(&self) -> usize {
        self.runs.iter().map(|r| r.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Row-major pixel indices in ascending order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    /// `(row, col)` pairs in ascending row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.indices().map(move |i| (i / w, i % w))
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        if row >= self.height || col >= self.width {
            return false;
        }
        let i = row * self.width + col;
        match self.runs.binary_search_by(|&(s, _)| s.cmp(&i)) {
            Ok(_) => true,
            Err(0) => false,
            Err(k) => {
                let (s, l) = self.runs[k - 1];
                i < s + l
            }
        }
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() != other.shape() {
            bail!(Shape, "mask grids differ: {:?} vs {:?}", self.shape(), other.shape());
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Mask) -> Result<usize> {
        self.check_shape(other)?;
        let (mut i, mut j, mut total) = (0, 0, 0);
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, al) = self.runs[i];
            let (b0, bl) = other.runs[j];
            let (a1, b1) = (a0 + al, b0 + bl);
            total += a1.min(b1).saturating_sub(a0.max(b0));
            if a1 <= b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        let mut all: Vec<(usize, usize)> = self.runs.iter().chain(&other.runs).copied().collect();
        all.sort_unstable();
        let mut runs: Vec<(usize, usize)> = Vec::with_capacity(all.len());
        for (s, l) in all {
            match runs.last_mut() {
                Some((ps, pl)) if s <= *ps + *pl => *pl = (*pl).max(s + l - *ps),
                _ => runs.push((s, l)),
            }
        }
        Ok(Mask { height: self.height, width: self.width, runs })
    }

    /// Keeps the pixels for which `keep(row, col)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Mask {
        let idx: Vec<usize> = self.indices().filter(|&i| keep(i / self.width, i % self.width)).collect();
        Self::from_sorted(self.height, self.width, &idx)
    }

    /// Nearest-neighbour upsampling: every pixel becomes a `factor`×`factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Mask {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut row_runs: Vec<(usize, usize)> = Vec::new();
        let mut k = 0;
        for r in 0..self.height {
            row_runs.clear();
            let (lo, hi) = (r * self.width, (r + 1) * self.width);
            while k < self.runs.len() && self.runs[k].0 < hi {
                let (s, l) = self.runs[k];
                let (a, b) = (s.max(lo), (s + l).min(hi));
                row_runs.push((a - lo, b - a));
                if s + l > hi {
                    break;
                }
                k += 1;
            }
            for sub in 0..factor {
                let base = (r * factor + sub) * w;
                for &(c, l) in &row_runs {
                    let s = base + c * factor;
                    match runs.last_mut() {
                        Some((ps, pl)) if *ps + *pl == s => *pl += l * factor,
                        _ => runs.push((s, l * factor)),
                    }
                }
            }
        }
        Mask { height: h, width: w, runs }
    }

    /// Dense boolean rendering.
    pub fn to_grid(&self) -> Grid<bool> {
        let mut g = Grid::filled(self.height, self.width, false);
        for i in self.indices() {
            g.as_mut_slice()[i] = true;
        }
        g
    }
}
