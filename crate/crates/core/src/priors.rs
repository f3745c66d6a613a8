//! Neighbourhood class-count priors and inner/outer region masks.
//!
//! Both are computed from ground-truth labels over a square patch centred on
//! each pixel. Labels outside the image are replicated from the nearest
//! border pixel, so every patch has exactly `patch_size²` members.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Raw class counts in `[0, d]`.
    Counts,
    /// Counts divided by the patch area `d`.
    Proportions,
}

impl std::str::FromStr for PriorMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counts" => Ok(PriorMode::Counts),
            "proportions" => Ok(PriorMode::Proportions),
            _ => Err(invalid(format!("unknown prior mode {s:?}"))),
        }
    }
}

/// Per-pixel class counts, stored `[K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Number of pixels in each patch.
    pub patch_area: usize,
    pub counts: Vec<f64>,
}

impl PriorMap {
    pub fn at(&self, class: usize, y: usize, x: usize) -> f64 {
        self.counts[(class * self.height + y) * self.width + x]
    }

    /// Values to constrain logits towards under the given mode.
    pub fn targets(&self, mode: PriorMode) -> Vec<f64> {
        match mode {
            PriorMode::Counts => self.counts.clone(),
            PriorMode::Proportions => {
                let d = self.patch_area as f64;
                self.counts.iter().map(|c| c / d).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Inner = 0,
    Outer = 1,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Inner, Region::Outer];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
}

impl RegionMask {
    pub fn count(&self, region: Region) -> usize {
        self.regions.iter().filter(|&&r| r == region).count()
    }

    pub fn fraction_outer(&self) -> f64 {
        self.count(Region::Outer) as f64 / self.regions.len() as f64
    }
}

/// A `K × 2` matrix indexed by class and region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMatrix {
    classes: usize,
    data: Vec<f64>,
}

impl RegionMatrix {
    pub fn filled(classes: usize, value: f64) -> Self {
        Self {
            classes,
            data: vec![value; classes * 2],
        }
    }

    /// Rows are classes, columns `[inner, outer]`.
    pub fn from_rows(rows: &[[f64; 2]]) -> Self {
        Self {
            classes: rows.len(),
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, class: usize, region: Region) -> f64 {
        self.data[class * 2 + region.index()]
    }

    pub fn set(&mut self, class: usize, region: Region, value: f64) {
        self.data[class * 2 + region.index()] = value;
    }

    /// Row-major `[k][r]` values.
    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, Region)> + '_ {
        (0..self.classes).flat_map(|k| Region::ALL.into_iter().map(move |r| (k, r)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            classes: self.classes,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check(labels: &[u8], height: usize, width: usize, patch_size: usize) -> Result<()> {
    if patch_size % 2 == 0 {
        return Err(invalid(format!("patch size must be odd, got {patch_size}")));
    }
    if labels.len() != height * width || labels.is_empty() {
        return Err(invalid(format!(
            "label map has {} entries, expected {height}x{width}",
            labels.len()
        )));
    }
    Ok(())
}

/// Visits the replicate-padded patch around `(y, x)`.
fn patch(
    labels: &[u8],
    height: usize,
    width: usize,
    y: usize,
    x: usize,
    half: isize,
    mut f: impl FnMut(u8),
) {
    for dy in -half..=half {
        let sy = (y as isize + dy).clamp(0, height as isize - 1) as usize;
        for dx in -half..=half {
            let sx = (x as isize + dx).clamp(0, width as isize - 1) as usize;
            f(labels[sy * width + sx]);
        }
    }
}

pub fn compute_prior(
    labels: &[u8],
    height: usize,
    width: usize,
    classes: usize,
    patch_size: usize,
) -> Result<PriorMap> {
    check(labels, height, width, patch_size)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let half = (patch_size / 2) as isize;
    let mut counts = vec![0.0; classes * height * width];
    for y in 0..height {
        for x in 0..width {
            patch(labels, height, width, y, x, half, |l| {
                counts[(l as usize * height + y) * width + x] += 1.0;
            });
        }
    }
    Ok(PriorMap {
        classes,
        height,
        width,
        patch_area: patch_size * patch_size,
        counts,
    })
}

/// A pixel is inner when its patch holds a single class, outer otherwise.
pub fn classify_regions(labels: &[u8], height: usize, width: usize, patch_size: usize) -> Result<RegionMask> {
    check(labels, height, width, patch_size)?;
    let half = (patch_size / 2) as isize;
    let mut regions = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let first = labels[y * width + x];
            let mut uniform = true;
            patch(labels, height, width, y, x, half, |l| uniform &= l == first);
            regions.push(if uniform { Region::Inner } else { Region::Outer });
        }
    }
    Ok(RegionMask {
        height,
        width,
        regions,
    })
}
