//! Per-pixel anomaly score maps: harmonic accumulation of window scores and the
//! weighted fusions used by both pipelines.

use serde::{Deserialize, Serialize};

use crate::decompose::{PatchGrid, WindowSpec};
use crate::error::{contract, invalid_input, Result};

/// Scores are clamped to this floor before taking reciprocals.
pub const HARMONIC_EPSILON: f64 = 1e-6;

/// Non-negative, finite per-pixel scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(invalid_input!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid_input!("score map value {bad} is not a finite non-negative number"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "score maps are non-empty");
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Raises the pixel to `value` if that is larger.
    #[inline]
    pub(crate) fn max_assign(&mut self, y: usize, x: usize, value: f64) {
        let slot = &mut self.values[y * self.width + x];
        if value > *slot {
            *slot = value;
        }
    }

    /// Pixelwise maximum with another map of the same shape.
    pub fn max_with(&self, other: &ScoreMap) -> Result<ScoreMap> {
        check_shapes(&[self, other])?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a.max(*b)).collect();
        Ok(ScoreMap {
            height: self.height,
            width: self.width,
            values,
        })
    }

    /// Position and value of the largest pixel (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize, f64) {
        let mut best = (0, self.values[0]);
        for (i, &v) in self.values.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0 / self.width, best.0 % self.width, best.1)
    }
}

/// Largest pixel value of the map.
pub fn max_pixel(map: &ScoreMap) -> f64 {
    map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// A score attached to one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowScore {
    pub window: WindowSpec,
    pub score: f64,
}

/// Paints window scores onto the pixel grid, combining overlaps with the harmonic mean.
///
/// A pixel covered by `t` windows receives `t / sum(1 / score)`, each score first clamped
/// below at [`HARMONIC_EPSILON`]. Uncovered pixels stay 0. The reciprocals of each patch are
/// summed in sorted order, so the result does not depend on the order of `scores`.
pub fn accumulate_harmonic(scores: &[WindowScore], grid: &PatchGrid) -> Result<ScoreMap> {
    let mut per_patch: Vec<Vec<f64>> = vec![Vec::new(); grid.rows * grid.cols];
    for ws in scores {
        if !grid.contains(&ws.window) {
            return Err(contract!("window {:?} lies outside the {}x{} grid", ws.window, grid.rows, grid.cols));
        }
        if !ws.score.is_finite() || ws.score < 0.0 {
            return Err(contract!("window score {} is not finite and non-negative", ws.score));
        }
        let inv = 1.0 / ws.score.max(HARMONIC_EPSILON);
        let w = &ws.window;
        for r in w.row0..w.row0 + w.rows {
            for c in w.col0..w.col0 + w.cols {
                per_patch[r * grid.cols + c].push(inv);
            }
        }
    }
    let patch_values: Vec<f64> = per_patch
        .into_iter()
        .map(|mut inv| {
            if inv.is_empty() {
                return 0.0;
            }
            inv.sort_by(f64::total_cmp);
            inv.len() as f64 / inv.iter().sum::<f64>()
        })
        .collect();
    paint_patches(&patch_values, grid)
}

/// Expands one value per patch (row-major, `grid.rows * grid.cols`) to its pixel footprint.
pub fn paint_patches(patch_values: &[f64], grid: &PatchGrid) -> Result<ScoreMap> {
    if patch_values.len() != grid.rows * grid.cols {
        return Err(contract!(
            "{} patch values for a {}x{} grid",
            patch_values.len(),
            grid.rows,
            grid.cols
        ));
    }
    let (h, w, p) = (grid.pixel_height(), grid.pixel_width(), grid.patch_size);
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &patch_values[(y / p) * grid.cols..(y / p + 1) * grid.cols];
        for x in 0..w {
            values.push(row[x / p]);
        }
    }
    ScoreMap::new(h, w, values)
}

/// Weights for the zero-shot map `a * (small * S_small + mid * S_mid)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotWeights {
    pub small: f64,
    pub mid: f64,
}

impl Default for ZeroShotWeights {
    fn default() -> Self {
        Self { small: 1.8, mid: 0.2 }
    }
}

/// Weights of the small, middle and image scales in a three-scale fusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleWeights(pub f64, pub f64, pub f64);

impl ScaleWeights {
    pub const GLOBAL: ScaleWeights = ScaleWeights(1.0, 1.0, 1.0);
    pub const INDIVIDUAL: ScaleWeights = ScaleWeights(1.5, 0.5, 6.0);
}

/// Weights of the global and individual maps in the final few-shot map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalWeights {
    pub global: f64,
    pub indiv: f64,
}

impl Default for FinalWeights {
    fn default() -> Self {
        Self { global: 0.55, indiv: 0.45 }
    }
}

fn check_shapes(maps: &[&ScoreMap]) -> Result<()> {
    let (h, w) = (maps[0].height, maps[0].width);
    if let Some(m) = maps.iter().find(|m| m.height != h || m.width != w) {
        return Err(contract!("score map shapes differ: {h}x{w} vs {}x{}", m.height, m.width));
    }
    Ok(())
}

fn check_factors(factors: &[f64]) -> Result<()> {
    if let Some(bad) = factors.iter().find(|f| !(f.is_finite() && **f >= 0.0)) {
        return Err(contract!("fusion factor {bad} must be finite and non-negative"));
    }
    Ok(())
}

/// `a * (w.small * small + w.mid * mid)`, pixelwise.
pub fn fuse_zero_shot(small: &ScoreMap, mid: &ScoreMap, a: f64, w: ZeroShotWeights) -> Result<ScoreMap> {
    check_shapes(&[small, mid])?;
    check_factors(&[a, w.small, w.mid])?;
    let values = small
        .values
        .iter()
        .zip(&mid.values)
        .map(|(s, m)| a * (w.small * s + w.mid * m))
        .collect();
    ScoreMap::new(small.height, small.width, values)
}

/// `w.0 * s + w.1 * m + w.2 * i`, pixelwise.
pub fn fuse_three_scale(s: &ScoreMap, m: &ScoreMap, i: &ScoreMap, w: ScaleWeights) -> Result<ScoreMap> {
    check_shapes(&[s, m, i])?;
    check_factors(&[w.0, w.1, w.2])?;
    let values = s
        .values
        .iter()
        .zip(&m.values)
        .zip(&i.values)
        .map(|((s, m), i)| w.0 * s + w.1 * m + w.2 * i)
        .collect();
    ScoreMap::new(s.height, s.width, values)
}

/// `a * (w.global * global + w.indiv * indiv)`, pixelwise.
pub fn fuse_few_shot_final(global: &ScoreMap, indiv: &ScoreMap, a: f64, w: FinalWeights) -> Result<ScoreMap> {
    check_shapes(&[global, indiv])?;
    check_factors(&[a, w.global, w.indiv])?;
    let values = global
        .values
        .iter()
        .zip(&indiv.values)
        .map(|(g, i)| a * (w.global * g + w.indiv * i))
        .collect();
    ScoreMap::new(global.height, global.width, values)
}
