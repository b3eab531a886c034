//! Multi-scale window enumeration and single-object crops.
//!
//! An image of canonical size is viewed as a grid of ViT patches. Windows are
//! rectangles of whole patches at one of three scales: 2x2 (small), 3x3 (middle)
//! or the whole grid (image). Object crops cut one segmented object out of an
//! image, pad it to a square and resize it, remembering how to map back.

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid_input, Result};
use crate::image::ImageTensor;
use crate::scoremap::ScoreMap;

pub const DEFAULT_PATCH_SIZE: usize = 16;
pub const DEFAULT_CANONICAL_SIZE: usize = 240;

/// Resizes `image` to `target x target` with bilinear interpolation.
pub fn resize_to_canonical(image: &ImageTensor, target: usize, patch_size: usize) -> Result<ImageTensor> {
    if patch_size == 0 || target == 0 || target % patch_size != 0 {
        return Err(invalid_input!(
            "canonical size {target} must be a positive multiple of the patch size {patch_size}"
        ));
    }
    image.resize_bilinear(target, target)
}

/// The patch tiling of an image whose sides are exact multiples of `patch_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(patch_size: usize, rows: usize, cols: usize) -> Result<Self> {
        if patch_size == 0 || rows == 0 || cols == 0 {
            return Err(invalid_input!("degenerate patch grid {rows}x{cols} @ {patch_size}px"));
        }
        Ok(Self {
            patch_size,
            rows,
            cols,
        })
    }

    pub fn for_image(image: &ImageTensor, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image.height() % patch_size != 0 || image.width() % patch_size != 0 {
            return Err(contract!(
                "{}x{} image is not tiled by {patch_size}px patches",
                image.height(),
                image.width()
            ));
        }
        Self::new(patch_size, image.height() / patch_size, image.width() / patch_size)
    }

    pub fn pixel_height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn pixel_width(&self) -> usize {
        self.cols * self.patch_size
    }

    /// The single window covering the whole grid.
    pub fn full_window(&self) -> WindowSpec {
        WindowSpec {
            scale: Scale::Image,
            row0: 0,
            col0: 0,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn contains(&self, w: &WindowSpec) -> bool {
        w.rows >= 1 && w.cols >= 1 && w.row0 + w.rows <= self.rows && w.col0 + w.cols <= self.cols
    }
}

/// Window scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Small,
    Middle,
    Image,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Middle, Scale::Image];

    /// Window side in patches; `None` for the image scale, which always spans the grid.
    pub fn side(self) -> Option<usize> {
        match self {
            Scale::Small => Some(2),
            Scale::Middle => Some(3),
            Scale::Image => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Small => "small",
            Scale::Middle => "middle",
            Scale::Image => "image",
        }
    }
}

/// A rectangle of patches, in patch units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub scale: Scale,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl WindowSpec {
    /// `(top, left, height, width)` in pixels.
    pub fn pixel_rect(&self, patch_size: usize) -> (usize, usize, usize, usize) {
        (
            self.row0 * patch_size,
            self.col0 * patch_size,
            self.rows * patch_size,
            self.cols * patch_size,
        )
    }

    pub fn covers_patch(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.rows).contains(&row) && (self.col0..self.col0 + self.cols).contains(&col)
    }
}

/// Result of [`enumerate_windows`]: the windows in row-major order, plus any patches no
/// window touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSet {
    pub windows: Vec<WindowSpec>,
    pub uncovered: Vec<(usize, usize)>,
}

impl WindowSet {
    pub fn has_gaps(&self) -> bool {
        !self.uncovered.is_empty()
    }
}

/// Start offsets along one axis: `0, s, 2s, ...` below `n - w`, then `n - w` itself.
fn axis_positions(n: usize, w: usize, stride: usize) -> Vec<usize> {
    let last = n - w;
    let mut out: Vec<usize> = (0..last).step_by(stride).collect();
    out.push(last);
    out
}

/// Slides a window of the given scale over `grid` with `stride` patches between starts.
///
/// The final position on each axis is clamped so the last window sits flush against the
/// grid edge. When the stride exceeds the window side some patches are skipped; they are
/// listed in [`WindowSet::uncovered`].
pub fn enumerate_windows(grid: &PatchGrid, scale: Scale, stride: usize) -> Result<WindowSet> {
    if stride == 0 {
        return Err(invalid_input!("window stride must be at least 1"));
    }
    let Some(side) = scale.side() else {
        return Ok(WindowSet {
            windows: vec![grid.full_window()],
            uncovered: Vec::new(),
        });
    };
    if side > grid.rows || side > grid.cols {
        return Err(invalid_input!(
            "{}x{side} window does not fit a {}x{} grid",
            side,
            grid.rows,
            grid.cols
        ));
    }
    let rows = axis_positions(grid.rows, side, stride);
    let cols = axis_positions(grid.cols, side, stride);
    let windows: Vec<WindowSpec> = rows
        .iter()
        .flat_map(|&row0| {
            cols.iter().map(move |&col0| WindowSpec {
                scale,
                row0,
                col0,
                rows: side,
                cols: side,
            })
        })
        .collect();

    let mut covered = vec![false; grid.rows * grid.cols];
    for w in &windows {
        for r in w.row0..w.row0 + w.rows {
            covered[r * grid.cols + w.col0..r * grid.cols + w.col0 + w.cols].fill(true);
        }
    }
    let uncovered = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| !covered[r * grid.cols + c])
        .collect();
    Ok(WindowSet { windows, uncovered })
}

/// Canonical size, patch size and per-scale strides shared by every pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub canonical_size: usize,
    pub patch_size: usize,
    pub stride_small: usize,
    pub stride_middle: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            canonical_size: DEFAULT_CANONICAL_SIZE,
            patch_size: DEFAULT_PATCH_SIZE,
            stride_small: 1,
            stride_middle: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.canonical_size == 0 || self.canonical_size % self.patch_size != 0 {
            return Err(crate::Error::InvalidConfig(format!(
                "canonical size {} must be a positive multiple of patch size {}",
                self.canonical_size, self.patch_size
            )));
        }
        if self.stride_small == 0 || self.stride_middle == 0 {
            return Err(crate::Error::InvalidConfig("window strides must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stride(&self, scale: Scale) -> usize {
        match scale {
            Scale::Small => self.stride_small,
            Scale::Middle => self.stride_middle,
            Scale::Image => 1,
        }
    }

    pub fn canonicalize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        resize_to_canonical(image, self.canonical_size, self.patch_size)
    }

    /// Windows of `scale` over `grid`; coverage gaps are logged.
    pub fn windows(&self, grid: &PatchGrid, scale: Scale) -> Result<Vec<WindowSpec>> {
        let set = enumerate_windows(grid, scale, self.stride(scale))?;
        if set.has_gaps() {
            log::debug!(
                "{} windows at stride {} leave {} of {} patches uncovered",
                scale.as_str(),
                self.stride(scale),
                set.uncovered.len(),
                grid.rows * grid.cols
            );
        }
        Ok(set.windows)
    }
}

/// A binary map aligned with an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_input!(
                "mask data has {} cells, expected {height}x{width}",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box of the set pixels, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    any = true;
                    top = top.min(y);
                    bottom = bottom.max(y);
                    left = left.min(x);
                    right = right.max(x);
                }
            }
        }
        any.then(|| BBox {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        })
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }
}

/// Axis-aligned box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Pixels added on each side of a box to make it square.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    /// Side of the square crops, in pixels.
    pub target: usize,
    /// Masks smaller than this fraction of the image area are dropped.
    pub min_area: f64,
    /// Box margin as a fraction of the longer box side, added on every side.
    pub margin: f64,
    /// Of two masks overlapping above this IoU only the larger is kept.
    pub dedupe_iou: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            target: DEFAULT_CANONICAL_SIZE,
            min_area: 0.001,
            margin: 0.05,
            dedupe_iou: 0.9,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_area) {
            return Err(crate::Error::InvalidConfig(format!(
                "min_area must lie in [0, 1), got {}",
                self.min_area
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) || self.target == 0 {
            return Err(crate::Error::InvalidConfig("crop margin must be >= 0 and target > 0".into()));
        }
        Ok(())
    }
}

/// One segmented object, padded to a square and resized, with the transform back to the
/// source image.
///
/// Source pixel centers map to crop pixel centers by
/// `crop = (source - origin + 0.5) * scale_factor - 0.5`, where `origin` is the top-left
/// corner of the padded square in source coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCrop {
    pub crop: ImageTensor,
    /// Object pixels in crop coordinates.
    pub mask: BinaryMask,
    /// Box around the object (margin included) in source pixels.
    pub bbox_original: BBox,
    pub pad: Padding,
    pub scale_factor: f64,
    /// Area of the source mask, in source pixels.
    pub source_area: usize,
}

impl ObjectCrop {
    /// Treats the whole image as a single object.
    pub fn whole_image(image: &ImageTensor, target: usize) -> Result<Self> {
        let full = BinaryMask::from_fn(image.height(), image.width(), |_, _| true);
        make_crop(image, &full, &CropConfig { target, margin: 0.0, ..CropConfig::default() }, image.mean_color())
    }

    fn origin(&self) -> (f64, f64) {
        (
            self.bbox_original.top as f64 - self.pad.top as f64,
            self.bbox_original.left as f64 - self.pad.left as f64,
        )
    }

    /// Continuous crop coordinate to source coordinate.
    pub fn to_original(&self, u: f64, v: f64) -> (f64, f64) {
        let (oy, ox) = self.origin();
        (
            oy + (u + 0.5) / self.scale_factor - 0.5,
            ox + (v + 0.5) / self.scale_factor - 0.5,
        )
    }

    /// Continuous source coordinate to crop coordinate.
    pub fn to_crop(&self, y: f64, x: f64) -> (f64, f64) {
        let (oy, ox) = self.origin();
        (
            (y - oy + 0.5) * self.scale_factor - 0.5,
            (x - ox + 0.5) * self.scale_factor - 0.5,
        )
    }

    /// Side of the padded square in source pixels.
    pub fn square_side(&self) -> usize {
        self.bbox_original.height + self.pad.top + self.pad.bottom
    }
}

fn make_crop(image: &ImageTensor, mask: &BinaryMask, cfg: &CropConfig, fill: [f32; 3]) -> Result<ObjectCrop> {
    let tight = mask.bbox().ok_or_else(|| invalid_input!("cannot crop an empty mask"))?;
    let m = (cfg.margin * tight.height.max(tight.width) as f64).round() as usize;
    let top = tight.top.saturating_sub(m);
    let left = tight.left.saturating_sub(m);
    let bottom = (tight.top + tight.height + m).min(image.height());
    let right = (tight.left + tight.width + m).min(image.width());
    let bbox = BBox {
        top,
        left,
        height: bottom - top,
        width: right - left,
    };
    let side = bbox.height.max(bbox.width);
    let (extra_y, extra_x) = (side - bbox.height, side - bbox.width);
    let pad = Padding {
        top: extra_y / 2,
        bottom: extra_y - extra_y / 2,
        left: extra_x / 2,
        right: extra_x - extra_x / 2,
    };

    let mut square = image.region(
        bbox.top as isize - pad.top as isize,
        bbox.left as isize - pad.left as isize,
        side,
        side,
        fill,
    );
    // the padding band is flat fill, not neighbouring image content
    for y in 0..side {
        for x in 0..side {
            let inside = (pad.top..pad.top + bbox.height).contains(&y) && (pad.left..pad.left + bbox.width).contains(&x);
            if !inside {
                square.set_pixel(y, x, fill);
            }
        }
    }
    let crop = square.resize_bilinear(cfg.target, cfg.target)?;
    let scale_factor = cfg.target as f64 / side as f64;

    let mut out = ObjectCrop {
        crop,
        mask: BinaryMask::empty(cfg.target, cfg.target),
        bbox_original: bbox,
        pad,
        scale_factor,
        source_area: mask.area(),
    };
    let mut crop_mask = BinaryMask::empty(cfg.target, cfg.target);
    for u in 0..cfg.target {
        for v in 0..cfg.target {
            let (y, x) = out.to_original(u as f64, v as f64);
            let (y, x) = (y.round(), x.round());
            let inside_box = y >= bbox.top as f64
                && x >= bbox.left as f64
                && y < (bbox.top + bbox.height) as f64
                && x < (bbox.left + bbox.width) as f64;
            if inside_box && mask.get(y as usize, x as usize) {
                crop_mask.set(u, v, true);
            }
        }
    }
    out.mask = crop_mask;
    Ok(out)
}

/// Turns segmentation masks into square single-object crops, largest object first.
///
/// Masks covering less than `min_area` of the image are dropped, and of any two masks
/// with IoU above `dedupe_iou` only the larger survives.
pub fn crop_objects(image: &ImageTensor, masks: &[BinaryMask], cfg: &CropConfig) -> Result<Vec<ObjectCrop>> {
    cfg.validate()?;
    for m in masks {
        if m.height() != image.height() || m.width() != image.width() {
            return Err(contract!(
                "mask is {}x{} but image is {}x{}",
                m.height(),
                m.width(),
                image.height(),
                image.width()
            ));
        }
    }
    let min_pixels = cfg.min_area * (image.height() * image.width()) as f64;
    let mut candidates: Vec<(usize, &BinaryMask)> = masks
        .iter()
        .map(|m| (m.area(), m))
        .filter(|&(area, _)| area > 0 && area as f64 >= min_pixels)
        .collect();
    // stable: equal areas keep segmenter order
    candidates.sort_by(|a, b| b.0.cmp(&a.0));

    let mut kept: Vec<&BinaryMask> = Vec::new();
    for (_, m) in candidates {
        if kept.iter().all(|k| k.iou(m) <= cfg.dedupe_iou) {
            kept.push(m);
        }
    }
    let fill = image.mean_color();
    kept.into_iter().map(|m| make_crop(image, m, cfg, fill)).collect()
}

/// Transports a crop-space score map back onto `canvas`, keeping the pixelwise maximum.
///
/// Only source pixels that land on the crop's object mask receive a value. Returns the
/// number of such pixels that fell outside the canvas and were dropped.
pub fn overlay_to_original(crop_map: &ScoreMap, crop: &ObjectCrop, canvas: &mut ScoreMap) -> Result<usize> {
    if crop_map.height() != crop.crop.height() || crop_map.width() != crop.crop.width() {
        return Err(contract!(
            "crop map is {}x{} but crop is {}x{}",
            crop_map.height(),
            crop_map.width(),
            crop.crop.height(),
            crop.crop.width()
        ));
    }
    let side = crop.square_side() as isize;
    let oy = crop.bbox_original.top as isize - crop.pad.top as isize;
    let ox = crop.bbox_original.left as isize - crop.pad.left as isize;
    let (ch, cw) = (crop_map.height() as f64, crop_map.width() as f64);
    let mut clipped = 0;
    for y in oy..oy + side {
        for x in ox..ox + side {
            let (u, v) = crop.to_crop(y as f64, x as f64);
            let (u, v) = (u.round().clamp(0.0, ch - 1.0) as usize, v.round().clamp(0.0, cw - 1.0) as usize);
            if !crop.mask.get(u, v) {
                continue;
            }
            if y < 0 || x < 0 || y as usize >= canvas.height() || x as usize >= canvas.width() {
                clipped += 1;
                continue;
            }
            let value = crop_map.get(u, v);
            canvas.max_assign(y as usize, x as usize, value);
        }
    }
    Ok(clipped)
}
