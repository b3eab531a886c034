//! RGB image tensors and the pixel-level transforms the pipeline needs.

use crate::error::{invalid_input, Result};

/// Number of channels every [`ImageTensor`] carries.
pub const CHANNELS: usize = 3;

/// An RGB image with `f32` samples in `[0, 1]`, stored row-major as `HWC`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Wraps raw `HWC` samples, checking the shape and that every sample is a finite value in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_input!("image must be non-empty, got {height}x{width}"));
        }
        if data.len() != height * width * CHANNELS {
            return Err(invalid_input!(
                "expected {} samples for a {height}x{width} RGB image, got {}",
                height * width * CHANNELS,
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input!("sample {bad} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A constant-color image.
    pub fn filled(height: usize, width: usize, color: [f32; 3]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_input!("image must be non-empty, got {height}x{width}"));
        }
        let data = color.iter().copied().cycle().take(height * width * CHANNELS).collect();
        Self::new(height, width, data)
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel. Samples are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        for c in 0..CHANNELS {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Per-channel mean over the whole image.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width) as f64;
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    /// Copies the `height x width` region starting at `(top, left)`. Pixels falling outside the
    /// image take `fill`.
    pub fn region(&self, top: isize, left: isize, height: usize, width: usize, fill: [f32; 3]) -> Self {
        let mut out = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height as isize {
            for x in 0..width as isize {
                let (sy, sx) = (top + y, left + x);
                if sy >= 0 && sx >= 0 && (sy as usize) < self.height && (sx as usize) < self.width {
                    out.extend_from_slice(&self.pixel(sy as usize, sx as usize));
                } else {
                    out.extend_from_slice(&fill);
                }
            }
        }
        Self {
            height,
            width,
            data: out,
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_input!("resize target must be non-empty, got {height}x{width}"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let ys = axis_taps(self.height, height);
        let xs = axis_taps(self.width, width);
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let (p00, p01) = (self.pixel(y0, x0), self.pixel(y0, x1));
                let (p10, p11) = (self.pixel(y1, x0), self.pixel(y1, x1));
                for c in 0..CHANNELS {
                    let top = lerp(p00[c], p01[c], wx);
                    let bottom = lerp(p10[c], p11[c], wx);
                    data.push(lerp(top, bottom, wy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(|y, x| Some((y as f64, (self.width - 1 - x) as f64)), [0.0; 3])
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(|y, x| Some(((self.height - 1 - y) as f64, x as f64)), [0.0; 3])
    }

    /// Integer translation; vacated pixels take `fill`.
    pub fn translate(&self, dx: i32, dy: i32, fill: [f32; 3]) -> Self {
        let (h, w) = (self.height as i64, self.width as i64);
        self.remap(
            |y, x| {
                let sy = y as i64 - i64::from(dy);
                let sx = x as i64 - i64::from(dx);
                (sy >= 0 && sy < h && sx >= 0 && sx < w).then_some((sy as f64, sx as f64))
            },
            fill,
        )
    }

    /// Rotation about the image center by `degrees` (counter-clockwise), bilinear sampling.
    /// Pixels whose source falls outside the image take `fill`.
    pub fn rotate(&self, degrees: f64, fill: [f32; 3]) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let (h, w) = (self.height as f64, self.width as f64);
        self.remap(
            |y, x| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                // inverse rotation of the destination coordinate
                let sx = cos * dx - sin * dy + cx;
                let sy = sin * dx + cos * dy + cy;
                (sy > -0.5 && sy < h - 0.5 && sx > -0.5 && sx < w - 0.5).then_some((sy, sx))
            },
            fill,
        )
    }

    fn remap(&self, source: impl Fn(usize, usize) -> Option<(f64, f64)>, fill: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                match source(y, x) {
                    Some((sy, sx)) => data.extend_from_slice(&self.sample(sy, sx)),
                    None => data.extend_from_slice(&fill),
                }
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    fn sample(&self, y: f64, x: f64) -> [f32; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (wy, wx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let (p00, p01, p10, p11) = (
            self.pixel(y0, x0),
            self.pixel(y0, x1),
            self.pixel(y1, x0),
            self.pixel(y1, x1),
        );
        let mut out = [0f32; 3];
        for c in 0..CHANNELS {
            out[c] = lerp(lerp(p00[c], p01[c], wx), lerp(p10[c], p11[c], wx), wy).clamp(0.0, 1.0);
        }
        out
    }
}

// `a + (b - a) * w` keeps constant fields exactly constant.
#[inline]
fn lerp(a: f32, b: f32, w: f32) -> f32 {
    a + (b - a) * w
}

/// For each destination index: the two source taps and the weight of the second one.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}
