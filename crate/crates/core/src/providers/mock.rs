//! Deterministic stand-ins for the vision encoder, text encoder and segmenter.
//!
//! The mock image encoder looks only at the pixels inside the requested window: it
//! builds a small feature vector (per-channel mean and variance, plus a 4x4 grid of
//! per-channel cell means), multiplies it by a seeded Gaussian matrix and normalizes.
//! Pixels outside a window can therefore never influence that window's embedding.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{check_window, Embedding, ImageEmbeddings, ImageEncoder, ProviderDescriptor, Segmenter, TextEncoder};
use crate::decompose::{BinaryMask, PatchGrid, WindowSpec};
use crate::error::Result;
use crate::image::ImageTensor;

pub(crate) const DEFAULT_MOCK_DIM: usize = 64;

const CELLS: usize = 4;
/// Length of the feature vector fed to the projection.
pub const MOCK_FEATURES: usize = 3 + 3 + CELLS * CELLS * 3 + 1;
const VARIANCE_WEIGHT: f64 = 8.0;
const BIAS: f64 = 0.1;

/// Seeded random-projection image encoder.
#[derive(Clone, Debug)]
pub struct MockImageEncoder {
    descriptor: ProviderDescriptor,
    projection: Vec<f64>,
}

impl MockImageEncoder {
    pub fn new(seed: u64, dim: usize, patch_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * MOCK_FEATURES).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self {
            descriptor: ProviderDescriptor {
                name: format!("mock-projection-{seed}"),
                dim,
                patch_size,
                deterministic: true,
            },
            projection,
        }
    }

    /// Feature vector of the pixel rectangle `(top, left, height, width)`.
    pub fn features(image: &ImageTensor, (top, left, height, width): (usize, usize, usize, usize)) -> [f64; MOCK_FEATURES] {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut cells = [0f64; CELLS * CELLS * 3];
        let mut cell_counts = [0usize; CELLS * CELLS];
        for y in 0..height {
            let cy = y * CELLS / height;
            for x in 0..width {
                let cx = x * CELLS / width;
                let px = image.pixel(top + y, left + x);
                let cell = cy * CELLS + cx;
                cell_counts[cell] += 1;
                for c in 0..3 {
                    let v = f64::from(px[c]);
                    sum[c] += v;
                    sq[c] += v * v;
                    cells[cell * 3 + c] += v;
                }
            }
        }
        let n = (height * width) as f64;
        let mut f = [0f64; MOCK_FEATURES];
        for c in 0..3 {
            let mean = sum[c] / n;
            f[c] = mean - 0.5;
            f[3 + c] = VARIANCE_WEIGHT * (sq[c] / n - mean * mean).max(0.0);
        }
        for cell in 0..CELLS * CELLS {
            let count = cell_counts[cell].max(1) as f64;
            for c in 0..3 {
                f[6 + cell * 3 + c] = cells[cell * 3 + c] / count - 0.5;
            }
        }
        f[MOCK_FEATURES - 1] = BIAS;
        f
    }

    fn project(&self, features: &[f64; MOCK_FEATURES]) -> Result<Embedding> {
        let out = self
            .projection
            .chunks_exact(MOCK_FEATURES)
            .map(|row| row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect();
        Embedding::normalized(out)
    }

    fn embed_rect(&self, image: &ImageTensor, rect: (usize, usize, usize, usize)) -> Result<Embedding> {
        self.project(&Self::features(image, rect))
    }
}

impl ImageEncoder for MockImageEncoder {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn embed_window(&self, image: &ImageTensor, window: &WindowSpec) -> Result<Embedding> {
        check_window(image, window, self.descriptor.patch_size)?;
        self.embed_rect(image, window.pixel_rect(self.descriptor.patch_size))
    }

    fn embed_windows(&self, image: &ImageTensor, windows: &[WindowSpec]) -> Result<Vec<Embedding>> {
        windows.par_iter().map(|w| self.embed_window(image, w)).collect()
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<ImageEmbeddings> {
        let grid = PatchGrid::for_image(image, self.descriptor.patch_size)?;
        let p = grid.patch_size;
        let class_token = self.embed_window(image, &grid.full_window())?;
        let patch_tokens = (0..grid.rows * grid.cols)
            .into_par_iter()
            .map(|i| self.embed_rect(image, ((i / grid.cols) * p, (i % grid.cols) * p, p, p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageEmbeddings {
            class_token,
            rows: grid.rows,
            cols: grid.cols,
            patch_tokens,
        })
    }

    fn embed_class_token(&self, image: &ImageTensor) -> Result<Embedding> {
        let grid = PatchGrid::for_image(image, self.descriptor.patch_size)?;
        self.embed_window(image, &grid.full_window())
    }
}

/// Text encoder mapping each string to a seeded Gaussian direction.
#[derive(Clone, Debug)]
pub struct MockTextEncoder {
    seed: u64,
    dim: usize,
}

impl MockTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn embed_one(&self, text: &str) -> Result<Embedding> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        Embedding::normalized((0..self.dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
    }
}

impl TextEncoder for MockTextEncoder {
    fn embed_templates(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}

/// Segments bright objects on a dark background.
///
/// Pixels whose luma exceeds `threshold` are foreground; each 8-connected foreground
/// component becomes one mask, with enclosed background holes filled in.
#[derive(Clone, Debug)]
pub struct MockSegmenter {
    pub threshold: f32,
}

impl Default for MockSegmenter {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

const NEIGHBOURS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
const NEIGHBOURS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Labels connected components of cells where `member` holds; returns labels (0 = none)
/// and the number of components. Labels follow row-major order of first pixel.
fn label_components(h: usize, w: usize, member: &[bool], neighbours: &[(isize, isize)]) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !member[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in neighbours {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if member[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next)
}

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &ImageTensor) -> Result<Vec<BinaryMask>> {
        let (h, w) = (image.height(), image.width());
        let fg: Vec<bool> = image
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] > self.threshold)
            .collect();
        let (mut labels, count) = label_components(h, w, &fg, &NEIGHBOURS_8);
        if count == 0 {
            return Ok(Vec::new());
        }

        // background regions that never touch the border are holes
        let bg: Vec<bool> = fg.iter().map(|&f| !f).collect();
        let (bg_labels, bg_count) = label_components(h, w, &bg, &NEIGHBOURS_4);
        let mut touches_border = vec![false; bg_count as usize + 1];
        for y in 0..h {
            for x in 0..w {
                if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                    touches_border[bg_labels[y * w + x] as usize] = true;
                }
            }
        }
        let mut owner = vec![0u32; bg_count as usize + 1];
        for y in 0..h {
            for x in 0..w {
                let hole = bg_labels[y * w + x];
                if hole == 0 || touches_border[hole as usize] || owner[hole as usize] != 0 {
                    continue;
                }
                for &(dy, dx) in &NEIGHBOURS_4 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        let l = labels[ny as usize * w + nx as usize];
                        if l != 0 {
                            owner[hole as usize] = l;
                            break;
                        }
                    }
                }
            }
        }
        for (i, l) in labels.iter_mut().enumerate() {
            let hole = bg_labels[i] as usize;
            if *l == 0 && hole != 0 && owner[hole] != 0 {
                *l = owner[hole];
            }
        }

        (1..=count)
            .map(|k| BinaryMask::new(h, w, labels.iter().map(|&l| l == k).collect()))
            .collect()
    }
}
