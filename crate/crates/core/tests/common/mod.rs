#![allow(dead_code)]

use std::sync::Arc;

use msmc::decompose::{BinaryMask, PatchGrid, WindowSpec};
use msmc::providers::{ImageEmbeddings, ImageEncoder, MockSegmenter, MockTextEncoder, Segmenter};
use msmc::{Embedding, ImageTensor, ProviderDescriptor, Providers, Result, TextEmbeddingPair};

pub const DIM: usize = 8;

pub fn axis(i: usize) -> Embedding {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    Embedding::from_unit(v).unwrap()
}

/// `cos(t) e0 + sin(t) e1`.
pub fn planar(t: f64) -> Embedding {
    let mut v = vec![0.0; DIM];
    v[0] = t.cos() as f32;
    v[1] = t.sin() as f32;
    Embedding::normalized(v).unwrap()
}

/// Prompt pair with normal = e0 and anomalous = e1.
pub fn axis_pair() -> TextEmbeddingPair {
    TextEmbeddingPair { normal: axis(0), anomal: axis(1) }
}

/// An embedding whose text score against [`axis_pair`] at temperature `tau` is `score`.
pub fn embedding_with_score(score: f64, tau: f64) -> Embedding {
    // need cos(t) - sin(t) = tau * ln(1/score - 1), i.e. sqrt(2) cos(t + pi/4) = d
    let d = tau * (1.0 / score - 1.0).ln();
    planar((d / std::f64::consts::SQRT_2).acos() - std::f64::consts::FRAC_PI_4)
}

type WindowFn = dyn Fn(&ImageTensor, &WindowSpec) -> Embedding + Send + Sync;

/// Encoder defined by a closure over (image, window). Patch tokens are the closure applied
/// to 1x1 windows, the class token to the full window.
pub struct FnEncoder {
    descriptor: ProviderDescriptor,
    f: Box<WindowFn>,
}

impl FnEncoder {
    pub fn new(f: impl Fn(&ImageTensor, &WindowSpec) -> Embedding + Send + Sync + 'static) -> Self {
        Self {
            descriptor: ProviderDescriptor { name: "stub".into(), dim: DIM, patch_size: 16, deterministic: true },
            f: Box::new(f),
        }
    }
}

impl ImageEncoder for FnEncoder {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn embed_window(&self, image: &ImageTensor, window: &WindowSpec) -> Result<Embedding> {
        msmc::providers::check_window(image, window, 16)?;
        Ok((self.f)(image, window))
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<ImageEmbeddings> {
        let grid = PatchGrid::for_image(image, 16)?;
        let mut patch_tokens = Vec::new();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let w = WindowSpec { scale: msmc::Scale::Image, row0: r, col0: c, rows: 1, cols: 1 };
                patch_tokens.push((self.f)(image, &w));
            }
        }
        Ok(ImageEmbeddings {
            class_token: (self.f)(image, &grid.full_window()),
            rows: grid.rows,
            cols: grid.cols,
            patch_tokens,
        })
    }
}

pub struct NoObjects;

impl Segmenter for NoObjects {
    fn segment(&self, _: &ImageTensor) -> Result<Vec<BinaryMask>> {
        Ok(Vec::new())
    }
}

pub fn stub_providers(encoder: FnEncoder, segmenter: Arc<dyn Segmenter>) -> Providers {
    Providers {
        image: Arc::new(encoder),
        text: Arc::new(MockTextEncoder::new(0, DIM)),
        segmenter,
    }
}

pub fn mock_segmenter() -> Arc<dyn Segmenter> {
    Arc::new(MockSegmenter::default())
}

/// Deterministic dark textured background with bright disks at `centers` (radius `r`).
pub fn disks(side: usize, centers: &[(f64, f64)], r: f64) -> ImageTensor {
    ImageTensor::from_fn(side, side, |y, x| {
        let inside = centers.iter().any(|&(cy, cx)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r);
        if inside {
            let t = ((x / 4 + y / 4) % 5) as f32 / 20.0;
            [0.75 + t, 0.8, 0.65 + t]
        } else {
            let t = ((x / 6 + 2 * (y / 6)) % 4) as f32 / 40.0;
            [0.1 + t, 0.15, 0.2 + t]
        }
    })
    .unwrap()
}

/// Replaces a `side x side` square at (top, left) with seeded uniform noise.
pub fn with_noise(image: &ImageTensor, top: usize, left: usize, side: usize, seed: u64) -> ImageTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for y in top..top + side {
        for x in left..left + side {
            out.set_pixel(y, x, [rng.random(), rng.random(), rng.random()]);
        }
    }
    out
}
