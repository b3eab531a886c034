//! Contracts for the models the engine leans on (image encoder, text encoder,
//! segmenter), an offline mock of each, and an HTTP client for a model server.
//!
//! Every embedding crossing this boundary is an [`Embedding`], which cannot be
//! constructed without being unit-norm.

mod mock;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decompose::{BinaryMask, PatchGrid, WindowSpec};
use crate::error::{contract, invalid_input, Error, Result};
use crate::image::ImageTensor;

pub use mock::{MockImageEncoder, MockSegmenter, MockTextEncoder, MOCK_FEATURES};

/// Tolerance on `|norm - 1|` for an embedding to count as unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// A unit-norm `f32` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Scales `values` to unit length. Fails on zero or non-finite input.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        let norm = l2(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(contract!("cannot normalize a vector with norm {norm}"));
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    /// Accepts `values` only if already unit-norm within [`UNIT_NORM_TOLERANCE`].
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        let norm = l2(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(contract!("embedding norm {norm} is not 1 within {UNIT_NORM_TOLERANCE}"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    /// Dot product in `f64`, which for unit vectors is the cosine similarity.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot64(&self.0, &other.0)
    }
}

pub(crate) fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

#[inline]
pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Encoder output for a whole image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbeddings {
    pub class_token: Embedding,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows * cols` entries.
    pub patch_tokens: Vec<Embedding>,
}

impl ImageEmbeddings {
    pub fn patch(&self, row: usize, col: usize) -> &Embedding {
        &self.patch_tokens[row * self.cols + col]
    }
}

/// Text embeddings of the "normal" and "anomalous" prompt groups for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingPair {
    pub normal: Embedding,
    pub anomal: Embedding,
}

impl TextEmbeddingPair {
    /// Both sides equal: every text score becomes exactly 0.5.
    pub fn symmetric(e: Embedding) -> Self {
        Self {
            normal: e.clone(),
            anomal: e,
        }
    }
}

/// Prompt templates; `{c}` is replaced by the class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub normal: Vec<String>,
    pub anomaly: Vec<String>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            normal: owned(&["a photo of a {c}", "a photo of a flawless {c}", "a photo of a perfect {c}"]),
            anomaly: owned(&[
                "a photo of a damaged {c}",
                "a photo of a {c} with a defect",
                "a photo of a broken {c}",
            ]),
        }
    }
}

impl PromptSet {
    fn render(templates: &[String], class_name: &str) -> Vec<String> {
        templates.iter().map(|t| t.replace("{c}", class_name)).collect()
    }
}

/// Identity of an image encoder, persisted alongside memory banks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub dim: usize,
    pub patch_size: usize,
    pub deterministic: bool,
}

impl ProviderDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.dim < 8 || self.patch_size == 0 {
            return Err(contract!("bad provider descriptor {self:?}: need a name, dim >= 8, patch_size > 0"));
        }
        Ok(())
    }
}

/// Vision encoder producing window class tokens and patch tokens.
pub trait ImageEncoder: Send + Sync {
    fn descriptor(&self) -> &ProviderDescriptor;

    /// Embedding of the image restricted to `window`.
    fn embed_window(&self, image: &ImageTensor, window: &WindowSpec) -> Result<Embedding>;

    /// Batched [`embed_window`](Self::embed_window); output order follows `windows`.
    fn embed_windows(&self, image: &ImageTensor, windows: &[WindowSpec]) -> Result<Vec<Embedding>> {
        windows.iter().map(|w| self.embed_window(image, w)).collect()
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<ImageEmbeddings>;

    /// Class token of the unmasked image.
    fn embed_class_token(&self, image: &ImageTensor) -> Result<Embedding> {
        Ok(self.embed_image(image)?.class_token)
    }
}

pub trait TextEncoder: Send + Sync {
    /// One embedding per input string, in order.
    fn embed_templates(&self, texts: &[String]) -> Result<Vec<Embedding>>;
}

pub trait Segmenter: Send + Sync {
    /// Object masks, each the shape of `image`. An empty list is a valid answer.
    fn segment(&self, image: &ImageTensor) -> Result<Vec<BinaryMask>>;
}

/// Checks that `window` is a valid window of `image` under `patch_size`.
pub fn check_window(image: &ImageTensor, window: &WindowSpec, patch_size: usize) -> Result<PatchGrid> {
    let grid = PatchGrid::for_image(image, patch_size)?;
    if !grid.contains(window) {
        return Err(contract!("window {window:?} outside the {}x{} patch grid", grid.rows, grid.cols));
    }
    Ok(grid)
}

fn mean_of(embeddings: &[Embedding]) -> Result<Embedding> {
    let dim = embeddings[0].dim();
    let mut acc = vec![0f64; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(contract!("text embeddings disagree on dimension: {dim} vs {}", e.dim()));
        }
        for (a, &v) in acc.iter_mut().zip(e.as_slice()) {
            *a += f64::from(v);
        }
    }
    Embedding::normalized(acc.into_iter().map(|v| (v / embeddings.len() as f64) as f32).collect())
}

/// Embeds the rendered prompt groups and averages each group into one unit vector.
pub fn embed_text(encoder: &dyn TextEncoder, class_name: &str, prompts: &PromptSet) -> Result<TextEmbeddingPair> {
    if class_name.trim().is_empty() {
        return Err(invalid_input!("class name must be non-empty"));
    }
    if prompts.normal.is_empty() || prompts.anomaly.is_empty() {
        return Err(Error::InvalidConfig("prompt set needs at least one normal and one anomaly template".into()));
    }
    let normal = encoder.embed_templates(&PromptSet::render(&prompts.normal, class_name))?;
    let anomal = encoder.embed_templates(&PromptSet::render(&prompts.anomaly, class_name))?;
    if normal.len() != prompts.normal.len() || anomal.len() != prompts.anomaly.len() {
        return Err(contract!("text encoder returned the wrong number of embeddings"));
    }
    // a single template passes through untouched
    let group = |mut v: Vec<Embedding>| if v.len() == 1 { Ok(v.remove(0)) } else { mean_of(&v) };
    Ok(TextEmbeddingPair {
        normal: group(normal)?,
        anomal: group(anomal)?,
    })
}

/// The three providers a pipeline needs, shareable across threads.
#[derive(Clone)]
pub struct Providers {
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
    pub segmenter: Arc<dyn Segmenter>,
}

impl Providers {
    /// Deterministic offline providers seeded by `seed`.
    pub fn mock(seed: u64) -> Self {
        Self {
            image: Arc::new(MockImageEncoder::new(seed, mock::DEFAULT_MOCK_DIM, crate::decompose::DEFAULT_PATCH_SIZE)),
            text: Arc::new(MockTextEncoder::new(seed, mock::DEFAULT_MOCK_DIM)),
            segmenter: Arc::new(MockSegmenter::default()),
        }
    }

    /// All three providers backed by one model server client.
    pub fn remote(client: wire::WireClient) -> Self {
        let client = Arc::new(client);
        Self {
            image: client.clone(),
            text: client.clone(),
            segmenter: client,
        }
    }

    pub fn descriptor(&self) -> &ProviderDescriptor {
        self.image.descriptor()
    }
}

impl std::fmt::Debug for Providers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Providers").field("image", self.image.descriptor()).finish_non_exhaustive()
    }
}
