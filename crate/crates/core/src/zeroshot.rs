//! Zero-shot detection: window embeddings scored against prompt embeddings.
//!
//! Each segmented object is square-cropped and decomposed into small, middle and image
//! windows. A window's text score is the two-way softmax of its cosine similarity to the
//! "normal" and "anomalous" prompt embeddings. Small and middle window scores become
//! per-object maps (harmonic mean on overlaps) that are overlaid back onto the image.
//! The image score adds the full-image score to the best object score.

use serde::{Deserialize, Serialize};

use crate::decompose::{crop_objects, overlay_to_original, CropConfig, ObjectCrop, PatchGrid, Scale, WindowConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::providers::{embed_text, Embedding, ImageEncoder, PromptSet, Providers, TextEmbeddingPair};
use crate::scoremap::{accumulate_harmonic, fuse_zero_shot, ScoreMap, WindowScore, ZeroShotWeights};

/// Probability-like anomaly score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TextScore(f64);

impl TextScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `exp(ca / t) / (exp(cn / t) + exp(ca / t))` with `cn`, `ca` the cosine similarities of
/// `e` to the normal and anomalous prompt embeddings.
pub fn text_align_score(e: &Embedding, pair: &TextEmbeddingPair, temperature: f64) -> TextScore {
    let cn = e.cosine(&pair.normal);
    let ca = e.cosine(&pair.anomal);
    // same quantity, written to avoid overflow
    TextScore(1.0 / (1.0 + ((cn - ca) / temperature).exp()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    pub windows: WindowConfig,
    pub crop: CropConfig,
    /// Softmax temperature of the text alignment.
    pub temperature: f64,
    pub weights: ZeroShotWeights,
    /// Also window-score the uncropped image at small and middle scale, merged by max.
    pub full_image_windows: bool,
    pub prompts: PromptSet,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self {
            windows: WindowConfig::default(),
            crop: CropConfig::default(),
            temperature: 0.01,
            weights: ZeroShotWeights::default(),
            full_image_windows: false,
            prompts: PromptSet::default(),
        }
    }
}

impl ZeroShotConfig {
    pub fn validate(&self) -> Result<()> {
        self.windows.validate()?;
        self.crop.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.weights.small >= 0.0 && self.weights.mid >= 0.0) {
            return Err(Error::InvalidConfig("zero-shot weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Crop settings with the target side pinned to the canonical size.
    pub fn crop_config(&self) -> CropConfig {
        CropConfig {
            target: self.windows.canonical_size,
            ..self.crop.clone()
        }
    }
}

/// Zero-shot outputs for one object (or for the whole image).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectScore {
    /// Mean of the image-window and class-token text scores.
    pub score: f64,
    pub small: ScoreMap,
    pub mid: ScoreMap,
}

#[derive(Clone, Debug)]
pub struct ObjectResult {
    pub crop: ObjectCrop,
    pub score: f64,
    pub small: ScoreMap,
    pub mid: ScoreMap,
}

#[derive(Clone, Debug)]
pub struct ZeroShotResult {
    /// `a_multi + max(object scores)`.
    pub image_score: f64,
    pub a_multi: f64,
    /// Final map at canonical resolution.
    pub map: ScoreMap,
    pub small: ScoreMap,
    pub mid: ScoreMap,
    pub per_object: Vec<ObjectResult>,
    /// Object pixels dropped while overlaying crops onto the canvas.
    pub clipped_pixels: usize,
}

impl ZeroShotResult {
    pub fn max_object_score(&self) -> f64 {
        self.per_object.iter().map(|o| o.score).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Recomputes the image score from its parts.
    pub fn recompose(&self) -> f64 {
        self.a_multi + self.max_object_score()
    }
}

/// Text score of a whole canonical view: the mean of its image-scale window score and
/// its unmasked class-token score.
pub fn view_text_score(
    image: &ImageTensor,
    pair: &TextEmbeddingPair,
    encoder: &dyn ImageEncoder,
    cfg: &ZeroShotConfig,
) -> Result<f64> {
    let grid = PatchGrid::for_image(image, cfg.windows.patch_size)?;
    let window = encoder.embed_window(image, &grid.full_window())?;
    let class = encoder.embed_class_token(image)?;
    let w = text_align_score(&window, pair, cfg.temperature).value();
    let c = text_align_score(&class, pair, cfg.temperature).value();
    Ok(0.5 * (w + c))
}

fn scale_map(
    image: &ImageTensor,
    grid: &PatchGrid,
    scale: Scale,
    pair: &TextEmbeddingPair,
    encoder: &dyn ImageEncoder,
    cfg: &ZeroShotConfig,
) -> Result<ScoreMap> {
    let windows = cfg.windows.windows(grid, scale)?;
    let embeddings = encoder.embed_windows(image, &windows)?;
    let scores: Vec<WindowScore> = windows
        .iter()
        .zip(&embeddings)
        .map(|(w, e)| WindowScore {
            window: *w,
            score: text_align_score(e, pair, cfg.temperature).value(),
        })
        .collect();
    accumulate_harmonic(&scores, grid)
}

/// Scores one canonical-size view at every scale.
pub fn score_view(
    image: &ImageTensor,
    pair: &TextEmbeddingPair,
    encoder: &dyn ImageEncoder,
    cfg: &ZeroShotConfig,
) -> Result<ObjectScore> {
    let grid = PatchGrid::for_image(image, cfg.windows.patch_size)?;
    Ok(ObjectScore {
        score: view_text_score(image, pair, encoder, cfg)?,
        small: scale_map(image, &grid, Scale::Small, pair, encoder, cfg)?,
        mid: scale_map(image, &grid, Scale::Middle, pair, encoder, cfg)?,
    })
}

/// Scores one object crop; maps are in crop coordinates.
pub fn score_single_object(
    crop: &ObjectCrop,
    pair: &TextEmbeddingPair,
    encoder: &dyn ImageEncoder,
    cfg: &ZeroShotConfig,
) -> Result<ObjectScore> {
    score_view(&crop.crop, pair, encoder, cfg)
}

/// Segments a canonical image into object crops, falling back to the whole image.
pub fn segment_crops(canonical: &ImageTensor, providers: &Providers, crop: &CropConfig) -> Result<Vec<ObjectCrop>> {
    let masks = providers.segmenter.segment(canonical)?;
    let crops = crop_objects(canonical, &masks, crop)?;
    if crops.is_empty() {
        return Ok(vec![ObjectCrop::whole_image(canonical, crop.target)?]);
    }
    Ok(crops)
}

/// Full zero-shot pipeline for one image against a precomputed prompt pair.
pub fn run_zero_shot_with_pair(
    image: &ImageTensor,
    pair: &TextEmbeddingPair,
    providers: &Providers,
    cfg: &ZeroShotConfig,
) -> Result<ZeroShotResult> {
    cfg.validate()?;
    let encoder = providers.image.as_ref();
    let canonical = cfg.windows.canonicalize(image)?;
    let (h, w) = (canonical.height(), canonical.width());

    let a_multi = view_text_score(&canonical, pair, encoder, cfg)?;
    let crops = segment_crops(&canonical, providers, &cfg.crop_config())?;

    let mut small = ScoreMap::zeros(h, w);
    let mut mid = ScoreMap::zeros(h, w);
    let mut clipped_pixels = 0;
    let mut per_object = Vec::with_capacity(crops.len());
    for crop in crops {
        let obj = score_single_object(&crop, pair, encoder, cfg)?;
        clipped_pixels += overlay_to_original(&obj.small, &crop, &mut small)?;
        clipped_pixels += overlay_to_original(&obj.mid, &crop, &mut mid)?;
        per_object.push(ObjectResult {
            crop,
            score: obj.score,
            small: obj.small,
            mid: obj.mid,
        });
    }
    if cfg.full_image_windows {
        let whole = score_view(&canonical, pair, encoder, cfg)?;
        small = small.max_with(&whole.small)?;
        mid = mid.max_with(&whole.mid)?;
    }

    let max_single = per_object.iter().map(|o| o.score).fold(f64::NEG_INFINITY, f64::max);
    let image_score = a_multi + max_single;
    let map = fuse_zero_shot(&small, &mid, image_score, cfg.weights)?;
    Ok(ZeroShotResult {
        image_score,
        a_multi,
        map,
        small,
        mid,
        per_object,
        clipped_pixels,
    })
}

/// Embeds the class prompts, then runs [`run_zero_shot_with_pair`].
pub fn run_zero_shot(
    image: &ImageTensor,
    class_name: &str,
    providers: &Providers,
    cfg: &ZeroShotConfig,
) -> Result<ZeroShotResult> {
    let pair = embed_text(providers.text.as_ref(), class_name, &cfg.prompts)?;
    run_zero_shot_with_pair(image, &pair, providers, cfg)
}
