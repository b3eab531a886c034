//! Few-shot detection: test embeddings compared against the memory banks.
//!
//! Every test window and patch token is matched to its nearest bank row; the cosine
//! distance is its score. Global maps compare the whole test image against the global
//! banks, individual maps compare each object crop against the individual banks and are
//! overlaid back onto the image. The image score adds the zero-shot text scores (unless
//! `text_free`) to the peak of each fused map.

use serde::{Deserialize, Serialize};

use crate::decompose::{overlay_to_original, CropConfig, ObjectCrop, PatchGrid, Scale, WindowConfig};
use crate::error::{contract, invalid_input, Error, Result};
use crate::image::ImageTensor;
use crate::membank::{BankKind, MemoryBanks};
use crate::providers::{embed_text, ImageEncoder, PromptSet, Providers, TextEmbeddingPair};
use crate::scoremap::{
    accumulate_harmonic, fuse_few_shot_final, fuse_three_scale, max_pixel, paint_patches, FinalWeights, ScaleWeights,
    ScoreMap, WindowScore,
};
use crate::zeroshot::{segment_crops, view_text_score, ZeroShotConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotConfig {
    pub windows: WindowConfig,
    pub crop: CropConfig,
    /// Softmax temperature of the text terms.
    pub temperature: f64,
    pub global_weights: ScaleWeights,
    pub indiv_weights: ScaleWeights,
    pub final_weights: FinalWeights,
    /// Drop both text terms from the image score.
    pub text_free: bool,
    pub prompts: PromptSet,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            windows: WindowConfig::default(),
            crop: CropConfig::default(),
            temperature: 0.01,
            global_weights: ScaleWeights::GLOBAL,
            indiv_weights: ScaleWeights::INDIVIDUAL,
            final_weights: FinalWeights::default(),
            text_free: false,
            prompts: PromptSet::default(),
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        self.text_config().validate()?;
        let weights = [
            self.global_weights.0,
            self.global_weights.1,
            self.global_weights.2,
            self.indiv_weights.0,
            self.indiv_weights.1,
            self.indiv_weights.2,
            self.final_weights.global,
            self.final_weights.indiv,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("few-shot weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The zero-shot settings used for the text terms.
    pub fn text_config(&self) -> ZeroShotConfig {
        ZeroShotConfig {
            windows: self.windows.clone(),
            crop: self.crop.clone(),
            temperature: self.temperature,
            prompts: self.prompts.clone(),
            ..ZeroShotConfig::default()
        }
    }

    fn crop_config(&self) -> CropConfig {
        CropConfig {
            target: self.windows.canonical_size,
            ..self.crop.clone()
        }
    }
}

/// Distance maps of one bank kind, one per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMaps {
    pub small: ScoreMap,
    pub middle: ScoreMap,
    pub image: ScoreMap,
}

impl ScaleMaps {
    fn zeros(h: usize, w: usize) -> Self {
        Self {
            small: ScoreMap::zeros(h, w),
            middle: ScoreMap::zeros(h, w),
            image: ScoreMap::zeros(h, w),
        }
    }

    pub fn get(&self, scale: Scale) -> &ScoreMap {
        match scale {
            Scale::Small => &self.small,
            Scale::Middle => &self.middle,
            Scale::Image => &self.image,
        }
    }

    pub fn fuse(&self, w: ScaleWeights) -> Result<ScoreMap> {
        fuse_three_scale(&self.small, &self.middle, &self.image, w)
    }
}

/// Per-scale distance maps at canonical resolution for both bank kinds.
#[derive(Clone, Debug)]
pub struct BankScores {
    pub global: ScaleMaps,
    pub indiv: ScaleMaps,
    pub crops: Vec<ObjectCrop>,
    /// Object pixels dropped while overlaying crop maps onto the canvas.
    pub clipped_pixels: usize,
}

/// Distance maps of one canonical view against one kind of bank.
fn view_maps(view: &ImageTensor, banks: &MemoryBanks, kind: BankKind, encoder: &dyn ImageEncoder, windows: &WindowConfig) -> Result<ScaleMaps> {
    let grid = PatchGrid::for_image(view, windows.patch_size)?;
    let window_map = |scale: Scale| -> Result<ScoreMap> {
        let specs = windows.windows(&grid, scale)?;
        let embeddings = encoder.embed_windows(view, &specs)?;
        let hits = banks.get(kind, scale).query_many(&embeddings)?;
        let scores: Vec<WindowScore> = specs
            .iter()
            .zip(&hits)
            .map(|(w, h)| WindowScore {
                window: *w,
                score: h.distance,
            })
            .collect();
        accumulate_harmonic(&scores, &grid)
    };
    let small = window_map(Scale::Small)?;
    let middle = window_map(Scale::Middle)?;
    let tokens = encoder.embed_image(view)?;
    if (tokens.rows, tokens.cols) != (grid.rows, grid.cols) {
        return Err(contract!(
            "encoder returned a {}x{} token grid for a {}x{} patch grid",
            tokens.rows,
            tokens.cols,
            grid.rows,
            grid.cols
        ));
    }
    let hits = banks.get(kind, Scale::Image).query_many(&tokens.patch_tokens)?;
    let image = paint_patches(&hits.iter().map(|h| h.distance).collect::<Vec<_>>(), &grid)?;
    Ok(ScaleMaps { small, middle, image })
}

fn check_banks(banks: &MemoryBanks, providers: &Providers) -> Result<()> {
    if banks.descriptor() != providers.descriptor() {
        return Err(contract!(
            "banks were built with {:?}, scoring with {:?}",
            banks.descriptor().name,
            providers.descriptor().name
        ));
    }
    Ok(())
}

/// Compares an already canonical image against all six banks.
pub fn score_against_banks(canonical: &ImageTensor, banks: &MemoryBanks, providers: &Providers, cfg: &FewShotConfig) -> Result<BankScores> {
    check_banks(banks, providers)?;
    let encoder = providers.image.as_ref();
    let (h, w) = (canonical.height(), canonical.width());
    let global = view_maps(canonical, banks, BankKind::Global, encoder, &cfg.windows)?;

    let crops = segment_crops(canonical, providers, &cfg.crop_config())?;
    let mut indiv = ScaleMaps::zeros(h, w);
    let mut clipped_pixels = 0;
    for crop in &crops {
        let maps = view_maps(&crop.crop, banks, BankKind::Individual, encoder, &cfg.windows)?;
        clipped_pixels += overlay_to_original(&maps.small, crop, &mut indiv.small)?;
        clipped_pixels += overlay_to_original(&maps.middle, crop, &mut indiv.middle)?;
        clipped_pixels += overlay_to_original(&maps.image, crop, &mut indiv.image)?;
    }
    Ok(BankScores {
        global,
        indiv,
        crops,
        clipped_pixels,
    })
}

/// The terms the image score is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotComponents {
    pub s_global: ScoreMap,
    pub s_indiv: ScoreMap,
    /// Text score of the whole image; 0 when text-free.
    pub a_multi: f64,
    /// Best text score over object crops; 0 when text-free.
    pub a_single: f64,
    pub max_global: f64,
    pub max_indiv: f64,
}

#[derive(Clone, Debug)]
pub struct FewShotResult {
    pub image_score: f64,
    /// Final map at canonical resolution.
    pub map: ScoreMap,
    pub components: FewShotComponents,
    pub scores: BankScores,
}

impl FewShotResult {
    /// `(a_multi + max_global) + (a_single + max_indiv)`, recomputed from the components.
    pub fn recompose(&self) -> f64 {
        compose(&self.components)
    }
}

fn compose(c: &FewShotComponents) -> f64 {
    (c.a_multi + c.max_global) + (c.a_single + c.max_indiv)
}

/// Full few-shot pipeline for one image. `pair` may be `None` only when `cfg.text_free`.
pub fn run_few_shot(
    image: &ImageTensor,
    banks: &MemoryBanks,
    pair: Option<&TextEmbeddingPair>,
    providers: &Providers,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    cfg.validate()?;
    let canonical = cfg.windows.canonicalize(image)?;
    let scores = score_against_banks(&canonical, banks, providers, cfg)?;

    let (a_multi, a_single) = if cfg.text_free {
        (0.0, 0.0)
    } else {
        let pair = pair.ok_or_else(|| invalid_input!("a text embedding pair is required unless text_free is set"))?;
        let text_cfg = cfg.text_config();
        let encoder = providers.image.as_ref();
        let a_multi = view_text_score(&canonical, pair, encoder, &text_cfg)?;
        let mut a_single = f64::NEG_INFINITY;
        for crop in &scores.crops {
            a_single = a_single.max(view_text_score(&crop.crop, pair, encoder, &text_cfg)?);
        }
        (a_multi, a_single)
    };

    let s_global = scores.global.fuse(cfg.global_weights)?;
    let s_indiv = scores.indiv.fuse(cfg.indiv_weights)?;
    let components = FewShotComponents {
        max_global: max_pixel(&s_global),
        max_indiv: max_pixel(&s_indiv),
        s_global,
        s_indiv,
        a_multi,
        a_single,
    };
    let image_score = compose(&components);
    let map = fuse_few_shot_final(&components.s_global, &components.s_indiv, image_score, cfg.final_weights)?;
    Ok(FewShotResult {
        image_score,
        map,
        components,
        scores,
    })
}

/// Embeds the class prompts (unless text-free), then runs [`run_few_shot`].
pub fn run_few_shot_for_class(
    image: &ImageTensor,
    class_name: &str,
    banks: &MemoryBanks,
    providers: &Providers,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    let pair = if cfg.text_free {
        None
    } else {
        Some(embed_text(providers.text.as_ref(), class_name, &cfg.prompts)?)
    };
    run_few_shot(image, banks, pair.as_ref(), providers, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_scale_weights() {
        let cfg = FewShotConfig::default();
        assert_eq!(cfg.global_weights, ScaleWeights(1.0, 1.0, 1.0));
        assert_eq!(cfg.indiv_weights, ScaleWeights(1.5, 0.5, 6.0));
        assert_eq!(cfg.final_weights, FinalWeights { global: 0.55, indiv: 0.45 });
    }

    #[test]
    fn negative_weight_is_rejected() {
        let cfg = FewShotConfig {
            indiv_weights: ScaleWeights(1.0, -1.0, 1.0),
            ..FewShotConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
