//! Multi-scale memory comparison for zero- and few-shot visual anomaly detection.
//!
//! An image is resized to a canonical square, split into ViT patches and decomposed into
//! small (2x2 patch), middle (3x3 patch) and image-scale windows, both as a whole and per
//! segmented object. Window embeddings are then scored either against a pair of text
//! prompt embeddings ([`zeroshot`]) or against memory banks of normal references
//! ([`fewshot`]), and the scores are assembled into per-pixel maps and an image score.
//!
//! Model inference sits behind the [`providers`] traits. [`Providers::mock`] gives
//! deterministic, model-free encoders that make the whole pipeline runnable offline:
//!
//! ```
//! use msmc::{build_banks, run_few_shot, BankConfig, FewShotConfig, ImageTensor, Providers};
//! use msmc::membank::AugmentationSpec;
//!
//! let providers = Providers::mock(7);
//! let reference = ImageTensor::from_fn(240, 240, |y, x| {
//!     let v = ((x / 7 + y / 5) % 9) as f32 / 9.0;
//!     [v, 1.0 - v, 0.5]
//! })
//! .unwrap();
//! let cfg = BankConfig { augmentation: AugmentationSpec::none(), ..BankConfig::default() };
//! let banks = build_banks(&[reference.clone()], &providers, &cfg).unwrap();
//!
//! let few = FewShotConfig { text_free: true, ..FewShotConfig::default() };
//! let result = run_few_shot(&reference, &banks, None, &providers, &few).unwrap();
//! assert!(result.image_score <= 1e-5);
//! ```

pub mod decompose;
mod error;
pub mod eval;
pub mod fewshot;
pub mod image;
pub mod membank;
pub mod providers;
pub mod scoremap;
pub mod zeroshot;

pub use decompose::{BinaryMask, ObjectCrop, PatchGrid, Scale, WindowConfig, WindowSpec};
pub use error::{Error, Result};
pub use eval::{auroc, f1_max, f1_seg, F1Result, LabeledScore, MetricsReport, SegSweep};
pub use fewshot::{run_few_shot, run_few_shot_for_class, FewShotConfig, FewShotResult};
pub use image::ImageTensor;
pub use membank::{build_banks, load_banks, load_banks_for, save_banks, BankConfig, BankKind, MemoryBank, MemoryBanks};
pub use providers::{Embedding, ProviderDescriptor, Providers, TextEmbeddingPair};
pub use scoremap::{ScoreMap, WindowScore};
pub use zeroshot::{run_zero_shot, run_zero_shot_with_pair, ZeroShotConfig, ZeroShotResult};

// The guide's snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/windows.md")]
    mod windows {}
    #[doc = include_str!("../../../book/src/score-maps.md")]
    mod score_maps {}
    #[doc = include_str!("../../../book/src/providers.md")]
    mod providers {}
    #[doc = include_str!("../../../book/src/zero-shot.md")]
    mod zero_shot {}
    #[doc = include_str!("../../../book/src/memory-banks.md")]
    mod memory_banks {}
    #[doc = include_str!("../../../book/src/few-shot.md")]
    mod few_shot {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
