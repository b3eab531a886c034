//! Run configuration, read from a sectioned TOML file.

use std::path::Path;

use anyhow::{bail, Context};
use msmc::decompose::{CropConfig, WindowConfig};
use msmc::membank::{AugmentationSpec, DEFAULT_CAPACITY};
use msmc::providers::PromptSet;
use msmc::scoremap::{FinalWeights, ScaleWeights, ZeroShotWeights};
use msmc::{BankConfig, FewShotConfig, SegSweep, ZeroShotConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where embeddings and masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Seed of the offline mock providers; used when `url` is unset.
    pub mock_seed: u64,
    /// Base URL of a model server.
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub attempts: u32,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            mock_seed: 0,
            url: None,
            timeout_secs: 120,
            attempts: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    pub temperature: f64,
    pub prompts: PromptSet,
}

impl Default for TextSection {
    fn default() -> Self {
        Self {
            temperature: ZeroShotConfig::default().temperature,
            prompts: PromptSet::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotSection {
    pub weights: ZeroShotWeights,
    pub full_image_windows: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotSection {
    /// Small, middle, image weights of the global map.
    pub global_weights: ScaleWeights,
    /// Small, middle, image weights of the individual map.
    pub indiv_weights: ScaleWeights,
    pub final_weights: FinalWeights,
    pub text_free: bool,
}

impl Default for FewShotSection {
    fn default() -> Self {
        Self {
            global_weights: ScaleWeights::GLOBAL,
            indiv_weights: ScaleWeights::INDIVIDUAL,
            final_weights: FinalWeights::default(),
            text_free: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    /// Reference images per category: the first `shots` of `train/good`.
    pub shots: usize,
    pub capacity: usize,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            shots: 4,
            capacity: DEFAULT_CAPACITY,
            seed: 0,
            augmentation: AugmentationSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Candidate thresholds of the pixel-level sweep; 0 sweeps every distinct score.
    pub seg_thresholds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seg_thresholds: msmc::eval::DEFAULT_SEG_THRESHOLDS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub provider: ProviderSection,
    pub windows: WindowConfig,
    pub crop: CropConfig,
    pub text: TextSection,
    pub zeroshot: ZeroShotSection,
    pub fewshot: FewShotSection,
    pub bank: BankSection,
    pub eval: EvalSection,
}

/// The parts of a config that change pipeline outputs.
#[derive(Serialize)]
struct PipelineView<'a> {
    windows: &'a WindowConfig,
    crop: &'a CropConfig,
    text: &'a TextSection,
    zeroshot: &'a ZeroShotSection,
    fewshot: &'a FewShotSection,
    bank: &'a BankSection,
}

/// The parts of a config that change bank contents.
#[derive(Serialize)]
struct BankView<'a> {
    windows: &'a WindowConfig,
    crop: &'a CropConfig,
    bank: &'a BankSection,
}

fn short_hash(value: &impl Serialize) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.zero_shot().validate()?;
        self.few_shot().validate()?;
        self.bank_config().validate()?;
        if self.bank.shots == 0 {
            bail!("bank.shots must be at least 1");
        }
        Ok(())
    }

    pub fn zero_shot(&self) -> ZeroShotConfig {
        ZeroShotConfig {
            windows: self.windows.clone(),
            crop: self.crop.clone(),
            temperature: self.text.temperature,
            weights: self.zeroshot.weights,
            full_image_windows: self.zeroshot.full_image_windows,
            prompts: self.text.prompts.clone(),
        }
    }

    pub fn few_shot(&self) -> FewShotConfig {
        FewShotConfig {
            windows: self.windows.clone(),
            crop: self.crop.clone(),
            temperature: self.text.temperature,
            global_weights: self.fewshot.global_weights,
            indiv_weights: self.fewshot.indiv_weights,
            final_weights: self.fewshot.final_weights,
            text_free: self.fewshot.text_free,
            prompts: self.text.prompts.clone(),
        }
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            windows: self.windows.clone(),
            crop: self.crop.clone(),
            augmentation: self.bank.augmentation.clone(),
            capacity: self.bank.capacity,
            seed: self.bank.seed,
        }
    }

    pub fn seg_sweep(&self) -> SegSweep {
        match self.eval.seg_thresholds {
            0 => SegSweep::Exact,
            n => SegSweep::Quantiles(n),
        }
    }

    /// 16 hex digits identifying every setting that affects outputs.
    pub fn config_hash(&self) -> String {
        short_hash(&PipelineView {
            windows: &self.windows,
            crop: &self.crop,
            text: &self.text,
            zeroshot: &self.zeroshot,
            fewshot: &self.fewshot,
            bank: &self.bank,
        })
    }

    /// Like [`config_hash`](Self::config_hash) but over the settings banks depend on.
    pub fn bank_hash(&self) -> String {
        short_hash(&BankView {
            windows: &self.windows,
            crop: &self.crop,
            bank: &self.bank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("[windows]\nstride_small = 4\n\n[fewshot]\ntext_free = true\n").unwrap();
        assert_eq!(cfg.windows.stride_small, 4);
        assert_eq!(cfg.windows.canonical_size, 240);
        assert!(cfg.fewshot.text_free);
        assert_eq!(cfg.fewshot.indiv_weights, ScaleWeights(1.5, 0.5, 6.0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[windows]\nstrid = 4\n").is_err());
    }

    #[test]
    fn hash_tracks_pipeline_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.workers = 7;
        b.provider.attempts = 9;
        assert_eq!(a.config_hash(), b.config_hash());
        b.fewshot.text_free = true;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.bank_hash(), b.bank_hash());
        b.bank.capacity = 10;
        assert_ne!(a.bank_hash(), b.bank_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.windows.canonical_size = 250;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fewshot.final_weights.global = -0.1;
        assert!(cfg.validate().is_err());
    }
}
