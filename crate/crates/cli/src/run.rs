//! Batch orchestration over a dataset.
//!
//! Output tree:
//!
//! ```text
//! <out>/metrics.json                      per-category and mean metrics
//! <out>/errors.json                       per-image failures (possibly empty)
//! <out>/<category>/scores.json            one record per processed test image
//! <out>/<category>/maps/<stem>.{raw,json,png}
//! <out>/<category>/banks.msmb             few-shot banks (build-bank)
//! <out>/<category>/banks.json             bank summary and config hash
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use msmc::eval::{category_metrics, CategoryMetrics, LabeledScore};
use msmc::providers::embed_text;
use msmc::providers::wire::{WireClient, WireOptions};
use msmc::{
    build_banks, load_banks_for, run_few_shot, run_zero_shot_with_pair, save_banks, BinaryMask, MemoryBanks, MetricsReport,
    ProviderDescriptor, Providers, ScoreMap, TextEmbeddingPair,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_image, load_mask, Category, DatasetLayout, TestItem};
use crate::export::{export_map, read_map};

/// Share of failed images above which a batch fails.
pub const MAX_FAILURE_RATE: f64 = 0.5;

pub fn make_providers(cfg: &RunConfig) -> anyhow::Result<Providers> {
    match &cfg.provider.url {
        Some(url) => {
            let options = WireOptions {
                timeout: Duration::from_secs(cfg.provider.timeout_secs),
                attempts: cfg.provider.attempts,
                ..WireOptions::default()
            };
            let client = WireClient::connect(url, options).with_context(|| format!("connecting to {url}"))?;
            Ok(Providers::remote(client))
        }
        None => Ok(Providers::mock(cfg.provider.mock_seed)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: PathBuf,
    pub stem: String,
    pub defect: Option<String>,
    pub score: f64,
    /// Raw map file, relative to the category output directory.
    pub map: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub category: String,
    pub path: PathBuf,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub bank_hash: String,
    pub descriptor: Option<ProviderDescriptor>,
    pub references: Vec<PathBuf>,
    /// Rows per bank, keyed `<kind>/<scale>`.
    pub rows: BTreeMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub processed: usize,
    pub errors: Vec<ErrorRecord>,
    pub metrics: MetricsReport,
}

impl BatchOutcome {
    pub fn failure_rate(&self) -> f64 {
        let total = self.processed + self.errors.len();
        if total == 0 {
            1.0
        } else {
            self.errors.len() as f64 / total as f64
        }
    }
}

fn pool(cfg: &RunConfig) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build()?)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn category_dir(out: &Path, category: &Category) -> PathBuf {
    out.join(&category.name)
}

/// Builds and saves the banks of every category.
pub fn build_bank_files(layout: &DatasetLayout, cfg: &RunConfig, providers: &Providers, out: &Path) -> anyhow::Result<()> {
    cfg.validate()?;
    pool(cfg)?.install(|| {
        for category in &layout.categories {
            let banks = build_category_banks(category, cfg, providers)?;
            let dir = category_dir(out, category);
            fs::create_dir_all(&dir)?;
            save_banks(&banks, &dir.join("banks.msmb"))?;
            let summary = BankSummary {
                bank_hash: cfg.bank_hash(),
                descriptor: Some(banks.descriptor().clone()),
                references: category.support_set(cfg.bank.shots)?.to_vec(),
                rows: banks.iter().map(|b| (format!("{}/{}", b.kind().as_str(), b.scale().as_str()), b.len())).collect(),
            };
            write_json(&dir.join("banks.json"), &summary)?;
            log::info!("{}: banks written to {}", category.name, dir.display());
        }
        Ok(())
    })
}

fn build_category_banks(category: &Category, cfg: &RunConfig, providers: &Providers) -> anyhow::Result<MemoryBanks> {
    let refs = category
        .support_set(cfg.bank.shots)?
        .iter()
        .map(|p| load_image(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(build_banks(&refs, providers, &cfg.bank_config())?)
}

fn load_category_banks(category: &Category, cfg: &RunConfig, providers: &Providers, out: &Path) -> anyhow::Result<MemoryBanks> {
    let dir = category_dir(out, category);
    let path = dir.join("banks.msmb");
    if !path.is_file() {
        bail!("{}: no bank file at {}; run build-bank first", category.name, path.display());
    }
    let summary: BankSummary = read_json(&dir.join("banks.json"))?;
    if summary.bank_hash != cfg.bank_hash() {
        bail!(
            "{}: banks were built with config {} but the current config is {}",
            category.name,
            summary.bank_hash,
            cfg.bank_hash()
        );
    }
    Ok(load_banks_for(&path, providers.descriptor())?)
}

/// How test images are scored.
enum Scorer {
    ZeroShot(TextEmbeddingPair),
    FewShot(MemoryBanks, Option<TextEmbeddingPair>),
}

impl Scorer {
    fn score(&self, item: &TestItem, cfg: &RunConfig, providers: &Providers) -> anyhow::Result<(f64, ScoreMap)> {
        let image = load_image(&item.path)?;
        match self {
            Scorer::ZeroShot(pair) => {
                let r = run_zero_shot_with_pair(&image, pair, providers, &cfg.zero_shot())?;
                Ok((r.image_score, r.map))
            }
            Scorer::FewShot(banks, pair) => {
                let r = run_few_shot(&image, banks, pair.as_ref(), providers, &cfg.few_shot())?;
                Ok((r.image_score, r.map))
            }
        }
    }
}

/// Rounds a map to the `f32` values written to disk, so in-memory and on-disk metrics agree.
fn as_exported(map: &ScoreMap) -> ScoreMap {
    let values = map.values().iter().map(|&v| f64::from(v as f32)).collect();
    ScoreMap::new(map.height(), map.width(), values).expect("finite, non-negative values stay so")
}

/// Ground truth at the map's resolution; normal images get an empty mask.
fn ground_truth(item: &TestItem, height: usize, width: usize) -> anyhow::Result<BinaryMask> {
    match &item.mask {
        Some(path) => Ok(load_mask(path)?.resize_nearest(height, width)),
        None => Ok(BinaryMask::empty(height, width)),
    }
}

fn metrics_for(category: &Category, records: &[ImageRecord], maps: &[ScoreMap], cfg: &RunConfig) -> anyhow::Result<CategoryMetrics> {
    let items: Vec<LabeledScore> = records.iter().map(|r| LabeledScore::new(r.score, r.defect.is_some())).collect();
    let seg = if category.has_ground_truth {
        let by_stem: BTreeMap<&str, &TestItem> = category.tests.iter().map(|t| (t.path.to_str().unwrap_or(""), t)).collect();
        let mut pairs = Vec::with_capacity(maps.len());
        for (record, map) in records.iter().zip(maps) {
            let item = by_stem
                .get(record.image.to_str().unwrap_or(""))
                .ok_or_else(|| anyhow!("{}: not part of the dataset", record.image.display()))?;
            pairs.push((map.clone(), ground_truth(item, map.height(), map.width())?));
        }
        Some(pairs)
    } else {
        None
    };
    Ok(category_metrics(&items, seg.as_deref(), cfg.seg_sweep())?)
}

fn score_category(
    category: &Category,
    scorer: &Scorer,
    cfg: &RunConfig,
    providers: &Providers,
    out: &Path,
) -> anyhow::Result<(Vec<ImageRecord>, Vec<ErrorRecord>, CategoryMetrics)> {
    let dir = category_dir(out, category);
    let maps_dir = dir.join("maps");
    let hash = cfg.config_hash();
    let results: Vec<anyhow::Result<(ImageRecord, ScoreMap)>> = category
        .tests
        .par_iter()
        .map(|item| {
            let (score, map) = scorer.score(item, cfg, providers)?;
            let stem = item.stem();
            let files = export_map(&map, &maps_dir, &stem, &hash)?;
            let record = ImageRecord {
                image: item.path.clone(),
                stem,
                defect: item.defect.clone(),
                score,
                map: files.raw.strip_prefix(&dir).unwrap_or(&files.raw).to_path_buf(),
            };
            Ok((record, as_exported(&map)))
        })
        .collect();

    let mut records = Vec::new();
    let mut maps = Vec::new();
    let mut errors = Vec::new();
    for (item, result) in category.tests.iter().zip(results) {
        match result {
            Ok((record, map)) => {
                records.push(record);
                maps.push(map);
            }
            Err(e) => {
                log::error!("{}: {e:#}", item.path.display());
                errors.push(ErrorRecord {
                    category: category.name.clone(),
                    path: item.path.clone(),
                    error: format!("{e:#}"),
                });
            }
        }
    }
    write_json(&dir.join("scores.json"), &records)?;
    let metrics = metrics_for(category, &records, &maps, cfg)?;
    Ok((records, errors, metrics))
}

fn finish(out: &Path, processed: usize, errors: Vec<ErrorRecord>, categories: BTreeMap<String, CategoryMetrics>) -> anyhow::Result<BatchOutcome> {
    let metrics = MetricsReport::new(categories);
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), metrics.to_json()? + "\n")?;
    write_json(&out.join("errors.json"), &errors)?;
    let outcome = BatchOutcome {
        processed,
        errors,
        metrics,
    };
    if outcome.processed + outcome.errors.len() == 0 {
        bail!("the test set is empty");
    }
    if outcome.failure_rate() > MAX_FAILURE_RATE {
        bail!(
            "{} of {} images failed; see {}",
            outcome.errors.len(),
            outcome.processed + outcome.errors.len(),
            out.join("errors.json").display()
        );
    }
    Ok(outcome)
}

/// Category-level failure: every test image of the category is recorded as failed.
fn fail_category(category: &Category, e: &anyhow::Error) -> Vec<ErrorRecord> {
    log::error!("{}: {e:#}", category.name);
    category
        .tests
        .iter()
        .map(|t| ErrorRecord {
            category: category.name.clone(),
            path: t.path.clone(),
            error: format!("{e:#}"),
        })
        .collect()
}

enum Source<'a> {
    ZeroShot,
    BankFiles,
    Memory(&'a [MemoryBanks]),
    Build,
}

fn run(layout: &DatasetLayout, cfg: &RunConfig, providers: &Providers, out: &Path, source: Source) -> anyhow::Result<BatchOutcome> {
    cfg.validate()?;
    if layout.categories.iter().all(|c| c.tests.is_empty()) {
        bail!("the test set is empty");
    }
    pool(cfg)?.install(|| {
        let mut processed = 0;
        let mut errors = Vec::new();
        let mut categories = BTreeMap::new();
        for (i, category) in layout.categories.iter().enumerate() {
            let scorer = (|| -> anyhow::Result<Scorer> {
                let class = category.class_name();
                let pair = |force: bool| -> anyhow::Result<Option<TextEmbeddingPair>> {
                    if cfg.fewshot.text_free && !force {
                        return Ok(None);
                    }
                    Ok(Some(embed_text(providers.text.as_ref(), &class, &cfg.text.prompts)?))
                };
                Ok(match &source {
                    Source::ZeroShot => Scorer::ZeroShot(pair(true)?.expect("forced")),
                    Source::BankFiles => Scorer::FewShot(load_category_banks(category, cfg, providers, out)?, pair(false)?),
                    Source::Memory(banks) => Scorer::FewShot(banks[i].clone(), pair(false)?),
                    Source::Build => Scorer::FewShot(build_category_banks(category, cfg, providers)?, pair(false)?),
                })
            })();
            let scorer = match scorer {
                Ok(s) => s,
                Err(e) => {
                    errors.extend(fail_category(category, &e));
                    continue;
                }
            };
            let (records, errs, metrics) = score_category(category, &scorer, cfg, providers, out)?;
            processed += records.len();
            errors.extend(errs);
            categories.insert(category.name.clone(), metrics);
        }
        finish(out, processed, errors, categories)
    })
}

pub fn run_zero_shot_batch(layout: &DatasetLayout, cfg: &RunConfig, providers: &Providers, out: &Path) -> anyhow::Result<BatchOutcome> {
    run(layout, cfg, providers, out, Source::ZeroShot)
}

/// Few-shot test against bank files written earlier by [`build_bank_files`].
pub fn run_few_shot_batch(layout: &DatasetLayout, cfg: &RunConfig, providers: &Providers, out: &Path) -> anyhow::Result<BatchOutcome> {
    run(layout, cfg, providers, out, Source::BankFiles)
}

/// Few-shot test with banks built in memory, one per category in layout order.
pub fn run_few_shot_with_banks(
    layout: &DatasetLayout,
    banks: &[MemoryBanks],
    cfg: &RunConfig,
    providers: &Providers,
    out: &Path,
) -> anyhow::Result<BatchOutcome> {
    if banks.len() != layout.categories.len() {
        bail!("{} bank sets for {} categories", banks.len(), layout.categories.len());
    }
    run(layout, cfg, providers, out, Source::Memory(banks))
}

/// Builds banks and tests in one pass without touching bank files.
pub fn run_few_shot_combined(layout: &DatasetLayout, cfg: &RunConfig, providers: &Providers, out: &Path) -> anyhow::Result<BatchOutcome> {
    run(layout, cfg, providers, out, Source::Build)
}

/// Recomputes `metrics.json` from the score records and raw maps under `out`.
pub fn evaluate_outputs(layout: &DatasetLayout, cfg: &RunConfig, out: &Path) -> anyhow::Result<MetricsReport> {
    let mut categories = BTreeMap::new();
    for category in &layout.categories {
        let dir = category_dir(out, category);
        let records: Vec<ImageRecord> = read_json(&dir.join("scores.json"))?;
        let maps = if category.has_ground_truth {
            records
                .iter()
                .map(|r| Ok(read_map(&dir.join(&r.map))?.1))
                .collect::<anyhow::Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        categories.insert(category.name.clone(), metrics_for(category, &records, &maps, cfg)?);
    }
    let report = MetricsReport::new(categories);
    fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    Ok(report)
}
