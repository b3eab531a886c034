//! Dataset discovery and image loading.
//!
//! Directory layout, one directory per category:
//!
//! ```text
//! <root>/<category>/train/good/*.png           normal references
//! <root>/<category>/test/good/*.png            normal test images
//! <root>/<category>/test/<defect>/*.png        anomalous test images
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! Any other layout can be described by a JSON manifest (see [`Manifest`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use msmc::{BinaryMask, ImageTensor};
use serde::{Deserialize, Serialize};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// One test image and what is known about it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub path: PathBuf,
    /// Defect type, `None` for normal images.
    pub defect: Option<String>,
    pub mask: Option<PathBuf>,
}

impl TestItem {
    pub fn is_anomalous(&self) -> bool {
        self.defect.is_some()
    }

    /// Unique, filesystem-safe name within the category.
    pub fn stem(&self) -> String {
        let file = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}_{}", self.defect.as_deref().unwrap_or("good"), file)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    /// All normal training images, in lexicographic order.
    pub references: Vec<PathBuf>,
    pub tests: Vec<TestItem>,
    /// Every anomalous test image has a mask, so pixel metrics can be computed.
    pub has_ground_truth: bool,
}

impl Category {
    /// The few-shot support set: the first `k` references.
    pub fn support_set(&self, k: usize) -> anyhow::Result<&[PathBuf]> {
        if self.references.len() < k {
            bail!("category {} has {} reference images, {k} required", self.name, self.references.len());
        }
        Ok(&self.references[..k])
    }

    /// Prompt class name: the category with separators turned into spaces.
    pub fn class_name(&self) -> String {
        self.name.replace(['_', '-'], " ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub categories: Vec<Category>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn dimensions(path: &Path) -> anyhow::Result<(u32, u32)> {
    image::image_dimensions(path).with_context(|| format!("unreadable image {}", path.display()))
}

/// Checks that every file decodes far enough to report its size and that masks match
/// their images.
fn validate(category: &Category) -> anyhow::Result<()> {
    for path in &category.references {
        dimensions(path)?;
    }
    for item in &category.tests {
        let dims = dimensions(&item.path)?;
        if let Some(mask) = &item.mask {
            let mdims = dimensions(mask)?;
            if mdims != dims {
                bail!(
                    "mask {} is {}x{} but image {} is {}x{}",
                    mask.display(),
                    mdims.0,
                    mdims.1,
                    item.path.display(),
                    dims.0,
                    dims.1
                );
            }
        }
    }
    Ok(())
}

fn ingest_category(dir: &Path) -> anyhow::Result<Category> {
    let name = dir_name(dir);
    let train = dir.join("train").join("good");
    let test = dir.join("test");
    for required in [&train, &test] {
        if !required.is_dir() {
            bail!("category {name}: missing directory {}", required.display());
        }
    }
    let references = sorted_images(&train)?;
    let mut tests = Vec::new();
    let mut has_ground_truth = true;
    for defect_dir in sorted_dirs(&test)? {
        let defect = dir_name(&defect_dir);
        let normal = defect == "good";
        for path in sorted_images(&defect_dir)? {
            let mask = if normal {
                None
            } else {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let candidate = dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"));
                if candidate.is_file() {
                    Some(candidate)
                } else {
                    has_ground_truth = false;
                    None
                }
            };
            tests.push(TestItem {
                path,
                defect: (!normal).then(|| defect.clone()),
                mask,
            });
        }
    }
    if !has_ground_truth {
        log::warn!("category {name}: ground truth incomplete, pixel metrics disabled");
    }
    let category = Category {
        name,
        references,
        tests,
        has_ground_truth,
    };
    validate(&category)?;
    Ok(category)
}

/// Scans an MVTec-style tree. `only` restricts the categories; empty means all.
pub fn ingest(root: &Path, only: &[String]) -> anyhow::Result<DatasetLayout> {
    if !root.is_dir() {
        bail!("dataset root {} is not a directory", root.display());
    }
    let mut categories = Vec::new();
    for dir in sorted_dirs(root)? {
        if only.is_empty() || only.contains(&dir_name(&dir)) {
            categories.push(ingest_category(&dir)?);
        }
    }
    for wanted in only {
        if !categories.iter().any(|c| &c.name == wanted) {
            bail!("category {wanted} not found under {}", root.display());
        }
    }
    if categories.is_empty() {
        bail!("no categories under {}", root.display());
    }
    Ok(DatasetLayout {
        root: root.to_path_buf(),
        categories,
    })
}

/// Explicit dataset listing. Relative paths are resolved against the manifest's directory.
///
/// ```json
/// {"categories": {"bottle": {
///     "references": ["ref/0.png"],
///     "tests": [{"path": "t/1.png", "defect": "crack", "mask": "t/1_mask.png"},
///               {"path": "t/2.png"}]}}}
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub categories: BTreeMap<String, ManifestCategory>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestCategory {
    pub references: Vec<PathBuf>,
    pub tests: Vec<TestItem>,
}

pub fn ingest_manifest(path: &Path, only: &[String]) -> anyhow::Result<DatasetLayout> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut categories = Vec::new();
    for (name, c) in manifest.categories {
        if !only.is_empty() && !only.contains(&name) {
            continue;
        }
        let mut references: Vec<PathBuf> = c.references.iter().map(|p| resolve(p)).collect();
        references.sort();
        let tests: Vec<TestItem> = c
            .tests
            .iter()
            .map(|t| TestItem {
                path: resolve(&t.path),
                defect: t.defect.clone(),
                mask: t.mask.as_deref().map(resolve),
            })
            .collect();
        let has_ground_truth = tests.iter().all(|t| !t.is_anomalous() || t.mask.is_some());
        let category = Category {
            name,
            references,
            tests,
            has_ground_truth,
        };
        validate(&category)?;
        categories.push(category);
    }
    if categories.is_empty() {
        bail!("manifest {} lists no matching categories", path.display());
    }
    Ok(DatasetLayout {
        root: base.to_path_buf(),
        categories,
    })
}

pub fn load_image(path: &Path) -> anyhow::Result<ImageTensor> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?.to_rgb32f();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(h as usize, w as usize, data).map_err(|e| anyhow!("{}: {e}", path.display()))
}

/// Ground-truth mask: pixels brighter than mid-gray are anomalous.
pub fn load_mask(path: &Path) -> anyhow::Result<BinaryMask> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v > 127).collect();
    BinaryMask::new(h as usize, w as usize, data).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn save_image(image: &ImageTensor, path: &Path) -> anyhow::Result<()> {
    let bytes: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes).expect("buffer matches size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> anyhow::Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("buffer matches size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}
