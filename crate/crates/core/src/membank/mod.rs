//! Memory banks of normal reference embeddings.
//!
//! Six banks are built from the few-shot reference images: a global and an individual
//! bank for each of the small, middle and image scales. Global banks see the whole
//! (augmented) reference image; individual banks see each segmented object crop. Small
//! and middle banks hold window class tokens, image banks hold patch tokens.

mod io;
mod search;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{CropConfig, PatchGrid, Scale, WindowConfig};
use crate::error::{contract, invalid_input, Error, Result};
use crate::image::ImageTensor;
use crate::providers::{l2, Embedding, ImageEncoder, ProviderDescriptor, Providers, UNIT_NORM_TOLERANCE};
use crate::zeroshot::segment_crops;

pub use io::{load_banks, load_banks_for, save_banks, BANK_FILE_VERSION, BANK_MAGIC};
pub use search::{query, query_many, BankQueryResult};

/// Default per-bank row cap.
pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Global,
    Individual,
}

impl BankKind {
    pub const ALL: [BankKind; 2] = [BankKind::Global, BankKind::Individual];

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Global => "global",
            BankKind::Individual => "individual",
        }
    }
}

/// Where a bank row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the reference image.
    pub image: u32,
    /// Index into [`AugmentationSpec::variants`].
    pub augmentation: u32,
    /// Object index within the augmented image; always 0 for global banks.
    pub object: u32,
    /// Window index at this scale, or patch index for the image scale.
    pub window: u32,
}

/// An immutable matrix of unit-norm reference embeddings for one (kind, scale) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    kind: BankKind,
    scale: Scale,
    dim: usize,
    data: Vec<f32>,
    provenance: Vec<Provenance>,
}

impl MemoryBank {
    /// Wraps a row-major `n x dim` matrix. Every row must be unit-norm.
    pub fn new(kind: BankKind, scale: Scale, dim: usize, data: Vec<f32>, provenance: Vec<Provenance>) -> Result<Self> {
        if dim == 0 || data.len() != provenance.len() * dim {
            return Err(invalid_input!(
                "bank matrix of {} values does not hold {} rows of dim {dim}",
                data.len(),
                provenance.len()
            ));
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let norm = l2(row);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(contract!("bank row {i} has norm {norm}"));
            }
        }
        Ok(Self {
            kind,
            scale,
            dim,
            data,
            provenance,
        })
    }

    pub fn from_embeddings(kind: BankKind, scale: Scale, rows: &[Embedding], provenance: Vec<Provenance>) -> Result<Self> {
        let dim = rows.first().map(Embedding::dim).ok_or_else(|| invalid_input!("no rows"))?;
        if rows.iter().any(|r| r.dim() != dim) {
            return Err(contract!("bank rows disagree on dimension"));
        }
        let data = rows.iter().flat_map(|r| r.as_slice().iter().copied()).collect();
        Self::new(kind, scale, dim, data, provenance)
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn query(&self, e: &Embedding) -> Result<BankQueryResult> {
        query(self, e)
    }

    pub fn query_many(&self, es: &[Embedding]) -> Result<Vec<BankQueryResult>> {
        query_many(self, es)
    }
}

/// Keeps at most `cap` rows, chosen uniformly without replacement with a seeded RNG.
/// Surviving rows keep their relative order and provenance.
pub fn subsample(bank: &MemoryBank, cap: usize, seed: u64) -> Result<MemoryBank> {
    if cap == 0 {
        return Err(invalid_input!("bank capacity must be at least 1"));
    }
    if bank.len() <= cap {
        return Ok(bank.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = rand::seq::index::sample(&mut rng, bank.len(), cap).into_vec();
    keep.sort_unstable();
    let mut data = Vec::with_capacity(cap * bank.dim);
    let mut provenance = Vec::with_capacity(cap);
    for i in keep {
        data.extend_from_slice(bank.row(i));
        provenance.push(bank.provenance[i]);
    }
    Ok(MemoryBank {
        kind: bank.kind,
        scale: bank.scale,
        dim: bank.dim,
        data,
        provenance,
    })
}

/// One geometric augmentation of a reference image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Identity,
    HFlip,
    VFlip,
    Rotate(f64),
    Translate(i32, i32),
}

impl Augmentation {
    /// Applies the augmentation; uncovered pixels take the image's mean color.
    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        match *self {
            Augmentation::Identity => image.clone(),
            Augmentation::HFlip => image.flip_horizontal(),
            Augmentation::VFlip => image.flip_vertical(),
            Augmentation::Rotate(deg) => image.rotate(deg, image.mean_color()),
            Augmentation::Translate(dx, dy) => image.translate(dx, dy, image.mean_color()),
        }
    }
}

/// Which augmentations to apply to every reference image. The identity is always included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub h_flip: bool,
    pub v_flip: bool,
    /// Degrees, counter-clockwise; magnitudes at most 15.
    pub rotations: Vec<f64>,
    /// `(dx, dy)` pixel offsets on the canonical image; magnitudes at most 10% of its side.
    pub translations: Vec<(i32, i32)>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            h_flip: true,
            v_flip: true,
            rotations: vec![-10.0, 10.0],
            translations: vec![(12, 0), (-12, 0), (0, 12), (0, -12)],
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            h_flip: false,
            v_flip: false,
            rotations: Vec::new(),
            translations: Vec::new(),
        }
    }

    pub fn variants(&self) -> Vec<Augmentation> {
        let mut out = vec![Augmentation::Identity];
        if self.h_flip {
            out.push(Augmentation::HFlip);
        }
        if self.v_flip {
            out.push(Augmentation::VFlip);
        }
        out.extend(self.rotations.iter().map(|&d| Augmentation::Rotate(d)));
        out.extend(self.translations.iter().map(|&(dx, dy)| Augmentation::Translate(dx, dy)));
        out
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if let Some(r) = self.rotations.iter().find(|r| !(r.abs() <= 15.0)) {
            return Err(Error::InvalidConfig(format!("rotation {r} exceeds 15 degrees")));
        }
        let limit = side as f64 * 0.1;
        if let Some(t) = self
            .translations
            .iter()
            .find(|(dx, dy)| f64::from(dx.abs()) > limit || f64::from(dy.abs()) > limit)
        {
            return Err(Error::InvalidConfig(format!("translation {t:?} exceeds 10% of the {side}px side")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub windows: WindowConfig,
    pub crop: CropConfig,
    pub augmentation: AugmentationSpec,
    /// Row cap applied to each bank separately.
    pub capacity: usize,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            windows: WindowConfig::default(),
            crop: CropConfig::default(),
            augmentation: AugmentationSpec::default(),
            capacity: DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        self.windows.validate()?;
        self.crop.validate()?;
        self.augmentation.validate(self.windows.canonical_size)?;
        if self.capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// The six frozen banks plus the descriptor of the encoder that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBanks {
    descriptor: ProviderDescriptor,
    banks: Vec<MemoryBank>,
}

/// Position of a (kind, scale) pair in [`MemoryBanks`].
fn slot(kind: BankKind, scale: Scale) -> usize {
    let k = match kind {
        BankKind::Global => 0,
        BankKind::Individual => 3,
    };
    k + match scale {
        Scale::Small => 0,
        Scale::Middle => 1,
        Scale::Image => 2,
    }
}

impl MemoryBanks {
    /// Requires exactly one non-empty bank per (kind, scale), all of the descriptor's dim.
    pub fn new(descriptor: ProviderDescriptor, banks: Vec<MemoryBank>) -> Result<Self> {
        let mut slots: Vec<Option<MemoryBank>> = vec![None; 6];
        for b in banks {
            if b.dim != descriptor.dim {
                return Err(contract!(
                    "{} {} bank has dim {}, provider {:?} has {}",
                    b.kind.as_str(),
                    b.scale.as_str(),
                    b.dim,
                    descriptor.name,
                    descriptor.dim
                ));
            }
            if b.is_empty() {
                return Err(contract!("{} {} bank is empty", b.kind.as_str(), b.scale.as_str()));
            }
            let s = slot(b.kind, b.scale);
            if slots[s].replace(b).is_some() {
                return Err(contract!("duplicate bank in set"));
            }
        }
        let banks = slots
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| contract!("bank set must contain all six (kind, scale) pairs"))?;
        Ok(Self { descriptor, banks })
    }

    pub fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    pub fn get(&self, kind: BankKind, scale: Scale) -> &MemoryBank {
        &self.banks[slot(kind, scale)]
    }

    /// Global small, middle, image, then individual small, middle, image.
    pub fn iter(&self) -> impl Iterator<Item = &MemoryBank> {
        self.banks.iter()
    }
}

/// Rows gathered from one (reference, augmentation) pair, indexed by bank slot.
struct Contribution {
    rows: [Vec<f32>; 6],
    provenance: [Vec<Provenance>; 6],
}

impl Contribution {
    fn new() -> Self {
        Self {
            rows: Default::default(),
            provenance: Default::default(),
        }
    }

    fn push_view(
        &mut self,
        kind: BankKind,
        view: &ImageTensor,
        encoder: &dyn ImageEncoder,
        windows: &WindowConfig,
        base: Provenance,
    ) -> Result<()> {
        let grid = PatchGrid::for_image(view, windows.patch_size)?;
        for scale in [Scale::Small, Scale::Middle] {
            let specs = windows.windows(&grid, scale)?;
            let embeddings = encoder.embed_windows(view, &specs)?;
            self.extend(kind, scale, &embeddings, base);
        }
        let tokens = encoder.embed_image(view)?;
        self.extend(kind, Scale::Image, &tokens.patch_tokens, base);
        Ok(())
    }

    fn extend(&mut self, kind: BankKind, scale: Scale, embeddings: &[Embedding], base: Provenance) {
        let s = slot(kind, scale);
        for (i, e) in embeddings.iter().enumerate() {
            self.rows[s].extend_from_slice(e.as_slice());
            self.provenance[s].push(Provenance { window: i as u32, ..base });
        }
    }
}

/// Builds and freezes the six banks from the reference images.
///
/// Every reference is resized to the canonical size, then each augmentation variant is
/// decomposed as a whole (global banks) and per segmented object (individual banks).
/// Each bank is finally capped at `cfg.capacity` rows.
pub fn build_banks(refs: &[ImageTensor], providers: &Providers, cfg: &BankConfig) -> Result<MemoryBanks> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(invalid_input!("at least one reference image is required"));
    }
    let descriptor = providers.descriptor().clone();
    descriptor.validate()?;
    if descriptor.patch_size != cfg.windows.patch_size {
        return Err(contract!(
            "provider patch size {} differs from configured {}",
            descriptor.patch_size,
            cfg.windows.patch_size
        ));
    }
    let variants = cfg.augmentation.variants();
    let canonical: Vec<ImageTensor> = refs.iter().map(|r| cfg.windows.canonicalize(r)).collect::<Result<_>>()?;
    let crop_cfg = CropConfig {
        target: cfg.windows.canonical_size,
        ..cfg.crop.clone()
    };
    let jobs: Vec<(usize, usize)> = (0..canonical.len())
        .flat_map(|i| (0..variants.len()).map(move |a| (i, a)))
        .collect();

    let encoder = providers.image.as_ref();
    let parts: Vec<Contribution> = jobs
        .par_iter()
        .map(|&(i, a)| {
            let view = variants[a].apply(&canonical[i]);
            let mut part = Contribution::new();
            let base = Provenance {
                image: i as u32,
                augmentation: a as u32,
                object: 0,
                window: 0,
            };
            part.push_view(BankKind::Global, &view, encoder, &cfg.windows, base)?;
            for (j, crop) in segment_crops(&view, providers, &crop_cfg)?.iter().enumerate() {
                let base = Provenance { object: j as u32, ..base };
                part.push_view(BankKind::Individual, &crop.crop, encoder, &cfg.windows, base)?;
            }
            Ok(part)
        })
        .collect::<Result<_>>()?;

    let mut banks = Vec::with_capacity(6);
    for kind in BankKind::ALL {
        for scale in Scale::ALL {
            let s = slot(kind, scale);
            let mut data = Vec::new();
            let mut provenance = Vec::new();
            for p in &parts {
                data.extend_from_slice(&p.rows[s]);
                provenance.extend_from_slice(&p.provenance[s]);
            }
            let bank = MemoryBank::new(kind, scale, descriptor.dim, data, provenance)?;
            let capped = subsample(&bank, cfg.capacity, cfg.seed.wrapping_add(s as u64))?;
            log::debug!("{} {} bank: {} rows ({} before cap)", kind.as_str(), scale.as_str(), capped.len(), bank.len());
            banks.push(capped);
        }
    }
    MemoryBanks::new(descriptor, banks)
}
