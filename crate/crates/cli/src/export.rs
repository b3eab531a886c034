//! Score map files: raw `f32` tensor, JSON header, and a grayscale preview.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use msmc::ScoreMap;
use serde::{Deserialize, Serialize};

/// Sidecar header of a `.raw` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    /// `[height, width]`.
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_order: String,
    pub min: f32,
    pub max: f32,
    pub config_hash: String,
}

/// Paths written by [`export_map`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportedMap {
    pub raw: PathBuf,
    pub header: PathBuf,
    pub png: PathBuf,
}

/// Writes `<stem>.raw`, `<stem>.json` and `<stem>.png` into `dir`.
///
/// The raw file holds the map as little-endian `f32`, row-major. The preview is min-max
/// normalized per map; a constant map renders as all zeros.
pub fn export_map(map: &ScoreMap, dir: &Path, stem: &str, config_hash: &str) -> anyhow::Result<ExportedMap> {
    let values: Vec<f32> = map.values().iter().map(|&v| v as f32).collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        bail!("refusing to export {stem}: pixel {bad} is not finite as f32");
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let out = ExportedMap {
        raw: dir.join(format!("{stem}.raw")),
        header: dir.join(format!("{stem}.json")),
        png: dir.join(format!("{stem}.png")),
    };
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&out.raw, bytes).with_context(|| format!("writing {}", out.raw.display()))?;

    let header = MapHeader {
        shape: [map.height(), map.width()],
        dtype: "float32".into(),
        byte_order: "little".into(),
        min,
        max,
        config_hash: config_hash.into(),
    };
    fs::write(&out.header, serde_json::to_string_pretty(&header)?).with_context(|| format!("writing {}", out.header.display()))?;

    let span = max - min;
    let gray: Vec<u8> = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, gray).expect("buffer matches size");
    img.save(&out.png).with_context(|| format!("writing {}", out.png.display()))?;
    Ok(out)
}

/// Reads a map written by [`export_map`]; `raw` is the `.raw` path, the header sits next to it.
pub fn read_map(raw: &Path) -> anyhow::Result<(MapHeader, ScoreMap)> {
    let header_path = raw.with_extension("json");
    let header: MapHeader = serde_json::from_str(
        &fs::read_to_string(&header_path).with_context(|| format!("reading {}", header_path.display()))?,
    )
    .with_context(|| format!("parsing {}", header_path.display()))?;
    let bytes = fs::read(raw).with_context(|| format!("reading {}", raw.display()))?;
    let [h, w] = header.shape;
    if header.dtype != "float32" || bytes.len() != h * w * 4 {
        bail!("{}: expected {h}x{w} float32, found {} bytes of {}", raw.display(), bytes.len(), header.dtype);
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok((header, ScoreMap::new(h, w, values)?))
}
