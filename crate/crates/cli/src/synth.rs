//! Synthetic inspection dataset: one bright textured disk on a dark textured background,
//! with defects painted as squares of uniform noise inside the disk.
//!
//! Used for smoke runs and end-to-end checks without real data or model weights.

use std::fs;
use std::path::Path;

use anyhow::bail;
use msmc::{BinaryMask, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_image, save_mask};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub category: String,
    pub side: usize,
    pub references: usize,
    pub normal_tests: usize,
    pub defect_tests: usize,
    pub radius: f64,
    /// Maximum disk displacement from the center, in pixels.
    pub jitter: f64,
    /// Side of the square defects.
    pub defect_side: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            category: "disk".into(),
            side: 240,
            references: 4,
            normal_tests: 10,
            defect_tests: 10,
            radius: 85.0,
            jitter: 3.0,
            defect_side: 32,
            seed: 0,
        }
    }
}

/// The normal part. Textures are anchored to the image, not the disk, so a displaced disk
/// shows the same local patterns.
pub fn disk_image(side: usize, center: (f64, f64), radius: f64) -> ImageTensor {
    ImageTensor::from_fn(side, side, |y, x| {
        let (dy, dx) = (y as f64 - center.0, x as f64 - center.1);
        if dy * dy + dx * dx <= radius * radius {
            let t = ((x / 4 + y / 4) % 5) as f32 / 20.0;
            [0.75 + t, 0.8, 0.65 + t]
        } else {
            let t = ((x / 6 + 2 * (y / 6)) % 4) as f32 / 40.0;
            [0.1 + t, 0.15, 0.2 + t]
        }
    })
    .expect("positive size")
}

/// Paints a noise square and returns its mask.
pub fn add_defect(image: &mut ImageTensor, top: usize, left: usize, side: usize, rng: &mut impl Rng) -> BinaryMask {
    for y in top..top + side {
        for x in left..left + side {
            image.set_pixel(y, x, [rng.random(), rng.random(), rng.random()]);
        }
    }
    BinaryMask::from_fn(image.height(), image.width(), |y, x| {
        (top..top + side).contains(&y) && (left..left + side).contains(&x)
    })
}

fn jittered_center(spec: &SynthSpec, rng: &mut impl Rng) -> (f64, f64) {
    let c = spec.side as f64 / 2.0;
    let j = spec.jitter;
    if j > 0.0 {
        (c + rng.random_range(-j..=j), c + rng.random_range(-j..=j))
    } else {
        (c, c)
    }
}

/// Writes `<root>/<category>/{train/good, test/good, test/noise, ground_truth/noise}`.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> anyhow::Result<()> {
    let half = spec.defect_side as f64 / 2.0;
    // the square must fit inside the disk wherever the disk lands
    let reach = (spec.radius - spec.jitter - half * std::f64::consts::SQRT_2).floor();
    if reach < 0.0 || spec.radius + spec.jitter > spec.side as f64 / 2.0 {
        bail!("defects of side {} do not fit a disk of radius {} in a {}px image", spec.defect_side, spec.radius, spec.side);
    }
    let dir = root.join(&spec.category);
    let train = dir.join("train/good");
    let good = dir.join("test/good");
    let noise = dir.join("test/noise");
    let gt = dir.join("ground_truth/noise");
    for d in [&train, &good, &noise, &gt] {
        fs::create_dir_all(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.references {
        let center = jittered_center(spec, &mut rng);
        save_image(&disk_image(spec.side, center, spec.radius), &train.join(format!("{i:03}.png")))?;
    }
    for i in 0..spec.normal_tests {
        let center = jittered_center(spec, &mut rng);
        save_image(&disk_image(spec.side, center, spec.radius), &good.join(format!("{i:03}.png")))?;
    }
    for i in 0..spec.defect_tests {
        let center = jittered_center(spec, &mut rng);
        let mut image = disk_image(spec.side, center, spec.radius);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.0..=reach);
        let cy = center.0 + dist * angle.sin();
        let cx = center.1 + dist * angle.cos();
        let top = (cy - half).round() as usize;
        let left = (cx - half).round() as usize;
        let mask = add_defect(&mut image, top, left, spec.defect_side, &mut rng);
        save_image(&image, &noise.join(format!("{i:03}.png")))?;
        save_mask(&mask, &gt.join(format!("{i:03}_mask.png")))?;
    }
    Ok(())
}
