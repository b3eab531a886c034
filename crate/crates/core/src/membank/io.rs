//! Binary bank file format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "MSMB"
//! version      u16
//! desc_len     u32      length of the descriptor JSON
//! descriptor   desc_len bytes of JSON
//! bank_count   u8
//! per bank:
//!   kind       u8       0 global, 1 individual
//!   scale      u8       0 small, 1 middle, 2 image
//!   dim        u32
//!   rows       u64
//!   matrix     rows * dim f32, row-major
//!   provenance rows * 4 u32 (image, augmentation, object, window)
//! crc32        u32      over every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{BankKind, MemoryBank, MemoryBanks, Provenance};
use crate::decompose::Scale;
use crate::error::{contract, Error, Result};
use crate::providers::{l2, ProviderDescriptor};

pub const BANK_MAGIC: &[u8; 4] = b"MSMB";
pub const BANK_FILE_VERSION: u16 = 1;

/// Rows further than this from unit norm are renormalized on load.
const RENORM_TOLERANCE: f64 = 1e-6;

/// Writes all six banks and their descriptor. The file is written to a sibling temp path
/// and renamed into place.
pub fn save_banks(banks: &MemoryBanks, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_FILE_VERSION.to_le_bytes());
    let desc = serde_json::to_vec(banks.descriptor())?;
    buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    buf.extend_from_slice(&desc);
    buf.push(banks.iter().count() as u8);
    for bank in banks.iter() {
        buf.push(kind_code(bank.kind()));
        buf.push(scale_code(bank.scale()));
        buf.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(bank.len() as u64).to_le_bytes());
        buf.reserve(bank.data().len() * 4 + bank.len() * 16);
        for v in bank.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in bank.provenance() {
            for f in [p.image, p.augmentation, p.object, p.window] {
                buf.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a bank file, checking magic, version and checksum.
pub fn load_banks(path: &Path) -> Result<MemoryBanks> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != BANK_MAGIC {
        return Err(Error::Format("missing MSMB magic".into()));
    }
    let mut r = Reader { bytes: &bytes, pos: 4 };
    let version = u16::from_le_bytes(r.array()?);
    if version != BANK_FILE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BANK_FILE_VERSION,
        });
    }
    if bytes.len() < 10 {
        return Err(Error::Format("file too short".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: payload, pos: 6 };
    let desc_len = u32::from_le_bytes(r.array()?) as usize;
    let descriptor: ProviderDescriptor = serde_json::from_slice(r.take(desc_len)?)?;
    let count = r.take(1)?[0];
    let mut banks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind = match r.take(1)?[0] {
            0 => BankKind::Global,
            1 => BankKind::Individual,
            k => return Err(Error::Format(format!("unknown bank kind {k}"))),
        };
        let scale = match r.take(1)?[0] {
            0 => Scale::Small,
            1 => Scale::Middle,
            2 => Scale::Image,
            s => return Err(Error::Format(format!("unknown scale {s}"))),
        };
        let dim = u32::from_le_bytes(r.array()?) as usize;
        let rows = usize::try_from(u64::from_le_bytes(r.array()?))
            .map_err(|_| Error::Format("row count overflows".into()))?;
        let n = rows
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format(format!("bank of {rows} x {dim} exceeds the file")))?;
        let mut data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let provenance = r
            .take(rows.checked_mul(16).ok_or_else(|| Error::Format("row count overflows".into()))?)?
            .chunks_exact(16)
            .map(|c| {
                let f = |i: usize| u32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
                Provenance {
                    image: f(0),
                    augmentation: f(1),
                    object: f(2),
                    window: f(3),
                }
            })
            .collect();
        if dim > 0 {
            renormalize_drifted(&mut data, dim);
        }
        banks.push(MemoryBank::new(kind, scale, dim, data, provenance)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    MemoryBanks::new(descriptor, banks)
}

/// [`load_banks`], then rejects files written by a different encoder.
pub fn load_banks_for(path: &Path, expected: &ProviderDescriptor) -> Result<MemoryBanks> {
    let banks = load_banks(path)?;
    if banks.descriptor() != expected {
        return Err(contract!(
            "bank file was built with {:?} (dim {}), current provider is {:?} (dim {})",
            banks.descriptor().name,
            banks.descriptor().dim,
            expected.name,
            expected.dim
        ));
    }
    Ok(banks)
}

// Rows already within tolerance are left bit-identical.
fn renormalize_drifted(data: &mut [f32], dim: usize) {
    for row in data.chunks_exact_mut(dim) {
        let norm = l2(row);
        if norm > 0.0 && (norm - 1.0).abs() > RENORM_TOLERANCE {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
}

fn kind_code(k: BankKind) -> u8 {
    match k {
        BankKind::Global => 0,
        BankKind::Individual => 1,
    }
}

fn scale_code(s: Scale) -> u8 {
    match s {
        Scale::Small => 0,
        Scale::Middle => 1,
        Scale::Image => 2,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
