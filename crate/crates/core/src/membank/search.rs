//! Exact nearest-neighbour search by cosine distance.
//!
//! Bank rows and queries are unit vectors, so the nearest row is the one with the
//! largest dot product and `dist = (1 - dot) / 2`. The search runs in two passes:
//!
//! 1. A blocked `f32` GEMM of query blocks against bank blocks screens every row. For
//!    unit vectors of dimension `d` each `f32` dot product is within `gamma_d =
//!    d * u / (1 - d * u)` (`u = 2^-24`) of the exact value, so every row whose exact
//!    score could be the maximum has an `f32` score within `2 * gamma_d` of the best
//!    `f32` score.
//! 2. Those candidates are rescored in `f64`; the best (lowest index on ties) wins.
//!
//! The result is the exact minimiser, not an approximation.

use rayon::prelude::*;

use super::MemoryBank;
use crate::error::{contract, Result};
use crate::providers::{dot64, Embedding};

const QUERY_BLOCK: usize = 256;
const ROW_BLOCK: usize = 2048;

/// Nearest bank row for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BankQueryResult {
    /// `(1 - cos) / 2` to the nearest row, in `[0, 1]`.
    pub distance: f64,
    pub nearest_row: usize,
}

fn screening_margin(dim: usize) -> f32 {
    let u = f64::from(f32::EPSILON) / 2.0;
    let gamma = dim as f64 * u / (1.0 - dim as f64 * u);
    // slack for rows that are unit-norm only up to the storage tolerance
    (2.0 * gamma * 1.001 + 4.0 * crate::providers::UNIT_NORM_TOLERANCE) as f32
}

/// Per-query screening state for one block of bank rows.
struct Screen {
    best: f32,
    /// `(row, f32 score)` of rows within the margin of this block's best.
    candidates: Vec<(usize, f32)>,
}

pub fn query(bank: &MemoryBank, e: &Embedding) -> Result<BankQueryResult> {
    Ok(query_many(bank, std::slice::from_ref(e))?[0])
}

/// Exact nearest rows for a batch of queries, in query order.
pub fn query_many(bank: &MemoryBank, queries: &[Embedding]) -> Result<Vec<BankQueryResult>> {
    let dim = bank.dim();
    if bank.is_empty() {
        return Err(contract!("cannot query an empty bank"));
    }
    if let Some(q) = queries.iter().find(|q| q.dim() != dim) {
        return Err(contract!("query dim {} does not match bank dim {dim}", q.dim()));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let margin = screening_margin(dim);
    let qdata: Vec<f32> = queries.iter().flat_map(|q| q.as_slice().iter().copied()).collect();
    let n = bank.len();
    let q_blocks = queries.len().div_ceil(QUERY_BLOCK);
    let r_blocks = n.div_ceil(ROW_BLOCK);

    let screens: Vec<Vec<Screen>> = (0..q_blocks * r_blocks)
        .into_par_iter()
        .map(|task| {
            let (qb, rb) = (task / r_blocks, task % r_blocks);
            let q0 = qb * QUERY_BLOCK;
            let qn = QUERY_BLOCK.min(queries.len() - q0);
            let r0 = rb * ROW_BLOCK;
            let rn = ROW_BLOCK.min(n - r0);
            screen_block(&qdata[q0 * dim..(q0 + qn) * dim], &bank.data()[r0 * dim..(r0 + rn) * dim], qn, rn, dim, r0, margin)
        })
        .collect();

    let mut out = Vec::with_capacity(queries.len());
    for (qi, q) in queries.iter().enumerate() {
        let (qb, local) = (qi / QUERY_BLOCK, qi % QUERY_BLOCK);
        let blocks = &screens[qb * r_blocks..(qb + 1) * r_blocks];
        let best = blocks.iter().map(|b| b[local].best).fold(f32::NEG_INFINITY, f32::max);
        let floor = best - margin;
        let mut winner = (f64::NEG_INFINITY, usize::MAX);
        for b in blocks {
            for &(row, _) in b[local].candidates.iter().filter(|(_, s)| *s >= floor) {
                // rows come in increasing order, so strict `>` keeps the lowest index on ties
                let exact = dot64(q.as_slice(), bank.row(row));
                if exact > winner.0 {
                    winner = (exact, row);
                }
            }
        }
        out.push(BankQueryResult {
            distance: ((1.0 - winner.0) / 2.0).clamp(0.0, 1.0),
            nearest_row: winner.1,
        });
    }
    Ok(out)
}

fn screen_block(q: &[f32], rows: &[f32], qn: usize, rn: usize, dim: usize, row_offset: usize, margin: f32) -> Vec<Screen> {
    let mut scores = vec![0f32; qn * rn];
    // SAFETY: `q` is qn x dim row-major, `rows` is rn x dim row-major and read transposed
    // (dim x rn with strides 1, dim), `scores` is qn x rn row-major; all slices are exactly
    // that long.
    unsafe {
        matrixmultiply::sgemm(
            qn,
            dim,
            rn,
            1.0,
            q.as_ptr(),
            dim as isize,
            1,
            rows.as_ptr(),
            1,
            dim as isize,
            0.0,
            scores.as_mut_ptr(),
            rn as isize,
            1,
        );
    }
    scores
        .chunks_exact(rn)
        .map(|s| {
            let best = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let floor = best - margin;
            let candidates = s
                .iter()
                .enumerate()
                .filter(|(_, &v)| v >= floor)
                .map(|(j, &v)| (row_offset + j, v))
                .collect();
            Screen { best, candidates }
        })
        .collect()
}
