//! Execution-ready matrix formats.
//!
//! A per-process block is a [`CsrMatrix`] in local indices plus the maps
//! back to global elements. The staged form groups rows into thread-block
//! partitions; each partition walks its distinct input columns in stages
//! that fit a fixed scratch capacity, and each stage stores its entries in
//! a sliced layout of `WARP_WIDTH` rows, zero padded:
//!
//! - `buffdispl[b]..buffdispl[b + 1]`: stages of partition `b`
//! - `mapdispl[s]..mapdispl[s + 1]`: slots of stage `s` in `buffmap`, which
//!   holds the local input column loaded into each scratch slot
//! - `warpdispl[s] + w`: index into `displ` of warp `w` of stage `s`
//! - `displ[i]..displ[i + 1]`: entries of one warp; entry `j` of lane `l`
//!   sits at `displ[i] + j * WARP_WIDTH + l`

use std::ops::Range;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::Subdomain;
use crate::precision::{Precision, HALF_MIN_SUBNORMAL, HALF_SAFE_MAX};
use crate::sparse::CsrMatrix;

pub const WARP_WIDTH: usize = 32;
pub const DEFAULT_STAGE_CAPACITY: usize = 96 * 1024;
pub const DEFAULT_BLOCK_ROWS: usize = 256;
/// Largest scratch buffer addressable by a 16-bit local index.
pub const MAX_STAGE_ELEMENTS: usize = 1 << 16;
pub const NORMALIZATION_TARGET: f64 = 1.0;

/// A matrix block in local indices. Row `i` is global target element
/// `row_map[i]`; column `j` is global source element `col_map[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBlock {
    pub matrix: CsrMatrix,
    pub row_map: Vec<usize>,
    pub col_map: Vec<usize>,
}

impl LocalBlock {
    /// Scatter back into a matrix of the given global shape.
    pub fn to_global(&self, nrows: usize, ncols: usize) -> Result<CsrMatrix> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for (i, &g) in self.row_map.iter().enumerate() {
            rows[g].extend(self.matrix.row(i).map(|(c, v)| (self.col_map[c], v)));
        }
        rows.iter_mut().for_each(|r| r.sort_by_key(|e| e.0));
        CsrMatrix::from_rows(ncols, rows)
    }

    /// Stage this block with uniform thread-block partitions.
    pub fn stage(
        &self,
        precision: Precision,
        stage_capacity_bytes: usize,
        block_rows: usize,
        ffactor: usize,
    ) -> Result<StagedBlock> {
        let blocks = uniform_blocks(self.matrix.nrows(), block_rows);
        Ok(StagedBlock {
            matrix: build_staged(
                &self.matrix,
                precision,
                stage_capacity_bytes,
                &blocks,
                ffactor,
            )?,
            row_map: self.row_map.clone(),
            col_map: self.col_map.clone(),
        })
    }
}

/// A staged block with its global element maps.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedBlock {
    pub matrix: PackedStagedMatrix,
    pub row_map: Vec<usize>,
    pub col_map: Vec<usize>,
}

/// The two blocks held by one data process.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessBlocks {
    /// `A[F_p, T_p]`: tomogram subdomain columns, footprint rows.
    pub projection: LocalBlock,
    /// `A[S_p, F'_p]^T`: sinogram subdomain columns, footprint voxel rows.
    pub backprojection: LocalBlock,
}

fn check_partition(subdomains: &[Subdomain], size: usize, what: &str) -> Result<Vec<usize>> {
    let mut position = vec![usize::MAX; size];
    let mut next = 0;
    for s in subdomains {
        for &e in &s.elements {
            if e >= size || position[e] != usize::MAX {
                return Err(Error::NotAPartition(format!(
                    "{what} element {e} is out of range or claimed twice"
                )));
            }
            position[e] = next;
            next += 1;
        }
    }
    if next != size {
        return Err(Error::NotAPartition(format!(
            "{what} subdomains cover {next} of {size} elements"
        )));
    }
    Ok(position)
}

/// Cut `a` into per-process blocks. Footprint rows (and voxel rows of the
/// transposed blocks) are ordered by their position along the other
/// domain's curve, so contiguous row ranges stay spatially compact.
pub fn partition_matrix(
    a: &CsrMatrix,
    tomogram: &[Subdomain],
    sinogram: &[Subdomain],
) -> Result<Vec<ProcessBlocks>> {
    if tomogram.len() != sinogram.len() {
        return Err(Error::NotAPartition(format!(
            "{} tomogram but {} sinogram subdomains",
            tomogram.len(),
            sinogram.len()
        )));
    }
    let voxel_rank = check_partition(tomogram, a.ncols(), "tomogram")?;
    let ray_rank = check_partition(sinogram, a.nrows(), "sinogram")?;
    let at = a.transpose();

    let extract = |m: &CsrMatrix, sources: &[usize], target_rank: &[usize]| -> Result<LocalBlock> {
        let mut local = vec![usize::MAX; m.ncols()];
        sources.iter().enumerate().for_each(|(j, &e)| local[e] = j);
        let mut rows: Vec<usize> = (0..m.nrows())
            .filter(|&r| m.row(r).any(|(c, _)| local[c] != usize::MAX))
            .collect();
        rows.sort_by_key(|&r| target_rank[r]);
        let matrix = CsrMatrix::from_rows(
            sources.len(),
            rows.iter().map(|&r| {
                let mut row: Vec<(usize, f64)> = m
                    .row(r)
                    .filter(|&(c, _)| local[c] != usize::MAX)
                    .map(|(c, v)| (local[c], v))
                    .collect();
                row.sort_by_key(|e| e.0);
                row
            }),
        )?;
        Ok(LocalBlock {
            matrix,
            row_map: rows,
            col_map: sources.to_vec(),
        })
    };

    tomogram
        .iter()
        .zip(sinogram)
        .map(|(t, s)| {
            Ok(ProcessBlocks {
                projection: extract(a, &t.elements, &ray_rank)?,
                backprojection: extract(&at, &s.elements, &voxel_rank)?,
            })
        })
        .collect()
}

/// Swap the roles of rows and columns.
pub fn transpose(block: &LocalBlock) -> LocalBlock {
    LocalBlock {
        matrix: block.matrix.transpose(),
        row_map: block.col_map.clone(),
        col_map: block.row_map.clone(),
    }
}

/// A stage-local index and a half-precision length in four bytes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[repr(C)]
pub struct PackedEntry {
    pub index: u16,
    pub length: f16,
}

impl PackedEntry {
    pub fn new(index: usize, length: f64) -> Result<Self> {
        let index = u16::try_from(index).map_err(|_| Error::IndexOverflow { index })?;
        Ok(Self {
            index,
            length: f16::from_f64(length),
        })
    }

    pub fn unpack(self) -> (usize, f64) {
        (self.index as usize, self.length.to_f64())
    }
}

/// What happened to the lengths during conversion to half.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PackReport {
    pub entries: usize,
    /// Nonzero lengths below the smallest half subnormal; they round to 0.
    pub underflow: usize,
    /// Lengths beyond the largest finite half.
    pub overflow: usize,
    pub max_rel_error: f64,
}

impl PackReport {
    pub fn needs_rescale(&self) -> bool {
        self.underflow > 0 || self.overflow > 0
    }
}

/// Pack `(stage-local index, length)` pairs. Fails on an index that needs
/// more than 16 bits, meaning the stage must be split further.
pub fn pack(entries: &[(usize, f64)]) -> Result<(Vec<PackedEntry>, PackReport)> {
    let mut report = PackReport {
        entries: entries.len(),
        ..Default::default()
    };
    let packed = entries
        .iter()
        .map(|&(i, l)| {
            let e = PackedEntry::new(i, l)?;
            let q = e.length.to_f64();
            if l != 0.0 && l.abs() < HALF_MIN_SUBNORMAL {
                report.underflow += 1;
            } else if q.is_infinite() {
                report.overflow += 1;
            } else if l != 0.0 {
                report.max_rel_error = report.max_rel_error.max((q - l).abs() / l.abs());
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((packed, report))
}

/// Underflow/overflow report for matrix values without packing them.
pub fn half_report(values: &[f64]) -> PackReport {
    let entries: Vec<(usize, f64)> = values.iter().map(|&v| (0, v)).collect();
    pack(&entries).map(|(_, r)| r).unwrap_or_default()
}

/// Rescale `a` in place so that its median nonzero length becomes 1, as if
/// the voxels were enlarged. Returns the factor applied; results computed
/// with the rescaled matrix are divided by it.
pub fn rescale_median_to_unit(a: &mut CsrMatrix) -> f64 {
    let mut lengths: Vec<f64> = a.values().iter().copied().filter(|v| *v > 0.0).collect();
    if lengths.is_empty() {
        return 1.0;
    }
    let mid = lengths.len() / 2;
    let (_, median, _) = lengths.select_nth_unstable_by(mid, f64::total_cmp);
    let factor = 1.0 / *median;
    a.scale(factor);
    factor
}

/// Entry storage at the stored precision of the mode.
#[derive(Debug, Clone, PartialEq)]
pub enum EntryStore {
    Double { index: Vec<u32>, length: Vec<f64> },
    Single { index: Vec<u32>, length: Vec<f32> },
    Packed(Vec<PackedEntry>),
}

impl EntryStore {
    pub fn len(&self) -> usize {
        match self {
            EntryStore::Double { index, .. } | EntryStore::Single { index, .. } => index.len(),
            EntryStore::Packed(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, n: usize) -> (usize, f64) {
        match self {
            EntryStore::Double { index, length } => (index[n] as usize, length[n]),
            EntryStore::Single { index, length } => (index[n] as usize, length[n] as f64),
            EntryStore::Packed(p) => p[n].unpack(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedStagedMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub precision: Precision,
    pub ffactor: usize,
    pub stage_capacity_bytes: usize,
    /// Scratch slots available to one stage.
    pub stage_elements: usize,
    /// Nonzeros kept after conversion (padding excluded).
    pub nnz: usize,
    pub blocks: Vec<Range<usize>>,
    pub buffdispl: Vec<usize>,
    pub mapdispl: Vec<usize>,
    pub buffmap: Vec<u32>,
    pub warpdispl: Vec<usize>,
    pub displ: Vec<usize>,
    pub entries: EntryStore,
    pub report: PackReport,
}

impl PackedStagedMatrix {
    pub fn num_stages(&self) -> usize {
        self.mapdispl.len() - 1
    }

    /// Total mapped scratch slots over all stages.
    pub fn mapnz(&self) -> usize {
        self.buffmap.len()
    }

    pub fn stages_of_block(&self, b: usize) -> Range<usize> {
        self.buffdispl[b]..self.buffdispl[b + 1]
    }

    /// Replay stage maps and entries into a canonical matrix.
    pub fn materialize(&self) -> Result<CsrMatrix> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.nrows];
        for (b, block) in self.blocks.iter().enumerate() {
            for s in self.stages_of_block(b) {
                let map = &self.buffmap[self.mapdispl[s]..self.mapdispl[s + 1]];
                let warps = block.len().div_ceil(WARP_WIDTH);
                for w in 0..warps {
                    let slot = self.warpdispl[s] + w;
                    for n in self.displ[slot]..self.displ[slot + 1] {
                        let lane = (n - self.displ[slot]) % WARP_WIDTH;
                        let (ind, len) = self.entries.get(n);
                        if len != 0.0 {
                            rows[block.start + w * WARP_WIDTH + lane]
                                .push((map[ind] as usize, len));
                        }
                    }
                }
            }
        }
        rows.iter_mut().for_each(|r| r.sort_by_key(|e| e.0));
        CsrMatrix::from_rows(self.ncols, rows)
    }
}

/// Scratch slots per stage for a capacity, precision and fusing factor.
pub fn stage_elements(
    capacity_bytes: usize,
    precision: Precision,
    ffactor: usize,
) -> Result<usize> {
    let needed = precision.element_bytes() * ffactor;
    if ffactor == 0 {
        return Err(Error::InvalidFusingFactor(0));
    }
    if capacity_bytes < needed {
        return Err(Error::CapacityTooSmall {
            capacity: capacity_bytes,
            needed,
        });
    }
    Ok((capacity_bytes / needed).min(MAX_STAGE_ELEMENTS))
}

/// Stages needed for a partition that reads `footprint` distinct inputs.
pub fn stage_count(
    footprint: usize,
    capacity_bytes: usize,
    precision: Precision,
    ffactor: usize,
) -> Result<usize> {
    Ok(footprint.div_ceil(stage_elements(capacity_bytes, precision, ffactor)?))
}

/// Contiguous row ranges of at most `rows_per_block` rows.
pub fn uniform_blocks(nrows: usize, rows_per_block: usize) -> Vec<Range<usize>> {
    let step = rows_per_block.max(1);
    (0..nrows.div_ceil(step))
        .map(|b| b * step..((b + 1) * step).min(nrows))
        .collect()
}

/// Convert a block into the staged, sliced, precision-specific layout.
/// `block_partitions` must be consecutive ranges covering every row.
pub fn build_staged(
    block: &CsrMatrix,
    precision: Precision,
    stage_capacity_bytes: usize,
    block_partitions: &[Range<usize>],
    ffactor: usize,
) -> Result<PackedStagedMatrix> {
    let stage_elems = stage_elements(stage_capacity_bytes, precision, ffactor)?;
    let mut expected = 0;
    for r in block_partitions {
        if r.start != expected || r.end < r.start {
            return Err(Error::NotAPartition(
                "block partitions are not consecutive".into(),
            ));
        }
        expected = r.end;
    }
    if expected != block.nrows() {
        return Err(Error::NotAPartition(format!(
            "block partitions cover {expected} of {} rows",
            block.nrows()
        )));
    }

    let mut buffdispl = vec![0];
    let mut mapdispl = vec![0];
    let mut buffmap: Vec<u32> = Vec::new();
    let mut warpdispl = vec![0];
    let mut displ = vec![0];
    let mut slots: Vec<(usize, f64)> = Vec::new();
    let mut slot_of = vec![usize::MAX; block.ncols()];

    for range in block_partitions {
        let mut cols: Vec<usize> = range
            .clone()
            .flat_map(|r| block.row(r).map(|e| e.0))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        let warps = range.len().div_ceil(WARP_WIDTH);
        for chunk in cols.chunks(stage_elems.max(1)) {
            for (i, &c) in chunk.iter().enumerate() {
                slot_of[c] = i;
                buffmap.push(c as u32);
            }
            mapdispl.push(buffmap.len());
            let (lo, hi) = (chunk[0], chunk[chunk.len() - 1]);
            for w in 0..warps {
                let rows = range.start + w * WARP_WIDTH
                    ..(range.start + (w + 1) * WARP_WIDTH).min(range.end);
                let lanes: Vec<Vec<(usize, f64)>> = rows
                    .map(|r| {
                        block
                            .row(r)
                            .filter(|&(c, _)| c >= lo && c <= hi)
                            .map(|(c, v)| (slot_of[c], precision.quantize(v)))
                            .filter(|&(_, v)| v != 0.0)
                            .collect()
                    })
                    .collect();
                let depth = lanes.iter().map(Vec::len).max().unwrap_or(0);
                for j in 0..depth {
                    for l in 0..WARP_WIDTH {
                        slots.push(
                            lanes
                                .get(l)
                                .and_then(|e| e.get(j))
                                .copied()
                                .unwrap_or((0, 0.0)),
                        );
                    }
                }
                displ.push(slots.len());
            }
            warpdispl.push(displ.len() - 1);
        }
        buffdispl.push(mapdispl.len() - 1);
    }

    let nnz = slots.iter().filter(|e| e.1 != 0.0).count();
    let report = if precision.is_half_storage() {
        let raw: Vec<f64> = block.values().to_vec();
        half_report(&raw)
    } else {
        PackReport {
            entries: block.nnz(),
            ..Default::default()
        }
    };
    let entries = match precision {
        Precision::Double => EntryStore::Double {
            index: slots.iter().map(|e| e.0 as u32).collect(),
            length: slots.iter().map(|e| e.1).collect(),
        },
        Precision::Single => EntryStore::Single {
            index: slots.iter().map(|e| e.0 as u32).collect(),
            length: slots.iter().map(|e| e.1 as f32).collect(),
        },
        Precision::Half | Precision::Mixed => EntryStore::Packed(pack(&slots)?.0),
    };

    Ok(PackedStagedMatrix {
        nrows: block.nrows(),
        ncols: block.ncols(),
        precision,
        ffactor,
        stage_capacity_bytes,
        stage_elements: stage_elems,
        nnz,
        blocks: block_partitions.to_vec(),
        buffdispl,
        mapdispl,
        buffmap,
        warpdispl,
        displ,
        entries,
        report,
    })
}

/// Scale applied to a vector before reduced-precision storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub factor: f64,
    pub mode: Precision,
}

/// Scale `v` so its max-norm equals the target and round it to the mode's
/// storage type. A zero vector is left alone with factor 1.
pub fn normalize(v: &[f64], mode: Precision) -> Result<(Vec<f64>, NormalizationState)> {
    if let Some(i) = v.iter().position(|a| !a.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite value at {i}")));
    }
    let max = v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let factor = if max > 0.0 {
        max / NORMALIZATION_TARGET
    } else {
        1.0
    };
    let mut scaled: Vec<f64> = if factor == 1.0 {
        v.to_vec()
    } else {
        v.iter().map(|a| a / factor).collect()
    };
    debug_assert!(scaled.iter().all(|a| a.abs() <= HALF_SAFE_MAX));
    mode.quantize_slice(&mut scaled);
    Ok((scaled, NormalizationState { factor, mode }))
}

pub fn denormalize(v: &[f64], state: &NormalizationState) -> Vec<f64> {
    if state.factor == 1.0 {
        return v.to_vec();
    }
    v.iter().map(|a| a * state.factor).collect()
}
