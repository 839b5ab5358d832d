//! Fused SpMM kernels over minibatches of slices.
//!
//! Inputs and outputs are element-major: value `f` of element `e` sits at
//! `e * ffactor + f`, so one matrix entry is loaded once and applied to all
//! fused slices. Each thread-block partition gathers its stage inputs into
//! a bounded scratch buffer before the multiply-adds.
//!
//! | mode   | storage | accumulator |
//! |--------|---------|-------------|
//! | double | f64     | f64         |
//! | single | f32     | f32         |
//! | mixed  | f16     | f32, rounded to f16 at the store |
//! | half   | f16     | f16         |

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::Subdomain;
use crate::matrixstore::{EntryStore, PackedStagedMatrix, StagedBlock, WARP_WIDTH};
use crate::precision::Precision;
use crate::sparse::CsrMatrix;

pub const DEFAULT_FFACTOR: usize = 16;
pub const MAX_FFACTOR: usize = 50;

/// `ffactor` slices of one vector, element-major, rounded to the storage
/// type of `precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    ffactor: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl Minibatch {
    pub fn new(ffactor: usize, precision: Precision, mut data: Vec<f64>) -> Result<Self> {
        if ffactor == 0 || ffactor > MAX_FFACTOR {
            return Err(Error::InvalidFusingFactor(ffactor));
        }
        if !data.len().is_multiple_of(ffactor) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not split into {ffactor} columns",
                data.len()
            )));
        }
        precision.quantize_slice(&mut data);
        Ok(Self {
            ffactor,
            precision,
            data,
        })
    }

    /// Interleave equally long columns.
    pub fn from_columns(precision: Precision, columns: &[&[f64]]) -> Result<Self> {
        let f = columns.len();
        let len = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::ShapeMismatch(
                "minibatch columns differ in length".into(),
            ));
        }
        let mut data = vec![0.0; len * f];
        for (k, col) in columns.iter().enumerate() {
            for (e, &v) in col.iter().enumerate() {
                data[e * f + k] = v;
            }
        }
        Self::new(f, precision, data)
    }

    pub fn ffactor(&self) -> usize {
        self.ffactor
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Elements per column.
    pub fn len(&self) -> usize {
        self.data.len() / self.ffactor
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(k)
            .step_by(self.ffactor)
            .copied()
            .collect()
    }
}

/// One process's contribution to a target domain for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialResult {
    pub owner: usize,
    /// Global target elements, one per row of `values`.
    pub elements: Vec<usize>,
    pub ffactor: usize,
    pub precision: Precision,
    /// Element-major, `elements.len() * ffactor` values.
    pub values: Vec<f64>,
}

/// Naive row-ordered double SpMM: the ground truth for every kernel.
pub fn spmm_reference(block: &CsrMatrix, x: &[f64], ffactor: usize) -> Result<Vec<f64>> {
    if ffactor == 0 {
        return Err(Error::InvalidFusingFactor(0));
    }
    if x.len() != block.ncols() * ffactor {
        return Err(Error::ShapeMismatch(format!(
            "input of length {} for {} columns x {ffactor}",
            x.len(),
            block.ncols()
        )));
    }
    let mut out = vec![0.0; block.nrows() * ffactor];
    for r in 0..block.nrows() {
        let acc = &mut out[r * ffactor..(r + 1) * ffactor];
        for (c, v) in block.row(r) {
            for (a, xv) in acc.iter_mut().zip(&x[c * ffactor..(c + 1) * ffactor]) {
                *a += v * xv;
            }
        }
    }
    Ok(out)
}

trait Store: Copy + Send + Sync + 'static {
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Store for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Store for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Store for f16 {
    const ZERO: Self = f16::ZERO;
    fn from_f64(v: f64) -> Self {
        f16::from_f64(v)
    }
    fn to_f64(self) -> f64 {
        f16::to_f64(self)
    }
}

trait Mode {
    type S: Store;
    type A: Copy + Send;
    const ZERO: Self::A;
    fn fma(acc: Self::A, x: Self::S, len: Self::S) -> Self::A;
    fn finish(acc: Self::A) -> Self::S;
}

struct DoubleMode;
struct SingleMode;
struct MixedMode;
struct HalfMode;

impl Mode for DoubleMode {
    type S = f64;
    type A = f64;
    const ZERO: f64 = 0.0;
    fn fma(acc: f64, x: f64, len: f64) -> f64 {
        acc + x * len
    }
    fn finish(acc: f64) -> f64 {
        acc
    }
}

impl Mode for SingleMode {
    type S = f32;
    type A = f32;
    const ZERO: f32 = 0.0;
    fn fma(acc: f32, x: f32, len: f32) -> f32 {
        acc + x * len
    }
    fn finish(acc: f32) -> f32 {
        acc
    }
}

impl Mode for MixedMode {
    type S = f16;
    type A = f32;
    const ZERO: f32 = 0.0;
    fn fma(acc: f32, x: f16, len: f16) -> f32 {
        acc + x.to_f32() * len.to_f32()
    }
    fn finish(acc: f32) -> f16 {
        f16::from_f32(acc)
    }
}

impl Mode for HalfMode {
    type S = f16;
    type A = f16;
    const ZERO: f16 = f16::ZERO;
    fn fma(acc: f16, x: f16, len: f16) -> f16 {
        f16::from_f32(acc.to_f32() + x.to_f32() * len.to_f32())
    }
    fn finish(acc: f16) -> f16 {
        acc
    }
}

fn kernel<M, E>(m: &PackedStagedMatrix, x: &[f64], entry: E) -> Vec<f64>
where
    M: Mode,
    E: Fn(usize) -> (usize, M::S) + Sync,
{
    let f = m.ffactor;
    let input: Vec<M::S> = x.iter().map(|&v| M::S::from_f64(v)).collect();
    let per_block: Vec<Vec<f64>> = m
        .blocks
        .par_iter()
        .enumerate()
        .map(|(b, rows)| {
            let mut acc = vec![M::ZERO; rows.len() * f];
            let slots = m
                .stages_of_block(b)
                .map(|s| m.mapdispl[s + 1] - m.mapdispl[s])
                .max()
                .unwrap_or(0);
            debug_assert!(slots <= m.stage_elements);
            let mut buff = vec![M::S::ZERO; slots * f];
            let warps = rows.len().div_ceil(WARP_WIDTH);
            for s in m.stages_of_block(b) {
                let map = &m.buffmap[m.mapdispl[s]..m.mapdispl[s + 1]];
                for (slot, &c) in map.iter().enumerate() {
                    let c = c as usize;
                    buff[slot * f..(slot + 1) * f].copy_from_slice(&input[c * f..(c + 1) * f]);
                }
                for w in 0..warps {
                    let i = m.warpdispl[s] + w;
                    for n in (m.displ[i]..m.displ[i + 1]).step_by(WARP_WIDTH) {
                        for lane in 0..WARP_WIDTH {
                            let row = w * WARP_WIDTH + lane;
                            if row >= rows.len() {
                                break;
                            }
                            let (ind, len) = entry(n + lane);
                            let a = &mut acc[row * f..(row + 1) * f];
                            let v = &buff[ind * f..(ind + 1) * f];
                            for k in 0..f {
                                a[k] = M::fma(a[k], v[k], len);
                            }
                        }
                    }
                }
            }
            acc.into_iter().map(|a| M::finish(a).to_f64()).collect()
        })
        .collect();
    per_block.concat()
}

/// Multiply a staged matrix by a minibatch whose rows are its local
/// columns. Output is element-major over local rows.
pub fn spmm(m: &PackedStagedMatrix, batch: &Minibatch) -> Result<Vec<f64>> {
    if batch.ffactor() != m.ffactor {
        return Err(Error::FusingMismatch {
            expected: m.ffactor,
            got: batch.ffactor(),
        });
    }
    if batch.precision() != m.precision {
        return Err(Error::InvalidConfig(format!(
            "{} minibatch for a {} matrix",
            batch.precision(),
            m.precision
        )));
    }
    if batch.len() != m.ncols {
        return Err(Error::ShapeMismatch(format!(
            "minibatch of {} elements for {} columns",
            batch.len(),
            m.ncols
        )));
    }
    let x = batch.data();
    Ok(match (&m.entries, m.precision) {
        (EntryStore::Double { index, length }, _) => {
            kernel::<DoubleMode, _>(m, x, |n| (index[n] as usize, length[n]))
        }
        (EntryStore::Single { index, length }, _) => {
            kernel::<SingleMode, _>(m, x, |n| (index[n] as usize, length[n]))
        }
        (EntryStore::Packed(p), Precision::Half) => {
            kernel::<HalfMode, _>(m, x, |n| (p[n].index as usize, p[n].length))
        }
        (EntryStore::Packed(p), _) => {
            kernel::<MixedMode, _>(m, x, |n| (p[n].index as usize, p[n].length))
        }
    })
}

/// Forward projection of one process's tomogram subdomain.
pub fn project(block: &StagedBlock, owner: usize, batch: &Minibatch) -> Result<PartialResult> {
    Ok(PartialResult {
        owner,
        elements: block.row_map.clone(),
        ffactor: batch.ffactor(),
        precision: batch.precision(),
        values: spmm(&block.matrix, batch)?,
    })
}

/// Backprojection of one process's sinogram subdomain. The kernel is the
/// one used for projection, applied to the transposed block.
pub fn backproject(block: &StagedBlock, owner: usize, batch: &Minibatch) -> Result<PartialResult> {
    project(block, owner, batch)
}

/// Which process owns each target element.
#[derive(Debug, Clone, PartialEq)]
pub struct Ownership {
    owner_of: Vec<usize>,
    elements: Vec<Vec<usize>>,
}

impl Ownership {
    /// `parts[q]` lists the elements owned by process `q`; together they
    /// must cover `0..size` exactly once.
    pub fn new(size: usize, parts: Vec<Vec<usize>>) -> Result<Self> {
        let mut owner_of = vec![usize::MAX; size];
        for (q, part) in parts.iter().enumerate() {
            for &e in part {
                if e >= size {
                    return Err(Error::OutOfRange {
                        what: "owned element",
                        index: e,
                        limit: size,
                    });
                }
                if owner_of[e] != usize::MAX {
                    return Err(Error::NotAPartition(format!(
                        "element {e} claimed by processes {} and {q}",
                        owner_of[e]
                    )));
                }
                owner_of[e] = q;
            }
        }
        if let Some(e) = owner_of.iter().position(|&q| q == usize::MAX) {
            return Err(Error::NotAPartition(format!("element {e} has no owner")));
        }
        Ok(Self {
            owner_of,
            elements: parts,
        })
    }

    pub fn from_subdomains(size: usize, subdomains: &[Subdomain]) -> Result<Self> {
        Self::new(
            size,
            subdomains.iter().map(|s| s.elements.clone()).collect(),
        )
    }

    pub fn owner_of(&self, element: usize) -> usize {
        self.owner_of[element]
    }

    pub fn elements(&self, process: usize) -> &[usize] {
        &self.elements[process]
    }

    pub fn num_processes(&self) -> usize {
        self.elements.len()
    }

    pub fn size(&self) -> usize {
        self.owner_of.len()
    }
}

/// Reduced values of the elements owned by one process, in ownership
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedResult {
    pub owner: usize,
    pub elements: Vec<usize>,
    pub ffactor: usize,
    pub precision: Precision,
    pub values: Vec<f64>,
}

pub(crate) fn check_partials(partials: &[PartialResult]) -> Result<(usize, Precision)> {
    let first = partials
        .first()
        .ok_or_else(|| Error::InvalidConfig("no partial results".into()))?;
    for p in partials {
        if p.ffactor != first.ffactor {
            return Err(Error::FusingMismatch {
                expected: first.ffactor,
                got: p.ffactor,
            });
        }
        if p.precision != first.precision {
            return Err(Error::InvalidConfig("partials differ in precision".into()));
        }
        if p.values.len() != p.elements.len() * p.ffactor {
            return Err(Error::ShapeMismatch(format!(
                "partial of process {} has {} values for {} elements",
                p.owner,
                p.values.len(),
                p.elements.len()
            )));
        }
    }
    let mut owners: Vec<usize> = partials.iter().map(|p| p.owner).collect();
    owners.sort_unstable();
    if owners.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig("two partials from one process".into()));
    }
    Ok((first.ffactor, first.precision))
}

/// Sum overlapping partials per element, contributors in process-id order,
/// and hand each owner its elements.
pub fn reduce_partials(
    partials: &[PartialResult],
    ownership: &Ownership,
) -> Result<Vec<OwnedResult>> {
    let (f, precision) = check_partials(partials)?;
    let mut order: Vec<&PartialResult> = partials.iter().collect();
    order.sort_by_key(|p| p.owner);

    let mut contributions: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ownership.size()];
    for (i, p) in order.iter().enumerate() {
        for (j, &e) in p.elements.iter().enumerate() {
            if e >= ownership.size() {
                return Err(Error::OutOfRange {
                    what: "partial element",
                    index: e,
                    limit: ownership.size(),
                });
            }
            contributions[e].push((i, j));
        }
    }

    Ok((0..ownership.num_processes())
        .map(|q| {
            let elements = ownership.elements(q).to_vec();
            let mut values = vec![0.0; elements.len() * f];
            for (slot, &e) in elements.iter().enumerate() {
                for k in 0..f {
                    values[slot * f + k] = precision.reduce(
                        contributions[e]
                            .iter()
                            .map(|&(i, j)| order[i].values[j * f + k]),
                    );
                }
            }
            OwnedResult {
                owner: q,
                elements,
                ffactor: f,
                precision,
                values,
            }
        })
        .collect())
}

/// Operation and traffic counts of one kernel launch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelCounters {
    pub flops: u64,
    pub bytes: u64,
    pub intensity: f64,
}

/// FLOPs are `2 * nnz * ffactor`; bytes are the stored entries (padding
/// included), the staged input gathers and the outputs.
pub fn kernel_counters(
    nnz: usize,
    stored_entries: usize,
    gathered: usize,
    outputs: usize,
    ffactor: usize,
    precision: Precision,
) -> KernelCounters {
    let flops = 2 * nnz as u64 * ffactor as u64;
    let eb = precision.element_bytes() as u64;
    let bytes = stored_entries as u64 * precision.entry_bytes() as u64
        + (gathered + outputs) as u64 * ffactor as u64 * eb;
    KernelCounters {
        flops,
        bytes,
        intensity: if bytes == 0 {
            0.0
        } else {
            flops as f64 / bytes as f64
        },
    }
}

pub fn flops_and_bytes(
    m: &PackedStagedMatrix,
    ffactor: usize,
    precision: Precision,
) -> KernelCounters {
    kernel_counters(
        m.nnz,
        m.entries.len(),
        m.mapnz(),
        m.nrows,
        ffactor,
        precision,
    )
}
