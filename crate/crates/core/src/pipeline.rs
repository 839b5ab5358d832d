//! The partitioned operator and the memory model behind automatic
//! partitioning.
//!
//! Slices are split into `pb` contiguous batch groups. Within a group the
//! slices are processed in minibatches of `ffactor`; every minibatch is
//! normalized, projected by all `pd` data processes, and reduced through
//! the group's communication plan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{
    execute_plan, map_partitions, plan_direct, plan_hierarchical, volume_report, CommPlan,
    Placement, Topology, VolumeReport,
};
use crate::engine::{backproject, project, Minibatch, Ownership, DEFAULT_FFACTOR, MAX_FFACTOR};
use crate::error::{Error, Result};
use crate::geometry::{build_system_matrix, ScanGeometry};
use crate::hilbert::{
    decompose, split_ranges, Domain, Footprint, Subdomain, TileGrid, DEFAULT_TILE_SIZE,
};
use crate::matrixstore::{
    normalize, partition_matrix, rescale_median_to_unit, NormalizationState, StagedBlock,
    DEFAULT_BLOCK_ROWS, DEFAULT_STAGE_CAPACITY,
};
use crate::precision::Precision;
use crate::solver::LinearOperator;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub precision: Precision,
    pub ffactor: usize,
    pub pb: usize,
    pub pd: usize,
    pub stage_capacity_bytes: usize,
    pub block_rows: usize,
    /// Preferred tile side; shrunk when a grid has fewer tiles than `pd`.
    pub tile_size: usize,
    /// Rescale every minibatch by its max-norm before reduced-precision
    /// storage.
    pub normalize: bool,
    pub hierarchical: bool,
    pub topology: Topology,
}

impl OperatorConfig {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ffactor: DEFAULT_FFACTOR,
            pb: 1,
            pd: 1,
            stage_capacity_bytes: DEFAULT_STAGE_CAPACITY,
            block_rows: DEFAULT_BLOCK_ROWS,
            tile_size: DEFAULT_TILE_SIZE,
            normalize: precision.is_half_storage(),
            hierarchical: true,
            topology: Topology::two_by_three(4).expect("valid built-in topology"),
        }
    }
}

/// Largest power-of-two tile side, at most `preferred`, that gives both
/// planes at least `parts` tiles.
pub fn fit_tile_size(num_angles: usize, n: usize, parts: usize, preferred: usize) -> Result<usize> {
    let mut tile = preferred.max(1).next_power_of_two();
    if tile > preferred.max(1) {
        tile /= 2;
    }
    loop {
        let tomo = n.div_ceil(tile).pow(2);
        let sino = n.div_ceil(tile) * num_angles.div_ceil(tile);
        if tomo >= parts && sino >= parts {
            return Ok(tile);
        }
        if tile == 1 {
            return Err(Error::TooManyParts {
                parts,
                available: tomo.min(sino),
            });
        }
        tile /= 2;
    }
}

struct GroupPlans {
    projection: CommPlan,
    backprojection: CommPlan,
}

pub struct DistributedOperator {
    geometry: ScanGeometry,
    config: OperatorConfig,
    matrix: CsrMatrix,
    scale: f64,
    tile_size: usize,
    placement: Placement,
    tomogram: Vec<Subdomain>,
    sinogram: Vec<Subdomain>,
    tomogram_owners: Ownership,
    sinogram_owners: Ownership,
    projection_blocks: Vec<StagedBlock>,
    backprojection_blocks: Vec<StagedBlock>,
    projection_footprints: Vec<Footprint>,
    backprojection_footprints: Vec<Footprint>,
    plans: Vec<GroupPlans>,
    groups: Vec<std::ops::Range<usize>>,
}

fn footprints(blocks: &[StagedBlock], target: Domain) -> Vec<Footprint> {
    blocks
        .iter()
        .enumerate()
        .map(|(p, b)| {
            let mut elements = b.row_map.clone();
            elements.sort_unstable();
            Footprint {
                source: p,
                target,
                elements,
            }
        })
        .collect()
}

impl DistributedOperator {
    pub fn new(geometry: &ScanGeometry, config: OperatorConfig) -> Result<Self> {
        if config.ffactor == 0 || config.ffactor > MAX_FFACTOR {
            return Err(Error::InvalidFusingFactor(config.ffactor));
        }
        if config.pb == 0 || config.pb > geometry.num_rows() {
            return Err(Error::InvalidConfig(format!(
                "{} batch groups for {} slices",
                config.pb,
                geometry.num_rows()
            )));
        }
        let placement = map_partitions(config.pb, config.pd, &config.topology)?;
        let mut matrix = build_system_matrix(geometry)?;
        let scale = if config.precision.is_half_storage() {
            rescale_median_to_unit(&mut matrix)
        } else {
            1.0
        };

        let (k, n) = (geometry.num_angles(), geometry.grid_n());
        let tile_size = fit_tile_size(k, n, config.pd, config.tile_size)?;
        let tomogram = decompose(&TileGrid::tomogram(n, tile_size)?, config.pd)?;
        let sinogram = decompose(&TileGrid::sinogram(k, n, tile_size)?, config.pd)?;
        let blocks = partition_matrix(&matrix, &tomogram, &sinogram)?;
        let stage = |b: &crate::matrixstore::LocalBlock| {
            b.stage(
                config.precision,
                config.stage_capacity_bytes,
                config.block_rows,
                config.ffactor,
            )
        };
        let projection_blocks = blocks
            .par_iter()
            .map(|b| stage(&b.projection))
            .collect::<Result<Vec<_>>>()?;
        let backprojection_blocks = blocks
            .par_iter()
            .map(|b| stage(&b.backprojection))
            .collect::<Result<Vec<_>>>()?;

        let tomogram_owners = Ownership::from_subdomains(geometry.num_voxels(), &tomogram)?;
        let sinogram_owners = Ownership::from_subdomains(geometry.num_rays(), &sinogram)?;
        let projection_footprints = footprints(&projection_blocks, Domain::Sinogram);
        let backprojection_footprints = footprints(&backprojection_blocks, Domain::Tomogram);
        let planner = if config.hierarchical {
            plan_hierarchical
        } else {
            plan_direct
        };
        let plans = (0..config.pb)
            .map(|b| {
                let slots = placement.group(b);
                Ok(GroupPlans {
                    projection: planner(&projection_footprints, &sinogram_owners, slots)?,
                    backprojection: planner(&backprojection_footprints, &tomogram_owners, slots)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = split_ranges(geometry.num_rows(), config.pb)?;

        Ok(Self {
            geometry: geometry.clone(),
            config,
            matrix,
            scale,
            tile_size,
            placement,
            tomogram,
            sinogram,
            tomogram_owners,
            sinogram_owners,
            projection_blocks,
            backprojection_blocks,
            projection_footprints,
            backprojection_footprints,
            plans,
            groups,
        })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    /// Length rescale applied to the stored matrix (1 unless half storage).
    pub fn length_scale(&self) -> f64 {
        self.scale
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn subdomains(&self) -> (&[Subdomain], &[Subdomain]) {
        (&self.tomogram, &self.sinogram)
    }

    pub fn projection_footprints(&self) -> &[Footprint] {
        &self.projection_footprints
    }

    pub fn backprojection_footprints(&self) -> &[Footprint] {
        &self.backprojection_footprints
    }

    pub fn projection_blocks(&self) -> &[StagedBlock] {
        &self.projection_blocks
    }

    /// Bytes of staged matrix entries held by each data process.
    pub fn matrix_bytes_per_process(&self) -> Vec<usize> {
        let eb = self.config.precision.entry_bytes();
        self.projection_blocks
            .iter()
            .zip(&self.backprojection_blocks)
            .map(|(p, b)| (p.matrix.entries.len() + b.matrix.entries.len()) * eb)
            .collect()
    }

    /// Direct versus hierarchical volumes of the projection exchange of
    /// batch group `b`.
    pub fn volume_report(&self, b: usize) -> Result<VolumeReport> {
        let slots = self.placement.group(b);
        let direct = plan_direct(&self.projection_footprints, &self.sinogram_owners, slots)?;
        let hier = plan_hierarchical(&self.projection_footprints, &self.sinogram_owners, slots)?;
        volume_report(
            &direct,
            &hier,
            slots,
            &self.config.topology,
            self.config.ffactor,
            self.config.precision,
        )
    }

    fn apply(&self, v: &[f64], forward: bool) -> Result<Vec<f64>> {
        let (src_len, dst_len) = if forward {
            (self.geometry.num_voxels(), self.geometry.num_rays())
        } else {
            (self.geometry.num_rays(), self.geometry.num_voxels())
        };
        let slices = self.geometry.num_rows();
        if v.len() != slices * src_len {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} for {slices} slices of {src_len}",
                v.len()
            )));
        }
        let f = self.config.ffactor;
        let precision = self.config.precision;
        let (blocks, owners) = if forward {
            (&self.projection_blocks, &self.sinogram_owners)
        } else {
            (&self.backprojection_blocks, &self.tomogram_owners)
        };

        let pieces: Vec<Vec<(usize, Vec<f64>)>> = self
            .groups
            .par_iter()
            .enumerate()
            .map(|(b, range)| {
                let plan = if forward {
                    &self.plans[b].projection
                } else {
                    &self.plans[b].backprojection
                };
                let mut out = Vec::new();
                for z0 in range.clone().step_by(f) {
                    let count = f.min(range.end - z0);
                    let mut x = vec![0.0; src_len * f];
                    for k in 0..count {
                        let slice = &v[(z0 + k) * src_len..(z0 + k + 1) * src_len];
                        for (e, &value) in slice.iter().enumerate() {
                            x[e * f + k] = value;
                        }
                    }
                    let state = if self.config.normalize {
                        let (scaled, state) = normalize(&x, precision)?;
                        x = scaled;
                        state
                    } else {
                        NormalizationState {
                            factor: 1.0,
                            mode: precision,
                        }
                    };
                    let partials = blocks
                        .par_iter()
                        .enumerate()
                        .map(|(p, block)| {
                            let local: Vec<f64> = block
                                .col_map
                                .iter()
                                .flat_map(|&c| x[c * f..(c + 1) * f].iter().copied())
                                .collect();
                            let batch = Minibatch::new(f, precision, local)?;
                            if forward {
                                project(block, p, &batch)
                            } else {
                                backproject(block, p, &batch)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let owned = execute_plan(plan, &partials, owners)?;
                    let factor = state.factor / self.scale;
                    for k in 0..count {
                        let mut y = vec![0.0; dst_len];
                        for o in &owned {
                            for (i, &e) in o.elements.iter().enumerate() {
                                y[e] = o.values[i * f + k] * factor;
                            }
                        }
                        out.push((z0 + k, y));
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut result = vec![0.0; slices * dst_len];
        for (z, y) in pieces.into_iter().flatten() {
            result[z * dst_len..(z + 1) * dst_len].copy_from_slice(&y);
        }
        precision.vector_precision().quantize_slice(&mut result);
        Ok(result)
    }
}

impl LinearOperator for DistributedOperator {
    fn num_slices(&self) -> usize {
        self.geometry.num_rows()
    }

    fn domain_len(&self) -> usize {
        self.geometry.num_voxels()
    }

    fn range_len(&self) -> usize {
        self.geometry.num_rays()
    }

    fn precision(&self) -> Precision {
        self.config.precision
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.apply(x, true)
    }

    fn backproject(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.apply(y, false)
    }
}

impl std::fmt::Debug for DistributedOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DistributedOperator")
            .field("geometry", &self.geometry)
            .field("config", &self.config)
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

/// Nonzeros of one slice's system matrix, estimated from the geometry.
///
/// A ray with direction `(c, s)` crosses about `len * (|c| + |s|) + 1`
/// voxels. The chords of one angle add up to the area of the grid inside
/// the detector strip, which loses two corner triangles at oblique angles.
pub fn estimate_nnz(angles: &[f64], n: usize) -> f64 {
    let n = n as f64;
    angles
        .iter()
        .map(|&theta| {
            let (c, s) = (theta.cos().abs(), theta.sin().abs());
            let clipped = if c * s < 1e-12 {
                0.0
            } else {
                (c + s - 1.0).powi(2) / (4.0 * c * s)
            };
            n * n * (c + s) * (1.0 - clipped) + n
        })
        .sum()
}

/// Per-process memory as a function of the number of data processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Matrix nonzeros of one slice.
    pub nnz: f64,
    pub num_voxels: usize,
    pub num_rays: usize,
    pub precision: Precision,
    pub ffactor: usize,
    pub stage_capacity_bytes: usize,
}

impl MemoryModel {
    pub fn for_geometry(geometry: &ScanGeometry, precision: Precision, ffactor: usize) -> Self {
        Self {
            nnz: estimate_nnz(geometry.angles(), geometry.grid_n()),
            num_voxels: geometry.num_voxels(),
            num_rays: geometry.num_rays(),
            precision,
            ffactor,
            stage_capacity_bytes: DEFAULT_STAGE_CAPACITY,
        }
    }

    /// Projection and backprojection blocks, two minibatch vectors over
    /// both domains, and one stage buffer.
    pub fn bytes_per_process(&self, pd: usize) -> f64 {
        let pd = pd.max(1) as f64;
        let matrix = 2.0 * self.nnz * self.precision.entry_bytes() as f64 / pd;
        let vectors = 2.0
            * self.ffactor as f64
            * (self.num_voxels + self.num_rays) as f64
            * self.precision.element_bytes() as f64
            / pd;
        matrix + vectors + self.stage_capacity_bytes as f64
    }

    /// Smallest `pd` whose per-process footprint fits `cap_bytes`.
    pub fn min_processes(&self, cap_bytes: f64) -> Result<usize> {
        let fixed = self.stage_capacity_bytes as f64;
        if cap_bytes <= fixed {
            return Err(Error::CapacityTooSmall {
                capacity: cap_bytes as usize,
                needed: self.stage_capacity_bytes,
            });
        }
        let mut pd = (self.bytes_per_process(1) - fixed) / (cap_bytes - fixed);
        pd = pd.ceil().max(1.0);
        let mut pd = pd as usize;
        while self.bytes_per_process(pd) > cap_bytes {
            pd += 1;
        }
        Ok(pd)
    }
}

/// Minimal `pd` under the memory cap; the remaining GPUs go to batch
/// groups, at most one per slice.
pub fn auto_partition(
    model: &MemoryModel,
    cap_bytes: f64,
    total_gpus: usize,
    slices: usize,
) -> Result<(usize, usize)> {
    let pd = model.min_processes(cap_bytes)?;
    if pd > total_gpus {
        return Err(Error::Oversubscribed {
            requested: pd,
            available: total_gpus,
        });
    }
    let pb = (total_gpus / pd).min(slices).max(1);
    Ok((pb, pd))
}

/// Shrink a large scan to at most `max_n` detector columns, keeping the
/// angles-to-columns ratio. Returns `(k, n)`.
pub fn proxy_dims(num_angles: usize, n: usize, max_n: usize) -> (usize, usize) {
    if n <= max_n {
        return (num_angles, n);
    }
    let k = ((num_angles as f64) * max_n as f64 / n as f64)
        .round()
        .max(1.0) as usize;
    (k, max_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_phantom, make_geometry, PhantomKind};
    use crate::solver::CsrOperator;
    use std::f64::consts::PI;

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            / scale
    }

    fn config(precision: Precision, pd: usize, pb: usize, ffactor: usize) -> OperatorConfig {
        OperatorConfig {
            pd,
            pb,
            ffactor,
            stage_capacity_bytes: 4096,
            block_rows: 64,
            ..OperatorConfig::new(precision)
        }
    }

    #[test]
    fn partitioned_operator_matches_canonical() {
        let g = make_geometry(24, 5, 32, 0.0, PI).unwrap();
        let reference = CsrOperator::new(build_system_matrix(&g).unwrap(), 5);
        let x = generate_phantom(PhantomKind::RandomBlobs, 32, 5, 1).unwrap();
        let y_ref = reference.project(x.data()).unwrap();
        let bt_ref = reference.backproject(&y_ref).unwrap();
        for (pd, pb, f) in [(1, 1, 16), (4, 2, 2), (6, 1, 3)] {
            let op = DistributedOperator::new(&g, config(Precision::Double, pd, pb, f)).unwrap();
            let y = op.project(x.data()).unwrap();
            assert!(rel(&y, &y_ref) <= 1e-12, "pd {pd}");
            assert!(rel(&op.backproject(&y_ref).unwrap(), &bt_ref) <= 1e-12);
        }
    }

    #[test]
    fn reduced_precision_within_tolerance() {
        let g = make_geometry(24, 3, 32, 0.0, PI).unwrap();
        let reference = CsrOperator::new(build_system_matrix(&g).unwrap(), 3);
        let x = generate_phantom(PhantomKind::SheppLoganLike, 32, 3, 1).unwrap();
        let y_ref = reference.project(x.data()).unwrap();
        for (precision, tol) in [
            (Precision::Single, 1e-5),
            (Precision::Mixed, 2e-3),
            (Precision::Half, 2e-2),
        ] {
            let op = DistributedOperator::new(&g, config(precision, 4, 1, 2)).unwrap();
            let err = rel(&op.project(x.data()).unwrap(), &y_ref);
            assert!(err <= tol, "{precision}: {err}");
        }
    }

    #[test]
    fn normalization_is_transparent_in_double() {
        let g = make_geometry(16, 2, 16, 0.0, PI).unwrap();
        let x = generate_phantom(PhantomKind::UniformDisk, 16, 2, 0).unwrap();
        let plain = DistributedOperator::new(&g, config(Precision::Double, 2, 1, 2)).unwrap();
        let scaled = DistributedOperator::new(
            &g,
            OperatorConfig {
                normalize: true,
                ..config(Precision::Double, 2, 1, 2)
            },
        )
        .unwrap();
        let a = plain.project(x.data()).unwrap();
        let b = scaled.project(x.data()).unwrap();
        assert!(rel(&b, &a) < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let g = make_geometry(16, 2, 16, 0.0, PI).unwrap();
        assert!(DistributedOperator::new(&g, config(Precision::Double, 1, 3, 1)).is_err());
        assert!(DistributedOperator::new(&g, config(Precision::Double, 1, 1, 51)).is_err());
        assert!(matches!(
            DistributedOperator::new(&g, config(Precision::Double, 25, 1, 1)),
            Err(Error::Oversubscribed { .. })
        ));
    }

    #[test]
    fn tile_size_shrinks_for_many_parts() {
        assert_eq!(fit_tile_size(96, 64, 24, 8).unwrap(), 8);
        assert_eq!(fit_tile_size(8, 16, 24, 8).unwrap(), 2);
        assert!(fit_tile_size(2, 2, 5, 8).is_err());
    }

    #[test]
    fn nnz_estimate_is_close() {
        for (k, n) in [(48, 32), (90, 64)] {
            let g = make_geometry(k, 1, n, 0.0, PI).unwrap();
            let a = build_system_matrix(&g).unwrap();
            let ratio = estimate_nnz(g.angles(), n) / a.nnz() as f64;
            assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
        }
    }

    #[test]
    fn auto_partition_rule() {
        let g = make_geometry(4501, 9209, 11283, 0.0, PI).unwrap();
        let model = MemoryModel::for_geometry(&g, Precision::Mixed, 16);
        let pd = model.min_processes(16e9).unwrap();
        assert!(pd > 1);
        assert!(model.bytes_per_process(pd) <= 16e9);
        assert!(model.bytes_per_process(pd - 1) > 16e9);
        assert!(matches!(
            auto_partition(&model, 16e9, 24, 9209),
            Err(Error::Oversubscribed { .. })
        ));

        let small = MemoryModel::for_geometry(
            &make_geometry(90, 64, 64, 0.0, PI).unwrap(),
            Precision::Single,
            16,
        );
        assert_eq!(auto_partition(&small, 16e9, 24, 64).unwrap(), (24, 1));
        let (pb, pd) = auto_partition(&small, 1.5e6, 24, 64).unwrap();
        assert!(pd > 1 && pb * pd <= 24);
    }

    #[test]
    fn proxy_keeps_aspect() {
        assert_eq!(proxy_dims(4501, 11283, 64), (26, 64));
        assert_eq!(proxy_dims(90, 64, 64), (90, 64));
    }
}
