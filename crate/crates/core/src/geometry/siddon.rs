use rayon::prelude::*;

use super::ScanGeometry;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Direction components smaller than this are treated as exactly zero.
const AXIS_EPS: f64 = 1e-12;
/// Segments shorter than this fraction of a voxel are dropped.
const MIN_SEGMENT: f64 = 1e-12;

/// Voxels crossed by one ray, in order of travel, with intersection lengths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaySegmentList {
    pub entries: Vec<(usize, f64)>,
}

impl RaySegmentList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn total_length(&self) -> f64 {
        self.entries.iter().map(|&(_, l)| l).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }
}

/// Siddon's algorithm: merge the parametric crossings of the ray with the
/// vertical and horizontal grid lines and emit one segment per interval.
pub fn trace_ray(
    geometry: &ScanGeometry,
    angle_index: usize,
    detector_col: usize,
) -> Result<RaySegmentList> {
    if angle_index >= geometry.num_angles() {
        return Err(Error::OutOfRange {
            what: "angle index",
            index: angle_index,
            limit: geometry.num_angles(),
        });
    }
    if detector_col >= geometry.num_cols() {
        return Err(Error::OutOfRange {
            what: "detector column",
            index: detector_col,
            limit: geometry.num_cols(),
        });
    }

    let n = geometry.grid_n();
    let voxel = geometry.voxel_size();
    let half = geometry.half_width();
    let (sin, cos) = geometry.angles()[angle_index].sin_cos();
    let rho = geometry.detector_offset(detector_col);
    let origin = [-rho * sin, rho * cos];
    let dir = [
        if cos.abs() < AXIS_EPS { 0.0 } else { cos },
        if sin.abs() < AXIS_EPS { 0.0 } else { sin },
    ];

    // Clip against the bounding square.
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..2 {
        if dir[axis] == 0.0 {
            if origin[axis] <= -half || origin[axis] >= half {
                return Ok(RaySegmentList::default());
            }
        } else {
            let a = (-half - origin[axis]) / dir[axis];
            let b = (half - origin[axis]) / dir[axis];
            t_enter = t_enter.max(a.min(b));
            t_exit = t_exit.min(a.max(b));
        }
    }
    if t_exit - t_enter <= MIN_SEGMENT * voxel {
        return Ok(RaySegmentList::default());
    }

    // Crossings with interior grid lines, each list sorted by t.
    let crossings = |axis: usize| -> Vec<f64> {
        if dir[axis] == 0.0 {
            return Vec::new();
        }
        let mut ts: Vec<f64> = (0..=n)
            .map(|i| (-half + i as f64 * voxel - origin[axis]) / dir[axis])
            .filter(|&t| t > t_enter && t < t_exit)
            .collect();
        if dir[axis] < 0.0 {
            ts.reverse();
        }
        ts
    };
    let xs = crossings(0);
    let zs = crossings(1);

    let mut alphas = Vec::with_capacity(xs.len() + zs.len() + 2);
    alphas.push(t_enter);
    let (mut i, mut j) = (0, 0);
    while i < xs.len() || j < zs.len() {
        if j == zs.len() || (i < xs.len() && xs[i] <= zs[j]) {
            alphas.push(xs[i]);
            i += 1;
        } else {
            alphas.push(zs[j]);
            j += 1;
        }
    }
    alphas.push(t_exit);

    let cell = |coord: f64| -> usize {
        let c = ((coord + half) / voxel).floor();
        (c.max(0.0) as usize).min(n - 1)
    };

    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(alphas.len());
    for w in alphas.windows(2) {
        let len = w[1] - w[0];
        if len < MIN_SEGMENT * voxel {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let col = cell(origin[0] + mid * dir[0]);
        let row = cell(origin[1] + mid * dir[1]);
        let index = row * n + col;
        match entries.last_mut() {
            Some((last, l)) if *last == index => *l += len,
            _ => entries.push((index, len)),
        }
    }
    debug_assert!({
        let mut seen: Vec<usize> = entries.iter().map(|e| e.0).collect();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    });
    Ok(RaySegmentList { entries })
}

/// Trace every ray once and assemble the per-slice system matrix. Rays are
/// traced concurrently and assembled in ray order.
pub fn build_system_matrix(geometry: &ScanGeometry) -> Result<CsrMatrix> {
    let n = geometry.num_cols();
    let rows = (0..geometry.num_rays())
        .into_par_iter()
        .map(|r| trace_ray(geometry, r / n, r % n).map(|s| s.entries))
        .collect::<Result<Vec<_>>>()?;
    CsrMatrix::from_rows(geometry.num_voxels(), rows)
}
