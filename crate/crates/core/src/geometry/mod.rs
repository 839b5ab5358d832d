//! Parallel-beam scan geometry, Siddon ray tracing and the system matrix.
//!
//! Coordinates: each slice is an `n x n` grid of square voxels centred on the
//! rotation axis. Voxel `(row, col)` has flat index `row * n + col`; `col`
//! grows with `x` and `row` grows with `y`. A ray at angle `theta` travels
//! along `(cos theta, sin theta)` and is offset from the axis by the signed
//! detector coordinate `rho` along `(-sin theta, cos theta)`. Detector column
//! `c` sits at `rho = (c - (n - 1) / 2) * pitch`, with `pitch == voxel_size`.
//!
//! Ray `r` of the system matrix is `angle_index * n + detector_col`, which is
//! also the row-major position of the measurement in a `(theta, rho)`
//! sinogram slice.

mod phantom;
mod siddon;

pub use phantom::{generate_phantom, simulate_measurements, PhantomKind};
pub use siddon::{build_system_matrix, trace_ray, RaySegmentList};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    angles: Vec<f64>,
    num_rows: usize,
    num_cols: usize,
    voxel_size: f64,
    detector_pitch: f64,
}

/// `k` equally spaced angles in `[angle_start, angle_end)` over an
/// `n x n` grid, with `m` slices.
pub fn make_geometry(
    k: usize,
    m: usize,
    n: usize,
    angle_start: f64,
    angle_end: f64,
) -> Result<ScanGeometry> {
    if !(angle_start.is_finite() && angle_end.is_finite())
        || angle_start >= angle_end
        || angle_end > angle_start + PI
    {
        return Err(Error::InvalidAngleRange {
            start: angle_start,
            end: angle_end,
        });
    }
    if k == 0 {
        return Err(Error::InvalidDimension(
            "number of angles must be >= 1".into(),
        ));
    }
    let step = (angle_end - angle_start) / k as f64;
    let angles = (0..k).map(|i| angle_start + i as f64 * step).collect();
    ScanGeometry::from_angles(angles, m, n)
}

impl ScanGeometry {
    /// Geometry with explicit angles (strictly increasing, spanning less than
    /// a half turn) and unit voxels.
    pub fn from_angles(angles: Vec<f64>, num_rows: usize, num_cols: usize) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidDimension(
                "number of angles must be >= 1".into(),
            ));
        }
        if num_rows == 0 {
            return Err(Error::InvalidDimension(
                "number of slices must be >= 1".into(),
            ));
        }
        if num_cols == 0 {
            return Err(Error::InvalidDimension(
                "number of detector columns must be >= 1".into(),
            ));
        }
        let first = angles[0];
        let last = angles[angles.len() - 1];
        if angles.iter().any(|a| !a.is_finite())
            || angles.windows(2).any(|w| w[0] >= w[1])
            || last - first >= PI
        {
            return Err(Error::InvalidAngleRange {
                start: first,
                end: last,
            });
        }
        Ok(Self {
            angles,
            num_rows,
            num_cols,
            voxel_size: 1.0,
            detector_pitch: 1.0,
        })
    }

    /// Set the voxel size (and with it the detector pitch).
    pub fn with_voxel_size(mut self, voxel_size: f64) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::InvalidDimension(format!("voxel size {voxel_size}")));
        }
        self.voxel_size = voxel_size;
        self.detector_pitch = voxel_size;
        Ok(self)
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// K.
    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    /// M, slices along the rotation axis.
    pub fn num_rows(&self) -> usize {
        self.num_rows
    }

    /// N, detector columns.
    pub fn num_cols(&self) -> usize {
        self.num_cols
    }

    /// Voxels per side of a slice; always equal to N.
    pub fn grid_n(&self) -> usize {
        self.num_cols
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn detector_pitch(&self) -> f64 {
        self.detector_pitch
    }

    /// Rays per slice, K * N.
    pub fn num_rays(&self) -> usize {
        self.angles.len() * self.num_cols
    }

    /// Voxels per slice, N^2.
    pub fn num_voxels(&self) -> usize {
        self.num_cols * self.num_cols
    }

    /// Signed detector coordinate of column `c`.
    pub fn detector_offset(&self, c: usize) -> f64 {
        (c as f64 - (self.num_cols as f64 - 1.0) / 2.0) * self.detector_pitch
    }

    /// Half the side length of the reconstruction grid.
    pub fn half_width(&self) -> f64 {
        self.num_cols as f64 * self.voxel_size / 2.0
    }

    pub fn with_num_rows(mut self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidDimension(
                "number of slices must be >= 1".into(),
            ));
        }
        self.num_rows = m;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeRole {
    Tomogram,
    Sinogram,
}

impl VolumeRole {
    pub fn code(self) -> u8 {
        match self {
            VolumeRole::Tomogram => 0,
            VolumeRole::Sinogram => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(VolumeRole::Tomogram),
            1 => Some(VolumeRole::Sinogram),
            _ => None,
        }
    }
}

/// A stack of 2D slices. Tomograms are `(slices, rows, cols)` with
/// `rows == cols == N`; sinograms are `(slices, angles, detector cols)`.
/// Values are carried as `f64` but are always representable in `dtype`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    dtype: DType,
    role: VolumeRole,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], dtype: DType, role: VolumeRole, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "payload of {} values for shape {shape:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite value at {i}")));
        }
        let mut volume = Self {
            shape,
            dtype,
            role,
            data,
        };
        if dtype != DType::F64 {
            volume.data.iter_mut().for_each(|v| *v = dtype.quantize(*v));
        }
        Ok(volume)
    }

    pub fn zeros(shape: [usize; 3], role: VolumeRole) -> Self {
        Self {
            shape,
            dtype: DType::F64,
            role,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn role(&self) -> VolumeRole {
        self.role
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn num_slices(&self) -> usize {
        self.shape[0]
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let len = self.slice_len();
        &self.data[z * len..(z + 1) * len]
    }

    /// Re-quantize to another element type.
    pub fn to_dtype(&self, dtype: DType) -> Volume {
        let mut out = self.clone();
        out.dtype = dtype;
        out.data.iter_mut().for_each(|v| *v = dtype.quantize(*v));
        out
    }
}
