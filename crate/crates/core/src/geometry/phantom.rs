use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ScanGeometry, Volume, VolumeRole};
use crate::error::{Error, Result};
use crate::precision::DType;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    UniformDisk,
    SheppLoganLike,
    RandomBlobs,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::UniformDisk => "uniform-disk",
            PhantomKind::SheppLoganLike => "shepp-logan-like",
            PhantomKind::RandomBlobs => "random-blobs",
        }
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-disk" => Ok(PhantomKind::UniformDisk),
            "shepp-logan-like" | "shepp-logan" => Ok(PhantomKind::SheppLoganLike),
            "random-blobs" => Ok(PhantomKind::RandomBlobs),
            other => Err(Error::UnknownPhantom(other.to_string())),
        }
    }
}

/// Modified Shepp-Logan ellipses: (intensity, semi-axis a, semi-axis b, x0, y0, tilt in degrees).
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

struct Blob {
    centre: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

/// Generate a `(num_slices, grid_n, grid_n)` tomogram with values in `[0, 1]`
/// and zeros outside the inscribed circle. `seed` only affects
/// [`PhantomKind::RandomBlobs`].
pub fn generate_phantom(
    kind: PhantomKind,
    grid_n: usize,
    num_slices: usize,
    seed: u64,
) -> Result<Volume> {
    if grid_n == 0 || num_slices == 0 {
        return Err(Error::InvalidDimension(format!(
            "phantom of {num_slices} slices of {grid_n}^2"
        )));
    }
    let n = grid_n;
    // Voxel centres in the unit square [-1, 1]^2.
    let unit = |i: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let inside = |u: f64, w: f64| u * u + w * w < 1.0;

    let mut data = vec![0.0; num_slices * n * n];
    match kind {
        PhantomKind::UniformDisk => {
            for (i, v) in data.iter_mut().enumerate() {
                let (row, col) = ((i / n) % n, i % n);
                *v = if inside(unit(col), unit(row)) {
                    1.0
                } else {
                    0.0
                };
            }
        }
        PhantomKind::SheppLoganLike => {
            let slice: Vec<f64> = (0..n * n)
                .map(|i| {
                    let (u, w) = (unit(i % n), -unit(i / n));
                    if !inside(u, w) {
                        return 0.0;
                    }
                    let value: f64 = SHEPP_LOGAN
                        .iter()
                        .filter(|&&(_, a, b, x0, y0, tilt)| {
                            let (s, c) = tilt.to_radians().sin_cos();
                            let (dx, dy) = (u - x0, w - y0);
                            let (p, q) = (dx * c + dy * s, -dx * s + dy * c);
                            (p / a).powi(2) + (q / b).powi(2) <= 1.0
                        })
                        .map(|e| e.0)
                        .sum();
                    value.clamp(0.0, 1.0)
                })
                .collect();
            for chunk in data.chunks_mut(n * n) {
                chunk.copy_from_slice(&slice);
            }
        }
        PhantomKind::RandomBlobs => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blobs: Vec<Blob> = (0..12)
                .map(|_| {
                    let r = 0.7 * rng.random::<f64>().sqrt();
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let s = rng.random_range(-1.0..1.0);
                    Blob {
                        centre: [r * phi.cos(), r * phi.sin(), s],
                        sigma: rng.random_range(0.05..0.25),
                        amplitude: rng.random_range(0.3..1.0),
                    }
                })
                .collect();
            for (i, v) in data.iter_mut().enumerate() {
                let (z, row, col) = (i / (n * n), (i / n) % n, i % n);
                let (u, w) = (unit(col), unit(row));
                if !inside(u, w) {
                    continue;
                }
                let s = (z as f64 + 0.5) / num_slices as f64 * 2.0 - 1.0;
                *v = blobs
                    .iter()
                    .map(|b| {
                        let d2 = (u - b.centre[0]).powi(2)
                            + (w - b.centre[1]).powi(2)
                            + (s - b.centre[2]).powi(2);
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
            }
            let max = data.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                data.iter_mut().for_each(|v| *v /= max);
            }
        }
    }
    Volume::new([num_slices, n, n], DType::F64, VolumeRole::Tomogram, data)
}

/// `y = A x` per slice plus additive Gaussian noise with standard deviation
/// `noise_sigma * max|A x|`. Noise is drawn sequentially from a seeded
/// generator so the result is reproducible bit for bit.
pub fn simulate_measurements(
    geometry: &ScanGeometry,
    matrix: &CsrMatrix,
    tomogram: &Volume,
    noise_sigma: f64,
    seed: u64,
) -> Result<Volume> {
    let [slices, rows, cols] = tomogram.shape();
    if rows * cols != matrix.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "tomogram slice of {rows}x{cols} for a matrix with {} columns",
            matrix.ncols()
        )));
    }
    if matrix.nrows() != geometry.num_rays() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} rows, geometry has {} rays",
            matrix.nrows(),
            geometry.num_rays()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma}")));
    }
    let per_slice: Vec<Vec<f64>> = (0..slices)
        .into_par_iter()
        .map(|z| matrix.mul_vec(tomogram.slice(z)))
        .collect::<Result<_>>()?;
    let mut data: Vec<f64> = per_slice.into_iter().flatten().collect();
    if noise_sigma > 0.0 {
        let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let std = noise_sigma * peak;
        if std > 0.0 {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::InvalidConfig(format!("noise model: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Volume::new(
        [slices, geometry.num_angles(), geometry.num_cols()],
        DType::F64,
        VolumeRole::Sinogram,
        data,
    )
}
