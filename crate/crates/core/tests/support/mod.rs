//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls into the tracer or the kernels it checks.
#![allow(dead_code)]

/// Cell of the `n x n` grid containing the point at parameter `t`, or
/// `None` outside the grid.
fn locate(origin: (f64, f64), dir: (f64, f64), n: usize, voxel: f64, t: f64) -> Option<usize> {
    let half = n as f64 * voxel / 2.0;
    let (x, z) = (origin.0 + t * dir.0, origin.1 + t * dir.1);
    if x < -half || x >= half || z < -half || z >= half {
        return None;
    }
    let col = (((x + half) / voxel).floor() as usize).min(n - 1);
    let row = (((z + half) / voxel).floor() as usize).min(n - 1);
    Some(row * n + col)
}

/// Dense ray marching with step `voxel / 1000`; every detected cell change
/// is refined by bisection to machine precision, recursing through any
/// cell clipped between two samples.
pub fn march_ray(theta: f64, rho: f64, n: usize, voxel: f64) -> Vec<(usize, f64)> {
    let origin = (-rho * theta.sin(), rho * theta.cos());
    let dir = (theta.cos(), theta.sin());
    let reach = n as f64 * voxel * std::f64::consts::SQRT_2 / 2.0 + voxel;
    let step = voxel / 1000.0;
    let at = |t: f64| locate(origin, dir, n, voxel, t);

    // (boundary parameter, cell entered)
    let mut events: Vec<(f64, Option<usize>)> = Vec::new();
    fn refine(
        at: &dyn Fn(f64) -> Option<usize>,
        mut lo: f64,
        a: Option<usize>,
        t1: f64,
        b: Option<usize>,
        events: &mut Vec<(f64, Option<usize>)>,
    ) {
        let mut hi = t1;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if at(mid) == a {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = at(hi);
        events.push((hi, c));
        if c != b {
            refine(at, hi, c, t1, b, events);
        }
    }

    let mut t = -reach;
    let mut cell = at(t);
    while t < reach {
        let next = (t + step).min(reach);
        let c = at(next);
        if c != cell {
            refine(&at, t, cell, next, c, &mut events);
            cell = c;
        }
        t = next;
    }

    let mut out: Vec<(usize, f64)> = Vec::new();
    for w in events.windows(2) {
        if let Some(v) = w[0].1 {
            let len = w[1].0 - w[0].0;
            if len >= 1e-12 * voxel {
                match out.last_mut() {
                    Some((last, l)) if *last == v => *l += len,
                    _ => out.push((v, len)),
                }
            }
        }
    }
    out
}

/// Length of the ray inside the bounding square, by slab clipping.
pub fn chord_length(theta: f64, rho: f64, n: usize, voxel: f64) -> f64 {
    let h = n as f64 * voxel / 2.0;
    let (px, pz) = (-rho * theta.sin(), rho * theta.cos());
    let (dx, dz) = (theta.cos(), theta.sin());
    let slab = |p: f64, d: f64| -> (f64, f64) {
        if d.abs() < 1e-12 {
            if p.abs() < h {
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                (1.0, -1.0)
            }
        } else {
            let (a, b) = ((-h - p) / d, (h - p) / d);
            (a.min(b), a.max(b))
        }
    };
    let (a0, a1) = slab(px, dx);
    let (b0, b1) = slab(pz, dz);
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Compare a traced segment list against the oracle: identical index
/// sequences and lengths within `rel`.
pub fn segments_match(
    traced: &[(usize, f64)],
    oracle: &[(usize, f64)],
    rel: f64,
) -> Result<(), String> {
    if traced.len() != oracle.len() {
        return Err(format!(
            "{} traced vs {} oracle segments",
            traced.len(),
            oracle.len()
        ));
    }
    for (i, (a, b)) in traced.iter().zip(oracle).enumerate() {
        if a.0 != b.0 {
            return Err(format!("segment {i}: voxel {} vs {}", a.0, b.0));
        }
        if (a.1 - b.1).abs() > rel * b.1 {
            return Err(format!("segment {i}: length {} vs {}", a.1, b.1));
        }
    }
    Ok(())
}

/// Dense `rows x cols` matrix-vector product, column by column.
pub fn dense_matvec(dense: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    dense
        .iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn max_rel_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}
