//! CGLS reconstruction over a multi-slice linear operator.
//!
//! Every slice is an independent least-squares problem, so the CGLS scalars
//! (`alpha`, `beta`) are kept per slice. All dot products and scalar
//! recurrences run in double whatever the operator's precision.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::Precision;
use crate::sparse::CsrMatrix;

/// A stack of identical per-slice operators `A : R^domain -> R^range`.
/// Vectors are slice-major: slice `z` occupies `z * len .. (z + 1) * len`.
pub trait LinearOperator: Sync {
    fn num_slices(&self) -> usize;
    /// Unknowns per slice (N^2 for a tomogram slice).
    fn domain_len(&self) -> usize;
    /// Measurements per slice (K * N for a sinogram slice).
    fn range_len(&self) -> usize;
    fn precision(&self) -> Precision;
    fn project(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn backproject(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// The canonical double-precision matrix applied slice by slice.
#[derive(Debug, Clone)]
pub struct CsrOperator {
    matrix: CsrMatrix,
    transpose: CsrMatrix,
    slices: usize,
}

impl CsrOperator {
    pub fn new(matrix: CsrMatrix, slices: usize) -> Self {
        let transpose = matrix.transpose();
        Self {
            matrix,
            transpose,
            slices,
        }
    }

    fn apply(m: &CsrMatrix, v: &[f64], slices: usize) -> Result<Vec<f64>> {
        if v.len() != m.ncols() * slices {
            return Err(Error::ShapeMismatch(format!(
                "vector of length {} for {slices} slices of {}",
                v.len(),
                m.ncols()
            )));
        }
        let out: Vec<Vec<f64>> = v
            .par_chunks(m.ncols().max(1))
            .map(|s| m.mul_vec(s))
            .collect::<Result<_>>()?;
        Ok(out.concat())
    }
}

impl LinearOperator for CsrOperator {
    fn num_slices(&self) -> usize {
        self.slices
    }

    fn domain_len(&self) -> usize {
        self.matrix.ncols()
    }

    fn range_len(&self) -> usize {
        self.matrix.nrows()
    }

    fn precision(&self) -> Precision {
        Precision::Double
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::apply(&self.matrix, x, self.slices)
    }

    fn backproject(&self, y: &[f64]) -> Result<Vec<f64>> {
        Self::apply(&self.transpose, y, self.slices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub early_stop_iters: Option<usize>,
}

impl SolveConfig {
    pub fn new(max_iters: usize, early_stop_iters: Option<usize>) -> Result<Self> {
        let config = Self {
            max_iters,
            early_stop_iters,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        match self.early_stop_iters {
            Some(0) => Err(Error::InvalidConfig("early stop must be >= 1".into())),
            Some(e) if e > self.max_iters => Err(Error::InvalidConfig(format!(
                "early stop {e} exceeds max_iters {}",
                self.max_iters
            ))),
            _ => Ok(()),
        }
    }
}

/// Whether to stop after the iterations recorded in `history`.
pub fn early_stop(config: &SolveConfig, history: &[f64]) -> bool {
    let done = history.len();
    done >= config.max_iters || config.early_stop_iters.is_some_and(|e| done >= e)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub projections: usize,
    pub backprojections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    /// `||y - A x_i|| / ||y||` after each iteration, from the CGLS residual
    /// recurrence.
    pub residual_history: Vec<f64>,
    /// Seconds since the start of the solve at the end of each iteration.
    pub elapsed: Vec<f64>,
    pub counters: OpCounters,
}

fn norms_per_slice(v: &[f64], slices: usize) -> Vec<f64> {
    let len = v.len() / slices.max(1);
    (0..slices)
        .map(|z| v[z * len..(z + 1) * len].iter().map(|a| a * a).sum())
        .collect()
}

fn check_finite(v: &[f64], iteration: usize, precision: Precision, what: &str) -> Result<()> {
    match v.iter().position(|a| !a.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Diverged {
            iteration,
            precision,
            detail: format!("non-finite {what} at element {i}"),
        }),
    }
}

/// CGLS from `x = 0`. Performs one backprojection up front and one
/// projection plus one backprojection per iteration.
pub fn cgls_solve(
    op: &dyn LinearOperator,
    y: &[f64],
    config: &SolveConfig,
) -> Result<SolveOutcome> {
    config.validate()?;
    let slices = op.num_slices();
    let (n, m) = (op.domain_len(), op.range_len());
    if y.len() != slices * m {
        return Err(Error::ShapeMismatch(format!(
            "measurements of length {} for {slices} slices of {m}",
            y.len()
        )));
    }
    let precision = op.precision();
    check_finite(y, 0, precision, "measurement")?;
    let start = Instant::now();
    let mut counters = OpCounters::default();

    let y_norm = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut x = vec![0.0; slices * n];
    let mut r = y.to_vec();
    let mut s = op.backproject(&r)?;
    counters.backprojections += 1;
    check_finite(&s, 0, precision, "backprojection")?;
    let mut p = s.clone();
    let mut gamma = norms_per_slice(&s, slices);

    let mut residual_history = Vec::new();
    let mut elapsed = Vec::new();
    while !early_stop(config, &residual_history) {
        let iteration = residual_history.len() + 1;
        let q = op.project(&p)?;
        counters.projections += 1;
        check_finite(&q, iteration, precision, "projection")?;
        let q_norm = norms_per_slice(&q, slices);
        let alpha: Vec<f64> = gamma
            .iter()
            .zip(&q_norm)
            .map(|(&g, &qq)| if g > 0.0 && qq > 0.0 { g / qq } else { 0.0 })
            .collect();
        for z in 0..slices {
            let a = alpha[z];
            x[z * n..(z + 1) * n]
                .iter_mut()
                .zip(&p[z * n..(z + 1) * n])
                .for_each(|(xi, pi)| *xi += a * pi);
            r[z * m..(z + 1) * m]
                .iter_mut()
                .zip(&q[z * m..(z + 1) * m])
                .for_each(|(ri, qi)| *ri -= a * qi);
        }

        s = op.backproject(&r)?;
        counters.backprojections += 1;
        check_finite(&s, iteration, precision, "backprojection")?;
        let gamma_next = norms_per_slice(&s, slices);
        for z in 0..slices {
            let beta = if gamma[z] > 0.0 {
                gamma_next[z] / gamma[z]
            } else {
                0.0
            };
            p[z * n..(z + 1) * n]
                .iter_mut()
                .zip(&s[z * n..(z + 1) * n])
                .for_each(|(pi, si)| *pi = si + beta * *pi);
        }
        gamma = gamma_next;

        let r_norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if y_norm > 0.0 { r_norm / y_norm } else { 0.0 };
        if !rel.is_finite() {
            return Err(Error::Diverged {
                iteration,
                precision,
                detail: "non-finite residual norm".into(),
            });
        }
        residual_history.push(rel);
        elapsed.push(start.elapsed().as_secs_f64());
    }

    Ok(SolveOutcome {
        x,
        residual_history,
        elapsed,
        counters,
    })
}

/// Residual history and per-iteration wall time of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCurve {
    pub precision: Precision,
    pub residuals: Vec<f64>,
    pub elapsed: Vec<f64>,
}

/// CSV with an `iteration` column followed by a residual column and a
/// wall-time column per curve. Shorter curves leave trailing cells empty.
pub fn residual_curve_report(curves: &[ResidualCurve]) -> Result<String> {
    if curves.is_empty() || curves.iter().all(|c| c.residuals.is_empty()) {
        return Err(Error::InvalidConfig("no residual history to report".into()));
    }
    let mut out = String::from("iteration");
    for c in curves {
        write!(out, ",{0}_residual,{0}_time_s", c.precision).unwrap();
    }
    out.push('\n');
    let rows = curves.iter().map(|c| c.residuals.len()).max().unwrap_or(0);
    for i in 0..rows {
        write!(out, "{}", i + 1).unwrap();
        for c in curves {
            match (c.residuals.get(i), c.elapsed.get(i)) {
                (Some(r), Some(t)) => write!(out, ",{r:e},{t:.6}").unwrap(),
                (Some(r), None) => write!(out, ",{r:e},").unwrap(),
                _ => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_system_matrix, generate_phantom, make_geometry, PhantomKind};
    use std::f64::consts::PI;

    fn identity(n: usize) -> CsrMatrix {
        CsrMatrix::from_rows(n, (0..n).map(|i| vec![(i, 1.0)])).unwrap()
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let op = CsrOperator::new(identity(5), 2);
        let y: Vec<f64> = (0..10).map(|i| i as f64 - 3.5).collect();
        let out = cgls_solve(&op, &y, &SolveConfig::new(1, None).unwrap()).unwrap();
        for (a, b) in out.x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(out.residual_history, vec![0.0]);
        assert_eq!(
            out.counters,
            OpCounters {
                projections: 1,
                backprojections: 2
            }
        );
    }

    #[test]
    fn config_validation() {
        assert!(SolveConfig::new(0, None).is_err());
        assert!(SolveConfig::new(5, Some(6)).is_err());
        assert!(SolveConfig::new(5, Some(0)).is_err());
        assert!(SolveConfig::new(5, Some(5)).is_ok());
    }

    #[test]
    fn early_stop_rule() {
        let fixed = SolveConfig::new(30, Some(24)).unwrap();
        assert!(!early_stop(&fixed, &[0.5; 23]));
        assert!(early_stop(&fixed, &[0.5; 24]));
        let open = SolveConfig::new(30, None).unwrap();
        assert!(!early_stop(&open, &[0.5; 29]));
        assert!(early_stop(&open, &[0.5; 30]));
        let first = SolveConfig::new(30, Some(1)).unwrap();
        assert!(early_stop(&first, &[0.5]));
    }

    #[test]
    fn early_stop_returns_first_iterate() {
        let g = make_geometry(8, 1, 8, 0.0, PI).unwrap();
        let op = CsrOperator::new(build_system_matrix(&g).unwrap(), 1);
        let x0 = generate_phantom(PhantomKind::UniformDisk, 8, 1, 0).unwrap();
        let y = op.project(x0.data()).unwrap();
        let one = cgls_solve(&op, &y, &SolveConfig::new(10, Some(1)).unwrap()).unwrap();
        let ten = cgls_solve(&op, &y, &SolveConfig::new(10, None).unwrap()).unwrap();
        assert_eq!(one.residual_history.len(), 1);
        assert_eq!(ten.residual_history.len(), 10);
        assert_eq!(one.residual_history[0], ten.residual_history[0]);
        assert_eq!(one.counters.backprojections, 2);
    }

    #[test]
    fn residual_is_monotone_and_slices_are_independent() {
        let g = make_geometry(24, 2, 16, 0.0, PI).unwrap();
        let a = build_system_matrix(&g).unwrap();
        let x0 = generate_phantom(PhantomKind::SheppLoganLike, 16, 2, 0).unwrap();
        let mut y = CsrOperator::new(a.clone(), 2).project(x0.data()).unwrap();
        // Second slice scaled: per-slice scalars make the slices independent.
        let len = a.nrows();
        y[len..].iter_mut().for_each(|v| *v *= 1000.0);
        let both = cgls_solve(
            &CsrOperator::new(a.clone(), 2),
            &y,
            &SolveConfig::new(15, None).unwrap(),
        )
        .unwrap();
        assert!(both
            .residual_history
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-10)));
        let first = cgls_solve(
            &CsrOperator::new(a, 1),
            &y[..len],
            &SolveConfig::new(15, None).unwrap(),
        )
        .unwrap();
        let n = first.x.len();
        for (p, q) in both.x[..n].iter().zip(&first.x) {
            assert!((p - q).abs() <= 1e-12 * q.abs().max(1.0));
        }
    }

    #[test]
    fn divergence_names_iteration_and_mode() {
        let op = CsrOperator::new(identity(3), 1);
        let err = cgls_solve(
            &op,
            &[1.0, f64::NAN, 0.0],
            &SolveConfig::new(3, None).unwrap(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Diverged {
                iteration: 0,
                precision: Precision::Double,
                ..
            }
        ));
    }

    #[test]
    fn zero_measurements_stay_zero() {
        let op = CsrOperator::new(identity(4), 1);
        let out = cgls_solve(&op, &[0.0; 4], &SolveConfig::new(3, None).unwrap()).unwrap();
        assert_eq!(out.x, vec![0.0; 4]);
        assert_eq!(out.residual_history, vec![0.0; 3]);
    }

    #[test]
    fn report_layout() {
        assert!(residual_curve_report(&[]).is_err());
        let curves = [
            ResidualCurve {
                precision: Precision::Single,
                residuals: vec![0.5, 0.25],
                elapsed: vec![0.1, 0.2],
            },
            ResidualCurve {
                precision: Precision::Mixed,
                residuals: vec![0.5],
                elapsed: vec![0.1],
            },
        ];
        let csv = residual_curve_report(&curves).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,single_residual,single_time_s,mixed_residual,mixed_time_s"
        );
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 5);
        assert!(lines[2].ends_with(",,"));
    }
}
