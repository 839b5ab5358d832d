//! Precision modes and the scalar emulation used by kernels and reductions.
//!
//! Every vector in the crate is carried as `f64`, but values are always
//! quantized to the storage type of the active mode before they are
//! "stored" or "communicated", and arithmetic is performed in the mode's
//! accumulation type.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Largest magnitude the normalized pipeline lets into half storage.
pub const HALF_SAFE_MAX: f64 = 60000.0;

/// Smallest positive half-precision subnormal, 2^-24.
pub const HALF_MIN_SUBNORMAL: f64 = 5.960_464_477_539_063e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// f64 storage, f64 arithmetic.
    Double,
    /// f32 storage, f32 arithmetic.
    Single,
    /// f16 storage, f16 accumulation (exposes the error of pure half).
    Half,
    /// f16 storage and communication, f32 arithmetic.
    Mixed,
}

impl Precision {
    pub const ALL: [Precision; 4] = [
        Precision::Double,
        Precision::Single,
        Precision::Half,
        Precision::Mixed,
    ];

    /// Bytes per stored vector element.
    pub fn element_bytes(self) -> usize {
        match self {
            Precision::Double => 8,
            Precision::Single => 4,
            Precision::Half | Precision::Mixed => 2,
        }
    }

    /// Bytes per sparse matrix entry (index + length). Half modes pack a
    /// 16-bit index with a 16-bit length.
    pub fn entry_bytes(self) -> usize {
        match self {
            Precision::Double => 12,
            Precision::Single => 8,
            Precision::Half | Precision::Mixed => 4,
        }
    }

    pub fn is_half_storage(self) -> bool {
        matches!(self, Precision::Half | Precision::Mixed)
    }

    /// Round `v` to the storage type of this mode.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::Double => v,
            Precision::Single => v as f32 as f64,
            Precision::Half | Precision::Mixed => f16::from_f64(v).to_f64(),
        }
    }

    pub fn quantize_slice(self, values: &mut [f64]) {
        if self != Precision::Double {
            values.iter_mut().for_each(|v| *v = self.quantize(*v));
        }
    }

    /// Precision in which the solver keeps its own vectors between operator
    /// applications.
    pub fn vector_precision(self) -> Precision {
        match self {
            Precision::Double => Precision::Double,
            _ => Precision::Single,
        }
    }

    /// Sum `values` in the accumulation type of this mode, in iteration
    /// order, and round the total to storage precision.
    pub fn reduce<I: IntoIterator<Item = f64>>(self, values: I) -> f64 {
        match self {
            Precision::Double => values.into_iter().sum(),
            Precision::Single => values.into_iter().fold(0f32, |a, v| a + v as f32) as f64,
            Precision::Mixed => {
                let acc = values.into_iter().fold(0f32, |a, v| a + v as f32);
                f16::from_f32(acc).to_f64()
            }
            Precision::Half => values
                .into_iter()
                .fold(f16::ZERO, |a, v| f16::from_f32(a.to_f32() + v as f32))
                .to_f64(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Double => "double",
            Precision::Single => "single",
            Precision::Half => "half",
            Precision::Mixed => "mixed",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Precision::Double => 0,
            Precision::Single => 1,
            Precision::Half | Precision::Mixed => 2,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "double" | "f64" => Ok(Precision::Double),
            "single" | "f32" => Ok(Precision::Single),
            "half" | "f16" => Ok(Precision::Half),
            "mixed" => Ok(Precision::Mixed),
            other => Err(Error::InvalidConfig(format!("unknown precision `{other}`"))),
        }
    }
}

/// On-disk / in-memory element type of a [`Volume`](crate::geometry::Volume).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    F16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::F16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F64 => v,
            DType::F32 => v as f32 as f64,
            DType::F16 => f16::from_f64(v).to_f64(),
        }
    }
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Double => DType::F64,
            Precision::Single => DType::F32,
            Precision::Half | Precision::Mixed => DType::F16,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_constants() {
        assert_eq!(HALF_MIN_SUBNORMAL, 2f64.powi(-24));
        assert_eq!(
            f16::from_f64(HALF_MIN_SUBNORMAL).to_f64(),
            HALF_MIN_SUBNORMAL
        );
        assert!(HALF_SAFE_MAX < f16::MAX.to_f64());
    }

    #[test]
    fn quantize_rounds_to_nearest_even() {
        // 1 + 2^-11 is a tie between 1 and 1 + 2^-10; even mantissa wins.
        let tie = 1.0 + 2f64.powi(-11);
        assert_eq!(Precision::Half.quantize(tie), 1.0);
        let tie_up = 1.0 + 3.0 * 2f64.powi(-11);
        assert_eq!(Precision::Half.quantize(tie_up), 1.0 + 2.0 * 2f64.powi(-10));
        assert_eq!(Precision::Double.quantize(0.1), 0.1);
    }

    #[test]
    fn reduce_orders() {
        let v = [1.0, 2.0, 3.5];
        for p in Precision::ALL {
            assert_eq!(p.reduce(v), 6.5);
        }
        // 2048 + 1 is not representable in half: pure half accumulation loses it.
        assert_eq!(Precision::Half.reduce([2048.0, 1.0]), 2048.0);
    }

    #[test]
    fn parse_roundtrip() {
        for p in Precision::ALL {
            assert_eq!(p.name().parse::<Precision>().unwrap(), p);
        }
        assert!("quad".parse::<Precision>().is_err());
    }
}
