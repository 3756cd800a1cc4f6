use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distr::uniform::SampleUniform;
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point type a game can be played over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Integer key of `value` rounded to `precision` decimal places.
///
/// Two proposals are the same value iff their keys are equal. The key is
/// computed in `f64` regardless of `S` so that f32 and f64 games agree on
/// what "equal" means for values they can both represent.
pub fn canonical_key<S: Scalar>(value: S, precision: u32) -> i64 {
    let scale = 10f64.powi(precision as i32);
    (value.as_f64() * scale).round() as i64
}

pub fn canonical_eq<S: Scalar>(a: S, b: S, precision: u32) -> bool {
    canonical_key(a, precision) == canonical_key(b, precision)
}

/// Decimal rendering with at most `precision` places and no trailing zeros.
pub fn format_value<S: Scalar>(value: S, precision: u32) -> String {
    let s = format!("{:.*}", precision as usize, value.as_f64());
    if !s.contains('.') {
        return s;
    }
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}
