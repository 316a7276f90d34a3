use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage format of a tensor, and by implication the accumulator format
/// used while computing it.
///
/// `Exact64` stores and accumulates in binary64. The two simulated modes
/// accumulate in binary32; `SimBF16` additionally rounds every value that
/// crosses the global-memory boundary to bfloat16.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    Exact64,
    Sim32,
    SimBF16,
}

impl Precision {
    /// Bytes per element in global memory.
    pub fn storage_bytes(self) -> usize {
        match self {
            Precision::Exact64 => 8,
            Precision::Sim32 => 4,
            Precision::SimBF16 => 2,
        }
    }

    /// Format of GEMM accumulators, epilogue registers and reduction
    /// partials.
    pub fn accumulator(self) -> Precision {
        match self {
            Precision::Exact64 => Precision::Exact64,
            Precision::Sim32 | Precision::SimBF16 => Precision::Sim32,
        }
    }

    pub fn is_exact(self) -> bool {
        self == Precision::Exact64
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::Exact64 => 0,
            Precision::Sim32 => 1,
            Precision::SimBF16 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::Exact64),
            1 => Ok(Precision::Sim32),
            2 => Ok(Precision::SimBF16),
            _ => Err(Error::Format(format!("unknown precision tag {tag}"))),
        }
    }

    #[inline]
    pub fn quantize(self, value: f64) -> f64 {
        quantize(value, self)
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Exact64 => "exact64",
            Precision::Sim32 => "sim32",
            Precision::SimBF16 => "simbf16",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact64" | "f64" | "exact" => Ok(Precision::Exact64),
            "sim32" | "f32" | "fp32" => Ok(Precision::Sim32),
            "simbf16" | "bf16" | "bfloat16" => Ok(Precision::SimBF16),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Rounds `value` to the storage format of `mode`.
///
/// Non-finite inputs pass through unchanged. `SimBF16` first rounds to
/// binary32 and then to bfloat16 with round-to-nearest-even on the binary32
/// bit pattern, which is what hardware conversion instructions do.
#[inline]
pub fn quantize(value: f64, mode: Precision) -> f64 {
    if !value.is_finite() {
        return value;
    }
    match mode {
        Precision::Exact64 => value,
        Precision::Sim32 => value as f32 as f64,
        Precision::SimBF16 => f64::from(bf16_round(value as f32)),
    }
}

/// Keeps the upper 16 bits of a binary32 value, rounding the discarded half
/// to nearest with ties to even.
#[inline]
pub(crate) fn bf16_round(x: f32) -> f32 {
    f32::from_bits((bf16_bits(x) as u32) << 16)
}

#[inline]
pub(crate) fn bf16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        // keep it quiet
        return ((bits >> 16) | 0x0040) as u16;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    (rounded >> 16) as u16
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: enumerate the two bfloat16 neighbours of a binary32
    /// value and pick the nearer one, breaking ties toward an even mantissa.
    fn bf16_oracle(x: f32) -> f32 {
        let bits = x.to_bits();
        let down = f32::from_bits(bits & 0xFFFF_0000);
        let up = f32::from_bits((bits & 0xFFFF_0000).wrapping_add(0x1_0000));
        let (dd, du) = ((x as f64 - down as f64).abs(), (up as f64 - x as f64).abs());
        if dd < du {
            down
        } else if du < dd {
            up
        } else if (down.to_bits() >> 16) & 1 == 0 {
            down
        } else {
            up
        }
    }

    #[test]
    fn representable_values_are_unchanged() {
        assert_eq!(quantize(1.0, Precision::SimBF16), 1.0);
        assert_eq!(quantize(-0.5, Precision::SimBF16), -0.5);
    }

    #[test]
    fn halfway_rounds_to_even() {
        // 1 + 2^-8 sits exactly between 1.0 and 1 + 2^-7.
        let v = 1.0 + 2f64.powi(-8);
        assert_eq!(quantize(v, Precision::SimBF16), 1.0);
        assert_eq!(bf16_oracle(v as f32) as f64, 1.0);
        // 1 + 3*2^-8 is between 1 + 2^-7 (odd) and 1 + 2^-6 (even).
        let w = 1.0 + 3.0 * 2f64.powi(-8);
        assert_eq!(quantize(w, Precision::SimBF16), 1.0 + 2f64.powi(-6));
    }

    #[test]
    fn exact_mode_is_identity() {
        assert_eq!(quantize(1.23456789, Precision::Exact64), 1.23456789);
    }

    #[test]
    fn non_finite_passes_through() {
        assert!(quantize(f64::NAN, Precision::SimBF16).is_nan());
        assert_eq!(quantize(f64::INFINITY, Precision::SimBF16), f64::INFINITY);
        assert_eq!(quantize(f64::NEG_INFINITY, Precision::Sim32), f64::NEG_INFINITY);
    }

    #[test]
    fn tags_round_trip() {
        for p in [Precision::Exact64, Precision::Sim32, Precision::SimBF16] {
            assert_eq!(Precision::from_tag(p.tag()).unwrap(), p);
            assert_eq!(p.to_string().parse::<Precision>().unwrap(), p);
        }
        assert!(Precision::from_tag(9).is_err());
    }

    proptest::proptest! {
        #[test]
        fn bf16_matches_neighbour_enumeration(bits in proptest::num::u32::ANY) {
            let x = f32::from_bits(bits);
            proptest::prop_assume!(x.is_finite() && x.abs() < 3.0e38);
            proptest::prop_assert_eq!(bf16_round(x).to_bits(), bf16_oracle(x).to_bits());
        }

        #[test]
        fn quantize_is_idempotent(v in -1.0e30f64..1.0e30) {
            for p in [Precision::Sim32, Precision::SimBF16] {
                let q = quantize(v, p);
                proptest::prop_assert_eq!(quantize(q, p), q);
            }
        }
    }
}
