//! Global-memory traffic accounting.
//!
//! Fused launches record their transfers as they run (see the engine);
//! this module adds closed-form ledgers for the same launches, ledgers for
//! the unfused operator sequences they replace, and the comparison between
//! the two.

pub mod canonical;
pub mod fused;
mod ledger;

use serde::{Deserialize, Serialize};

pub use canonical::{canonical_ledger, OpSpec};
pub use fused::FusedParams;
pub use ledger::{Direction, KernelRecord, TrafficLedger, Transfer};

/// Fused versus canonical traffic of the same computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub fused_bytes: u64,
    pub canonical_bytes: u64,
    /// `fused − canonical` (negative when fusion saves traffic).
    pub byte_delta: i128,
    /// `fused / canonical`; 1 when both are empty.
    pub ratio: f64,
    pub fused_launches: usize,
    pub canonical_launches: usize,
    pub launch_delta: i64,
}

pub fn compare(fused: &TrafficLedger, canonical: &TrafficLedger) -> TrafficReport {
    let (f, c) = (fused.total_bytes(), canonical.total_bytes());
    TrafficReport {
        fused_bytes: f,
        canonical_bytes: c,
        byte_delta: f as i128 - c as i128,
        ratio: if c == 0 {
            if f == 0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            f as f64 / c as f64
        },
        fused_launches: fused.launches(),
        canonical_launches: canonical.launches(),
        launch_delta: fused.launches() as i64 - canonical.launches() as i64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_ledgers_compare_equal() {
        let mut r = KernelRecord::new("k");
        r.read("A", 100).write("D", 50);
        let l = TrafficLedger::from_records(vec![r]);
        let rep = compare(&l, &l);
        assert_eq!(rep.ratio, 1.0);
        assert_eq!(rep.byte_delta, 0);
        assert_eq!(rep.launch_delta, 0);
        assert_eq!(compare(&TrafficLedger::new(), &TrafficLedger::new()).ratio, 1.0);
    }
}
