//! Ledgers of unfused operator sequences, where every operator is its own
//! launch that reads its full inputs from and writes its full outputs to
//! global memory.

use serde::{Deserialize, Serialize};

use super::{KernelRecord, TrafficLedger};
use crate::engine::LABEL_BYTES;
use crate::error::{Error, Result};
use crate::tensor::Precision;

/// One standalone operator on an `m × n` activation (`k` is the inner
/// dimension of a GEMM and unused otherwise).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub op: String,
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub k: usize,
}

impl OpSpec {
    pub fn new(op: &str, m: usize, n: usize) -> Self {
        Self {
            op: op.to_string(),
            m,
            n,
            k: 0,
        }
    }

    pub fn gemm(m: usize, n: usize, k: usize) -> Self {
        Self {
            op: "gemm".into(),
            m,
            n,
            k,
        }
    }
}

/// Operators understood by [`canonical_ledger`].
pub const OPS: [&str; 11] = [
    "gemm",
    "residual_add",
    "rmsnorm",
    "rmsnorm_two_pass",
    "rmsnorm_backward",
    "row_scale",
    "rope",
    "rope_backward",
    "swiglu",
    "swiglu_backward",
    "cross_entropy",
];

/// Analytic ledger of `ops` run as separate launches.
///
/// Activations and weights move at the storage width of `precision`;
/// per-row statistics and reduced vectors at its accumulator width.
///
/// * `rmsnorm` is a single pass: reads the input and the weight, writes the
///   output.
/// * `rmsnorm_two_pass` first reads the input to materialize the inverse
///   RMS, then reads the input again with the inverse RMS and the weight to
///   write the output. Unfused pipelines use this form, since the row
///   statistic has to cross a kernel boundary before it can be applied.
/// * `swiglu` and `swiglu_backward` take `n` as the interleaved width.
pub fn canonical_ledger(ops: &[OpSpec], precision: Precision) -> Result<TrafficLedger> {
    let b = precision.storage_bytes() as u64;
    let p = precision.accumulator().storage_bytes() as u64;
    let mut ledger = TrafficLedger::new();
    for spec in ops {
        let (m, n, k) = (spec.m as u64, spec.n as u64, spec.k as u64);
        let mn = m * n * b;
        let mut r = KernelRecord::new(&spec.op);
        match spec.op.as_str() {
            "gemm" => {
                if k == 0 {
                    return Err(Error::Config("gemm needs an inner dimension".into()));
                }
                r.read("A", m * k * b).read("B", k * n * b).write("D", mn);
            }
            "residual_add" => {
                r.read("x", mn).read("residual", mn).write("out", mn);
            }
            "rmsnorm" => {
                r.read("x", mn).read("gamma", n * b).write("out", mn);
            }
            "rmsnorm_two_pass" => {
                r.read("x", 2 * mn)
                    .read("gamma", n * b)
                    .read("r", m * p)
                    .write("r", m * p)
                    .write("out", mn);
            }
            "rmsnorm_backward" => {
                r.read("grad", mn)
                    .read("x", mn)
                    .read("r", m * p)
                    .read("gamma", n * b)
                    .write("dx", mn)
                    .write("dgamma", n * p);
            }
            "row_scale" => {
                r.read("x", mn).read("r", m * p).write("out", mn);
            }
            "rope" | "rope_backward" => {
                r.read("x", mn).read("cos", mn).read("sin", mn).write("out", mn);
            }
            "swiglu" => {
                r.read("z", mn).write("out", mn / 2);
            }
            "swiglu_backward" => {
                r.read("grad", mn / 2).read("z", mn).write("dz", mn);
            }
            "cross_entropy" => {
                r.read("logits", mn)
                    .read("labels", m * LABEL_BYTES)
                    .write("loss", m * p);
            }
            other => return Err(Error::Config(format!("unknown operator `{other}`"))),
        }
        ledger.push(r);
    }
    Ok(ledger)
}

/// `y = rmsnorm(x·W0 + z)·W1` with `x: m × k`, `W0: k × d`, `W1: d × n`.
pub fn grrg_ops(m: usize, k: usize, d: usize, n: usize) -> Vec<OpSpec> {
    vec![
        OpSpec::gemm(m, d, k),
        OpSpec::new("residual_add", m, d),
        OpSpec::new("rmsnorm_two_pass", m, d),
        OpSpec::gemm(m, n, d),
    ]
}

/// The two-block layer forward as standalone operators.
pub fn layer_forward_ops(m: usize, d: usize, ffn: usize) -> Vec<OpSpec> {
    vec![
        OpSpec::gemm(m, d, d),
        OpSpec::new("residual_add", m, d),
        OpSpec::new("rmsnorm_two_pass", m, d),
        OpSpec::gemm(m, 2 * ffn, d),
        OpSpec::new("swiglu", m, 2 * ffn),
        OpSpec::gemm(m, d, ffn),
        OpSpec::new("residual_add", m, d),
        OpSpec::new("rmsnorm_two_pass", m, d),
        OpSpec::gemm(m, 3 * d, d),
        OpSpec::new("rope", m, 3 * d),
    ]
}

/// The layer backward as standalone operators. Normalized activations for
/// the weight gradients are read back from the forward pass.
pub fn layer_backward_ops(m: usize, d: usize, ffn: usize) -> Vec<OpSpec> {
    vec![
        OpSpec::new("rope_backward", m, 3 * d),
        OpSpec::gemm(m, d, 3 * d),
        OpSpec::gemm(d, 3 * d, m),
        OpSpec::new("rmsnorm_backward", m, d),
        OpSpec::new("residual_add", m, d),
        OpSpec::gemm(m, ffn, d),
        OpSpec::gemm(ffn, d, m),
        OpSpec::new("swiglu_backward", m, 2 * ffn),
        OpSpec::gemm(m, d, 2 * ffn),
        OpSpec::gemm(d, 2 * ffn, m),
        OpSpec::new("rmsnorm_backward", m, d),
        OpSpec::new("residual_add", m, d),
        OpSpec::gemm(m, d, d),
        OpSpec::gemm(d, d, m),
    ]
}

/// Final norm, vocabulary projection and cross-entropy.
pub fn lm_head_ops(m: usize, k: usize, d: usize, vocab: usize) -> Vec<OpSpec> {
    vec![
        OpSpec::gemm(m, d, k),
        OpSpec::new("residual_add", m, d),
        OpSpec::new("rmsnorm_two_pass", m, d),
        OpSpec::gemm(m, vocab, d),
        OpSpec::new("cross_entropy", m, vocab),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::Direction;

    #[test]
    fn residual_add_bf16() {
        let l = canonical_ledger(&[OpSpec::new("residual_add", 4, 4)], Precision::SimBF16).unwrap();
        assert_eq!(l.read_bytes(), 64);
        assert_eq!(l.write_bytes(), 32);
    }

    #[test]
    fn empty_sequence() {
        let l = canonical_ledger(&[], Precision::SimBF16).unwrap();
        assert_eq!(l.total_bytes(), 0);
        assert_eq!(l.launches(), 0);
    }

    #[test]
    fn grrg_chain_has_four_launches() {
        let l = canonical_ledger(&grrg_ops(8, 8, 8, 8), Precision::SimBF16).unwrap();
        assert_eq!(l.launches(), 4);
    }

    #[test]
    fn rmsnorm_single_pass() {
        let l = canonical_ledger(&[OpSpec::new("rmsnorm", 3, 5)], Precision::Exact64).unwrap();
        assert_eq!(l.read_bytes(), (3 * 5 + 5) * 8);
        assert_eq!(l.write_bytes(), 3 * 5 * 8);
    }

    #[test]
    fn two_pass_rmsnorm_at_scale() {
        let (m, d) = (16384, 4096);
        let l = canonical_ledger(&[OpSpec::new("rmsnorm_two_pass", m, d)], Precision::SimBF16).unwrap();
        let rec = &l.records()[0];
        assert_eq!(rec.bytes("x", Direction::Read), 256 << 20);
        assert_eq!(rec.bytes("out", Direction::Write), 128 << 20);
    }

    #[test]
    fn unknown_operator() {
        let err = canonical_ledger(&[OpSpec::new("softmax", 2, 2)], Precision::Exact64).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
