//! Closed-form ledgers of the fused launches.
//!
//! These are computed from shapes alone and must agree byte for byte with
//! what the engine records while running the same launch, which the tests
//! check. They also make production-size shapes cheap to evaluate.
//!
//! Matrices and weights move at the storage width; row statistics, partials
//! and reduced vectors at the accumulator width; labels at 4 bytes.

use super::{KernelRecord, TrafficLedger};
use crate::engine::LABEL_BYTES;
use crate::kernels::PipelineConfig;
use crate::tensor::{Precision, TileShape};

/// Launch parameters that affect traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusedParams {
    pub precision: Precision,
    pub tile_shape: TileShape,
    pub reduction_tile_n: usize,
}

impl From<&PipelineConfig> for FusedParams {
    fn from(cfg: &PipelineConfig) -> Self {
        Self {
            precision: cfg.precision,
            tile_shape: cfg.tile_shape,
            reduction_tile_n: cfg.reduction_tile_n,
        }
    }
}

impl FusedParams {
    pub fn new(precision: Precision, tile_shape: TileShape, reduction_tile_n: usize) -> Self {
        Self {
            precision,
            tile_shape,
            reduction_tile_n,
        }
    }

    fn b(&self) -> u64 {
        self.precision.storage_bytes() as u64
    }

    fn p(&self) -> u64 {
        self.precision.accumulator().storage_bytes() as u64
    }

    fn grid_m(&self, m: usize) -> u64 {
        m.div_ceil(self.tile_shape.tile_m) as u64
    }

    /// `(blocks written per row, slot columns)` for row-blocked partials of
    /// a GEMM with output width `n`, taken at `scale`× that width.
    fn row_blocks(&self, n: usize, scale: usize) -> (u64, u64) {
        let tn = self.tile_shape.tile_n;
        let tw = tn * scale;
        let block = self.reduction_tile_n.min(tw);
        let tiles = n.div_ceil(tn);
        let written: usize = (0..tiles).map(|j| (tn.min(n - j * tn) * scale).div_ceil(block)).sum();
        (written as u64, (tiles * tw.div_ceil(block)) as u64)
    }

    /// Bytes of an `m`-row partial slot as the auxiliary reduction reads it.
    pub fn partial_slot_bytes(&self, m: usize, n: usize, scale: usize) -> u64 {
        m as u64 * self.row_blocks(n, scale).1 * self.p()
    }

    /// Bytes of row-blocked partials written by the producing launch.
    pub fn partial_write_bytes(&self, m: usize, n: usize, scale: usize) -> u64 {
        m as u64 * self.row_blocks(n, scale).0 * self.p()
    }
}

fn gemm_record(name: &str, fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let b = fp.b();
    let mut r = KernelRecord::new(name);
    r.read("A", (m * k) as u64 * b).read("B", (k * n) as u64 * b);
    r
}

/// A GEMM with the identity epilogue.
pub fn plain_gemm(name: &str, fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let mut r = gemm_record(name, fp, m, n, k);
    r.write("D", (m * n) as u64 * fp.b());
    r
}

/// Kernel 4: reads `z` and `γ`; writes `h1`, the partials and `h1 ⊙ γ`.
pub fn kernel4(name: &str, fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let (b, mn) = (fp.b(), (m * n) as u64);
    let mut r = gemm_record(name, fp, m, n, k);
    r.read("z", mn * b)
        .read("gamma", n as u64 * b)
        .write("h1", mn * b)
        .write("rms_partials", fp.partial_write_bytes(m, n, 1))
        .write("D", mn * b);
    r
}

/// Kernel 5: reads the inverse RMS vector.
pub fn kernel5(fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let mut r = gemm_record("k5_row_scale", fp, m, n, k);
    r.read("r", m as u64 * fp.p()).write("D", (m * n) as u64 * fp.b());
    r
}

/// Kernel 6 storing its pre-activation under `saved`.
pub fn kernel6(fp: &FusedParams, m: usize, n: usize, k: usize, saved: Option<&str>) -> KernelRecord {
    let mut r = gemm_record("k6_rms_swiglu", fp, m, n, k);
    r.read("r", m as u64 * fp.p());
    if let Some(s) = saved {
        r.write(s, (m * n) as u64 * fp.b());
    }
    r.write("D", (m * n / 2) as u64 * fp.b());
    r
}

/// Kernel 7: reads both rotary tables at full shape.
pub fn kernel7(fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let mn = (m * n) as u64 * fp.b();
    let mut r = gemm_record("k7_rms_rope", fp, m, n, k);
    r.read("r", m as u64 * fp.p())
        .read("cos", mn)
        .read("sin", mn)
        .write("D", mn);
    r
}

/// Kernel 8: gathers one target logit per row and writes LSE pairs.
pub fn kernel8(fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let mut r = gemm_record("k8_rms_partial_ce", fp, m, n, k);
    r.read("r", m as u64 * fp.p())
        .read("labels", m as u64 * LABEL_BYTES)
        .write("z_tgt", m as u64 * fp.p())
        .write("lse_partials", 2 * fp.partial_write_bytes(m, n, 1))
        .write("D", (m * n) as u64 * fp.b());
    r
}

/// Kernel 9 with the incoming residual gradient.
pub fn kernel9(fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let (b, p, mn) = (fp.b(), fp.p(), (m * n) as u64);
    let mut r = gemm_record("k9_rms_backward", fp, m, n, k);
    r.read("h1", mn * b)
        .read("o_in", mn * b)
        .read("r", m as u64 * p)
        .read("s", m as u64 * p)
        .read("gamma", n as u64 * b)
        .write("c_out", mn * b)
        .write("dgamma_partials", fp.grid_m(m) * n as u64 * p)
        .write("D", mn * b);
    r
}

/// Kernel 10: GEMM width `n`, gradient and saved pre-activation `2n` wide.
pub fn kernel10(fp: &FusedParams, m: usize, n: usize, k: usize) -> KernelRecord {
    let wide = (m * 2 * n) as u64 * fp.b();
    let mut r = gemm_record("k10_swiglu_backward", fp, m, n, k);
    r.read("z", wide)
        .write("s_partials", fp.partial_write_bytes(m, n, 2))
        .write("D", wide);
    r
}

/// The epilogue-only launch that un-rotates `∇q` and emits `⟨∇q, q⟩` partials.
pub fn rope_backward(fp: &FusedParams, m: usize, n: usize) -> KernelRecord {
    let mn = (m * n) as u64 * fp.b();
    let mut r = KernelRecord::new("rope_backward");
    r.read("input", mn)
        .read("q", mn)
        .read("cos", mn)
        .read("sin", mn)
        .write("s_partials", fp.partial_write_bytes(m, n, 1))
        .write("D", mn);
    r
}

fn reduction(name: &str, read: u64, write: u64) -> KernelRecord {
    let mut r = KernelRecord::new(name);
    r.read("partials", read).write("out", write);
    r
}

/// Row statistic from row-blocked partials of an `n`-wide GEMM output taken
/// at `scale`× width.
pub fn finalize_row(name: &str, fp: &FusedParams, m: usize, n: usize, scale: usize) -> KernelRecord {
    reduction(name, fp.partial_slot_bytes(m, n, scale), m as u64 * fp.p())
}

pub fn combine_lse(fp: &FusedParams, m: usize, n: usize) -> KernelRecord {
    reduction("combine_lse", 2 * fp.partial_slot_bytes(m, n, 1), m as u64 * fp.p())
}

pub fn reduce_row_partials(fp: &FusedParams, m: usize, n: usize) -> KernelRecord {
    reduction(
        "reduce_row_partials",
        fp.grid_m(m) * n as u64 * fp.p(),
        n as u64 * fp.p(),
    )
}

pub fn cross_entropy_finalize(fp: &FusedParams, m: usize) -> KernelRecord {
    let v = m as u64 * fp.p();
    let mut r = KernelRecord::new("cross_entropy_finalize");
    r.read("z_tgt", v).read("lse", v).write("loss", v);
    r
}

/// Kernel 4 → inverse RMS → Kernel 5, with `x: m × k`, `W0: k × d`,
/// `W1: d × n`.
pub fn grrg(fp: &FusedParams, m: usize, k: usize, d: usize, n: usize) -> TrafficLedger {
    TrafficLedger::from_records(vec![
        kernel4("k4_res_partial_rms", fp, m, d, k),
        finalize_row("finalize_rms", fp, m, d, 1),
        kernel5(fp, m, n, d),
    ])
}

pub fn layer_forward(fp: &FusedParams, m: usize, d: usize, ffn: usize) -> TrafficLedger {
    TrafficLedger::from_records(vec![
        kernel4("k4_res_partial_rms", fp, m, d, d),
        finalize_row("finalize_rms", fp, m, d, 1),
        kernel6(fp, m, 2 * ffn, d, Some("z_pre")),
        kernel4("k4_res_partial_rms_b", fp, m, d, ffn),
        finalize_row("finalize_rms", fp, m, d, 1),
        kernel7(fp, m, 3 * d, d),
    ])
}

pub fn layer_backward(fp: &FusedParams, m: usize, d: usize, ffn: usize) -> TrafficLedger {
    TrafficLedger::from_records(vec![
        rope_backward(fp, m, 3 * d),
        finalize_row("finalize_rowdot", fp, m, 3 * d, 1),
        kernel9(fp, m, d, 3 * d),
        reduce_row_partials(fp, m, d),
        plain_gemm("dw_qkv", fp, d, 3 * d, m),
        kernel10(fp, m, ffn, d),
        plain_gemm("dw_dn", fp, ffn, d, m),
        finalize_row("finalize_rowdot", fp, m, ffn, 2),
        kernel9(fp, m, d, 2 * ffn),
        reduce_row_partials(fp, m, d),
        plain_gemm("dw_gu", fp, d, 2 * ffn, m),
        plain_gemm("dx", fp, m, d, d),
        plain_gemm("dw_o", fp, d, d, m),
    ])
}

pub fn lm_head(fp: &FusedParams, m: usize, k: usize, d: usize, vocab: usize) -> TrafficLedger {
    TrafficLedger::from_records(vec![
        kernel4("k4_res_partial_rms", fp, m, d, k),
        finalize_row("finalize_rms", fp, m, d, 1),
        kernel8(fp, m, vocab, d),
        combine_lse(fp, m, vocab),
        cross_entropy_finalize(fp, m),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::Direction;

    #[test]
    fn partial_traffic_at_scale() {
        let fp = FusedParams::new(Precision::SimBF16, TileShape::default(), 128);
        let rec = kernel4("k4", &fp, 16384, 4096, 4096);
        assert_eq!(rec.bytes("rms_partials", Direction::Write), 2 << 20);
        assert_eq!(fp.partial_slot_bytes(16384, 4096, 1), 2 << 20);
    }

    #[test]
    fn ragged_blocks_are_counted_per_tile() {
        let fp = FusedParams::new(Precision::Exact64, TileShape::new(4, 6).unwrap(), 4);
        // tiles of width 6, 6, 2 → blocks 2, 2, 1 written; 3 tiles × 2 slots
        assert_eq!(fp.row_blocks(14, 1), (5, 6));
    }
}
