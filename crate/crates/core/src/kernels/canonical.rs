//! The unfused operator sequence, executed with the same precision model as
//! the fused path: every operator reads stored tensors, computes at
//! accumulator precision and rounds its output to storage precision.

use super::PipelineConfig;
use crate::engine::{run_gemm, Bindings, GemmProblem};
use crate::epilogue::EpilogueProgram;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};
use crate::traffic::canonical::{canonical_ledger, grrg_ops};
use crate::traffic::TrafficLedger;

fn gemm(cfg: &PipelineConfig, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let p = GemmProblem::for_operands(a, b, false, false, cfg.precision)?;
    let p = cfg.problem("gemm", p.m, p.n, p.k);
    run_gemm(&p, a, b, &EpilogueProgram::empty(), &Bindings::new())?.into_main()
}

/// Standalone residual add.
pub fn residual_add(cfg: &PipelineConfig, x: &Matrix, c: &Matrix) -> Result<Matrix> {
    if x.shape() != c.shape() {
        return Err(Error::Dimension(format!("{:?} + {:?}", x.shape(), c.shape())));
    }
    let acc = cfg.precision.accumulator();
    Matrix::from_vec(
        x.rows(),
        x.cols(),
        x.as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| acc.quantize(a + b))
            .collect(),
        cfg.precision,
    )
}

/// Standalone RMSNorm: returns the stored normalized output and `r`.
pub fn rmsnorm(cfg: &PipelineConfig, x: &Matrix, gamma: &Vector) -> Result<(Matrix, Vector)> {
    if gamma.len() != x.cols() {
        return Err(Error::Dimension(format!(
            "gamma has {} entries for width {}",
            gamma.len(),
            x.cols()
        )));
    }
    let acc = cfg.precision.accumulator();
    let d = x.cols();
    let r: Vec<f64> = (0..x.rows())
        .map(|i| {
            let ss = x.row(i).iter().fold(0.0, |s, v| acc.quantize(s + v * v));
            acc.quantize(1.0 / (ss / d as f64 + cfg.eps).sqrt())
        })
        .collect();
    let out = Matrix::from_fn(x.rows(), d, cfg.precision, |i, j| {
        acc.quantize(acc.quantize(x.get(i, j) * r[i]) * gamma.get(j))
    });
    Ok((out, Vector::from_vec(r, acc)))
}

/// `y = RMSNorm(x·W0 + z, γ)·W1` as four separate launches.
pub fn grrg_canonical(
    cfg: &PipelineConfig,
    x: &Matrix,
    w0: &Matrix,
    z: &Matrix,
    gamma: &Vector,
    w1: &Matrix,
) -> Result<(Matrix, TrafficLedger)> {
    cfg.validate()?;
    let h0 = gemm(cfg, x, w0)?;
    let h1 = residual_add(cfg, &h0, z)?;
    let (n, _) = rmsnorm(cfg, &h1, gamma)?;
    let y = gemm(cfg, &n, w1)?;
    let ledger = canonical_ledger(&grrg_ops(x.rows(), x.cols(), w0.cols(), w1.cols()), cfg.precision)?;
    Ok((y, ledger))
}
