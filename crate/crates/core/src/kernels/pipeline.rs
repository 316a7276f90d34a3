//! Multi-launch compositions.
//!
//! Each pipeline is a sequence of fused launches separated by auxiliary
//! reductions. The RMSNorm inverse factor is never applied before the GEMM
//! that consumes the normalized activation; it is applied to that GEMM's
//! output rows instead, which is exact because a per-row scale commutes with
//! right-multiplication.

use super::{
    kernel10_swiglu_backward, kernel4_res_partial_rms, kernel5_row_scale, kernel6_rms_swiglu_saving, kernel7_rms_rope,
    kernel8_rms_partial_ce, kernel9_rms_backward, slots, LayerGrads, LayerWeights, PipelineConfig,
};
use crate::engine::{run_epilogue, run_gemm, Bindings, KernelResult};
use crate::epilogue::{EpilogueProgram, Primitive};
use crate::error::{Error, Result};
use crate::reduce::{combine_lse, cross_entropy_finalize, finalize_rms, finalize_rowdot, reduce_row_partials};
use crate::tensor::{Matrix, Vector};
use crate::traffic::{KernelRecord, TrafficLedger};

const SAVED_Z: &str = "z_pre";

fn push(ledger: &mut TrafficLedger, res: &KernelResult) {
    ledger.extend(res.ledger.clone());
}

fn check_rows(cfg: &PipelineConfig, name: &str, m: &Matrix) -> Result<()> {
    if m.rows() != cfg.tokens {
        return Err(Error::Dimension(format!(
            "`{name}` has {} rows, config has {} tokens",
            m.rows(),
            cfg.tokens
        )));
    }
    Ok(())
}

/// Result of the two-GEMM residual + RMSNorm block.
#[derive(Clone, Debug)]
pub struct GrrgOutput {
    pub y: Matrix,
    /// Residual-updated activation `x·W0 + z`.
    pub h1: Matrix,
    pub r: Vector,
    pub ledger: TrafficLedger,
}

/// `y = RMSNorm(x·W0 + z, γ)·W1` as Kernel 4, the inverse-RMS reduction and
/// Kernel 5.
pub fn grrg_forward(
    cfg: &PipelineConfig,
    x: &Matrix,
    w0: &Matrix,
    z: &Matrix,
    gamma: &Vector,
    w1: &Matrix,
) -> Result<GrrgOutput> {
    cfg.validate()?;
    let mut ledger = TrafficLedger::new();
    let k4 = kernel4_res_partial_rms(cfg, x, w0, z, gamma)?;
    push(&mut ledger, &k4);
    let (r, rec) = finalize_rms(k4.partials(slots::RMS_PARTIALS)?, cfg.eps)?;
    ledger.push(rec);
    let k5 = kernel5_row_scale(cfg, k4.main()?, w1, &r)?;
    push(&mut ledger, &k5);
    Ok(GrrgOutput {
        y: k5.into_main()?,
        h1: k4.tensor(slots::RESIDUAL)?.clone(),
        r,
        ledger,
    })
}

/// Outputs of one layer: rotated QKV and the updated residual stream.
#[derive(Clone, Debug)]
pub struct LayerOutputs {
    pub q: Matrix,
    pub residual: Matrix,
    pub ledger: TrafficLedger,
}

/// Activations saved by [`layer_forward`] for [`layer_backward`].
#[derive(Clone, Debug, Default)]
pub struct LayerTape {
    pub x: Option<Matrix>,
    pub h1: Option<Matrix>,
    pub r1: Option<Vector>,
    /// Scaled interleaved gate/up pre-activation.
    pub z1: Option<Matrix>,
    /// SwiGLU output.
    pub a: Option<Matrix>,
    pub h1b: Option<Matrix>,
    pub r2: Option<Vector>,
    /// Post-RoPE output.
    pub q: Option<Matrix>,
    pub cos: Option<Matrix>,
    pub sin: Option<Matrix>,
}

fn need<'a, T>(v: &'a Option<T>, name: &'static str) -> Result<&'a T> {
    v.as_ref().ok_or(Error::Tape(name))
}

impl LayerTape {
    /// Names of every saved tensor that is present.
    pub fn present(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        let mut add = |ok: bool, n: &'static str| {
            if ok {
                v.push(n);
            }
        };
        add(self.x.is_some(), "x");
        add(self.h1.is_some(), "h1");
        add(self.r1.is_some(), "r1");
        add(self.z1.is_some(), "z1");
        add(self.a.is_some(), "a");
        add(self.h1b.is_some(), "h1b");
        add(self.r2.is_some(), "r2");
        add(self.q.is_some(), "q");
        add(self.cos.is_some(), "cos");
        add(self.sin.is_some(), "sin");
        v
    }

    /// Everything [`layer_backward`] reads.
    pub const REQUIRED: [&'static str; 10] = ["x", "h1", "r1", "z1", "a", "h1b", "r2", "q", "cos", "sin"];
}

/// Two residual + RMSNorm blocks: the first ends in the SwiGLU feed-forward
/// (whose down projection closes the block as another Kernel 4), the second
/// in the RoPE-ed QKV projection.
///
/// ```text
/// K4  h1 = x·W_o + z, partials(h1), h1⊙γ1      → r1
/// K6  Z = r1·(h1⊙γ1)·W_gu, a = swiglu(Z)
/// K4  h1b = a·W_dn + h1, partials(h1b), h1b⊙γ2 → r2
/// K7  q = rope(r2·(h1b⊙γ2)·W_qkv)
/// ```
pub fn layer_forward(
    cfg: &PipelineConfig,
    x: &Matrix,
    z: &Matrix,
    w: &LayerWeights,
    cos: &Matrix,
    sin: &Matrix,
) -> Result<(LayerOutputs, LayerTape)> {
    cfg.validate()?;
    check_rows(cfg, "x", x)?;
    let mut ledger = TrafficLedger::new();

    let k4a = kernel4_res_partial_rms(cfg, x, &w.w_o, z, &w.gamma1)?;
    push(&mut ledger, &k4a);
    let (r1, rec) = finalize_rms(k4a.partials(slots::RMS_PARTIALS)?, cfg.eps)?;
    ledger.push(rec);

    let k6 = kernel6_rms_swiglu_saving(cfg, k4a.main()?, &w.w_gu, &r1, SAVED_Z)?;
    push(&mut ledger, &k6);
    let h1 = k4a.tensor(slots::RESIDUAL)?.clone();

    let mut k4b = kernel4_res_partial_rms(cfg, k6.main()?, &w.w_dn, &h1, &w.gamma2)?;
    k4b.ledger = rename(k4b.ledger, "k4_res_partial_rms_b");
    push(&mut ledger, &k4b);
    let (r2, rec) = finalize_rms(k4b.partials(slots::RMS_PARTIALS)?, cfg.eps)?;
    ledger.push(rec);

    let k7 = kernel7_rms_rope(cfg, k4b.main()?, &w.w_qkv, &r2, cos, sin)?;
    push(&mut ledger, &k7);

    let q = k7.into_main()?;
    let h1b = k4b.tensor(slots::RESIDUAL)?.clone();
    let tape = LayerTape {
        x: Some(x.clone()),
        h1: Some(h1),
        r1: Some(r1),
        z1: Some(k6.tensor(SAVED_Z)?.clone()),
        a: Some(k6.into_main()?),
        h1b: Some(h1b.clone()),
        r2: Some(r2),
        q: Some(q.clone()),
        cos: Some(cos.clone()),
        sin: Some(sin.clone()),
    };
    Ok((
        LayerOutputs {
            q,
            residual: h1b,
            ledger,
        },
        tape,
    ))
}

fn rename(ledger: TrafficLedger, name: &str) -> TrafficLedger {
    TrafficLedger::from_records(
        ledger
            .records()
            .iter()
            .map(|r| KernelRecord {
                name: name.to_string(),
                transfers: r.transfers.clone(),
            })
            .collect(),
    )
}

/// Weight-gradient GEMM `Aᵀ·B`.
fn weight_grad(cfg: &PipelineConfig, name: &str, a: &Matrix, b: &Matrix, ledger: &mut TrafficLedger) -> Result<Matrix> {
    let mut p = cfg.problem(name, a.cols(), b.cols(), a.rows());
    p.trans_a = true;
    let res = run_gemm(&p, a, b, &EpilogueProgram::empty(), &Bindings::new())?;
    push(ledger, &res);
    res.into_main()
}

/// Backward of [`layer_forward`] for upstream gradients on `q` and on the
/// residual output.
///
/// The RMSNorm backward statistic of each block is produced by the launch
/// that follows it in backward order: the second block's from a rowdot
/// against the saved `q` (rotation preserves inner products, so
/// `⟨∇q, q⟩ = ⟨∇y, y⟩`), the first block's from Kernel 10's
/// `⟨Z, ∇Z⟩` partials.
pub fn layer_backward(
    cfg: &PipelineConfig,
    tape: &LayerTape,
    w: &LayerWeights,
    dq: &Matrix,
    dres: &Matrix,
) -> Result<(LayerGrads, TrafficLedger)> {
    cfg.validate()?;
    let x = need(&tape.x, "x")?;
    let h1 = need(&tape.h1, "h1")?;
    let r1 = need(&tape.r1, "r1")?;
    let z1 = need(&tape.z1, "z1")?;
    let a = need(&tape.a, "a")?;
    let h1b = need(&tape.h1b, "h1b")?;
    let r2 = need(&tape.r2, "r2")?;
    let q = need(&tape.q, "q")?;
    let cos = need(&tape.cos, "cos")?;
    let sin = need(&tape.sin, "sin")?;
    if dq.shape() != q.shape() || dres.shape() != h1b.shape() {
        return Err(Error::Dimension(
            "upstream gradients do not match the layer outputs".into(),
        ));
    }
    let d = cfg.d;
    let mut ledger = TrafficLedger::new();

    // un-rotate ∇q and emit the second block's statistic
    let boundary = EpilogueProgram::new(vec![
        Primitive::PartialRowDot {
            operand: "q".into(),
            slot: slots::ROWDOT_PARTIALS.into(),
        },
        Primitive::Rope {
            cos: "cos".into(),
            sin: "sin".into(),
            inverse: true,
        },
    ])?;
    let p = cfg.problem("rope_backward", dq.rows(), dq.cols(), 0);
    let binds = Bindings::new().matrix("q", q).matrix("cos", cos).matrix("sin", sin);
    let rb = run_epilogue(&p, dq, &boundary, &binds)?;
    push(&mut ledger, &rb);
    let (s2, rec) = finalize_rowdot(rb.partials(slots::ROWDOT_PARTIALS)?, d)?;
    ledger.push(rec);
    let dy = rb.into_main()?;

    // second block: RMSNorm backward fused after ∇y·W_qkvᵀ
    let k9b = kernel9_rms_backward(cfg, &dy, &w.w_qkv, h1b, r2, &w.gamma2, &s2, Some(dres))?;
    push(&mut ledger, &k9b);
    let (dgamma2, rec) = reduce_row_partials(k9b.partials(slots::WEIGHT_GRAD_PARTIALS)?)?;
    ledger.push(rec);
    let dw_qkv = weight_grad(cfg, "dw_qkv", k9b.tensor(slots::NORMED)?, &dy, &mut ledger)?;
    let dh1b = k9b.into_main()?;

    // feed-forward: SwiGLU backward fused after ∇h1b·W_dnᵀ
    let k10 = kernel10_swiglu_backward(cfg, &dh1b, &w.w_dn, z1)?;
    push(&mut ledger, &k10);
    let dw_dn = weight_grad(cfg, "dw_dn", a, &dh1b, &mut ledger)?;
    let (s1, rec) = finalize_rowdot(k10.partials(slots::ROWDOT_PARTIALS)?, d)?;
    ledger.push(rec);
    let dz1 = k10.into_main()?;

    // first block: RMSNorm backward fused after ∇Z·W_guᵀ
    let k9a = kernel9_rms_backward(cfg, &dz1, &w.w_gu, h1, r1, &w.gamma1, &s1, Some(&dh1b))?;
    push(&mut ledger, &k9a);
    let (dgamma1, rec) = reduce_row_partials(k9a.partials(slots::WEIGHT_GRAD_PARTIALS)?)?;
    ledger.push(rec);
    let dw_gu = weight_grad(cfg, "dw_gu", k9a.tensor(slots::NORMED)?, &dz1, &mut ledger)?;
    let dh1 = k9a.into_main()?;

    // output projection
    let p = cfg.problem("dx", dh1.rows(), w.w_o.rows(), dh1.cols());
    let mut p = p;
    p.trans_b = true;
    let dxr = run_gemm(&p, &dh1, &w.w_o, &EpilogueProgram::empty(), &Bindings::new())?;
    push(&mut ledger, &dxr);
    let dw_o = weight_grad(cfg, "dw_o", x, &dh1, &mut ledger)?;

    Ok((
        LayerGrads {
            dx: dxr.into_main()?,
            dz: dh1,
            dw_o,
            dgamma1,
            dw_gu,
            dw_dn,
            dgamma2,
            dw_qkv,
        },
        ledger,
    ))
}

/// Per-row losses of the language-model head.
#[derive(Clone, Debug)]
pub struct LmHeadOutput {
    pub logits: Matrix,
    pub losses: Vector,
    pub mean_loss: f64,
    pub ledger: TrafficLedger,
}

/// Final norm and vocabulary projection with cross-entropy: Kernel 4, the
/// inverse-RMS reduction, Kernel 8, the LSE combine and the loss finalize.
pub fn lm_head_forward(
    cfg: &PipelineConfig,
    x: &Matrix,
    w0: &Matrix,
    z: &Matrix,
    gamma: &Vector,
    w_vocab: &Matrix,
    labels: &[usize],
) -> Result<LmHeadOutput> {
    cfg.validate()?;
    let mut ledger = TrafficLedger::new();
    let k4 = kernel4_res_partial_rms(cfg, x, w0, z, gamma)?;
    push(&mut ledger, &k4);
    let (r, rec) = finalize_rms(k4.partials(slots::RMS_PARTIALS)?, cfg.eps)?;
    ledger.push(rec);
    let k8 = kernel8_rms_partial_ce(cfg, k4.main()?, w_vocab, &r, labels)?;
    push(&mut ledger, &k8);
    let (lse, rec) = combine_lse(k8.partials(slots::LSE_PARTIALS)?)?;
    ledger.push(rec);
    let (losses, mean_loss, rec) = cross_entropy_finalize(k8.gathered(slots::TARGET_LOGITS)?, &lse)?;
    ledger.push(rec);
    Ok(LmHeadOutput {
        logits: k8.into_main()?,
        losses,
        mean_loss,
        ledger,
    })
}
