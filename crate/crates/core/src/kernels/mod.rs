//! The fused Transformer kernels and the pipelines assembled from them.
//!
//! Kernels 1–3 are plain GEMMs with an activation or loss epilogue; 4–8 add
//! the RMSNorm pieces (residual + partial statistics, then row scaling by a
//! finalized inverse RMS); 9 and 10 are the backward epilogues.

pub mod canonical;
mod config;
mod pipeline;

pub use config::{derived_ffn, PipelineConfig};
pub use pipeline::{
    grrg_forward, layer_backward, layer_forward, lm_head_forward, GrrgOutput, LayerOutputs, LayerTape, LmHeadOutput,
};

use rand::Rng;

use crate::engine::{run_gemm, Bindings, GemmProblem, KernelResult};
use crate::epilogue::{EpilogueProgram, Primitive};
use crate::error::Result;
use crate::tensor::{Matrix, Precision, Vector};

/// Slot names used by the kernels.
pub mod slots {
    pub const RESIDUAL: &str = "h1";
    pub const RMS_PARTIALS: &str = "rms_partials";
    pub const TARGET_LOGITS: &str = "z_tgt";
    pub const LSE_PARTIALS: &str = "lse_partials";
    pub const NORMED: &str = "c_out";
    pub const WEIGHT_GRAD_PARTIALS: &str = "dgamma_partials";
    pub const ROWDOT_PARTIALS: &str = "s_partials";
}

/// Weights of one layer: the output projection closing the previous
/// sublayer, the SwiGLU feed-forward, and the QKV projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    /// `d × d`.
    pub w_o: Matrix,
    pub gamma1: Vector,
    /// `d × 2·ffn`, gate and up columns interleaved.
    pub w_gu: Matrix,
    /// `ffn × d`.
    pub w_dn: Matrix,
    pub gamma2: Vector,
    /// `d × 3d`.
    pub w_qkv: Matrix,
}

impl LayerWeights {
    /// Uniform weights scaled by `1/√fan_in`, norm weights in `[0.5, 1.5)`.
    pub fn random(cfg: &PipelineConfig, rng: &mut impl Rng) -> Self {
        let (d, f, p) = (cfg.d, cfg.ffn_width(), cfg.precision);
        let mut w = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            Matrix::from_fn(rows, cols, p, |_, _| s * rng.gen_range(-1.0..1.0))
        };
        let w_o = w(d, d);
        let w_gu = w(d, 2 * f);
        let w_dn = w(f, d);
        let w_qkv = w(d, 3 * d);
        let gamma1 = Vector::from_vec((0..d).map(|_| rng.gen_range(0.5..1.5)).collect(), p);
        let gamma2 = Vector::from_vec((0..d).map(|_| rng.gen_range(0.5..1.5)).collect(), p);
        Self {
            w_o,
            gamma1,
            w_gu,
            w_dn,
            gamma2,
            w_qkv,
        }
    }

    pub fn to_precision(&self, p: Precision) -> Self {
        Self {
            w_o: self.w_o.to_precision(p),
            gamma1: self.gamma1.to_precision(p),
            w_gu: self.w_gu.to_precision(p),
            w_dn: self.w_dn.to_precision(p),
            gamma2: self.gamma2.to_precision(p),
            w_qkv: self.w_qkv.to_precision(p),
        }
    }
}

/// Gradients of every layer input and parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub dx: Matrix,
    /// Gradient of the incoming residual stream.
    pub dz: Matrix,
    pub dw_o: Matrix,
    pub dgamma1: Vector,
    pub dw_gu: Matrix,
    pub dw_dn: Matrix,
    pub dgamma2: Vector,
    pub dw_qkv: Matrix,
}

impl LayerGrads {
    /// `(name, gradient)` pairs, vectors as `1 × n` matrices.
    pub fn named(&self) -> Vec<(&'static str, Matrix)> {
        vec![
            ("dx", self.dx.clone()),
            ("dz", self.dz.clone()),
            ("dw_o", self.dw_o.clone()),
            ("dgamma1", row_matrix(&self.dgamma1)),
            ("dw_gu", self.dw_gu.clone()),
            ("dw_dn", self.dw_dn.clone()),
            ("dgamma2", row_matrix(&self.dgamma2)),
            ("dw_qkv", self.dw_qkv.clone()),
        ]
    }
}

fn row_matrix(v: &Vector) -> Matrix {
    Matrix::from_vec(1, v.len(), v.as_slice().to_vec(), v.precision()).expect("length matches")
}

/// Interleaves separate gate and up projections (`d × f` each) into the
/// `d × 2f` layout the fused SwiGLU epilogue expects: gate in even columns,
/// up in odd columns.
pub fn interleave_gate_up(gate: &Matrix, up: &Matrix) -> Matrix {
    assert_eq!(gate.shape(), up.shape(), "gate and up projections differ in shape");
    Matrix::from_fn(gate.rows(), 2 * gate.cols(), gate.precision(), |i, j| {
        if j % 2 == 0 {
            gate.get(i, j / 2)
        } else {
            up.get(i, j / 2)
        }
    })
}

/// Position-dependent rotary tables at full `m × width` shape. Both lanes
/// of a pair share the angle `pos · base^(−2k/width)`.
pub fn rope_tables(m: usize, width: usize, base: f64, precision: Precision) -> (Matrix, Matrix) {
    let angle = |i: usize, j: usize| {
        let k = (j / 2) as f64;
        i as f64 * base.powf(-2.0 * k / width as f64)
    };
    (
        Matrix::from_fn(m, width, precision, |i, j| angle(i, j).cos()),
        Matrix::from_fn(m, width, precision, |i, j| angle(i, j).sin()),
    )
}

fn s(x: &str) -> String {
    x.to_string()
}

fn problem(cfg: &PipelineConfig, name: &str, a: &Matrix, b: &Matrix, trans_b: bool) -> Result<GemmProblem> {
    let p = GemmProblem::for_operands(a, b, false, trans_b, cfg.precision)?;
    let mut full = cfg.problem(name, p.m, p.n, p.k);
    full.trans_b = trans_b;
    Ok(full)
}

fn rope_step() -> Primitive {
    Primitive::Rope {
        cos: s("cos"),
        sin: s("sin"),
        inverse: false,
    }
}

fn ce_steps() -> Vec<Primitive> {
    vec![
        Primitive::TargetGather {
            labels: s("labels"),
            slot: s(slots::TARGET_LOGITS),
        },
        Primitive::OnlineLse {
            slot: s(slots::LSE_PARTIALS),
        },
    ]
}

/// Kernel 1: GEMM followed by RoPE on adjacent output pairs.
pub fn kernel1_rope(cfg: &PipelineConfig, a: &Matrix, b: &Matrix, cos: &Matrix, sin: &Matrix) -> Result<KernelResult> {
    let program = EpilogueProgram::new(vec![rope_step()])?;
    let binds = Bindings::new().matrix("cos", cos).matrix("sin", sin);
    run_gemm(&problem(cfg, "k1_rope", a, b, false)?, a, b, &program, &binds)
}

/// Kernel 2: GEMM on an interleaved gate/up weight followed by SwiGLU.
pub fn kernel2_swiglu(cfg: &PipelineConfig, a: &Matrix, b: &Matrix) -> Result<KernelResult> {
    let program = EpilogueProgram::new(vec![Primitive::SwiGlu])?;
    run_gemm(
        &problem(cfg, "k2_swiglu", a, b, false)?,
        a,
        b,
        &program,
        &Bindings::new(),
    )
}

/// Kernel 3: logits GEMM emitting target logits and block-wise LSE partials.
/// The logits themselves are still stored.
pub fn kernel3_partial_ce(cfg: &PipelineConfig, a: &Matrix, b: &Matrix, labels: &[usize]) -> Result<KernelResult> {
    let program = EpilogueProgram::new(ce_steps())?;
    let binds = Bindings::new().labels("labels", labels);
    run_gemm(&problem(cfg, "k3_partial_ce", a, b, false)?, a, b, &program, &binds)
}

/// Kernel 4: `h1 = x·W + z` is stored as an auxiliary, its partial sums of
/// squares are emitted, and the main output is `h1 ⊙ γ`.
pub fn kernel4_res_partial_rms(
    cfg: &PipelineConfig,
    x: &Matrix,
    w: &Matrix,
    z: &Matrix,
    gamma: &Vector,
) -> Result<KernelResult> {
    let program = EpilogueProgram::new(vec![
        Primitive::ResidualAdd { operand: s("z") },
        Primitive::StoreTile {
            slot: s(slots::RESIDUAL),
        },
        Primitive::PartialSumSq {
            slot: s(slots::RMS_PARTIALS),
        },
        Primitive::RowVecMul { operand: s("gamma") },
    ])?;
    let binds = Bindings::new().matrix("z", z).vector("gamma", gamma);
    run_gemm(
        &problem(cfg, "k4_res_partial_rms", x, w, false)?,
        x,
        w,
        &program,
        &binds,
    )
}

fn scaled(
    cfg: &PipelineConfig,
    name: &str,
    a: &Matrix,
    b: &Matrix,
    r: &Vector,
    rest: Vec<Primitive>,
    binds: Bindings,
) -> Result<KernelResult> {
    let mut steps = vec![Primitive::RowScale { operand: s("r") }];
    steps.extend(rest);
    let program = EpilogueProgram::new(steps)?;
    run_gemm(&problem(cfg, name, a, b, false)?, a, b, &program, &binds.vector("r", r))
}

/// Kernel 5: GEMM whose rows are scaled by a precomputed inverse RMS.
pub fn kernel5_row_scale(cfg: &PipelineConfig, a: &Matrix, b: &Matrix, r: &Vector) -> Result<KernelResult> {
    scaled(cfg, "k5_row_scale", a, b, r, Vec::new(), Bindings::new())
}

/// Kernel 6: row scaling then SwiGLU.
pub fn kernel6_rms_swiglu(cfg: &PipelineConfig, a: &Matrix, b: &Matrix, r: &Vector) -> Result<KernelResult> {
    scaled(cfg, "k6_rms_swiglu", a, b, r, vec![Primitive::SwiGlu], Bindings::new())
}

/// Kernel 6 variant that also stores the scaled pre-activation for the
/// backward pass.
pub fn kernel6_rms_swiglu_saving(
    cfg: &PipelineConfig,
    a: &Matrix,
    b: &Matrix,
    r: &Vector,
    slot: &str,
) -> Result<KernelResult> {
    let rest = vec![Primitive::StoreTile { slot: s(slot) }, Primitive::SwiGlu];
    scaled(cfg, "k6_rms_swiglu", a, b, r, rest, Bindings::new())
}

/// Kernel 7: row scaling then RoPE.
pub fn kernel7_rms_rope(
    cfg: &PipelineConfig,
    a: &Matrix,
    b: &Matrix,
    r: &Vector,
    cos: &Matrix,
    sin: &Matrix,
) -> Result<KernelResult> {
    let binds = Bindings::new().matrix("cos", cos).matrix("sin", sin);
    scaled(cfg, "k7_rms_rope", a, b, r, vec![rope_step()], binds)
}

/// Kernel 8: row scaling then target gather and LSE partials.
pub fn kernel8_rms_partial_ce(
    cfg: &PipelineConfig,
    a: &Matrix,
    b: &Matrix,
    r: &Vector,
    labels: &[usize],
) -> Result<KernelResult> {
    scaled(
        cfg,
        "k8_rms_partial_ce",
        a,
        b,
        r,
        ce_steps(),
        Bindings::new().labels("labels", labels),
    )
}

/// Kernel 9: `D = grad·Wᵀ`, then the local RMSNorm backward with
/// `C_norm = h1 ⊙ r`: the main output is `O_in + (D⊙γ − C_norm⊙s)⊙r`, the
/// auxiliary `c_out` is `C_norm ⊙ γ`, and `dgamma_partials` holds column
/// sums of `D ⊙ C_norm`.
#[allow(clippy::too_many_arguments)]
pub fn kernel9_rms_backward(
    cfg: &PipelineConfig,
    grad: &Matrix,
    w: &Matrix,
    h1: &Matrix,
    r: &Vector,
    gamma: &Vector,
    stat: &Vector,
    o_in: Option<&Matrix>,
) -> Result<KernelResult> {
    let program = EpilogueProgram::new(vec![Primitive::RmsNormBackward {
        input: s("h1"),
        inv_rms: s("r"),
        weight: s("gamma"),
        stat: s("s"),
        grad_in: o_in.map(|_| s("o_in")),
        normed_slot: s(slots::NORMED),
        weight_grad_slot: s(slots::WEIGHT_GRAD_PARTIALS),
    }])?;
    let mut binds = Bindings::new()
        .matrix("h1", h1)
        .vector("r", r)
        .vector("gamma", gamma)
        .vector("s", stat);
    if let Some(o) = o_in {
        binds = binds.matrix("o_in", o);
    }
    run_gemm(
        &problem(cfg, "k9_rms_backward", grad, w, true)?,
        grad,
        w,
        &program,
        &binds,
    )
}

/// Kernel 10: `D = grad·Wᵀ`, then the SwiGLU backward against the saved
/// interleaved pre-activation `Z`, emitting `∇Z` and row-blocked partials
/// of `Z ⊙ ∇Z`.
pub fn kernel10_swiglu_backward(cfg: &PipelineConfig, grad: &Matrix, w: &Matrix, z: &Matrix) -> Result<KernelResult> {
    let program = EpilogueProgram::new(vec![
        Primitive::SwiGluBackward { saved: s("z") },
        Primitive::PartialRowDot {
            operand: s("z"),
            slot: s(slots::ROWDOT_PARTIALS),
        },
    ])?;
    let binds = Bindings::new().matrix("z", z);
    run_gemm(
        &problem(cfg, "k10_swiglu_backward", grad, w, true)?,
        grad,
        w,
        &program,
        &binds,
    )
}
