//! Check suites shared by the acceptance tests and the `verify` command.
//!
//! Each suite compares fused results against the oracles (or against the
//! analytic traffic formulas) and reports one [`Check`] per property: the
//! measured worst-case metric next to the tolerance it is held to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_epilogue, Bindings, GemmProblem, Schedule};
use crate::epilogue::{EpilogueProgram, Primitive};
use crate::error::{Error, Result};
use crate::kernels::canonical::grrg_canonical;
use crate::kernels::{
    grrg_forward, kernel10_swiglu_backward, kernel1_rope, kernel2_swiglu, kernel3_partial_ce, kernel4_res_partial_rms,
    kernel5_row_scale, kernel6_rms_swiglu, kernel7_rms_rope, kernel8_rms_partial_ce, kernel9_rms_backward,
    layer_backward, layer_forward, lm_head_forward, rope_tables, slots, LayerGrads, LayerWeights, PipelineConfig,
};
use crate::numerics::{grrg_trial, summarize};
use crate::oracle::{
    add_ref, cross_entropy_ref, finite_diff_grad, gemm_ref, grad_error, layer_ref_backward, layer_ref_forward,
    logsumexp, rmsnorm_bwd_ref, rmsnorm_ref, rope_bwd_ref, rope_ref, swiglu_bwd_ref, swiglu_ref,
};
use crate::reduce::{combine_lse, cross_entropy_finalize, finalize_rms, finalize_rowdot, reduce_row_partials};
use crate::tensor::{rel_error, rel_error_vec, Matrix, Precision, TileShape, Vector};
use crate::traffic::canonical::{
    canonical_ledger, grrg_ops, layer_backward_ops, layer_forward_ops, lm_head_ops, OpSpec,
};
use crate::traffic::{fused, Direction, FusedParams, TrafficLedger};

/// Relative Frobenius tolerance for binary64 equivalences.
pub const EXACT_TOL: f64 = 1e-12;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Relative tolerance of gradient checks.
pub const FD_REL: f64 = 1e-5;
/// Absolute floor of gradient checks.
pub const FD_ABS: f64 = 1e-8;
const ROPE_BASE: f64 = 10_000.0;
const X: Precision = Precision::Exact64;

/// One verified property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `metric ≤ tolerance`. NaN fails.
    pub fn at_most(name: impl Into<String>, metric: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            metric,
            tolerance,
            pass: metric <= tolerance,
        }
    }

    /// Passes when `metric < bound`.
    pub fn below(name: impl Into<String>, metric: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            metric,
            tolerance: bound,
            pass: metric < bound,
        }
    }
}

/// Sizes and seeds of the randomized suites.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random instances per kernel and pipeline.
    pub instances: usize,
    /// Inclusive range of random GEMM dimensions.
    pub min_dim: usize,
    pub max_dim: usize,
    /// Shapes compared by the tile-invariance suite; random instances draw
    /// from these plus a few ragged shapes.
    pub tile_shapes: Vec<TileShape>,
    pub numerics_trials: usize,
    pub numerics_d: usize,
    pub numerics_tokens: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            min_dim: 4,
            max_dim: 128,
            tile_shapes: vec![shape(4, 4), shape(16, 32), shape(128, 128)],
            numerics_trials: 100,
            numerics_d: 256,
            numerics_tokens: 64,
        }
    }
}

fn shape(m: usize, n: usize) -> TileShape {
    TileShape { tile_m: m, tile_n: n }
}

impl SuiteOptions {
    /// Small sizes for quick runs.
    pub fn toy() -> Self {
        Self {
            instances: 10,
            max_dim: 32,
            numerics_trials: 20,
            numerics_d: 64,
            numerics_tokens: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_dim < 4 || self.min_dim > self.max_dim {
            return Err(Error::Config(format!(
                "dimension range {}..{} must start at 4 or more and be non-empty",
                self.min_dim, self.max_dim
            )));
        }
        if self.instances == 0 || self.tile_shapes.is_empty() {
            return Err(Error::Config("need at least one instance and one tile shape".into()));
        }
        for t in &self.tile_shapes {
            t.validate()?;
            if t.tile_n % 2 == 1 {
                return Err(Error::Config(format!(
                    "tile width {} is odd; paired epilogues need even tile widths",
                    t.tile_n
                )));
            }
        }
        if self.numerics_d == 0 || self.numerics_tokens == 0 {
            return Err(Error::Config("numerics sizes must be nonzero".into()));
        }
        Ok(())
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn dim(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min_dim..=self.max_dim)
    }

    fn even_dim(&self, rng: &mut impl Rng) -> usize {
        let lo = self.min_dim.div_ceil(2);
        2 * rng.gen_range(lo..=(self.max_dim / 2).max(lo))
    }

    /// A config with randomly drawn tiling and scheduling.
    fn config(&self, rng: &mut impl Rng, tokens: usize, d: usize, ffn: usize) -> PipelineConfig {
        let ragged = [shape(7, 10), shape(8, 6), shape(32, 16)];
        let pool: Vec<TileShape> = self.tile_shapes.iter().copied().chain(ragged).collect();
        let tiles = pool[rng.gen_range(0..pool.len())];
        let rtn = [3, 4, 8, 128][rng.gen_range(0..4)];
        PipelineConfig {
            parallel: rng.gen(),
            ..PipelineConfig::toy(tokens, d, ffn).with_tiles(tiles, rtn)
        }
    }
}

fn rand_m(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::random(r, c, X, rng)
}

fn positive(rng: &mut impl Rng, n: usize) -> Vector {
    Vector::from_vec((0..n).map(|_| rng.gen_range(0.5..1.5)).collect(), X)
}

fn labels(rng: &mut impl Rng, m: usize, classes: usize) -> Vec<usize> {
    (0..m).map(|_| rng.gen_range(0..classes)).collect()
}

fn row_scale_ref(r: &Vector, x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), X, |i, j| r.get(i) * x.get(i, j))
}

fn gather_ref(logits: &Matrix, labels: &[usize]) -> Vector {
    Vector::from_vec(labels.iter().enumerate().map(|(i, &l)| logits.get(i, l)).collect(), X)
}

fn lse_ref(logits: &Matrix) -> Vector {
    Vector::from_vec((0..logits.rows()).map(|i| logsumexp(logits.row(i))).collect(), X)
}

fn row_dots(a: &Matrix, b: &Matrix, d: usize) -> Vector {
    Vector::from_vec(
        (0..a.rows())
            .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum::<f64>() / d as f64)
            .collect(),
        X,
    )
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors
        .into_iter()
        .fold(0.0, |w, e| if e.is_nan() || w.is_nan() { f64::NAN } else { w.max(e) })
}

fn grads_error(a: &LayerGrads, b: &LayerGrads) -> Result<f64> {
    let mut errs = Vec::new();
    for ((_, x), (_, y)) in a.named().iter().zip(b.named().iter()) {
        errs.push(rel_error(x, y)?);
    }
    Ok(worst(errs))
}

fn kernel_instance(opts: &SuiteOptions, kernel: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (m, k, n) = (opts.dim(rng), opts.dim(rng), opts.even_dim(rng));
    let cfg = opts.config(rng, m, k, n);
    let a = rand_m(rng, m, k);
    let b = rand_m(rng, k, n);
    let r = positive(rng, m);
    let lab = labels(rng, m, n);
    let ce_errors = |res: &crate::engine::KernelResult, logits: &Matrix| -> Result<f64> {
        let (lse, _) = combine_lse(res.partials(slots::LSE_PARTIALS)?)?;
        Ok(worst([
            rel_error(res.main()?, logits)?,
            rel_error_vec(res.gathered(slots::TARGET_LOGITS)?, &gather_ref(logits, &lab))?,
            rel_error_vec(&lse, &lse_ref(logits))?,
        ]))
    };
    match kernel {
        1 | 7 => {
            let (cos, sin) = rope_tables(m, n, ROPE_BASE, X);
            let (res, pre) = if kernel == 1 {
                (kernel1_rope(&cfg, &a, &b, &cos, &sin)?, gemm_ref(&a, &b, false, false))
            } else {
                (
                    kernel7_rms_rope(&cfg, &a, &b, &r, &cos, &sin)?,
                    row_scale_ref(&r, &gemm_ref(&a, &b, false, false)),
                )
            };
            rel_error(res.main()?, &rope_ref(&pre, &cos, &sin))
        }
        2 => rel_error(
            kernel2_swiglu(&cfg, &a, &b)?.main()?,
            &swiglu_ref(&gemm_ref(&a, &b, false, false)),
        ),
        3 => ce_errors(
            &kernel3_partial_ce(&cfg, &a, &b, &lab)?,
            &gemm_ref(&a, &b, false, false),
        ),
        4 => {
            let z = rand_m(rng, m, n);
            let gamma = positive(rng, n);
            let res = kernel4_res_partial_rms(&cfg, &a, &b, &z, &gamma)?;
            let h1 = add_ref(&gemm_ref(&a, &b, false, false), &z);
            let (_, r_ref) = rmsnorm_ref(&h1, &gamma, cfg.eps);
            let (r_fused, _) = finalize_rms(res.partials(slots::RMS_PARTIALS)?, cfg.eps)?;
            let scaled = Matrix::from_fn(m, n, X, |i, j| h1.get(i, j) * gamma.get(j));
            Ok(worst([
                rel_error(res.main()?, &scaled)?,
                rel_error(res.tensor(slots::RESIDUAL)?, &h1)?,
                rel_error_vec(&r_fused, &r_ref)?,
            ]))
        }
        5 => rel_error(
            kernel5_row_scale(&cfg, &a, &b, &r)?.main()?,
            &row_scale_ref(&r, &gemm_ref(&a, &b, false, false)),
        ),
        6 => rel_error(
            kernel6_rms_swiglu(&cfg, &a, &b, &r)?.main()?,
            &swiglu_ref(&row_scale_ref(&r, &gemm_ref(&a, &b, false, false))),
        ),
        8 => ce_errors(
            &kernel8_rms_partial_ce(&cfg, &a, &b, &r, &lab)?,
            &row_scale_ref(&r, &gemm_ref(&a, &b, false, false)),
        ),
        9 => {
            // grad: m×k, W: n×k consumed transposed, output m×n
            let w = rand_m(rng, n, k);
            let h1 = rand_m(rng, m, n);
            let gamma = positive(rng, n);
            let o_in = rand_m(rng, m, n);
            let (normed, r1) = rmsnorm_ref(&h1, &gamma, cfg.eps);
            let dn = gemm_ref(&a, &w, false, true);
            let s = row_dots(&dn, &normed, n);
            let res = kernel9_rms_backward(&cfg, &a, &w, &h1, &r1, &gamma, &s, Some(&o_in))?;
            let (dx, dgamma) = rmsnorm_bwd_ref(&dn, &h1, &r1, &gamma);
            let (dgamma_fused, _) = reduce_row_partials(res.partials(slots::WEIGHT_GRAD_PARTIALS)?)?;
            Ok(worst([
                rel_error(res.main()?, &add_ref(&dx, &o_in))?,
                rel_error(res.tensor(slots::NORMED)?, &normed)?,
                rel_error_vec(&dgamma_fused, &dgamma)?,
            ]))
        }
        10 => {
            let half = n / 2;
            let w = rand_m(rng, half, k);
            let z = rand_m(rng, m, n);
            let res = kernel10_swiglu_backward(&cfg, &a, &w, &z)?;
            let dz = swiglu_bwd_ref(&gemm_ref(&a, &w, false, true), &z);
            let (s, _) = finalize_rowdot(res.partials(slots::ROWDOT_PARTIALS)?, k)?;
            Ok(worst([
                rel_error(res.main()?, &dz)?,
                rel_error_vec(&s, &row_dots(&z, &dz, k))?,
            ]))
        }
        _ => Err(Error::Config(format!("no kernel {kernel}"))),
    }
}

const KERNEL_NAMES: [&str; 10] = [
    "k1_rope",
    "k2_swiglu",
    "k3_partial_ce",
    "k4_res_partial_rms",
    "k5_row_scale",
    "k6_rms_swiglu",
    "k7_rms_rope",
    "k8_rms_partial_ce",
    "k9_rms_backward",
    "k10_swiglu_backward",
];

/// Every fused kernel against its oracle composition on random shapes,
/// including ones that do not divide the tile.
pub fn kernel_equivalence(opts: &SuiteOptions) -> Result<Vec<Check>> {
    (1..=10)
        .map(|kernel| {
            let mut rng = opts.rng(100 + kernel as u64);
            let errs = (0..opts.instances)
                .map(|_| kernel_instance(opts, kernel, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Check::at_most(
                format!("oracle/{}", KERNEL_NAMES[kernel - 1]),
                worst(errs),
                EXACT_TOL,
            ))
        })
        .collect()
}

/// Inputs and upstream gradients of one layer evaluation.
#[derive(Clone, Debug)]
pub struct LayerProblem {
    pub cfg: PipelineConfig,
    pub x: Matrix,
    pub z: Matrix,
    pub w: LayerWeights,
    pub cos: Matrix,
    pub sin: Matrix,
    pub dq: Matrix,
    pub dres: Matrix,
}

/// Parameters the gradient checks can probe, named as in [`LayerGrads::named`].
pub const GRAD_PARAMS: [&str; 8] = ["dx", "dz", "dw_o", "dgamma1", "dw_gu", "dw_dn", "dgamma2", "dw_qkv"];

impl LayerProblem {
    /// Seeded inputs for `cfg`, with rotary tables at base 10000.
    pub fn random(cfg: PipelineConfig, rng: &mut impl Rng) -> Self {
        let (m, d) = (cfg.tokens, cfg.d);
        let w = LayerWeights::random(&cfg, rng);
        let (cos, sin) = rope_tables(m, 3 * d, ROPE_BASE, X);
        Self {
            x: rand_m(rng, m, d),
            z: rand_m(rng, m, d),
            dq: rand_m(rng, m, 3 * d),
            dres: rand_m(rng, m, d),
            w,
            cos,
            sin,
            cfg,
        }
    }

    fn sampled(opts: &SuiteOptions, rng: &mut impl Rng) -> Self {
        let m = opts.dim(rng);
        // keep 3d and 2·ffn inside the dimension range
        let d = 2 * rng.gen_range(2..=(opts.max_dim / 6).max(2));
        let ffn = rng.gen_range(opts.min_dim..=(opts.max_dim / 2).max(opts.min_dim));
        let cfg = opts.config(rng, m, d, ffn);
        Self::random(cfg, rng)
    }

    fn with_cfg(&self, cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            x: self.x.clone(),
            z: self.z.clone(),
            w: self.w.clone(),
            cos: self.cos.clone(),
            sin: self.sin.clone(),
            dq: self.dq.clone(),
            dres: self.dres.clone(),
        }
    }

    /// `(q, residual, gradients)` through the fused pipelines.
    pub fn fused(&self) -> Result<(Matrix, Matrix, LayerGrads)> {
        let (out, tape) = layer_forward(&self.cfg, &self.x, &self.z, &self.w, &self.cos, &self.sin)?;
        let (grads, _) = layer_backward(&self.cfg, &tape, &self.w, &self.dq, &self.dres)?;
        Ok((out.q, out.residual, grads))
    }

    /// `(q, residual, gradients)` through the oracles.
    pub fn reference(&self) -> (Matrix, Matrix, LayerGrads) {
        let fwd = layer_ref_forward(&self.x, &self.z, &self.w, &self.cos, &self.sin, self.cfg.eps);
        let grads = layer_ref_backward(&self.x, &self.w, &fwd, &self.cos, &self.sin, &self.dq, &self.dres);
        (fwd.q, fwd.h1b, grads)
    }

    /// `Σ ∇q⊙q + Σ ∇res⊙h1b` through the oracle layer.
    pub fn loss(&self, x: &Matrix, z: &Matrix, w: &LayerWeights) -> f64 {
        let fwd = layer_ref_forward(x, z, w, &self.cos, &self.sin, self.cfg.eps);
        let dot = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum::<f64>();
        dot(&self.dq, &fwd.q) + dot(&self.dres, &fwd.h1b)
    }
}

struct HeadCase {
    cfg: PipelineConfig,
    x: Matrix,
    w0: Matrix,
    z: Matrix,
    gamma: Vector,
    w1: Matrix,
    labels: Vec<usize>,
}

impl HeadCase {
    fn random(opts: &SuiteOptions, rng: &mut impl Rng) -> Self {
        let (m, k, d, n) = (opts.dim(rng), opts.dim(rng), opts.dim(rng), opts.dim(rng));
        let mut cfg = opts.config(rng, m, d, 2 * d);
        cfg.vocab = n;
        Self::new(cfg, k, rng)
    }

    fn new(cfg: PipelineConfig, k: usize, rng: &mut impl Rng) -> Self {
        let (m, d, n) = (cfg.tokens, cfg.d, cfg.vocab);
        Self {
            x: rand_m(rng, m, k),
            w0: rand_m(rng, k, d),
            z: rand_m(rng, m, d),
            gamma: positive(rng, d),
            w1: rand_m(rng, d, n),
            labels: labels(rng, m, n),
            cfg,
        }
    }

    fn with_cfg(&self, cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            x: self.x.clone(),
            w0: self.w0.clone(),
            z: self.z.clone(),
            gamma: self.gamma.clone(),
            w1: self.w1.clone(),
            labels: self.labels.clone(),
        }
    }

    fn normed_ref(&self) -> Matrix {
        let h1 = add_ref(&gemm_ref(&self.x, &self.w0, false, false), &self.z);
        rmsnorm_ref(&h1, &self.gamma, self.cfg.eps).0
    }

    fn grrg(&self) -> Result<Matrix> {
        Ok(grrg_forward(&self.cfg, &self.x, &self.w0, &self.z, &self.gamma, &self.w1)?.y)
    }

    fn lm_head(&self) -> Result<(Matrix, Vector)> {
        let out = lm_head_forward(
            &self.cfg,
            &self.x,
            &self.w0,
            &self.z,
            &self.gamma,
            &self.w1,
            &self.labels,
        )?;
        Ok((out.logits, out.losses))
    }
}

/// GRRG, the layer forward and backward, and the LM head against their
/// oracle compositions.
pub fn pipeline_equivalence(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = opts.rng(200);
    let (mut grrg, mut head, mut fwd, mut bwd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..opts.instances {
        let case = HeadCase::random(opts, &mut rng);
        let normed = case.normed_ref();
        let y_ref = gemm_ref(&normed, &case.w1, false, false);
        grrg.push(rel_error(&case.grrg()?, &y_ref)?);
        let (logits, losses) = case.lm_head()?;
        let (loss_ref, _) = cross_entropy_ref(&y_ref, &case.labels)?;
        head.push(worst([
            rel_error(&logits, &y_ref)?,
            rel_error_vec(&losses, &Vector::from_vec(loss_ref, X))?,
        ]));

        let layer = LayerProblem::sampled(opts, &mut rng);
        let (q, res, grads) = layer.fused()?;
        let (q_ref, res_ref, grads_ref) = layer.reference();
        fwd.push(worst([rel_error(&q, &q_ref)?, rel_error(&res, &res_ref)?]));
        bwd.push(grads_error(&grads, &grads_ref)?);
    }
    Ok(vec![
        Check::at_most("oracle/grrg", worst(grrg), EXACT_TOL),
        Check::at_most("oracle/layer_backward", worst(bwd), EXACT_TOL),
        Check::at_most("oracle/layer_forward", worst(fwd), EXACT_TOL),
        Check::at_most("oracle/lm_head", worst(head), EXACT_TOL),
    ])
}

/// Fused GRRG (inverse RMS applied after the second GEMM) against the same
/// block evaluated as separate operators.
pub fn commutation(opts: &SuiteOptions) -> Result<Check> {
    let mut rng = opts.rng(300);
    let mut errs = Vec::new();
    for _ in 0..opts.instances {
        let c = HeadCase::random(opts, &mut rng);
        let (canon, _) = grrg_canonical(&c.cfg, &c.x, &c.w0, &c.z, &c.gamma, &c.w1)?;
        errs.push(rel_error(&c.grrg()?, &canon)?);
    }
    Ok(Check::at_most("commutation/grrg", worst(errs), EXACT_TOL))
}

/// `(1/d)Σ ∇h⊙h` against the fused `(1/d)Σ ∇q⊙q`, where `y = h·W` and
/// `q = rope(y)`, computed by the engine's rowdot partials.
pub fn statistic_relocation(opts: &SuiteOptions) -> Result<Check> {
    let mut rng = opts.rng(400);
    let mut errs = Vec::new();
    for _ in 0..opts.instances {
        let (m, d, n) = (opts.dim(&mut rng), opts.dim(&mut rng), opts.even_dim(&mut rng));
        let cfg = opts.config(&mut rng, m, d, n);
        let h = rand_m(&mut rng, m, d);
        let w = rand_m(&mut rng, d, n);
        let dq = rand_m(&mut rng, m, n);
        let (cos, sin) = rope_tables(m, n, ROPE_BASE, X);
        let y = gemm_ref(&h, &w, false, false);
        let q = rope_ref(&y, &cos, &sin);
        let dh = gemm_ref(&rope_bwd_ref(&dq, &cos, &sin), &w, false, true);
        let expected = row_dots(&dh, &h, d);

        let program = EpilogueProgram::new(vec![Primitive::PartialRowDot {
            operand: "q".into(),
            slot: slots::ROWDOT_PARTIALS.into(),
        }])?
        .discard_main();
        let problem = cfg.problem("rowdot", m, n, 0);
        let res = run_epilogue(&problem, &dq, &program, &Bindings::new().matrix("q", &q))?;
        let (s, _) = finalize_rowdot(res.partials(slots::ROWDOT_PARTIALS)?, d)?;
        errs.push(rel_error_vec(&s, &expected)?);
    }
    Ok(Check::at_most("relocation/rowdot", worst(errs), EXACT_TOL))
}

impl LayerProblem {
    /// Central differences of [`Self::loss`] with respect to one parameter.
    pub fn finite_diff(&self, param: &str) -> Result<Matrix> {
        let row = |v: &Vector| Matrix::from_vec(1, v.len(), v.as_slice().to_vec(), X).expect("length matches");
        let unrow = |m: &Matrix| Vector::from_vec(m.as_slice().to_vec(), X);
        let (x, z, w) = (&self.x, &self.z, &self.w);
        let with = |f: &dyn Fn(&mut LayerWeights)| {
            let mut w = w.clone();
            f(&mut w);
            w
        };
        match param {
            "dx" => finite_diff_grad(|p| self.loss(p, z, w), x, FD_STEP),
            "dz" => finite_diff_grad(|p| self.loss(x, p, w), z, FD_STEP),
            "dw_o" => finite_diff_grad(|p| self.loss(x, z, &with(&|w| w.w_o = p.clone())), &w.w_o, FD_STEP),
            "dgamma1" => finite_diff_grad(
                |p| self.loss(x, z, &with(&|w| w.gamma1 = unrow(p))),
                &row(&w.gamma1),
                FD_STEP,
            ),
            "dw_gu" => finite_diff_grad(|p| self.loss(x, z, &with(&|w| w.w_gu = p.clone())), &w.w_gu, FD_STEP),
            "dw_dn" => finite_diff_grad(|p| self.loss(x, z, &with(&|w| w.w_dn = p.clone())), &w.w_dn, FD_STEP),
            "dgamma2" => finite_diff_grad(
                |p| self.loss(x, z, &with(&|w| w.gamma2 = unrow(p))),
                &row(&w.gamma2),
                FD_STEP,
            ),
            "dw_qkv" => finite_diff_grad(|p| self.loss(x, z, &with(&|w| w.w_qkv = p.clone())), &w.w_qkv, FD_STEP),
            other => Err(Error::Config(format!("no gradient named `{other}`"))),
        }
    }

    /// Bound on the rounding error of a central difference of [`Self::loss`]:
    /// `8·ε·Σ|terms| / h`. Grows with the problem size, unlike [`FD_ABS`].
    pub fn roundoff_floor(&self) -> f64 {
        let fwd = layer_ref_forward(&self.x, &self.z, &self.w, &self.cos, &self.sin, self.cfg.eps);
        let mag = |a: &Matrix, b: &Matrix| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(p, q)| (p * q).abs())
                .sum::<f64>()
        };
        8.0 * f64::EPSILON * (mag(&self.dq, &fwd.q) + mag(&self.dres, &fwd.h1b)) / FD_STEP
    }

    /// The fused backward against the oracle backward, and against central
    /// differences for each parameter in `params` with the [`FD_ABS`] floor.
    pub fn gradient_checks(&self, params: &[&str]) -> Result<Vec<Check>> {
        self.gradient_checks_with_floor(params, FD_ABS)
    }

    /// [`Self::gradient_checks`] with a custom absolute floor.
    pub fn gradient_checks_with_floor(&self, params: &[&str], abs_floor: f64) -> Result<Vec<Check>> {
        let (_, _, grads) = self.fused()?;
        let (_, _, grads_ref) = self.reference();
        let mut checks = vec![Check::at_most(
            "gradient/oracle",
            grads_error(&grads, &grads_ref)?,
            EXACT_TOL,
        )];
        let named = grads.named();
        for &param in params {
            let numeric = self.finite_diff(param)?;
            let (_, analytic) = named.iter().find(|(n, _)| *n == param).expect("checked by finite_diff");
            let metric = FD_REL * grad_error(analytic, &numeric, FD_REL, abs_floor);
            checks.push(Check::at_most(format!("gradient/fd/{param}"), metric, FD_REL));
        }
        Ok(checks)
    }
}

/// The fused layer backward against central differences of the oracle
/// layer, and against the analytic oracle backward.
pub fn gradients(seed: u64, tokens: usize, d: usize, ffn: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    LayerProblem::random(PipelineConfig::toy(tokens, d, ffn), &mut rng).gradient_checks(&GRAD_PARAMS)
}

/// Every pipeline output under each tile shape against the first shape.
pub fn tile_invariance(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = opts.rng(500);
    let base = PipelineConfig::toy(37, 22, 30);
    let layer = LayerProblem::random(base.clone(), &mut rng);
    let head = HeadCase::new(
        PipelineConfig {
            vocab: 150,
            ..base.clone()
        },
        19,
        &mut rng,
    );

    let mut runs = Vec::new();
    for &t in &opts.tile_shapes {
        let cfg = base.clone().with_tiles(t, base.reduction_tile_n);
        let (q, res, grads) = layer.with_cfg(cfg.clone()).fused()?;
        let head = head.with_cfg(PipelineConfig { vocab: 150, ..cfg });
        let y = head.grrg()?;
        let (logits, losses) = head.lm_head()?;
        runs.push((y, q, res, grads, logits, losses));
    }
    let (y0, q0, res0, g0, l0, loss0) = &runs[0];
    let (mut grrg, mut fwd, mut bwd, mut lm) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (y, q, res, g, l, loss) in &runs[1..] {
        grrg.push(rel_error(y, y0)?);
        fwd.push(worst([rel_error(q, q0)?, rel_error(res, res0)?]));
        bwd.push(grads_error(g, g0)?);
        lm.push(worst([rel_error(l, l0)?, rel_error_vec(loss, loss0)?]));
    }
    Ok(vec![
        Check::at_most("tile_invariance/grrg", worst(grrg), EXACT_TOL),
        Check::at_most("tile_invariance/layer_backward", worst(bwd), EXACT_TOL),
        Check::at_most("tile_invariance/layer_forward", worst(fwd), EXACT_TOL),
        Check::at_most("tile_invariance/lm_head", worst(lm), EXACT_TOL),
    ])
}

fn ce_program() -> Result<EpilogueProgram> {
    Ok(EpilogueProgram::new(vec![
        Primitive::TargetGather {
            labels: "labels".into(),
            slot: slots::TARGET_LOGITS.into(),
        },
        Primitive::OnlineLse {
            slot: slots::LSE_PARTIALS.into(),
        },
    ])?
    .discard_main())
}

/// Online LSE partials combined across column blocks against a direct
/// log-sum-exp, and the uniform-logit loss at a 32768-way vocabulary.
pub fn lse(opts: &SuiteOptions) -> Result<Vec<Check>> {
    let mut rng = opts.rng(600);
    let mut errs = Vec::new();
    for _ in 0..opts.instances {
        let (m, v) = (opts.dim(&mut rng), rng.gen_range(opts.min_dim..=4 * opts.max_dim));
        let scale = rng.gen_range(1.0..50.0);
        let logits = rand_m(&mut rng, m, v).scale(scale);
        let lab = labels(&mut rng, m, v);
        let tiles = shape(rng.gen_range(1..=16), rng.gen_range(1..=v));
        let problem = GemmProblem::new(m, v, 0, X)
            .with_tiles(tiles, rng.gen_range(1..=v))
            .with_schedule(Schedule::Permuted(rng.gen()));
        let res = run_epilogue(
            &problem,
            &logits,
            &ce_program()?,
            &Bindings::new().labels("labels", &lab),
        )?;
        let (lse, _) = combine_lse(res.partials(slots::LSE_PARTIALS)?)?;
        errs.push(worst([
            rel_error_vec(&lse, &lse_ref(&logits))?,
            rel_error_vec(res.gathered(slots::TARGET_LOGITS)?, &gather_ref(&logits, &lab))?,
        ]));
    }

    let (m, v) = (4, 32768);
    let zeros = Matrix::zeros(m, v, X);
    let lab = labels(&mut rng, m, v);
    let problem = GemmProblem::new(m, v, 0, X);
    let res = run_epilogue(
        &problem,
        &zeros,
        &ce_program()?,
        &Bindings::new().labels("labels", &lab),
    )?;
    let (lse, _) = combine_lse(res.partials(slots::LSE_PARTIALS)?)?;
    let (_, mean, _) = cross_entropy_finalize(res.gathered(slots::TARGET_LOGITS)?, &lse)?;
    Ok(vec![
        Check::at_most("lse/combine", worst(errs), EXACT_TOL),
        Check::at_most("lse/uniform_32768", (mean - (v as f64).ln()).abs(), EXACT_TOL),
    ])
}

/// Grid of hidden widths at which the traffic claim is evaluated.
pub const TRAFFIC_GRID_D: [usize; 3] = [2048, 4096, 8192];
pub const TRAFFIC_TOKENS: usize = 16384;
pub const TRAFFIC_VOCAB: usize = 32768;

/// Fused and canonical ledgers of every pipeline at one shape.
pub fn pipeline_ledgers(
    fp: &FusedParams,
    m: usize,
    d: usize,
    ffn: usize,
    vocab: usize,
) -> Result<Vec<(&'static str, TrafficLedger, TrafficLedger)>> {
    let p = fp.precision;
    Ok(vec![
        (
            "grrg",
            fused::grrg(fp, m, d, d, d),
            canonical_ledger(&grrg_ops(m, d, d, d), p)?,
        ),
        (
            "layer_forward",
            fused::layer_forward(fp, m, d, ffn),
            canonical_ledger(&layer_forward_ops(m, d, ffn), p)?,
        ),
        (
            "layer_backward",
            fused::layer_backward(fp, m, d, ffn),
            canonical_ledger(&layer_backward_ops(m, d, ffn), p)?,
        ),
        (
            "lm_head",
            fused::lm_head(fp, m, d, d, vocab),
            canonical_ledger(&lm_head_ops(m, d, d, vocab), p)?,
        ),
    ])
}

fn engine_ledgers_match(precision: Precision) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let cfg = PipelineConfig {
        precision,
        ..PipelineConfig::toy(21, 10, 14).with_tiles(shape(8, 6), 4)
    };
    let fp = FusedParams::from(&cfg);
    let (m, d, ffn) = (cfg.tokens, cfg.d, cfg.ffn_width());
    let w = LayerWeights::random(&cfg, &mut rng).to_precision(precision);
    let (cos, sin) = rope_tables(m, 3 * d, ROPE_BASE, precision);
    let x = Matrix::random(m, d, precision, &mut rng);
    let z = Matrix::random(m, d, precision, &mut rng);
    let (out, tape) = layer_forward(&cfg, &x, &z, &w, &cos, &sin)?;
    let dq = Matrix::random(m, 3 * d, precision, &mut rng);
    let (_, back) = layer_backward(&cfg, &tape, &w, &dq, &z)?;
    let lab = labels(&mut rng, m, 50);
    let w_vocab = Matrix::random(d, 50, precision, &mut rng);
    let grrg = grrg_forward(&cfg, &x, &w.w_o, &z, &w.gamma1, &w.w_o)?.ledger;
    let head = lm_head_forward(&cfg, &x, &w.w_o, &z, &w.gamma1, &w_vocab, &lab)?.ledger;
    let pairs = [
        (out.ledger, fused::layer_forward(&fp, m, d, ffn)),
        (back, fused::layer_backward(&fp, m, d, ffn)),
        (grrg, fused::grrg(&fp, m, d, d, d)),
        (head, fused::lm_head(&fp, m, d, d, 50)),
    ];
    Ok(pairs
        .iter()
        .map(|(measured, analytic)| {
            if measured.launches() != analytic.launches() {
                return measured.launches().max(analytic.launches());
            }
            measured
                .records()
                .iter()
                .zip(analytic.records())
                .filter(|(a, b)| !a.same_traffic(b))
                .count()
        })
        .sum())
}

/// The analytic traffic figures at the large shapes, the fused < canonical
/// ordering over the shape grid, and agreement between engine-measured and
/// closed-form ledgers.
pub fn traffic() -> Result<Vec<Check>> {
    let (m, d) = (TRAFFIC_TOKENS, 4096);
    let fp = FusedParams::new(Precision::SimBF16, TileShape::default(), 128);
    let k4 = fused::kernel4("k4_res_partial_rms", &fp, m, d, d);
    let partial_expected = (m * d.div_ceil(128) * 4) as f64;
    let partial = k4.bytes(slots::RMS_PARTIALS, Direction::Write) as f64;
    let slot_read = fp.partial_slot_bytes(m, d, 1) as f64;

    let norm = canonical_ledger(&[OpSpec::new("rmsnorm_two_pass", m, d)], Precision::SimBF16)?;
    let rec = &norm.records()[0];
    let activation = (rec.bytes("x", Direction::Read) + rec.bytes("out", Direction::Write)) as f64;
    let activation_expected = (3 * m * d * 2) as f64;

    let mut worst_ratio: f64 = 0.0;
    for d in TRAFFIC_GRID_D {
        let ffn = crate::kernels::derived_ffn(d);
        for (_, f, c) in pipeline_ledgers(&fp, m, d, ffn, TRAFFIC_VOCAB)? {
            worst_ratio = worst_ratio.max(f.total_bytes() as f64 / c.total_bytes() as f64);
        }
    }
    let mismatches = engine_ledgers_match(Precision::SimBF16)? + engine_ledgers_match(Precision::Exact64)?;
    Ok(vec![
        Check::at_most(
            "traffic/canonical_rmsnorm_activation_bytes",
            (activation - activation_expected).abs(),
            0.0,
        ),
        Check::at_most("traffic/engine_matches_analytic", mismatches as f64, 0.0),
        Check::below("traffic/fused_over_canonical", worst_ratio, 1.0),
        Check::at_most(
            "traffic/grrg_partial_read_bytes",
            (slot_read - partial_expected).abs(),
            0.0,
        ),
        Check::at_most(
            "traffic/grrg_partial_write_bytes",
            (partial - partial_expected).abs(),
            0.0,
        ),
    ])
}

/// Median fused/canonical error ratio of reduced-precision GRRG trials.
pub fn numerics(opts: &SuiteOptions) -> Result<Check> {
    let trials = (0..opts.numerics_trials as u64)
        .into_par_iter()
        .map(|t| {
            grrg_trial(
                opts.seed.wrapping_add(t),
                opts.numerics_tokens,
                opts.numerics_d,
                Precision::SimBF16,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let median = summarize(&trials).median_ratio.unwrap_or(f64::NAN);
    Ok(Check::at_most("numerics/median_error_ratio", median, 1.0))
}

/// Every suite, sorted by check name.
pub fn run_all(opts: &SuiteOptions) -> Result<Vec<Check>> {
    opts.validate()?;
    let mut checks = kernel_equivalence(opts)?;
    checks.extend(pipeline_equivalence(opts)?);
    checks.push(commutation(opts)?);
    checks.push(statistic_relocation(opts)?);
    checks.extend(gradients(opts.seed, 4, 8, 16)?);
    checks.extend(tile_invariance(opts)?);
    checks.extend(lse(opts)?);
    checks.extend(traffic()?);
    checks.push(numerics(opts)?);
    checks.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_semantics() {
        assert!(Check::at_most("a", 1.0, 1.0).pass);
        assert!(!Check::at_most("a", f64::NAN, 1.0).pass);
        assert!(!Check::below("a", 1.0, 1.0).pass);
    }

    #[test]
    fn option_validation() {
        assert!(SuiteOptions::default().validate().is_ok());
        let odd = SuiteOptions {
            tile_shapes: vec![shape(4, 5)],
            ..SuiteOptions::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let empty = SuiteOptions {
            min_dim: 10,
            max_dim: 8,
            ..SuiteOptions::default()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn worst_propagates_nan() {
        assert!(worst([1.0, f64::NAN, 2.0]).is_nan());
        assert_eq!(worst([1.0, 3.0]), 3.0);
    }
}
