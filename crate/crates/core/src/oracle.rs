//! Naive dense reference implementations and a finite-difference engine.
//!
//! Nothing here calls the engine, the epilogue primitives or the auxiliary
//! reductions. Everything runs in binary64 with plain loops, so these
//! functions can serve as the trusted side of every comparison.

use crate::error::{Error, Result};
use crate::kernels::{LayerGrads, LayerWeights};
use crate::tensor::{Matrix, Precision, Vector};

const X: Precision = Precision::Exact64;

/// `op(A)·op(B)` by triple loop.
pub fn gemm_ref(a: &Matrix, b: &Matrix, trans_a: bool, trans_b: bool) -> Matrix {
    let at = |i: usize, k: usize| if trans_a { a.get(k, i) } else { a.get(i, k) };
    let bt = |k: usize, j: usize| if trans_b { b.get(j, k) } else { b.get(k, j) };
    let (m, kk) = if trans_a { (a.cols(), a.rows()) } else { a.shape() };
    let n = if trans_b { b.rows() } else { b.cols() };
    Matrix::from_fn(m, n, X, |i, j| {
        let mut s = 0.0;
        for k in 0..kk {
            s += at(i, k) * bt(k, j);
        }
        s
    })
}

pub fn add_ref(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), X, |i, j| a.get(i, j) + b.get(i, j))
}

/// Returns `(r·x ⊙ γ, r)` with `r[i] = 1/√(mean_j x[i,j]² + eps)`.
pub fn rmsnorm_ref(x: &Matrix, gamma: &Vector, eps: f64) -> (Matrix, Vector) {
    let d = x.cols();
    let r: Vec<f64> = (0..x.rows())
        .map(|i| {
            let ms = (0..d).map(|j| x.get(i, j) * x.get(i, j)).sum::<f64>() / d as f64;
            1.0 / (ms + eps).sqrt()
        })
        .collect();
    let out = Matrix::from_fn(x.rows(), d, X, |i, j| r[i] * x.get(i, j) * gamma.get(j));
    (out, Vector::from_vec(r, X))
}

/// Backward of [`rmsnorm_ref`] given the output gradient `g`:
/// `∇x = r(g⊙γ − r·x·s)` with `s = (1/d) Σ_j g γ r x`, and
/// `∇γ = Σ_rows g⊙x⊙r`.
pub fn rmsnorm_bwd_ref(g: &Matrix, x: &Matrix, r: &Vector, gamma: &Vector) -> (Matrix, Vector) {
    let (m, d) = x.shape();
    let s: Vec<f64> = (0..m)
        .map(|i| {
            (0..d)
                .map(|j| g.get(i, j) * gamma.get(j) * r.get(i) * x.get(i, j))
                .sum::<f64>()
                / d as f64
        })
        .collect();
    let dx = Matrix::from_fn(m, d, X, |i, j| {
        r.get(i) * (g.get(i, j) * gamma.get(j) - r.get(i) * x.get(i, j) * s[i])
    });
    let dgamma = (0..d)
        .map(|j| (0..m).map(|i| g.get(i, j) * x.get(i, j) * r.get(i)).sum())
        .collect();
    (dx, Vector::from_vec(dgamma, X))
}

/// Pair rotation with per-position tables.
pub fn rope_ref(x: &Matrix, cos: &Matrix, sin: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), X, |i, j| {
        let k = j & !1;
        let (x0, x1) = (x.get(i, k), x.get(i, k + 1));
        if j % 2 == 0 {
            x0 * cos.get(i, j) - x1 * sin.get(i, j)
        } else {
            x0 * sin.get(i, j) + x1 * cos.get(i, j)
        }
    })
}

/// Transpose of the per-pair Jacobian of [`rope_ref`] applied to `g`.
pub fn rope_bwd_ref(g: &Matrix, cos: &Matrix, sin: &Matrix) -> Matrix {
    Matrix::from_fn(g.rows(), g.cols(), X, |i, j| {
        let k = j & !1;
        let (g0, g1) = (g.get(i, k), g.get(i, k + 1));
        if j % 2 == 0 {
            g0 * cos.get(i, k) + g1 * sin.get(i, k + 1)
        } else {
            -g0 * sin.get(i, k) + g1 * cos.get(i, k + 1)
        }
    })
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[:, k] = silu(z[:, 2k]) · z[:, 2k+1]`.
pub fn swiglu_ref(z: &Matrix) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols() / 2, X, |i, k| {
        let g = z.get(i, 2 * k);
        g * sigma(g) * z.get(i, 2 * k + 1)
    })
}

pub fn swiglu_bwd_ref(g: &Matrix, z: &Matrix) -> Matrix {
    Matrix::from_fn(z.rows(), z.cols(), X, |i, j| {
        let k = j / 2;
        let (gate, up) = (z.get(i, 2 * k), z.get(i, 2 * k + 1));
        let sg = sigma(gate);
        if j % 2 == 0 {
            g.get(i, k) * up * (sg * (1.0 + gate * (1.0 - sg)))
        } else {
            g.get(i, k) * gate * sg
        }
    })
}

/// Numerically stable log-sum-exp of a slice.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-row softmax cross-entropy and its mean.
pub fn cross_entropy_ref(logits: &Matrix, labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    let mut losses = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Label {
                row: i,
                label: y,
                classes: logits.cols(),
            });
        }
        losses.push(logsumexp(logits.row(i)) - logits.get(i, y));
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((losses, mean))
}

/// Every intermediate of the canonical operator-sequence layer.
#[derive(Clone, Debug)]
pub struct RefForward {
    pub h1: Matrix,
    pub r1: Vector,
    pub n1: Matrix,
    pub z1: Matrix,
    pub a: Matrix,
    pub h1b: Matrix,
    pub r2: Vector,
    pub n2: Matrix,
    pub y: Matrix,
    pub q: Matrix,
}

/// The layer as a plain operator sequence:
/// `h1 = x·W_o + z`, `Z = rmsnorm(h1, γ1)·W_gu`, `a = swiglu(Z)`,
/// `h1b = a·W_dn + h1`, `q = rope(rmsnorm(h1b, γ2)·W_qkv)`.
pub fn layer_ref_forward(x: &Matrix, z: &Matrix, w: &LayerWeights, cos: &Matrix, sin: &Matrix, eps: f64) -> RefForward {
    let h1 = add_ref(&gemm_ref(x, &w.w_o, false, false), z);
    let (n1, r1) = rmsnorm_ref(&h1, &w.gamma1, eps);
    let z1 = gemm_ref(&n1, &w.w_gu, false, false);
    let a = swiglu_ref(&z1);
    let h1b = add_ref(&gemm_ref(&a, &w.w_dn, false, false), &h1);
    let (n2, r2) = rmsnorm_ref(&h1b, &w.gamma2, eps);
    let y = gemm_ref(&n2, &w.w_qkv, false, false);
    let q = rope_ref(&y, cos, sin);
    RefForward {
        h1,
        r1,
        n1,
        z1,
        a,
        h1b,
        r2,
        n2,
        y,
        q,
    }
}

/// Analytic backward of [`layer_ref_forward`] for upstream gradients on `q`
/// and on the residual output `h1b`.
pub fn layer_ref_backward(
    x: &Matrix,
    w: &LayerWeights,
    fwd: &RefForward,
    cos: &Matrix,
    sin: &Matrix,
    dq: &Matrix,
    dres: &Matrix,
) -> LayerGrads {
    let dy = rope_bwd_ref(dq, cos, sin);
    let dw_qkv = gemm_ref(&fwd.n2, &dy, true, false);
    let dn2 = gemm_ref(&dy, &w.w_qkv, false, true);
    let (dh1b_norm, dgamma2) = rmsnorm_bwd_ref(&dn2, &fwd.h1b, &fwd.r2, &w.gamma2);
    let dh1b = add_ref(&dh1b_norm, dres);

    let dw_dn = gemm_ref(&fwd.a, &dh1b, true, false);
    let da = gemm_ref(&dh1b, &w.w_dn, false, true);
    let dz1 = swiglu_bwd_ref(&da, &fwd.z1);
    let dw_gu = gemm_ref(&fwd.n1, &dz1, true, false);
    let dn1 = gemm_ref(&dz1, &w.w_gu, false, true);
    let (dh1_norm, dgamma1) = rmsnorm_bwd_ref(&dn1, &fwd.h1, &fwd.r1, &w.gamma1);
    let dh1 = add_ref(&dh1_norm, &dh1b);

    LayerGrads {
        dx: gemm_ref(&dh1, &w.w_o, false, true),
        dz: dh1.clone(),
        dw_o: gemm_ref(x, &dh1, true, false),
        dgamma1,
        dw_gu,
        dw_dn,
        dgamma2,
        dw_qkv,
    }
}

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h` for every element.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, point: &Matrix, h: f64) -> Result<Matrix> {
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for idx in 0..point.len() {
        let (i, j) = (idx / point.cols(), idx % point.cols());
        let orig = point.get(i, j);
        probe.set(i, j, orig + h);
        let up = f(&probe);
        probe.set(i, j, orig - h);
        let down = f(&probe);
        probe.set(i, j, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Probe(idx));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Matrix::from_vec(point.rows(), point.cols(), grad, X)
}

/// Gradient tolerance check: `|fd − an| ≤ max(rel·|an|, abs)` element-wise.
pub fn grad_close(analytic: &Matrix, fd: &Matrix, rel: f64, abs: f64) -> bool {
    analytic.shape() == fd.shape()
        && analytic
            .as_slice()
            .iter()
            .zip(fd.as_slice())
            .all(|(a, f)| (a - f).abs() <= (rel * a.abs()).max(abs))
}

/// Largest element-wise error normalized as in [`grad_close`], so a value
/// ≤ 1 means the check passes.
pub fn grad_error(analytic: &Matrix, fd: &Matrix, rel: f64, abs: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(fd.as_slice())
        .map(|(a, f)| (a - f).abs() / (rel * a.abs()).max(abs))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gemm_basics() {
        let mut r = rng(40);
        let b = Matrix::random(3, 3, X, &mut r);
        assert_eq!(gemm_ref(&Matrix::identity(3, X), &b, false, false), b);
        let a = Matrix::from_vec(1, 1, vec![2.0], X).unwrap();
        let c = Matrix::from_vec(1, 1, vec![3.0], X).unwrap();
        assert_eq!(gemm_ref(&a, &c, false, false).as_slice(), &[6.0]);

        let a = Matrix::random(4, 5, X, &mut r);
        let b = Matrix::random(5, 3, X, &mut r);
        let c = Matrix::random(3, 6, X, &mut r);
        let left = gemm_ref(&gemm_ref(&a, &b, false, false), &c, false, false);
        let right = gemm_ref(&a, &gemm_ref(&b, &c, false, false), false, false);
        assert!(rel_error(&left, &right).unwrap() <= 1e-12);
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Matrix::from_vec(1, 4, vec![1.0; 4], X).unwrap();
        let (out, r) = rmsnorm_ref(&ones, &Vector::filled(4, 1.0, X), 0.0);
        assert_eq!(out, ones);
        assert_eq!(r.as_slice(), &[1.0]);

        let x = Matrix::from_vec(1, 2, vec![3.0, 4.0], X).unwrap();
        let (out, r) = rmsnorm_ref(&x, &Vector::filled(2, 1.0, X), 0.0);
        assert!((out.get(0, 0) - 0.848528).abs() < 1e-6);
        assert!((out.get(0, 1) - 1.131371).abs() < 1e-6);
        assert!((r.get(0) - 0.282843).abs() < 1e-6);

        let mut g = rng(41);
        let x = Matrix::random(3, 5, X, &mut g);
        let gamma = Vector::random(5, X, &mut g);
        let (a, _) = rmsnorm_ref(&x, &gamma, 0.0);
        let (b, _) = rmsnorm_ref(&x.scale(3.7), &gamma, 0.0);
        assert!(rel_error(&b, &a).unwrap() <= 1e-15);
    }

    #[test]
    fn rmsnorm_backward_matches_differences() {
        let mut g = rng(42);
        let (m, d, eps) = (3, 5, 1e-3);
        let x = Matrix::random(m, d, X, &mut g);
        let gamma = Vector::random(d, X, &mut g);
        let up = Matrix::random(m, d, X, &mut g);
        let (_, r) = rmsnorm_ref(&x, &gamma, eps);
        let (dx, dgamma) = rmsnorm_bwd_ref(&up, &x, &r, &gamma);

        let loss = |x: &Matrix, gamma: &Vector| {
            let (o, _) = rmsnorm_ref(x, gamma, eps);
            o.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_diff_grad(|p| loss(p, &gamma), &x, 1e-6).unwrap();
        assert!(grad_close(&dx, &fd, 1e-6, 1e-8));
        let gm = gamma.to_column();
        let fdg = finite_diff_grad(|p| loss(&x, &Vector::from_vec(p.as_slice().to_vec(), X)), &gm, 1e-6).unwrap();
        assert!(grad_close(&dgamma.to_column(), &fdg, 1e-6, 1e-8));

        let zero = rmsnorm_bwd_ref(&Matrix::zeros(m, d, X), &x, &r, &gamma);
        assert!(zero.0.as_slice().iter().all(|&v| v == 0.0));

        let (dx0, dg0) = rmsnorm_bwd_ref(&up, &x, &r, &Vector::zeros(d, X));
        assert!(dx0.as_slice().iter().all(|&v| v == 0.0));
        assert!(dg0.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rope_and_swiglu_refs() {
        let mut g = rng(43);
        let x = Matrix::random(2, 6, X, &mut g);
        let ones = Matrix::from_fn(2, 6, X, |_, _| 1.0);
        assert_eq!(rope_ref(&x, &ones, &Matrix::zeros(2, 6, X)), x);

        let z = Matrix::random(2, 6, X, &mut g);
        let up = Matrix::random(2, 3, X, &mut g);
        let an = swiglu_bwd_ref(&up, &z);
        let f = |p: &Matrix| {
            swiglu_ref(p)
                .as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(f, &z, 1e-6).unwrap();
        assert!(grad_close(&an, &fd, 1e-6, 1e-8));
    }

    #[test]
    fn rope_backward_is_the_adjoint() {
        let mut g = rng(44);
        let angles: Vec<f64> = (0..8).map(|_| g.gen_range(-3.0..3.0)).collect();
        let cos = Matrix::from_fn(2, 8, X, |i, j| angles[i * 4 + j / 2].cos());
        let sin = Matrix::from_fn(2, 8, X, |i, j| angles[i * 4 + j / 2].sin());
        let x = Matrix::random(2, 8, X, &mut g);
        let up = Matrix::random(2, 8, X, &mut g);
        let f = |p: &Matrix| {
            rope_ref(p, &cos, &sin)
                .as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
        assert!(grad_close(&rope_bwd_ref(&up, &cos, &sin), &fd, 1e-6, 1e-8));
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Matrix::zeros(3, 16, X);
        let (losses, mean) = cross_entropy_ref(&logits, &[0, 5, 15]).unwrap();
        assert!(losses.iter().all(|l| (l - 16f64.ln()).abs() < 1e-15));
        assert!((mean - 16f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_ref(&logits, &[0, 1, 16]).is_err());
    }

    #[test]
    fn finite_differences() {
        let mut g = rng(45);
        let x = Matrix::random(3, 4, X, &mut g);
        let half_sq = |p: &Matrix| 0.5 * p.as_slice().iter().map(|v| v * v).sum::<f64>();
        let fd = finite_diff_grad(half_sq, &x, 1e-6).unwrap();
        assert!(fd
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .all(|(a, b)| (a - b).abs() <= 1e-9));

        let zero = Matrix::zeros(2, 2, X);
        let silu_sum = |p: &Matrix| p.as_slice().iter().map(|v| v * sigma(*v)).sum::<f64>();
        let fd = finite_diff_grad(silu_sum, &zero, 1e-6).unwrap();
        assert!(fd.as_slice().iter().all(|v| (v - 0.5).abs() <= 1e-9));

        let c = Matrix::random(3, 4, X, &mut g);
        let linear = |p: &Matrix| p.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let fd = finite_diff_grad(linear, &x, 1e-6).unwrap();
        assert!(grad_close(&c, &fd, 1e-8, 1e-9));

        let err = finite_diff_grad(|p| p.get(0, 0).ln(), &zero, 1e-6);
        assert!(matches!(err, Err(Error::Probe(0))));
    }
}
