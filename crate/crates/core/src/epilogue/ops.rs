//! Tile-pure math behind each epilogue primitive.
//!
//! Every function here sees only the running tile and operand slices taken
//! at the same tile coordinate. The engine is responsible for slicing
//! operands and for rounding results to register precision.

use crate::error::{Error, Result};
use crate::tensor::Precision;

/// A small owned row-major buffer: the running accumulator tile, or an
/// operand slice loaded for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tile {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Tile, what: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{what} tile is {}x{}, running tile is {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn round_to(&mut self, precision: Precision) {
        if !precision.is_exact() {
            for v in &mut self.data {
                *v = precision.quantize(*v);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn residual_add(tile: &mut Tile, c: &Tile) -> Result<()> {
    tile.check_same_shape(c, "residual")?;
    for (t, &v) in tile.data.iter_mut().zip(&c.data) {
        *t += v;
    }
    Ok(())
}

/// Scales column `j` by `gamma[j]`.
pub fn rowvec_mul(tile: &mut Tile, gamma: &[f64]) -> Result<()> {
    if gamma.len() != tile.cols {
        return Err(Error::Dimension(format!(
            "row vector slice has {} entries for a {}-wide tile",
            gamma.len(),
            tile.cols
        )));
    }
    for row in tile.data.chunks_exact_mut(tile.cols) {
        for (t, &g) in row.iter_mut().zip(gamma) {
            *t *= g;
        }
    }
    Ok(())
}

/// Scales row `i` by `r[i]`.
pub fn row_scale(tile: &mut Tile, r: &[f64]) -> Result<()> {
    if r.len() != tile.rows {
        return Err(Error::Dimension(format!(
            "column vector slice has {} entries for a {}-row tile",
            r.len(),
            tile.rows
        )));
    }
    let cols = tile.cols;
    for (row, &s) in tile.data.chunks_exact_mut(cols).zip(r) {
        for t in row {
            *t *= s;
        }
    }
    Ok(())
}

/// Rotates adjacent pairs `(x0, x1)` at columns `(2k, 2k+1)`:
/// `y0 = x0·cos[2k] − x1·sin[2k]`, `y1 = x0·sin[2k+1] + x1·cos[2k+1]`.
/// Tables are full-shape, with each lane reading its own position.
pub fn rope(tile: &mut Tile, cos: &Tile, sin: &Tile) -> Result<()> {
    check_pairs(tile)?;
    tile.check_same_shape(cos, "cos table")?;
    tile.check_same_shape(sin, "sin table")?;
    for i in 0..tile.rows {
        for k in (0..tile.cols).step_by(2) {
            let (x0, x1) = (tile.get(i, k), tile.get(i, k + 1));
            tile.set(i, k, x0 * cos.get(i, k) - x1 * sin.get(i, k));
            tile.set(i, k + 1, x0 * sin.get(i, k + 1) + x1 * cos.get(i, k + 1));
        }
    }
    Ok(())
}

/// Transposed Jacobian of [`rope`]: maps output gradients to input gradients.
pub fn rope_backward(tile: &mut Tile, cos: &Tile, sin: &Tile) -> Result<()> {
    check_pairs(tile)?;
    tile.check_same_shape(cos, "cos table")?;
    tile.check_same_shape(sin, "sin table")?;
    for i in 0..tile.rows {
        for k in (0..tile.cols).step_by(2) {
            let (g0, g1) = (tile.get(i, k), tile.get(i, k + 1));
            tile.set(i, k, g0 * cos.get(i, k) + g1 * sin.get(i, k + 1));
            tile.set(i, k + 1, -g0 * sin.get(i, k) + g1 * cos.get(i, k + 1));
        }
    }
    Ok(())
}

/// `out[:, k] = silu(D[:, 2k]) · D[:, 2k+1]` (even lanes gate, odd lanes up).
pub fn swiglu(tile: &Tile) -> Result<Tile> {
    check_pairs(tile)?;
    let half = tile.cols / 2;
    Ok(Tile::from_fn(tile.rows, half, |i, k| {
        silu(tile.get(i, 2 * k)) * tile.get(i, 2 * k + 1)
    }))
}

/// Gradient of [`swiglu`] with respect to its interleaved input `z`, given
/// the output gradient `grad`. The result is twice as wide as `grad`.
pub fn swiglu_backward(grad: &Tile, z: &Tile) -> Result<Tile> {
    check_pairs(z)?;
    if z.rows != grad.rows || z.cols != 2 * grad.cols {
        return Err(Error::Dimension(format!(
            "saved pre-activation tile is {}x{}, expected {}x{}",
            z.rows,
            z.cols,
            grad.rows,
            2 * grad.cols
        )));
    }
    let mut out = Tile::zeros(z.rows, z.cols);
    for i in 0..grad.rows {
        for k in 0..grad.cols {
            let d = grad.get(i, k);
            let (g, u) = (z.get(i, 2 * k), z.get(i, 2 * k + 1));
            let sg = sigmoid(g);
            let sl = g * sg;
            out.set(i, 2 * k, d * u * (sg + sl * (1.0 - sg)));
            out.set(i, 2 * k + 1, d * sl);
        }
    }
    Ok(out)
}

fn check_pairs(tile: &Tile) -> Result<()> {
    if !tile.cols.is_multiple_of(2) {
        return Err(Error::Pairing(tile.cols));
    }
    Ok(())
}

/// Row-blocked partial reduction: for each row and each `block`-wide column
/// block, the sum of `term(i, j)` over the block, plus the element count.
/// Output layout is `rows × ceil(cols / block)`.
fn row_blocked(
    tile: &Tile,
    block: usize,
    acc: Precision,
    mut term: impl FnMut(usize, usize) -> f64,
) -> (Vec<f64>, Vec<usize>) {
    let nb = tile.cols.div_ceil(block);
    let mut sums = vec![0.0; tile.rows * nb];
    let mut counts = vec![0; tile.rows * nb];
    for i in 0..tile.rows {
        for b in 0..nb {
            let lo = b * block;
            let hi = (lo + block).min(tile.cols);
            let mut s = 0.0;
            for j in lo..hi {
                s = acc.quantize(s + term(i, j));
            }
            sums[i * nb + b] = s;
            counts[i * nb + b] = hi - lo;
        }
    }
    (sums, counts)
}

/// Per-(row, block) sum of squares.
pub fn partial_sumsq(tile: &Tile, block: usize, acc: Precision) -> (Vec<f64>, Vec<usize>) {
    row_blocked(tile, block, acc, |i, j| {
        let v = tile.get(i, j);
        v * v
    })
}

/// Per-(row, block) sum of `tile ⊙ x`.
pub fn partial_rowdot(tile: &Tile, x: &Tile, block: usize, acc: Precision) -> Result<(Vec<f64>, Vec<usize>)> {
    tile.check_same_shape(x, "row-dot operand")?;
    Ok(row_blocked(tile, block, acc, |i, j| tile.get(i, j) * x.get(i, j)))
}

/// Column sums over the tile's rows.
pub fn partial_colsum(tile: &Tile, acc: Precision) -> Vec<f64> {
    let mut sums = vec![0.0; tile.cols];
    for row in tile.data.chunks_exact(tile.cols) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = acc.quantize(*s + v);
        }
    }
    sums
}

/// Running `(max, sum-exp)` pair for online log-sum-exp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LseState {
    pub max: f64,
    pub sum: f64,
}

impl LseState {
    pub const EMPTY: LseState = LseState {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    /// Streams one value in with the rescaling update
    /// `m' = max(m, v)`, `s' = s·e^(m−m') + e^(v−m')`.
    pub fn push(self, v: f64) -> LseState {
        if v == f64::NEG_INFINITY {
            return self;
        }
        let max = self.max.max(v);
        LseState {
            max,
            sum: self.sum * (self.max - max).exp() + (v - max).exp(),
        }
    }

    /// Combines two partial states.
    pub fn merge(self, other: LseState) -> LseState {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        let max = self.max.max(other.max);
        LseState {
            max,
            sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp(),
        }
    }

    pub fn lse(self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Streaming `(max, sum-exp)` per row and `block`-wide column block.
pub fn online_lse(tile: &Tile, block: usize) -> (Vec<LseState>, Vec<usize>) {
    let nb = tile.cols.div_ceil(block);
    let mut states = vec![LseState::EMPTY; tile.rows * nb];
    let mut counts = vec![0; tile.rows * nb];
    for i in 0..tile.rows {
        for b in 0..nb {
            let lo = b * block;
            let hi = (lo + block).min(tile.cols);
            states[i * nb + b] = tile.row(i)[lo..hi].iter().fold(LseState::EMPTY, |s, &v| s.push(v));
            counts[i * nb + b] = hi - lo;
        }
    }
    (states, counts)
}

/// For each row whose label falls inside `[col0, col0 + cols)`, the tile
/// value at that label.
pub fn target_gather(tile: &Tile, labels: &[usize], col0: usize) -> Result<Vec<(usize, f64)>> {
    if labels.len() != tile.rows {
        return Err(Error::Dimension(format!(
            "{} labels for a {}-row tile",
            labels.len(),
            tile.rows
        )));
    }
    Ok(labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= col0 && l < col0 + tile.cols)
        .map(|(i, &l)| (i, tile.get(i, l - col0)))
        .collect())
}

/// Outputs of [`rmsnorm_backward_local`].
#[derive(Clone, Debug, PartialEq)]
pub struct RmsBackwardTile {
    /// `O_in + (D⊙γ − C_norm⊙s)⊙r`.
    pub grad_input: Tile,
    /// `C_norm ⊙ γ`, the normalized activation the weight-gradient GEMM needs.
    pub normed: Tile,
    /// Column sums of `D ⊙ C_norm` over the tile's rows.
    pub weight_grad: Vec<f64>,
}

/// Local part of RMSNorm backward, with `C_norm = C ⊙ r`.
///
/// `d` is the gradient of the normalized output, `c` the saved RMSNorm
/// input, `s` the row statistic already divided by the hidden width.
#[allow(clippy::needless_range_loop)]
pub fn rmsnorm_backward_local(
    d: &Tile,
    c: &Tile,
    r: &[f64],
    gamma: &[f64],
    s: &[f64],
    o_in: Option<&Tile>,
    acc: Precision,
) -> Result<RmsBackwardTile> {
    d.check_same_shape(c, "RMSNorm input")?;
    if let Some(o) = o_in {
        d.check_same_shape(o, "incoming gradient")?;
    }
    if r.len() != d.rows || s.len() != d.rows || gamma.len() != d.cols {
        return Err(Error::Dimension(format!(
            "RMSNorm backward vectors r={}, s={}, gamma={} for a {}x{} tile",
            r.len(),
            s.len(),
            gamma.len(),
            d.rows,
            d.cols
        )));
    }
    let mut grad_input = Tile::zeros(d.rows, d.cols);
    let mut normed = Tile::zeros(d.rows, d.cols);
    let mut prod = Tile::zeros(d.rows, d.cols);
    for i in 0..d.rows {
        for j in 0..d.cols {
            let dv = d.get(i, j);
            let cn = c.get(i, j) * r[i];
            let base = o_in.map_or(0.0, |o| o.get(i, j));
            grad_input.set(i, j, base + (dv * gamma[j] - cn * s[i]) * r[i]);
            normed.set(i, j, cn * gamma[j]);
            prod.set(i, j, dv * cn);
        }
    }
    let weight_grad = partial_colsum(&prod, acc);
    Ok(RmsBackwardTile {
        grad_input,
        normed,
        weight_grad,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EXACT: Precision = Precision::Exact64;

    fn random_tile(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tile {
        Tile::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn residual_add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_tile(&mut rng, 4, 4);

        let mut same = t.clone();
        residual_add(&mut same, &Tile::zeros(4, 4)).unwrap();
        assert_eq!(same, t);

        let neg = Tile::new(4, 4, t.data.iter().map(|v| -v).collect());
        let mut zero = t.clone();
        residual_add(&mut zero, &neg).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));

        let c = random_tile(&mut rng, 4, 4);
        let mut sum = t.clone();
        residual_add(&mut sum, &c).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(sum.get(i, j), t.get(i, j) + c.get(i, j));
            }
        }
        assert!(residual_add(&mut sum, &Tile::zeros(4, 3)).is_err());
    }

    #[test]
    fn rowvec_and_row_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_tile(&mut rng, 3, 4);

        let mut id = t.clone();
        rowvec_mul(&mut id, &[1.0; 4]).unwrap();
        assert_eq!(id, t);
        let mut z = t.clone();
        rowvec_mul(&mut z, &[0.0; 4]).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert!(rowvec_mul(&mut z, &[1.0; 3]).is_err());

        let gamma: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = t.clone();
        rowvec_mul(&mut g, &gamma).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.get(i, j), t.get(i, j) * gamma[j]);
            }
        }

        let mut ones = Tile::new(3, 4, vec![1.0; 12]);
        row_scale(&mut ones, &[1.0, 2.0, 3.0]).unwrap();
        for i in 0..3 {
            assert!(ones.row(i).iter().all(|&v| v == (i + 1) as f64));
        }
        let r: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = t.clone();
        row_scale(&mut s, &r).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), t.get(i, j) * r[i]);
            }
        }
        assert!(row_scale(&mut s, &[1.0]).is_err());
    }

    #[test]
    fn rope_zero_angle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_tile(&mut rng, 2, 6);
        let mut r = t.clone();
        rope(&mut r, &Tile::new(2, 6, vec![1.0; 12]), &Tile::zeros(2, 6)).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn rope_quarter_turn() {
        let mut t = Tile::new(1, 2, vec![1.0, 0.0]);
        rope(&mut t, &Tile::zeros(1, 2), &Tile::new(1, 2, vec![1.0, 1.0])).unwrap();
        assert_eq!(t.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rope_rejects_odd_width() {
        let mut t = Tile::zeros(1, 3);
        let err = rope(&mut t, &Tile::zeros(1, 3), &Tile::zeros(1, 3)).unwrap_err();
        assert!(matches!(err, Error::Pairing(3)));
    }

    #[test]
    fn rope_matches_pair_rotation_and_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_tile(&mut rng, 3, 8);
        let angles: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.2..3.2)).collect();
        let cos = Tile::from_fn(3, 8, |i, j| angles[i * 4 + j / 2].cos());
        let sin = Tile::from_fn(3, 8, |i, j| angles[i * 4 + j / 2].sin());
        let mut r = t.clone();
        rope(&mut r, &cos, &sin).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let th = angles[i * 4 + k];
                let (x0, x1) = (t.get(i, 2 * k), t.get(i, 2 * k + 1));
                let (y0, y1) = (r.get(i, 2 * k), r.get(i, 2 * k + 1));
                assert!((y0 - (x0 * th.cos() - x1 * th.sin())).abs() < 1e-15);
                assert!((y1 - (x0 * th.sin() + x1 * th.cos())).abs() < 1e-15);
                let (n0, n1) = ((x0 * x0 + x1 * x1).sqrt(), (y0 * y0 + y1 * y1).sqrt());
                assert!((n0 - n1).abs() <= 2.0 * f64::EPSILON * n0.max(1.0));
            }
        }
        // and backward undoes the rotation
        rope_backward(&mut r, &cos, &sin).unwrap();
        for (a, b) in r.data.iter().zip(&t.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn swiglu_cases() {
        let t = Tile::new(1, 4, vec![0.0, 5.0, 1.0, 2.0]);
        let o = swiglu(&t).unwrap();
        assert_eq!(o.cols, 2);
        assert_eq!(o.get(0, 0), 0.0);
        let expected = 2.0 / (1.0 + (-1.0f64).exp());
        assert!((o.get(0, 1) - expected).abs() < 1e-15);
        assert!((o.get(0, 1) - 1.462117).abs() < 1e-6);
        assert!(matches!(swiglu(&Tile::zeros(2, 5)), Err(Error::Pairing(5))));
    }

    #[test]
    fn swiglu_backward_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = random_tile(&mut rng, 2, 8);
        let g = swiglu_backward(&Tile::zeros(2, 4), &z).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(swiglu_backward(&Tile::zeros(2, 3), &z).is_err());
    }

    #[test]
    fn swiglu_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-6;
        for _ in 0..200 {
            let (g, u) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let grad = swiglu_backward(&Tile::new(1, 1, vec![1.0]), &Tile::new(1, 2, vec![g, u])).unwrap();
            let f = |g: f64, u: f64| silu(g) * u;
            let dg = (f(g + h, u) - f(g - h, u)) / (2.0 * h);
            let du = (f(g, u + h) - f(g, u - h)) / (2.0 * h);
            for (an, fd) in [(grad.get(0, 0), dg), (grad.get(0, 1), du)] {
                assert!((an - fd).abs() <= 1e-6 * an.abs().max(fd.abs()) + 1e-9, "{an} vs {fd}");
            }
        }
    }

    #[test]
    fn swiglu_backward_rowdot_identity() {
        // Σ (G∇G + U∇U) per row equals ⟨Z_row, ∇Z_row⟩.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = random_tile(&mut rng, 3, 8);
        let d = random_tile(&mut rng, 3, 4);
        let gz = swiglu_backward(&d, &z).unwrap();
        let (sums, _) = partial_rowdot(&gz, &z, 8, EXACT).unwrap();
        for i in 0..3 {
            let direct: f64 = (0..8).map(|j| z.get(i, j) * gz.get(i, j)).sum();
            let paired: f64 = (0..4)
                .map(|k| z.get(i, 2 * k) * gz.get(i, 2 * k) + z.get(i, 2 * k + 1) * gz.get(i, 2 * k + 1))
                .sum();
            assert!((sums[i] - direct).abs() <= 1e-12 * direct.abs().max(1.0));
            assert!((paired - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn partial_sums() {
        let ones = Tile::new(1, 4, vec![1.0; 4]);
        assert_eq!(partial_sumsq(&ones, 4, EXACT), (vec![4.0], vec![4]));
        assert_eq!(partial_sumsq(&Tile::zeros(2, 4), 4, EXACT).0, vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = random_tile(&mut rng, 3, 10);
        let (sums, counts) = partial_sumsq(&t, 4, EXACT);
        assert_eq!(counts, vec![4, 4, 2, 4, 4, 2, 4, 4, 2]);
        for i in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for j in b * 4..((b + 1) * 4).min(10) {
                    s += t.get(i, j) * t.get(i, j);
                }
                assert_eq!(sums[i * 3 + b], s);
            }
        }

        let (self_dot, _) = partial_rowdot(&t, &t, 4, EXACT).unwrap();
        assert_eq!(self_dot, sums);
        let (zero_dot, _) = partial_rowdot(&t, &Tile::zeros(3, 10), 4, EXACT).unwrap();
        assert!(zero_dot.iter().all(|&v| v == 0.0));
        let x = random_tile(&mut rng, 3, 10);
        let (dots, _) = partial_rowdot(&t, &x, 5, EXACT).unwrap();
        for i in 0..3 {
            for b in 0..2 {
                let s: f64 = (b * 5..b * 5 + 5).map(|j| t.get(i, j) * x.get(i, j)).sum();
                assert!((dots[i * 2 + b] - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn column_sums() {
        assert_eq!(partial_colsum(&Tile::new(4, 4, vec![1.0; 16]), EXACT), vec![4.0; 4]);
        assert_eq!(partial_colsum(&Tile::zeros(3, 2), EXACT), vec![0.0; 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let t = random_tile(&mut rng, 5, 3);
        let sums = partial_colsum(&t, EXACT);
        for j in 0..3 {
            let s: f64 = (0..5).map(|i| t.get(i, j)).sum();
            assert_eq!(sums[j], s);
        }
    }

    #[test]
    fn lse_states() {
        let (s, _) = online_lse(&Tile::new(1, 1, vec![0.7]), 4);
        assert_eq!(s[0], LseState { max: 0.7, sum: 1.0 });

        let (s, _) = online_lse(&Tile::new(1, 2, vec![1.5, 1.5]), 4);
        assert_eq!(s[0], LseState { max: 1.5, sum: 2.0 });
        assert!((s[0].lse() - (1.5 + 2f64.ln())).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let t = Tile::from_fn(1, 128, |_, _| rng.gen_range(-20.0..20.0));
        let (s, _) = online_lse(&t, 128);
        let m = t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let direct = m + t.data.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        assert!((s[0].lse() - direct).abs() <= 1e-12 * direct.abs());
    }

    proptest::proptest! {
        #[test]
        fn lse_merge_is_associative(seed in 0u64..500, n in 3usize..40, cut1 in 0usize..40, cut2 in 0usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let (a, b) = (cut1.min(cut2) % n, cut1.max(cut2) % n);
            let (a, b) = (a.min(b), a.max(b));
            let fold = |xs: &[f64]| xs.iter().fold(LseState::EMPTY, |s, &x| s.push(x));
            let (p, q, r) = (fold(&v[..a]), fold(&v[a..b]), fold(&v[b..]));
            let left = p.merge(q).merge(r).lse();
            let right = p.merge(q.merge(r)).lse();
            let whole = fold(&v).lse();
            proptest::prop_assert!((left - right).abs() <= 1e-12 * whole.abs().max(1.0));
            proptest::prop_assert!((left - whole).abs() <= 1e-12 * whole.abs().max(1.0));
        }
    }

    #[test]
    fn gather_cases() {
        let t = Tile::new(3, 1, vec![4.0, 5.0, 6.0]);
        assert_eq!(
            target_gather(&t, &[0, 0, 0], 0).unwrap(),
            vec![(0, 4.0), (1, 5.0), (2, 6.0)]
        );

        let eye = Tile::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let got = target_gather(&eye, &[0, 1, 2, 3], 0).unwrap();
        assert!(got.iter().all(|&(_, v)| v == 1.0));

        // only labels inside this tile's column window are written
        let got = target_gather(&eye, &[0, 7, 2, 9], 2).unwrap();
        assert_eq!(got, vec![(2, 0.0)]);
    }

    #[test]
    fn rmsnorm_backward_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = random_tile(&mut rng, 2, 4);
        let o_in = random_tile(&mut rng, 2, 4);
        let r = [0.5, 2.0];
        let gamma = [1.0, -1.0, 0.5, 2.0];
        let zero = rmsnorm_backward_local(&Tile::zeros(2, 4), &c, &r, &gamma, &[0.0; 2], Some(&o_in), EXACT).unwrap();
        assert_eq!(zero.grad_input, o_in);
        assert!(zero.weight_grad.iter().all(|&v| v == 0.0));

        let d = random_tile(&mut rng, 2, 4);
        let plain = rmsnorm_backward_local(&d, &c, &[1.0; 2], &[1.0; 4], &[0.0; 2], None, EXACT).unwrap();
        assert_eq!(plain.grad_input, d);
        assert_eq!(plain.normed, c);
    }
}
