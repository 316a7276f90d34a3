//! Second-level reductions over tile partials.
//!
//! These run after the producing launch has finished and combine blocks in
//! ascending order, so their results do not depend on tile scheduling. Each
//! returns its traffic as a [`KernelRecord`]: the partial slot is read once
//! and the output vector written once.

use crate::engine::PartialSlot;
use crate::epilogue::ops::LseState;
use crate::epilogue::SlotKind;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Vector};
use crate::traffic::KernelRecord;

fn expect_kind(slot: &PartialSlot, kind: SlotKind) -> Result<()> {
    if slot.kind != kind {
        return Err(Error::Program(format!("expected a {kind:?} slot, got {:?}", slot.kind)));
    }
    Ok(())
}

fn record(name: &str, slot: &PartialSlot, out_len: usize) -> KernelRecord {
    let mut r = KernelRecord::new(name);
    r.read("partials", slot.byte_size())
        .write("out", (out_len * slot.precision.storage_bytes()) as u64);
    r
}

/// Row sums over blocks in ascending order, with the total element count.
fn row_totals(slot: &PartialSlot, acc: Precision) -> Vec<(f64, usize)> {
    (0..slot.rows)
        .map(|i| {
            (0..slot.cols).fold((0.0, 0), |(s, c), b| {
                (acc.quantize(s + slot.value(i, b)), c + slot.count(i, b))
            })
        })
        .collect()
}

/// `r[i] = 1/√(Σ_b sums[i,b] / d + eps)` where `d` is the row's total count.
pub fn finalize_rms(slot: &PartialSlot, eps: f64) -> Result<(Vector, KernelRecord)> {
    expect_kind(slot, SlotKind::RowBlocked)?;
    let acc = slot.precision;
    let mut r = Vec::with_capacity(slot.rows);
    for (i, (sum, count)) in row_totals(slot, acc).into_iter().enumerate() {
        if count == 0 {
            return Err(Error::DegenerateRow(i));
        }
        r.push(acc.quantize(1.0 / (sum / count as f64 + eps).sqrt()));
    }
    Ok((Vector::from_vec(r, acc), record("finalize_rms", slot, slot.rows)))
}

/// `s[i] = (1/d) Σ_b partials[i,b]`.
pub fn finalize_rowdot(slot: &PartialSlot, d: usize) -> Result<(Vector, KernelRecord)> {
    expect_kind(slot, SlotKind::RowBlocked)?;
    if d == 0 {
        return Err(Error::Config("row statistic needs a nonzero width".into()));
    }
    let acc = slot.precision;
    let s = row_totals(slot, acc)
        .into_iter()
        .map(|(sum, _)| acc.quantize(sum / d as f64))
        .collect();
    Ok((Vector::from_vec(s, acc), record("finalize_rowdot", slot, slot.rows)))
}

/// Merges the `(max, sum-exp)` pairs of each row into `lse[i] = m + ln s`.
pub fn combine_lse(slot: &PartialSlot) -> Result<(Vector, KernelRecord)> {
    expect_kind(slot, SlotKind::RowStatPair)?;
    let acc = slot.precision;
    let mut out = Vec::with_capacity(slot.rows);
    for i in 0..slot.rows {
        let merged = (0..slot.cols).fold(LseState::EMPTY, |s, b| s.merge(slot.lse_state(i, b)));
        if merged.max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow(i));
        }
        out.push(acc.quantize(merged.lse()));
    }
    Ok((Vector::from_vec(out, acc), record("combine_lse", slot, slot.rows)))
}

/// Column sums of a column-blocked slot over its row blocks.
pub fn reduce_row_partials(slot: &PartialSlot) -> Result<(Vector, KernelRecord)> {
    expect_kind(slot, SlotKind::ColBlocked)?;
    let acc = slot.precision;
    let mut out = vec![0.0; slot.cols];
    for b in 0..slot.rows {
        for (j, o) in out.iter_mut().enumerate() {
            *o = acc.quantize(*o + slot.value(b, j));
        }
    }
    Ok((
        Vector::from_vec(out, acc),
        record("reduce_row_partials", slot, slot.cols),
    ))
}

/// Per-row cross-entropy `ℓ[i] = lse[i] − z_tgt[i]` and the mean loss.
pub fn cross_entropy_finalize(z_tgt: &Vector, lse: &Vector) -> Result<(Vector, f64, KernelRecord)> {
    if z_tgt.len() != lse.len() {
        return Err(Error::Dimension(format!(
            "{} target logits for {} log-sum-exp values",
            z_tgt.len(),
            lse.len()
        )));
    }
    if z_tgt.is_empty() {
        return Err(Error::Dimension("no rows to average".into()));
    }
    if let Some(row) = z_tgt.as_slice().iter().position(|v| v.is_nan()) {
        return Err(Error::MissingGather(row));
    }
    let acc = lse.precision();
    let losses: Vec<f64> = z_tgt
        .as_slice()
        .iter()
        .zip(lse.as_slice())
        .map(|(z, l)| acc.quantize(l - z))
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let mut r = KernelRecord::new("cross_entropy_finalize");
    r.read("z_tgt", z_tgt.byte_size())
        .read("lse", lse.byte_size())
        .write("loss", lse.byte_size());
    Ok((Vector::from_vec(losses, acc), mean, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epilogue::ops::{online_lse, partial_sumsq, Tile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const X: Precision = Precision::Exact64;

    /// Builds a row-blocked slot by cutting each row at `cuts`.
    fn blocked(rows: &[Vec<f64>], cuts: &[usize], f: impl Fn(f64, f64) -> f64) -> PartialSlot {
        let nb = cuts.len() + 1;
        let mut slot = PartialSlot {
            kind: SlotKind::RowBlocked,
            rows: rows.len(),
            cols: nb,
            values: vec![0.0; rows.len() * nb],
            counts: vec![0; rows.len() * nb],
            precision: X,
        };
        for (i, row) in rows.iter().enumerate() {
            let mut bounds = vec![0];
            bounds.extend_from_slice(cuts);
            bounds.push(row.len());
            for b in 0..nb {
                let part = &row[bounds[b]..bounds[b + 1]];
                slot.values[i * nb + b] = part.iter().fold(0.0, |s, &v| f(s, v));
                slot.counts[i * nb + b] = part.len();
            }
        }
        slot
    }

    fn sq(s: f64, v: f64) -> f64 {
        s + v * v
    }

    #[test]
    fn rms_of_ones_and_three_four() {
        let (r, _) = finalize_rms(&blocked(&[vec![1.0; 4]], &[], sq), 0.0).unwrap();
        assert_eq!(r.as_slice(), &[1.0]);
        let (r, _) = finalize_rms(&blocked(&[vec![3.0, 4.0]], &[], sq), 0.0).unwrap();
        assert!((r.get(0) - 1.0 / 12.5f64.sqrt()).abs() < 1e-15);
        assert!((r.get(0) - 0.2828427).abs() < 1e-7);
    }

    #[test]
    fn rms_over_ragged_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let row: Vec<f64> = (0..11).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (r, _) = finalize_rms(&blocked(std::slice::from_ref(&row), &[4, 9], sq), 1e-6).unwrap();
        let direct = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / 11.0 + 1e-6).sqrt();
        assert!((r.get(0) - direct).abs() <= 1e-14 * direct);
    }

    #[test]
    fn empty_row_is_degenerate() {
        let mut slot = blocked(&[vec![1.0], vec![2.0]], &[], sq);
        slot.counts[1] = 0;
        assert!(matches!(finalize_rms(&slot, 0.0), Err(Error::DegenerateRow(1))));
    }

    #[test]
    fn rowdot_cases() {
        let (s, _) = finalize_rowdot(&blocked(&[vec![0.0; 3]], &[], sq), 3).unwrap();
        assert_eq!(s.as_slice(), &[0.0]);
        // a unit-rms row dotted with itself gives d, so s = 1
        let (s, _) = finalize_rowdot(&blocked(&[vec![1.0, -1.0, 1.0, -1.0]], &[], sq), 4).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
        assert!(matches!(
            finalize_rowdot(&blocked(&[vec![1.0]], &[], sq), 0),
            Err(Error::Config(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prod: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a * b).collect();
        let (s, _) = finalize_rowdot(&blocked(&[prod], &[2, 5], |s, v| s + v), 9).unwrap();
        let direct: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / 9.0;
        assert!((s.get(0) - direct).abs() <= 1e-14);
    }

    fn lse_slot(states: Vec<Vec<LseState>>) -> PartialSlot {
        let cols = states[0].len();
        let mut values = Vec::new();
        for row in &states {
            for s in row {
                values.push(s.max);
                values.push(s.sum);
            }
        }
        PartialSlot {
            kind: SlotKind::RowStatPair,
            rows: states.len(),
            cols,
            values,
            counts: vec![1; states.len() * cols],
            precision: X,
        }
    }

    #[test]
    fn lse_cases() {
        let (l, _) = combine_lse(&lse_slot(vec![vec![LseState { max: 0.3, sum: 1.0 }]])).unwrap();
        assert_eq!(l.as_slice(), &[0.3]);

        let half = LseState { max: 2.0, sum: 8.0 };
        let (l, _) = combine_lse(&lse_slot(vec![vec![half, half]])).unwrap();
        assert!((l.get(0) - (2.0 + 16f64.ln())).abs() < 1e-15);

        let empty = LseState::EMPTY;
        let (l, _) = combine_lse(&lse_slot(vec![vec![empty, half]])).unwrap();
        assert!((l.get(0) - (2.0 + 8f64.ln())).abs() < 1e-15);
        assert!(matches!(
            combine_lse(&lse_slot(vec![vec![empty, empty]])),
            Err(Error::DegenerateRow(0))
        ));
    }

    #[test]
    fn lse_of_uniform_vocabulary() {
        let v = 32768;
        let t = Tile::zeros(1, v);
        let (states, counts) = online_lse(&t, 128);
        let mut slot = lse_slot(vec![states]);
        slot.counts = counts;
        let (l, _) = combine_lse(&slot).unwrap();
        assert!((l.get(0) - (v as f64).ln()).abs() <= 1e-12);
        assert!((l.get(0) - 10.39720).abs() < 1e-5);
    }

    proptest::proptest! {
        #[test]
        fn blocking_does_not_change_results(seed in 0u64..1000, n in 1usize..60, block in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let t = Tile::new(1, n, row.clone());

            let (sums, counts) = partial_sumsq(&t, block, X);
            let slot = PartialSlot {
                kind: SlotKind::RowBlocked,
                rows: 1,
                cols: counts.len(),
                values: sums,
                counts,
                precision: X,
            };
            let (r, _) = finalize_rms(&slot, 0.0).unwrap();
            let direct = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            proptest::prop_assert!((r.get(0) - direct).abs() <= 1e-12 * direct);

            let (states, counts) = online_lse(&t, block);
            let mut ls = lse_slot(vec![states]);
            ls.counts = counts;
            let (l, _) = combine_lse(&ls).unwrap();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            proptest::prop_assert!((l.get(0) - lse).abs() <= 1e-12 * lse.abs().max(1.0));
        }
    }

    #[test]
    fn column_partials() {
        let one = PartialSlot {
            kind: SlotKind::ColBlocked,
            rows: 1,
            cols: 3,
            values: vec![1.0, 2.0, 3.0],
            counts: vec![4; 3],
            precision: X,
        };
        assert_eq!(reduce_row_partials(&one).unwrap().0.as_slice(), &[1.0, 2.0, 3.0]);
        let mut two = one.clone();
        two.rows = 2;
        two.values.extend_from_slice(&[1.0, 2.0, 3.0]);
        two.counts.extend_from_slice(&[4; 3]);
        assert_eq!(reduce_row_partials(&two).unwrap().0.as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 16f64;
        let z = Vector::from_vec(vec![0.0; 3], X);
        let lse = Vector::from_vec(vec![v.ln(); 3], X);
        let (losses, mean, _) = cross_entropy_finalize(&z, &lse).unwrap();
        assert!(losses.as_slice().iter().all(|&l| (l - v.ln()).abs() < 1e-15));
        assert!((mean - v.ln()).abs() < 1e-15);

        let z = Vector::from_vec(vec![1.0, f64::NAN], X);
        let lse = Vector::from_vec(vec![2.0, 2.0], X);
        assert!(matches!(cross_entropy_finalize(&z, &lse), Err(Error::MissingGather(1))));
    }

    #[test]
    fn traffic_is_partials_in_vector_out() {
        let slot = blocked(&[vec![1.0; 8], vec![2.0; 8]], &[4], sq);
        let (_, rec) = finalize_rms(&slot, 0.0).unwrap();
        assert_eq!(rec.read_bytes(), 2 * 2 * 8);
        assert_eq!(rec.write_bytes(), 2 * 8);
    }
}
