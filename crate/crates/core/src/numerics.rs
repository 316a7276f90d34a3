//! Reduced-precision comparison of the fused and unfused GRRG block.
//!
//! Both paths start from the same stored inputs and are compared against a
//! binary64 evaluation on those inputs. The fused order rounds fewer
//! intermediates to storage precision: the inverse RMS is applied to the
//! binary32 accumulator of the second GEMM rather than to a stored
//! activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::canonical::grrg_canonical;
use crate::kernels::{grrg_forward, PipelineConfig};
use crate::oracle::{add_ref, gemm_ref, rmsnorm_ref};
use crate::tensor::{rel_error, Matrix, Precision, Vector};

/// Errors of one trial against the binary64 reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    pub fused_error: f64,
    pub canonical_error: f64,
    /// `fused / canonical`; absent when the canonical error is zero.
    pub ratio: Option<f64>,
}

/// One seeded GRRG instance with `m` tokens and hidden width `d`.
pub fn grrg_trial(seed: u64, m: usize, d: usize, precision: Precision) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::random(m, d, precision, &mut rng);
    let scale = 1.0 / (d as f64).sqrt();
    let w0 = Matrix::random(d, d, Precision::Exact64, &mut rng)
        .scale(scale)
        .to_precision(precision);
    let z = Matrix::random(m, d, precision, &mut rng);
    let gamma = Vector::from_vec(
        Vector::random(d, Precision::Exact64, &mut rng)
            .as_slice()
            .iter()
            .map(|v| 1.0 + 0.5 * v)
            .collect(),
        precision,
    );
    let w1 = Matrix::random(d, d, Precision::Exact64, &mut rng)
        .scale(scale)
        .to_precision(precision);

    let cfg = PipelineConfig {
        d,
        tokens: m,
        precision,
        ..PipelineConfig::default()
    };
    let reference = {
        let h1 = add_ref(&gemm_ref(&x, &w0, false, false), &z);
        let (n, _) = rmsnorm_ref(&h1, &gamma, cfg.eps);
        gemm_ref(&n, &w1, false, false)
    };
    let fused = grrg_forward(&cfg, &x, &w0, &z, &gamma, &w1)?.y;
    let (canonical, _) = grrg_canonical(&cfg, &x, &w0, &z, &gamma, &w1)?;
    let fused_error = rel_error(&fused, &reference)?;
    let canonical_error = rel_error(&canonical, &reference)?;
    Ok(Trial {
        seed,
        fused_error,
        canonical_error,
        ratio: (canonical_error > 0.0).then(|| fused_error / canonical_error),
    })
}

/// Distribution of the error ratio over a set of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericsSummary {
    pub trials: usize,
    /// Median of the defined ratios; absent when no ratio is defined.
    pub median_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    /// Share of trials where the fused error does not exceed the canonical.
    pub fused_not_worse: f64,
    pub max_fused_error: f64,
    pub max_canonical_error: f64,
}

pub fn summarize(trials: &[Trial]) -> NumericsSummary {
    let mut ratios: Vec<f64> = trials.iter().filter_map(|t| t.ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let median = if ratios.is_empty() {
        None
    } else if ratios.len() % 2 == 1 {
        Some(ratios[ratios.len() / 2])
    } else {
        let h = ratios.len() / 2;
        Some(0.5 * (ratios[h - 1] + ratios[h]))
    };
    let not_worse = trials.iter().filter(|t| t.fused_error <= t.canonical_error).count();
    NumericsSummary {
        trials: trials.len(),
        median_ratio: median,
        min_ratio: ratios.first().copied(),
        max_ratio: ratios.last().copied(),
        fused_not_worse: if trials.is_empty() {
            0.0
        } else {
            not_worse as f64 / trials.len() as f64
        },
        max_fused_error: trials.iter().map(|t| t.fused_error).fold(0.0, f64::max),
        max_canonical_error: trials.iter().map(|t| t.canonical_error).fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_mode_has_negligible_error() {
        let t = grrg_trial(1, 8, 16, Precision::Exact64).unwrap();
        assert!(t.fused_error <= 1e-14 && t.canonical_error <= 1e-14);
    }

    #[test]
    fn median_of_even_and_odd_sets() {
        let mk = |r: f64| Trial {
            seed: 0,
            fused_error: r,
            canonical_error: 1.0,
            ratio: Some(r),
        };
        assert_eq!(summarize(&[mk(0.5), mk(0.9), mk(2.0)]).median_ratio, Some(0.9));
        assert_eq!(summarize(&[mk(0.5), mk(1.0)]).median_ratio, Some(0.75));
        assert_eq!(summarize(&[]).median_ratio, None);
    }
}
