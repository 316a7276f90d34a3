use serde::{Deserialize, Serialize};

use crate::engine::{GemmProblem, Schedule};
use crate::error::{Error, Result};
use crate::tensor::{Precision, TileShape};

/// Rounds `⌊8d/3⌋` up to a multiple of 256.
pub fn derived_ffn(d: usize) -> usize {
    (8 * d / 3).div_ceil(256) * 256
}

/// Sizes and numerics shared by every launch of a pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Hidden width.
    pub d: usize,
    /// Feed-forward width; derived from `d` when absent.
    pub ffn: Option<usize>,
    pub vocab: usize,
    /// Rows of every activation (batch × sequence, flattened).
    pub tokens: usize,
    pub eps: f64,
    pub tile_shape: TileShape,
    pub reduction_tile_n: usize,
    pub precision: Precision,
    /// Run tiles on the rayon pool.
    pub parallel: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            d: 64,
            ffn: None,
            vocab: 256,
            tokens: 16,
            eps: 1e-6,
            tile_shape: TileShape::default(),
            reduction_tile_n: 128,
            precision: Precision::Exact64,
            parallel: true,
        }
    }
}

impl PipelineConfig {
    /// A small configuration for tests and demos.
    pub fn toy(tokens: usize, d: usize, ffn: usize) -> Self {
        Self {
            d,
            ffn: Some(ffn),
            tokens,
            vocab: 4 * d,
            ..Self::default()
        }
    }

    pub fn with_tiles(mut self, tile_shape: TileShape, reduction_tile_n: usize) -> Self {
        self.tile_shape = tile_shape;
        self.reduction_tile_n = reduction_tile_n;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn.unwrap_or_else(|| derived_ffn(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        self.tile_shape.validate()?;
        if self.d == 0 || self.tokens == 0 || self.vocab == 0 || self.ffn_width() == 0 {
            return Err(Error::Config("all pipeline dimensions must be at least 1".into()));
        }
        if self.reduction_tile_n == 0 {
            return Err(Error::Config("reduction tile width must be at least 1".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be finite and non-negative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// A launch description for `D = op(A)·op(B)` with `m × n` output.
    pub fn problem(&self, name: &str, m: usize, n: usize, k: usize) -> GemmProblem {
        GemmProblem {
            name: name.to_string(),
            m,
            n,
            k,
            trans_a: false,
            trans_b: false,
            tile_shape: self.tile_shape,
            reduction_tile_n: self.reduction_tile_n,
            precision: self.precision,
            schedule: if self.parallel {
                Schedule::Parallel
            } else {
                Schedule::Sequential
            },
        }
    }
}
