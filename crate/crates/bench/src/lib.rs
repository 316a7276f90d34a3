//! Seeded inputs shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilefuse::kernels::{rope_tables, LayerWeights};
use tilefuse::{Matrix, PipelineConfig, Vector};

/// Everything a layer forward and backward consumes.
pub struct LayerInputs {
    pub x: Matrix,
    pub z: Matrix,
    pub w: LayerWeights,
    pub cos: Matrix,
    pub sin: Matrix,
    pub dq: Matrix,
    pub dres: Matrix,
}

pub fn layer_inputs(cfg: &PipelineConfig, seed: u64) -> LayerInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d, p) = (cfg.tokens, cfg.d, cfg.precision);
    let w = LayerWeights::random(cfg, &mut rng);
    let (cos, sin) = rope_tables(m, 3 * d, 10_000.0, p);
    LayerInputs {
        x: Matrix::random(m, d, p, &mut rng),
        z: Matrix::random(m, d, p, &mut rng),
        dq: Matrix::random(m, 3 * d, p, &mut rng),
        dres: Matrix::random(m, d, p, &mut rng),
        w,
        cos,
        sin,
    }
}

/// `(x, W0, z, γ, W1)` for a square GRRG block.
pub fn grrg_inputs(cfg: &PipelineConfig, seed: u64) -> (Matrix, Matrix, Matrix, Vector, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d, p) = (cfg.tokens, cfg.d, cfg.precision);
    let s = 1.0 / (d as f64).sqrt();
    (
        Matrix::random(m, d, p, &mut rng),
        Matrix::random(d, d, p, &mut rng).scale(s).to_precision(p),
        Matrix::random(m, d, p, &mut rng),
        Vector::filled(d, 1.0, p),
        Matrix::random(d, d, p, &mut rng).scale(s).to_precision(p),
    )
}
