//! Tile-granular GEMM-with-epilogue engine for Transformer training kernels.
//!
//! A GEMM mainloop produces accumulator tiles; an [`EpilogueProgram`] built
//! from a closed set of tile-local primitives transforms each tile and emits
//! auxiliary outputs (saved activations, partial reductions, gathered
//! values) before the store. Small auxiliary reductions combine partials
//! across tiles. On top of that sit the fused Transformer kernels, the
//! pipelines built from them, naive reference oracles and a byte-level
//! traffic model.

pub mod engine;
pub mod epilogue;
pub mod error;
pub mod kernels;
pub mod numerics;
pub mod oracle;
pub mod reduce;
pub mod tensor;
pub mod traffic;
pub mod verify;

pub use engine::{
    run_epilogue, run_gemm, run_gemm_trans, AuxOutput, Bindings, GemmProblem, KernelResult, Operand, PartialSlot,
    Schedule,
};
pub use epilogue::{EpilogueProgram, Primitive, SlotKind};
pub use error::{Error, Result};
pub use kernels::{LayerGrads, LayerTape, LayerWeights, PipelineConfig};
pub use tensor::{quantize, rel_error, tile_coords, Matrix, Precision, TileCoord, TileShape, Vector};
pub use traffic::{compare, KernelRecord, TrafficLedger, TrafficReport};
