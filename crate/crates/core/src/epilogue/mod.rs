//! Epilogue programs: ordered lists of tile-pure primitives applied to each
//! accumulator tile before it is stored.
//!
//! The primitive set is closed. Each variant names the operands it reads and
//! the auxiliary slots it writes, and the program is validated once at
//! construction so the engine can trust slot names and width bookkeeping.

pub mod ops;

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// One step of an epilogue program.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `tile += operand[tile]`.
    ResidualAdd { operand: String },
    /// Scales column `j` by a row vector entry (e.g. an RMSNorm weight).
    RowVecMul { operand: String },
    /// Scales row `i` by a column vector entry (e.g. an inverse RMS factor).
    RowScale { operand: String },
    /// Rotates adjacent feature pairs by full-shape cos/sin tables. With
    /// `inverse`, applies the transposed rotation instead.
    Rope { cos: String, sin: String, inverse: bool },
    /// Interleaved gate/up activation; halves the tile width.
    SwiGlu,
    /// Gradient of [`Primitive::SwiGlu`] given the saved interleaved
    /// pre-activation; doubles the tile width.
    SwiGluBackward { saved: String },
    /// Row-blocked sums of squares.
    PartialSumSq { slot: String },
    /// Row-blocked sums of `tile ⊙ operand`.
    PartialRowDot { operand: String, slot: String },
    /// Column sums over each tile's rows.
    PartialColSum { slot: String },
    /// Row-blocked `(max, sum-exp)` pairs.
    OnlineLse { slot: String },
    /// Picks the tile value at each row's label column.
    TargetGather { labels: String, slot: String },
    /// Copies the running tile out to an auxiliary tensor.
    StoreTile { slot: String },
    /// Local RMSNorm backward. The running tile is the gradient of the
    /// normalized output; it becomes the gradient of the norm input.
    RmsNormBackward {
        input: String,
        inv_rms: String,
        weight: String,
        stat: String,
        grad_in: Option<String>,
        normed_slot: String,
        weight_grad_slot: String,
    },
}

/// Layout of an auxiliary output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    /// Full-shape matrix at the running width.
    Tile,
    /// `M × blocks` partial sums.
    RowBlocked,
    /// `row-tiles × N` partial sums.
    ColBlocked,
    /// `M × blocks` `(max, sum-exp)` pairs.
    RowStatPair,
    /// One value per row.
    Gather,
}

/// An auxiliary slot declared by a program, with the width exponent in
/// force where it is written (the slot's width is `N · 2^width_exp`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotDecl {
    pub name: String,
    pub kind: SlotKind,
    pub width_exp: i32,
}

/// How an operand is sliced for each tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperandKind {
    /// `M × width` matrix, sliced to the tile's rows and columns.
    Tile,
    /// Length-`width` vector, sliced to the tile's columns.
    RowVector,
    /// Length-`M` vector, sliced to the tile's rows.
    ColVector,
    /// Length-`M` class indices.
    Labels,
}

/// An operand reference made by a primitive, with the width exponent at
/// which it is sliced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperandDecl {
    pub name: String,
    pub kind: OperandKind,
    pub width_exp: i32,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::ResidualAdd { .. } => "residual_add",
            Primitive::RowVecMul { .. } => "rowvec_mul",
            Primitive::RowScale { .. } => "row_scale",
            Primitive::Rope { inverse: false, .. } => "rope",
            Primitive::Rope { inverse: true, .. } => "rope_backward",
            Primitive::SwiGlu => "swiglu",
            Primitive::SwiGluBackward { .. } => "swiglu_backward",
            Primitive::PartialSumSq { .. } => "partial_sumsq",
            Primitive::PartialRowDot { .. } => "partial_rowdot",
            Primitive::PartialColSum { .. } => "partial_colsum",
            Primitive::OnlineLse { .. } => "online_lse",
            Primitive::TargetGather { .. } => "target_gather",
            Primitive::StoreTile { .. } => "store_tile",
            Primitive::RmsNormBackward { .. } => "rmsnorm_backward",
        }
    }

    /// Change of the running width exponent: −1 halves, +1 doubles.
    pub fn width_change(&self) -> i32 {
        match self {
            Primitive::SwiGlu => -1,
            Primitive::SwiGluBackward { .. } => 1,
            _ => 0,
        }
    }

    /// Operands read, as `(name, kind, width offset)`. The offset is relative
    /// to the width exponent in force before the primitive runs.
    fn operands(&self) -> Vec<(&str, OperandKind, i32)> {
        use OperandKind::*;
        match self {
            Primitive::ResidualAdd { operand } => vec![(operand, Tile, 0)],
            Primitive::RowVecMul { operand } => vec![(operand, RowVector, 0)],
            Primitive::RowScale { operand } => vec![(operand, ColVector, 0)],
            Primitive::Rope { cos, sin, .. } => vec![(cos, Tile, 0), (sin, Tile, 0)],
            Primitive::SwiGluBackward { saved } => vec![(saved, Tile, 1)],
            Primitive::PartialRowDot { operand, .. } => vec![(operand, Tile, 0)],
            Primitive::TargetGather { labels, .. } => vec![(labels, Labels, 0)],
            Primitive::RmsNormBackward {
                input,
                inv_rms,
                weight,
                stat,
                grad_in,
                ..
            } => {
                let mut v = vec![
                    (input.as_str(), Tile, 0),
                    (inv_rms.as_str(), ColVector, 0),
                    (weight.as_str(), RowVector, 0),
                    (stat.as_str(), ColVector, 0),
                ];
                if let Some(g) = grad_in {
                    v.push((g.as_str(), Tile, 0));
                }
                v
            }
            Primitive::SwiGlu
            | Primitive::PartialSumSq { .. }
            | Primitive::PartialColSum { .. }
            | Primitive::OnlineLse { .. }
            | Primitive::StoreTile { .. } => Vec::new(),
        }
    }

    fn slots(&self) -> Vec<(&str, SlotKind)> {
        match self {
            Primitive::PartialSumSq { slot } | Primitive::PartialRowDot { slot, .. } => {
                vec![(slot, SlotKind::RowBlocked)]
            }
            Primitive::PartialColSum { slot } => vec![(slot, SlotKind::ColBlocked)],
            Primitive::OnlineLse { slot } => vec![(slot, SlotKind::RowStatPair)],
            Primitive::TargetGather { slot, .. } => vec![(slot, SlotKind::Gather)],
            Primitive::StoreTile { slot } => vec![(slot, SlotKind::Tile)],
            Primitive::RmsNormBackward {
                normed_slot,
                weight_grad_slot,
                ..
            } => vec![(normed_slot, SlotKind::Tile), (weight_grad_slot, SlotKind::ColBlocked)],
            _ => Vec::new(),
        }
    }
}

/// A validated, ordered composition of primitives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpilogueProgram {
    primitives: Vec<Primitive>,
    slots: Vec<SlotDecl>,
    operands: Vec<OperandDecl>,
    width_exp: i32,
    discard_main: bool,
}

impl EpilogueProgram {
    /// The identity epilogue: the accumulator tile is stored as is.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let mut slots = Vec::new();
        let mut operands: Vec<OperandDecl> = Vec::new();
        let mut width_exp = 0i32;
        for p in &primitives {
            for (name, kind, offset) in p.operands() {
                let decl = OperandDecl {
                    name: name.to_string(),
                    kind,
                    width_exp: width_exp + offset,
                };
                if let Some(prev) = operands.iter().find(|o| o.name == name) {
                    if prev.kind != decl.kind || (kind != OperandKind::ColVector && prev.width_exp != decl.width_exp) {
                        return Err(Error::Program(format!(
                            "operand `{name}` is used with two different shapes"
                        )));
                    }
                } else {
                    operands.push(decl);
                }
            }
            for (name, kind) in p.slots() {
                slots.push(SlotDecl {
                    name: name.to_string(),
                    kind,
                    width_exp,
                });
            }
            width_exp += p.width_change();
            if !(-8..=8).contains(&width_exp) {
                return Err(Error::Program("width factor out of range".into()));
            }
        }

        let mut seen = BTreeSet::new();
        for s in &slots {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Program(format!("aux slot `{}` is written twice", s.name)));
            }
            if operands.iter().any(|o| o.name == s.name) {
                return Err(Error::Program(format!(
                    "aux slot `{}` collides with an input operand",
                    s.name
                )));
            }
        }

        Ok(Self {
            primitives,
            slots,
            operands,
            width_exp,
            discard_main: false,
        })
    }

    /// Marks the main output as not stored (statistic-only kernels).
    pub fn discard_main(mut self) -> Self {
        self.discard_main = true;
        self
    }

    pub fn stores_main(&self) -> bool {
        !self.discard_main
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn slots(&self) -> &[SlotDecl] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&SlotDecl> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn operands(&self) -> &[OperandDecl] {
        &self.operands
    }

    /// Net width exponent: the stored output is `N · 2^width_exp` wide.
    pub fn width_exp(&self) -> i32 {
        self.width_exp
    }

    /// Width of the main output for a GEMM output width `n`.
    pub fn output_width(&self, n: usize) -> Result<usize> {
        scaled_width(n, self.width_exp)
    }

    /// Tile-pure check on the pairing: every intermediate width must be
    /// integral, so each halving needs an even width at that point.
    pub fn check_width(&self, n: usize) -> Result<()> {
        let mut e = 0;
        for p in &self.primitives {
            if matches!(p, Primitive::SwiGlu | Primitive::Rope { .. }) {
                let w = scaled_width(n, e)?;
                if w % 2 != 0 {
                    return Err(Error::Pairing(w));
                }
            }
            e += p.width_change();
            scaled_width(n, e)?;
        }
        Ok(())
    }
}

/// `n · 2^e`, failing with a pairing error when a halving is not exact.
pub fn scaled_width(n: usize, e: i32) -> Result<usize> {
    if e >= 0 {
        Ok(n << e)
    } else {
        let d = 1usize << (-e);
        if !n.is_multiple_of(d) {
            return Err(Error::Pairing(n));
        }
        Ok(n / d)
    }
}
