//! Tiled GEMM mainloop driving an epilogue program.
//!
//! A launch follows the usual lifecycle: the consumer is set up once
//! (operands are checked and packed), then each output tile is accumulated,
//! visited by every primitive in program order and stored, and finally the
//! per-tile results are assembled. Tiles never exchange data, so the visit
//! order is free and the assembled result is the same for every schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::epilogue::ops::{self, LseState, Tile};
use crate::epilogue::{scaled_width, EpilogueProgram, OperandKind, Primitive, SlotKind};
use crate::error::{Error, Result};
use crate::tensor::{tile_coords, Matrix, Precision, TileCoord, TileShape, Vector};
use crate::traffic::{KernelRecord, TrafficLedger};

/// Bytes per class index when labels cross the memory boundary.
pub const LABEL_BYTES: u64 = 4;

/// Order in which tiles are visited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Sequential,
    Reversed,
    /// Tiles run on the rayon pool.
    Parallel,
    /// A seeded random permutation.
    Permuted(u64),
}

/// Shape and execution parameters of one launch.
#[derive(Clone, Debug, PartialEq)]
pub struct GemmProblem {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub trans_a: bool,
    pub trans_b: bool,
    pub tile_shape: TileShape,
    /// Column-block width of row-blocked partial reductions.
    pub reduction_tile_n: usize,
    pub precision: Precision,
    pub schedule: Schedule,
}

impl GemmProblem {
    pub fn new(m: usize, n: usize, k: usize, precision: Precision) -> Self {
        Self {
            name: "gemm".into(),
            m,
            n,
            k,
            trans_a: false,
            trans_b: false,
            tile_shape: TileShape::default(),
            reduction_tile_n: 128,
            precision,
            schedule: Schedule::Sequential,
        }
    }

    /// Infers `m, n, k` from the operands and the transposition flags.
    pub fn for_operands(a: &Matrix, b: &Matrix, trans_a: bool, trans_b: bool, precision: Precision) -> Result<Self> {
        let (m, ka) = if trans_a { (a.cols(), a.rows()) } else { a.shape() };
        let (kb, n) = if trans_b { (b.cols(), b.rows()) } else { b.shape() };
        if ka != kb {
            return Err(Error::Dimension(format!(
                "inner dimensions differ: op(A) is {m}x{ka}, op(B) is {kb}x{n}"
            )));
        }
        let mut p = Self::new(m, n, ka, precision);
        p.trans_a = trans_a;
        p.trans_b = trans_b;
        Ok(p)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_tiles(mut self, tile_shape: TileShape, reduction_tile_n: usize) -> Self {
        self.tile_shape = tile_shape;
        self.reduction_tile_n = reduction_tile_n;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    fn validate(&self) -> Result<()> {
        self.tile_shape.validate()?;
        if self.reduction_tile_n == 0 {
            return Err(Error::Config("reduction tile width must be at least 1".into()));
        }
        if self.m == 0 || self.n == 0 {
            return Err(Error::Dimension(format!("empty {}x{} output", self.m, self.n)));
        }
        Ok(())
    }

    /// Effective row-blocked partial width at width exponent `e`, and the
    /// number of blocks each tile column owns. Blocks never straddle tiles.
    pub fn row_blocking(&self, e: i32) -> Result<(usize, usize)> {
        let tile_w = scaled_width(self.tile_shape.tile_n, e)?;
        let block = self.reduction_tile_n.min(tile_w);
        Ok((block, tile_w.div_ceil(block)))
    }
}

/// A named input bound to an epilogue program.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Matrix(&'a Matrix),
    Vector(&'a Vector),
    Labels(&'a [usize]),
}

/// Operands referenced by name from an epilogue program.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    map: BTreeMap<String, Operand<'a>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn matrix(mut self, name: &str, m: &'a Matrix) -> Self {
        self.map.insert(name.to_string(), Operand::Matrix(m));
        self
    }

    pub fn vector(mut self, name: &str, v: &'a Vector) -> Self {
        self.map.insert(name.to_string(), Operand::Vector(v));
        self
    }

    pub fn labels(mut self, name: &str, labels: &'a [usize]) -> Self {
        self.map.insert(name.to_string(), Operand::Labels(labels));
        self
    }

    pub fn get(&self, name: &str) -> Result<Operand<'a>> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Binding(name.to_string()))
    }

    fn matrix_ref(&self, name: &str) -> Result<&'a Matrix> {
        match self.get(name)? {
            Operand::Matrix(m) => Ok(m),
            _ => Err(Error::Dimension(format!("operand `{name}` must be a matrix"))),
        }
    }

    fn vector_ref(&self, name: &str) -> Result<&'a Vector> {
        match self.get(name)? {
            Operand::Vector(v) => Ok(v),
            _ => Err(Error::Dimension(format!("operand `{name}` must be a vector"))),
        }
    }

    fn labels_ref(&self, name: &str) -> Result<&'a [usize]> {
        match self.get(name)? {
            Operand::Labels(l) => Ok(l),
            _ => Err(Error::Dimension(format!("operand `{name}` must be a label vector"))),
        }
    }
}

/// Partial reduction results of one slot.
///
/// Row-blocked and row-stat-pair slots are `M × blocks`; column-blocked slots
/// are `row-tiles × N`. `counts` holds the number of elements that fed each
/// entry, so ragged blocks finalize exactly. Stat-pair slots store the
/// running max and sum-exp interleaved in `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSlot {
    pub kind: SlotKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    /// Format the partials are held in (the launch's accumulator format).
    pub precision: Precision,
}

impl PartialSlot {
    fn new(kind: SlotKind, rows: usize, cols: usize, precision: Precision) -> Self {
        let width = if kind == SlotKind::RowStatPair { 2 } else { 1 };
        let mut values = vec![0.0; rows * cols * width];
        if kind == SlotKind::RowStatPair {
            for pair in values.chunks_exact_mut(2) {
                pair[0] = f64::NEG_INFINITY;
            }
        }
        Self {
            kind,
            rows,
            cols,
            values,
            counts: vec![0; rows * cols],
            precision,
        }
    }

    pub fn value(&self, i: usize, b: usize) -> f64 {
        self.values[i * self.cols + b]
    }

    pub fn count(&self, i: usize, b: usize) -> usize {
        self.counts[i * self.cols + b]
    }

    pub fn lse_state(&self, i: usize, b: usize) -> LseState {
        let at = 2 * (i * self.cols + b);
        LseState {
            max: self.values[at],
            sum: self.values[at + 1],
        }
    }

    /// Bytes of the slot as stored in global memory.
    pub fn byte_size(&self) -> u64 {
        (self.values.len() * self.precision.storage_bytes()) as u64
    }
}

/// An auxiliary output of a launch.
#[derive(Clone, Debug, PartialEq)]
pub enum AuxOutput {
    Tensor(Matrix),
    Partials(PartialSlot),
    Gathered(Vector),
}

/// Main output, auxiliary outputs and traffic of one launch.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelResult {
    pub main: Option<Matrix>,
    pub aux: BTreeMap<String, AuxOutput>,
    pub ledger: TrafficLedger,
}

impl KernelResult {
    pub fn main(&self) -> Result<&Matrix> {
        self.main
            .as_ref()
            .ok_or_else(|| Error::Program("kernel does not store a main output".into()))
    }

    pub fn into_main(self) -> Result<Matrix> {
        self.main
            .ok_or_else(|| Error::Program("kernel does not store a main output".into()))
    }

    fn aux(&self, name: &str) -> Result<&AuxOutput> {
        self.aux
            .get(name)
            .ok_or_else(|| Error::Program(format!("no aux slot `{name}` was declared")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        match self.aux(name)? {
            AuxOutput::Tensor(m) => Ok(m),
            _ => Err(Error::Program(format!("aux slot `{name}` is not a tile store"))),
        }
    }

    pub fn partials(&self, name: &str) -> Result<&PartialSlot> {
        match self.aux(name)? {
            AuxOutput::Partials(p) => Ok(p),
            _ => Err(Error::Program(format!("aux slot `{name}` is not a partial slot"))),
        }
    }

    pub fn gathered(&self, name: &str) -> Result<&Vector> {
        match self.aux(name)? {
            AuxOutput::Gathered(v) => Ok(v),
            _ => Err(Error::Program(format!("aux slot `{name}` is not a gather"))),
        }
    }

    pub fn record(&self) -> &KernelRecord {
        &self.ledger.records()[0]
    }
}

/// `D = op(A)·op(B)` followed by `program` on every tile.
pub fn run_gemm(
    problem: &GemmProblem,
    a: &Matrix,
    b: &Matrix,
    program: &EpilogueProgram,
    bindings: &Bindings,
) -> Result<KernelResult> {
    problem.validate()?;
    if problem.k == 0 {
        return Err(Error::Dimension("GEMM inner dimension is zero".into()));
    }
    let expect_a = if problem.trans_a {
        (problem.k, problem.m)
    } else {
        (problem.m, problem.k)
    };
    let expect_b = if problem.trans_b {
        (problem.n, problem.k)
    } else {
        (problem.k, problem.n)
    };
    if a.shape() != expect_a || b.shape() != expect_b {
        return Err(Error::Dimension(format!(
            "operands are {:?} and {:?}, problem expects {:?} and {:?}",
            a.shape(),
            b.shape(),
            expect_a,
            expect_b
        )));
    }
    let source = Source::Gemm {
        a: pack_rows(a, problem.trans_a),
        bt: pack_rows(b, !problem.trans_b),
        k: problem.k,
    };
    let mut head = KernelRecord::new(&problem.name);
    head.read("A", a.byte_size()).read("B", b.byte_size());
    launch(problem, source, program, bindings, head)
}

/// [`run_gemm`] with `B` consumed transposed: `D = op(A)·Bᵀ`.
pub fn run_gemm_trans(
    problem: &GemmProblem,
    a: &Matrix,
    b: &Matrix,
    program: &EpilogueProgram,
    bindings: &Bindings,
) -> Result<KernelResult> {
    let mut p = problem.clone();
    p.trans_b = true;
    run_gemm(&p, a, b, program, bindings)
}

/// Runs `program` over tiles of an existing tensor instead of a GEMM
/// accumulator. The input is read tile by tile and counted as `input`.
pub fn run_epilogue(
    problem: &GemmProblem,
    input: &Matrix,
    program: &EpilogueProgram,
    bindings: &Bindings,
) -> Result<KernelResult> {
    problem.validate()?;
    if input.shape() != (problem.m, problem.n) {
        return Err(Error::Dimension(format!(
            "epilogue input is {:?}, problem is {}x{}",
            input.shape(),
            problem.m,
            problem.n
        )));
    }
    let head = KernelRecord::new(&problem.name);
    launch(problem, Source::Tensor(input), program, bindings, head)
}

enum Source<'a> {
    /// Packed `op(A)` rows and `op(B)` columns, both `k` long.
    Gemm {
        a: Vec<f64>,
        bt: Vec<f64>,
        k: usize,
    },
    Tensor(&'a Matrix),
}

fn pack_rows(m: &Matrix, transpose: bool) -> Vec<f64> {
    if !transpose {
        return m.as_slice().to_vec();
    }
    let (r, c) = m.shape();
    let src = m.as_slice();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Per-launch context shared by all tiles.
struct Ctx<'p, 'b> {
    problem: &'p GemmProblem,
    program: &'p EpilogueProgram,
    bindings: &'p Bindings<'b>,
    acc: Precision,
    store: Precision,
}

/// What one tile hands back to the assembler.
struct TileOutput {
    coord: TileCoord,
    row0: usize,
    rows: usize,
    /// Column offset and data of the final running tile.
    main: (usize, Tile),
    tiles: Vec<(usize, usize, Tile)>,
    row_partials: Vec<(usize, usize, Vec<f64>, Vec<usize>)>,
    col_partials: Vec<(usize, usize, Vec<f64>, usize)>,
    lse: Vec<(usize, usize, Vec<LseState>, Vec<usize>)>,
    gathers: Vec<(usize, Vec<(usize, f64)>)>,
    record: KernelRecord,
}

fn launch(
    problem: &GemmProblem,
    source: Source,
    program: &EpilogueProgram,
    bindings: &Bindings,
    mut head: KernelRecord,
) -> Result<KernelResult> {
    program.check_width(problem.n)?;
    check_bindings(problem, program, bindings)?;
    let ctx = Ctx {
        problem,
        program,
        bindings,
        acc: problem.precision.accumulator(),
        store: problem.precision,
    };

    // vectors and labels are loaded once per launch
    for decl in program.operands() {
        match decl.kind {
            OperandKind::RowVector | OperandKind::ColVector => {
                head.read(&decl.name, bindings.vector_ref(&decl.name)?.byte_size());
            }
            OperandKind::Labels => {
                head.read(&decl.name, problem.m as u64 * LABEL_BYTES);
            }
            OperandKind::Tile => {}
        }
    }

    let mut coords = tile_coords(problem.m, problem.n, problem.tile_shape)?;
    let outputs: Vec<TileOutput> = match problem.schedule {
        Schedule::Parallel => coords
            .par_iter()
            .map(|&c| run_tile(&ctx, &source, c))
            .collect::<Result<_>>()?,
        other => {
            match other {
                Schedule::Reversed => coords.reverse(),
                Schedule::Permuted(seed) => coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
                _ => {}
            }
            coords
                .iter()
                .map(|&c| run_tile(&ctx, &source, c))
                .collect::<Result<_>>()?
        }
    };
    assemble(&ctx, outputs, head)
}

fn check_bindings(problem: &GemmProblem, program: &EpilogueProgram, bindings: &Bindings) -> Result<()> {
    let m = problem.m;
    for decl in program.operands() {
        let width = scaled_width(problem.n, decl.width_exp)?;
        let name = &decl.name;
        match decl.kind {
            OperandKind::Tile => {
                let t = bindings.matrix_ref(name)?;
                if t.shape() != (m, width) {
                    return Err(Error::Dimension(format!(
                        "operand `{name}` is {:?}, expected ({m}, {width})",
                        t.shape()
                    )));
                }
            }
            OperandKind::RowVector | OperandKind::ColVector => {
                let v = bindings.vector_ref(name)?;
                let want = if decl.kind == OperandKind::RowVector { width } else { m };
                if v.len() != want {
                    return Err(Error::Dimension(format!(
                        "vector `{name}` has length {}, expected {want}",
                        v.len()
                    )));
                }
            }
            OperandKind::Labels => {
                let l = bindings.labels_ref(name)?;
                if l.len() != m {
                    return Err(Error::Dimension(format!("{} labels for {m} rows", l.len())));
                }
                if let Some((row, &label)) = l.iter().enumerate().find(|(_, &v)| v >= width) {
                    return Err(Error::Label {
                        row,
                        label,
                        classes: width,
                    });
                }
            }
        }
    }
    Ok(())
}

fn slice_matrix(m: &Matrix, row0: usize, rows: usize, col0: usize, cols: usize) -> Tile {
    let src = m.as_slice();
    let stride = m.cols();
    let mut data = Vec::with_capacity(rows * cols);
    for i in row0..row0 + rows {
        data.extend_from_slice(&src[i * stride + col0..i * stride + col0 + cols]);
    }
    Tile::new(rows, cols, data)
}

fn mainloop(ctx: &Ctx, source: &Source, row0: usize, rows: usize, col0: usize, cols: usize) -> Tile {
    match source {
        Source::Tensor(t) => slice_matrix(t, row0, rows, col0, cols),
        Source::Gemm { a, bt, k } => {
            let k = *k;
            let mut data = Vec::with_capacity(rows * cols);
            for i in row0..row0 + rows {
                let ar = &a[i * k..(i + 1) * k];
                for j in col0..col0 + cols {
                    let br = &bt[j * k..(j + 1) * k];
                    let v = if ctx.acc.is_exact() {
                        ar.iter().zip(br).fold(0.0, |s, (x, y)| s + x * y)
                    } else {
                        ar.iter().zip(br).fold(0f32, |s, (x, y)| (s as f64 + x * y) as f32) as f64
                    };
                    data.push(v);
                }
            }
            Tile::new(rows, cols, data)
        }
    }
}

fn run_tile(ctx: &Ctx, source: &Source, coord: TileCoord) -> Result<TileOutput> {
    let p = ctx.problem;
    let region = p.tile_shape.region(coord, p.m, p.n);
    let (row0, rows) = (region.row0, region.rows);
    let mut record = KernelRecord::new(&p.name);
    if let Source::Tensor(t) = source {
        record.read("input", (rows * region.cols * t.precision().storage_bytes()) as u64);
    }

    let mut tile = mainloop(ctx, source, row0, rows, region.col0, region.cols);
    let mut e = 0i32;
    let (mut col0, mut cols) = (region.col0, region.cols);
    let mut out = TileOutput {
        coord,
        row0,
        rows,
        main: (0, Tile::zeros(0, 0)),
        tiles: Vec::new(),
        row_partials: Vec::new(),
        col_partials: Vec::new(),
        lse: Vec::new(),
        gathers: Vec::new(),
        record: KernelRecord::new(&p.name),
    };
    // a tile operand is loaded at most once per tile however often it is used
    let mut loaded: Vec<String> = Vec::new();
    let mut load = |name: &str, c0: usize, w: usize, record: &mut KernelRecord| -> Result<Tile> {
        let m = ctx.bindings.matrix_ref(name)?;
        if !loaded.iter().any(|n| n == name) {
            record.read(name, (rows * w * m.precision().storage_bytes()) as u64);
            loaded.push(name.to_string());
        }
        Ok(slice_matrix(m, row0, rows, c0, w))
    };
    let vec_cols = |name: &str, c0: usize, w: usize| -> Result<Vec<f64>> {
        Ok(ctx.bindings.vector_ref(name)?.as_slice()[c0..c0 + w].to_vec())
    };
    let vec_rows =
        |name: &str| -> Result<Vec<f64>> { Ok(ctx.bindings.vector_ref(name)?.as_slice()[row0..row0 + rows].to_vec()) };
    let pbytes = ctx.acc.storage_bytes();

    for prim in ctx.program.primitives() {
        match prim {
            Primitive::ResidualAdd { operand } => {
                let c = load(operand, col0, cols, &mut record)?;
                ops::residual_add(&mut tile, &c)?;
            }
            Primitive::RowVecMul { operand } => {
                ops::rowvec_mul(&mut tile, &vec_cols(operand, col0, cols)?)?;
            }
            Primitive::RowScale { operand } => {
                ops::row_scale(&mut tile, &vec_rows(operand)?)?;
            }
            Primitive::Rope { cos, sin, inverse } => {
                check_aligned(col0, cols)?;
                let c = load(cos, col0, cols, &mut record)?;
                let s = load(sin, col0, cols, &mut record)?;
                if *inverse {
                    ops::rope_backward(&mut tile, &c, &s)?;
                } else {
                    ops::rope(&mut tile, &c, &s)?;
                }
            }
            Primitive::SwiGlu => {
                check_aligned(col0, cols)?;
                tile = ops::swiglu(&tile)?;
                col0 /= 2;
                cols /= 2;
            }
            Primitive::SwiGluBackward { saved } => {
                let z = load(saved, 2 * col0, 2 * cols, &mut record)?;
                tile = ops::swiglu_backward(&tile, &z)?;
                col0 *= 2;
                cols *= 2;
            }
            Primitive::PartialSumSq { slot } => {
                let (block, per_tile) = p.row_blocking(e)?;
                let (sums, counts) = ops::partial_sumsq(&tile, block, ctx.acc);
                let nb = counts.len() / rows;
                record.write(slot, (rows * nb * pbytes) as u64);
                out.row_partials
                    .push((slot_index(slot, ctx), coord.j * per_tile, sums, counts));
            }
            Primitive::PartialRowDot { operand, slot } => {
                let (block, per_tile) = p.row_blocking(e)?;
                let x = load(operand, col0, cols, &mut record)?;
                let (sums, counts) = ops::partial_rowdot(&tile, &x, block, ctx.acc)?;
                let nb = counts.len() / rows;
                record.write(slot, (rows * nb * pbytes) as u64);
                out.row_partials
                    .push((slot_index(slot, ctx), coord.j * per_tile, sums, counts));
            }
            Primitive::PartialColSum { slot } => {
                let sums = ops::partial_colsum(&tile, ctx.acc);
                record.write(slot, (cols * pbytes) as u64);
                out.col_partials.push((slot_index(slot, ctx), col0, sums, rows));
            }
            Primitive::OnlineLse { slot } => {
                let (block, per_tile) = p.row_blocking(e)?;
                let (mut states, counts) = ops::online_lse(&tile, block);
                if !ctx.acc.is_exact() {
                    for s in &mut states {
                        s.max = ctx.acc.quantize(s.max);
                        s.sum = ctx.acc.quantize(s.sum);
                    }
                }
                let nb = counts.len() / rows;
                record.write(slot, (rows * nb * 2 * pbytes) as u64);
                out.lse
                    .push((slot_index(slot, ctx), coord.j * per_tile, states, counts));
            }
            Primitive::TargetGather { labels, slot } => {
                let l = ctx.bindings.labels_ref(labels)?;
                let hits = ops::target_gather(&tile, &l[row0..row0 + rows], col0)?;
                record.write(slot, (hits.len() * pbytes) as u64);
                out.gathers.push((slot_index(slot, ctx), hits));
            }
            Primitive::StoreTile { slot } => {
                let mut t = tile.clone();
                t.round_to(ctx.store);
                record.write(slot, (rows * cols * ctx.store.storage_bytes()) as u64);
                out.tiles.push((slot_index(slot, ctx), col0, t));
            }
            Primitive::RmsNormBackward {
                input,
                inv_rms,
                weight,
                stat,
                grad_in,
                normed_slot,
                weight_grad_slot,
            } => {
                let c = load(input, col0, cols, &mut record)?;
                let o_in = match grad_in {
                    Some(g) => Some(load(g, col0, cols, &mut record)?),
                    None => None,
                };
                let r = vec_rows(inv_rms)?;
                let s = vec_rows(stat)?;
                let gamma = vec_cols(weight, col0, cols)?;
                let res = ops::rmsnorm_backward_local(&tile, &c, &r, &gamma, &s, o_in.as_ref(), ctx.acc)?;
                let mut normed = res.normed;
                normed.round_to(ctx.store);
                record.write(normed_slot, (rows * cols * ctx.store.storage_bytes()) as u64);
                record.write(weight_grad_slot, (cols * pbytes) as u64);
                out.tiles.push((slot_index(normed_slot, ctx), col0, normed));
                out.col_partials
                    .push((slot_index(weight_grad_slot, ctx), col0, res.weight_grad, rows));
                tile = res.grad_input;
            }
        }
        tile.round_to(ctx.acc);
        e += prim.width_change();
    }

    if ctx.program.stores_main() {
        tile.round_to(ctx.store);
        record.write("D", (rows * cols * ctx.store.storage_bytes()) as u64);
    }
    out.main = (col0, tile);
    out.record = record;
    Ok(out)
}

fn check_aligned(col0: usize, cols: usize) -> Result<()> {
    if !col0.is_multiple_of(2) || !cols.is_multiple_of(2) {
        return Err(Error::Pairing(cols));
    }
    Ok(())
}

fn slot_index(name: &str, ctx: &Ctx) -> usize {
    ctx.program
        .slots()
        .iter()
        .position(|s| s.name == name)
        .expect("slots are declared by the program")
}

fn assemble(ctx: &Ctx, outputs: Vec<TileOutput>, mut record: KernelRecord) -> Result<KernelResult> {
    enum Building {
        Tensor(usize, Vec<f64>),
        Partials(PartialSlot),
        Gathered(Vec<f64>),
    }

    let p = ctx.problem;
    let (grid_m, grid_n) = p.tile_shape.grid(p.m, p.n);
    let mut aux: Vec<Building> = Vec::with_capacity(ctx.program.slots().len());
    for decl in ctx.program.slots() {
        let width = scaled_width(p.n, decl.width_exp)?;
        aux.push(match decl.kind {
            SlotKind::Tile => Building::Tensor(width, vec![0.0; p.m * width]),
            SlotKind::RowBlocked | SlotKind::RowStatPair => {
                let (_, per_tile) = p.row_blocking(decl.width_exp)?;
                Building::Partials(PartialSlot::new(decl.kind, p.m, grid_n * per_tile, ctx.acc))
            }
            SlotKind::ColBlocked => Building::Partials(PartialSlot::new(decl.kind, grid_m, width, ctx.acc)),
            SlotKind::Gather => Building::Gathered(vec![f64::NAN; p.m]),
        });
    }
    let out_width = ctx.program.output_width(p.n)?;
    let mut main = ctx.program.stores_main().then(|| vec![0.0; p.m * out_width]);

    let mut outputs = outputs;
    outputs.sort_by_key(|o| o.coord);
    for o in outputs {
        record.merge(&o.record);
        if let Some(main) = main.as_mut() {
            let (c0, t) = &o.main;
            write_block(main, out_width, o.row0, *c0, t);
        }
        for (slot, c0, t) in &o.tiles {
            if let Building::Tensor(w, data) = &mut aux[*slot] {
                write_block(data, *w, o.row0, *c0, t);
            }
        }
        for (slot, b0, sums, counts) in &o.row_partials {
            if let Building::Partials(ps) = &mut aux[*slot] {
                let nb = counts.len() / o.rows;
                for i in 0..o.rows {
                    for b in 0..nb {
                        let at = (o.row0 + i) * ps.cols + b0 + b;
                        ps.values[at] = sums[i * nb + b];
                        ps.counts[at] = counts[i * nb + b];
                    }
                }
            }
        }
        for (slot, b0, states, counts) in &o.lse {
            if let Building::Partials(ps) = &mut aux[*slot] {
                let nb = counts.len() / o.rows;
                for i in 0..o.rows {
                    for b in 0..nb {
                        let at = (o.row0 + i) * ps.cols + b0 + b;
                        ps.values[2 * at] = states[i * nb + b].max;
                        ps.values[2 * at + 1] = states[i * nb + b].sum;
                        ps.counts[at] = counts[i * nb + b];
                    }
                }
            }
        }
        for (slot, c0, sums, rows) in &o.col_partials {
            if let Building::Partials(ps) = &mut aux[*slot] {
                for (j, &v) in sums.iter().enumerate() {
                    let at = o.coord.i * ps.cols + c0 + j;
                    ps.values[at] = v;
                    ps.counts[at] = *rows;
                }
            }
        }
        for (slot, hits) in &o.gathers {
            if let Building::Gathered(data) = &mut aux[*slot] {
                for &(i, val) in hits {
                    data[o.row0 + i] = val;
                }
            }
        }
    }

    let main = match main {
        Some(data) => Some(Matrix::from_vec(p.m, out_width, data, ctx.store)?),
        None => None,
    };
    let mut named = BTreeMap::new();
    for (decl, b) in ctx.program.slots().iter().zip(aux) {
        let out = match b {
            Building::Tensor(w, data) => AuxOutput::Tensor(Matrix::from_vec(p.m, w, data, ctx.store)?),
            Building::Partials(ps) => AuxOutput::Partials(ps),
            Building::Gathered(data) => AuxOutput::Gathered(Vector::from_vec(data, ctx.acc)),
        };
        named.insert(decl.name.clone(), out);
    }
    Ok(KernelResult {
        main,
        aux: named,
        ledger: TrafficLedger::from_records(vec![record]),
    })
}

fn write_block(dst: &mut [f64], stride: usize, row0: usize, col0: usize, t: &Tile) {
    for i in 0..t.rows {
        let at = (row0 + i) * stride + col0;
        dst[at..at + t.cols].copy_from_slice(t.row(i));
    }
}
