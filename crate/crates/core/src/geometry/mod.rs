//! Canvas geometry: placing grids on a fixed-size canvas under scale,
//! translation, flip/rotation and color augmentation, and decoding per-cell
//! predictions back into a raw grid.
//!
//! The canvas alphabet has twelve symbols: the ten ARC colors, `BG` for
//! empty canvas and `BD` for the one-cell L-shaped border drawn just outside
//! the right and bottom edges of a target grid. The border is what lets a
//! prediction encode its own output shape.

mod dihedral;
pub mod dump;

pub use dihedral::{apply_color_perm, apply_dihedral, ColorPerm, Dihedral, NotABijection};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Grid, NUM_COLORS};

pub const BG: u8 = 10;
pub const BD: u8 = 11;
pub const NUM_SYMBOLS: usize = 12;
pub const DEFAULT_CANVAS_SIZE: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("scale must be at least 1")]
    ZeroScale,
    #[error("{rows}x{cols} grid at scale {scale} does not fit a {canvas}x{canvas} canvas")]
    ScaleOverflow { rows: usize, cols: usize, scale: usize, canvas: usize },
    #[error("placement at ({row0}, {col0}) with extent {height}x{width} leaves the {canvas}x{canvas} canvas")]
    PlacementOverflow { row0: usize, col0: usize, height: usize, width: usize, canvas: usize },
    #[error("no scale/offset keeps a {rows}x{cols} grid visible on a {canvas}x{canvas} canvas")]
    NoFeasibleView { rows: usize, cols: usize, canvas: usize },
    #[error("canvas is {found}x{found}, expected {expected}x{expected}")]
    CanvasSize { expected: usize, found: usize },
}

/// Why a predicted canvas could not be turned back into a grid.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeFailure {
    #[error("no border symbol predicted")]
    NoBorder,
    #[error("predicted extent is not a multiple of the view scale")]
    Misaligned,
    #[error("predicted border lies at or before the placement origin")]
    Degenerate,
}

/// A square field of canvas symbols, all `BG` until something is placed.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Canvas {
    size: usize,
    cells: Vec<u8>,
}

impl Canvas {
    pub fn new(size: usize) -> Canvas {
        Canvas { size, cells: vec![BG; size * size] }
    }

    pub fn from_cells(size: usize, cells: Vec<u8>) -> Canvas {
        assert_eq!(cells.len(), size * size);
        assert!(cells.iter().all(|&c| (c as usize) < NUM_SYMBOLS));
        Canvas { size, cells }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, symbol: u8) {
        debug_assert!((symbol as usize) < NUM_SYMBOLS);
        self.cells[row * self.size + col] = symbol;
    }

    /// Cells that are not background.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.cells.iter().map(|&c| c != BG).collect()
    }
}

impl std::fmt::Debug for Canvas {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Canvas({})", self.size)?;
        f.write_str(&dump::canvas_to_text(self))
    }
}

/// One sampled augmentation of a task pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewTransform {
    pub dihedral: Dihedral,
    pub color: ColorPerm,
    pub scale: usize,
    /// Upper-left corner `(row, col)` of the placed grid.
    pub offset: (usize, usize),
}

impl ViewTransform {
    pub fn identity() -> ViewTransform {
        ViewTransform { dihedral: Dihedral::Identity, color: ColorPerm::IDENTITY, scale: 1, offset: (0, 0) }
    }

    pub fn with_symmetry(mut self, dihedral: Dihedral, color: ColorPerm) -> ViewTransform {
        self.dihedral = dihedral;
        self.color = color;
        self
    }

    /// Dihedral then color permutation, without scaling.
    pub fn transform_grid(&self, g: &Grid) -> Grid {
        apply_color_perm(&apply_dihedral(g, self.dihedral), &self.color)
    }

    /// Inverse of [`ViewTransform::transform_grid`].
    pub fn untransform_grid(&self, g: &Grid) -> Grid {
        apply_dihedral(&apply_color_perm(g, &self.color.inverse()), self.dihedral.inverse())
    }
}

/// Duplicates every cell into an `s x s` block.
pub fn scale_grid(g: &Grid, s: usize) -> Result<Grid, GeometryError> {
    if s == 0 {
        return Err(GeometryError::ZeroScale);
    }
    if s == 1 {
        return Ok(g.clone());
    }
    let (rows, cols) = (g.rows() * s, g.cols() * s);
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let src = g.row(r / s);
        for c in 0..cols {
            cells.push(src[c / s]);
        }
    }
    Ok(Grid::new(rows, cols, cells).expect("scaling preserves validity"))
}

/// Most frequent color of each `s x s` block (lowest color on ties).
pub fn downsample_majority(g: &Grid, s: usize) -> Result<Grid, GeometryError> {
    if s == 0 {
        return Err(GeometryError::ZeroScale);
    }
    let (rows, cols) = (g.rows() / s, g.cols() / s);
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut counts = [0usize; NUM_COLORS];
            for dr in 0..s {
                for dc in 0..s {
                    counts[g.get(r * s + dr, c * s + dc) as usize] += 1;
                }
            }
            cells.push(argmax_first(&counts) as u8);
        }
    }
    Grid::new(rows, cols, cells).map_err(|_| GeometryError::ZeroScale)
}

fn argmax_first<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_fit(
    (rows, cols): (usize, usize),
    scale: usize,
    offset: (usize, usize),
    border: usize,
    canvas: usize,
) -> Result<(), GeometryError> {
    if scale == 0 {
        return Err(GeometryError::ZeroScale);
    }
    let (height, width) = (rows * scale + border, cols * scale + border);
    if height > canvas || width > canvas {
        return Err(GeometryError::ScaleOverflow { rows, cols, scale, canvas });
    }
    if offset.0 + height > canvas || offset.1 + width > canvas {
        return Err(GeometryError::PlacementOverflow {
            row0: offset.0,
            col0: offset.1,
            height,
            width,
            canvas,
        });
    }
    Ok(())
}

fn paint(canvas: &mut Canvas, g: &Grid, v: &ViewTransform) {
    let (r0, c0) = v.offset;
    let s = v.scale;
    for r in 0..g.rows() * s {
        let src = g.row(r / s);
        for c in 0..g.cols() * s {
            canvas.set(r0 + r, c0 + c, src[c / s]);
        }
    }
}

/// Places the view-transformed input grid on a blank canvas.
pub fn place_input(g: &Grid, v: &ViewTransform, canvas_size: usize) -> Result<Canvas, GeometryError> {
    let t = v.transform_grid(g);
    check_fit(t.shape(), v.scale, v.offset, 0, canvas_size)?;
    let mut canvas = Canvas::new(canvas_size);
    paint(&mut canvas, &t, v);
    Ok(canvas)
}

/// Places the view-transformed target grid plus its `BD` border: the row just
/// below and the column just right of the scaled grid, corner included.
pub fn place_target(g: &Grid, v: &ViewTransform, canvas_size: usize) -> Result<Canvas, GeometryError> {
    let t = v.transform_grid(g);
    check_fit(t.shape(), v.scale, v.offset, 1, canvas_size)?;
    let mut canvas = Canvas::new(canvas_size);
    paint(&mut canvas, &t, v);
    let (r0, c0) = v.offset;
    let (h, w) = (t.rows() * v.scale, t.cols() * v.scale);
    for c in c0..=c0 + w {
        canvas.set(r0 + h, c, BD);
    }
    for r in r0..=r0 + h {
        canvas.set(r, c0 + w, BD);
    }
    Ok(canvas)
}

/// Geometric augmentation settings for view sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSampling {
    pub canvas_size: usize,
    /// Upper bound on the sampled scale.
    pub max_scale: usize,
    /// Sample the scale; otherwise use `fixed_scale` (reduced if it does not fit).
    pub scale_aug: bool,
    pub fixed_scale: usize,
    /// Sample the offset; otherwise place at the origin.
    pub translate_aug: bool,
}

impl Default for ViewSampling {
    fn default() -> Self {
        ViewSampling {
            canvas_size: DEFAULT_CANVAS_SIZE,
            max_scale: 8,
            scale_aug: true,
            fixed_scale: 1,
            translate_aug: true,
        }
    }
}

impl ViewSampling {
    /// Largest scale keeping the input (and the bordered target, if known) on the canvas.
    pub fn max_feasible_scale(&self, in_shape: (usize, usize), out_shape: Option<(usize, usize)>) -> usize {
        let s = self.canvas_size;
        let mut limit = s / in_shape.0.max(in_shape.1).max(1);
        if let Some((h, w)) = out_shape {
            limit = limit.min(s.saturating_sub(1) / h.max(w).max(1));
        }
        limit
    }
}

/// Samples scale and offset for a pair with the given (already
/// flipped/rotated) shapes. Dihedral and color are left at identity.
///
/// The scale is uniform over `1..=min(max feasible, max_scale)`; the offset is
/// uniform over every corner that keeps the input and, when `out_shape` is
/// given, the target plus its border fully on the canvas. Input and target
/// share scale and offset.
pub fn sample_view<R: Rng + ?Sized>(
    rng: &mut R,
    in_shape: (usize, usize),
    out_shape: Option<(usize, usize)>,
    opts: &ViewSampling,
) -> Result<ViewTransform, GeometryError> {
    let feasible = opts.max_feasible_scale(in_shape, out_shape);
    if feasible == 0 {
        return Err(GeometryError::NoFeasibleView {
            rows: in_shape.0,
            cols: in_shape.1,
            canvas: opts.canvas_size,
        });
    }
    let scale = if opts.scale_aug {
        rng.random_range(1..=feasible.min(opts.max_scale.max(1)))
    } else {
        opts.fixed_scale.clamp(1, feasible)
    };
    let (mut height, mut width) = (in_shape.0 * scale, in_shape.1 * scale);
    if let Some((h, w)) = out_shape {
        height = height.max(h * scale + 1);
        width = width.max(w * scale + 1);
    }
    let offset = if opts.translate_aug {
        (
            rng.random_range(0..=opts.canvas_size - height),
            rng.random_range(0..=opts.canvas_size - width),
        )
    } else {
        (0, 0)
    };
    Ok(ViewTransform { scale, offset, ..ViewTransform::identity() })
}

/// Per-cell probability vectors over the twelve canvas symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbField {
    size: usize,
    probs: Vec<f32>,
}

impl ProbField {
    /// Row-wise softmax of `[size * size, 12]` logits.
    pub fn from_logits(size: usize, logits: &[f32]) -> ProbField {
        assert_eq!(logits.len(), size * size * NUM_SYMBOLS);
        let mut probs = logits.to_vec();
        for cell in probs.chunks_mut(NUM_SYMBOLS) {
            let max = cell.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for p in cell.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in cell.iter_mut() {
                *p /= sum;
            }
        }
        ProbField { size, probs }
    }

    pub fn one_hot(canvas: &Canvas) -> ProbField {
        let mut probs = vec![0.0; canvas.size() * canvas.size() * NUM_SYMBOLS];
        for (i, &c) in canvas.cells().iter().enumerate() {
            probs[i * NUM_SYMBOLS + c as usize] = 1.0;
        }
        ProbField { size: canvas.size(), probs }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.size + col) * NUM_SYMBOLS;
        &self.probs[i..i + NUM_SYMBOLS]
    }

    pub fn argmax_canvas(&self) -> Canvas {
        let cells = self.probs.chunks(NUM_SYMBOLS).map(|p| argmax_first(p) as u8).collect();
        Canvas::from_cells(self.size, cells)
    }
}

/// Recovers a raw grid from a predicted field under the view that produced it.
///
/// The output extent runs from the view offset to the last row and column
/// holding a `BD` argmax, exclusive. Each raw cell averages the probability
/// vectors of its `s x s` block, restricted to the ten colors, and the view's
/// color permutation and dihedral are then undone.
pub fn decode_prediction(p: &ProbField, v: &ViewTransform) -> Result<Grid, DecodeFailure> {
    let argmax = p.argmax_canvas();
    let n = p.size();
    let (mut last_row, mut last_col) = (None, None);
    for r in 0..n {
        for c in 0..n {
            if argmax.get(r, c) == BD {
                last_row = Some(last_row.map_or(r, |x: usize| x.max(r)));
                last_col = Some(last_col.map_or(c, |x: usize| x.max(c)));
            }
        }
    }
    let (Some(r_end), Some(c_end)) = (last_row, last_col) else {
        return Err(DecodeFailure::NoBorder);
    };
    let (r0, c0) = v.offset;
    if r_end <= r0 || c_end <= c0 {
        return Err(DecodeFailure::Degenerate);
    }
    let s = v.scale.max(1);
    let (h, w) = (r_end - r0, c_end - c0);
    if h % s != 0 || w % s != 0 {
        return Err(DecodeFailure::Misaligned);
    }
    let (rows, cols) = (h / s, w / s);
    let mut cells = Vec::with_capacity(rows * cols);
    let mut acc = [0f32; NUM_COLORS];
    for i in 0..rows {
        for j in 0..cols {
            acc.fill(0.0);
            for dr in 0..s {
                for dc in 0..s {
                    let probs = p.cell(r0 + i * s + dr, c0 + j * s + dc);
                    for (a, &q) in acc.iter_mut().zip(probs) {
                        *a += q;
                    }
                }
            }
            // Renormalizing over colors is a common positive factor, so the
            // argmax of the raw block sums is the same color.
            cells.push(argmax_first(&acc) as u8);
        }
    }
    let g = Grid::new(rows, cols, cells).expect("decoded colors are in range");
    Ok(v.untransform_grid(&g))
}
