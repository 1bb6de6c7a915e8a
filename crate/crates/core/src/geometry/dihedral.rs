//! Symmetries of the square and color relabelings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Grid, NUM_COLORS};

/// An element of the dihedral group of the square.
///
/// Augmentation uses the six named flips/rotations; `Transpose` and
/// `AntiTranspose` complete the group so composition is closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dihedral {
    Identity,
    /// Mirror left <-> right.
    FlipH,
    /// Mirror top <-> bottom.
    FlipV,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    Transpose,
    AntiTranspose,
}

type Mat = [[i32; 2]; 2];

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    /// The six elements used for augmentation.
    pub const AUGMENTATION: [Dihedral; 6] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
    ];

    /// Action on doubled centered coordinates `(x, y)` (x to the right, y down).
    fn matrix(self) -> Mat {
        match self {
            Dihedral::Identity => [[1, 0], [0, 1]],
            Dihedral::FlipH => [[-1, 0], [0, 1]],
            Dihedral::FlipV => [[1, 0], [0, -1]],
            Dihedral::Rot90 => [[0, -1], [1, 0]],
            Dihedral::Rot180 => [[-1, 0], [0, -1]],
            Dihedral::Rot270 => [[0, 1], [-1, 0]],
            Dihedral::Transpose => [[0, 1], [1, 0]],
            Dihedral::AntiTranspose => [[0, -1], [-1, 0]],
        }
    }

    fn from_matrix(m: Mat) -> Dihedral {
        *Dihedral::ALL.iter().find(|d| d.matrix() == m).expect("matrix is a dihedral element")
    }

    /// `self` followed by `then`.
    pub fn then(self, then: Dihedral) -> Dihedral {
        let (a, b) = (self.matrix(), then.matrix());
        let mut m = [[0; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = b[i][0] * a[0][j] + b[i][1] * a[1][j];
            }
        }
        Dihedral::from_matrix(m)
    }

    pub fn inverse(self) -> Dihedral {
        let m = self.matrix();
        Dihedral::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// Whether rows and columns trade places.
    pub fn swaps_axes(self) -> bool {
        self.matrix()[0][0] == 0
    }

    pub fn transformed_shape(self, (rows, cols): (usize, usize)) -> (usize, usize) {
        if self.swaps_axes() {
            (cols, rows)
        } else {
            (rows, cols)
        }
    }

    /// Destination of cell `(row, col)` of a `rows x cols` grid.
    pub fn map_cell(self, (rows, cols): (usize, usize), row: usize, col: usize) -> (usize, usize) {
        let m = self.matrix();
        let x = 2 * col as i64 - (cols as i64 - 1);
        let y = 2 * row as i64 - (rows as i64 - 1);
        let nx = m[0][0] as i64 * x + m[0][1] as i64 * y;
        let ny = m[1][0] as i64 * x + m[1][1] as i64 * y;
        let (out_rows, out_cols) = self.transformed_shape((rows, cols));
        (((ny + out_rows as i64 - 1) / 2) as usize, ((nx + out_cols as i64 - 1) / 2) as usize)
    }
}

pub fn apply_dihedral(g: &Grid, d: Dihedral) -> Grid {
    if d == Dihedral::Identity {
        return g.clone();
    }
    let (rows, cols) = d.transformed_shape(g.shape());
    let mut cells = vec![0u8; rows * cols];
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (nr, nc) = d.map_cell(g.shape(), r, c);
            cells[nr * cols + nc] = g.get(r, c);
        }
    }
    Grid::new(rows, cols, cells).expect("dihedral preserves validity")
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("color mapping is not a bijection on 0..=9")]
pub struct NotABijection;

/// A bijection on the ten ARC colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct ColorPerm([u8; NUM_COLORS]);

impl ColorPerm {
    pub const IDENTITY: ColorPerm = ColorPerm([0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);

    pub fn new(mapping: [u8; NUM_COLORS]) -> Result<ColorPerm, NotABijection> {
        let mut seen = [false; NUM_COLORS];
        for &m in &mapping {
            let m = m as usize;
            if m >= NUM_COLORS || seen[m] {
                return Err(NotABijection);
            }
            seen[m] = true;
        }
        Ok(ColorPerm(mapping))
    }

    /// Transposition of two colors.
    pub fn swap(a: u8, b: u8) -> ColorPerm {
        let mut m = ColorPerm::IDENTITY.0;
        m.swap(a as usize, b as usize);
        ColorPerm(m)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> ColorPerm {
        let mut m = ColorPerm::IDENTITY.0;
        m.shuffle(rng);
        ColorPerm(m)
    }

    pub fn map(&self, color: u8) -> u8 {
        self.0[color as usize]
    }

    pub fn mapping(&self) -> &[u8; NUM_COLORS] {
        &self.0
    }

    pub fn inverse(&self) -> ColorPerm {
        let mut inv = [0u8; NUM_COLORS];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m as usize] = i as u8;
        }
        ColorPerm(inv)
    }

    /// `self` followed by `then`.
    pub fn then(&self, then: &ColorPerm) -> ColorPerm {
        ColorPerm(self.0.map(|c| then.map(c)))
    }

    pub fn is_identity(&self) -> bool {
        *self == ColorPerm::IDENTITY
    }
}

impl Default for ColorPerm {
    fn default() -> Self {
        ColorPerm::IDENTITY
    }
}

impl TryFrom<Vec<u8>> for ColorPerm {
    type Error = NotABijection;

    fn try_from(v: Vec<u8>) -> Result<Self, Self::Error> {
        let arr: [u8; NUM_COLORS] = v.try_into().map_err(|_| NotABijection)?;
        ColorPerm::new(arr)
    }
}

impl From<ColorPerm> for Vec<u8> {
    fn from(p: ColorPerm) -> Vec<u8> {
        p.0.to_vec()
    }
}

pub fn apply_color_perm(g: &Grid, p: &ColorPerm) -> Grid {
    let cells = g.cells().iter().map(|&c| p.map(c)).collect();
    Grid::new(g.rows(), g.cols(), cells).expect("relabeling preserves validity")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(rows: &[&[u8]]) -> Grid {
        Grid::from_rows(rows).unwrap()
    }

    #[test]
    fn rot90_is_clockwise() {
        assert_eq!(apply_dihedral(&g(&[&[1, 2], &[3, 4]]), Dihedral::Rot90), g(&[&[3, 1], &[4, 2]]));
        // 2x3 -> 3x2
        let r = apply_dihedral(&g(&[&[1, 2, 3], &[4, 5, 6]]), Dihedral::Rot90);
        assert_eq!(r, g(&[&[4, 1], &[5, 2], &[6, 3]]));
    }

    #[test]
    fn flips() {
        let x = g(&[&[1, 2, 3], &[4, 5, 6]]);
        assert_eq!(apply_dihedral(&x, Dihedral::FlipH), g(&[&[3, 2, 1], &[6, 5, 4]]));
        assert_eq!(apply_dihedral(&x, Dihedral::FlipV), g(&[&[4, 5, 6], &[1, 2, 3]]));
        assert_eq!(apply_dihedral(&x, Dihedral::Transpose), g(&[&[1, 4], &[2, 5], &[3, 6]]));
        assert_eq!(apply_dihedral(&x, Dihedral::Rot270), g(&[&[3, 6], &[2, 5], &[1, 4]]));
    }

    #[test]
    fn group_tables() {
        assert_eq!(Dihedral::Rot90.then(Dihedral::Rot90), Dihedral::Rot180);
        assert_eq!(Dihedral::Rot90.then(Dihedral::Rot180), Dihedral::Rot270);
        assert_eq!(Dihedral::Rot90.inverse(), Dihedral::Rot270);
        assert_eq!(Dihedral::FlipH.then(Dihedral::FlipV), Dihedral::Rot180);
        for d in Dihedral::ALL {
            assert_eq!(d.then(d.inverse()), Dihedral::Identity);
            assert_eq!(Dihedral::Identity.then(d), d);
        }
    }

    #[test]
    fn color_perm_rejects_non_bijection() {
        assert_eq!(ColorPerm::new([0, 0, 2, 3, 4, 5, 6, 7, 8, 9]), Err(NotABijection));
        assert_eq!(ColorPerm::new([0, 1, 2, 3, 4, 5, 6, 7, 8, 10]), Err(NotABijection));
        let swap = ColorPerm::swap(0, 1);
        assert_eq!(apply_color_perm(&g(&[&[0, 1]]), &swap), g(&[&[1, 0]]));
    }
}
