use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of one output tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileShape {
    pub tile_m: usize,
    pub tile_n: usize,
}

impl TileShape {
    pub fn new(tile_m: usize, tile_n: usize) -> Result<Self> {
        let shape = Self { tile_m, tile_n };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_m == 0 || self.tile_n == 0 {
            return Err(Error::Config(format!(
                "tile shape ({}, {}) has a zero dimension",
                self.tile_m, self.tile_n
            )));
        }
        Ok(())
    }

    pub fn grid(&self, m: usize, n: usize) -> (usize, usize) {
        (m.div_ceil(self.tile_m), n.div_ceil(self.tile_n))
    }

    /// The output rectangle owned by `coord`, clipped at the matrix edge.
    pub fn region(&self, coord: TileCoord, m: usize, n: usize) -> TileRegion {
        let row0 = coord.i * self.tile_m;
        let col0 = coord.j * self.tile_n;
        TileRegion {
            row0,
            rows: self.tile_m.min(m - row0),
            col0,
            cols: self.tile_n.min(n - col0),
        }
    }
}

impl Default for TileShape {
    fn default() -> Self {
        Self {
            tile_m: 128,
            tile_n: 128,
        }
    }
}

/// Position of a tile in the tile grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub i: usize,
    pub j: usize,
}

/// Rows `[row0, row0 + rows)` and columns `[col0, col0 + cols)` of an output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRegion {
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    pub cols: usize,
}

/// Row-major enumeration of every tile covering an `m × n` output.
pub fn tile_coords(m: usize, n: usize, shape: TileShape) -> Result<Vec<TileCoord>> {
    shape.validate()?;
    if m == 0 || n == 0 {
        return Err(Error::Dimension(format!("cannot tile an empty {m}x{n} output")));
    }
    let (gm, gn) = shape.grid(m, n);
    Ok((0..gm).flat_map(|i| (0..gn).map(move |j| TileCoord { i, j })).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_tile() {
        let c = tile_coords(4, 4, TileShape::new(4, 4).unwrap()).unwrap();
        assert_eq!(c, vec![TileCoord { i: 0, j: 0 }]);
    }

    #[test]
    fn ragged_second_tile() {
        let shape = TileShape::new(4, 4).unwrap();
        let c = tile_coords(4, 6, shape).unwrap();
        assert_eq!(c, vec![TileCoord { i: 0, j: 0 }, TileCoord { i: 0, j: 1 }]);
        assert_eq!(shape.region(c[1], 4, 6).cols, 2);
    }

    #[test]
    fn large_grid() {
        let c = tile_coords(256, 256, TileShape::new(64, 128).unwrap()).unwrap();
        assert_eq!(c.len(), 4 * 2);
    }

    #[test]
    fn zero_tile_dimension_is_rejected() {
        let bad = TileShape { tile_m: 0, tile_n: 4 };
        assert!(matches!(tile_coords(4, 4, bad), Err(Error::Config(_))));
        assert!(TileShape::new(4, 0).is_err());
    }

    proptest! {
        #[test]
        fn tiles_cover_every_element_once(m in 1usize..40, n in 1usize..40, tm in 1usize..12, tn in 1usize..12) {
            let shape = TileShape::new(tm, tn).unwrap();
            let mut hits = vec![0u8; m * n];
            for coord in tile_coords(m, n, shape).unwrap() {
                let r = shape.region(coord, m, n);
                for i in r.row0..r.row0 + r.rows {
                    for j in r.col0..r.col0 + r.cols {
                        hits[i * n + j] += 1;
                    }
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }
    }
}
