use crate::error::{Error, Result};

/// Half-open rectangle in scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }
}

/// A `P × P` window at `(row, col)` of which only `keep` is written to the output.
/// Windows of an axis shorter than `P` start at 0 and are reflect-padded past the scene edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub keep: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub overlap: usize,
    pub tiles: Vec<Tile>,
}

/// Tile origins and kept spans `(origin, keep_start, keep_end)` along one axis.
/// Kept spans meet at the midpoint of each overlap.
fn axis(len: usize, patch: usize, overlap: usize) -> Vec<(usize, usize, usize)> {
    if len <= patch {
        return vec![(0, 0, len)];
    }
    let stride = patch - overlap;
    let mut origins = vec![0];
    while origins.last().unwrap() + patch < len {
        origins.push((origins.last().unwrap() + stride).min(len - patch));
    }
    let cuts: Vec<usize> = origins.windows(2).map(|w| (w[1] + w[0] + patch) / 2).collect();
    origins
        .iter()
        .enumerate()
        .map(|(i, &o)| (o, if i == 0 { 0 } else { cuts[i - 1] }, if i + 1 == origins.len() { len } else { cuts[i] }))
        .collect()
}

pub fn plan_tiles(height: usize, width: usize, patch: usize, overlap: usize) -> Result<TilingPlan> {
    if patch == 0 || height == 0 || width == 0 {
        return Err(Error::Parameter("tiling needs a positive scene and tile size".into()));
    }
    if overlap >= patch {
        return Err(Error::Parameter(format!("overlap {overlap} must be smaller than the tile size {patch}")));
    }
    if overlap % 2 != 0 {
        return Err(Error::Parameter(format!("overlap {overlap} must be even")));
    }
    let (rows, cols) = (axis(height, patch, overlap), axis(width, patch, overlap));
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &(row, row0, row1) in &rows {
        for &(col, col0, col1) in &cols {
            tiles.push(Tile { row, col, keep: Rect { row0, row1, col0, col1 } });
        }
    }
    Ok(TilingPlan { height, width, patch, overlap, tiles })
}

/// Source index for position `i` of an axis of length `len` under mirror reflection
/// without edge repetition.
pub fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}
