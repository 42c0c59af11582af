use rand::Rng as _;

use super::scene::{Scene, NUM_CLASSES};
use crate::rng::Rng;

/// Random draws attempted before falling back to a full scan.
pub const REJECTION_CAP: usize = 1000;

/// Top-left corner of a crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Window {
    pub row: usize,
    pub col: usize,
}

/// The scene has no `P × P` window with more than one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSkipped {
    pub scene: String,
}

/// Draws crop positions whose label window contains at least two classes.
/// Window class counts come from per-class summed-area tables.
pub struct CropSampler {
    scene: String,
    patch: usize,
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    tables: Vec<Vec<u32>>,
}

impl CropSampler {
    pub fn new(scene: &Scene, patch: usize) -> Self {
        let (h, w) = (scene.height, scene.width);
        let stride = w + 1;
        let mut tables = vec![vec![0u32; (h + 1) * stride]; NUM_CLASSES];
        for (k, t) in tables.iter_mut().enumerate() {
            for r in 0..h {
                let mut run = 0u32;
                for c in 0..w {
                    run += (scene.labels[r * w + c] as usize == k) as u32;
                    t[(r + 1) * stride + c + 1] = t[r * stride + c + 1] + run;
                }
            }
        }
        let (rows, cols) = if h >= patch && w >= patch && patch > 0 { (h - patch + 1, w - patch + 1) } else { (0, 0) };
        Self { scene: scene.id.clone(), patch, rows, cols, height: h, width: stride, tables }
    }

    fn count(&self, k: usize, win: Window) -> u32 {
        let (t, s, p) = (&self.tables[k], self.width, self.patch);
        let (r0, c0, r1, c1) = (win.row, win.col, win.row + p, win.col + p);
        t[r1 * s + c1] + t[r0 * s + c0] - t[r0 * s + c1] - t[r1 * s + c0]
    }

    pub fn classes_in(&self, win: Window) -> usize {
        (0..NUM_CLASSES).filter(|&k| self.count(k, win) > 0).count()
    }

    pub fn is_valid(&self, win: Window) -> bool {
        self.classes_in(win) >= 2
    }

    pub fn valid_windows(&self) -> Vec<Window> {
        let mut out = Vec::new();
        for row in 0..self.rows {
            for col in 0..self.cols {
                let w = Window { row, col };
                if self.is_valid(w) {
                    out.push(w);
                }
            }
        }
        out
    }

    /// Number of valid windows covering each pixel, row-major over the scene.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w, p) = (self.height, self.width - 1, self.patch);
        let s = self.cols + 1;
        let mut sat = vec![0u32; (self.rows + 1) * s];
        for row in 0..self.rows {
            let mut run = 0;
            for col in 0..self.cols {
                run += self.is_valid(Window { row, col }) as u32;
                sat[(row + 1) * s + col + 1] = sat[row * s + col + 1] + run;
            }
        }
        let mut out = vec![0u32; h * w];
        if self.rows == 0 {
            return out;
        }
        for r in 0..h {
            let (r0, r1) = (r.saturating_sub(p - 1), r.min(self.rows - 1) + 1);
            for c in 0..w {
                let (c0, c1) = (c.saturating_sub(p - 1), c.min(self.cols - 1) + 1);
                out[r * w + c] = sat[r1 * s + c1] + sat[r0 * s + c0] - sat[r0 * s + c1] - sat[r1 * s + c0];
            }
        }
        out
    }

    /// A uniformly chosen valid window.
    pub fn draw(&self, rng: &mut Rng) -> Result<Window, SceneSkipped> {
        if self.rows > 0 {
            for _ in 0..REJECTION_CAP {
                let w = Window { row: rng.random_range(0..self.rows), col: rng.random_range(0..self.cols) };
                if self.is_valid(w) {
                    return Ok(w);
                }
            }
            let valid = self.valid_windows();
            if !valid.is_empty() {
                return Ok(valid[rng.random_range(0..valid.len())]);
            }
        }
        Err(SceneSkipped { scene: self.scene.clone() })
    }
}
