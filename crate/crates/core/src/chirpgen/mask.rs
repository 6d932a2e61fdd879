//! Ground-truth patch masks: which P×P patches of the (resized) image the
//! chirp's time-frequency curve passes through.

use crate::chirpgen::types::{ChirpSpec, PlotGeometry};

/// Boolean P×P patch grid, row-major (row 0 = top of the image).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub p: usize,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn new(p: usize) -> PatchMask {
        PatchMask {
            p,
            cells: vec![false; p * p],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.p + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.cells[row * self.p + col] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Marked cells as (row, col) pairs in row-major order.
    pub fn marked(&self) -> Vec<(usize, usize)> {
        (0..self.p * self.p)
            .filter(|i| self.cells[*i])
            .map(|i| (i / self.p, i % self.p))
            .collect()
    }

    /// True when the marked cells form one 8-connected component.
    pub fn is_connected(&self) -> bool {
        let marked = self.marked();
        let Some(&start) = marked.first() else {
            return true;
        };
        let mut seen = vec![false; self.p * self.p];
        let mut stack = vec![start];
        seen[start.0 * self.p + start.1] = true;
        let mut reached = 0usize;
        while let Some((r, c)) = stack.pop() {
            reached += 1;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= self.p as i64 || nc >= self.p as i64 {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if self.get(nr, nc) && !seen[nr * self.p + nc] {
                        seen[nr * self.p + nc] = true;
                        stack.push((nr, nc));
                    }
                }
            }
        }
        reached == marked.len()
    }
}

/// Marks every patch whose pixel footprint intersects the chirp's
/// instantaneous-frequency curve (mapped through `geometry` and dilated by
/// `half_width_px`, Chebyshev). Only pixels inside `data_rect` count, so a
/// patch wholly inside a distractor band is never marked. A zero-duration
/// chirp has no curve and yields an empty mask.
pub fn chirp_patch_mask(
    spec: &ChirpSpec,
    geometry: &PlotGeometry,
    grid_p: usize,
    half_width_px: f64,
) -> PatchMask {
    let mut mask = PatchMask::new(grid_p);
    if spec.duration <= 0.0 || grid_p == 0 || geometry.data_rect.is_empty() {
        return mask;
    }
    let (cw, ch) = (geometry.canvas_w, geometry.canvas_h);
    let data = &geometry.data_rect;
    let mut hit = vec![false; cw * ch];
    // Dense enough that consecutive samples land under a pixel apart.
    let steps = 4 * (data.w + data.h).max(64);
    let hw = half_width_px.max(0.0);
    for i in 0..=steps {
        let tau = spec.duration * i as f64 / steps as f64;
        let t = spec.start_time + tau;
        let f = spec.instantaneous_freq(tau);
        let x = geometry.time_to_x(t);
        let y = geometry.freq_to_y(f);
        let x0 = (x - hw).ceil() as i64;
        let x1 = (x + hw).floor() as i64;
        let y0 = (y - hw).ceil() as i64;
        let y1 = (y + hw).floor() as i64;
        for py in y0..=y1 {
            for px in x0..=x1 {
                if px >= 0 && py >= 0 {
                    let (px, py) = (px as usize, py as usize);
                    if data.contains(px, py) {
                        hit[py * cw + px] = true;
                    }
                }
            }
        }
    }
    for (idx, _) in hit.iter().enumerate().filter(|(_, &h)| h) {
        let (px, py) = (idx % cw, idx / cw);
        let col = px * grid_p / cw;
        let row = py * grid_p / ch;
        mask.set(row, col, true);
    }
    mask
}
