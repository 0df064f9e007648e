//! Exact 2-D traversal of the pixel grid along a segment.
//!
//! The walker merges the parametric crossings of vertical and horizontal grid
//! lines (Amanatides–Woo) and yields every pixel whose open interior the
//! segment passes through, together with the parameter interval spent there.
//! Simultaneous crossings (a segment through a pixel corner) step diagonally,
//! so pixels that are only touched at a corner are never reported. A segment
//! lying exactly on a grid line touches no interior at all.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub col: i64,
    pub row: i64,
    /// Parameter interval `[t0, t1] ⊆ [0, 1]` of the segment inside this cell.
    pub t0: f64,
    pub t1: f64,
}

#[derive(Debug, Clone)]
pub struct GridWalk {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    kx: i64,
    ky: i64,
    sx: i64,
    sy: i64,
    t: f64,
    done: bool,
}

impl GridWalk {
    /// Walk from `(x0, y0)` to `(x1, y1)`, both given in pixel units.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let dx = x1 - x0;
        let dy = y1 - y0;
        let on_vertical_line = dx == 0.0 && x0.fract() == 0.0;
        let on_horizontal_line = dy == 0.0 && y0.fract() == 0.0;
        let sx = if dx > 0.0 {
            1
        } else if dx < 0.0 {
            -1
        } else {
            0
        };
        let sy = if dy > 0.0 {
            1
        } else if dy < 0.0 {
            -1
        } else {
            0
        };
        let first = |p: f64, s: i64| -> i64 {
            match s {
                1 => p.floor() as i64 + 1,
                -1 => p.ceil() as i64 - 1,
                _ => 0,
            }
        };
        GridWalk {
            x0,
            y0,
            dx,
            dy,
            kx: first(x0, sx),
            ky: first(y0, sy),
            sx,
            sy,
            t: 0.0,
            done: on_vertical_line || on_horizontal_line,
        }
    }

    fn tx(&self) -> f64 {
        if self.sx == 0 {
            f64::INFINITY
        } else {
            (self.kx as f64 - self.x0) / self.dx
        }
    }

    fn ty(&self) -> f64 {
        if self.sy == 0 {
            f64::INFINITY
        } else {
            (self.ky as f64 - self.y0) / self.dy
        }
    }
}

impl Iterator for GridWalk {
    type Item = GridCell;

    fn next(&mut self) -> Option<GridCell> {
        while !self.done {
            let tx = self.tx();
            let ty = self.ty();
            let t_next = tx.min(ty).min(1.0);
            let t0 = self.t;
            if tx <= t_next {
                self.kx += self.sx;
            }
            if ty <= t_next {
                self.ky += self.sy;
            }
            self.t = t_next;
            if t_next >= 1.0 {
                self.done = true;
            }
            if t_next > t0 {
                let tm = 0.5 * (t0 + t_next);
                let col = (self.x0 + self.dx * tm).floor() as i64;
                let row = (self.y0 + self.dy * tm).floor() as i64;
                return Some(GridCell {
                    col,
                    row,
                    t0,
                    t1: t_next,
                });
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<(i64, i64)> {
        GridWalk::new(x0, y0, x1, y1)
            .map(|c| (c.col, c.row))
            .collect()
    }

    #[test]
    fn horizontal_run() {
        assert_eq!(
            cells(0.5, 0.5, 3.5, 0.5),
            vec![(0, 0), (1, 0), (2, 0), (3, 0)]
        );
    }

    #[test]
    fn diagonal_through_corners_skips_side_cells() {
        assert_eq!(cells(0.5, 0.5, 2.5, 2.5), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn segment_on_grid_line_touches_nothing() {
        assert!(cells(1.0, 0.2, 1.0, 5.0).is_empty());
        assert!(cells(0.0, 3.0, 4.0, 3.0).is_empty());
    }

    #[test]
    fn intervals_partition_unit_range() {
        let walk: Vec<_> = GridWalk::new(0.3, 7.9, 11.2, 1.4).collect();
        assert_eq!(walk.first().unwrap().t0, 0.0);
        assert_eq!(walk.last().unwrap().t1, 1.0);
        for w in walk.windows(2) {
            assert_eq!(w[0].t1, w[1].t0);
            let step = (w[1].col - w[0].col).abs() + (w[1].row - w[0].row).abs();
            assert!(step == 1 || step == 2);
        }
    }

    #[test]
    fn degenerate_point() {
        assert_eq!(cells(2.5, 3.5, 2.5, 3.5), vec![(2, 3)]);
    }
}
