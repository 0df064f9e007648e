//! Exterior walls of the building mask and single-bounce rays via the image
//! method.

use super::{fspl_unchecked, los_clear_unchecked, OracleConfig, Ray};
use crate::scene::{distance_3d, Point3, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WallAxis {
    /// Wall along x at constant y.
    Horizontal,
    /// Wall along y at constant x.
    Vertical,
}

/// A maximal axis-aligned run of building boundary facing open ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub axis: WallAxis,
    /// Constant coordinate of the wall line, meters.
    pub coord: f64,
    /// Extent along the wall, meters, `start < end`.
    pub start: f64,
    pub end: f64,
    /// +1 if the open side is toward increasing `coord`, −1 otherwise.
    pub facing: f64,
}

impl Wall {
    /// (along, across) coordinates of a point in the wall's frame.
    fn frame(&self, p: &Point3) -> (f64, f64) {
        match self.axis {
            WallAxis::Horizontal => (p.x, p.y),
            WallAxis::Vertical => (p.y, p.x),
        }
    }

    fn point(&self, along: f64, across: f64, z: f64) -> Point3 {
        match self.axis {
            WallAxis::Horizontal => Point3::new(along, across, z),
            WallAxis::Vertical => Point3::new(across, along, z),
        }
    }

    /// Mirror image of `p` across the wall plane.
    pub fn mirror(&self, p: &Point3) -> Point3 {
        let (along, across) = self.frame(p);
        self.point(along, 2.0 * self.coord - across, p.z)
    }

    /// Unit normal pointing to the open side, in the ground plane.
    pub fn normal(&self) -> (f64, f64) {
        match self.axis {
            WallAxis::Horizontal => (0.0, self.facing),
            WallAxis::Vertical => (self.facing, 0.0),
        }
    }
}

/// Scan the mask for boundary runs between building and open pixels. Pixels
/// beyond the raster count as open.
pub fn extract_walls(scene: &Scene) -> Vec<Wall> {
    let (w, h) = (scene.width_px, scene.height_px);
    let res = scene.resolution_m;
    let b = |col: isize, row: isize| -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < w
            && (row as usize) < h
            && scene.is_building(col as usize, row as usize)
    };
    let mut walls = Vec::new();
    // Horizontal walls on lines y = j, between rows j−1 (below) and j (above).
    for j in 0..=h as isize {
        let mut run: Option<(usize, f64)> = None;
        for i in 0..=w {
            let facing = if i < w {
                let below = b(i as isize, j - 1);
                let above = b(i as isize, j);
                match (below, above) {
                    (true, false) => Some(1.0),
                    (false, true) => Some(-1.0),
                    _ => None,
                }
            } else {
                None
            };
            if let Some((start, f)) = run {
                if facing != Some(f) {
                    walls.push(Wall {
                        axis: WallAxis::Horizontal,
                        coord: j as f64 * res,
                        start: start as f64 * res,
                        end: i as f64 * res,
                        facing: f,
                    });
                    run = None;
                }
            }
            if run.is_none() {
                run = facing.map(|f| (i, f));
            }
        }
    }
    // Vertical walls on lines x = i, between columns i−1 (left) and i (right).
    for i in 0..=w as isize {
        let mut run: Option<(usize, f64)> = None;
        for j in 0..=h {
            let facing = if j < h {
                match (b(i - 1, j as isize), b(i, j as isize)) {
                    (true, false) => Some(1.0),
                    (false, true) => Some(-1.0),
                    _ => None,
                }
            } else {
                None
            };
            if let Some((start, f)) = run {
                if facing != Some(f) {
                    walls.push(Wall {
                        axis: WallAxis::Vertical,
                        coord: i as f64 * res,
                        start: start as f64 * res,
                        end: j as f64 * res,
                        facing: f,
                    });
                    run = None;
                }
            }
            if run.is_none() {
                run = facing.map(|f| (j, f));
            }
        }
    }
    walls
}

/// A geometrically possible reflection whose legs have not been checked for
/// blockage yet.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub tx: Point3,
    pub rx: Point3,
    pub bounce: Point3,
    pub length_m: f64,
    pub wall: Wall,
}

impl Candidate {
    pub fn validate(&self, scene: &Scene, cfg: &OracleConfig) -> Option<Ray> {
        // Test the legs against a point nudged off the wall so the walker does
        // not report the building pixel the bounce point borders.
        let (nx, ny) = self.wall.normal();
        let eps = 1e-9 * scene.resolution_m;
        let probe = Point3::new(
            self.bounce.x + nx * eps,
            self.bounce.y + ny * eps,
            self.bounce.z,
        );
        if !scene.contains_2d(probe.x, probe.y) {
            return None;
        }
        if !los_clear_unchecked(scene, &self.tx, &probe)
            || !los_clear_unchecked(scene, &probe, &self.rx)
        {
            return None;
        }
        Some(Ray {
            vertices: vec![self.tx, self.bounce, self.rx],
            length_m: self.length_m,
            los: false,
            base_loss_db: fspl_unchecked(self.length_m, cfg.carrier_hz) + cfg.reflection_loss_db,
            foliage_loss_db: 0.0,
        })
    }
}

pub(crate) fn candidates(walls: &[Wall], tx: &Point3, rx: &Point3) -> Vec<Candidate> {
    walls.iter().filter_map(|w| candidate(w, tx, rx)).collect()
}

fn candidate(wall: &Wall, tx: &Point3, rx: &Point3) -> Option<Candidate> {
    let (_, tx_across) = wall.frame(tx);
    let (_, rx_across) = wall.frame(rx);
    if (tx_across - wall.coord) * wall.facing <= 0.0
        || (rx_across - wall.coord) * wall.facing <= 0.0
    {
        return None;
    }
    let image = wall.mirror(tx);
    let (img_along, img_across) = wall.frame(&image);
    let (rx_along, _) = wall.frame(rx);
    let t = (wall.coord - img_across) / (rx_across - img_across);
    let along = img_along + (rx_along - img_along) * t;
    if !(along > wall.start && along < wall.end) {
        return None;
    }
    let z = image.z + (rx.z - image.z) * t;
    Some(Candidate {
        tx: *tx,
        rx: *rx,
        bounce: wall.point(along, wall.coord, z),
        length_m: distance_3d(&image, rx),
        wall: *wall,
    })
}

/// All valid single-bounce rays off the given walls (unsorted, wall order).
pub fn reflected_rays_with_walls(
    scene: &Scene,
    walls: &[Wall],
    tx: &Point3,
    rx: &Point3,
    cfg: &OracleConfig,
) -> Vec<Ray> {
    candidates(walls, tx, rx)
        .into_iter()
        .filter_map(|c| c.validate(scene, cfg))
        .collect()
}

pub fn reflected_rays(scene: &Scene, tx: &Point3, rx: &Point3, cfg: &OracleConfig) -> Vec<Ray> {
    reflected_rays_with_walls(scene, &extract_walls(scene), tx, rx, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(scene: &mut Scene, c0: usize, r0: usize, c1: usize, r1: usize, h: f64) {
        for r in r0..r1 {
            for c in c0..c1 {
                let i = scene.index(c, r);
                scene.building_mask[i] = 1;
                scene.building_height_m[i] = h;
            }
        }
    }

    #[test]
    fn single_block_has_four_walls() {
        let mut s = Scene::empty("w", 30, 30);
        block(&mut s, 10, 12, 20, 15, 20.0);
        let walls = extract_walls(&s);
        assert_eq!(walls.len(), 4);
        assert!(walls.contains(&Wall {
            axis: WallAxis::Horizontal,
            coord: 15.0,
            start: 10.0,
            end: 20.0,
            facing: 1.0
        }));
        assert!(walls.contains(&Wall {
            axis: WallAxis::Vertical,
            coord: 10.0,
            start: 12.0,
            end: 15.0,
            facing: -1.0
        }));
    }

    #[test]
    fn empty_scene_no_rays() {
        let s = Scene::empty("e", 50, 50);
        let r = reflected_rays(
            &s,
            &Point3::new(5.0, 5.0, 9.0),
            &Point3::new(40.0, 30.0, 1.5),
            &OracleConfig::default(),
        );
        assert!(r.is_empty());
    }

    #[test]
    fn mirror_point_example() {
        let s = Scene::empty("e", 100, 100);
        let wall = Wall {
            axis: WallAxis::Horizontal,
            coord: 0.0,
            start: 0.0,
            end: 100.0,
            facing: 1.0,
        };
        let tx = Point3::new(10.0, 50.0, 9.0);
        let rx = Point3::new(90.0, 50.0, 1.5);
        let rays = reflected_rays_with_walls(&s, &[wall], &tx, &rx, &OracleConfig::default());
        assert_eq!(rays.len(), 1);
        let expected = distance_3d(&Point3::new(10.0, -50.0, 9.0), &rx);
        assert!((rays[0].length_m - expected).abs() < 1e-12);
        assert_eq!(rays[0].vertices[1].y, 0.0);
        assert!((rays[0].vertices[1].x - 50.0).abs() < 1e-12);
        // Span that misses the bounce point.
        let short = Wall {
            start: 60.0,
            end: 100.0,
            ..wall
        };
        assert!(
            reflected_rays_with_walls(&s, &[short], &tx, &rx, &OracleConfig::default()).is_empty()
        );
    }
}
