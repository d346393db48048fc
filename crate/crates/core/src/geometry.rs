//! Planar primitives for ray casting and collision tests.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Rotates `self` by the rotation that maps +x onto the unit vector `dir`.
    pub fn rotate_by(self, dir: Vec2) -> Vec2 {
        Vec2::new(dir.x * self.x - dir.y * self.y, dir.y * self.x + dir.x * self.y)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub const fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }
}

/// Distance along a unit ray to its first intersection with `seg`.
pub fn ray_segment(origin: Vec2, dir: Vec2, seg: &Segment) -> Option<f64> {
    let e = seg.b - seg.a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = seg.a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    if t >= 0.0 && (-1e-12..=1.0 + 1e-12).contains(&u) {
        Some(t)
    } else {
        None
    }
}

/// Rectangle with a center, a unit heading and full length/width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: Vec2,
    pub length: f64,
    pub width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = self.heading * (self.length / 2.0);
        let s = self.heading.perp() * (self.width / 2.0);
        let c = self.center;
        [c + f + s, c - f + s, c - f - s, c + f - s]
    }

    pub fn edges(&self) -> [Segment; 4] {
        let k = self.corners();
        [
            Segment::new(k[0], k[1]),
            Segment::new(k[1], k[2]),
            Segment::new(k[2], k[3]),
            Segment::new(k[3], k[0]),
        ]
    }

    /// Cheap reject radius: half the diagonal.
    pub fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    pub fn ray_hit(&self, origin: Vec2, dir: Vec2, max_range: f64) -> Option<f64> {
        // bounding-circle reject before testing the four edges
        let to_c = self.center - origin;
        let along = to_c.dot(dir);
        let r = self.radius();
        if along < -r || along - r > max_range {
            return None;
        }
        let lateral = to_c.cross(dir).abs();
        if lateral > r {
            return None;
        }
        self.edges()
            .iter()
            .filter_map(|e| ray_segment(origin, dir, e))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let p = c.dot(axis);
        (lo.min(p), hi.max(p))
    })
}

/// Separating-axis overlap test for two oriented rectangles.
pub fn rects_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    if (a.center - b.center).norm() > a.radius() + b.radius() {
        return false;
    }
    let ca = a.corners();
    let cb = b.corners();
    let axes = [a.heading, a.heading.perp(), b.heading, b.heading.perp()];
    axes.iter().all(|&axis| {
        let (a0, a1) = project(&ca, axis);
        let (b0, b1) = project(&cb, axis);
        a1 >= b0 && b1 >= a0
    })
}
