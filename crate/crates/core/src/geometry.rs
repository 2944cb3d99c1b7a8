//! Planar geometry shared by the simulator and the scorers.
//!
//! Frames follow a "heading-up" convention: `x` points along the heading and
//! `y` points to the right of it, so positive curvature turns right.

use std::ops::{Add, Mul, Neg, Sub};

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 2]", into = "[T; 2]")]
pub struct Vec2<T: Float = f64> {
    pub x: T,
    pub y: T,
}

impl<T: Float> From<[T; 2]> for Vec2<T> {
    fn from(v: [T; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl<T: Float> From<Vec2<T>> for [T; 2] {
    fn from(v: Vec2<T>) -> Self {
        [v.x, v.y]
    }
}

impl<T: Float> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn from_angle(theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> T {
        self.dot(self).sqrt()
    }

    pub fn angle(self) -> T {
        self.y.atan2(self.x)
    }

    pub fn rotate(self, theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit vector pointing right of `self`.
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Float> Add for Vec2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Float> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Float> Mul<T> for Vec2<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

impl<T: Float> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle<T: Float>(a: T) -> T {
    let pi = T::from(std::f64::consts::PI).unwrap();
    let two_pi = pi + pi;
    let mut a = a % two_pi;
    if a > pi {
        a = a - two_pi;
    } else if a <= -pi {
        a = a + two_pi;
    }
    a
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Float = f64> {
    pub x: T,
    pub y: T,
    pub heading: T,
}

impl<T: Float> Pose<T> {
    pub fn new(x: T, y: T, heading: T) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Vec2<T> {
        Vec2::new(self.x, self.y)
    }

    /// World point expressed in this pose's frame.
    pub fn to_local(&self, p: Vec2<T>) -> Vec2<T> {
        (p - self.position()).rotate(-self.heading)
    }

    /// Point in this pose's frame expressed in the world frame.
    pub fn to_world(&self, p: Vec2<T>) -> Vec2<T> {
        p.rotate(self.heading) + self.position()
    }
}

/// Rectangle footprint centred at `center`, long side along `heading`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect<T: Float = f64> {
    pub center: Vec2<T>,
    pub heading: T,
    pub length: T,
    pub width: T,
}

impl<T: Float> OrientedRect<T> {
    pub fn new(center: Vec2<T>, heading: T, length: T, width: T) -> Self {
        Self {
            center,
            heading,
            length,
            width,
        }
    }

    fn half(&self) -> (T, T) {
        let two = T::one() + T::one();
        (self.length / two, self.width / two)
    }

    /// Corners in counter-rotational order: front-right, front-left,
    /// rear-left, rear-right (in the heading-up frame).
    pub fn corners(&self) -> [Vec2<T>; 4] {
        let (hl, hw) = self.half();
        let f = Vec2::from_angle(self.heading);
        let r = f.perp();
        let c = self.center;
        [
            c + f * hl + r * hw,
            c + f * hl - r * hw,
            c - f * hl - r * hw,
            c - f * hl + r * hw,
        ]
    }

    pub fn axes(&self) -> [Vec2<T>; 2] {
        let f = Vec2::from_angle(self.heading);
        [f, f.perp()]
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec2<T>) -> bool {
        let (hl, hw) = self.half();
        let d = p - self.center;
        let [f, r] = self.axes();
        d.dot(f).abs() < hl && d.dot(r).abs() < hw
    }

    fn project(&self, axis: Vec2<T>) -> (T, T) {
        let (hl, hw) = self.half();
        let [f, r] = self.axes();
        let c = self.center.dot(axis);
        let ext = hl * f.dot(axis).abs() + hw * r.dot(axis).abs();
        (c - ext, c + ext)
    }

    /// Separating-axis test for overlap with positive area.
    pub fn intersects(&self, other: &Self) -> bool {
        self.axes().iter().chain(other.axes().iter()).all(|&axis| {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            a1 > b0 && b1 > a0
        })
    }

    /// Whether `self` moving at `v_self` and `other` moving at `v_other`
    /// overlap at any time in `[0, horizon]`. Both rectangles translate
    /// without rotating, so per-axis overlap times are open intervals that
    /// can be intersected exactly.
    pub fn sweep_intersects(&self, v_self: Vec2<T>, other: &Self, v_other: Vec2<T>, horizon: T) -> bool {
        let w = v_other - v_self;
        let mut lo = T::neg_infinity();
        let mut hi = T::infinity();
        for &axis in self.axes().iter().chain(other.axes().iter()) {
            let (a0, a1) = self.project(axis);
            let (b0, b1) = other.project(axis);
            let s = w.dot(axis);
            // Need b0 + τs < a1 and b1 + τs > a0.
            if s == T::zero() {
                if !(a1 > b0 && b1 > a0) {
                    return false;
                }
                continue;
            }
            let t1 = (a1 - b0) / s;
            let t2 = (a0 - b1) / s;
            let (l, h) = if s > T::zero() { (t2, t1) } else { (t1, t2) };
            lo = lo.max(l);
            hi = hi.min(h);
        }
        lo < hi && lo < horizon && hi > T::zero()
    }
}

/// Crossing-number point-in-polygon test.
pub fn point_in_polygon<T: Float>(p: Vec2<T>, poly: &[Vec2<T>]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance along a unit ray to segment `a–b`, if it is hit.
pub fn ray_segment<T: Float>(origin: Vec2<T>, dir: Vec2<T>, a: Vec2<T>, b: Vec2<T>) -> Option<T> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom == T::zero() {
        return None;
    }
    let ao = a - origin;
    let t = ao.cross(e) / denom;
    let u = ao.cross(dir) / denom;
    if t >= T::zero() && u >= T::zero() && u <= T::one() {
        Some(t)
    } else {
        None
    }
}

/// Polyline with cumulative arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline<T: Float = f64> {
    points: Vec<Vec2<T>>,
    cum: Vec<T>,
}

impl<T: Float> Polyline<T> {
    pub fn new(points: Vec<Vec2<T>>) -> Self {
        assert!(points.len() >= 2, "polyline needs two points");
        let mut cum = Vec::with_capacity(points.len());
        cum.push(T::zero());
        for w in points.windows(2) {
            let last = *cum.last().unwrap();
            cum.push(last + (w[1] - w[0]).norm());
        }
        Self { points, cum }
    }

    pub fn points(&self) -> &[Vec2<T>] {
        &self.points
    }

    pub fn length(&self) -> T {
        *self.cum.last().unwrap()
    }

    fn segment_at(&self, s: T) -> usize {
        let n = self.points.len() - 1;
        // Last segment whose start is <= s.
        match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: T) -> Vec2<T> {
        let s = s.max(T::zero()).min(self.length());
        let i = self.segment_at(s);
        let seg = self.cum[i + 1] - self.cum[i];
        if seg == T::zero() {
            return self.points[i];
        }
        let u = (s - self.cum[i]) / seg;
        if u == T::zero() {
            return self.points[i];
        }
        self.points[i] + (self.points[i + 1] - self.points[i]) * u
    }

    pub fn heading_at(&self, s: T) -> T {
        let s = s.max(T::zero()).min(self.length());
        let i = self.segment_at(s);
        (self.points[i + 1] - self.points[i]).angle()
    }

    /// Closest arc length and signed lateral offset (positive to the right).
    pub fn project(&self, p: Vec2<T>) -> (T, T) {
        let mut best = (T::infinity(), T::zero(), T::zero());
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let e = self.points[i + 1] - a;
            let len2 = e.dot(e);
            if len2 == T::zero() {
                continue;
            }
            let u = ((p - a).dot(e) / len2).max(T::zero()).min(T::one());
            let q = a + e * u;
            let d = (p - q).norm();
            if d < best.0 {
                let lateral = e.cross(p - a) / len2.sqrt();
                best = (d, self.cum[i] + u * len2.sqrt(), lateral);
            }
        }
        (best.1, best.2)
    }

    /// Offset copy: each vertex moved by `offset` along the averaged right normal.
    pub fn offset(&self, offset: T) -> Vec<Vec2<T>> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let prev = if i == 0 { 0 } else { i - 1 };
                let next = if i + 1 == n { n - 1 } else { i + 1 };
                let t = self.points[next] - self.points[prev];
                let t = t * (T::one() / t.norm());
                self.points[i] + t.perp() * offset
            })
            .collect()
    }
}
