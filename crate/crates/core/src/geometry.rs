//! Planar primitives shared by every stage of the pipeline: points, poses,
//! rigid frames, polylines, and circular (angular) statistics.
//!
//! Angles are radians in the half-open interval `[-pi, pi)`. All angle
//! differences go through [`normalize_angle`] so that wrap-around never has
//! to be handled at call sites.

use thiserror::Error;

/// Errors from geometric constructions and angular statistics.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// The resultant vector of the heading set is numerically zero, so no
    /// circular mean exists (e.g. two exactly opposed headings).
    #[error("headings cancel out; circular mean is undefined")]
    DegenerateHeadings,
    /// A polyline needs at least two points.
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    /// Consecutive polyline points closer than the minimum spacing.
    #[error("consecutive polyline points {0} and {1} are closer than 1e-9")]
    DegenerateSpacing(usize, usize),
    /// A coordinate was NaN or infinite.
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Minimum spacing between consecutive polyline points.
const MIN_SPACING: f64 = 1e-9;

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Signed circular difference `a - b`, wrapped into `[-pi, pi)`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// Circular mean of a set of headings via the resultant vector
/// `atan2(sum sin, sum cos)`.
///
/// Fails with [`GeometryError::DegenerateHeadings`] when the resultant norm
/// is below `1e-9` (empty input or cancelling directions).
pub fn mean_heading(headings: &[f64]) -> Result<f64, GeometryError> {
    let (mut s, mut c) = (0.0, 0.0);
    for &h in headings {
        s += h.sin();
        c += h.cos();
    }
    if (s * s + c * c).sqrt() < 1e-9 {
        return Err(GeometryError::DegenerateHeadings);
    }
    Ok(normalize_angle(s.atan2(c)))
}

/// A point in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// A position with a heading. The heading is normalized into `[-pi, pi)`
/// at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub position: Point2,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(position: Point2, heading: f64) -> Self {
        Self { position, heading: normalize_angle(heading) }
    }
}

/// A rigid 2D frame: world coordinates of the frame origin plus the rotation
/// of its x-axis against the world x-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame2 {
    pub origin: Point2,
    pub rotation: f64,
}

impl Frame2 {
    pub fn new(origin: Point2, rotation: f64) -> Self {
        Self { origin, rotation }
    }

    pub fn identity() -> Self {
        Self { origin: Point2::default(), rotation: 0.0 }
    }

    /// World point -> frame coordinates: rotate `p - origin` by `-rotation`.
    pub fn to_frame(&self, p: Point2) -> Point2 {
        let d = p - self.origin;
        let (s, c) = self.rotation.sin_cos();
        Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// Frame coordinates -> world point; inverse of [`Frame2::to_frame`].
    pub fn from_frame(&self, p: Point2) -> Point2 {
        let (s, c) = self.rotation.sin_cos();
        Point2::new(c * p.x - s * p.y, s * p.x + c * p.y) + self.origin
    }
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestPoint {
    /// Foot point on the polyline.
    pub point: Point2,
    /// Euclidean distance from the query to the foot point.
    pub distance: f64,
    /// Arc length from the polyline start to the foot point.
    pub arc_position: f64,
}

/// An ordered sequence of at least two distinct points.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point2>,
}

impl Polyline {
    /// Validates point count, finiteness and minimum consecutive spacing.
    pub fn new(points: Vec<Point2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        for i in 1..points.len() {
            if points[i - 1].distance(points[i]) <= MIN_SPACING {
                return Err(GeometryError::DegenerateSpacing(i - 1, i));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// Total arc length.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Orthogonal projection of `p` onto the polyline.
    ///
    /// Scans segments in order and keeps strict improvements only, so exact
    /// distance ties resolve to the smallest arc position.
    pub fn nearest_point(&self, p: Point2) -> NearestPoint {
        let mut best = NearestPoint {
            point: self.points[0],
            distance: f64::INFINITY,
            arc_position: 0.0,
        };
        let mut cum = 0.0;
        for w in self.points.windows(2) {
            let (a, b) = (w[0], w[1]);
            let d = b - a;
            let len2 = d.x * d.x + d.y * d.y;
            let q = p - a;
            let t = ((q.x * d.x + q.y * d.y) / len2).clamp(0.0, 1.0);
            let foot = a + d * t;
            let dist = p.distance(foot);
            if dist < best.distance {
                best = NearestPoint {
                    point: foot,
                    distance: dist,
                    arc_position: cum + t * len2.sqrt(),
                };
            }
            cum += len2.sqrt();
        }
        best
    }

    /// Point at a given arc position, clamped to the polyline extent.
    pub fn point_at(&self, arc: f64) -> Point2 {
        let mut remaining = arc.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].distance(w[1]);
            if remaining <= seg {
                let t = remaining / seg;
                return w[0] + (w[1] - w[0]) * t;
            }
            remaining -= seg;
        }
        *self.points.last().unwrap()
    }

    /// Tangent direction (radians) of the segment containing the given arc
    /// position; the final segment's direction beyond the end.
    pub fn tangent_at(&self, arc: f64) -> f64 {
        let mut remaining = arc.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].distance(w[1]);
            if remaining <= seg {
                let d = w[1] - w[0];
                return d.y.atan2(d.x);
            }
            remaining -= seg;
        }
        let n = self.points.len();
        let d = self.points[n - 1] - self.points[n - 2];
        d.y.atan2(d.x)
    }
}
