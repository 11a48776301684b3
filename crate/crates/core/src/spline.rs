//! Uniform cubic 1D B-splines: scalar functions `f(x) = sum c_i N_i(x)` used
//! to model lane center lines in a lane-aligned frame.
//!
//! The knot vector is clamped (end knots with multiplicity 4) with
//! equidistant interior knots, so the curve interpolates `c_0` at the left
//! domain edge and `c_{n-1}` at the right, and is C2 everywhere in between.
//!
//! Two evaluation paths exist on purpose: [`UniformCubicSpline::basis`] is
//! the textbook Cox–de Boor recursion over a single basis index, while
//! [`UniformCubicSpline::design_row`] computes the four active basis values
//! per span in one triangular pass. The slow path acts as the reference the
//! fast path is tested against.

use thiserror::Error;

/// Number of control points used for lane center lines unless configured
/// otherwise.
pub const DEFAULT_CONTROL_POINTS: usize = 20;

/// Spline degree is fixed: cubic.
const DEGREE: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    /// Evaluation outside `[x_min, x_max]`.
    #[error("x = {x} outside spline domain [{min}, {max}]")]
    OutOfDomain { x: f64, min: f64, max: f64 },
    /// Domain empty or reversed.
    #[error("invalid spline domain [{0}, {1}]")]
    InvalidDomain(f64, f64),
    /// A cubic needs at least 4 control points.
    #[error("need at least 4 control points, got {0}")]
    TooFewControlPoints(usize),
}

/// A clamped uniform cubic B-spline over `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformCubicSpline {
    x_min: f64,
    x_max: f64,
    /// Knot vector of length `control.len() + 4`.
    knots: Vec<f64>,
    control: Vec<f64>,
}

impl UniformCubicSpline {
    /// Creates a spline with all control points zero.
    pub fn new(x_min: f64, x_max: f64, n_control: usize) -> Result<Self, SplineError> {
        Self::from_control(x_min, x_max, vec![0.0; n_control])
    }

    /// Creates a spline from explicit control points.
    pub fn from_control(
        x_min: f64,
        x_max: f64,
        control: Vec<f64>,
    ) -> Result<Self, SplineError> {
        if !(x_max - x_min).is_finite() || x_max <= x_min {
            return Err(SplineError::InvalidDomain(x_min, x_max));
        }
        let n = control.len();
        if n < DEGREE + 1 {
            return Err(SplineError::TooFewControlPoints(n));
        }
        let spans = n - DEGREE;
        let h = (x_max - x_min) / spans as f64;
        let mut knots = Vec::with_capacity(n + DEGREE + 1);
        knots.extend(std::iter::repeat(x_min).take(DEGREE + 1));
        for j in 1..spans {
            knots.push(x_min + j as f64 * h);
        }
        knots.extend(std::iter::repeat(x_max).take(DEGREE + 1));
        Ok(Self { x_min, x_max, knots, control })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    /// Width of one knot span.
    pub fn span_width(&self) -> f64 {
        (self.x_max - self.x_min) / (self.control.len() - DEGREE) as f64
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn control_points(&self) -> &[f64] {
        &self.control
    }

    pub fn control_points_mut(&mut self) -> &mut [f64] {
        &mut self.control
    }

    /// Number of control points.
    pub fn control_count(&self) -> usize {
        self.control.len()
    }

    fn check_domain(&self, x: f64) -> Result<(), SplineError> {
        if x < self.x_min || x > self.x_max || !x.is_finite() {
            return Err(SplineError::OutOfDomain { x, min: self.x_min, max: self.x_max });
        }
        Ok(())
    }

    /// Index `s` of the knot span `[t_s, t_{s+1})` containing `x`; the last
    /// non-empty span at the right domain edge.
    fn find_span(&self, x: f64) -> usize {
        let n = self.control.len();
        let idx = ((x - self.x_min) / self.span_width()).floor() as isize;
        (DEGREE as isize + idx).clamp(DEGREE as isize, n as isize - 1) as usize
    }

    /// Basis values of degrees 1..=3 active on span `s`, via the triangular
    /// Cox–de Boor scheme. `tri[d][r]` is the degree-`d` basis
    /// `N_{s-d+r, d}(x)` for `r = 0..=d`.
    fn basis_triangle(&self, s: usize, x: f64) -> [[f64; 4]; 4] {
        let t = &self.knots;
        let mut tri = [[0.0; 4]; 4];
        tri[0][0] = 1.0;
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        for d in 1..=DEGREE {
            left[d] = x - t[s + 1 - d];
            right[d] = t[s + d] - x;
            let mut saved = 0.0;
            for r in 0..d {
                let denom = right[r + 1] + left[d - r];
                let tmp = tri[d - 1][r] / denom;
                tri[d][r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            tri[d][d] = saved;
        }
        tri
    }

    /// Derivative of the four degree-3 basis functions on span `s` given the
    /// degree-2 values (`lower[r] = N_{s-2+r, 2}`), by the knot-difference
    /// formula. Also used one level down for second derivatives.
    fn raise_deriv(&self, s: usize, lower_degree: usize, lower: &[f64; 4]) -> [f64; 4] {
        let t = &self.knots;
        let d = lower_degree + 1;
        let mut out = [0.0; 4];
        for r in 0..=d {
            // Basis index of the output: i = s - d + r.
            let i = s + r - d;
            let take = |rr: isize| -> f64 {
                if (0..=lower_degree as isize).contains(&rr) {
                    lower[rr as usize]
                } else {
                    0.0
                }
            };
            let num1 = take(r as isize - 1);
            let den1 = t[i + d] - t[i];
            let num2 = take(r as isize);
            let den2 = t[i + d + 1] - t[i + 1];
            let a = if den1 > 0.0 { num1 / den1 } else { 0.0 };
            let b = if den2 > 0.0 { num2 / den2 } else { 0.0 };
            out[r] = d as f64 * (a - b);
        }
        out
    }

    /// The four active basis indices on span `s`.
    fn active_indices(s: usize) -> [usize; 4] {
        [s - 3, s - 2, s - 1, s]
    }

    /// Sparse design row at `x`: the four active control point indices and
    /// their basis weights. At `x_min` this is a single weight 1 on `c_0`.
    pub fn design_row(&self, x: f64) -> Result<([usize; 4], [f64; 4]), SplineError> {
        self.check_domain(x)?;
        let s = self.find_span(x);
        let tri = self.basis_triangle(s, x);
        Ok((Self::active_indices(s), tri[DEGREE]))
    }

    /// Design row of the first derivative: `d N_i / dx` for the four active
    /// basis functions at `x`.
    pub fn design_row_deriv(&self, x: f64) -> Result<([usize; 4], [f64; 4]), SplineError> {
        self.check_domain(x)?;
        let s = self.find_span(x);
        let tri = self.basis_triangle(s, x);
        let mut lower = [0.0; 4];
        lower[..3].copy_from_slice(&tri[2][..3]);
        Ok((Self::active_indices(s), self.raise_deriv(s, 2, &lower)))
    }

    pub fn eval(&self, x: f64) -> Result<f64, SplineError> {
        let (idx, w) = self.design_row(x)?;
        Ok(idx.iter().zip(w).map(|(&i, wi)| self.control[i] * wi).sum())
    }

    pub fn deriv1(&self, x: f64) -> Result<f64, SplineError> {
        let (idx, w) = self.design_row_deriv(x)?;
        Ok(idx.iter().zip(w).map(|(&i, wi)| self.control[i] * wi).sum())
    }

    pub fn deriv2(&self, x: f64) -> Result<f64, SplineError> {
        self.check_domain(x)?;
        Ok(self.deriv2_at_span(self.find_span(x), x))
    }

    /// Second derivative evaluated with a forced span, so one-sided limits
    /// at knots can be taken from either neighboring span.
    fn deriv2_at_span(&self, s: usize, x: f64) -> f64 {
        let tri = self.basis_triangle(s, x);
        // Degree-1 values -> derivative of degree-2 -> derivative of degree-3.
        let mut deg1 = [0.0; 4];
        deg1[..2].copy_from_slice(&tri[1][..2]);
        let d2 = self.raise_deriv(s, 1, &deg1);
        let dd3 = self.raise_deriv(s, 2, &d2);
        Self::active_indices(s)
            .iter()
            .zip(dd3)
            .map(|(&i, wi)| self.control[i] * wi)
            .sum()
    }

    /// Single basis function `N_{i,4}(x)` by direct Cox–de Boor recursion.
    ///
    /// Slow but obviously correct; the closed-form span evaluation in
    /// [`UniformCubicSpline::design_row`] is validated against it.
    pub fn basis(&self, i: usize, x: f64) -> Result<f64, SplineError> {
        self.check_domain(x)?;
        assert!(i < self.control.len(), "basis index {i} out of range");
        Ok(self.basis_rec(i, DEGREE, x))
    }

    fn basis_rec(&self, i: usize, d: usize, x: f64) -> f64 {
        let t = &self.knots;
        if d == 0 {
            let closes_right = x == self.x_max && t[i + 1] == self.x_max;
            return if (t[i] <= x && x < t[i + 1]) || (closes_right && t[i] < t[i + 1]) {
                1.0
            } else {
                0.0
            };
        }
        let mut v = 0.0;
        let den1 = t[i + d] - t[i];
        if den1 > 0.0 {
            v += (x - t[i]) / den1 * self.basis_rec(i, d - 1, x);
        }
        let den2 = t[i + d + 1] - t[i + 1];
        if den2 > 0.0 {
            v += (t[i + d + 1] - x) / den2 * self.basis_rec(i + 1, d - 1, x);
        }
        v
    }

    /// Greville abscissae: the parameter location each control point is
    /// most associated with; placing `c_i = a * greville_i + b` reproduces
    /// the linear function `a*x + b` exactly.
    pub fn greville(&self) -> Vec<f64> {
        (0..self.control.len())
            .map(|i| (self.knots[i + 1] + self.knots[i + 2] + self.knots[i + 3]) / 3.0)
            .collect()
    }

    /// Maximum absolute jump of the second derivative across interior knots.
    /// Zero (up to rounding) certifies C2 continuity.
    pub fn smoothness_check(&self) -> f64 {
        let n = self.control.len();
        let mut worst: f64 = 0.0;
        for j in DEGREE + 1..n {
            let t = self.knots[j];
            let from_left = self.deriv2_at_span(j - 1, t);
            let from_right = self.deriv2_at_span(j, t);
            worst = worst.max((from_left - from_right).abs());
        }
        worst
    }
}
