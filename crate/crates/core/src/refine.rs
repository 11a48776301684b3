//! Lane construction and joint center-line refinement: trajectories are
//! associated to entry and exit stubs of a coarse model, one straight lane
//! is seeded per observed (entry, exit) pair, and all lane splines are then
//! refined together by a staged Levenberg-Marquardt solver before the
//! converged center lines are merged into a lanelet graph.
//!
//! Each lane lives in its own frame: a pure rotation about the world origin
//! whose x-axis follows the mean driving direction of the assigned
//! trajectories, so the center line is a scalar spline `y = f(x)`. The
//! solver stacks every lane's control points into one vector. A point
//! residual ties each lane to its trajectory data; after a fixed number of
//! iterations a neighbor residual joins, nudging neighboring lane pairs to
//! either overlap exactly or settle one lane width apart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{mean_heading, Frame2, Point2, Polyline};
use crate::model::{Direction, Intersection, LaneStub, DEFAULT_STUB_LENGTH, LANE_WIDTH};
use crate::sim::{Measurement, Trajectory};
use crate::spline::{SplineError, UniformCubicSpline};

/// Default tolerance for merging converged center lines: half a lane width.
pub const MERGE_TOLERANCE: f64 = 0.5 * LANE_WIDTH;

/// A trajectory is unassignable when it never comes closer to the center
/// than this multiple of the stub length.
const UNASSIGNABLE_FACTOR: f64 = 3.0;

/// Spacing of the dense polyline sampling that seeds lane splines.
const INIT_SAMPLE_STEP: f64 = 0.25;

/// Margin added around the frame x-range so assigned points sit strictly
/// inside the spline domain.
const DOMAIN_MARGIN: f64 = 0.5;

/// Multiplicative damping adjustment of the solver.
const DAMPING_STEP: f64 = 10.0;

/// Damping ceiling; the solver reports divergence beyond it.
const DAMPING_LIMIT: f64 = 1e8;

/// Relative cost improvement under which a stage terminates early.
const EARLY_STOP: f64 = 1e-8;

/// First-order stationarity threshold on the largest normal-equation
/// gradient entry, relative to the current cost. A zero-residual optimum
/// is reached through quadratic steps whose relative improvement never
/// drops below `EARLY_STOP`, so without this check the damping loop would
/// chase rounding noise into a spurious divergence report.
const GRADIENT_TOLERANCE: f64 = 1e-10;

/// Subdivisions of the spline domain for arc-length tables.
const ARC_TABLE_STEPS: usize = 800;

/// Sample spacing of the discretized center lines used for merging.
const MERGE_STEP: f64 = 0.5;

/// Shortest run of merge samples that survives as its own lanelet piece;
/// shorter runs are absorbed into their predecessor.
const MIN_MERGE_RUN: usize = 3;

#[derive(Debug, Error)]
pub enum RefineError {
    /// The trajectory never comes near the intersection.
    #[error(
        "trajectory {index} stays {closest:.1} m from the center, beyond the {limit:.1} m assignment range"
    )]
    UnassignableTrajectory { index: usize, closest: f64, limit: f64 },
    /// Assigned headings cancel, leaving no usable mean direction.
    #[error("assigned headings cancel; the lane frame direction is undefined")]
    FrameDegenerate,
    /// A point fell outside a spline domain and was skipped.
    #[error("x = {x:.3} outside spline domain [{min:.3}, {max:.3}]")]
    OutOfDomain { x: f64, min: f64, max: f64 },
    /// Damping exceeded its ceiling without finding a downhill step.
    #[error("solver diverged: damping reached {0:.2e} without a cost decrease")]
    SolverDiverged(f64),
    /// Rejected configuration.
    #[error("invalid refinement config: {0}")]
    InvalidConfig(&'static str),
}

fn map_domain(e: SplineError) -> RefineError {
    match e {
        SplineError::OutOfDomain { x, min, max } => RefineError::OutOfDomain { x, min, max },
        _ => RefineError::InvalidConfig("lane spline is structurally invalid"),
    }
}

/// Entry and exit stubs assigned to one trajectory, as indices into the
/// [`Intersection::stubs`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Association {
    /// Index of the trajectory in the dataset it came from.
    pub trajectory: usize,
    /// Assigned entry stub.
    pub entry: usize,
    /// Assigned exit stub.
    pub exit: usize,
}

/// Stub assignments for a dataset, with trajectories that never approach
/// the intersection listed separately.
#[derive(Debug, Clone, Default)]
pub struct AssociationSet {
    /// Successful assignments in trajectory order.
    pub assigned: Vec<Association>,
    /// Indices of trajectories outside the assignment range.
    pub unassignable: Vec<usize>,
}

/// Assigns every trajectory an entry and an exit stub. The trajectory is
/// split at its sample nearest the hypothesis center (the split sample
/// belongs to both halves); the entry stub minimizes the mean center-line
/// distance over the approaching half, the exit stub over the departing
/// half. Ties resolve to the lower (arm, slot) because stubs are scanned in
/// that order and only strict improvements win.
pub fn associate(trajectories: &[Trajectory], model: &Intersection) -> AssociationSet {
    let stubs = model.stubs();
    let stub_length = stubs.first().map_or(DEFAULT_STUB_LENGTH, |s| s.stub_length);
    let limit = UNASSIGNABLE_FACTOR * stub_length;
    let mut out = AssociationSet::default();
    for (index, z) in trajectories.iter().enumerate() {
        match associate_one(index, z, &stubs, model.center(), limit) {
            Ok((entry, exit)) => {
                out.assigned.push(Association { trajectory: index, entry, exit })
            }
            Err(_) => out.unassignable.push(index),
        }
    }
    out
}

fn associate_one(
    index: usize,
    z: &Trajectory,
    stubs: &[LaneStub],
    center: Point2,
    limit: f64,
) -> Result<(usize, usize), RefineError> {
    let samples = z.samples();
    let mut split = 0;
    let mut split_dist = f64::INFINITY;
    for (i, m) in samples.iter().enumerate() {
        let d = m.position.distance(center);
        if d < split_dist {
            split_dist = d;
            split = i;
        }
    }
    if split_dist > limit {
        return Err(RefineError::UnassignableTrajectory { index, closest: split_dist, limit });
    }
    let entry = best_stub(&samples[..=split], stubs, Direction::Entry);
    let exit = best_stub(&samples[split..], stubs, Direction::Exit);
    match (entry, exit) {
        (Some(e), Some(o)) => Ok((e, o)),
        // A model without stubs in one direction cannot absorb traffic.
        _ => Err(RefineError::UnassignableTrajectory { index, closest: split_dist, limit }),
    }
}

/// Stub of the requested direction with the smallest mean distance from the
/// given samples to its center line.
fn best_stub(samples: &[Measurement], stubs: &[LaneStub], direction: Direction) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, stub) in stubs.iter().enumerate() {
        if stub.direction != direction {
            continue;
        }
        let mean = samples
            .iter()
            .map(|m| stub.center_line.nearest_point(m.position).distance)
            .sum::<f64>()
            / samples.len() as f64;
        if best.is_none_or(|(_, b)| mean < b) {
            best = Some((i, mean));
        }
    }
    best.map(|(i, _)| i)
}

/// One estimated lane: an entry and an exit stub, the trajectories assigned
/// to that pair, and a center line modeled as `y = f(x)` in a lane-aligned
/// frame.
#[derive(Debug, Clone)]
pub struct Lane {
    /// Stub the lane enters the intersection through.
    pub entry: LaneStub,
    /// Stub the lane leaves through.
    pub exit: LaneStub,
    /// Indices into the trajectory slice the lane was built from.
    pub assigned: Vec<usize>,
    /// Lane-aligned frame: a pure rotation about the world origin whose
    /// x-axis follows the mean heading of the assigned trajectories.
    pub frame: Frame2,
    /// Center line in frame coordinates.
    pub spline: UniformCubicSpline,
}

/// Why two lanes count as neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborRelation {
    /// Both lanes start from the same entry stub.
    SharedEntry,
    /// Both lanes end in the same exit stub.
    SharedExit,
    /// Entry or exit stubs sit in adjacent slots of the same arm.
    Adjacent,
}

/// An unordered pair of lanes coupled by the neighbor residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborPair {
    /// Index of the first lane; always below `lane_b`.
    pub lane_a: usize,
    /// Index of the second lane.
    pub lane_b: usize,
    /// Why the pair is coupled.
    pub relation: NeighborRelation,
}

/// Derives neighbor pairs from the coarse structure: lanes sharing an entry
/// stub, sharing an exit stub, or whose entry or exit stubs occupy adjacent
/// slots of the same arm. A shared stub wins over mere adjacency when both
/// hold.
pub fn neighbor_pairs(lanes: &[Lane]) -> Vec<NeighborPair> {
    let same = |x: &LaneStub, y: &LaneStub| x.arm_index == y.arm_index && x.slot == y.slot;
    let adjacent =
        |x: &LaneStub, y: &LaneStub| x.arm_index == y.arm_index && x.slot.abs_diff(y.slot) == 1;
    let mut out = Vec::new();
    for a in 0..lanes.len() {
        for b in a + 1..lanes.len() {
            let (la, lb) = (&lanes[a], &lanes[b]);
            let relation = if same(&la.entry, &lb.entry) {
                Some(NeighborRelation::SharedEntry)
            } else if same(&la.exit, &lb.exit) {
                Some(NeighborRelation::SharedExit)
            } else if adjacent(&la.entry, &lb.entry) || adjacent(&la.exit, &lb.exit) {
                Some(NeighborRelation::Adjacent)
            } else {
                None
            };
            if let Some(relation) = relation {
                out.push(NeighborPair { lane_a: a, lane_b: b, relation });
            }
        }
    }
    out
}

/// Settings of the staged spline refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Control points per lane spline.
    pub control_points: usize,
    /// Outer iterations run with the point residual only.
    pub stage1_iterations: usize,
    /// Total outer iterations across both stages.
    pub total_iterations: usize,
    /// Gate on the perpendicular neighbor distance, in meters.
    pub delta: f64,
    /// Evaluation points per lane for the neighbor residual.
    pub e2_samples_per_lane: usize,
    /// Scale applied to each neighbor residual row. Neighbor rows act as a
    /// weak coupling prior: the default keeps their pull well below the
    /// metric data terms wherever a lane has assigned measurements, while
    /// still deciding lanes whose only active rows are neighbor rows, where
    /// the scale cancels out of the solver step.
    pub e2_weight: f64,
    /// Initial Levenberg-Marquardt damping.
    pub damping: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            control_points: 20,
            stage1_iterations: 10,
            total_iterations: 30,
            delta: 1.5 * LANE_WIDTH,
            e2_samples_per_lane: 50,
            e2_weight: 1.0 / (LANE_WIDTH * LANE_WIDTH * LANE_WIDTH),
            damping: 1e-3,
        }
    }
}

impl RefinementConfig {
    /// Checks the structural constraints the solver relies on.
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.control_points < 4 {
            return Err(RefineError::InvalidConfig("need at least 4 control points"));
        }
        if self.delta <= LANE_WIDTH {
            return Err(RefineError::InvalidConfig("delta must exceed the lane width"));
        }
        if self.stage1_iterations >= self.total_iterations {
            return Err(RefineError::InvalidConfig(
                "stage 1 must end before the total iteration budget",
            ));
        }
        if self.e2_samples_per_lane < 2 {
            return Err(RefineError::InvalidConfig("need at least 2 neighbor samples per lane"));
        }
        if !(self.e2_weight > 0.0 && self.e2_weight.is_finite()) {
            return Err(RefineError::InvalidConfig(
                "neighbor residual weight must be positive and finite",
            ));
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(RefineError::InvalidConfig("damping must be positive and finite"));
        }
        Ok(())
    }
}

/// Builds one straight initial lane per distinct (entry, exit) pair in the
/// associations. The frame follows the mean assigned heading and falls back
/// to the entry-stub direction when opposing headings cancel; the spline is
/// seeded by a least-squares fit of the polyline entry stub, straight
/// chord, exit stub, sampled densely in the lane frame. The spline domain
/// covers both the construction polyline and every assigned sample.
pub fn initialize_lanes(
    associations: &AssociationSet,
    trajectories: &[Trajectory],
    model: &Intersection,
    cfg: &RefinementConfig,
) -> Result<Vec<Lane>, RefineError> {
    cfg.validate()?;
    let stubs = model.stubs();
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for a in &associations.assigned {
        groups.entry((a.entry, a.exit)).or_default().push(a.trajectory);
    }
    let mut lanes = Vec::with_capacity(groups.len());
    for ((entry, exit), assigned) in groups {
        let entry = stubs[entry].clone();
        let exit = stubs[exit].clone();
        let headings: Vec<f64> = assigned
            .iter()
            .flat_map(|&t| trajectories[t].samples().iter().map(|m| m.heading))
            .collect();
        let rotation = match mean_heading(&headings) {
            Ok(a) => a,
            // Degenerate frame: opposing headings cancel; the entry stub
            // still points the right way.
            Err(_) => entry.heading,
        };
        let frame = Frame2::new(Point2::default(), rotation);
        lanes.push(seed_lane(entry, exit, assigned, frame, trajectories, cfg)?);
    }
    Ok(lanes)
}

/// Corners of the straight construction polyline in driving order: entry
/// stub tail to border, straight chord across, border to exit stub tail.
fn construction_corners(entry: &LaneStub, exit: &LaneStub) -> Vec<Point2> {
    let mut corners = entry.center_line.points().to_vec();
    corners.extend_from_slice(exit.center_line.points());
    corners
}

fn seed_lane(
    entry: LaneStub,
    exit: LaneStub,
    assigned: Vec<usize>,
    frame: Frame2,
    trajectories: &[Trajectory],
    cfg: &RefinementConfig,
) -> Result<Lane, RefineError> {
    let corners = construction_corners(&entry, &exit);
    let frame_x = |p: Point2| frame.to_frame(p).x;
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    for p in &corners {
        x_lo = x_lo.min(frame_x(*p));
        x_hi = x_hi.max(frame_x(*p));
    }
    for &t in &assigned {
        for m in trajectories[t].samples() {
            x_lo = x_lo.min(frame_x(m.position));
            x_hi = x_hi.max(frame_x(m.position));
        }
    }
    x_lo -= DOMAIN_MARGIN;
    x_hi += DOMAIN_MARGIN;

    // Extend the end segments along their own directions so the dense
    // sampling spans the whole domain even where data reaches past the stub
    // tails; the extension targets sit a hair inside the domain edges.
    let (s, c) = frame.rotation.sin_cos();
    let vec_x = |v: Point2| c * v.x + s * v.y;
    let mut poly = corners;
    let first = poly[0];
    let back = unit(first - poly[1]);
    let bx = vec_x(back);
    if bx < -1e-9 {
        let len = (x_lo + 1e-6 - frame_x(first)) / bx;
        if len > 0.0 {
            poly.insert(0, first + back * len);
        }
    }
    let last = poly[poly.len() - 1];
    let fwd = unit(last - poly[poly.len() - 2]);
    let fx = vec_x(fwd);
    if fx > 1e-9 {
        let len = (x_hi - 1e-6 - frame_x(last)) / fx;
        if len > 0.0 {
            poly.push(last + fwd * len);
        }
    }

    // Dense samples of the polyline in frame coordinates.
    let mut fit: Vec<(f64, f64)> = Vec::new();
    for w in poly.windows(2) {
        let len = w[0].distance(w[1]);
        let steps = (len / INIT_SAMPLE_STEP).ceil().max(1.0) as usize;
        for k in 0..steps {
            let p = w[0] + (w[1] - w[0]) * (k as f64 / steps as f64);
            let q = frame.to_frame(p);
            fit.push((q.x, q.y));
        }
    }
    let tail = frame.to_frame(poly[poly.len() - 1]);
    fit.push((tail.x, tail.y));

    let spline = fit_spline(x_lo, x_hi, cfg.control_points, &fit)?;
    Ok(Lane { entry, exit, assigned, frame, spline })
}

fn unit(v: Point2) -> Point2 {
    let len = (v.x * v.x + v.y * v.y).sqrt().max(1e-12);
    Point2::new(v.x / len, v.y / len)
}

/// Least-squares fit of a spline to `(x, y)` samples via the normal
/// equations, with a tiny ridge for numerical safety. Samples outside the
/// domain are ignored.
fn fit_spline(
    x_lo: f64,
    x_hi: f64,
    control_points: usize,
    samples: &[(f64, f64)],
) -> Result<UniformCubicSpline, RefineError> {
    let template = UniformCubicSpline::new(x_lo, x_hi, control_points).map_err(map_domain)?;
    let n = control_points;
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    for &(x, y) in samples {
        let Ok((idx, w)) = template.design_row(x) else { continue };
        for a in 0..4 {
            rhs[idx[a]] += w[a] * y;
            for b in 0..4 {
                gram[idx[a] * n + idx[b]] += w[a] * w[b];
            }
        }
    }
    for ridge in [1e-9, 1e-6, 1e-3] {
        let mut m = gram.clone();
        for i in 0..n {
            m[i * n + i] += ridge;
        }
        let mut b = rhs.clone();
        if linalg::solve_spd(&mut m, n, &mut b) {
            return UniformCubicSpline::from_control(x_lo, x_hi, b).map_err(map_domain);
        }
    }
    Err(RefineError::InvalidConfig("seed fit is singular despite ridge"))
}

/// Point residual of a lane: the vertical offset `p_y - f(p_x)` of a world
/// point in the lane frame, with its gradient in the four active control
/// points. The solver squares the residual.
pub fn residual_e1(lane: &Lane, p: Point2) -> Result<(f64, [usize; 4], [f64; 4]), RefineError> {
    let q = lane.frame.to_frame(p);
    let (idx, basis) = lane.spline.design_row(q.x).map_err(map_domain)?;
    let control = lane.spline.control_points();
    let y: f64 = idx.iter().zip(basis).map(|(&i, w)| w * control[i]).sum();
    let grad = [-basis[0], -basis[1], -basis[2], -basis[3]];
    Ok((q.y - y, idx, grad))
}

/// Neighbor residual between two lanes at one evaluation abscissa of lane A.
#[derive(Debug, Clone, Copy)]
pub struct NeighborResidual {
    /// Residual `d_perp * (d_perp - w)`; the solver squares it.
    pub value: f64,
    /// Perpendicular offset from lane A's point to lane B's curve, measured
    /// along lane A's normal and oriented toward lane B.
    pub d_perp: f64,
    /// Active control-point indices of lane A.
    pub a_index: [usize; 4],
    /// Gradient in lane A's active control points.
    pub a_grad: [f64; 4],
    /// Active control-point indices of lane B.
    pub b_index: [usize; 4],
    /// Gradient in lane B's active control points.
    pub b_grad: [f64; 4],
}

/// Evaluates the neighbor residual at `x_a` in lane A's frame: lane A's
/// curve point and unit normal are rotated into lane B's frame, `d_perp` is
/// the normal component of the offset between lane B's curve and the point,
/// and the residual `d_perp * (d_perp - w)` vanishes when the lanes overlap
/// or sit exactly one lane width apart. The normal is oriented toward lane
/// B, so neighbors on either side see the same two minima. Gradients chain
/// through both splines and the normal; both frames rotate about the world
/// origin, so the frame change is the rotation by the angle difference.
pub fn residual_e2(
    lane_a: &Lane,
    lane_b: &Lane,
    x_a: f64,
) -> Result<NeighborResidual, RefineError> {
    let w = LANE_WIDTH;
    let (a_index, a_basis) = lane_a.spline.design_row(x_a).map_err(map_domain)?;
    let (_, a_dbasis) = lane_a.spline.design_row_deriv(x_a).map_err(map_domain)?;
    let ca = lane_a.spline.control_points();
    let y_a: f64 = a_index.iter().zip(a_basis).map(|(&i, w)| w * ca[i]).sum();
    let dy_a: f64 = a_index.iter().zip(a_dbasis).map(|(&i, w)| w * ca[i]).sum();

    let theta = lane_a.frame.rotation - lane_b.frame.rotation;
    let (st, ct) = theta.sin_cos();
    let bx = ct * x_a - st * y_a;
    let by = st * x_a + ct * y_a;

    let (b_index, b_basis) = lane_b.spline.design_row(bx).map_err(map_domain)?;
    let (_, b_dbasis) = lane_b.spline.design_row_deriv(bx).map_err(map_domain)?;
    let cb = lane_b.spline.control_points();
    let y_b: f64 = b_index.iter().zip(b_basis).map(|(&i, w)| w * cb[i]).sum();
    let dy_b: f64 = b_index.iter().zip(b_dbasis).map(|(&i, w)| w * cb[i]).sum();

    let delta = by - y_b;
    let len = (1.0 + dy_a * dy_a).sqrt();
    let n_y = (ct - dy_a * st) / len;
    let raw = n_y * delta;
    let sign = if raw < 0.0 { -1.0 } else { 1.0 };
    let d = sign * raw;
    let value = d * (d - w);
    let outer = sign * (2.0 * d - w);

    let mut a_grad = [0.0; 4];
    for k in 0..4 {
        // Moving lane A's control points shifts the evaluation point (and
        // with it lane B's curve value) and tilts the normal.
        let d_delta = a_basis[k] * (ct + dy_b * st);
        let d_ny = -a_dbasis[k] * (st + dy_a * ct) / (len * len * len);
        a_grad[k] = outer * (d_ny * delta + n_y * d_delta);
    }
    let mut b_grad = [0.0; 4];
    for k in 0..4 {
        b_grad[k] = outer * (-n_y * b_basis[k]);
    }
    Ok(NeighborResidual { value, d_perp: d, a_index, a_grad, b_index, b_grad })
}

/// Abscissas of `n` points equidistant in arc length along the lane course,
/// including both domain ends, from a dense arc-length table.
pub fn course_anchor_xs(lane: &Lane, n: usize) -> Vec<f64> {
    let (lo, hi) = lane.spline.domain();
    let mut xs = Vec::with_capacity(ARC_TABLE_STEPS + 1);
    let mut arcs = Vec::with_capacity(ARC_TABLE_STEPS + 1);
    let mut total = 0.0;
    let mut prev: Option<Point2> = None;
    for k in 0..=ARC_TABLE_STEPS {
        let x = if k == ARC_TABLE_STEPS {
            hi
        } else {
            lo + (hi - lo) * k as f64 / ARC_TABLE_STEPS as f64
        };
        let y = lane.spline.eval(x).expect("table grid stays inside the domain");
        let p = Point2::new(x, y);
        if let Some(q) = prev {
            total += q.distance(p);
        }
        xs.push(x);
        arcs.push(total);
        prev = Some(p);
    }
    (0..n)
        .map(|k| {
            let target = total * k as f64 / (n - 1).max(1) as f64;
            match arcs.partition_point(|&a| a < target) {
                0 => xs[0],
                i if i > ARC_TABLE_STEPS => xs[ARC_TABLE_STEPS],
                i => {
                    let span = (arcs[i] - arcs[i - 1]).max(1e-12);
                    let t = (target - arcs[i - 1]) / span;
                    (xs[i - 1] + t * (xs[i] - xs[i - 1])).clamp(lo, hi)
                }
            }
        })
        .collect()
}

/// World points along the lane course, equidistant in arc length.
pub fn sample_lane_course(lane: &Lane, n: usize) -> Vec<Point2> {
    course_anchor_xs(lane, n)
        .iter()
        .map(|&x| {
            let y = lane.spline.eval(x).expect("anchors stay inside the domain");
            lane.frame.from_frame(Point2::new(x, y))
        })
        .collect()
}

/// One accepted solver step, or the starting cost of a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1 while only point residuals are active, 2 once neighbor residuals
    /// join.
    pub stage: u8,
    /// Total squared-residual cost after the step (stage-start records
    /// carry the cost before the stage's first step).
    pub cost: f64,
}

/// Summary of a refinement run.
#[derive(Debug, Clone, Default)]
pub struct RefineReport {
    /// Stage starts and accepted iterations in order.
    pub trace: Vec<IterationRecord>,
    /// Final total cost.
    pub final_cost: f64,
    /// Assigned points outside their lane's domain, dropped up front.
    pub skipped_points: usize,
    /// Neighbor samples dropped because they left the partner's domain.
    pub skipped_neighbor_samples: usize,
    /// Neighbor samples dropped by the distance gate.
    pub gated_neighbor_samples: usize,
    /// Neighbor samples active in stage 2.
    pub active_neighbor_rows: usize,
}

/// Jointly refines all lane splines against the assigned trajectory points
/// by Levenberg-Marquardt on the stacked control-point vector. Stage 1 uses
/// the point residual only; stage 2 adds the neighbor residual at per-lane
/// arc-equidistant samples, with anchors and the distance gate frozen when
/// the stage begins so its cost trace stays comparable. A stage that stops
/// improving hands its remaining iteration budget to the next. On
/// divergence the lanes keep the best iterate and an error is returned.
pub fn refine(
    lanes: &mut [Lane],
    trajectories: &[Trajectory],
    pairs: &[NeighborPair],
    cfg: &RefinementConfig,
) -> Result<RefineReport, RefineError> {
    cfg.validate()?;
    let mut report = RefineReport::default();
    if lanes.is_empty() {
        return Ok(report);
    }

    let mut offsets = Vec::with_capacity(lanes.len() + 1);
    let mut n = 0;
    for lane in lanes.iter() {
        offsets.push(n);
        n += lane.spline.control_count();
    }
    offsets.push(n);

    // Stable point order: lanes, their assigned trajectories, their
    // samples. Domains never change, so out-of-domain points are dropped
    // once up front.
    let mut points: Vec<(usize, Point2)> = Vec::new();
    for (li, lane) in lanes.iter().enumerate() {
        for &t in &lane.assigned {
            for m in trajectories[t].samples() {
                match residual_e1(lane, m.position) {
                    Ok(_) => points.push((li, m.position)),
                    Err(_) => report.skipped_points += 1,
                }
            }
        }
    }

    let mut params = vec![0.0; n];
    for (li, lane) in lanes.iter().enumerate() {
        params[offsets[li]..offsets[li + 1]].copy_from_slice(lane.spline.control_points());
    }
    let mut work: Vec<Lane> = lanes.to_vec();
    let mut e2: Vec<(usize, usize, f64)> = Vec::new();

    let w2 = cfg.e2_weight * cfg.e2_weight;
    let mut stage = 1u8;
    let mut lambda = cfg.damping;
    let mut cost = total_cost(&work, &points, &e2, w2);
    report.trace.push(IterationRecord { stage, cost });

    let mut iter = 0;
    while iter < cfg.total_iterations {
        if stage == 1 && iter >= cfg.stage1_iterations {
            enter_stage2(&work, pairs, cfg, &mut e2, &mut report);
            stage = 2;
            lambda = cfg.damping;
            cost = total_cost(&work, &points, &e2, w2);
            report.trace.push(IterationRecord { stage, cost });
        }

        let (jtj, jtr) = normal_equations(&work, &points, &e2, &offsets, n, w2);
        let gradient_max = jtr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gradient_max <= GRADIENT_TOLERANCE * (1.0 + cost) {
            if stage == 2 {
                break;
            }
            enter_stage2(&work, pairs, cfg, &mut e2, &mut report);
            stage = 2;
            lambda = cfg.damping;
            cost = total_cost(&work, &points, &e2, w2);
            report.trace.push(IterationRecord { stage, cost });
            continue;
        }
        let accepted = loop {
            let mut m = jtj.clone();
            for i in 0..n {
                let d = jtj[i * n + i];
                m[i * n + i] = d + lambda * d.max(1e-12);
            }
            let mut step: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let solved = linalg::solve_spd(&mut m, n, &mut step);
            if solved {
                let trial: Vec<f64> =
                    params.iter().zip(&step).map(|(p, s)| p + s).collect();
                load_params(&mut work, &offsets, &trial);
                let trial_cost = total_cost(&work, &points, &e2, w2);
                if trial_cost.is_finite() && trial_cost <= cost {
                    lambda = (lambda / DAMPING_STEP).max(1e-12);
                    break Some((trial, trial_cost));
                }
            }
            lambda *= DAMPING_STEP;
            if lambda > DAMPING_LIMIT {
                break None;
            }
        };
        let Some((trial, trial_cost)) = accepted else {
            // Keep the best iterate: accepted costs never increased.
            load_params(&mut work, &offsets, &params);
            store_params(lanes, &offsets, &params);
            return Err(RefineError::SolverDiverged(lambda));
        };

        let improvement = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
        params = trial;
        cost = trial_cost;
        report.trace.push(IterationRecord { stage, cost });
        iter += 1;

        if improvement < EARLY_STOP {
            if stage == 2 {
                break;
            }
            if iter < cfg.total_iterations {
                enter_stage2(&work, pairs, cfg, &mut e2, &mut report);
                stage = 2;
                lambda = cfg.damping;
                cost = total_cost(&work, &points, &e2, w2);
                report.trace.push(IterationRecord { stage, cost });
            }
        }
    }

    store_params(lanes, &offsets, &params);
    report.final_cost = cost;
    Ok(report)
}

/// Freezes the stage-2 residual set: arc-equidistant anchors on the current
/// splines in both directions of every pair, gated on the perpendicular
/// distance.
fn enter_stage2(
    work: &[Lane],
    pairs: &[NeighborPair],
    cfg: &RefinementConfig,
    e2: &mut Vec<(usize, usize, f64)>,
    report: &mut RefineReport,
) {
    for pair in pairs {
        for (a, b) in [(pair.lane_a, pair.lane_b), (pair.lane_b, pair.lane_a)] {
            for x in course_anchor_xs(&work[a], cfg.e2_samples_per_lane) {
                match residual_e2(&work[a], &work[b], x) {
                    Err(_) => report.skipped_neighbor_samples += 1,
                    Ok(res) if res.d_perp.abs() >= cfg.delta => {
                        report.gated_neighbor_samples += 1
                    }
                    Ok(_) => e2.push((a, b, x)),
                }
            }
        }
    }
    report.active_neighbor_rows = e2.len();
}

fn load_params(work: &mut [Lane], offsets: &[usize], params: &[f64]) {
    for (li, lane) in work.iter_mut().enumerate() {
        lane.spline
            .control_points_mut()
            .copy_from_slice(&params[offsets[li]..offsets[li + 1]]);
    }
}

fn store_params(lanes: &mut [Lane], offsets: &[usize], params: &[f64]) {
    load_params(lanes, offsets, params);
}

/// Total squared-residual cost in the fixed point and neighbor-sample
/// order; samples that drifted out of a partner domain drop out silently.
/// Neighbor rows carry the squared configured weight.
fn total_cost(
    work: &[Lane],
    points: &[(usize, Point2)],
    e2: &[(usize, usize, f64)],
    e2_weight_sq: f64,
) -> f64 {
    let mut cost = 0.0;
    for &(li, p) in points {
        if let Ok((r, _, _)) = residual_e1(&work[li], p) {
            cost += r * r;
        }
    }
    for &(a, b, x) in e2 {
        if let Ok(res) = residual_e2(&work[a], &work[b], x) {
            cost += e2_weight_sq * res.value * res.value;
        }
    }
    cost
}

/// Accumulates the Gauss-Newton normal equations `J^T J` and `J^T r` over
/// all active residual rows.
fn normal_equations(
    work: &[Lane],
    points: &[(usize, Point2)],
    e2: &[(usize, usize, f64)],
    offsets: &[usize],
    n: usize,
    e2_weight_sq: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut jtj = vec![0.0; n * n];
    let mut jtr = vec![0.0; n];
    let mut cols = [0usize; 8];
    let mut grads = [0.0f64; 8];
    for &(li, p) in points {
        let Ok((r, idx, grad)) = residual_e1(&work[li], p) else { continue };
        let o = offsets[li];
        for a in 0..4 {
            let ca = o + idx[a];
            jtr[ca] += grad[a] * r;
            for b in 0..4 {
                jtj[ca * n + o + idx[b]] += grad[a] * grad[b];
            }
        }
    }
    for &(ai, bi, x) in e2 {
        let Ok(res) = residual_e2(&work[ai], &work[bi], x) else { continue };
        let (oa, ob) = (offsets[ai], offsets[bi]);
        for k in 0..4 {
            cols[k] = oa + res.a_index[k];
            grads[k] = res.a_grad[k];
            cols[k + 4] = ob + res.b_index[k];
            grads[k + 4] = res.b_grad[k];
        }
        for a in 0..8 {
            jtr[cols[a]] += e2_weight_sq * grads[a] * res.value;
            for b in 0..8 {
                jtj[cols[a] * n + cols[b]] += e2_weight_sq * grads[a] * grads[b];
            }
        }
    }
    (jtj, jtr)
}

/// One directed piece of the merged lane map.
#[derive(Debug, Clone)]
pub struct Lanelet {
    /// Stable id, assigned in emission order.
    pub id: usize,
    /// Center line in world coordinates.
    pub center_line: Polyline,
    /// Pieces this one flows into.
    pub successors: Vec<usize>,
    /// Pieces flowing into this one.
    pub predecessors: Vec<usize>,
}

/// Merged lane map: lanelets plus a log of the merges taken.
#[derive(Debug, Clone, Default)]
pub struct LaneletMap {
    /// All lanelets, id-ordered.
    pub lanelets: Vec<Lanelet>,
    /// One line per shared section describing which lanes merged.
    pub merge_log: Vec<String>,
}

/// Merges refined lanes into a lanelet graph: each lane course is
/// discretized, every sample is labeled with the set of lanes within
/// `tolerance`, and maximal runs of equal label sets become lanelets.
/// Runs shared by several lanes are emitted once, by the lowest member
/// lane, and consecutive runs along a lane are linked as successors, which
/// turns shared entries into forks and shared exits into joins. The result
/// is deterministic in lane input order.
pub fn merge_lanelets(lanes: &[Lane], tolerance: f64) -> LaneletMap {
    let mut map = LaneletMap::default();
    if lanes.is_empty() {
        return map;
    }
    // Discretized courses and their polylines for distance queries.
    let courses: Vec<Vec<Point2>> = lanes
        .iter()
        .map(|lane| {
            let rough = sample_lane_course(lane, 64);
            let len: f64 = rough.windows(2).map(|w| w[0].distance(w[1])).sum();
            let n = ((len / MERGE_STEP).ceil() as usize + 1).max(2);
            sample_lane_course(lane, n)
        })
        .collect();
    let polys: Vec<Polyline> = courses
        .iter()
        .map(|c| Polyline::new(c.clone()).expect("discretized courses have distinct points"))
        .collect();

    // Per-sample membership: which lanes pass within tolerance.
    let runs_per_lane: Vec<Vec<(Vec<usize>, std::ops::Range<usize>)>> = courses
        .iter()
        .enumerate()
        .map(|(i, course)| {
            let sets: Vec<Vec<usize>> = course
                .iter()
                .map(|&p| {
                    (0..lanes.len())
                        .filter(|&j| j == i || polys[j].nearest_point(p).distance <= tolerance)
                        .collect()
                })
                .collect();
            segment_runs(&sets)
        })
        .collect();

    // Emit pieces, shared ones only from their lowest member lane, matched
    // across lanes by (member set, occurrence along the lane).
    let mut piece_ids: BTreeMap<(Vec<usize>, usize), usize> = BTreeMap::new();
    let mut sequences: Vec<Vec<usize>> = vec![Vec::new(); lanes.len()];
    for (i, runs) in runs_per_lane.iter().enumerate() {
        let mut occurrences: BTreeMap<&[usize], usize> = BTreeMap::new();
        for (set, range) in runs {
            let occ = occurrences.entry(set).or_insert(0);
            let key = (set.clone(), *occ);
            *occ += 1;
            let id = if set[0] == i {
                let id = emit_piece(&mut map, &courses[i][range.clone()], set);
                piece_ids.insert(key, id);
                id
            } else if let Some(&id) = piece_ids.get(&key) {
                id
            } else {
                // The representative segmented this stretch differently;
                // keep the piece under this lane instead of dropping it.
                emit_piece(&mut map, &courses[i][range.clone()], set)
            };
            sequences[i].push(id);
        }
    }

    for seq in &sequences {
        for w in seq.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == b {
                continue;
            }
            if !map.lanelets[a].successors.contains(&b) {
                map.lanelets[a].successors.push(b);
            }
            if !map.lanelets[b].predecessors.contains(&a) {
                map.lanelets[b].predecessors.push(a);
            }
        }
    }
    map
}

fn emit_piece(map: &mut LaneletMap, points: &[Point2], members: &[usize]) -> usize {
    let id = map.lanelets.len();
    let mut pts = points.to_vec();
    pts.dedup_by(|a, b| a.distance(*b) < 1e-9);
    map.lanelets.push(Lanelet {
        id,
        center_line: Polyline::new(pts).expect("merge runs span at least two distinct samples"),
        successors: Vec::new(),
        predecessors: Vec::new(),
    });
    if members.len() > 1 {
        let span = (points.len().saturating_sub(1)) as f64 * MERGE_STEP;
        map.merge_log.push(format!("lanes {members:?} share a {span:.1} m section"));
    }
    id
}

/// Splits a label sequence into maximal runs of equal sets, absorbing runs
/// shorter than [`MIN_MERGE_RUN`] into their predecessor (the successor for
/// a leading run) so borderline samples cannot splinter the map.
fn segment_runs(sets: &[Vec<usize>]) -> Vec<(Vec<usize>, std::ops::Range<usize>)> {
    let mut runs: Vec<(Vec<usize>, std::ops::Range<usize>)> = Vec::new();
    for (k, s) in sets.iter().enumerate() {
        match runs.last_mut() {
            Some((last, range)) if last == s => range.end = k + 1,
            _ => runs.push((s.clone(), k..k + 1)),
        }
    }
    loop {
        let Some(pos) = runs.iter().position(|(_, r)| r.len() < MIN_MERGE_RUN) else { break };
        if runs.len() == 1 {
            break;
        }
        let (_, range) = runs.remove(pos);
        if pos > 0 {
            runs[pos - 1].1.end = range.end;
        } else {
            runs[0].1.start = range.start;
        }
        // Absorption can leave equal neighbors; fuse them.
        let mut fused: Vec<(Vec<usize>, std::ops::Range<usize>)> = Vec::new();
        for (set, range) in runs {
            match fused.last_mut() {
                Some((last, r)) if *last == set => r.end = range.end,
                _ => fused.push((set, range)),
            }
        }
        runs = fused;
    }
    runs
}

mod linalg {
    /// Solves the symmetric positive definite system `m x = b` in place by
    /// unpivoted Cholesky; `b` holds the solution on success. Returns false
    /// when a pivot loses positivity.
    pub(super) fn solve_spd(m: &mut [f64], n: usize, b: &mut [f64]) -> bool {
        for j in 0..n {
            let mut d = m[j * n + j];
            for k in 0..j {
                d -= m[j * n + k] * m[j * n + k];
            }
            if !(d > 1e-300) {
                return false;
            }
            let d = d.sqrt();
            m[j * n + j] = d;
            for i in j + 1..n {
                let mut v = m[i * n + j];
                for k in 0..j {
                    v -= m[i * n + k] * m[j * n + k];
                }
                m[i * n + j] = v / d;
            }
        }
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= m[i * n + k] * b[k];
            }
            b[i] = v / m[i * n + i];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            for k in i + 1..n {
                v -= m[k * n + i] * b[k];
            }
            b[i] = v / m[i * n + i];
        }
        true
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arm;
    use crate::sim::{ground_truth_lanes, simulate, GroundTruthLane, SimConfig};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    fn cross() -> Intersection {
        Intersection::new(
            Point2::default(),
            vec![
                Arm::new(deg(0.0), 1.0, 1, 1),
                Arm::new(deg(90.0), 1.0, 1, 1),
                Arm::new(deg(180.0), 1.0, 1, 1),
                Arm::new(deg(-90.0), 1.0, 1, 1),
            ],
        )
        .expect("cross intersection is valid")
    }

    /// Two straight lanes from adjacent west entry slots converging into the
    /// single east exit.
    fn converging_model() -> (Intersection, Vec<GroundTruthLane>) {
        let model = Intersection::new(
            Point2::default(),
            vec![Arm::new(PI, 1.3, 2, 0), Arm::new(0.0, 1.3, 0, 1)],
        )
        .expect("two-arm corridor is valid");
        let lanes = ground_truth_lanes(&model);
        assert_eq!(lanes.len(), 2, "both entries feed the single exit");
        (model, lanes)
    }

    /// Simulates each ground-truth lane in its own batch so the generating
    /// (entry, exit) label of every trajectory stays known.
    fn labeled_dataset(
        model: &Intersection,
        noise_sigma: f64,
        heading_sigma: f64,
        seed: u64,
    ) -> (Vec<Trajectory>, Vec<((usize, usize), (usize, usize))>) {
        let mut trajectories = Vec::new();
        let mut labels = Vec::new();
        for (k, lane) in ground_truth_lanes(model).iter().enumerate() {
            let cfg = SimConfig {
                noise_sigma,
                heading_sigma,
                seed: seed + k as u64,
                ..SimConfig::default()
            };
            for z in simulate(std::slice::from_ref(lane), &cfg).expect("simulation succeeds") {
                trajectories.push(z);
                labels.push((lane.entry, lane.exit));
            }
        }
        (trajectories, labels)
    }

    fn stub_index(model: &Intersection, direction: Direction, arm: usize, slot: usize) -> usize {
        model
            .stubs()
            .iter()
            .position(|s| s.direction == direction && s.arm_index == arm && s.slot == slot)
            .expect("stub exists")
    }

    /// Hand-built lane: a constant-height spline in a rotated frame, with
    /// stubs borrowed from the model so neighbor relations stay meaningful.
    fn hand_lane(
        model: &Intersection,
        entry: (usize, usize),
        exit: (usize, usize),
        y: f64,
        lo: f64,
        hi: f64,
        rotation: f64,
        assigned: Vec<usize>,
    ) -> Lane {
        let stubs = model.stubs();
        let find = |dir: Direction, (arm, slot): (usize, usize)| {
            stubs
                .iter()
                .find(|s| s.direction == dir && s.arm_index == arm && s.slot == slot)
                .expect("stub exists")
                .clone()
        };
        Lane {
            entry: find(Direction::Entry, entry),
            exit: find(Direction::Exit, exit),
            assigned,
            frame: Frame2::new(Point2::default(), rotation),
            spline: UniformCubicSpline::from_control(lo, hi, vec![y; 12])
                .expect("constant spline is valid"),
        }
    }

    /// Straight horizontal trajectories along `y`, sampled every meter.
    fn line_trajectories(y: f64, x_lo: f64, x_hi: f64, count: usize) -> Vec<Trajectory> {
        (0..count)
            .map(|i| {
                let samples: Vec<Measurement> = (0..=(x_hi - x_lo) as usize)
                    .map(|k| Measurement {
                        position: Point2::new(x_lo + k as f64, y),
                        heading: 0.0,
                        t: k as f64,
                    })
                    .collect();
                Trajectory::new(format!("line-{i}"), samples).expect("line trajectory is valid")
            })
            .collect()
    }

    fn rotate_point(p: Point2, theta: f64) -> Point2 {
        let (s, c) = theta.sin_cos();
        Point2::new(c * p.x - s * p.y, s * p.x + c * p.y)
    }

    #[test]
    fn noise_free_trajectories_recover_their_generating_stubs() {
        let model = cross();
        let (trajectories, labels) = labeled_dataset(&model, 0.0, 0.0, 7);
        let assoc = associate(&trajectories, &model);
        assert!(assoc.unassignable.is_empty(), "every trajectory passes the center");
        assert_eq!(assoc.assigned.len(), trajectories.len(), "every trajectory is assigned");
        for a in &assoc.assigned {
            let ((ea, es), (oa, os)) = labels[a.trajectory];
            assert_eq!(
                a.entry,
                stub_index(&model, Direction::Entry, ea, es),
                "entry stub of trajectory {}",
                a.trajectory
            );
            assert_eq!(
                a.exit,
                stub_index(&model, Direction::Exit, oa, os),
                "exit stub of trajectory {}",
                a.trajectory
            );
        }
    }

    #[test]
    fn equidistant_approach_breaks_the_tie_toward_the_lower_slot() {
        let (model, _) = converging_model();
        let stubs = model.stubs();
        let e0 = stub_index(&model, Direction::Entry, 0, 0);
        let e1 = stub_index(&model, Direction::Entry, 0, 1);
        let exit = stub_index(&model, Direction::Exit, 1, 0);
        let y0 = stubs[e0].center_line.points()[0].y;
        let y1 = stubs[e1].center_line.points()[0].y;
        let y_exit = stubs[exit].center_line.points()[0].y;
        // One approach sample on each entry line, so both mean distances
        // are the identical |y1 - y0| / 2; the departure sample sits
        // farther from the center than either, keeping the split at the
        // second sample.
        let z = Trajectory::new(
            "tie".into(),
            vec![
                Measurement { position: Point2::new(-30.0, y0), heading: 0.0, t: 0.0 },
                Measurement { position: Point2::new(-28.0, y1), heading: 0.0, t: 1.0 },
                Measurement { position: Point2::new(32.0, y_exit), heading: 0.0, t: 2.0 },
            ],
        )
        .expect("tie trajectory is valid");
        let assoc = associate(&[z], &model);
        assert_eq!(assoc.assigned.len(), 1, "the trajectory is assignable");
        assert_eq!(assoc.assigned[0].entry, e0, "tie must resolve to the lower slot");
        assert_eq!(assoc.assigned[0].exit, exit, "single exit is unambiguous");
    }

    #[test]
    fn association_accuracy_on_noisy_data_exceeds_95_percent() {
        let model = cross();
        let (trajectories, labels) = labeled_dataset(&model, 1.0, deg(10.0), 11);
        let assoc = associate(&trajectories, &model);
        assert!(assoc.unassignable.is_empty(), "noisy data still reaches the center");
        let mut correct = 0;
        for a in &assoc.assigned {
            let ((ea, es), (oa, os)) = labels[a.trajectory];
            if a.entry == stub_index(&model, Direction::Entry, ea, es)
                && a.exit == stub_index(&model, Direction::Exit, oa, os)
            {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / trajectories.len() as f64;
        assert!(accuracy >= 0.95, "association accuracy {accuracy:.3} below 0.95");
    }

    #[test]
    fn distant_trajectories_are_reported_unassignable() {
        let model = cross();
        let far = Trajectory::new(
            "far".into(),
            vec![
                Measurement { position: Point2::new(500.0, 500.0), heading: 0.0, t: 0.0 },
                Measurement { position: Point2::new(540.0, 500.0), heading: 0.0, t: 1.0 },
            ],
        )
        .expect("distant trajectory is valid");
        let assoc = associate(&[far], &model);
        assert!(assoc.assigned.is_empty(), "nothing within range may be assigned");
        assert_eq!(assoc.unassignable, vec![0], "the distant trajectory is reported");
    }

    #[test]
    fn straight_through_lane_initializes_to_a_line() {
        let model = cross();
        let lane_gt = ground_truth_lanes(&model)
            .into_iter()
            .find(|l| {
                model.arms()[l.entry.0].alpha.abs() > 3.0 && model.arms()[l.exit.0].alpha.abs() < 1e-6
            })
            .expect("west-to-east lane exists");
        let cfg = SimConfig { noise_sigma: 0.0, heading_sigma: 0.0, seed: 3, ..SimConfig::default() };
        let trajectories = simulate(std::slice::from_ref(&lane_gt), &cfg).expect("simulation succeeds");
        let assoc = associate(&trajectories, &model);
        let lanes = initialize_lanes(&assoc, &trajectories, &model, &RefinementConfig::default())
            .expect("initialization succeeds");
        assert_eq!(lanes.len(), 1, "one observed pair gives one lane");
        let lane = &lanes[0];
        let (lo, hi) = lane.spline.domain();
        let y0 = lane.spline.eval(lo).expect("domain edge evaluates");
        let y1 = lane.spline.eval(hi).expect("domain edge evaluates");
        let mut worst = 0.0f64;
        for k in 0..=200 {
            let x = lo + (hi - lo) * k as f64 / 200.0;
            let line = y0 + (x - lo) * (y1 - y0) / (hi - lo);
            worst = worst.max((lane.spline.eval(x).expect("grid point evaluates") - line).abs());
        }
        assert!(worst < 1e-6, "straight-through seed deviates {worst:.2e} m from a line");
    }

    #[test]
    fn construction_polyline_is_the_two_stubs_plus_the_chord() {
        let model = cross();
        let stubs = model.stubs();
        let entry = stubs.iter().find(|s| s.direction == Direction::Entry).expect("entry exists");
        let exit = stubs
            .iter()
            .find(|s| s.direction == Direction::Exit && s.arm_index != entry.arm_index)
            .expect("exit on another arm exists");
        let corners = construction_corners(entry, exit);
        assert_eq!(corners.len(), 4, "two stub segments give four corners");
        let expect = [
            entry.center_line.points()[0],
            entry.center_line.points()[1],
            exit.center_line.points()[0],
            exit.center_line.points()[1],
        ];
        for (k, (got, want)) in corners.iter().zip(expect).enumerate() {
            assert!(got.distance(want) < 1e-12, "corner {k} is off: {got:?} vs {want:?}");
        }
    }

    #[test]
    fn lane_count_matches_distinct_observed_pairs() {
        let model = cross();
        let (trajectories, _) = labeled_dataset(&model, 1.0, deg(10.0), 5);
        let assoc = associate(&trajectories, &model);
        let lanes = initialize_lanes(&assoc, &trajectories, &model, &RefinementConfig::default())
            .expect("initialization succeeds");
        let distinct: std::collections::BTreeSet<(usize, usize)> =
            assoc.assigned.iter().map(|a| (a.entry, a.exit)).collect();
        assert_eq!(lanes.len(), distinct.len(), "one lane per observed pair");
        assert!(lanes.len() >= 12, "all twelve true movements observed, got {}", lanes.len());
        for lane in &lanes {
            assert!(!lane.assigned.is_empty(), "every lane carries at least one trajectory");
        }
    }

    #[test]
    fn cancelling_headings_fall_back_to_the_entry_stub_direction() {
        let model = cross();
        let entry = stub_index(&model, Direction::Entry, 0, 0);
        let exit = stub_index(&model, Direction::Exit, 2, 0);
        let entry_heading = model.stubs()[entry].heading;
        // Alternating opposite headings cancel exactly, so the mean heading
        // is undefined and the frame must fall back to the entry stub.
        let samples: Vec<Measurement> = (0..40)
            .map(|k| Measurement {
                position: Point2::new(-40.0 + 2.0 * k as f64, 2.0),
                heading: if k % 2 == 0 { 0.0 } else { PI },
                t: k as f64,
            })
            .collect();
        let z = Trajectory::new("cancel".into(), samples).expect("trajectory is valid");
        let assoc = AssociationSet {
            assigned: vec![Association { trajectory: 0, entry, exit }],
            unassignable: vec![],
        };
        let lanes = initialize_lanes(&assoc, &[z], &model, &RefinementConfig::default())
            .expect("initialization succeeds");
        assert_abs_diff_eq!(lanes[0].frame.rotation, entry_heading, epsilon = 1e-12);
    }

    #[test]
    fn point_residual_is_the_vertical_frame_offset() {
        let (model, _) = converging_model();
        let lane = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 40.0, 0.0, vec![]);
        let (r, _, _) = residual_e1(&lane, Point2::new(12.0, 0.0)).expect("in domain");
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);
        let (r, _, grad) = residual_e1(&lane, Point2::new(12.0, 0.5)).expect("in domain");
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r * r, 0.25, epsilon = 1e-12);
        let total: f64 = grad.iter().sum();
        assert_abs_diff_eq!(total, -1.0, epsilon = 1e-12);
        assert!(
            matches!(residual_e1(&lane, Point2::new(55.0, 0.0)), Err(RefineError::OutOfDomain { .. })),
            "points beyond the domain must be rejected"
        );
    }

    #[test]
    fn point_residual_gradient_matches_finite_differences() {
        let (model, _) = converging_model();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..50 {
            let rotation = rng.gen_range(-PI..PI);
            let control: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut lane = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 40.0, rotation, vec![]);
            lane.spline = UniformCubicSpline::from_control(0.0, 40.0, control).expect("valid");
            let x = rng.gen_range(1.0..39.0);
            let y = rng.gen_range(-6.0..6.0);
            let p = lane.frame.from_frame(Point2::new(x, y));
            let (_, idx, grad) = residual_e1(&lane, p).expect("in domain");
            let h = 1e-5;
            for k in 0..4 {
                let mut plus = lane.clone();
                plus.spline.control_points_mut()[idx[k]] += h;
                let mut minus = lane.clone();
                minus.spline.control_points_mut()[idx[k]] -= h;
                let fd = (residual_e1(&plus, p).expect("in domain").0
                    - residual_e1(&minus, p).expect("in domain").0)
                    / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[k] - fd).abs() / denom < 1e-5,
                    "case {case} control {k}: analytic {} vs finite difference {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn neighbor_residual_vanishes_at_overlap_and_at_lane_width() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        for offset in [0.0, -LANE_WIDTH, LANE_WIDTH] {
            let b = hand_lane(&model, (0, 1), (1, 0), offset, 0.0, 60.0, 0.0, vec![]);
            let res = residual_e2(&a, &b, 30.0).expect("in both domains");
            assert_abs_diff_eq!(res.value, 0.0, epsilon = 1e-9);
            if offset != 0.0 {
                assert_abs_diff_eq!(res.d_perp, LANE_WIDTH, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn neighbor_residual_halfway_matches_the_product_form() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        let b = hand_lane(&model, (0, 1), (1, 0), -1.35, 0.0, 60.0, 0.0, vec![]);
        let res = residual_e2(&a, &b, 30.0).expect("in both domains");
        assert_abs_diff_eq!(res.d_perp, 1.35, epsilon = 1e-12);
        assert_abs_diff_eq!(res.value, 1.35 * (1.35 - 2.7), epsilon = 1e-12);
        assert_abs_diff_eq!(res.value * res.value, 3.32150625, epsilon = 1e-10);
    }

    #[test]
    fn neighbor_distance_survives_a_frame_change() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        // Same world line y = -1.35 expressed in a frame rotated by 30
        // degrees: fit its frame coordinates with a spline.
        let rotation = deg(30.0);
        let frame = Frame2::new(Point2::default(), rotation);
        let pts: Vec<Point2> =
            (0..=280).map(|k| frame.to_frame(Point2::new(-5.0 + k as f64 * 0.25, -1.35))).collect();
        let lo = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let samples: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        let mut b = hand_lane(&model, (0, 1), (1, 0), 0.0, lo, hi, rotation, vec![]);
        b.spline = fit_spline(lo, hi, 12, &samples).expect("line fit succeeds");
        let res = residual_e2(&a, &b, 30.0).expect("in both domains");
        assert_abs_diff_eq!(res.d_perp, 1.35, epsilon = 1e-8);
        assert_abs_diff_eq!(res.value, 1.35 * (1.35 - 2.7), epsilon = 1e-7);
    }

    #[test]
    fn neighbor_residual_gradients_match_finite_differences() {
        let (model, _) = converging_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 40 {
            let rot_a = rng.gen_range(-PI..PI);
            let rot_b = rot_a + rng.gen_range(-0.4..0.4);
            let ca: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cb: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, rot_a, vec![]);
            a.spline = UniformCubicSpline::from_control(0.0, 60.0, ca).expect("valid");
            let mut b = hand_lane(&model, (0, 1), (1, 0), 0.0, -80.0, 80.0, rot_b, vec![]);
            b.spline = UniformCubicSpline::from_control(-80.0, 80.0, cb).expect("valid");
            let x = rng.gen_range(5.0..55.0);
            let Ok(res) = residual_e2(&a, &b, x) else { continue };
            // Keep clear of the orientation kink at zero distance.
            if res.d_perp < 0.3 {
                continue;
            }
            checked += 1;
            let h = 1e-5;
            let value_of = |a: &Lane, b: &Lane| residual_e2(a, b, x).expect("in domain").value;
            for k in 0..4 {
                let mut plus = a.clone();
                plus.spline.control_points_mut()[res.a_index[k]] += h;
                let mut minus = a.clone();
                minus.spline.control_points_mut()[res.a_index[k]] -= h;
                let fd = (value_of(&plus, &b) - value_of(&minus, &b)) / (2.0 * h);
                let denom = res.a_grad[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (res.a_grad[k] - fd).abs() / denom < 1e-5,
                    "case {checked} lane A control {k}: analytic {} vs finite difference {}",
                    res.a_grad[k],
                    fd
                );
            }
            for k in 0..4 {
                let mut plus = b.clone();
                plus.spline.control_points_mut()[res.b_index[k]] += h;
                let mut minus = b.clone();
                minus.spline.control_points_mut()[res.b_index[k]] -= h;
                let fd = (value_of(&a, &plus) - value_of(&a, &minus)) / (2.0 * h);
                let denom = res.b_grad[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (res.b_grad[k] - fd).abs() / denom < 1e-5,
                    "case {checked} lane B control {k}: analytic {} vs finite difference {}",
                    res.b_grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn neighbor_samples_outside_the_partner_domain_are_rejected() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        let b = hand_lane(&model, (0, 1), (1, 0), 0.0, 0.0, 10.0, 0.0, vec![]);
        assert!(
            matches!(residual_e2(&a, &b, 30.0), Err(RefineError::OutOfDomain { .. })),
            "an anchor beyond lane B's domain must be skipped"
        );
    }

    #[test]
    fn anchors_on_a_straight_lane_are_equidistant() {
        let (model, _) = converging_model();
        let lane = hand_lane(&model, (0, 0), (1, 0), 2.0, 0.0, 60.0, 0.0, vec![]);
        let xs = course_anchor_xs(&lane, 7);
        assert_eq!(xs.len(), 7, "requested anchor count");
        for (k, &x) in xs.iter().enumerate() {
            assert_abs_diff_eq!(x, 10.0 * k as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn refine_restores_a_straight_lane_from_noise_free_data() {
        let model = cross();
        let lane_gt = ground_truth_lanes(&model)
            .into_iter()
            .find(|l| {
                model.arms()[l.entry.0].alpha.abs() > 3.0 && model.arms()[l.exit.0].alpha.abs() < 1e-6
            })
            .expect("west-to-east lane exists");
        let cfg = SimConfig { noise_sigma: 0.0, heading_sigma: 0.0, seed: 9, ..SimConfig::default() };
        let trajectories = simulate(std::slice::from_ref(&lane_gt), &cfg).expect("simulation succeeds");
        let assoc = associate(&trajectories, &model);
        let rcfg = RefinementConfig::default();
        let mut lanes =
            initialize_lanes(&assoc, &trajectories, &model, &rcfg).expect("initialization succeeds");
        for (k, c) in lanes[0].spline.control_points_mut().iter_mut().enumerate() {
            *c += if k % 2 == 0 { 0.5 } else { -0.5 };
        }
        refine(&mut lanes, &trajectories, &[], &rcfg).expect("solver converges");
        let mut worst = 0.0f64;
        for z in &trajectories {
            for m in z.samples() {
                let (r, _, _) = residual_e1(&lanes[0], m.position).expect("data stays in domain");
                worst = worst.max(r.abs());
            }
        }
        assert!(worst < 1e-6, "refined lane deviates {worst:.2e} m from the generating line");
    }

    #[test]
    fn stage_one_reaches_the_linear_least_squares_optimum() {
        let model = cross();
        let lane_gt = ground_truth_lanes(&model)
            .into_iter()
            .find(|l| {
                model.arms()[l.entry.0].alpha.abs() > 3.0 && model.arms()[l.exit.0].alpha.abs() < 1e-6
            })
            .expect("west-to-east lane exists");
        let cfg = SimConfig { noise_sigma: 1.0, heading_sigma: deg(10.0), seed: 21, ..SimConfig::default() };
        let trajectories = simulate(std::slice::from_ref(&lane_gt), &cfg).expect("simulation succeeds");
        let assoc = associate(&trajectories, &model);
        let rcfg = RefinementConfig::default();
        let mut lanes =
            initialize_lanes(&assoc, &trajectories, &model, &rcfg).expect("initialization succeeds");
        assert_eq!(lanes.len(), 1, "a single lane is observed");
        let report = refine(&mut lanes, &trajectories, &[], &rcfg).expect("solver converges");

        // Closed-form optimum of the same linear problem over the same
        // points, via the unregularized normal equations.
        let lane = &lanes[0];
        let n = lane.spline.control_count();
        let mut gram = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        let mut pts = Vec::new();
        for &t in &lane.assigned {
            for m in trajectories[t].samples() {
                let q = lane.frame.to_frame(m.position);
                let (idx, w) = lane.spline.design_row(q.x).expect("data stays in domain");
                pts.push((idx, w, q.y));
                for a in 0..4 {
                    rhs[idx[a]] += w[a] * q.y;
                    for b in 0..4 {
                        gram[idx[a] * n + idx[b]] += w[a] * w[b];
                    }
                }
            }
        }
        let mut best = rhs.clone();
        assert!(
            linalg::solve_spd(&mut gram, n, &mut best),
            "closed-form normal equations are nonsingular"
        );
        let mut best_cost = 0.0;
        for (idx, w, y) in &pts {
            let fit: f64 = idx.iter().zip(w).map(|(&i, wi)| wi * best[i]).sum();
            best_cost += (y - fit) * (y - fit);
        }
        let rel = (report.final_cost - best_cost) / best_cost;
        assert!(
            rel.abs() < 1e-8,
            "solver cost {:.12} vs closed form {best_cost:.12} (relative gap {rel:.2e})",
            report.final_cost
        );
    }

    /// Two hypothesis lanes over the same physical straight lane, sharing
    /// the exit stub, the second seeded one meter off the shared data.
    fn shared_exit_fixture() -> (Vec<Lane>, Vec<Trajectory>, Vec<NeighborPair>, RefineReport) {
        let (model, _) = converging_model();
        let trajectories = line_trajectories(2.0, -35.0, 35.0, 4);
        let assigned: Vec<usize> = (0..trajectories.len()).collect();
        let lanes = vec![
            hand_lane(&model, (0, 0), (1, 0), 2.0, -36.0, 36.0, 0.0, assigned.clone()),
            hand_lane(&model, (0, 1), (1, 0), 3.0, -36.0, 36.0, 0.0, assigned),
        ];
        let pairs = neighbor_pairs(&lanes);
        assert_eq!(
            pairs,
            vec![NeighborPair { lane_a: 0, lane_b: 1, relation: NeighborRelation::SharedExit }],
            "the two lanes share their exit stub"
        );
        let mut lanes = lanes;
        let report = refine(&mut lanes, &trajectories, &pairs, &RefinementConfig::default())
            .expect("solver converges");
        (lanes, trajectories, pairs, report)
    }

    #[test]
    fn shared_exit_lanes_end_in_a_neighbor_residual_minimum_everywhere() {
        let (lanes, _, _, _) = shared_exit_fixture();
        for (a, b) in [(0, 1), (1, 0)] {
            for (k, x) in course_anchor_xs(&lanes[a], 50).into_iter().enumerate() {
                let Ok(res) = residual_e2(&lanes[a], &lanes[b], x) else { continue };
                let closest = res.d_perp.min((res.d_perp - LANE_WIDTH).abs());
                assert!(
                    closest < 0.05,
                    "lane {a} anchor {k}: d_perp {:.4} m sits between the minima",
                    res.d_perp
                );
            }
        }
    }

    #[test]
    fn cost_trace_is_non_increasing_within_each_stage() {
        let (_, _, _, report) = shared_exit_fixture();
        assert!(report.trace.len() >= 3, "trace records stage starts and steps");
        for w in report.trace.windows(2) {
            if w[0].stage == w[1].stage {
                assert!(
                    w[1].cost <= w[0].cost * (1.0 + 1e-12) + 1e-12,
                    "cost rose within stage {}: {} -> {}",
                    w[0].stage,
                    w[0].cost,
                    w[1].cost
                );
            }
        }
        assert!(report.trace.iter().any(|r| r.stage == 2), "stage 2 ran");
    }

    #[test]
    fn refined_splines_stay_twice_differentiable() {
        let (lanes, _, _, _) = shared_exit_fixture();
        for (k, lane) in lanes.iter().enumerate() {
            let jump = lane.spline.smoothness_check();
            assert!(jump < 1e-9, "lane {k} second derivative jumps by {jump:.2e}");
        }
    }

    #[test]
    fn dataless_hypothesis_above_the_watershed_slides_to_the_width_minimum() {
        let (model, _) = converging_model();
        let trajectories = line_trajectories(0.0, -35.0, 35.0, 4);
        let assigned: Vec<usize> = (0..trajectories.len()).collect();
        let mut lanes = vec![
            hand_lane(&model, (0, 0), (1, 0), 0.0, -36.0, 36.0, 0.0, assigned),
            hand_lane(&model, (0, 1), (1, 0), 3.7, -36.0, 36.0, 0.0, vec![]),
        ];
        let pairs = vec![NeighborPair { lane_a: 0, lane_b: 1, relation: NeighborRelation::SharedExit }];
        refine(&mut lanes, &trajectories, &pairs, &RefinementConfig::default())
            .expect("solver converges");
        for x in course_anchor_xs(&lanes[0], 50) {
            let res = residual_e2(&lanes[0], &lanes[1], x).expect("anchors stay in domain");
            assert!(
                (res.d_perp - LANE_WIDTH).abs() < 1e-3,
                "neighbor term alone must settle at one lane width, got {:.4}",
                res.d_perp
            );
        }
    }

    #[test]
    fn dataless_hypothesis_below_the_watershed_slides_to_overlap() {
        let (model, _) = converging_model();
        let trajectories = line_trajectories(0.0, -35.0, 35.0, 4);
        let assigned: Vec<usize> = (0..trajectories.len()).collect();
        let mut lanes = vec![
            hand_lane(&model, (0, 0), (1, 0), 0.0, -36.0, 36.0, 0.0, assigned),
            hand_lane(&model, (0, 1), (1, 0), 1.0, -36.0, 36.0, 0.0, vec![]),
        ];
        let pairs = vec![NeighborPair { lane_a: 0, lane_b: 1, relation: NeighborRelation::SharedExit }];
        refine(&mut lanes, &trajectories, &pairs, &RefinementConfig::default())
            .expect("solver converges");
        for x in course_anchor_xs(&lanes[0], 50) {
            let res = residual_e2(&lanes[0], &lanes[1], x).expect("anchors stay in domain");
            assert!(
                res.d_perp < 1e-3,
                "neighbor term alone must settle at overlap, got {:.4}",
                res.d_perp
            );
        }
    }

    #[test]
    fn refinement_is_equivariant_under_rotation() {
        let theta = deg(17.0);
        let (model, gt) = converging_model();
        let cfg = SimConfig { noise_sigma: 1.0, heading_sigma: deg(10.0), seed: 31, ..SimConfig::default() };
        let trajectories = simulate(&gt, &cfg).expect("simulation succeeds");
        let rotated_model = Intersection::new(
            rotate_point(model.center(), theta),
            model
                .arms()
                .iter()
                .map(|a| Arm::new(a.alpha + theta, a.gap, a.entries, a.exits))
                .collect(),
        )
        .expect("rotated model is valid");
        let rotated: Vec<Trajectory> = trajectories
            .iter()
            .map(|z| {
                let samples = z
                    .samples()
                    .iter()
                    .map(|m| Measurement {
                        position: rotate_point(m.position, theta),
                        heading: m.heading + theta,
                        t: m.t,
                    })
                    .collect();
                Trajectory::new(z.id().to_string(), samples).expect("rotated trajectory is valid")
            })
            .collect();

        let rcfg = RefinementConfig::default();
        let run = |model: &Intersection, data: &[Trajectory]| {
            let assoc = associate(data, model);
            let mut lanes =
                initialize_lanes(&assoc, data, model, &rcfg).expect("initialization succeeds");
            let pairs = neighbor_pairs(&lanes);
            refine(&mut lanes, data, &pairs, &rcfg).expect("solver converges");
            lanes
        };
        let base = run(&model, &trajectories);
        let rot = run(&rotated_model, &rotated);
        assert_eq!(base.len(), rot.len(), "both runs observe the same lanes");
        for (i, (bl, rl)) in base.iter().zip(&rot).enumerate() {
            for (p, q) in sample_lane_course(bl, 40).iter().zip(sample_lane_course(rl, 40)) {
                let gap = rotate_point(*p, theta).distance(q);
                assert!(gap < 1e-6, "lane {i} deviates {gap:.2e} m after rotation");
            }
        }
    }

    #[test]
    fn a_poisoned_control_point_reports_divergence_and_keeps_the_best_iterate() {
        let (model, _) = converging_model();
        let trajectories = line_trajectories(2.0, -35.0, 35.0, 1);
        let mut lanes = vec![hand_lane(&model, (0, 0), (1, 0), 2.0, -36.0, 36.0, 0.0, vec![0])];
        lanes[0].spline.control_points_mut()[5] = f64::NAN;
        let before = lanes[0].spline.control_points().to_vec();
        let err = refine(&mut lanes, &trajectories, &[], &RefinementConfig::default());
        assert!(
            matches!(err, Err(RefineError::SolverDiverged(_))),
            "a cost that can never improve must diverge, got {err:?}"
        );
        let after = lanes[0].spline.control_points();
        assert_eq!(after.len(), before.len(), "control point count is preserved");
        for (k, (a, b)) in after.iter().zip(&before).enumerate() {
            assert_eq!(a.to_bits(), b.to_bits(), "control point {k} moved on divergence");
        }
    }

    #[test]
    fn neighbor_pairs_cover_shared_stubs_and_adjacency() {
        let model = Intersection::new(
            Point2::default(),
            vec![Arm::new(PI, 1.3, 2, 1), Arm::new(0.0, 1.3, 1, 2)],
        )
        .expect("corridor is valid");
        let lanes = vec![
            hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 10.0, 0.0, vec![]),
            hand_lane(&model, (0, 0), (1, 1), 0.0, 0.0, 10.0, 0.0, vec![]),
            hand_lane(&model, (0, 1), (1, 0), 0.0, 0.0, 10.0, 0.0, vec![]),
        ];
        let pairs = neighbor_pairs(&lanes);
        let relation = |a: usize, b: usize| {
            pairs.iter().find(|p| p.lane_a == a && p.lane_b == b).map(|p| p.relation)
        };
        assert_eq!(relation(0, 1), Some(NeighborRelation::SharedEntry), "same entry stub");
        assert_eq!(relation(0, 2), Some(NeighborRelation::SharedExit), "same exit stub");
        assert_eq!(
            relation(1, 2),
            Some(NeighborRelation::Adjacent),
            "adjacent entry slots and adjacent exit slots"
        );
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let narrow = RefinementConfig { delta: 2.0, ..RefinementConfig::default() };
        assert!(matches!(narrow.validate(), Err(RefineError::InvalidConfig(_))));
        let staged = RefinementConfig { stage1_iterations: 30, ..RefinementConfig::default() };
        assert!(matches!(staged.validate(), Err(RefineError::InvalidConfig(_))));
        let coarse = RefinementConfig { control_points: 3, ..RefinementConfig::default() };
        assert!(matches!(coarse.validate(), Err(RefineError::InvalidConfig(_))));
    }

    #[test]
    fn identical_lanes_merge_into_a_single_lanelet() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 2.0, 0.0, 60.0, 0.0, vec![]);
        let b = hand_lane(&model, (0, 1), (1, 0), 2.0, 0.0, 60.0, 0.0, vec![]);
        let map = merge_lanelets(&[a, b], MERGE_TOLERANCE);
        assert_eq!(map.lanelets.len(), 1, "fully overlapping lanes collapse");
        assert!(map.lanelets[0].successors.is_empty(), "a single piece has no successors");
        assert!(map.lanelets[0].predecessors.is_empty(), "a single piece has no predecessors");
        assert_eq!(map.merge_log.len(), 1, "the merge is logged once");
    }

    #[test]
    fn a_fork_yields_a_shared_entry_piece_with_two_successors() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        let mut b = hand_lane(&model, (0, 1), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        // Shared straight entry, then a smooth ramp two lane widths up.
        let samples: Vec<(f64, f64)> = (0..=240)
            .map(|k| {
                let x = k as f64 * 0.25;
                let y = if x <= 20.0 {
                    0.0
                } else if x >= 40.0 {
                    5.4
                } else {
                    let u = (x - 20.0) / 20.0;
                    5.4 * u * u * (3.0 - 2.0 * u)
                };
                (x, y)
            })
            .collect();
        b.spline = fit_spline(0.0, 60.0, 20, &samples).expect("ramp fit succeeds");
        let map = merge_lanelets(&[a, b], MERGE_TOLERANCE);
        assert_eq!(map.lanelets.len(), 3, "a shared piece and two branches");
        let shared = map
            .lanelets
            .iter()
            .find(|l| l.successors.len() == 2)
            .expect("one piece forks into two successors");
        assert!(shared.predecessors.is_empty(), "the fork piece starts the graph");
        for id in &shared.successors {
            assert_eq!(
                map.lanelets[*id].predecessors,
                vec![shared.id],
                "each branch descends from the fork piece"
            );
        }
        assert_eq!(map.merge_log.len(), 1, "the shared section is logged");
    }

    #[test]
    fn disjoint_lanes_stay_separate_lanelets() {
        let (model, _) = converging_model();
        let a = hand_lane(&model, (0, 0), (1, 0), 0.0, 0.0, 60.0, 0.0, vec![]);
        let b = hand_lane(&model, (0, 1), (1, 0), 10.0, 0.0, 60.0, 0.0, vec![]);
        let map = merge_lanelets(&[a, b], MERGE_TOLERANCE);
        assert_eq!(map.lanelets.len(), 2, "distant lanes stay apart");
        assert!(map.lanelets.iter().all(|l| l.successors.is_empty() && l.predecessors.is_empty()));
        assert!(map.merge_log.is_empty(), "nothing merged, nothing logged");
    }
}
