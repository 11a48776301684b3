//! Trajectory simulator: random ground-truth intersections, lane center
//! lines assembled from stubs plus smooth connectors, and noisy vehicle
//! trajectories sampled along them.
//!
//! Everything is driven by a seeded RNG, so a single `u64` reproduces an
//! entire dataset bit for bit.

use crate::geometry::{angle_diff, normalize_angle, Point2, Polyline};
use crate::model::{Arm, Direction, Intersection, LaneStub, ModelError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Vehicle speed used to derive timestamps from arc length.
const SPEED: f64 = 10.0;

/// Maximum absolute heading change of a legal turn. Sharper connections
/// (near U-turns) produce no lane.
const MAX_TURN: f64 = 120.0 * std::f64::consts::PI / 180.0;

/// Extra margin on top of the model's 25 degree arm separation when placing
/// random arms, so generated layouts are never borderline invalid.
const SEPARATION_JITTER: f64 = 3.0 * std::f64::consts::PI / 180.0;

/// Spacing of the points that discretize ground-truth center lines.
const CENTER_LINE_STEP: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    /// No valid random layout found within the attempt budget.
    #[error("no valid intersection layout found in {0} attempts")]
    GenerationFailed(usize),
    /// Requested generation ranges outside the supported envelope.
    #[error("invalid generation range: {0}")]
    InvalidRange(&'static str),
    /// Trajectory timestamps must strictly increase.
    #[error("trajectory {0} has non-increasing timestamps")]
    NonMonotonicTime(String),
    /// A trajectory needs at least two samples.
    #[error("trajectory {0} has fewer than 2 samples")]
    TooShort(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One observed vehicle state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub position: Point2,
    /// Heading in radians, `[-pi, pi)`.
    pub heading: f64,
    /// Timestamp in seconds.
    pub t: f64,
}

/// An ordered sequence of measurements from one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    id: String,
    samples: Vec<Measurement>,
}

impl Trajectory {
    pub fn new(id: String, samples: Vec<Measurement>) -> Result<Self, SimError> {
        if samples.len() < 2 {
            return Err(SimError::TooShort(id));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(SimError::NonMonotonicTime(id));
        }
        Ok(Self { id, samples })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn samples(&self) -> &[Measurement] {
        &self.samples
    }
}

/// A ground-truth lane: which entry and exit stub it connects and its full
/// center line (entry stub, connector, exit stub).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLane {
    /// (arm index, slot) of the entry stub.
    pub entry: (usize, usize),
    /// (arm index, slot) of the exit stub.
    pub exit: (usize, usize),
    pub center_line: Polyline,
}

/// Simulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Inclusive range of trajectories generated per lane.
    pub trajectories_per_lane: (usize, usize),
    /// Arc-length distance between consecutive samples, meters.
    pub sample_spacing: f64,
    /// Standard deviation of the per-axis Gaussian position noise, meters.
    pub noise_sigma: f64,
    /// Standard deviation of the Gaussian heading noise, radians.
    pub heading_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectories_per_lane: (3, 5),
            sample_spacing: 1.0,
            noise_sigma: 1.0,
            heading_sigma: 5.0_f64.to_radians(),
            seed: 0,
        }
    }
}

/// Heading change of a turn from an entry on `from` to an exit on `to`.
fn turn_angle(from: &Arm, to: &Arm) -> f64 {
    angle_diff(to.alpha, from.alpha + std::f64::consts::PI)
}

/// Inner control points of a connector curve from `p0` (leaving along
/// heading `t0`) to `p3` (arriving along heading `t3`): each sits a third
/// of the endpoint distance along its endpoint tangent.
fn connector_controls(p0: Point2, t0: f64, p3: Point2, t3: f64) -> (Point2, Point2) {
    let d = p0.distance(p3) / 3.0;
    let p1 = p0 + Point2::new(t0.cos(), t0.sin()) * d;
    let p2 = p3 - Point2::new(t3.cos(), t3.sin()) * d;
    (p1, p2)
}

fn cubic_bezier(p0: Point2, p1: Point2, p2: Point2, p3: Point2, t: f64) -> Point2 {
    let u = 1.0 - t;
    p0 * (u * u * u) + p1 * (3.0 * u * u * t) + p2 * (3.0 * u * t * t) + p3 * (t * t * t)
}

/// Cubic Bezier curve through `p0 -> p3` leaving `p0` along `t0` and
/// arriving at `p3` along `t3`. Returns points sampled every
/// [`CENTER_LINE_STEP`] of arc length, excluding both endpoints.
fn connector_points(p0: Point2, t0: f64, p3: Point2, t3: f64) -> Vec<Point2> {
    let (p1, p2) = connector_controls(p0, t0, p3, t3);
    // Dense parameter sweep, then resample by accumulated arc length.
    let dense: Vec<Point2> =
        (0..=400).map(|k| cubic_bezier(p0, p1, p2, p3, k as f64 / 400.0)).collect();
    let mut out = Vec::new();
    let mut acc = 0.0;
    for w in dense.windows(2) {
        let step = w[0].distance(w[1]);
        acc += step;
        if acc >= CENTER_LINE_STEP {
            out.push(w[1]);
            acc = 0.0;
        }
    }
    // Drop a resampled point that landed on the endpoint.
    if let Some(last) = out.last() {
        if last.distance(p3) < 1e-6 {
            out.pop();
        }
    }
    out
}

/// Assembles the full center line for a lane: entry stub, connector, exit
/// stub, resampled at roughly half-meter spacing.
fn lane_center_line(entry: &LaneStub, exit: &LaneStub) -> Polyline {
    let ep = entry.center_line.points();
    let xp = exit.center_line.points();
    let mut pts = Vec::new();
    // Entry stub: outer -> inner, densified.
    let entry_len = entry.center_line.length();
    let steps = (entry_len / CENTER_LINE_STEP).round() as usize;
    for k in 0..=steps {
        pts.push(entry.center_line.point_at(entry_len * k as f64 / steps as f64));
    }
    pts.extend(connector_points(ep[1], entry.heading, xp[0], exit.heading));
    let exit_len = exit.center_line.length();
    let steps = (exit_len / CENTER_LINE_STEP).round() as usize;
    for k in 0..=steps {
        pts.push(exit.center_line.point_at(exit_len * k as f64 / steps as f64));
    }
    // Defensive dedup: connector resampling can leave near-coincident joints.
    pts.dedup_by(|a, b| a.distance(*b) < 1e-6);
    Polyline::new(pts).expect("lane center line has distinct points")
}

/// Builds ground-truth lanes for an intersection: every entry stub connects
/// to every exit stub on every other arm reachable by a legal turn.
pub fn ground_truth_lanes(model: &Intersection) -> Vec<GroundTruthLane> {
    let stubs = model.stubs();
    let arms = model.arms();
    let mut lanes = Vec::new();
    for entry in stubs.iter().filter(|s| s.direction == Direction::Entry) {
        for exit in stubs.iter().filter(|s| s.direction == Direction::Exit) {
            if exit.arm_index == entry.arm_index {
                continue;
            }
            let turn = turn_angle(&arms[entry.arm_index], &arms[exit.arm_index]);
            if turn.abs() > MAX_TURN {
                continue;
            }
            lanes.push(GroundTruthLane {
                entry: (entry.arm_index, entry.slot),
                exit: (exit.arm_index, exit.slot),
                center_line: lane_center_line(entry, exit),
            });
        }
    }
    lanes
}

/// Draws a random intersection with `arm_count_range` arms (inclusive) and
/// per-direction lane counts in `lanes_range`, together with its ground
/// truth lanes. Retries placement until every stub carries traffic; fails
/// after 1000 attempts.
pub fn random_intersection(
    rng: &mut ChaCha8Rng,
    arm_count_range: (usize, usize),
    lanes_range: (usize, usize),
) -> Result<(Intersection, Vec<GroundTruthLane>), SimError> {
    if arm_count_range.0 < 3 || arm_count_range.1 > 5 || arm_count_range.0 > arm_count_range.1 {
        return Err(SimError::InvalidRange("arm count must lie in [3, 5]"));
    }
    if lanes_range.0 < 1 || lanes_range.1 > 3 || lanes_range.0 > lanes_range.1 {
        return Err(SimError::InvalidRange("lanes per direction must lie in [1, 3]"));
    }
    const ATTEMPTS: usize = 1000;
    for _ in 0..ATTEMPTS {
        let n = rng.gen_range(arm_count_range.0..=arm_count_range.1);
        let alphas: Vec<f64> =
            (0..n).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
        let center = Point2::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let arms: Vec<Arm> = alphas
            .iter()
            .map(|&a| {
                Arm::new(
                    a,
                    rng.gen_range(0.0..3.0),
                    rng.gen_range(lanes_range.0..=lanes_range.1),
                    rng.gen_range(lanes_range.0..=lanes_range.1),
                )
            })
            .collect();
        let mut sorted = alphas.clone();
        sorted.sort_by(f64::total_cmp);
        let min_sep = (0..n)
            .map(|i| {
                let j = (i + 1) % n;
                let arc = (sorted[j] - sorted[i]).rem_euclid(std::f64::consts::TAU);
                arc.min(std::f64::consts::TAU - arc)
            })
            .fold(f64::INFINITY, f64::min);
        if min_sep < crate::model::MIN_ARM_SEPARATION + SEPARATION_JITTER {
            continue;
        }
        let model = Intersection::new(center, arms).expect("separation pre-checked");
        let lanes = ground_truth_lanes(&model);
        if !all_stubs_covered(&model, &lanes) {
            continue;
        }
        return Ok((model, lanes));
    }
    Err(SimError::GenerationFailed(ATTEMPTS))
}

/// True when every entry and exit stub appears in at least one lane, i.e.
/// the lane structure is fully observable from traffic.
fn all_stubs_covered(model: &Intersection, lanes: &[GroundTruthLane]) -> bool {
    model.stubs().iter().all(|s| {
        lanes.iter().any(|l| match s.direction {
            Direction::Entry => l.entry == (s.arm_index, s.slot),
            Direction::Exit => l.exit == (s.arm_index, s.slot),
        })
    })
}

/// Simulates noisy trajectories along the given lanes. Per lane, a uniform
/// number of vehicles in the configured range; per vehicle, samples every
/// `sample_spacing` meters of arc with Gaussian position and heading noise,
/// timestamps advancing at a constant driving speed.
pub fn simulate(lanes: &[GroundTruthLane], cfg: &SimConfig) -> Result<Vec<Trajectory>, SimError> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pos_noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|_| SimError::InvalidRange("noise sigma must be non-negative"))?;
    let heading_noise = Normal::new(0.0, cfg.heading_sigma)
        .map_err(|_| SimError::InvalidRange("heading sigma must be non-negative"))?;
    let (lo, hi) = cfg.trajectories_per_lane;
    if lo < 1 || lo > hi {
        return Err(SimError::InvalidRange("trajectories per lane must be at least 1"));
    }
    if cfg.sample_spacing <= 0.0 {
        return Err(SimError::InvalidRange("sample spacing must be positive"));
    }
    let mut out = Vec::new();
    let mut vehicle = 0usize;
    for lane in lanes {
        let count = rng.gen_range(lo..=hi);
        let length = lane.center_line.length();
        for _ in 0..count {
            let mut samples = Vec::new();
            let mut arc = 0.0;
            while arc <= length {
                let p = lane.center_line.point_at(arc);
                let tangent = lane.center_line.tangent_at(arc);
                samples.push(Measurement {
                    position: Point2::new(
                        p.x + pos_noise.sample(&mut rng),
                        p.y + pos_noise.sample(&mut rng),
                    ),
                    heading: normalize_angle(tangent + heading_noise.sample(&mut rng)),
                    t: arc / SPEED,
                });
                arc += cfg.sample_spacing;
            }
            out.push(Trajectory::new(format!("veh-{vehicle:04}"), samples)?);
            vehicle += 1;
        }
    }
    Ok(out)
}
