//! End-to-end estimation: trajectory preprocessing, the coarse chain, lane
//! refinement, and lanelet-map export.

use crate::geometry::{angle_diff, mean_heading, normalize_angle, Point2};
use crate::mcmc::{
    log_likelihood, run_chain, AnnealingSchedule, ChainResult, LikelihoodParams, McmcError,
    ProposalKernel,
};
use crate::model::{Arm, Intersection, BORDER_MARGIN, DEFAULT_STUB_LENGTH, LANE_WIDTH, MIN_ARM_SEPARATION};
use crate::refine::{
    associate, initialize_lanes, merge_lanelets, neighbor_pairs, refine, Lane, LaneletMap,
    RefineError, RefineReport, RefinementConfig, MERGE_TOLERANCE,
};
use crate::sim::Trajectory;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Failure of the end-to-end estimation pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// The input dataset holds no trajectories.
    #[error("no trajectories to estimate from")]
    NoTrajectories,
    /// No trajectory could be assigned to any lane of the coarse model.
    #[error("no trajectory is assignable to the coarse model")]
    NoLanes,
    /// The coarse chain failed.
    #[error("coarse estimation failed: {0}")]
    Coarse(#[from] McmcError),
    /// Lane initialization or refinement failed.
    #[error("lane refinement failed: {0}")]
    Refine(#[from] RefineError),
}

/// Preprocessing applied to raw measurements before the coarse chain.
///
/// The coarse model has no geometry inside the intersection border: stubs
/// start at the border radius, so samples in the conflict zone can only be
/// scored against stub endpoints and systematically reward hypotheses that
/// park stubs near the center. Preparation therefore smooths each
/// trajectory with a centered moving average (reducing effective position
/// noise without touching the likelihood sigmas), keeps every `stride`-th
/// sample (the coarse stage needs sparse evidence to stay mobile), and
/// drops samples inside the estimated conflict zone.
///
/// The conflict-zone disk is centered on the least-squares intersection
/// of the lines through each smoothed sample along its heading. Unlike
/// the sample centroid, that point stays near the geometric center even
/// when every arm lies in one half-plane and all the mass sits on one
/// side. Its radius comes from the data: straight-through traffic in the
/// outermost lane passes the center at `border_radius - BORDER_MARGIN -
/// LANE_WIDTH / 2`, so a high quantile of per-trajectory closest
/// approaches to that center, plus that constant, estimates the border
/// radius without knowing the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarsePreparation {
    /// Every `stride`-th smoothed sample is kept.
    pub stride: usize,
    /// Half-width (in samples) of the centered moving-average window.
    pub smoothing_half_window: usize,
    /// Quantile of per-trajectory closest centroid approaches used to
    /// estimate the conflict-zone radius.
    pub approach_quantile: f64,
}

impl Default for CoarsePreparation {
    fn default() -> Self {
        Self { stride: 8, smoothing_half_window: 2, approach_quantile: 0.95 }
    }
}

/// Smooths, subsamples, and conflict-zone-filters trajectories for the
/// coarse chain. Trajectories left with fewer than two samples are dropped.
pub fn prepare_coarse(trajectories: &[Trajectory], prep: &CoarsePreparation) -> Vec<Trajectory> {
    let smoothed: Vec<Vec<crate::sim::Measurement>> = trajectories
        .iter()
        .map(|t| smooth_samples(t.samples(), prep.smoothing_half_window))
        .collect();

    let center = match heading_line_center(smoothed.iter().flatten()) {
        Some(c) => c,
        None => return Vec::new(),
    };

    let mut approaches: Vec<f64> = smoothed
        .iter()
        .map(|samples| {
            samples
                .iter()
                .map(|z| z.position.distance(center))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    approaches.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let idx = ((approaches.len() - 1) as f64 * prep.approach_quantile).round() as usize;
    let exclusion = approaches[idx] + BORDER_MARGIN + LANE_WIDTH / 2.0;

    trajectories
        .iter()
        .zip(smoothed)
        .filter_map(|(t, samples)| {
            let kept: Vec<_> = samples
                .into_iter()
                .step_by(prep.stride.max(1))
                .filter(|z| z.position.distance(center) >= exclusion)
                .collect();
            if kept.len() < 2 {
                None
            } else {
                Some(Trajectory::new(t.id().to_string(), kept).expect("times stay monotonic"))
            }
        })
        .collect()
}

/// Least-squares intersection point of the heading lines through every
/// sample: the minimizer of the summed squared perpendicular distances to
/// the lines `(position, heading)`. Falls back to the sample centroid when
/// the headings are too parallel to pin down a crossing, and returns
/// `None` for an empty dataset.
fn heading_line_center<'a, I>(samples: I) -> Option<Point2>
where
    I: IntoIterator<Item = &'a crate::sim::Measurement>,
{
    let mut a11 = 0.0f64;
    let mut a12 = 0.0f64;
    let mut a22 = 0.0f64;
    let mut b1 = 0.0f64;
    let mut b2 = 0.0f64;
    let mut centroid = Point2::default();
    let mut count = 0usize;
    for z in samples {
        let n = Point2::new(-z.heading.sin(), z.heading.cos());
        let rhs = n.x * z.position.x + n.y * z.position.y;
        a11 += n.x * n.x;
        a12 += n.x * n.y;
        a22 += n.y * n.y;
        b1 += n.x * rhs;
        b2 += n.y * rhs;
        centroid = centroid + z.position;
        count += 1;
    }
    if count == 0 {
        return None;
    }
    centroid = centroid * (1.0 / count as f64);
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= PARALLEL_HEADING_EPSILON * (count * count) as f64 {
        return Some(centroid);
    }
    Some(Point2::new((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det))
}

/// Centered moving average over `2 * half + 1` samples, clamped at the
/// trajectory ends; positions are averaged arithmetically, headings as
/// circular means. Timestamps are untouched.
fn smooth_samples(raw: &[crate::sim::Measurement], half: usize) -> Vec<crate::sim::Measurement> {
    (0..raw.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(raw.len() - 1);
            let window = &raw[lo..=hi];
            let mut pos = Point2::default();
            let (mut sin, mut cos) = (0.0f64, 0.0f64);
            for z in window {
                pos = pos + z.position;
                sin += z.heading.sin();
                cos += z.heading.cos();
            }
            let mut z = raw[i].clone();
            z.position = pos * (1.0 / window.len() as f64);
            z.heading = sin.atan2(cos);
            z
        })
        .collect()
}

/// Everything the end-to-end pipeline needs, with workable defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Preprocessing for the coarse chain.
    pub preparation: CoarsePreparation,
    /// Coarse chain length in proposals.
    pub coarse_budget: usize,
    /// Proposal kernel of the coarse chain.
    pub kernel: ProposalKernel,
    /// Measurement likelihood parameters.
    pub likelihood: LikelihoodParams,
    /// Annealing schedule of the coarse chain.
    pub schedule: AnnealingSchedule,
    /// Staged least-squares refinement parameters.
    pub refinement: RefinementConfig,
    /// Lateral tolerance below which refined courses merge into one lanelet.
    pub merge_tolerance: f64,
    /// Maximum improvement sweeps of the greedy posterior ascent run on the
    /// chain's best hypothesis; 0 skips polishing.
    pub polish_sweeps: usize,
    /// Seed of the coarse chain's random number generator.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            preparation: CoarsePreparation::default(),
            coarse_budget: 5000,
            kernel: ProposalKernel::default(),
            likelihood: LikelihoodParams::default(),
            schedule: AnnealingSchedule::default(),
            refinement: RefinementConfig::default(),
            merge_tolerance: MERGE_TOLERANCE,
            polish_sweeps: 8,
            seed: 0,
        }
    }
}

/// Center-shift radii tried by the polish ascent, in meters.
const POLISH_SHIFT_RADII: [f64; 4] = [2.4, 0.9, 0.3, 0.1];

/// Evenly spaced center-shift directions tried per radius.
const POLISH_SHIFT_DIRECTIONS: usize = 8;

/// Arm rotation steps tried by the polish ascent, in radians.
const POLISH_ROTATION_STEPS: [f64; 4] =
    [4.0 * RADIANS_PER_DEGREE, 1.5 * RADIANS_PER_DEGREE, 0.5 * RADIANS_PER_DEGREE, 0.15 * RADIANS_PER_DEGREE];

/// Gap change steps tried by the polish ascent, in meters.
const POLISH_GAP_STEPS: [f64; 3] = [0.9, 0.3, 0.1];

const RADIANS_PER_DEGREE: f64 = std::f64::consts::PI / 180.0;

/// Determinant floor (relative to the squared sample count) below which
/// the heading lines are treated as parallel and the exclusion disk falls
/// back to the sample centroid.
const PARALLEL_HEADING_EPSILON: f64 = 1e-6;

/// Minimum samples for a lateral cluster to count as a lane line.
const REANCHOR_MIN_CLUSTER: usize = 3;

/// Fixed-point rounds of the structure re-read.
const REANCHOR_ROUNDS: usize = 3;

/// Minimum folded heading votes before an arm's direction is re-fit.
const REANCHOR_MIN_HEADING_VOTES: usize = 4;

/// Upper bound on per-side lane counts read from lateral clustering.
const REANCHOR_MAX_LANES: usize = 8;

/// Minimum trajectory-end votes for a heading mode to count as an arm.
const CENSUS_MIN_VOTES: usize = 3;

/// Angular tolerance for matching heading modes to existing arms.
const CENSUS_MATCH_TOLERANCE: f64 = 12.5 * RADIANS_PER_DEGREE;

/// Splits sorted lateral offsets into clusters at jumps wider than half a
/// lane width and returns `(mean, size)` per cluster that clears the
/// minimum size.
fn lateral_clusters(mut laterals: Vec<f64>) -> Vec<(f64, usize)> {
    laterals.sort_by(|a, b| a.partial_cmp(b).expect("laterals are finite"));
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=laterals.len() {
        if i == laterals.len() || laterals[i] - laterals[i - 1] > LANE_WIDTH / 2.0 {
            let cluster = &laterals[start..i];
            if cluster.len() >= REANCHOR_MIN_CLUSTER {
                out.push((cluster.iter().sum::<f64>() / cluster.len() as f64, cluster.len()));
            }
            start = i;
        }
    }
    out
}

/// One arm's structure as read directly from the data: a direction refit
/// from folded sample headings and the lateral lane-line clusters on each
/// side of the axis.
#[derive(Debug, Clone)]
struct ArmReading {
    /// Arm direction, refit from folded sample headings when supported.
    alpha: f64,
    /// Number of folded heading votes behind the direction.
    votes: usize,
    /// Entry-side lane-line clusters as `(mean lateral, size)`, sorted
    /// ascending; the last one is the innermost entry line.
    entry_lines: Vec<(f64, usize)>,
    /// Exit-side lane-line clusters, sorted ascending; the first one is
    /// the innermost exit line.
    exit_lines: Vec<(f64, usize)>,
    /// Structure carried over wherever the clusters are silent.
    carry: Arm,
}

impl ArmReading {
    /// Midpoint of the innermost entry and exit lines. The two lines sit
    /// symmetrically around the true axis, so the midpoint equals the
    /// normal component of the center error, with no modulo-width
    /// ambiguity.
    fn midpoint(&self) -> Option<f64> {
        match (self.entry_lines.last(), self.exit_lines.first()) {
            (Some(entry), Some(exit)) => Some((entry.0 + exit.0) / 2.0),
            _ => None,
        }
    }

    /// Arm implied by the clusters, registered against a center that
    /// moved by `normal_shift` along this arm's normal after the read.
    /// When both innermost lines are present the gap comes from their
    /// separation, which any center error drops out of; one-sided reads
    /// need the shift correction, and silent sides keep the carried
    /// structure.
    fn to_arm(&self, normal_shift: f64) -> Arm {
        let entries = match self.entry_lines.len() {
            0 => self.carry.entries,
            count => count.min(REANCHOR_MAX_LANES),
        };
        let exits = match self.exit_lines.len() {
            0 => self.carry.exits,
            count => count.min(REANCHOR_MAX_LANES),
        };
        let gap = match (self.entry_lines.last(), self.exit_lines.first()) {
            (Some(entry), Some(exit)) => (exit.0 - entry.0) - LANE_WIDTH,
            (Some(entry), None) => -2.0 * (entry.0 - normal_shift) - LANE_WIDTH,
            (None, Some(exit)) => 2.0 * (exit.0 - normal_shift) - LANE_WIDTH,
            (None, None) => self.carry.gap,
        };
        Arm::new(self.alpha, gap.max(0.0), entries, exits)
    }
}

/// Reads every arm's structure from the data: each sample is assigned to
/// the nearest arm by position bearing from the center, arm directions
/// are refit from the folded sample headings, and the signed laterals
/// against the refit axes are clustered into lane lines.
fn read_arms(center: Point2, arms: &[Arm], trajectories: &[Trajectory]) -> Vec<ArmReading> {
    let n = arms.len();
    let mut votes: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut assigned: Vec<(usize, bool, Point2)> = Vec::new();
    for trajectory in trajectories {
        for z in trajectory.samples() {
            let rel = z.position - center;
            let bearing = rel.y.atan2(rel.x);
            let arm = (0..n)
                .min_by(|&a, &b| {
                    let da = angle_diff(bearing, arms[a].alpha).abs();
                    let db = angle_diff(bearing, arms[b].alpha).abs();
                    da.partial_cmp(&db).expect("bearings are finite")
                })
                .expect("readings need at least one arm");
            let outbound = angle_diff(z.heading, arms[arm].alpha).abs() < std::f64::consts::FRAC_PI_2;
            let vote =
                if outbound { z.heading } else { z.heading + std::f64::consts::PI };
            votes[arm].push(normalize_angle(vote));
            assigned.push((arm, outbound, z.position));
        }
    }

    let alphas: Vec<f64> = (0..n)
        .map(|i| {
            if votes[i].len() >= REANCHOR_MIN_HEADING_VOTES {
                mean_heading(&votes[i]).unwrap_or(arms[i].alpha)
            } else {
                arms[i].alpha
            }
        })
        .collect();

    let mut entry_laterals: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut exit_laterals: Vec<Vec<f64>> = vec![Vec::new(); n];
    for &(arm, outbound, position) in &assigned {
        let (sin, cos) = alphas[arm].sin_cos();
        let rel = position - center;
        let lateral = -sin * rel.x + cos * rel.y;
        if outbound {
            exit_laterals[arm].push(lateral);
        } else {
            entry_laterals[arm].push(lateral);
        }
    }

    (0..n)
        .map(|i| ArmReading {
            alpha: alphas[i],
            votes: votes[i].len(),
            entry_lines: lateral_clusters(std::mem::take(&mut entry_laterals[i])),
            exit_lines: lateral_clusters(std::mem::take(&mut exit_laterals[i])),
            carry: arms[i],
        })
        .collect()
}

/// Two-parameter least squares for the center correction implied by the
/// per-arm midpoint registrations. Returns zero when fewer than two
/// non-parallel arms contribute.
fn center_correction(readings: &[ArmReading]) -> Point2 {
    let mut a11 = 0.0;
    let mut a12 = 0.0;
    let mut a22 = 0.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    let mut contributing = 0;
    for reading in readings {
        let Some(m) = reading.midpoint() else { continue };
        let (sin, cos) = reading.alpha.sin_cos();
        let (nx, ny) = (-sin, cos);
        a11 += nx * nx;
        a12 += nx * ny;
        a22 += ny * ny;
        b1 += m * nx;
        b2 += m * ny;
        contributing += 1;
    }
    let det = a11 * a22 - a12 * a12;
    if contributing >= 2 && det.abs() > 1e-9 {
        Point2::new((b1 * a22 - b2 * a12) / det, (b2 * a11 - b1 * a12) / det)
    } else {
        Point2::default()
    }
}

/// Merges arms whose directions fell within the minimum separation,
/// keeping the better-voted one of each colliding pair. Directions
/// collapse onto each other when a true arm was covered by two
/// hypothetical ones and both refits converge to it.
fn merge_colliding_arms(arms: Vec<Arm>, readings: &[ArmReading]) -> Vec<Arm> {
    let mut keep: Vec<(Arm, usize)> =
        arms.into_iter().zip(readings.iter().map(|r| r.votes)).collect();
    keep.sort_by(|a, b| a.0.alpha.partial_cmp(&b.0.alpha).expect("angles are finite"));
    while keep.len() >= 2 {
        let n = keep.len();
        let mut closest = 0;
        let mut closest_sep = f64::INFINITY;
        for i in 0..n {
            let j = (i + 1) % n;
            let sep = angle_diff(keep[j].0.alpha, keep[i].0.alpha).abs();
            if sep < closest_sep {
                closest_sep = sep;
                closest = i;
            }
        }
        if closest_sep >= MIN_ARM_SEPARATION {
            break;
        }
        let j = (closest + 1) % n;
        let drop = if keep[closest].1 >= keep[j].1 { j } else { closest };
        keep.remove(drop);
    }
    keep.into_iter().map(|(arm, _)| arm).collect()
}

/// Fixed-point structure re-read: read the arms from the data, correct
/// the center, merge collapsed directions, and repeat with the implied
/// structure. Returns the final hypothesis, or `None` when no valid
/// intersection survives.
fn iterate_structure(
    center: Point2,
    arms: Vec<Arm>,
    trajectories: &[Trajectory],
    rounds: usize,
) -> Option<Intersection> {
    let mut center = center;
    let mut arms = arms;
    for _ in 0..rounds {
        if arms.is_empty() {
            return None;
        }
        let readings = read_arms(center, &arms, trajectories);
        let shift = center_correction(&readings);
        center = center + shift;
        let implied: Vec<Arm> = readings
            .iter()
            .map(|reading| {
                let (sin, cos) = reading.alpha.sin_cos();
                let normal_shift = -sin * shift.x + cos * shift.y;
                reading.to_arm(normal_shift)
            })
            .collect();
        arms = merge_colliding_arms(implied, &readings);
    }
    Intersection::new(center, arms).ok()
}

/// Re-reads the coarse structure directly from the data around the
/// current hypothesis.
///
/// Lane-width aliasing gives the posterior local maxima where the center
/// is off by whole lane widths along some arm's normal and the entry/exit
/// split absorbs the shift; single-parameter moves cannot leave them. The
/// fixed-point re-read removes the ambiguity in closed form: arm
/// directions come from folded sample headings, per-arm lateral clusters
/// yield the observed lane lines, and the innermost-line midpoints
/// recover the center by least squares.
fn reanchor_candidate(
    model: &Intersection,
    trajectories: &[Trajectory],
) -> Option<Intersection> {
    iterate_structure(model.center(), model.arms().to_vec(), trajectories, REANCHOR_ROUNDS)
}

/// Rebuilds a hypothesis from scratch: arm directions from the
/// trajectory-end census, the starting center from the least-squares
/// heading-line crossing, and gaps and lane counts from the fixed-point
/// structure read. Acts as a deterministic restart for chains stuck
/// beyond local repair; like every candidate it only survives by winning
/// the likelihood comparison.
fn rebuild_candidate(trajectories: &[Trajectory]) -> Option<Intersection> {
    let modes = heading_modes(trajectories);
    if modes.len() < 2 {
        return None;
    }
    let center = heading_line_center(trajectories.iter().flat_map(|t| t.samples()))?;
    let arms: Vec<Arm> =
        modes.iter().map(|&(mode, _)| Arm::new(mode, 0.0, 1, 1)).collect();
    iterate_structure(center, arms, trajectories, REANCHOR_ROUNDS)
}

/// Per-arm structure re-reads: each candidate replaces one arm's
/// direction, gap, and lane counts with the values its lateral clusters
/// imply, holding the center and every other arm fixed. This unwinds the
/// coupled per-arm optima where a squeezed gap plus a surplus lane mimics
/// the true block layout, which no single-parameter move can leave.
fn arm_reread_candidates(
    model: &Intersection,
    trajectories: &[Trajectory],
) -> Vec<Intersection> {
    let readings = read_arms(model.center(), model.arms(), trajectories);
    let mut out = Vec::new();
    for (i, reading) in readings.iter().enumerate() {
        let replacement = reading.to_arm(0.0);
        if replacement == model.arms()[i] {
            continue;
        }
        let mut arms = model.arms().to_vec();
        arms[i] = replacement;
        if let Ok(candidate) = Intersection::new(model.center(), arms) {
            out.push(candidate);
        }
    }
    out
}

/// Folded heading modes of the trajectory ends. Every trajectory enters
/// along one arm and leaves along another, so the first-sample heading
/// folded by half a turn and the last-sample heading vote for the true
/// arm directions, independent of any hypothesis. Modes are circular
/// clusters of the votes with at least the minimum support.
fn heading_modes(trajectories: &[Trajectory]) -> Vec<(f64, usize)> {
    let mut directions: Vec<f64> = Vec::new();
    for trajectory in trajectories {
        let samples = trajectory.samples();
        if samples.len() < 2 {
            continue;
        }
        directions.push(normalize_angle(
            samples.first().expect("non-empty").heading + std::f64::consts::PI,
        ));
        directions.push(samples.last().expect("non-empty").heading);
    }
    if directions.is_empty() {
        return Vec::new();
    }
    directions.sort_by(|a, b| a.partial_cmp(b).expect("headings are finite"));

    // Break the circle at its widest angular gap, then cluster linearly.
    let count = directions.len();
    let mut cut = 0;
    let mut widest = f64::NEG_INFINITY;
    for i in 0..count {
        let next = directions[(i + 1) % count];
        let gap = normalize_angle(next - directions[i]).rem_euclid(std::f64::consts::TAU);
        if gap > widest {
            widest = gap;
            cut = (i + 1) % count;
        }
    }
    let mut modes: Vec<(f64, usize)> = Vec::new();
    let mut cluster: Vec<f64> = Vec::new();
    for k in 0..count {
        let angle = directions[(cut + k) % count];
        if let Some(&prev) = cluster.last() {
            if angle_diff(angle, prev).abs() > CENSUS_MATCH_TOLERANCE {
                if cluster.len() >= CENSUS_MIN_VOTES {
                    if let Ok(mean) = mean_heading(&cluster) {
                        modes.push((mean, cluster.len()));
                    }
                }
                cluster.clear();
            }
        }
        cluster.push(angle);
    }
    if cluster.len() >= CENSUS_MIN_VOTES {
        if let Ok(mean) = mean_heading(&cluster) {
            modes.push((mean, cluster.len()));
        }
    }
    modes
}

/// Candidate arm additions and removals from the trajectory-end census.
/// Heading modes with no matching arm become add candidates; arms
/// matching no mode become removal candidates. Every candidate still has
/// to win the likelihood comparison to be adopted.
fn census_candidates(model: &Intersection, trajectories: &[Trajectory]) -> Vec<Intersection> {
    let modes = heading_modes(trajectories);
    let arms = model.arms();
    let mut candidates = Vec::new();
    for &(mode, _) in &modes {
        let matched = arms.iter().any(|arm| angle_diff(mode, arm.alpha).abs() <= CENSUS_MATCH_TOLERANCE);
        if !matched {
            let mut extended = arms.to_vec();
            extended.push(Arm::new(mode, 0.0, 1, 1));
            if let Ok(candidate) = Intersection::new(model.center(), extended) {
                candidates.push(candidate);
            }
        }
    }
    if arms.len() > 2 {
        for i in 0..arms.len() {
            let supported = modes
                .iter()
                .any(|&(mode, _)| angle_diff(mode, arms[i].alpha).abs() <= CENSUS_MATCH_TOLERANCE);
            if !supported {
                let mut reduced = arms.to_vec();
                reduced.remove(i);
                if let Ok(candidate) = Intersection::new(model.center(), reduced) {
                    candidates.push(candidate);
                }
            }
        }
    }
    candidates
}

/// Deterministic greedy ascent of the measurement likelihood around a
/// coarse hypothesis.
///
/// The single-parameter chain moves cannot cross valleys where a center
/// error is compensated by arm tilts: shifting the center alone or
/// straightening an arm alone both score worse than the joint correction.
/// This ascent therefore also tries coupled moves that shift the center
/// while re-aiming every arm at its previous far point, plus fine arm
/// rotations, gap changes, per-arm lane additions and removals, and
/// entry/exit re-splits. Candidates are scanned in a fixed order and every
/// strict improvement is adopted immediately, so the result is a
/// deterministic function of the inputs.
pub fn polish_model(
    model: &Intersection,
    trajectories: &[Trajectory],
    params: &LikelihoodParams,
    sweeps: usize,
) -> Intersection {
    let mut best = model.clone();
    let mut best_score = log_likelihood(&best, trajectories, params);
    if !best_score.is_finite() {
        return best;
    }

    let mut adopt = |candidate: Result<Intersection, crate::model::ModelError>,
                     best: &mut Intersection,
                     best_score: &mut f64|
     -> bool {
        let Ok(candidate) = candidate else { return false };
        let score = log_likelihood(&candidate, trajectories, params);
        if score > *best_score {
            *best = candidate;
            *best_score = score;
            true
        } else {
            false
        }
    };

    for _ in 0..sweeps {
        let mut improved = false;

        // Structure census: arms added at unserved heading modes of the
        // trajectory ends, unsupported arms dropped.
        for candidate in census_candidates(&best, trajectories) {
            improved |= adopt(Ok(candidate), &mut best, &mut best_score);
        }

        // Closed-form re-read of center, arm directions, gaps, and counts.
        if let Some(candidate) = reanchor_candidate(&best, trajectories) {
            improved |= adopt(Ok(candidate), &mut best, &mut best_score);
        }

        // Coupled move: shift the center and re-aim each arm at the point
        // its axis previously met at stub-length range, so the stub lines
        // stay on the data while the center slides under them.
        for radius in POLISH_SHIFT_RADII {
            for k in 0..POLISH_SHIFT_DIRECTIONS {
                let phi = std::f64::consts::TAU * k as f64 / POLISH_SHIFT_DIRECTIONS as f64;
                let center = best.center() + Point2::new(phi.cos(), phi.sin()) * radius;
                let arms: Vec<Arm> = best
                    .arms()
                    .iter()
                    .map(|arm| {
                        let far = best.center()
                            + Point2::new(arm.alpha.cos(), arm.alpha.sin()) * DEFAULT_STUB_LENGTH;
                        let aim = far - center;
                        Arm { alpha: normalize_angle(aim.y.atan2(aim.x)), ..*arm }
                    })
                    .collect();
                improved |= adopt(Intersection::new(center, arms), &mut best, &mut best_score);
            }
        }

        // Fine single-arm rotations below the chain's proposal resolution.
        for i in 0..best.arms().len() {
            for step in POLISH_ROTATION_STEPS {
                for delta in [step, -step] {
                    let mut arms = best.arms().to_vec();
                    arms[i].alpha = normalize_angle(arms[i].alpha + delta);
                    improved |=
                        adopt(Intersection::new(best.center(), arms), &mut best, &mut best_score);
                }
            }
        }

        // Gap changes, clamped at zero.
        for i in 0..best.arms().len() {
            for step in POLISH_GAP_STEPS {
                for delta in [step, -step] {
                    let mut arms = best.arms().to_vec();
                    let gap = (arms[i].gap + delta).max(0.0);
                    if gap == arms[i].gap {
                        continue;
                    }
                    arms[i].gap = gap;
                    improved |=
                        adopt(Intersection::new(best.center(), arms), &mut best, &mut best_score);
                }
            }
        }

        // Entry/exit re-splits: move one lane across the driving divide
        // without passing through a worse intermediate count.
        for i in 0..best.arms().len() {
            for (de, dx) in [(1isize, -1isize), (-1, 1)] {
                let mut arms = best.arms().to_vec();
                let entries = arms[i].entries as isize + de;
                let exits = arms[i].exits as isize + dx;
                if entries < 0 || exits < 0 {
                    continue;
                }
                arms[i].entries = entries as usize;
                arms[i].exits = exits as usize;
                improved |=
                    adopt(Intersection::new(best.center(), arms), &mut best, &mut best_score);
            }
        }

        // Single lane additions and removals per arm and side.
        for i in 0..best.arms().len() {
            for (de, dx) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                let mut arms = best.arms().to_vec();
                let entries = arms[i].entries as isize + de;
                let exits = arms[i].exits as isize + dx;
                if entries < 0 || exits < 0 || entries + exits == 0 {
                    continue;
                }
                arms[i].entries = entries as usize;
                arms[i].exits = exits as usize;
                improved |=
                    adopt(Intersection::new(best.center(), arms), &mut best, &mut best_score);
            }
        }

        if !improved {
            break;
        }
    }
    best
}

/// Wall-clock cost of the two pipeline stages.
///
/// Excluded from determinism comparisons; everything else in an
/// [`Estimate`] is reproducible bit for bit under a fixed seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Preparation plus coarse chain, in milliseconds.
    pub coarse_ms: f64,
    /// Association, refinement, and merging, in milliseconds.
    pub refine_ms: f64,
}

/// Result of the full estimation pipeline.
#[derive(Debug, Clone)]
pub struct Estimate {
    /// Coarse intersection model: the chain's best hypothesis after the
    /// greedy posterior ascent.
    pub model: Intersection,
    /// Refined lanes with their spline center lines.
    pub lanes: Vec<Lane>,
    /// Merged lanelet map with connectivity.
    pub map: LaneletMap,
    /// Coarse chain diagnostics.
    pub chain: ChainResult,
    /// Refinement diagnostics.
    pub refinement: RefineReport,
    /// Indices of trajectories no lane would accept.
    pub unassigned: Vec<usize>,
    /// Stage timings.
    pub timings: Timings,
}

/// Runs the full two-stage estimation: coarse chain plus greedy posterior
/// ascent on prepared data, then association, staged spline refinement,
/// and lanelet merging on the raw measurements.
pub fn estimate(
    trajectories: &[Trajectory],
    cfg: &PipelineConfig,
) -> Result<Estimate, PipelineError> {
    if trajectories.is_empty() {
        return Err(PipelineError::NoTrajectories);
    }
    let coarse_start = Instant::now();
    let prepared = prepare_coarse(trajectories, &cfg.preparation);
    let chain = run_chain(
        &prepared,
        cfg.coarse_budget,
        &cfg.kernel,
        &cfg.likelihood,
        &cfg.schedule,
        cfg.seed,
    )?;
    let model = polish_model(&chain.best, &prepared, &cfg.likelihood, cfg.polish_sweeps);
    let coarse_ms = coarse_start.elapsed().as_secs_f64() * 1e3;

    let refine_start = Instant::now();
    let assoc = associate(trajectories, &model);
    let mut lanes = initialize_lanes(&assoc, trajectories, &model, &cfg.refinement)?;
    if lanes.is_empty() {
        return Err(PipelineError::NoLanes);
    }
    let pairs = neighbor_pairs(&lanes);
    let refinement = refine(&mut lanes, trajectories, &pairs, &cfg.refinement)?;
    let map = merge_lanelets(&lanes, cfg.merge_tolerance);
    let refine_ms = refine_start.elapsed().as_secs_f64() * 1e3;

    Ok(Estimate {
        model,
        lanes,
        map,
        chain,
        refinement,
        unassigned: assoc.unassignable,
        timings: Timings { coarse_ms, refine_ms },
    })
}
