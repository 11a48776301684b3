//! Coarse intersection estimation: a reversible-jump Metropolis-Hastings
//! sampler over [`Intersection`] hypotheses with simulated annealing.
//!
//! The chain explores intersection structure (arm angles, center, gaps, lane
//! counts) under a measurement likelihood that scores each trajectory sample
//! against the nearest lane stub of its driving direction, plus an optional
//! uniform stub-assignment term that penalizes unsupported stubs.
//! Dimension-changing moves (adding or removing arms and lanes) carry
//! matched forward and reverse
//! proposal densities; the acceptance rule tempers the whole ratio with a
//! geometrically decaying temperature and the best state ever visited is
//! returned as the maximum-a-posteriori estimate.

use crate::geometry::{angle_diff, mean_heading, normalize_angle, Point2};
use crate::model::{Arm, Direction, Intersection, ModelError, DEFAULT_STUB_LENGTH, MIN_ARM_SEPARATION};
use crate::sim::Trajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Scratch-buffer capacity for per-arm work. The 25 degree pairwise
/// separation caps an intersection at 14 arms.
const MAX_ARMS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum McmcError {
    #[error("move probabilities must sum to 1, got {0}")]
    BadKernel(f64),
    #[error("annealing temperatures must satisfy t_start >= t_end > 0")]
    BadSchedule,
    #[error("chain budget must be at least 1")]
    EmptyBudget,
    #[error("no measurements to score")]
    NoData,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Move masses and parameter ranges of the proposal kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalKernel {
    /// Probability of rotating one arm.
    pub p_rotate: f64,
    /// Probability of shifting the center.
    pub p_shift: f64,
    /// Probability of changing one arm's gap.
    pub p_gap: f64,
    /// Probability of an arm move, split evenly between add and remove.
    pub p_arm: f64,
    /// Probability of a lane move, split evenly between add and remove;
    /// an add picks the exit or entry side with probability 0.5 each.
    pub p_lane: f64,
    /// Rotation draws from `U[-max_rotation, max_rotation]`, radians.
    pub max_rotation: f64,
    /// Center shift radius draws from `U[0, max_shift]`, meters.
    pub max_shift: f64,
    /// Gap change draws from `U[-max_gap_change, max_gap_change]`, meters.
    pub max_gap_change: f64,
}

impl Default for ProposalKernel {
    fn default() -> Self {
        Self {
            p_rotate: 0.30,
            p_shift: 0.22,
            p_gap: 0.16,
            p_arm: 0.05,
            p_lane: 0.27,
            max_rotation: 6.0_f64.to_radians(),
            max_shift: 6.0,
            max_gap_change: 1.8,
        }
    }
}

impl ProposalKernel {
    pub fn validate(&self) -> Result<(), McmcError> {
        let sum = self.p_rotate + self.p_shift + self.p_gap + self.p_arm + self.p_lane;
        let masses = [self.p_rotate, self.p_shift, self.p_gap, self.p_arm, self.p_lane];
        if (sum - 1.0).abs() > 1e-9 || masses.iter().any(|p| *p < 0.0) {
            return Err(McmcError::BadKernel(sum));
        }
        if self.max_rotation <= 0.0 || self.max_shift <= 0.0 || self.max_gap_change <= 0.0 {
            return Err(McmcError::BadKernel(sum));
        }
        Ok(())
    }
}

/// Parameters of the measurement likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LikelihoodParams {
    /// Standard deviation of the positional deviation from a stub, meters.
    pub sigma_pos: f64,
    /// Standard deviation of the heading deviation from a stub, radians.
    pub sigma_ang: f64,
    /// Adds the uniform stub-assignment term `-2N ln m`.
    pub use_multinomial: bool,
}

impl Default for LikelihoodParams {
    fn default() -> Self {
        Self { sigma_pos: 1.0, sigma_ang: 10.0_f64.to_radians(), use_multinomial: true }
    }
}

/// Geometric cooling from `t_start` down to `t_end` across the chain budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealingSchedule {
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        Self { t_start: 4.0, t_end: 1.0 }
    }
}

impl AnnealingSchedule {
    pub fn validate(&self) -> Result<(), McmcError> {
        if self.t_end <= 0.0 || self.t_start < self.t_end {
            return Err(McmcError::BadSchedule);
        }
        Ok(())
    }

    /// Temperature at `step` of a chain with `budget` total steps.
    pub fn temperature(&self, step: usize, budget: usize) -> f64 {
        if budget <= 1 {
            return self.t_end;
        }
        let frac = step as f64 / (budget - 1) as f64;
        self.t_start * (self.t_end / self.t_start).powf(frac)
    }
}

/// The parameter group a proposal modifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveKind {
    RotateArm,
    ShiftCenter,
    ChangeGap,
    AddArm,
    RemoveArm,
    AddLane,
    RemoveLane,
}

impl MoveKind {
    pub const ALL: [MoveKind; 7] = [
        MoveKind::RotateArm,
        MoveKind::ShiftCenter,
        MoveKind::ChangeGap,
        MoveKind::AddArm,
        MoveKind::RemoveArm,
        MoveKind::AddLane,
        MoveKind::RemoveLane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MoveKind::RotateArm => "rotate-arm",
            MoveKind::ShiftCenter => "shift-center",
            MoveKind::ChangeGap => "change-gap",
            MoveKind::AddArm => "add-arm",
            MoveKind::RemoveArm => "remove-arm",
            MoveKind::AddLane => "add-lane",
            MoveKind::RemoveLane => "remove-lane",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|k| *k == self).expect("every kind is listed")
    }
}

/// One proposed transition. An invalid candidate (constraint violation,
/// empty move set) is signalled by `log_forward = -inf` with the candidate
/// equal to the current state; the chain auto-rejects it.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub candidate: Intersection,
    pub kind: MoveKind,
    /// Log density of proposing `candidate` from the current state.
    pub log_forward: f64,
    /// Log density of proposing the current state back from `candidate`.
    pub log_reverse: f64,
}

/// Proposed/accepted tallies for one move kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoveTally {
    pub kind: MoveKind,
    pub proposed: usize,
    pub accepted: usize,
}

/// Per-step trace record of the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub kind: MoveKind,
    pub accepted: bool,
    /// Log posterior of the state occupied after this step.
    pub log_posterior: f64,
}

/// Outcome of one chain run.
#[derive(Debug, Clone)]
pub struct ChainResult {
    /// Highest-scoring state the chain ever occupied.
    pub best: Intersection,
    pub best_score: f64,
    pub trace: Vec<TraceEntry>,
    /// Tallies per move kind, in [`MoveKind::ALL`] order.
    pub moves: Vec<MoveTally>,
}

/// Flat per-arm stub layout giving O(1) point-to-stub distances without
/// rebuilding stub polylines: one frame rotation per arm, then each stub is
/// a lateral offset over the axial extent `[r, r + stub_length]`.
struct StubLayout {
    center: Point2,
    /// Per arm: (cos alpha, sin alpha, heading of entries, heading of exits).
    frames: Vec<(f64, f64, f64, f64)>,
    /// Per stub in (arm, direction, slot) order: (arm index, direction,
    /// lateral offset).
    stubs: Vec<(usize, Direction, f64)>,
    axial_min: f64,
    axial_max: f64,
}

impl StubLayout {
    fn new(model: &Intersection) -> Self {
        let r = model.border_radius();
        assert!(model.arms().len() <= MAX_ARMS, "separation constraint caps arm count");
        let mut frames = Vec::with_capacity(model.arms().len());
        let mut stubs = Vec::new();
        for (ai, arm) in model.arms().iter().enumerate() {
            let (s, c) = arm.alpha.sin_cos();
            frames.push((c, s, normalize_angle(arm.alpha + std::f64::consts::PI), arm.alpha));
            for slot in 0..arm.entries {
                stubs.push((ai, Direction::Entry, model.stub_offset(arm, Direction::Entry, slot)));
            }
            for slot in 0..arm.exits {
                stubs.push((ai, Direction::Exit, model.stub_offset(arm, Direction::Exit, slot)));
            }
        }
        Self {
            center: model.center(),
            frames,
            stubs,
            axial_min: r,
            axial_max: r + DEFAULT_STUB_LENGTH,
        }
    }

    /// Distance from `p` to every stub, written into `out` (len = stub
    /// count, (arm, direction, slot) order).
    fn distances(&self, p: Point2, out: &mut [f64]) {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let mut axial = [0.0f64; MAX_ARMS];
        let mut lateral = [0.0f64; MAX_ARMS];
        for (ai, (c, s, _, _)) in self.frames.iter().enumerate() {
            axial[ai] = c * dx + s * dy;
            lateral[ai] = -s * dx + c * dy;
        }
        for (k, (ai, _, off)) in self.stubs.iter().enumerate() {
            let u = axial[*ai];
            let dv = lateral[*ai] - off;
            let du = if u < self.axial_min {
                u - self.axial_min
            } else if u > self.axial_max {
                u - self.axial_max
            } else {
                0.0
            };
            out[k] = (du * du + dv * dv).sqrt();
        }
    }

    /// Nearest stub of `direction`: (distance, heading deviation), or None
    /// when the model has no stub of that direction.
    fn nearest(&self, distances: &[f64], heading: f64, direction: Direction) -> Option<(f64, f64)> {
        let mut best: Option<(f64, usize)> = None;
        for (k, (ai, dir, _)) in self.stubs.iter().enumerate() {
            if *dir != direction {
                continue;
            }
            if best.map_or(true, |(d, _)| distances[k] < d) {
                best = Some((distances[k], *ai));
            }
        }
        best.map(|(d, ai)| {
            let (_, _, entry_heading, exit_heading) = self.frames[ai];
            let stub_heading = match direction {
                Direction::Entry => entry_heading,
                Direction::Exit => exit_heading,
            };
            (d, angle_diff(heading, stub_heading))
        })
    }
}

fn log_normal_pdf(x: f64, sigma: f64) -> f64 {
    -0.5 * LN_2PI - sigma.ln() - 0.5 * (x / sigma) * (x / sigma)
}

/// Log-likelihood of the trajectories under an intersection hypothesis.
///
/// Each sample contributes Gaussian log-densities of its distance and
/// heading deviation to the nearest stub of its driving direction; a sample
/// counts as approaching (entry side) when its heading points toward the
/// hypothesis center. With `use_multinomial`, each trajectory additionally
/// routes through one entry and one exit stub chosen uniformly at random,
/// adding a `-2N ln m` assignment log-probability that penalizes stubs the
/// data does not pay for. Returns `-inf` when a needed driving direction
/// has no stub anywhere in the model.
pub fn log_likelihood(
    model: &Intersection,
    trajectories: &[Trajectory],
    params: &LikelihoodParams,
) -> f64 {
    let layout = StubLayout::new(model);
    let m = layout.stubs.len();
    let mut dist = vec![0.0f64; m];
    let mut total = 0.0;

    if params.use_multinomial && !trajectories.is_empty() {
        let has_entry = layout.stubs.iter().any(|(_, dir, _)| *dir == Direction::Entry);
        let has_exit = layout.stubs.iter().any(|(_, dir, _)| *dir == Direction::Exit);
        if !has_entry || !has_exit {
            return f64::NEG_INFINITY;
        }
    }

    for traj in trajectories {
        for z in traj.samples() {
            layout.distances(z.position, &mut dist);
            let toward_center = (layout.center.x - z.position.x) * z.heading.cos()
                + (layout.center.y - z.position.y) * z.heading.sin();
            let direction =
                if toward_center > 0.0 { Direction::Entry } else { Direction::Exit };
            match layout.nearest(&dist, z.heading, direction) {
                Some((d, ang)) => {
                    total += log_normal_pdf(d, params.sigma_pos)
                        + log_normal_pdf(ang, params.sigma_ang);
                }
                None => return f64::NEG_INFINITY,
            }
        }
    }

    if params.use_multinomial {
        // Each trajectory half picks its stub; under uniform per-stub
        // routing the observed assignment has probability m^(-2N). The
        // term acts as a complexity penalty that an extra stub must pay
        // for with real distance or heading improvements.
        let n = 2 * trajectories.len();
        total -= (n as f64) * (m as f64).ln();
    }
    total
}

/// Angular intervals at least the minimum separation away from every arm,
/// as `(start, length)` pairs, plus their total measure.
fn allowed_arc_segments(arms: &[Arm]) -> (Vec<(f64, f64)>, f64) {
    let n = arms.len();
    let mut segments = Vec::new();
    let mut total = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        let arc = if n == 1 {
            std::f64::consts::TAU
        } else {
            (arms[j].alpha - arms[i].alpha).rem_euclid(std::f64::consts::TAU)
        };
        let free = arc - 2.0 * MIN_ARM_SEPARATION;
        if free > 0.0 {
            segments.push((arms[i].alpha + MIN_ARM_SEPARATION, free));
            total += free;
        }
    }
    (segments, total)
}

/// Draws one proposal from the kernel. Arms are sorted by angle inside the
/// candidate, so arm identity is positional only within one state.
pub fn propose(current: &Intersection, kernel: &ProposalKernel, rng: &mut ChaCha8Rng) -> Proposal {
    let arms = current.arms();
    let n = arms.len();
    let reject = |kind: MoveKind| Proposal {
        candidate: current.clone(),
        kind,
        log_forward: f64::NEG_INFINITY,
        log_reverse: f64::NEG_INFINITY,
    };
    let x: f64 = rng.gen();
    if x < kernel.p_rotate {
        let i = rng.gen_range(0..n);
        let delta = rng.gen_range(-kernel.max_rotation..=kernel.max_rotation);
        let mut new_arms = arms.to_vec();
        new_arms[i].alpha = normalize_angle(new_arms[i].alpha + delta);
        let density =
            kernel.p_rotate.ln() - (n as f64).ln() - (2.0 * kernel.max_rotation).ln();
        match Intersection::new(current.center(), new_arms) {
            Ok(candidate) => Proposal {
                candidate,
                kind: MoveKind::RotateArm,
                log_forward: density,
                log_reverse: density,
            },
            Err(_) => reject(MoveKind::RotateArm),
        }
    } else if x < kernel.p_rotate + kernel.p_shift {
        let radius = rng.gen_range(0.0..=kernel.max_shift);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let center = current.center() + Point2::new(phi.cos(), phi.sin()) * radius;
        let density =
            kernel.p_shift.ln() - kernel.max_shift.ln() - std::f64::consts::TAU.ln();
        Proposal {
            candidate: Intersection::new(center, arms.to_vec())
                .expect("shifting the center preserves validity"),
            kind: MoveKind::ShiftCenter,
            log_forward: density,
            log_reverse: density,
        }
    } else if x < kernel.p_rotate + kernel.p_shift + kernel.p_gap {
        let i = rng.gen_range(0..n);
        let delta = rng.gen_range(-kernel.max_gap_change..=kernel.max_gap_change);
        let mut new_arms = arms.to_vec();
        new_arms[i].gap += delta;
        let density =
            kernel.p_gap.ln() - (n as f64).ln() - (2.0 * kernel.max_gap_change).ln();
        match Intersection::new(current.center(), new_arms) {
            Ok(candidate) => Proposal {
                candidate,
                kind: MoveKind::ChangeGap,
                log_forward: density,
                log_reverse: density,
            },
            Err(_) => reject(MoveKind::ChangeGap),
        }
    } else if x < kernel.p_rotate + kernel.p_shift + kernel.p_gap + kernel.p_arm {
        if rng.gen_bool(0.5) {
            // Add an arm at an angle drawn uniformly from the allowed arcs.
            let (segments, w) = allowed_arc_segments(arms);
            if w <= 0.0 {
                return reject(MoveKind::AddArm);
            }
            let mut u = rng.gen_range(0.0..w);
            let mut alpha = segments[0].0;
            for (start, len) in &segments {
                if u <= *len {
                    alpha = start + u;
                    break;
                }
                u -= len;
            }
            let mut new_arms = arms.to_vec();
            new_arms.push(Arm::new(alpha, 0.0, 1, 1));
            match Intersection::new(current.center(), new_arms) {
                Ok(candidate) => Proposal {
                    candidate,
                    kind: MoveKind::AddArm,
                    log_forward: kernel.p_arm.ln() + 0.5f64.ln() - w.ln(),
                    log_reverse: kernel.p_arm.ln() + 0.5f64.ln() - ((n + 1) as f64).ln(),
                },
                Err(_) => reject(MoveKind::AddArm),
            }
        } else {
            // Remove an arm chosen uniformly; two arms must remain.
            if n <= 2 {
                return reject(MoveKind::RemoveArm);
            }
            let i = rng.gen_range(0..n);
            let mut new_arms = arms.to_vec();
            new_arms.remove(i);
            let candidate = Intersection::new(current.center(), new_arms)
                .expect("removing an arm preserves validity");
            // Reverse density: re-adding the removed angle in the reduced
            // model's allowed arcs; lane counts and gap are not part of the
            // matched dimensions.
            let (_, w) = allowed_arc_segments(candidate.arms());
            Proposal {
                candidate,
                kind: MoveKind::RemoveArm,
                log_forward: kernel.p_arm.ln() + 0.5f64.ln() - (n as f64).ln(),
                log_reverse: kernel.p_arm.ln() + 0.5f64.ln() - w.ln(),
            }
        }
    } else {
        let total_lanes = current.total_lanes();
        if rng.gen_bool(0.5) {
            // Add a lane: pick the side, then the arm.
            let direction = if rng.gen_bool(0.5) { Direction::Exit } else { Direction::Entry };
            let i = rng.gen_range(0..n);
            let mut new_arms = arms.to_vec();
            match direction {
                Direction::Entry => new_arms[i].entries += 1,
                Direction::Exit => new_arms[i].exits += 1,
            }
            let block = match direction {
                Direction::Entry => new_arms[i].entries,
                Direction::Exit => new_arms[i].exits,
            };
            let candidate = Intersection::new(current.center(), new_arms)
                .expect("adding a lane preserves validity");
            // Reverse: remove any of the block's lanes among all lanes of
            // the candidate; identical outcomes aggregate.
            Proposal {
                candidate,
                kind: MoveKind::AddLane,
                log_forward: kernel.p_lane.ln() + 0.25f64.ln() - (n as f64).ln(),
                log_reverse: kernel.p_lane.ln()
                    + 0.5f64.ln()
                    + (block as f64).ln()
                    - ((total_lanes + 1) as f64).ln(),
            }
        } else {
            // Remove a lane chosen uniformly among all lanes.
            let pick = rng.gen_range(0..total_lanes);
            let mut cursor = pick;
            let mut arm_index = 0;
            let mut direction = Direction::Entry;
            for (i, arm) in arms.iter().enumerate() {
                if cursor < arm.entries {
                    arm_index = i;
                    direction = Direction::Entry;
                    break;
                }
                cursor -= arm.entries;
                if cursor < arm.exits {
                    arm_index = i;
                    direction = Direction::Exit;
                    break;
                }
                cursor -= arm.exits;
            }
            let arm = &arms[arm_index];
            if arm.entries + arm.exits == 1 {
                return reject(MoveKind::RemoveLane);
            }
            let block = match direction {
                Direction::Entry => arm.entries,
                Direction::Exit => arm.exits,
            };
            let mut new_arms = arms.to_vec();
            match direction {
                Direction::Entry => new_arms[arm_index].entries -= 1,
                Direction::Exit => new_arms[arm_index].exits -= 1,
            }
            let candidate = Intersection::new(current.center(), new_arms)
                .expect("removing a non-last lane preserves validity");
            Proposal {
                candidate,
                kind: MoveKind::RemoveLane,
                log_forward: kernel.p_lane.ln()
                    + 0.5f64.ln()
                    + (block as f64).ln()
                    - (total_lanes as f64).ln(),
                log_reverse: kernel.p_lane.ln() + 0.25f64.ln() - (n as f64).ln(),
            }
        }
    }
}

/// Annealed Metropolis-Hastings acceptance: accepts iff
/// `log u <= [(logpost' + log_rev) - (logpost + log_fwd)] / T` with
/// `u ~ U(0, 1]`. A non-finite forward density auto-rejects.
pub fn accept(
    log_post: f64,
    log_post_new: f64,
    log_forward: f64,
    log_reverse: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    if !log_forward.is_finite() {
        return false;
    }
    let delta = (log_post_new + log_reverse) - (log_post + log_forward);
    if delta.is_nan() {
        return false;
    }
    let u: f64 = 1.0 - rng.gen::<f64>();
    u.ln() <= delta / temperature
}

/// Data-driven starting hypothesis: two single-lane arms aligned with the
/// two dominant heading clusters (circular k-means, k = 2, seeded from a
/// 36-bin histogram), centered at the measurement centroid. Falls back to
/// opposed arms when the clusters collapse.
pub fn initial_model(trajectories: &[Trajectory]) -> Result<Intersection, McmcError> {
    let mut centroid = Point2::default();
    let mut headings = Vec::new();
    for traj in trajectories {
        for z in traj.samples() {
            centroid = centroid + z.position;
            headings.push(z.heading);
        }
    }
    if headings.is_empty() {
        return Err(McmcError::NoData);
    }
    centroid = centroid * (1.0 / headings.len() as f64);

    let bins = 36;
    let mut hist = vec![0usize; bins];
    for h in &headings {
        let idx = (((normalize_angle(*h) + std::f64::consts::PI) / std::f64::consts::TAU)
            * bins as f64) as usize;
        hist[idx.min(bins - 1)] += 1;
    }
    let bin_center = |b: usize| {
        -std::f64::consts::PI + (b as f64 + 0.5) * std::f64::consts::TAU / bins as f64
    };
    // Seed k-means at the two strongest well-separated modes of the smoothed
    // histogram rather than the two tallest raw bins: adjacent tall bins are
    // usually one mode split in two, and seeding inside a single mode lets
    // Lloyd drift both means to midpoints between modes.
    let smoothed: Vec<f64> = (0..bins)
        .map(|b| {
            let w = [1.0, 2.0, 3.0, 2.0, 1.0];
            (0..5).map(|k| hist[(b + bins + k - 2) % bins] as f64 * w[k]).sum()
        })
        .collect();
    let is_peak = |b: usize| {
        let left = smoothed[(b + bins - 1) % bins];
        let right = smoothed[(b + 1) % bins];
        smoothed[b] > left && smoothed[b] >= right && hist[b] > 0
    };
    let mut peaks: Vec<usize> = (0..bins).filter(|b| is_peak(*b)).collect();
    peaks.sort_by(|a, b| smoothed[*b].partial_cmp(&smoothed[*a]).expect("finite mass"));
    let top = peaks
        .first()
        .copied()
        .unwrap_or_else(|| (0..bins).max_by_key(|b| hist[*b]).expect("bins non-empty"));
    let min_peak_separation = 60.0_f64.to_radians();
    let second = peaks
        .iter()
        .copied()
        .find(|b| {
            *b != top
                && angle_diff(bin_center(*b), bin_center(top)).abs() >= min_peak_separation
        })
        .unwrap_or_else(|| (top + bins / 2) % bins);
    let mut means = [bin_center(top), bin_center(second)];

    let mut collapsed = false;
    for _ in 0..25 {
        let mut clusters: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for h in &headings {
            let d0 = angle_diff(*h, means[0]).abs();
            let d1 = angle_diff(*h, means[1]).abs();
            clusters[usize::from(d1 < d0)].push(*h);
        }
        collapsed = clusters.iter().any(Vec::is_empty);
        let mut moved = 0.0f64;
        for (i, cluster) in clusters.iter().enumerate() {
            if let Ok(mean) = mean_heading(cluster) {
                moved = moved.max(angle_diff(mean, means[i]).abs());
                means[i] = mean;
            }
        }
        if moved < 1e-6 {
            break;
        }
    }

    // A wrapped cluster covering several heading modes has a circular mean
    // that falls between them (on a symmetric cross, k = 2 means settle on
    // the diagonals). Each arm therefore aligns with its cluster's dominant
    // mode: the histogram peak nearest the converged mean, sharpened to the
    // circular mean of the headings local to that peak.
    if !peaks.is_empty() {
        let bin_width = std::f64::consts::TAU / bins as f64;
        let nearest_peak = |angle: f64, skip: Option<usize>| {
            peaks
                .iter()
                .copied()
                .filter(|b| Some(*b) != skip)
                .min_by(|a, b| {
                    let da = angle_diff(bin_center(*a), angle).abs();
                    let db = angle_diff(bin_center(*b), angle).abs();
                    da.partial_cmp(&db).expect("finite angles")
                })
        };
        let local_mean = |peak: usize| {
            let center = bin_center(peak);
            let local: Vec<f64> = headings
                .iter()
                .copied()
                .filter(|h| angle_diff(*h, center).abs() <= 1.5 * bin_width)
                .collect();
            mean_heading(&local).unwrap_or(center)
        };
        if let Some(first) = nearest_peak(means[0], None) {
            means[0] = local_mean(first);
            if let Some(second) = nearest_peak(means[1], Some(first)) {
                means[1] = local_mean(second);
            }
        }
    }

    if collapsed || angle_diff(means[0], means[1]).abs() < MIN_ARM_SEPARATION {
        means[1] = normalize_angle(means[0] + std::f64::consts::PI);
    }
    let arms = vec![Arm::new(means[0], 0.0, 1, 1), Arm::new(means[1], 0.0, 1, 1)];
    Ok(Intersection::new(centroid, arms)?)
}

/// Runs the annealed chain from the data-driven initial model.
pub fn run_chain(
    trajectories: &[Trajectory],
    budget: usize,
    kernel: &ProposalKernel,
    params: &LikelihoodParams,
    schedule: &AnnealingSchedule,
    seed: u64,
) -> Result<ChainResult, McmcError> {
    let initial = initial_model(trajectories)?;
    run_chain_from(initial, trajectories, budget, kernel, params, schedule, seed)
}

/// Runs the annealed chain from an explicit starting hypothesis.
pub fn run_chain_from(
    initial: Intersection,
    trajectories: &[Trajectory],
    budget: usize,
    kernel: &ProposalKernel,
    params: &LikelihoodParams,
    schedule: &AnnealingSchedule,
    seed: u64,
) -> Result<ChainResult, McmcError> {
    if budget == 0 {
        return Err(McmcError::EmptyBudget);
    }
    kernel.validate()?;
    schedule.validate()?;
    if trajectories.iter().all(|t| t.samples().is_empty()) {
        return Err(McmcError::NoData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut current = initial;
    let mut current_score = log_likelihood(&current, trajectories, params);
    let mut best = current.clone();
    let mut best_score = current_score;
    let mut trace = Vec::with_capacity(budget);
    let mut moves: Vec<MoveTally> = MoveKind::ALL
        .iter()
        .map(|kind| MoveTally { kind: *kind, proposed: 0, accepted: 0 })
        .collect();

    for step in 0..budget {
        let temperature = schedule.temperature(step, budget);
        let proposal = propose(&current, kernel, &mut rng);
        moves[proposal.kind.index()].proposed += 1;
        let accepted = if proposal.log_forward.is_finite() {
            let candidate_score = log_likelihood(&proposal.candidate, trajectories, params);
            if accept(
                current_score,
                candidate_score,
                proposal.log_forward,
                proposal.log_reverse,
                temperature,
                &mut rng,
            ) {
                current = proposal.candidate;
                current_score = candidate_score;
                true
            } else {
                false
            }
        } else {
            false
        };
        if accepted {
            moves[proposal.kind.index()].accepted += 1;
            if current_score > best_score {
                best = current.clone();
                best_score = current_score;
            }
        }
        trace.push(TraceEntry { step, kind: proposal.kind, accepted, log_posterior: current_score });
    }

    Ok(ChainResult { best, best_score, trace, moves })
}
