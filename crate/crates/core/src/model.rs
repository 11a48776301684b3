//! Parametric intersection model: a center point plus radial arms, each arm
//! carrying counts of entry and exit lanes and a median gap.
//!
//! The continuous lane geometry near the intersection border is derived, not
//! stored: each lane contributes a straight *stub* center line starting at
//! the border radius and running outward along the arm. Entries sit on one
//! side of the arm axis, exits mirrored on the other, blocks separated by
//! the gap. These stubs are what the coarse estimator scores trajectories
//! against, and what the refinement stage later anchors splines to.

use crate::geometry::{angle_diff, normalize_angle, Point2, Polyline, Pose2};
use thiserror::Error;

/// Lane width in meters, fixed for the whole model.
pub const LANE_WIDTH: f64 = 2.7;

/// Minimum pairwise angular separation between arms.
pub const MIN_ARM_SEPARATION: f64 = 25.0 * std::f64::consts::PI / 180.0;

/// Length of a lane stub outward from the border radius.
pub const DEFAULT_STUB_LENGTH: f64 = 30.0;

/// Extra clearance added to the widest arm when deriving the border radius.
pub const BORDER_MARGIN: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    /// No stub with the requested driving direction exists.
    #[error("model has no {0:?} stub")]
    NoStub(Direction),
    /// Two arms closer than the minimum angular separation.
    #[error("arms {0} and {1} are separated by less than the 25 degree minimum")]
    ArmSeparation(usize, usize),
    /// An arm must carry at least one lane.
    #[error("arm {0} has neither entries nor exits")]
    EmptyArm(usize),
    #[error("arm {0} has a negative gap")]
    NegativeGap(usize),
    #[error("intersection needs at least one arm")]
    NoArms,
}

/// Driving direction of a lane relative to the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    /// Traffic flows toward the intersection center.
    Entry,
    /// Traffic flows away from the center.
    Exit,
}

/// One arm of the intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arm {
    /// Direction from the center toward the arm, radians in `[-pi, pi)`.
    pub alpha: f64,
    /// Width of the median strip between the entry and exit lane blocks.
    pub gap: f64,
    /// Number of entry lanes.
    pub entries: usize,
    /// Number of exit lanes.
    pub exits: usize,
}

impl Arm {
    pub fn new(alpha: f64, gap: f64, entries: usize, exits: usize) -> Self {
        Self { alpha: normalize_angle(alpha), gap, entries, exits }
    }

    /// Half-width of the arm's lane corridor: gap plus the wider lane block.
    fn half_width(&self) -> f64 {
        self.gap / 2.0 + self.entries.max(self.exits) as f64 * LANE_WIDTH
    }
}

/// A straight lane segment on an arm, outward from the border radius.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneStub {
    pub arm_index: usize,
    pub direction: Direction,
    /// Lane position within its block; slot 0 is closest to the median.
    pub slot: usize,
    /// Straight two-point line, oriented along the driving direction:
    /// toward the center for entries, away from it for exits.
    pub center_line: Polyline,
    pub stub_length: f64,
    /// Driving direction along the stub, radians.
    pub heading: f64,
}

/// Result of a nearest-stub query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearestStub {
    /// Index into the queried stub slice.
    pub index: usize,
    /// Euclidean distance from the pose position to the stub center line.
    pub distance: f64,
    /// Signed heading deviation from the stub driving direction.
    pub angular_dev: f64,
}

/// A full intersection hypothesis: center plus arms, sorted by angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Intersection {
    center: Point2,
    arms: Vec<Arm>,
    lane_width: f64,
}

impl Intersection {
    /// Builds an intersection, sorting arms by angle and validating lane
    /// counts, gaps, and the pairwise angular separation.
    pub fn new(center: Point2, mut arms: Vec<Arm>) -> Result<Self, ModelError> {
        if arms.is_empty() {
            return Err(ModelError::NoArms);
        }
        for arm in arms.iter_mut() {
            arm.alpha = normalize_angle(arm.alpha);
        }
        arms.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        for (i, arm) in arms.iter().enumerate() {
            if arm.entries + arm.exits == 0 {
                return Err(ModelError::EmptyArm(i));
            }
            if arm.gap < 0.0 {
                return Err(ModelError::NegativeGap(i));
            }
        }
        // The minimum pairwise circular separation is always attained by a
        // circularly consecutive pair, so checking those suffices.
        let n = arms.len();
        if n > 1 {
            for i in 0..n {
                let j = (i + 1) % n;
                let arc = (arms[j].alpha - arms[i].alpha).rem_euclid(std::f64::consts::TAU);
                let sep = arc.min(std::f64::consts::TAU - arc);
                if sep < MIN_ARM_SEPARATION - 1e-12 {
                    return Err(ModelError::ArmSeparation(i, j));
                }
            }
        }
        Ok(Self { center, arms, lane_width: LANE_WIDTH })
    }

    pub fn center(&self) -> Point2 {
        self.center
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    pub fn total_lanes(&self) -> usize {
        self.arms.iter().map(|a| a.entries + a.exits).sum()
    }

    /// Radius of the circular intersection area: clearance for the widest
    /// arm corridor plus a fixed margin. Stubs start here.
    pub fn border_radius(&self) -> f64 {
        let widest = self
            .arms
            .iter()
            .map(Arm::half_width)
            .fold(0.0f64, f64::max);
        widest + BORDER_MARGIN
    }

    /// Lateral offset of a stub center line from the arm axis. Entries are
    /// on the negative side, exits on the positive side, innermost lanes
    /// half a lane width beyond half the gap.
    pub fn stub_offset(&self, arm: &Arm, direction: Direction, slot: usize) -> f64 {
        let magnitude = arm.gap / 2.0 + self.lane_width * (0.5 + slot as f64);
        match direction {
            Direction::Entry => -magnitude,
            Direction::Exit => magnitude,
        }
    }

    /// All lane stubs with the default stub length, ordered by
    /// (arm index, direction, slot).
    pub fn stubs(&self) -> Vec<LaneStub> {
        self.stubs_with_length(DEFAULT_STUB_LENGTH)
    }

    pub fn stubs_with_length(&self, stub_length: f64) -> Vec<LaneStub> {
        let r = self.border_radius();
        let mut out = Vec::with_capacity(self.total_lanes());
        for (arm_index, arm) in self.arms.iter().enumerate() {
            for direction in [Direction::Entry, Direction::Exit] {
                let count = match direction {
                    Direction::Entry => arm.entries,
                    Direction::Exit => arm.exits,
                };
                for slot in 0..count {
                    let off = self.stub_offset(arm, direction, slot);
                    let inner = self.arm_point(arm, r, off);
                    let outer = self.arm_point(arm, r + stub_length, off);
                    let (points, heading) = match direction {
                        Direction::Entry => {
                            (vec![outer, inner], normalize_angle(arm.alpha + std::f64::consts::PI))
                        }
                        Direction::Exit => (vec![inner, outer], arm.alpha),
                    };
                    out.push(LaneStub {
                        arm_index,
                        direction,
                        slot,
                        center_line: Polyline::new(points)
                            .expect("stub endpoints are distinct by construction"),
                        stub_length,
                        heading,
                    });
                }
            }
        }
        out
    }

    /// World coordinates of the arm-frame point (along, lateral).
    fn arm_point(&self, arm: &Arm, along: f64, lateral: f64) -> Point2 {
        let (s, c) = arm.alpha.sin_cos();
        Point2::new(
            self.center.x + c * along - s * lateral,
            self.center.y + s * along + c * lateral,
        )
    }
}

/// Nearest stub of the given driving direction, by Euclidean distance to the
/// stub center line. Ties resolve to the lowest (arm index, slot) because
/// stubs are scanned in that order and only strict improvements win.
pub fn nearest_stub(
    stubs: &[LaneStub],
    pose: Pose2,
    direction: Direction,
) -> Result<NearestStub, ModelError> {
    let mut best: Option<NearestStub> = None;
    for (index, stub) in stubs.iter().enumerate() {
        if stub.direction != direction {
            continue;
        }
        let d = stub.center_line.nearest_point(pose.position).distance;
        if best.map_or(true, |b| d < b.distance) {
            best = Some(NearestStub {
                index,
                distance: d,
                angular_dev: angle_diff(pose.heading, stub.heading),
            });
        }
    }
    best.ok_or(ModelError::NoStub(direction))
}
