//! Lane-level intersection geometry estimation from vehicle trajectories.
//!
//! The pipeline recovers the layout of an intersection (arm directions,
//! lane counts per arm, and lane center lines) using nothing but recorded
//! vehicle positions and headings:
//!
//! 1. A reversible-jump Markov chain with simulated annealing ([`mcmc`])
//!    searches over coarse parametric models (arm angles, gaps, lane counts).
//! 2. Trajectories are associated to entry/exit lanes of the best model and
//!    each lane's center line is refined as a 1D cubic B-spline ([`spline`])
//!    via staged sparse least squares ([`refine`]).
//! 3. Overlapping refined lanes are merged into a lanelet map.
//!
//! A built-in simulator ([`sim`]) produces noisy trajectories over random
//! intersections, and [`eval`] measures centerline deviation and structural
//! recovery against ground truth, so the whole loop can be benchmarked
//! end to end with a single seed.

pub mod eval;
pub mod geometry;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod sim;
pub mod spline;

pub use geometry::{Frame2, Point2, Polyline, Pose2};
pub use model::{Arm, Direction, Intersection, LaneStub};
pub use sim::{Measurement, SimConfig, Trajectory};
