//! Accuracy metrics and the benchmark harness: orthogonal center-line
//! deviation, lane matching, structural comparison, and aggregate
//! statistics over batches of simulated intersections.

use crate::geometry::{angle_diff, Point2, Polyline};
use crate::model::Intersection;
use crate::pipeline::{estimate, Estimate, PipelineConfig, Timings};
use crate::refine::sample_lane_course;
use crate::sim::{
    random_intersection, simulate, GroundTruthLane, SimConfig, SimError, Trajectory,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Arc-length spacing of deviation samples along the estimated line.
pub const DEVIATION_SPACING: f64 = 1.0;

/// Points per estimated lane course when converted to a polyline.
const COURSE_SAMPLES: usize = 256;

/// Feet closer than this to a truth-line end count as clamped, not interior.
const INTERIOR_MARGIN: f64 = 1e-9;

/// Metric failures.
#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    /// No sample of the estimated line projects onto the interior of the
    /// truth line, so the lines share no extent to compare over.
    #[error("the estimated line does not overlap the truth line")]
    NoOverlap,
}

/// Mean orthogonal distance from the estimated center line to the truth
/// center line.
///
/// The estimated line is sampled every [`DEVIATION_SPACING`] meters of arc
/// (both ends included) and each sample is projected onto the truth line.
/// Samples whose foot point clamps to a truth endpoint lie beyond the
/// truth line's extent and are excluded, so overhang is not penalized;
/// the mean runs over the interior feet only.
pub fn centerline_deviation(estimated: &Polyline, truth: &Polyline) -> Result<f64, EvalError> {
    let length = estimated.length();
    let truth_length = truth.length();
    let mut arcs = Vec::with_capacity(length as usize + 2);
    let mut a = 0.0;
    while a < length {
        arcs.push(a);
        a += DEVIATION_SPACING;
    }
    arcs.push(length);

    let mut sum = 0.0;
    let mut interior = 0usize;
    for &arc in &arcs {
        let foot = truth.nearest_point(estimated.point_at(arc));
        if foot.arc_position > INTERIOR_MARGIN && foot.arc_position < truth_length - INTERIOR_MARGIN
        {
            sum += foot.distance;
            interior += 1;
        }
    }
    if interior == 0 {
        return Err(EvalError::NoOverlap);
    }
    Ok(sum / interior as f64)
}

/// Pairing of estimated lanes to ground-truth lanes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneMatching {
    /// Matched (estimated index, truth index, deviation) triples.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Estimated lanes with no truth partner.
    pub ghosts: Vec<usize>,
    /// Truth lanes with no estimated partner.
    pub misses: Vec<usize>,
}

/// Greedily pairs estimated lanes with truth lanes by ascending deviation.
///
/// The cost of a pair is [`centerline_deviation`]; pairs without overlap
/// are unmatchable. Repeatedly takes the globally cheapest remaining pair
/// (ties resolve to the lowest estimated, then truth, index), so the
/// result is independent of input order up to index relabeling.
pub fn match_lanes(estimated: &[Polyline], truth: &[Polyline]) -> LaneMatching {
    let costs: Vec<Vec<Option<f64>>> = estimated
        .iter()
        .map(|e| truth.iter().map(|t| centerline_deviation(e, t).ok()).collect())
        .collect();
    let mut est_used = vec![false; estimated.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in costs.iter().enumerate() {
            if est_used[i] {
                continue;
            }
            for (j, cost) in row.iter().enumerate() {
                if truth_used[j] {
                    continue;
                }
                if let Some(c) = cost {
                    if best.is_none_or(|(_, _, b)| *c < b) {
                        best = Some((i, j, *c));
                    }
                }
            }
        }
        match best {
            Some((i, j, c)) => {
                est_used[i] = true;
                truth_used[j] = true;
                pairs.push((i, j, c));
            }
            None => break,
        }
    }
    let ghosts = est_used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    let misses = truth_used.iter().enumerate().filter(|(_, &u)| !u).map(|(j, _)| j).collect();
    LaneMatching { pairs, ghosts, misses }
}

/// Structural agreement between an estimated and a true intersection model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralCheck {
    /// Arm counts agree.
    pub arm_count_correct: bool,
    /// Entry and exit counts agree on every angle-aligned arm pair.
    pub lane_counts_correct: bool,
    /// Mean absolute arm angle error over the alignment, radians.
    pub mean_arm_angle_error: Option<f64>,
}

impl StructuralCheck {
    /// Arm count and all per-arm lane counts exactly correct.
    pub fn correct(&self) -> bool {
        self.arm_count_correct && self.lane_counts_correct
    }
}

/// Maps each truth arm index to the estimated arm index aligned with it.
///
/// Both models keep their arms sorted by angle, so the alignment is the
/// cyclic shift minimizing the total absolute angle error. `None` when the
/// arm counts differ.
pub fn arm_alignment(estimated: &Intersection, truth: &Intersection) -> Option<Vec<usize>> {
    let n = truth.arms().len();
    if estimated.arms().len() != n || n == 0 {
        return None;
    }
    let mut best_shift = 0usize;
    let mut best_error = f64::INFINITY;
    for shift in 0..n {
        let error: f64 = (0..n)
            .map(|i| {
                angle_diff(estimated.arms()[(i + shift) % n].alpha, truth.arms()[i].alpha).abs()
            })
            .sum();
        if error < best_error {
            best_error = error;
            best_shift = shift;
        }
    }
    Some((0..n).map(|i| (i + best_shift) % n).collect())
}

/// Compares arm count, aligned arm angles, and per-arm lane counts.
pub fn structural_check(estimated: &Intersection, truth: &Intersection) -> StructuralCheck {
    match arm_alignment(estimated, truth) {
        None => StructuralCheck {
            arm_count_correct: false,
            lane_counts_correct: false,
            mean_arm_angle_error: None,
        },
        Some(alignment) => {
            let n = truth.arms().len();
            let mut counts_ok = true;
            let mut error = 0.0;
            for (i, &j) in alignment.iter().enumerate() {
                let t = &truth.arms()[i];
                let e = &estimated.arms()[j];
                counts_ok &= t.entries == e.entries && t.exits == e.exits;
                error += angle_diff(e.alpha, t.alpha).abs();
            }
            StructuralCheck {
                arm_count_correct: true,
                lane_counts_correct: counts_ok,
                mean_arm_angle_error: Some(error / n as f64),
            }
        }
    }
}

/// Trajectories with the (entry, exit) stub labels that generated them.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub trajectories: Vec<Trajectory>,
    /// Per-trajectory ((entry arm, slot), (exit arm, slot)).
    pub labels: Vec<((usize, usize), (usize, usize))>,
}

/// Simulates every ground-truth lane in its own batch so each trajectory
/// keeps its generating lane label; ids are prefixed per lane to stay
/// unique across the dataset.
pub fn simulate_labeled(
    lanes: &[GroundTruthLane],
    cfg: &SimConfig,
    base_seed: u64,
) -> Result<LabeledDataset, SimError> {
    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    for (k, lane) in lanes.iter().enumerate() {
        let lane_cfg = SimConfig {
            seed: base_seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            ..cfg.clone()
        };
        for z in simulate(std::slice::from_ref(lane), &lane_cfg)? {
            let renamed = Trajectory::new(format!("l{k:02}-{}", z.id()), z.samples().to_vec())
                .expect("simulated trajectories are valid");
            trajectories.push(renamed);
            labels.push((lane.entry, lane.exit));
        }
    }
    Ok(LabeledDataset { trajectories, labels })
}

/// Fraction of trajectories assigned to their generating lane, under the
/// arm alignment between the estimated and true model. `None` when the arm
/// counts differ and no alignment exists.
pub fn association_accuracy(
    est: &Estimate,
    truth: &Intersection,
    labels: &[((usize, usize), (usize, usize))],
) -> Option<f64> {
    let alignment = arm_alignment(&est.model, truth)?;
    let mut assigned: Vec<Option<((usize, usize), (usize, usize))>> = vec![None; labels.len()];
    for lane in &est.lanes {
        let key = (
            (lane.entry.arm_index, lane.entry.slot),
            (lane.exit.arm_index, lane.exit.slot),
        );
        for &t in &lane.assigned {
            assigned[t] = Some(key);
        }
    }
    let correct = labels
        .iter()
        .zip(&assigned)
        .filter(|(&((ea, es), (oa, os)), got)| {
            **got == Some(((alignment[ea], es), (alignment[oa], os)))
        })
        .count();
    Some(correct as f64 / labels.len() as f64)
}

/// Benchmark batch parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// One simulated intersection per seed.
    pub seeds: Vec<u64>,
    /// Inclusive arm count range of the random intersections.
    pub arm_range: (usize, usize),
    /// Inclusive per-direction lane count range.
    pub lanes_range: (usize, usize),
    /// Trajectory simulation parameters (per-lane seeds are derived from
    /// the intersection seed; the `seed` field here is ignored).
    pub sim: SimConfig,
    /// Estimation parameters (the `seed` field is replaced per run).
    pub pipeline: PipelineConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: (0..50).collect(),
            arm_range: (3, 5),
            lanes_range: (1, 3),
            sim: SimConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Metrics of one simulated intersection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionEval {
    /// Seed that generated the intersection and its traffic.
    pub seed: u64,
    /// Mean deviation over matched lanes, meters.
    pub deviation: Option<f64>,
    /// Deviations of the matched lanes, in truth-lane order of matching.
    pub per_lane: Vec<f64>,
    /// Matched lane count.
    pub matched: usize,
    /// Truth lanes without an estimated partner.
    pub misses: usize,
    /// Estimated lanes without a truth partner.
    pub ghosts: usize,
    /// Estimated arm count equals the true arm count.
    pub arm_count_correct: bool,
    /// Entry/exit counts agree on every aligned arm.
    pub lane_counts_correct: bool,
    /// Fraction of trajectories assigned to their generating lane.
    pub association_accuracy: Option<f64>,
    /// Stage timings; excluded from determinism comparisons.
    pub timings: Option<Timings>,
    /// Failure message when the pipeline did not produce an estimate.
    pub error: Option<String>,
}

impl IntersectionEval {
    /// Arm count and lane counts exactly correct and the run succeeded.
    pub fn structurally_correct(&self) -> bool {
        self.error.is_none() && self.arm_count_correct && self.lane_counts_correct
    }

    fn failed(seed: u64, error: String) -> Self {
        Self {
            seed,
            deviation: None,
            per_lane: Vec::new(),
            matched: 0,
            misses: 0,
            ghosts: 0,
            arm_count_correct: false,
            lane_counts_correct: false,
            association_accuracy: None,
            timings: None,
            error: Some(error),
        }
    }
}

/// Aggregate over a benchmark batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    /// Per-intersection rows, in seed order.
    pub runs: Vec<IntersectionEval>,
    /// Fraction of runs with exactly correct structure.
    pub structural_rate: f64,
    /// Mean deviation over structurally correct runs, meters.
    pub mean_deviation: Option<f64>,
    /// Median deviation over structurally correct runs, meters.
    pub median_deviation: Option<f64>,
    /// 95th percentile deviation over structurally correct runs, meters.
    pub p95_deviation: Option<f64>,
    /// Mean association accuracy over runs where it is defined.
    pub mean_association_accuracy: Option<f64>,
    /// Mean coarse-stage wall clock over successful runs, milliseconds.
    pub mean_coarse_ms: f64,
    /// Mean refinement wall clock over successful runs, milliseconds.
    pub mean_refine_ms: f64,
    /// Runs that produced no estimate.
    pub failures: usize,
}

/// Generates, estimates, and scores one random intersection.
pub fn evaluate_intersection(seed: u64, cfg: &BenchmarkConfig) -> IntersectionEval {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (truth, gt_lanes) = match random_intersection(&mut rng, cfg.arm_range, cfg.lanes_range) {
        Ok(pair) => pair,
        Err(e) => return IntersectionEval::failed(seed, e.to_string()),
    };
    let dataset = match simulate_labeled(&gt_lanes, &cfg.sim, seed) {
        Ok(d) => d,
        Err(e) => return IntersectionEval::failed(seed, e.to_string()),
    };
    let pipeline_cfg = PipelineConfig { seed, ..cfg.pipeline.clone() };
    let est = match estimate(&dataset.trajectories, &pipeline_cfg) {
        Ok(est) => est,
        Err(e) => return IntersectionEval::failed(seed, e.to_string()),
    };

    let structure = structural_check(&est.model, &truth);
    let est_polys: Vec<Polyline> = est.lanes.iter().filter_map(course_polyline).collect();
    let truth_polys: Vec<Polyline> = gt_lanes.iter().map(|l| l.center_line.clone()).collect();
    let matching = match_lanes(&est_polys, &truth_polys);
    let per_lane: Vec<f64> = matching.pairs.iter().map(|&(_, _, d)| d).collect();
    let deviation = if per_lane.is_empty() {
        None
    } else {
        Some(per_lane.iter().sum::<f64>() / per_lane.len() as f64)
    };
    IntersectionEval {
        seed,
        deviation,
        matched: matching.pairs.len(),
        misses: matching.misses.len(),
        ghosts: matching.ghosts.len() + (est.lanes.len() - est_polys.len()),
        arm_count_correct: structure.arm_count_correct,
        lane_counts_correct: structure.lane_counts_correct,
        association_accuracy: association_accuracy(&est, &truth, &dataset.labels),
        timings: Some(est.timings),
        error: None,
        per_lane,
    }
}

/// Runs the batch in parallel and aggregates in seed order.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> BenchmarkSummary {
    let runs: Vec<IntersectionEval> =
        cfg.seeds.par_iter().map(|&seed| evaluate_intersection(seed, cfg)).collect();
    summarize(runs)
}

/// Aggregates per-run rows into the batch summary.
pub fn summarize(runs: Vec<IntersectionEval>) -> BenchmarkSummary {
    let failures = runs.iter().filter(|r| r.error.is_some()).count();
    let correct = runs.iter().filter(|r| r.structurally_correct()).count();
    let structural_rate = if runs.is_empty() { 0.0 } else { correct as f64 / runs.len() as f64 };

    let mut devs: Vec<f64> =
        runs.iter().filter(|r| r.structurally_correct()).filter_map(|r| r.deviation).collect();
    devs.sort_by(|a, b| a.partial_cmp(b).expect("deviations are finite"));
    let mean_deviation =
        (!devs.is_empty()).then(|| devs.iter().sum::<f64>() / devs.len() as f64);
    let median_deviation = quantile(&devs, 0.5);
    let p95_deviation = quantile(&devs, 0.95);

    let accs: Vec<f64> = runs.iter().filter_map(|r| r.association_accuracy).collect();
    let mean_association_accuracy =
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64);

    let timings: Vec<Timings> = runs.iter().filter_map(|r| r.timings).collect();
    let mean_coarse_ms = if timings.is_empty() {
        0.0
    } else {
        timings.iter().map(|t| t.coarse_ms).sum::<f64>() / timings.len() as f64
    };
    let mean_refine_ms = if timings.is_empty() {
        0.0
    } else {
        timings.iter().map(|t| t.refine_ms).sum::<f64>() / timings.len() as f64
    };

    BenchmarkSummary {
        runs,
        structural_rate,
        mean_deviation,
        median_deviation,
        p95_deviation,
        mean_association_accuracy,
        mean_coarse_ms,
        mean_refine_ms,
        failures,
    }
}

/// Nearest-rank quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[idx])
}

/// Estimated lane course as a polyline, deduplicating near-coincident
/// samples; `None` only for degenerate sub-millimeter courses.
fn course_polyline(lane: &crate::refine::Lane) -> Option<Polyline> {
    let mut points: Vec<Point2> = Vec::with_capacity(COURSE_SAMPLES);
    for p in sample_lane_course(lane, COURSE_SAMPLES) {
        if points.last().is_none_or(|q: &Point2| q.distance(p) > 1e-6) {
            points.push(p);
        }
    }
    Polyline::new(points).ok()
}
