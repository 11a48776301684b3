//! End-to-end coarse estimation on simulated data: the chain must recover
//! the arm structure of a symmetric four-arm intersection from noisy
//! trajectories for the vast majority of seeds.

use lanecast::geometry::{angle_diff, Point2};
use lanecast::mcmc::{run_chain, AnnealingSchedule, LikelihoodParams, ProposalKernel};
use lanecast::model::{Arm, Intersection};
use lanecast::pipeline::{prepare_coarse, CoarsePreparation};
use lanecast::sim::{ground_truth_lanes, simulate, SimConfig};
use rayon::prelude::*;

fn structure_matches(estimate: &Intersection, truth: &Intersection) -> bool {
    let est = estimate.arms();
    let tru = truth.arms();
    if est.len() != tru.len() {
        return false;
    }
    let mut used = vec![false; est.len()];
    for t in tru {
        let mut best: Option<(f64, usize)> = None;
        for (i, e) in est.iter().enumerate() {
            let d = angle_diff(e.alpha, t.alpha).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (d, i) = best.expect("estimate has arms");
        if used[i] || d > 12.5_f64.to_radians() {
            return false;
        }
        if est[i].entries != t.entries || est[i].exits != t.exits {
            return false;
        }
        used[i] = true;
    }
    true
}

#[test]
fn four_arm_cross_structure_is_recovered_for_most_seeds() {
    let truth = Intersection::new(
        Point2::default(),
        vec![
            Arm::new(0.0, 1.0, 1, 1),
            Arm::new(90.0_f64.to_radians(), 1.0, 1, 1),
            Arm::new(180.0_f64.to_radians(), 1.0, 1, 1),
            Arm::new(-90.0_f64.to_radians(), 1.0, 1, 1),
        ],
    )
    .unwrap();
    let lanes = ground_truth_lanes(&truth);
    let kernel = ProposalKernel::default();
    let params = LikelihoodParams::default();
    let schedule = AnnealingSchedule::default();
    let prep = CoarsePreparation::default();

    let outcomes: Vec<bool> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = SimConfig { seed, ..Default::default() };
            let trajectories = simulate(&lanes, &cfg).unwrap();
            let coarse = prepare_coarse(&trajectories, &prep);
            let result = run_chain(&coarse, 5000, &kernel, &params, &schedule, seed).unwrap();
            structure_matches(&result.best, &truth)
        })
        .collect();

    let hits = outcomes.iter().filter(|ok| **ok).count();
    assert!(
        hits >= 45,
        "structure recovered in only {hits}/50 runs (need at least 45)"
    );
}
