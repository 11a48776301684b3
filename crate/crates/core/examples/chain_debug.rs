//! Diagnostic: coarse-chain recovery rate and per-seed detail on a
//! four-arm cross under the standard coarse preparation.

use lanecast::geometry::{angle_diff, Point2};
use lanecast::mcmc::{
    initial_model, log_likelihood, run_chain, AnnealingSchedule, LikelihoodParams, ProposalKernel,
};
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

fn describe(tag: &str, model: &Intersection, score: f64) {
    print!(
        "  {tag}: score {score:10.2}  center ({:6.2},{:6.2})  arms:",
        model.center().x,
        model.center().y
    );
    for a in model.arms() {
        print!(" [{:6.1}deg g={:.2} E={} O={}]", a.alpha.to_degrees(), a.gap, a.entries, a.exits);
    }
    println!();
}

fn main() {
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

    let seeds = 50u64;
    let hits: usize = (0..seeds)
        .into_par_iter()
        .filter(|&seed| {
            let cfg = SimConfig { seed, ..Default::default() };
            let trajectories = simulate(&lanes, &cfg).unwrap();
            let coarse = prepare_coarse(&trajectories, &prep);
            let result = run_chain(&coarse, 5000, &kernel, &params, &schedule, seed).unwrap();
            structure_matches(&result.best, &truth)
        })
        .count();
    println!("default preparation: {hits}/{seeds} recovered");

    println!("\nper-seed detail:");
    for seed in 0..8u64 {
        let cfg = SimConfig { seed, ..Default::default() };
        let trajectories = simulate(&lanes, &cfg).unwrap();
        let coarse = prepare_coarse(&trajectories, &prep);
        let n: usize = coarse.iter().map(|t| t.samples().len()).sum();
        let init = initial_model(&coarse).unwrap();
        let result = run_chain(&coarse, 5000, &kernel, &params, &schedule, seed).unwrap();
        let truth_score = log_likelihood(&truth, &coarse, &params);
        println!("seed {seed}: {} trajectories, {n} coarse samples", coarse.len());
        describe("init ", &init, log_likelihood(&init, &coarse, &params));
        describe("truth", &truth, truth_score);
        describe("best ", &result.best, result.best_score);
    }
}
