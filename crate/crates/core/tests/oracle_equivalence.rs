//! The assembled objective must agree with the independent brute-force
//! recomputation, including which out-of-grid points get skipped.

use depthreg_core::depth_map::{DepthMap, GridGeometry};
use depthreg_core::geometry::Pose;
use depthreg_core::io::PointCloud;
use depthreg_core::problem::{assemble, AssembleOptions, ProblemState, SmoothingPattern, Weights};
use depthreg_core::synth::oracle::brute_force_cost;
use nalgebra::{DMatrix, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

fn random_three_frame_problem(seed: u64) -> (ProblemState, Vec<PointCloud>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let rows = rng.random_range(6..16);
    let cols = rng.random_range(6..16);
    let resolution = rng.random_range(0.05..0.5);
    let map = DepthMap {
        geometry: GridGeometry {
            rows,
            cols,
            resolution,
            origin: Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        },
        values: DMatrix::from_fn(rows, cols, |m, n| {
            0.8 + 0.2 * (m as f64 * 0.8).sin() + 0.15 * (n as f64 * 0.6).cos()
        }),
        observed: DMatrix::from_element(rows, cols, true),
        obs_count: DMatrix::from_element(rows, cols, 1),
    };
    let span_x = (rows - 1) as f64 * resolution;
    let span_y = (cols - 1) as f64 * resolution;
    let mut poses = Vec::new();
    let mut clouds = Vec::new();
    for i in 0..3 {
        poses.push(Pose::new(
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
            Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            ),
        ));
        // Sample beyond the grid bounds too, so the skip rule is exercised.
        let points: Vec<Vector3<f64>> = (0..150)
            .map(|_| {
                Vector3::new(
                    map.geometry.origin.x + rng.random_range(-0.3 * span_x..1.3 * span_x),
                    map.geometry.origin.y + rng.random_range(-0.3 * span_y..1.3 * span_y),
                    rng.random_range(0.4..1.4),
                )
            })
            .collect();
        clouds.push(PointCloud::new(format!("f{i}"), points));
    }
    (ProblemState::new(poses, map, 0), clouds)
}

#[test]
fn assembled_cost_matches_brute_force_recomputation() {
    for seed in 0..10u64 {
        let (state, clouds) = random_three_frame_problem(600 + seed);
        let weights = Weights::new(1.0 + (seed as f64) * 0.1, 0.05 * (seed as f64 + 1.0));
        let pattern = SmoothingPattern::new(state.map.geometry.rows, state.map.geometry.cols);
        let asm = assemble(
            &state,
            &clouds,
            weights,
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        let reference = brute_force_cost(&state, &clouds, weights);
        let tol = 1e-10 * reference.abs().max(1.0);
        assert!(
            (asm.cost - reference).abs() <= tol,
            "seed {seed}: assembled {} vs brute force {}",
            asm.cost,
            reference
        );
    }
}

#[test]
fn weight_zero_depth_reduces_to_smoothing_oracle() {
    let (mut state, clouds) = random_three_frame_problem(777);
    // Push all points out of the grid: the brute-force depth sum is empty and
    // only the smoothing term remains on both sides.
    for pose in &mut state.poses {
        pose.t.x += 100.0;
    }
    let weights = Weights::new(1.0, 0.3);
    let reference = brute_force_cost(&state, &clouds, weights);
    let pattern = SmoothingPattern::new(state.map.geometry.rows, state.map.geometry.cols);
    let asm = assemble(
        &state,
        &clouds,
        weights,
        &pattern,
        AssembleOptions::default(),
    );
    // assemble treats a fully-skipped problem as an error; the oracle value
    // must equal the pure smoothing sum it would otherwise produce.
    assert!(asm.is_err());
    let flat_clouds: Vec<PointCloud> = clouds
        .iter()
        .map(|c| PointCloud::new(c.frame_id.clone(), vec![]))
        .collect();
    let smoothing_only = assemble(
        &state,
        &flat_clouds,
        weights,
        &pattern,
        AssembleOptions::default(),
    )
    .unwrap();
    assert!((smoothing_only.cost - reference).abs() <= 1e-10 * reference.max(1.0));
}
