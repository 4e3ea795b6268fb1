//! The joint nonlinear least squares problem: state packing over poses and
//! map cells, depth-constraint residuals, the smoothing prior, and their
//! sparse analytic Jacobians.
//!
//! A depth residual compares a projected point's z against the bilinearly
//! interpolated map depth at its x-y. Its Jacobian touches at most one pose
//! block (6 entries) plus the four interpolation nodes; smoothing residuals
//! are differences of neighbouring cells with a constant +1/−1 pattern. One
//! pose is gauge-fixed and contributes no state columns, which removes the
//! global rigid-motion invariance of the objective.

use crate::depth_map::{DepthMap, GridLocator, MapGradients};
use crate::error::{Error, Result};
use crate::geometry::{rotation_derivatives, Pose, RotationDerivatives};
use crate::io::PointCloud;
use nalgebra::{DVector, Vector2, Vector3};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;

/// Term weights of the objective `w_depth * f_depth + w_smooth * f_smooth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weights {
    pub depth: f64,
    pub smooth: f64,
}

impl Weights {
    pub fn new(depth: f64, smooth: f64) -> Self {
        assert!(depth > 0.0, "depth weight must be positive");
        assert!(smooth >= 0.0, "smoothing weight must be non-negative");
        Weights { depth, smooth }
    }
}

/// Default smoothing weight, scaled with observation density so the prior
/// behaves comparably across datasets.
pub fn default_smooth_weight(avg_points_per_cell: f64) -> f64 {
    0.1 * avg_points_per_cell.max(0.0)
}

/// Mapping between state-vector columns and (pose, component) / map cells.
///
/// Free poses come first, 6 columns each in `[tx, ty, tz, roll, pitch, yaw]`
/// order; the gauge-fixed pose has no columns. Map cells follow in row-major
/// order.
#[derive(Debug, Clone)]
pub struct IndexLayout {
    pose_base: Vec<Option<usize>>,
    map_base: usize,
    map_rows: usize,
    map_cols: usize,
    dim: usize,
}

impl IndexLayout {
    pub fn new(n_poses: usize, fixed_pose_index: usize, map_rows: usize, map_cols: usize) -> Self {
        assert!(fixed_pose_index < n_poses, "fixed pose out of range");
        let mut pose_base = Vec::with_capacity(n_poses);
        let mut next = 0usize;
        for i in 0..n_poses {
            if i == fixed_pose_index {
                pose_base.push(None);
            } else {
                pose_base.push(Some(next));
                next += 6;
            }
        }
        let map_base = next;
        IndexLayout {
            pose_base,
            map_base,
            map_rows,
            map_cols,
            dim: map_base + map_rows * map_cols,
        }
    }

    /// Column of component `k` (0..6) of pose `i`, or `None` for the fixed pose.
    pub fn pose_col(&self, i: usize, k: usize) -> Option<usize> {
        debug_assert!(k < 6);
        self.pose_base[i].map(|b| b + k)
    }

    /// Column of map cell `(m, n)`.
    pub fn cell_col(&self, m: usize, n: usize) -> usize {
        debug_assert!(m < self.map_rows && n < self.map_cols);
        self.map_base + m * self.map_cols + n
    }

    /// Inverse of [`cell_col`](Self::cell_col) for columns in the map block.
    pub fn col_cell(&self, col: usize) -> Option<(usize, usize)> {
        if col < self.map_base {
            return None;
        }
        let off = col - self.map_base;
        Some((off / self.map_cols, off % self.map_cols))
    }

    pub fn pose_dim(&self) -> usize {
        self.map_base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// The packed optimisation state: all frame poses plus the depth map, with
/// one pose acting as the gauge anchor.
#[derive(Debug, Clone)]
pub struct ProblemState {
    pub poses: Vec<Pose>,
    pub map: DepthMap,
    pub fixed_pose_index: usize,
}

impl ProblemState {
    pub fn new(poses: Vec<Pose>, map: DepthMap, fixed_pose_index: usize) -> Self {
        assert!(fixed_pose_index < poses.len());
        ProblemState {
            poses,
            map,
            fixed_pose_index,
        }
    }

    pub fn layout(&self) -> IndexLayout {
        IndexLayout::new(
            self.poses.len(),
            self.fixed_pose_index,
            self.map.geometry.rows,
            self.map.geometry.cols,
        )
    }

    /// Applies a state increment. The gauge-fixed pose is untouched; angles
    /// are wrapped back into `(-π, π]`.
    pub fn apply_step(&self, delta: &DVector<f64>) -> ProblemState {
        let layout = self.layout();
        assert_eq!(delta.len(), layout.dim());
        let mut next = self.clone();
        for (i, pose) in next.poses.iter_mut().enumerate() {
            if let Some(base) = layout.pose_base[i] {
                for k in 0..3 {
                    pose.t[k] += delta[base + k];
                    pose.theta[k] += delta[base + 3 + k];
                }
                pose.normalize_angles();
            }
        }
        for m in 0..next.map.geometry.rows {
            for n in 0..next.map.geometry.cols {
                next.map.values[(m, n)] += delta[layout.cell_col(m, n)];
            }
        }
        next
    }
}

/// One depth residual's sparse Jacobian contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthJacobian {
    /// d residual / d `[tx, ty, tz, roll, pitch, yaw]` of the owning pose.
    pub pose: [f64; 6],
    /// The four interpolation nodes with their map-block coefficients (−weight).
    pub map: [(usize, usize, f64); 4],
}

/// Depth residual of one point under one pose: `z' − D(q)` with `q` the
/// projected grid location. `None` when the projection leaves the grid.
pub fn depth_residual(point: &Vector3<f64>, pose: &Pose, map: &DepthMap) -> Option<f64> {
    let p = pose.transform_point(point);
    let q = map.geometry.grid_coords(Vector2::new(p.x, p.y));
    let loc = map.locate(q).ok()?;
    Some(p.z - map.interpolate_at(&loc))
}

/// Residual and sparse Jacobian of one depth constraint.
///
/// The pose block chains the projection derivative `[I | R'p]` with the
/// interpolated map gradient; the map block is minus the bilinear weights on
/// the four neighbouring nodes. Returns `None` on out-of-grid projections.
pub fn depth_jacobian(
    point: &Vector3<f64>,
    pose: &Pose,
    derivs: &RotationDerivatives,
    map: &DepthMap,
    gradients: &MapGradients,
) -> Option<(f64, GridLocator, DepthJacobian)> {
    let p = pose.transform_point(point);
    let q = map.geometry.grid_coords(Vector2::new(p.x, p.y));
    let loc = map.locate(q).ok()?;
    let residual = p.z - map.interpolate_at(&loc);
    let grad = gradients.interpolate_at(&loc);
    let inv_s = 1.0 / map.geometry.resolution;

    let mut pose_block = [0.0f64; 6];
    for (k, out) in pose_block.iter_mut().enumerate() {
        // Column k of [I | R'p]: derivative of the projected point.
        let v: Vector3<f64> = if k < 3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            e
        } else {
            derivs.axis(k - 3) * point
        };
        *out = v.z - (grad.x * v.x + grad.y * v.y) * inv_s;
    }

    let nodes = loc.nodes();
    let mut map_block = [(0usize, 0usize, 0.0f64); 4];
    for (slot, (&(m, n), &w)) in map_block
        .iter_mut()
        .zip(nodes.iter().zip(loc.weights.iter()))
    {
        *slot = (m, n, -w);
    }

    Some((
        residual,
        loc,
        DepthJacobian {
            pose: pose_block,
            map: map_block,
        },
    ))
}

/// The fixed enumeration of neighbouring-cell pairs penalised by the
/// smoothing term: interior vertical+horizontal pairs, then the last row's
/// horizontal pairs, then the last column's vertical pairs.
#[derive(Debug, Clone)]
pub struct SmoothingPattern {
    pairs: Vec<[(usize, usize); 2]>,
}

impl SmoothingPattern {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows >= 2 && cols >= 2);
        let mut pairs = Vec::with_capacity(2 * rows * cols - rows - cols);
        for m in 0..rows - 1 {
            for n in 0..cols - 1 {
                pairs.push([(m, n), (m + 1, n)]);
                pairs.push([(m, n), (m, n + 1)]);
            }
        }
        for n in 0..cols - 1 {
            pairs.push([(rows - 1, n), (rows - 1, n + 1)]);
        }
        for m in 0..rows - 1 {
            pairs.push([(m, cols - 1), (m + 1, cols - 1)]);
        }
        debug_assert_eq!(pairs.len(), 2 * rows * cols - rows - cols);
        SmoothingPattern { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[[(usize, usize); 2]] {
        &self.pairs
    }
}

/// Smoothing residual values `D(a) − D(b)` in pattern order.
pub fn smoothing_residuals(map: &DepthMap, pattern: &SmoothingPattern) -> Vec<f64> {
    pattern
        .pairs()
        .iter()
        .map(|[a, b]| map.values[(a.0, a.1)] - map.values[(b.0, b.1)])
        .collect()
}

/// Optional robust loss on the depth residuals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RobustLoss {
    /// Plain least squares.
    #[default]
    None,
    /// Huber loss with the given scale; applied to depth residuals only,
    /// through iteratively-reweighted row weights.
    Huber { scale: f64 },
}

impl RobustLoss {
    fn weight(&self, residual: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Huber { scale } => {
                let a = residual.abs();
                if a <= scale {
                    1.0
                } else {
                    scale / a
                }
            }
        }
    }

    fn rho(&self, residual: f64) -> f64 {
        match *self {
            RobustLoss::None => residual * residual,
            RobustLoss::Huber { scale } => {
                let a = residual.abs();
                if a <= scale {
                    residual * residual
                } else {
                    scale * (2.0 * a - scale)
                }
            }
        }
    }
}

/// Assembly controls.
#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    pub with_jacobian: bool,
    pub loss: RobustLoss,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            with_jacobian: true,
            loss: RobustLoss::None,
        }
    }
}

/// The stacked linearisation: residuals, diagonal weights, and (optionally)
/// the sparse Jacobian with gauge columns removed.
#[derive(Debug, Clone)]
pub struct Assembly {
    /// Stacked `[depth rows; smoothing rows]`.
    pub residuals: DVector<f64>,
    /// Diagonal of W, same length as `residuals`.
    pub weights: DVector<f64>,
    pub jacobian: Option<CsrMatrix<f64>>,
    /// Number of depth rows at the top of the stack.
    pub depth_rows: usize,
    /// Depth residuals dropped because their projection left the grid.
    pub skipped: usize,
    /// Weighted objective value (compensated summation, fixed row order).
    pub cost: f64,
}

impl Assembly {
    /// Unweighted depth / smoothing sums of squares, for decomposition checks.
    pub fn term_sums(&self) -> (f64, f64) {
        let mut depth = KahanSum::default();
        let mut smooth = KahanSum::default();
        for (i, r) in self.residuals.iter().enumerate() {
            if i < self.depth_rows {
                depth.add(r * r);
            } else {
                smooth.add(r * r);
            }
        }
        (depth.value(), smooth.value())
    }
}

#[derive(Default)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

struct DepthRow {
    residual: f64,
    pose_index: usize,
    jac: Option<DepthJacobian>,
}

/// Builds the full stacked residual vector, weight diagonal, and sparse
/// Jacobian for the current state.
///
/// Row order is fixed (frames in order, points in order, then smoothing
/// pairs) and evaluation order cannot affect the result, so assemblies are
/// deterministic under any parallelism.
pub fn assemble(
    state: &ProblemState,
    clouds: &[PointCloud],
    weights: Weights,
    pattern: &SmoothingPattern,
    options: AssembleOptions,
) -> Result<Assembly> {
    assert_eq!(clouds.len(), state.poses.len(), "one cloud per pose");
    let layout = state.layout();
    let map = &state.map;
    let gradients = if options.with_jacobian {
        Some(map.node_gradients())
    } else {
        None
    };

    // Per-frame evaluation in parallel; results are keyed by (frame, point)
    // so the stacked order never depends on scheduling.
    let per_frame: Vec<Vec<Option<DepthRow>>> = state
        .poses
        .par_iter()
        .zip(clouds.par_iter())
        .enumerate()
        .map(|(frame, (pose, cloud))| {
            let derivs = rotation_derivatives(&pose.theta);
            cloud
                .points
                .iter()
                .map(|point| match &gradients {
                    Some(grads) => depth_jacobian(point, pose, &derivs, map, grads).map(
                        |(residual, _, jac)| DepthRow {
                            residual,
                            pose_index: frame,
                            jac: Some(jac),
                        },
                    ),
                    None => depth_residual(point, pose, map).map(|residual| DepthRow {
                        residual,
                        pose_index: frame,
                        jac: None,
                    }),
                })
                .collect()
        })
        .collect();

    let smooth_values = smoothing_residuals(map, pattern);

    let depth_total: usize = per_frame.iter().flatten().filter(|r| r.is_some()).count();
    let skipped: usize = per_frame.iter().map(|f| f.len()).sum::<usize>() - depth_total;
    if depth_total == 0 && !clouds.iter().all(|c| c.points.is_empty()) {
        return Err(Error::NoOverlap);
    }

    let n_rows = depth_total + smooth_values.len();
    let mut residuals = DVector::<f64>::zeros(n_rows);
    let mut weight_diag = DVector::<f64>::zeros(n_rows);
    let mut coo = options
        .with_jacobian
        .then(|| CooMatrix::<f64>::new(n_rows, layout.dim()));
    let mut cost = KahanSum::default();

    let mut row = 0usize;
    for (frame, rows) in per_frame.iter().enumerate() {
        for (index, entry) in rows.iter().enumerate() {
            let Some(entry) = entry else { continue };
            if !entry.residual.is_finite() {
                return Err(Error::NonFiniteResidual {
                    kind: "depth",
                    frame,
                    index,
                });
            }
            residuals[row] = entry.residual;
            let w = weights.depth * options.loss.weight(entry.residual);
            weight_diag[row] = w;
            cost.add(weights.depth * options.loss.rho(entry.residual));
            if let (Some(coo), Some(jac)) = (coo.as_mut(), entry.jac.as_ref()) {
                for k in 0..6 {
                    if let Some(col) = layout.pose_col(entry.pose_index, k) {
                        coo.push(row, col, jac.pose[k]);
                    }
                }
                for &(m, n, v) in &jac.map {
                    coo.push(row, layout.cell_col(m, n), v);
                }
            }
            row += 1;
        }
    }

    for (k, (&value, pair)) in smooth_values.iter().zip(pattern.pairs()).enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteResidual {
                kind: "smoothing",
                frame: 0,
                index: k,
            });
        }
        residuals[row] = value;
        weight_diag[row] = weights.smooth;
        cost.add(weights.smooth * value * value);
        if let Some(coo) = coo.as_mut() {
            coo.push(row, layout.cell_col(pair[0].0, pair[0].1), 1.0);
            coo.push(row, layout.cell_col(pair[1].0, pair[1].1), -1.0);
        }
        row += 1;
    }
    debug_assert_eq!(row, n_rows);

    Ok(Assembly {
        residuals,
        weights: weight_diag,
        jacobian: coo.map(|c| CsrMatrix::from(&c)),
        depth_rows: depth_total,
        skipped,
        cost: cost.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_map::{cloud_from_points, GridGeometry};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn map_from_fn(
        rows: usize,
        cols: usize,
        resolution: f64,
        f: impl Fn(usize, usize) -> f64,
    ) -> DepthMap {
        DepthMap {
            geometry: GridGeometry {
                rows,
                cols,
                resolution,
                origin: Vector2::zeros(),
            },
            values: DMatrix::from_fn(rows, cols, f),
            observed: DMatrix::from_element(rows, cols, true),
            obs_count: DMatrix::from_element(rows, cols, 1),
        }
    }

    #[test]
    fn layout_dimensions_and_bijection() {
        let layout = IndexLayout::new(4, 1, 5, 7);
        assert_eq!(layout.pose_dim(), 18);
        assert_eq!(layout.dim(), 18 + 35);
        assert_eq!(layout.pose_col(1, 0), None);
        // Every column is hit exactly once.
        let mut seen = vec![false; layout.dim()];
        for i in 0..4 {
            for k in 0..6 {
                if let Some(c) = layout.pose_col(i, k) {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
            }
        }
        for m in 0..5 {
            for n in 0..7 {
                let c = layout.cell_col(m, n);
                assert!(!seen[c]);
                seen[c] = true;
                assert_eq!(layout.col_cell(c), Some((m, n)));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn depth_residual_on_consistent_and_offset_maps() {
        let map = map_from_fn(5, 5, 1.0, |_, _| 1.0);
        // Point whose projection is anywhere on the plane z=1 gives zero.
        let r = depth_residual(&Vector3::new(2.3, 1.7, 1.0), &Pose::identity(), &map).unwrap();
        assert_relative_eq!(r, 0.0, epsilon = 1e-15);

        let map2 = map_from_fn(5, 5, 1.0, |_, _| 2.0);
        let r = depth_residual(&Vector3::new(1.5, 2.5, 2.5), &Pose::identity(), &map2).unwrap();
        assert_relative_eq!(r, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn depth_residual_skips_out_of_grid() {
        let map = map_from_fn(3, 3, 1.0, |_, _| 0.0);
        assert!(depth_residual(&Vector3::new(5.0, 0.0, 0.0), &Pose::identity(), &map).is_none());
    }

    #[test]
    fn depth_jacobian_flat_map_translation_entries() {
        let map = map_from_fn(6, 6, 0.5, |_, _| 1.0);
        let derivs = rotation_derivatives(&Vector3::zeros());
        let grads = map.node_gradients();
        let (_, _, jac) = depth_jacobian(
            &Vector3::new(1.1, 1.3, 2.0),
            &Pose::identity(),
            &derivs,
            &map,
            &grads,
        )
        .unwrap();
        assert_relative_eq!(jac.pose[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac.pose[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(jac.pose[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn depth_jacobian_map_block_sums_to_minus_one() {
        let map = map_from_fn(6, 6, 0.5, |m, n| (m as f64 * 0.3).sin() + n as f64 * 0.1);
        let derivs = rotation_derivatives(&Vector3::new(0.1, -0.2, 0.3));
        let grads = map.node_gradients();
        let pose = Pose::new(Vector3::new(0.3, 0.2, 0.1), Vector3::new(0.1, -0.2, 0.3));
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..100 {
            let p = Vector3::new(
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
                rng.random_range(0.5..2.0),
            );
            if let Some((_, _, jac)) = depth_jacobian(&p, &pose, &derivs, &map, &grads) {
                let sum: f64 = jac.map.iter().map(|&(_, _, v)| v).sum();
                assert_relative_eq!(sum, -1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_pattern_counts_and_values() {
        let pattern = SmoothingPattern::new(3, 4);
        assert_eq!(pattern.len(), 2 * 12 - 3 - 4);

        // Brute-force enumeration of all horizontal and vertical pairs.
        let mut expected = 0;
        for m in 0..3 {
            for n in 0..4 {
                if m + 1 < 3 {
                    expected += 1;
                }
                if n + 1 < 4 {
                    expected += 1;
                }
            }
        }
        assert_eq!(pattern.len(), expected);

        let map = map_from_fn(2, 2, 1.0, |m, n| (m * 2 + n) as f64);
        // Values [[0,1],[2,3]]: differences over the 4 pairs.
        let pattern = SmoothingPattern::new(2, 2);
        let mut vals = smoothing_residuals(&map, &pattern);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, vec![-2.0, -2.0, -1.0, -1.0]);

        let flat = map_from_fn(4, 4, 1.0, |_, _| 2.5);
        let pattern = SmoothingPattern::new(4, 4);
        assert!(smoothing_residuals(&flat, &pattern)
            .iter()
            .all(|&v| v == 0.0));
    }

    fn small_problem(
        seed: u64,
        frames: usize,
        rows: usize,
        cols: usize,
    ) -> (ProblemState, Vec<PointCloud>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let map = map_from_fn(rows, cols, 0.5, |m, n| {
            0.8 + 0.05 * (m as f64 * 0.7).sin() + 0.03 * (n as f64 * 0.9).cos()
        });
        let mut poses = Vec::new();
        let mut clouds = Vec::new();
        for i in 0..frames {
            let pose = Pose::new(
                Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
            );
            let points: Vec<Vector3<f64>> = (0..120)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.3..(rows as f64 - 1.3) * 0.5),
                        rng.random_range(0.3..(cols as f64 - 1.3) * 0.5),
                        rng.random_range(0.6..1.0),
                    )
                })
                .collect();
            poses.push(pose);
            clouds.push(cloud_from_points(&format!("f{i}"), points));
        }
        (ProblemState::new(poses, map, 0), clouds)
    }

    #[test]
    fn assemble_zero_smooth_weight_reduces_to_depth_term() {
        let (state, clouds) = small_problem(22, 3, 8, 8);
        let pattern = SmoothingPattern::new(8, 8);
        let full = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.0),
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        let (depth_sum, _) = full.term_sums();
        assert_relative_eq!(full.cost, depth_sum, epsilon = 1e-12);
    }

    #[test]
    fn assemble_cost_matches_independent_scalar_sum() {
        let (state, clouds) = small_problem(23, 3, 8, 8);
        let pattern = SmoothingPattern::new(8, 8);
        let w = Weights::new(0.7, 0.2);
        let asm = assemble(&state, &clouds, w, &pattern, AssembleOptions::default()).unwrap();
        let (depth_sum, smooth_sum) = asm.term_sums();
        assert_relative_eq!(
            asm.cost,
            w.depth * depth_sum + w.smooth * smooth_sum,
            epsilon = 1e-10
        );
        // Recompute straight from the stacked rows.
        let direct: f64 = asm
            .residuals
            .iter()
            .zip(asm.weights.iter())
            .map(|(r, w)| w * r * r)
            .sum();
        assert_relative_eq!(asm.cost, direct, epsilon = 1e-10);
    }

    #[test]
    fn assemble_counts_skipped_points() {
        let map = map_from_fn(4, 4, 1.0, |_, _| 1.0);
        let points = vec![
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(40.0, 1.0, 1.0), // far outside the grid
        ];
        let state = ProblemState::new(vec![Pose::identity(), Pose::identity()], map, 0);
        let clouds = vec![
            cloud_from_points("a", points),
            cloud_from_points("b", vec![Vector3::new(2.0, 2.0, 1.0)]),
        ];
        let pattern = SmoothingPattern::new(4, 4);
        let asm = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        assert_eq!(asm.skipped, 1);
        assert_eq!(asm.depth_rows, 2);
    }

    #[test]
    fn assemble_errors_when_nothing_overlaps() {
        let map = map_from_fn(3, 3, 1.0, |_, _| 0.0);
        let state = ProblemState::new(vec![Pose::identity()], map, 0);
        let clouds = vec![cloud_from_points("a", vec![Vector3::new(99.0, 99.0, 0.0)])];
        let pattern = SmoothingPattern::new(3, 3);
        let err = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        );
        assert!(matches!(err, Err(Error::NoOverlap)));
    }

    #[test]
    fn assemble_row_sparsity_bounds() {
        let (state, clouds) = small_problem(24, 4, 9, 7);
        let pattern = SmoothingPattern::new(9, 7);
        let asm = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        let jac = asm.jacobian.as_ref().unwrap();
        for (row, entries) in jac.row_iter().enumerate() {
            if row < asm.depth_rows {
                assert!(
                    entries.nnz() <= 10,
                    "depth row {row} has {} nnz",
                    entries.nnz()
                );
            } else {
                assert_eq!(entries.nnz(), 2, "smoothing row {row}");
                let vals = entries.values();
                let mut sorted = [vals[0], vals[1]];
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(sorted, [-1.0, 1.0]);
            }
        }
        assert_eq!(jac.ncols(), state.layout().dim());
    }

    #[test]
    fn gauge_fix_is_real_cost_changes_when_fixed_pose_moves() {
        let (state, clouds) = small_problem(25, 3, 8, 8);
        let pattern = SmoothingPattern::new(8, 8);
        let w = Weights::new(1.0, 0.1);
        let base = assemble(&state, &clouds, w, &pattern, AssembleOptions::default())
            .unwrap()
            .cost;
        let mut moved = state.clone();
        moved.poses[moved.fixed_pose_index].t.x += 0.1;
        let cost = assemble(&moved, &clouds, w, &pattern, AssembleOptions::default())
            .unwrap()
            .cost;
        assert!(
            (cost - base).abs() > 1e-6,
            "moving the gauge pose must change the objective"
        );
    }

    fn fd_max_error(state: &ProblemState, clouds: &[PointCloud], w: Weights) -> f64 {
        let pattern = SmoothingPattern::new(state.map.geometry.rows, state.map.geometry.cols);
        let layout = state.layout();
        let asm = assemble(state, clouds, w, &pattern, AssembleOptions::default()).unwrap();
        let jac = asm.jacobian.as_ref().unwrap();
        assert_eq!(asm.skipped, 0, "test scene must stay inside the grid");

        let h = 1e-6;
        let opts = AssembleOptions {
            with_jacobian: false,
            loss: RobustLoss::None,
        };
        let mut max_err = 0.0f64;
        for col in 0..layout.dim() {
            let mut dplus = DVector::zeros(layout.dim());
            dplus[col] = h;
            let mut dminus = DVector::zeros(layout.dim());
            dminus[col] = -h;
            let plus = assemble(&state.apply_step(&dplus), clouds, w, &pattern, opts).unwrap();
            let minus = assemble(&state.apply_step(&dminus), clouds, w, &pattern, opts).unwrap();
            assert_eq!(plus.residuals.len(), asm.residuals.len());
            let fd = (&plus.residuals - &minus.residuals) / (2.0 * h);
            let mut dense_col = DVector::<f64>::zeros(asm.residuals.len());
            for (row, c, val) in jac.triplet_iter() {
                if c == col {
                    dense_col[row] = *val;
                }
            }
            let scale = fd.amax().max(dense_col.amax()).max(1.0);
            let err = (&fd - &dense_col).amax() / scale;
            max_err = max_err.max(err);
        }
        max_err
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences_on_affine_map() {
        // On a map affine in grid coordinates the interpolated node-gradient
        // field equals the exact derivative of the bilinear surface, so the
        // analytic Jacobian must match dense central differences strictly.
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let map = map_from_fn(6, 6, 0.5, |m, n| 0.8 + 0.04 * m as f64 - 0.03 * n as f64);
        let mut poses = Vec::new();
        let mut clouds = Vec::new();
        for i in 0..2 {
            let pose = Pose::new(
                Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                ),
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ),
            );
            // Sample grid positions away from cell edges, then pull them back
            // into the frame so projections stay edge-safe under FD steps.
            let points: Vec<Vector3<f64>> = (0..120)
                .map(|_| {
                    let gm = rng.random_range(1..4) as f64 + rng.random_range(0.1..0.9);
                    let gn = rng.random_range(1..4) as f64 + rng.random_range(0.1..0.9);
                    let world = Vector3::new(gm * 0.5, gn * 0.5, rng.random_range(0.6..1.0));
                    pose.inverse_transform_point(&world)
                })
                .collect();
            poses.push(pose);
            clouds.push(cloud_from_points(&format!("f{i}"), points));
        }
        let state = ProblemState::new(poses, map, 0);
        let max_err = fd_max_error(&state, &clouds, Weights::new(1.0, 0.1));
        assert!(max_err < 1e-5, "max relative FD error {max_err}");
    }

    #[test]
    fn analytic_jacobian_tracks_finite_differences_on_curved_map() {
        // On curved maps the node-gradient interpolation is an O(curvature)
        // approximation of the true bilinear derivative; agreement should be
        // within that approximation scale, not machine precision.
        let (state, clouds) = small_problem(27, 2, 6, 6);
        let max_err = fd_max_error(&state, &clouds, Weights::new(1.0, 0.1));
        // Second differences of the test surface are ~0.025 per cell, scaled
        // by 1/s = 2 in the pose block.
        assert!(max_err < 0.15, "max relative FD error {max_err}");
    }

    #[test]
    fn non_finite_residuals_are_reported_with_location() {
        // A NaN map value poisons both the depth residual interpolating it
        // and its smoothing rows; the depth row is hit first.
        let mut map = map_from_fn(4, 4, 1.0, |_, _| 1.0);
        map.values[(2, 2)] = f64::NAN;
        let state = ProblemState::new(vec![Pose::identity()], map, 0);
        let clouds = vec![cloud_from_points(
            "a",
            vec![Vector3::new(0.2, 0.2, 1.0), Vector3::new(2.3, 2.3, 1.0)],
        )];
        let pattern = SmoothingPattern::new(4, 4);
        match assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        ) {
            Err(Error::NonFiniteResidual { kind, frame, index }) => {
                assert_eq!(kind, "depth");
                assert_eq!(frame, 0);
                assert_eq!(index, 1);
            }
            other => panic!("expected non-finite residual error, got {other:?}"),
        }

        // With no point touching the bad cell, the smoothing row reports it.
        let far_clouds = vec![cloud_from_points("a", vec![Vector3::new(0.2, 0.2, 1.0)])];
        let mut map = map_from_fn(4, 4, 1.0, |_, _| 1.0);
        map.values[(2, 2)] = f64::NAN;
        let state = ProblemState::new(vec![Pose::identity()], map, 0);
        match assemble(
            &state,
            &far_clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        ) {
            Err(Error::NonFiniteResidual { kind, .. }) => assert_eq!(kind, "smoothing"),
            other => panic!("expected non-finite residual error, got {other:?}"),
        }

        // Non-finite input coordinates never form a residual at all: the
        // NaN projection falls outside every bound and is skipped.
        let map = map_from_fn(4, 4, 1.0, |_, _| 1.0);
        let state = ProblemState::new(vec![Pose::identity()], map, 0);
        let clouds = vec![cloud_from_points(
            "a",
            vec![
                Vector3::new(1.0, 1.0, 1.0),
                Vector3::new(2.0, 2.0, f64::NAN),
            ],
        )];
        let asm = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.1),
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        assert_eq!(asm.skipped, 1);
    }

    #[test]
    fn huber_downweights_outliers() {
        let map = map_from_fn(4, 4, 1.0, |_, _| 0.0);
        let state = ProblemState::new(vec![Pose::identity(), Pose::identity()], map, 0);
        let clouds = vec![
            cloud_from_points("a", vec![Vector3::new(1.0, 1.0, 0.01)]),
            cloud_from_points("b", vec![Vector3::new(2.0, 2.0, 5.0)]), // outlier
        ];
        let pattern = SmoothingPattern::new(4, 4);
        let plain = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.0),
            &pattern,
            AssembleOptions::default(),
        )
        .unwrap();
        let robust = assemble(
            &state,
            &clouds,
            Weights::new(1.0, 0.0),
            &pattern,
            AssembleOptions {
                with_jacobian: false,
                loss: RobustLoss::Huber { scale: 0.1 },
            },
        )
        .unwrap();
        assert!(robust.cost < plain.cost);
        assert!(robust.weights[1] < 1.0 && robust.weights[0] == 1.0);
    }
}
