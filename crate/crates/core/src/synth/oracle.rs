//! Independent reference implementations used to cross-check the production
//! evaluation path.
//!
//! Nothing here calls into `problem`, `depth_map`, or `geometry`: rotation
//! construction, point projection, bilinear interpolation, and the cost sums
//! are all re-derived locally from the raw data fields, so an agreement test
//! between these oracles and the production code checks two genuinely
//! separate code paths.

use crate::io::PointCloud;
use crate::problem::{ProblemState, Weights};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Naive recomputation of the weighted objective: double loop over frames and
/// points for the depth term, literal triple loop for the smoothing term.
pub fn brute_force_cost(state: &ProblemState, clouds: &[PointCloud], weights: Weights) -> f64 {
    let map = &state.map;
    let rows = map.geometry.rows;
    let cols = map.geometry.cols;
    let s = map.geometry.resolution;
    let (ox, oy) = (map.geometry.origin.x, map.geometry.origin.y);

    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    let add = |sum: &mut f64, comp: &mut f64, v: f64| {
        let y = v - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
    };

    for (pose, cloud) in state.poses.iter().zip(clouds) {
        let r = rotation_zyx(pose.theta);
        for p in &cloud.points {
            let g: Vector3<f64> = r * p + pose.t;
            let qx = (g.x - ox) / s;
            let qy = (g.y - oy) / s;
            if !(qx >= 0.0 && qx <= (rows - 1) as f64 && qy >= 0.0 && qy <= (cols - 1) as f64) {
                continue;
            }
            let m = (qx.floor() as usize).min(rows - 2);
            let n = (qy.floor() as usize).min(cols - 2);
            let a = qx - m as f64;
            let b = qy - n as f64;
            let interp = (1.0 - a) * (1.0 - b) * map.values[(m, n)]
                + a * (1.0 - b) * map.values[(m + 1, n)]
                + (1.0 - a) * b * map.values[(m, n + 1)]
                + a * b * map.values[(m + 1, n + 1)];
            let residual = g.z - interp;
            add(&mut sum, &mut comp, weights.depth * residual * residual);
        }
    }

    // Smoothing: interior pairs (both directions), then the last row's
    // horizontal pairs, then the last column's vertical pairs.
    let mut smooth = 0.0f64;
    let mut smooth_comp = 0.0f64;
    for m in 0..rows - 1 {
        for n in 0..cols - 1 {
            let dv = map.values[(m, n)] - map.values[(m + 1, n)];
            let dh = map.values[(m, n)] - map.values[(m, n + 1)];
            add(&mut smooth, &mut smooth_comp, dv * dv + dh * dh);
        }
    }
    for n in 0..cols - 1 {
        let d = map.values[(rows - 1, n)] - map.values[(rows - 1, n + 1)];
        add(&mut smooth, &mut smooth_comp, d * d);
    }
    for m in 0..rows - 1 {
        let d = map.values[(m, cols - 1)] - map.values[(m + 1, cols - 1)];
        add(&mut smooth, &mut smooth_comp, d * d);
    }

    sum + weights.smooth * smooth
}

/// Rotation matrix from `[roll, pitch, yaw]`, written out longhand so this
/// path shares nothing with the production implementation.
fn rotation_zyx(theta: Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = (theta.x.sin(), theta.x.cos());
    let (sp, cp) = (theta.y.sin(), theta.y.cos());
    let (sy, cy) = (theta.z.sin(), theta.z.cos());
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

/// Dense central-difference Jacobian of an arbitrary residual function.
pub fn fd_jacobian(
    mut residuals: impl FnMut(&DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    assert!(h > 0.0, "step size must be positive");
    let n = x0.len();
    let probe = residuals(x0);
    let m = probe.len();
    let mut jac = DMatrix::<f64>::zeros(m, n);
    for col in 0..n {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus[col] += h;
        minus[col] -= h;
        let fp = residuals(&plus);
        let fm = residuals(&minus);
        assert_eq!(fp.len(), m, "residual dimension changed under perturbation");
        assert_eq!(fm.len(), m, "residual dimension changed under perturbation");
        for row in 0..m {
            jac[(row, col)] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }
    jac
}

/// Per-block sup-norm relative errors between the production Jacobian and
/// the finite-difference oracle: `(pose block, depth-map block, smoothing
/// block)`. The smoothing block is compared against its exact +1/−1 pattern,
/// not against finite differences, so a correct implementation reports it as
/// exactly zero.
///
/// With `inject_fault` one pose-block entry is corrupted before comparison;
/// the reported pose-block error must then blow past any sane threshold.
pub fn jacobian_block_errors(
    state: &ProblemState,
    clouds: &[PointCloud],
    weights: Weights,
    inject_fault: bool,
) -> crate::error::Result<(f64, f64, f64)> {
    use crate::problem::{assemble, AssembleOptions, SmoothingPattern};

    let layout = state.layout();
    let pattern = SmoothingPattern::new(state.map.geometry.rows, state.map.geometry.cols);
    let assembly = assemble(state, clouds, weights, &pattern, AssembleOptions::default())?;
    let jac = assembly.jacobian.as_ref().expect("jacobian requested");
    let n_rows = assembly.residuals.len();

    let mut analytic = DMatrix::<f64>::zeros(n_rows, layout.dim());
    for (r, c, v) in jac.triplet_iter() {
        analytic[(r, c)] = *v;
    }
    if inject_fault {
        // Corrupt the first nonzero pose-block entry.
        'outer: for r in 0..assembly.depth_rows {
            for c in 0..layout.pose_dim() {
                if analytic[(r, c)] != 0.0 {
                    analytic[(r, c)] += 1.0;
                    break 'outer;
                }
            }
        }
    }

    let value_opts = AssembleOptions {
        with_jacobian: false,
        ..AssembleOptions::default()
    };
    let x0 = DVector::<f64>::zeros(layout.dim());
    let fd = fd_jacobian(
        |delta| {
            let perturbed = state.apply_step(delta);
            assemble(&perturbed, clouds, weights, &pattern, value_opts)
                .expect("perturbed assembly")
                .residuals
        },
        &x0,
        1e-6,
    );
    assert_eq!(fd.nrows(), n_rows, "skip set changed under FD perturbation");

    let block_err = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| {
        let mut max_diff = 0.0f64;
        let mut max_ref = 0.0f64;
        for r in rows.clone() {
            for c in cols.clone() {
                max_diff = max_diff.max((analytic[(r, c)] - fd[(r, c)]).abs());
                max_ref = max_ref.max(fd[(r, c)].abs());
            }
        }
        max_diff / max_ref.max(1e-12)
    };
    let jp = block_err(0..assembly.depth_rows, 0..layout.pose_dim());
    let jd = block_err(0..assembly.depth_rows, layout.pose_dim()..layout.dim());

    // Smoothing block: exact-pattern comparison.
    let mut js = 0.0f64;
    for (k, [a, b]) in pattern.pairs().iter().enumerate() {
        let row = assembly.depth_rows + k;
        for c in layout.pose_dim()..layout.dim() {
            let expected = if c == layout.cell_col(a.0, a.1) {
                1.0
            } else if c == layout.cell_col(b.0, b.1) {
                -1.0
            } else {
                0.0
            };
            js = js.max((analytic[(row, c)] - expected).abs());
        }
    }
    Ok((jp, jd, js))
}
