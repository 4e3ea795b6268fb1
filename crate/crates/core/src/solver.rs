//! Damped Gauss-Newton iteration over the joint sparse system.
//!
//! Each iteration linearises the problem, forms the weighted normal equations
//! `JᵀWJ Δ = −JᵀWF`, and solves them either by sparse Cholesky or by
//! Jacobi-preconditioned conjugate gradients. With Levenberg damping enabled
//! (the default) trial steps that increase the cost are rejected and retried
//! with a larger λ, so the accepted cost sequence is non-increasing; a
//! `pure GN` mode applies every step undamped.
//!
//! For the direct factorisation the state is symmetrically permuted so map
//! cells are eliminated before pose columns: map-map coupling is banded while
//! pose columns are dense against the cells their points touch, and
//! eliminating the small pose block last keeps fill-in near the band.

use crate::depth_map;
use crate::error::{Error, Result};
use crate::io::PointCloud;
use crate::problem::{
    assemble, AssembleOptions, Assembly, ProblemState, RobustLoss, SmoothingPattern, Weights,
};
use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Step damping strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// Undamped Gauss-Newton: every step is applied as solved.
    None,
    /// Levenberg damping: λ shrinks on accepted steps and grows on rejected
    /// ones, which also regularises near-singular normal matrices.
    Levenberg {
        initial: f64,
        increase: f64,
        decrease: f64,
    },
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Levenberg {
            initial: 1e-4,
            increase: 10.0,
            decrease: 0.5,
        }
    }
}

/// Linear system backend for the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LinearSolver {
    /// Sparse Cholesky factorisation (default).
    #[default]
    SparseDirect,
    /// Jacobi-preconditioned conjugate gradients; the fallback for maps too
    /// large to factor comfortably.
    ConjugateGradient {
        max_iterations: usize,
        tolerance: f64,
    },
}

/// Solver controls.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when the step infinity norm (metres and radians mixed) drops
    /// below this.
    pub step_tolerance: f64,
    /// Stop when the relative cost decrease of an accepted step drops below
    /// this.
    pub cost_relative_tolerance: f64,
    pub damping: Damping,
    pub linear_solver: LinearSolver,
    pub loss: RobustLoss,
    /// Re-initialize the map from the current poses every k accepted
    /// iterations (data re-binning); off by default, where the map evolves
    /// purely as a state variable.
    pub reinit_map_every: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            step_tolerance: 1e-6,
            cost_relative_tolerance: 1e-8,
            damping: Damping::default(),
            linear_solver: LinearSolver::default(),
            loss: RobustLoss::None,
            reinit_map_every: None,
        }
    }
}

impl SolverConfig {
    pub fn pure_gauss_newton() -> Self {
        SolverConfig {
            damping: Damping::None,
            ..SolverConfig::default()
        }
    }
}

/// Why the iteration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ConvergedStep,
    ConvergedCost,
    MaxIterations,
    LinearSolverFailure,
}

impl Termination {
    pub fn is_converged(&self) -> bool {
        matches!(
            self,
            Termination::ConvergedStep | Termination::ConvergedCost
        )
    }
}

/// One accepted iterate. Iteration 0 records the initial state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub cost: f64,
    pub step_norm: f64,
    pub skipped: usize,
    pub ms: f64,
}

/// Per-run report: the accepted-iterate trace plus the termination reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

impl SolveReport {
    pub fn initial_cost(&self) -> f64 {
        self.iterations.first().map(|r| r.cost).unwrap_or(f64::NAN)
    }

    pub fn final_cost(&self) -> f64 {
        self.iterations.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }

    /// Accepted iterations, not counting the initial-state record.
    pub fn accepted_iterations(&self) -> usize {
        self.iterations.len().saturating_sub(1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Line-oriented text form, one line per accepted iterate.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.iterations {
            out.push_str(&format!(
                "iter {} cost {:.12e} step {:.6e} skipped {} ms {:.3}\n",
                rec.iter, rec.cost, rec.step_norm, rec.skipped, rec.ms
            ));
        }
        out.push_str(&format!("termination {:?}\n", self.termination));
        out
    }
}

/// Weighted normal equations of one linearisation.
pub struct NormalEquations {
    /// `JᵀWJ`, full symmetric.
    pub matrix: CscMatrix<f64>,
    /// `JᵀWF` (the negated right-hand side of the update equation).
    pub gradient: DVector<f64>,
    /// Number of leading pose columns, used for elimination ordering.
    pub pose_dim: usize,
}

/// Forms `JᵀWJ` and `JᵀWF` from an assembly.
pub fn normal_equations(assembly: &Assembly, pose_dim: usize) -> NormalEquations {
    let jac = assembly
        .jacobian
        .as_ref()
        .expect("assembly must carry a jacobian");
    // Scale rows by W once; JᵀWJ = (J)ᵀ (WJ).
    let mut weighted = jac.clone();
    {
        let (offsets, _, values) = weighted.csr_data_mut();
        for row in 0..offsets.len() - 1 {
            let w = assembly.weights[row];
            for v in &mut values[offsets[row]..offsets[row + 1]] {
                *v *= w;
            }
        }
    }
    let jt = jac.transpose();
    let matrix = CscMatrix::from(&(&jt * &weighted));

    let mut gradient = DVector::<f64>::zeros(jac.ncols());
    for (row, col, val) in jac.triplet_iter() {
        gradient[col] += val * assembly.weights[row] * assembly.residuals[row];
    }
    NormalEquations {
        matrix,
        gradient,
        pose_dim,
    }
}

/// Solves `(JᵀWJ + λI) Δ = −JᵀWF` with the configured backend.
pub fn solve_linear(
    normal: &NormalEquations,
    lambda: f64,
    config: &LinearSolver,
) -> Result<DVector<f64>> {
    match *config {
        LinearSolver::SparseDirect => solve_direct(normal, lambda),
        LinearSolver::ConjugateGradient {
            max_iterations,
            tolerance,
        } => solve_pcg(normal, lambda, max_iterations, tolerance),
    }
}

fn solve_direct(normal: &NormalEquations, lambda: f64) -> Result<DVector<f64>> {
    let dim = normal.matrix.ncols();
    let n_map = dim - normal.pose_dim;
    // Map cells first, pose columns last.
    let perm = |i: usize| {
        if i < normal.pose_dim {
            n_map + i
        } else {
            i - normal.pose_dim
        }
    };

    let mut coo = CooMatrix::new(dim, dim);
    for (r, c, v) in normal.matrix.triplet_iter() {
        coo.push(perm(r), perm(c), *v);
    }
    if lambda > 0.0 {
        for i in 0..dim {
            coo.push(i, i, lambda);
        }
    }
    let permuted = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&permuted).map_err(|e| {
        Error::LinearSolver(format!(
            "Cholesky factorisation failed ({e:?}); the normal matrix is singular or \
             indefinite - enabling Levenberg damping usually fixes this"
        ))
    })?;
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..dim {
        rhs[perm(i)] = -normal.gradient[i];
    }
    let solved = chol.solve(&rhs);
    let mut step = DVector::<f64>::zeros(dim);
    for i in 0..dim {
        step[i] = solved[(perm(i), 0)];
    }
    Ok(step)
}

fn solve_pcg(
    normal: &NormalEquations,
    lambda: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<DVector<f64>> {
    let dim = normal.matrix.ncols();
    let a = CsrMatrix::from(&normal.matrix);
    let matvec = |x: &DVector<f64>, out: &mut DVector<f64>| {
        out.fill(0.0);
        for (r, c, v) in a.triplet_iter() {
            out[r] += v * x[c];
        }
        if lambda > 0.0 {
            out.axpy(lambda, x, 1.0);
        }
    };

    let mut diag = DVector::<f64>::from_element(dim, lambda);
    for (r, c, v) in a.triplet_iter() {
        if r == c {
            diag[r] += v;
        }
    }
    for d in diag.iter_mut() {
        if *d <= 0.0 {
            *d = 1.0;
        }
    }

    let rhs = -&normal.gradient;
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(DVector::zeros(dim));
    }
    let mut x = DVector::<f64>::zeros(dim);
    let mut r = rhs.clone();
    let mut z = r.component_div(&diag);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut ap = DVector::<f64>::zeros(dim);
    for iter in 0..max_iterations {
        if r.norm() <= tolerance * rhs_norm {
            return Ok(x);
        }
        matvec(&p, &mut ap);
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::LinearSolver(format!(
                "PCG hit a non-positive curvature direction at iteration {iter}; \
                 the system is not positive definite - try enabling damping"
            )));
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    if r.norm() <= tolerance * rhs_norm {
        Ok(x)
    } else {
        Err(Error::LinearSolver(format!(
            "PCG did not converge within {max_iterations} iterations \
             (residual {:.3e} of rhs)",
            r.norm() / rhs_norm
        )))
    }
}

/// Runs the damped Gauss-Newton loop to convergence.
///
/// Returns the optimised state and the per-iteration report. The gauge-fixed
/// pose is never modified; angles are renormalised after every accepted step.
pub fn solve(
    state: ProblemState,
    clouds: &[PointCloud],
    weights: Weights,
    config: &SolverConfig,
) -> Result<(ProblemState, SolveReport)> {
    let pattern = SmoothingPattern::new(state.map.geometry.rows, state.map.geometry.cols);
    let full_opts = AssembleOptions {
        with_jacobian: true,
        loss: config.loss,
    };
    let value_opts = AssembleOptions {
        with_jacobian: false,
        loss: config.loss,
    };

    let mut state = state;
    let start = Instant::now();
    let mut assembly = assemble(&state, clouds, weights, &pattern, full_opts)?;
    let mut records = vec![IterationRecord {
        iter: 0,
        cost: assembly.cost,
        step_norm: 0.0,
        skipped: assembly.skipped,
        ms: start.elapsed().as_secs_f64() * 1e3,
    }];

    let mut lambda = match config.damping {
        Damping::None => 0.0,
        Damping::Levenberg { initial, .. } => initial,
    };
    let mut warned_gimbal = false;

    let mut termination = Termination::MaxIterations;
    for iter in 1..=config.max_iterations {
        let iter_start = Instant::now();
        let layout = state.layout();
        let normal = normal_equations(&assembly, layout.pose_dim());

        // Inner damping loop: re-solve with larger λ until a trial step is
        // accepted or steps shrink below the tolerance.
        let accepted = loop {
            let step = match solve_linear(&normal, lambda, &config.linear_solver) {
                Ok(step) => step,
                Err(e) => match config.damping {
                    Damping::None => return Err(e),
                    Damping::Levenberg { increase, .. } => {
                        lambda = (lambda * increase).max(1e-12);
                        if lambda > 1e12 {
                            return Err(e);
                        }
                        continue;
                    }
                },
            };
            let step_norm = step.amax();
            if !step_norm.is_finite() {
                return Err(Error::LinearSolver("non-finite step".to_string()));
            }
            if step_norm < config.step_tolerance {
                break None;
            }

            let candidate = state.apply_step(&step);
            let trial = assemble(&candidate, clouds, weights, &pattern, value_opts)?;
            match config.damping {
                Damping::None => break Some((candidate, step_norm)),
                Damping::Levenberg {
                    increase, decrease, ..
                } => {
                    if trial.cost <= assembly.cost {
                        lambda = (lambda * decrease).max(1e-12);
                        break Some((candidate, step_norm));
                    }
                    lambda *= increase;
                    if lambda > 1e12 {
                        // No downhill step exists at any damping level we
                        // are willing to try; the iterate is stationary.
                        break None;
                    }
                }
            }
        };

        let Some((candidate, step_norm)) = accepted else {
            termination = Termination::ConvergedStep;
            records.push(IterationRecord {
                iter,
                cost: assembly.cost,
                step_norm: 0.0,
                skipped: assembly.skipped,
                ms: iter_start.elapsed().as_secs_f64() * 1e3,
            });
            break;
        };

        let previous_cost = assembly.cost;
        state = candidate;

        if !warned_gimbal {
            if let Some(i) = state.poses.iter().position(|p| p.near_gimbal_lock()) {
                log::warn!(
                    "pose {i} pitch {:.3} rad is near ±π/2: the Euler parameterisation is \
                     close to gimbal lock",
                    state.poses[i].theta.y
                );
                warned_gimbal = true;
            }
        }

        if let Some(every) = config.reinit_map_every {
            if every > 0 && iter % every == 0 {
                let geometry = state.map.geometry.clone();
                let (map, _) = depth_map::initialize(clouds, &state.poses, geometry);
                state.map = map;
            }
        }

        assembly = assemble(&state, clouds, weights, &pattern, full_opts)?;
        records.push(IterationRecord {
            iter,
            cost: assembly.cost,
            step_norm,
            skipped: assembly.skipped,
            ms: iter_start.elapsed().as_secs_f64() * 1e3,
        });

        if step_norm < config.step_tolerance {
            termination = Termination::ConvergedStep;
            break;
        }
        let rel_decrease = (previous_cost - assembly.cost) / previous_cost.max(1e-300);
        if rel_decrease >= 0.0 && rel_decrease < config.cost_relative_tolerance {
            termination = Termination::ConvergedCost;
            break;
        }
    }

    Ok((
        state,
        SolveReport {
            iterations: records,
            termination,
        },
    ))
}
