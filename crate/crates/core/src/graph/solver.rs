//! Levenberg-Marquardt over the non-fixed variables of a [`FactorGraph`].

use std::time::Instant;

use nalgebra::{Matrix6, Vector6};

use super::residual::{self, numeric_jacobian};
use super::skyline::Skyline;
use super::{Factor, FactorGraph, FactorKind, GraphError, VarKind};
use crate::se3::{Pose, Twist};

/// Bounds on the LM scaling diagonal, as in Ceres.
const MIN_DIAGONAL: f64 = 1e-6;
const MAX_DIAGONAL: f64 = 1e32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum JacobianMode {
    #[default]
    Analytic,
    /// Central differences, step [`residual::FD_STEP`].
    Numeric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub jacobians: JacobianMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_init: 1e-4,
            lambda_factor: 10.0,
            lambda_max: 1e10,
            rel_tol: 1e-8,
            grad_tol: 1e-10,
            max_iters: 50,
            jacobians: JacobianMode::Analytic,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// No free variable is constrained by any factor.
    NothingToOptimize,
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// Damping grew past `lambda_max` without an acceptable step.
    LambdaExceeded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    /// Trial steps taken (accepted or rejected).
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub wall_time_ms: f64,
    pub converged: bool,
    /// At least one damped system failed to factor.
    pub singular: bool,
    pub termination: Termination,
    /// Free parameters in the solve.
    pub dimension: usize,
    /// Costs after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Factor endpoints resolved to variable slots and solver blocks.
struct Resolved {
    slots: [usize; 2],
    arity: usize,
    blocks: [Option<usize>; 2],
}

struct Linearization {
    cost: f64,
    hessian: Skyline,
    gradient: Vec<f64>,
}

impl FactorGraph {
    /// Runs LM on the current estimates. Fixed variables are never written.
    pub fn optimize(&mut self, cfg: &SolverConfig) -> Result<OptimizationReport, GraphError> {
        let start = Instant::now();
        let resolved = self.resolve()?;

        // Free variables touched by at least one factor get a 6-wide block;
        // keyframes first so the chain stays banded and landmarks border it.
        let mut active: Vec<usize> = resolved
            .iter()
            .flat_map(|r| r.slots[..r.arity].iter().copied())
            .filter(|&s| !self.variables[s].fixed)
            .collect();
        active.sort_by_key(|&s| {
            let id = self.variables[s].id;
            (id.kind == VarKind::Marker, id.index)
        });
        active.dedup();
        let mut block_of = vec![None; self.variables.len()];
        for (b, &s) in active.iter().enumerate() {
            block_of[s] = Some(b);
        }
        let resolved: Vec<Resolved> = resolved
            .into_iter()
            .map(|mut r| {
                for k in 0..r.arity {
                    r.blocks[k] = block_of[r.slots[k]];
                }
                r
            })
            .collect();

        let mut estimates: Vec<Pose> = self.variables.iter().map(|v| v.estimate).collect();
        let initial_cost = self.cost_of(&resolved, &estimates);
        let mut report = OptimizationReport {
            iterations: 0,
            accepted_steps: 0,
            initial_cost,
            final_cost: initial_cost,
            wall_time_ms: 0.0,
            converged: true,
            singular: false,
            termination: Termination::NothingToOptimize,
            dimension: active.len() * 6,
            cost_history: vec![initial_cost],
        };
        if active.is_empty() {
            report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
            return Ok(report);
        }

        let first_block = profile(&resolved, active.len());
        let mut lin = self.linearize(&resolved, &estimates, &first_block, cfg.jacobians);
        let mut lambda = cfg.lambda_init;
        let mut termination = Termination::MaxIterations;
        let mut converged = false;

        if inf_norm(&lin.gradient) < cfg.grad_tol {
            termination = Termination::GradientTolerance;
            converged = true;
        }
        while !converged && report.iterations < cfg.max_iters {
            report.iterations += 1;
            let diag: Vec<f64> = lin
                .hessian
                .diagonal()
                .into_iter()
                .map(|d| lambda * d.clamp(MIN_DIAGONAL, MAX_DIAGONAL))
                .collect();
            let mut damped = lin.hessian.clone();
            damped.add_diagonal(&diag);
            if damped.factorize().is_err() {
                report.singular = true;
                lambda *= cfg.lambda_factor;
                if lambda > cfg.lambda_max {
                    termination = Termination::LambdaExceeded;
                    break;
                }
                continue;
            }
            let mut step: Vec<f64> = lin.gradient.iter().map(|g| -g).collect();
            damped.solve_in_place(&mut step);

            // model decrease: 0.5 * step^T (lambda D step - g)
            let predicted: f64 = 0.5
                * step
                    .iter()
                    .zip(&diag)
                    .zip(&lin.gradient)
                    .map(|((s, d), g)| s * (d * s - g))
                    .sum::<f64>();

            let mut trial = estimates.clone();
            for (b, &slot) in active.iter().enumerate() {
                let delta = Vector6::from_column_slice(&step[6 * b..6 * b + 6]);
                trial[slot] = estimates[slot].retract(&Twist::from_vector(&delta));
            }
            let trial_cost = self.cost_of(&resolved, &trial);

            if trial_cost < lin.cost {
                let rel = (lin.cost - trial_cost) / lin.cost;
                estimates = trial;
                report.accepted_steps += 1;
                report.cost_history.push(trial_cost);
                lambda = (lambda / cfg.lambda_factor).max(1e-15);
                lin = self.linearize(&resolved, &estimates, &first_block, cfg.jacobians);
                if rel < cfg.rel_tol {
                    termination = Termination::RelativeDecrease;
                    converged = true;
                } else if inf_norm(&lin.gradient) < cfg.grad_tol {
                    termination = Termination::GradientTolerance;
                    converged = true;
                }
            } else {
                if !(predicted > cfg.rel_tol * lin.cost) {
                    // the local model itself promises no meaningful progress
                    termination = Termination::RelativeDecrease;
                    converged = true;
                    break;
                }
                lambda *= cfg.lambda_factor;
                if lambda > cfg.lambda_max {
                    termination = Termination::LambdaExceeded;
                    break;
                }
            }
        }

        for &slot in &active {
            self.variables[slot].estimate = estimates[slot];
        }
        report.final_cost = lin.cost;
        report.converged = converged;
        report.termination = termination;
        report.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }

    fn resolve(&self) -> Result<Vec<Resolved>, GraphError> {
        self.factors
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let lookup = |id| {
                    self.index
                        .get(&id)
                        .copied()
                        .ok_or(GraphError::DanglingEndpoint { factor: i, variable: id })
                };
                let first = lookup(f.from)?;
                let (second, arity) = match f.to {
                    Some(to) => (lookup(to)?, 2),
                    None => (first, 1),
                };
                Ok(Resolved {
                    slots: [first, second],
                    arity,
                    blocks: [None, None],
                })
            })
            .collect()
    }

    /// `0.5 * sum ||S r||^2`; errors on a dangling endpoint.
    pub fn total_cost(&self) -> Result<f64, GraphError> {
        let resolved = self.resolve()?;
        let estimates: Vec<Pose> = self.variables.iter().map(|v| v.estimate).collect();
        Ok(self.cost_of(&resolved, &estimates))
    }

    fn cost_of(&self, resolved: &[Resolved], estimates: &[Pose]) -> f64 {
        self.factors
            .iter()
            .zip(resolved)
            .map(|(f, r)| {
                let res = factor_residual(f, r, estimates);
                0.5 * (f.sqrt_information * res).norm_squared()
            })
            .sum()
    }

    fn linearize(
        &self,
        resolved: &[Resolved],
        estimates: &[Pose],
        first_block: &[usize],
        mode: JacobianMode,
    ) -> Linearization {
        let n = first_block.len();
        let first: Vec<usize> = first_block
            .iter()
            .flat_map(|&b| std::iter::repeat_n(6 * b, 6))
            .collect();
        let mut hessian = Skyline::zeros(first);
        let mut gradient = vec![0.0; 6 * n];
        let mut cost = 0.0;

        for (f, r) in self.factors.iter().zip(resolved) {
            if r.blocks[..r.arity].iter().all(Option::is_none) {
                let res = factor_residual(f, r, estimates);
                cost += 0.5 * (f.sqrt_information * res).norm_squared();
                continue;
            }
            let (res, jacs) = factor_jacobians(f, r, estimates, mode);
            let s = &f.sqrt_information;
            let wr = s * res;
            cost += 0.5 * wr.norm_squared();
            let wj: [Matrix6<f64>; 2] = [s * jacs[0], s * jacs[1]];

            for a in 0..r.arity {
                let Some(ba) = r.blocks[a] else { continue };
                let g = wj[a].transpose() * wr;
                let h = wj[a].transpose() * wj[a];
                for i in 0..6 {
                    gradient[6 * ba + i] += g[i];
                    for j in 0..=i {
                        hessian.add(6 * ba + i, 6 * ba + j, h[(i, j)]);
                    }
                }
            }
            if let (2, Some(b0), Some(b1)) = (r.arity, r.blocks[0], r.blocks[1]) {
                let (hi, lo, jhi, jlo) = if b0 > b1 {
                    (b0, b1, &wj[0], &wj[1])
                } else {
                    (b1, b0, &wj[1], &wj[0])
                };
                let h = jhi.transpose() * jlo;
                for i in 0..6 {
                    for j in 0..6 {
                        hessian.add(6 * hi + i, 6 * lo + j, h[(i, j)]);
                    }
                }
            }
        }
        Linearization {
            cost,
            hessian,
            gradient,
        }
    }
}

fn factor_residual(f: &Factor, r: &Resolved, est: &[Pose]) -> Vector6<f64> {
    let a = &est[r.slots[0]];
    match f.kind {
        FactorKind::PosePrior => residual::prior_residual(a, &f.measurement),
        FactorKind::MarkerObservation | FactorKind::Odometry => {
            residual::relative_residual(a, &est[r.slots[1]], &f.measurement)
        }
    }
}

fn factor_jacobians(
    f: &Factor,
    r: &Resolved,
    est: &[Pose],
    mode: JacobianMode,
) -> (Vector6<f64>, [Matrix6<f64>; 2]) {
    let a = est[r.slots[0]];
    let z = f.measurement;
    match (f.kind, mode) {
        (FactorKind::PosePrior, JacobianMode::Analytic) => {
            let (res, j) = residual::prior_jacobian(&a, &z);
            (res, [j, Matrix6::zeros()])
        }
        (FactorKind::PosePrior, JacobianMode::Numeric) => (
            residual::prior_residual(&a, &z),
            [
                numeric_jacobian(&a, |p| residual::prior_residual(p, &z)),
                Matrix6::zeros(),
            ],
        ),
        (_, JacobianMode::Analytic) => {
            let (res, ja, jb) = residual::relative_jacobians(&a, &est[r.slots[1]], &z);
            (res, [ja, jb])
        }
        (_, JacobianMode::Numeric) => {
            let b = est[r.slots[1]];
            (
                residual::relative_residual(&a, &b, &z),
                [
                    numeric_jacobian(&a, |p| residual::relative_residual(p, &b, &z)),
                    numeric_jacobian(&b, |p| residual::relative_residual(&a, p, &z)),
                ],
            )
        }
    }
}

/// First coupled block per block row of the lower triangle.
fn profile(resolved: &[Resolved], n: usize) -> Vec<usize> {
    let mut first: Vec<usize> = (0..n).collect();
    for r in resolved.iter().filter(|r| r.arity == 2) {
        if let (Some(a), Some(b)) = (r.blocks[0], r.blocks[1]) {
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            first[hi] = first[hi].min(lo);
        }
    }
    first
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
