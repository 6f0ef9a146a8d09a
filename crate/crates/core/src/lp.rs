//! Solver-independent linear program model and pluggable backends.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("LP unbounded at stage `{0}`")]
    Unbounded(String),
    #[error("LP infeasible at stage `{0}`")]
    Infeasible(String),
    #[error("LP backend failure: {0}")]
    Backend(String),
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub terms: Vec<(VarId, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// A maximization LP over bounded continuous variables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LpProblem {
    bounds: Vec<(f64, f64)>,
    objective: Vec<(VarId, f64)>,
    constraints: Vec<Constraint>,
}

impl LpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64) -> VarId {
        self.bounds.push((lower, upper));
        VarId(self.bounds.len() - 1)
    }

    pub fn add_constraint(&mut self, terms: Vec<(VarId, f64)>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { terms, sense, rhs });
    }

    /// Replace the objective (always maximized).
    pub fn set_objective(&mut self, terms: Vec<(VarId, f64)>) {
        self.objective = terms;
    }

    pub fn num_vars(&self) -> usize {
        self.bounds.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &[(VarId, f64)] {
        &self.objective
    }

    pub fn evaluate(terms: &[(VarId, f64)], values: &[f64]) -> f64 {
        terms.iter().map(|&(v, c)| c * values[v.0]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { objective: f64, values: Vec<f64> },
    Infeasible,
}

pub trait LpBackend {
    fn name(&self) -> &'static str;
    fn maximize(&self, problem: &LpProblem) -> Result<LpOutcome, SolverError>;
}

/// Pure-Rust dual simplex from the `microlp` crate.
#[derive(Clone, Copy, Debug, Default)]
pub struct MicroLp;

impl LpBackend for MicroLp {
    fn name(&self) -> &'static str {
        "microlp"
    }

    fn maximize(&self, problem: &LpProblem) -> Result<LpOutcome, SolverError> {
        use microlp::{ComparisonOp, Error, OptimizationDirection, Problem};

        let mut coeffs = vec![0.0; problem.num_vars()];
        for &(v, c) in &problem.objective {
            coeffs[v.0] += c;
        }
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let vars: Vec<_> = problem.bounds.iter().zip(&coeffs).map(|(&b, &c)| lp.add_var(c, b)).collect();
        for con in &problem.constraints {
            if con.terms.is_empty() {
                let ok = match con.sense {
                    Sense::Le => 0.0 <= con.rhs,
                    Sense::Ge => 0.0 >= con.rhs,
                    Sense::Eq => con.rhs == 0.0,
                };
                if !ok {
                    return Ok(LpOutcome::Infeasible);
                }
                continue;
            }
            let expr: Vec<_> = con.terms.iter().map(|&(v, c)| (vars[v.0], c)).collect();
            let op = match con.sense {
                Sense::Le => ComparisonOp::Le,
                Sense::Ge => ComparisonOp::Ge,
                Sense::Eq => ComparisonOp::Eq,
            };
            lp.add_constraint(&expr[..], op, con.rhs);
        }
        match lp.solve() {
            Ok(outcome) => {
                let sol = outcome.into_solution().map_err(|e| SolverError::Backend(format!("{e:?}")))?;
                let values: Vec<f64> = vars.iter().map(|&v| sol.var_value_raw(v)).collect();
                Ok(LpOutcome::Optimal { objective: LpProblem::evaluate(&problem.objective, &values), values })
            }
            Err(Error::Infeasible) => Ok(LpOutcome::Infeasible),
            Err(Error::Unbounded) => Err(SolverError::Unbounded(String::new())),
            Err(e) => Err(SolverError::Backend(e.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Microlp,
}

/// Backend choice plus the numerical tolerances used around it. Counts every
/// LP solve it performs.
#[derive(Debug)]
pub struct SolverHandle {
    pub backend: BackendKind,
    /// Tolerance for post-hoc constraint checks.
    pub eps_feas: f64,
    /// Relative slack when fixing an earlier stage's optimum.
    pub eps_lex: f64,
    calls: AtomicU64,
}

impl Default for SolverHandle {
    fn default() -> Self {
        SolverHandle { backend: BackendKind::Microlp, eps_feas: 1e-6, eps_lex: 1e-7, calls: AtomicU64::new(0) }
    }
}

impl Clone for SolverHandle {
    fn clone(&self) -> Self {
        SolverHandle { backend: self.backend, eps_feas: self.eps_feas, eps_lex: self.eps_lex, calls: AtomicU64::new(self.calls()) }
    }
}

impl SolverHandle {
    pub fn new(backend: BackendKind, eps_feas: f64, eps_lex: f64) -> Result<Self, SolverError> {
        if !(eps_feas > 0.0 && eps_lex > 0.0) {
            return Err(SolverError::InvalidInput("tolerances must be positive".into()));
        }
        Ok(SolverHandle { backend, eps_feas, eps_lex, calls: AtomicU64::new(0) })
    }

    /// Slack allowed below a fixed stage value `v`.
    pub fn lex_slack(&self, v: f64) -> f64 {
        self.eps_lex * v.abs().max(1.0)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn maximize(&self, problem: &LpProblem) -> Result<LpOutcome, SolverError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        match self.backend {
            BackendKind::Microlp => MicroLp.maximize(problem),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        let mut lp = LpProblem::new();
        let x = lp.add_var(0.0, f64::INFINITY);
        let y = lp.add_var(0.0, 3.0);
        lp.add_constraint(vec![(x, 1.0), (y, 1.0)], Sense::Le, 4.0);
        lp.add_constraint(vec![(x, 2.0), (y, 1.0)], Sense::Ge, 2.0);
        lp.set_objective(vec![(x, 1.0), (y, 2.0)]);
        let handle = SolverHandle::default();
        match handle.maximize(&lp).unwrap() {
            LpOutcome::Optimal { objective, values } => {
                assert!((objective - 7.0).abs() < 1e-9);
                assert!((values[0] - 1.0).abs() < 1e-9 && (values[1] - 3.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(handle.calls(), 1);
    }

    #[test]
    fn infeasible_is_an_outcome() {
        let mut lp = LpProblem::new();
        let x = lp.add_var(0.0, 1.0);
        lp.add_constraint(vec![(x, 1.0)], Sense::Ge, 2.0);
        assert_eq!(MicroLp.maximize(&lp).unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn empty_row_checked_directly() {
        let mut lp = LpProblem::new();
        lp.add_var(0.0, 1.0);
        lp.add_constraint(vec![], Sense::Ge, 1.0);
        assert_eq!(MicroLp.maximize(&lp).unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn unbounded_is_error() {
        let mut lp = LpProblem::new();
        let x = lp.add_var(0.0, f64::INFINITY);
        lp.set_objective(vec![(x, 1.0)]);
        assert!(matches!(MicroLp.maximize(&lp), Err(SolverError::Unbounded(_))));
    }

    #[test]
    fn tolerances_positive() {
        assert!(SolverHandle::new(BackendKind::Microlp, 0.0, 1e-7).is_err());
        assert!((SolverHandle::default().lex_slack(50.0) - 5e-6).abs() < 1e-18);
    }
}
