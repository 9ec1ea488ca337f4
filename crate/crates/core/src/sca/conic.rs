//! A small conic program representation and its clarabel adapter.
//!
//! Every constraint is a block of affine rows `e_i(x) = c_i + a_i^T x`
//! required to lie in a cone. The solver receives `A = -a`, `b = c`, so
//! that its slack `s = b - A x` is exactly `e(x)`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub terms: Vec<(usize, f64)>,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        AffineExpr {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn var(index: usize) -> Self {
        AffineExpr {
            constant: 0.0,
            terms: vec![(index, 1.0)],
        }
    }

    pub fn add_term(&mut self, index: usize, coeff: f64) -> &mut Self {
        if coeff != 0.0 {
            self.terms.push((index, coeff));
        }
        self
    }

    pub fn add_scaled(&mut self, other: &AffineExpr, scale: f64) -> &mut Self {
        self.constant += scale * other.constant;
        for &(i, a) in &other.terms {
            self.add_term(i, scale * a);
        }
        self
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let mut out = AffineExpr::constant(0.0);
        out.add_scaled(self, scale);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    /// Every row equal to zero.
    Zero,
    /// Every row nonnegative.
    Nonneg,
    /// `(t, x)` with `|x| <= t`.
    SecondOrder,
    /// `(x, y, z)` with `y exp(x / y) <= z`, `y > 0`.
    Exponential,
}

/// Which part of the beamforming program a constraint block encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Linearized common-rate constraint of one GU.
    RateCommon,
    /// Linearized private-rate constraint of one GU.
    RatePrivate,
    /// Linearized common-stream SINR constraint.
    SinrCommon,
    /// Linearized private-stream SINR constraint.
    SinrPrivate,
    /// Interference cap of the common stream.
    InterferenceCommon,
    /// Interference cap of the private stream.
    InterferencePrivate,
    /// Common plus private rate above the floor.
    RateFloor,
    /// Nonnegative common split.
    CommonNonneg,
    /// Per-AeBS power budget.
    Power,
    /// Epigraph cones and sign bounds that only support the above.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    pub family: Family,
    /// GU index for per-GU families, AeBS index for `Power`.
    pub owner: usize,
    pub cone: Cone,
    pub rows: Vec<AffineExpr>,
}

impl ConstraintBlock {
    /// Cone violation of the block at `x` (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(|r| r.eval(x)).collect();
        match self.cone {
            Cone::Zero => v.iter().fold(0.0, |m, e| m.max(e.abs())),
            Cone::Nonneg => v.iter().fold(0.0, |m, e| m.max(-e)),
            Cone::SecondOrder => {
                let tail = v[1..].iter().map(|e| e * e).sum::<f64>().sqrt();
                (tail - v[0]).max(0.0)
            }
            Cone::Exponential => {
                let (x, y, z) = (v[0], v[1], v[2]);
                if y <= 0.0 {
                    return (-y).max(0.0) + (x.exp() - z).max(0.0);
                }
                // compare on the log scale so large arguments stay finite
                if z <= 0.0 {
                    return 1.0 - z;
                }
                (x / y - (z / y).ln()).max(0.0)
            }
        }
    }
}

/// A convex program `maximize c^T x` subject to conic blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub num_vars: usize,
    /// Typical magnitude of each variable. The solver works on `x / scale`,
    /// which keeps variables of very different sizes well conditioned.
    pub scale: Vec<f64>,
    /// Coefficients of the maximized linear objective.
    pub objective: Vec<(usize, f64)>,
    pub blocks: Vec<ConstraintBlock>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        ConicProgram {
            num_vars,
            scale: vec![1.0; num_vars],
            objective: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, family: Family, owner: usize, cone: Cone, rows: Vec<AffineExpr>) {
        self.blocks.push(ConstraintBlock {
            family,
            owner,
            cone,
            rows,
        });
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|&(i, c)| c * x[i]).sum()
    }

    /// Largest cone violation over all blocks.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.violation(x)))
    }

    /// Number of constraint blocks excluding auxiliary ones.
    pub fn constraint_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.family != Family::Auxiliary)
            .count()
    }

    pub fn count_of(&self, family: Family) -> usize {
        self.blocks.iter().filter(|b| b.family == family).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub objective: f64,
    pub x: Vec<f64>,
    pub max_violation: f64,
}

/// Solves `program` with the Clarabel interior-point solver.
pub fn solve_conic(program: &ConicProgram, tol: f64) -> Result<ConicSolution> {
    let n = program.num_vars;
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::with_capacity(program.blocks.len());
    for block in &program.blocks {
        for expr in &block.rows {
            let row = b.len();
            for &(j, a) in &expr.terms {
                rows.push(row);
                cols.push(j);
                vals.push(-a * program.scale[j]);
            }
            b.push(expr.constant);
        }
        let dim = block.rows.len();
        cones.push(match block.cone {
            Cone::Zero => SupportedConeT::ZeroConeT(dim),
            Cone::Nonneg => SupportedConeT::NonnegativeConeT(dim),
            Cone::SecondOrder => SupportedConeT::SecondOrderConeT(dim),
            Cone::Exponential => {
                if dim != 3 {
                    return Err(Error::Shape("exponential cone block needs 3 rows".into()));
                }
                SupportedConeT::ExponentialConeT()
            }
        });
    }
    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
    let p = CscMatrix::zeros((n, n));
    let mut q = vec![0.0; n];
    for &(i, c) in &program.objective {
        q[i] -= c * program.scale[i];
    }
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(400)
        .tol_feas(tol)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .build()
        .map_err(|e| Error::SolverFailure(format!("settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|e| Error::SolverFailure(format!("setup: {e:?}")))?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::SubproblemInfeasible)
        }
        other => return Err(Error::SolverFailure(format!("{other:?}"))),
    }
    let x: Vec<f64> = solver
        .solution
        .x
        .iter()
        .zip(&program.scale)
        .map(|(v, s)| v * s)
        .collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverFailure("non-finite solution".into()));
    }
    Ok(ConicSolution {
        objective: program.objective_value(&x),
        max_violation: program.max_violation(&x),
        x,
    })
}
