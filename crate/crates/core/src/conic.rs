//! Minimal conic modeling layer.
//!
//! Constraints are affine expressions placed in a cone: `expr == 0`,
//! `expr >= 0`, or `(head, tail...)` in the second-order cone
//! `head >= ||tail||`. Assembly produces the standard form
//! `min 1/2 x'Px + q'x  s.t.  b - Ax in K` consumed by the interior-point
//! backend (Clarabel).

use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};

use crate::error::{Error, Result};

pub type Var = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: Var) -> Self {
        LinExpr {
            terms: vec![(v, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(v: Var, coef: f64) -> Self {
        LinExpr {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: Var, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum::<f64>() + self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, c)| c == 0.0)
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        LinExpr::var(v)
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl AddAssign<&LinExpr> for LinExpr {
    fn add_assign(&mut self, rhs: &LinExpr) {
        self.terms.extend_from_slice(&rhs.terms);
        self.constant += rhs.constant;
    }
}

impl AddAssign for LinExpr {
    fn add_assign(&mut self, rhs: LinExpr) {
        *self += &rhs;
    }
}

impl SubAssign<&LinExpr> for LinExpr {
    fn sub_assign(&mut self, rhs: &LinExpr) {
        self.terms.extend(rhs.terms.iter().map(|&(v, c)| (v, -c)));
        self.constant -= rhs.constant;
    }
}

impl SubAssign for LinExpr {
    fn sub_assign(&mut self, rhs: LinExpr) {
        *self -= &rhs;
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self += &rhs;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self -= &rhs;
        self
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, k: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= k;
        }
        self.constant *= k;
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConicStatus {
    Optimal,
    /// Solved to the reduced accuracy thresholds.
    AlmostOptimal,
    Infeasible,
    Unbounded,
    TimeLimit,
    IterationLimit,
    NumericalError,
}

impl ConicStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, ConicStatus::Optimal | ConicStatus::AlmostOptimal)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConicSettings {
    pub tolerance: f64,
    pub time_limit_s: f64,
    pub max_iter: u32,
}

impl Default for ConicSettings {
    fn default() -> Self {
        ConicSettings {
            tolerance: 1e-9,
            time_limit_s: 120.0,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    names: Vec<String>,
    lower_bounded: Vec<(Var, f64)>,
    pub objective: LinExpr,
    /// Upper-triangular entries of P in `1/2 x'Px`.
    quadratic: Vec<(Var, Var, f64)>,
    zero: Vec<LinExpr>,
    nonneg: Vec<LinExpr>,
    soc: Vec<Vec<LinExpr>>,
}

/// Problem dimensions in standard form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConicDims {
    pub vars: usize,
    pub zero_rows: usize,
    pub nonneg_rows: usize,
    pub soc_sizes: Vec<usize>,
}

impl ConicDims {
    pub fn rows(&self) -> usize {
        self.zero_rows + self.nonneg_rows + self.soc_sizes.iter().sum::<usize>()
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>) -> Var {
        self.names.push(name.into());
        self.names.len() - 1
    }

    /// Variable constrained to `>= lower`.
    pub fn add_var_lb(&mut self, name: impl Into<String>, lower: f64) -> Var {
        let v = self.add_var(name);
        self.lower_bounded.push((v, lower));
        self.nonneg.push(LinExpr::var(v) - LinExpr::constant(lower));
        v
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn var_name(&self, v: Var) -> &str {
        &self.names[v]
    }

    pub fn add_eq(&mut self, expr: LinExpr) {
        self.zero.push(expr);
    }

    /// `expr >= 0`
    pub fn add_nonneg(&mut self, expr: LinExpr) {
        self.nonneg.push(expr);
    }

    /// `lhs <= rhs`
    pub fn add_le(&mut self, lhs: LinExpr, rhs: LinExpr) {
        self.nonneg.push(rhs - lhs);
    }

    /// `head >= ||tail||_2`
    pub fn add_soc(&mut self, head: LinExpr, tail: Vec<LinExpr>) {
        let mut cone = Vec::with_capacity(tail.len() + 1);
        cone.push(head);
        cone.extend(tail);
        self.soc.push(cone);
    }

    /// Adds `1/2 coef x_i x_j` (both triangles) to the objective.
    pub fn add_quadratic(&mut self, i: Var, j: Var, coef: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.quadratic.push((a, b, coef));
    }

    pub fn dims(&self) -> ConicDims {
        ConicDims {
            vars: self.n_vars(),
            zero_rows: self.zero.len(),
            nonneg_rows: self.nonneg.len(),
            soc_sizes: self.soc.iter().map(Vec::len).collect(),
        }
    }

    fn rows(&self) -> impl Iterator<Item = &LinExpr> {
        self.zero
            .iter()
            .chain(&self.nonneg)
            .chain(self.soc.iter().flatten())
    }

    /// Standard-form data `(P, q, A, b, cones)` as sparse triplets.
    #[allow(clippy::type_complexity)]
    fn standard_form(
        &self,
    ) -> (
        Vec<(usize, usize, f64)>,
        Vec<f64>,
        Vec<(usize, usize, f64)>,
        Vec<f64>,
        Vec<SupportedConeT<f64>>,
    ) {
        let n = self.n_vars();
        let mut q = vec![0.0; n];
        for &(v, c) in &self.objective.terms {
            q[v] += c;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (row, expr) in self.rows().enumerate() {
            for &(v, c) in &expr.terms {
                if c != 0.0 {
                    a.push((row, v, -c));
                }
            }
            b.push(expr.constant);
        }
        let mut cones = Vec::new();
        if !self.zero.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.zero.len()));
        }
        if !self.nonneg.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.nonneg.len()));
        }
        for c in &self.soc {
            cones.push(SupportedConeT::SecondOrderConeT(c.len()));
        }
        (self.quadratic.clone(), q, a, b, cones)
    }

    pub fn solve(&self, settings: &ConicSettings) -> Result<ConicSolution> {
        let n = self.n_vars();
        if n == 0 {
            let feasible = self.zero.iter().all(|e| e.constant.abs() < 1e-12)
                && self.nonneg.iter().all(|e| e.constant >= -1e-12)
                && self.soc.iter().all(|c| {
                    c[0].constant + 1e-12 >= c[1..].iter().map(|e| e.constant.powi(2)).sum::<f64>().sqrt()
                });
            return Ok(ConicSolution {
                status: if feasible {
                    ConicStatus::Optimal
                } else {
                    ConicStatus::Infeasible
                },
                x: Vec::new(),
                objective: self.objective.constant,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                gap: 0.0,
            });
        }

        let (p, q, a, b, cones) = self.standard_form();
        let m = b.len();
        let (pi, pj, pv) = split(p);
        let (ai, aj, av) = split(a);
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
        let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);

        let tol = settings.tolerance;
        let clarabel_settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .tol_ktratio(1e-7)
            .time_limit(settings.time_limit_s)
            .max_iter(settings.max_iter)
            .build()
            .map_err(|e| Error::Solver(e.to_string()))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, clarabel_settings)
            .map_err(|e| Error::Solver(e.to_string()))?;
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => ConicStatus::Optimal,
            SolverStatus::AlmostSolved => ConicStatus::AlmostOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                ConicStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                ConicStatus::Unbounded
            }
            SolverStatus::MaxTime => ConicStatus::TimeLimit,
            SolverStatus::MaxIterations => ConicStatus::IterationLimit,
            _ => ConicStatus::NumericalError,
        };
        let info = &solver.info;
        Ok(ConicSolution {
            status,
            objective: solver.solution.obj_val + self.objective.constant,
            x: solver.solution.x.clone(),
            iterations: info.iterations,
            primal_residual: info.res_primal,
            dual_residual: info.res_dual,
            gap: info.gap_rel,
        })
    }

    /// Largest constraint violation of `x` across all cones.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.zero {
            worst = worst.max(e.eval(x).abs());
        }
        for e in &self.nonneg {
            worst = worst.max(-e.eval(x));
        }
        for c in &self.soc {
            let head = c[0].eval(x);
            let tail = c[1..].iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(tail - head);
        }
        worst
    }

    /// Objective value at `x`, including the quadratic part.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let quad: f64 = self
            .quadratic
            .iter()
            .map(|&(i, j, c)| if i == j { 0.5 * c * x[i] * x[i] } else { c * x[i] * x[j] })
            .sum();
        self.objective.eval(x) + quad
    }

    /// Solver-independent text dump: dimensions, cone list, and sparse
    /// triplets of `q`, `A`, `b` and `P`.
    pub fn to_text(&self) -> String {
        let (p, q, a, b, _) = self.standard_form();
        let dims = self.dims();
        let mut out = String::new();
        let _ = writeln!(out, "# format_version=1");
        let _ = writeln!(out, "vars {} rows {}", dims.vars, dims.rows());
        let _ = writeln!(out, "cone zero {}", dims.zero_rows);
        let _ = writeln!(out, "cone nonneg {}", dims.nonneg_rows);
        for s in &dims.soc_sizes {
            let _ = writeln!(out, "cone soc {s}");
        }
        let _ = writeln!(out, "objective_constant {:e}", self.objective.constant);
        for (v, c) in q.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            let _ = writeln!(out, "q {v} {c:e}");
        }
        for (i, j, c) in &p {
            let _ = writeln!(out, "P {i} {j} {c:e}");
        }
        for (i, j, c) in &a {
            let _ = writeln!(out, "A {i} {j} {c:e}");
        }
        for (i, c) in b.iter().enumerate().filter(|(_, c)| **c != 0.0) {
            let _ = writeln!(out, "b {i} {c:e}");
        }
        out
    }
}

fn split(triplets: Vec<(usize, usize, f64)>) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut i = Vec::with_capacity(triplets.len());
    let mut j = Vec::with_capacity(triplets.len());
    let mut v = Vec::with_capacity(triplets.len());
    for (a, b, c) in triplets {
        i.push(a);
        j.push(b);
        v.push(c);
    }
    (i, j, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_socp() {
        // min x + y  s.t.  x >= ||(y - 1, 1)||, y >= 0  ->  optimum at y = 1, x = 1
        let mut prog = ConicProgram::new();
        let x = prog.add_var("x");
        let y = prog.add_var_lb("y", 0.0);
        prog.objective = LinExpr::var(x) + LinExpr::var(y);
        prog.add_soc(LinExpr::var(x), vec![LinExpr::var(y) - 1.0.into(), 1.0.into()]);
        let sol = prog.solve(&ConicSettings::default()).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        // x = sqrt((y-1)^2 + 1), minimized with y + x: y = 1 - 1/sqrt(...)... check objective
        let brute = (0..=20000)
            .map(|k| {
                let y = k as f64 * 1e-4;
                ((y - 1.0).powi(2) + 1.0).sqrt() + y
            })
            .fold(f64::INFINITY, f64::min);
        assert!((sol.objective - brute).abs() < 1e-6, "{} vs {brute}", sol.objective);
        assert!(prog.max_violation(&sol.x) < 1e-7);
    }

    #[test]
    fn infeasible_and_empty() {
        let mut prog = ConicProgram::new();
        let x = prog.add_var_lb("x", 1.0);
        prog.add_le(LinExpr::var(x), 0.5.into());
        prog.objective = LinExpr::var(x);
        let sol = prog.solve(&ConicSettings::default()).unwrap();
        assert_eq!(sol.status, ConicStatus::Infeasible);

        let mut empty = ConicProgram::new();
        empty.objective = LinExpr::constant(0.0);
        let sol = empty.solve(&ConicSettings::default()).unwrap();
        assert_eq!(sol.status, ConicStatus::Optimal);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn quadratic_objective() {
        // min 1/2 (x - 2)^2 with x <= 1 -> x = 1
        let mut prog = ConicProgram::new();
        let x = prog.add_var("x");
        prog.add_quadratic(x, x, 1.0);
        prog.objective = LinExpr::term(x, -2.0) + LinExpr::constant(2.0);
        prog.add_le(LinExpr::var(x), 1.0.into());
        let sol = prog.solve(&ConicSettings::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!((sol.objective - 0.5).abs() < 1e-7);
        assert!((prog.objective_at(&sol.x) - sol.objective).abs() < 1e-9);
    }

    #[test]
    fn text_dump_lists_cones() {
        let mut prog = ConicProgram::new();
        let x = prog.add_var_lb("x", 0.0);
        prog.add_soc(LinExpr::constant(1.0), vec![LinExpr::var(x)]);
        let text = prog.to_text();
        assert!(text.contains("vars 1 rows 3"));
        assert!(text.contains("cone soc 2"));
    }
}
