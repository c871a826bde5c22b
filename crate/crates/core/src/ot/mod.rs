//! Exact discrete optimal transport with dual certificates.
//!
//! [`solve_ot`] returns the optimal coupling together with optimal dual
//! potentials `(u, v)`; every returned solution has passed primal
//! feasibility, dual feasibility and strong-duality checks. Rows or columns
//! with zero mass are removed before solving; their potentials are then set by
//! c-transform so that `u_i + v_j <= C_ij` still holds on the full matrix.

mod simplex;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cost::CostRows;
use crate::error::{Error, Result};

/// Marginal sums must be within this of 1 before exact renormalization.
pub const MASS_TOL: f64 = 1e-12;
/// Absolute tolerance for plan feasibility and dual feasibility.
pub const FEAS_TOL: f64 = 1e-9;
/// Relative tolerance for the primal-dual gap.
pub const GAP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    p: Vec<f64>,
    q: Vec<f64>,
}

fn normalized(name: &str, w: Vec<f64>) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InfeasibleMarginals(format!("{name} is empty")));
    }
    if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InfeasibleMarginals(format!(
            "{name} has invalid mass {x}"
        )));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > MASS_TOL {
        return Err(Error::InfeasibleMarginals(format!(
            "{name} sums to {sum}, expected 1"
        )));
    }
    Ok(w.into_iter().map(|x| x / sum).collect())
}

impl Marginals {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        Ok(Self {
            p: normalized("row marginal", p)?,
            q: normalized("column marginal", q)?,
        })
    }

    pub fn uniform(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InfeasibleMarginals("empty support".into()));
        }
        Ok(Self {
            p: vec![1.0 / rows as f64; rows],
            q: vec![1.0 / cols as f64; cols],
        })
    }

    /// Uniform mass on `support` rows, zero elsewhere; uniform over columns.
    pub fn uniform_on_rows(rows: usize, support: &[usize], cols: usize) -> Result<Self> {
        if support.is_empty() || cols == 0 {
            return Err(Error::InfeasibleMarginals("empty support".into()));
        }
        let mut p = vec![0.0; rows];
        let w = 1.0 / support.len() as f64;
        for &i in support {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, size: rows });
            }
            p[i] = w;
        }
        Ok(Self {
            p,
            q: vec![1.0 / cols as f64; cols],
        })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }
}

/// How the one-parameter freedom `(u + c, v - c)` of the duals was fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualGauge {
    /// `sum of u_i over rows with positive mass = 0`.
    ZeroSumOnSupport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub row: usize,
    pub col: usize,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportSolution {
    pub objective: f64,
    /// Positive-mass cells, sorted by `(row, col)`.
    pub plan: Vec<PlanEntry>,
    pub dual_u: Vec<f64>,
    pub dual_v: Vec<f64>,
    pub gauge: DualGauge,
    pub pivots: usize,
}

impl TransportSolution {
    pub fn dual_objective(&self, marg: &Marginals) -> f64 {
        dot(marg.p(), &self.dual_u) + dot(marg.q(), &self.dual_v)
    }

    /// Checks primal feasibility, dual feasibility and strong duality.
    pub fn verify(&self, cost: ArrayView2<'_, f64>, marg: &Marginals) -> Result<()> {
        let (m, n) = cost.dim();
        if self.dual_u.len() != m || self.dual_v.len() != n {
            return Err(Error::Invariant("dual vector lengths do not match cost".into()));
        }
        let mut rows = vec![0.0; m];
        let mut cols = vec![0.0; n];
        let mut primal = 0.0;
        for e in &self.plan {
            if e.mass.is_nan() || e.mass < 0.0 {
                return Err(Error::Invariant(format!("negative plan mass {}", e.mass)));
            }
            rows[e.row] += e.mass;
            cols[e.col] += e.mass;
            primal += e.mass * cost[[e.row, e.col]];
        }
        for (i, (&r, &p)) in rows.iter().zip(marg.p()).enumerate() {
            if (r - p).abs() > FEAS_TOL {
                return Err(Error::Invariant(format!("row {i} ships {r}, marginal {p}")));
            }
        }
        for (j, (&c, &q)) in cols.iter().zip(marg.q()).enumerate() {
            if (c - q).abs() > FEAS_TOL {
                return Err(Error::Invariant(format!("column {j} receives {c}, marginal {q}")));
            }
        }
        for i in 0..m {
            let ui = self.dual_u[i];
            for j in 0..n {
                let slack = cost[[i, j]] - ui - self.dual_v[j];
                if slack < -FEAS_TOL {
                    return Err(Error::Invariant(format!(
                        "dual constraint ({i}, {j}) violated by {}",
                        -slack
                    )));
                }
            }
        }
        let dual = self.dual_objective(marg);
        if (primal - dual).abs() > GAP_TOL * (1.0 + primal.abs()) {
            return Err(Error::Invariant(format!(
                "duality gap: primal {primal}, dual {dual}"
            )));
        }
        if (primal - self.objective).abs() > GAP_TOL * (1.0 + primal.abs()) {
            return Err(Error::Invariant("reported objective does not match plan".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact optimal transport between `marg.p` (rows) and `marg.q` (columns).
/// Costs may be negative.
pub fn solve_ot(cost: ArrayView2<'_, f64>, marg: &Marginals) -> Result<TransportSolution> {
    let sol = solve_unverified(cost, marg, true)?;
    sol.verify(cost, marg)?;
    Ok(sol)
}

fn check_shape(cost: ArrayView2<'_, f64>, marg: &Marginals) -> Result<()> {
    let (m, n) = cost.dim();
    if marg.p().len() != m || marg.q().len() != n {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            actual: marg.p().len() * marg.q().len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
    }
    Ok(())
}

fn solve_unverified(cost: ArrayView2<'_, f64>, marg: &Marginals, presolve: bool) -> Result<TransportSolution> {
    check_shape(cost, marg)?;
    let (m, n) = cost.dim();

    let (rows, cols): (Vec<usize>, Vec<usize>) = if presolve {
        (
            (0..m).filter(|&i| marg.p()[i] > 0.0).collect(),
            (0..n).filter(|&j| marg.q()[j] > 0.0).collect(),
        )
    } else {
        ((0..m).collect(), (0..n).collect())
    };
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::InfeasibleMarginals("empty support".into()));
    }

    let reduced;
    let view = if rows.len() == m && cols.len() == n {
        cost
    } else {
        reduced = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]]);
        reduced.view()
    };
    let supply: Vec<f64> = rows.iter().map(|&i| marg.p()[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| marg.q()[j]).collect();
    let basic = simplex::solve(view, &supply, &demand)?;

    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    for (a, &i) in rows.iter().enumerate() {
        u[i] = basic.u[a];
    }
    for (b, &j) in cols.iter().enumerate() {
        v[j] = basic.v[b];
    }
    // c-transforms keep every constraint satisfied off the support
    for j in 0..n {
        if v[j].is_nan() {
            v[j] = rows
                .iter()
                .map(|&i| cost[[i, j]] - u[i])
                .fold(f64::INFINITY, f64::min);
        }
    }
    for i in 0..m {
        if u[i].is_nan() {
            u[i] = (0..n)
                .map(|j| cost[[i, j]] - v[j])
                .fold(f64::INFINITY, f64::min);
        }
    }

    let support: Vec<usize> = (0..m).filter(|&i| marg.p()[i] > 0.0).collect();
    let shift = support.iter().map(|&i| u[i]).sum::<f64>() / support.len() as f64;
    u.iter_mut().for_each(|x| *x -= shift);
    v.iter_mut().for_each(|x| *x += shift);

    let mut plan: Vec<PlanEntry> = basic
        .arcs
        .iter()
        .filter(|&&(_, _, x)| x > 0.0)
        .map(|&(a, b, mass)| PlanEntry {
            row: rows[a],
            col: cols[b],
            mass,
        })
        .collect();
    plan.sort_by_key(|e| (e.row, e.col));
    let objective = plan.iter().map(|e| e.mass * cost[[e.row, e.col]]).sum();

    Ok(TransportSolution {
        objective,
        plan,
        dual_u: u,
        dual_v: v,
        gauge: DualGauge::ZeroSumOnSupport,
        pivots: basic.pivots,
    })
}

/// Runs the simplex on the full matrix without dropping zero-mass rows or
/// columns. Exposed so tests can check the support reduction against an
/// independent formulation; production callers want [`solve_ot`].
#[doc(hidden)]
pub fn solve_ot_without_presolve(cost: ArrayView2<'_, f64>, marg: &Marginals) -> Result<TransportSolution> {
    let sol = solve_unverified(cost, marg, false)?;
    sol.verify(cost, marg)?;
    Ok(sol)
}

/// OT solution restricted to a subset of training rows. Row indices in
/// `solution` (plan and `dual_u`) are positions within `rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSolution {
    /// The subset, sorted ascending.
    pub rows: Vec<usize>,
    pub solution: TransportSolution,
}

impl SubsetSolution {
    pub fn objective(&self) -> f64 {
        self.solution.objective
    }

    /// Dual potential of a global row index, if it belongs to the subset.
    pub fn dual_of(&self, row: usize) -> Option<f64> {
        self.rows
            .binary_search(&row)
            .ok()
            .map(|k| self.solution.dual_u[k])
    }
}

/// Sorts and validates a subset of `0..size`.
pub(crate) fn canonical_subset(subset: &[usize], size: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("subset is empty".into()));
    }
    let mut rows = subset.to_vec();
    rows.sort_unstable();
    if let Some(&i) = rows.iter().find(|&&i| i >= size) {
        return Err(Error::IndexOutOfRange { index: i, size });
    }
    if rows.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("subset contains duplicate indices".into()));
    }
    Ok(rows)
}

/// `OT_M(mu_S, mu_V)` with uniform masses, solved on the `|S| x |V|`
/// submatrix only. Equivalent to the full problem with zero mass off `S`.
pub fn solve_ot_on_subset<C: CostRows + ?Sized>(m: &C, subset: &[usize]) -> Result<SubsetSolution> {
    let rows = canonical_subset(subset, m.n_rows())?;
    let sub = m.submatrix(&rows);
    let marg = Marginals::uniform(rows.len(), m.n_cols())?;
    let solution = solve_ot(sub.view(), &marg)?;
    Ok(SubsetSolution { rows, solution })
}

/// `OT - |mean_S f - mean_V f|`. Non-negative up to rounding whenever `f`
/// is 1-Lipschitz for the metric the OT value was computed with.
pub fn kr_gap(ot_value: f64, f_subset: &[f64], f_val: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    ot_value - (mean(f_subset) - mean(f_val)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::PooCostMatrix;
    use ndarray::array;

    #[test]
    fn single_atom() {
        let s = solve_ot(array![[0.0]].view(), &Marginals::uniform(1, 1).unwrap()).unwrap();
        assert_eq!(s.objective, 0.0);
        assert_eq!(s.plan, vec![PlanEntry { row: 0, col: 0, mass: 1.0 }]);
    }

    #[test]
    fn zero_cost_matching() {
        let s = solve_ot(array![[0.0, 2.0], [2.0, 0.0]].view(), &Marginals::uniform(2, 2).unwrap()).unwrap();
        assert_eq!(s.objective, 0.0);
        assert_eq!(
            s.plan,
            vec![
                PlanEntry { row: 0, col: 0, mass: 0.5 },
                PlanEntry { row: 1, col: 1, mass: 0.5 }
            ]
        );
    }

    #[test]
    fn one_parameter_family_minimum() {
        // plans [[t, .5-t], [.5-t, t]] cost 2.5 - 3t, minimized at t = .5
        let s = solve_ot(array![[1.0, 3.0], [2.0, 1.0]].view(), &Marginals::uniform(2, 2).unwrap()).unwrap();
        assert!((s.objective - 1.0).abs() < 1e-15);
        assert_eq!(s.plan.len(), 2);
        assert!(s.plan.iter().all(|e| e.row == e.col && (e.mass - 0.5).abs() < 1e-15));
    }

    #[test]
    fn marginal_validation() {
        assert!(Marginals::new(vec![0.5, 0.6], vec![1.0]).is_err());
        assert!(Marginals::new(vec![-0.5, 1.5], vec![1.0]).is_err());
        assert!(Marginals::new(vec![], vec![1.0]).is_err());
        let m = Marginals::new(vec![0.5, 0.5 + 5e-13], vec![1.0]).unwrap();
        assert!((m.p().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gauge_fixed_on_support() {
        let c = array![[1.0, 3.0, 2.0], [2.0, 1.0, 4.0], [0.0, 0.0, 9.0]];
        let marg = Marginals::new(vec![0.5, 0.5, 0.0], vec![0.2, 0.3, 0.5]).unwrap();
        let s = solve_ot(c.view(), &marg).unwrap();
        assert!((s.dual_u[0] + s.dual_u[1]).abs() < 1e-12);
        // zero-mass row still satisfies its dual constraints
        for j in 0..3 {
            assert!(s.dual_u[2] + s.dual_v[j] <= c[[2, j]] + 1e-12);
        }
    }

    #[test]
    fn single_row_subset_is_row_mean() {
        let m = PooCostMatrix::from_array(array![[1.0, 2.0, 6.0], [0.0, -1.0, 3.0]]).unwrap();
        let s = solve_ot_on_subset(&m, &[1]).unwrap();
        assert!((s.objective() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.rows, vec![1]);
    }

    #[test]
    fn subset_errors() {
        let m = PooCostMatrix::from_array(array![[1.0, 2.0], [0.0, -1.0]]).unwrap();
        assert!(solve_ot_on_subset(&m, &[]).is_err());
        assert!(solve_ot_on_subset(&m, &[2]).is_err());
        assert!(solve_ot_on_subset(&m, &[1, 1]).is_err());
    }

    #[test]
    fn kr_gap_constant_function() {
        assert_eq!(kr_gap(0.7, &[3.0, 3.0], &[3.0]), 0.7);
    }
}
