//! Greedy initialization on the p-median relaxation.
//!
//! Relaxing the transport constraints so that only column masses are fixed
//! turns `OT_M(mu_S, mu_V)` into `(1/|V|) sum_j min_{i in S} M(i, j)`, a lower
//! bound on the true score. Starting from the empty set, each step adds the
//! candidate with the most negative gain `sum_j min(M(z, j) - colmin_j, 0)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostRows;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetState {
    /// Training indices in insertion order.
    pub selected: Vec<usize>,
    /// `min_{i in S} M(i, j)`; `+inf` while `S` is empty.
    pub col_mins: Vec<f64>,
    pub relaxed_score: f64,
    pub poo_score: Option<f64>,
    /// Gauge-fixed row duals over `sorted(selected)`, when a solve has run.
    pub duals: Option<Vec<f64>>,
}

impl CoresetState {
    pub fn empty(val_size: usize) -> Self {
        Self {
            selected: Vec::new(),
            col_mins: vec![f64::INFINITY; val_size],
            relaxed_score: f64::INFINITY,
            poo_score: None,
            duals: None,
        }
    }

    /// Builds the state for an arbitrary subset, computing column minima from
    /// scratch.
    pub fn from_subset<C: CostRows + ?Sized>(m: &C, subset: &[usize]) -> Result<Self> {
        let mut state = Self::empty(m.n_cols());
        for &i in subset {
            if i >= m.n_rows() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: m.n_rows(),
                });
            }
            if state.contains(i) {
                return Err(Error::InvalidInput(format!("duplicate index {i}")));
            }
            state.add(m, i);
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.selected.contains(&i)
    }

    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut s = self.selected.clone();
        s.sort_unstable();
        s
    }

    fn add<C: CostRows + ?Sized>(&mut self, m: &C, z: usize) {
        let row = m.row(z);
        for (cm, &x) in self.col_mins.iter_mut().zip(row.iter()) {
            if x < *cm {
                *cm = x;
            }
        }
        self.selected.push(z);
        self.relaxed_score = mean(&self.col_mins);
        self.poo_score = None;
        self.duals = None;
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn gain_of_row(row: &[f64], col_mins: &[f64], empty: bool) -> f64 {
    if empty {
        return row.iter().sum();
    }
    row.iter()
        .zip(col_mins)
        .map(|(&x, &c)| (x - c).min(0.0))
        .sum()
}

/// Change in `sum_j min_{i in S} M(i, j)` from adding `z`. With `S` empty the
/// column minima are `+inf` and the gain is the plain row sum.
pub fn gain<C: CostRows + ?Sized>(m: &C, state: &CoresetState, z: usize) -> Result<f64> {
    if z >= m.n_rows() {
        return Err(Error::IndexOutOfRange {
            index: z,
            size: m.n_rows(),
        });
    }
    if state.contains(z) {
        return Err(Error::InvalidInput(format!("candidate {z} is already selected")));
    }
    Ok(gain_of_row(&m.row(z), &state.col_mins, state.is_empty()))
}

/// `(1/|V|) sum_j min_{i in S} M(i, j)`.
pub fn relaxed_score<C: CostRows + ?Sized>(m: &C, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("relaxed score of an empty set".into()));
    }
    let mut mins = vec![f64::INFINITY; m.n_cols()];
    for &i in subset {
        if i >= m.n_rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                size: m.n_rows(),
            });
        }
        for (cm, &x) in mins.iter_mut().zip(m.row(i).iter()) {
            *cm = cm.min(x);
        }
    }
    Ok(mean(&mins))
}

/// One committed greedy step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub picked: usize,
    pub gain: f64,
    pub relaxed_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyResult {
    pub state: CoresetState,
    pub steps: Vec<GreedyStep>,
}

/// Adds `budget` rows one at a time, each minimizing [`gain`] over all
/// remaining candidates (ties to the lowest index).
pub fn greedy_select<C: CostRows + ?Sized>(m: &C, budget: usize) -> Result<GreedyResult> {
    let n_rows = m.n_rows();
    if budget == 0 || budget > n_rows {
        return Err(Error::InvalidInput(format!(
            "budget {budget} outside 1..={n_rows}"
        )));
    }
    let mut state = CoresetState::empty(m.n_cols());
    let mut taken = vec![false; n_rows];
    let mut steps = Vec::with_capacity(budget);
    for _ in 0..budget {
        let empty = state.is_empty();
        let gains: Vec<f64> = (0..n_rows)
            .into_par_iter()
            .map(|z| {
                if taken[z] {
                    f64::INFINITY
                } else {
                    gain_of_row(&m.row(z), &state.col_mins, empty)
                }
            })
            .collect();
        let mut best = None;
        for (z, &g) in gains.iter().enumerate() {
            if taken[z] {
                continue;
            }
            match best {
                Some((_, bg)) if g >= bg => {}
                _ => best = Some((z, g)),
            }
        }
        let (picked, g) = best.expect("budget <= pool size leaves a candidate");
        taken[picked] = true;
        state.add(m, picked);
        steps.push(GreedyStep {
            picked,
            gain: g,
            relaxed_score: state.relaxed_score,
        });
    }
    Ok(GreedyResult { state, steps })
}
