//! Primal network simplex for the transportation problem.
//!
//! The basis is a spanning tree over `m` row nodes and `n` column nodes with
//! exactly `m + n - 1` arcs (degenerate zero-flow arcs included). Pricing is
//! block search over cells in row-major order; after a run of degenerate
//! pivots it falls back to Bland's rule (first eligible cell, lowest-index
//! leaving arc) until a pivot makes progress, which rules out cycling.
//! All ties break toward the lowest cell index `row * n + col`.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Flows below this are treated as exactly zero.
const FLOW_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug)]
struct Arc {
    row: usize,
    col: usize,
    flow: f64,
}

pub(crate) struct BasicSolution {
    /// `(row, col, flow)` for every tree arc, degenerate ones included.
    pub arcs: Vec<(usize, usize, f64)>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
}

struct Tree<'a> {
    cost: ArrayView2<'a, f64>,
    m: usize,
    n: usize,
    arcs: Vec<Arc>,
    adj: Vec<Vec<usize>>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    depth: Vec<usize>,
    potential: Vec<f64>,
    mark: Vec<u64>,
    stamp: u64,
}

impl<'a> Tree<'a> {
    fn cell(&self, a: &Arc) -> usize {
        a.row * self.n + a.col
    }

    fn col_node(&self, j: usize) -> usize {
        self.m + j
    }

    /// North-west corner rule; produces a spanning tree with `m + n - 1` arcs.
    fn northwest(cost: ArrayView2<'a, f64>, supply: &[f64], demand: &[f64]) -> Self {
        let (m, n) = cost.dim();
        let mut a = supply.to_vec();
        let mut b = demand.to_vec();
        let mut arcs = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]).max(0.0);
            arcs.push(Arc { row: i, col: j, flow: x });
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && a[i] <= b[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        debug_assert_eq!(arcs.len(), m + n - 1);
        let mut adj = vec![Vec::new(); m + n];
        for (k, arc) in arcs.iter().enumerate() {
            adj[arc.row].push(k);
            adj[m + arc.col].push(k);
        }
        let nodes = m + n;
        let mut tree = Tree {
            cost,
            m,
            n,
            arcs,
            adj,
            parent: vec![usize::MAX; nodes],
            parent_arc: vec![usize::MAX; nodes],
            depth: vec![0; nodes],
            potential: vec![0.0; nodes],
            mark: vec![0; nodes],
            stamp: 0,
        };
        tree.relabel();
        tree
    }

    fn other_end(&self, arc: usize, node: usize) -> usize {
        let a = &self.arcs[arc];
        if node == a.row {
            self.m + a.col
        } else {
            a.row
        }
    }

    /// Recomputes parent pointers, depths and node potentials from row 0.
    fn relabel(&mut self) {
        self.parent[0] = usize::MAX;
        self.parent_arc[0] = usize::MAX;
        self.depth[0] = 0;
        self.potential[0] = 0.0;
        self.stamp += 1;
        self.mark[0] = self.stamp;
        self.hang_from(0);
        debug_assert!(self.mark.iter().all(|&s| s == self.stamp), "basis is not spanning");
    }

    /// Re-hangs the subtree containing `x` below `y` through `arc`, after the
    /// arc that used to connect it has been replaced.
    fn rehang(&mut self, x: usize, y: usize, arc: usize) {
        self.stamp += 1;
        self.mark[y] = self.stamp;
        self.mark[x] = self.stamp;
        self.parent[x] = y;
        self.parent_arc[x] = arc;
        self.depth[x] = self.depth[y] + 1;
        let a = self.arcs[arc];
        self.potential[x] = self.cost[[a.row, a.col]] - self.potential[y];
        self.hang_from(x);
    }

    /// Depth-first walk from `start` over nodes not yet stamped, assigning
    /// parents, depths and potentials (`u_row + v_col = c` on every arc).
    fn hang_from(&mut self, start: usize) {
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            for k in 0..self.adj[x].len() {
                let arc = self.adj[x][k];
                let y = self.other_end(arc, x);
                if self.mark[y] == self.stamp {
                    continue;
                }
                self.mark[y] = self.stamp;
                self.parent[y] = x;
                self.parent_arc[y] = arc;
                self.depth[y] = self.depth[x] + 1;
                let a = self.arcs[arc];
                self.potential[y] = self.cost[[a.row, a.col]] - self.potential[x];
                stack.push(y);
            }
        }
    }

    fn reduced_cost(&self, i: usize, j: usize) -> f64 {
        self.cost[[i, j]] - self.potential[i] - self.potential[self.m + j]
    }

    /// Tree path between row `i` and column `j`, each arc tagged with whether
    /// it loses flow when `(i, j)` enters and whether it lies on the row side
    /// of the path (between `i` and the common ancestor).
    fn cycle(&self, i: usize, j: usize) -> Vec<(usize, bool, bool)> {
        let mut a = i;
        let mut b = self.col_node(j);
        let mut from_a = Vec::new();
        let mut from_b = Vec::new();
        while a != b {
            if self.depth[a] >= self.depth[b] {
                from_a.push(self.parent_arc[a]);
                a = self.parent[a];
            } else {
                from_b.push(self.parent_arc[b]);
                b = self.parent[b];
            }
        }
        // odd positions counted from either endpoint lose flow
        let mut out = Vec::with_capacity(from_a.len() + from_b.len());
        out.extend(from_a.iter().enumerate().map(|(k, &arc)| (arc, k % 2 == 0, true)));
        out.extend(from_b.iter().enumerate().map(|(k, &arc)| (arc, k % 2 == 0, false)));
        out
    }

    fn replace_arc(&mut self, leaving: usize, row: usize, col: usize, flow: f64) {
        let old = self.arcs[leaving];
        let (r, c) = (old.row, self.m + old.col);
        for node in [r, c] {
            let pos = self.adj[node]
                .iter()
                .position(|&k| k == leaving)
                .expect("arc present in adjacency");
            self.adj[node].remove(pos);
        }
        self.arcs[leaving] = Arc { row, col, flow };
        self.adj[row].push(leaving);
        let cn = self.m + col;
        self.adj[cn].push(leaving);
    }

    /// Recomputes every tree flow from the marginals by peeling leaves. The
    /// tree determines flows uniquely, so this removes accumulated drift.
    fn recompute_flows(&mut self, supply: &[f64], demand: &[f64]) {
        let nodes = self.m + self.n;
        let mut remaining: Vec<f64> = supply.iter().chain(demand).copied().collect();
        let mut degree: Vec<usize> = self.adj.iter().map(Vec::len).collect();
        let mut done = vec![false; self.arcs.len()];
        let mut queue: std::collections::VecDeque<usize> =
            (0..nodes).filter(|&x| degree[x] == 1).collect();
        while let Some(x) = queue.pop_front() {
            if degree[x] != 1 {
                continue;
            }
            let Some(&arc) = self.adj[x].iter().find(|&&k| !done[k]) else {
                continue;
            };
            let flow = remaining[x];
            done[arc] = true;
            self.arcs[arc].flow = flow;
            let y = self.other_end(arc, x);
            remaining[x] = 0.0;
            remaining[y] -= flow;
            degree[x] -= 1;
            degree[y] -= 1;
            if degree[y] == 1 {
                queue.push_back(y);
            }
        }
        for a in &mut self.arcs {
            if a.flow < 0.0 && a.flow > -1e-12 {
                a.flow = 0.0;
            }
        }
    }
}

/// Solves `min <x, C>` subject to row sums `supply`, column sums `demand`,
/// `x >= 0`. Masses must be strictly positive and sum to the same total.
pub(crate) fn solve(cost: ArrayView2<'_, f64>, supply: &[f64], demand: &[f64]) -> Result<BasicSolution> {
    let (m, n) = cost.dim();
    debug_assert!(m > 0 && n > 0);
    debug_assert_eq!((supply.len(), demand.len()), (m, n));

    let mut tree = Tree::northwest(cost, supply, demand);
    let scale = cost.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let price_eps = 1e-12 * scale;

    let cells = m * n;
    let block = ((cells as f64).sqrt().ceil() as usize).max(32).min(cells);
    let mut next = 0usize;
    let mut degenerate_run = 0usize;
    let bland_after = m + n;
    let max_pivots = 100 * cells + 10_000;
    let mut pivots = 0usize;

    loop {
        let use_bland = degenerate_run > bland_after;
        let entering = if use_bland {
            first_eligible(&tree, price_eps)
        } else {
            block_search(&tree, price_eps, block, &mut next)
        };
        let Some((ei, ej)) = entering else { break };

        let cycle = tree.cycle(ei, ej);
        let mut theta = f64::INFINITY;
        for &(arc, minus, _) in &cycle {
            if minus {
                theta = theta.min(tree.arcs[arc].flow);
            }
        }
        let theta = theta.max(0.0);
        let (leaving, row_side) = cycle
            .iter()
            .filter(|&&(arc, minus, _)| minus && tree.arcs[arc].flow <= theta + FLOW_EPS)
            .map(|&(arc, _, side)| (arc, side))
            .min_by_key(|&(arc, _)| tree.cell(&tree.arcs[arc]))
            .expect("cycle has a losing arc");

        for &(arc, minus, _) in &cycle {
            let a = &mut tree.arcs[arc];
            a.flow += if minus { -theta } else { theta };
            if a.flow.abs() < FLOW_EPS {
                a.flow = 0.0;
            }
        }
        tree.replace_arc(leaving, ei, ej, theta);
        // the leaving arc sat between the entering endpoint on its side and
        // the common ancestor, so that endpoint's subtree is the one cut off
        let (x, y) = if row_side {
            (ei, tree.col_node(ej))
        } else {
            (tree.col_node(ej), ei)
        };
        tree.rehang(x, y, leaving);

        if theta <= FLOW_EPS {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        pivots += 1;
        if pivots > max_pivots {
            return Err(Error::Invariant(format!(
                "transport simplex exceeded {max_pivots} pivots on a {m}x{n} instance"
            )));
        }
    }

    tree.recompute_flows(supply, demand);
    let (u, v) = tree.potential.split_at(m);
    Ok(BasicSolution {
        arcs: tree.arcs.iter().map(|a| (a.row, a.col, a.flow)).collect(),
        u: u.to_vec(),
        v: v.to_vec(),
        pivots,
    })
}

fn first_eligible(tree: &Tree<'_>, eps: f64) -> Option<(usize, usize)> {
    for i in 0..tree.m {
        for j in 0..tree.n {
            if tree.reduced_cost(i, j) < -eps {
                return Some((i, j));
            }
        }
    }
    None
}

/// Scans blocks of cells starting at `next`, returning the most negative
/// reduced cost found in the first block that has any eligible cell.
fn block_search(tree: &Tree<'_>, eps: f64, block: usize, next: &mut usize) -> Option<(usize, usize)> {
    let cells = tree.m * tree.n;
    let mut best: Option<(f64, usize)> = None;
    let mut scanned = 0;
    let mut k = *next;
    while scanned < cells {
        let (i, j) = (k / tree.n, k % tree.n);
        let rc = tree.reduced_cost(i, j);
        if rc < -eps {
            let better = match best {
                None => true,
                Some((b, bk)) => rc < b || (rc == b && k < bk),
            };
            if better {
                best = Some((rc, k));
            }
        }
        scanned += 1;
        k += 1;
        if k == cells {
            k = 0;
        }
        if scanned % block == 0 && best.is_some() {
            break;
        }
    }
    *next = k;
    best.map(|(_, k)| (k / tree.n, k % tree.n))
}
