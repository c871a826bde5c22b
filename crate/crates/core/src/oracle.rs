//! Ground truth for the selection pipeline: exhaustive subset search, the
//! closed-form 1-D transport identity, 1-Lipschitz test functions, and
//! seeded synthetic pools.
//!
//! Nothing here depends on the greedy or refinement code.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostRows, Metric};
use crate::error::{Error, Result};
use crate::ot::solve_ot_on_subset;
use crate::pool::{Pool, PoolRole};

/// Largest number of subsets [`brute_force_best`] will enumerate.
pub const BRUTE_FORCE_GUARD: u128 = 100_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub best: Vec<usize>,
    pub best_score: f64,
    /// Every subset (lexicographic order) with its exact score.
    pub table: Vec<(Vec<usize>, f64)>,
}

impl BruteForce {
    /// Fraction of subsets scoring strictly below `score`.
    pub fn percentile_of(&self, score: f64) -> f64 {
        let below = self.table.iter().filter(|(_, s)| *s < score).count();
        below as f64 / self.table.len() as f64
    }

    /// The `q`-quantile of the score table (nearest rank, `q` in `[0, 1]`).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut scores: Vec<f64> = self.table.iter().map(|(_, s)| *s).collect();
        scores.sort_by(f64::total_cmp);
        let rank = ((q * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
        scores[rank - 1]
    }
}

/// Scores every size-`n` subset with an exact transport solve.
pub fn brute_force_best<C: CostRows + ?Sized>(m: &C, n: usize) -> Result<BruteForce> {
    let rows = m.n_rows();
    if n == 0 || n > rows {
        return Err(Error::InvalidInput(format!("budget {n} outside 1..={rows}")));
    }
    let subsets = binomial(rows, n);
    if subsets > BRUTE_FORCE_GUARD {
        return Err(Error::TooLarge {
            subsets,
            guard: BRUTE_FORCE_GUARD,
        });
    }
    let combos: Vec<Vec<usize>> = (0..rows).combinations(n).collect();
    let table: Vec<(Vec<usize>, f64)> = combos
        .into_par_iter()
        .map(|s| {
            let score = solve_ot_on_subset(m, &s)?.objective();
            Ok((s, score))
        })
        .collect::<Result<_>>()?;
    let (best, best_score) = table
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, v)| (s.clone(), *v))
        .expect("at least one subset");
    Ok(BruteForce {
        best,
        best_score,
        table,
    })
}

/// Uniform 1-D transport with `|x - y|` cost between equal-size samples:
/// mean absolute difference of the sorted samples.
pub fn ot_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty samples".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Values of `f(z) = min_a (value_a + d(z, a))` on both pools. `f` is
/// 1-Lipschitz for `metric` by construction.
pub fn lipschitz_probe(
    pool_a: &Pool,
    pool_b: &Pool,
    anchors: &[Vec<f64>],
    anchor_values: &[f64],
    metric: Metric,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("no anchors".into()));
    }
    if anchors.len() != anchor_values.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            actual: anchor_values.len(),
        });
    }
    if let Some(a) = anchors.iter().find(|a| a.len() != pool_a.dim()) {
        return Err(Error::DimensionMismatch {
            expected: pool_a.dim(),
            actual: a.len(),
        });
    }
    let eval = |pool: &Pool| -> Vec<f64> {
        (0..pool.len())
            .map(|i| {
                let z: Vec<f64> = pool.embedding(i).iter().map(|&x| f64::from(x)).collect();
                anchors
                    .iter()
                    .zip(anchor_values)
                    .map(|(a, &c)| c + metric.distance_f64(&z, a))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    Ok((eval(pool_a), eval(pool_b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradModel {
    Constant { value: f64 },
    Uniform,
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Standard deviation of each mixture component.
    pub spread: f64,
    /// Scale of the random cluster centers.
    pub center_scale: f64,
    /// Offset added to every validation center along each axis.
    pub val_shift: f64,
    pub grad_model: GradModel,
    /// When set, gradient norms are multiplied by `1 + distance to center`,
    /// making far-from-center points carry larger norms.
    pub grad_correlated: bool,
    /// Assign labels `cluster % n_classes` when present.
    pub n_classes: Option<usize>,
}

impl SynthSpec {
    pub fn new(seed: u64, n_train: usize, n_val: usize, dim: usize, n_clusters: usize) -> Self {
        Self {
            seed,
            n_train,
            n_val,
            dim,
            n_clusters,
            spread: 0.5,
            center_scale: 3.0,
            val_shift: 0.0,
            grad_model: GradModel::Uniform,
            grad_correlated: false,
            n_classes: None,
        }
    }
}

/// Gaussian-mixture training and validation pools sharing cluster centers.
/// Bit-identical output for the same spec.
pub fn synth_pools(spec: &SynthSpec) -> Result<(Pool, Pool)> {
    if spec.n_train == 0 || spec.n_val == 0 || spec.dim == 0 || spec.n_clusters == 0 {
        return Err(Error::InvalidInput("synthetic pool sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            (0..spec.dim)
                .map(|_| spec.center_scale * unit.sample(&mut rng))
                .collect()
        })
        .collect();

    let draw = |count: usize, shift: f64, rng: &mut ChaCha8Rng| {
        let mut emb = Vec::with_capacity(count * spec.dim);
        let mut dist = Vec::with_capacity(count);
        let mut cluster = Vec::with_capacity(count);
        for _ in 0..count {
            let c = rng.random_range(0..spec.n_clusters);
            let mut d2 = 0.0;
            for &x in &centers[c] {
                let noise = spec.spread * unit.sample(rng);
                d2 += noise * noise;
                emb.push((x + shift + noise) as f32);
            }
            dist.push(d2.sqrt());
            cluster.push(c);
        }
        (emb, dist, cluster)
    };
    let (train_emb, train_dist, train_cluster) = draw(spec.n_train, 0.0, &mut rng);
    let (val_emb, _, val_cluster) = draw(spec.n_val, spec.val_shift, &mut rng);

    let lognormal = match spec.grad_model {
        GradModel::LogNormal { sigma, .. } if sigma.is_nan() || sigma < 0.0 => {
            return Err(Error::InvalidInput(format!("lognormal sigma must be non-negative, got {sigma}")))
        }
        GradModel::LogNormal { mu, sigma } => Some(
            LogNormal::new(mu, sigma).map_err(|e| Error::InvalidInput(format!("lognormal: {e}")))?,
        ),
        _ => None,
    };
    let unit_interval = Uniform::new(0.0, 1.0).expect("valid range");
    let grads: Vec<f32> = train_dist
        .iter()
        .map(|&d| {
            let base = match (spec.grad_model, &lognormal) {
                (GradModel::Constant { value }, _) => value,
                (GradModel::Uniform, _) => unit_interval.sample(&mut rng),
                (GradModel::LogNormal { .. }, Some(ln)) => ln.sample(&mut rng),
                (GradModel::LogNormal { .. }, None) => unreachable!(),
            };
            let g = if spec.grad_correlated { base * (1.0 + d) } else { base };
            g.max(0.0) as f32
        })
        .collect();

    let labels = |clusters: &[usize]| {
        spec.n_classes
            .map(|k| clusters.iter().map(|&c| (c % k.max(1)) as i64).collect::<Vec<_>>())
    };
    let train = Pool::new(
        PoolRole::Training,
        spec.dim,
        train_emb,
        Some(grads),
        labels(&train_cluster),
    )?;
    let val = Pool::new(PoolRole::Validation, spec.dim, val_emb, None, labels(&val_cluster))?;
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{DistanceMatrix, PooCostMatrix};
    use ndarray::array;

    #[test]
    fn binomials() {
        assert_eq!(binomial(12, 3), 220);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(40, 20), 137_846_528_820);
    }

    #[test]
    fn ot_1d_cases() {
        assert_eq!(ot_1d(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(ot_1d(&[0.0], &[7.0]).unwrap(), 7.0);
        assert_eq!(ot_1d(&[0.0, 1.0, 2.0], &[0.0, 2.0, 4.0]).unwrap(), 1.0);
        assert!(ot_1d(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn brute_force_full_set() {
        let m = PooCostMatrix::from_array(array![[1.0, 2.0], [3.0, 0.0]]).unwrap();
        let bf = brute_force_best(&m, 2).unwrap();
        assert_eq!(bf.table.len(), 1);
        assert_eq!(bf.best, vec![0, 1]);
        assert!((bf.best_score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn brute_force_dominant_row() {
        let d = DistanceMatrix::from_array(
            array![[1.0, 1.0, 1.0], [2.0, 3.0, 2.5], [1.5, 1.2, 4.0]],
            Metric::Euclidean,
        )
        .unwrap();
        let m = PooCostMatrix::build(&d, &[5.0, 0.1, 0.2], 0.3).unwrap();
        let bf = brute_force_best(&m, 1).unwrap();
        assert_eq!(bf.best, vec![0]);
    }

    #[test]
    fn brute_force_guard() {
        let m = PooCostMatrix::from_array(ndarray::Array2::zeros((40, 2))).unwrap();
        assert!(matches!(brute_force_best(&m, 20), Err(Error::TooLarge { .. })));
    }

    fn pool(dim: usize, v: Vec<f32>) -> Pool {
        Pool::new(PoolRole::Training, dim, v, None, None).unwrap()
    }

    #[test]
    fn probe_single_anchor_is_distance() {
        let a = pool(2, vec![3.0, 4.0, 0.0, 0.0]);
        let b = pool(2, vec![0.0, 1.0]);
        let (fa, fb) = lipschitz_probe(&a, &b, &[vec![0.0, 0.0]], &[0.0], Metric::Euclidean).unwrap();
        assert_eq!(fa, vec![5.0, 0.0]);
        assert_eq!(fb, vec![1.0]);
        assert!(lipschitz_probe(&a, &b, &[], &[], Metric::Euclidean).is_err());
    }

    #[test]
    fn probe_interpolates_constant_at_anchors() {
        let a = pool(1, vec![0.0, 2.0, 5.0]);
        let anchors: Vec<Vec<f64>> = a.embeddings().iter().map(|&x| vec![f64::from(x)]).collect();
        let (fa, _) = lipschitz_probe(&a, &a, &anchors, &[1.5; 3], Metric::Euclidean).unwrap();
        assert_eq!(fa, vec![1.5; 3]);
    }

    #[test]
    fn synth_deterministic() {
        let spec = SynthSpec::new(7, 30, 10, 4, 3);
        let (a1, b1) = synth_pools(&spec).unwrap();
        let (a2, b2) = synth_pools(&spec).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.len(), 30);
        assert_eq!(b1.len(), 10);
        assert_eq!(a1.role(), PoolRole::Training);
        assert!(a1.grad_norms().iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn synth_degenerate_mixture() {
        let mut spec = SynthSpec::new(1, 5, 5, 3, 1);
        spec.spread = 0.0;
        let (t, v) = synth_pools(&spec).unwrap();
        let d = DistanceMatrix::compute(&t, &v).unwrap();
        assert!(d.entries().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn synth_labels_and_lognormal() {
        let mut spec = SynthSpec::new(3, 20, 8, 2, 4);
        spec.n_classes = Some(2);
        spec.grad_model = GradModel::LogNormal { mu: 0.0, sigma: 1.0 };
        spec.grad_correlated = true;
        let (t, v) = synth_pools(&spec).unwrap();
        assert!(t.labels().unwrap().iter().all(|&l| l == 0 || l == 1));
        assert_eq!(v.labels().unwrap().len(), 8);
        spec.grad_model = GradModel::LogNormal { mu: 0.0, sigma: -1.0 };
        assert!(synth_pools(&spec).is_err());
    }
}
