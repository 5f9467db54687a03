//! Exhaustive nearest-neighbour search, the normalized 2-NN score and the
//! combined final score.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};

/// Rows scanned per parallel task.
const CHUNK: usize = 4096;

/// A neighbour: distance and training row index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub dist: f64,
    pub index: usize,
}

fn order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.dist.total_cmp(&b.dist).then(a.index.cmp(&b.index))
}

/// Keeps the `k` best neighbours seen so far, sorted.
fn push(best: &mut Vec<Neighbor>, k: usize, n: Neighbor) {
    if best.len() == k && order(&n, &best[k - 1]) != Ordering::Less {
        return;
    }
    let at = best.partition_point(|b| order(b, &n) == Ordering::Less);
    best.insert(at, n);
    best.truncate(k);
}

fn scan(train: &Matrix, query: &[f64], k: usize, exclude: Option<usize>, start: usize, end: usize) -> Vec<Neighbor> {
    let mut best = Vec::with_capacity(k + 1);
    for index in start..end {
        if Some(index) == exclude {
            continue;
        }
        push(&mut best, k, Neighbor {
            dist: euclidean(query, train.row(index)),
            index,
        });
    }
    best
}

/// The `k` training rows closest to `query`, nearest first; ties go to the
/// lower row index. `exclude` removes one row from the search.
pub fn nearest(train: &Matrix, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Neighbor>> {
    if query.len() != train.cols() {
        return Err(Error::invalid(format!(
            "query has {} features, training set has {}",
            query.len(),
            train.cols()
        )));
    }
    let available = train.rows() - usize::from(exclude.is_some_and(|e| e < train.rows()));
    if k == 0 || k > available {
        return Err(Error::InsufficientData(format!(
            "{k} neighbours requested from {available} candidate rows"
        )));
    }
    let n = train.rows();
    if n <= CHUNK {
        return Ok(scan(train, query, k, exclude, 0, n));
    }
    let partial: Vec<Vec<Neighbor>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| scan(train, query, k, exclude, c * CHUNK, ((c + 1) * CHUNK).min(n)))
        .collect();
    let mut best = Vec::with_capacity(k + 1);
    for n in partial.into_iter().flatten() {
        push(&mut best, k, n);
    }
    Ok(best)
}

/// Mean distance to the `k` nearest training rows.
pub fn mean_knn_distance(train: &Matrix, query: &[f64], k: usize, exclude: Option<usize>) -> Result<f64> {
    let nn = nearest(train, query, k, exclude)?;
    Ok(nn.iter().map(|n| n.dist).sum::<f64>() / k as f64)
}

/// [`mean_knn_distance`] for every row of `queries`, in parallel.
pub fn mean_knn_distances(train: &Matrix, queries: &Matrix, k: usize) -> Result<Vec<f64>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|r| mean_knn_distance(train, queries.row(r), k, None))
        .collect()
}

/// Mean 2-NN distance.
pub fn dist_2nn(train: &Matrix, f: &[f64]) -> Result<f64> {
    mean_knn_distance(train, f, 2, None)
}

/// Mean over training rows of their 2-NN distance with the row itself left
/// out of its own search.
pub fn loo_mean_2nn(train: &Matrix) -> Result<f64> {
    if train.rows() < 3 {
        return Err(Error::InsufficientData(format!(
            "leave-one-out 2-NN needs at least 3 rows, got {}",
            train.rows()
        )));
    }
    let per_row: Vec<f64> = (0..train.rows())
        .into_par_iter()
        .map(|i| mean_knn_distance(train, train.row(i), 2, Some(i)))
        .collect::<Result<_>>()?;
    Ok(per_row.iter().sum::<f64>() / per_row.len() as f64)
}

/// One scale of the 2-NN index.
#[derive(Clone, Debug)]
pub struct KnnScale {
    pub features: Arc<Matrix>,
    pub k_factor: usize,
    pub loo_mean: f64,
}

impl KnnScale {
    pub fn build(features: Arc<Matrix>, k_factor: usize) -> Result<Self> {
        let loo_mean = loo_mean_2nn(&features)?;
        Self::from_parts(features, k_factor, loo_mean)
    }

    pub fn from_parts(features: Arc<Matrix>, k_factor: usize, loo_mean: f64) -> Result<Self> {
        if features.rows() < 2 {
            return Err(Error::InsufficientData("2-NN needs at least 2 training rows".into()));
        }
        if !(loo_mean > 0.0) || !loo_mean.is_finite() {
            return Err(Error::DegenerateData(format!(
                "mean leave-one-out 2-NN distance is {loo_mean}; the training set is duplicate-only"
            )));
        }
        Ok(KnnScale {
            features,
            k_factor,
            loo_mean,
        })
    }

    /// `K · dist_2nn(f) / loo_mean`.
    pub fn score(&self, f: &[f64]) -> Result<f64> {
        Ok(self.k_factor as f64 * dist_2nn(&self.features, f)? / self.loo_mean)
    }

    pub fn score_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        let scale = self.k_factor as f64 / self.loo_mean;
        Ok(mean_knn_distances(&self.features, x, 2)?
            .into_iter()
            .map(|d| scale * d)
            .collect())
    }
}

/// Per-scale 2-NN index.
#[derive(Clone, Debug)]
pub struct KnnIndex {
    pub scales: Vec<KnnScale>,
}

impl KnnIndex {
    /// Sum over scales of the normalized 2-NN scores of one sample.
    pub fn s_2nn(&self, sample: &[&[f64]]) -> Result<f64> {
        if sample.len() != self.scales.len() {
            return Err(Error::invalid(format!(
                "index has {} scales, sample has {}",
                self.scales.len(),
                sample.len()
            )));
        }
        self.scales.iter().zip(sample).map(|(s, f)| s.score(f)).sum()
    }
}

/// Invariant, 2-NN and combined scores of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    pub s_inv: f64,
    pub s_2nn: f64,
    pub s_final: f64,
}

pub fn final_score(s_inv: f64, s_2nn: f64) -> FinalScore {
    FinalScore {
        s_inv,
        s_2nn,
        s_final: s_inv + s_2nn,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(train: &Matrix, q: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = (0..train.rows())
            .filter(|&i| Some(i) != exclude)
            .map(|i| Neighbor {
                dist: euclidean(q, train.row(i)),
                index: i,
            })
            .collect();
        all.sort_by(order);
        all.truncate(k);
        all
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn hand_geometry() {
        let train = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(dist_2nn(&train, &[0.0, 0.0]).unwrap(), 0.5);
        let nn = nearest(&train, &[0.0, 0.0], 2, Some(0)).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(mean_knn_distance(&train, &[0.0, 0.0], 2, Some(0)).unwrap(), 1.0);
    }

    #[test]
    fn triplicated_row_gives_zero() {
        let train = Matrix::from_rows(&[vec![2.0, 3.0], vec![2.0, 3.0], vec![5.0, 5.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(dist_2nn(&train, &[2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let train = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]]).unwrap();
        let nn = nearest(&train, &[0.0], 3, None).unwrap();
        assert_eq!(nn.iter().map(|n| n.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn too_few_rows() {
        let one = Matrix::row_vector(&[1.0, 2.0]);
        assert!(matches!(dist_2nn(&one, &[0.0, 0.0]), Err(Error::InsufficientData(_))));
        let two = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(loo_mean_2nn(&two), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn duplicate_only_training_set_is_degenerate() {
        let dup = Arc::new(Matrix::from_fn(5, 2, |_, _| 1.0));
        assert!(matches!(KnnScale::build(dup, 1), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn matches_full_sort_on_random_sets() {
        for seed in 0..200 {
            let train = random(50, 5, seed);
            let q = random(1, 5, seed + 1000);
            for k in [1, 2, 5] {
                assert_eq!(nearest(&train, q.row(0), k, None).unwrap(), oracle(&train, q.row(0), k, None));
            }
        }
    }

    #[test]
    fn chunked_scan_matches_full_sort() {
        // duplicated rows straddle chunk boundaries
        let base = random(3 * CHUNK / 2, 3, 7);
        let train = Matrix::from_fn(3 * CHUNK, 3, |r, c| base.get(r % base.rows(), c));
        for seed in 0..5 {
            let q = random(1, 3, seed);
            assert_eq!(nearest(&train, q.row(0), 4, None).unwrap(), oracle(&train, q.row(0), 4, None));
            assert_eq!(
                nearest(&train, q.row(0), 4, Some(17)).unwrap(),
                oracle(&train, q.row(0), 4, Some(17))
            );
        }
    }

    #[test]
    fn loo_never_returns_self() {
        let train = random(40, 3, 1);
        for i in 0..40 {
            let nn = nearest(&train, train.row(i), 2, Some(i)).unwrap();
            assert!(nn.iter().all(|n| n.index != i));
            assert!(nn[0].dist > 0.0);
        }
    }

    #[test]
    fn loo_mean_matches_direct_formula() {
        let train = random(60, 4, 2);
        let direct: f64 = (0..60)
            .map(|i| {
                let nn = oracle(&train, train.row(i), 2, Some(i));
                (nn[0].dist + nn[1].dist) / 2.0
            })
            .sum::<f64>()
            / 60.0;
        assert_eq!(loo_mean_2nn(&train).unwrap(), direct);
    }

    #[test]
    fn typical_training_point_scores_near_one() {
        let train = Arc::new(random(500, 2, 3));
        let scale = KnnScale::build(train.clone(), 1).unwrap();
        let loo: Vec<f64> = (0..500)
            .map(|i| mean_knn_distance(&train, train.row(i), 2, Some(i)).unwrap() / scale.loo_mean)
            .collect();
        let mean = loo.iter().sum::<f64>() / 500.0;
        assert!((mean - 1.0).abs() < 1e-12);
        let fresh = random(200, 2, 4);
        let scores = scale.score_rows(&fresh).unwrap();
        let mean = scores.iter().sum::<f64>() / 200.0;
        assert!((0.5..2.0).contains(&mean), "{mean}");
    }

    #[test]
    fn score_uses_k_factor() {
        let train = Arc::new(random(30, 3, 5));
        let q = [0.1, 0.2, 0.3];
        let s1 = KnnScale::build(train.clone(), 1).unwrap();
        let s3 = KnnScale::build(train.clone(), 3).unwrap();
        let want = dist_2nn(&train, &q).unwrap() / s1.loo_mean;
        assert_eq!(s1.score(&q).unwrap(), want);
        assert!((s3.score(&q).unwrap() - 3.0 * want).abs() < 1e-12);
        assert_eq!(s1.score_rows(&Matrix::row_vector(&q)).unwrap()[0], s1.score(&q).unwrap());
    }

    proptest! {
        #[test]
        fn score_is_scale_invariant(c in 0.01f64..100.0, seed in 0u64..1000) {
            let train = random(25, 3, seed);
            let q = random(1, 3, seed + 1);
            let a = KnnScale::build(Arc::new(train.clone()), 2).unwrap().score(q.row(0)).unwrap();
            let b = KnnScale::build(Arc::new(train.scale(c)), 2).unwrap().score(q.scale(c).row(0)).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        }
    }

    #[test]
    fn multi_scale_sum_and_final_score() {
        let a = KnnScale::build(Arc::new(random(20, 2, 1)), 1).unwrap();
        let b = KnnScale::build(Arc::new(random(20, 3, 2)), 2).unwrap();
        let index = KnnIndex {
            scales: vec![a.clone(), b.clone()],
        };
        let (fa, fb) = ([0.1, 0.1], [0.0, 0.5, -0.5]);
        let want = a.score(&fa).unwrap() + b.score(&fb).unwrap();
        assert_eq!(index.s_2nn(&[&fa, &fb]).unwrap(), want);
        assert!(index.s_2nn(&[&fa]).is_err());
        assert_eq!(final_score(2.0, 3.0).s_final, 5.0);
    }
}
