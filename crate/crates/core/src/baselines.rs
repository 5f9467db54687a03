//! Feature-space baselines: Mahalanobis distance and mean k-NN distance.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::knn::mean_knn_distances;
use crate::linalg::{pca_eig, Matrix, Pca};

/// Lower bound on covariance eigenvalues.
pub const EIGEN_FLOOR: f64 = 1e-12;

pub const DN2_DEFAULT_K: usize = 30;

fn check_scales(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "model has {expected} scales, input has {got}"
        )));
    }
    Ok(())
}

/// Per-scale PCA of the training features.
#[derive(Clone, Debug, PartialEq)]
pub struct MahaModel {
    pub scales: Vec<Pca>,
}

impl MahaModel {
    pub fn fit(scales: &[&Matrix]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("at least one scale is required"));
        }
        let scales = scales.iter().map(|x| pca_eig(x)).collect::<Result<_>>()?;
        Ok(MahaModel { scales })
    }

    /// Squared Mahalanobis distance of every row at one scale.
    pub fn score_scale(&self, scale: usize, x: &Matrix) -> Result<Vec<f64>> {
        let pca = &self.scales[scale];
        if x.cols() != pca.dim() {
            return Err(Error::invalid(format!(
                "scale {scale} expects {} features, got {}",
                pca.dim(),
                x.cols()
            )));
        }
        let proj = x.sub_row(&pca.mean).matmul(&pca.eigenvectors);
        Ok(proj
            .iter_rows()
            .map(|row| {
                row.iter()
                    .zip(&pca.eigenvalues)
                    .map(|(p, l)| p * p / l.max(EIGEN_FLOOR))
                    .sum()
            })
            .collect())
    }

    /// Sum over scales of the squared Mahalanobis distances.
    pub fn score(&self, scales: &[&Matrix]) -> Result<Vec<f64>> {
        check_scales(self.scales.len(), scales.len())?;
        sum_scales(scales.iter().enumerate().map(|(i, x)| self.score_scale(i, x)))
    }
}

/// Squared Mahalanobis distance of one sample given per scale.
pub fn maha_score(m: &MahaModel, sample: &[&[f64]]) -> Result<f64> {
    let rows: Vec<Matrix> = sample.iter().map(|f| Matrix::row_vector(f)).collect();
    let refs: Vec<&Matrix> = rows.iter().collect();
    Ok(m.score(&refs)?[0])
}

/// Mean distance to the `k` nearest training rows, summed over scales.
#[derive(Clone, Debug)]
pub struct Dn2Model {
    pub scales: Vec<Arc<Matrix>>,
    pub k: usize,
}

impl Dn2Model {
    pub fn new(scales: Vec<Arc<Matrix>>, k: usize) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::invalid("at least one scale is required"));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        for x in &scales {
            if k >= x.rows() {
                return Err(Error::invalid(format!(
                    "k = {k} must be below the training size {}",
                    x.rows()
                )));
            }
        }
        Ok(Dn2Model { scales, k })
    }

    pub fn score(&self, scales: &[&Matrix]) -> Result<Vec<f64>> {
        check_scales(self.scales.len(), scales.len())?;
        sum_scales(
            self.scales
                .iter()
                .zip(scales)
                .map(|(train, x)| mean_knn_distances(train, x, self.k)),
        )
    }
}

pub fn dn2_score(m: &Dn2Model, sample: &[&[f64]]) -> Result<f64> {
    let rows: Vec<Matrix> = sample.iter().map(|f| Matrix::row_vector(f)).collect();
    let refs: Vec<&Matrix> = rows.iter().collect();
    Ok(m.score(&refs)?[0])
}

fn sum_scales(per_scale: impl Iterator<Item = Result<Vec<f64>>>) -> Result<Vec<f64>> {
    let mut total: Option<Vec<f64>> = None;
    for scores in per_scale {
        let scores = scores?;
        match &mut total {
            None => total = Some(scores),
            Some(t) => {
                if t.len() != scores.len() {
                    return Err(Error::invalid("scales have different sample counts"));
                }
                t.iter_mut().zip(scores).for_each(|(t, s)| *t += s);
            }
        }
    }
    total.ok_or_else(|| Error::invalid("at least one scale is required"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{covariance, expm, skew_from_vector, skew_len};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let z = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        z.matmul(&mix).add_row(&vec![3.0; d])
    }

    fn inverse_oracle(train: &Matrix, f: &[f64]) -> f64 {
        let (mean, cov) = covariance(train).unwrap();
        let d = mean.len();
        let inv = DMatrix::from_row_slice(d, d, cov.data()).try_inverse().unwrap();
        let diff = nalgebra::DVector::from_iterator(d, f.iter().zip(&mean).map(|(a, b)| a - b));
        (diff.transpose() * inv * diff)[(0, 0)]
    }

    #[test]
    fn mean_scores_zero() {
        let x = gaussian(100, 3, 1);
        let m = MahaModel::fit(&[&x]).unwrap();
        let mean = m.scales[0].mean.clone();
        assert!(maha_score(&m, &[&mean]).unwrap().abs() < 1e-20);
    }

    #[test]
    fn identity_covariance_gives_squared_euclidean() {
        // ±1 in each coordinate over a full factorial design: mean 0, covariance I·n/(n−1)
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..3).map(|b| if i >> b & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = MahaModel::fit(&[&x]).unwrap();
        let f = [0.5, -1.0, 2.0];
        let want = 5.25 * 7.0 / 8.0;
        assert!((maha_score(&m, &[&f]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn matches_explicit_inverse() {
        for seed in 0..20 {
            let d = 2 + (seed as usize % 6);
            let x = gaussian(200, d, seed);
            let m = MahaModel::fit(&[&x]).unwrap();
            let probe = gaussian(5, d, seed + 100);
            let scores = m.score(&[&probe]).unwrap();
            for (r, s) in scores.iter().enumerate() {
                let want = inverse_oracle(&x, probe.row(r));
                assert!((s - want).abs() <= 1e-8 * want, "seed {seed}: {s} vs {want}");
            }
        }
    }

    #[test]
    fn rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let v: Vec<f64> = (0..skew_len(d)).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = expm(&skew_from_vector(&v, d).unwrap()).unwrap();
        let x = gaussian(150, d, 4);
        let probe = gaussian(10, d, 5);
        let a = MahaModel::fit(&[&x]).unwrap().score(&[&probe]).unwrap();
        let b = MahaModel::fit(&[&x.matmul_nt(&r)]).unwrap().score(&[&probe.matmul_nt(&r)]).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((a - b).abs() < 1e-8 * a.max(1.0));
        }
    }

    #[test]
    fn rank_deficient_covariance_uses_floor() {
        let x = Matrix::from_fn(10, 2, |r, _| r as f64);
        let m = MahaModel::fit(&[&x]).unwrap();
        let on = maha_score(&m, &[&[3.0, 3.0]]).unwrap();
        let off = maha_score(&m, &[&[3.0, 4.0]]).unwrap();
        assert!(on.is_finite() && off.is_finite());
        assert!(off > 1e9);
    }

    #[test]
    fn multi_scale_sums() {
        let (a, b) = (gaussian(50, 2, 1), gaussian(50, 3, 2));
        let m = MahaModel::fit(&[&a, &b]).unwrap();
        let (pa, pb) = (gaussian(4, 2, 3), gaussian(4, 3, 4));
        let sum = m.score(&[&pa, &pb]).unwrap();
        let sa = m.score_scale(0, &pa).unwrap();
        let sb = m.score_scale(1, &pb).unwrap();
        for i in 0..4 {
            assert_eq!(sum[i], sa[i] + sb[i]);
        }
        assert!(m.score(&[&pa]).is_err());
        assert!(m.score(&[&pb, &pa]).is_err());
    }

    #[test]
    fn dn2_hand_cases() {
        let train = Arc::new(Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m1 = Dn2Model::new(vec![train.clone()], 1).unwrap();
        assert_eq!(dn2_score(&m1, &[&[1.0, 0.0]]).unwrap(), 0.0);
        let m2 = Dn2Model::new(vec![train.clone()], 2).unwrap();
        assert_eq!(dn2_score(&m2, &[&[0.0, 0.0]]).unwrap(), 0.5);
    }

    #[test]
    fn dn2_matches_full_sort() {
        let train = gaussian(60, 4, 9);
        let m = Dn2Model::new(vec![Arc::new(train.clone())], 5).unwrap();
        let probe = gaussian(20, 4, 10);
        let got = m.score(&[&probe]).unwrap();
        for (r, g) in got.iter().enumerate() {
            let mut d: Vec<f64> = train
                .iter_rows()
                .map(|t| crate::linalg::euclidean(probe.row(r), t))
                .collect();
            d.sort_by(f64::total_cmp);
            assert_eq!(*g, d[..5].iter().sum::<f64>() / 5.0);
        }
    }

    #[test]
    fn dn2_k_bounds() {
        let train = Arc::new(gaussian(30, 2, 1));
        assert!(matches!(Dn2Model::new(vec![train.clone()], 30), Err(Error::InvalidArgument(_))));
        assert!(matches!(Dn2Model::new(vec![train.clone()], 0), Err(Error::InvalidArgument(_))));
        Dn2Model::new(vec![train], 29).unwrap();
    }
}
