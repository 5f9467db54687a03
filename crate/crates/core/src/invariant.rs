//! Learning invariants for one feature scale and scoring with them.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::linalg::{pca_eig, Matrix};
use crate::optim::Adam;
use crate::vpn::{self, default_hidden, LossTerms, VpnModel, DEFAULT_BLOCKS};

/// Lower bound on every training error `e_k`.
pub const ERROR_FLOOR: f64 = 1e-12;

/// Training hyperparameters for one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub p_percent: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Add the reconstruction term to the forward term.
    pub backward_loss: bool,
    /// Replace the network by the PCA affine solution.
    pub linear: bool,
    pub blocks: usize,
    /// MLP width; `None` means [`vpn::default_hidden`].
    pub hidden: Option<usize>,
    /// Fixed invariant count instead of the variance rule.
    pub k: Option<usize>,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        ScaleConfig {
            p_percent: 5.0,
            epochs: 25,
            batch_size: 64,
            lr_start: 1e-3,
            lr_end: 1e-4,
            seed: 0,
            backward_loss: true,
            linear: false,
            blocks: DEFAULT_BLOCKS,
            hidden: None,
            k: None,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_percent > 0.0 && self.p_percent < 100.0) {
            return Err(Error::invalid(format!(
                "p must lie in (0, 100), got {}",
                self.p_percent
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for (name, lr) in [("lr", self.lr_start), ("lr-end", self.lr_end)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.hidden == Some(0) {
            return Err(Error::invalid("hidden width must be at least 1"));
        }
        if self.k == Some(0) {
            return Err(Error::invalid("invariant count must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * t
    }
}

/// Number of invariants: the largest count of smallest-variance principal
/// components that together explain less than `p_percent` of the variance,
/// but at least one.
pub fn select_k(eigenvalues: &[f64], p_percent: f64) -> Result<usize> {
    if !(p_percent > 0.0 && p_percent < 100.0) {
        return Err(Error::invalid(format!("p must lie in (0, 100), got {p_percent}")));
    }
    if eigenvalues.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(Error::invalid("eigenvalues must be finite and non-negative"));
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateData(
            "all principal components have zero variance".into(),
        ));
    }
    let threshold = p_percent / 100.0;
    let mut cumulative = 0.0;
    let mut k = 0;
    for (i, &lambda) in eigenvalues.iter().rev().enumerate() {
        cumulative += lambda;
        if cumulative / total < threshold {
            k = i + 1;
        } else {
            break;
        }
    }
    Ok(k.clamp(1, eigenvalues.len().saturating_sub(1).max(1)))
}

/// The map whose first `K` outputs are the invariants.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleModel {
    Vpn(VpnModel),
    /// `g_k(f) = w_kᵀ(f − μ)` with `w_k` the rows of `directions`.
    Affine { mean: Vec<f64>, directions: Matrix },
}

impl ScaleModel {
    pub fn dim(&self) -> usize {
        match self {
            ScaleModel::Vpn(m) => m.dim(),
            ScaleModel::Affine { mean, .. } => mean.len(),
        }
    }

    /// First `k` invariant outputs for every row of `x`.
    pub fn invariants(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        match self {
            ScaleModel::Vpn(m) => Ok(m.forward(x)?.slice_cols(0, k)),
            ScaleModel::Affine { mean, directions } => {
                if x.cols() != mean.len() {
                    return Err(Error::invalid(format!(
                        "input has {} columns, model dimension is {}",
                        x.cols(),
                        mean.len()
                    )));
                }
                Ok(x.sub_row(mean).matmul_nt(&directions.slice_rows(0, k)))
            }
        }
    }
}

/// Loss of one epoch, averaged over samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// A trained scale: model, invariant count, training errors and the
/// (possibly standardized) training features.
#[derive(Clone, Debug)]
pub struct TrainedScale {
    pub model: ScaleModel,
    pub k: usize,
    pub errors: Vec<f64>,
    pub features: Arc<Matrix>,
    pub standardizer: Option<Standardizer>,
    pub history: Vec<EpochLoss>,
}

impl TrainedScale {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Applies this scale's standardization to raw features.
    pub fn prepare(&self, raw: &Matrix) -> Result<Matrix> {
        self.check_dim(raw.cols())?;
        match &self.standardizer {
            Some(s) => s.apply(raw),
            None => Ok(raw.clone()),
        }
    }

    /// Invariant score of every row of already-prepared features.
    pub fn score_prepared(&self, x: &Matrix) -> Result<Vec<f64>> {
        let g = self.model.invariants(x, self.k)?;
        Ok(g.iter_rows()
            .map(|row| row.iter().zip(&self.errors).map(|(g, e)| g * g / e).sum())
            .collect())
    }

    /// Invariant score of every row of raw features.
    pub fn score(&self, raw: &Matrix) -> Result<Vec<f64>> {
        self.score_prepared(&self.prepare(raw)?)
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::invalid(format!(
                "scale expects {} features, got {cols}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `Σ_k g_k(f)² / e_k` for a single raw feature vector.
pub fn invariant_score_scale(ts: &TrainedScale, f: &[f64]) -> Result<f64> {
    ts.check_dim(f.len())?;
    Ok(ts.score(&Matrix::row_vector(f))?[0])
}

/// Sum of the per-scale scores of one sample given as one vector per scale.
pub fn invariant_score(scales: &[TrainedScale], sample: &[&[f64]]) -> Result<f64> {
    if sample.len() != scales.len() {
        return Err(Error::invalid(format!(
            "detector has {} scales, sample has {}",
            scales.len(),
            sample.len()
        )));
    }
    scales
        .iter()
        .zip(sample)
        .map(|(ts, f)| invariant_score_scale(ts, f))
        .sum()
}

/// `e_k = max((1/N) Σ_i g_k(f_i)², 1e-12)` for the first `k` outputs.
pub fn training_errors(model: &VpnModel, features: &Matrix, k: usize) -> Result<Vec<f64>> {
    let g = model.forward(features)?;
    if !g.is_finite() {
        return Err(Error::Numeric("network outputs are not finite".into()));
    }
    let mut errors = vec![0.0; k];
    for row in g.iter_rows() {
        for (e, x) in errors.iter_mut().zip(row) {
            *e += x * x;
        }
    }
    let n = features.rows() as f64;
    Ok(errors.into_iter().map(|e| (e / n).max(ERROR_FLOOR)).collect())
}

/// The untrained network `train_scale` starts from, and the RNG state it
/// continues with.
pub fn initial_model(dim: usize, cfg: &ScaleConfig) -> Result<(VpnModel, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = cfg.hidden.unwrap_or_else(|| default_hidden(dim));
    let model = VpnModel::init(dim, cfg.blocks, hidden, &mut rng)?;
    Ok((model, rng))
}

pub fn train_scale(features: &Matrix, cfg: &ScaleConfig) -> Result<TrainedScale> {
    train_scale_with(features, cfg, |_| {})
}

/// Trains one scale on `features` (used as given; standardize beforehand
/// if wanted). `on_epoch` sees each finished epoch.
pub fn train_scale_with(
    features: &Matrix,
    cfg: &ScaleConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainedScale> {
    cfg.validate()?;
    let (n, d) = features.shape();
    if d < 2 {
        return Err(Error::invalid(format!(
            "invariant learning needs at least 2 feature dimensions, got {d}"
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "invariant learning needs at least 2 samples, got {n}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::invalid("features contain non-finite values"));
    }
    let pca = pca_eig(features)?;
    let k = match cfg.k {
        Some(k) => k,
        None => select_k(&pca.eigenvalues, cfg.p_percent)?,
    };

    if cfg.linear {
        if k > d {
            return Err(Error::invalid(format!("K = {k} exceeds the dimension {d}")));
        }
        // smallest-variance directions first
        let order: Vec<usize> = (0..k).map(|i| d - 1 - i).collect();
        let directions = Matrix::from_fn(k, d, |r, c| pca.eigenvectors.get(c, order[r]));
        let errors = order
            .iter()
            .map(|&i| pca.eigenvalues[i].max(ERROR_FLOOR))
            .collect();
        return Ok(TrainedScale {
            model: ScaleModel::Affine {
                mean: pca.mean,
                directions,
            },
            k,
            errors,
            features: Arc::new(features.clone()),
            standardizer: None,
            history: Vec::new(),
        });
    }

    if k >= d {
        return Err(Error::invalid(format!(
            "K = {k} must be below the dimension {d} for a volume-preserving network"
        )));
    }
    let terms = if cfg.backward_loss {
        LossTerms::BOTH
    } else {
        LossTerms::FORWARD_ONLY
    };
    let (mut model, mut rng) = initial_model(d, cfg)?;
    let mut params = model.params();
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = features.select_rows(rows);
            let (loss, grads) = vpn::loss_and_gradients(&model, &batch, k, terms)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            adam.step(&mut params, &grads, lr)?;
            model.set_params(&params)?;
            total += loss * rows.len() as f64;
        }
        let record = EpochLoss {
            epoch,
            lr,
            loss: total / n as f64,
        };
        on_epoch(&record);
        history.push(record);
    }

    let errors = training_errors(&model, features, k)?;
    Ok(TrainedScale {
        model: ScaleModel::Vpn(model),
        k,
        errors,
        features: Arc::new(features.clone()),
        standardizer: None,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_circle;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn select_k_examples() {
        assert_eq!(select_k(&[10.0, 1.0, 0.1, 0.01], 5.0).unwrap(), 2);
        assert_eq!(select_k(&[1.0, 1.0, 1.0, 1.0], 5.0).unwrap(), 1);
        assert_eq!(select_k(&[1.0, 0.0, 0.0], 5.0).unwrap(), 2);
    }

    #[test]
    fn select_k_errors() {
        assert!(matches!(select_k(&[0.0, 0.0], 5.0), Err(Error::DegenerateData(_))));
        assert!(matches!(select_k(&[1.0, 0.5], 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(select_k(&[1.0, 0.5], 100.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(select_k(&[1.0, -0.5], 5.0), Err(Error::InvalidArgument(_))));
    }

    proptest! {
        #[test]
        fn select_k_matches_cumulative_sums(
            mut lambdas in prop::collection::vec(0.0f64..10.0, 2..12),
            p in 0.5f64..99.5,
        ) {
            lambdas.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(lambdas[0] > 0.0);
            let k = select_k(&lambdas, p).unwrap();
            let total: f64 = lambdas.iter().sum();
            let tail = |m: usize| lambdas[lambdas.len() - m..].iter().sum::<f64>() / total;
            prop_assert!(k >= 1 && k < lambdas.len());
            if k > 1 || tail(1) < p / 100.0 {
                prop_assert!(tail(k) < p / 100.0);
            }
            if k + 1 < lambdas.len() {
                prop_assert!(tail(k + 1) >= p / 100.0);
            }
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = ScaleConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert!((cfg.learning_rate(24) - 1e-4).abs() < 1e-18);
        assert!((cfg.learning_rate(12) - 5.5e-4).abs() < 1e-15);
        let one = ScaleConfig {
            epochs: 1,
            ..ScaleConfig::default()
        };
        assert_eq!(one.learning_rate(0), 1e-3);
    }

    #[test]
    fn config_validation() {
        let bad = [
            ScaleConfig { p_percent: 0.0, ..Default::default() },
            ScaleConfig { p_percent: 100.0, ..Default::default() },
            ScaleConfig { epochs: 0, ..Default::default() },
            ScaleConfig { batch_size: 0, ..Default::default() },
            ScaleConfig { lr_end: -1.0, ..Default::default() },
            ScaleConfig { k: Some(0), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))), "{cfg:?}");
        }
        ScaleConfig::default().validate().unwrap();
    }

    fn small_cfg(seed: u64) -> ScaleConfig {
        ScaleConfig {
            epochs: 3,
            seed,
            hidden: Some(8),
            ..ScaleConfig::default()
        }
    }

    #[test]
    fn bad_inputs() {
        let one_col = Matrix::zeros(10, 1);
        assert!(matches!(train_scale(&one_col, &small_cfg(0)), Err(Error::InvalidArgument(_))));
        let one_row = Matrix::row_vector(&[1.0, 2.0]);
        assert!(matches!(train_scale(&one_row, &small_cfg(0)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn score_arithmetic() {
        let ts = TrainedScale {
            model: ScaleModel::Affine {
                mean: vec![0.0, 0.0],
                directions: Matrix::row_vector(&[1.0, 0.0]),
            },
            k: 1,
            errors: vec![0.25],
            features: Arc::new(Matrix::zeros(2, 2)),
            standardizer: None,
            history: Vec::new(),
        };
        assert_eq!(invariant_score_scale(&ts, &[0.5, 7.0]).unwrap(), 1.0);
        assert_eq!(invariant_score_scale(&ts, &[0.0, 7.0]).unwrap(), 0.0);
        assert!(invariant_score_scale(&ts, &[0.5]).is_err());
        assert_eq!(invariant_score(&[ts.clone()], &[&[0.5, 1.0]]).unwrap(), 1.0);
        let two = [ts.clone(), ts.clone()];
        assert_eq!(invariant_score(&two, &[&[0.5, 0.0], &[1.0, 0.0]]).unwrap(), 5.0);
        assert!(invariant_score(&two, &[&[0.5, 0.0]]).is_err());
    }

    #[test]
    fn training_score_mean_is_k() {
        let x = gen_circle(600, 1.0, 0.05, 2).unwrap().values;
        let ts = train_scale(&x, &ScaleConfig { k: Some(1), ..small_cfg(1) }).unwrap();
        let scores = ts.score(&x).unwrap();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9, "mean {mean}");
        assert!(scores.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let x = gen_circle(200, 1.0, 0.05, 3).unwrap().values;
        let cfg = ScaleConfig { k: Some(1), ..small_cfg(9) };
        let a = train_scale(&x, &cfg).unwrap();
        let b = train_scale(&x, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.errors, b.errors);
        let c = train_scale(&x, &ScaleConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn history_follows_schedule() {
        let x = gen_circle(100, 1.0, 0.05, 3).unwrap().values;
        let mut seen = Vec::new();
        let ts = train_scale_with(&x, &ScaleConfig { k: Some(1), ..small_cfg(0) }, |e| seen.push(e.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(ts.history.len(), 3);
        assert_eq!(ts.history[0].lr, 1e-3);
    }

    fn planar_data(n: usize, seed: u64) -> Matrix {
        // rank-2 affine subspace of R^3: z = 0.5x - 0.25y + 1
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        for r in 0..n {
            let row = x.row_mut(r);
            row[2] = 0.5 * row[0] - 0.25 * row[1] + 1.0;
        }
        x
    }

    #[test]
    fn linear_model_finds_affine_invariant() {
        let x = planar_data(300, 4);
        let ts = train_scale(&x, &ScaleConfig { linear: true, ..small_cfg(0) }).unwrap();
        assert_eq!(ts.k, 1);
        assert!(ts.errors[0] <= 1e-12);
        assert!(ts.score(&Matrix::row_vector(&[0.3, -0.2, 0.5 * 0.3 + 0.05 + 1.0])).unwrap()[0] < 1e-6);
        assert!(ts.score(&Matrix::row_vector(&[0.0, 0.0, 2.0])).unwrap()[0] > 1e6);
    }

    #[test]
    fn network_learns_affine_invariant() {
        let x = planar_data(500, 5);
        let cfg = ScaleConfig {
            epochs: 40,
            lr_start: 1e-2,
            lr_end: 1e-3,
            ..small_cfg(2)
        };
        let ts = train_scale(&x, &cfg).unwrap();
        assert_eq!(ts.k, 1);
        assert!(ts.errors[0] < 1e-4, "e_1 = {}", ts.errors[0]);
    }

    #[test]
    fn linear_scores_rank_like_mahalanobis_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::from_fn(400, 4, |_, c| rng.random::<f64>() * (c + 1) as f64);
        let ts = train_scale(&x, &ScaleConfig { linear: true, k: Some(4), ..small_cfg(0) }).unwrap();
        let mean = ts.score(&x).unwrap().iter().sum::<f64>() / 400.0;
        // N − 1 covariance: training mean is 4(N − 1)/N
        assert!((mean - 4.0 * 399.0 / 400.0).abs() < 1e-9, "{mean}");
    }
}
