//! Finite-difference checks of the taped loss gradient and of the network
//! Jacobian.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::vpn::{loss_and_gradients, LossTerms, VpnModel};

/// Outcome of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Norm-wise relative error over the checked coordinates, or the worst
    /// directional-derivative error if larger.
    pub error: f64,
    pub checked: usize,
    /// Probes without a stable difference quotient (a ReLU kink lies within
    /// every tried step).
    pub kinks: usize,
}

/// Loss of the selected terms, from a single forward pass.
pub fn loss_value(model: &VpnModel, x: &Matrix, k: usize, terms: LossTerms) -> Result<f64> {
    let z = model.forward(x)?;
    let n = x.rows() as f64;
    let mut loss = 0.0;
    if terms.forward {
        loss += z.slice_cols(0, k).sum_squares() / n;
    }
    if terms.backward {
        let mut projected = z;
        for r in 0..projected.rows() {
            projected.row_mut(r)[..k].fill(0.0);
        }
        loss += model.inverse(&projected)?.sub(x).sum_squares() / n;
    }
    Ok(loss)
}

/// Central difference of `f` at 0. The step shrinks from 1e-5 until two
/// consecutive quotients agree to 1e-5 relative; `None` if they never do.
pub fn stable_derivative(mut f: impl FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let mut prev: Option<f64> = None;
    for h in [1e-5, 1e-6, 1e-7, 1e-8] {
        let d = (f(h)? - f(-h)?) / (2.0 * h);
        if let Some(p) = prev {
            if (d - p).abs() <= 1e-5 * d.abs().max(1.0) {
                return Ok(Some(d));
            }
        }
        prev = Some(d);
    }
    Ok(None)
}

/// Compares the taped gradient of the loss on `batch` with finite
/// differences: every coordinate of tensors with at most
/// `coords_per_tensor` entries, a random sample of that many otherwise, and
/// `directions` random unit directions.
pub fn check_gradients<R: Rng + ?Sized>(
    model: &VpnModel,
    batch: &Matrix,
    k: usize,
    terms: LossTerms,
    coords_per_tensor: usize,
    directions: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    let (_, grads) = loss_and_gradients(model, batch, k, terms)?;
    let base = model.params();
    let mut probe = model.clone();
    let mut along = |step: &[Matrix]| {
        stable_derivative(|t| {
            let shifted: Vec<Matrix> = base.iter().zip(step).map(|(p, s)| p.zip_map(s, |a, b| a + t * b)).collect();
            probe.set_params(&shifted)?;
            loss_value(&probe, batch, k, terms)
        })
    };
    let zeros: Vec<Matrix> = base.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();

    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    let (mut checked, mut kinks) = (0, 0);
    for t in 0..base.len() {
        let len = base[t].data().len();
        let picked = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            sample(rng, len, coords_per_tensor).into_vec()
        };
        for i in picked {
            let mut step = zeros.clone();
            step[t].data_mut()[i] = 1.0;
            let Some(numeric) = along(&step)? else {
                kinks += 1;
                continue;
            };
            let analytic = grads[t].data()[i];
            diff += (numeric - analytic).powi(2);
            norm_a += analytic * analytic;
            norm_n += numeric * numeric;
            checked += 1;
        }
    }
    let mut error = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);

    for _ in 0..directions {
        let dir: Vec<Matrix> = base.iter().map(|p| p.map(|_| StandardNormal.sample(rng))).collect();
        let len = dir.iter().map(Matrix::sum_squares).sum::<f64>().sqrt();
        let dir: Vec<Matrix> = dir.iter().map(|d| d.scale(1.0 / len)).collect();
        let Some(numeric) = along(&dir)? else {
            kinks += 1;
            continue;
        };
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        error = error.max((numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
        checked += 1;
    }
    Ok(GradCheck { error, checked, kinks })
}

/// Central-difference Jacobian of the network at `x`.
pub fn numeric_jacobian(model: &VpnModel, x: &[f64]) -> Result<Matrix> {
    let d = x.len();
    if d != model.dim() {
        return Err(Error::invalid(format!("point has {d} coordinates, model dimension is {}", model.dim())));
    }
    let h = 1e-5;
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        let mut plus = x.to_vec();
        plus[j] += h;
        let mut minus = x.to_vec();
        minus[j] -= h;
        let (fp, fm) = (model.forward_point(&plus)?, model.forward_point(&minus)?);
        for i in 0..d {
            jac.set(i, j, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    Ok(jac)
}

pub fn jacobian_determinant(model: &VpnModel, x: &[f64]) -> Result<f64> {
    let jac = numeric_jacobian(model, x)?;
    let d = jac.rows();
    Ok(DMatrix::from_row_slice(d, d, jac.data()).determinant())
}
