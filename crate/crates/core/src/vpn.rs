//! Volume-preserving network: alternating rotation and additive coupling
//! layers, closed by a final rotation.
//!
//! Batches are row-major (`B×D`, one sample per row). A rotation layer maps
//! a row `x` to `R x + b` with `R = expm([v]×)`, so on a batch it computes
//! `X Rᵀ + b`; its inverse is `(Y - b) R`. A coupling layer splits each row
//! into the leading `⌈D/2⌉` coordinates `x_a` and the rest `x_b` and shifts
//! `x_a` by an MLP of `x_b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{expm, skew_from_vector, skew_len, Matrix};

pub const DEFAULT_BLOCKS: usize = 4;

/// Floor on the coupling MLP hidden width.
pub const MIN_HIDDEN: usize = 32;

pub const MODEL_MAGIC: &[u8; 7] = b"NLINV1\0";

/// Size of the transformed part `x_a`.
pub fn split_point(dim: usize) -> usize {
    dim.div_ceil(2)
}

/// Default hidden width of the coupling MLPs for inputs of size `dim`.
pub fn default_hidden(dim: usize) -> usize {
    (dim - split_point(dim)).max(MIN_HIDDEN)
}

fn check_width(x: &Matrix, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::invalid(format!(
            "input has {} columns, model dimension is {dim}",
            x.cols()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationLayer {
    dim: usize,
    pub skew: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RotationLayer {
    pub fn identity(dim: usize) -> Self {
        RotationLayer {
            dim,
            skew: vec![0.0; skew_len(dim)],
            bias: vec![0.0; dim],
        }
    }

    pub fn new(dim: usize, skew: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if skew.len() != skew_len(dim) || bias.len() != dim {
            return Err(Error::invalid(format!(
                "rotation layer of dimension {dim} needs {} skew and {dim} bias entries, got {} and {}",
                skew_len(dim),
                skew.len(),
                bias.len()
            )));
        }
        Ok(RotationLayer { dim, skew, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The orthogonal matrix `expm([v]×)`.
    pub fn matrix(&self) -> Result<Matrix> {
        expm(&skew_from_vector(&self.skew, self.dim)?)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_width(x, self.dim)?;
        Ok(x.matmul_nt(&self.matrix()?).add_row(&self.bias))
    }

    pub fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        check_width(y, self.dim)?;
        Ok(y.sub_row(&self.bias).matmul(&self.matrix()?))
    }
}

/// Additive coupling `y = join(x_a + t(x_b), x_b)`, with `t` an MLP of four
/// affine maps and ReLU after the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    hidden: usize,
    /// Shapes: `|x_b|×h`, `h×h`, `h×h`, `h×|x_a|`.
    pub weights: [Matrix; 4],
    pub biases: [Vec<f64>; 4],
}

impl CouplingLayer {
    /// Coupling whose MLP is identically zero (the identity map).
    pub fn zeroed(dim: usize, hidden: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "coupling layers need at least 2 dimensions, got {dim}"
            )));
        }
        if hidden == 0 {
            return Err(Error::invalid("coupling hidden width must be positive"));
        }
        let split = split_point(dim);
        let widths = Self::layer_widths(dim, hidden);
        Ok(CouplingLayer {
            dim,
            split,
            hidden,
            weights: widths.map(|(i, o)| Matrix::zeros(i, o)),
            biases: widths.map(|(_, o)| vec![0.0; o]),
        })
    }

    fn layer_widths(dim: usize, hidden: usize) -> [(usize, usize); 4] {
        let a = split_point(dim);
        let b = dim - a;
        [(b, hidden), (hidden, hidden), (hidden, hidden), (hidden, a)]
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// The translation `t(x_b)` for a batch of `x_b` rows.
    pub fn shift(&self, xb: &Matrix) -> Matrix {
        let mut h = xb.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w).add_row(b);
            if i < 3 {
                h = h.map(|x| if x > 0.0 { x } else { 0.0 });
            }
        }
        h
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_width(x, self.dim)?;
        let xa = x.slice_cols(0, self.split);
        let xb = x.slice_cols(self.split, self.dim);
        Ok(xa.add(&self.shift(&xb)).concat_cols(&xb))
    }

    pub fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        check_width(y, self.dim)?;
        let ya = y.slice_cols(0, self.split);
        let yb = y.slice_cols(self.split, self.dim);
        Ok(ya.sub(&self.shift(&yb)).concat_cols(&yb))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VpnModel {
    dim: usize,
    hidden: usize,
    blocks: Vec<(RotationLayer, CouplingLayer)>,
    final_rotation: RotationLayer,
}

impl VpnModel {
    /// Identity network: zero skew vectors, zero biases, zero MLPs.
    pub fn identity(dim: usize, blocks: usize, hidden: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "volume-preserving networks need at least 2 dimensions, got {dim}"
            )));
        }
        let coupling = CouplingLayer::zeroed(dim, hidden)?;
        Ok(VpnModel {
            dim,
            hidden,
            blocks: (0..blocks)
                .map(|_| (RotationLayer::identity(dim), coupling.clone()))
                .collect(),
            final_rotation: RotationLayer::identity(dim),
        })
    }

    /// Default initialization: identity rotations, MLP weights drawn from
    /// `N(0, 2/fan_in)`, zero MLP biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, blocks: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut model = Self::identity(dim, blocks, hidden)?;
        for (_, coupling) in &mut model.blocks {
            for w in &mut coupling.weights {
                let normal = Normal::new(0.0, (2.0 / w.rows() as f64).sqrt())
                    .map_err(|e| Error::Numeric(e.to_string()))?;
                w.data_mut().iter_mut().for_each(|x| *x = normal.sample(rng));
            }
        }
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[(RotationLayer, CouplingLayer)] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [(RotationLayer, CouplingLayer)] {
        &mut self.blocks
    }

    pub fn final_rotation(&self) -> &RotationLayer {
        &self.final_rotation
    }

    pub fn final_rotation_mut(&mut self) -> &mut RotationLayer {
        &mut self.final_rotation
    }

    /// `ĝ(x)` for every row of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_width(x, self.dim)?;
        let mut h = x.clone();
        for (rotation, coupling) in &self.blocks {
            h = rotation.forward(&h)?;
            h = coupling.forward(&h)?;
        }
        self.final_rotation.forward(&h)
    }

    /// `ĝ⁻¹(z)` for every row of `z`.
    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        check_width(z, self.dim)?;
        let mut h = self.final_rotation.inverse(z)?;
        for (rotation, coupling) in self.blocks.iter().rev() {
            h = coupling.inverse(&h)?;
            h = rotation.inverse(&h)?;
        }
        Ok(h)
    }

    pub fn forward_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(x))?.into_data())
    }

    pub fn inverse_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse(&Matrix::row_vector(z))?.into_data())
    }

    /// `ĝ⁻¹(P_K ĝ(x))`: reconstruction after zeroing the first `k` outputs.
    pub fn reconstruct(&self, x: &Matrix, k: usize) -> Result<Matrix> {
        check_invariant_count(k, self.dim)?;
        let mut z = self.forward(x)?;
        for r in 0..z.rows() {
            z.row_mut(r)[..k].iter_mut().for_each(|v| *v = 0.0);
        }
        self.inverse(&z)
    }

    /// Parameter tensors in their canonical order: per block the skew
    /// vector, rotation bias, four MLP weights, four MLP biases; then the
    /// final rotation's skew vector and bias. Vectors are 1×n rows.
    pub fn params(&self) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.blocks.len() * 10 + 2);
        for (rotation, coupling) in &self.blocks {
            out.push(Matrix::row_vector(&rotation.skew));
            out.push(Matrix::row_vector(&rotation.bias));
            out.extend(coupling.weights.iter().cloned());
            out.extend(coupling.biases.iter().map(|b| Matrix::row_vector(b)));
        }
        out.push(Matrix::row_vector(&self.final_rotation.skew));
        out.push(Matrix::row_vector(&self.final_rotation.bias));
        out
    }

    pub fn set_params(&mut self, params: &[Matrix]) -> Result<()> {
        let shapes = self.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != *s {
                return Err(Error::invalid(format!(
                    "parameter tensor {i} has shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
        }
        let mut it = params.iter();
        for (rotation, coupling) in &mut self.blocks {
            rotation.skew.copy_from_slice(it.next().unwrap().data());
            rotation.bias.copy_from_slice(it.next().unwrap().data());
            for w in &mut coupling.weights {
                *w = it.next().unwrap().clone();
            }
            for b in &mut coupling.biases {
                b.copy_from_slice(it.next().unwrap().data());
            }
        }
        self.final_rotation.skew.copy_from_slice(it.next().unwrap().data());
        self.final_rotation.bias.copy_from_slice(it.next().unwrap().data());
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let d = self.dim;
        let rotation = [(1, skew_len(d)), (1, d)];
        let widths = CouplingLayer::layer_widths(d, self.hidden);
        let mut shapes = Vec::new();
        for _ in &self.blocks {
            shapes.extend(rotation);
            shapes.extend(widths);
            shapes.extend(widths.map(|(_, o)| (1, o)));
        }
        shapes.extend(rotation);
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(Matrix::is_finite)
    }
}

fn check_invariant_count(k: usize, dim: usize) -> Result<()> {
    if k == 0 || k >= dim {
        return Err(Error::invalid(format!(
            "invariant count K must satisfy 1 <= K < D = {dim}, got {k}"
        )));
    }
    Ok(())
}

fn check_batch(model: &VpnModel, batch: &Matrix, k: usize) -> Result<()> {
    check_invariant_count(k, model.dim())?;
    check_width(batch, model.dim())?;
    if batch.rows() == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    Ok(())
}

/// Mean over the batch of `‖ĝ_{1:K}(f)‖²`.
pub fn forward_loss(model: &VpnModel, batch: &Matrix, k: usize) -> Result<f64> {
    check_batch(model, batch, k)?;
    let z = model.forward(batch)?;
    let total: f64 = z.iter_rows().map(|r| r[..k].iter().map(|x| x * x).sum::<f64>()).sum();
    Ok(total / batch.rows() as f64)
}

/// Mean over the batch of `‖ĝ⁻¹(P_K ĝ(f)) − f‖²`.
pub fn backward_loss(model: &VpnModel, batch: &Matrix, k: usize) -> Result<f64> {
    check_batch(model, batch, k)?;
    let rec = model.reconstruct(batch, k)?;
    Ok(rec.sub(batch).sum_squares() / batch.rows() as f64)
}

/// Which terms make up the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub forward: bool,
    pub backward: bool,
}

impl LossTerms {
    pub const BOTH: LossTerms = LossTerms {
        forward: true,
        backward: true,
    };
    pub const FORWARD_ONLY: LossTerms = LossTerms {
        forward: true,
        backward: false,
    };
}

/// Evaluates the selected loss terms through the tape and returns the loss
/// and its gradient for each tensor of [`VpnModel::params`].
pub fn loss_and_gradients(
    model: &VpnModel,
    batch: &Matrix,
    k: usize,
    terms: LossTerms,
) -> Result<(f64, Vec<Matrix>)> {
    check_batch(model, batch, k)?;
    if !terms.forward && !terms.backward {
        return Err(Error::invalid("at least one loss term must be enabled"));
    }
    let mut tape = Tape::new();
    let net = TapedVpn::record(&mut tape, model)?;
    let x = tape.leaf(batch.clone());
    let z = net.forward(&mut tape, x);
    let inv_b = 1.0 / batch.rows() as f64;

    let mut loss = None;
    if terms.forward {
        let head = tape.slice_cols(z, 0, k);
        let sq = tape.sum_squares(head);
        loss = Some(tape.scale(sq, inv_b));
    }
    if terms.backward {
        let zeros = tape.leaf(Matrix::zeros(batch.rows(), k));
        let tail = tape.slice_cols(z, k, model.dim());
        let projected = tape.concat_cols(zeros, tail);
        let rec = net.inverse(&mut tape, projected);
        let diff = tape.sub(rec, x);
        let sq = tape.sum_squares(diff);
        let bwd = tape.scale(sq, inv_b);
        loss = Some(match loss {
            Some(fwd) => tape.add(fwd, bwd),
            None => bwd,
        });
    }
    let loss = loss.expect("at least one term");
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let param_grads = net.params.iter().map(|&v| grads.take(v)).collect();
    Ok((value, param_grads))
}

struct TapedRotation {
    matrix: Var,
    bias: Var,
}

struct TapedCoupling {
    split: usize,
    dim: usize,
    weights: [Var; 4],
    biases: [Var; 4],
}

/// A model whose parameters live on a tape.
struct TapedVpn {
    params: Vec<Var>,
    blocks: Vec<(TapedRotation, TapedCoupling)>,
    final_rotation: TapedRotation,
}

impl TapedVpn {
    fn record(tape: &mut Tape, model: &VpnModel) -> Result<Self> {
        let dim = model.dim();
        let mut params = Vec::new();
        let rotation = |tape: &mut Tape, layer: &RotationLayer, params: &mut Vec<Var>| -> Result<TapedRotation> {
            let v = tape.leaf(Matrix::row_vector(&layer.skew));
            let bias = tape.leaf(Matrix::row_vector(&layer.bias));
            params.push(v);
            params.push(bias);
            let s = tape.skew(v, dim)?;
            let matrix = tape.expm(s)?;
            Ok(TapedRotation { matrix, bias })
        };

        let mut blocks = Vec::with_capacity(model.num_blocks());
        for (r, c) in model.blocks() {
            let tr = rotation(tape, r, &mut params)?;
            let weights = std::array::from_fn(|i| tape.leaf(c.weights[i].clone()));
            let biases = std::array::from_fn(|i| tape.leaf(Matrix::row_vector(&c.biases[i])));
            params.extend(weights);
            params.extend(biases);
            blocks.push((
                tr,
                TapedCoupling {
                    split: c.split(),
                    dim,
                    weights,
                    biases,
                },
            ));
        }
        let final_rotation = rotation(tape, model.final_rotation(), &mut params)?;
        Ok(TapedVpn {
            params,
            blocks,
            final_rotation,
        })
    }

    fn rotate(tape: &mut Tape, r: &TapedRotation, x: Var) -> Var {
        let y = tape.matmul_nt(x, r.matrix);
        tape.add_row(y, r.bias)
    }

    fn unrotate(tape: &mut Tape, r: &TapedRotation, y: Var) -> Var {
        let centered = tape.sub_row(y, r.bias);
        tape.matmul(centered, r.matrix)
    }

    fn shift(tape: &mut Tape, c: &TapedCoupling, xb: Var) -> Var {
        let mut h = xb;
        for i in 0..4 {
            h = tape.matmul(h, c.weights[i]);
            h = tape.add_row(h, c.biases[i]);
            if i < 3 {
                h = tape.relu(h);
            }
        }
        h
    }

    fn couple(tape: &mut Tape, c: &TapedCoupling, x: Var, sign: f64) -> Var {
        let xa = tape.slice_cols(x, 0, c.split);
        let xb = tape.slice_cols(x, c.split, c.dim);
        let t = Self::shift(tape, c, xb);
        let ya = if sign > 0.0 { tape.add(xa, t) } else { tape.sub(xa, t) };
        tape.concat_cols(ya, xb)
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (r, c) in &self.blocks {
            h = Self::rotate(tape, r, h);
            h = Self::couple(tape, c, h, 1.0);
        }
        Self::rotate(tape, &self.final_rotation, h)
    }

    fn inverse(&self, tape: &mut Tape, z: Var) -> Var {
        let mut h = Self::unrotate(tape, &self.final_rotation, z);
        for (r, c) in self.blocks.iter().rev() {
            h = Self::couple(tape, c, h, -1.0);
            h = Self::unrotate(tape, r, h);
        }
        h
    }
}

/// Encodes a model and its invariant count.
///
/// Layout: magic `NLINV1\0`, then little-endian `u32` D, block count,
/// K and hidden width, then every parameter of [`VpnModel::params`] as
/// `f64`, then the SHA-256 of all preceding bytes.
pub fn serialize(model: &VpnModel, k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 16 + model.num_params() * 8 + 32);
    out.extend_from_slice(MODEL_MAGIC);
    for field in [model.dim(), model.num_blocks(), k, model.hidden()] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    for p in model.params() {
        for x in p.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Decodes bytes written by [`serialize`], returning the model and K.
pub fn deserialize(bytes: &[u8]) -> Result<(VpnModel, usize)> {
    let header_len = MODEL_MAGIC.len() + 16;
    if bytes.len() < MODEL_MAGIC.len() || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad model magic: expected {:?}",
            String::from_utf8_lossy(MODEL_MAGIC)
        )));
    }
    if bytes.len() < header_len + 32 {
        return Err(Error::Format(format!(
            "model file truncated: {} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let field = |i: usize| {
        let at = MODEL_MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
    };
    let (dim, blocks, k, hidden) = (field(0), field(1), field(2), field(3));
    if dim < 2 || hidden == 0 || dim > 1 << 16 || hidden > 1 << 16 || blocks > 1 << 10 {
        return Err(Error::Format(format!(
            "implausible model header: D={dim}, blocks={blocks}, hidden={hidden}"
        )));
    }
    let mut model = VpnModel::identity(dim, blocks, hidden)?;
    let expected = header_len + model.num_params() * 8 + 32;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "model file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let payload = &bytes[..expected - 32];
    if Sha256::digest(payload).as_slice() != &bytes[expected - 32..] {
        return Err(Error::Format("model checksum mismatch".into()));
    }

    let mut values = payload[header_len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params: Vec<Matrix> = model
        .param_shapes()
        .into_iter()
        .map(|(r, c)| Matrix::new(r, c, values.by_ref().take(r * c).collect()))
        .collect::<Result<_>>()?;
    model.set_params(&params)?;
    Ok((model, k))
}
