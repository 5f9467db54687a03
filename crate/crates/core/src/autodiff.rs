//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are only
//! ever appended, so the node list is already in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Supported primitives: matmul (`a·b`, `a·bᵀ`), add, subtract, row-bias
//! add/subtract, ReLU, column slice/concat, squared norm, scalar scale,
//! skew-symmetric construction and the matrix exponential.

use crate::error::{Error, Result};
use crate::linalg::{expm, expm_vjp, skew_from_vector, skew_vector_grad, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Relu(Var),
    SliceCols { input: Var, start: usize },
    ConcatCols(Var, Var),
    SumSquares(Var),
    Scale(Var, f64),
    Skew(Var),
    Expm(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Matrix {
        &self.grads[v.0]
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        std::mem::replace(&mut self.grads[v.0], Matrix::zeros(0, 0))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    /// Adds the 1×c node `row` to each row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).rows(), 1, "add_row: bias must be a row vector");
        let value = self.value(a).add_row(self.value(row).data());
        self.push(value, Op::AddRow(a, row))
    }

    /// Subtracts the 1×c node `row` from each row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).rows(), 1, "sub_row: bias must be a row vector");
        let value = self.value(a).sub_row(self.value(row).data());
        self.push(value, Op::SubRow(a, row))
    }

    /// Elementwise `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        self.push(value, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).concat_cols(self.value(b));
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Sum of squared entries, as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&[self.value(a).sum_squares()]);
        self.push(value, Op::SumSquares(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Skew-symmetric n×n matrix from a 1×n(n-1)/2 parameter row.
    pub fn skew(&mut self, v: Var, n: usize) -> Result<Var> {
        let value = skew_from_vector(self.value(v).data(), n)?;
        Ok(self.push(value, Op::Skew(v)))
    }

    pub fn expm(&mut self, a: Var) -> Result<Var> {
        let value = expm(self.value(a))?;
        Ok(self.push(value, Op::Expm(a)))
    }

    /// Back-propagates from the scalar node `loss`.
    ///
    /// Every node, leaf or not, gets a gradient; nodes that `loss` does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got a {}x{} node",
                shape.0, shape.1
            )));
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::row_vector(&[1.0]));

        fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(b));
                    let gb = self.value(a).matmul_tn(&g);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::MatMulNT(a, b) => {
                    // y = a bᵀ: ∂a = g b, ∂b = gᵀ a
                    let ga = g.matmul(self.value(b));
                    let gb = g.matmul_tn(self.value(a));
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.scale(-1.0));
                    accumulate(&mut grads, a, g.clone());
                }
                Op::AddRow(a, row) | Op::SubRow(a, row) => {
                    let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                    let mut col_sums = vec![0.0; g.cols()];
                    for r in g.iter_rows() {
                        for (s, x) in col_sums.iter_mut().zip(r) {
                            *s += x;
                        }
                    }
                    let gr = Matrix::row_vector(&col_sums).scale(sign);
                    accumulate(&mut grads, row, gr);
                    accumulate(&mut grads, a, g.clone());
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, a, ga);
                }
                Op::SliceCols { input, start } => {
                    let (rows, cols) = self.value(input).shape();
                    let mut ga = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, input, ga);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(a).cols();
                    accumulate(&mut grads, a, g.slice_cols(0, split));
                    accumulate(&mut grads, b, g.slice_cols(split, g.cols()));
                }
                Op::SumSquares(a) => {
                    let factor = 2.0 * g.get(0, 0);
                    accumulate(&mut grads, a, self.value(a).scale(factor));
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut grads, a, g.scale(factor));
                }
                Op::Skew(v) => {
                    accumulate(&mut grads, v, Matrix::row_vector(&skew_vector_grad(&g)));
                }
                Op::Expm(a) => {
                    let ga = expm_vjp(self.value(a), &g)?;
                    accumulate(&mut grads, a, ga);
                }
            }
            // inputs always precede idx, so restoring here cannot clobber them
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols())))
            .collect();
        Ok(Gradients { grads })
    }
}
