//! Reverse-mode differentiation over 2-D `f64` tensors.
//!
//! Every operation is recorded on a [`Tape`]. Backward passes are themselves
//! expressed with recorded operations, so the gradients returned by
//! [`Tape::grad`] are ordinary [`Var`]s that can be differentiated again.
//! The gradient-penalty term of the critic relies on this.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, Axis};

pub type Tensor = Array2<f64>;

#[derive(Clone)]
enum Op {
    Leaf,
    Track(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulConst(usize, Rc<Tensor>),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt(usize),
    SafeRecip(usize),
    Abs(usize),
    LeakyRelu(usize, f64),
    SumAll(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    BroadcastCols(usize),
    SumCols(usize),
    BroadcastRows(usize),
    Reshape(usize),
    Gather(usize, Rc<Vec<usize>>),
    Scatter(usize, Rc<Vec<usize>>),
    Concat(Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable leaf (parameter or input).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn op_of(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires_grad(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned handles live on this tape and may be differentiated
    /// again. Inputs that `output` does not depend on get zero gradients.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        assert_eq!(output.shape(), (1, 1), "grad needs a scalar output");
        let n = output.id + 1;
        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; n];
        adjoint[output.id] = Some(self.scalar(1.0));
        for id in (0..n).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !self.requires_grad(id) {
                continue;
            }
            let me = Var { tape: self, id };
            for (parent, contrib) in self.backward(me, g) {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => acc.add(contrib),
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = w.shape();
                    self.constant(Array2::zeros((r, c)))
                }
            })
            .collect()
    }

    /// Adjoint contributions of node `me` to its differentiable parents.
    fn backward<'t>(&'t self, me: Var<'t>, g: Var<'t>) -> Vec<(usize, Var<'t>)> {
        let v = |id: usize| Var { tape: self, id };
        let rg = |id: usize| self.requires_grad(id);
        let mut out = Vec::with_capacity(2);
        let mut emit = |id: usize, f: &dyn Fn() -> Var<'t>| {
            if rg(id) {
                out.push((id, f()));
            }
        };
        match self.op_of(me.id) {
            Op::Leaf => {}
            Op::Track(a) => emit(a, &|| g),
            Op::Add(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(a, &|| g);
                emit(b, &|| g.neg());
            }
            Op::Mul(a, b) => {
                emit(a, &|| g.mul(v(b)));
                emit(b, &|| g.mul(v(a)));
            }
            Op::Neg(a) => emit(a, &|| g.neg()),
            Op::Scale(a, c) => emit(a, &|| g.scale(c)),
            Op::AddScalar(a) => emit(a, &|| g),
            Op::MatMul(a, b) => {
                emit(a, &|| g.matmul(v(b).t()));
                emit(b, &|| v(a).t().matmul(g));
            }
            Op::Transpose(a) => emit(a, &|| g.t()),
            Op::AddRow(a, r) => {
                emit(a, &|| g);
                emit(r, &|| g.sum_cols());
            }
            Op::MulCol(a, c) => {
                emit(a, &|| g.mul_col(v(c)));
                emit(c, &|| g.mul(v(a)).sum_rows());
            }
            Op::MulConst(a, k) => emit(a, &|| g.mul_const_rc(Rc::clone(&k))),
            Op::Tanh(a) => emit(a, &|| g.mul(me.mul(me).neg().add_scalar(1.0))),
            Op::Sigmoid(a) => emit(a, &|| g.mul(me.mul(me.neg().add_scalar(1.0)))),
            Op::Exp(a) => emit(a, &|| g.mul(me)),
            Op::Sqrt(a) => emit(a, &|| g.mul(me.safe_recip()).scale(0.5)),
            Op::SafeRecip(a) => emit(a, &|| g.mul(me.mul(me)).neg()),
            Op::Abs(a) => emit(a, &|| {
                let sign = self.value_of(a).mapv(f64::signum);
                g.mul_const(sign)
            }),
            Op::LeakyRelu(a, slope) => emit(a, &|| {
                let mask = self.value_of(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                g.mul_const(mask)
            }),
            Op::SumAll(a) => emit(a, &|| {
                let (r, c) = v(a).shape();
                g.broadcast_to(r, c)
            }),
            Op::BroadcastScalar(a) => emit(a, &|| g.sum()),
            Op::SumRows(a) => emit(a, &|| g.broadcast_cols(v(a).shape().1)),
            Op::BroadcastCols(a) => emit(a, &|| g.sum_rows()),
            Op::SumCols(a) => emit(a, &|| g.broadcast_rows(v(a).shape().0)),
            Op::BroadcastRows(a) => emit(a, &|| g.sum_cols()),
            Op::Reshape(a) => emit(a, &|| {
                let (r, c) = v(a).shape();
                g.reshape(r, c)
            }),
            Op::Gather(a, idx) => emit(a, &|| g.scatter_cols(&idx, v(a).shape().1)),
            Op::Scatter(a, idx) => emit(a, &|| g.gather_cols(&idx)),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = v(p).shape().1;
                    let range: Vec<usize> = (start..start + width).collect();
                    emit(p, &|| g.gather_cols(&range));
                    start += width;
                }
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Copy of the value, detached from the tape.
    pub fn to_tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, but always differentiable (so gradients with respect to
    /// this node can be requested even if nothing upstream is a variable).
    pub fn track(self) -> Var<'t> {
        let value = self.to_tensor();
        self.tape.push(value, Op::Track(self.id), true)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self,
            other
        );
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        let value = &*self.value() + &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        let value = &*self.value() - &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        let value = &*self.value() * &*other.value();
        self.tape.binary(self.id, other.id, value, Op::Mul(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.value().mapv(|x| -x);
        self.tape.unary(self.id, value, Op::Neg(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x * c);
        self.tape.unary(self.id, value, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().mapv(|x| x + c);
        self.tape.unary(self.id, value, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: inner dimension mismatch {:?} x {:?}",
            self,
            other
        );
        let value = a.dot(&*b);
        self.tape
            .binary(self.id, other.id, value, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().t().as_standard_layout().into_owned();
        self.tape.unary(self.id, value, Op::Transpose(self.id))
    }

    /// `self[n,m] + row[1,m]` broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        assert_eq!(r.dim(), (1, a.ncols()), "add_row: bad row shape");
        let value = &*a + &*r;
        self.tape.binary(self.id, row.id, value, Op::AddRow(self.id, row.id))
    }

    /// `self[n,m] * col[n,1]` broadcast over columns.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (a, c) = (self.value(), col.value());
        assert_eq!(c.dim(), (a.nrows(), 1), "mul_col: bad column shape");
        let value = &*a * &*c;
        self.tape.binary(self.id, col.id, value, Op::MulCol(self.id, col.id))
    }

    /// Element-wise product with a constant tensor.
    pub fn mul_const(self, k: Tensor) -> Var<'t> {
        self.mul_const_rc(Rc::new(k))
    }

    fn mul_const_rc(self, k: Rc<Tensor>) -> Var<'t> {
        assert_eq!(self.shape(), k.dim(), "mul_const: shape mismatch");
        let value = &*self.value() * &*k;
        self.tape.unary(self.id, value, Op::MulConst(self.id, k))
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().mapv(f64::tanh);
        self.tape.unary(self.id, value, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.unary(self.id, value, Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().mapv(f64::exp);
        self.tape.unary(self.id, value, Op::Exp(self.id))
    }

    /// Square root; its derivative is taken as zero where the value is zero.
    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().mapv(f64::sqrt);
        self.tape.unary(self.id, value, Op::Sqrt(self.id))
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn safe_recip(self) -> Var<'t> {
        let value = self.value().mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        self.tape.unary(self.id, value, Op::SafeRecip(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let value = self.value().mapv(f64::abs);
        self.tape.unary(self.id, value, Op::Abs(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let value = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.tape.unary(self.id, value, Op::LeakyRelu(self.id, slope))
    }

    /// x * sigmoid(x)
    pub fn silu(self) -> Var<'t> {
        self.mul(self.sigmoid())
    }

    pub fn sum(self) -> Var<'t> {
        let value = Array2::from_elem((1, 1), self.value().sum());
        self.tape.unary(self.id, value, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Broadcast a 1x1 value to `r x c`.
    pub fn broadcast_to(self, r: usize, c: usize) -> Var<'t> {
        let x = self.item();
        self.tape
            .unary(self.id, Array2::from_elem((r, c), x), Op::BroadcastScalar(self.id))
    }

    /// Sum over columns: `[n,m] -> [n,1]`.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.unary(self.id, value, Op::SumRows(self.id))
    }

    pub fn mean_rows(self) -> Var<'t> {
        let m = self.shape().1;
        self.sum_rows().scale(1.0 / m as f64)
    }

    /// `[n,1] -> [n,m]`
    pub fn broadcast_cols(self, m: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ncols(), 1, "broadcast_cols expects a column");
        let value = a.broadcast((a.nrows(), m)).unwrap().to_owned();
        self.tape.unary(self.id, value, Op::BroadcastCols(self.id))
    }

    /// Sum over rows: `[n,m] -> [1,m]`.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.unary(self.id, value, Op::SumCols(self.id))
    }

    /// `[1,m] -> [n,m]`
    pub fn broadcast_rows(self, n: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.nrows(), 1, "broadcast_rows expects a row");
        let value = a.broadcast((n, a.ncols())).unwrap().to_owned();
        self.tape.unary(self.id, value, Op::BroadcastRows(self.id))
    }

    /// Row-major reshape.
    pub fn reshape(self, r: usize, c: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.len(), r * c, "reshape: element count mismatch");
        let flat: Vec<f64> = a.iter().copied().collect();
        let value = Array2::from_shape_vec((r, c), flat).expect("reshape");
        self.tape.unary(self.id, value, Op::Reshape(self.id))
    }

    pub fn gather_cols(self, idx: &[usize]) -> Var<'t> {
        let value = self.value().select(Axis(1), idx);
        self.tape
            .unary(self.id, value, Op::Gather(self.id, Rc::new(idx.to_vec())))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(&idx)
    }

    /// Scatter-add column `j` of `self` into column `idx[j]` of a zero
    /// tensor with `ncols` columns.
    pub fn scatter_cols(self, idx: &[usize], ncols: usize) -> Var<'t> {
        let a = self.value();
        assert_eq!(a.ncols(), idx.len(), "scatter_cols: index length");
        let mut value = Array2::zeros((a.nrows(), ncols));
        for (j, &c) in idx.iter().enumerate() {
            let mut dst = value.column_mut(c);
            dst += &a.column(j);
        }
        self.tape
            .unary(self.id, value, Op::Scatter(self.id, Rc::new(idx.to_vec())))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check<F>(x0: Tensor, f: F)
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = f(x);
        let g = tape.grad(y, &[x])[0].to_tensor();
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |d: f64| {
                    let tape = Tape::new();
                    let mut xp = x0.clone();
                    xp[[i, j]] += d;
                    f(tape.var(xp)).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - g[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "({i},{j}): fd {fd} vs {}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -1.4]];
        fd_check(x0.clone(), |x| x.tanh().sum());
        fd_check(x0.clone(), |x| x.sigmoid().square().sum());
        fd_check(x0.clone(), |x| x.exp().mean());
        fd_check(x0.clone(), |x| x.abs().sum());
        fd_check(x0.clone(), |x| x.square().add_scalar(1.0).sqrt().sum());
        fd_check(x0.clone(), |x| x.add_scalar(3.0).safe_recip().sum());
        fd_check(x0.clone(), |x| x.silu().sum());
        fd_check(x0, |x| x.leaky_relu(0.2).square().sum());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1, 0.4], [0.5, 0.2, -1.4, 0.9]];
        fd_check(x0.clone(), |x| x.reshape(4, 2).t().square().sum());
        fd_check(x0.clone(), |x| x.gather_cols(&[3, 0, 0]).square().sum());
        fd_check(x0.clone(), |x| x.slice_cols(1, 2).scatter_cols(&[2, 0], 5).tanh().sum());
        fd_check(x0.clone(), |x| {
            let a = x.slice_cols(0, 1);
            x.mul_col(a).sum_rows().square().sum()
        });
        fd_check(x0.clone(), |x| {
            let r = x.slice_cols(0, 4).sum_cols().scale(0.5);
            x.add_row(r).square().sum_cols().broadcast_rows(3).mean()
        });
        fd_check(x0.clone(), |x| {
            let w = x.t();
            x.matmul(w).tanh().sum()
        });
        fd_check(x0, |x| {
            let parts = [x.slice_cols(2, 2), x.square(), x.slice_cols(0, 1)];
            Var::concat_cols(&parts).exp().sum_rows().broadcast_cols(2).sum()
        });
    }

    #[test]
    fn second_order_matches_finite_differences() {
        // d/dx of sum((d/dx sum(tanh(x)^2 * x))^2)
        let x0 = array![[0.3, -0.7], [1.1, 0.05]];
        fd_check(x0, |x| {
            let tape = x.tape();
            let inner = x.tanh().square().mul(x).sum();
            let g = tape.grad(inner, &[x])[0];
            g.square().sum()
        });
    }

    #[test]
    fn unrelated_inputs_get_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[1.0, 2.0]]);
        let b = tape.var(array![[3.0]]);
        let y = a.square().sum();
        let g = tape.grad(y, &[a, b]);
        assert_eq!(g[0].to_tensor(), array![[2.0, 4.0]]);
        assert_eq!(g[1].to_tensor(), array![[0.0]]);
    }

    #[test]
    fn sqrt_at_zero_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.var(array![[0.0, 4.0]]);
        let g = tape.grad(a.sqrt().sum(), &[a])[0].to_tensor();
        assert_eq!(g, array![[0.0, 0.25]]);
    }
}
