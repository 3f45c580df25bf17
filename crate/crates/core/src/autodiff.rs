//! Matrix-level reverse-mode differentiation.
//!
//! Every node on a [`Tape`] holds a complex matrix. For a real loss `L` and a
//! complex entry `z = x + iy` the accumulated adjoint is `∂L/∂x + i ∂L/∂y`,
//! so a gradient step on the real-split parameters is `θ ← θ − η·G`.
//! Nodes that carry real quantities (phases, forgetting factors, MLP weights)
//! live in the same representation with zero imaginary part; their leaf
//! adjoints are projected onto the real axis when read back.
//!
//! Backward rules used below, with `G` the output adjoint:
//!
//! * `C = A B`:        `Ḡ_A = G Bᴴ`, `Ḡ_B = Aᴴ G`
//! * `C = A⁻¹`:        `Ḡ_A = −Cᴴ G Cᴴ`
//! * holomorphic `f`:  `Ḡ_z = conj(f'(z)) G`
//! * `c = |z|²`:       `Ḡ_z = 2 z Re(G)`

use std::cell::RefCell;

use crate::error::Result;
use crate::numerics::{c64, CMatrix, C64};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    Adjoint(usize),
    Transpose(usize),
    Conj(usize),
    ScaleConst(usize, C64),
    /// 1x1 node times matrix node.
    Smul(usize, usize),
    /// column j scaled by entry j of a 1xn node.
    MulCols(usize, usize),
    /// row i scaled by entry i of an mx1 node.
    MulRows(usize, usize),
    Hadamard(usize, usize),
    Inverse(usize),
    DiagInvPlus(usize),
    ZeroDiagImag(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    Sqrt(usize),
    Abs2(usize),
    Real(usize),
    Relu(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Shift(usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    HStack(Vec<usize>),
    VStack(Vec<usize>),
    ColumnPower(usize, f64),
}

struct Node {
    value: CMatrix,
    op: Op,
    needs_grad: bool,
    real_leaf: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    /// Differentiable leaf. `real` marks blocks whose imaginary part is fixed at zero.
    pub fn param(&self, value: CMatrix, real: bool) -> Var<'_> {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            real_leaf: real,
        })
    }

    pub fn constant(&self, value: CMatrix) -> Var<'_> {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            real_leaf: false,
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(CMatrix::scalar(c64(value, 0.0)))
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: CMatrix, op: Op, inputs: &[usize]) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(Node {
            value,
            op,
            needs_grad,
            real_leaf: false,
        })
    }

    fn value_of(&self, id: usize) -> CMatrix {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn hstack<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&CMatrix> = ids.iter().map(|&i| &nodes[i].value).collect();
            CMatrix::hstack(&refs)
        };
        self.push(value, Op::HStack(ids.clone()), &ids)
    }

    pub fn vstack<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&CMatrix> = ids.iter().map(|&i| &nodes[i].value).collect();
            CMatrix::vstack(&refs)
        };
        self.push(value, Op::VStack(ids.clone()), &ids)
    }

    /// Reverse sweep from a scalar output.
    pub fn gradient(&self, output: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.shape(),
            (1, 1),
            "gradient needs a scalar output"
        );
        let mut grads: Vec<Option<CMatrix>> = vec![None; nodes.len()];
        grads[output.id] = Some(CMatrix::scalar(c64(1.0, 0.0)));

        for id in (0..=output.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let out = &node.value;
            let mut acc = |target: usize, delta: CMatrix| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Neg(a) => acc(*a, -&g),
                Op::MatMul(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        acc(*a, g.matmul(&vb.adjoint()));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, va.adjoint().matmul(&g));
                    }
                }
                Op::Adjoint(a) => acc(*a, g.adjoint()),
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Conj(a) => acc(*a, g.conj()),
                Op::ScaleConst(a, c) => acc(*a, g.scale(c.conj())),
                Op::Smul(s, a) => {
                    let vs = nodes[*s].value.as_scalar();
                    let va = &nodes[*a].value;
                    if nodes[*a].needs_grad {
                        acc(*a, g.scale(vs.conj()));
                    }
                    if nodes[*s].needs_grad {
                        let d: C64 = va.data().iter().zip(g.data()).map(|(x, gg)| x.conj() * gg).sum();
                        acc(*s, CMatrix::scalar(d));
                    }
                }
                Op::MulCols(a, s) => {
                    let va = &nodes[*a].value;
                    let vs = &nodes[*s].value;
                    if nodes[*a].needs_grad {
                        acc(*a, CMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * vs[(0, j)].conj()));
                    }
                    if nodes[*s].needs_grad {
                        acc(
                            *s,
                            CMatrix::from_fn(1, g.cols(), |_, j| {
                                (0..g.rows()).map(|i| va[(i, j)].conj() * g[(i, j)]).sum()
                            }),
                        );
                    }
                }
                Op::MulRows(s, a) => {
                    let va = &nodes[*a].value;
                    let vs = &nodes[*s].value;
                    if nodes[*a].needs_grad {
                        acc(*a, CMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * vs[(i, 0)].conj()));
                    }
                    if nodes[*s].needs_grad {
                        acc(
                            *s,
                            CMatrix::from_fn(g.rows(), 1, |i, _| {
                                (0..g.cols()).map(|j| va[(i, j)].conj() * g[(i, j)]).sum()
                            }),
                        );
                    }
                }
                Op::Hadamard(a, b) => {
                    let va = &nodes[*a].value;
                    let vb = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        acc(*a, g.zip_map(vb, |gg, y| gg * y.conj()));
                    }
                    if nodes[*b].needs_grad {
                        acc(*b, g.zip_map(va, |gg, x| gg * x.conj()));
                    }
                }
                Op::Inverse(a) => {
                    let ch = out.adjoint();
                    acc(*a, -&ch.matmul(&g).matmul(&ch));
                }
                Op::DiagInvPlus(a) => {
                    let n = out.rows();
                    let mut d = CMatrix::zeros(n, n);
                    for i in 0..n {
                        let r = out[(i, i)];
                        d[(i, i)] = -(r * r).conj() * g[(i, i)];
                    }
                    acc(*a, d);
                }
                Op::ZeroDiagImag(a) => {
                    let mut d = g.clone();
                    for i in 0..d.rows() {
                        d[(i, i)].im = 0.0;
                    }
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, g.zip_map(out, |gg, c| gg * c.conj())),
                Op::Ln(a) => acc(*a, g.zip_map(&nodes[*a].value, |gg, x| gg / x.conj())),
                Op::Recip(a) => acc(*a, g.zip_map(out, |gg, c| -gg * (c * c).conj())),
                Op::Sqrt(a) => acc(*a, g.zip_map(out, |gg, c| gg / (2.0 * c.conj()))),
                Op::Abs2(a) => acc(*a, nodes[*a].value.zip_map(&g, |x, gg| x * (2.0 * gg.re))),
                Op::Real(a) => acc(*a, g.map(|gg| c64(gg.re, 0.0))),
                Op::Relu(a) => acc(
                    *a,
                    nodes[*a]
                        .value
                        .zip_map(&g, |x, gg| if x.re > 0.0 { c64(gg.re, 0.0) } else { c64(0.0, 0.0) }),
                ),
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, CMatrix::filled(r, c, g.as_scalar()));
                }
                Op::SumRows(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, CMatrix::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::SumCols(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, CMatrix::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::Shift(a) => acc(*a, g),
                Op::Reshape(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(*a, g.reshape(r, c));
                }
                Op::Gather(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = CMatrix::zeros(r, c);
                    for (m, &src) in idx.iter().enumerate() {
                        d.data_mut()[src] += g.data()[m];
                    }
                    acc(*a, d);
                }
                Op::HStack(ids) => {
                    let mut offset = 0;
                    for &p in ids {
                        let cols = nodes[p].value.cols();
                        let sel: Vec<usize> = (offset..offset + cols).collect();
                        acc(p, g.select_cols(&sel));
                        offset += cols;
                    }
                }
                Op::VStack(ids) => {
                    let mut offset = 0;
                    for &p in ids {
                        let (r, c) = nodes[p].value.shape();
                        let block = CMatrix::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec());
                        acc(p, block);
                        offset += r;
                    }
                }
                Op::ColumnPower(a, power) => {
                    let x = &nodes[*a].value;
                    let s = power.sqrt();
                    let mut d = CMatrix::zeros(x.rows(), x.cols());
                    for j in 0..x.cols() {
                        let r2: f64 = (0..x.rows()).map(|i| x[(i, j)].norm_sqr()).sum();
                        if r2 == 0.0 {
                            continue;
                        }
                        let r = r2.sqrt();
                        let proj: f64 = (0..x.rows()).map(|i| (g[(i, j)].conj() * x[(i, j)]).re).sum();
                        for i in 0..x.rows() {
                            d[(i, j)] = (g[(i, j)] - x[(i, j)] * (proj / r2)) * (s / r);
                        }
                    }
                    acc(*a, d);
                }
            }
        }
        let real: Vec<bool> = nodes.iter().map(|n| n.real_leaf).collect();
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
        Grads { grads, real, shapes }
    }
}

/// Adjoints produced by [`Tape::gradient`].
pub struct Grads {
    grads: Vec<Option<CMatrix>>,
    real: Vec<bool>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Adjoint of a leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> CMatrix {
        let (r, c) = self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) if self.real[v.id] => g.real_part(),
            Some(g) => g.clone(),
            None => CMatrix::zeros(r, c),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> CMatrix {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn scalar_value(&self) -> C64 {
        self.tape.nodes.borrow()[self.id].value.as_scalar()
    }

    fn unary(self, op: Op, f: impl FnOnce(&CMatrix) -> CMatrix) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)
        };
        self.tape.push(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&CMatrix, &CMatrix) -> CMatrix) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(value, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn adjoint(self) -> Var<'t> {
        self.unary(Op::Adjoint(self.id), |a| a.adjoint())
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn conj(self) -> Var<'t> {
        self.unary(Op::Conj(self.id), |a| a.conj())
    }

    pub fn scale(self, c: C64) -> Var<'t> {
        self.unary(Op::ScaleConst(self.id, c), |a| a.scale(c))
    }

    pub fn scale_real(self, c: f64) -> Var<'t> {
        self.scale(c64(c, 0.0))
    }

    /// `s · self` for a 1x1 node `s`.
    pub fn smul(self, s: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let sv = nodes[s.id].value.as_scalar();
            nodes[self.id].value.scale(sv)
        };
        self.tape.push(value, Op::Smul(s.id, self.id), &[s.id, self.id])
    }

    /// Scales column `j` by entry `j` of the row vector `s`.
    pub fn mul_cols(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::MulCols(self.id, s.id), |a, s| {
            assert_eq!(s.shape(), (1, a.cols()), "mul_cols shape");
            CMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * s[(0, j)])
        })
    }

    /// Scales row `i` by entry `i` of the column vector `s`.
    pub fn mul_rows(self, s: Var<'t>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let sv = &nodes[s.id].value;
            assert_eq!(sv.shape(), (a.rows(), 1), "mul_rows shape");
            CMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)] * sv[(i, 0)])
        };
        self.tape.push(value, Op::MulRows(s.id, self.id), &[s.id, self.id])
    }

    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Hadamard(self.id, other.id), |a, b| a.hadamard(b))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.hadamard(other.recip())
    }

    pub fn inverse(self) -> Result<Var<'t>> {
        let inv = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.inverse()?
        };
        Ok(self.tape.push(inv, Op::Inverse(self.id), &[self.id]))
    }

    pub fn diag_inv_plus(self, eps_diag: f64) -> Result<Var<'t>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            crate::numerics::diag_inv_plus(&nodes[self.id].value, eps_diag)?
        };
        Ok(self.tape.push(v, Op::DiagInvPlus(self.id), &[self.id]))
    }

    pub fn zero_diag_imag(self) -> Var<'t> {
        self.unary(Op::ZeroDiagImag(self.id), crate::numerics::zero_diag_imag)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(|z| z.exp()))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |a| a.map(|z| z.ln()))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |a| a.map(|z| z.inv()))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| a.map(|z| z.sqrt()))
    }

    pub fn abs2(self) -> Var<'t> {
        self.unary(Op::Abs2(self.id), |a| a.map(|z| c64(z.norm_sqr(), 0.0)))
    }

    pub fn re(self) -> Var<'t> {
        self.unary(Op::Real(self.id), |a| a.real_part())
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|z| c64(z.re.max(0.0), 0.0)))
    }

    /// `base^self` entrywise for real `base > 0`.
    pub fn pow_base(self, base: f64) -> Var<'t> {
        self.scale_real(base.ln()).exp()
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |a| CMatrix::scalar(a.data().iter().sum()))
    }

    /// Column sums as a 1 x cols row.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |a| {
            CMatrix::from_fn(1, a.cols(), |_, j| (0..a.rows()).map(|i| a[(i, j)]).sum())
        })
    }

    /// Row sums as a rows x 1 column.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |a| {
            CMatrix::from_fn(a.rows(), 1, |i, _| (0..a.cols()).map(|j| a[(i, j)]).sum())
        })
    }

    /// Adds a constant matrix.
    pub fn add_const(self, c: &CMatrix) -> Var<'t> {
        self.unary(Op::Shift(self.id), |a| a + c)
    }

    pub fn add_identity(self, s: C64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |a| a.add_identity(s))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |a| a.reshape(rows, cols))
    }

    /// Picks entries by flat row-major index into a `rows x cols` result.
    pub fn gather(self, idx: Vec<usize>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            CMatrix::from_vec(rows, cols, idx.iter().map(|&k| a.data()[k]).collect())
        };
        self.tape.push(value, Op::Gather(self.id, idx), &[self.id])
    }

    pub fn col(self, j: usize) -> Var<'t> {
        let (r, c) = self.shape();
        self.gather((0..r).map(|i| i * c + j).collect(), r, 1)
    }

    pub fn select_cols(self, cols: &[usize]) -> Var<'t> {
        let (r, c) = self.shape();
        let mut idx = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                idx.push(i * c + j);
            }
        }
        self.gather(idx, r, cols.len())
    }

    pub fn entry(self, i: usize, j: usize) -> Var<'t> {
        let (_, c) = self.shape();
        self.gather(vec![i * c + j], 1, 1)
    }

    /// Scales every nonzero column to squared norm `power`; zero columns stay zero.
    pub fn column_power(self, power: f64) -> Var<'t> {
        self.unary(Op::ColumnPower(self.id, power), |x| {
            let s = power.sqrt();
            let mut out = x.clone();
            for j in 0..x.cols() {
                let r: f64 = (0..x.rows()).map(|i| x[(i, j)].norm_sqr()).sum::<f64>().sqrt();
                for i in 0..x.rows() {
                    out[(i, j)] = if r > 0.0 { x[(i, j)] * (s / r) } else { c64(0.0, 0.0) };
                }
            }
            out
        })
    }
}

/// Central finite-difference gradient of `f` w.r.t. a real-split matrix argument.
pub fn finite_difference(
    f: &mut dyn FnMut(&CMatrix) -> f64,
    at: &CMatrix,
    step: f64,
    real_only: bool,
    entries: Option<&[usize]>,
) -> CMatrix {
    let mut g = CMatrix::zeros(at.rows(), at.cols());
    let all: Vec<usize> = (0..at.len()).collect();
    let idx = entries.unwrap_or(&all);
    let mut x = at.clone();
    for &k in idx {
        let orig = x.data()[k];
        x.data_mut()[k] = orig + c64(step, 0.0);
        let fp = f(&x);
        x.data_mut()[k] = orig - c64(step, 0.0);
        let fm = f(&x);
        let d_re = (fp - fm) / (2.0 * step);
        let mut d_im = 0.0;
        if !real_only {
            x.data_mut()[k] = orig + c64(0.0, step);
            let fp = f(&x);
            x.data_mut()[k] = orig - c64(0.0, step);
            let fm = f(&x);
            d_im = (fp - fm) / (2.0 * step);
        }
        x.data_mut()[k] = orig;
        g.data_mut()[k] = c64(d_re, d_im);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_m(rng: &mut Rng, r: usize, c: usize) -> CMatrix {
        rng.complex_normal_matrix(r, c, 1.0)
    }

    /// Checks the tape gradient of `build` w.r.t. its single argument against central differences.
    fn check(build: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>, at: CMatrix, real: bool) {
        let tape = Tape::new();
        let x = tape.param(at.clone(), real);
        let y = build(&tape, x);
        let g = tape.gradient(y).wrt(x);
        let mut f = |m: &CMatrix| {
            let t = Tape::new();
            let v = t.constant(m.clone());
            build(&t, v).scalar_value().re
        };
        let fd = finite_difference(&mut f, &at, 1e-6, real, None);
        let err = (&g - &fd).frob_norm() / fd.frob_norm().max(1e-8);
        assert!(err < 1e-6, "relative gradient error {err}\nad={g:?}\nfd={fd:?}");
    }

    #[test]
    fn quadratic_probe_gives_two_theta() {
        let mut rng = Rng::new(1);
        let theta = rand_m(&mut rng, 3, 2);
        let tape = Tape::new();
        let x = tape.param(theta.clone(), false);
        let loss = x.abs2().sum().re();
        let g = tape.gradient(loss).wrt(x);
        assert!(g.max_abs_diff(&theta.scale_real(2.0)) < 1e-15);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(CMatrix::identity(2), false);
        let y = tape.param(CMatrix::identity(2), false);
        let loss = x.abs2().sum().re();
        let g = tape.gradient(loss);
        assert_eq!(g.wrt(y), CMatrix::zeros(2, 2));
    }

    #[test]
    fn matmul_inverse_chain() {
        let mut rng = Rng::new(2);
        let b = rand_m(&mut rng, 3, 3);
        let a0 = rand_m(&mut rng, 3, 3).add_identity(c64(3.0, 0.0));
        check(
            move |t, x| {
                let bb = t.constant(b.clone());
                x.matmul(bb).inverse().unwrap().abs2().sum().re()
            },
            a0,
            false,
        );
    }

    #[test]
    fn elementwise_holomorphic_ops() {
        let mut rng = Rng::new(3);
        let a0 = rand_m(&mut rng, 2, 3).add_const_for_test(c64(2.0, 0.5));
        check(|_, x| x.exp().ln().sqrt().recip().abs2().sum().re(), a0.clone(), false);
        check(|_, x| x.hadamard(x.conj()).re().sum().re(), a0.clone(), false);
        check(|_, x| x.adjoint().matmul(x).transpose().abs2().sum().re(), a0, false);
    }

    #[test]
    fn real_leaf_phase_map() {
        let mut rng = Rng::new(4);
        let phi = rng.uniform_matrix(3, 2, -3.0, 3.0);
        let h = rand_m(&mut rng, 2, 3);
        check(
            move |t, p| {
                let f = p.scale(c64(0.0, 1.0)).exp();
                t.constant(h.clone()).matmul(f).abs2().sum().re()
            },
            phi,
            true,
        );
    }

    #[test]
    fn diag_ops_and_scaling() {
        let mut rng = Rng::new(5);
        let a0 = rand_m(&mut rng, 3, 3).add_identity(c64(4.0, 1.0));
        let s0 = rand_m(&mut rng, 1, 3);
        check(|_, x| x.diag_inv_plus(1e-12).unwrap().matmul(x.zero_diag_imag()).abs2().sum().re(), a0.clone(), false);
        let s = s0.clone();
        check(move |t, x| x.mul_cols(t.constant(s.clone())).abs2().sum().re(), a0.clone(), false);
        let a = a0.clone();
        check(move |t, s| t.constant(a.clone()).mul_cols(s).abs2().sum().re(), s0.clone(), false);
        let a = a0.clone();
        check(move |t, s| t.constant(a.clone()).mul_rows(s.transpose()).abs2().sum().re(), s0.clone(), false);
        let a = a0.clone();
        check(move |t, s| t.constant(a.clone()).smul(s.entry(0, 1)).abs2().sum().re(), s0, false);
    }

    #[test]
    fn structural_ops() {
        let mut rng = Rng::new(6);
        let a0 = rand_m(&mut rng, 2, 3);
        check(
            |t, x| {
                let s = t.hstack(&[x, x.col(1)]);
                let v = t.vstack(&[s, s.sum_rows()]);
                v.abs2().sum_cols().sum().re().add(x.select_cols(&[2, 0]).reshape(1, 4).abs2().sum().re())
            },
            a0.clone(),
            false,
        );
        check(|_, x| x.column_power(2.0).matmul(x.adjoint()).abs2().sum().re(), a0.clone(), false);
        check(|_, x| x.re().relu().add_const(&CMatrix::filled(2, 3, c64(0.1, 0.0))).sum().re(), a0, false);
    }

    #[test]
    fn column_power_zero_column_stays_zero() {
        let tape = Tape::new();
        let x = tape.param(CMatrix::from_real(2, 2, &[0.0, 3.0, 0.0, 4.0]), false);
        let y = x.column_power(1.0);
        let v = y.value();
        assert_eq!(v[(0, 0)], c64(0.0, 0.0));
        assert!((v[(1, 1)].re - 0.8).abs() < 1e-15);
        let g = tape.gradient(y.abs2().sum().re()).wrt(x);
        assert!(g.is_finite());
    }

    trait AddConstForTest {
        fn add_const_for_test(self, c: C64) -> CMatrix;
    }
    impl AddConstForTest for CMatrix {
        fn add_const_for_test(self, c: C64) -> CMatrix {
            self.map(|z| z + c)
        }
    }
}
