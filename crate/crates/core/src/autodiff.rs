//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records a straight-line program whose nodes are dense
//! matrices. Every node is created through one of the typed primitive
//! methods below, so the set of differentiable operations is closed:
//! arithmetic, matrix products, elementwise nonlinearities, and the
//! Cholesky / solve / log-determinant chain needed for Gaussian evidence.
//!
//! The Cholesky adjoint uses the symmetric form
//! `Abar = sym(L^-T Phi(L^T Lbar) L^-1)` where `Phi` keeps the lower triangle
//! and halves the diagonal. This is only a valid gradient for symmetric
//! perturbations of the input, which is the only way it is used.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{FedError, Result};
use crate::linalg::{self, CholeskyFactor, DenseMatrix};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Relu,
    Exp,
    Cos,
    Sin,
    Log,
    Square,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColumn(Var, Var),
    ScaleBy(Var, Var),
    ScaleConst(f64, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Unary, Var),
    Cholesky(Var),
    SolvePsd(Var, Var),
    LogDet(Var),
    Sum(Var),
    Trace(Var),
    VStack(Vec<Var>),
    Interleave(Vec<Var>),
    ReplicaProject { weights: Var, features: Var },
    Monomial { base: Var, exponents: Arc<DenseMatrix> },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).to_scalar()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// An input node. Parameters and constants are both leaves; whether a
    /// gradient is read back is up to the caller.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(DenseMatrix::scalar(value))
    }

    /// Registers every block of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamVector) -> Result<BoundParams> {
        let mut vars = HashMap::new();
        for b in params.layout().blocks() {
            let m = params.block_matrix(&b.name)?;
            vars.insert(b.name.clone(), self.leaf(m));
        }
        Ok(BoundParams { vars })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `a + b 1^T`: adds column vector `b` to every column of `a`.
    pub fn add_column(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (r, 1) {
            return Err(FedError::DimensionMismatch(format!("add_column: {r}x{c} plus {:?}", self.shape(b))));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let v = DenseMatrix::from_fn(r, c, |i, j| av[(i, j)] + bv[(i, 0)]);
        Ok(self.push(v, Op::AddColumn(a, b)))
    }

    /// Multiplies `a` by the 1x1 node `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(FedError::DimensionMismatch("scale_by needs a 1x1 scale".into()));
        }
        let v = self.value(a).scale(self.scalar_value(s));
        Ok(self.push(v, Op::ScaleBy(s, a)))
    }

    pub fn scale(&mut self, c: f64, a: Var) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::ScaleConst(c, a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Unary(f, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// Lower Cholesky factor of a symmetric positive definite node.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a))?;
        Ok(self.push(l.lower().clone(), Op::Cholesky(a)))
    }

    /// `(L L^T)^-1 b` where `l` is a node produced by [`Tape::cholesky`].
    pub fn solve_psd(&mut self, l: Var, b: Var) -> Result<Var> {
        let f = self.factor(l)?;
        let v = linalg::solve_psd(&f, self.value(b))?;
        Ok(self.push(v, Op::SolvePsd(l, b)))
    }

    /// `log |L L^T|` as a 1x1 node.
    pub fn logdet(&mut self, l: Var) -> Result<Var> {
        let f = self.factor(l)?;
        let v = DenseMatrix::scalar(linalg::logdet(&f));
        Ok(self.push(v, Op::LogDet(l)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = DenseMatrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_square() {
            return Err(FedError::DimensionMismatch("trace of a non-square node".into()));
        }
        let v = DenseMatrix::scalar(self.value(a).trace());
        Ok(self.push(v, Op::Trace(a)))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&DenseMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = DenseMatrix::vstack(&mats)?;
        Ok(self.push(v, Op::VStack(parts.to_vec())))
    }

    /// Interleaves rows of equally shaped parts: output row `i * k + j` is
    /// row `i` of part `j`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(FedError::DimensionMismatch("interleave of nothing".into()));
        };
        let (r, c) = self.shape(first);
        if parts.iter().any(|&p| self.shape(p) != (r, c)) {
            return Err(FedError::DimensionMismatch("interleave parts differ in shape".into()));
        }
        let k = parts.len();
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = DenseMatrix::from_raw(r * k, c, data);
        Ok(self.push(v, Op::Interleave(parts.to_vec())))
    }

    /// Per-replica projection. `weights` is `q x m`, `features` is
    /// `q x (m * n)` holding `m` replicas of an `n`-column block side by
    /// side. Output `(i, j) = sum_k weights[k, i] * features[k, i * n + j]`.
    pub fn replica_project(&mut self, weights: Var, features: Var) -> Result<Var> {
        let (q, m) = self.shape(weights);
        let (qf, total) = self.shape(features);
        if q != qf || m == 0 || total % m != 0 {
            return Err(FedError::DimensionMismatch(format!(
                "replica_project: weights {q}x{m}, features {qf}x{total}"
            )));
        }
        let n = total / m;
        let w = self.value(weights);
        let f = self.value(features);
        let v = DenseMatrix::from_fn(m, n, |i, j| (0..q).map(|k| w[(k, i)] * f[(k, i * n + j)]).sum());
        Ok(self.push(v, Op::ReplicaProject { weights, features }))
    }

    /// Monomial features. `base` is `q x n`, `exponents` is `m x q` with
    /// non-negative integer entries. Output `(i, j) = prod_k base[k, j]^e[i, k]`.
    pub fn monomial(&mut self, base: Var, exponents: Arc<DenseMatrix>) -> Result<Var> {
        let (q, n) = self.shape(base);
        if exponents.cols() != q {
            return Err(FedError::DimensionMismatch(format!(
                "monomial: base has {q} rows, exponents have {} columns",
                exponents.cols()
            )));
        }
        if exponents.as_slice().iter().any(|&e| e < 0.0 || e.fract() != 0.0) {
            return Err(FedError::DimensionMismatch("monomial exponents must be non-negative integers".into()));
        }
        let b = self.value(base);
        let m = exponents.rows();
        let v = DenseMatrix::from_fn(m, n, |i, j| (0..q).map(|k| b[(k, j)].powi(exponents[(i, k)] as i32)).product());
        Ok(self.push(v, Op::Monomial { base, exponents }))
    }

    fn factor(&self, l: Var) -> Result<CholeskyFactor> {
        match self.nodes[l.0].op {
            Op::Cholesky(_) => Ok(CholeskyFactor::from_lower(self.value(l).clone())?),
            _ => Err(FedError::DimensionMismatch("solve_psd/logdet expect a node produced by cholesky".into())),
        }
    }

    /// Reverse sweep from a 1x1 output node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(FedError::DimensionMismatch(format!(
                "gradient requested for a non-scalar {:?} output",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_adjoints(node, &g)?;
            grads[idx] = Some(g);
            for (v, c) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_adjoints(&self, node: &Node, g: &DenseMatrix) -> Result<Vec<(Var, DenseMatrix)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.hadamard(self.value(*b))?), (*b, g.hadamard(self.value(*a))?)],
            Op::AddColumn(a, b) => {
                let col: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                vec![(*a, g.clone()), (*b, DenseMatrix::column(&col))]
            }
            Op::ScaleBy(s, a) => {
                let av = self.value(*a);
                let ds = g.hadamard(av)?.sum();
                vec![(*s, DenseMatrix::scalar(ds)), (*a, g.scale(self.scalar_value(*s)))]
            }
            Op::ScaleConst(c, a) => vec![(*a, g.scale(*c))],
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                vec![(*a, g.matmul_transpose_b(bv)?), (*b, av.transpose().matmul(g)?)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Unary(f, a) => {
                let x = self.value(*a);
                let d = DenseMatrix::from_raw(
                    x.rows(),
                    x.cols(),
                    x.as_slice()
                        .iter()
                        .zip(out.as_slice())
                        .zip(g.as_slice())
                        .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                        .collect(),
                );
                vec![(*a, d)]
            }
            Op::Cholesky(a) => vec![(*a, cholesky_adjoint(out, g))],
            Op::SolvePsd(l, b) => {
                let lv = self.value(*l);
                let f = CholeskyFactor::from_lower(lv.clone())?;
                let gb = linalg::solve_psd(&f, g)?;
                // Lbar = -tril((Bbar X^T + X Bbar^T) L)
                let m = gb.matmul_transpose_b(out)?;
                let sym = m.add(&m.transpose())?;
                let gl = sym.matmul(lv)?.scale(-1.0).lower_triangle();
                vec![(*l, gl), (*b, gb)]
            }
            Op::LogDet(l) => {
                let lv = self.value(*l);
                let s = g.to_scalar();
                let n = lv.rows();
                let mut gl = DenseMatrix::zeros(n, n);
                for i in 0..n {
                    gl[(i, i)] = 2.0 * s / lv[(i, i)];
                }
                vec![(*l, gl)]
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                vec![(*a, DenseMatrix::filled(r, c, g.to_scalar()))]
            }
            Op::Trace(a) => {
                let n = self.shape(*a).0;
                let mut d = DenseMatrix::zeros(n, n);
                d.add_to_diagonal(g.to_scalar());
                vec![(*a, d)]
            }
            Op::VStack(parts) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = self.shape(p).0;
                    let idx: Vec<usize> = (start..start + rows).collect();
                    res.push((p, g.select_rows(&idx)));
                    start += rows;
                }
                res
            }
            Op::Interleave(parts) => {
                let k = parts.len();
                let r = self.shape(parts[0]).0;
                parts
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| {
                        let idx: Vec<usize> = (0..r).map(|i| i * k + j).collect();
                        (p, g.select_rows(&idx))
                    })
                    .collect()
            }
            Op::ReplicaProject { weights, features } => {
                let w = self.value(*weights);
                let f = self.value(*features);
                let (q, m) = w.shape();
                let n = g.cols();
                let mut gw = DenseMatrix::zeros(q, m);
                let mut gf = DenseMatrix::zeros(q, m * n);
                for i in 0..m {
                    let gi = g.row(i);
                    for k in 0..q {
                        let frow = &f.row(k)[i * n..(i + 1) * n];
                        gw[(k, i)] = linalg::dot(gi, frow);
                        let wki = w[(k, i)];
                        for (dst, &gv) in gf.row_mut(k)[i * n..(i + 1) * n].iter_mut().zip(gi) {
                            *dst = gv * wki;
                        }
                    }
                }
                vec![(*weights, gw), (*features, gf)]
            }
            Op::Monomial { base, exponents } => {
                let b = self.value(*base);
                let (q, n) = b.shape();
                let mut gb = DenseMatrix::zeros(q, n);
                for i in 0..exponents.rows() {
                    for j in 0..n {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            let ek = exponents[(i, k)] as i32;
                            if ek == 0 {
                                continue;
                            }
                            let mut d = f64::from(ek) * b[(k, j)].powi(ek - 1);
                            for kk in 0..q {
                                if kk != k {
                                    d *= b[(kk, j)].powi(exponents[(i, kk)] as i32);
                                }
                            }
                            gb[(k, j)] += gij * d;
                        }
                    }
                }
                vec![(*base, gb)]
            }
        })
    }
}

fn cholesky_adjoint(l: &DenseMatrix, g: &DenseMatrix) -> DenseMatrix {
    let lbar = g.lower_triangle();
    // P = Phi(L^T Lbar)
    let mut p = l.transpose().matmul(&lbar).expect("square factor").lower_triangle();
    for i in 0..p.rows() {
        p[(i, i)] *= 0.5;
    }
    // S = L^-T P L^-1
    let y = linalg::solve_lower_transpose(l, &p);
    let s = linalg::solve_lower_transpose(l, &y.transpose()).transpose();
    let st = s.transpose();
    s.add(&st).expect("same shape").scale(0.5)
}

/// Parameter blocks bound to tape leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| FedError::LayoutMismatch(format!("no parameter block `{name}`")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects gradients into a vector with the layout of `like`.
    pub fn gather(&self, grads: &Gradients, like: &ParamVector) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(like.layout().clone());
        for b in like.layout().blocks() {
            let v = self.get(&b.name)?;
            if let Some(g) = grads.get(v) {
                out.block_mut(&b.name)?.copy_from_slice(g.as_slice());
            }
        }
        Ok(out)
    }
}

pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A scalar objective built on a tape from bound parameters.
pub trait Objective: Fn(&mut Tape, &BoundParams) -> Result<Var> {}
impl<F: Fn(&mut Tape, &BoundParams) -> Result<Var>> Objective for F {}

pub fn evaluate(params: &ParamVector, loss: impl Objective) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = loss(&mut tape, &bound)?;
    if tape.shape(out) != (1, 1) {
        return Err(FedError::DimensionMismatch("loss must be 1x1".into()));
    }
    Ok(tape.scalar_value(out))
}

/// Value and exact reverse-mode gradient with respect to every parameter.
pub fn evaluate_with_gradient(params: &ParamVector, loss: impl Objective) -> Result<(f64, ParamVector)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar_value(out), bound.gather(&grads, params)?))
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_difference_gradient(params: &ParamVector, step: f64, loss: impl Objective) -> Result<ParamVector> {
    if !(step > 0.0) {
        return Err(FedError::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut out = ParamVector::zeros(params.layout().clone());
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + step;
        let up = evaluate(&probe, &loss)?;
        probe.values_mut()[i] = orig - step;
        let down = evaluate(&probe, &loss)?;
        probe.values_mut()[i] = orig;
        out.values_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(out)
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &ParamVector, b: &ParamVector) -> f64 {
    let diff: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
