//! Shared forward-computation contexts: plain evaluation and reverse-mode
//! differentiation.
//!
//! Every forward path (encoder stacks, adapters, losses) is written once,
//! generically over [`Ctx`]. [`PlainCtx`] evaluates values directly and is
//! used for inference; [`GradCtx`] additionally records an eager tape and
//! produces exact analytic gradients for every unfrozen parameter it
//! touched. Frozen parameters and backbone constants never enter the tape
//! as differentiable leaves, so they can never receive an update.

use crate::linalg::{self, Matrix, Vector};
use crate::params::{ParamId, ParamStore};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Abstract computation context over vectors (`V`) and scalars (`S`).
pub trait Ctx<'a> {
    type V: Clone;
    type S: Copy;

    fn store(&self) -> &'a ParamStore;

    fn input(&mut self, v: &Vector) -> Self::V;
    /// Multiplication by a frozen (non-trainable) matrix.
    fn const_matvec(&mut self, m: &'a Matrix, x: &Self::V) -> Self::V;
    /// Multiplication by a stored parameter; differentiable unless frozen.
    fn param_matvec(&mut self, p: ParamId, x: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn gelu(&mut self, x: &Self::V) -> Self::V;
    fn normalize(&mut self, x: &Self::V) -> Self::V;
    fn softmax(&mut self, x: &Self::V) -> Self::V;
    /// Top-k mask; the gradient treats the selected set as constant.
    fn topk_mask(&mut self, x: &Self::V, k: usize) -> Self::V;
    fn scale(&mut self, x: &Self::V, s: Self::S) -> Self::V;

    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::S;
    fn get(&mut self, x: &Self::V, i: usize) -> Self::S;
    fn constant(&mut self, c: f64) -> Self::S;
    fn s_add(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn s_mul(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn s_neg(&mut self, a: Self::S) -> Self::S;
    fn s_log(&mut self, a: Self::S) -> Self::S;
    fn s_sqrt(&mut self, a: Self::S) -> Self::S;
    fn s_recip(&mut self, a: Self::S) -> Self::S;
    fn s_scale(&mut self, a: Self::S, c: f64) -> Self::S;
    fn s_sum(&mut self, xs: &[Self::S]) -> Self::S;
    fn logsumexp(&mut self, xs: &[Self::S]) -> Self::S;

    /// Concrete forward value of a vector node.
    fn vector_value(&self, x: &Self::V) -> Vector;
    fn scalar_value(&self, s: Self::S) -> f64;
    /// Indices of the structurally nonzero entries of a (masked) vector.
    fn nonzero_indices(&self, x: &Self::V) -> Vec<usize> {
        self.vector_value(x)
            .data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

fn lse_slice(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Direct evaluation context. Also records every top-k selection it makes,
/// which the gradient checker uses to detect active-set flips.
pub struct PlainCtx<'a> {
    store: &'a ParamStore,
    pub topk_log: Vec<Vec<usize>>,
}

impl<'a> PlainCtx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        PlainCtx {
            store,
            topk_log: Vec::new(),
        }
    }
}

impl<'a> Ctx<'a> for PlainCtx<'a> {
    type V = Vector;
    type S = f64;

    fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn input(&mut self, v: &Vector) -> Vector {
        v.clone()
    }

    fn const_matvec(&mut self, m: &'a Matrix, x: &Vector) -> Vector {
        m.matvec(x).expect("const_matvec shape")
    }

    fn param_matvec(&mut self, p: ParamId, x: &Vector) -> Vector {
        self.store.value(p).matvec(x).expect("param_matvec shape")
    }

    fn add(&mut self, a: &Vector, b: &Vector) -> Vector {
        a.add(b)
    }

    fn gelu(&mut self, x: &Vector) -> Vector {
        Vector {
            data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        }
    }

    fn normalize(&mut self, x: &Vector) -> Vector {
        linalg::normalize(x).expect("normalize: zero norm")
    }

    fn softmax(&mut self, x: &Vector) -> Vector {
        Vector {
            data: linalg::softmax_slice(&x.data),
        }
    }

    fn topk_mask(&mut self, x: &Vector, k: usize) -> Vector {
        let kept = linalg::topk_indices(&x.data, k);
        let mut out = vec![0.0; x.dim()];
        for &i in &kept {
            out[i] = x.data[i];
        }
        self.topk_log.push(kept);
        Vector { data: out }
    }

    fn scale(&mut self, x: &Vector, s: f64) -> Vector {
        x.scale(s)
    }

    fn dot(&mut self, a: &Vector, b: &Vector) -> f64 {
        a.dot(b)
    }

    fn get(&mut self, x: &Vector, i: usize) -> f64 {
        x.data[i]
    }

    fn constant(&mut self, c: f64) -> f64 {
        c
    }

    fn s_add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }

    fn s_mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }

    fn s_neg(&mut self, a: f64) -> f64 {
        -a
    }

    fn s_log(&mut self, a: f64) -> f64 {
        a.ln()
    }

    fn s_sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }

    fn s_recip(&mut self, a: f64) -> f64 {
        1.0 / a
    }

    fn s_scale(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }

    fn s_sum(&mut self, xs: &[f64]) -> f64 {
        xs.iter().sum()
    }

    fn logsumexp(&mut self, xs: &[f64]) -> f64 {
        lse_slice(xs)
    }

    fn vector_value(&self, x: &Vector) -> Vector {
        x.clone()
    }

    fn scalar_value(&self, s: f64) -> f64 {
        s
    }
}

/// Vector node handle in a [`GradCtx`] tape.
#[derive(Debug, Clone, Copy)]
pub struct VId(usize);

/// Scalar node handle in a [`GradCtx`] tape.
#[derive(Debug, Clone, Copy)]
pub struct SId(usize);

enum Op<'a> {
    LeafV,
    LeafS,
    MatVecConst { m: &'a Matrix, x: usize },
    MatVecParam { p: ParamId, x: usize, trainable: bool },
    Add { a: usize, b: usize },
    Gelu { x: usize },
    Normalize { x: usize },
    Softmax { x: usize },
    TopkMask { x: usize, kept: Vec<usize> },
    Scale { x: usize, s: usize },
    Dot { a: usize, b: usize },
    Get { x: usize, i: usize },
    SAdd { a: usize, b: usize },
    SMul { a: usize, b: usize },
    SNeg { a: usize },
    SLog { a: usize },
    SSqrt { a: usize },
    SRecip { a: usize },
    SScale { a: usize, c: f64 },
    SSum { xs: Vec<usize> },
    LogSumExp { xs: Vec<usize> },
}

enum Val {
    V(Vector),
    S(f64),
}

impl Val {
    fn as_vec(&self) -> &Vector {
        match self {
            Val::V(v) => v,
            Val::S(_) => panic!("expected vector node"),
        }
    }

    fn as_scalar(&self) -> f64 {
        match self {
            Val::S(s) => *s,
            Val::V(_) => panic!("expected scalar node"),
        }
    }
}

/// Accumulated gradients for the unfrozen parameters touched by one loss
/// evaluation. Frozen parameters never appear.
#[derive(Debug, Clone)]
pub struct GradientTape {
    grads: Vec<Option<Matrix>>,
}

impl GradientTape {
    pub fn get(&self, p: ParamId) -> Option<&Matrix> {
        self.grads.get(p.0).and_then(|g| g.as_ref())
    }

    /// Parameters with recorded gradients, in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|m| (ParamId(i), m)))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

/// Eager reverse-mode tape.
pub struct GradCtx<'a> {
    store: &'a ParamStore,
    ops: Vec<Op<'a>>,
    vals: Vec<Val>,
}

impl<'a> GradCtx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        GradCtx {
            store,
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push_v(&mut self, op: Op<'a>, v: Vector) -> VId {
        self.ops.push(op);
        self.vals.push(Val::V(v));
        VId(self.ops.len() - 1)
    }

    fn push_s(&mut self, op: Op<'a>, s: f64) -> SId {
        self.ops.push(op);
        self.vals.push(Val::S(s));
        SId(self.ops.len() - 1)
    }

    fn vec(&self, i: usize) -> &Vector {
        self.vals[i].as_vec()
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// unfrozen parameter reachable from the root.
    pub fn backward(&self, root: SId) -> GradientTape {
        let n = self.ops.len();
        let mut adj_v: Vec<Option<Vector>> = (0..n).map(|_| None).collect();
        let mut adj_s: Vec<f64> = vec![0.0; n];
        let mut grads: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        adj_s[root.0] = 1.0;

        for i in (0..n).rev() {
            match &self.ops[i] {
                Op::LeafV | Op::LeafS => {}
                Op::MatVecConst { m, x } => {
                    if let Some(g) = adj_v[i].take() {
                        let gx = m.matvec_t(&g).expect("backward shape");
                        acc_v(&mut adj_v, *x, &gx);
                        adj_v[i] = Some(g);
                    }
                }
                Op::MatVecParam { p, x, trainable } => {
                    if let Some(g) = adj_v[i].take() {
                        let w = self.store.value(*p);
                        let gx = w.matvec_t(&g).expect("backward shape");
                        acc_v(&mut adj_v, *x, &gx);
                        if *trainable {
                            let slot = &mut grads[p.0];
                            let gm = slot.get_or_insert_with(|| Matrix::zeros(w.rows, w.cols));
                            gm.add_outer(&g, self.vec(*x));
                        }
                        adj_v[i] = Some(g);
                    }
                }
                Op::Add { a, b } => {
                    if let Some(g) = adj_v[i].take() {
                        acc_v(&mut adj_v, *a, &g);
                        acc_v(&mut adj_v, *b, &g);
                        adj_v[i] = Some(g);
                    }
                }
                Op::Gelu { x } => {
                    if let Some(g) = adj_v[i].take() {
                        let xin = self.vec(*x);
                        let gx = Vector {
                            data: g
                                .data
                                .iter()
                                .zip(xin.data.iter())
                                .map(|(gi, &xi)| gi * gelu_grad_scalar(xi))
                                .collect(),
                        };
                        acc_v(&mut adj_v, *x, &gx);
                        adj_v[i] = Some(g);
                    }
                }
                Op::Normalize { x } => {
                    if let Some(g) = adj_v[i].take() {
                        let y = self.vec(i);
                        let n = self.vec(*x).norm();
                        let gy = g.dot(y);
                        let gx = Vector {
                            data: g
                                .data
                                .iter()
                                .zip(y.data.iter())
                                .map(|(gi, yi)| (gi - gy * yi) / n)
                                .collect(),
                        };
                        acc_v(&mut adj_v, *x, &gx);
                        adj_v[i] = Some(g);
                    }
                }
                Op::Softmax { x } => {
                    if let Some(g) = adj_v[i].take() {
                        let y = self.vec(i);
                        let gy = g.dot(y);
                        let gx = Vector {
                            data: g
                                .data
                                .iter()
                                .zip(y.data.iter())
                                .map(|(gi, yi)| yi * (gi - gy))
                                .collect(),
                        };
                        acc_v(&mut adj_v, *x, &gx);
                        adj_v[i] = Some(g);
                    }
                }
                Op::TopkMask { x, kept } => {
                    if let Some(g) = adj_v[i].take() {
                        let mut gx = Vector::zeros(g.dim());
                        for &j in kept {
                            gx.data[j] = g.data[j];
                        }
                        acc_v(&mut adj_v, *x, &gx);
                        adj_v[i] = Some(g);
                    }
                }
                Op::Scale { x, s } => {
                    if let Some(g) = adj_v[i].take() {
                        let sv = self.vals[*s].as_scalar();
                        acc_v(&mut adj_v, *x, &g.scale(sv));
                        adj_s[*s] += g.dot(self.vec(*x));
                        adj_v[i] = Some(g);
                    }
                }
                Op::Dot { a, b } => {
                    let g = adj_s[i];
                    if g != 0.0 {
                        acc_v(&mut adj_v, *a, &self.vec(*b).scale(g));
                        acc_v(&mut adj_v, *b, &self.vec(*a).scale(g));
                    }
                }
                Op::Get { x, i: idx } => {
                    let g = adj_s[i];
                    if g != 0.0 {
                        let dim = self.vec(*x).dim();
                        let mut gx = Vector::zeros(dim);
                        gx.data[*idx] = g;
                        acc_v(&mut adj_v, *x, &gx);
                    }
                }
                Op::SAdd { a, b } => {
                    let g = adj_s[i];
                    adj_s[*a] += g;
                    adj_s[*b] += g;
                }
                Op::SMul { a, b } => {
                    let g = adj_s[i];
                    adj_s[*a] += g * self.vals[*b].as_scalar();
                    adj_s[*b] += g * self.vals[*a].as_scalar();
                }
                Op::SNeg { a } => {
                    adj_s[*a] -= adj_s[i];
                }
                Op::SLog { a } => {
                    adj_s[*a] += adj_s[i] / self.vals[*a].as_scalar();
                }
                Op::SSqrt { a } => {
                    adj_s[*a] += adj_s[i] / (2.0 * self.vals[i].as_scalar());
                }
                Op::SRecip { a } => {
                    let y = self.vals[i].as_scalar();
                    adj_s[*a] -= adj_s[i] * y * y;
                }
                Op::SScale { a, c } => {
                    adj_s[*a] += adj_s[i] * c;
                }
                Op::SSum { xs } => {
                    let g = adj_s[i];
                    for &x in xs {
                        adj_s[x] += g;
                    }
                }
                Op::LogSumExp { xs } => {
                    let g = adj_s[i];
                    let y = self.vals[i].as_scalar();
                    for &x in xs {
                        adj_s[x] += g * (self.vals[x].as_scalar() - y).exp();
                    }
                }
            }
        }

        GradientTape { grads }
    }
}

fn acc_v(adj: &mut [Option<Vector>], i: usize, g: &Vector) {
    match &mut adj[i] {
        Some(cur) => {
            for (c, gi) in cur.data.iter_mut().zip(g.data.iter()) {
                *c += gi;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

impl<'a> Ctx<'a> for GradCtx<'a> {
    type V = VId;
    type S = SId;

    fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn input(&mut self, v: &Vector) -> VId {
        self.push_v(Op::LeafV, v.clone())
    }

    fn const_matvec(&mut self, m: &'a Matrix, x: &VId) -> VId {
        let v = m.matvec(self.vec(x.0)).expect("const_matvec shape");
        self.push_v(Op::MatVecConst { m, x: x.0 }, v)
    }

    fn param_matvec(&mut self, p: ParamId, x: &VId) -> VId {
        let v = self
            .store
            .value(p)
            .matvec(self.vec(x.0))
            .expect("param_matvec shape");
        let trainable = !self.store.is_frozen(p);
        self.push_v(Op::MatVecParam { p, x: x.0, trainable }, v)
    }

    fn add(&mut self, a: &VId, b: &VId) -> VId {
        let v = self.vec(a.0).add(self.vec(b.0));
        self.push_v(Op::Add { a: a.0, b: b.0 }, v)
    }

    fn gelu(&mut self, x: &VId) -> VId {
        let v = Vector {
            data: self.vec(x.0).data.iter().map(|&t| gelu_scalar(t)).collect(),
        };
        self.push_v(Op::Gelu { x: x.0 }, v)
    }

    fn normalize(&mut self, x: &VId) -> VId {
        let v = linalg::normalize(self.vec(x.0)).expect("normalize: zero norm");
        self.push_v(Op::Normalize { x: x.0 }, v)
    }

    fn softmax(&mut self, x: &VId) -> VId {
        let v = Vector {
            data: linalg::softmax_slice(&self.vec(x.0).data),
        };
        self.push_v(Op::Softmax { x: x.0 }, v)
    }

    fn topk_mask(&mut self, x: &VId, k: usize) -> VId {
        let xv = self.vec(x.0);
        let kept = linalg::topk_indices(&xv.data, k);
        let mut out = vec![0.0; xv.dim()];
        for &i in &kept {
            out[i] = xv.data[i];
        }
        self.push_v(Op::TopkMask { x: x.0, kept }, Vector { data: out })
    }

    fn scale(&mut self, x: &VId, s: SId) -> VId {
        let sv = self.vals[s.0].as_scalar();
        let v = self.vec(x.0).scale(sv);
        self.push_v(Op::Scale { x: x.0, s: s.0 }, v)
    }

    fn dot(&mut self, a: &VId, b: &VId) -> SId {
        let v = self.vec(a.0).dot(self.vec(b.0));
        self.push_s(Op::Dot { a: a.0, b: b.0 }, v)
    }

    fn get(&mut self, x: &VId, i: usize) -> SId {
        let v = self.vec(x.0).data[i];
        self.push_s(Op::Get { x: x.0, i }, v)
    }

    fn constant(&mut self, c: f64) -> SId {
        self.push_s(Op::LeafS, c)
    }

    fn s_add(&mut self, a: SId, b: SId) -> SId {
        let v = self.vals[a.0].as_scalar() + self.vals[b.0].as_scalar();
        self.push_s(Op::SAdd { a: a.0, b: b.0 }, v)
    }

    fn s_mul(&mut self, a: SId, b: SId) -> SId {
        let v = self.vals[a.0].as_scalar() * self.vals[b.0].as_scalar();
        self.push_s(Op::SMul { a: a.0, b: b.0 }, v)
    }

    fn s_neg(&mut self, a: SId) -> SId {
        let v = -self.vals[a.0].as_scalar();
        self.push_s(Op::SNeg { a: a.0 }, v)
    }

    fn s_log(&mut self, a: SId) -> SId {
        let v = self.vals[a.0].as_scalar().ln();
        self.push_s(Op::SLog { a: a.0 }, v)
    }

    fn s_sqrt(&mut self, a: SId) -> SId {
        let v = self.vals[a.0].as_scalar().sqrt();
        self.push_s(Op::SSqrt { a: a.0 }, v)
    }

    fn s_recip(&mut self, a: SId) -> SId {
        let v = 1.0 / self.vals[a.0].as_scalar();
        self.push_s(Op::SRecip { a: a.0 }, v)
    }

    fn s_scale(&mut self, a: SId, c: f64) -> SId {
        let v = self.vals[a.0].as_scalar() * c;
        self.push_s(Op::SScale { a: a.0, c }, v)
    }

    fn s_sum(&mut self, xs: &[SId]) -> SId {
        let v: f64 = xs.iter().map(|s| self.vals[s.0].as_scalar()).sum();
        let ids = xs.iter().map(|s| s.0).collect();
        self.push_s(Op::SSum { xs: ids }, v)
    }

    fn logsumexp(&mut self, xs: &[SId]) -> SId {
        let vals: Vec<f64> = xs.iter().map(|s| self.vals[s.0].as_scalar()).collect();
        let v = lse_slice(&vals);
        let ids = xs.iter().map(|s| s.0).collect();
        self.push_s(Op::LogSumExp { xs: ids }, v)
    }

    fn vector_value(&self, x: &VId) -> Vector {
        self.vec(x.0).clone()
    }

    fn scalar_value(&self, s: SId) -> f64 {
        self.vals[s.0].as_scalar()
    }
}
