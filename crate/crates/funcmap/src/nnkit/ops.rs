//! Primitive differentiable operations.
//!
//! Each op computes its output eagerly and registers a backward node on the
//! tape. Convolution is im2col + GEMM, processed in bounded batch chunks so
//! large activations never materialize whole-column buffers.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, Zip};
use rayon::prelude::*;

use super::tape::{BackOp, Sink, Tape, Var};
use super::{NnError, Scalar};

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinBack<F> {
    kind: BinKind,
    a: usize,
    b: usize,
    _m: std::marker::PhantomData<F>,
}

impl<F: Scalar> BackOp<F> for BinBack<F> {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        match self.kind {
            BinKind::Add => {
                sink.add(self.a, g.clone());
                sink.add(self.b, g.clone());
            }
            BinKind::Sub => {
                sink.add(self.a, g.clone());
                sink.add(self.b, -g.clone());
            }
            BinKind::Mul => {
                sink.add(self.a, g * &vals[self.b]);
                sink.add(self.b, g * &vals[self.a]);
            }
            BinKind::Div => {
                let vb = &vals[self.b];
                sink.add(self.a, g / vb);
                let gb = g * &vals[self.a] / (vb * vb);
                sink.add(self.b, -gb);
            }
        }
    }
}

fn binary<F: Scalar>(t: &mut Tape<F>, kind: BinKind, a: Var, b: Var) -> Var {
    assert_eq!(
        t.value(a).shape(),
        t.value(b).shape(),
        "elementwise op on mismatched shapes"
    );
    let out = match kind {
        BinKind::Add => t.value(a) + t.value(b),
        BinKind::Sub => t.value(a) - t.value(b),
        BinKind::Mul => t.value(a) * t.value(b),
        BinKind::Div => t.value(a) / t.value(b),
    };
    let needs = t.needs_grad(a) || t.needs_grad(b);
    t.push(out, needs, Some(Box::new(BinBack { kind, a: a.0, b: b.0, _m: Default::default() })))
}

pub fn add<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    binary(t, BinKind::Add, a, b)
}
pub fn sub<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    binary(t, BinKind::Sub, a, b)
}
pub fn mul<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    binary(t, BinKind::Mul, a, b)
}
pub fn div<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    binary(t, BinKind::Div, a, b)
}

// ---------------------------------------------------------------------------
// Scalar and constant variants
// ---------------------------------------------------------------------------

struct ScaleBack<F: Scalar> {
    a: usize,
    c: F,
}

impl<F: Scalar> BackOp<F> for ScaleBack<F> {
    fn backward(&self, _vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        sink.add(self.a, g * self.c);
    }
}

pub fn scale<F: Scalar>(t: &mut Tape<F>, a: Var, c: F) -> Var {
    let out = t.value(a) * c;
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(ScaleBack { a: a.0, c })))
}

struct PassBack {
    a: usize,
}

impl<F: Scalar> BackOp<F> for PassBack {
    fn backward(&self, _vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        sink.add(self.a, g.clone());
    }
}

pub fn add_scalar<F: Scalar>(t: &mut Tape<F>, a: Var, c: F) -> Var {
    let out = t.value(a) + c;
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(PassBack { a: a.0 })))
}

/// Add a constant array (no gradient to the constant).
pub fn add_const<F: Scalar>(t: &mut Tape<F>, a: Var, c: &ArrayD<F>) -> Var {
    let out = t.value(a) + c;
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(PassBack { a: a.0 })))
}

struct MulConstBack<F: Scalar> {
    a: usize,
    c: ArrayD<F>,
}

impl<F: Scalar> BackOp<F> for MulConstBack<F> {
    fn backward(&self, _vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        sink.add(self.a, g * &self.c);
    }
}

/// Elementwise multiply by a constant array (no gradient to the constant).
pub fn mul_const<F: Scalar>(t: &mut Tape<F>, a: Var, c: &ArrayD<F>) -> Var {
    assert_eq!(t.value(a).shape(), c.shape(), "mul_const shape mismatch");
    let out = t.value(a) * c;
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(MulConstBack { a: a.0, c: c.clone() })))
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    Square,
}

fn unary_forward<F: Scalar>(kind: Unary, x: F) -> F {
    let half = F::from_f64(0.5);
    match kind {
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => F::one() / (F::one() + (-x).exp()),
        Unary::Gelu => {
            // Exact erf-based form: x * Phi(x).
            let phi = half * (F::one() + (x / F::from_f64(std::f64::consts::SQRT_2)).erf());
            x * phi
        }
        Unary::Relu => {
            if x > F::zero() {
                x
            } else {
                F::zero()
            }
        }
        Unary::Square => x * x,
    }
}

fn unary_grad<F: Scalar>(kind: Unary, x: F, y: F) -> F {
    let half = F::from_f64(0.5);
    match kind {
        Unary::Exp => y,
        Unary::Ln => F::one() / x,
        Unary::Sqrt => half / y,
        Unary::Tanh => F::one() - y * y,
        Unary::Sigmoid => y * (F::one() - y),
        Unary::Gelu => {
            let cdf = half * (F::one() + (x / F::from_f64(std::f64::consts::SQRT_2)).erf());
            let pdf = (-(x * x) * half).exp()
                * F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            cdf + x * pdf
        }
        Unary::Relu => {
            if x > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
        Unary::Square => F::from_f64(2.0) * x,
    }
}

struct UnaryBack {
    kind: Unary,
    a: usize,
    out: usize,
}

impl<F: Scalar> BackOp<F> for UnaryBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = &vals[self.a];
        let y = &vals[self.out];
        let mut dx = g.clone();
        Zip::from(&mut dx).and(x).and(y).for_each(|d, &xv, &yv| {
            *d = *d * unary_grad(self.kind, xv, yv);
        });
        sink.add(self.a, dx);
    }
}

pub fn unary<F: Scalar>(t: &mut Tape<F>, a: Var, kind: Unary) -> Var {
    let out = t.value(a).mapv(|x| unary_forward(kind, x));
    let needs = t.needs_grad(a);
    let out_id = t.len();
    t.push(out, needs, Some(Box::new(UnaryBack { kind, a: a.0, out: out_id })))
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllBack<F: Scalar> {
    a: usize,
    scale: F,
}

impl<F: Scalar> BackOp<F> for SumAllBack<F> {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let gv = g.iter().next().copied().unwrap_or(F::zero()) * self.scale;
        sink.add(self.a, ArrayD::from_elem(vals[self.a].raw_dim(), gv));
    }
}

pub fn sum_all<F: Scalar>(t: &mut Tape<F>, a: Var) -> Var {
    let s = t.value(a).sum();
    let needs = t.needs_grad(a);
    t.push(
        ArrayD::from_elem(ndarray::IxDyn(&[1]), s),
        needs,
        Some(Box::new(SumAllBack { a: a.0, scale: F::one() })),
    )
}

pub fn mean_all<F: Scalar>(t: &mut Tape<F>, a: Var) -> Var {
    let n = F::from_usize(t.value(a).len()).unwrap();
    let s = t.value(a).sum() / n;
    let needs = t.needs_grad(a);
    t.push(
        ArrayD::from_elem(ndarray::IxDyn(&[1]), s),
        needs,
        Some(Box::new(SumAllBack { a: a.0, scale: F::one() / n })),
    )
}

struct SumAxisBack {
    a: usize,
    axis: usize,
    mean: bool,
}

impl<F: Scalar> BackOp<F> for SumAxisBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let shape = vals[self.a].shape().to_vec();
        let n = shape[self.axis];
        let mut gx = g.clone().insert_axis(Axis(self.axis));
        if self.mean {
            gx /= F::from_usize(n).unwrap();
        }
        let gx = gx.broadcast(shape.as_slice()).unwrap().to_owned();
        sink.add(self.a, gx);
    }
}

/// Sum over one axis (the axis is removed from the shape).
pub fn sum_axis<F: Scalar>(t: &mut Tape<F>, a: Var, axis: usize) -> Var {
    let out = t.value(a).sum_axis(Axis(axis));
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(SumAxisBack { a: a.0, axis, mean: false })))
}

pub fn mean_axis<F: Scalar>(t: &mut Tape<F>, a: Var, axis: usize) -> Var {
    let out = t.value(a).mean_axis(Axis(axis)).expect("mean over empty axis");
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(SumAxisBack { a: a.0, axis, mean: true })))
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

struct ReshapeBack {
    a: usize,
}

impl<F: Scalar> BackOp<F> for ReshapeBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let shape = vals[self.a].shape().to_vec();
        let gx = g
            .to_owned()
            .into_shape_with_order(shape.as_slice())
            .expect("reshape backward shape");
        sink.add(self.a, gx);
    }
}

pub fn reshape<F: Scalar>(t: &mut Tape<F>, a: Var, shape: &[usize]) -> Var {
    let out = t
        .value(a)
        .to_owned()
        .into_shape_with_order(shape)
        .expect("reshape: element count mismatch");
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(ReshapeBack { a: a.0 })))
}

struct PermuteBack {
    a: usize,
    inverse: Vec<usize>,
}

impl<F: Scalar> BackOp<F> for PermuteBack {
    fn backward(&self, _vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let gx = g.view().permuted_axes(self.inverse.as_slice()).to_owned();
        sink.add(self.a, gx);
    }
}

pub fn permute<F: Scalar>(t: &mut Tape<F>, a: Var, axes: &[usize]) -> Var {
    let out = t.value(a).view().permuted_axes(axes).to_owned();
    let mut inverse = vec![0usize; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inverse[ax] = i;
    }
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(PermuteBack { a: a.0, inverse })))
}

struct ConcatBack {
    parents: Vec<usize>,
    axis: usize,
}

impl<F: Scalar> BackOp<F> for ConcatBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let mut offset = 0;
        for &p in &self.parents {
            let len = vals[p].shape()[self.axis];
            let gx = g
                .slice_axis(Axis(self.axis), ndarray::Slice::from(offset..offset + len))
                .to_owned();
            sink.add(p, gx);
            offset += len;
        }
    }
}

pub fn concat<F: Scalar>(t: &mut Tape<F>, axis: usize, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat of zero parts");
    let views: Vec<_> = parts.iter().map(|v| t.value(*v).view()).collect();
    let out = concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let needs = parts.iter().any(|v| t.needs_grad(*v));
    t.push(
        out,
        needs,
        Some(Box::new(ConcatBack { parents: parts.iter().map(|v| v.0).collect(), axis })),
    )
}

struct SliceAxisBack {
    a: usize,
    axis: usize,
    start: usize,
}

impl<F: Scalar> BackOp<F> for SliceAxisBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let mut gx = ArrayD::zeros(vals[self.a].raw_dim());
        let len = g.shape()[self.axis];
        gx.slice_axis_mut(Axis(self.axis), ndarray::Slice::from(self.start..self.start + len))
            .assign(g);
        sink.add(self.a, gx);
    }
}

pub fn slice_axis<F: Scalar>(t: &mut Tape<F>, a: Var, axis: usize, start: usize, end: usize) -> Var {
    let out = t
        .value(a)
        .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
        .to_owned();
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(SliceAxisBack { a: a.0, axis, start })))
}

struct RepeatBack {
    a: usize,
    axis: usize,
}

impl<F: Scalar> BackOp<F> for RepeatBack {
    fn backward(&self, _vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        sink.add(self.a, g.sum_axis(Axis(self.axis)));
    }
}

/// Insert a new axis of length `n` at `axis` by repetition.
pub fn repeat_new_axis<F: Scalar>(t: &mut Tape<F>, a: Var, axis: usize, n: usize) -> Var {
    let expanded = t.value(a).clone().insert_axis(Axis(axis));
    let mut shape = expanded.shape().to_vec();
    shape[axis] = n;
    let out = expanded.broadcast(shape.as_slice()).unwrap().to_owned();
    let needs = t.needs_grad(a);
    t.push(out, needs, Some(Box::new(RepeatBack { a: a.0, axis })))
}

// ---------------------------------------------------------------------------
// Row-scalar division (for normalization and Pearson terms)
// ---------------------------------------------------------------------------

struct DivRowBack {
    a: usize,
    s: usize,
}

impl<F: Scalar> BackOp<F> for DivRowBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let a = vals[self.a].view().into_dimensionality::<Ix2>().unwrap();
        let s = &vals[self.s];
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        let (n, d) = a.dim();
        let mut da = Array2::<F>::zeros((n, d));
        let mut ds = Array1::<F>::zeros(n);
        for i in 0..n {
            let si = s[[i]];
            let inv = F::one() / si;
            let mut acc = F::zero();
            for j in 0..d {
                da[[i, j]] = g2[[i, j]] * inv;
                acc += g2[[i, j]] * a[[i, j]];
            }
            ds[[i]] = -acc * inv * inv;
        }
        sink.add(self.a, da.into_dyn());
        sink.add(self.s, ds.into_dyn());
    }
}

/// `y[i, j] = a[i, j] / s[i]` for a 2-D `a` and 1-D `s`.
pub fn div_by_row_scalar<F: Scalar>(t: &mut Tape<F>, a: Var, s: Var) -> Var {
    let av = t.value(a).view().into_dimensionality::<Ix2>().expect("div_by_row_scalar: 2-D");
    let sv = &t.value(s);
    assert_eq!(av.nrows(), sv.len(), "row scalar length mismatch");
    let mut out = av.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let inv = F::one() / sv[[i]];
        row.mapv_inplace(|v| v * inv);
    }
    let needs = t.needs_grad(a) || t.needs_grad(s);
    t.push(out.into_dyn(), needs, Some(Box::new(DivRowBack { a: a.0, s: s.0 })))
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

struct MatmulBack {
    a: usize,
    b: usize,
}

impl<F: Scalar> BackOp<F> for MatmulBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let a = vals[self.a].view().into_dimensionality::<Ix2>().unwrap();
        let b = vals[self.b].view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        sink.add(self.a, g2.dot(&b.t()).into_dyn());
        sink.add(self.b, a.t().dot(&g2).into_dyn());
    }
}

pub fn matmul<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    let av = t.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
    let bv = t.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
    let out = av.dot(&bv).into_dyn();
    let needs = t.needs_grad(a) || t.needs_grad(b);
    t.push(out, needs, Some(Box::new(MatmulBack { a: a.0, b: b.0 })))
}

/// `y = a · bᵀ` for 2-D `a` (n, k) and `b` (m, k).
struct MatmulNtBack {
    a: usize,
    b: usize,
}

impl<F: Scalar> BackOp<F> for MatmulNtBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let a = vals[self.a].view().into_dimensionality::<Ix2>().unwrap();
        let b = vals[self.b].view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        sink.add(self.a, g2.dot(&b).into_dyn());
        sink.add(self.b, g2.t().dot(&a).into_dyn());
    }
}

pub fn matmul_nt<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    let av = t.value(a).view().into_dimensionality::<Ix2>().expect("matmul_nt lhs 2-D");
    let bv = t.value(b).view().into_dimensionality::<Ix2>().expect("matmul_nt rhs 2-D");
    let out = av.dot(&bv.t()).into_dyn();
    let needs = t.needs_grad(a) || t.needs_grad(b);
    t.push(out, needs, Some(Box::new(MatmulNtBack { a: a.0, b: b.0 })))
}

fn bmm3<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, bt: bool) -> Array3<F> {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
    let (bb, m, _k) = a3.dim();
    let n = if bt { b3.dim().1 } else { b3.dim().2 };
    let mut out = Array3::<F>::zeros((bb, m, n));
    Zip::from(out.outer_iter_mut())
        .and(a3.outer_iter())
        .and(b3.outer_iter())
        .par_for_each(|mut o, av, bv| {
            if bt {
                o.assign(&av.dot(&bv.t()));
            } else {
                o.assign(&av.dot(&bv));
            }
        });
    out
}

struct BmmBack {
    a: usize,
    b: usize,
    bt: bool,
}

impl<F: Scalar> BackOp<F> for BmmBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let a = vals[self.a].view().into_dimensionality::<Ix3>().unwrap();
        let b = vals[self.b].view().into_dimensionality::<Ix3>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let mut da = Array3::<F>::zeros(a.dim());
        let mut db = Array3::<F>::zeros(b.dim());
        if self.bt {
            // y = a·bᵀ → da = g·b ; db = gᵀ·a
            Zip::from(da.outer_iter_mut())
                .and(g3.outer_iter())
                .and(b.outer_iter())
                .par_for_each(|mut o, gv, bv| o.assign(&gv.dot(&bv)));
            Zip::from(db.outer_iter_mut())
                .and(g3.outer_iter())
                .and(a.outer_iter())
                .par_for_each(|mut o, gv, av| o.assign(&gv.t().dot(&av)));
        } else {
            // y = a·b → da = g·bᵀ ; db = aᵀ·g
            Zip::from(da.outer_iter_mut())
                .and(g3.outer_iter())
                .and(b.outer_iter())
                .par_for_each(|mut o, gv, bv| o.assign(&gv.dot(&bv.t())));
            Zip::from(db.outer_iter_mut())
                .and(a.outer_iter())
                .and(g3.outer_iter())
                .par_for_each(|mut o, av, gv| o.assign(&av.t().dot(&gv)));
        }
        sink.add(self.a, da.into_dyn());
        sink.add(self.b, db.into_dyn());
    }
}

/// Batched matmul `y[i] = a[i] · b[i]` over the leading axis.
pub fn bmm<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    let out = bmm3(t.value(a), t.value(b), false).into_dyn();
    let needs = t.needs_grad(a) || t.needs_grad(b);
    t.push(out, needs, Some(Box::new(BmmBack { a: a.0, b: b.0, bt: false })))
}

/// Batched matmul with transposed rhs: `y[i] = a[i] · b[i]ᵀ`.
pub fn bmm_nt<F: Scalar>(t: &mut Tape<F>, a: Var, b: Var) -> Var {
    let out = bmm3(t.value(a), t.value(b), true).into_dyn();
    let needs = t.needs_grad(a) || t.needs_grad(b);
    t.push(out, needs, Some(Box::new(BmmBack { a: a.0, b: b.0, bt: true })))
}

// ---------------------------------------------------------------------------
// Linear layer (y = x·Wᵀ + bias)
// ---------------------------------------------------------------------------

struct LinearBack {
    x: usize,
    w: usize,
    b: usize,
}

impl<F: Scalar> BackOp<F> for LinearBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = vals[self.x].view().into_dimensionality::<Ix2>().unwrap();
        let w = vals[self.w].view().into_dimensionality::<Ix2>().unwrap();
        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
        sink.add(self.x, g2.dot(&w).into_dyn());
        sink.add(self.w, g2.t().dot(&x).into_dyn());
        sink.add(self.b, g2.sum_axis(Axis(0)).into_dyn());
    }
}

/// Dense layer on 2-D input (rows are samples): `y = x Wᵀ + b`,
/// with `w` shaped (out, in) and `b` shaped (out,).
pub fn linear<F: Scalar>(t: &mut Tape<F>, x: Var, w: Var, b: Var) -> Var {
    let xv = t.value(x).view().into_dimensionality::<Ix2>().expect("linear input 2-D");
    let wv = t.value(w).view().into_dimensionality::<Ix2>().expect("linear weight 2-D");
    assert_eq!(xv.ncols(), wv.ncols(), "linear in-features mismatch");
    let mut out = xv.dot(&wv.t());
    let bv = &t.value(b);
    for mut row in out.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += bv[[j]];
        }
    }
    let needs = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
    t.push(out.into_dyn(), needs, Some(Box::new(LinearBack { x: x.0, w: w.0, b: b.0 })))
}

// ---------------------------------------------------------------------------
// Masked softmax over the last axis
// ---------------------------------------------------------------------------

struct SoftmaxBack {
    a: usize,
    out: usize,
}

impl<F: Scalar> BackOp<F> for SoftmaxBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let y = &vals[self.out];
        let d = y.shape()[y.ndim() - 1];
        let mut gx = g.clone();
        let yv = y.as_slice().expect("softmax output contiguous");
        let gs = gx.as_slice_mut().expect("softmax grad contiguous");
        gs.par_chunks_mut(d).zip(yv.par_chunks(d)).for_each(|(grow, yrow)| {
            let mut dot = F::zero();
            for (gv, yv) in grow.iter().zip(yrow) {
                dot += *gv * *yv;
            }
            for (gv, yv) in grow.iter_mut().zip(yrow) {
                *gv = *yv * (*gv - dot);
            }
        });
        sink.add(self.a, gx);
    }
}

/// Softmax over the last axis. `mask`, when given, has the same shape with
/// `false` marking entries excluded from the distribution (they receive
/// exactly zero weight). A row with every entry masked is an error.
pub fn softmax_lastdim<F: Scalar>(
    t: &mut Tape<F>,
    a: Var,
    mask: Option<&ArrayD<bool>>,
) -> Result<Var, NnError> {
    let x = t.value(a);
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(NnError::Shape(format!(
                "softmax mask {:?} vs input {:?}",
                m.shape(),
                x.shape()
            )));
        }
    }
    let d = x.shape()[x.ndim() - 1];
    let mut out = x.clone();
    {
        let xs = out.as_slice_mut().expect("softmax input contiguous");
        let ms = mask.map(|m| m.as_slice().expect("mask contiguous"));
        for (row_idx, row) in xs.chunks_mut(d).enumerate() {
            let mrow = ms.map(|m| &m[row_idx * d..(row_idx + 1) * d]);
            let mut mx = F::neg_infinity();
            for (j, v) in row.iter().enumerate() {
                if mrow.map_or(true, |m| m[j]) && *v > mx {
                    mx = *v;
                }
            }
            if mx == F::neg_infinity() {
                return Err(NnError::AllKeysMasked { query: row_idx });
            }
            let mut sum = F::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if mrow.map_or(true, |m| m[j]) {
                    *v = (*v - mx).exp();
                    sum += *v;
                } else {
                    *v = F::zero();
                }
            }
            let inv = F::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
    }
    let needs = t.needs_grad(a);
    let out_id = t.len();
    Ok(t.push(out, needs, Some(Box::new(SoftmaxBack { a: a.0, out: out_id }))))
}

// ---------------------------------------------------------------------------
// Conv1d (valid padding) via chunked im2col + GEMM
// ---------------------------------------------------------------------------

fn conv_out_len(l: usize, k: usize, stride: usize) -> usize {
    assert!(l >= k, "conv1d input length {l} shorter than kernel {k}");
    (l - k) / stride + 1
}

fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    b_range: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    p: usize,
) -> Array2<F> {
    let (_, c_in, _l) = x.dim();
    let rows = b_range.len() * p;
    let mut col = Array2::<F>::zeros((rows, c_in * k));
    let col_s = col.as_slice_mut().unwrap();
    let width = c_in * k;
    col_s
        .par_chunks_mut(p * width)
        .zip(b_range.clone().collect::<Vec<_>>().par_iter())
        .for_each(|(chunk, &b)| {
            for t_out in 0..p {
                let base = t_out * width;
                for ci in 0..c_in {
                    let row = x.index_axis(Axis(0), b);
                    let sig = row.index_axis(Axis(0), ci);
                    let sig = sig.as_slice().unwrap();
                    let start = t_out * stride;
                    chunk[base + ci * k..base + (ci + 1) * k]
                        .copy_from_slice(&sig[start..start + k]);
                }
            }
        });
    col
}

fn conv_chunk_size(p: usize, ck: usize) -> usize {
    // Bound the im2col buffer to ~4M scalars.
    (4_000_000 / (p * ck).max(1)).max(1)
}

struct Conv1dBack {
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
}

impl<F: Scalar> BackOp<F> for Conv1dBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = vals[self.x].view().into_dimensionality::<Ix3>().unwrap();
        let w = vals[self.w].view().into_dimensionality::<Ix3>().unwrap();
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, c_in, l) = x.dim();
        let (c_out, _, k) = w.dim();
        let p = conv_out_len(l, k, self.stride);
        let w2 = w.to_shape((c_out, c_in * k)).unwrap().to_owned();

        let mut dw2 = Array2::<F>::zeros((c_out, c_in * k));
        let mut db = Array1::<F>::zeros(c_out);
        let mut dx = Array3::<F>::zeros((bsz, c_in, l));
        let chunk = conv_chunk_size(p, c_in * k);
        let mut b0 = 0;
        while b0 < bsz {
            let b1 = (b0 + chunk).min(bsz);
            let col = im2col(&x, b0..b1, k, self.stride, p);
            // g chunk as (rows, c_out)
            let gc = g3.slice(ndarray::s![b0..b1, .., ..]);
            let gc = gc
                .permuted_axes([0, 2, 1])
                .to_owned()
                .into_shape_with_order(((b1 - b0) * p, c_out))
                .unwrap();
            dw2 = dw2 + gc.t().dot(&col);
            db = db + gc.sum_axis(Axis(0));
            // dcol -> scatter into dx
            let dcol = gc.dot(&w2);
            let width = c_in * k;
            let dcol_s = dcol.as_slice().unwrap();
            let mut dx_chunk = dx.slice_mut(ndarray::s![b0..b1, .., ..]);
            Zip::from(dx_chunk.outer_iter_mut())
                .and(&(0..(b1 - b0)).collect::<Vec<_>>())
                .par_for_each(|mut dxb, &bi| {
                    let rows = &dcol_s[bi * p * width..(bi + 1) * p * width];
                    for t_out in 0..p {
                        let base = t_out * width;
                        let start = t_out * self.stride;
                        for ci in 0..c_in {
                            let mut lane = dxb.index_axis_mut(Axis(0), ci);
                            let lane = lane.as_slice_mut().unwrap();
                            for kk in 0..k {
                                lane[start + kk] += rows[base + ci * k + kk];
                            }
                        }
                    }
                });
            b0 = b1;
        }
        sink.add(self.x, dx.into_dyn());
        sink.add(
            self.w,
            dw2.into_shape_with_order((c_out, c_in, k)).unwrap().into_dyn(),
        );
        sink.add(self.b, db.into_dyn());
    }
}

/// Valid (unpadded) 1-D convolution. `x` is (batch, c_in, len), `w` is
/// (c_out, c_in, k), `b` is (c_out,). Output is (batch, c_out, p).
pub fn conv1d<F: Scalar>(t: &mut Tape<F>, x: Var, w: Var, b: Var, stride: usize) -> Var {
    let xv = t.value(x).view().into_dimensionality::<Ix3>().expect("conv1d input 3-D");
    let wv = t.value(w).view().into_dimensionality::<Ix3>().expect("conv1d weight 3-D");
    let (bsz, c_in, l) = xv.dim();
    let (c_out, w_cin, k) = wv.dim();
    assert_eq!(c_in, w_cin, "conv1d channel mismatch");
    let p = conv_out_len(l, k, stride);
    let w2 = wv.to_shape((c_out, c_in * k)).unwrap().to_owned();
    let bv = t.value(b).clone();

    let mut out = Array3::<F>::zeros((bsz, c_out, p));
    let chunk = conv_chunk_size(p, c_in * k);
    let mut b0 = 0;
    while b0 < bsz {
        let b1 = (b0 + chunk).min(bsz);
        let col = im2col(&xv, b0..b1, k, stride, p);
        let y = col.dot(&w2.t()); // (rows, c_out)
        let y3 = y
            .into_shape_with_order((b1 - b0, p, c_out))
            .unwrap()
            .permuted_axes([0, 2, 1]);
        out.slice_mut(ndarray::s![b0..b1, .., ..]).assign(&y3);
        b0 = b1;
    }
    // Add bias per output channel.
    for (ci, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
        let bias = bv[[ci]];
        plane.mapv_inplace(|v| v + bias);
    }
    let needs = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
    t.push(
        out.into_dyn(),
        needs,
        Some(Box::new(Conv1dBack { x: x.0, w: w.0, b: b.0, stride })),
    )
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

struct MaxPoolBack {
    x: usize,
    argmax: Vec<u32>,
    out_shape: Vec<usize>,
}

impl<F: Scalar> BackOp<F> for MaxPoolBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let mut dx = ArrayD::<F>::zeros(vals[self.x].raw_dim());
        let l = vals[self.x].shape()[2];
        let dxs = dx.as_slice_mut().unwrap();
        let gs = g.as_slice().unwrap();
        let p = self.out_shape[2];
        for (row, gc) in gs.chunks(p).enumerate() {
            let base = row * l;
            for (j, gv) in gc.iter().enumerate() {
                dxs[base + self.argmax[row * p + j] as usize] += *gv;
            }
        }
        sink.add(self.x, dx);
    }
}

/// Max pooling over the time axis of (batch, channels, len).
pub fn maxpool1d<F: Scalar>(t: &mut Tape<F>, x: Var, k: usize, stride: usize) -> Var {
    let xv = t.value(x).view().into_dimensionality::<Ix3>().expect("maxpool input 3-D");
    let (bsz, c, l) = xv.dim();
    let p = conv_out_len(l, k, stride);
    let mut out = Array3::<F>::zeros((bsz, c, p));
    let mut argmax = vec![0u32; bsz * c * p];
    let xs = xv.as_slice().expect("maxpool input contiguous");
    {
        let os = out.as_slice_mut().unwrap();
        os.par_chunks_mut(p)
            .zip(argmax.par_chunks_mut(p))
            .enumerate()
            .for_each(|(row, (orow, arow))| {
                let lane = &xs[row * l..(row + 1) * l];
                for j in 0..p {
                    let start = j * stride;
                    let (mut mi, mut mv) = (start, lane[start]);
                    for i in start + 1..start + k {
                        if lane[i] > mv {
                            mv = lane[i];
                            mi = i;
                        }
                    }
                    orow[j] = mv;
                    arow[j] = mi as u32;
                }
            });
    }
    let needs = t.needs_grad(x);
    t.push(
        out.into_dyn(),
        needs,
        Some(Box::new(MaxPoolBack { x: x.0, argmax, out_shape: vec![bsz, c, p] })),
    )
}

fn adaptive_bins(l: usize, out_len: usize) -> Vec<(usize, usize)> {
    (0..out_len)
        .map(|i| {
            let start = (i * l) / out_len;
            let end = ((i + 1) * l).div_ceil(out_len);
            (start, end.max(start + 1))
        })
        .collect()
}

struct AdaptiveAvgBack {
    x: usize,
    out_len: usize,
}

impl<F: Scalar> BackOp<F> for AdaptiveAvgBack {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let l = vals[self.x].shape()[2];
        let bins = adaptive_bins(l, self.out_len);
        let mut dx = ArrayD::<F>::zeros(vals[self.x].raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        let gs = g.as_slice().unwrap();
        for (row, gc) in gs.chunks(self.out_len).enumerate() {
            let base = row * l;
            for (j, gv) in gc.iter().enumerate() {
                let (s, e) = bins[j];
                let share = *gv / F::from_usize(e - s).unwrap();
                for slot in dxs[base + s..base + e].iter_mut() {
                    *slot += share;
                }
            }
        }
        sink.add(self.x, dx);
    }
}

/// Adaptive average pooling to exactly `out_len` output steps.
pub fn adaptive_avgpool1d<F: Scalar>(t: &mut Tape<F>, x: Var, out_len: usize) -> Var {
    let xv = t.value(x).view().into_dimensionality::<Ix3>().expect("avgpool input 3-D");
    let (bsz, c, l) = xv.dim();
    let bins = adaptive_bins(l, out_len);
    let mut out = Array3::<F>::zeros((bsz, c, out_len));
    let xs = xv.as_slice().expect("avgpool input contiguous");
    {
        let os = out.as_slice_mut().unwrap();
        os.par_chunks_mut(out_len).enumerate().for_each(|(row, orow)| {
            let lane = &xs[row * l..(row + 1) * l];
            for (j, slot) in orow.iter_mut().enumerate() {
                let (s, e) = bins[j];
                let mut acc = F::zero();
                for v in &lane[s..e] {
                    acc += *v;
                }
                *slot = acc / F::from_usize(e - s).unwrap();
            }
        });
    }
    let needs = t.needs_grad(x);
    t.push(out.into_dyn(), needs, Some(Box::new(AdaptiveAvgBack { x: x.0, out_len })))
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

struct BatchNormTrainBack<F: Scalar> {
    x: usize,
    gamma: usize,
    beta: usize,
    mean: Array1<F>,
    rstd: Array1<F>,
}

impl<F: Scalar> BackOp<F> for BatchNormTrainBack<F> {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = vals[self.x].view().into_dimensionality::<Ix3>().unwrap();
        let gamma = &vals[self.gamma];
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, c, l) = x.dim();
        let n = F::from_usize(bsz * l).unwrap();
        let mut dx = Array3::<F>::zeros((bsz, c, l));
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ci in 0..c {
            let mu = self.mean[ci];
            let rstd = self.rstd[ci];
            let gam = gamma[[ci]];
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for b in 0..bsz {
                for t_ in 0..l {
                    let gv = g3[[b, ci, t_]];
                    let xh = (x[[b, ci, t_]] - mu) * rstd;
                    sum_g += gv;
                    sum_gx += gv * xh;
                }
            }
            dgamma[[ci]] = sum_gx;
            dbeta[[ci]] = sum_g;
            let k1 = sum_g / n;
            let k2 = sum_gx / n;
            for b in 0..bsz {
                for t_ in 0..l {
                    let gv = g3[[b, ci, t_]];
                    let xh = (x[[b, ci, t_]] - mu) * rstd;
                    dx[[b, ci, t_]] = gam * rstd * (gv - k1 - xh * k2);
                }
            }
        }
        sink.add(self.x, dx.into_dyn());
        sink.add(self.gamma, dgamma.into_dyn());
        sink.add(self.beta, dbeta.into_dyn());
    }
}

/// Batch norm over (batch, channels, len) using batch statistics.
/// Returns the output plus the per-channel batch mean and (biased) variance
/// so the caller can update running statistics.
pub fn batchnorm1d_train<F: Scalar>(
    t: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: F,
) -> (Var, Array1<F>, Array1<F>) {
    let xv = t.value(x).view().into_dimensionality::<Ix3>().expect("batchnorm input 3-D");
    let (bsz, c, l) = xv.dim();
    let n = F::from_usize(bsz * l).unwrap();
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut acc = F::zero();
        for b in 0..bsz {
            for t_ in 0..l {
                acc += xv[[b, ci, t_]];
            }
        }
        let mu = acc / n;
        let mut vacc = F::zero();
        for b in 0..bsz {
            for t_ in 0..l {
                let d = xv[[b, ci, t_]] - mu;
                vacc += d * d;
            }
        }
        mean[[ci]] = mu;
        var[[ci]] = vacc / n;
    }
    let rstd = var.mapv(|v| F::one() / (v + eps).sqrt());
    let gv = t.value(gamma).clone();
    let bv = t.value(beta).clone();
    let mut out = Array3::<F>::zeros((bsz, c, l));
    for ci in 0..c {
        let mu = mean[ci];
        let rs = rstd[ci];
        let gam = gv[[ci]];
        let bet = bv[[ci]];
        for b in 0..bsz {
            for t_ in 0..l {
                out[[b, ci, t_]] = gam * (xv[[b, ci, t_]] - mu) * rs + bet;
            }
        }
    }
    let needs = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
    let var_out = var.clone();
    let v = t.push(
        out.into_dyn(),
        needs,
        Some(Box::new(BatchNormTrainBack {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            mean: mean.clone(),
            rstd,
        })),
    );
    (v, mean, var_out)
}

struct BatchNormEvalBack<F: Scalar> {
    x: usize,
    gamma: usize,
    beta: usize,
    rmean: Array1<F>,
    rstd: Array1<F>,
}

impl<F: Scalar> BackOp<F> for BatchNormEvalBack<F> {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = vals[self.x].view().into_dimensionality::<Ix3>().unwrap();
        let gamma = &vals[self.gamma];
        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
        let (bsz, c, l) = x.dim();
        let mut dx = Array3::<F>::zeros((bsz, c, l));
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ci in 0..c {
            let mu = self.rmean[ci];
            let rs = self.rstd[ci];
            let gam = gamma[[ci]];
            for b in 0..bsz {
                for t_ in 0..l {
                    let gv = g3[[b, ci, t_]];
                    dx[[b, ci, t_]] = gv * gam * rs;
                    dgamma[[ci]] += gv * (x[[b, ci, t_]] - mu) * rs;
                    dbeta[[ci]] += gv;
                }
            }
        }
        sink.add(self.x, dx.into_dyn());
        sink.add(self.gamma, dgamma.into_dyn());
        sink.add(self.beta, dbeta.into_dyn());
    }
}

/// Batch norm in eval mode: running statistics are fixed constants.
pub fn batchnorm1d_eval<F: Scalar>(
    t: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    rmean: &Array1<F>,
    rvar: &Array1<F>,
    eps: F,
) -> Var {
    let xv = t.value(x).view().into_dimensionality::<Ix3>().expect("batchnorm input 3-D");
    let (bsz, c, l) = xv.dim();
    let rstd = rvar.mapv(|v| F::one() / (v + eps).sqrt());
    let gv = t.value(gamma).clone();
    let bv = t.value(beta).clone();
    let mut out = Array3::<F>::zeros((bsz, c, l));
    for ci in 0..c {
        let mu = rmean[ci];
        let rs = rstd[ci];
        let gam = gv[[ci]];
        let bet = bv[[ci]];
        for b in 0..bsz {
            for t_ in 0..l {
                out[[b, ci, t_]] = gam * (xv[[b, ci, t_]] - mu) * rs + bet;
            }
        }
    }
    let needs = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
    t.push(
        out.into_dyn(),
        needs,
        Some(Box::new(BatchNormEvalBack {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            rmean: rmean.clone(),
            rstd,
        })),
    )
}

struct LayerNormBack<F: Scalar> {
    x: usize,
    gamma: usize,
    beta: usize,
    mean: Vec<F>,
    rstd: Vec<F>,
}

impl<F: Scalar> BackOp<F> for LayerNormBack<F> {
    fn backward(&self, vals: &[ArrayD<F>], g: &ArrayD<F>, sink: &mut Sink<F>) {
        let x = &vals[self.x];
        let gamma = &vals[self.gamma];
        let d = x.shape()[x.ndim() - 1];
        let dn = F::from_usize(d).unwrap();
        let xs = x.as_slice().expect("layernorm input contiguous");
        let gs = g.as_slice().expect("layernorm grad contiguous");
        let gam = gamma.as_slice().unwrap();
        let mut dx = vec![F::zero(); xs.len()];
        let mut dgamma = vec![F::zero(); d];
        let mut dbeta = vec![F::zero(); d];
        for (row, (grow, xrow)) in gs.chunks(d).zip(xs.chunks(d)).enumerate() {
            let mu = self.mean[row];
            let rs = self.rstd[row];
            let mut sum_gh = F::zero();
            let mut sum_ghx = F::zero();
            for j in 0..d {
                let xh = (xrow[j] - mu) * rs;
                let gh = grow[j] * gam[j];
                sum_gh += gh;
                sum_ghx += gh * xh;
                dgamma[j] += grow[j] * xh;
                dbeta[j] += grow[j];
            }
            let k1 = sum_gh / dn;
            let k2 = sum_ghx / dn;
            let base = row * d;
            for j in 0..d {
                let xh = (xrow[j] - mu) * rs;
                let gh = grow[j] * gam[j];
                dx[base + j] = rs * (gh - k1 - xh * k2);
            }
        }
        sink.add(self.x, ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap());
        sink.add(self.gamma, ArrayD::from_shape_vec(gamma.raw_dim(), dgamma).unwrap());
        sink.add(self.beta, ArrayD::from_shape_vec(gamma.raw_dim(), dbeta).unwrap());
    }
}

/// Layer norm over the last axis with learned scale and shift.
pub fn layernorm_lastdim<F: Scalar>(t: &mut Tape<F>, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
    let xv = t.value(x);
    let d = xv.shape()[xv.ndim() - 1];
    let rows = xv.len() / d;
    let xs = xv.as_slice().expect("layernorm input contiguous");
    let gam = t.value(gamma).as_slice().unwrap().to_vec();
    let bet = t.value(beta).as_slice().unwrap().to_vec();
    let mut out = vec![F::zero(); xs.len()];
    let mut mean = vec![F::zero(); rows];
    let mut rstd = vec![F::zero(); rows];
    let dn = F::from_usize(d).unwrap();
    for row in 0..rows {
        let xrow = &xs[row * d..(row + 1) * d];
        let mut acc = F::zero();
        for v in xrow {
            acc += *v;
        }
        let mu = acc / dn;
        let mut vacc = F::zero();
        for v in xrow {
            let dv = *v - mu;
            vacc += dv * dv;
        }
        let rs = F::one() / (vacc / dn + eps).sqrt();
        mean[row] = mu;
        rstd[row] = rs;
        for j in 0..d {
            out[row * d + j] = gam[j] * (xrow[j] - mu) * rs + bet[j];
        }
    }
    let shape = xv.raw_dim();
    let needs = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
    t.push(
        ArrayD::from_shape_vec(shape, out).unwrap(),
        needs,
        Some(Box::new(LayerNormBack { x: x.0, gamma: gamma.0, beta: beta.0, mean, rstd })),
    )
}

/// Dropout with a caller-provided keep mask already scaled by 1/(1-p).
pub fn dropout_with_mask<F: Scalar>(t: &mut Tape<F>, x: Var, mask: &ArrayD<F>) -> Var {
    mul_const(t, x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn arr(shape: &[usize], vals: &[f64]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), vals.to_vec()).unwrap()
    }

    #[test]
    fn gelu_identity() {
        // gelu(0) = 0 and gelu(x) + gelu(-x) = x.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[5], &[0.0, 0.3, -0.3, 2.0, -2.0]), false);
        let y = unary(&mut t, x, Unary::Gelu);
        let yv = t.value(y);
        assert_eq!(yv[[0]], 0.0);
        assert!((yv[[1]] + yv[[2]] - 0.3).abs() < 1e-12);
        assert!((yv[[3]] + yv[[4]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1, 1, 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let w = t.leaf(arr(&[1, 1, 1], &[1.0]), false);
        let b = t.leaf(arr(&[1], &[0.0]), false);
        let y = conv1d(&mut t, x, w, b, 1);
        assert_eq!(t.value(y).as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn maxpool_shape_rule() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::zeros(IxDyn(&[2, 3, 10])), false);
        let y = maxpool1d(&mut t, x, 3, 2);
        assert_eq!(t.value(y).shape(), &[2, 3, 4]);
    }

    #[test]
    fn adaptive_avgpool_emits_requested_length() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 17]), 3.0), false);
        let y = adaptive_avgpool1d(&mut t, x, 10);
        assert_eq!(t.value(y).shape(), &[1, 2, 10]);
        assert!(t.value(y).iter().all(|&v| (v - 3.0f64).abs() < 1e-12));
        // Length-1 input broadcasts its single value.
        let x1 = t.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1]), 2.5), false);
        let y1 = adaptive_avgpool1d(&mut t, x1, 10);
        assert_eq!(t.value(y1).shape(), &[1, 1, 10]);
        assert!(t.value(y1).iter().all(|&v| (v - 2.5f64).abs() < 1e-12));
    }

    #[test]
    fn softmax_all_masked_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1, 3], &[1.0, 2.0, 3.0]), false);
        let mask = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![false, false, false]).unwrap();
        assert!(matches!(
            softmax_lastdim(&mut t, x, Some(&mask)),
            Err(NnError::AllKeysMasked { .. })
        ));
    }

    #[test]
    fn softmax_masked_matches_reduced() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr(&[1, 4], &[0.5, 1.5, -0.7, 9.0]), false);
        let mask =
            ArrayD::from_shape_vec(IxDyn(&[1, 4]), vec![true, true, true, false]).unwrap();
        let y = softmax_lastdim(&mut t, x, Some(&mask)).unwrap();
        let x2 = t.leaf(arr(&[1, 3], &[0.5, 1.5, -0.7]), false);
        let y2 = softmax_lastdim(&mut t, x2, None).unwrap();
        let yv = t.value(y).as_slice().unwrap().to_vec();
        let y2v = t.value(y2).as_slice().unwrap().to_vec();
        assert_eq!(yv[3], 0.0);
        for (a, b) in yv[..3].iter().zip(&y2v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
