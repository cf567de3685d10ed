//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation records its inputs on a [`Tape`]; [`Tape::backward`] walks the
//! records in reverse and accumulates analytic gradients. All values are treated as
//! matrices (`rows × cols`, last axis = columns).

use std::cell::{Ref, RefCell};

use super::real::{gemm, Real, View};
use super::tensor::Tensor;

/// One attention window inside a packed token matrix.
///
/// Rows `start..start + len` attend to the first `keys` rows of the window;
/// the remaining rows (padding) are queries only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub keys: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        row: usize,
    },
    MulRow {
        x: usize,
        row: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    AddScalar {
        x: usize,
    },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Pow {
        x: usize,
        p: T,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        rstd: Vec<T>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    LogSumExpGroups {
        x: usize,
        groups: Vec<Vec<usize>>,
    },
    SegmentMean {
        x: usize,
        segments: Vec<(usize, usize)>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a differentiable computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a tape.
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the variable's shape when it did not influence the output.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Handle for an already-recorded value.
    pub fn handle(&self, id: usize) -> Var<'_, T> {
        assert!(id < self.len(), "no node {id}");
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input; backward never propagates into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulates d`output`/d(every recorded value). `output` must be a single element.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::filled(
            nodes[output.id].value.shape().to_vec(),
            T::one(),
        ));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape().to_vec()));
    f(slot.data_mut());
}

fn dense_view<T: Real>(t: &Tensor<T>) -> View {
    View::dense(t.rows(), t.cols())
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let y = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (av_raw, bv_raw) = (dense_view(&nodes[*a].value), dense_view(&nodes[*b].value));
            let av = if *ta { av_raw.t() } else { av_raw };
            let bv = if *tb { bv_raw.t() } else { bv_raw };
            let gv = dense_view(g);
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |da| {
                let target = if *ta { av_raw.t() } else { av_raw };
                gemm(T::one(), gd, gv, bd, bv.t(), true, da, target);
            });
            accumulate(nodes, grads, *b, |db| {
                let target = if *tb { bv_raw.t() } else { bv_raw };
                gemm(T::one(), ad, av.t(), gd, gv, true, db, target);
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| add_into(d, gd));
            accumulate(nodes, grads, *b, |d| {
                for (o, &v) in d.iter_mut().zip(gd) {
                    *o = *o - v;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, |d| {
                for ((o, &gv), &bv) in d.iter_mut().zip(gd).zip(bd) {
                    *o = *o + gv * bv;
                }
            });
            accumulate(nodes, grads, *b, |d| {
                for ((o, &gv), &av) in d.iter_mut().zip(gd).zip(ad) {
                    *o = *o + gv * av;
                }
            });
        }
        Op::AddRow { x, row } => {
            let cols = y.cols();
            accumulate(nodes, grads, *x, |d| add_into(d, gd));
            accumulate(nodes, grads, *row, |d| {
                for r in gd.chunks(cols) {
                    add_into(d, r);
                }
            });
        }
        Op::MulRow { x, row } => {
            let cols = y.cols();
            let (xd, rd) = (nodes[*x].value.data(), nodes[*row].value.data());
            accumulate(nodes, grads, *x, |d| {
                for (dr, gr) in d.chunks_mut(cols).zip(gd.chunks(cols)) {
                    for ((o, &gv), &rv) in dr.iter_mut().zip(gr).zip(rd) {
                        *o = *o + gv * rv;
                    }
                }
            });
            accumulate(nodes, grads, *row, |d| {
                for (gr, xr) in gd.chunks(cols).zip(xd.chunks(cols)) {
                    for ((o, &gv), &xv) in d.iter_mut().zip(gr).zip(xr) {
                        *o = *o + gv * xv;
                    }
                }
            });
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, |d| {
            for (o, &gv) in d.iter_mut().zip(gd) {
                *o = *o + *c * gv;
            }
        }),
        Op::AddScalar { x } => accumulate(nodes, grads, *x, |d| add_into(d, gd)),
        Op::Exp(x) => accumulate(nodes, grads, *x, |d| {
            for ((o, &gv), &yv) in d.iter_mut().zip(gd).zip(y.data()) {
                *o = *o + gv * yv;
            }
        }),
        Op::Log(x) => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(xd) {
                    *o = *o + gv / xv;
                }
            })
        }
        Op::Relu(x) => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(xd) {
                    if xv > T::zero() {
                        *o = *o + gv;
                    }
                }
            })
        }
        Op::Gelu(x) => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(xd) {
                    *o = *o + gv * gelu_grad(xv);
                }
            })
        }
        Op::Pow { x, p } => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((o, &gv), &xv) in d.iter_mut().zip(gd).zip(xd) {
                    *o = *o + gv * pow_grad(xv, *p);
                }
            })
        }
        Op::Softmax(x) => {
            let cols = y.cols();
            accumulate(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = *o + yv * (gv - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(x) => {
            let cols = y.cols();
            accumulate(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = *o + gv - yv.exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm { x, rstd } => {
            let cols = y.cols();
            let n = T::c(cols as f64);
            accumulate(nodes, grads, *x, |d| {
                for (((dr, gr), yr), &r) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                    .zip(rstd)
                {
                    let mg: T = gr.iter().copied().sum::<T>() / n;
                    let mgy: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = *o + r * (gv - mg - yv * mgy);
                    }
                }
            })
        }
        Op::Gather { x, idx } => accumulate(nodes, grads, *x, |d| {
            for (&src, &gv) in idx.iter().zip(gd) {
                d[src] = d[src] + gv;
            }
        }),
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate(nodes, grads, p, |d| add_into(d, &gd[offset..offset + n]));
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = y.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                accumulate(nodes, grads, p, |d| {
                    for (dr, gr) in d.chunks_mut(c).zip(gd.chunks(total)) {
                        add_into(dr, &gr[offset..offset + c]);
                    }
                });
                offset += c;
            }
        }
        Op::MeanAxis { x, axis } => {
            let xv = &nodes[*x].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            accumulate(nodes, grads, *x, |d| {
                if *axis == 0 {
                    let inv = T::one() / T::c(rows as f64);
                    for dr in d.chunks_mut(cols) {
                        for (o, &gv) in dr.iter_mut().zip(gd) {
                            *o = *o + gv * inv;
                        }
                    }
                } else {
                    let inv = T::one() / T::c(cols as f64);
                    for (dr, &gv) in d.chunks_mut(cols).zip(gd) {
                        for o in dr.iter_mut() {
                            *o = *o + gv * inv;
                        }
                    }
                }
            })
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |d| {
            for o in d.iter_mut() {
                *o = *o + gd[0];
            }
        }),
        Op::L2Normalize { x, norms } => {
            let cols = y.cols();
            accumulate(nodes, grads, *x, |d| {
                for (((dr, gr), yr), &nrm) in d
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.data().chunks(cols))
                    .zip(norms)
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = *o + (gv - yv * dot) / nrm;
                    }
                }
            })
        }
        Op::LogSumExpGroups { x, groups } => {
            let xd = nodes[*x].value.data();
            accumulate(nodes, grads, *x, |d| {
                for ((grp, &gv), &yv) in groups.iter().zip(gd).zip(y.data()) {
                    for &k in grp {
                        d[k] = d[k] + gv * (xd[k] - yv).exp();
                    }
                }
            })
        }
        Op::SegmentMean { x, segments } => {
            let cols = y.cols();
            accumulate(nodes, grads, *x, |d| {
                for (b, &(start, len)) in segments.iter().enumerate() {
                    let inv = T::one() / T::c(len as f64);
                    let gr = &gd[b * cols..(b + 1) * cols];
                    for r in start..start + len {
                        for (o, &gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *o = *o + gv * inv;
                        }
                    }
                }
            })
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), segments, *heads, probs);
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}

const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::c(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

fn pow_grad<T: Real>(x: T, p: T) -> T {
    if p == T::zero() {
        T::zero()
    } else if x == T::zero() {
        if p == T::one() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        p * x.powf(p - T::one())
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn head_view(rows: usize, dh: usize, stride: usize) -> View {
    View {
        rows,
        cols: dh,
        rs: stride as isize,
        cs: 1,
    }
}

fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[Segment],
    heads: usize,
) -> (Tensor<T>, Vec<Vec<T>>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::c((dh as f64).sqrt());
    let mut out = Tensor::zeros(vec![q.rows(), d]);
    let mut probs = Vec::with_capacity(segments.len() * heads);
    for seg in segments {
        for h in 0..heads {
            let off_q = seg.start * d + h * dh;
            let mut p = vec![T::zero(); seg.len * seg.keys];
            gemm(
                scale,
                &q.data()[off_q..],
                head_view(seg.len, dh, d),
                &k.data()[off_q..],
                head_view(seg.keys, dh, d).t(),
                false,
                &mut p,
                View::dense(seg.len, seg.keys),
            );
            for row in p.chunks_mut(seg.keys.max(1)) {
                softmax_in_place(row);
            }
            gemm(
                T::one(),
                &p,
                View::dense(seg.len, seg.keys),
                &v.data()[off_q..],
                head_view(seg.keys, dh, d),
                false,
                &mut out.data_mut()[off_q..],
                head_view(seg.len, dh, d),
            );
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    g: &Tensor<T>,
    (qi, ki, vi): (usize, usize, usize),
    segments: &[Segment],
    heads: usize,
    probs: &[Vec<T>],
) {
    let (q, k, v) = (&nodes[qi].value, &nodes[ki].value, &nodes[vi].value);
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::c((dh as f64).sqrt());
    let mut dq = Tensor::<T>::zeros(q.shape().to_vec());
    let mut dk = Tensor::<T>::zeros(k.shape().to_vec());
    let mut dv = Tensor::<T>::zeros(v.shape().to_vec());
    let mut slot = 0;
    for seg in segments {
        for h in 0..heads {
            let p = &probs[slot];
            slot += 1;
            let off = seg.start * d + h * dh;
            let pv = View::dense(seg.len, seg.keys);
            // dV = Pᵀ dO
            gemm(
                T::one(),
                p,
                pv.t(),
                &g.data()[off..],
                head_view(seg.len, dh, d),
                true,
                &mut dv.data_mut()[off..],
                head_view(seg.keys, dh, d),
            );
            // dP = dO Vᵀ
            let mut ds = vec![T::zero(); seg.len * seg.keys];
            gemm(
                T::one(),
                &g.data()[off..],
                head_view(seg.len, dh, d),
                &v.data()[off..],
                head_view(seg.keys, dh, d).t(),
                false,
                &mut ds,
                pv,
            );
            for (dr, pr) in ds
                .chunks_mut(seg.keys.max(1))
                .zip(p.chunks(seg.keys.max(1)))
            {
                let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                for (o, &pv) in dr.iter_mut().zip(pr) {
                    *o = pv * (*o - dot);
                }
            }
            gemm(
                scale,
                &ds,
                pv,
                &k.data()[off..],
                head_view(seg.keys, dh, d),
                true,
                &mut dq.data_mut()[off..],
                head_view(seg.len, dh, d),
            );
            gemm(
                scale,
                &ds,
                pv.t(),
                &q.data()[off..],
                head_view(seg.len, dh, d),
                true,
                &mut dk.data_mut()[off..],
                head_view(seg.keys, dh, d),
            );
        }
    }
    accumulate(nodes, grads, qi, |o| add_into(o, dq.data()));
    accumulate(nodes, grads, ki, |o| add_into(o, dk.data()));
    accumulate(nodes, grads, vi, |o| add_into(o, dv.data()));
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t, T>, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    fn matmul_impl(self, other: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let av = if ta {
                dense_view(&a).t()
            } else {
                dense_view(&a)
            };
            let bv = if tb {
                dense_view(&b).t()
            } else {
                dense_view(&b)
            };
            assert_eq!(
                av.cols,
                bv.rows,
                "matmul inner dims: {:?} · {:?}",
                a.shape(),
                b.shape()
            );
            let mut c = Tensor::zeros(vec![av.rows, bv.cols]);
            gemm(
                T::one(),
                a.data(),
                av,
                b.data(),
                bv,
                false,
                c.data_mut(),
                View::dense(av.rows, bv.cols),
            );
            c
        };
        self.binary(
            other,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            value,
        )
    }

    /// `self · other`
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t, T>) -> Var<'t, T> {
        self.matmul_impl(other, false, true)
    }

    fn zip_with(self, other: Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(
            a.len(),
            b.len(),
            "elementwise shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, |a, b| a + b);
        self.binary(other, Op::Add(self.id, other.id), v)
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, |a, b| a - b);
        self.binary(other, Op::Sub(self.id, other.id), v)
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let v = self.zip_with(other, |a, b| a * b);
        self.binary(other, Op::Mul(self.id, other.id), v)
    }

    fn row_broadcast(self, row: Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, r) = (self.value(), row.value());
        let cols = x.cols();
        assert_eq!(
            r.len(),
            cols,
            "row broadcast width {:?} vs {:?}",
            r.shape(),
            x.shape()
        );
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &rv) in chunk.iter_mut().zip(r.data()) {
                *o = f(*o, rv);
            }
        }
        out
    }

    /// Adds a `cols`-length row to every row.
    pub fn add_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let v = self.row_broadcast(row, |a, b| a + b);
        self.binary(
            row,
            Op::AddRow {
                x: self.id,
                row: row.id,
            },
            v,
        )
    }

    /// Multiplies every row elementwise by a `cols`-length row.
    pub fn mul_row(self, row: Var<'t, T>) -> Var<'t, T> {
        let v = self.row_broadcast(row, |a, b| a * b);
        self.binary(
            row,
            Op::MulRow {
                x: self.id,
                row: row.id,
            },
            v,
        )
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x * c);
        self.unary(Op::Scale { x: self.id, c }, v)
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().map(|x| x + c);
        self.unary(Op::AddScalar { x: self.id }, v)
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(T::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn ln(self) -> Var<'t, T> {
        let v = self.value().map(T::ln);
        self.unary(Op::Log(self.id), v)
    }

    /// `max(0, x)`
    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(T::zero()));
        self.unary(Op::Relu(self.id), v)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let v = self.value().map(gelu);
        self.unary(Op::Gelu(self.id), v)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(self, p: T) -> Var<'t, T> {
        let v = self
            .value()
            .map(|x| if p == T::zero() { T::one() } else { x.powf(p) });
        self.unary(Op::Pow { x: self.id, p }, v)
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t, T> {
        let mut v = self.value().clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.unary(Op::Softmax(self.id), v)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'t, T> {
        let mut v = self.value().clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.unary(Op::LogSoftmax(self.id), v)
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Var<'t, T> {
        let mut v = self.value().clone();
        let cols = v.cols();
        let n = T::c(cols as f64);
        let mut rstd = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let r = T::one() / (var + T::c(eps)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        self.unary(Op::LayerNorm { x: self.id, rstd }, v)
    }

    /// Output element `i` is input element `idx[i]` (flat, row-major).
    pub fn gather(self, idx: Vec<usize>, shape: Vec<usize>) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let data = idx.iter().map(|&i| x.data()[i]).collect();
            Tensor::new(shape, data).expect("gather shape matches index count")
        };
        self.unary(Op::Gather { x: self.id, idx }, value)
    }

    /// Selects whole rows (embedding lookup).
    pub fn rows_at(self, rows: &[usize]) -> Var<'t, T> {
        let cols = self.cols();
        let idx = rows
            .iter()
            .flat_map(|&r| (r * cols)..(r + 1) * cols)
            .collect();
        self.gather(idx, vec![rows.len(), cols])
    }

    /// Element `(i, j)` for each pair, as a `pairs.len() × 1` column.
    pub fn elements(self, pairs: &[(usize, usize)]) -> Var<'t, T> {
        let cols = self.cols();
        let idx = pairs.iter().map(|&(i, j)| i * cols + j).collect();
        self.gather(idx, vec![pairs.len(), 1])
    }

    pub fn transpose(self) -> Var<'t, T> {
        let (rows, cols) = (self.rows(), self.cols());
        let idx = (0..cols)
            .flat_map(|j| (0..rows).map(move |i| i * cols + j))
            .collect();
        self.gather(idx, vec![cols, rows])
    }

    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        tape.push(
            Tensor::new(vec![rows, cols], data).expect("rows"),
            Op::ConcatRows(ids),
            needs,
        )
    }

    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let rows = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut offset = 0;
        for p in parts {
            let v = p.value();
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            let c = v.cols();
            for (dst, src) in out.data_mut().chunks_mut(total).zip(v.data().chunks(c)) {
                dst[offset..offset + c].copy_from_slice(src);
            }
            offset += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        tape.push(out, Op::ConcatCols(ids), needs)
    }

    /// Mean over rows (`axis = 0`, gives `1 × cols`) or columns (`axis = 1`, gives `rows × 1`).
    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        assert!(axis < 2, "matrix axis");
        let value = {
            let x = self.value();
            let (rows, cols) = (x.rows(), x.cols());
            if axis == 0 {
                let mut out = vec![T::zero(); cols];
                for r in x.data().chunks(cols) {
                    add_into(&mut out, r);
                }
                let inv = T::one() / T::c(rows as f64);
                Tensor::new(vec![1, cols], out.into_iter().map(|v| v * inv).collect())
                    .expect("mean")
            } else {
                let inv = T::one() / T::c(cols as f64);
                let out = x
                    .data()
                    .chunks(cols)
                    .map(|r| r.iter().copied().sum::<T>() * inv)
                    .collect();
                Tensor::new(vec![rows, 1], out).expect("mean")
            }
        };
        self.unary(Op::MeanAxis { x: self.id, axis }, value)
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(total))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::c(n as f64))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize(self) -> Var<'t, T> {
        let mut v = self.value().clone();
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        for row in v.data_mut().chunks_mut(cols) {
            let n = row
                .iter()
                .map(|&x| x * x)
                .sum::<T>()
                .sqrt()
                .max(T::c(1e-12));
            for x in row.iter_mut() {
                *x = *x / n;
            }
            norms.push(n);
        }
        self.unary(Op::L2Normalize { x: self.id, norms }, v)
    }

    /// `log Σ exp(x_k)` over each group of flat indices, as a `groups.len() × 1` column.
    pub fn log_sum_exp_groups(self, groups: Vec<Vec<usize>>) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let out = groups
                .iter()
                .map(|grp| {
                    assert!(!grp.is_empty(), "empty log-sum-exp group");
                    let max = grp
                        .iter()
                        .map(|&k| x.data()[k])
                        .fold(T::neg_infinity(), T::max);
                    max + grp
                        .iter()
                        .map(|&k| (x.data()[k] - max).exp())
                        .sum::<T>()
                        .ln()
                })
                .collect();
            Tensor::new(vec![groups.len(), 1], out).expect("lse")
        };
        self.unary(Op::LogSumExpGroups { x: self.id, groups }, value)
    }

    /// Mean of each `(start, len)` row range, stacked into `segments.len() × cols`.
    pub fn segment_mean(self, segments: Vec<(usize, usize)>) -> Var<'t, T> {
        let value = {
            let x = self.value();
            let cols = x.cols();
            let mut out = Tensor::zeros(vec![segments.len(), cols]);
            for (b, &(start, len)) in segments.iter().enumerate() {
                assert!(len > 0, "empty segment");
                let inv = T::one() / T::c(len as f64);
                let dst = &mut out.data_mut()[b * cols..(b + 1) * cols];
                for r in start..start + len {
                    add_into(dst, x.row(r));
                }
                for v in dst.iter_mut() {
                    *v = *v * inv;
                }
            }
            out
        };
        self.unary(
            Op::SegmentMean {
                x: self.id,
                segments,
            },
            value,
        )
    }

    /// Multi-head scaled dot-product attention over packed segments.
    /// `self` holds the queries; all three inputs are `N × D` with `D` divisible by `heads`.
    pub fn attention(
        self,
        k: Var<'t, T>,
        v: Var<'t, T>,
        segments: Vec<Segment>,
        heads: usize,
    ) -> Var<'t, T> {
        let (out, probs) = {
            let (qv, kv, vv) = (self.value(), k.value(), v.value());
            assert_eq!(qv.shape(), kv.shape(), "attention q/k shape");
            assert_eq!(qv.shape(), vv.shape(), "attention q/v shape");
            assert_eq!(qv.cols() % heads, 0, "model width not divisible by heads");
            for s in &segments {
                assert!(
                    s.keys >= 1 && s.keys <= s.len && s.start + s.len <= qv.rows(),
                    "bad segment {s:?}"
                );
            }
            attention_forward(&qv, &kv, &vv, &segments, heads)
        };
        let needs = self.tape.needs(&[self.id, k.id, v.id]);
        self.tape.push(
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                segments,
                heads,
                probs,
            },
            needs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 2], &[3.0, 4.0]));
        let y = x.l2_normalize();
        let d = y.value().data().to_vec();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gather_picks_by_index() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 3], &[10.0, 20.0, 30.0]));
        assert_eq!(
            x.gather(vec![2, 0], vec![1, 2]).value().data(),
            &[30.0, 10.0]
        );
    }

    #[test]
    fn matmul_gradients_match_hand_values() {
        let tape = Tape::new();
        let a = tape.var(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.var(t(&[2, 1], &[3.0, 4.0]));
        let c = a.matmul(b).sum();
        assert_eq!(c.item(), 11.0);
        let g = tape.backward(c);
        assert_eq!(g.wrt(a).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.var(t(&[1, 2], &[3.0, 4.0]));
        let g = tape.backward(a.mul(b).sum());
        assert!(g.get(a).is_none());
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn reused_variable_accumulates() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 1], &[3.0]));
        let y = x.mul(x).add(x).sum();
        assert_eq!(tape.backward(y).wrt(x).data(), &[7.0]);
    }

    #[test]
    fn log_sum_exp_groups_is_stable() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 3], &[1000.0, 1000.0, -5.0]));
        let y = x.log_sum_exp_groups(vec![vec![0, 1]]);
        assert!((y.item() - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn attention_single_key_copies_value() {
        let tape = Tape::new();
        let q = tape.var(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let k = tape.var(t(&[2, 2], &[0.5, 0.5, 9.0, 9.0]));
        let v = tape.var(t(&[2, 2], &[2.0, 3.0, 7.0, 7.0]));
        let out = q.attention(
            k,
            v,
            vec![Segment {
                start: 0,
                len: 2,
                keys: 1,
            }],
            1,
        );
        assert_eq!(out.value().data(), &[2.0, 3.0, 2.0, 3.0]);
    }
}
