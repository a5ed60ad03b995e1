//! Reverse-mode automatic differentiation on dynamically shaped `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates vector-Jacobian products. The op set
//! is closed and purpose-built: dense linear maps, the 3-D and temporal
//! convolutions of the encoder and graph blocks, per-class batched linear
//! filters, the attention score contraction, graph message passing, and the
//! two loss primitives. Heavy inner products are routed through
//! [`ndarray::linalg::general_mat_mul`] so the whole pass stays deterministic
//! (fixed summation order) while still using a blocked GEMM.
//!
//! Values are plain `ArrayD<f64>`; scalars are zero-dimensional arrays.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, Ix4, Ix5, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Convenience: zero-dimensional scalar tensor.
pub fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Read a zero-dimensional tensor back as `f64`.
pub fn scalar_value(t: &Tensor) -> f64 {
    debug_assert_eq!(t.ndim(), 0, "expected scalar tensor");
    *t.iter().next().expect("scalar tensor")
}

enum Op {
    Leaf,
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// 2-D matrix product `a · b`.
    Matmul { a: Var, b: Var },
    /// `x · w + bias` with `x (N,F)`, `w (F,M)`, `bias (M,)`.
    Linear { x: Var, w: Var, bias: Var },
    Reshape { x: Var },
    /// Select one slab along axis 0: `x (N, ...)` -> `(...)`.
    IndexAxis0 { x: Var, idx: usize },
    SumAll { x: Var },
    MeanAxis0 { x: Var },
    /// `(T,H,W,C) -> (T,C)` spatial average.
    SpatialMeanPool { x: Var },
    /// Row-wise softmax of a 2-D matrix.
    SoftmaxRows { x: Var },
    /// `x (T,F)`, `w (C,F,D)`, `bias (C,D)` -> `(T,C,D)`; one filter per class.
    PerClassLinear { x: Var, w: Var, bias: Var },
    /// `x (T,C,D)`, `w (C,D) | (1,D)`, `bias (C,) | (1,)` -> `(T,C)`.
    PerClassDot { x: Var, w: Var, bias: Var },
    /// `e1, e2 (T,C,E)` -> `(C,C)`: `out[i,j] = Σ_{t,e} e1[t,i,e]·e2[t,j,e]`.
    AttnScores { e1: Var, e2: Var },
    /// `adj (C,C)`, `nodes (T,C,D)` -> `(T,C,D)`: `out[t] = adj · nodes[t]`.
    GraphMix { adj: Var, nodes: Var },
    /// 3-D convolution, temporal stride 1 / pad `kt/2`, spatial stride+pad given.
    /// `x (T,H,W,Ci)`, `k (kt,kh,kw,Ci,Co)`, `bias (Co,)`.
    Conv3d {
        x: Var,
        k: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    /// Per-class temporal conv, zero-padded to the same length.
    /// `x (T,C,Din)`, `k (kt,Din,Dout)` -> `(T,C,Dout)`.
    TemporalConvSame { x: Var, k: Var },
    /// Softmax cross-entropy of a 1-D logit vector at a target index.
    CrossEntropyLogits { logits: Var, target: usize },
    /// Mean binary cross-entropy with logits against a fixed 0/1 target grid.
    BceWithLogits { logits: Var, targets: Array2<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a single forward pass; dropped (or reused via `reset`) afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`. Zero-filled if the node is unreachable.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[v.0].value.raw_dim()),
        }
    }

    /// Like [`Gradients::wrt`] but without cloning when present.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let v = va + vb;
        self.push(v, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let v = va * vb;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).mapv(|a| a * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (as2(self.value(a)), as2(self.value(b)));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dims");
        let mut out = Array2::<f64>::zeros((va.nrows(), vb.ncols()));
        general_mat_mul(1.0, &va, &vb, 0.0, &mut out);
        self.push(out.into_dyn(), Op::Matmul { a, b })
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (vx, vw) = (as2(self.value(x)), as2(self.value(w)));
        let vb = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(vx.ncols(), vw.nrows(), "linear: inner dims");
        assert_eq!(vw.ncols(), vb.len(), "linear: bias length");
        let mut out = Array2::<f64>::zeros((vx.nrows(), vw.ncols()));
        general_mat_mul(1.0, &vx, &vw, 0.0, &mut out);
        out += &vb;
        self.push(out.into_dyn(), Op::Linear { x, w, bias })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape: element count"
        );
        let out = v
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push(out, Op::Reshape { x })
    }

    pub fn index_axis0(&mut self, x: Var, idx: usize) -> Var {
        let v = self.value(x);
        assert!(v.ndim() >= 1 && idx < v.shape()[0], "index_axis0: out of range");
        let out = v.index_axis(Axis(0), idx).to_owned();
        self.push(out, Op::IndexAxis0 { x, idx })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(scalar(s), Op::SumAll { x })
    }

    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(v.ndim() >= 1 && v.shape()[0] > 0, "mean_axis0: empty axis");
        let out = v.mean_axis(Axis(0)).expect("mean_axis0");
        self.push(out, Op::MeanAxis0 { x })
    }

    pub fn spatial_mean_pool(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("spatial_mean_pool: rank-4 input");
        let (t, h, w, c) = v.dim();
        let mut out = Array2::<f64>::zeros((t, c));
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        out[[ti, ci]] += v[[ti, hi, wi, ci]];
                    }
                }
            }
        }
        out.mapv_inplace(|a| a / (h * w) as f64);
        self.push(out.into_dyn(), Op::SpatialMeanPool { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = as2(self.value(x));
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            row.mapv_inplace(|a| (a - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|a| a / s);
        }
        self.push(out.into_dyn(), Op::SoftmaxRows { x })
    }

    pub fn per_class_linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let vx = as2(self.value(x));
        let vw = self.value(w).view().into_dimensionality::<Ix3>().unwrap();
        let vb = as2(self.value(bias));
        let (t, f) = vx.dim();
        let (c, fw, d) = vw.dim();
        assert_eq!(f, fw, "per_class_linear: feature dim");
        assert_eq!(vb.dim(), (c, d), "per_class_linear: bias shape");
        let mut out = ndarray::Array3::<f64>::zeros((t, c, d));
        for ci in 0..c {
            let mut slice = out.index_axis_mut(Axis(1), ci);
            general_mat_mul(1.0, &vx, &vw.index_axis(Axis(0), ci), 0.0, &mut slice);
            slice += &vb.row(ci);
        }
        self.push(out.into_dyn(), Op::PerClassLinear { x, w, bias })
    }

    pub fn per_class_dot(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let vw = as2(self.value(w));
        let vb = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let (t, c, d) = vx.dim();
        let shared = vw.nrows() == 1;
        assert!(
            vw.dim() == (c, d) || (shared && vw.ncols() == d),
            "per_class_dot: weight shape"
        );
        assert_eq!(vb.len(), vw.nrows(), "per_class_dot: bias length");
        let mut out = Array2::<f64>::zeros((t, c));
        for ti in 0..t {
            for ci in 0..c {
                let wi = if shared { 0 } else { ci };
                let mut acc = 0.0;
                for di in 0..d {
                    acc += vx[[ti, ci, di]] * vw[[wi, di]];
                }
                out[[ti, ci]] = acc + vb[wi];
            }
        }
        self.push(out.into_dyn(), Op::PerClassDot { x, w, bias })
    }

    pub fn attn_scores(&mut self, e1: Var, e2: Var) -> Var {
        let v1 = self.value(e1).view().into_dimensionality::<Ix3>().unwrap();
        let v2 = self.value(e2).view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(v1.dim(), v2.dim(), "attn_scores: operand shapes");
        let m1 = flatten_classes(&self.nodes[e1.0].value);
        let m2 = flatten_classes(&self.nodes[e2.0].value);
        let c = m1.nrows();
        let mut out = Array2::<f64>::zeros((c, c));
        general_mat_mul(1.0, &m1.view(), &m2.t(), 0.0, &mut out);
        self.push(out.into_dyn(), Op::AttnScores { e1, e2 })
    }

    pub fn graph_mix(&mut self, adj: Var, nodes: Var) -> Var {
        let va = as2(self.value(adj));
        let vn = self.value(nodes).view().into_dimensionality::<Ix3>().unwrap();
        let (t, c, d) = vn.dim();
        assert_eq!(va.dim(), (c, c), "graph_mix: adjacency shape");
        let mut out = ndarray::Array3::<f64>::zeros((t, c, d));
        for ti in 0..t {
            let mut slice = out.index_axis_mut(Axis(0), ti);
            general_mat_mul(1.0, &va, &vn.index_axis(Axis(0), ti), 0.0, &mut slice);
        }
        self.push(out.into_dyn(), Op::GraphMix { adj, nodes })
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        k: Var,
        bias: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let vk = self.value(k).view().into_dimensionality::<Ix5>().unwrap();
        let vb = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let (t, h, w, ci) = vx.dim();
        let (kt, kh, kw, kci, co) = vk.dim();
        assert_eq!(ci, kci, "conv3d: channel mismatch");
        assert_eq!(vb.len(), co, "conv3d: bias length");
        assert!(kt % 2 == 1, "conv3d: temporal kernel must be odd");
        let ho = (h + 2 * pad.0).checked_sub(kh).expect("conv3d: kernel larger than padded input") / stride.0 + 1;
        let wo = (w + 2 * pad.1).checked_sub(kw).expect("conv3d: kernel larger than padded input") / stride.1 + 1;
        let cols = im2col_3d(&vx.to_owned(), (kt, kh, kw), stride, pad);
        let kmat = self.nodes[k.0]
            .value
            .view()
            .into_shape_with_order((kt * kh * kw * ci, co))
            .expect("conv3d: kernel reshape");
        let mut out = Array2::<f64>::zeros((t * ho * wo, co));
        general_mat_mul(1.0, &cols.view(), &kmat, 0.0, &mut out);
        out += &vb;
        let out = out
            .into_shape_with_order((t, ho, wo, co))
            .expect("conv3d: output reshape");
        self.push(out.into_dyn(), Op::Conv3d { x, k, bias, stride, pad })
    }

    pub fn temporal_conv_same(&mut self, x: Var, k: Var) -> Var {
        let vx = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let vk = self.value(k).view().into_dimensionality::<Ix3>().unwrap();
        let (t, c, din) = vx.dim();
        let (kt, kdin, dout) = vk.dim();
        assert_eq!(din, kdin, "temporal_conv_same: channel mismatch");
        assert!(kt % 2 == 1, "temporal_conv_same: kernel must be odd");
        let off = kt / 2;
        let xm = self.nodes[x.0]
            .value
            .view()
            .into_shape_with_order((t * c, din))
            .expect("temporal_conv_same: row view");
        let mut out = Array2::<f64>::zeros((t * c, dout));
        for tap in 0..kt {
            let shift = tap as isize - off as isize;
            let (t0, t1) = tap_range(t, shift);
            if t0 >= t1 {
                continue;
            }
            let src = xm.slice(ndarray::s![
                ((t0 as isize + shift) as usize * c)..((t1 as isize + shift) as usize * c),
                ..
            ]);
            let mut dst = out.slice_mut(ndarray::s![(t0 * c)..(t1 * c), ..]);
            general_mat_mul(1.0, &src, &vk.index_axis(Axis(0), tap), 1.0, &mut dst);
        }
        let out = out
            .into_shape_with_order((t, c, dout))
            .expect("temporal_conv_same: output reshape");
        self.push(out.into_dyn(), Op::TemporalConvSame { x, k })
    }

    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Var {
        let v = self.value(logits).view().into_dimensionality::<Ix1>().unwrap();
        assert!(target < v.len(), "cross_entropy_logits: target out of range");
        let mx = v.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
        let lse = mx + v.iter().map(|&a| (a - mx).exp()).sum::<f64>().ln();
        let loss = lse - v[target];
        self.push(scalar(loss), Op::CrossEntropyLogits { logits, target })
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let v = as2(self.value(logits));
        assert_eq!(v.dim(), targets.dim(), "bce_with_logits: target shape");
        let n = v.len() as f64;
        let mut loss = 0.0;
        for (z, y) in v.iter().zip(targets.iter()) {
            // max(z,0) - z*y + ln(1 + exp(-|z|)) is the stable form.
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        self.push(scalar(loss / n), Op::BceWithLogits { logits, targets })
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.ndim(),
            0,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                }
                Op::Relu { x } => {
                    let mask = self.value(*x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *x, gout * mask);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gout.clone());
                    accumulate(&mut grads, *b, gout);
                }
                Op::Mul { a, b } => {
                    accumulate(&mut grads, *a, &gout * self.value(*b));
                    accumulate(&mut grads, *b, gout * self.value(*a));
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, gout.mapv(|g| g * c));
                }
                Op::Matmul { a, b } => {
                    let (va, vb, g) = (as2(self.value(*a)), as2(self.value(*b)), as2(&gout));
                    let mut da = Array2::<f64>::zeros(va.dim());
                    general_mat_mul(1.0, &g, &vb.t(), 0.0, &mut da);
                    let mut db = Array2::<f64>::zeros(vb.dim());
                    general_mat_mul(1.0, &va.t(), &g, 0.0, &mut db);
                    accumulate(&mut grads, *a, da.into_dyn());
                    accumulate(&mut grads, *b, db.into_dyn());
                }
                Op::Linear { x, w, bias } => {
                    let (vx, vw, g) = (as2(self.value(*x)), as2(self.value(*w)), as2(&gout));
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    general_mat_mul(1.0, &g, &vw.t(), 0.0, &mut dx);
                    let mut dw = Array2::<f64>::zeros(vw.dim());
                    general_mat_mul(1.0, &vx.t(), &g, 0.0, &mut dw);
                    let db = g.sum_axis(Axis(0));
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *bias, db.into_dyn());
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).raw_dim();
                    accumulate(
                        &mut grads,
                        *x,
                        gout.into_shape_with_order(shape).expect("reshape grad"),
                    );
                }
                Op::IndexAxis0 { x, idx } => {
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    dx.index_axis_mut(Axis(0), *idx).assign(&gout);
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumAll { x } => {
                    let g = scalar_value(&gout);
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_elem(self.value(*x).raw_dim(), g),
                    );
                }
                Op::MeanAxis0 { x } => {
                    let t = self.value(*x).shape()[0];
                    let mut dx = Tensor::zeros(self.value(*x).raw_dim());
                    let gscaled = gout.mapv(|g| g / t as f64);
                    for mut lane in dx.axis_iter_mut(Axis(0)) {
                        lane += &gscaled;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SpatialMeanPool { x } => {
                    let vx = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let (t, h, w, c) = vx.dim();
                    let g = as2(&gout);
                    let inv = 1.0 / (h * w) as f64;
                    let mut dx = ndarray::Array4::<f64>::zeros((t, h, w, c));
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                for cc in 0..c {
                                    dx[[ti, hi, wi, cc]] = g[[ti, cc]] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::SoftmaxRows { x } => {
                    let y = as2(&self.nodes[i].value);
                    let g = as2(&gout);
                    let mut dx = Array2::<f64>::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| a * b).sum();
                        for cidx in 0..y.ncols() {
                            dx[[r, cidx]] = y[[r, cidx]] * (g[[r, cidx]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                }
                Op::PerClassLinear { x, w, bias } => {
                    let vx = as2(self.value(*x));
                    let vw = self.value(*w).view().into_dimensionality::<Ix3>().unwrap();
                    let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, _f, _d) = vw.dim();
                    let mut dx = Array2::<f64>::zeros(vx.dim());
                    let mut dw = ndarray::Array3::<f64>::zeros(vw.dim());
                    let mut db = Array2::<f64>::zeros((c, vw.dim().2));
                    for ci in 0..c {
                        let gc = g.index_axis(Axis(1), ci);
                        general_mat_mul(
                            1.0,
                            &gc,
                            &vw.index_axis(Axis(0), ci).t(),
                            1.0,
                            &mut dx.view_mut(),
                        );
                        let mut dwc = dw.index_axis_mut(Axis(0), ci);
                        general_mat_mul(1.0, &vx.t(), &gc, 0.0, &mut dwc);
                        db.row_mut(ci).assign(&gc.sum_axis(Axis(0)));
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *bias, db.into_dyn());
                }
                Op::PerClassDot { x, w, bias } => {
                    let vx = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                    let vw = as2(self.value(*w));
                    let g = as2(&gout);
                    let (t, c, d) = vx.dim();
                    let shared = vw.nrows() == 1;
                    let mut dx = ndarray::Array3::<f64>::zeros((t, c, d));
                    let mut dw = Array2::<f64>::zeros(vw.dim());
                    let mut db = Array1::<f64>::zeros(vw.nrows());
                    for ti in 0..t {
                        for ci in 0..c {
                            let wi = if shared { 0 } else { ci };
                            let gv = g[[ti, ci]];
                            for di in 0..d {
                                dx[[ti, ci, di]] = gv * vw[[wi, di]];
                                dw[[wi, di]] += gv * vx[[ti, ci, di]];
                            }
                            db[wi] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *bias, db.into_dyn());
                }
                Op::AttnScores { e1, e2 } => {
                    let m1 = flatten_classes(self.value(*e1));
                    let m2 = flatten_classes(self.value(*e2));
                    let g = as2(&gout);
                    let mut dm1 = Array2::<f64>::zeros(m1.dim());
                    general_mat_mul(1.0, &g, &m2.view(), 0.0, &mut dm1);
                    let mut dm2 = Array2::<f64>::zeros(m2.dim());
                    general_mat_mul(1.0, &g.t(), &m1.view(), 0.0, &mut dm2);
                    let shape = self.value(*e1).raw_dim();
                    accumulate(&mut grads, *e1, unflatten_classes(dm1, &shape));
                    accumulate(&mut grads, *e2, unflatten_classes(dm2, &shape));
                }
                Op::GraphMix { adj, nodes } => {
                    let va = as2(self.value(*adj));
                    let vn = self.value(*nodes).view().into_dimensionality::<Ix3>().unwrap();
                    let g = gout.view().into_dimensionality::<Ix3>().unwrap();
                    let (t, _c, _d) = vn.dim();
                    let mut da = Array2::<f64>::zeros(va.dim());
                    let mut dn = ndarray::Array3::<f64>::zeros(vn.dim());
                    for ti in 0..t {
                        let gt = g.index_axis(Axis(0), ti);
                        general_mat_mul(
                            1.0,
                            &gt,
                            &vn.index_axis(Axis(0), ti).t(),
                            1.0,
                            &mut da.view_mut(),
                        );
                        let mut dnt = dn.index_axis_mut(Axis(0), ti);
                        general_mat_mul(1.0, &va.t(), &gt, 0.0, &mut dnt);
                    }
                    accumulate(&mut grads, *adj, da.into_dyn());
                    accumulate(&mut grads, *nodes, dn.into_dyn());
                }
                Op::Conv3d { x, k, bias, stride, pad } => {
                    let vx = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let vk = self.value(*k).view().into_dimensionality::<Ix5>().unwrap();
                    let (kt, kh, kw, ci, co) = vk.dim();
                    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                    let (t, ho, wo, _) = g4.dim();
                    let gmat = gout
                        .view()
                        .into_shape_with_order((t * ho * wo, co))
                        .expect("conv3d grad reshape");
                    // Kernel and bias gradients via the re-built patch matrix.
                    let cols = im2col_3d(&vx.to_owned(), (kt, kh, kw), *stride, *pad);
                    let mut dk = Array2::<f64>::zeros((kt * kh * kw * ci, co));
                    general_mat_mul(1.0, &cols.t(), &gmat, 0.0, &mut dk);
                    let dk = dk
                        .into_shape_with_order((kt, kh, kw, ci, co))
                        .expect("conv3d kernel grad reshape");
                    let db = gmat.sum_axis(Axis(0));
                    // Input gradient: scatter dOut · Kᵀ back through the patches.
                    let kmat = self.nodes[k.0]
                        .value
                        .view()
                        .into_shape_with_order((kt * kh * kw * ci, co))
                        .expect("conv3d kernel reshape");
                    let mut dcols = Array2::<f64>::zeros(cols.dim());
                    general_mat_mul(1.0, &gmat, &kmat.t(), 0.0, &mut dcols);
                    let dx = col2im_3d(&dcols, vx.dim(), (kt, kh, kw), *stride, *pad, (ho, wo));
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *k, dk.into_dyn());
                    accumulate(&mut grads, *bias, db.into_dyn());
                }
                Op::TemporalConvSame { x, k } => {
                    let vx = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                    let vk = self.value(*k).view().into_dimensionality::<Ix3>().unwrap();
                    let (t, c, din) = vx.dim();
                    let (kt, _din, dout) = vk.dim();
                    let off = kt / 2;
                    let xm = self.nodes[x.0]
                        .value
                        .view()
                        .into_shape_with_order((t * c, din))
                        .unwrap();
                    let gm = gout
                        .view()
                        .into_shape_with_order((t * c, dout))
                        .unwrap();
                    let mut dx = Array2::<f64>::zeros((t * c, din));
                    let mut dk = ndarray::Array3::<f64>::zeros(vk.dim());
                    for tap in 0..kt {
                        let shift = tap as isize - off as isize;
                        let (t0, t1) = tap_range(t, shift);
                        if t0 >= t1 {
                            continue;
                        }
                        let rows_src = ((t0 as isize + shift) as usize * c)
                            ..((t1 as isize + shift) as usize * c);
                        let rows_dst = (t0 * c)..(t1 * c);
                        let gslice = gm.slice(ndarray::s![rows_dst.clone(), ..]);
                        let mut dxs = dx.slice_mut(ndarray::s![rows_src.clone(), ..]);
                        general_mat_mul(
                            1.0,
                            &gslice,
                            &vk.index_axis(Axis(0), tap).t(),
                            1.0,
                            &mut dxs,
                        );
                        let xs = xm.slice(ndarray::s![rows_src, ..]);
                        let mut dks = dk.index_axis_mut(Axis(0), tap);
                        general_mat_mul(1.0, &xs.t(), &gslice, 1.0, &mut dks);
                    }
                    let dx = dx.into_shape_with_order((t, c, din)).unwrap();
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *k, dk.into_dyn());
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let v = self.value(*logits).view().into_dimensionality::<Ix1>().unwrap();
                    let g = scalar_value(&gout);
                    let mx = v.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
                    let exps: Array1<f64> = v.mapv(|a| (a - mx).exp());
                    let sum = exps.sum();
                    let mut dz = exps.mapv(|e| e / sum * g);
                    dz[*target] -= g;
                    accumulate(&mut grads, *logits, dz.into_dyn());
                }
                Op::BceWithLogits { logits, targets } => {
                    let v = as2(self.value(*logits));
                    let g = scalar_value(&gout);
                    let n = v.len() as f64;
                    let mut dz = Array2::<f64>::zeros(v.dim());
                    for ((r, cidx), z) in v.indexed_iter() {
                        let sig = 1.0 / (1.0 + (-z).exp());
                        dz[[r, cidx]] = (sig - targets[[r, cidx]]) / n * g;
                    }
                    accumulate(&mut grads, *logits, dz.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// `(T,C,E)` -> `(C, T·E)` with rows indexed by class.
fn flatten_classes(t: &Tensor) -> Array2<f64> {
    let v = t.view().into_dimensionality::<Ix3>().unwrap();
    let (tt, c, e) = v.dim();
    let mut out = Array2::<f64>::zeros((c, tt * e));
    for ti in 0..tt {
        for ci in 0..c {
            for ei in 0..e {
                out[[ci, ti * e + ei]] = v[[ti, ci, ei]];
            }
        }
    }
    out
}

fn unflatten_classes(m: Array2<f64>, shape: &IxDyn) -> Tensor {
    let (tt, c, e) = (shape[0], shape[1], shape[2]);
    let mut out = ndarray::Array3::<f64>::zeros((tt, c, e));
    for ti in 0..tt {
        for ci in 0..c {
            for ei in 0..e {
                out[[ti, ci, ei]] = m[[ci, ti * e + ei]];
            }
        }
    }
    out.into_dyn()
}

/// Valid output range `[t0, t1)` for a tap shifted by `shift` frames.
fn tap_range(t: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (t as isize - shift.max(0)).max(0) as usize;
    (t0.min(t), t1.min(t))
}

/// Extract overlapping 3-D patches as rows: `(T·Ho·Wo, kt·kh·kw·Ci)`.
/// Temporal padding is fixed to `kt/2` so the frame count is preserved.
fn im2col_3d(
    x: &ndarray::Array4<f64>,
    kernel: (usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
) -> Array2<f64> {
    let (t, h, w, ci) = x.dim();
    let (kt, kh, kw) = kernel;
    let pt = kt / 2;
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (w + 2 * pad.1 - kw) / stride.1 + 1;
    let mut cols = Array2::<f64>::zeros((t * ho * wo, kt * kh * kw * ci));
    for to in 0..t {
        for hoi in 0..ho {
            for woi in 0..wo {
                let row = (to * ho + hoi) * wo + woi;
                for dt in 0..kt {
                    let ti = to as isize + dt as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dh in 0..kh {
                        let hi = (hoi * stride.0 + dh) as isize - pad.0 as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let wi = (woi * stride.1 + dw) as isize - pad.1 as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            let col0 = ((dt * kh + dh) * kw + dw) * ci;
                            for cii in 0..ci {
                                cols[[row, col0 + cii]] = x[[ti as usize, hi as usize, wi as usize, cii]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add patch-space gradients back onto the input grid.
fn col2im_3d(
    dcols: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    kernel: (usize, usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out_hw: (usize, usize),
) -> ndarray::Array4<f64> {
    let (t, h, w, ci) = x_dim;
    let (kt, kh, kw) = kernel;
    let pt = kt / 2;
    let (ho, wo) = out_hw;
    let mut dx = ndarray::Array4::<f64>::zeros((t, h, w, ci));
    for to in 0..t {
        for hoi in 0..ho {
            for woi in 0..wo {
                let row = (to * ho + hoi) * wo + woi;
                for dt in 0..kt {
                    let ti = to as isize + dt as isize - pt as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    for dh in 0..kh {
                        let hi = (hoi * stride.0 + dh) as isize - pad.0 as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for dw in 0..kw {
                            let wi = (woi * stride.1 + dw) as isize - pad.1 as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            let col0 = ((dt * kh + dh) * kw + dw) * ci;
                            for cii in 0..ci {
                                dx[[ti as usize, hi as usize, wi as usize, cii]] +=
                                    dcols[[row, col0 + cii]];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Central-difference gradient of `f` w.r.t. one tensor, for checking
/// analytic gradients in tests and diagnostics.
pub fn finite_difference<F>(tensor: &mut Tensor, eps: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(tensor.raw_dim());
    for idx in 0..tensor.len() {
        let orig = tensor.as_slice_mut().unwrap()[idx];
        tensor.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(tensor);
        tensor.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(tensor);
        tensor.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative error between two gradient values, with an absolute floor so that
/// pairs of near-zero entries compare as equal.
pub fn grad_relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Largest elementwise [`grad_relative_error`] between two gradient tensors.
pub fn max_grad_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| grad_relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Build loss = weighted sum of op output; FD-check every input.
    fn check_op<B>(shapes: &[&[usize]], build: B)
    where
        B: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = StdRng::seed_from_u64(7);
        let mut inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        // Random projection keeps the scalar loss sensitive to every output cell.
        let probe: Vec<f64> = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let eval = |tensors: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let out_shape = tape.value(out).raw_dim();
            let w = Tensor::from_shape_vec(out_shape, probe.clone()).unwrap();
            let wv = tape.leaf(w);
            let prod = tape.mul(out, wv);
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss);
            let g = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();
            (scalar_value(tape.value(loss)), g)
        };
        let (_, analytic) = eval(&inputs);
        for i in 0..inputs.len() {
            let mut work = inputs.clone();
            let numeric = finite_difference(&mut inputs[i], 1e-5, |t| {
                work[i] = t.clone();
                eval(&work).0
            });
            let err = max_grad_error(&analytic[i], &numeric);
            assert!(err < 1e-6, "input {i}: max rel err {err}");
        }
    }

    #[test]
    fn relu_and_add_grads() {
        check_op(&[&[3, 4], &[3, 4]], |t, v| {
            let r = t.relu(v[0]);
            t.add(r, v[1])
        });
    }

    #[test]
    fn mul_scale_grads() {
        check_op(&[&[2, 5], &[2, 5]], |t, v| {
            let m = t.mul(v[0], v[1]);
            t.scale(m, 0.37)
        });
    }

    #[test]
    fn matmul_linear_grads() {
        check_op(&[&[3, 4], &[4, 2], &[2]], |t, v| t.linear(v[0], v[1], v[2]));
        check_op(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn softmax_rows_grads() {
        check_op(&[&[4, 5]], |t, v| t.softmax_rows(v[0]));
    }

    #[test]
    fn pooling_grads() {
        check_op(&[&[3, 2, 2, 4]], |t, v| t.spatial_mean_pool(v[0]));
        check_op(&[&[5, 3, 2]], |t, v| t.mean_axis0(v[0]));
    }

    #[test]
    fn index_axis0_grads() {
        check_op(&[&[4, 3, 2]], |t, v| t.index_axis0(v[0], 2));
        // Fan-out through two slices of the same tensor.
        check_op(&[&[2, 3]], |t, v| {
            let a = t.index_axis0(v[0], 0);
            let b = t.index_axis0(v[0], 1);
            t.add(a, b)
        });
    }

    #[test]
    fn per_class_ops_grads() {
        check_op(&[&[3, 6], &[4, 6, 2], &[4, 2]], |t, v| {
            t.per_class_linear(v[0], v[1], v[2])
        });
        check_op(&[&[3, 4, 5], &[4, 5], &[4]], |t, v| {
            t.per_class_dot(v[0], v[1], v[2])
        });
        // Shared (broadcast) classifier weights.
        check_op(&[&[3, 4, 5], &[1, 5], &[1]], |t, v| {
            t.per_class_dot(v[0], v[1], v[2])
        });
    }

    #[test]
    fn attention_and_graph_grads() {
        check_op(&[&[3, 4, 2], &[3, 4, 2]], |t, v| t.attn_scores(v[0], v[1]));
        check_op(&[&[4, 4], &[3, 4, 5]], |t, v| t.graph_mix(v[0], v[1]));
    }

    #[test]
    fn conv3d_grads() {
        // stride 2 with padding
        check_op(&[&[3, 6, 6, 2], &[3, 3, 3, 2, 3], &[3]], |t, v| {
            t.conv3d(v[0], v[1], v[2], (2, 2), (1, 1))
        });
        // stride 1, no padding
        check_op(&[&[2, 5, 5, 2], &[3, 3, 3, 2, 2], &[2]], |t, v| {
            t.conv3d(v[0], v[1], v[2], (1, 1), (0, 0))
        });
    }

    #[test]
    fn temporal_conv_grads() {
        check_op(&[&[5, 3, 4], &[3, 4, 4]], |t, v| t.temporal_conv_same(v[0], v[1]));
        // Kernel longer than the sequence still works via zero padding.
        check_op(&[&[2, 3, 4], &[9, 4, 4]], |t, v| t.temporal_conv_same(v[0], v[1]));
    }

    #[test]
    fn loss_grads() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut logits = rand_tensor(&mut rng, &[6]);
        let eval_ce = |t: &Tensor| {
            let mut tape = Tape::new();
            let l = tape.leaf(t.clone());
            let loss = tape.cross_entropy_logits(l, 2);
            scalar_value(tape.value(loss))
        };
        let numeric = finite_difference(&mut logits, 1e-6, |t| eval_ce(t));
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone());
        let loss = tape.cross_entropy_logits(l, 2);
        let analytic = tape.backward(loss).wrt(&tape, l);
        assert!(max_grad_error(&analytic, &numeric) < 1e-7);

        let targets = Array2::from_shape_fn((3, 4), |(r, c)| ((r + c) % 2) as f64);
        let mut z = rand_tensor(&mut rng, &[3, 4]);
        let eval_bce = |t: &Tensor| {
            let mut tape = Tape::new();
            let l = tape.leaf(t.clone());
            let loss = tape.bce_with_logits(l, targets.clone());
            scalar_value(tape.value(loss))
        };
        let numeric = finite_difference(&mut z, 1e-6, |t| eval_bce(t));
        let mut tape = Tape::new();
        let l = tape.leaf(z.clone());
        let loss = tape.bce_with_logits(l, targets.clone());
        let analytic = tape.backward(loss).wrt(&tape, l);
        assert!(max_grad_error(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x (via mul) + x → dy/dx = 2x + 1 at every element.
        let x0 = Tensor::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.25, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x);
        let sum = tape.add(sq, x);
        let loss = tape.sum_all(sum);
        let g = tape.backward(loss).wrt(&tape, x);
        for (gi, xi) in g.iter().zip(x0.iter()) {
            assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_matches_naive_loops() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = Array4::from_shape_fn((3, 5, 5, 2), |_| rng.gen_range(-1.0..1.0));
        let k = ndarray::Array5::from_shape_fn((3, 3, 3, 2, 4), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
        let (sh, sw, ph, pw) = (2usize, 2usize, 1usize, 1usize);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let kv = tape.leaf(k.clone().into_dyn());
        let bv = tape.leaf(b.clone().into_dyn());
        let out = tape.conv3d(xv, kv, bv, (sh, sw), (ph, pw));
        let got = tape.value(out).view().into_dimensionality::<Ix4>().unwrap().to_owned();

        let (t, h, w, ci) = x.dim();
        let ho = (h + 2 * ph - 3) / sh + 1;
        let wo = (w + 2 * pw - 3) / sw + 1;
        let mut want = Array4::<f64>::zeros((t, ho, wo, 4));
        for to in 0..t {
            for hoi in 0..ho {
                for woi in 0..wo {
                    for co in 0..4 {
                        let mut acc = b[co];
                        for dt in 0..3usize {
                            for dh in 0..3usize {
                                for dw in 0..3usize {
                                    let ti = to as isize + dt as isize - 1;
                                    let hi = (hoi * sh + dh) as isize - ph as isize;
                                    let wi = (woi * sw + dw) as isize - pw as isize;
                                    if ti < 0 || ti >= t as isize || hi < 0 || hi >= h as isize || wi < 0 || wi >= w as isize {
                                        continue;
                                    }
                                    for cii in 0..ci {
                                        acc += x[[ti as usize, hi as usize, wi as usize, cii]]
                                            * k[[dt, dh, dw, cii, co]];
                                    }
                                }
                            }
                        }
                        want[[to, hoi, woi, co]] = acc;
                    }
                }
            }
        }
        let diff = (&got - &want).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "conv3d mismatch vs naive loops: {diff}");
    }

    #[test]
    fn temporal_conv_matches_naive_loops() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = Array3::from_shape_fn((6, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let k = Array3::from_shape_fn((5, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().into_dyn());
        let kv = tape.leaf(k.clone().into_dyn());
        let out = tape.temporal_conv_same(xv, kv);
        let got = tape.value(out).view().into_dimensionality::<Ix3>().unwrap().to_owned();

        let (t, c, din) = x.dim();
        let mut want = Array3::<f64>::zeros((t, c, 3));
        for ti in 0..t {
            for ci in 0..c {
                for o in 0..3usize {
                    let mut acc = 0.0;
                    for tap in 0..5usize {
                        let src = ti as isize + tap as isize - 2;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for i in 0..din {
                            acc += x[[src as usize, ci, i]] * k[[tap, i, o]];
                        }
                    }
                    want[[ti, ci, o]] = acc;
                }
            }
        }
        let diff = (&got - &want).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "temporal conv mismatch vs naive loops: {diff}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(IxDyn(&[6])));
        let loss = tape.cross_entropy_logits(l, 3);
        assert!((scalar_value(tape.value(loss)) - 6f64.ln()).abs() < 1e-12);
    }
}
