//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse. A node participates in differentiation only if some
//! ancestor leaf was created with `requires_grad = true`, so frozen weights
//! (e.g. a base model under adapter training) cost no gradient work.
//!
//! Tensors are batch-first throughout: images `[B, C, H, W]`, token
//! sequences `[B, N, D]`, vectors `[B, D]`.

use std::sync::Arc;

use ndarray::{concatenate, Array, Array1, Array2, Array4, ArrayD, Axis, CowArray, Dimension, Ix2, Ix3, Ix4, IxDyn};

use crate::conv::{col2im_add, conv_out_dim, im2col};
use crate::real::Real;

/// Reshapes an owned array, copying into row-major order when the source
/// layout disallows a free reshape (matrix products with a single-element
/// axis can come back in non-standard layout).
fn reshape_owned<T: Real, D: Dimension>(a: Array<T, D>, shape: &[usize]) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.into_shape_with_order(IxDyn(shape)).unwrap()
    } else {
        let v: Vec<T> = a.iter().copied().collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }
}

/// A `[rows, cols]` 2-D view of `a`, copying only if `a`'s layout cannot be
/// reshaped in place.
fn view_2d<T: Real>(a: &ArrayD<T>, rows: usize, cols: usize) -> CowArray<'_, T, Ix2> {
    match a.view().into_shape_with_order((rows, cols)) {
        Ok(v) => v.into(),
        Err(_) => {
            let v: Vec<T> = a.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), v).unwrap().into()
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<T: Real> {
    value: Arc<ArrayD<T>>,
    needs_grad: bool,
    op: Op<T>,
}

enum Op<T: Real> {
    Leaf,
    /// `x [B,Cin,H,W] * w [Cout,Cin,kh,kw] (+ b [Cout])`, caching per-sample
    /// im2col matrices for the backward GEMMs.
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<Array2<T>>,
    },
    /// `x [..., Din] · wᵀ [Din,Dout] (+ b)`, flattening leading axes.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Scaled dot-product attention per sample; caches softmax probabilities.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<Array2<T>>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: ArrayD<T>,
        inv_std: Array2<T>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `x [B,C,H,W] + v [B,C]` broadcast over space.
    AddChannelBias {
        x: Var,
        v: Var,
    },
    ScaleConst {
        x: Var,
        s: T,
    },
    ConcatCh {
        a: Var,
        b: Var,
    },
    UpsampleNearest2 {
        x: Var,
    },
    /// `[B,C,H,W] -> [B,H*W,C]`
    ToTokens {
        x: Var,
    },
    /// `[B,N,C] -> [B,C,h,w]` with `N = h*w`
    FromTokens {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    /// Mean of embedding-table rows per sample: `table [V,D] -> [B,D]`.
    EmbedMean {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
    /// `[B,C,H,W] -> [B,C]`
    MeanSpatial {
        x: Var,
    },
    /// Scalar `mean((x - target)^2)`.
    MseConst {
        x: Var,
        target: ArrayD<T>,
    },
    /// Scalar mean cross-entropy of logits `[B,K]` against class labels.
    CeLogits {
        x: Var,
        labels: Vec<usize>,
        probs: Array2<T>,
    },
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    g: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient for `v`, if it was reached and required one.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.g.get_mut(v.0).and_then(|o| o.take())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a node (borrow).
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a node (shared handle, no copy).
    pub fn value_arc(&self, v: Var) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on node with {} elements", val.len());
        *val.iter().next().unwrap()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Arc<ArrayD<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad: requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d: x rank 4");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d: w rank 4");
        let (bs, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, wcin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(cin, wcin, "conv2d: channel mismatch {cin} vs {wcin}");
        let ho = conv_out_dim(h, kh, stride, pad);
        let wo = conv_out_dim(wdt, kw, stride, pad);
        let w2 = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
        let mut y = Array4::<T>::zeros((bs, cout, ho, wo));
        let mut cols = Vec::with_capacity(bs);
        for bi in 0..bs {
            let col = im2col(xv.index_axis(Axis(0), bi), kh, kw, stride, pad);
            let y_mat = w2.dot(&col);
            let mut yb = y.index_axis_mut(Axis(0), bi);
            let y_resh = y_mat.into_shape_with_order((cout, ho, wo)).unwrap();
            yb.assign(&y_resh);
            cols.push(col);
        }
        if let Some(bvar) = b {
            let bv = self.value(bvar).clone();
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("conv2d: b rank 1");
            assert_eq!(b1.len(), cout, "conv2d: bias length");
            for co in 0..cout {
                let bc = b1[co];
                y.index_axis_mut(Axis(1), co).mapv_inplace(|v| v + bc);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        // Column caches are only needed when gradients will be requested.
        let cols = if needs { cols } else { Vec::new() };
        self.push(y.into_dyn(), needs, Op::Conv2d { x, w, b, stride, pad, cols })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("linear: w rank 2");
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        let xsh = xv.shape().to_vec();
        assert!(xsh.len() >= 2, "linear: x rank >= 2");
        assert_eq!(*xsh.last().unwrap(), din, "linear: inner dim {} vs {}", xsh.last().unwrap(), din);
        let rows: usize = xsh[..xsh.len() - 1].iter().product();
        let x2 = view_2d(xv, rows, din);
        let mut y2 = x2.dot(&wv.t());
        if let Some(bvar) = b {
            let bv = self.value(bvar).view().into_dimensionality::<ndarray::Ix1>().expect("linear: b rank 1");
            assert_eq!(bv.len(), dout, "linear: bias length");
            y2 += &bv;
        }
        let mut ysh = xsh[..xsh.len() - 1].to_vec();
        ysh.push(dout);
        let y = reshape_owned(y2, &ysh);
        let needs = self.ng(x) || self.ng(w) || b.map(|bv| self.ng(bv)).unwrap_or(false);
        self.push(y, needs, Op::Linear { x, w, b })
    }

    /// `q [B,N,D], k [B,M,D], v [B,M,D] -> [B,N,D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qv = self.value(q).view().into_dimensionality::<Ix3>().expect("attention: q rank 3");
        let kv = self.value(k).view().into_dimensionality::<Ix3>().expect("attention: k rank 3");
        let vv = self.value(v).view().into_dimensionality::<Ix3>().expect("attention: v rank 3");
        let (bs, n, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let m = kv.shape()[1];
        assert_eq!(kv.shape(), &[bs, m, d], "attention: k shape");
        assert_eq!(vv.shape(), &[bs, m, d], "attention: v shape");
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut y = ndarray::Array3::<T>::zeros((bs, n, d));
        let mut probs = Vec::with_capacity(bs);
        for bi in 0..bs {
            let qb = qv.index_axis(Axis(0), bi);
            let kb = kv.index_axis(Axis(0), bi);
            let vb = vv.index_axis(Axis(0), bi);
            let mut s = qb.dot(&kb.t());
            s.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut s);
            let yb = s.dot(&vb);
            y.index_axis_mut(Axis(0), bi).assign(&yb);
            probs.push(s);
        }
        let needs = self.ng(q) || self.ng(k) || self.ng(v);
        let probs = if needs { probs } else { Vec::new() };
        self.push(y.into_dyn(), needs, Op::Attention { q, k, v, probs })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("group_norm: x rank 4");
        let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let cg = c / groups;
        let n = (cg * h * w) as f64;
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let g1 = gv.view().into_dimensionality::<ndarray::Ix1>().expect("group_norm: gamma rank 1");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("group_norm: beta rank 1");
        assert_eq!(g1.len(), c);
        assert_eq!(b1.len(), c);
        let mut xhat = Array4::<T>::zeros((bs, c, h, w));
        let mut inv_std = Array2::<T>::zeros((bs, groups));
        let mut y = Array4::<T>::zeros((bs, c, h, w));
        for bi in 0..bs {
            for g in 0..groups {
                let sl = xv.slice(ndarray::s![bi, g * cg..(g + 1) * cg, .., ..]);
                let mut mean = 0.0f64;
                for &val in sl.iter() {
                    mean += val.to_f64();
                }
                mean /= n;
                let mut var = 0.0f64;
                for &val in sl.iter() {
                    let d = val.to_f64() - mean;
                    var += d * d;
                }
                var /= n;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[(bi, g)] = T::from_f64(istd);
                let mean_t = T::from_f64(mean);
                let istd_t = T::from_f64(istd);
                for ci in 0..cg {
                    let cch = g * cg + ci;
                    let (gam, bet) = (g1[cch], b1[cch]);
                    let src = xv.slice(ndarray::s![bi, cch, .., ..]);
                    let mut xh = xhat.slice_mut(ndarray::s![bi, cch, .., ..]);
                    let mut dst = y.slice_mut(ndarray::s![bi, cch, .., ..]);
                    ndarray::Zip::from(&mut xh).and(&mut dst).and(&src).for_each(|xh, dst, &s| {
                        let val = (s - mean_t) * istd_t;
                        *xh = val;
                        *dst = val * gam + bet;
                    });
                }
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            y.into_dyn(),
            needs,
            Op::GroupNorm { x, gamma, beta, groups, xhat: xhat.into_dyn(), inv_std },
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v * sigmoid(v));
        let needs = self.ng(x);
        self.push(y, needs, Op::Silu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let y = av + bv;
        let needs = self.ng(a) || self.ng(b);
        self.push(y, needs, Op::Add { a, b })
    }

    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("add_channel_bias: x rank 4");
        let vv = self.value(v).view().into_dimensionality::<Ix2>().expect("add_channel_bias: v rank 2");
        let (bs, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(vv.shape(), &[bs, c], "add_channel_bias: bias shape");
        let mut y = xv.to_owned();
        for bi in 0..bs {
            for ci in 0..c {
                let bias = vv[(bi, ci)];
                y.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|t| t + bias);
            }
        }
        let needs = self.ng(x) || self.ng(v);
        self.push(y.into_dyn(), needs, Op::AddChannelBias { x, v })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).mapv(|v| v * s);
        let needs = self.ng(x);
        self.push(y, needs, Op::ScaleConst { x, s })
    }

    pub fn concat_ch(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix4>().expect("concat_ch: a rank 4");
        let bv = self.value(b).view().into_dimensionality::<Ix4>().expect("concat_ch: b rank 4");
        assert_eq!(av.shape()[0], bv.shape()[0]);
        assert_eq!(av.shape()[2..], bv.shape()[2..]);
        let y = concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        let needs = self.ng(a) || self.ng(b);
        self.push(y.into_dyn(), needs, Op::ConcatCh { a, b })
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("upsample: x rank 4");
        let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut y = Array4::<T>::zeros((bs, c, 2 * h, 2 * w));
        for bi in 0..bs {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[(bi, ci, i, j)];
                        y[(bi, ci, 2 * i, 2 * j)] = v;
                        y[(bi, ci, 2 * i, 2 * j + 1)] = v;
                        y[(bi, ci, 2 * i + 1, 2 * j)] = v;
                        y[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                    }
                }
            }
        }
        let needs = self.ng(x);
        self.push(y.into_dyn(), needs, Op::UpsampleNearest2 { x })
    }

    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("to_tokens: x rank 4");
        let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let perm = xv.permuted_axes([0, 2, 3, 1]);
        let y = perm
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((bs, h * w, c))
            .unwrap();
        let needs = self.ng(x);
        self.push(y.into_dyn(), needs, Op::ToTokens { x })
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("from_tokens: x rank 3");
        let (bs, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(n, h * w, "from_tokens: {n} tokens vs {h}x{w}");
        let resh = xv.into_shape_with_order((bs, h, w, c)).unwrap();
        let perm = resh.permuted_axes([0, 3, 1, 2]);
        let y = perm.as_standard_layout().into_owned();
        let needs = self.ng(x);
        self.push(y.into_dyn(), needs, Op::FromTokens { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape: element count");
        let y = xv
            .to_owned()
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape: layout");
        let needs = self.ng(x);
        self.push(y, needs, Op::Reshape { x })
    }

    /// Per-sample mean of embedding rows; `ids[b]` must be non-empty.
    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Var {
        let tv = self.value(table).view().into_dimensionality::<Ix2>().expect("embed_mean: table rank 2");
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let bs = ids.len();
        let mut y = Array2::<T>::zeros((bs, d));
        for (bi, row_ids) in ids.iter().enumerate() {
            assert!(!row_ids.is_empty(), "embed_mean: empty id list");
            let inv = T::from_f64(1.0 / row_ids.len() as f64);
            for &id in row_ids {
                assert!(id < vocab, "embed_mean: id {id} out of range {vocab}");
                let row = tv.row(id);
                let mut dst = y.row_mut(bi);
                ndarray::Zip::from(&mut dst).and(&row).for_each(|d, &s| *d += s * inv);
            }
        }
        let needs = self.ng(table);
        self.push(y.into_dyn(), needs, Op::EmbedMean { table, ids })
    }

    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("mean_spatial: x rank 4");
        let (h, w) = (xv.shape()[2], xv.shape()[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let y = xv.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * inv);
        let needs = self.ng(x);
        self.push(y.into_dyn(), needs, Op::MeanSpatial { x })
    }

    /// Scalar `mean((x - target)^2)`.
    pub fn mse(&mut self, x: Var, target: &ArrayD<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse: shape mismatch");
        let numel = xv.len() as f64;
        let mut acc = 0.0f64;
        ndarray::Zip::from(xv).and(target).for_each(|&a, &b| {
            let d = (a - b).to_f64();
            acc += d * d;
        });
        let loss = ArrayD::from_elem(ndarray::IxDyn(&[]), T::from_f64(acc / numel));
        let needs = self.ng(x);
        self.push(loss, needs, Op::MseConst { x, target: target.clone() })
    }

    /// Scalar mean cross-entropy over logits `[B,K]`.
    pub fn ce_logits(&mut self, x: Var, labels: Vec<usize>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("ce_logits: x rank 2");
        let (bs, k) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(labels.len(), bs, "ce_logits: label count");
        let mut probs = xv.to_owned();
        softmax_rows_inplace(&mut probs);
        let mut acc = 0.0f64;
        for (bi, &lab) in labels.iter().enumerate() {
            assert!(lab < k, "ce_logits: label {lab} out of range {k}");
            acc -= probs[(bi, lab)].to_f64().max(1e-300).ln();
        }
        let loss = ArrayD::from_elem(ndarray::IxDyn(&[]), T::from_f64(acc / bs as f64));
        let needs = self.ng(x);
        self.push(loss, needs, Op::CeLogits { x, labels, probs })
    }

    /// Reverse pass from scalar node `loss`; returns gradients for every
    /// `requires_grad` leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let mut g: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        assert!(self.ng(loss), "backward: loss does not depend on any requires_grad leaf");
        g[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::ONE));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                g[id] = None;
                continue;
            }
            let Some(dy) = g[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    g[id] = Some(dy); // keep: this is an output of backward
                }
                Op::Conv2d { x, w, b, stride, pad, cols } => {
                    self.bw_conv2d(&mut g, &dy, *x, *w, *b, *stride, *pad, cols);
                }
                Op::Linear { x, w, b } => self.bw_linear(&mut g, &dy, *x, *w, *b),
                Op::Attention { q, k, v, probs } => self.bw_attention(&mut g, &dy, *q, *k, *v, probs),
                Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                    self.bw_group_norm(&mut g, &dy, *x, *gamma, *beta, *groups, xhat, inv_std)
                }
                Op::Silu { x } => {
                    if self.ng(*x) {
                        let xv = self.value(*x);
                        let mut dx = dy;
                        ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &xi| {
                            let s = sigmoid(xi);
                            *d = *d * (s * (T::ONE + xi * (T::ONE - s)));
                        });
                        acc_grad(&mut g, *x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.ng(*a) {
                        acc_grad(&mut g, *a, dy.clone());
                    }
                    if self.ng(*b) {
                        acc_grad(&mut g, *b, dy);
                    }
                }
                Op::AddChannelBias { x, v } => {
                    if self.ng(*v) {
                        let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                        let dv = d4.sum_axis(Axis(3)).sum_axis(Axis(2));
                        acc_grad(&mut g, *v, dv.into_dyn());
                    }
                    if self.ng(*x) {
                        acc_grad(&mut g, *x, dy);
                    }
                }
                Op::ScaleConst { x, s } => {
                    if self.ng(*x) {
                        let s = *s;
                        let mut dx = dy;
                        dx.mapv_inplace(|d| d * s);
                        acc_grad(&mut g, *x, dx);
                    }
                }
                Op::ConcatCh { a, b } => {
                    let ca = self.value(*a).shape()[1];
                    let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                    if self.ng(*a) {
                        let da = d4.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                        acc_grad(&mut g, *a, da.into_dyn());
                    }
                    if self.ng(*b) {
                        let db = d4.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                        acc_grad(&mut g, *b, db.into_dyn());
                    }
                }
                Op::UpsampleNearest2 { x } => {
                    if self.ng(*x) {
                        let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                        let (bs, c, h2, w2) = (d4.shape()[0], d4.shape()[1], d4.shape()[2], d4.shape()[3]);
                        let mut dx = Array4::<T>::zeros((bs, c, h2 / 2, w2 / 2));
                        for bi in 0..bs {
                            for ci in 0..c {
                                for i in 0..h2 {
                                    for j in 0..w2 {
                                        dx[(bi, ci, i / 2, j / 2)] += d4[(bi, ci, i, j)];
                                    }
                                }
                            }
                        }
                        acc_grad(&mut g, *x, dx.into_dyn());
                    }
                }
                Op::ToTokens { x } => {
                    if self.ng(*x) {
                        let xsh = self.value(*x).shape().to_vec();
                        let (bs, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                        let d3 = dy.view().into_shape_with_order((bs, h, w, c)).unwrap();
                        let dx = d3.permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned();
                        acc_grad(&mut g, *x, dx.into_dyn());
                    }
                }
                Op::FromTokens { x } => {
                    if self.ng(*x) {
                        let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
                        let (bs, c, h, w) = (d4.shape()[0], d4.shape()[1], d4.shape()[2], d4.shape()[3]);
                        let perm = d4.permuted_axes([0, 2, 3, 1]);
                        let dx = perm
                            .as_standard_layout()
                            .into_owned()
                            .into_shape_with_order((bs, h * w, c))
                            .unwrap();
                        acc_grad(&mut g, *x, dx.into_dyn());
                    }
                }
                Op::Reshape { x } => {
                    if self.ng(*x) {
                        let xsh = self.value(*x).raw_dim();
                        let dx = dy.into_shape_with_order(xsh).unwrap();
                        acc_grad(&mut g, *x, dx);
                    }
                }
                Op::EmbedMean { table, ids } => {
                    if self.ng(*table) {
                        let tsh = self.value(*table).raw_dim();
                        let mut dt = ArrayD::<T>::zeros(tsh);
                        let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                        let mut dt2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for (bi, row_ids) in ids.iter().enumerate() {
                            let inv = T::from_f64(1.0 / row_ids.len() as f64);
                            for &idx in row_ids {
                                let src = d2.row(bi);
                                let mut dst = dt2.row_mut(idx);
                                ndarray::Zip::from(&mut dst).and(&src).for_each(|d, &s| *d += s * inv);
                            }
                        }
                        acc_grad(&mut g, *table, dt);
                    }
                }
                Op::MeanSpatial { x } => {
                    if self.ng(*x) {
                        let xsh = self.value(*x).shape().to_vec();
                        let (bs, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                        let inv = T::from_f64(1.0 / (h * w) as f64);
                        let d2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                        let mut dx = Array4::<T>::zeros((bs, c, h, w));
                        for bi in 0..bs {
                            for ci in 0..c {
                                let v = d2[(bi, ci)] * inv;
                                dx.slice_mut(ndarray::s![bi, ci, .., ..]).fill(v);
                            }
                        }
                        acc_grad(&mut g, *x, dx.into_dyn());
                    }
                }
                Op::MseConst { x, target } => {
                    if self.ng(*x) {
                        let xv = self.value(*x);
                        let s = *dy.iter().next().unwrap();
                        let coef = T::from_f64(2.0 / xv.len() as f64) * s;
                        let mut dx = xv.clone();
                        ndarray::Zip::from(&mut dx).and(target).for_each(|d, &t| {
                            *d = (*d - t) * coef;
                        });
                        acc_grad(&mut g, *x, dx);
                    }
                }
                Op::CeLogits { x, labels, probs } => {
                    if self.ng(*x) {
                        let s = *dy.iter().next().unwrap();
                        let bs = labels.len();
                        let coef = s * T::from_f64(1.0 / bs as f64);
                        let mut dx = probs.clone();
                        for (bi, &lab) in labels.iter().enumerate() {
                            dx[(bi, lab)] -= T::ONE;
                        }
                        dx.mapv_inplace(|v| v * coef);
                        acc_grad(&mut g, *x, dx.into_dyn());
                    }
                }
            }
        }
        Grads { g }
    }

    #[allow(clippy::too_many_arguments)]
    fn bw_conv2d(
        &self,
        g: &mut [Option<ArrayD<T>>],
        dy: &ArrayD<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: &[Array2<T>],
    ) {
        let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
        let (bs, cout, ho, wo) = (d4.shape()[0], d4.shape()[1], d4.shape()[2], d4.shape()[3]);
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (cin, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let w2 = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut dw2 = if need_w { Some(Array2::<T>::zeros((cout, cin * kh * kw))) } else { None };
        let mut dx = if need_x {
            Some(
                Array4::<T>::zeros({
                    let xs = self.value(x).shape();
                    (xs[0], xs[1], xs[2], xs[3])
                }),
            )
        } else {
            None
        };
        for bi in 0..bs {
            let dyb = d4.index_axis(Axis(0), bi);
            let dy_mat = dyb.into_shape_with_order((cout, ho * wo)).unwrap();
            if let Some(dw2) = dw2.as_mut() {
                *dw2 += &dy_mat.dot(&cols[bi].t());
            }
            if let Some(dx) = dx.as_mut() {
                let dcol = w2.t().dot(&dy_mat);
                col2im_add(&dcol, dx.index_axis_mut(Axis(0), bi), kh, kw, stride, pad);
            }
        }
        if let Some(dw2) = dw2 {
            let dw = dw2.into_shape_with_order((cout, cin, kh, kw)).unwrap();
            acc_grad_slice(g, w, dw.into_dyn());
        }
        if let Some(bvar) = b {
            if self.ng(bvar) {
                let db = d4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                acc_grad_slice(g, bvar, db.into_dyn());
            }
        }
        if let Some(dx) = dx {
            acc_grad_slice(g, x, dx.into_dyn());
        }
    }

    fn bw_linear(&self, g: &mut [Option<ArrayD<T>>], dy: &ArrayD<T>, x: Var, w: Var, b: Option<Var>) {
        let wv = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let (dout, din) = (wv.shape()[0], wv.shape()[1]);
        let xv = self.value(x);
        let rows: usize = xv.len() / din;
        let x2 = view_2d(xv, rows, din);
        let dy2 = view_2d(dy, rows, dout);
        if self.ng(w) {
            let dw = dy2.t().dot(&x2);
            acc_grad_slice(g, w, reshape_owned(dw, &[dout, din]));
        }
        if let Some(bvar) = b {
            if self.ng(bvar) {
                let db = dy2.sum_axis(Axis(0));
                acc_grad_slice(g, bvar, db.into_dyn());
            }
        }
        if self.ng(x) {
            let dx2 = dy2.dot(&wv);
            acc_grad_slice(g, x, reshape_owned(dx2, xv.shape()));
        }
    }

    fn bw_attention(
        &self,
        g: &mut [Option<ArrayD<T>>],
        dy: &ArrayD<T>,
        q: Var,
        k: Var,
        v: Var,
        probs: &[Array2<T>],
    ) {
        let qv = self.value(q).view().into_dimensionality::<Ix3>().unwrap();
        let kv = self.value(k).view().into_dimensionality::<Ix3>().unwrap();
        let d3 = dy.view().into_dimensionality::<Ix3>().unwrap();
        let (bs, n, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let m = kv.shape()[1];
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let (need_q, need_k, need_v) = (self.ng(q), self.ng(k), self.ng(v));
        let mut dq = if need_q { Some(ndarray::Array3::<T>::zeros((bs, n, d))) } else { None };
        let mut dk = if need_k { Some(ndarray::Array3::<T>::zeros((bs, m, d))) } else { None };
        let mut dv = if need_v { Some(ndarray::Array3::<T>::zeros((bs, m, d))) } else { None };
        let vv = self.value(v).view().into_dimensionality::<Ix3>().unwrap();
        for bi in 0..bs {
            let dyb = d3.index_axis(Axis(0), bi);
            let p = &probs[bi];
            if let Some(dv) = dv.as_mut() {
                let dvb = p.t().dot(&dyb);
                dv.index_axis_mut(Axis(0), bi).assign(&dvb);
            }
            if need_q || need_k {
                let vb = vv.index_axis(Axis(0), bi);
                let dp = dyb.dot(&vb.t()); // [N, M]
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                let prod = &dp * p;
                let row = prod.sum_axis(Axis(1)); // [N]
                let mut ds = dp;
                for i in 0..n {
                    let r = row[i];
                    let p_row = p.row(i);
                    let mut ds_row = ds.row_mut(i);
                    for j in 0..m {
                        ds_row[j] = p_row[j] * (ds_row[j] - r) * scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    let kb = kv.index_axis(Axis(0), bi);
                    let dqb = ds.dot(&kb);
                    dq.index_axis_mut(Axis(0), bi).assign(&dqb);
                }
                if let Some(dk) = dk.as_mut() {
                    let qb = qv.index_axis(Axis(0), bi);
                    let dkb = ds.t().dot(&qb);
                    dk.index_axis_mut(Axis(0), bi).assign(&dkb);
                }
            }
        }
        if let Some(dq) = dq {
            acc_grad_slice(g, q, dq.into_dyn());
        }
        if let Some(dk) = dk {
            acc_grad_slice(g, k, dk.into_dyn());
        }
        if let Some(dv) = dv {
            acc_grad_slice(g, v, dv.into_dyn());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bw_group_norm(
        &self,
        g: &mut [Option<ArrayD<T>>],
        dy: &ArrayD<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: &ArrayD<T>,
        inv_std: &Array2<T>,
    ) {
        let d4 = dy.view().into_dimensionality::<Ix4>().unwrap();
        let xh4 = xhat.view().into_dimensionality::<Ix4>().unwrap();
        let (bs, c, h, w) = (d4.shape()[0], d4.shape()[1], d4.shape()[2], d4.shape()[3]);
        let cg = c / groups;
        let n = (cg * h * w) as f64;
        let gv = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        if self.ng(gamma) {
            let mut dgamma = Array1::<T>::zeros(c);
            for ci in 0..c {
                let mut acc = 0.0f64;
                ndarray::Zip::from(d4.slice(ndarray::s![.., ci, .., ..]))
                    .and(xh4.slice(ndarray::s![.., ci, .., ..]))
                    .for_each(|&d, &xh| acc += (d * xh).to_f64());
                dgamma[ci] = T::from_f64(acc);
            }
            acc_grad_slice(g, gamma, dgamma.into_dyn());
        }
        if self.ng(beta) {
            let mut dbeta = Array1::<T>::zeros(c);
            for ci in 0..c {
                let acc: f64 = d4
                    .slice(ndarray::s![.., ci, .., ..])
                    .iter()
                    .map(|v| v.to_f64())
                    .sum();
                dbeta[ci] = T::from_f64(acc);
            }
            acc_grad_slice(g, beta, dbeta.into_dyn());
        }
        if self.ng(x) {
            let mut dx = Array4::<T>::zeros((bs, c, h, w));
            for bi in 0..bs {
                for gi in 0..groups {
                    // dxhat = dy * gamma; dx = istd*(dxhat − mean(dxhat) − xhat*mean(dxhat*xhat))
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ci in 0..cg {
                        let cch = gi * cg + ci;
                        let gam = gv[cch].to_f64();
                        ndarray::Zip::from(d4.slice(ndarray::s![bi, cch, .., ..]))
                            .and(xh4.slice(ndarray::s![bi, cch, .., ..]))
                            .for_each(|&d, &xh| {
                                let dxh = d.to_f64() * gam;
                                s1 += dxh;
                                s2 += dxh * xh.to_f64();
                            });
                    }
                    let m1 = T::from_f64(s1 / n);
                    let m2 = T::from_f64(s2 / n);
                    let istd = inv_std[(bi, gi)];
                    for ci in 0..cg {
                        let cch = gi * cg + ci;
                        let gam = gv[cch];
                        let mut dst = dx.slice_mut(ndarray::s![bi, cch, .., ..]);
                        ndarray::Zip::from(&mut dst)
                            .and(d4.slice(ndarray::s![bi, cch, .., ..]))
                            .and(xh4.slice(ndarray::s![bi, cch, .., ..]))
                            .for_each(|dst, &d, &xh| {
                                *dst = istd * (d * gam - m1 - xh * m2);
                            });
                    }
                }
            }
            acc_grad_slice(g, x, dx.into_dyn());
        }
    }
}

fn acc_grad<T: Real>(g: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
    match &mut g[v.0] {
        Some(existing) => *existing += &delta,
        slot => *slot = Some(delta),
    }
}

fn acc_grad_slice<T: Real>(g: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
    acc_grad(g, v, delta);
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Numerically stable row-wise softmax, in place.
fn softmax_rows_inplace<T: Real, S: ndarray::DataMut<Elem = T>>(m: &mut ndarray::ArrayBase<S, Ix2>) {
    for mut row in m.rows_mut() {
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maxv(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};

    fn scalar_graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn linear_forward_matches_manual_product() {
        let mut g = scalar_graph();
        let x = g.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let w = g.constant(arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).into_dyn());
        let b = g.constant(arr1(&[0.5, -0.5, 0.0]).into_dyn());
        let y = g.linear(x, w, Some(b));
        let yv = g.value(y);
        assert_eq!(yv.shape(), &[2, 3]);
        assert_eq!(yv[[0, 0]], 1.5);
        assert_eq!(yv[[0, 1]], 1.5);
        assert_eq!(yv[[0, 2]], 3.0);
        assert_eq!(yv[[1, 2]], 7.0);
    }

    #[test]
    fn attention_single_key_copies_value() {
        // With one key, softmax weights are exactly 1 and output == value.
        let mut g = scalar_graph();
        let q = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 3]), vec![0.3; 6]).unwrap());
        let k = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![1.0, -2.0, 0.5]).unwrap());
        let v = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3]), vec![7.0, 8.0, 9.0]).unwrap());
        let y = g.attention(q, k, v);
        let yv = g.value(y);
        for tok in 0..2 {
            assert_eq!(yv[[0, tok, 0]], 7.0);
            assert_eq!(yv[[0, tok, 2]], 9.0);
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut g = scalar_graph();
        let x = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 4, 2, 2]), |ix| {
            (ix[1] * 4 + ix[2] * 2 + ix[3]) as f64
        }));
        let gamma = g.constant(arr1(&[1.0; 4]).into_dyn());
        let beta = g.constant(arr1(&[0.0; 4]).into_dyn());
        let y = g.group_norm(x, gamma, beta, 2, 1e-5);
        let yv = g.value(y).view().into_dimensionality::<Ix4>().unwrap();
        for gi in 0..2 {
            let sl = yv.slice(ndarray::s![0, gi * 2..(gi + 1) * 2, .., ..]);
            let mean: f64 = sl.iter().sum::<f64>() / 8.0;
            let var: f64 = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn tokens_roundtrip_preserves_layout() {
        let mut g = scalar_graph();
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 4]), |ix| {
            (ix[0] * 1000 + ix[1] * 100 + ix[2] * 10 + ix[3]) as f64
        });
        let x = g.constant(x0.clone());
        let t = g.to_tokens(x);
        assert_eq!(g.value(t).shape(), &[2, 16, 3]);
        assert_eq!(g.value(t)[[1, 5, 2]], x0[[1, 2, 1, 1]]); // token 5 = (row 1, col 1)
        let back = g.from_tokens(t, 4, 4);
        assert_eq!(g.value(back), &x0);
    }

    #[test]
    fn mse_of_equal_tensors_is_zero_and_unit_offset_is_one() {
        let mut g = scalar_graph();
        let t = ArrayD::from_elem(IxDyn(&[3, 5]), 2.5);
        let x = g.constant(t.clone());
        let l = g.mse(x, &t);
        assert_eq!(g.scalar(l), 0.0);
        let x1 = g.constant(t.mapv(|v| v + 1.0));
        let l1 = g.mse(x1, &t);
        assert!((g.scalar(l1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = scalar_graph();
        let frozen = g.leaf(std::sync::Arc::new(arr2(&[[1.0, 2.0]]).into_dyn()), false);
        let live = g.leaf(std::sync::Arc::new(arr2(&[[3.0, 4.0]]).into_dyn()), true);
        let y = g.linear(frozen, live, None); // [1,2] · [1,2]ᵀ -> [1,1]
        let target = ArrayD::zeros(IxDyn(&[1, 1]));
        let l = g.mse(y, &target);
        let grads = g.backward(l);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(live).is_some());
    }
}
