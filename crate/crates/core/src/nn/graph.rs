//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`]; calling [`Graph::backward`] on a scalar
//! node yields gradients for every parameter and every input created with
//! [`Graph::input_with_grad`].

use crate::nn::kernels::{self, Conv2dSpec, ConvGeom, TemporalGeom};
use crate::nn::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    Temporal {
        x: Var,
        w: Var,
        b: Var,
        geom: TemporalGeom,
    },
    Relu(Var),
    Resize {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    },
    SpatialMean(Var),
    Broadcast {
        x: Var,
        area: usize,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    FramePool {
        x: Var,
        clips: usize,
        len: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Scale(Var, T),
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
        inner: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
    Mse {
        pred: Var,
        targets: Vec<T>,
    },
    External {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }

    /// Gradient w.r.t. a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph that records operations for a backward pass.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_recording(params, true)
    }

    /// Graph for forward-only evaluation; parameters are treated as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_recording(params, false)
    }

    fn with_recording(params: &'p ParamStore<T>, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            record,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.record && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        let rec = self.record;
        self.push_raw(value, Op::Leaf, rec)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.get(id).clone();
        let rec = self.record;
        let v = self.push_raw(value, Op::Param, rec);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `[n, cin, h, w] -> [n, cout, ho, wo]`.
    pub fn conv2d(&mut self, x: Var, weight: ParamId, bias: ParamId, spec: Conv2dSpec) -> Var {
        let (w, b) = (self.param(weight), self.param(bias));
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects [n, c, h, w], got {xs:?}");
        assert_eq!(
            xs[1], ws[1],
            "conv2d channel mismatch: input {xs:?}, weight {ws:?}"
        );
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], spec);
        let cout = ws[0];
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            self.value(b).data(),
            cout,
        );
        let value = Tensor::from_vec(&[xs[0], cout, geom.ho, geom.wo], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: xs[0],
                cout,
            },
            &[x, w, b],
        )
    }

    /// Same-padded convolution along frames of `[clips * len, cin, h, w]`.
    pub fn temporal_conv(&mut self, x: Var, weight: ParamId, bias: ParamId, clips: usize) -> Var {
        let (w, b) = (self.param(weight), self.param(bias));
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(
            xs[0] % clips,
            0,
            "{} frames do not split into {clips} clips",
            xs[0]
        );
        assert_eq!(xs[1], ws[1], "temporal conv channel mismatch");
        let geom = TemporalGeom {
            clips,
            len: xs[0] / clips,
            cin: xs[1],
            cout: ws[0],
            area: xs[2..].iter().product(),
            k: ws[2],
        };
        let out = kernels::temporal_forward(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut shape = xs.clone();
        shape[1] = geom.cout;
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Temporal { x, w, b, geom },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::from_vec(src.shape(), data);
        self.push(value, Op::Relu(x), &[x])
    }

    /// Bilinear resize of the two trailing axes.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = xs[..xs.len() - 2].iter().product();
        let out = kernels::resize_forward(self.value(x).data(), planes, h, w, ho, wo);
        let mut shape = xs.clone();
        let n = shape.len();
        shape[n - 2] = ho;
        shape[n - 1] = wo;
        self.push(
            Tensor::from_vec(&shape, out),
            Op::Resize {
                x,
                planes,
                h,
                w,
                ho,
                wo,
            },
            &[x],
        )
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let area: usize = xs[2..].iter().product();
        let inv = T::lit(1.0 / area as f64);
        let data = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::from_vec(&xs[..2], data), Op::SpatialMean(x), &[x])
    }

    /// `[n, c] -> [n, c, h, w]` by repetition.
    pub fn broadcast(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let area = h * w;
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, area))
            .collect();
        self.push(
            Tensor::from_vec(&[xs[0], xs[1], h, w], data),
            Op::Broadcast { x, area },
            &[x],
        )
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s[0], outer, "concat batch mismatch");
            assert_eq!(
                s[2..].iter().product::<usize>(),
                inner,
                "concat trailing shape mismatch"
            );
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &wd) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * wd * inner..(o + 1) * wd * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let value = Tensor::from_vec(&shape, data);
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                outer,
                inner,
            },
            parts,
        )
    }

    /// `[n, din] -> [n, dout]` with weight `[dout, din]`.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let (w, b) = (self.param(weight), self.param(bias));
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, din) = (xs[0], xs[1..].iter().product::<usize>());
        assert_eq!(din, ws[1], "linear input width {din} vs weight {ws:?}");
        let dout = ws[0];
        let mut out: Vec<T> = (0..n)
            .flat_map(|_| self.value(b).data().iter().copied())
            .collect();
        T::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            true,
        );
        self.push(
            Tensor::from_vec(&[n, dout], out),
            Op::Linear { x, w, b },
            &[x, w, b],
        )
    }

    /// Pools `[clips * len, c]` over frames into `[clips, c]`.
    pub fn frame_pool(&mut self, x: Var, clips: usize, mode: PoolMode) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 2, "frame_pool expects [frames, c]");
        let (len, c) = (xs[0] / clips, xs[1]);
        assert_eq!(len * clips, xs[0]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); clips * c];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Mean => {
                let inv = T::lit(1.0 / len as f64);
                for k in 0..clips {
                    for t in 0..len {
                        for j in 0..c {
                            out[k * c + j] += src[(k * len + t) * c + j] * inv;
                        }
                    }
                }
            }
            PoolMode::Max => {
                argmax = vec![0; clips * c];
                for k in 0..clips {
                    for j in 0..c {
                        let mut best = k * len;
                        for t in 1..len {
                            if src[(k * len + t) * c + j] > src[best * c + j] {
                                best = k * len + t;
                            }
                        }
                        argmax[k * c + j] = best;
                        out[k * c + j] = src[best * c + j];
                    }
                }
            }
        }
        self.push(
            Tensor::from_vec(&[clips, c], out),
            Op::FramePool {
                x,
                clips,
                len,
                mode,
                argmax,
            },
            &[x],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let src = self.value(x);
        let value = Tensor::from_vec(
            src.shape(),
            src.data().iter().map(|&v| v * factor).collect(),
        );
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// `(x - shift[c]) * scale[c]` along axis 1 with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, shift: &[T], scale: &[T]) -> Var {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        assert!(
            shift.len() == c && scale.len() == c,
            "affine needs {c} coefficients"
        );
        let inner: usize = xs[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - shift[ch]) * scale[ch]
            })
            .collect();
        let value = Tensor::from_vec(&xs, data);
        self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
                inner,
            },
            &[x],
        )
    }

    /// Current value of a parameter without recording it in the graph.
    pub fn param_value(&self, id: ParamId) -> &Tensor<T> {
        self.params.get(id)
    }

    /// Mean binary cross-entropy with logits over every element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let x = self.value(logits).data();
        assert_eq!(x.len(), targets.len(), "bce shape mismatch");
        let total: f64 = x
            .iter()
            .zip(targets)
            .map(|(&l, &y)| kernels::softplus(l.as_f64()) - l.as_f64() * y.as_f64())
            .sum();
        let value = Tensor::scalar(T::lit(total / x.len() as f64));
        self.push(
            value,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, targets: &[T]) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), targets.len(), "mse shape mismatch");
        let total: f64 = p
            .iter()
            .zip(targets)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        let value = Tensor::scalar(T::lit(total / p.len() as f64));
        self.push(
            value,
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
            &[pred],
        )
    }

    /// Scalar node with a known value and gradient w.r.t. `x`, computed outside the graph.
    pub fn external_loss(&mut self, x: Var, value: T, grad: Vec<T>) -> Var {
        assert_eq!(
            self.value(x).len(),
            grad.len(),
            "external gradient shape mismatch"
        );
        self.push(Tensor::scalar(value), Op::External { x, grad }, &[x])
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        let mut params = ParamGrads::new(self.params.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads[v.0].take() {
                    params.set(ParamId::from_index(i), g);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dy = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                cout,
            } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let g = kernels::conv2d_backward(
                    self.value(*x).data(),
                    *batch,
                    geom,
                    self.value(*w).data(),
                    *cout,
                    dy,
                    need_dx,
                );
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                self.accumulate(grads, *b, g.db);
            }
            Op::Temporal { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].needs_grad;
                let g = kernels::temporal_backward(
                    self.value(*x).data(),
                    geom,
                    self.value(*w).data(),
                    dy,
                    need_dx,
                );
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                self.accumulate(grads, *b, g.db);
            }
            Op::Relu(x) => {
                let out = node.value.data();
                let dx = dy
                    .iter()
                    .zip(out)
                    .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Resize {
                x,
                planes,
                h,
                w,
                ho,
                wo,
            } => {
                let dx = kernels::resize_backward(dy, *planes, *h, *w, *ho, *wo);
                self.accumulate(grads, *x, dx);
            }
            Op::SpatialMean(x) => {
                let area = self.value(*x).len() / dy.len();
                let inv = T::lit(1.0 / area as f64);
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, area))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Broadcast { x, area } => {
                let dx = dy
                    .chunks(*area)
                    .map(|c| c.iter().copied().sum::<T>())
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat {
                parts,
                widths,
                outer,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(widths) {
                    if self.nodes[p.0].needs_grad {
                        let mut dx = Vec::with_capacity(outer * wd * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dx.extend_from_slice(&dy[base..base + wd * inner]);
                        }
                        self.accumulate(grads, p, dx);
                    }
                    offset += wd;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, dout) = (gy.shape()[0], gy.shape()[1]);
                let din = self.value(*w).shape()[1];
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        dy,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, dx);
                }
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(
                    dout,
                    n,
                    din,
                    dy,
                    true,
                    self.value(*x).data(),
                    false,
                    &mut dw,
                    false,
                );
                self.accumulate(grads, *w, dw);
                let mut db = vec![T::zero(); dout];
                for row in dy.chunks(dout) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.accumulate(grads, *b, db);
            }
            Op::FramePool {
                x,
                clips,
                len,
                mode,
                argmax,
            } => {
                let c = dy.len() / clips;
                let mut dx = vec![T::zero(); clips * len * c];
                match mode {
                    PoolMode::Mean => {
                        let inv = T::lit(1.0 / *len as f64);
                        for k in 0..*clips {
                            for t in 0..*len {
                                for j in 0..c {
                                    dx[(k * len + t) * c + j] = dy[k * c + j] * inv;
                                }
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (i, &src) in argmax.iter().enumerate() {
                            dx[src * c + i % c] += dy[i];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, dy.iter().map(|&g| g * *f).collect());
            }
            Op::ChannelAffine { x, scale, inner } => {
                let c = scale.len();
                let dx = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * scale[(i / inner) % c])
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { logits, targets } => {
                let g = dy[0].as_f64() / targets.len() as f64;
                let dx = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &y)| T::lit((kernels::sigmoid(l.as_f64()) - y.as_f64()) * g))
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
            Op::Mse { pred, targets } => {
                let g = dy[0] * T::lit(2.0 / targets.len() as f64);
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| (p - y) * g)
                    .collect();
                self.accumulate(grads, *pred, dx);
            }
            Op::External { x, grad } => {
                let g = dy[0];
                self.accumulate(grads, *x, grad.iter().map(|&v| v * g).collect());
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let delta = Tensor::from_vec(node.value.shape(), delta);
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }
}
