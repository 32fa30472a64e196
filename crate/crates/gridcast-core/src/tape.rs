//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! the parent indices needed for the backward pass. Values are `f64`
//! [`ndarray::ArrayD`] arrays. The op set is deliberately small: elementwise
//! arithmetic, matrix multiply, 2-D convolution, softmax/logsumexp reductions,
//! and the grid-specific primitives (bilinear gather, normalized-deconvolution
//! scatter, border-clamped shift) that planning and occupancy decoding need.
//!
//! Gradients are only retained for leaf nodes (parameters and tracked
//! inputs); intermediate gradients are dropped as soon as their parents have
//! been updated.

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice};
use std::collections::HashMap;
use std::sync::Arc;

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Identifies a parameter in a parameter store; used to dedupe registration
/// and to map gradients back after the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    AddN(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    AddBiasLast(Var, Var),
    AddBiasChan(Var, Var),
    BroadcastHw(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    SoftmaxLast(Var),
    SoftmaxAxis0(Var),
    LogSumExpAxis0(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceAxis { a: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    BilinearGather { field: Var, query: Var },
    DeconvScatter { src: Var, kernels: Var, k: usize },
    ShiftClamp { a: Var, dx: i64, dy: i64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    DivByScalar { a: Var, s: Var },
}

struct Node {
    value: Arc<Arr>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`]. Only leaves keep gradients.
pub struct Grads {
    g: Vec<Option<Arr>>,
}

impl Grads {
    /// Gradient for a leaf var (parameter or tracked input).
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.g[v.0].as_ref()
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

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    /// Untracked constant; no gradient flows into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked leaf: gradients are retained for it.
    pub fn input(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Scalar constant of shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Register a parameter. Repeated registration of the same id returns the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Arc<Arr>, trainable: bool) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Arc::clone(value),
            op: Op::Leaf,
            needs_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Var previously registered for `id`, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Iterate registered (param, var) pairs.
    pub fn registered_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(k, v)| (*k, *v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), self.any_needs(&[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.any_needs(&[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.any_needs(&[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_same_shape(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), self.any_needs(&[a, b]))
    }

    fn binary_same_shape(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Arr {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op shape mismatch");
        let mut out = va.clone();
        out.zip_mut_with(vb, |x, &y| *x = f(*x, y));
        out
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a), self.needs(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a), self.needs(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c), self.needs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), self.needs(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a), self.needs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a), self.needs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a), self.needs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.needs(a))
    }

    /// Hard clamp; gradient is zero outside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), self.needs(a))
    }

    /// Sum of same-shaped vars.
    pub fn add_n(&mut self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        let mut out = self.value(vs[0]).clone();
        for v in &vs[1..] {
            out += self.value(*v);
        }
        let needs = self.any_needs(vs);
        self.push(out, Op::AddN(vs.to_vec()), needs)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Op::SumAll(a),
            self.needs(a),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.sum() / va.len() as f64;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), m),
            Op::MeanAll(a),
            self.needs(a),
        )
    }

    // ---- broadcasts ----

    /// `x [.., d] + b [d]`, broadcasting over leading axes.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let d = *vx.shape().last().expect("rank >= 1");
        assert_eq!(vb.len(), d, "bias length mismatch");
        let bflat = vb.view().into_shape_with_order(d).unwrap();
        let mut out = vx.clone();
        for mut lane in out.rows_mut() {
            lane += &bflat;
        }
        self.push(out, Op::AddBiasLast(x, b), self.any_needs(&[x, b]))
    }

    /// `x [C,H,W] + b [C]`, broadcasting over the spatial axes.
    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        assert_eq!(vx.ndim(), 3);
        assert_eq!(vb.len(), vx.shape()[0], "channel bias mismatch");
        let mut out = vx.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += vb[[c]];
        }
        self.push(out, Op::AddBiasChan(x, b), self.any_needs(&[x, b]))
    }

    /// Broadcast a length-`d` vector to a `[d, h, w]` map.
    pub fn broadcast_hw(&mut self, v: Var, h: usize, w: usize) -> Var {
        let vv = self.value(v);
        let d = vv.len();
        let flat = vv.view().into_shape_with_order(d).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[d, h, w]));
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane.fill(flat[c]);
        }
        self.push(out, Op::BroadcastHw(v), self.needs(v))
    }

    // ---- linear algebra ----

    /// 2-D matrix product with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        let va = if ta { va.t() } else { va };
        let vb = if tb { vb.t() } else { vb };
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dim mismatch");
        let out = va.dot(&vb);
        self.push(
            out.into_dyn(),
            Op::MatMul { a, b, ta, tb },
            self.any_needs(&[a, b]),
        )
    }

    /// Single-image convolution: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x).clone();
        let vw = self.value(w).clone();
        let out = conv2d_forward(&vx, &vw, stride, pad);
        let mut out = out;
        if let Some(bv) = b {
            let vb = self.value(bv);
            for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
                plane += vb[[c]];
            }
        }
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let needs = self.any_needs(&parents);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    // ---- normalizations ----

    /// Softmax along the last axis (any rank).
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut lane in out.rows_mut() {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in lane.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxLast(a), self.needs(a))
    }

    /// Softmax along axis 0 of a `[A,H,W]` stack, e.g. per-cell action or
    /// kernel-tap distributions.
    pub fn softmax_axis0(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 3);
        let (na, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut out = va.clone();
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for i in 0..na {
                    m = m.max(out[[i, y, x]]);
                }
                let mut z = 0.0;
                for i in 0..na {
                    let e = (out[[i, y, x]] - m).exp();
                    out[[i, y, x]] = e;
                    z += e;
                }
                for i in 0..na {
                    out[[i, y, x]] /= z;
                }
            }
        }
        self.push(out, Op::SoftmaxAxis0(a), self.needs(a))
    }

    /// Log-sum-exp reduction of axis 0: `[A,H,W] -> [H,W]`, max-subtracted.
    pub fn logsumexp_axis0(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 3);
        let (na, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for i in 0..na {
                    m = m.max(va[[i, y, x]]);
                }
                let mut z = 0.0;
                for i in 0..na {
                    z += (va[[i, y, x]] - m).exp();
                }
                out[[y, x]] = m + z.ln();
            }
        }
        self.push(out, Op::LogSumExpAxis0(a), self.needs(a))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let d = *vx.shape().last().unwrap();
        assert_eq!(vg.len(), d);
        assert_eq!(vb.len(), d);
        let gflat = vg.view().into_shape_with_order(d).unwrap();
        let bflat = vb.view().into_shape_with_order(d).unwrap();
        let mut out = vx.clone();
        for mut lane in out.rows_mut() {
            let mu = lane.sum() / d as f64;
            let var = lane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let s = (var + eps).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mu) / s * gflat[i] + bflat[i];
            }
        }
        let needs = self.any_needs(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    // ---- shape plumbing ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = self.any_needs(parts);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceAxis { a, axis, start, len }, self.needs(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape length");
        let out = reshaped(v, shape);
        self.push(out, Op::Reshape(a), self.needs(a))
    }

    // ---- grid primitives ----

    /// Bilinear interpolation of `field [C,H,W]` at continuous grid
    /// coordinate `query [2] = (gx, gy)`. The query is clamped to
    /// `[0, W-1] x [0, H-1]`; gradients flow to both the field values and the
    /// query (zero in a clamped direction).
    pub fn bilinear_gather(&mut self, field: Var, query: Var) -> Var {
        let vf = self.value(field);
        let vq = self.value(query);
        assert_eq!(vf.ndim(), 3);
        assert_eq!(vq.len(), 2);
        let (c, h, w) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
        let taps = bilinear_taps(vq[[0]], vq[[1]], h, w);
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ch in 0..c {
            let mut acc = 0.0;
            for t in &taps.corners {
                acc += t.weight * vf[[ch, t.iy, t.ix]];
            }
            out[[ch]] = acc;
        }
        self.push(
            out,
            Op::BilinearGather { field, query },
            self.any_needs(&[field, query]),
        )
    }

    /// Scatter each cell's mass through its own kernel:
    /// `src [H,W]`, `kernels [k*k,H,W]` (non-negative taps per cell).
    /// Mass falling off-grid is dropped; callers renormalize.
    pub fn deconv_scatter(&mut self, src: Var, kernels: Var, k: usize) -> Var {
        let vs = self.value(src);
        let vk = self.value(kernels);
        assert_eq!(vs.ndim(), 2);
        assert_eq!(vk.shape(), &[k * k, vs.shape()[0], vs.shape()[1]]);
        let (h, w) = (vs.shape()[0], vs.shape()[1]);
        let c = (k / 2) as i64;
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            for x in 0..w {
                let m = vs[[y, x]];
                if m == 0.0 {
                    continue;
                }
                for dy in 0..k {
                    let ty = y as i64 + dy as i64 - c;
                    if ty < 0 || ty >= h as i64 {
                        continue;
                    }
                    for dx in 0..k {
                        let tx = x as i64 + dx as i64 - c;
                        if tx < 0 || tx >= w as i64 {
                            continue;
                        }
                        out[[ty as usize, tx as usize]] += m * vk[[dy * k + dx, y, x]];
                    }
                }
            }
        }
        self.push(
            out,
            Op::DeconvScatter { src, kernels, k },
            self.any_needs(&[src, kernels]),
        )
    }

    /// Value lookup through the deterministic grid transition: each cell reads
    /// the value at its displaced target, or itself when the move would leave
    /// the grid. `a [H,W]`, displacement `(dx, dy)` in grid axes.
    pub fn shift_clamp(&mut self, a: Var, dx: i64, dy: i64) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2);
        let (h, w) = (va.shape()[0], va.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = shift_target(y, x, dy, dx, h, w);
                out[[y, x]] = va[[ty, tx]];
            }
        }
        self.push(out, Op::ShiftClamp { a, dx, dy }, self.needs(a))
    }

    /// `a / s` with `s` a `[1]` var.
    pub fn div_by_scalar(&mut self, a: Var, s: Var) -> Var {
        let vs = self.value(s);
        assert_eq!(vs.len(), 1);
        let sv = vs[[0]];
        let out = self.value(a).mapv(|x| x / sv);
        self.push(out, Op::DivByScalar { a, s }, self.any_needs(&[a, s]))
    }

    // ---- backward ----

    /// Backpropagate from a scalar root. Returns gradients for leaf nodes.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut g: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                g[i] = None;
                continue;
            }
            let Some(gout) = g[i].take() else { continue };
            self.backprop_node(i, &gout, &mut g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                g[i] = Some(gout);
            }
        }
        Grads { g }
    }

    fn accumulate(&self, g: &mut [Option<Arr>], v: Var, contrib: Arr) {
        if !self.needs(v) {
            return;
        }
        match &mut g[v.0] {
            Some(acc) => *acc += &contrib,
            slot => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, gout: &Arr, g: &mut [Option<Arr>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(g, *a, gout.clone());
                self.accumulate(g, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(g, *a, gout.clone());
                self.accumulate(g, *b, gout.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(g, *a, gout * self.value(*b));
                self.accumulate(g, *b, gout * self.value(*a));
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                self.accumulate(g, *a, gout / vb);
                let va = self.value(*a);
                let mut gb = gout * va;
                gb.zip_mut_with(vb, |x, &y| *x = -*x / (y * y));
                self.accumulate(g, *b, gb);
            }
            Op::Neg(a) => self.accumulate(g, *a, gout.mapv(|x| -x)),
            Op::AddScalar(a) => self.accumulate(g, *a, gout.clone()),
            Op::Scale(a, c) => self.accumulate(g, *a, gout.mapv(|x| x * c)),
            Op::Exp(a) => self.accumulate(g, *a, gout * self.value(Var(i))),
            Op::Ln(a) => self.accumulate(g, *a, gout / self.value(*a)),
            Op::Sqrt(a) => {
                let out = self.value(Var(i));
                let mut ga = gout.clone();
                ga.zip_mut_with(out, |x, &y| *x *= 0.5 / y);
                self.accumulate(g, *a, ga);
            }
            Op::Tanh(a) => {
                let out = self.value(Var(i));
                let mut ga = gout.clone();
                ga.zip_mut_with(out, |x, &y| *x *= 1.0 - y * y);
                self.accumulate(g, *a, ga);
            }
            Op::Sigmoid(a) => {
                let out = self.value(Var(i));
                let mut ga = gout.clone();
                ga.zip_mut_with(out, |x, &y| *x *= y * (1.0 - y));
                self.accumulate(g, *a, ga);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let mut ga = gout.clone();
                ga.zip_mut_with(va, |x, &y| {
                    if y <= 0.0 {
                        *x = 0.0
                    }
                });
                self.accumulate(g, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                let mut ga = gout.clone();
                ga.zip_mut_with(va, |x, &y| {
                    if y < lo || y > hi {
                        *x = 0.0
                    }
                });
                self.accumulate(g, *a, ga);
            }
            Op::AddN(vs) => {
                for v in vs {
                    self.accumulate(g, *v, gout.clone());
                }
            }
            Op::SumAll(a) => {
                let s = gout[[0]];
                self.accumulate(g, *a, ArrayD::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let s = gout[[0]] / n;
                self.accumulate(g, *a, ArrayD::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::AddBiasLast(x, b) => {
                self.accumulate(g, *x, gout.clone());
                if self.needs(*b) {
                    let d = self.value(*b).len();
                    let mut gb = ArrayD::zeros(IxDyn(&[d]));
                    {
                        let mut gb1 = gb.view_mut().into_shape_with_order(d).unwrap();
                        for lane in gout.rows() {
                            gb1 += &lane;
                        }
                    }
                    let gb = gb
                        .into_shape_with_order(self.value(*b).raw_dim())
                        .unwrap();
                    self.accumulate(g, *b, gb);
                }
            }
            Op::AddBiasChan(x, b) => {
                self.accumulate(g, *x, gout.clone());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut gb = ArrayD::zeros(IxDyn(&[c]));
                    for (ch, plane) in gout.axis_iter(Axis(0)).enumerate() {
                        gb[[ch]] = plane.sum();
                    }
                    let gb = gb
                        .into_shape_with_order(self.value(*b).raw_dim())
                        .unwrap();
                    self.accumulate(g, *b, gb);
                }
            }
            Op::BroadcastHw(v) => {
                let d = self.value(*v).len();
                let mut gv = ArrayD::zeros(IxDyn(&[d]));
                for (c, plane) in gout.axis_iter(Axis(0)).enumerate() {
                    gv[[c]] = plane.sum();
                }
                let gv = gv
                    .into_shape_with_order(self.value(*v).raw_dim())
                    .unwrap();
                self.accumulate(g, *v, gv);
            }
            Op::MatMul { a, b, ta, tb } => {
                let gm = as2(gout);
                let va = as2(self.value(*a));
                let vb = as2(self.value(*b));
                let aa = if *ta { va.t() } else { va };
                let bb = if *tb { vb.t() } else { vb };
                if self.needs(*a) {
                    // dA = G B^T, mapped back through the transpose flag.
                    let da = if *ta {
                        bb.dot(&gm.t())
                    } else {
                        gm.dot(&bb.t())
                    };
                    self.accumulate(g, *a, da.into_dyn());
                }
                if self.needs(*b) {
                    let db = if *tb {
                        gm.t().dot(&aa)
                    } else {
                        aa.t().dot(&gm)
                    };
                    self.accumulate(g, *b, db.into_dyn());
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                    b.map(|bv| self.needs(bv)).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    self.accumulate(g, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(g, *w, gw);
                }
                if let (Some(bv), Some(gb)) = (b, gb) {
                    self.accumulate(g, *bv, gb);
                }
            }
            Op::SoftmaxLast(a) => {
                let s = self.value(Var(i));
                let mut ga = gout.clone();
                let mut gl = ga.rows_mut().into_iter();
                for sl in s.rows() {
                    let gr = gl.next().unwrap();
                    softmax_lane_backward(gr, sl);
                }
                self.accumulate(g, *a, ga);
            }
            Op::SoftmaxAxis0(a) => {
                let s = self.value(Var(i));
                let (na, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2]);
                let mut ga = gout.clone();
                for y in 0..h {
                    for x in 0..w {
                        let mut dot = 0.0;
                        for k in 0..na {
                            dot += ga[[k, y, x]] * s[[k, y, x]];
                        }
                        for k in 0..na {
                            ga[[k, y, x]] = s[[k, y, x]] * (ga[[k, y, x]] - dot);
                        }
                    }
                }
                self.accumulate(g, *a, ga);
            }
            Op::LogSumExpAxis0(a) => {
                let va = self.value(*a);
                let out = self.value(Var(i));
                let (na, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let mut ga = ArrayD::zeros(va.raw_dim());
                for y in 0..h {
                    for x in 0..w {
                        let go = gout[[y, x]];
                        for k in 0..na {
                            ga[[k, y, x]] = go * (va[[k, y, x]] - out[[y, x]]).exp();
                        }
                    }
                }
                self.accumulate(g, *a, ga);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let gp = gout
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    self.accumulate(g, *p, gp);
                    start += len;
                }
            }
            Op::SliceAxis { a, axis, start, len } => {
                let mut ga = ArrayD::zeros(self.value(*a).raw_dim());
                ga.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(gout);
                self.accumulate(g, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = reshaped(gout, self.value(*a).shape());
                self.accumulate(g, *a, ga);
            }
            Op::BilinearGather { field, query } => {
                let vf = self.value(*field);
                let vq = self.value(*query);
                let (c, h, w) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
                let taps = bilinear_taps(vq[[0]], vq[[1]], h, w);
                if self.needs(*field) {
                    let mut gf = ArrayD::zeros(vf.raw_dim());
                    for ch in 0..c {
                        for t in &taps.corners {
                            gf[[ch, t.iy, t.ix]] += gout[[ch]] * t.weight;
                        }
                    }
                    self.accumulate(g, *field, gf);
                }
                if self.needs(*query) {
                    // d out[c] / d gx = (1-fy)(f[y0,x1]-f[y0,x0]) + fy (f[y1,x1]-f[y1,x0])
                    let mut gq = ArrayD::zeros(IxDyn(&[2]));
                    if !taps.clamped_x || !taps.clamped_y {
                        let (y0, x0, y1, x1) = (taps.y0, taps.x0, taps.y1, taps.x1);
                        let (fx, fy) = (taps.fx, taps.fy);
                        let mut dgx = 0.0;
                        let mut dgy = 0.0;
                        for ch in 0..c {
                            let f00 = vf[[ch, y0, x0]];
                            let f01 = vf[[ch, y0, x1]];
                            let f10 = vf[[ch, y1, x0]];
                            let f11 = vf[[ch, y1, x1]];
                            dgx += gout[[ch]] * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
                            dgy += gout[[ch]] * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
                        }
                        if !taps.clamped_x {
                            gq[[0]] = dgx;
                        }
                        if !taps.clamped_y {
                            gq[[1]] = dgy;
                        }
                    }
                    self.accumulate(g, *query, gq);
                }
            }
            Op::DeconvScatter { src, kernels, k } => {
                let vs = self.value(*src);
                let vk = self.value(*kernels);
                let (h, w) = (vs.shape()[0], vs.shape()[1]);
                let k = *k;
                let c = (k / 2) as i64;
                if self.needs(*src) {
                    let mut gs = ArrayD::zeros(vs.raw_dim());
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for dy in 0..k {
                                let ty = y as i64 + dy as i64 - c;
                                if ty < 0 || ty >= h as i64 {
                                    continue;
                                }
                                for dx in 0..k {
                                    let tx = x as i64 + dx as i64 - c;
                                    if tx < 0 || tx >= w as i64 {
                                        continue;
                                    }
                                    acc += gout[[ty as usize, tx as usize]]
                                        * vk[[dy * k + dx, y, x]];
                                }
                            }
                            gs[[y, x]] = acc;
                        }
                    }
                    self.accumulate(g, *src, gs);
                }
                if self.needs(*kernels) {
                    let mut gk = ArrayD::zeros(vk.raw_dim());
                    for y in 0..h {
                        for x in 0..w {
                            let m = vs[[y, x]];
                            if m == 0.0 {
                                continue;
                            }
                            for dy in 0..k {
                                let ty = y as i64 + dy as i64 - c;
                                if ty < 0 || ty >= h as i64 {
                                    continue;
                                }
                                for dx in 0..k {
                                    let tx = x as i64 + dx as i64 - c;
                                    if tx < 0 || tx >= w as i64 {
                                        continue;
                                    }
                                    gk[[dy * k + dx, y, x]] =
                                        m * gout[[ty as usize, tx as usize]];
                                }
                            }
                        }
                    }
                    self.accumulate(g, *kernels, gk);
                }
            }
            Op::ShiftClamp { a, dx, dy } => {
                let va = self.value(*a);
                let (h, w) = (va.shape()[0], va.shape()[1]);
                let mut ga = ArrayD::zeros(va.raw_dim());
                for y in 0..h {
                    for x in 0..w {
                        let (ty, tx) = shift_target(y, x, *dy, *dx, h, w);
                        ga[[ty, tx]] += gout[[y, x]];
                    }
                }
                self.accumulate(g, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let d = *vx.shape().last().unwrap();
                let gflat = vg.view().into_shape_with_order(d).unwrap();
                let mut gx = ArrayD::zeros(vx.raw_dim());
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let lanes_x = vx.rows();
                let lanes_g = gout.rows();
                let mut lanes_out = gx.rows_mut().into_iter();
                for (lx, lg) in lanes_x.into_iter().zip(lanes_g) {
                    let lo = lanes_out.next().unwrap();
                    layer_norm_lane_backward(
                        lx, lg, &gflat, *eps, lo, &mut ggamma, &mut gbeta,
                    );
                }
                self.accumulate(g, *x, gx);
                if self.needs(*gamma) {
                    let arr = ArrayD::from_shape_vec(self.value(*gamma).raw_dim(), ggamma)
                        .unwrap();
                    self.accumulate(g, *gamma, arr);
                }
                if self.needs(*beta) {
                    let arr =
                        ArrayD::from_shape_vec(self.value(*beta).raw_dim(), gbeta).unwrap();
                    self.accumulate(g, *beta, arr);
                }
            }
            Op::DivByScalar { a, s } => {
                let sv = self.value(*s)[[0]];
                self.accumulate(g, *a, gout.mapv(|x| x / sv));
                if self.needs(*s) {
                    let va = self.value(*a);
                    let ds = -(gout * va).sum() / (sv * sv);
                    self.accumulate(g, *s, ArrayD::from_elem(IxDyn(&[1]), ds));
                }
            }
        }
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn reshaped(a: &Arr, shape: &[usize]) -> Arr {
    match a.clone().into_shape_with_order(IxDyn(shape)) {
        Ok(r) => r,
        Err(_) => a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap(),
    }
}

fn softmax_lane_backward(mut grad: ndarray::ArrayViewMut1<f64>, s: ndarray::ArrayView1<f64>) {
    let dot: f64 = grad.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
    for (gi, si) in grad.iter_mut().zip(s.iter()) {
        *gi = si * (*gi - dot);
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_lane_backward(
    x: ndarray::ArrayView1<f64>,
    gout: ndarray::ArrayView1<f64>,
    gamma: &ndarray::ArrayView1<f64>,
    eps: f64,
    mut gx: ndarray::ArrayViewMut1<f64>,
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let d = x.len();
    let n = d as f64;
    let mu = x.sum() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let s = (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mu) / s).collect();
    let dxhat: Vec<f64> = gout
        .iter()
        .zip(gamma.iter())
        .map(|(g, gm)| g * gm)
        .collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(xhat.iter())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n;
    for i in 0..d {
        gx[i] = (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) / s;
        ggamma[i] += gout[i] * xhat[i];
        gbeta[i] += gout[i];
    }
}

#[inline]
fn shift_target(y: usize, x: usize, dy: i64, dx: i64, h: usize, w: usize) -> (usize, usize) {
    let ty = y as i64 + dy;
    let tx = x as i64 + dx;
    if ty < 0 || ty >= h as i64 || tx < 0 || tx >= w as i64 {
        (y, x)
    } else {
        (ty as usize, tx as usize)
    }
}

/// The four corner taps of a bilinear lookup, after clamping.
pub(crate) struct BilinearTaps {
    pub corners: [Tap; 4],
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub fx: f64,
    pub fy: f64,
    pub clamped_x: bool,
    pub clamped_y: bool,
}

pub(crate) struct Tap {
    pub iy: usize,
    pub ix: usize,
    pub weight: f64,
}

pub(crate) fn bilinear_taps(gx: f64, gy: f64, h: usize, w: usize) -> BilinearTaps {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let clamped_x = gx < 0.0 || gx > max_x;
    let clamped_y = gy < 0.0 || gy > max_y;
    let cx = gx.clamp(0.0, max_x);
    let cy = gy.clamp(0.0, max_y);
    let x0 = (cx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (cy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    BilinearTaps {
        corners: [
            Tap { iy: y0, ix: x0, weight: (1.0 - fx) * (1.0 - fy) },
            Tap { iy: y0, ix: x1, weight: fx * (1.0 - fy) },
            Tap { iy: y1, ix: x0, weight: (1.0 - fx) * fy },
            Tap { iy: y1, ix: x1, weight: fx * fy },
        ],
        y0,
        x0,
        y1,
        x1,
        fx,
        fy,
        clamped_x,
        clamped_y,
    }
}

fn conv2d_forward(x: &Arr, w: &Arr, stride: usize, pad: usize) -> Arr {
    let x3 = x.view().into_dimensionality::<Ix3>().expect("x [C,H,W]");
    let (cin, h, wd) = x3.dim();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "w [Cout,Cin,kh,kw]");
    assert_eq!(ws[1], cin, "conv channel mismatch");
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let col = im2col(&x3, kh, kw, stride, pad, oh, ow);
    let w2 = w.view().into_shape_with_order((cout, cin * kh * kw)).unwrap();
    let out2 = w2.dot(&col);
    out2.into_shape_with_order(IxDyn(&[cout, oh, ow])).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Arr,
    w: &Arr,
    gout: &Arr,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Arr>, Option<Arr>, Option<Arr>) {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, h, wd) = x3.dim();
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let gstd = gout.as_standard_layout();
    let g2 = gstd.view().into_shape_with_order((cout, oh * ow)).unwrap();

    let gb = if need_b {
        let mut b = ArrayD::zeros(IxDyn(&[cout]));
        for (c, plane) in gout.axis_iter(Axis(0)).enumerate() {
            b[[c]] = plane.sum();
        }
        Some(b)
    } else {
        None
    };

    let col = if need_w || need_x {
        Some(im2col(&x3, kh, kw, stride, pad, oh, ow))
    } else {
        None
    };

    let gw = if need_w {
        let col = col.as_ref().unwrap();
        let gw2 = g2.dot(&col.t());
        Some(gw2.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap())
    } else {
        None
    };

    let gx = if need_x {
        let w2 = w.view().into_shape_with_order((cout, cin * kh * kw)).unwrap();
        let gcol = w2.t().dot(&g2);
        let mut gx = ndarray::Array3::<f64>::zeros((cin, h, wd));
        col2im(&gcol, &mut gx, kh, kw, stride, pad, oh, ow);
        Some(gx.into_dyn())
    } else {
        None
    };

    (gx, gw, gb)
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (cin, h, wd) = x.dim();
    let mut col = ndarray::Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as i64 - pad as i64;
                        if ix < 0 || ix >= wd as i64 {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &ndarray::Array2<f64>,
    gx: &mut ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (cin, h, wd) = gx.dim();
    for c in 0..cin {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (c * kh + dy) * kw + dx;
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as i64 - pad as i64;
                        if ix < 0 || ix >= wd as i64 {
                            continue;
                        }
                        gx[[c, iy as usize, ix as usize]] += gcol[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`, one forward pair per
/// element. Used as the independent oracle for gradient checks.
pub fn central_difference<F: Fn(&Arr) -> f64>(f: F, x: &Arr, h: f64) -> Arr {
    let mut g = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max relative error between an analytic gradient and its finite-difference
/// estimate, with a small absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: &[usize]) -> Arr {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Gradient-check a scalar-valued graph builder against finite differences
    /// on each tracked input.
    fn grad_check(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Arr],
        tol: f64,
    ) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let root = build(&mut t, &vars);
        let grads = t.backward(root);
        for (i, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("missing grad").clone();
            let numeric = central_difference(
                |xp| {
                    let mut t2 = Tape::new();
                    let vars2: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, y)| t2.input(if j == i { xp.clone() } else { y.clone() }))
                        .collect();
                    let r = build(&mut t2, &vars2);
                    t2.value(r)[[0]]
                },
                x,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|x| x + 2.5); // keep divisor away from 0
        grad_check(
            |t, v| {
                let m = t.mul(v[0], v[1]);
                let d = t.div(v[0], v[1]);
                let s = t.add(m, d);
                let e = t.tanh(s);
                t.sum_all(e)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn unary_chain_grads() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = randn(&mut rng, &[6]).mapv(|x| x * 0.5 + 2.0);
        grad_check(
            |t, v| {
                let e = t.exp(v[0]);
                let l = t.ln(e);
                let q = t.sqrt(l);
                let s = t.sigmoid(q);
                t.mean_all(s)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn matmul_grads_all_transposes() {
        let mut rng = StdRng::seed_from_u64(3);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta {
                randn(&mut rng, &[4, 3])
            } else {
                randn(&mut rng, &[3, 4])
            };
            let b = if tb {
                randn(&mut rng, &[5, 4])
            } else {
                randn(&mut rng, &[4, 5])
            };
            grad_check(
                |t, v| {
                    let m = t.matmul(v[0], v[1], ta, tb);
                    let s = t.tanh(m);
                    t.sum_all(s)
                },
                &[a, b],
                1e-6,
            );
        }
    }

    #[test]
    fn conv2d_grads() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 5, 5]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        grad_check(
            |t, v| {
                let c = t.conv2d(v[0], v[1], Some(v[2]), 1, 1);
                let s = t.tanh(c);
                t.sum_all(s)
            },
            &[x, w, b],
            1e-6,
        );
        // strided, no padding
        let x = randn(&mut rng, &[2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 2, 2]);
        grad_check(
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 2, 0);
                t.sum_all(c)
            },
            &[x, w],
            1e-6,
        );
    }

    #[test]
    fn softmax_and_lse_grads() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = randn(&mut rng, &[4, 5]);
        let stack = randn(&mut rng, &[5, 3, 3]);
        grad_check(
            |t, v| {
                let s = t.softmax_last(v[0]);
                let l = t.ln(s);
                t.sum_all(l)
            },
            &[a],
            1e-6,
        );
        grad_check(
            |t, v| {
                let s = t.softmax_axis0(v[0]);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            &[stack.clone()],
            1e-6,
        );
        grad_check(
            |t, v| {
                let l = t.logsumexp_axis0(v[0]);
                let s = t.tanh(l);
                t.sum_all(s)
            },
            &[stack],
            1e-6,
        );
    }

    #[test]
    fn logsumexp_overflow_safe() {
        let mut t = Tape::new();
        let a = t.constant(ArrayD::from_shape_vec(IxDyn(&[2, 1, 1]), vec![1e4, 9.9e3]).unwrap());
        let l = t.logsumexp_axis0(a);
        let got = t.value(l)[[0, 0]];
        let expect = 1e4 + (1.0 + (-100.0f64).exp()).ln();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn bilinear_gather_grads() {
        let mut rng = StdRng::seed_from_u64(6);
        let field = randn(&mut rng, &[3, 4, 4]);
        let query = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.3, 2.45]).unwrap();
        grad_check(
            |t, v| {
                let g = t.bilinear_gather(v[0], v[1]);
                let s = t.tanh(g);
                t.sum_all(s)
            },
            &[field, query],
            1e-6,
        );
    }

    #[test]
    fn bilinear_gather_zero_query_grad_when_clamped() {
        let mut rng = StdRng::seed_from_u64(7);
        let field = randn(&mut rng, &[1, 4, 4]);
        let mut t = Tape::new();
        let f = t.constant(field);
        let q = t.input(ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.5, 5.2]).unwrap());
        let g = t.bilinear_gather(f, q);
        let root = t.sum_all(g);
        let grads = t.backward(root);
        let gq = grads.get(q).unwrap();
        assert_eq!(gq[[0]], 0.0);
        assert_eq!(gq[[1]], 0.0);
    }

    #[test]
    fn deconv_scatter_grads() {
        let mut rng = StdRng::seed_from_u64(8);
        let src = randn(&mut rng, &[5, 5]).mapv(|x| x.abs() + 0.1);
        let kern = randn(&mut rng, &[9, 5, 5]).mapv(|x| x.abs() + 0.05);
        grad_check(
            |t, v| {
                let o = t.deconv_scatter(v[0], v[1], 3);
                let s = t.tanh(o);
                t.sum_all(s)
            },
            &[src, kern],
            1e-6,
        );
    }

    #[test]
    fn shift_clamp_matches_manual_transition() {
        let mut t = Tape::new();
        let a = t.input(
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        // action "up": read value at (x, y+1), self at the top edge
        let s = t.shift_clamp(a, 0, 1);
        let v = t.value(s);
        assert_eq!(v[[0, 0]], 3.0);
        assert_eq!(v[[0, 1]], 4.0);
        assert_eq!(v[[1, 0]], 3.0); // top row: off-grid, keeps itself
        assert_eq!(v[[1, 1]], 4.0);
        let root = t.sum_all(s);
        let grads = t.backward(root);
        let ga = grads.get(a).unwrap();
        // cells (1,0) and (1,1) each receive two contributions
        assert_eq!(ga[[0, 0]], 0.0);
        assert_eq!(ga[[1, 0]], 2.0);
        assert_eq!(ga[[1, 1]], 2.0);
    }

    #[test]
    fn shift_clamp_grads() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = randn(&mut rng, &[4, 4]);
        for &(dx, dy) in &[(0i64, 1i64), (0, -1), (-1, 0), (1, 0)] {
            grad_check(
                |t, v| {
                    let s = t.shift_clamp(v[0], dx, dy);
                    let m = t.mul(s, s);
                    t.sum_all(m)
                },
                &[a.clone()],
                1e-6,
            );
        }
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = randn(&mut rng, &[3, 6]);
        let gamma = randn(&mut rng, &[6]).mapv(|v| v + 1.5);
        let beta = randn(&mut rng, &[6]);
        grad_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
                let s = t.tanh(y);
                t.sum_all(s)
            },
            &[x, gamma, beta],
            1e-5,
        );
    }

    #[test]
    fn concat_slice_reshape_broadcast_grads() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 2]);
        let v = randn(&mut rng, &[4]);
        grad_check(
            |t, vars| {
                let c = t.concat(&[vars[0], vars[1]], 1);
                let s = t.slice_axis(c, 1, 1, 3);
                let r = t.reshape(s, &[6]);
                let m = t.mul(r, r);
                t.sum_all(m)
            },
            &[a, b],
            1e-6,
        );
        grad_check(
            |t, vars| {
                let m = t.broadcast_hw(vars[0], 3, 2);
                let s = t.tanh(m);
                t.sum_all(s)
            },
            &[v],
            1e-6,
        );
    }

    #[test]
    fn bias_and_scalar_div_grads() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4]);
        let m = randn(&mut rng, &[2, 3, 3]);
        let cb = randn(&mut rng, &[2]);
        let s = ArrayD::from_elem(IxDyn(&[1]), 1.7);
        grad_check(
            |t, v| {
                let y = t.add_bias_last(v[0], v[1]);
                let z = t.tanh(y);
                t.sum_all(z)
            },
            &[x.clone(), b],
            1e-6,
        );
        grad_check(
            |t, v| {
                let y = t.add_bias_chan(v[0], v[1]);
                let z = t.tanh(y);
                t.sum_all(z)
            },
            &[m, cb],
            1e-6,
        );
        grad_check(
            |t, v| {
                let y = t.div_by_scalar(v[0], v[1]);
                let z = t.tanh(y);
                t.sum_all(z)
            },
            &[x, s],
            1e-6,
        );
    }

    #[test]
    fn clamp_and_relu_grads_interior() {
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![-2.0, -0.4, 0.3, 1.8]).unwrap();
        let mut t = Tape::new();
        let v = t.input(x);
        let c = t.clamp(v, -1.0, 1.0);
        let r = t.relu(c);
        let root = t.sum_all(r);
        let grads = t.backward(root);
        let gv = grads.get(v).unwrap();
        // -2.0 and 1.8 are clamped; -0.4 passes the clamp but dies at the relu
        assert_eq!(gv.as_slice().unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn param_registration_dedupes_and_accumulates() {
        let mut t = Tape::new();
        let val = Arc::new(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let p1 = t.param(ParamId(7), &val, true);
        let p2 = t.param(ParamId(7), &val, true);
        assert_eq!(p1, p2);
        // use the param twice; gradient should be the sum of both uses
        let a = t.mul(p1, p2); // x^2
        let root = t.sum_all(a);
        let grads = t.backward(root);
        let gp = grads.get(p1).unwrap();
        assert!((gp[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_no_grad() {
        let mut t = Tape::new();
        let val = Arc::new(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let p = t.param(ParamId(1), &val, false);
        let q = t.mul(p, p);
        let root = t.sum_all(q);
        let grads = t.backward(root);
        assert!(grads.get(p).is_none());
    }
}
