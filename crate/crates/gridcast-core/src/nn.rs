//! Neural building blocks on top of the tape: parameter storage, layer
//! modules and the Adam optimizer.
//!
//! Modules hold [`ParamId`]s into a [`ParamStore`]; applying a module
//! registers its parameters on the tape (deduplicated), so gradients map back
//! to store entries after `backward`.

use crate::tape::{Arr, ParamId, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Named parameter arrays plus Adam moment buffers.
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Arr>>,
    adam_m: Vec<Arr>,
    adam_v: Vec<Arr>,
    by_name: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a new parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Arr) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.adam_m.push(ArrayD::zeros(value.raw_dim()));
        self.adam_v.push(ArrayD::zeros(value.raw_dim()));
        self.values.push(Arc::new(value));
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Uniform init in `[-bound, bound]` with `bound = 1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arc<Arr> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Overwrite a parameter's value (checkpoint restore).
    pub fn set_value(&mut self, id: ParamId, value: Arr) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape mismatch");
        self.values[id.0] = Arc::new(value);
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Adam with fixed betas and eps; step count is per-instance.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Apply accumulated gradients to the given parameter subset.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Arr>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let mut new = (**store.value(id)).clone();
            {
                let m = &mut store.adam_m[id.0];
                let v = &mut store.adam_v[id.0];
                m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
                v.zip_mut_with(g, |vi, &gi| {
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
                });
                for ((w, mi), vi) in new.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            store.set_value(id, new);
        }
    }
}

/// Fully connected layer; input `[n, in]`, output `[n, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.uniform(&format!("{name}.w"), &[out_dim, in_dim], in_dim, rng);
        let b = store.uniform(&format!("{name}.b"), &[out_dim], in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var) -> Var {
        let w = t.param(self.w, store.value(self.w), trainable);
        let b = t.param(self.b, store.value(self.b), trainable);
        let y = t.matmul(x, w, false, true);
        t.add_bias_last(y, b)
    }
}

/// Convolution layer over `[C,H,W]` maps.
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan = in_ch * kernel * kernel;
        let w = store.uniform(&format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan, rng);
        let b = store.uniform(&format!("{name}.b"), &[out_ch], fan, rng);
        Self { w, b, stride, pad }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var) -> Var {
        let w = t.param(self.w, store.value(self.w), trainable);
        let b = t.param(self.b, store.value(self.b), trainable);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Gated recurrent unit cell, PyTorch gate layout `[r, z, n]`.
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = store.uniform(&format!("{name}.wx"), &[3 * hidden, in_dim], hidden, rng);
        let wh = store.uniform(&format!("{name}.wh"), &[3 * hidden, hidden], hidden, rng);
        let bx = store.uniform(&format!("{name}.bx"), &[3 * hidden], hidden, rng);
        let bh = store.uniform(&format!("{name}.bh"), &[3 * hidden], hidden, rng);
        Self { wx, wh, bx, bh, hidden }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wx, self.wh, self.bx, self.bh]
    }

    /// One step: `x [1, in]`, `h [1, hidden]` -> new hidden `[1, hidden]`.
    pub fn step(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var, h: Var) -> Var {
        let wx = t.param(self.wx, store.value(self.wx), trainable);
        let wh = t.param(self.wh, store.value(self.wh), trainable);
        let bx = t.param(self.bx, store.value(self.bx), trainable);
        let bh = t.param(self.bh, store.value(self.bh), trainable);
        let gx = t.matmul(x, wx, false, true);
        let gx = t.add_bias_last(gx, bx);
        let gh = t.matmul(h, wh, false, true);
        let gh = t.add_bias_last(gh, bh);
        let hd = self.hidden;
        let gx_r = t.slice_axis(gx, 1, 0, hd);
        let gx_z = t.slice_axis(gx, 1, hd, hd);
        let gx_n = t.slice_axis(gx, 1, 2 * hd, hd);
        let gh_r = t.slice_axis(gh, 1, 0, hd);
        let gh_z = t.slice_axis(gh, 1, hd, hd);
        let gh_n = t.slice_axis(gh, 1, 2 * hd, hd);
        let r_pre = t.add(gx_r, gh_r);
        let r = t.sigmoid(r_pre);
        let z_pre = t.add(gx_z, gh_z);
        let z = t.sigmoid(z_pre);
        let rn = t.mul(r, gh_n);
        let n_pre = t.add(gx_n, rn);
        let n = t.tanh(n_pre);
        // h' = (1 - z) * n + z * h
        let zn = t.mul(z, n);
        let nh = t.sub(n, zn);
        let zh = t.mul(z, h);
        t.add(nh, zh)
    }
}

/// Convolutional LSTM cell with separate input and recurrent kernels so the
/// input-side convolution can be computed once when the input is constant
/// across steps.
pub struct ConvLstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan = in_ch * kernel * kernel;
        let wx = store.uniform(
            &format!("{name}.wx"),
            &[4 * hidden, in_ch, kernel, kernel],
            fan,
            rng,
        );
        let fan_h = hidden * kernel * kernel;
        let wh = store.uniform(
            &format!("{name}.wh"),
            &[4 * hidden, hidden, kernel, kernel],
            fan_h,
            rng,
        );
        let b = store.uniform(&format!("{name}.b"), &[4 * hidden], fan, rng);
        Self { wx, wh, b, hidden, kernel }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wx, self.wh, self.b]
    }

    /// Input-side gate pre-activations; reusable across steps for a constant
    /// input map.
    pub fn input_gates(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var) -> Var {
        let wx = t.param(self.wx, store.value(self.wx), trainable);
        t.conv2d(x, wx, None, 1, self.kernel / 2)
    }

    /// One step from precomputed input gates: returns `(h', c')`, all maps
    /// `[hidden, H, W]`.
    pub fn step(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        x_gates: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let wh = t.param(self.wh, store.value(self.wh), trainable);
        let b = t.param(self.b, store.value(self.b), trainable);
        let hg = t.conv2d(h, wh, None, 1, self.kernel / 2);
        let pre = t.add(x_gates, hg);
        let pre = t.add_bias_chan(pre, b);
        let hd = self.hidden;
        let i_pre = t.slice_axis(pre, 0, 0, hd);
        let f_pre = t.slice_axis(pre, 0, hd, hd);
        let o_pre = t.slice_axis(pre, 0, 2 * hd, hd);
        let g_pre = t.slice_axis(pre, 0, 3 * hd, hd);
        let i = t.sigmoid(i_pre);
        let f = t.sigmoid(f_pre);
        let o = t.sigmoid(o_pre);
        let gg = t.tanh(g_pre);
        let fc = t.mul(f, c);
        let ig = t.mul(i, gg);
        let c_new = t.add(fc, ig);
        let tc = t.tanh(c_new);
        let h_new = t.mul(o, tc);
        (h_new, c_new)
    }
}

/// Multi-head scaled dot-product attention. Queries `[nq, d]`, keys/values
/// `[nk, d]`; heads are contiguous slices of the projected feature axis.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide into heads");
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }

    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        queries: Var,
        keys_values: Var,
    ) -> Var {
        let q = self.wq.apply(t, store, trainable, queries);
        let k = self.wk.apply(t, store, trainable, keys_values);
        let v = self.wv.apply(t, store, trainable, keys_values);
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for hix in 0..self.heads {
            let qh = t.slice_axis(q, 1, hix * dk, dk);
            let kh = t.slice_axis(k, 1, hix * dk, dk);
            let vh = t.slice_axis(v, 1, hix * dk, dk);
            let scores = t.matmul(qh, kh, false, true);
            let scores = t.scale(scores, scale);
            let attn = t.softmax_last(scores);
            heads.push(t.matmul(attn, vh, false, false));
        }
        let cat = t.concat(&heads, 1);
        self.wo.apply(t, store, trainable, cat)
    }
}

/// Learned layer-norm affine parameters.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[dim]), 1.0));
        let beta = store.zeros(&format!("{name}.beta"), &[dim]);
        Self { gamma, beta }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn apply(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var) -> Var {
        let g = t.param(self.gamma, store.value(self.gamma), trainable);
        let b = t.param(self.beta, store.value(self.beta), trainable);
        t.layer_norm(x, g, b, 1e-5)
    }
}

/// Collect per-parameter gradients from a finished backward pass.
pub fn collect_grads(
    t: &Tape,
    grads: &crate::tape::Grads,
    into: &mut HashMap<ParamId, Arr>,
) {
    let mut pairs: Vec<(ParamId, Var)> = t.registered_params().collect();
    pairs.sort_by_key(|(id, _)| *id);
    for (id, var) in pairs {
        if let Some(g) = grads.get(var) {
            match into.get_mut(&id) {
                Some(acc) => *acc += g,
                None => {
                    into.insert(id, g.clone());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{central_difference, max_rel_err};
    use rand::SeedableRng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-0.8..0.8))
    }

    /// Finite-difference check of a module's loss gradient w.r.t. one stored
    /// parameter.
    fn check_param_grad(
        store: &mut ParamStore,
        id: ParamId,
        loss: &dyn Fn(&ParamStore) -> (f64, Option<Arr>),
        tol: f64,
    ) {
        let (_, analytic) = loss(store);
        let analytic = analytic.expect("param got no gradient");
        let base = (**store.value(id)).clone();
        let numeric = central_difference(
            |p| {
                let mut s2 = ParamStore {
                    names: store.names.clone(),
                    values: store.values.clone(),
                    adam_m: store.adam_m.clone(),
                    adam_v: store.adam_v.clone(),
                    by_name: store.by_name.clone(),
                };
                s2.set_value(id, p.clone());
                loss(&s2).0
            },
            &base,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "param {}: rel err {err}", store.name(id));
    }

    #[test]
    fn gru_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, "g", 3, 4, &mut rng);
        let x1 = randn(&mut rng, &[1, 3]);
        let x2 = randn(&mut rng, &[1, 3]);
        for id in gru.ids() {
            let x1 = x1.clone();
            let x2 = x2.clone();
            let gruref = &gru;
            check_param_grad(
                &mut store,
                id,
                &move |s: &ParamStore| {
                    let mut t = Tape::new();
                    let xa = t.constant(x1.clone());
                    let xb = t.constant(x2.clone());
                    let h0 = t.constant(ArrayD::zeros(IxDyn(&[1, 4])));
                    let h1 = gruref.step(&mut t, s, true, xa, h0);
                    let h2 = gruref.step(&mut t, s, true, xb, h1);
                    let sq = t.mul(h2, h2);
                    let root = t.sum_all(sq);
                    let grads = t.backward(root);
                    let gv = t.param_var(id).and_then(|v| grads.get(v).cloned());
                    (t.value(root)[[0]], gv)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn convlstm_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let cell = ConvLstmCell::new(&mut store, "c", 2, 3, 3, &mut rng);
        let x = randn(&mut rng, &[2, 4, 4]);
        for id in cell.ids() {
            let x = x.clone();
            let cellref = &cell;
            check_param_grad(
                &mut store,
                id,
                &move |s: &ParamStore| {
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let h0 = t.constant(ArrayD::zeros(IxDyn(&[3, 4, 4])));
                    let c0 = t.constant(ArrayD::zeros(IxDyn(&[3, 4, 4])));
                    let xg = cellref.input_gates(&mut t, s, true, xv);
                    let (h1, c1) = cellref.step(&mut t, s, true, xg, h0, c0);
                    let (h2, _) = cellref.step(&mut t, s, true, xg, h1, c1);
                    let sq = t.mul(h2, h2);
                    let root = t.sum_all(sq);
                    let grads = t.backward(root);
                    let gv = t.param_var(id).and_then(|v| grads.get(v).cloned());
                    (t.value(root)[[0]], gv)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn attention_weights_sum_to_one_and_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng);
        let q = randn(&mut rng, &[2, 8]);
        let kv = randn(&mut rng, &[5, 8]);
        // single-item attention ignores the scores entirely
        let kv1 = randn(&mut rng, &[1, 8]);
        {
            let mut t = Tape::new();
            let qv = t.constant(q.clone());
            let kvv = t.constant(kv1.clone());
            let out = mha.apply(&mut t, &store, false, qv, kvv);
            assert_eq!(t.value(out).shape(), &[2, 8]);
        }
        let id = mha.wq.w;
        check_param_grad(
            &mut store,
            id,
            &move |s: &ParamStore| {
                let mut t = Tape::new();
                let qv = t.constant(q.clone());
                let kvv = t.constant(kv.clone());
                let out = mha.apply(&mut t, s, true, qv, kvv);
                let sq = t.mul(out, out);
                let root = t.sum_all(sq);
                let grads = t.backward(root);
                let gv = t.param_var(id).and_then(|v| grads.get(v).cloned());
                (t.value(root)[[0]], gv)
            },
            1e-5,
        );
    }

    #[test]
    fn attention_softmax_hand_case() {
        // scores (0, ln 3) -> weights (0.25, 0.75)
        let mut t = Tape::new();
        let s = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 3f64.ln()]).unwrap());
        let w = t.softmax_last(s);
        assert!((t.value(w)[[0]] - 0.25).abs() < 1e-12);
        assert!((t.value(w)[[1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn attention_output_independent_of_weights_for_identical_values() {
        // when every key/value row is identical, the convex combination is
        // that row no matter what the scores are
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng);
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut kv = ArrayD::zeros(IxDyn(&[6, 8]));
        for i in 0..6 {
            for j in 0..8 {
                kv[[i, j]] = row[j];
            }
        }
        let q1 = randn(&mut rng, &[1, 8]);
        let q2 = randn(&mut rng, &[1, 8]);
        let run = |q: &Arr| {
            let mut t = Tape::new();
            let qv = t.constant(q.clone());
            let kvv = t.constant(kv.clone());
            let out = mha.apply(&mut t, &store, false, qv, kvv);
            // subtract the query-side contribution by reading the raw context
            t.value(out).clone()
        };
        // different queries produce different projections of the SAME
        // attended value, so compare the attended value through wo by
        // checking against a single-row kv (weights forced to 1)
        let run_single = |q: &Arr| {
            let mut t = Tape::new();
            let qv = t.constant(q.clone());
            let kv1 = t.constant(
                ArrayD::from_shape_vec(IxDyn(&[1, 8]), row.clone()).unwrap(),
            );
            let out = mha.apply(&mut t, &store, false, qv, kv1);
            t.value(out).clone()
        };
        for q in [&q1, &q2] {
            let a = run(q);
            let b = run_single(q);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut opt = Adam::new(0.1);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let x = (**store.value(id)).clone();
            let loss: f64 = x.iter().map(|v| v * v).sum();
            let grad = x.mapv(|v| 2.0 * v);
            let mut grads = HashMap::new();
            grads.insert(id, grad);
            opt.step(&mut store, &grads);
            last = loss;
        }
        assert!(last < 1e-2, "loss {last}");
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 4, 3, &mut rng);
        store.set_value(lin.w, ArrayD::zeros(IxDyn(&[3, 4])));
        store.set_value(lin.b, ArrayD::zeros(IxDyn(&[3])));
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[2, 4]), 1.5));
        let y = lin.apply(&mut t, &store, false, x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }
}
