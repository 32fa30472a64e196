//! Representative-set refinement.
//!
//! An encoder-decoder attention network distills `C` over-sampled
//! trajectories into `K` representatives in one parallel pass: sample
//! embeddings carry no positional encoding (the set is unordered), and the
//! decoder queries are the embedded motion feature plus `K` learned vectors,
//! so no auto-regression or masking is involved. A seeded K-means over
//! flattened trajectories serves as the baseline.

use crate::nn::{LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{name}.ff1"), dim, inner, rng),
            lin2: Linear::new(store, &format!("{name}.ff2"), inner, dim, rng),
        }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = self.lin1.ids();
        v.extend(self.lin2.ids());
        v
    }

    fn apply(&self, t: &mut Tape, store: &ParamStore, trainable: bool, x: Var) -> Var {
        let h = self.lin1.apply(t, store, trainable, x);
        let h = t.relu(h);
        self.lin2.apply(t, store, trainable, h)
    }
}

/// Inverted dropout as a constant mask; active only when a generator is
/// supplied (training mode).
fn dropout(t: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let shape = t.value(x).shape().to_vec();
            let keep = 1.0 - rate;
            let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = t.constant(mask);
            t.mul(x, m)
        }
        _ => x,
    }
}

struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

/// Attention-based set refinement network.
pub struct RefinementNet {
    pub sample_embed: Linear,
    pub motion_embed: Linear,
    pub queries: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    pub out: Linear,
    pub k: usize,
    pub dim: usize,
    pub dropout: f64,
    pub t_f: usize,
}

impl RefinementNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        t_f: usize,
        motion_hidden: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        k: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let sample_embed = Linear::new(store, &format!("{name}.embed"), 2 * t_f, dim, rng);
        let motion_embed = Linear::new(store, &format!("{name}.m0"), motion_hidden, dim, rng);
        let queries = store.uniform(&format!("{name}.queries"), &[k, dim], dim, rng);
        let mut enc = Vec::with_capacity(layers);
        let mut dec = Vec::with_capacity(layers);
        for i in 0..layers {
            enc.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{name}.enc{i}.attn"), dim, heads, rng),
                ln1: LayerNorm::new(store, &format!("{name}.enc{i}.ln1"), dim),
                ff: FeedForward::new(store, &format!("{name}.enc{i}"), dim, 2 * dim, rng),
                ln2: LayerNorm::new(store, &format!("{name}.enc{i}.ln2"), dim),
            });
            dec.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(
                    store,
                    &format!("{name}.dec{i}.self"),
                    dim,
                    heads,
                    rng,
                ),
                ln1: LayerNorm::new(store, &format!("{name}.dec{i}.ln1"), dim),
                cross_attn: MultiHeadAttention::new(
                    store,
                    &format!("{name}.dec{i}.cross"),
                    dim,
                    heads,
                    rng,
                ),
                ln2: LayerNorm::new(store, &format!("{name}.dec{i}.ln2"), dim),
                ff: FeedForward::new(store, &format!("{name}.dec{i}"), dim, 2 * dim, rng),
                ln3: LayerNorm::new(store, &format!("{name}.dec{i}.ln3"), dim),
            });
        }
        let out = Linear::new(store, &format!("{name}.out"), dim, 2 * t_f, rng);
        Self {
            sample_embed,
            motion_embed,
            queries,
            enc,
            dec,
            out,
            k,
            dim,
            dropout,
            t_f,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.sample_embed.ids();
        v.extend(self.motion_embed.ids());
        v.push(self.queries);
        for l in &self.enc {
            v.extend(l.attn.ids());
            v.extend(l.ln1.ids());
            v.extend(l.ff.ids());
            v.extend(l.ln2.ids());
        }
        for l in &self.dec {
            v.extend(l.self_attn.ids());
            v.extend(l.ln1.ids());
            v.extend(l.cross_attn.ids());
            v.extend(l.ln2.ids());
            v.extend(l.ff.ids());
            v.extend(l.ln3.ids());
        }
        v.extend(self.out.ids());
        v
    }

    /// Refine flattened samples `[C, 2 t_f]` into `[K, 2 t_f]`. Supplying a
    /// generator enables dropout (training mode).
    pub fn refine(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        samples_flat: Var,
        m0: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        assert!(
            t.value(samples_flat).shape()[0] > 0,
            "refinement needs at least one sample"
        );
        let mut x = self.sample_embed.apply(t, store, trainable, samples_flat);
        for l in &self.enc {
            let a = l.attn.apply(t, store, trainable, x, x);
            let a = dropout(t, a, self.dropout, rng.as_deref_mut());
            let s = t.add(x, a);
            x = l.ln1.apply(t, store, trainable, s);
            let f = l.ff.apply(t, store, trainable, x);
            let f = dropout(t, f, self.dropout, rng.as_deref_mut());
            let s = t.add(x, f);
            x = l.ln2.apply(t, store, trainable, s);
        }
        let memory = x;
        // decoder inputs: embedded motion feature + K learned query vectors
        let m = self.motion_embed.apply(t, store, trainable, m0); // [1, dim]
        let q_param = t.param(self.queries, store.value(self.queries), trainable);
        // broadcast the motion embedding over the K query rows
        let ones = t.constant(ArrayD::from_elem(IxDyn(&[self.k, 1]), 1.0));
        let m_k = t.matmul(ones, m, false, false); // [K, dim]
        let mut q = t.add(q_param, m_k);
        for l in &self.dec {
            let a = l.self_attn.apply(t, store, trainable, q, q);
            let a = dropout(t, a, self.dropout, rng.as_deref_mut());
            let s = t.add(q, a);
            q = l.ln1.apply(t, store, trainable, s);
            let a = l.cross_attn.apply(t, store, trainable, q, memory);
            let a = dropout(t, a, self.dropout, rng.as_deref_mut());
            let s = t.add(q, a);
            q = l.ln2.apply(t, store, trainable, s);
            let f = l.ff.apply(t, store, trainable, q);
            let f = dropout(t, f, self.dropout, rng.as_deref_mut());
            let s = t.add(q, f);
            q = l.ln3.apply(t, store, trainable, s);
        }
        self.out.apply(t, store, trainable, q)
    }
}

/// Lloyd's algorithm with k-means++ seeding over flattened trajectories.
/// Returns `[K, t_f, 2]` centroids. Empty clusters are re-seeded by
/// duplicating the nearest sample, with a warning.
pub fn kmeans_refine(
    samples: &Array3<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (c, t_f, _) = samples.dim();
    assert!(c >= k && k >= 1, "need C >= K >= 1");
    let d = 2 * t_f;
    let flat: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let mut v = Vec::with_capacity(d);
            for ti in 0..t_f {
                v.push(samples[[i, ti, 0]]);
                v.push(samples[[i, ti, 1]]);
            }
            v
        })
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(flat[rng.gen_range(0..c)].clone());
    while centroids.len() < k {
        let dists: Vec<f64> = flat
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|q| dist2(p, q))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total == 0.0 {
            // all remaining points coincide with existing centroids
            centroids.push(flat[rng.gen_range(0..c)].clone());
            continue;
        }
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = c - 1;
        for (i, w) in dists.iter().enumerate() {
            if draw < *w {
                chosen = i;
                break;
            }
            draw -= w;
        }
        centroids.push(flat[chosen].clone());
    }

    let mut assign = vec![0usize; c];
    for _ in 0..100 {
        for (i, p) in flat.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, q) in centroids.iter().enumerate() {
                let dd = dist2(p, q);
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            assign[i] = best;
        }
        let mut new_centroids = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in flat.iter().enumerate() {
            counts[assign[i]] += 1;
            for (acc, v) in new_centroids[assign[i]].iter_mut().zip(p.iter()) {
                *acc += v;
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                log::warn!("k-means cluster {j} empty; duplicating nearest sample");
                let nearest = flat
                    .iter()
                    .min_by(|a, b| {
                        dist2(a, &centroids[j])
                            .partial_cmp(&dist2(b, &centroids[j]))
                            .unwrap()
                    })
                    .unwrap();
                new_centroids[j] = nearest.clone();
            } else {
                for v in new_centroids[j].iter_mut() {
                    *v /= counts[j] as f64;
                }
            }
            shift = shift.max(dist2(&new_centroids[j], &centroids[j]).sqrt());
        }
        centroids = new_centroids;
        if shift < 1e-6 {
            break;
        }
    }

    let mut out = Array3::zeros((k, t_f, 2));
    for (j, q) in centroids.iter().enumerate() {
        for ti in 0..t_f {
            out[[j, ti, 0]] = q[2 * ti];
            out[[j, ti, 1]] = q[2 * ti + 1];
        }
    }
    out
}

/// Within-cluster sum of squares of flattened trajectories against a
/// centroid set; the K-means objective.
pub fn kmeans_objective(samples: &Array3<f64>, centroids: &Array3<f64>) -> f64 {
    let (c, t_f, _) = samples.dim();
    let k = centroids.dim().0;
    let mut total = 0.0;
    for i in 0..c {
        let mut best = f64::INFINITY;
        for j in 0..k {
            let mut d = 0.0;
            for ti in 0..t_f {
                let dx = samples[[i, ti, 0]] - centroids[[j, ti, 0]];
                let dy = samples[[i, ti, 1]] - centroids[[j, ti, 1]];
                d += dx * dx + dy * dy;
            }
            best = best.min(d);
        }
        total += best;
    }
    total
}

/// Flatten `[C, t_f, 2]` world trajectories into a `[C, 2 t_f]` array.
pub fn flatten_trajectories(samples: &Array3<f64>) -> Array2<f64> {
    let (c, t_f, _) = samples.dim();
    let mut out = Array2::zeros((c, 2 * t_f));
    for i in 0..c {
        for ti in 0..t_f {
            out[[i, ti * 2]] = samples[[i, ti, 0]];
            out[[i, ti * 2 + 1]] = samples[[i, ti, 1]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_net(store: &mut ParamStore, rng: &mut ChaCha8Rng, k: usize) -> RefinementNet {
        RefinementNet::new(store, "ref", 4, 8, 16, 4, 2, k, 0.1, rng)
    }

    #[test]
    fn refine_output_arity_is_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, &mut rng, 5);
        let mut t = Tape::new();
        let samples = t.constant(ArrayD::from_shape_fn(IxDyn(&[37, 8]), |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let m0 = t.constant(ArrayD::zeros(IxDyn(&[1, 8])));
        let out = net.refine(&mut t, &store, false, samples, m0, None);
        assert_eq!(t.value(out).shape(), &[5, 8]);
    }

    #[test]
    fn refine_permutation_invariant_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, &mut rng, 3);
        let base = ArrayD::from_shape_fn(IxDyn(&[10, 8]), |_| rng.gen_range(-1.0..1.0));
        let m0v = ArrayD::from_shape_fn(IxDyn(&[1, 8]), |_| rng.gen_range(-1.0..1.0));
        let run = |arr: &ArrayD<f64>| {
            let mut t = Tape::new();
            let s = t.constant(arr.clone());
            let m0 = t.constant(m0v.clone());
            let out = net.refine(&mut t, &store, false, s, m0, None);
            t.value(out).clone()
        };
        let a = run(&base);
        // reverse the sample order
        let mut perm = base.clone();
        let n = base.shape()[0];
        for i in 0..n {
            for j in 0..8 {
                perm[[i, j]] = base[[n - 1 - i, j]];
            }
        }
        let b = run(&perm);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn refine_deterministic_in_eval_nondeterministic_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = toy_net(&mut store, &mut rng, 3);
        let arr = ArrayD::from_shape_fn(IxDyn(&[6, 8]), |_| rng.gen_range(-1.0..1.0));
        let m0v = ArrayD::zeros(IxDyn(&[1, 8]));
        let eval_run = || {
            let mut t = Tape::new();
            let s = t.constant(arr.clone());
            let m0 = t.constant(m0v.clone());
            let out = net.refine(&mut t, &store, false, s, m0, None);
            t.value(out).clone()
        };
        assert_eq!(eval_run(), eval_run());
        let mut rng_a = ChaCha8Rng::seed_from_u64(100);
        let mut rng_b = ChaCha8Rng::seed_from_u64(101);
        let train_run = |r: &mut ChaCha8Rng| {
            let mut t = Tape::new();
            let s = t.constant(arr.clone());
            let m0 = t.constant(m0v.clone());
            let out = net.refine(&mut t, &store, true, s, m0, Some(r));
            t.value(out).clone()
        };
        assert_ne!(train_run(&mut rng_a), train_run(&mut rng_b));
    }

    #[test]
    fn refine_at_reference_scale_distills_200_to_20() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut store = ParamStore::new();
        let net = RefinementNet::new(&mut store, "ref", 12, 64, 64, 8, 3, 20, 0.1, &mut rng);
        let mut t = Tape::new();
        let samples = t.constant(ArrayD::from_shape_fn(IxDyn(&[200, 24]), |_| {
            rng.gen_range(-6.0..6.0)
        }));
        let m0 = t.constant(ArrayD::zeros(IxDyn(&[1, 64])));
        let out = net.refine(&mut t, &store, false, samples, m0, None);
        assert_eq!(t.value(out).shape(), &[20, 24]);
    }

    #[test]
    fn kmeans_one_point_per_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut samples = Array3::zeros((3, 2, 2));
        for i in 0..3 {
            for t in 0..2 {
                samples[[i, t, 0]] = i as f64 * 10.0;
                samples[[i, t, 1]] = -(i as f64);
            }
        }
        let cents = kmeans_refine(&samples, 3, &mut rng);
        // each sample is its own centroid, in some order
        let mut found = [false; 3];
        for j in 0..3 {
            for i in 0..3 {
                if (cents[[j, 0, 0]] - samples[[i, 0, 0]]).abs() < 1e-12
                    && (cents[[j, 1, 1]] - samples[[i, 1, 1]]).abs() < 1e-12
                {
                    found[i] = true;
                }
            }
        }
        assert!(found.iter().all(|&f| f));
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Array3::zeros((40, 2, 2));
        for i in 0..40 {
            let blob = if i < 20 { 0.0 } else { 100.0 };
            for t in 0..2 {
                samples[[i, t, 0]] = blob + rng.gen_range(-0.5..0.5);
                samples[[i, t, 1]] = blob + rng.gen_range(-0.5..0.5);
            }
        }
        let cents = kmeans_refine(&samples, 2, &mut rng);
        let mut blob_means = [[0.0f64; 2]; 2];
        for (b, mean) in blob_means.iter_mut().enumerate() {
            let range = if b == 0 { 0..20 } else { 20..40 };
            let mut acc = [0.0f64; 2];
            let mut n = 0.0;
            for i in range {
                acc[0] += samples[[i, 0, 0]];
                acc[1] += samples[[i, 0, 1]];
                n += 1.0;
            }
            *mean = [acc[0] / n, acc[1] / n];
        }
        // each centroid matches one blob mean
        for j in 0..2 {
            let c = [cents[[j, 0, 0]], cents[[j, 0, 1]]];
            let ok = blob_means
                .iter()
                .any(|m| (c[0] - m[0]).abs() < 1e-9 && (c[1] - m[1]).abs() < 1e-9);
            assert!(ok, "centroid {c:?} vs {blob_means:?}");
        }
    }

    #[test]
    fn kmeans_degenerate_identical_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = Array3::from_elem((10, 3, 2), 4.2);
        let cents = kmeans_refine(&samples, 4, &mut rng);
        assert_eq!(cents.dim(), (4, 3, 2));
        assert!(cents.iter().all(|&v| (v - 4.2).abs() < 1e-12));
    }

    #[test]
    fn kmeans_objective_nonincreasing_over_iterations() {
        // run Lloyd manually step by step and watch the objective
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = Array3::from_shape_fn((30, 4, 2), |_| rng.gen_range(-5.0..5.0));
        // use the library to full convergence, then verify its objective is
        // no worse than a single-iteration run with the same seed
        let mut rng_a = ChaCha8Rng::seed_from_u64(8);
        let full = kmeans_refine(&samples, 4, &mut rng_a);
        let obj_full = kmeans_objective(&samples, &full);
        // initial centroids: k-means++ picks actual samples; one Lloyd pass
        // can only improve the objective from there
        let mut rng_b = ChaCha8Rng::seed_from_u64(8);
        let first4: Vec<usize> = (0..4).map(|_| rng_b.gen_range(0..30)).collect();
        let mut init = Array3::zeros((4, 4, 2));
        for (j, &i) in first4.iter().enumerate() {
            for t in 0..4 {
                init[[j, t, 0]] = samples[[i, t, 0]];
                init[[j, t, 1]] = samples[[i, t, 1]];
            }
        }
        let obj_init = kmeans_objective(&samples, &init);
        assert!(obj_full <= obj_init + 1e-9);
    }
}
