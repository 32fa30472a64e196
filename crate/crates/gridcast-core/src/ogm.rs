//! Temporal occupancy grid maps.
//!
//! The main head advances an occupancy distribution one step at a time with a
//! pixel-adaptive normalized deconvolution: each cell scatters its mass over
//! a `k x k` neighborhood through per-cell softmaxed kernels, so mass moves
//! only locally and conserves exactly away from the border. Mass lost off the
//! border is removed and the map renormalized to keep the sum-to-one
//! invariant. Two ablation heads share the interface: a direct per-step
//! softmax map and a single static map reused for every step.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::{Conv2dLayer, ConvLstmCell, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};

/// Epsilon inside `log` of interpolated occupancy probabilities.
pub const OGM_LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OgmVariant {
    /// Normalized-deconvolution transition head.
    Deconv,
    /// Direct per-step softmax map from the recurrent hidden state.
    ConvLstmDirect,
    /// One static softmax map reused for every future step.
    CnnStatic,
}

impl std::str::FromStr for OgmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deconv" => Ok(OgmVariant::Deconv),
            "convlstm_direct" => Ok(OgmVariant::ConvLstmDirect),
            "cnn_static" => Ok(OgmVariant::CnnStatic),
            other => Err(Error::config(format!("unknown OGM variant '{other}'"))),
        }
    }
}

impl OgmVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            OgmVariant::Deconv => "deconv",
            OgmVariant::ConvLstmDirect => "convlstm_direct",
            OgmVariant::CnnStatic => "cnn_static",
        }
    }
}

/// Occupancy decoder: a two-layer convolutional LSTM over scene features,
/// hidden maps initialized from the motion feature map, plus the
/// variant-specific output head and the learned initial occupancy logits.
pub struct OgmDecoder {
    pub variant: OgmVariant,
    pub h0_embed1: Conv2dLayer,
    pub h0_embed2: Conv2dLayer,
    pub lstm1: ConvLstmCell,
    pub lstm2: ConvLstmCell,
    pub kernel_head: Option<Conv2dLayer>,
    pub direct_head: Option<Conv2dLayer>,
    pub static_conv1: Option<Conv2dLayer>,
    pub static_conv2: Option<Conv2dLayer>,
    pub o0_logits: ParamId,
    pub hidden: usize,
    pub deconv_k: usize,
}

/// One scenario's occupancy rollout.
pub struct OgmRollout {
    /// `O_1..O_{t_f}`, each `[H,W]`, each summing to one.
    pub maps: Vec<Var>,
    /// Recurrent hidden maps `H_1..H_{t_f}` kept for the trajectory decoder.
    pub hidden: Vec<Var>,
    /// Learned initial occupancy `O_0`.
    pub o0: Var,
}

impl OgmDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        variant: OgmVariant,
        scene_ch: usize,
        motion_ch: usize,
        hidden: usize,
        deconv_k: usize,
        grid_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h0_embed1 =
            Conv2dLayer::new(store, &format!("{name}.h0a"), motion_ch, hidden, 1, 1, 0, rng);
        let h0_embed2 =
            Conv2dLayer::new(store, &format!("{name}.h0b"), motion_ch, hidden, 1, 1, 0, rng);
        let lstm1 = ConvLstmCell::new(store, &format!("{name}.lstm1"), scene_ch, hidden, 3, rng);
        let lstm2 = ConvLstmCell::new(store, &format!("{name}.lstm2"), hidden, hidden, 3, rng);
        let (mut kernel_head, mut direct_head, mut static_conv1, mut static_conv2) =
            (None, None, None, None);
        match variant {
            OgmVariant::Deconv => {
                kernel_head = Some(Conv2dLayer::new(
                    store,
                    &format!("{name}.kernels"),
                    hidden,
                    deconv_k * deconv_k,
                    1,
                    1,
                    0,
                    rng,
                ));
            }
            OgmVariant::ConvLstmDirect => {
                direct_head = Some(Conv2dLayer::new(
                    store,
                    &format!("{name}.direct"),
                    hidden,
                    1,
                    1,
                    1,
                    0,
                    rng,
                ));
            }
            OgmVariant::CnnStatic => {
                static_conv1 = Some(Conv2dLayer::new(
                    store,
                    &format!("{name}.static1"),
                    scene_ch + hidden,
                    hidden,
                    3,
                    1,
                    1,
                    rng,
                ));
                static_conv2 = Some(Conv2dLayer::new(
                    store,
                    &format!("{name}.static2"),
                    hidden,
                    1,
                    1,
                    1,
                    0,
                    rng,
                ));
            }
        }
        // initial occupancy: a one-cell-std Gaussian blob at the agent cell
        let c = (grid_size as f64 - 1.0) / 2.0;
        let o0 = ArrayD::from_shape_fn(IxDyn(&[grid_size, grid_size]), |ix| {
            let dy = ix[0] as f64 - c;
            let dx = ix[1] as f64 - c;
            -0.5 * (dx * dx + dy * dy)
        });
        let o0_logits = store.add(&format!("{name}.o0_logits"), o0);
        Self {
            variant,
            h0_embed1,
            h0_embed2,
            lstm1,
            lstm2,
            kernel_head,
            direct_head,
            static_conv1,
            static_conv2,
            o0_logits,
            hidden,
            deconv_k,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.h0_embed1.ids();
        v.extend(self.h0_embed2.ids());
        v.extend(self.lstm1.ids());
        v.extend(self.lstm2.ids());
        for head in [
            &self.kernel_head,
            &self.direct_head,
            &self.static_conv1,
            &self.static_conv2,
        ]
        .into_iter()
        .flatten()
        {
            v.extend(head.ids());
        }
        v.push(self.o0_logits);
        v
    }

    /// Softmax over all cells of a `[1,H,W]` or `[H,W]` logit map.
    fn softmax_cells(t: &mut Tape, logits: Var, h: usize, w: usize) -> Var {
        let flat = t.reshape(logits, &[h * w]);
        let sm = t.softmax_last(flat);
        t.reshape(sm, &[h, w])
    }

    /// Roll occupancy maps forward for `t_f` steps.
    pub fn predict(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        scene_f: Var,
        motion_map: Var,
        t_f: usize,
    ) -> Result<OgmRollout> {
        if t_f == 0 {
            return Err(Error::config("t_f must be positive"));
        }
        let shape = t.value(scene_f).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let o0_param = t.param(self.o0_logits, store.value(self.o0_logits), trainable);
        let o0 = Self::softmax_cells(t, o0_param, h, w);

        let mut h1 = self.h0_embed1.apply(t, store, trainable, motion_map);
        let mut c1 = t.constant(ArrayD::zeros(IxDyn(&[self.hidden, h, w])));
        let mut h2 = self.h0_embed2.apply(t, store, trainable, motion_map);
        let mut c2 = t.constant(ArrayD::zeros(IxDyn(&[self.hidden, h, w])));
        let x_gates1 = self.lstm1.input_gates(t, store, trainable, scene_f);

        // static variant: one map from scene + embedded motion features
        let static_map = if self.variant == OgmVariant::CnnStatic {
            let cat = t.concat(&[scene_f, h1], 0);
            let m1 = self.static_conv1.as_ref().unwrap().apply(t, store, trainable, cat);
            let m1 = t.relu(m1);
            let logits = self.static_conv2.as_ref().unwrap().apply(t, store, trainable, m1);
            Some(Self::softmax_cells(t, logits, h, w))
        } else {
            None
        };

        let mut maps = Vec::with_capacity(t_f);
        let mut hidden = Vec::with_capacity(t_f);
        let mut o_prev = o0;
        for _ in 0..t_f {
            let (h1n, c1n) = self.lstm1.step(t, store, trainable, x_gates1, h1, c1);
            h1 = h1n;
            c1 = c1n;
            let x_gates2 = self.lstm2.input_gates(t, store, trainable, h1);
            let (h2n, c2n) = self.lstm2.step(t, store, trainable, x_gates2, h2, c2);
            h2 = h2n;
            c2 = c2n;
            hidden.push(h2);
            let o_t = match self.variant {
                OgmVariant::Deconv => {
                    let logits = self.kernel_head.as_ref().unwrap().apply(t, store, trainable, h2);
                    let weights = t.softmax_axis0(logits);
                    let scattered = t.deconv_scatter(o_prev, weights, self.deconv_k);
                    let z = t.sum_all(scattered);
                    t.div_by_scalar(scattered, z)
                }
                OgmVariant::ConvLstmDirect => {
                    let logits = self.direct_head.as_ref().unwrap().apply(t, store, trainable, h2);
                    Self::softmax_cells(t, logits, h, w)
                }
                OgmVariant::CnnStatic => static_map.unwrap(),
            };
            maps.push(o_t);
            o_prev = o_t;
        }
        Ok(OgmRollout { maps, hidden, o0 })
    }
}

/// Affine world-to-grid transform on a tape var `p [2]`.
pub fn world_to_grid_var(t: &mut Tape, p: Var, spec: &GridSpec) -> Var {
    let origin = t.constant(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![spec.origin[0], spec.origin[1]]).unwrap(),
    );
    let d = t.sub(p, origin);
    let s = t.scale(d, 1.0 / spec.cell_size());
    t.add_scalar(s, spec.center())
}

/// Occupancy negative log-likelihood of a trajectory:
/// `-sum_t log(bilinear(O_t, world_to_grid(Y_t)) + eps)`. Queries may be
/// constants (observed futures) or graph vars (sampled positions).
pub fn ogm_nll_vars(t: &mut Tape, maps: &[Var], queries_grid: &[Var]) -> Var {
    assert_eq!(maps.len(), queries_grid.len(), "ogm/query length mismatch");
    let mut terms = Vec::with_capacity(maps.len());
    for (o_t, q) in maps.iter().zip(queries_grid) {
        let shape = t.value(*o_t).shape().to_vec();
        let o3 = t.reshape(*o_t, &[1, shape[0], shape[1]]);
        let p = t.bilinear_gather(o3, *q);
        let p = t.add_scalar(p, OGM_LOG_EPS);
        let lp = t.ln(p);
        terms.push(lp);
    }
    let s = t.add_n(&terms);
    let s = t.sum_all(s);
    t.neg(s)
}

/// Plain-array occupancy NLL of a world trajectory against fixed maps.
pub fn ogm_nll(maps: &[Array2<f64>], future: &[[f64; 2]], spec: &GridSpec) -> f64 {
    let mut t = Tape::new();
    let map_vars: Vec<Var> = maps.iter().map(|m| t.constant(m.clone().into_dyn())).collect();
    let queries: Vec<Var> = future
        .iter()
        .map(|p| {
            let g = spec.world_to_grid(*p);
            t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![g[0], g[1]]).unwrap())
        })
        .collect();
    let nll = ogm_nll_vars(&mut t, &map_vars, &queries);
    t.value(nll)[[0]]
}

/// One normalized-deconvolution transition on plain arrays. Errors when the
/// input map is not normalized within tolerance.
pub fn normalized_deconv_step(
    o_prev: &Array2<f64>,
    kernel_logits: &Array3<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    let sum: f64 = o_prev.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!(
            "occupancy map sums to {sum}, expected 1"
        )));
    }
    let (h, w) = o_prev.dim();
    if kernel_logits.dim() != (k * k, h, w) {
        return Err(Error::config("kernel logits shape mismatch"));
    }
    let mut t = Tape::new();
    let o = t.constant(o_prev.clone().into_dyn());
    let logits = t.constant(kernel_logits.clone().into_dyn());
    let weights = t.softmax_axis0(logits);
    let scattered = t.deconv_scatter(o, weights, k);
    let z = t.sum_all(scattered);
    let out = t.div_by_scalar(scattered, z);
    let v = t.value(out);
    Ok(v
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

// ---------------------------------------------------------------------------
// Dump format
// ---------------------------------------------------------------------------

/// Write a per-scenario OGM dump: a small header followed by `t_f` row-major
/// real grids.
pub fn write_ogm_dump<W: Write>(
    mut out: W,
    spec: &GridSpec,
    maps: &[Array2<f64>],
) -> std::io::Result<()> {
    writeln!(
        out,
        "ogm {} {} {}",
        spec.grid_size,
        maps.len(),
        crate::data::format_sig9(spec.crop_extent)
    )?;
    for m in maps {
        for y in 0..spec.grid_size {
            let row: Vec<String> = (0..spec.grid_size)
                .map(|x| crate::data::format_sig9(m[[y, x]]))
                .collect();
            writeln!(out, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

/// Read a dump produced by [`write_ogm_dump`].
pub fn read_ogm_dump<R: BufRead>(mut input: R) -> Result<(usize, f64, Vec<Array2<f64>>)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "ogm" {
        return Err(Error::data("bad OGM dump header"));
    }
    let grid_size: usize = parts[1].parse().map_err(|_| Error::data("bad grid_size"))?;
    let t_f: usize = parts[2].parse().map_err(|_| Error::data("bad t_f"))?;
    let crop_extent: f64 = parts[3].parse().map_err(|_| Error::data("bad crop_extent"))?;
    let mut maps = Vec::with_capacity(t_f);
    for _ in 0..t_f {
        let mut m = Array2::zeros((grid_size, grid_size));
        for y in 0..grid_size {
            let mut line = String::new();
            input.read_line(&mut line)?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::data("bad OGM value")))
                .collect::<Result<_>>()?;
            if vals.len() != grid_size {
                return Err(Error::data("short OGM row"));
            }
            for (x, v) in vals.into_iter().enumerate() {
                m[[y, x]] = v;
            }
        }
        maps.push(m);
    }
    Ok((grid_size, crop_extent, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{central_difference, max_rel_err, Arr};
    use rand::{Rng, SeedableRng};

    #[test]
    fn delta_with_uniform_kernels_spreads_uniformly() {
        let mut o = Array2::zeros((7, 7));
        o[[3, 3]] = 1.0;
        let logits = Array3::zeros((25, 7, 7));
        let out = normalized_deconv_step(&o, &logits, 5).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let inside = (1..=5).contains(&y) && (1..=5).contains(&x);
                let expect = if inside { 1.0 / 25.0 } else { 0.0 };
                assert!((out[[y, x]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_tap_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut o = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..1.0));
        let z = o.sum();
        o.mapv_inplace(|v| v / z);
        let mut logits = Array3::zeros((25, 6, 6));
        for y in 0..6 {
            for x in 0..6 {
                logits[[12, y, x]] = 1000.0;
            }
        }
        let out = normalized_deconv_step(&o, &logits, 5).unwrap();
        for (a, b) in out.iter().zip(o.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_step_output_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut o = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let z = o.sum();
        o.mapv_inplace(|v| v / z);
        let logits = Array3::from_shape_fn((25, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let out = normalized_deconv_step(&o, &logits, 5).unwrap();
        assert!((out.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let o = Array2::from_elem((5, 5), 1.0);
        let logits = Array3::zeros((25, 5, 5));
        assert!(normalized_deconv_step(&o, &logits, 5).is_err());
    }

    #[test]
    fn interior_support_conserves_mass_exactly() {
        // support >= 2 cells from every border: scatter loses nothing, so the
        // renormalization factor is 1 within rounding
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut o = Array2::zeros((9, 9));
        for y in 2..7 {
            for x in 2..7 {
                o[[y, x]] = rng.gen_range(0.1..1.0);
            }
        }
        let z = o.sum();
        o.mapv_inplace(|v| v / z);
        let logits = Array3::from_shape_fn((25, 9, 9), |_| rng.gen_range(-1.0..1.0));
        let mut t = Tape::new();
        let ov = t.constant(o.clone().into_dyn());
        let lv = t.constant(logits.into_dyn());
        let w = t.softmax_axis0(lv);
        let scattered = t.deconv_scatter(ov, w, 5);
        let total = t.value(scattered).sum();
        assert!((total - 1.0).abs() < 1e-9, "scale factor {total}");
    }

    #[test]
    fn locality_support_grows_at_most_two_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut o = Array2::zeros((11, 11));
        o[[5, 5]] = 1.0;
        for step in 1..=2 {
            let logits = Array3::from_shape_fn((25, 11, 11), |_| rng.gen_range(-2.0..2.0));
            o = normalized_deconv_step(&o, &logits, 5).unwrap();
            for y in 0..11 {
                for x in 0..11 {
                    let cheb = (y as i64 - 5).abs().max((x as i64 - 5).abs());
                    if cheb > 2 * step {
                        assert_eq!(o[[y, x]], 0.0, "mass escaped locality at step {step}");
                    }
                }
            }
        }
    }

    fn toy_inputs(rng: &mut ChaCha8Rng, g: usize) -> (Arr, Arr) {
        let scene = ArrayD::from_shape_fn(IxDyn(&[2, g, g]), |_| rng.gen_range(-0.5..0.5));
        let motion = ArrayD::from_shape_fn(IxDyn(&[3, g, g]), |_| rng.gen_range(-0.5..0.5));
        (scene, motion)
    }

    fn toy_decoder(
        store: &mut ParamStore,
        variant: OgmVariant,
        g: usize,
        rng: &mut ChaCha8Rng,
    ) -> OgmDecoder {
        OgmDecoder::new(store, "ogm", variant, 2, 3, 4, 5, g, rng)
    }

    #[test]
    fn predict_maps_normalized_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dec = toy_decoder(&mut store, OgmVariant::Deconv, 7, &mut rng);
        let (scene, motion) = toy_inputs(&mut rng, 7);
        let run = || {
            let mut t = Tape::new();
            let f = t.constant(scene.clone());
            let m = t.constant(motion.clone());
            let out = dec.predict(&mut t, &store, false, f, m, 4).unwrap();
            out.maps
                .iter()
                .map(|v| t.value(*v).clone())
                .collect::<Vec<_>>()
        };
        let maps = run();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            let s: f64 = m.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(m.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(maps, run(), "rollout must be deterministic");
    }

    #[test]
    fn predict_rejects_zero_tf() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let dec = toy_decoder(&mut store, OgmVariant::Deconv, 7, &mut rng);
        let (scene, motion) = toy_inputs(&mut rng, 7);
        let mut t = Tape::new();
        let f = t.constant(scene);
        let m = t.constant(motion);
        assert!(dec.predict(&mut t, &store, false, f, m, 0).is_err());
    }

    #[test]
    fn direct_variant_normalized_and_static_variant_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let dec = toy_decoder(&mut store, OgmVariant::ConvLstmDirect, 7, &mut rng);
        let (scene, motion) = toy_inputs(&mut rng, 7);
        let mut t = Tape::new();
        let f = t.constant(scene.clone());
        let m = t.constant(motion.clone());
        let out = dec.predict(&mut t, &store, false, f, m, 3).unwrap();
        for v in &out.maps {
            let s: f64 = t.value(*v).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }

        let mut store2 = ParamStore::new();
        let dec2 = toy_decoder(&mut store2, OgmVariant::CnnStatic, 7, &mut rng);
        let mut t2 = Tape::new();
        let f2 = t2.constant(scene);
        let m2 = t2.constant(motion);
        let out2 = dec2.predict(&mut t2, &store2, false, f2, m2, 3).unwrap();
        let first = t2.value(out2.maps[0]).clone();
        for v in &out2.maps[1..] {
            assert_eq!(t2.value(*v), &first);
        }
    }

    #[test]
    fn unknown_variant_name_is_config_error() {
        assert!("graph_attention".parse::<OgmVariant>().is_err());
        assert!("deconv".parse::<OgmVariant>().is_ok());
    }

    #[test]
    fn nll_uniform_maps() {
        let spec = GridSpec::new(25, 200.0, [0.0, 0.0]).unwrap();
        let maps = vec![Array2::from_elem((25, 25), 1.0 / 625.0); 12];
        let future: Vec<[f64; 2]> = (0..12).map(|i| [i as f64, 3.0]).collect();
        let nll = ogm_nll(&maps, &future, &spec);
        let expect = 12.0 * 625.0f64.ln();
        assert!((nll - expect).abs() < 1e-6, "{nll} vs {expect}");
    }

    #[test]
    fn nll_delta_at_observed_cell_is_zero() {
        let spec = GridSpec::new(25, 200.0, [0.0, 0.0]).unwrap();
        let mut m = Array2::zeros((25, 25));
        m[[12, 14]] = 1.0; // cell (x=14, y=12)
        let p = spec.grid_to_world([14.0, 12.0]);
        let nll = ogm_nll(&[m], &[p], &spec);
        assert!(nll.abs() < 1e-9);
    }

    #[test]
    fn nll_bilinear_mean_on_2x2() {
        let spec = GridSpec::new(2, 2.0, [0.0, 0.0]).unwrap();
        let mut m = Array2::zeros((2, 2));
        m[[0, 0]] = 0.1;
        m[[0, 1]] = 0.2;
        m[[1, 0]] = 0.3;
        m[[1, 1]] = 0.4;
        // midpoint of the 4 cells in world coordinates
        let p = spec.grid_to_world([0.5, 0.5]);
        let nll = ogm_nll(&[m], &[p], &spec);
        assert!((nll - -(0.25f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn nll_gradients_match_fd() {
        // gradient w.r.t. kernel logits and initial-occupancy logits
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = 7;
        let mut store = ParamStore::new();
        let dec = toy_decoder(&mut store, OgmVariant::Deconv, g, &mut rng);
        let (scene, motion) = toy_inputs(&mut rng, g);
        let spec = GridSpec::new(g, g as f64, [0.0, 0.0]).unwrap();
        let future: Vec<[f64; 2]> = vec![[0.3, -0.4], [0.9, 0.1], [1.2, 0.8]];
        let loss = |s: &ParamStore, id: ParamId| -> (f64, Option<Arr>) {
            let mut t = Tape::new();
            let f = t.constant(scene.clone());
            let m = t.constant(motion.clone());
            let out = dec.predict(&mut t, s, true, f, m, 3).unwrap();
            let queries: Vec<Var> = future
                .iter()
                .map(|p| {
                    let gq = spec.world_to_grid(*p);
                    t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![gq[0], gq[1]]).unwrap())
                })
                .collect();
            let nll = ogm_nll_vars(&mut t, &out.maps, &queries);
            let grads = t.backward(nll);
            let gv = t.param_var(id).and_then(|v| grads.get(v).cloned());
            (t.value(nll)[[0]], gv)
        };
        for id in [dec.kernel_head.as_ref().unwrap().w, dec.o0_logits] {
            let (_, analytic) = loss(&store, id);
            let base = (**store.value(id)).clone();
            let names = store.name(id).to_string();
            let numeric = central_difference(
                |p| {
                    let mut s2 = ParamStore::new();
                    // rebuild an identical store with one param replaced
                    for pid in store.ids() {
                        let v = if pid == id {
                            p.clone()
                        } else {
                            (**store.value(pid)).clone()
                        };
                        s2.add(store.name(pid), v);
                    }
                    loss(&s2, id).0
                },
                &base,
                1e-5,
            );
            let err = max_rel_err(&analytic.unwrap(), &numeric);
            assert!(err < 1e-4, "{names}: rel err {err}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let spec = GridSpec::new(5, 40.0, [0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<Array2<f64>> = (0..3)
            .map(|_| {
                let mut m = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0..1.0));
                let z = m.sum();
                m.mapv_inplace(|v| v / z);
                m
            })
            .collect();
        let mut buf = Vec::new();
        write_ogm_dump(&mut buf, &spec, &maps).unwrap();
        let (g, extent, read) = read_ogm_dump(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(g, 5);
        assert_eq!(extent, 40.0);
        assert_eq!(read.len(), 3);
        for (a, b) in read.iter().zip(maps.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn delta_o0_support_confined_by_kernel_reach() {
        // O_0 is a delta after sharpening its logits; support after t steps
        // stays within Chebyshev radius 2t
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = 11;
        let mut store = ParamStore::new();
        let dec = toy_decoder(&mut store, OgmVariant::Deconv, g, &mut rng);
        let mut sharp = ArrayD::from_elem(IxDyn(&[g, g]), -1e9);
        sharp[[5, 5]] = 0.0;
        store.set_value(dec.o0_logits, sharp);
        let (scene, motion) = toy_inputs(&mut rng, g);
        let mut t = Tape::new();
        let f = t.constant(scene);
        let m = t.constant(motion);
        let out = dec.predict(&mut t, &store, false, f, m, 2).unwrap();
        for (step, map) in out.maps.iter().enumerate() {
            let v = t.value(*map);
            let radius = 2 * (step + 1);
            for y in 0..g {
                for x in 0..g {
                    let cheb = (y as i64 - 5).abs().max((x as i64 - 5).abs()) as usize;
                    if cheb > radius {
                        assert_eq!(v[[y, x]], 0.0);
                    }
                }
            }
        }
    }
}
