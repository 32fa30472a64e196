//! Plan-conditioned trajectory decoding.
//!
//! A recurrent plan encoder embeds each plan state with its local scene and
//! reward-hidden features; a multi-head attention module aggregates the plan
//! features per output step; a recurrent decoder emits a bivariate Gaussian
//! over the next position, conditioned on the previous position's local
//! features. Teacher-forced rollouts condition on ground truth (forward
//! cross-entropy); sampled rollouts draw reparameterized positions and keep
//! gradients (reverse cross-entropy).

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::{GruCell, Linear, MultiHeadAttention, ParamStore};
use crate::ogm::world_to_grid_var;
use crate::tape::{ParamId, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Clamp bounds for the Gaussian standard deviations.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;
/// Correlation is squashed to `0.99 * tanh(raw)`.
pub const RHO_SCALE: f64 = 0.99;

/// One decoded step's Gaussian parameters as tape vars.
pub struct GaussianStepVars {
    /// Absolute mean position `[2]` (offset plus previous position).
    pub mean: Var,
    /// Standard deviations `[2]`, clamped positive.
    pub sigma: Var,
    /// Correlation `[1]` in `(-0.99, 0.99)`.
    pub rho: Var,
}

/// Plain Gaussian step for eval-side consumers.
#[derive(Clone, Copy, Debug)]
pub struct GaussianStep {
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

/// Recurrent encoder over plan states: input is the state's coordinates plus
/// bilinear lookups of the scene features and the reward head's hidden maps.
pub struct PlanEncoder {
    pub embed: Linear,
    pub gru: GruCell,
    pub hidden: usize,
}

impl PlanEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scene_ch: usize,
        reward_hidden_ch: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_dim = 2 + scene_ch + reward_hidden_ch;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), in_dim, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng),
            hidden,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.embed.ids();
        v.extend(self.gru.ids());
        v
    }

    /// Encode plan states (continuous grid coordinates, `[2]` vars) into
    /// per-step features `[N, hidden]`. `reward_hidden` must align with the
    /// states: one hidden map per plan step.
    pub fn encode(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        states: &[Var],
        scene_f: Var,
        reward_hidden: &[Var],
        spec: &GridSpec,
    ) -> Result<Var> {
        if states.len() != reward_hidden.len() {
            return Err(Error::config(format!(
                "plan has {} states but {} reward hidden maps",
                states.len(),
                reward_hidden.len()
            )));
        }
        let mut h = t.constant(ArrayD::zeros(IxDyn(&[1, self.hidden])));
        let center = spec.center();
        let mut feats = Vec::with_capacity(states.len());
        for (s, hn) in states.iter().zip(reward_hidden) {
            let f_local = t.bilinear_gather(scene_f, *s);
            let h_local = t.bilinear_gather(*hn, *s);
            // feed centered grid coordinates so inputs stay near zero
            let s_centered = t.add_scalar(*s, -center);
            let x = t.concat(&[s_centered, f_local, h_local], 0);
            let n = t.value(x).len();
            let x = t.reshape(x, &[1, n]);
            let e = self.embed.apply(t, store, trainable, x);
            h = self.gru.step(t, store, trainable, e, h);
            feats.push(h);
        }
        Ok(t.concat(&feats, 0))
    }
}

/// Recurrent Gaussian decoder with multi-head attention over plan features.
pub struct TrajectoryDecoder {
    pub h0_embed: Linear,
    pub attn: MultiHeadAttention,
    pub embed: Linear,
    pub gru: GruCell,
    pub head: Linear,
    pub hidden: usize,
}

impl TrajectoryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scene_ch: usize,
        ogm_hidden_ch: usize,
        hidden: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_dim = hidden + 2 + scene_ch + ogm_hidden_ch;
        Self {
            h0_embed: Linear::new(store, &format!("{name}.h0"), hidden, hidden, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), hidden, heads, rng),
            embed: Linear::new(store, &format!("{name}.embed"), in_dim, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng),
            head: Linear::new(store, &format!("{name}.head"), hidden, 5, rng),
            hidden,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.h0_embed.ids();
        v.extend(self.attn.ids());
        v.extend(self.embed.ids());
        v.extend(self.gru.ids());
        v.extend(self.head.ids());
        v
    }

    /// One decode step. `prev_pos` is the previous world position (`[2]`),
    /// `prev_hidden` the decoder state (`[1, hidden]`). Returns the new state
    /// and the Gaussian over the next position.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        prev_hidden: Var,
        plan_feats: Var,
        prev_pos: Var,
        scene_f: Var,
        ogm_hidden_t: Var,
        spec: &GridSpec,
    ) -> (Var, GaussianStepVars) {
        let context = self.attn.apply(t, store, trainable, prev_hidden, plan_feats);
        let q = world_to_grid_var(t, prev_pos, spec);
        let qc = t.clamp(q, 0.0, (spec.grid_size - 1) as f64);
        let f_local = t.bilinear_gather(scene_f, qc);
        let h_local = t.bilinear_gather(ogm_hidden_t, qc);
        let p_centered = t.add_scalar(qc, -spec.center());
        let ctx_flat = t.reshape(context, &[self.hidden]);
        let x = t.concat(&[ctx_flat, p_centered, f_local, h_local], 0);
        let n = t.value(x).len();
        let x = t.reshape(x, &[1, n]);
        let e = self.embed.apply(t, store, trainable, x);
        let h = self.gru.step(t, store, trainable, e, prev_hidden);
        let raw = self.head.apply(t, store, trainable, h);
        let raw = t.reshape(raw, &[5]);
        let mu = t.slice_axis(raw, 0, 0, 2);
        let log_sigma = t.slice_axis(raw, 0, 2, 2);
        let rho_raw = t.slice_axis(raw, 0, 4, 1);
        let sigma_unclamped = t.exp(log_sigma);
        let sigma = t.clamp(sigma_unclamped, SIGMA_MIN, SIGMA_MAX);
        let rho_t = t.tanh(rho_raw);
        let rho = t.scale(rho_t, RHO_SCALE);
        let mean = t.add(mu, prev_pos);
        (
            h,
            GaussianStepVars { mean, sigma, rho },
        )
    }

    /// Initial decoder state from the motion feature.
    pub fn initial_state(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        m0: Var,
    ) -> Var {
        self.h0_embed.apply(t, store, trainable, m0)
    }
}

/// Negative log-density of `y` under a bivariate Gaussian step.
pub fn gaussian_nll_vars(t: &mut Tape, step: &GaussianStepVars, y: Var) -> Var {
    let d = t.sub(y, step.mean);
    let z = t.div(d, step.sigma); // (dx/sx, dy/sy)
    let zx = t.slice_axis(z, 0, 0, 1);
    let zy = t.slice_axis(z, 0, 1, 1);
    let rho = step.rho;
    let rho2 = t.mul(rho, rho);
    let one_m_r2 = t.neg(rho2);
    let one_m_r2 = t.add_scalar(one_m_r2, 1.0);
    let zx2 = t.mul(zx, zx);
    let zy2 = t.mul(zy, zy);
    let zxy = t.mul(zx, zy);
    let cross = t.mul(rho, zxy);
    let cross2 = t.scale(cross, 2.0);
    let s = t.add(zx2, zy2);
    let s = t.sub(s, cross2);
    let quad = t.div(s, one_m_r2);
    let quad = t.scale(quad, 0.5);
    // log(2 pi sx sy sqrt(1-rho^2))
    let lsx = t.slice_axis(step.sigma, 0, 0, 1);
    let lsy = t.slice_axis(step.sigma, 0, 1, 1);
    let lsx = t.ln(lsx);
    let lsy = t.ln(lsy);
    let lr = t.ln(one_m_r2);
    let lr = t.scale(lr, 0.5);
    let mut norm = t.add(lsx, lsy);
    norm = t.add(norm, lr);
    norm = t.add_scalar(norm, (2.0 * std::f64::consts::PI).ln());
    let out = t.add(norm, quad);
    t.sum_all(out)
}

/// Reparameterized sample `mean + L z` with `L` the Cholesky factor of the
/// covariance and `z` standard normal noise (a tape constant), keeping
/// gradients through the Gaussian parameters.
pub fn sample_position_vars(
    t: &mut Tape,
    step: &GaussianStepVars,
    rng: &mut ChaCha8Rng,
) -> Var {
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    let sx = t.slice_axis(step.sigma, 0, 0, 1);
    let sy = t.slice_axis(step.sigma, 0, 1, 1);
    // L = [[sx, 0], [rho sy, sy sqrt(1-rho^2)]]
    let rho2 = t.mul(step.rho, step.rho);
    let one_m_r2 = t.neg(rho2);
    let one_m_r2 = t.add_scalar(one_m_r2, 1.0);
    let root = t.sqrt(one_m_r2);
    let dx = t.scale(sx, zx);
    let rsy = t.mul(step.rho, sy);
    let term1 = t.scale(rsy, zx);
    let syr = t.mul(sy, root);
    let term2 = t.scale(syr, zy);
    let dy = t.add(term1, term2);
    let delta = t.concat(&[dx, dy], 0);
    t.add(step.mean, delta)
}

/// How a rollout conditions each step's previous position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Condition on the observed previous position (training the forward
    /// cross-entropy term).
    TeacherForced,
    /// Condition on the previously sampled position via the
    /// reparameterization trick (reverse cross-entropy and free sampling).
    Sampled,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" => Ok(RolloutMode::TeacherForced),
            "sampled" => Ok(RolloutMode::Sampled),
            other => Err(Error::config(format!("unknown rollout mode '{other}'"))),
        }
    }
}

/// Output of a decoder rollout.
pub struct Rollout {
    /// Per-step Gaussians.
    pub steps: Vec<GaussianStepVars>,
    /// Per-step conditioning positions (`Y_0 .. Y_{t_f-1}`).
    pub inputs: Vec<Var>,
    /// Sampled positions (`Sampled` mode only), `t_f` of `[2]`.
    pub samples: Vec<Var>,
}

/// Everything a rollout conditions on.
pub struct RolloutContext<'a> {
    pub plan_feats: Var,
    pub m0: Var,
    pub scene_f: Var,
    pub ogm_hidden: &'a [Var],
    pub spec: &'a GridSpec,
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    t: &mut Tape,
    store: &ParamStore,
    trainable: bool,
    dec: &TrajectoryDecoder,
    ctx: &RolloutContext,
    gt_future: &[[f64; 2]],
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let t_f = ctx.ogm_hidden.len();
    if mode == RolloutMode::TeacherForced && gt_future.len() != t_f {
        return Err(Error::config("teacher forcing needs a full future"));
    }
    let mut h = dec.initial_state(t, store, trainable, ctx.m0);
    let origin = ctx.spec.origin;
    let mut prev = t.constant(
        ArrayD::from_shape_vec(IxDyn(&[2]), vec![origin[0], origin[1]]).unwrap(),
    );
    let mut steps = Vec::with_capacity(t_f);
    let mut inputs = Vec::with_capacity(t_f);
    let mut samples = Vec::with_capacity(t_f);
    for ti in 0..t_f {
        inputs.push(prev);
        let (h2, gs) = dec.step(
            t,
            store,
            trainable,
            h,
            ctx.plan_feats,
            prev,
            ctx.scene_f,
            ctx.ogm_hidden[ti],
            ctx.spec,
        );
        h = h2;
        prev = match mode {
            RolloutMode::TeacherForced => {
                let y = gt_future[ti];
                t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![y[0], y[1]]).unwrap())
            }
            RolloutMode::Sampled => {
                let s = sample_position_vars(t, &gs, rng);
                samples.push(s);
                s
            }
        };
        steps.push(gs);
    }
    Ok(Rollout { steps, inputs, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{central_difference, max_rel_err, Arr};
    use rand::SeedableRng;

    fn g_step(t: &mut Tape, mean: [f64; 2], sigma: [f64; 2], rho: f64) -> GaussianStepVars {
        GaussianStepVars {
            mean: t
                .input(ArrayD::from_shape_vec(IxDyn(&[2]), vec![mean[0], mean[1]]).unwrap()),
            sigma: t
                .input(ArrayD::from_shape_vec(IxDyn(&[2]), vec![sigma[0], sigma[1]]).unwrap()),
            rho: t.input(ArrayD::from_shape_vec(IxDyn(&[1]), vec![rho]).unwrap()),
        }
    }

    #[test]
    fn nll_unit_normal_at_mode() {
        let mut t = Tape::new();
        let gs = g_step(&mut t, [0.0, 0.0], [1.0, 1.0], 0.0);
        let y = t.constant(ArrayD::zeros(IxDyn(&[2])));
        let nll = gaussian_nll_vars(&mut t, &gs, y);
        let expect = (2.0 * std::f64::consts::PI).ln();
        assert!((t.value(nll)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_one_unit_off_in_x() {
        let mut t = Tape::new();
        let gs = g_step(&mut t, [0.0, 0.0], [1.0, 1.0], 0.0);
        let y = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 0.0]).unwrap());
        let nll = gaussian_nll_vars(&mut t, &gs, y);
        let expect = (2.0 * std::f64::consts::PI).ln() + 0.5;
        assert!((t.value(nll)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_correlated_at_mode() {
        let mut t = Tape::new();
        let gs = g_step(&mut t, [0.0, 0.0], [1.0, 1.0], 0.5);
        let y = t.constant(ArrayD::zeros(IxDyn(&[2])));
        let nll = gaussian_nll_vars(&mut t, &gs, y);
        let expect = (2.0 * std::f64::consts::PI).ln() + 0.5 * 0.75f64.ln();
        assert!((t.value(nll)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_gradients_match_fd() {
        let base = vec![
            ("mean", vec![0.3, -0.2]),
            ("sigma", vec![1.2, 0.8]),
            ("rho", vec![0.4]),
        ];
        let yv = [0.9, 0.4];
        let eval = |mean: &[f64], sigma: &[f64], rho: &[f64]| -> (f64, Vec<Arr>) {
            let mut t = Tape::new();
            let gs = GaussianStepVars {
                mean: t.input(
                    ArrayD::from_shape_vec(IxDyn(&[2]), mean.to_vec()).unwrap(),
                ),
                sigma: t.input(
                    ArrayD::from_shape_vec(IxDyn(&[2]), sigma.to_vec()).unwrap(),
                ),
                rho: t.input(ArrayD::from_shape_vec(IxDyn(&[1]), rho.to_vec()).unwrap()),
            };
            let y = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), yv.to_vec()).unwrap());
            let nll = gaussian_nll_vars(&mut t, &gs, y);
            let grads = t.backward(nll);
            (
                t.value(nll)[[0]],
                vec![
                    grads.get(gs.mean).unwrap().clone(),
                    grads.get(gs.sigma).unwrap().clone(),
                    grads.get(gs.rho).unwrap().clone(),
                ],
            )
        };
        let (_, analytic) = eval(&base[0].1, &base[1].1, &base[2].1);
        for (i, (_, vals)) in base.iter().enumerate() {
            let arr = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals.clone()).unwrap();
            let numeric = central_difference(
                |p| {
                    let mut args: Vec<Vec<f64>> =
                        base.iter().map(|(_, v)| v.clone()).collect();
                    args[i] = p.as_slice().unwrap().to_vec();
                    eval(&args[0], &args[1], &args[2]).0
                },
                &arr,
                1e-6,
            );
            assert!(max_rel_err(&analytic[i], &numeric) < 1e-6);
        }
    }

    #[test]
    fn sample_statistics_match_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mean = [1.5, -0.7];
        let sigma = [0.9, 1.4];
        let rho = 0.6;
        let n = 100_000;
        let mut sum = [0.0f64; 2];
        let mut cov = [[0.0f64; 2]; 2];
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut t = Tape::new();
            let gs = g_step(&mut t, mean, sigma, rho);
            let s = sample_position_vars(&mut t, &gs, &mut rng);
            let v = t.value(s);
            let p = [v[[0]], v[[1]]];
            sum[0] += p[0];
            sum[1] += p[1];
            pts.push(p);
        }
        let m = [sum[0] / n as f64, sum[1] / n as f64];
        for p in &pts {
            let d = [p[0] - m[0], p[1] - m[1]];
            cov[0][0] += d[0] * d[0];
            cov[0][1] += d[0] * d[1];
            cov[1][1] += d[1] * d[1];
        }
        for r in cov.iter_mut() {
            for v in r.iter_mut() {
                *v /= n as f64;
            }
        }
        // three standard errors
        let se_mean = [sigma[0] / (n as f64).sqrt(), sigma[1] / (n as f64).sqrt()];
        assert!((m[0] - mean[0]).abs() < 3.0 * se_mean[0]);
        assert!((m[1] - mean[1]).abs() < 3.0 * se_mean[1]);
        let target = [
            [sigma[0] * sigma[0], rho * sigma[0] * sigma[1]],
            [0.0, sigma[1] * sigma[1]],
        ];
        // variance of sample (co)variances is O(sigma^4 / n)
        let tol = 3.0 * (2.0f64).sqrt() * sigma[1] * sigma[1] / (n as f64).sqrt();
        assert!((cov[0][0] - target[0][0]).abs() < tol);
        assert!((cov[0][1] - target[0][1]).abs() < tol);
        assert!((cov[1][1] - target[1][1]).abs() < tol);
    }

    #[test]
    fn sigma_parameterization_at_zero_raw() {
        // raw s = 0, raw rho = 0 -> sigma = (1,1), rho = 0
        let mut t = Tape::new();
        let raw = t.constant(ArrayD::zeros(IxDyn(&[5])));
        let log_sigma = t.slice_axis(raw, 0, 2, 2);
        let rho_raw = t.slice_axis(raw, 0, 4, 1);
        let sigma_e = t.exp(log_sigma);
        let sigma = t.clamp(sigma_e, SIGMA_MIN, SIGMA_MAX);
        let rho_t = t.tanh(rho_raw);
        let rho = t.scale(rho_t, RHO_SCALE);
        assert_eq!(t.value(sigma)[[0]], 1.0);
        assert_eq!(t.value(sigma)[[1]], 1.0);
        assert_eq!(t.value(rho)[[0]], 0.0);
    }

    #[test]
    fn vanishing_noise_tracks_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..100 {
            let mut t = Tape::new();
            let gs = g_step(&mut t, [2.0, 3.0], [1e-3, 1e-3], 0.0);
            let s = sample_position_vars(&mut t, &gs, &mut rng);
            let v = t.value(s);
            assert!((v[[0]] - 2.0).abs() < 6e-3);
            assert!((v[[1]] - 3.0).abs() < 6e-3);
        }
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let draw = |seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let gs = g_step(&mut t, [0.0, 0.0], [1.0, 2.0], 0.3);
            let s = sample_position_vars(&mut t, &gs, &mut rng);
            t.value(s).iter().cloned().collect()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn decode_step_emits_five_raw_outputs() {
        use crate::nn::ParamStore;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut store = ParamStore::new();
        let dec = TrajectoryDecoder::new(&mut store, "d", 3, 4, 8, 2, &mut rng);
        assert_eq!(dec.head.out_dim, 5);
        let spec = crate::grid::GridSpec::new(5, 40.0, [0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let h = t.constant(ArrayD::zeros(IxDyn(&[1, 8])));
        let feats = t.constant(ArrayD::zeros(IxDyn(&[3, 8])));
        let pos = t.constant(ArrayD::zeros(IxDyn(&[2])));
        let scene = t.constant(ArrayD::zeros(IxDyn(&[3, 5, 5])));
        let hid = t.constant(ArrayD::zeros(IxDyn(&[4, 5, 5])));
        let (h2, gs) = dec.step(&mut t, &store, false, h, feats, pos, scene, hid, &spec);
        assert_eq!(t.value(h2).shape(), &[1, 8]);
        assert_eq!(t.value(gs.mean).shape(), &[2]);
        assert_eq!(t.value(gs.sigma).shape(), &[2]);
        assert_eq!(t.value(gs.rho).shape(), &[1]);
    }

    #[test]
    fn rollout_mode_parses() {
        assert_eq!(
            "teacher_forced".parse::<RolloutMode>().unwrap(),
            RolloutMode::TeacherForced
        );
        assert_eq!("sampled".parse::<RolloutMode>().unwrap(), RolloutMode::Sampled);
        assert!("beam".parse::<RolloutMode>().is_err());
    }
}
