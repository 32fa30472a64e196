//! Full model assembly: owns the parameter store and wires encoders, policy
//! network, occupancy decoder, trajectory decoder and refinement into
//! per-scenario forward passes for each training stage and for prediction.

use crate::config::RunConfig;
use crate::data;
use crate::decoder::{
    gaussian_nll_vars, rollout, PlanEncoder, Rollout, RolloutContext, RolloutMode,
    TrajectoryDecoder,
};
use crate::encoders::{MotionEncoder, SceneEncoder, ScenarioObservation};
use crate::error::Result;
use crate::mdp::{
    extract_gt_plan, plan_log_likelihood_vars, sample_plan_vars, value_iteration_vars, GridMdp,
    PolicyNetwork, PolicyVars, RewardRollout,
};
use crate::nn::ParamStore;
use crate::objectives::LossReport;
use crate::ogm::{ogm_nll_vars, world_to_grid_var, OgmDecoder, OgmRollout};
use crate::refine::RefinementNet;
use crate::tape::{ParamId, Tape, Var};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Parameter ownership groups, the unit of stage freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Ogm,
    Policy,
    Decoder,
    Refine,
}

/// Which groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Trainability {
    pub encoder: bool,
    pub ogm: bool,
    pub policy: bool,
    pub decoder: bool,
    pub refine: bool,
}

impl Trainability {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            encoder: true,
            ogm: true,
            policy: true,
            decoder: true,
            refine: true,
        }
    }
}

pub struct Model {
    pub store: ParamStore,
    pub cfg: RunConfig,
    pub motion: MotionEncoder,
    pub scene: SceneEncoder,
    pub policy: PolicyNetwork,
    pub ogm: OgmDecoder,
    pub plan_enc: PlanEncoder,
    pub traj_dec: TrajectoryDecoder,
    pub refine: RefinementNet,
}

/// Encoded observation features on a tape.
pub struct EncodedScenario {
    pub scene_f: Var,
    pub m0: Var,
    pub motion_map: Var,
}

/// Policy-network outputs on a tape.
pub struct PolicyForward {
    pub rewards: RewardRollout,
    pub policy: PolicyVars,
}

/// Symmetric cross-entropy loss parts.
pub struct SceLoss {
    pub loss: Var,
    pub forward: Var,
    pub reverse: Var,
    pub report: LossReport,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let variant = cfg.ogm_variant()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let motion_ch = cfg.hidden + 2;
        let motion = MotionEncoder::new(&mut store, "encoder.motion", cfg.hidden, &mut rng);
        let scene = SceneEncoder::new(
            &mut store,
            "encoder.scene",
            cfg.scene_mid,
            cfg.scene_channels,
            &mut rng,
        );
        let policy = PolicyNetwork::new(
            &mut store,
            "policy",
            cfg.scene_channels,
            motion_ch,
            cfg.conv_hidden,
            &mut rng,
        );
        let ogm = OgmDecoder::new(
            &mut store,
            "ogm",
            variant,
            cfg.scene_channels,
            motion_ch,
            cfg.conv_hidden,
            cfg.deconv_k,
            cfg.grid_size,
            &mut rng,
        );
        let plan_enc = PlanEncoder::new(
            &mut store,
            "decoder.plan",
            cfg.scene_channels,
            cfg.conv_hidden,
            cfg.hidden,
            &mut rng,
        );
        let traj_dec = TrajectoryDecoder::new(
            &mut store,
            "decoder.traj",
            cfg.scene_channels,
            cfg.conv_hidden,
            cfg.hidden,
            cfg.heads,
            &mut rng,
        );
        let refine = RefinementNet::new(
            &mut store,
            "refine",
            cfg.t_f,
            cfg.hidden,
            cfg.hidden,
            cfg.refine_heads,
            cfg.refine_layers,
            cfg.k_reps,
            cfg.dropout,
            &mut rng,
        );
        Ok(Self {
            store,
            cfg: cfg.clone(),
            motion,
            scene,
            policy,
            ogm,
            plan_enc,
            traj_dec,
            refine,
        })
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        match group {
            ParamGroup::Encoder => {
                let mut v = self.motion.ids();
                v.extend(self.scene.ids());
                v
            }
            ParamGroup::Ogm => self.ogm.ids(),
            ParamGroup::Policy => self.policy.ids(),
            ParamGroup::Decoder => {
                let mut v = self.plan_enc.ids();
                v.extend(self.traj_dec.ids());
                v
            }
            ParamGroup::Refine => self.refine.ids(),
        }
    }

    /// Parameter ids trainable under the given flags.
    pub fn trainable_ids(&self, t: Trainability) -> HashSet<ParamId> {
        let mut set = HashSet::new();
        let groups = [
            (t.encoder, ParamGroup::Encoder),
            (t.ogm, ParamGroup::Ogm),
            (t.policy, ParamGroup::Policy),
            (t.decoder, ParamGroup::Decoder),
            (t.refine, ParamGroup::Refine),
        ];
        for (on, g) in groups {
            if on {
                set.extend(self.group_ids(g));
            }
        }
        set
    }

    pub fn scalar_param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn mdp_for(&self, obs: &ScenarioObservation) -> GridMdp {
        GridMdp::new(obs.spec, self.cfg.horizon)
    }

    // -- forwards ----------------------------------------------------------

    pub fn encode_obs(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        train: bool,
    ) -> Result<EncodedScenario> {
        let raster = t.constant(obs.raster.clone().into_dyn());
        let scene_f = self
            .scene
            .apply(t, &self.store, train, raster, self.cfg.grid_size)?;
        let m = self.motion.apply(t, &self.store, train, obs)?;
        Ok(EncodedScenario {
            scene_f,
            m0: m.m0,
            motion_map: m.map,
        })
    }

    pub fn ogm_forward(
        &self,
        t: &mut Tape,
        enc: &EncodedScenario,
        train: bool,
    ) -> Result<OgmRollout> {
        self.ogm.predict(
            t,
            &self.store,
            train,
            enc.scene_f,
            enc.motion_map,
            self.cfg.t_f,
        )
    }

    pub fn policy_forward(&self, t: &mut Tape, enc: &EncodedScenario, train: bool) -> PolicyForward {
        let rewards = self.policy.rewards(
            t,
            &self.store,
            train,
            enc.scene_f,
            enc.motion_map,
            self.cfg.horizon,
        );
        let policy = value_iteration_vars(t, &rewards.rewards, self.cfg.grid_size);
        PolicyForward { rewards, policy }
    }

    /// Stage-1 loss: occupancy NLL of the observed future.
    pub fn stage1_nll(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        flags: Trainability,
    ) -> Result<Var> {
        let enc = self.encode_obs(t, obs, flags.encoder)?;
        let ogms = self.ogm_forward(t, &enc, flags.ogm)?;
        let queries: Vec<Var> = obs
            .gt_future
            .iter()
            .map(|p| {
                let g = obs.spec.world_to_grid(*p);
                t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![g[0], g[1]]).unwrap())
            })
            .collect();
        Ok(ogm_nll_vars(t, &ogms.maps, &queries))
    }

    /// Stage-2 loss: forward cross-entropy (ground-truth plan log-likelihood
    /// plus teacher-forced Gaussian NLL) plus `beta` times the reverse
    /// cross-entropy (sampled rollouts scored against the occupancy maps).
    pub fn sce_loss(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        rng: &mut ChaCha8Rng,
        flags: Trainability,
        beta: f64,
    ) -> Result<SceLoss> {
        let enc = self.encode_obs(t, obs, flags.encoder)?;
        let ogms = self.ogm_forward(t, &enc, flags.ogm)?;
        let pol = self.policy_forward(t, &enc, flags.policy);
        let mdp = self.mdp_for(obs);

        // forward term: -log q(S|obs) - log q(Y|obs, S), teacher forced
        let gt_plan = extract_gt_plan(&obs.gt_future, &mdp)?;
        let plan_ll = plan_log_likelihood_vars(t, &gt_plan, &pol.policy.pi);
        let gt_states: Vec<Var> = gt_plan
            .padded_states()
            .into_iter()
            .map(|c| {
                t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![c[0], c[1]]).unwrap())
            })
            .collect();
        let gt_feats = self.plan_enc.encode(
            t,
            &self.store,
            flags.decoder,
            &gt_states,
            enc.scene_f,
            &pol.rewards.hidden,
            &obs.spec,
        )?;
        let ctx = RolloutContext {
            plan_feats: gt_feats,
            m0: enc.m0,
            scene_f: enc.scene_f,
            ogm_hidden: &ogms.hidden,
            spec: &obs.spec,
        };
        let teacher = rollout(
            t,
            &self.store,
            flags.decoder,
            &self.traj_dec,
            &ctx,
            &obs.gt_future,
            RolloutMode::TeacherForced,
            rng,
        )?;
        let mut nll_terms = Vec::with_capacity(teacher.steps.len());
        for (step, y) in teacher.steps.iter().zip(&obs.gt_future) {
            let yv = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![y[0], y[1]]).unwrap());
            nll_terms.push(gaussian_nll_vars(t, step, yv));
        }
        let traj_nll = t.add_n(&nll_terms);
        let neg_plan_ll = t.neg(plan_ll);
        let forward_ce = t.add(neg_plan_ll, traj_nll);

        // reverse term: occupancy NLL of sampled rollouts
        let m = self.cfg.reverse_ce_samples.max(1);
        let mut rev_terms = Vec::with_capacity(m);
        for _ in 0..m {
            let sampled = self.sampled_rollout_with(t, obs, &enc, &ogms, &pol, flags.decoder, rng)?;
            let queries: Vec<Var> = sampled
                .samples
                .iter()
                .map(|p| world_to_grid_var(t, *p, &obs.spec))
                .collect();
            rev_terms.push(ogm_nll_vars(t, &ogms.maps, &queries));
        }
        let rev_sum = t.add_n(&rev_terms);
        let reverse_ce = t.scale(rev_sum, 1.0 / m as f64);

        let weighted = t.scale(reverse_ce, beta);
        let loss = t.add(forward_ce, weighted);
        let report = LossReport {
            forward_ce: t.value(forward_ce)[[0]],
            reverse_ce: t.value(reverse_ce)[[0]],
            beta,
        };
        Ok(SceLoss {
            loss,
            forward: forward_ce,
            reverse: reverse_ce,
            report,
        })
    }

    /// One sampled plan + trajectory rollout on the tape.
    #[allow(clippy::too_many_arguments)]
    fn sampled_rollout_with(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        enc: &EncodedScenario,
        ogms: &OgmRollout,
        pol: &PolicyForward,
        decoder_trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout> {
        let start = [obs.spec.center(), obs.spec.center()];
        let plan = sample_plan_vars(
            t,
            &pol.policy.pi,
            start,
            self.cfg.tau,
            self.cfg.grid_size,
            rng,
        )?;
        let feats = self.plan_enc.encode(
            t,
            &self.store,
            decoder_trainable,
            &plan.states,
            enc.scene_f,
            &pol.rewards.hidden,
            &obs.spec,
        )?;
        let ctx = RolloutContext {
            plan_feats: feats,
            m0: enc.m0,
            scene_f: enc.scene_f,
            ogm_hidden: &ogms.hidden,
            spec: &obs.spec,
        };
        rollout(
            t,
            &self.store,
            decoder_trainable,
            &self.traj_dec,
            &ctx,
            &[],
            RolloutMode::Sampled,
            rng,
        )
    }

    /// Draw `n` trajectories from the learned distribution without gradient
    /// tracking. Returns world-coordinate samples `[n, t_f, 2]` and the
    /// motion feature.
    pub fn sample_trajectories(
        &self,
        obs: &ScenarioObservation,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array3<f64>, Array1<f64>)> {
        let mut t = Tape::new();
        let frozen = Trainability::frozen();
        let enc = self.encode_obs(&mut t, obs, frozen.encoder)?;
        let ogms = self.ogm_forward(&mut t, &enc, frozen.ogm)?;
        let pol = self.policy_forward(&mut t, &enc, frozen.policy);
        let mut out = Array3::zeros((n, self.cfg.t_f, 2));
        for i in 0..n {
            let r = self.sampled_rollout_with(&mut t, obs, &enc, &ogms, &pol, false, rng)?;
            for (ti, s) in r.samples.iter().enumerate() {
                let v = t.value(*s);
                out[[i, ti, 0]] = v[[0]];
                out[[i, ti, 1]] = v[[1]];
            }
        }
        let m0 = t.value(enc.m0);
        let m0 = Array1::from_iter(m0.iter().cloned());
        Ok((out, m0))
    }

    // -- refinement --------------------------------------------------------

    /// Normalize world trajectories into the refinement net's input space
    /// (agent-centered grid units).
    pub fn normalize_samples(
        &self,
        samples: &Array3<f64>,
        spec: &crate::grid::GridSpec,
    ) -> ndarray::Array2<f64> {
        let (c, t_f, _) = samples.dim();
        let cell = spec.cell_size();
        let mut out = ndarray::Array2::zeros((c, 2 * t_f));
        for i in 0..c {
            for ti in 0..t_f {
                out[[i, 2 * ti]] = (samples[[i, ti, 0]] - spec.origin[0]) / cell;
                out[[i, 2 * ti + 1]] = (samples[[i, ti, 1]] - spec.origin[1]) / cell;
            }
        }
        out
    }

    fn denormalize_flat(&self, flat: &ArrayD<f64>, spec: &crate::grid::GridSpec) -> Array3<f64> {
        let k = flat.shape()[0];
        let t_f = flat.shape()[1] / 2;
        let cell = spec.cell_size();
        let mut out = Array3::zeros((k, t_f, 2));
        for i in 0..k {
            for ti in 0..t_f {
                out[[i, ti, 0]] = flat[[i, 2 * ti]] * cell + spec.origin[0];
                out[[i, ti, 1]] = flat[[i, 2 * ti + 1]] * cell + spec.origin[1];
            }
        }
        out
    }

    /// Run the refinement net on plain sampled trajectories (eval mode unless
    /// a dropout generator is supplied). Returns world-coordinate
    /// representatives `[K, t_f, 2]`.
    pub fn refine_samples(
        &self,
        samples_world: &Array3<f64>,
        m0: &Array1<f64>,
        spec: &crate::grid::GridSpec,
        train: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Array3<f64> {
        let mut t = Tape::new();
        let flat = self.normalize_samples(samples_world, spec);
        let samples = t.constant(flat.into_dyn());
        let m0v = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, m0.len()]), m0.to_vec()).unwrap(),
        );
        let out = self
            .refine
            .refine(&mut t, &self.store, train, samples, m0v, dropout_rng);
        self.denormalize_flat(t.value(out), spec)
    }

    /// Stage-3 loss: variety loss of refined representatives against the
    /// observed future, with the upstream samples fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn stage3_variety(
        &self,
        t: &mut Tape,
        samples_world: &Array3<f64>,
        m0: &Array1<f64>,
        obs: &ScenarioObservation,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let flat = self.normalize_samples(samples_world, &obs.spec);
        let samples = t.constant(flat.into_dyn());
        let m0v = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, m0.len()]), m0.to_vec()).unwrap(),
        );
        let reps = self
            .refine
            .refine(t, &self.store, true, samples, m0v, dropout_rng);
        self.variety_from_reps(t, reps, obs)
    }

    /// Variety loss of normalized `[K, 2 t_f]` representatives against the
    /// ground-truth future; min-over-K with gradient through the argmin.
    fn variety_from_reps(&self, t: &mut Tape, reps: Var, obs: &ScenarioObservation) -> Var {
        let cell = obs.spec.cell_size();
        let t_f = obs.gt_future.len();
        let mut gt_norm = Vec::with_capacity(2 * t_f);
        for p in &obs.gt_future {
            gt_norm.push((p[0] - obs.spec.origin[0]) / cell);
            gt_norm.push((p[1] - obs.spec.origin[1]) / cell);
        }
        let gt = t.constant(ArrayD::from_shape_vec(IxDyn(&[2 * t_f]), gt_norm).unwrap());
        let k = t.value(reps).shape()[0];
        let mut best: Option<(f64, Var)> = None;
        for j in 0..k {
            let row = t.slice_axis(reps, 0, j, 1);
            let row = t.reshape(row, &[2 * t_f]);
            let d = t.sub(row, gt);
            let sq = t.mul(d, d);
            let ss = t.sum_all(sq);
            let norm = t.sqrt(ss);
            // distances are in grid units; scale back to world units
            let norm = t.scale(norm, cell);
            let val = t.value(norm)[[0]];
            if best.as_ref().map(|(b, _)| val < *b).unwrap_or(true) {
                best = Some((val, norm));
            }
        }
        best.unwrap().1
    }

    /// Stage-4 loss: variety loss through the whole pipeline, sampling
    /// in-graph so gradients reach every module. Optionally adds the
    /// beta-weighted symmetric cross-entropy.
    pub fn stage4_loss(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let flags = Trainability::all();
        let enc = self.encode_obs(t, obs, flags.encoder)?;
        let ogms = self.ogm_forward(t, &enc, flags.ogm)?;
        let pol = self.policy_forward(t, &enc, flags.policy);
        let cell = obs.spec.cell_size();
        let origin = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![obs.spec.origin[0], obs.spec.origin[1]])
                .unwrap(),
        );
        let mut rows = Vec::with_capacity(self.cfg.c_samples);
        for _ in 0..self.cfg.c_samples {
            let r = self.sampled_rollout_with(t, obs, &enc, &ogms, &pol, true, rng)?;
            let mut comps = Vec::with_capacity(r.samples.len());
            for s in &r.samples {
                let d = t.sub(*s, origin);
                let u = t.scale(d, 1.0 / cell);
                comps.push(u);
            }
            let flatrow = t.concat(&comps, 0);
            rows.push(t.reshape(flatrow, &[1, 2 * self.cfg.t_f]));
        }
        let samples = t.concat(&rows, 0);
        let m0 = enc.m0;
        let reps = self
            .refine
            .refine(t, &self.store, true, samples, m0, Some(rng));
        let variety = self.variety_from_reps(t, reps, obs);
        if self.cfg.stage4_add_sce {
            let sce = self.sce_loss_from_parts(t, obs, &enc, &ogms, &pol, rng)?;
            return Ok(t.add(variety, sce));
        }
        Ok(variety)
    }

    /// Beta-weighted symmetric cross-entropy on an already-built forward
    /// pass; used by the optional stage-4 multi-task flag.
    fn sce_loss_from_parts(
        &self,
        t: &mut Tape,
        obs: &ScenarioObservation,
        enc: &EncodedScenario,
        ogms: &OgmRollout,
        pol: &PolicyForward,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let mdp = self.mdp_for(obs);
        let gt_plan = extract_gt_plan(&obs.gt_future, &mdp)?;
        let plan_ll = plan_log_likelihood_vars(t, &gt_plan, &pol.policy.pi);
        let gt_states: Vec<Var> = gt_plan
            .padded_states()
            .into_iter()
            .map(|c| t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![c[0], c[1]]).unwrap()))
            .collect();
        let gt_feats = self.plan_enc.encode(
            t,
            &self.store,
            true,
            &gt_states,
            enc.scene_f,
            &pol.rewards.hidden,
            &obs.spec,
        )?;
        let ctx = RolloutContext {
            plan_feats: gt_feats,
            m0: enc.m0,
            scene_f: enc.scene_f,
            ogm_hidden: &ogms.hidden,
            spec: &obs.spec,
        };
        let teacher = rollout(
            t,
            &self.store,
            true,
            &self.traj_dec,
            &ctx,
            &obs.gt_future,
            RolloutMode::TeacherForced,
            rng,
        )?;
        let mut nll_terms = Vec::with_capacity(teacher.steps.len());
        for (step, y) in teacher.steps.iter().zip(&obs.gt_future) {
            let yv = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![y[0], y[1]]).unwrap());
            nll_terms.push(gaussian_nll_vars(t, step, yv));
        }
        let traj_nll = t.add_n(&nll_terms);
        let neg_plan_ll = t.neg(plan_ll);
        let forward_ce = t.add(neg_plan_ll, traj_nll);
        let sampled = self.sampled_rollout_with(t, obs, enc, ogms, pol, true, rng)?;
        let queries: Vec<Var> = sampled
            .samples
            .iter()
            .map(|p| world_to_grid_var(t, *p, &obs.spec))
            .collect();
        let reverse = ogm_nll_vars(t, &ogms.maps, &queries);
        let weighted = t.scale(reverse, self.cfg.beta);
        Ok(t.add(forward_ce, weighted))
    }

    // -- evaluation helpers --------------------------------------------------

    /// Loss report on one scenario with everything frozen.
    pub fn scenario_losses(
        &self,
        obs: &ScenarioObservation,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        let mut t = Tape::new();
        let sce = self.sce_loss(&mut t, obs, rng, Trainability::frozen(), self.cfg.beta)?;
        Ok(sce.report)
    }

    /// Stage-1 heldout metric: occupancy NLL, frozen.
    pub fn scenario_ogm_nll(&self, obs: &ScenarioObservation) -> Result<f64> {
        let mut t = Tape::new();
        let nll = self.stage1_nll(&mut t, obs, Trainability::frozen())?;
        Ok(t.value(nll)[[0]])
    }

    /// Occupancy maps as plain arrays (for dumps and plots).
    pub fn ogm_maps(&self, obs: &ScenarioObservation) -> Result<Vec<ndarray::Array2<f64>>> {
        let mut t = Tape::new();
        let enc = self.encode_obs(&mut t, obs, false)?;
        let ogms = self.ogm_forward(&mut t, &enc, false)?;
        Ok(ogms
            .maps
            .iter()
            .map(|m| {
                t.value(*m)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            })
            .collect())
    }

    /// Per-step reward and policy maps as plain arrays (for plots):
    /// `rewards[n-1]` and `pi[n-1]` are `[A, H, W]`.
    pub fn reward_policy_maps(
        &self,
        obs: &ScenarioObservation,
    ) -> Result<(Vec<Array3<f64>>, Vec<Array3<f64>>)> {
        let mut t = Tape::new();
        let enc = self.encode_obs(&mut t, obs, false)?;
        let pol = self.policy_forward(&mut t, &enc, false);
        let to3 = |t: &Tape, v: Var| -> Array3<f64> {
            t.value(v)
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned()
        };
        let rewards = pol.rewards.rewards.iter().map(|v| to3(&t, *v)).collect();
        let pi = pol.policy.pi.iter().map(|v| to3(&t, *v)).collect();
        Ok((rewards, pi))
    }

    /// Sample `n` grid plans and return their state sequences in world
    /// coordinates, `[N, 2]` each.
    pub fn sample_plans_world(
        &self,
        obs: &ScenarioObservation,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ndarray::Array2<f64>>> {
        let mut t = Tape::new();
        let enc = self.encode_obs(&mut t, obs, false)?;
        let pol = self.policy_forward(&mut t, &enc, false);
        let start = [obs.spec.center(), obs.spec.center()];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let plan = sample_plan_vars(
                &mut t,
                &pol.policy.pi,
                start,
                self.cfg.tau,
                self.cfg.grid_size,
                rng,
            )?;
            let mut states = ndarray::Array2::zeros((plan.states.len(), 2));
            for (i, s) in plan.states.iter().enumerate() {
                let v = t.value(*s);
                let w = obs.spec.grid_to_world([v[[0]], v[[1]]]);
                states[[i, 0]] = w[0];
                states[[i, 1]] = w[1];
            }
            out.push(states);
        }
        Ok(out)
    }

    /// Full prediction for one scenario: `C` samples plus `K` refined
    /// representatives, world coordinates.
    pub fn predict(
        &self,
        obs: &ScenarioObservation,
        rng: &mut ChaCha8Rng,
    ) -> Result<data::PredictionRecord> {
        let (samples, m0) = self.sample_trajectories(obs, self.cfg.c_samples, rng)?;
        let reps = self.refine_samples(&samples, &m0, &obs.spec, false, None);
        Ok(data::PredictionRecord {
            example_id: obs.example_id.clone(),
            samples,
            representatives: reps,
            metrics: Vec::new(),
        })
    }
}
