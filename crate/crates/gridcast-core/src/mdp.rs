//! The grid MDP and the policy network: non-stationary rewards from a
//! convolutional recurrent head, approximate value iteration unrolled on the
//! tape, ground-truth plan extraction, plan log-likelihood and Gumbel-Softmax
//! plan sampling.
//!
//! Semantics: five actions (four unit moves plus `end`), deterministic
//! transitions, moves off the grid are self-transitions, `end` leads to an
//! absorbing state of value zero which then only self-loops at zero reward.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::{Conv2dLayer, ConvLstmCell, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::{Array3, Array4, ArrayD, IxDyn};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};

pub const NUM_ACTIONS: usize = 5;

/// Epsilon added inside `log` of gathered probabilities so a zero-probability
/// action clips instead of poisoning gradients with `-inf`.
pub const LOG_PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    End,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::End,
    ];

    /// Grid displacement `(dx, dy)`; `end` does not move.
    pub fn displacement(self) -> [i64; 2] {
        match self {
            Action::Up => [0, 1],
            Action::Down => [0, -1],
            Action::Left => [-1, 0],
            Action::Right => [1, 0],
            Action::End => [0, 0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
            Action::End => 4,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

/// Where a grid transition lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Cell([usize; 2]),
    Absorbing,
}

/// The planning MDP over grid cells plus one absorbing state.
#[derive(Clone, Copy, Debug)]
pub struct GridMdp {
    pub spec: GridSpec,
    /// Number of MDP steps `N`.
    pub horizon: usize,
}

impl GridMdp {
    pub fn new(spec: GridSpec, horizon: usize) -> Self {
        Self { spec, horizon }
    }

    /// Deterministic transition; off-grid moves stay in place.
    pub fn transition(&self, cell: [usize; 2], action: Action) -> Transition {
        if action == Action::End {
            return Transition::Absorbing;
        }
        let d = action.displacement();
        let nx = cell[0] as i64 + d[0];
        let ny = cell[1] as i64 + d[1];
        let g = self.spec.grid_size as i64;
        if nx < 0 || nx >= g || ny < 0 || ny >= g {
            Transition::Cell(cell)
        } else {
            Transition::Cell([nx as usize, ny as usize])
        }
    }
}

/// Per-step, per-cell, per-action rewards: `[N, A, H, W]`.
#[derive(Clone, Debug)]
pub struct RewardStack {
    pub r: Array4<f64>,
}

impl RewardStack {
    pub fn new(r: Array4<f64>) -> Result<Self> {
        if r.dim().1 != NUM_ACTIONS {
            return Err(Error::config("reward stack needs 5 action channels"));
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("reward stack".into()));
        }
        Ok(Self { r })
    }

    pub fn steps(&self) -> usize {
        self.r.dim().0
    }
}

/// Policy and value maps from value iteration. `pi[n-1]` is the step-`n`
/// policy; `values[n]` is `V^n` with `values[N] = 0`.
#[derive(Clone, Debug)]
pub struct NonStationaryPolicy {
    pub pi: Array4<f64>,
    pub values: Array3<f64>,
}

impl NonStationaryPolicy {
    pub fn steps(&self) -> usize {
        self.pi.dim().0
    }
}

/// A rasterized (hard) plan. `actions[i]` is taken at `cells[i]`; once `end`
/// fires the remaining steps up to `horizon` are absorbing self-loops and are
/// not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct HardPlan {
    pub cells: Vec<[usize; 2]>,
    pub actions: Vec<Action>,
    pub horizon: usize,
}

impl HardPlan {
    /// Number of actions taken at grid states (the rest are absorbing stays).
    pub fn active_len(&self) -> usize {
        self.actions.len()
    }

    /// Plan states `s^1..s^N` as continuous grid coordinates; once absorbed
    /// the final grid cell repeats (the `end` action does not move).
    pub fn padded_states(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.horizon);
        for i in 0..self.horizon {
            let c = if i < self.cells.len() {
                self.cells[i]
            } else {
                *self.cells.last().expect("plans have at least one state")
            };
            out.push([c[0] as f64, c[1] as f64]);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Value iteration
// ---------------------------------------------------------------------------

/// Value-iteration outputs as tape vars, one entry per MDP step.
pub struct PolicyVars {
    /// `pi[n-1]`: `[A,H,W]` softmax policies.
    pub pi: Vec<Var>,
    /// `log_pi[n-1]`: `[A,H,W]` log-softmax policies (`Q - V`).
    pub log_pi: Vec<Var>,
    /// `values[n]`: `[H,W]`, `values[N] = 0`.
    pub values: Vec<Var>,
}

/// Unroll approximate value iteration on the tape.
///
/// For `n = N..1`: `Q^n(s,a) = r^n(s,a) + V^n(T(s,a))`,
/// `V^{n-1} = logsumexp_a Q^n`, `pi^n = softmax_a Q^n`. The absorbing state
/// contributes value zero at every step, so the `end` action's continuation
/// value is zero and off-grid moves read the current cell's value.
pub fn value_iteration_vars(t: &mut Tape, rewards: &[Var], grid_size: usize) -> PolicyVars {
    let n_steps = rewards.len();
    let h = grid_size;
    let w = grid_size;
    let mut values: Vec<Option<Var>> = vec![None; n_steps + 1];
    let mut pi: Vec<Option<Var>> = vec![None; n_steps];
    let mut log_pi: Vec<Option<Var>> = vec![None; n_steps];
    let v_final = t.constant(ArrayD::zeros(IxDyn(&[h, w])));
    values[n_steps] = Some(v_final);
    for n in (1..=n_steps).rev() {
        let r_n = rewards[n - 1];
        let v_n = values[n].unwrap();
        let mut q_parts = Vec::with_capacity(NUM_ACTIONS);
        for a in Action::ALL {
            let r_a = t.slice_axis(r_n, 0, a.index(), 1); // [1,H,W]
            let q_a = if a == Action::End {
                r_a // absorbing continuation value is 0
            } else {
                let d = a.displacement();
                let shifted = t.shift_clamp(v_n, d[0], d[1]);
                let shifted = t.reshape(shifted, &[1, h, w]);
                t.add(r_a, shifted)
            };
            q_parts.push(q_a);
        }
        let q = t.concat(&q_parts, 0); // [A,H,W]
        let v_prev = t.logsumexp_axis0(q); // [H,W]
        // log pi = Q - V^{n-1}, broadcast over the action axis
        let v_r = t.reshape(v_prev, &[1, h, w]);
        let v_b = t.concat(&vec![v_r; NUM_ACTIONS], 0);
        let lp = t.sub(q, v_b);
        let p = t.exp(lp);
        values[n - 1] = Some(v_prev);
        log_pi[n - 1] = Some(lp);
        pi[n - 1] = Some(p);
    }
    PolicyVars {
        pi: pi.into_iter().map(Option::unwrap).collect(),
        log_pi: log_pi.into_iter().map(Option::unwrap).collect(),
        values: values.into_iter().map(Option::unwrap).collect(),
    }
}

/// Plain-array value iteration (runs the tape once on constants).
pub fn value_iteration(rewards: &RewardStack, mdp: &GridMdp) -> Result<NonStationaryPolicy> {
    let n_steps = rewards.steps();
    if n_steps != mdp.horizon {
        return Err(Error::config(format!(
            "reward stack has {n_steps} steps but MDP horizon is {}",
            mdp.horizon
        )));
    }
    let g = mdp.spec.grid_size;
    if rewards.r.dim().2 != g || rewards.r.dim().3 != g {
        return Err(Error::config("reward stack grid does not match spec"));
    }
    if !rewards.r.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("reward stack".into()));
    }
    let mut t = Tape::new();
    let reward_vars: Vec<Var> = (0..n_steps)
        .map(|n| {
            let slice = rewards.r.index_axis(ndarray::Axis(0), n).to_owned();
            t.constant(slice.into_dyn())
        })
        .collect();
    let out = value_iteration_vars(&mut t, &reward_vars, g);
    let mut pi = Array4::zeros((n_steps, NUM_ACTIONS, g, g));
    for (n, p) in out.pi.iter().enumerate() {
        let v = t.value(*p);
        pi.index_axis_mut(ndarray::Axis(0), n)
            .assign(&v.view().into_dimensionality::<ndarray::Ix3>().unwrap());
    }
    let mut values = Array3::zeros((n_steps + 1, g, g));
    for (n, vv) in out.values.iter().enumerate() {
        let v = t.value(*vv);
        values
            .index_axis_mut(ndarray::Axis(0), n)
            .assign(&v.view().into_dimensionality::<ndarray::Ix2>().unwrap());
    }
    Ok(NonStationaryPolicy { pi, values })
}

// ---------------------------------------------------------------------------
// Ground-truth plan extraction
// ---------------------------------------------------------------------------

/// Rasterize a future trajectory into a hard plan.
///
/// Each future point maps to its nearest cell (clamped to the grid); between
/// consecutive distinct cells axis-aligned moves are inserted, x-moves before
/// y-moves; repeated cells are dropped; an `end` is appended when it fits and
/// the plan is truncated with a warning when more than `N` moves are needed.
pub fn extract_gt_plan(future: &[[f64; 2]], mdp: &GridMdp) -> Result<HardPlan> {
    if future.is_empty() {
        return Err(Error::data("empty future trajectory"));
    }
    let n = mdp.horizon;
    let start = [
        mdp.spec.center().round() as usize,
        mdp.spec.center().round() as usize,
    ];
    let mut path = vec![start];
    for p in future {
        let cell = mdp.spec.nearest_cell(*p);
        if *path.last().unwrap() != cell {
            path.push(cell);
        }
    }
    let mut actions = Vec::new();
    for win in path.windows(2) {
        let (from, to) = (win[0], win[1]);
        let dx = to[0] as i64 - from[0] as i64;
        let dy = to[1] as i64 - from[1] as i64;
        let ax = if dx > 0 { Action::Right } else { Action::Left };
        for _ in 0..dx.abs() {
            actions.push(ax);
        }
        let ay = if dy > 0 { Action::Up } else { Action::Down };
        for _ in 0..dy.abs() {
            actions.push(ay);
        }
    }
    if actions.len() > n {
        log::warn!(
            "ground-truth plan needs {} moves but horizon is {n}; truncating",
            actions.len()
        );
        actions.truncate(n);
    } else if actions.len() < n {
        actions.push(Action::End);
    }
    // states where each action is taken
    let mut cells = Vec::with_capacity(actions.len());
    let mut cur = start;
    for a in &actions {
        cells.push(cur);
        match mdp.transition(cur, *a) {
            Transition::Cell(c) => cur = c,
            Transition::Absorbing => break,
        }
    }
    Ok(HardPlan {
        cells,
        actions,
        horizon: n,
    })
}

/// `sum_n log pi^n(a^n | s^n)`; absorbing steps contribute `log 1 = 0`.
/// Returns `-inf` when the policy puts zero probability on a taken action.
pub fn plan_log_likelihood(plan: &HardPlan, policy: &NonStationaryPolicy) -> Result<f64> {
    if plan.horizon != policy.steps() {
        return Err(Error::config("plan and policy horizons differ"));
    }
    let mut ll = 0.0;
    for (i, (cell, action)) in plan.cells.iter().zip(plan.actions.iter()).enumerate() {
        ll += policy.pi[[i, action.index(), cell[1], cell[0]]].ln();
    }
    Ok(ll)
}

/// Tape version of the plan log-likelihood against per-step `log_pi` vars,
/// with probabilities clipped at [`LOG_PROB_EPS`].
pub fn plan_log_likelihood_vars(
    t: &mut Tape,
    plan: &HardPlan,
    pi_vars: &[Var],
) -> Var {
    assert_eq!(plan.horizon, pi_vars.len(), "plan/policy horizon mismatch");
    let mut terms = Vec::with_capacity(plan.active_len());
    for (i, (cell, action)) in plan.cells.iter().zip(plan.actions.iter()).enumerate() {
        let q = t.constant(
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![cell[0] as f64, cell[1] as f64]).unwrap(),
        );
        let probs = t.bilinear_gather(pi_vars[i], q); // exact at integer cells
        let pa = t.slice_axis(probs, 0, action.index(), 1);
        let pa = t.add_scalar(pa, LOG_PROB_EPS);
        terms.push(t.ln(pa));
    }
    let s = t.add_n(&terms);
    t.sum_all(s)
}

// ---------------------------------------------------------------------------
// Plan sampling
// ---------------------------------------------------------------------------

/// A sampled (soft) plan: continuous states and relaxed one-hot actions, all
/// differentiable tape vars.
pub struct SoftPlanVars {
    /// `s^1..s^N`, each `[2]`.
    pub states: Vec<Var>,
    /// Gumbel-Softmax action samples `y^1..y^N`, each `[A]`.
    pub actions: Vec<Var>,
}

/// Displacement matrix `[A, 2]` used to turn a soft action into a state
/// delta.
fn displacement_matrix(t: &mut Tape) -> Var {
    let mut d = ArrayD::zeros(IxDyn(&[NUM_ACTIONS, 2]));
    for a in Action::ALL {
        let v = a.displacement();
        d[[a.index(), 0]] = v[0] as f64;
        d[[a.index(), 1]] = v[1] as f64;
    }
    t.constant(d)
}

/// Sample a soft plan by rolling the policy out with the Gumbel-Softmax
/// trick: per-action probabilities are bilinearly interpolated at the current
/// continuous state, renormalized, and relaxed-sampled at temperature `tau`;
/// the state advances by the probability-weighted displacement and is clamped
/// to the grid.
pub fn sample_plan_vars(
    t: &mut Tape,
    pi_vars: &[Var],
    start: [f64; 2],
    tau: f64,
    grid_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SoftPlanVars> {
    if !(tau > 0.0) {
        return Err(Error::config("gumbel-softmax temperature must be > 0"));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let disp = displacement_matrix(t);
    let mut states = Vec::with_capacity(pi_vars.len());
    let mut actions = Vec::with_capacity(pi_vars.len());
    let mut s =
        t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![start[0], start[1]]).unwrap());
    for pi_n in pi_vars {
        states.push(s);
        let p = t.bilinear_gather(*pi_n, s);
        let z = t.sum_all(p);
        let p = t.div_by_scalar(p, z);
        let p = t.add_scalar(p, LOG_PROB_EPS);
        let logits = t.ln(p);
        let noise: Vec<f64> = (0..NUM_ACTIONS).map(|_| gumbel.sample(rng)).collect();
        let noise = t.constant(ArrayD::from_shape_vec(IxDyn(&[NUM_ACTIONS]), noise).unwrap());
        let perturbed = t.add(logits, noise);
        let scaled = t.scale(perturbed, 1.0 / tau);
        let y = t.softmax_last(scaled);
        actions.push(y);
        let y_row = t.reshape(y, &[1, NUM_ACTIONS]);
        let delta = t.matmul(y_row, disp, false, false);
        let delta = t.reshape(delta, &[2]);
        let next = t.add(s, delta);
        s = t.clamp(next, 0.0, (grid_size - 1) as f64);
    }
    Ok(SoftPlanVars { states, actions })
}

// ---------------------------------------------------------------------------
// Policy network (reward head)
// ---------------------------------------------------------------------------

/// Maps observation features to non-stationary rewards: a one-layer
/// convolutional LSTM over the scene features, hidden map initialized from
/// the motion feature map, with a 1x1 head to the five action-reward
/// channels.
pub struct PolicyNetwork {
    pub h0_embed: Conv2dLayer,
    pub lstm: ConvLstmCell,
    pub reward_head: Conv2dLayer,
    pub hidden: usize,
}

/// Per-step outputs of the reward head kept for downstream consumers.
pub struct RewardRollout {
    /// `r^1..r^N`, each `[A,H,W]`.
    pub rewards: Vec<Var>,
    /// Recurrent hidden maps `H^1..H^N`, each `[hidden,H,W]`.
    pub hidden: Vec<Var>,
}

impl PolicyNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scene_ch: usize,
        motion_ch: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            h0_embed: Conv2dLayer::new(store, &format!("{name}.h0"), motion_ch, hidden, 1, 1, 0, rng),
            lstm: ConvLstmCell::new(store, &format!("{name}.lstm"), scene_ch, hidden, 3, rng),
            reward_head: Conv2dLayer::new(
                store,
                &format!("{name}.reward"),
                hidden,
                NUM_ACTIONS,
                1,
                1,
                0,
                rng,
            ),
            hidden,
        }
    }

    pub fn ids(&self) -> Vec<crate::tape::ParamId> {
        let mut v = self.h0_embed.ids();
        v.extend(self.lstm.ids());
        v.extend(self.reward_head.ids());
        v
    }

    /// Unroll the reward head for `n_steps` MDP steps.
    pub fn rewards(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        scene_f: Var,
        motion_map: Var,
        n_steps: usize,
    ) -> RewardRollout {
        let (h0w, _) = {
            let shape = t.value(scene_f).shape().to_vec();
            ((shape[1], shape[2]), shape[0])
        };
        let mut h = self.h0_embed.apply(t, store, trainable, motion_map);
        let mut c = t.constant(ArrayD::zeros(IxDyn(&[self.hidden, h0w.0, h0w.1])));
        let x_gates = self.lstm.input_gates(t, store, trainable, scene_f);
        let mut rewards = Vec::with_capacity(n_steps);
        let mut hidden = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let (h2, c2) = self.lstm.step(t, store, trainable, x_gates, h, c);
            h = h2;
            c = c2;
            hidden.push(h);
            rewards.push(self.reward_head.apply(t, store, trainable, h));
        }
        RewardRollout { rewards, hidden }
    }
}
