//! Observation encoding: agent and neighbor history into a motion feature
//! vector/map, and the scene raster into a scene feature map.

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn::{Conv2dLayer, GruCell, Linear, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// One neighbor's history aligned to the target's time steps.
#[derive(Clone, Debug)]
pub struct NeighborTrack {
    pub agent_id: u64,
    /// World positions, one per history step.
    pub points: Vec<[f64; 2]>,
    /// Per-step presence flags.
    pub valid: Vec<bool>,
}

/// One prediction instance.
#[derive(Clone, Debug)]
pub struct ScenarioObservation {
    /// `t_p` world points; the last one is the grid origin.
    pub target_history: Vec<[f64; 2]>,
    pub neighbors: Vec<NeighborTrack>,
    /// Agent-centered scene crop, `[3, rh, rw]`, `rh = rw = 2 * grid_size`.
    pub raster: Array3<f64>,
    /// `t_f` world points.
    pub gt_future: Vec<[f64; 2]>,
    /// Step interval in seconds.
    pub dt: f64,
    pub spec: GridSpec,
    /// Road mask at MDP resolution (1 = road), when the dataset provides one.
    pub road_mask: Option<Array2<f64>>,
    pub example_id: String,
}

impl ScenarioObservation {
    pub fn t_p(&self) -> usize {
        self.target_history.len()
    }

    pub fn t_f(&self) -> usize {
        self.gt_future.len()
    }
}

/// Side length of the directional pooling grid.
pub const POOLING_GRID: usize = 6;

/// Flattened directional pooling grid at one history step: a
/// `POOLING_GRID x POOLING_GRID` grid covering the crop extent around the
/// target, each cell holding the relative velocity of the neighbor occupying
/// it (the neighbor nearest to the target wins a cell collision).
pub fn pooling_grid(obs: &ScenarioObservation, step: usize) -> Vec<f64> {
    let g = POOLING_GRID;
    let mut out = vec![0.0; 2 * g * g];
    if step == 0 {
        return out;
    }
    let target = obs.target_history[step];
    let target_prev = obs.target_history[step - 1];
    let extent = obs.spec.crop_extent;
    let cell = extent / g as f64;
    // per cell: distance of the occupying neighbor, for nearest-wins
    let mut best = vec![f64::INFINITY; g * g];
    for nb in &obs.neighbors {
        if step >= nb.points.len() || !nb.valid[step] || !nb.valid[step - 1] {
            continue;
        }
        let rel = [nb.points[step][0] - target[0], nb.points[step][1] - target[1]];
        let gx = ((rel[0] + extent / 2.0) / cell).floor();
        let gy = ((rel[1] + extent / 2.0) / cell).floor();
        if gx < 0.0 || gy < 0.0 || gx >= g as f64 || gy >= g as f64 {
            continue;
        }
        let idx = gy as usize * g + gx as usize;
        let dist = (rel[0] * rel[0] + rel[1] * rel[1]).sqrt();
        if dist < best[idx] {
            best[idx] = dist;
            let vel = [
                (nb.points[step][0] - nb.points[step - 1][0])
                    - (target[0] - target_prev[0]),
                (nb.points[step][1] - nb.points[step - 1][1])
                    - (target[1] - target_prev[1]),
            ];
            out[2 * idx] = vel[0];
            out[2 * idx + 1] = vel[1];
        }
    }
    out
}

/// Motion feature as tape vars.
pub struct MotionVars {
    /// `[1, hidden]` final recurrent state.
    pub m0: Var,
    /// `[hidden + 2, H, W]` map: broadcast `m0` plus each cell's
    /// agent-centered world coordinates.
    pub map: Var,
}

/// Recurrent encoder over the target's history and the pooling grids.
pub struct MotionEncoder {
    pub embed: Linear,
    pub gru: GruCell,
    pub hidden: usize,
}

impl MotionEncoder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let in_dim = 2 * POOLING_GRID * POOLING_GRID + 2;
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), in_dim, hidden, rng),
            gru: GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng),
            hidden,
        }
    }

    pub fn ids(&self) -> Vec<crate::tape::ParamId> {
        let mut v = self.embed.ids();
        v.extend(self.gru.ids());
        v
    }

    /// Encode one observation; errors with fewer than two history points.
    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        obs: &ScenarioObservation,
    ) -> Result<MotionVars> {
        let t_p = obs.t_p();
        if t_p < 2 {
            return Err(Error::data("motion encoder needs at least 2 history points"));
        }
        let mut h = t.constant(ArrayD::zeros(IxDyn(&[1, self.hidden])));
        for step in 1..t_p {
            let d = pooling_grid(obs, step);
            let vel = [
                obs.target_history[step][0] - obs.target_history[step - 1][0],
                obs.target_history[step][1] - obs.target_history[step - 1][1],
            ];
            let mut x = d;
            x.push(vel[0]);
            x.push(vel[1]);
            let n = x.len();
            let xv = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, n]), x).unwrap());
            let e = self.embed.apply(t, store, trainable, xv);
            h = self.gru.step(t, store, trainable, e, h);
        }
        let g = obs.spec.grid_size;
        let m0_flat = t.reshape(h, &[self.hidden]);
        let m_broadcast = t.broadcast_hw(m0_flat, g, g);
        let coords = t.constant(cell_coordinate_channels(&obs.spec).into_dyn());
        let map = t.concat(&[m_broadcast, coords], 0);
        Ok(MotionVars { m0: h, map })
    }
}

/// `[2, H, W]` channels holding each cell center's agent-centered world
/// coordinates (exactly `grid_to_world(cell) - origin`).
pub fn cell_coordinate_channels(spec: &GridSpec) -> Array3<f64> {
    let g = spec.grid_size;
    let mut coords = Array3::zeros((2, g, g));
    for y in 0..g {
        for x in 0..g {
            let w = spec.grid_to_world([x as f64, y as f64]);
            coords[[0, y, x]] = w[0] - spec.origin[0];
            coords[[1, y, x]] = w[1] - spec.origin[1];
        }
    }
    coords
}

/// Convolutional scene backbone: three blocks whose stride schedule maps the
/// `2*grid` raster to a `grid x grid` feature map. The full-scale backbone it
/// stands in for shares this input/output contract.
pub struct SceneEncoder {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
    pub conv3: Conv2dLayer,
    pub out_channels: usize,
}

impl SceneEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mid: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv1: Conv2dLayer::new(store, &format!("{name}.c1"), 3, mid, 3, 1, 1, rng),
            conv2: Conv2dLayer::new(store, &format!("{name}.c2"), mid, out_channels, 3, 2, 1, rng),
            conv3: Conv2dLayer::new(
                store,
                &format!("{name}.c3"),
                out_channels,
                out_channels,
                3,
                1,
                1,
                rng,
            ),
            out_channels,
        }
    }

    pub fn ids(&self) -> Vec<crate::tape::ParamId> {
        let mut v = self.conv1.ids();
        v.extend(self.conv2.ids());
        v.extend(self.conv3.ids());
        v
    }

    /// `raster [3, 2g, 2g] -> F [out, g, g]`.
    pub fn apply(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        raster: Var,
        grid_size: usize,
    ) -> Result<Var> {
        let shape = t.value(raster).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != 2 * grid_size || shape[2] != 2 * grid_size
        {
            return Err(Error::config(format!(
                "scene raster must be [3, {0}, {0}], got {shape:?}",
                2 * grid_size
            )));
        }
        let c1 = self.conv1.apply(t, store, trainable, raster);
        let r1 = t.relu(c1);
        let c2 = self.conv2.apply(t, store, trainable, r1);
        let r2 = t.relu(c2);
        Ok(self.conv3.apply(t, store, trainable, r2))
    }
}
