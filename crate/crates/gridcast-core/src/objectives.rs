//! Training losses and evaluation metrics.
//!
//! The symmetric cross-entropy loss combines the forward term (plan
//! log-likelihood plus teacher-forced Gaussian log-density, negated) with a
//! `beta`-weighted reverse term (sampled trajectories scored against the
//! occupancy maps). Metrics are plain-array functions.

use ndarray::{Array2, Array3};

/// Monte Carlo sample count for the reverse cross-entropy estimator.
pub const REVERSE_CE_SAMPLES: usize = 2;

/// Guard for the `avgFDE / minFDE` ratio when the minimum is zero.
pub const RF_EPS: f64 = 1e-9;

/// One scenario's (or one epoch's averaged) loss decomposition.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub forward_ce: f64,
    pub reverse_ce: f64,
    pub beta: f64,
}

impl LossReport {
    /// `sce = forward + beta * reverse` by definition.
    pub fn sce(&self) -> f64 {
        self.forward_ce + self.beta * self.reverse_ce
    }
}

/// Variety (minimum-over-K) loss: the smallest whole-trajectory Euclidean
/// norm of the displacement between the observed future and any
/// representative.
pub fn variety_loss(gt: &[[f64; 2]], reps: &Array3<f64>) -> f64 {
    let (k, t_f, _) = reps.dim();
    assert!(k >= 1, "need at least one representative");
    assert_eq!(t_f, gt.len(), "trajectory length mismatch");
    let mut best = f64::INFINITY;
    for j in 0..k {
        let mut acc = 0.0;
        for (ti, y) in gt.iter().enumerate() {
            let dx = y[0] - reps[[j, ti, 0]];
            let dy = y[1] - reps[[j, ti, 1]];
            acc += dx * dx + dy * dy;
        }
        best = best.min(acc.sqrt());
    }
    best
}

/// Displacement metrics over a set of `K` predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplacementMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub avg_fde: f64,
    /// `avgFDE / minFDE`, guarded against a zero minimum.
    pub rf: f64,
}

/// Minimum average / final displacement errors and the spread ratio.
pub fn min_ade_fde(gt: &[[f64; 2]], preds: &Array3<f64>) -> DisplacementMetrics {
    let (k, t_f, _) = preds.dim();
    assert!(k >= 1 && t_f == gt.len(), "prediction set shape mismatch");
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut sum_fde = 0.0;
    for j in 0..k {
        let mut ade = 0.0;
        for (ti, y) in gt.iter().enumerate() {
            let dx = y[0] - preds[[j, ti, 0]];
            let dy = y[1] - preds[[j, ti, 1]];
            ade += (dx * dx + dy * dy).sqrt();
        }
        ade /= t_f as f64;
        let last = gt[t_f - 1];
        let dx = last[0] - preds[[j, t_f - 1, 0]];
        let dy = last[1] - preds[[j, t_f - 1, 1]];
        let fde = (dx * dx + dy * dy).sqrt();
        min_ade = min_ade.min(ade);
        min_fde = min_fde.min(fde);
        sum_fde += fde;
    }
    let avg_fde = sum_fde / k as f64;
    DisplacementMetrics {
        min_ade,
        min_fde,
        avg_fde,
        rf: avg_fde / min_fde.max(RF_EPS),
    }
}

/// Counts backing the pooled offroad rate.
#[derive(Clone, Copy, Debug, Default)]
pub struct OffroadCounts {
    /// Predicted points at time steps whose ground-truth point is on road.
    pub qualifying: usize,
    /// Of those, points falling off road.
    pub offroad: usize,
    /// Scenarios skipped because no ground-truth point was on road.
    pub skipped_scenarios: usize,
}

impl OffroadCounts {
    pub fn rate(&self) -> Option<f64> {
        if self.qualifying == 0 {
            None
        } else {
            Some(self.offroad as f64 / self.qualifying as f64)
        }
    }

    pub fn merge(&mut self, other: &OffroadCounts) {
        self.qualifying += other.qualifying;
        self.offroad += other.offroad;
        self.skipped_scenarios += other.skipped_scenarios;
    }
}

/// Accumulate offroad counts for one scenario: among time steps whose
/// ground-truth point lies on road, count predicted points (over all K) off
/// road. Point-on-road is the mask value at the nearest cell.
pub fn offroad_counts(
    gt: &[[f64; 2]],
    preds: &Array3<f64>,
    road_mask: &Array2<f64>,
    spec: &crate::grid::GridSpec,
) -> OffroadCounts {
    let (k, t_f, _) = preds.dim();
    assert_eq!(t_f, gt.len());
    let on_road = |p: [f64; 2]| -> bool {
        let c = spec.nearest_cell(p);
        road_mask[[c[1], c[0]]] > 0.5
    };
    let mut counts = OffroadCounts::default();
    let mut any_gt_on_road = false;
    for (ti, y) in gt.iter().enumerate() {
        if !on_road(*y) {
            continue;
        }
        any_gt_on_road = true;
        for j in 0..k {
            counts.qualifying += 1;
            if !on_road([preds[[j, ti, 0]], preds[[j, ti, 1]]]) {
                counts.offroad += 1;
            }
        }
    }
    if !any_gt_on_road {
        counts.skipped_scenarios = 1;
    }
    counts
}
