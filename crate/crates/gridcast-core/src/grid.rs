//! Grid geometry and containers shared by planning, occupancy decoding and
//! feature lookup.
//!
//! Conventions: the agent's position at the last observed step is the world
//! `origin` and sits at the grid center. Cell `(0, 0)` is the lower-left cell
//! in world axes and cell centers lie at integer grid coordinates, so a
//! continuous grid coordinate `(gx, gy)` addresses the plane spanned by cell
//! centers. Fields are stored channels-first as `[C, H, W]` indexed
//! `[channel, gy, gx]`.

use crate::error::{Error, Result};
use crate::tape::bilinear_taps;
use ndarray::Array3;

/// Geometry of the square, world-aligned, agent-centered crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    /// Cells per side.
    pub grid_size: usize,
    /// World-side length of the crop.
    pub crop_extent: f64,
    /// World coordinates of the agent at the last observed step.
    pub origin: [f64; 2],
}

impl GridSpec {
    pub fn new(grid_size: usize, crop_extent: f64, origin: [f64; 2]) -> Result<Self> {
        if grid_size < 1 {
            return Err(Error::config("grid_size must be >= 1"));
        }
        if !(crop_extent > 0.0) {
            return Err(Error::config("crop_extent must be positive"));
        }
        Ok(Self {
            grid_size,
            crop_extent,
            origin,
        })
    }

    /// World length of one cell side.
    pub fn cell_size(&self) -> f64 {
        self.crop_extent / self.grid_size as f64
    }

    /// Grid coordinate of the agent cell (the grid center).
    pub fn center(&self) -> f64 {
        (self.grid_size as f64 - 1.0) / 2.0
    }

    /// World point -> continuous grid coordinate (may lie outside the grid).
    pub fn world_to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.cell_size();
        let k = self.center();
        [(p[0] - self.origin[0]) / c + k, (p[1] - self.origin[1]) / c + k]
    }

    /// Continuous grid coordinate -> world point. Inverse of
    /// [`GridSpec::world_to_grid`].
    pub fn grid_to_world(&self, g: [f64; 2]) -> [f64; 2] {
        let c = self.cell_size();
        let k = self.center();
        [(g[0] - k) * c + self.origin[0], (g[1] - k) * c + self.origin[1]]
    }

    /// Nearest cell index, clamped to the grid.
    pub fn nearest_cell(&self, p: [f64; 2]) -> [usize; 2] {
        let g = self.world_to_grid(p);
        let max = (self.grid_size - 1) as f64;
        [
            g[0].round().clamp(0.0, max) as usize,
            g[1].round().clamp(0.0, max) as usize,
        ]
    }

    /// True if the continuous grid coordinate lies inside the interpolation
    /// domain `[0, grid_size-1]^2`.
    pub fn in_domain(&self, g: [f64; 2]) -> bool {
        let max = (self.grid_size - 1) as f64;
        (0.0..=max).contains(&g[0]) && (0.0..=max).contains(&g[1])
    }
}

/// A grid of per-cell channel vectors with its geometry.
#[derive(Clone, Debug)]
pub struct GridField {
    /// `[channels, gy, gx]`.
    pub values: Array3<f64>,
    pub spec: GridSpec,
}

impl GridField {
    pub fn zeros(channels: usize, spec: GridSpec) -> Self {
        Self {
            values: Array3::zeros((channels, spec.grid_size, spec.grid_size)),
            spec,
        }
    }

    pub fn from_values(values: Array3<f64>, spec: GridSpec) -> Result<Self> {
        let (_, h, w) = values.dim();
        if h != spec.grid_size || w != spec.grid_size {
            return Err(Error::config(format!(
                "field is {h}x{w} but spec grid_size is {}",
                spec.grid_size
            )));
        }
        Ok(Self { values, spec })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// Bilinear interpolation at a continuous grid coordinate, clamped to the
    /// interpolation domain. Errors if the field holds non-finite values.
    pub fn bilinear(&self, q: [f64; 2]) -> Result<Vec<f64>> {
        let (c, h, w) = self.values.dim();
        let taps = bilinear_taps(q[0], q[1], h, w);
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for t in &taps.corners {
                let v = self.values[[ch, t.iy, t.ix]];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "field value at [{ch}, {}, {}]",
                        t.iy, t.ix
                    )));
                }
                acc += t.weight * v;
            }
            out[ch] = acc;
        }
        Ok(out)
    }
}

/// The four bilinear weights for a query on an `h x w` grid, in corner order
/// `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`. Exposed for tests and plain-array
/// consumers; the tape op uses the same tap computation.
pub fn bilinear_weights(q: [f64; 2], h: usize, w: usize) -> [f64; 4] {
    let taps = bilinear_taps(q[0], q[1], h, w);
    [
        taps.corners[0].weight,
        taps.corners[1].weight,
        taps.corners[2].weight,
        taps.corners[3].weight,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{central_difference, max_rel_err, Tape};
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;

    fn spec25() -> GridSpec {
        GridSpec::new(25, 200.0, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn origin_maps_to_center_cell() {
        let s = spec25();
        assert_eq!(s.world_to_grid([0.0, 0.0]), [12.0, 12.0]);
    }

    #[test]
    fn one_cell_offset() {
        let s = spec25();
        let c = s.cell_size();
        assert_eq!(s.world_to_grid([c, 0.0]), [13.0, 12.0]);
    }

    #[test]
    fn affine_formula_check() {
        // p = origin + (3.7 cell, -1.2 cell) -> (15.7, 10.8)
        let s = GridSpec::new(25, 200.0, [40.0, -16.0]).unwrap();
        let c = s.cell_size();
        let g = s.world_to_grid([40.0 + 3.7 * c, -16.0 - 1.2 * c]);
        assert!((g[0] - 15.7).abs() < 1e-12);
        assert!((g[1] - 10.8).abs() < 1e-12);
    }

    #[test]
    fn bilinear_exact_at_grid_points() {
        let s = GridSpec::new(4, 8.0, [0.0, 0.0]).unwrap();
        let mut f = GridField::zeros(2, s);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    f.values[[c, y, x]] = (c * 100 + y * 10 + x) as f64;
                }
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                let v = f.bilinear([x as f64, y as f64]).unwrap();
                assert_eq!(v[0], (y * 10 + x) as f64);
                assert_eq!(v[1], (100 + y * 10 + x) as f64);
            }
        }
    }

    #[test]
    fn bilinear_midpoint_is_mean_of_four() {
        let s = GridSpec::new(2, 2.0, [0.0, 0.0]).unwrap();
        let mut f = GridField::zeros(1, s);
        f.values[[0, 0, 0]] = 1.0;
        f.values[[0, 0, 1]] = 2.0;
        f.values[[0, 1, 0]] = 3.0;
        f.values[[0, 1, 1]] = 4.0;
        let v = f.bilinear([0.5, 0.5]).unwrap();
        assert!((v[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_weights() {
        // q = (0.25, 0.75) on 2x2: (0.1875, 0.0625, 0.5625, 0.1875)
        let w = bilinear_weights([0.25, 0.75], 2, 2);
        assert_eq!(w, [0.1875, 0.0625, 0.5625, 0.1875]);
    }

    #[test]
    fn nan_field_propagates_error() {
        let s = GridSpec::new(2, 2.0, [0.0, 0.0]).unwrap();
        let mut f = GridField::zeros(1, s);
        f.values[[0, 0, 0]] = f64::NAN;
        assert!(f.bilinear([0.3, 0.3]).is_err());
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let field = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| {
            (ix[1] as f64 * 1.3 - ix[2] as f64 * 0.7).sin()
        });
        let mut t = Tape::new();
        let f = t.input(field.clone());
        let q = t.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.6, 2.2]).unwrap());
        let b = t.bilinear_gather(f, q);
        let root = t.sum_all(b);
        let grads = t.backward(root);
        let analytic = grads.get(f).unwrap().clone();
        let numeric = central_difference(
            |fp| {
                let mut t2 = Tape::new();
                let f2 = t2.input(fp.clone());
                let q2 =
                    t2.constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.6, 2.2]).unwrap());
                let b2 = t2.bilinear_gather(f2, q2);
                let r = t2.sum_all(b2);
                t2.value(r)[[0]]
            },
            &field,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    proptest! {
        /// Round-trip is exact on a dyadic lattice (cell sizes here are powers
        /// of two, so the affine map stays within exact binary arithmetic).
        #[test]
        fn round_trip_exact_on_dyadic_lattice(
            ix in -64i32..64, iy in -64i32..64, ox in -8i32..8, oy in -8i32..8
        ) {
            let s = GridSpec::new(25, 200.0, [ox as f64 * 8.0, oy as f64 * 8.0]).unwrap();
            let p = [
                s.origin[0] + ix as f64 * 0.25,
                s.origin[1] + iy as f64 * 0.25,
            ];
            let q = s.grid_to_world(s.world_to_grid(p));
            prop_assert_eq!(q, p);
        }

        /// Interpolation weights are a convex combination for any query.
        #[test]
        fn weights_convex(qx in -5.0f64..30.0, qy in -5.0f64..30.0) {
            let w = bilinear_weights([qx, qy], 25, 25);
            let sum: f64 = w.iter().sum();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        /// Bilinear reproduces affine functions of the grid coordinate exactly
        /// (within rounding) inside the domain.
        #[test]
        fn exact_for_affine_fields(qx in 0.0f64..24.0, qy in 0.0f64..24.0) {
            let s = GridSpec::new(25, 200.0, [0.0, 0.0]).unwrap();
            let mut f = GridField::zeros(1, s);
            for y in 0..25 {
                for x in 0..25 {
                    f.values[[0, y, x]] = 3.0 * x as f64 - 2.0 * y as f64 + 0.5;
                }
            }
            let v = f.bilinear([qx, qy]).unwrap()[0];
            let expect = 3.0 * qx - 2.0 * qy + 0.5;
            prop_assert!((v - expect).abs() < 1e-9);
        }
    }
}
