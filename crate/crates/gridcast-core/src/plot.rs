//! Figure rendering: heatmaps of grid fields and trajectory overlays on the
//! scene raster, written as PNGs.

use crate::encoders::ScenarioObservation;
use crate::error::Result;
use ndarray::{Array2, Array3};
use std::path::Path;

/// Pixels per grid cell in rendered heatmaps.
const CELL_PX: usize = 12;

/// Blue-to-red ramp over `[0, 1]`.
fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v.powf(0.7)) as u8;
    let g = (255.0 * (1.0 - (2.0 * v - 1.0).abs()).max(0.0)) as u8;
    let b = (255.0 * (1.0 - v).powf(0.7)) as u8;
    [r, g, b]
}

/// Render a grid field channel as a heatmap. Row 0 of the array is the
/// world's lowest row, so the image is flipped vertically.
pub fn heatmap(field: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = field.dim();
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::new((w * CELL_PX) as u32, (h * CELL_PX) as u32);
    for y in 0..h {
        for x in 0..w {
            let c = colormap((field[[y, x]] - lo) / range);
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    img.put_pixel(
                        (x * CELL_PX + px) as u32,
                        ((h - 1 - y) * CELL_PX + py) as u32,
                        image::Rgb(c),
                    );
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::data(format!("saving {}: {e}", path.display())))?;
    Ok(())
}

fn draw_point(img: &mut image::RgbImage, x: f64, y: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let xi = x.round() as i64;
    let yi = y.round() as i64;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let px = xi + dx;
            let py = yi + dy;
            if px >= 0 && py >= 0 && px < w && py < h {
                img.put_pixel(px as u32, py as u32, image::Rgb(color));
            }
        }
    }
}

fn draw_segment(img: &mut image::RgbImage, a: [f64; 2], b: [f64; 2], color: [u8; 3]) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a[0] + (b[0] - a[0]) * t;
        let y = a[1] + (b[1] - a[1]) * t;
        draw_point(img, x, y, color);
    }
}

/// Draw trajectories over the scenario's raster. Trajectories are in world
/// coordinates; the raster covers the crop extent around the origin.
pub fn trajectory_overlay(
    obs: &ScenarioObservation,
    trajectories: &Array3<f64>,
    colors: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    let (_, rh, rw) = obs.raster.dim();
    let scale = 4usize;
    let mut img = image::RgbImage::new((rw * scale) as u32, (rh * scale) as u32);
    for y in 0..rh {
        for x in 0..rw {
            // dim semantic colors as background
            let c = [
                (obs.raster[[0, y, x]] * 130.0) as u8 + 40,
                (obs.raster[[1, y, x]] * 130.0) as u8 + 40,
                (obs.raster[[2, y, x]] * 130.0) as u8 + 40,
            ];
            for py in 0..scale {
                for px in 0..scale {
                    img.put_pixel(
                        (x * scale + px) as u32,
                        ((rh - 1 - y) * scale + py) as u32,
                        image::Rgb(c),
                    );
                }
            }
        }
    }
    let world_to_px = |p: [f64; 2]| -> [f64; 2] {
        let half = obs.spec.crop_extent / 2.0;
        let u = (p[0] - obs.spec.origin[0] + half) / obs.spec.crop_extent;
        let v = (p[1] - obs.spec.origin[1] + half) / obs.spec.crop_extent;
        [
            u * (rw * scale) as f64,
            (1.0 - v) * (rh * scale) as f64,
        ]
    };
    // history in white
    for w in obs.target_history.windows(2) {
        draw_segment(&mut img, world_to_px(w[0]), world_to_px(w[1]), [255, 255, 255]);
    }
    let (n, t_f, _) = trajectories.dim();
    for i in 0..n {
        let color = colors[i % colors.len()];
        for ti in 1..t_f {
            let a = [trajectories[[i, ti - 1, 0]], trajectories[[i, ti - 1, 1]]];
            let b = [trajectories[[i, ti, 0]], trajectories[[i, ti, 1]]];
            draw_segment(&mut img, world_to_px(a), world_to_px(b), color);
        }
    }
    // ground truth in black
    for w in obs.gt_future.windows(2) {
        draw_segment(&mut img, world_to_px(w[0]), world_to_px(w[1]), [0, 0, 0]);
    }
    img.save(path)
        .map_err(|e| crate::error::Error::data(format!("saving {}: {e}", path.display())))?;
    Ok(())
}

/// Distinct overlay colors.
pub fn palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64;
            let r = (0.5 + 0.5 * (6.28 * h).cos()) * 255.0;
            let g = (0.5 + 0.5 * (6.28 * (h + 0.33)).cos()) * 255.0;
            let b = (0.5 + 0.5 * (6.28 * (h + 0.67)).cos()) * 255.0;
            [r as u8, g as u8, b as u8]
        })
        .collect()
}
