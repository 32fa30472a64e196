//! Synthetic scenario generation, dataset loading and prediction dumps.
//!
//! Synthetic worlds are road networks over a semantic grid (road, obstacle,
//! terrain) walked by goal-directed agents that choose branches stochastically
//! at junctions, so ground-truth futures are genuinely multimodal. Corpora
//! persist as a `trajectories.csv` plus one RGB semantic raster per scene and
//! load back through the same code path real datasets would use.

use crate::encoders::{NeighborTrack, ScenarioObservation};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Semantic classes of the synthetic worlds.
pub const SEM_ROAD: u8 = 0;
pub const SEM_OBSTACLE: u8 = 1;
pub const SEM_TERRAIN: u8 = 2;

/// World units per semantic cell.
pub const SEM_CELL: f64 = 8.0;
/// World units per raster pixel.
pub const RASTER_PX: f64 = 4.0;

/// Format a float with 9 significant digits (the on-disk convention).
pub fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// One row of `trajectories.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub scene_id: u64,
    pub agent_id: u64,
    pub frame: u64,
    pub x: f64,
    pub y: f64,
}

/// One scene: a semantic grid plus the tracks recorded in it.
#[derive(Clone, Debug)]
pub struct Scene {
    pub scene_id: u64,
    /// `[cells_y, cells_x]`, values in `{SEM_ROAD, SEM_OBSTACLE, SEM_TERRAIN}`.
    pub semantic: Array2<u8>,
    pub records: Vec<DatasetRecord>,
}

impl Scene {
    /// World side length.
    pub fn world_size(&self) -> f64 {
        self.semantic.dim().0 as f64 * SEM_CELL
    }

    /// Semantic class at a world point; terrain outside the scene.
    pub fn semantic_at(&self, p: [f64; 2]) -> u8 {
        let (h, w) = self.semantic.dim();
        let cx = (p[0] / SEM_CELL).floor();
        let cy = (p[1] / SEM_CELL).floor();
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            return SEM_TERRAIN;
        }
        self.semantic[[cy as usize, cx as usize]]
    }
}

/// A full corpus with its timing metadata.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub dt: f64,
}

/// Synthetic-generation parameters.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_agents: usize,
    pub n_frames: usize,
    /// Semantic cells per scene side.
    pub scene_cells: usize,
    pub dt: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_scenes: 4,
            n_agents: 12,
            n_frames: 30,
            scene_cells: 40,
            dt: 0.4,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

fn build_semantic(cells: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let mut sem = Array2::from_elem((cells, cells), SEM_TERRAIN);
    // at least one horizontal and one vertical road so junctions exist
    let n_h = 1 + rng.gen_range(0..2);
    let n_v = 1 + rng.gen_range(0..2);
    let mut carve = |horizontal: bool, rng: &mut ChaCha8Rng| {
        let width = rng.gen_range(2..4usize);
        let at = rng.gen_range(2..cells - 2 - width);
        for i in 0..cells {
            for j in at..at + width {
                if horizontal {
                    sem[[j, i]] = SEM_ROAD;
                } else {
                    sem[[i, j]] = SEM_ROAD;
                }
            }
        }
    };
    for _ in 0..n_h {
        carve(true, rng);
    }
    for _ in 0..n_v {
        carve(false, rng);
    }
    // obstacle blobs on terrain
    for _ in 0..rng.gen_range(3..7) {
        let bh = rng.gen_range(2..5usize);
        let bw = rng.gen_range(2..5usize);
        let y0 = rng.gen_range(0..cells - bh);
        let x0 = rng.gen_range(0..cells - bw);
        let clear = (y0..y0 + bh).all(|y| (x0..x0 + bw).all(|x| sem[[y, x]] == SEM_TERRAIN));
        if clear {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    sem[[y, x]] = SEM_OBSTACLE;
                }
            }
        }
    }
    sem
}

const DIRS: [[i64; 2]; 4] = [[1, 0], [-1, 0], [0, 1], [0, -1]];

fn road_neighbors(sem: &Array2<u8>, cell: [usize; 2]) -> Vec<[i64; 2]> {
    let (h, w) = sem.dim();
    DIRS.iter()
        .filter(|d| {
            let nx = cell[0] as i64 + d[0];
            let ny = cell[1] as i64 + d[1];
            nx >= 0
                && ny >= 0
                && nx < w as i64
                && ny < h as i64
                && sem[[ny as usize, nx as usize]] == SEM_ROAD
        })
        .cloned()
        .collect()
}

fn cell_center(cell: [usize; 2]) -> [f64; 2] {
    [
        (cell[0] as f64 + 0.5) * SEM_CELL,
        (cell[1] as f64 + 0.5) * SEM_CELL,
    ]
}

/// Walk one agent over the road network. Branch choices at junctions are
/// stochastic (straight preferred), so futures from a junction are
/// multimodal. Positions stay on road cells.
fn walk_agent(
    sem: &Array2<u8>,
    n_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<[f64; 2]>> {
    let (h, w) = sem.dim();
    // spawn on a road cell with at least one road neighbor
    let mut spawn = None;
    for _ in 0..200 {
        let c = [rng.gen_range(0..w), rng.gen_range(0..h)];
        if sem[[c[1], c[0]]] == SEM_ROAD && !road_neighbors(sem, c).is_empty() {
            spawn = Some(c);
            break;
        }
    }
    let mut cur = spawn?;
    let dirs = road_neighbors(sem, cur);
    let mut dir = dirs[rng.gen_range(0..dirs.len())];
    let mut next = [
        (cur[0] as i64 + dir[0]) as usize,
        (cur[1] as i64 + dir[1]) as usize,
    ];
    let speed = rng.gen_range(0.45..0.95); // cells per frame
    let mut progress = rng.gen_range(0.0..0.5);
    let mut out = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        progress += speed;
        while progress >= 1.0 {
            progress -= 1.0;
            cur = next;
            // candidate continuations, no reversing unless dead end
            let options: Vec<[i64; 2]> = road_neighbors(sem, cur)
                .into_iter()
                .filter(|d| !(d[0] == -dir[0] && d[1] == -dir[1]))
                .collect();
            dir = if options.is_empty() {
                [-dir[0], -dir[1]]
            } else if options.contains(&dir) && rng.gen::<f64>() < 0.6 {
                dir
            } else {
                options[rng.gen_range(0..options.len())]
            };
            next = [
                (cur[0] as i64 + dir[0]) as usize,
                (cur[1] as i64 + dir[1]) as usize,
            ];
        }
        let a = cell_center(cur);
        let b = cell_center(next);
        let mut p = [
            a[0] + (b[0] - a[0]) * progress,
            a[1] + (b[1] - a[1]) * progress,
        ];
        // small lateral jitter, dropped when it would leave the road
        let perp = [-(dir[1] as f64), dir[0] as f64];
        let mag = rng.gen_range(-1.2..1.2);
        let q = [p[0] + perp[0] * mag, p[1] + perp[1] * mag];
        let qc = [(q[0] / SEM_CELL).floor() as i64, (q[1] / SEM_CELL).floor() as i64];
        if qc[0] >= 0
            && qc[1] >= 0
            && qc[0] < w as i64
            && qc[1] < h as i64
            && sem[[qc[1] as usize, qc[0] as usize]] == SEM_ROAD
        {
            p = q;
        }
        out.push(p);
    }
    Some(out)
}

/// Generate a deterministic synthetic corpus.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.n_scenes == 0 || spec.n_agents == 0 {
        return Err(Error::config("need at least one scene and one agent"));
    }
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for s in 0..spec.n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(s as u64),
        );
        let semantic = build_semantic(spec.scene_cells, &mut rng);
        let mut records = Vec::new();
        for a in 0..spec.n_agents {
            let mut arng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x2545_f491_4f6c_dd1d)
                    .wrapping_add((s * 10_000 + a) as u64),
            );
            if let Some(track) = walk_agent(&semantic, spec.n_frames, &mut arng) {
                for (f, p) in track.iter().enumerate() {
                    records.push(DatasetRecord {
                        scene_id: s as u64,
                        agent_id: a as u64,
                        frame: f as u64,
                        x: p[0],
                        y: p[1],
                    });
                }
            }
        }
        scenes.push(Scene {
            scene_id: s as u64,
            semantic,
            records,
        });
    }
    Ok(Corpus {
        scenes,
        dt: spec.dt,
    })
}

/// Fixed scene with one T-junction for branch-frequency checks: a horizontal
/// road with a vertical branch rising from its middle.
pub fn t_junction_scene(cells: usize) -> Scene {
    let mut sem = Array2::from_elem((cells, cells), SEM_TERRAIN);
    let mid = cells / 2;
    for x in 0..cells {
        sem[[mid, x]] = SEM_ROAD;
    }
    for y in mid..cells {
        sem[[y, mid]] = SEM_ROAD;
    }
    Scene {
        scene_id: 0,
        semantic: sem,
        records: Vec::new(),
    }
}

/// Walk `n` agents from the west end of the T-junction scene and count how
/// many leave through the north branch vs the east arm.
pub fn t_junction_branch_counts(scene: &Scene, n: usize, seed: u64) -> (usize, usize) {
    let cells = scene.semantic.dim().0;
    let mid = cells / 2;
    let (mut north, mut east) = (0, 0);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        // deterministic spawn on the west arm heading east
        let mut cur;
        let mut dir = [1i64, 0];
        let mut next = [2usize, mid];
        for _ in 0..4 * cells {
            cur = next;
            let options: Vec<[i64; 2]> = road_neighbors(&scene.semantic, cur)
                .into_iter()
                .filter(|d| !(d[0] == -dir[0] && d[1] == -dir[1]))
                .collect();
            if options.is_empty() {
                break;
            }
            dir = if options.contains(&dir) && rng.gen::<f64>() < 0.6 {
                dir
            } else {
                options[rng.gen_range(0..options.len())]
            };
            next = [
                (cur[0] as i64 + dir[0]) as usize,
                (cur[1] as i64 + dir[1]) as usize,
            ];
            if next[0] == cells - 1 {
                east += 1;
                break;
            }
            if next[1] == cells - 1 {
                north += 1;
                break;
            }
        }
    }
    (north, east)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Axis-aligned corpus transforms: four rotations times optional mirror.
#[derive(Clone, Copy, Debug)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Augmentation {
    pub fn all() -> Vec<Augmentation> {
        let mut v = Vec::with_capacity(8);
        for mirror in [false, true] {
            for q in 0..4u8 {
                v.push(Augmentation {
                    quarter_turns: q,
                    mirror,
                });
            }
        }
        v
    }

    fn apply_point(&self, p: [f64; 2], world: f64) -> [f64; 2] {
        let mut u = p;
        if self.mirror {
            u = [world - u[0], u[1]];
        }
        for _ in 0..self.quarter_turns {
            u = [world - u[1], u[0]];
        }
        u
    }
}

/// Expand a corpus with rotated/mirrored copies (the identity variant keeps
/// the original scene ids; copies get fresh ids).
pub fn augment_corpus(corpus: &Corpus) -> Corpus {
    let mut scenes = Vec::new();
    let mut next_id = corpus.scenes.iter().map(|s| s.scene_id + 1).max().unwrap_or(0);
    for scene in &corpus.scenes {
        for aug in Augmentation::all() {
            if aug.quarter_turns == 0 && !aug.mirror {
                scenes.push(scene.clone());
                continue;
            }
            let cells = scene.semantic.dim().0;
            let world = scene.world_size();
            let mut sem = Array2::from_elem((cells, cells), SEM_TERRAIN);
            for y in 0..cells {
                for x in 0..cells {
                    // transform the cell center and write into the target cell
                    let p = aug.apply_point(cell_center([x, y]), world);
                    let tx = (p[0] / SEM_CELL).floor() as usize;
                    let ty = (p[1] / SEM_CELL).floor() as usize;
                    sem[[ty.min(cells - 1), tx.min(cells - 1)]] = scene.semantic[[y, x]];
                }
            }
            let records = scene
                .records
                .iter()
                .map(|r| {
                    let p = aug.apply_point([r.x, r.y], world);
                    DatasetRecord {
                        scene_id: next_id,
                        x: p[0],
                        y: p[1],
                        ..r.clone()
                    }
                })
                .collect();
            scenes.push(Scene {
                scene_id: next_id,
                semantic: sem,
                records,
            });
            next_id += 1;
        }
    }
    Corpus {
        scenes,
        dt: corpus.dt,
    }
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Windowing parameters.
#[derive(Clone, Copy, Debug)]
pub struct WindowConfig {
    pub t_p: usize,
    pub t_f: usize,
    pub grid_size: usize,
    pub crop_extent: f64,
}

/// Crop the scene's semantic raster around `origin` into a one-hot
/// `[3, 2g, 2g]` image.
pub fn crop_raster(scene: &Scene, origin: [f64; 2], cfg: &WindowConfig) -> Array3<f64> {
    let px = 2 * cfg.grid_size;
    let mut out = Array3::zeros((3, px, px));
    let world_px = cfg.crop_extent / px as f64;
    for y in 0..px {
        for x in 0..px {
            let p = [
                origin[0] - cfg.crop_extent / 2.0 + (x as f64 + 0.5) * world_px,
                origin[1] - cfg.crop_extent / 2.0 + (y as f64 + 0.5) * world_px,
            ];
            let c = scene.semantic_at(p) as usize;
            out[[c, y, x]] = 1.0;
        }
    }
    out
}

/// Road mask at MDP resolution: 1 where the cell center sits on road.
pub fn crop_road_mask(scene: &Scene, spec: &GridSpec) -> Array2<f64> {
    let g = spec.grid_size;
    let mut mask = Array2::zeros((g, g));
    for y in 0..g {
        for x in 0..g {
            let p = spec.grid_to_world([x as f64, y as f64]);
            if scene.semantic_at(p) == SEM_ROAD {
                mask[[y, x]] = 1.0;
            }
        }
    }
    mask
}

/// Slide stride-1 windows over every agent track and assemble scenarios.
/// Tracks shorter than `t_p + t_f` are skipped (the count is logged).
pub fn windows(corpus: &Corpus, cfg: &WindowConfig) -> Result<Vec<ScenarioObservation>> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for scene in &corpus.scenes {
        let mut tracks: BTreeMap<u64, Vec<&DatasetRecord>> = BTreeMap::new();
        for r in &scene.records {
            tracks.entry(r.agent_id).or_default().push(r);
        }
        for t in tracks.values_mut() {
            t.sort_by_key(|r| r.frame);
        }
        let need = cfg.t_p + cfg.t_f;
        for (agent_id, track) in &tracks {
            if track.len() < need {
                skipped += 1;
                continue;
            }
            for start in 0..=track.len() - need {
                let hist: Vec<[f64; 2]> = track[start..start + cfg.t_p]
                    .iter()
                    .map(|r| [r.x, r.y])
                    .collect();
                let future: Vec<[f64; 2]> = track[start + cfg.t_p..start + need]
                    .iter()
                    .map(|r| [r.x, r.y])
                    .collect();
                let origin = hist[cfg.t_p - 1];
                let spec = GridSpec::new(cfg.grid_size, cfg.crop_extent, origin)?;
                let frame0 = track[start].frame;
                // neighbors: other agents present over the history window and
                // inside the crop at t = 0
                let mut neighbors = Vec::new();
                for (nb_id, nb_track) in &tracks {
                    if nb_id == agent_id {
                        continue;
                    }
                    let by_frame: BTreeMap<u64, [f64; 2]> =
                        nb_track.iter().map(|r| (r.frame, [r.x, r.y])).collect();
                    let mut points = Vec::with_capacity(cfg.t_p);
                    let mut valid = Vec::with_capacity(cfg.t_p);
                    for dt_i in 0..cfg.t_p {
                        match by_frame.get(&(frame0 + dt_i as u64)) {
                            Some(p) => {
                                points.push(*p);
                                valid.push(true);
                            }
                            None => {
                                points.push([0.0, 0.0]);
                                valid.push(false);
                            }
                        }
                    }
                    let t0 = cfg.t_p - 1;
                    if !valid[t0] {
                        continue;
                    }
                    let half = cfg.crop_extent / 2.0;
                    let inside = (points[t0][0] - origin[0]).abs() <= half
                        && (points[t0][1] - origin[1]).abs() <= half;
                    if !inside {
                        continue;
                    }
                    neighbors.push(NeighborTrack {
                        agent_id: *nb_id,
                        points,
                        valid,
                    });
                }
                out.push(ScenarioObservation {
                    target_history: hist,
                    neighbors,
                    raster: crop_raster(scene, origin, cfg),
                    gt_future: future,
                    dt: corpus.dt,
                    spec,
                    road_mask: Some(crop_road_mask(scene, &spec)),
                    example_id: format!("{}_{}_{}", scene.scene_id, agent_id, frame0),
                });
            }
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} tracks shorter than t_p + t_f");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus persistence
// ---------------------------------------------------------------------------

/// Write a corpus as `corpus.toml` + `trajectories.csv` + per-scene PNGs.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("scenes"))?;
    let meta = format!(
        "dt = {}\nsem_cell = {}\nraster_px = {}\n",
        corpus.dt, SEM_CELL, RASTER_PX
    );
    std::fs::write(dir.join("corpus.toml"), meta)?;
    let mut csv = BufWriter::new(std::fs::File::create(dir.join("trajectories.csv"))?);
    writeln!(csv, "scene_id,agent_id,frame,x,y")?;
    for scene in &corpus.scenes {
        for r in &scene.records {
            writeln!(
                csv,
                "{},{},{},{},{}",
                r.scene_id,
                r.agent_id,
                r.frame,
                format_sig9(r.x),
                format_sig9(r.y)
            )?;
        }
    }
    csv.flush()?;
    for scene in &corpus.scenes {
        let cells = scene.semantic.dim().0;
        let px = (cells as f64 * SEM_CELL / RASTER_PX) as usize;
        let mut img = image::RgbImage::new(px as u32, px as u32);
        for py in 0..px {
            for px_x in 0..px {
                let p = [
                    (px_x as f64 + 0.5) * RASTER_PX,
                    (py as f64 + 0.5) * RASTER_PX,
                ];
                let sem = scene.semantic_at(p);
                let mut rgb = [0u8; 3];
                rgb[sem as usize] = 255;
                // image rows run top-down; world y runs bottom-up
                img.put_pixel(px_x as u32, (px - 1 - py) as u32, image::Rgb(rgb));
            }
        }
        img.save(dir.join("scenes").join(format!("scene_{}.png", scene.scene_id)))
            .map_err(|e| Error::data(format!("writing scene raster: {e}")))?;
    }
    Ok(())
}

/// Load a corpus written by [`write_corpus`] (or following the same schema).
/// Malformed CSV rows are rejected with their line numbers.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta = std::fs::read_to_string(dir.join("corpus.toml"))?;
    let table: toml::Table = meta
        .parse()
        .map_err(|e| Error::data(format!("corpus.toml: {e}")))?;
    let dt = table
        .get("dt")
        .and_then(|v| v.as_float())
        .ok_or_else(|| Error::data("corpus.toml missing dt"))?;

    let file = std::fs::File::open(dir.join("trajectories.csv"))?;
    let reader = std::io::BufReader::new(file);
    let mut by_scene: BTreeMap<u64, Vec<DatasetRecord>> = BTreeMap::new();
    let mut bad_lines = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if line.trim() != "scene_id,agent_id,frame,x,y" {
                return Err(Error::data("trajectories.csv has an unexpected header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = (|| -> Option<DatasetRecord> {
            if fields.len() != 5 {
                return None;
            }
            Some(DatasetRecord {
                scene_id: fields[0].trim().parse().ok()?,
                agent_id: fields[1].trim().parse().ok()?,
                frame: fields[2].trim().parse().ok()?,
                x: fields[3].trim().parse().ok()?,
                y: fields[4].trim().parse().ok()?,
            })
        })();
        match parsed {
            Some(r) => by_scene.entry(r.scene_id).or_default().push(r),
            None => bad_lines.push(lineno + 1),
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::data(format!(
            "malformed trajectories.csv rows at lines {bad_lines:?}"
        )));
    }

    let mut scenes = Vec::new();
    for (scene_id, records) in by_scene {
        let path = dir.join("scenes").join(format!("scene_{scene_id}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let px = img.width() as usize;
        let cells = (px as f64 * RASTER_PX / SEM_CELL) as usize;
        let mut semantic = Array2::from_elem((cells, cells), SEM_TERRAIN);
        for cy in 0..cells {
            for cx in 0..cells {
                let p = cell_center([cx, cy]);
                let ix = (p[0] / RASTER_PX) as u32;
                let iy_world = (p[1] / RASTER_PX) as u32;
                let iy = px as u32 - 1 - iy_world;
                let rgb = img.get_pixel(ix.min(px as u32 - 1), iy.min(px as u32 - 1));
                semantic[[cy, cx]] = if rgb[0] > 127 {
                    SEM_ROAD
                } else if rgb[1] > 127 {
                    SEM_OBSTACLE
                } else {
                    SEM_TERRAIN
                };
            }
        }
        scenes.push(Scene {
            scene_id,
            semantic,
            records,
        });
    }
    Ok(Corpus { scenes, dt })
}

// ---------------------------------------------------------------------------
// Prediction dump
// ---------------------------------------------------------------------------

/// One line of the prediction dump.
#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub example_id: String,
    /// `C x t_f x 2` distribution samples.
    pub samples: Array3<f64>,
    /// `K x t_f x 2` representative trajectories.
    pub representatives: Array3<f64>,
    pub metrics: Vec<(String, f64)>,
}

fn write_traj_json(out: &mut String, a: &Array3<f64>) {
    let (n, t_f, _) = a.dim();
    out.push('[');
    for i in 0..n {
        if i > 0 {
            out.push(',');
        }
        out.push('[');
        for t in 0..t_f {
            if t > 0 {
                out.push(',');
            }
            out.push_str(&format!(
                "[{},{}]",
                format_sig9(a[[i, t, 0]]),
                format_sig9(a[[i, t, 1]])
            ));
        }
        out.push(']');
    }
    out.push(']');
}

/// Write line-delimited prediction records with 9-significant-digit floats.
pub fn write_prediction_dump<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        let mut line = String::new();
        line.push_str(&format!(
            "{{\"example_id\":{:?},\"samples\":",
            r.example_id
        ));
        write_traj_json(&mut line, &r.samples);
        line.push_str(",\"representatives\":");
        write_traj_json(&mut line, &r.representatives);
        line.push_str(",\"metrics\":{");
        for (i, (k, v)) in r.metrics.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&format!("{k:?}:{}", format_sig9(*v)));
        }
        line.push_str("}}");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_traj(v: &serde_json::Value) -> Result<Array3<f64>> {
    let outer = v.as_array().ok_or_else(|| Error::data("bad trajectory array"))?;
    let n = outer.len();
    let t_f = outer
        .first()
        .and_then(|t| t.as_array())
        .map(|t| t.len())
        .unwrap_or(0);
    let mut a = Array3::zeros((n, t_f, 2));
    for (i, tr) in outer.iter().enumerate() {
        let tr = tr.as_array().ok_or_else(|| Error::data("bad trajectory"))?;
        for (t, p) in tr.iter().enumerate() {
            let p = p.as_array().ok_or_else(|| Error::data("bad point"))?;
            a[[i, t, 0]] = p[0].as_f64().ok_or_else(|| Error::data("bad coord"))?;
            a[[i, t, 1]] = p[1].as_f64().ok_or_else(|| Error::data("bad coord"))?;
        }
    }
    Ok(a)
}

/// Read a dump written by [`write_prediction_dump`].
pub fn read_prediction_dump<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("dump line: {e}")))?;
        let metrics = v["metrics"]
            .as_object()
            .ok_or_else(|| Error::data("missing metrics"))?
            .iter()
            .map(|(k, val)| Ok((k.clone(), val.as_f64().ok_or_else(|| Error::data("bad metric"))?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(PredictionRecord {
            example_id: v["example_id"]
                .as_str()
                .ok_or_else(|| Error::data("missing example_id"))?
                .to_string(),
            samples: parse_traj(&v["samples"])?,
            representatives: parse_traj(&v["representatives"])?,
            metrics,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 11,
            n_scenes: 2,
            n_agents: 5,
            n_frames: 24,
            scene_cells: 30,
            dt: 0.4,
        }
    }

    #[test]
    fn same_seed_identical_corpora() {
        let a = generate_synthetic(&tiny_spec()).unwrap();
        let b = generate_synthetic(&tiny_spec()).unwrap();
        assert_eq!(a.scenes.len(), b.scenes.len());
        for (sa, sb) in a.scenes.iter().zip(b.scenes.iter()) {
            assert_eq!(sa.semantic, sb.semantic);
            assert_eq!(sa.records, sb.records);
        }
    }

    #[test]
    fn tracks_never_enter_obstacles() {
        let corpus = generate_synthetic(&tiny_spec()).unwrap();
        for scene in &corpus.scenes {
            for r in &scene.records {
                let sem = scene.semantic_at([r.x, r.y]);
                assert_ne!(sem, SEM_OBSTACLE, "agent in obstacle at ({}, {})", r.x, r.y);
                assert_eq!(sem, SEM_ROAD, "walkers stay on road by construction");
            }
        }
    }

    #[test]
    fn t_junction_yields_both_branches() {
        let scene = t_junction_scene(21);
        let (north, east) = t_junction_branch_counts(&scene, 1000, 3);
        assert!(north > 50, "north branch taken {north} times");
        assert!(east > 50, "east branch taken {east} times");
        assert_eq!(north + east, 1000);
    }

    #[test]
    fn window_arithmetic() {
        // a single-agent track of exactly t_p + t_f points -> 1 scenario
        let cfg = WindowConfig {
            t_p: 4,
            t_f: 3,
            grid_size: 5,
            crop_extent: 40.0,
        };
        let mut scene = t_junction_scene(15);
        let mid = 7.5 * SEM_CELL;
        for f in 0..7u64 {
            scene.records.push(DatasetRecord {
                scene_id: 0,
                agent_id: 1,
                frame: f,
                x: 20.0 + f as f64 * 2.0,
                y: mid,
            });
        }
        let corpus = Corpus {
            scenes: vec![scene.clone()],
            dt: 0.4,
        };
        assert_eq!(windows(&corpus, &cfg).unwrap().len(), 1);
        // one more point -> 2 scenarios
        scene.records.push(DatasetRecord {
            scene_id: 0,
            agent_id: 1,
            frame: 7,
            x: 34.0,
            y: mid,
        });
        let corpus2 = Corpus {
            scenes: vec![scene],
            dt: 0.4,
        };
        assert_eq!(windows(&corpus2, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn neighbor_outside_crop_excluded() {
        let cfg = WindowConfig {
            t_p: 3,
            t_f: 2,
            grid_size: 5,
            crop_extent: 40.0,
        };
        let mut scene = t_junction_scene(15);
        let mid = 7.5 * SEM_CELL;
        for f in 0..5u64 {
            scene.records.push(DatasetRecord {
                scene_id: 0,
                agent_id: 1,
                frame: f,
                x: 40.0 + f as f64,
                y: mid,
            });
            // near neighbor: inside the 40-unit crop at t=0
            scene.records.push(DatasetRecord {
                scene_id: 0,
                agent_id: 2,
                frame: f,
                x: 50.0 + f as f64,
                y: mid,
            });
            // far neighbor: outside
            scene.records.push(DatasetRecord {
                scene_id: 0,
                agent_id: 3,
                frame: f,
                x: 90.0 + f as f64,
                y: mid,
            });
        }
        let corpus = Corpus {
            scenes: vec![scene],
            dt: 0.4,
        };
        let ws = windows(&corpus, &cfg).unwrap();
        let target = ws.iter().find(|w| w.example_id.starts_with("0_1_")).unwrap();
        let ids: Vec<u64> = target.neighbors.iter().map(|n| n.agent_id).collect();
        assert!(ids.contains(&2));
        assert!(!ids.contains(&3));
    }

    #[test]
    fn crop_locality() {
        // semantic edits outside the crop do not change the cropped raster
        let cfg = WindowConfig {
            t_p: 2,
            t_f: 2,
            grid_size: 5,
            crop_extent: 40.0,
        };
        let scene = t_junction_scene(15);
        let origin = [7.5 * SEM_CELL, 7.5 * SEM_CELL];
        let a = crop_raster(&scene, origin, &cfg);
        let mut far = scene.clone();
        far.semantic[[0, 0]] = SEM_OBSTACLE; // ~60 units away from the crop
        let b = crop_raster(&far, origin, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(&tiny_spec()).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.scenes.len(), corpus.scenes.len());
        assert_eq!(loaded.dt, corpus.dt);
        for (a, b) in corpus.scenes.iter().zip(loaded.scenes.iter()) {
            assert_eq!(a.semantic, b.semantic, "semantic grid must survive PNG");
            assert_eq!(a.records.len(), b.records.len());
            for (ra, rb) in a.records.iter().zip(b.records.iter()) {
                assert_eq!(ra.scene_id, rb.scene_id);
                assert_eq!(ra.frame, rb.frame);
                // coordinates go through 9-significant-digit text
                assert!((ra.x - rb.x).abs() < 1e-6);
                assert!((ra.y - rb.y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn malformed_csv_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(&tiny_spec()).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let csv = dir.path().join("trajectories.csv");
        let mut content = std::fs::read_to_string(&csv).unwrap();
        content.push_str("0,not_a_number,3,1.0\n");
        std::fs::write(&csv, content).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines"), "{msg}");
    }

    #[test]
    fn augmentation_preserves_semantics_of_tracks() {
        let corpus = generate_synthetic(&tiny_spec()).unwrap();
        let aug = augment_corpus(&corpus);
        assert_eq!(aug.scenes.len(), corpus.scenes.len() * 8);
        for scene in &aug.scenes {
            for r in &scene.records {
                assert_eq!(
                    scene.semantic_at([r.x, r.y]),
                    SEM_ROAD,
                    "augmented tracks must stay on augmented roads"
                );
            }
        }
    }

    #[test]
    fn prediction_dump_round_trips_losslessly() {
        let rec = PredictionRecord {
            example_id: "0_1_2".into(),
            samples: Array3::from_shape_fn((3, 4, 2), |(i, t, d)| {
                (i * 100 + t * 10 + d) as f64 * 0.317 + 0.1234567891
            }),
            representatives: Array3::from_shape_fn((2, 4, 2), |(i, t, d)| {
                -((i * 100 + t * 10 + d) as f64) * 1.7e-3
            }),
            metrics: vec![("min_ade".into(), 1.25), ("rf".into(), 3.5)],
        };
        let mut buf = Vec::new();
        write_prediction_dump(&mut buf, &[rec]).unwrap();
        let first = String::from_utf8(buf.clone()).unwrap();
        let read = read_prediction_dump(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(read.len(), 1);
        let mut buf2 = Vec::new();
        write_prediction_dump(&mut buf2, &read).unwrap();
        let second = String::from_utf8(buf2).unwrap();
        assert_eq!(first, second, "write -> read -> write must be identical");
    }

    #[test]
    fn format_sig9_stable_under_reparse() {
        for v in [0.1 + 0.2, 1.0 / 3.0, -7.25e-11, 123456.789, 0.0] {
            let s = format_sig9(v);
            let p: f64 = s.parse().unwrap();
            assert_eq!(format_sig9(p), s);
        }
    }
}
