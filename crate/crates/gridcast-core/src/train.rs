//! Four-stage training orchestration and evaluation.
//!
//! Stage 1 trains the observation encoder and occupancy decoder on the
//! occupancy NLL; stage 2 trains the policy network and trajectory decoder
//! on the symmetric cross-entropy with the encoder and occupancy decoder
//! frozen; stage 3 trains the refinement network on the variety loss with
//! everything upstream frozen; stage 4 fine-tunes the whole model on the
//! variety loss at a reduced learning rate.
//!
//! Determinism: scenario order, per-scenario noise and dropout all derive
//! from the run seed; batch gradients are reduced in scenario order, so a
//! config + seed pair reproduces its metrics exactly.

use crate::checkpoint;
use crate::config::{DatasetSource, RunConfig};
use crate::data::{
    self, augment_corpus, generate_synthetic, load_corpus, windows, SyntheticSpec, WindowConfig,
};
use crate::encoders::ScenarioObservation;
use crate::error::{Error, Result};
use crate::model::{Model, Trainability};
use crate::nn::{collect_grads, Adam};
use crate::objectives::{min_ade_fde, offroad_counts, variety_loss, OffroadCounts};
use crate::tape::{Arr, ParamId, Tape};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Training stages in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ogm,
    Dist,
    Refine,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ogm, Stage::Dist, Stage::Refine, Stage::Finetune];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ogm => "ogm",
            Stage::Dist => "dist",
            Stage::Refine => "refine",
            Stage::Finetune => "finetune",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            Stage::Ogm => 0,
            Stage::Dist => 1,
            Stage::Refine => 2,
            Stage::Finetune => 3,
        }
    }

    fn trainability(&self) -> Trainability {
        match self {
            Stage::Ogm => Trainability {
                encoder: true,
                ogm: true,
                ..Default::default()
            },
            Stage::Dist => Trainability {
                policy: true,
                decoder: true,
                ..Default::default()
            },
            Stage::Refine => Trainability {
                refine: true,
                ..Default::default()
            },
            Stage::Finetune => Trainability::all(),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ogm" => Ok(Stage::Ogm),
            "dist" => Ok(Stage::Dist),
            "refine" => Ok(Stage::Refine),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Parse `all` or a comma-separated stage list.
pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    if s == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub train_loss: f64,
    pub heldout: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochReport>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-(stage, epoch, scenario) seed.
fn derive_seed(base: u64, stage: usize, epoch: usize, idx: usize) -> u64 {
    mix(base ^ mix(stage as u64) ^ mix(0x100 + epoch as u64) ^ mix(0x10000 + idx as u64))
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// Resolve the configured dataset into train and held-out scenario lists.
/// Splitting is by scene when possible so held-out scenes are unseen;
/// augmentation applies to the training scenes only.
pub fn prepare_scenarios(
    cfg: &RunConfig,
) -> Result<(Vec<ScenarioObservation>, Vec<ScenarioObservation>)> {
    let corpus = match &cfg.dataset {
        DatasetSource::Path { path } => load_corpus(Path::new(path))?,
        DatasetSource::Synthetic {
            synthetic_seed,
            n_scenes,
            n_agents,
            n_frames,
            scene_cells,
        } => generate_synthetic(&SyntheticSpec {
            seed: *synthetic_seed,
            n_scenes: *n_scenes,
            n_agents: *n_agents,
            n_frames: *n_frames,
            scene_cells: *scene_cells,
            dt: 0.4,
        })?,
    };
    let wcfg = WindowConfig {
        t_p: cfg.t_p,
        t_f: cfg.t_f,
        grid_size: cfg.grid_size,
        crop_extent: cfg.crop_extent,
    };
    let (mut train, mut held) = if corpus.scenes.len() > 1 {
        // hold out whole scenes so evaluation sees unseen layouts
        let n_held = ((corpus.scenes.len() as f64 * cfg.heldout_fraction).ceil() as usize)
            .clamp(1, corpus.scenes.len() - 1);
        let split = corpus.scenes.len() - n_held;
        let mut train_corpus = data::Corpus {
            scenes: corpus.scenes[..split].to_vec(),
            dt: corpus.dt,
        };
        let held_corpus = data::Corpus {
            scenes: corpus.scenes[split..].to_vec(),
            dt: corpus.dt,
        };
        if cfg.augment {
            train_corpus = augment_corpus(&train_corpus);
        }
        (windows(&train_corpus, &wcfg)?, windows(&held_corpus, &wcfg)?)
    } else {
        // single scene: window split; augmentation would leak rotated
        // copies of held-out windows into training, so skip it
        if cfg.augment {
            log::warn!("augmentation skipped: single-scene corpus uses a window split");
        }
        let mut all = windows(&corpus, &wcfg)?;
        let n_held = ((all.len() as f64 * cfg.heldout_fraction).ceil() as usize)
            .clamp(1, all.len().saturating_sub(1).max(1));
        let held = all.split_off(all.len().saturating_sub(n_held));
        (all, held)
    };
    subsample(&mut train, cfg.max_train_scenarios);
    subsample(&mut held, cfg.max_heldout_scenarios);
    if train.is_empty() || held.is_empty() {
        return Err(Error::data("dataset produced no scenarios"));
    }
    Ok((train, held))
}

/// Deterministic even-stride subsample down to `cap` (0 = keep all).
fn subsample(v: &mut Vec<ScenarioObservation>, cap: usize) {
    if cap == 0 || v.len() <= cap {
        return;
    }
    let n = v.len();
    let picked: Vec<ScenarioObservation> = (0..cap)
        .map(|i| v[i * n / cap].clone())
        .collect();
    *v = picked;
}

// ---------------------------------------------------------------------------
// Stage training
// ---------------------------------------------------------------------------

type LossAndGrads = (f64, HashMap<ParamId, Arr>);

fn scenario_pass(
    model: &Model,
    stage: Stage,
    obs: &ScenarioObservation,
    cached_samples: Option<&(Array3<f64>, Array1<f64>)>,
    seed: u64,
) -> Result<LossAndGrads> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let flags = stage.trainability();
    let loss_var = match stage {
        Stage::Ogm => model.stage1_nll(&mut t, obs, flags)?,
        Stage::Dist => model.sce_loss(&mut t, obs, &mut rng, flags, model.cfg.beta)?.loss,
        Stage::Refine => {
            let (samples, m0) = cached_samples.expect("stage 3 uses cached samples");
            model.stage3_variety(&mut t, samples, m0, obs, Some(&mut rng))
        }
        Stage::Finetune => model.stage4_loss(&mut t, obs, &mut rng)?,
    };
    let loss = t.value(loss_var)[[0]];
    let grads = t.backward(loss_var);
    let mut acc = HashMap::new();
    collect_grads(&t, &grads, &mut acc);
    Ok((loss, acc))
}

/// Held-out metric for one stage: occupancy NLL (stage 1), symmetric
/// cross-entropy (stage 2) or variety loss of refined representatives
/// (stages 3-4). Noise seeds are fixed per scenario so the curve is smooth.
pub fn heldout_metric(
    model: &Model,
    stage: Stage,
    heldout: &[ScenarioObservation],
) -> Result<f64> {
    let vals: Vec<Result<f64>> = heldout
        .par_iter()
        .enumerate()
        .map(|(i, obs)| -> Result<f64> {
            let seed = derive_seed(model.cfg.seed, 90 + stage.index(), 0, i);
            match stage {
                Stage::Ogm => model.scenario_ogm_nll(obs),
                Stage::Dist => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    Ok(model.scenario_losses(obs, &mut rng)?.sce())
                }
                Stage::Refine | Stage::Finetune => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (samples, m0) =
                        model.sample_trajectories(obs, model.cfg.c_samples, &mut rng)?;
                    let reps = model.refine_samples(&samples, &m0, &obs.spec, false, None);
                    Ok(variety_loss(&obs.gt_future, &reps))
                }
            }
        })
        .collect();
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / heldout.len() as f64)
}

/// Train one stage; returns per-epoch train loss and held-out metric.
pub fn train_stage(
    model: &mut Model,
    stage: Stage,
    train: &[ScenarioObservation],
    heldout: &[ScenarioObservation],
    run_dir: Option<&Path>,
) -> Result<StageReport> {
    let cfg = model.cfg.clone();
    let epochs = cfg.epochs[stage.index()];
    let lr = if stage == Stage::Finetune {
        cfg.lr_stage4
    } else {
        cfg.lr_stage123
    };
    let mut opt = Adam::new(lr);
    let trainable = model.trainable_ids(stage.trainability());

    // stage 3 trains on trajectories sampled once from the frozen
    // distribution model
    let cached: Option<Vec<(Array3<f64>, Array1<f64>)>> = if stage == Stage::Refine {
        let samples: Vec<Result<(Array3<f64>, Array1<f64>)>> = train
            .par_iter()
            .enumerate()
            .map(|(i, obs)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 80, 0, i));
                model.sample_trajectories(obs, cfg.c_samples, &mut rng)
            })
            .collect();
        let mut v = Vec::with_capacity(samples.len());
        for s in samples {
            v.push(s?);
        }
        Some(v)
    } else {
        None
    };

    let mut report = StageReport {
        stage,
        epochs: Vec::with_capacity(epochs),
    };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage.index(), epoch, usize::MAX / 2));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<LossAndGrads>> = batch
                .par_iter()
                .map(|&idx| {
                    scenario_pass(
                        model,
                        stage,
                        &train[idx],
                        cached.as_ref().map(|c| &c[idx]),
                        derive_seed(cfg.seed, stage.index(), epoch, idx),
                    )
                })
                .collect();
            let mut batch_grads: HashMap<ParamId, Arr> = HashMap::new();
            let mut batch_loss = 0.0;
            for (k, r) in results.into_iter().enumerate() {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    let detail = format!(
                        "stage {} epoch {epoch}: non-finite loss {loss} on scenario {}",
                        stage.as_str(),
                        train[batch[k]].example_id
                    );
                    if let Some(dir) = run_dir {
                        let dump = format!(
                            "{{\"stage\":\"{}\",\"epoch\":{epoch},\"batch\":{:?},\"bad_example\":\"{}\"}}\n",
                            stage.as_str(),
                            batch.iter().map(|&i| train[i].example_id.clone()).collect::<Vec<_>>(),
                            train[batch[k]].example_id
                        );
                        let _ = std::fs::write(dir.join("diagnostic.json"), dump);
                    }
                    return Err(Error::Diverged(detail));
                }
                batch_loss += loss;
                let mut ids: Vec<ParamId> = grads.keys().copied().collect();
                ids.sort();
                for id in ids {
                    if !trainable.contains(&id) {
                        continue;
                    }
                    let g = &grads[&id];
                    match batch_grads.get_mut(&id) {
                        Some(acc) => *acc += g,
                        None => {
                            batch_grads.insert(id, g.clone());
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grads.values_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            opt.step(&mut model.store, &batch_grads);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let heldout_val = heldout_metric(model, stage, heldout)?;
        log::info!(
            "stage {} epoch {epoch}: train {train_loss:.4} heldout {heldout_val:.4}",
            stage.as_str()
        );
        report.epochs.push(EpochReport {
            train_loss,
            heldout: heldout_val,
        });
    }
    Ok(report)
}

/// Run the requested stages in order, writing one checkpoint per stage and a
/// training log into the run directory.
pub fn run_training(
    model: &mut Model,
    stages: &[Stage],
    train: &[ScenarioObservation],
    heldout: &[ScenarioObservation],
    run_dir: &Path,
) -> Result<Vec<StageReport>> {
    std::fs::create_dir_all(run_dir)?;
    model.cfg.save(&run_dir.join("config.toml"))?;
    let fingerprint = model.cfg.fingerprint();
    let mut reports = Vec::new();
    for stage in stages {
        let report = train_stage(model, *stage, train, heldout, Some(run_dir))?;
        let ckpt = run_dir.join(format!(
            "stage{}_{}.ckpt",
            stage.index() + 1,
            stage.as_str()
        ));
        checkpoint::save(&ckpt, &model.store, &fingerprint)?;
        reports.push(report);
    }
    let mut log = String::new();
    for r in &reports {
        for (e, ep) in r.epochs.iter().enumerate() {
            log.push_str(&format!(
                "{{\"stage\":\"{}\",\"epoch\":{e},\"train_loss\":{},\"heldout\":{}}}\n",
                r.stage.as_str(),
                data::format_sig9(ep.train_loss),
                data::format_sig9(ep.heldout)
            ));
        }
    }
    std::fs::write(run_dir.join("train_log.jsonl"), log)?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Aggregated evaluation plus per-scenario prediction records.
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<data::PredictionRecord>,
}

/// Evaluate on a scenario list: refined representative metrics, a
/// random-subset-of-samples baseline, offroad rate and the loss terms.
pub fn evaluate(model: &Model, scenarios: &[ScenarioObservation], seed: u64) -> Result<EvalReport> {
    struct PerScenario {
        record: data::PredictionRecord,
        min_ade: f64,
        min_fde: f64,
        rf: f64,
        min_ade_first: f64,
        variety: f64,
        subset_min_ade: f64,
        forward_ce: f64,
        reverse_ce: f64,
        offroad: OffroadCounts,
    }
    let results: Vec<Result<PerScenario>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, obs)| -> Result<PerScenario> {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(i as u64)));
            let (samples, m0) = model.sample_trajectories(obs, model.cfg.c_samples, &mut rng)?;
            let reps = model.refine_samples(&samples, &m0, &obs.spec, false, None);
            let k = model.cfg.k_reps;
            let dm = min_ade_fde(&obs.gt_future, &reps);
            let first = reps.slice(ndarray::s![0..1, .., ..]).to_owned();
            let dm1 = min_ade_fde(&obs.gt_future, &first);
            // random K-subset of the C samples as a refinement-free baseline
            let c = samples.dim().0;
            let mut subset = Array3::zeros((k, model.cfg.t_f, 2));
            for j in 0..k {
                let pick = rng.gen_range(0..c);
                subset
                    .slice_mut(ndarray::s![j, .., ..])
                    .assign(&samples.slice(ndarray::s![pick, .., ..]));
            }
            let dsub = min_ade_fde(&obs.gt_future, &subset);
            let losses = model.scenario_losses(obs, &mut rng)?;
            let offroad = match &obs.road_mask {
                Some(mask) => offroad_counts(&obs.gt_future, &reps, mask, &obs.spec),
                None => OffroadCounts::default(),
            };
            let metrics = vec![
                ("min_ade_k".to_string(), dm.min_ade),
                ("min_fde_k".to_string(), dm.min_fde),
                ("rf_k".to_string(), dm.rf),
                ("variety".to_string(), variety_loss(&obs.gt_future, &reps)),
            ];
            Ok(PerScenario {
                record: data::PredictionRecord {
                    example_id: obs.example_id.clone(),
                    samples,
                    representatives: reps.clone(),
                    metrics,
                },
                min_ade: dm.min_ade,
                min_fde: dm.min_fde,
                rf: dm.rf,
                min_ade_first: dm1.min_ade,
                variety: variety_loss(&obs.gt_future, &reps),
                subset_min_ade: dsub.min_ade,
                forward_ce: losses.forward_ce,
                reverse_ce: losses.reverse_ce,
                offroad,
            })
        })
        .collect();

    let n = scenarios.len() as f64;
    let mut m = BTreeMap::new();
    let mut records = Vec::with_capacity(scenarios.len());
    let mut offroad = OffroadCounts::default();
    let (mut ade, mut fde, mut rf, mut ade1, mut var, mut sub, mut fwd, mut rev) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        ade += r.min_ade;
        fde += r.min_fde;
        rf += r.rf;
        ade1 += r.min_ade_first;
        var += r.variety;
        sub += r.subset_min_ade;
        fwd += r.forward_ce;
        rev += r.reverse_ce;
        offroad.merge(&r.offroad);
        records.push(r.record);
    }
    m.insert("min_ade_k".into(), ade / n);
    m.insert("min_fde_k".into(), fde / n);
    m.insert("rf_k".into(), rf / n);
    m.insert("min_ade_1".into(), ade1 / n);
    m.insert("variety".into(), var / n);
    m.insert("random_subset_min_ade".into(), sub / n);
    m.insert("forward_ce".into(), fwd / n);
    m.insert("reverse_ce".into(), rev / n);
    m.insert(
        "sce".into(),
        (fwd + model.cfg.beta * rev) / n,
    );
    if let Some(rate) = offroad.rate() {
        m.insert("offroad_rate".into(), rate);
    }
    m.insert("offroad_skipped".into(), offroad.skipped_scenarios as f64);
    m.insert("n_scenarios".into(), n);
    Ok(EvalReport { metrics: m, records })
}

/// Distribution-level metrics over `n_preds` raw samples per scenario (no
/// refinement): displacement metrics, spread ratio and pooled offroad rate.
pub fn sample_set_metrics(
    model: &Model,
    scenarios: &[ScenarioObservation],
    n_preds: usize,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    struct Per {
        min_ade: f64,
        min_fde: f64,
        rf: f64,
        offroad: OffroadCounts,
    }
    let results: Vec<Result<Per>> = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, obs)| -> Result<Per> {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(0xabc ^ i as u64)));
            let (samples, _) = model.sample_trajectories(obs, n_preds, &mut rng)?;
            let dm = min_ade_fde(&obs.gt_future, &samples);
            let offroad = match &obs.road_mask {
                Some(mask) => offroad_counts(&obs.gt_future, &samples, mask, &obs.spec),
                None => OffroadCounts::default(),
            };
            Ok(Per {
                min_ade: dm.min_ade,
                min_fde: dm.min_fde,
                rf: dm.rf,
                offroad,
            })
        })
        .collect();
    let n = scenarios.len() as f64;
    let mut offroad = OffroadCounts::default();
    let (mut ade, mut fde, mut rf) = (0.0, 0.0, 0.0);
    for r in results {
        let r = r?;
        ade += r.min_ade;
        fde += r.min_fde;
        rf += r.rf;
        offroad.merge(&r.offroad);
    }
    let mut m = BTreeMap::new();
    m.insert("min_ade".into(), ade / n);
    m.insert("min_fde".into(), fde / n);
    m.insert("rf".into(), rf / n);
    if let Some(rate) = offroad.rate() {
        m.insert("offroad_rate".into(), rate);
    }
    m.insert("offroad_skipped".into(), offroad.skipped_scenarios as f64);
    Ok(m)
}

/// Write the metric table as deterministic JSON (sorted keys, 9 significant
/// digits) and return the serialized text.
pub fn write_metrics(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<String> {
    let mut s = String::from("{\n");
    for (i, (k, v)) in metrics.iter().enumerate() {
        if i > 0 {
            s.push_str(",\n");
        }
        s.push_str(&format!("  {k:?}: {}", data::format_sig9(*v)));
    }
    s.push_str("\n}\n");
    std::fs::write(path, &s)?;
    Ok(s)
}

/// Render the metric table as an aligned flat text table.
pub fn metrics_table(metrics: &BTreeMap<String, f64>) -> String {
    let width = metrics.keys().map(|k| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, v) in metrics {
        s.push_str(&format!("{k:<width$}  {v:.6}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_parsing() {
        assert_eq!(parse_stages("all").unwrap().len(), 4);
        let v = parse_stages("ogm,refine").unwrap();
        assert_eq!(v, vec![Stage::Ogm, Stage::Refine]);
        assert!(parse_stages("ogm,bogus").is_err());
    }

    #[test]
    fn seed_derivation_unique() {
        let a = derive_seed(1, 0, 0, 0);
        let b = derive_seed(1, 0, 0, 1);
        let c = derive_seed(1, 0, 1, 0);
        let d = derive_seed(2, 0, 0, 0);
        assert!(a != b && a != c && a != d && b != c);
    }

    #[test]
    fn subsample_even_stride() {
        let spec = crate::grid::GridSpec::new(5, 40.0, [0.0, 0.0]).unwrap();
        let mk = |id: usize| ScenarioObservation {
            target_history: vec![[0.0, 0.0]; 2],
            neighbors: vec![],
            raster: ndarray::Array3::zeros((3, 10, 10)),
            gt_future: vec![[0.0, 0.0]; 2],
            dt: 0.4,
            spec,
            road_mask: None,
            example_id: format!("{id}"),
        };
        let mut v: Vec<ScenarioObservation> = (0..10).map(mk).collect();
        subsample(&mut v, 4);
        let ids: Vec<&str> = v.iter().map(|s| s.example_id.as_str()).collect();
        assert_eq!(ids, vec!["0", "2", "5", "7"]);
    }
}
