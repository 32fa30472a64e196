//! Scratch experiment: stage-2 beta sweep depth calibration.
//! Usage: sweep <epochs> <batch> <train_cap> [heldout_cap]

use gridcast_core::checkpoint;
use gridcast_core::config::{DatasetSource, RunConfig};
use gridcast_core::model::Model;
use gridcast_core::train::{prepare_scenarios, sample_set_metrics, train_stage, Stage};

fn desk_config() -> RunConfig {
    RunConfig {
        grid_size: 25,
        crop_extent: 200.0,
        horizon: 12,
        t_p: 8,
        t_f: 12,
        hidden: 32,
        conv_hidden: 12,
        scene_channels: 12,
        scene_mid: 8,
        heads: 4,
        deconv_k: 5,
        beta: 0.2,
        tau: 1.0,
        c_samples: 32,
        k_reps: 8,
        refine_layers: 2,
        refine_heads: 4,
        dropout: 0.1,
        lr_stage123: 1e-3,
        lr_stage4: 1e-4,
        epochs: [5, 5, 8, 1],
        batch_size: 16,
        reverse_ce_samples: 2,
        seed: 1,
        ogm_variant: "deconv".into(),
        augment: false,
        heldout_fraction: 0.25,
        max_train_scenarios: 96,
        max_heldout_scenarios: 32,
        stage4_add_sce: false,
        dataset: DatasetSource::Synthetic {
            synthetic_seed: 11,
            n_scenes: 4,
            n_agents: 10,
            n_frames: 34,
            scene_cells: 40,
        },
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let cap: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(128);
    let held_cap: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let stage1_epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);

    let mut cfg = desk_config();
    cfg.epochs[0] = stage1_epochs;
    cfg.epochs[1] = epochs;
    cfg.batch_size = batch;
    cfg.max_train_scenarios = cap;
    cfg.max_heldout_scenarios = held_cap;
    let (train_s, held) = prepare_scenarios(&cfg).unwrap();
    eprintln!("train {} heldout {}", train_s.len(), held.len());

    let ckpt = std::path::Path::new("/tmp/bench/sweep_stage1.ckpt");
    if !ckpt.exists() {
        let mut model = Model::new(&cfg).unwrap();
        let rep = train_stage(&mut model, Stage::Ogm, &train_s, &held, None).unwrap();
        eprintln!(
            "stage1 heldout: {:?}",
            rep.epochs.iter().map(|e| e.heldout).collect::<Vec<_>>()
        );
        checkpoint::save(ckpt, &model.store, &cfg.fingerprint()).unwrap();
    }

    for &beta in &[0.0, 0.2, 1.0] {
        let mut cfg_b = cfg.clone();
        cfg_b.beta = beta;
        let mut model = Model::new(&cfg_b).unwrap();
        checkpoint::restore(ckpt, &mut model.store, &cfg_b.fingerprint(), false).unwrap();
        let t0 = std::time::Instant::now();
        let rep = train_stage(&mut model, Stage::Dist, &train_s, &held, None).unwrap();
        let curve: Vec<String> = rep.epochs.iter().map(|e| format!("{:.1}", e.heldout)).collect();
        let metrics = sample_set_metrics(&model, &held, 20, 616).unwrap();
        println!(
            "beta={beta}: offroad {:.4} rf {:.3} min_ade {:.2} min_fde {:.2} | sce curve {:?} | {:.0}s",
            metrics["offroad_rate"],
            metrics["rf"],
            metrics["min_ade"],
            metrics["min_fde"],
            curve,
            t0.elapsed().as_secs_f64()
        );
    }
}
