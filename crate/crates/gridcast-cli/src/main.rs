//! `gridcast` command line: train the four stages, evaluate checkpoints,
//! dump samples and render figures.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gridcast_core::config::RunConfig;
use gridcast_core::encoders::ScenarioObservation;
use gridcast_core::model::Model;
use gridcast_core::{checkpoint, data, plot, train};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "gridcast", about = "Grid-plan trajectory distribution forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage or the full pipeline.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated subset of ogm,dist,refine,finetune.
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long, default_value = "runs/default")]
        run_dir: PathBuf,
        /// Start from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the metric record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `heldout`.
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Config file; defaults to `config.toml` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Load despite a fingerprint mismatch.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample predictions for `n` held-out scenarios into a dump file.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "predictions.jsonl")]
        out: PathBuf,
    },
    /// Render figures from a checkpoint.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of ogm, reward, policy, plan, dist, reps.
        #[arg(long)]
        what: String,
        /// MDP step for reward/policy maps.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Scenario index within the held-out split.
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[arg(long, default_value = "figures")]
        out_dir: PathBuf,
    },
}

fn load_model(
    checkpoint_path: &Path,
    config: &Option<PathBuf>,
    force: bool,
) -> Result<(Model, RunConfig)> {
    let cfg_path = match config {
        Some(p) => p.clone(),
        None => checkpoint_path
            .parent()
            .map(|d| d.join("config.toml"))
            .filter(|p| p.exists())
            .context("no --config given and no config.toml next to the checkpoint")?,
    };
    let cfg = RunConfig::load(&cfg_path)?;
    let mut model = Model::new(&cfg)?;
    checkpoint::restore(checkpoint_path, &mut model.store, &cfg.fingerprint(), force)?;
    Ok((model, cfg))
}

fn split_scenarios(
    cfg: &RunConfig,
    split: &str,
) -> Result<Vec<ScenarioObservation>> {
    let (train_s, held) = train::prepare_scenarios(cfg)?;
    match split {
        "train" => Ok(train_s),
        "heldout" => Ok(held),
        other => bail!("unknown split '{other}' (use train or heldout)"),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            stage,
            run_dir,
            checkpoint: start,
        } => {
            let cfg = RunConfig::load(&config)?;
            let stages = train::parse_stages(&stage)?;
            let mut model = Model::new(&cfg)?;
            if let Some(start) = start {
                checkpoint::restore(&start, &mut model.store, &cfg.fingerprint(), false)?;
                log::info!("resumed from {}", start.display());
            }
            log::info!(
                "model has {} parameters; training stages {:?}",
                model.scalar_param_count(),
                stages.iter().map(|s| s.as_str()).collect::<Vec<_>>()
            );
            let (train_s, held) = train::prepare_scenarios(&cfg)?;
            log::info!("{} train / {} held-out scenarios", train_s.len(), held.len());
            let reports = train::run_training(&mut model, &stages, &train_s, &held, &run_dir)?;
            for r in &reports {
                if let Some(last) = r.epochs.last() {
                    println!(
                        "stage {:<8} final train loss {:.4}  heldout {:.4}",
                        r.stage.as_str(),
                        last.train_loss,
                        last.heldout
                    );
                }
            }
            let report = train::evaluate(&model, &held, cfg.seed)?;
            train::write_metrics(&run_dir.join("metrics.json"), &report.metrics)?;
            log::info!("metrics written to {}", run_dir.join("metrics.json").display());
            print!("{}", train::metrics_table(&report.metrics));
        }
        Command::Eval {
            checkpoint,
            split,
            config,
            force,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint, &config, force)?;
            let scenarios = split_scenarios(&cfg, &split)?;
            let report = train::evaluate(&model, &scenarios, cfg.seed)?;
            print!("{}", train::metrics_table(&report.metrics));
            if let Some(out) = out {
                train::write_metrics(&out, &report.metrics)?;
            }
        }
        Command::Sample {
            checkpoint,
            n,
            config,
            force,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint, &config, force)?;
            let scenarios = split_scenarios(&cfg, "heldout")?;
            let take = n.min(scenarios.len());
            let mut records = Vec::with_capacity(take);
            for (i, obs) in scenarios.iter().take(take).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
                records.push(model.predict(obs, &mut rng)?);
            }
            let file = std::fs::File::create(&out)?;
            let mut w = std::io::BufWriter::new(file);
            data::write_prediction_dump(&mut w, &records)?;
            w.flush()?;
            println!("wrote {take} prediction records to {}", out.display());
        }
        Command::Plot {
            checkpoint,
            what,
            n,
            scenario,
            config,
            force,
            out_dir,
        } => {
            let (model, cfg) = load_model(&checkpoint, &config, force)?;
            let scenarios = split_scenarios(&cfg, "heldout")?;
            let obs = scenarios
                .get(scenario)
                .with_context(|| format!("scenario index {scenario} out of range"))?;
            std::fs::create_dir_all(&out_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(scenario as u64));
            match what.as_str() {
                "ogm" => {
                    let maps = model.ogm_maps(obs)?;
                    for (t, m) in maps.iter().enumerate() {
                        plot::heatmap(m, &out_dir.join(format!("ogm_t{:02}.png", t + 1)))?;
                    }
                    // the dump format doubles as the machine-readable figure
                    let f = std::fs::File::create(out_dir.join("ogm.dump"))?;
                    gridcast_core::ogm::write_ogm_dump(std::io::BufWriter::new(f), &obs.spec, &maps)?;
                    println!("wrote {} occupancy heatmaps", maps.len());
                }
                "reward" | "policy" => {
                    let (rewards, pi) = model.reward_policy_maps(obs)?;
                    let step = n.clamp(1, cfg.horizon) - 1;
                    let stack = if what == "reward" { &rewards[step] } else { &pi[step] };
                    let names = ["up", "down", "left", "right", "end"];
                    for (a, name) in names.iter().enumerate() {
                        let map = stack.index_axis(Axis(0), a).to_owned();
                        plot::heatmap(
                            &map,
                            &out_dir.join(format!("{what}_n{:02}_{name}.png", step + 1)),
                        )?;
                    }
                    println!("wrote 5 {what} maps at MDP step {}", step + 1);
                }
                "plan" => {
                    let plans = model.sample_plans_world(obs, 4, &mut rng)?;
                    let mut arr = ndarray::Array3::zeros((plans.len(), cfg.horizon, 2));
                    for (i, p) in plans.iter().enumerate() {
                        arr.index_axis_mut(Axis(0), i).assign(p);
                    }
                    plot::trajectory_overlay(
                        obs,
                        &arr,
                        &plot::palette(plans.len()),
                        &out_dir.join("plans.png"),
                    )?;
                    println!("wrote plan overlay");
                }
                "dist" => {
                    let (samples, _) =
                        model.sample_trajectories(obs, cfg.c_samples, &mut rng)?;
                    plot::trajectory_overlay(
                        obs,
                        &samples,
                        &[[255, 160, 40]],
                        &out_dir.join("distribution.png"),
                    )?;
                    println!("wrote distribution overlay ({} samples)", cfg.c_samples);
                }
                "reps" => {
                    let pred = model.predict(obs, &mut rng)?;
                    plot::trajectory_overlay(
                        obs,
                        &pred.representatives,
                        &plot::palette(cfg.k_reps),
                        &out_dir.join("representatives.png"),
                    )?;
                    println!("wrote representative overlay ({} trajectories)", cfg.k_reps);
                }
                other => bail!("unknown plot kind '{other}'"),
            }
        }
    }
    Ok(())
}
