//! Command-line entry point: synthetic data generation, toy training,
//! evaluation, partition benchmarks, attention export, and the oracle
//! selftest. Exit codes: 0 success, 1 contract/parse error, 2 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voxdet::config::RunConfig;
use voxdet::error::{Error, Result};
use voxdet::evalmetrics::evaluate;
use voxdet::export::{export_attention, QuerySelector};
use voxdet::model::Model;
use voxdet::scene::{Extent, PointCloudScene};
use voxdet::synth::gen_scene;
use voxdet::tensor::checkpoint;
use voxdet::train::train_toy;

#[derive(Parser)]
#[command(name = "voxdet", about = "Sparse-window 3D detection toolkit", version)]
struct Cli {
    /// Flat key=value config file; unset keys use the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a generated dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the loss curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Train on raw scenes without augmentation.
        #[arg(long, default_value_t = false)]
        no_augment: bool,
        /// Model-init seed (distinct from the training seed).
        #[arg(long, default_value_t = 42)]
        init_seed: u64,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write all detections to this file, one line each.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Time the partition operations over grids and occupancy rates.
    BenchPartition {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01f64, 0.05, 0.1])]
        occupancies: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention scores for a scene as CSV.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, default_value = "foreground")]
        query: String,
        /// Keep only layers whose label contains this substring.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suites.
    Selftest,
}

fn scene_paths(dir: &Path, idx: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("scene_{idx:03}.points.csv")),
        dir.join(format!("scene_{idx:03}.boxes.csv")),
    )
}

fn load_dataset(dir: &Path, extent_side: f64) -> Result<Vec<PointCloudScene>> {
    let extent = Extent::square(0.0, 0.0, extent_side);
    let mut scenes = Vec::new();
    for idx in 0.. {
        let (p, b) = scene_paths(dir, idx);
        if !p.exists() {
            break;
        }
        scenes.push(PointCloudScene::load(&p, &b, extent)?);
    }
    if scenes.is_empty() {
        return Err(Error::Contract(format!("no scenes found under {}", dir.display())));
    }
    Ok(scenes)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };

    match cli.command {
        Command::GenData { out, scenes, seed } => {
            std::fs::create_dir_all(&out)?;
            for i in 0..scenes {
                let scene = gen_scene(&cfg.scene, seed.wrapping_add(i as u64))?;
                let (p, b) = scene_paths(&out, i);
                scene.save(&p, &b)?;
            }
            println!("wrote {scenes} scenes to {}", out.display());
        }
        Command::Train { data, out, steps, seed, curve, no_augment, init_seed } => {
            let scenes = load_dataset(&data, cfg.scene.extent_side)?;
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = steps {
                train_cfg.steps = s;
            }
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            train_cfg.augment =
                if no_augment || !cfg.use_augment { None } else { Some(cfg.augment) };
            let mut model = Model::new(cfg.model.clone(), init_seed)?;
            let result = train_toy(&mut model, &scenes, &train_cfg)?;
            checkpoint::save(&model.params, &out)?;
            if let Some(curve_path) = curve {
                std::fs::write(&curve_path, result.curve_csv())?;
            }
            println!(
                "trained {} steps on {} scenes: loss {:.4} -> {:.4}; checkpoint {}",
                train_cfg.steps,
                scenes.len(),
                result.initial_loss,
                result.final_loss,
                out.display()
            );
        }
        Command::Eval { ckpt, data, detections } => {
            let scenes = load_dataset(&data, cfg.scene.extent_side)?;
            let params = checkpoint::load(&ckpt)?;
            let model = Model::from_params(cfg.model.clone(), params)?;
            let mut all_dets = Vec::new();
            for scene in &scenes {
                all_dets.push(model.predict(scene)?);
            }
            if let Some(path) = detections {
                let mut text = String::new();
                for dets in &all_dets {
                    for d in dets {
                        text.push_str(&d.to_line());
                        text.push('\n');
                    }
                }
                std::fs::write(&path, text)?;
            }
            let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
            let report = evaluate(&all_dets, &gts, cfg.model.num_classes, &cfg.eval_ious);
            print!("{}", report.to_text());
        }
        Command::BenchPartition { sizes, occupancies, seed, reps, out } => {
            let rows = voxdet::bench::bench_partition(&sizes, &occupancies, seed, reps)?;
            let csv = voxdet::bench::bench_csv(&rows);
            match out {
                Some(path) => std::fs::write(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::ExportAttention { ckpt, points, boxes, query, layer, out } => {
            let extent = Extent::square(0.0, 0.0, cfg.scene.extent_side);
            let scene = PointCloudScene::load(&points, &boxes, extent)?;
            let params = checkpoint::load(&ckpt)?;
            let model = Model::from_params(cfg.model.clone(), params)?;
            let selector = match query.as_str() {
                "foreground" => QuerySelector::Foreground,
                "all" => QuerySelector::All,
                other => return Err(Error::Contract(format!("unknown query selector '{other}'"))),
            };
            let csv = export_attention(&model, &scene, selector, layer.as_deref())?;
            std::fs::write(&out, csv)?;
            println!("wrote attention rows to {}", out.display());
        }
        Command::Selftest => {
            voxdet::selftest::run_selftest()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
