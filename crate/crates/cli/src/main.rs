//! Command-line harness for the depth pipeline.
//!
//! Configuration comes from an optional `key=value` file plus flags;
//! flags win. `llm-mde experiment --help` lists the protocols.

use clap::{Args, Parser, Subcommand};
use llm_mde_core::dataset::generate_synthetic_scene;
use llm_mde_core::error::{Error, Result};
use llm_mde_core::experiment::{
    render_depth_image, run_experiment, DataSource, ExperimentConfig, ExperimentKind, RunRecord,
};
use llm_mde_core::model::DepthModel;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "llm-mde", version, about = "Monocular depth estimation through a reprogrammed language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// UTF-8 key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use a procedural pool with this many scenes.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Load samples from an on-disk dataset directory.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    /// Pure-CPU determinism mode (always on; accepted for compatibility).
    #[arg(long)]
    device_free: bool,
    /// Extra key=value overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save its weights.
    Train(CommonOpts),
    /// Evaluate saved weights over a dataset.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Weight file produced by `train`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Run a multi-run experiment protocol.
    Experiment {
        #[command(flatten)]
        common: CommonOpts,
        /// few_shot | zero_shot | ablation_prompts | ablation_lora |
        /// hparam_grid | train | eval
        #[arg(long)]
        experiment: Option<String>,
    },
    /// Render ground-truth (and optionally predicted) depth maps as PNGs.
    Render {
        #[command(flatten)]
        common: CommonOpts,
        /// Weight file; when present, predictions are rendered too.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Number of samples to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn build_config(kind: Option<ExperimentKind>, common: &CommonOpts) -> Result<ExperimentConfig> {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("llm-mde-out"));
    let mut cfg = ExperimentConfig::desk(kind.unwrap_or(ExperimentKind::Train), out);
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    // flags win over the file
    if let Some(kind) = kind {
        cfg.experiment = kind;
    }
    if let Some(seed) = common.seed {
        cfg.apply_kv("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(count) = common.synthetic {
        cfg.apply_kv("synthetic_count", &count.to_string())?;
    }
    if let Some(dir) = &common.dataset_dir {
        cfg.source = DataSource::Directory(dir.clone());
    }
    if common.device_free {
        cfg.apply_kv("device_free", "true")?;
    }
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn print_records(records: &[RunRecord]) {
    for r in records {
        println!(
            "run {:<24} rmse {:.4}  abs_rel {:.4}  sq_rel {:.4}  log_rmse {:.4}  d1 {:.3}  d2 {:.3}  d3 {:.3}",
            r.run,
            r.metrics.rmse,
            r.metrics.abs_rel,
            r.metrics.sq_rel,
            r.metrics.log_rmse,
            r.metrics.delta1,
            r.metrics.delta2,
            r.metrics.delta3,
        );
    }
}

fn render_cmd(
    common: &CommonOpts,
    weights: Option<&PathBuf>,
    count: usize,
) -> Result<()> {
    let cfg = build_config(Some(ExperimentKind::Train), common)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let model = weights.map(|p| DepthModel::load(p)).transpose()?;
    let pool = match &cfg.source {
        DataSource::Synthetic { count: n, seed } => {
            let take = count.min(*n);
            (0..take)
                .map(|i| {
                    let label = &cfg.synthetic_labels[i % cfg.synthetic_labels.len()];
                    generate_synthetic_scene(
                        seed.wrapping_add(i as u64),
                        cfg.model.backbone.resolution,
                        label,
                    )
                })
                .collect::<Vec<_>>()
        }
        DataSource::Directory(dir) => {
            let manifest = llm_mde_core::dataset::load_manifest(dir, cfg.depth_scale)?;
            (0..manifest.len().min(count))
                .map(|i| {
                    llm_mde_core::dataset::load_sample(&manifest, i, cfg.model.backbone.resolution)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    for (i, sample) in pool.iter().enumerate() {
        let gt_path = cfg.out_dir.join(format!("depth_{i}.png"));
        render_depth_image(&sample.depth, &gt_path)?;
        println!("wrote {}", gt_path.display());
        if let Some(model) = &model {
            let pred = model.predict(sample)?;
            let pred_path = cfg.out_dir.join(format!("pred_{i}.png"));
            render_depth_image(&pred, &pred_path)?;
            println!("wrote {}", pred_path.display());
        }
    }
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let cfg = build_config(Some(ExperimentKind::Train), &common)?;
            let records = run_experiment(&cfg)?;
            print_records(&records);
            println!("weights: {}", cfg.out_dir.join("model.lmde").display());
            Ok(())
        }
        Command::Eval { common, weights } => {
            let mut cfg = build_config(Some(ExperimentKind::Eval), &common)?;
            if let Some(w) = weights {
                cfg.weights = Some(w);
            }
            let records = run_experiment(&cfg)?;
            print_records(&records);
            Ok(())
        }
        Command::Experiment { common, experiment } => {
            let kind = experiment.as_deref().map(ExperimentKind::parse).transpose()?;
            let cfg = build_config(kind, &common)?;
            if kind.is_none() && common.config.is_none() {
                return Err(Error::Config(
                    "experiment name required (--experiment or config file)".into(),
                ));
            }
            let records = run_experiment(&cfg)?;
            print_records(&records);
            println!("summary: {}", cfg.out_dir.join("summary.csv").display());
            Ok(())
        }
        Command::Render {
            common,
            weights,
            count,
        } => render_cmd(&common, weights.as_ref(), count),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
