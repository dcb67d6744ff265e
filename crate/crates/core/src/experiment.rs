//! Experiment harness: staged few-shot, cross-scene zero-shot, prompt and
//! LoRA ablations, a hyperparameter grid, plus single train/eval runs.
//!
//! Every run writes `history_<run>.csv`, `metrics_<run>.json`, and up to
//! eight rendered depth maps under `<run>/depth_<i>.png`; the harness then
//! writes `summary.csv` and `report.json` over all runs. Identical config
//! and seed reproduce byte-identical metrics and images.

use crate::apg::PromptMode;
use crate::dataset::{
    self, DepthMap, SceneSample, Split, SplitProtocol, SplitSpec, DEFAULT_ZERO_SHOT_TRAIN_SCENE,
};
use crate::error::{Error, Result};
use crate::lora::LoraScheme;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{DepthModel, ModelConfig};
use crate::training::{self, EpochRow, TrainConfig, TrainHistory};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    FewShot,
    ZeroShot,
    AblationPrompts,
    AblationLora,
    HparamGrid,
    Train,
    Eval,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "few_shot" => Ok(ExperimentKind::FewShot),
            "zero_shot" => Ok(ExperimentKind::ZeroShot),
            "ablation_prompts" => Ok(ExperimentKind::AblationPrompts),
            "ablation_lora" => Ok(ExperimentKind::AblationLora),
            "hparam_grid" => Ok(ExperimentKind::HparamGrid),
            "train" => Ok(ExperimentKind::Train),
            "eval" => Ok(ExperimentKind::Eval),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::FewShot => "few_shot",
            ExperimentKind::ZeroShot => "zero_shot",
            ExperimentKind::AblationPrompts => "ablation_prompts",
            ExperimentKind::AblationLora => "ablation_lora",
            ExperimentKind::HparamGrid => "hparam_grid",
            ExperimentKind::Train => "train",
            ExperimentKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Directory(PathBuf),
    Synthetic { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub source: DataSource,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub depth_scale: f64,
    pub per_class_cap: usize,
    pub synthetic_labels: Vec<String>,
    pub zero_shot_train_scene: String,
    pub render_count: usize,
    /// Learning-rate multiplier applied to the grid's published rates at
    /// desk scale.
    pub grid_lr_mult: f64,
    pub weights: Option<PathBuf>,
    pub device_free: bool,
}

impl ExperimentConfig {
    pub fn desk(experiment: ExperimentKind, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            experiment,
            source: DataSource::Synthetic { count: 40, seed: 0 },
            out_dir: out_dir.into(),
            seed: 0,
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            depth_scale: 1e-3,
            per_class_cap: 50,
            synthetic_labels: default_labels(),
            zero_shot_train_scene: DEFAULT_ZERO_SHOT_TRAIN_SCENE.into(),
            render_count: 8,
            grid_lr_mult: 250.0,
            weights: None,
            device_free: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.experiment == ExperimentKind::Eval && self.weights.is_none() {
            return Err(Error::Config("eval requires a weights file".into()));
        }
        if let DataSource::Synthetic { count, .. } = self.source {
            if count == 0 {
                return Err(Error::Config("synthetic count must be positive".into()));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what}: {value:?}"));
        match key {
            "experiment" => self.experiment = ExperimentKind::parse(value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "dataset_dir" => self.source = DataSource::Directory(PathBuf::from(value)),
            "synthetic_count" => {
                let count = value.parse().map_err(|_| bad("synthetic_count"))?;
                self.source = match self.source {
                    DataSource::Synthetic { seed, .. } => DataSource::Synthetic { count, seed },
                    _ => DataSource::Synthetic { count, seed: 0 },
                };
            }
            "synthetic_seed" => {
                let seed = value.parse().map_err(|_| bad("synthetic_seed"))?;
                self.source = match &self.source {
                    DataSource::Synthetic { count, .. } => DataSource::Synthetic {
                        count: *count,
                        seed,
                    },
                    _ => DataSource::Synthetic { count: 40, seed },
                };
            }
            "depth_scale" => self.depth_scale = value.parse().map_err(|_| bad("depth_scale"))?,
            "resolution" => {
                self.model.backbone.resolution = value.parse().map_err(|_| bad("resolution"))?
            }
            "patch_size" => {
                self.model.backbone.patch_size = value.parse().map_err(|_| bad("patch_size"))?
            }
            "vision_width" => {
                self.model.backbone.vision_width =
                    value.parse().map_err(|_| bad("vision_width"))?
            }
            "text_width" => {
                self.model.backbone.text_width = value.parse().map_err(|_| bad("text_width"))?
            }
            "vocab" => self.model.backbone.vocab = value.parse().map_err(|_| bad("vocab"))?,
            "vision_layers" => {
                self.model.backbone.vision_layers =
                    value.parse().map_err(|_| bad("vision_layers"))?
            }
            "text_layers" => {
                self.model.backbone.text_layers = value.parse().map_err(|_| bad("text_layers"))?
            }
            "heads" => self.model.backbone.heads = value.parse().map_err(|_| bad("heads"))?,
            "dropout" => self.model.backbone.dropout = value.parse().map_err(|_| bad("dropout"))?,
            "max_text_len" => {
                self.model.backbone.max_text_len =
                    value.parse().map_err(|_| bad("max_text_len"))?
            }
            "v_prime" => self.model.v_prime = value.parse().map_err(|_| bad("v_prime"))?,
            "head_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("head_channels"))?;
                if parts.len() != 4 {
                    return Err(bad("head_channels (need 4 values)"));
                }
                self.model.head_channels = [parts[0], parts[1], parts[2], parts[3]];
            }
            "d_min" => self.model.depth_range.0 = value.parse().map_err(|_| bad("d_min"))?,
            "d_max" => self.model.depth_range.1 = value.parse().map_err(|_| bad("d_max"))?,
            "prompt_mode" => self.model.prompt_mode = PromptMode::parse(value)?,
            "lora_scheme" => self.model.lora_scheme = LoraScheme::parse(value)?,
            "lora_rank_vision" => {
                self.model.lora_rank_vision = value.parse().map_err(|_| bad("lora_rank_vision"))?
            }
            "lora_alpha_vision" => {
                self.model.lora_alpha_vision =
                    value.parse().map_err(|_| bad("lora_alpha_vision"))?
            }
            "lora_rank_text" => {
                self.model.lora_rank_text = value.parse().map_err(|_| bad("lora_rank_text"))?
            }
            "lora_alpha_text" => {
                self.model.lora_alpha_text = value.parse().map_err(|_| bad("lora_alpha_text"))?
            }
            "dataset_name" => self.model.dataset_name = value.to_string(),
            "prompt_templates" => {
                self.model.templates =
                    crate::apg::PromptTemplates::from_file(Path::new(value))?
            }
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "lr0" => self.train.lr0 = value.parse().map_err(|_| bad("lr0"))?,
            "lr_min" => self.train.lr_min = value.parse().map_err(|_| bad("lr_min"))?,
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "patience" => self.train.patience = value.parse().map_err(|_| bad("patience"))?,
            "weight_decay" => {
                self.train.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
            }
            "per_class_cap" => {
                self.per_class_cap = value.parse().map_err(|_| bad("per_class_cap"))?
            }
            "labels" => {
                self.synthetic_labels = value.split(',').map(|s| s.trim().to_string()).collect()
            }
            "zero_shot_scene" => self.zero_shot_train_scene = value.to_string(),
            "render_count" => self.render_count = value.parse().map_err(|_| bad("render_count"))?,
            "grid_lr_mult" => self.grid_lr_mult = value.parse().map_err(|_| bad("grid_lr_mult"))?,
            "weights" => self.weights = Some(PathBuf::from(value)),
            "device_free" => self.device_free = value.parse().map_err(|_| bad("device_free"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Reads a UTF-8 `key=value` file (one pair per line, `#` comments).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

pub fn default_labels() -> Vec<String> {
    ["bedroom", "bathroom", "diningroom", "kitchen", "livingroom"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Published hyperparameter grid: (alpha_vit, rank_vit, rank_llm, batch,
/// lr) per scheme.
pub const HPARAM_GRID: [(f64, usize, usize, usize, f64); 8] = [
    (120.0, 60, 32, 32, 2e-5),
    (192.0, 192, 32, 32, 2e-5),
    (192.0, 96, 32, 32, 2e-5),
    (192.0, 96, 32, 32, 1e-4),
    (192.0, 96, 32, 16, 2e-5),
    (320.0, 160, 32, 32, 2e-5),
    (192.0, 96, 16, 32, 2e-5),
    (192.0, 96, 32, 48, 2e-5),
];

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run: String,
    pub variant: String,
    pub experiment: String,
    pub seed: u64,
    pub scene: Option<String>,
    pub config: BTreeMap<String, String>,
    pub history: Vec<EpochRow>,
    pub metrics: MetricsReport,
    pub wall_time_s: f64,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    run: &'a str,
    variant: &'a str,
    experiment: &'a str,
    seed: u64,
    metrics: &'a MetricsReport,
}

// ---- pool construction ----

pub fn build_pool(cfg: &ExperimentConfig) -> Result<Vec<SceneSample>> {
    match &cfg.source {
        DataSource::Synthetic { count, seed } => Ok(dataset::synthetic_pool(
            *count,
            *seed,
            cfg.model.backbone.resolution,
            &cfg.synthetic_labels,
        )),
        DataSource::Directory(dir) => {
            let manifest = dataset::load_manifest(dir, cfg.depth_scale)?;
            (0..manifest.len())
                .map(|i| dataset::load_sample(&manifest, i, cfg.model.backbone.resolution))
                .collect()
        }
    }
}

fn labels_of(pool: &[SceneSample]) -> Vec<String> {
    pool.iter().map(|s| s.scene_label.clone()).collect()
}

/// Deterministic 80/10/10 split for plain train runs.
pub fn basic_split(n: usize, seed: u64) -> Split {
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..idx.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    let n_val = (n / 10).max(1).min(n.saturating_sub(2).max(1));
    let n_test = (n / 10).max(1).min(n.saturating_sub(n_val + 1));
    let n_train = n - n_val - n_test;
    Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    }
}

// ---- single run ----

struct RunSpec {
    name: String,
    variant: String,
    scene: Option<String>,
    model: ModelConfig,
    train: TrainConfig,
    split: Split,
    extra_config: BTreeMap<String, String>,
}

fn config_snapshot(spec: &RunSpec) -> BTreeMap<String, String> {
    let mut map = spec.extra_config.clone();
    map.insert("prompt_mode".into(), spec.model.prompt_mode.as_str().into());
    map.insert("lora_scheme".into(), spec.model.lora_scheme.as_str().into());
    map.insert(
        "lora_rank_vision".into(),
        spec.model.lora_rank_vision.to_string(),
    );
    map.insert(
        "lora_alpha_vision".into(),
        spec.model.lora_alpha_vision.to_string(),
    );
    map.insert(
        "lora_rank_text".into(),
        spec.model.lora_rank_text.to_string(),
    );
    map.insert(
        "lora_alpha_text".into(),
        spec.model.lora_alpha_text.to_string(),
    );
    map.insert("batch_size".into(), spec.train.batch_size.to_string());
    map.insert("lr0".into(), spec.train.lr0.to_string());
    map.insert("epochs".into(), spec.train.epochs.to_string());
    map
}

fn evaluate_indices(
    model: &DepthModel,
    pool: &[SceneSample],
    indices: &[usize],
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::Metrics("empty evaluation set".into()));
    }
    let per_image: Vec<MetricsReport> = indices
        .iter()
        .map(|&i| {
            let pred = model.predict(&pool[i])?;
            compute_metrics(&pred, &pool[i].depth)
        })
        .collect::<Result<_>>()?;
    MetricsReport::mean(&per_image)
}

fn emit_run_files(
    out_dir: &Path,
    record: &RunRecord,
    model: &DepthModel,
    pool: &[SceneSample],
    eval_indices: &[usize],
    render_count: usize,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let history = TrainHistory {
        rows: record.history.clone(),
    };
    let hist_path = out_dir.join(format!("history_{}.csv", record.run));
    fs::write(&hist_path, history.to_csv()).map_err(|e| Error::io(&hist_path, e))?;
    let metrics_path = out_dir.join(format!("metrics_{}.json", record.run));
    let body = serde_json::to_string_pretty(&MetricsFile {
        run: &record.run,
        variant: &record.variant,
        experiment: &record.experiment,
        seed: record.seed,
        metrics: &record.metrics,
    })
    .expect("metrics serialize");
    fs::write(&metrics_path, body).map_err(|e| Error::io(&metrics_path, e))?;

    let img_dir = out_dir.join(&record.run);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (i, &idx) in eval_indices.iter().take(render_count).enumerate() {
        let pred = model.predict(&pool[idx])?;
        render_depth_image(&pred, &img_dir.join(format!("depth_{i}.png")))?;
    }
    Ok(())
}

fn execute_run(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    spec: RunSpec,
) -> Result<(RunRecord, DepthModel)> {
    let started = Instant::now();
    let mut model = DepthModel::new(spec.model.clone(), cfg.seed)?;
    let history = training::fit(&mut model, pool, &spec.split, &spec.train, cfg.seed)?;
    let eval_set: &[usize] = if spec.split.test.is_empty() {
        &spec.split.val
    } else {
        &spec.split.test
    };
    let metrics = evaluate_indices(&model, pool, eval_set)?;
    let record = RunRecord {
        run: spec.name.clone(),
        variant: spec.variant.clone(),
        experiment: cfg.experiment.as_str().into(),
        seed: cfg.seed,
        scene: spec.scene.clone(),
        config: config_snapshot(&spec),
        history: history.rows.clone(),
        metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    emit_run_files(
        &cfg.out_dir,
        &record,
        &model,
        pool,
        eval_set,
        cfg.render_count,
    )?;
    Ok((record, model))
}

// ---- experiment drivers ----

/// Runs the configured experiment and writes per-run plus summary files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let pool = build_pool(cfg)?;
    let labels = labels_of(&pool);
    let records = match cfg.experiment {
        ExperimentKind::FewShot => run_few_shot(cfg, &pool, &labels)?,
        ExperimentKind::ZeroShot => run_zero_shot(cfg, &pool, &labels)?,
        ExperimentKind::AblationPrompts => run_ablation_prompts(cfg, &pool, &labels)?,
        ExperimentKind::AblationLora => run_ablation_lora(cfg, &pool, &labels)?,
        ExperimentKind::HparamGrid => run_hparam_grid(cfg, &pool, &labels)?,
        ExperimentKind::Train => run_train(cfg, &pool)?,
        ExperimentKind::Eval => run_eval(cfg, &pool)?,
    };
    write_report(&records, &cfg.out_dir)?;
    Ok(records)
}

fn staged_split(cfg: &ExperimentConfig, labels: &[String], protocol: SplitProtocol) -> Result<Split> {
    dataset::make_split(
        labels,
        &SplitSpec {
            protocol,
            seed: cfg.seed,
        },
        cfg.per_class_cap,
    )
}

fn run_few_shot(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    labels: &[String],
) -> Result<Vec<RunRecord>> {
    // resolve all five splits before any training starts
    let mut specs = Vec::new();
    for k in 1..=4usize {
        specs.push((
            format!("{k}shot"),
            format!("{k}-shot"),
            staged_split(cfg, labels, SplitProtocol::KShot(k))?,
        ));
    }
    specs.push((
        "few_shot".into(),
        "few-shot".into(),
        staged_split(cfg, labels, SplitProtocol::FewShotOnePerScene)?,
    ));
    let mut records = Vec::new();
    for (name, variant, split) in specs {
        let (record, _) = execute_run(
            cfg,
            pool,
            RunSpec {
                name,
                variant,
                scene: None,
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                split,
                extra_config: BTreeMap::new(),
            },
        )?;
        records.push(record);
    }
    Ok(records)
}

fn run_zero_shot(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    labels: &[String],
) -> Result<Vec<RunRecord>> {
    let scene = cfg.zero_shot_train_scene.clone();
    let split = staged_split(cfg, labels, SplitProtocol::ZeroShot(scene.clone()))?;
    let started = Instant::now();
    let mut model = DepthModel::new(cfg.model.clone(), cfg.seed)?;
    let history = training::fit(&mut model, pool, &split, &cfg.train, cfg.seed)?;
    let wall = started.elapsed().as_secs_f64();

    let mut held_out: Vec<String> = split
        .test
        .iter()
        .map(|&i| labels[i].clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    held_out.sort();
    let mut records = Vec::new();
    for test_scene in held_out {
        let indices: Vec<usize> = split
            .test
            .iter()
            .copied()
            .filter(|&i| labels[i] == test_scene)
            .collect();
        let metrics = evaluate_indices(&model, pool, &indices)?;
        let record = RunRecord {
            run: format!("zero_shot_{test_scene}"),
            variant: test_scene.clone(),
            experiment: cfg.experiment.as_str().into(),
            seed: cfg.seed,
            scene: Some(test_scene.clone()),
            config: {
                let mut m = BTreeMap::new();
                m.insert("train_scene".into(), scene.clone());
                m.insert("prompt_mode".into(), cfg.model.prompt_mode.as_str().into());
                m.insert("lora_scheme".into(), cfg.model.lora_scheme.as_str().into());
                m.insert("batch_size".into(), cfg.train.batch_size.to_string());
                m.insert("lr0".into(), cfg.train.lr0.to_string());
                m
            },
            history: history.rows.clone(),
            metrics,
            wall_time_s: wall,
        };
        emit_run_files(&cfg.out_dir, &record, &model, pool, &indices, cfg.render_count)?;
        records.push(record);
    }
    Ok(records)
}

fn run_ablation_prompts(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    labels: &[String],
) -> Result<Vec<RunRecord>> {
    let split = ablation_base_split(cfg, labels)?;
    let mut records = Vec::new();
    for (variant, mode) in [
        ("A", PromptMode::Apg),
        ("B", PromptMode::Fixed),
        ("C", PromptMode::None),
    ] {
        let mut model_cfg = cfg.model.clone();
        model_cfg.prompt_mode = mode;
        let (record, _) = execute_run(
            cfg,
            pool,
            RunSpec {
                name: format!("prompts_{}", mode.as_str()),
                variant: variant.into(),
                scene: None,
                model: model_cfg,
                train: cfg.train.clone(),
                split: split.clone(),
                extra_config: BTreeMap::new(),
            },
        )?;
        records.push(record);
    }
    Ok(records)
}

fn run_ablation_lora(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    labels: &[String],
) -> Result<Vec<RunRecord>> {
    let split = ablation_base_split(cfg, labels)?;
    let mut records = Vec::new();
    for (variant, scheme) in [
        ("scheme1", LoraScheme::FrozenBoth),
        ("scheme2", LoraScheme::VisionOnly),
        ("scheme3", LoraScheme::VisionAndText),
    ] {
        let mut model_cfg = cfg.model.clone();
        model_cfg.lora_scheme = scheme;
        let (record, _) = execute_run(
            cfg,
            pool,
            RunSpec {
                name: format!("lora_{variant}"),
                variant: variant.into(),
                scene: None,
                model: model_cfg,
                train: cfg.train.clone(),
                split: split.clone(),
                extra_config: BTreeMap::new(),
            },
        )?;
        records.push(record);
    }
    Ok(records)
}

/// Ablations train on the staged 4-class split when those classes exist,
/// falling back to one image per scene otherwise.
fn ablation_base_split(cfg: &ExperimentConfig, labels: &[String]) -> Result<Split> {
    match staged_split(cfg, labels, SplitProtocol::KShot(4)) {
        Ok(split) => Ok(split),
        Err(Error::Split { .. }) => {
            staged_split(cfg, labels, SplitProtocol::FewShotOnePerScene)
        }
        Err(e) => Err(e),
    }
}

fn run_hparam_grid(
    cfg: &ExperimentConfig,
    pool: &[SceneSample],
    labels: &[String],
) -> Result<Vec<RunRecord>> {
    let split = ablation_base_split(cfg, labels)?;
    let d_vision = cfg.model.backbone.vision_width;
    let d_text = cfg.model.backbone.text_width;
    let max_printed_rank_vision = HPARAM_GRID.iter().map(|g| g.1).max().unwrap();
    let max_printed_rank_text = HPARAM_GRID.iter().map(|g| g.2).max().unwrap();
    // shrink published ranks only when the working widths demand it
    let vision_scale = 1.0f64.min((d_vision / 2) as f64 / max_printed_rank_vision as f64);
    let text_scale = 1.0f64.min((d_text / 2) as f64 / max_printed_rank_text as f64);

    let mut records = Vec::new();
    for (i, &(alpha_vit, rank_vit, rank_llm, batch, lr)) in HPARAM_GRID.iter().enumerate() {
        let rank_v = ((rank_vit as f64 * vision_scale).round() as usize).max(1);
        let rank_t = ((rank_llm as f64 * text_scale).round() as usize).max(1);
        let alpha_v = alpha_vit * rank_v as f64 / rank_vit as f64;
        let batch_used = ((batch as f64 / 8.0).round() as usize)
            .clamp(1, split.train.len().max(1));
        let lr_used = lr * cfg.grid_lr_mult;

        let mut model_cfg = cfg.model.clone();
        model_cfg.lora_scheme = LoraScheme::VisionAndText;
        model_cfg.lora_rank_vision = rank_v;
        model_cfg.lora_alpha_vision = alpha_v;
        model_cfg.lora_rank_text = rank_t;
        model_cfg.lora_alpha_text = rank_t as f64;
        let mut train_cfg = cfg.train.clone();
        train_cfg.batch_size = batch_used;
        train_cfg.lr0 = lr_used;
        train_cfg.lr_min = lr_used / 100.0;

        let mut extra = BTreeMap::new();
        extra.insert("alpha_vit".into(), format!("{alpha_vit}"));
        extra.insert("rank_vit".into(), rank_vit.to_string());
        extra.insert("rank_llm".into(), rank_llm.to_string());
        extra.insert("batch_size_printed".into(), batch.to_string());
        extra.insert("lr_printed".into(), format!("{lr:e}"));
        extra.insert("alpha_llm_policy".into(), "rank_matched_default".into());

        let (record, _) = execute_run(
            cfg,
            pool,
            RunSpec {
                name: format!("scheme{}", i + 1),
                variant: format!("scheme{}", i + 1),
                scene: None,
                model: model_cfg,
                train: train_cfg,
                split: split.clone(),
                extra_config: extra,
            },
        )?;
        records.push(record);
    }
    Ok(records)
}

fn run_train(cfg: &ExperimentConfig, pool: &[SceneSample]) -> Result<Vec<RunRecord>> {
    let split = basic_split(pool.len(), cfg.seed);
    let (record, model) = execute_run(
        cfg,
        pool,
        RunSpec {
            name: "train".into(),
            variant: "train".into(),
            scene: None,
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            split,
            extra_config: BTreeMap::new(),
        },
    )?;
    let weights_path = cfg.out_dir.join("model.lmde");
    model.save(&weights_path)?;
    Ok(vec![record])
}

fn run_eval(cfg: &ExperimentConfig, pool: &[SceneSample]) -> Result<Vec<RunRecord>> {
    let path = cfg.weights.as_ref().expect("validated");
    let model = DepthModel::load(path)?;
    let started = Instant::now();
    let indices: Vec<usize> = (0..pool.len()).collect();
    let metrics = evaluate_indices(&model, pool, &indices)?;
    let record = RunRecord {
        run: "eval".into(),
        variant: "eval".into(),
        experiment: cfg.experiment.as_str().into(),
        seed: cfg.seed,
        scene: None,
        config: BTreeMap::new(),
        history: Vec::new(),
        metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    emit_run_files(&cfg.out_dir, &record, &model, pool, &indices, cfg.render_count)?;
    Ok(vec![record])
}

// ---- rendering and reports ----

/// Writes a depth map as an 8-bit grayscale PNG: min-max normalized over
/// valid pixels, invalid pixels black, and a constant map renders as
/// mid-gray. Identical inputs produce identical bytes.
pub fn render_depth_image(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (d, &v) in depth.depth().iter().zip(depth.valid()) {
        if v {
            lo = lo.min(*d);
            hi = hi.max(*d);
        }
    }
    let span = hi - lo;
    let bytes: Vec<u8> = depth
        .depth()
        .iter()
        .zip(depth.valid())
        .map(|(d, &v)| {
            if !v {
                0u8
            } else if span <= 0.0 {
                128u8
            } else {
                ((d - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        depth.width() as u32,
        depth.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Report(format!("png header: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Report(format!("png write: {e}")))?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    records: &'a [RunRecord],
    best: BTreeMap<&'static str, String>,
}

/// Writes `summary.csv` (one row per run with an argmin flag on RMSE) and
/// `report.json` with full records plus the best run per metric.
pub fn write_report(records: &[RunRecord], dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Report("no records to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let argbest = |better: &dyn Fn(&MetricsReport, &MetricsReport) -> bool| -> String {
        let mut best = &records[0];
        for r in &records[1..] {
            if better(&r.metrics, &best.metrics) {
                best = r;
            }
        }
        best.run.clone()
    };
    let mut best = BTreeMap::new();
    best.insert("rmse", argbest(&|a, b| a.rmse < b.rmse));
    best.insert("abs_rel", argbest(&|a, b| a.abs_rel < b.abs_rel));
    best.insert("sq_rel", argbest(&|a, b| a.sq_rel < b.sq_rel));
    best.insert("log_rmse", argbest(&|a, b| a.log_rmse < b.log_rmse));
    best.insert("delta1", argbest(&|a, b| a.delta1 > b.delta1));
    best.insert("delta2", argbest(&|a, b| a.delta2 > b.delta2));
    best.insert("delta3", argbest(&|a, b| a.delta3 > b.delta3));

    let best_rmse = best["rmse"].clone();
    let mut csv = String::from(
        "run,experiment,variant,seed,scene,prompt_mode,lora_scheme,batch_size,lr0,\
         rmse,abs_rel,sq_rel,log_rmse,delta1,delta2,delta3,n_valid,best_rmse\n",
    );
    for r in records {
        let get = |k: &str| r.config.get(k).cloned().unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.experiment,
            r.variant,
            r.seed,
            r.scene.clone().unwrap_or_default(),
            get("prompt_mode"),
            get("lora_scheme"),
            get("batch_size"),
            get("lr0"),
            r.metrics.rmse,
            r.metrics.abs_rel,
            r.metrics.sq_rel,
            r.metrics.log_rmse,
            r.metrics.delta1,
            r.metrics.delta2,
            r.metrics.delta3,
            r.metrics.n_valid,
            r.run == best_rmse
        ));
    }
    let csv_path = dir.join("summary.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let report = Report { records, best };
    let json_path = dir.join("report.json");
    let body = serde_json::to_string_pretty(&report).expect("report serialize");
    fs::write(&json_path, body).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}
