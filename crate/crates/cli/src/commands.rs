//! Subcommand definitions and their implementations.

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gridprompt::eval::{evaluate, render_table, round_to_palette, CopyBaseline, EvalConfig, EvalReport, OraclePredictor, Predictor};
use gridprompt::forge::{build_dataset, FigureConfig, TaskKind, DEFAULT_DISTRACTOR_FRACTION, MANIFEST_FILE};
use gridprompt::prompt::{compose_prompt, GridLayout, LayoutPreset, Palette, TaskExample};
use gridprompt::train::{ablation_grid_vs_plain, compare_models, train, AblationReport, LogRecord, Stage, TrainConfig};
use gridprompt::{Error, Image, Result};
use serde::{Deserialize, Serialize};

use crate::models::{load_models_dir, load_predictor};
use crate::service::{self, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "gridprompt", version, about = "Visual prompting by grid inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic figure dataset and its manifest.
    GenData(GenDataArgs),
    /// Train the patch tokenizer.
    TrainVq(TrainArgs),
    /// Train the masked token model against a frozen tokenizer.
    TrainMae(TrainArgs),
    /// Compose a prompt from image files and inpaint it.
    Prompt(PromptArgs),
    /// Score a model or baseline on synthetic tasks.
    Eval(EvalArgs),
    /// Train on grid figures and on single images, then compare.
    Ablate(AblateArgs),
    /// Run the local HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DISTRACTOR_FRACTION)]
    pub distractor_fraction: f64,
    #[arg(long, default_value_t = 128)]
    pub canvas_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub max_examples: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub mae: PathBuf,
    #[arg(long)]
    pub vq: Option<PathBuf>,
    /// Example pair as `input.png,output.png`; repeat for more examples.
    #[arg(long = "example", value_name = "IN,OUT", required = true)]
    pub examples: Vec<String>,
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value = "horizontal")]
    pub layout: LayoutPreset,
    /// Explicit example order, e.g. `1,0`; overrides the preset's order.
    #[arg(long, value_delimiter = ',')]
    pub row_order: Option<Vec<usize>>,
    /// Also write the answer snapped to this label palette.
    #[arg(long)]
    pub palette: Option<Palette>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// `copy`, `oracle`, or a directory holding mae.ckpt (and vq.ckpt).
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, conflicts_with = "model")]
    pub mae: Option<PathBuf>,
    #[arg(long, requires = "mae")]
    pub vq: Option<PathBuf>,
    /// Row label in the rendered table.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// One or more tasks, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "color")]
    pub task: Vec<TaskKind>,
    #[arg(long, default_value_t = 2)]
    pub n_examples: usize,
    #[arg(long, default_value = "horizontal")]
    pub layout: LayoutPreset,
    #[arg(long, default_value = "black-white")]
    pub palette: Palette,
    /// Ensemble members; reports one row per growing prefix of the list.
    #[arg(long, value_delimiter = ',')]
    pub ensemble: Vec<LayoutPreset>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Canvas for the baselines; models use their own input size.
    #[arg(long, default_value_t = 128)]
    pub canvas_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Config for the model trained on grid figures.
    #[arg(long)]
    pub grid: PathBuf,
    /// Config for the model trained on single images.
    #[arg(long)]
    pub plain: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "color,shape,size")]
    pub task: Vec<TaskKind>,
    #[arg(long, default_value_t = 2)]
    pub n_examples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Skip training when both checkpoints already exist.
    #[arg(long)]
    pub reuse: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub models_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long, default_value_t = 64)]
    pub queue_capacity: usize,
}

/// What `eval` writes: one report per (row, task).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub reports: Vec<EvalReport>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainVq(a) => train_stage(&a, Stage::Vq),
        Command::TrainMae(a) => train_stage(&a, Stage::Mae),
        Command::Prompt(a) => prompt(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Ablate(a) => ablate(&a).map(|_| ()),
        Command::Serve(a) => serve(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = FigureConfig {
        canvas_size: a.canvas_size,
        patch_size: a.patch_size,
        distractor_fraction: a.distractor_fraction,
        max_examples: a.max_examples,
        ..FigureConfig::default()
    };
    let manifest = build_dataset(a.count, &a.out, a.seed, &cfg)?;
    let val = manifest.records.iter().filter(|r| r.split == gridprompt::forge::Split::Val).count();
    println!("wrote {} figures ({} val) to {}", manifest.records.len(), val, a.out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn train_config(a: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.stage = stage;
    if let Some(v) = &a.manifest {
        cfg.manifest = v.clone();
    }
    if let Some(v) = &a.checkpoint_dir {
        cfg.checkpoint_dir = v.clone();
    }
    if let Some(v) = &a.tokenizer {
        cfg.tokenizer = Some(v.clone());
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.base_lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.stage = stage;
    Ok(cfg)
}

fn train_stage(a: &TrainArgs, stage: Stage) -> Result<()> {
    let cfg = train_config(a, stage)?;
    let quiet = a.quiet;
    let mut progress = |r: &LogRecord| {
        if !quiet {
            eprintln!("{} epoch {:>4} {:<5} loss {:.6} lr {:.3e}", r.stage.name(), r.epoch, format!("{:?}", r.split).to_lowercase(), r.loss, r.lr);
        }
    };
    let summary = train(&cfg, &mut progress)?;
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}

fn parse_pair(text: &str) -> Result<(PathBuf, PathBuf)> {
    let (a, b) = text.split_once(',').ok_or_else(|| Error::Argument(format!("--example expects IN,OUT, got {text:?}")))?;
    Ok((PathBuf::from(a.trim()), PathBuf::from(b.trim())))
}

pub fn prompt(a: &PromptArgs) -> Result<()> {
    let model = load_predictor("prompt", &a.mae, a.vq.as_deref())?;
    let examples = a
        .examples
        .iter()
        .map(|e| {
            let (i, o) = parse_pair(e)?;
            Ok(TaskExample::new(Image::load_png(i)?, Image::load_png(o)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let query = Image::load_png(&a.query)?;
    let mut layout = a.layout.layout(examples.len());
    if let Some(order) = &a.row_order {
        layout = GridLayout::with_order(layout.orientation, order.clone());
    }
    let composed = compose_prompt(&examples, &query, &layout, model.canvas(), model.mae.config.patch_size)?;
    let (completed, answer) = model.complete(&examples, &query, &layout)?;
    std::fs::create_dir_all(&a.out)?;
    composed.canvas.save_png(a.out.join("prompt.png"))?;
    completed.save_png(a.out.join("completed.png"))?;
    answer.save_png(a.out.join("answer.png"))?;
    if let Some(p) = a.palette {
        let (fg, bg) = p.colors();
        round_to_palette(&answer, &[bg, fg])?.save_png(a.out.join("answer-rounded.png"))?;
    }
    println!("wrote prompt.png, completed.png and answer.png to {}", a.out.display());
    Ok(())
}

fn predictor_from(m: &ModelArgs, canvas: usize, patch: usize) -> Result<Box<dyn Predictor>> {
    if let Some(mae) = &m.mae {
        let name = m.name.clone().unwrap_or_else(|| "mae".into());
        return Ok(Box::new(load_predictor(&name, mae, m.vq.as_deref())?));
    }
    match m.model.as_deref() {
        None | Some("copy") => Ok(Box::new(CopyBaseline { canvas, patch })),
        Some("oracle") => Ok(Box::new(OraclePredictor { canvas, patch })),
        Some(dir) => {
            let mut found = load_models_dir(Path::new(dir))?;
            if found.len() != 1 {
                return Err(Error::Config(format!("{dir} holds {} models; point at one of them", found.len())));
            }
            let mut p = found.pop().expect("one model");
            if let Some(name) = &m.name {
                p.id = name.clone();
            }
            Ok(Box::new(p))
        }
    }
}

struct Renamed<'a> {
    inner: &'a dyn Predictor,
    name: String,
}

impl Predictor for Renamed<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, instance: &gridprompt::forge::TaskInstance, layout: &GridLayout) -> Result<Image> {
        self.inner.predict(instance, layout)
    }

    fn geometry(&self) -> Option<(usize, usize)> {
        self.inner.geometry()
    }
}

pub fn eval(a: &EvalArgs) -> Result<EvalRun> {
    let predictor = predictor_from(&a.model, a.canvas_size, a.patch_size)?;
    let base_name = a.model.name.clone().unwrap_or_else(|| predictor.name());
    let (canvas, patch) = predictor.geometry().unwrap_or((a.canvas_size, a.patch_size));
    let rows: Vec<(String, Vec<LayoutPreset>)> = if a.ensemble.is_empty() {
        vec![(base_name.clone(), Vec::new())]
    } else {
        (1..=a.ensemble.len())
            .map(|k| {
                let members = a.ensemble[..k].to_vec();
                let label = members.iter().map(|m| m.name()).collect::<Vec<_>>().join("+");
                (format!("{base_name} [{label}]"), members)
            })
            .collect()
    };
    let mut reports = Vec::new();
    for (name, members) in &rows {
        let named = Renamed { inner: predictor.as_ref(), name: name.clone() };
        for &task in &a.task {
            let cfg = EvalConfig {
                task,
                n_examples: a.n_examples,
                layout: a.layout,
                palette: a.palette,
                ensemble: members.clone(),
                instances: a.instances,
                seed: a.seed,
                canvas,
                patch,
            };
            reports.push(evaluate(&named, &cfg, a.jobs)?);
        }
    }
    let run = EvalRun { reports };
    if let Some(out) = &a.out {
        write_json(out, &run)?;
    }
    print!("{}", render_table(&run.reports));
    Ok(run)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<AblationReport> {
    let grid_cfg = TrainConfig { stage: Stage::Mae, ..TrainConfig::load(&a.grid)? };
    let plain_cfg = TrainConfig { stage: Stage::Mae, ..TrainConfig::load(&a.plain)? };
    let evals: Vec<EvalConfig> = a
        .task
        .iter()
        .map(|&task| EvalConfig { task, n_examples: a.n_examples, instances: a.instances, seed: a.seed, ..EvalConfig::default() })
        .collect();
    let report = if a.reuse && grid_cfg.output_path().is_file() && plain_cfg.output_path().is_file() {
        let grid = load_predictor("grid", &grid_cfg.output_path(), Some(&grid_cfg.tokenizer_path()))?;
        let plain = load_predictor("plain", &plain_cfg.output_path(), Some(&plain_cfg.tokenizer_path()))?;
        compare_models(&grid, &plain, &grid_cfg, &plain_cfg, &evals, a.jobs)?
    } else {
        let mut progress = |r: &LogRecord| eprintln!("{} epoch {:>4} {:?} loss {:.6}", r.stage.name(), r.epoch, r.split, r.loss);
        ablation_grid_vs_plain(&grid_cfg, &plain_cfg, &evals, a.jobs, &mut progress)?
    };
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print!("{}", report.render());
    Ok(report)
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let models = load_models_dir(&a.models_dir)?;
    let ids: Vec<String> = models.iter().map(|m| m.id.clone()).collect();
    let state = Arc::new(AppState::new(models, ServiceConfig { parallelism: a.parallelism, queue_capacity: a.queue_capacity }));
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("serving {} on http://{addr}", ids.join(", "));
    rt.block_on(service::serve(state, addr))?;
    Ok(())
}
