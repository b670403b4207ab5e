//! Training loops for the tokenizer and the masked token model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{load_vq, mae_checkpoint, vq_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, InpaintPredictor};
use crate::forge::{eval_seed, DatasetManifest, Split};
use crate::image::Image;
use crate::mae::{check_tokenizer, masked_ce_loss, pixel_mae_loss, HeadKind, MaeConfig, MaeModel, MaeSample};
use crate::mask::{PatchMask, Rect};
use crate::nn::{clip_grad_norm, AdamW, Module, Param};
use crate::vq::{image_to_patches, TokenGrid, VqConfig, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vq,
    Mae,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(Stage::Vq),
            "mae" => Ok(Stage::Mae),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected vq or mae)"))),
        }
    }
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Vq => "vq",
            Stage::Mae => "mae",
        }
    }
}

pub const VQ_CHECKPOINT: &str = "vq.ckpt";
pub const MAE_CHECKPOINT: &str = "mae.ckpt";

/// Everything a training run needs. Read from `key = value` lines; `#`
/// starts a comment. Model fields use `vq.` and `mae.` prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Tokenizer checkpoint for the mae stage; defaults to
    /// `checkpoint_dir/vq.ckpt`.
    pub tokenizer: Option<PathBuf>,
    /// Checkpoint file name inside `checkpoint_dir`.
    pub output: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    /// Defaults to 5% of the epochs.
    pub warmup_epochs: Option<f64>,
    pub weight_decay: f64,
    pub clip: f64,
    pub mask_ratio: f64,
    /// Chance that a grid figure is masked on its answer cell instead of
    /// uniformly at random.
    pub answer_mask_prob: f64,
    /// Score every position instead of only masked ones.
    pub all_tokens: bool,
    pub seed: u64,
    /// Random patches drawn per image for the tokenizer; `None` uses all.
    pub patches_per_image: Option<usize>,
    /// Caps on the number of images read from each split.
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
    pub vq: VqConfig,
    pub mae: MaeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Vq,
            manifest: PathBuf::from("data/manifest.jsonl"),
            checkpoint_dir: PathBuf::from("runs"),
            tokenizer: None,
            output: None,
            epochs: 20,
            batch_size: 64,
            base_lr: 1.5e-4,
            warmup_epochs: None,
            weight_decay: 0.05,
            clip: 1.0,
            mask_ratio: 0.75,
            answer_mask_prob: 0.0,
            all_tokens: false,
            seed: 0,
            patches_per_image: None,
            max_train: None,
            max_val: None,
            vq: VqConfig::default(),
            mae: MaeConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |v| v.to_string())
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "stage" => self.stage = v.parse()?,
            "manifest" => self.manifest = PathBuf::from(v),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(v),
            "tokenizer" => self.tokenizer = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "output" => self.output = parse_opt(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_opt(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "answer_mask_prob" => self.answer_mask_prob = parse(key, v)?,
            "all_tokens" => self.all_tokens = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "patches_per_image" => self.patches_per_image = parse_opt(key, v)?,
            "max_train" => self.max_train = parse_opt(key, v)?,
            "max_val" => self.max_val = parse_opt(key, v)?,
            "vq.patch_size" => self.vq.patch_size = parse(key, v)?,
            "vq.codebook_size" => self.vq.codebook_size = parse(key, v)?,
            "vq.dim" => self.vq.dim = parse(key, v)?,
            "vq.widths" => {
                self.vq.widths = v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_>>()?;
            }
            "vq.beta" => self.vq.beta = parse(key, v)?,
            "mae.patch_size" => self.mae.patch_size = parse(key, v)?,
            "mae.grid_rows" => self.mae.grid_rows = parse(key, v)?,
            "mae.grid_cols" => self.mae.grid_cols = parse(key, v)?,
            "mae.enc_dim" => self.mae.enc_dim = parse(key, v)?,
            "mae.enc_depth" => self.mae.enc_depth = parse(key, v)?,
            "mae.enc_heads" => self.mae.enc_heads = parse(key, v)?,
            "mae.dec_dim" => self.mae.dec_dim = parse(key, v)?,
            "mae.dec_depth" => self.mae.dec_depth = parse(key, v)?,
            "mae.dec_heads" => self.mae.dec_heads = parse(key, v)?,
            "mae.mlp_ratio" => self.mae.mlp_ratio = parse(key, v)?,
            "mae.vocab" => self.mae.vocab = parse(key, v)?,
            "mae.head" => {
                self.mae.head = match v {
                    "token" => HeadKind::TokenLogits,
                    "pixel" => HeadKind::PixelRegression,
                    _ => return Err(Error::Config(format!("mae.head must be token or pixel, got {v:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// The config as `key = value` lines that [`TrainConfig::parse`] reads back.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("stage", self.stage.name().into());
        put("manifest", self.manifest.display().to_string());
        put("checkpoint_dir", self.checkpoint_dir.display().to_string());
        put("tokenizer", opt_str(&self.tokenizer.as_ref().map(|p| p.display())));
        put("output", opt_str(&self.output));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("base_lr", self.base_lr.to_string());
        put("warmup_epochs", opt_str(&self.warmup_epochs));
        put("weight_decay", self.weight_decay.to_string());
        put("clip", self.clip.to_string());
        put("mask_ratio", self.mask_ratio.to_string());
        put("answer_mask_prob", self.answer_mask_prob.to_string());
        put("all_tokens", self.all_tokens.to_string());
        put("seed", self.seed.to_string());
        put("patches_per_image", opt_str(&self.patches_per_image));
        put("max_train", opt_str(&self.max_train));
        put("max_val", opt_str(&self.max_val));
        put("vq.patch_size", self.vq.patch_size.to_string());
        put("vq.codebook_size", self.vq.codebook_size.to_string());
        put("vq.dim", self.vq.dim.to_string());
        put("vq.widths", self.vq.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","));
        put("vq.beta", self.vq.beta.to_string());
        let m = &self.mae;
        put("mae.patch_size", m.patch_size.to_string());
        put("mae.grid_rows", m.grid_rows.to_string());
        put("mae.grid_cols", m.grid_cols.to_string());
        put("mae.enc_dim", m.enc_dim.to_string());
        put("mae.enc_depth", m.enc_depth.to_string());
        put("mae.enc_heads", m.enc_heads.to_string());
        put("mae.dec_dim", m.dec_dim.to_string());
        put("mae.dec_depth", m.dec_depth.to_string());
        put("mae.dec_heads", m.dec_heads.to_string());
        put("mae.mlp_ratio", m.mlp_ratio.to_string());
        put("mae.vocab", m.vocab.to_string());
        put("mae.head", if m.head == HeadKind::TokenLogits { "token" } else { "pixel" }.into());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} must lie strictly between 0 and 1", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.answer_mask_prob) {
            return Err(Error::Config(format!("answer_mask_prob {} outside [0, 1]", self.answer_mask_prob)));
        }
        if let Some(w) = self.warmup_epochs {
            if !(w >= 0.0 && w < self.epochs as f64) {
                return Err(Error::Config(format!("warmup_epochs {w} must be in [0, epochs)")));
            }
        }
        if self.patches_per_image == Some(0) {
            return Err(Error::Config("patches_per_image must be positive".into()));
        }
        match self.stage {
            Stage::Vq => self.vq.validate(),
            Stage::Mae => self.mae.validate(),
        }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup(&self) -> f64 {
        self.warmup_epochs.unwrap_or(0.05 * self.epochs as f64)
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let total = self.epochs * steps_per_epoch;
        Schedule { total_steps: total, warmup_steps: (self.warmup() * steps_per_epoch as f64).round() as usize, peak: self.peak_lr() }
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.tokenizer.clone().unwrap_or_else(|| self.checkpoint_dir.join(VQ_CHECKPOINT))
    }

    pub fn output_path(&self) -> PathBuf {
        let default = match self.stage {
            Stage::Vq => VQ_CHECKPOINT,
            Stage::Mae => MAE_CHECKPOINT,
        };
        self.checkpoint_dir.join(self.output.as_deref().unwrap_or(default))
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_path().with_extension("log.jsonl")
    }
}

/// Linear warmup to `peak`, then cosine decay reaching 0 at the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

/// Images of a dataset held as 8-bit RGB to keep memory down.
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub train: Vec<Vec<u8>>,
    pub train_answer: Vec<Option<Rect>>,
    pub val: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>, max_train: Option<usize>, max_val: Option<usize>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut dims = None;
        let mut read = |rel: &str| -> Result<Vec<u8>> {
            let img = Image::load_png(root.join(rel))?;
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(Error::Shape(format!("figure {rel} is {:?}, expected {d:?}", img.dims())));
                }
                _ => {}
            }
            Ok(img.to_rgb8())
        };
        let mut train = Vec::new();
        let mut train_answer = Vec::new();
        for r in manifest.split(Split::Train).take(max_train.unwrap_or(usize::MAX)) {
            train.push(read(&r.path)?);
            train_answer.push(r.answer_cell);
        }
        let val = manifest.split(Split::Val).take(max_val.unwrap_or(usize::MAX)).map(|r| read(&r.path)).collect::<Result<Vec<_>>>()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!("{} needs both train and val figures", manifest_path.display())));
        }
        let (height, width) = dims.expect("at least one image");
        Ok(Self { height, width, train, train_answer, val })
    }

    pub fn image(&self, bytes: &[u8]) -> Image {
        Image::from_rgb8(self.height, self.width, bytes).expect("stored with matching dims")
    }
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<LogRecord>,
}

impl TrainSummary {
    pub fn val_losses(&self) -> Vec<f64> {
        self.log.iter().filter(|r| r.split == Split::Val).map(|r| r.loss).collect()
    }
}

struct Logger<'a> {
    file: std::fs::File,
    records: Vec<LogRecord>,
    progress: &'a mut dyn FnMut(&LogRecord),
}

impl Logger<'_> {
    fn push(&mut self, rec: LogRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(&rec).expect("plain record"))?;
        (self.progress)(&rec);
        self.records.push(rec);
        Ok(())
    }
}

fn params_mut<M: Module<f32>>(m: &mut M) -> Vec<&mut Param<f32>> {
    m.named_params_mut().into_iter().map(|(_, p)| p).collect()
}

fn diverged(stage: Stage, loss: f64, epoch: usize, step: usize) -> Error {
    Error::Divergence(format!(
        "{} loss became {loss} at epoch {epoch}, step {step}; try a lower base_lr or keep clip enabled",
        stage.name()
    ))
}

fn meta(cfg: &TrainConfig, log: &[LogRecord]) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("epochs".into(), Value::from(cfg.epochs));
    m.insert("seed".into(), Value::from(cfg.seed));
    m.insert("train_config".into(), Value::from(cfg.to_kv()));
    if let Some(last) = log.iter().rev().find(|r| r.split == Split::Val) {
        m.insert("final_val_loss".into(), Value::from(last.loss));
    }
    m
}

/// Mean per-pixel squared error of encode-then-decode over images.
pub fn reconstruction_mse(vq: &VqModel<f32>, images: &[Image]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        total += vq.decode_tokens(&vq.encode_image(img)?)?.mse(img)?;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains the patch tokenizer. Losses are logged per epoch; the val entry
/// is the reconstruction MSE.
pub fn train_vq(cfg: &TrainConfig, progress: &mut dyn FnMut(&LogRecord)) -> Result<TrainSummary> {
    if cfg.stage != Stage::Vq {
        return Err(Error::Config("train_vq needs stage = vq".into()));
    }
    cfg.validate()?;
    let data = Dataset::load(&cfg.manifest, cfg.max_train, cfg.max_val)?;
    let p = cfg.vq.patch_size;
    if data.height % p != 0 || data.width % p != 0 {
        return Err(Error::Config(format!("figures of {}x{} do not tile into {p}-pixel patches", data.height, data.width)));
    }
    let per_image = (data.height / p) * (data.width / p);
    let take = cfg.patches_per_image.unwrap_or(per_image).min(per_image);
    let pl = cfg.vq.patch_len();
    let val: Vec<Image> = data.val.iter().map(|b| data.image(b)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VqModel::<f32>::new(cfg.vq.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut log = Logger { file: std::fs::File::create(cfg.log_path())?, records: Vec::new(), progress };

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    let mut initialised = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0u64; cfg.vq.codebook_size];
        let mut sum = 0.0;
        let mut last = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len() * take * pl);
            for &i in chunk {
                let all = image_to_patches::<f32>(&data.image(&data.train[i]), p)?;
                if take == per_image {
                    patches.extend_from_slice(&all);
                } else {
                    for j in rand::seq::index::sample(&mut rng, per_image, take) {
                        patches.extend_from_slice(&all[j * pl..(j + 1) * pl]);
                    }
                }
            }
            let n = patches.len() / pl;
            if !initialised {
                let z = model.latents(&patches, n);
                model.init_codebook_from(&z, &mut rng);
                initialised = true;
            }
            model.zero_grad();
            let (losses, idx) = model.train_step(&patches, n);
            if !losses.total.is_finite() {
                return Err(diverged(Stage::Vq, losses.total, epoch, step));
            }
            for k in idx {
                usage[k as usize] += 1;
            }
            let mut params = params_mut(&mut model);
            clip_grad_norm(&mut params, cfg.clip);
            opt.step(&mut params, schedule.lr_at(step));
            sum += losses.total;
            step += 1;
            last = patches;
        }
        let lr = schedule.lr_at(step.saturating_sub(1));
        log.push(LogRecord { stage: Stage::Vq, epoch, split: Split::Train, loss: sum / steps_per_epoch as f64, lr })?;
        let z = model.latents(&last, last.len() / pl);
        model.reinit_dead(&usage, &z, &mut rng);
        let mse = reconstruction_mse(&model, &val)?;
        if !mse.is_finite() {
            return Err(diverged(Stage::Vq, mse, epoch, step));
        }
        log.push(LogRecord { stage: Stage::Vq, epoch, split: Split::Val, loss: mse, lr })?;
    }
    let path = cfg.output_path();
    vq_checkpoint(&model, meta(cfg, &log.records)).save(&path)?;
    Ok(TrainSummary { checkpoint: path, log: log.records })
}

fn answer_mask(rect: Rect, cfg: &MaeConfig) -> PatchMask {
    let p = cfg.patch_size;
    PatchMask::rect(cfg.grid_rows, cfg.grid_cols, rect.top / p, rect.left / p, rect.height / p, rect.width / p)
}

/// Validation masks are fixed per image so epochs are comparable.
pub fn val_mask(cfg: &MaeConfig, ratio: f64, seed: u64, index: usize) -> Result<PatchMask> {
    PatchMask::random(cfg.grid_rows, cfg.grid_cols, ratio, eval_seed(seed, index))
}

/// Mean validation loss: masked-token cross-entropy for the token head,
/// masked-pixel squared error for the pixel head.
pub fn mae_val_loss(model: &MaeModel<f32>, images: &[Image], tokens: &[TokenGrid], ratio: f64, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let mask = val_mask(&model.config, ratio, seed, i)?;
        total += match model.config.head {
            HeadKind::TokenLogits => masked_ce_loss(&model.forward(img, &mask)?, &tokens[i], &mask)?,
            HeadKind::PixelRegression => {
                let (out, _) = model.forward_image(img, &mask)?;
                pixel_mae_loss(&out, img, &mask)?
            }
        };
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains the masked token model against a frozen tokenizer (token head)
/// or against pixels (pixel head).
pub fn train_mae(cfg: &TrainConfig, progress: &mut dyn FnMut(&LogRecord)) -> Result<TrainSummary> {
    if cfg.stage != Stage::Mae {
        return Err(Error::Config("train_mae needs stage = mae".into()));
    }
    cfg.validate()?;
    let token_head = cfg.mae.head == HeadKind::TokenLogits;
    let vq = if token_head {
        let vq = load_vq(cfg.tokenizer_path())?;
        check_tokenizer(&cfg.mae, &vq.config).map_err(|e| Error::Config(format!("tokenizer {}: {e}", cfg.tokenizer_path().display())))?;
        Some(vq)
    } else {
        None
    };
    let data = Dataset::load(&cfg.manifest, cfg.max_train, cfg.max_val)?;
    if (data.height, data.width) != cfg.mae.image_dims() {
        return Err(Error::Config(format!(
            "figures are {}x{} but the model expects {:?}",
            data.height,
            data.width,
            cfg.mae.image_dims()
        )));
    }
    let encode = |bytes: &[u8]| -> Result<TokenGrid> {
        match &vq {
            Some(vq) => vq.encode_image(&data.image(bytes)),
            None => TokenGrid::new(0, 0, Vec::new()),
        }
    };
    let train_tokens = data.train.iter().map(|b| encode(b)).collect::<Result<Vec<_>>>()?;
    let val_images: Vec<Image> = data.val.iter().map(|b| data.image(b)).collect();
    let val_tokens = data.val.iter().map(|b| encode(b)).collect::<Result<Vec<_>>>()?;
    drop(vq);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MaeModel::<f32>::new(cfg.mae.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule(steps_per_epoch);
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut log = Logger { file: std::fs::File::create(cfg.log_path())?, records: Vec::new(), progress };
    let (rows, cols) = (cfg.mae.grid_rows, cfg.mae.grid_cols);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = chunk.iter().map(|&i| model.prepare(&data.image(&data.train[i]))).collect::<Result<Vec<_>>>()?;
            let masks = chunk
                .iter()
                .map(|&i| match data.train_answer[i] {
                    Some(rect) if cfg.answer_mask_prob > 0.0 && rng.gen_bool(cfg.answer_mask_prob) => Ok(answer_mask(rect, &cfg.mae)),
                    _ => PatchMask::random_with(rows, cols, cfg.mask_ratio, &mut rng),
                })
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<MaeSample<'_, f32>> =
                inputs.iter().zip(&masks).map(|(patches, mask)| MaeSample { patches, mask }).collect();
            model.zero_grad();
            let loss = if token_head {
                let targets: Vec<&[u32]> = chunk.iter().map(|&i| train_tokens[i].tokens()).collect();
                model.train_step_tokens(&batch, &targets, cfg.all_tokens)?
            } else {
                model.train_step_pixels(&batch)?
            };
            if !loss.is_finite() {
                return Err(diverged(Stage::Mae, loss, epoch, step));
            }
            let mut params = params_mut(&mut model);
            clip_grad_norm(&mut params, cfg.clip);
            opt.step(&mut params, schedule.lr_at(step));
            sum += loss;
            step += 1;
        }
        let lr = schedule.lr_at(step.saturating_sub(1));
        log.push(LogRecord { stage: Stage::Mae, epoch, split: Split::Train, loss: sum / steps_per_epoch as f64, lr })?;
        let val = mae_val_loss(&model, &val_images, &val_tokens, cfg.mask_ratio, cfg.seed)?;
        if !val.is_finite() {
            return Err(diverged(Stage::Mae, val, epoch, step));
        }
        log.push(LogRecord { stage: Stage::Mae, epoch, split: Split::Val, loss: val, lr })?;
    }
    let path = cfg.output_path();
    mae_checkpoint(&model, meta(cfg, &log.records)).save(&path)?;
    Ok(TrainSummary { checkpoint: path, log: log.records })
}

pub fn train(cfg: &TrainConfig, progress: &mut dyn FnMut(&LogRecord)) -> Result<TrainSummary> {
    match cfg.stage {
        Stage::Vq => train_vq(cfg, progress),
        Stage::Mae => train_mae(cfg, progress),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid_config: String,
    pub plain_config: String,
    pub grid: Vec<EvalReport>,
    pub plain: Vec<EvalReport>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<14} {:>10} {:>10} {:>10}\n", "task", "grid", "plain", "delta");
        for (g, p) in self.grid.iter().zip(&self.plain) {
            let _ = writeln!(out, "{:<14} {:>10.2} {:>10.2} {:>+10.2}", g.task.name(), 100.0 * g.mean, 100.0 * p.mean, 100.0 * (g.mean - p.mean));
        }
        out
    }
}

/// Evaluates a grid-trained and a plain-trained model on the same tasks.
pub fn compare_models(
    grid: &InpaintPredictor,
    plain: &InpaintPredictor,
    grid_cfg: &TrainConfig,
    plain_cfg: &TrainConfig,
    evals: &[EvalConfig],
    jobs: usize,
) -> Result<AblationReport> {
    let run = |p: &InpaintPredictor| evals.iter().map(|e| evaluate(p, e, jobs)).collect::<Result<Vec<_>>>();
    Ok(AblationReport { grid_config: grid_cfg.to_kv(), plain_config: plain_cfg.to_kv(), grid: run(grid)?, plain: run(plain)? })
}

/// Trains one model on grid figures and one on single-image figures, then
/// evaluates both. The two configs normally differ only in their manifest.
pub fn ablation_grid_vs_plain(
    grid_cfg: &TrainConfig,
    plain_cfg: &TrainConfig,
    evals: &[EvalConfig],
    jobs: usize,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<AblationReport> {
    if grid_cfg.output_path() == plain_cfg.output_path() {
        return Err(Error::Config("grid and plain runs would write the same checkpoint".into()));
    }
    let grid = trained_predictor(grid_cfg, "grid", progress)?;
    let plain = trained_predictor(plain_cfg, "plain", progress)?;
    compare_models(&grid, &plain, grid_cfg, plain_cfg, evals, jobs)
}

fn trained_predictor(cfg: &TrainConfig, name: &str, progress: &mut dyn FnMut(&LogRecord)) -> Result<InpaintPredictor> {
    let summary = train_mae(cfg, progress)?;
    let mae = crate::checkpoint::load_mae(&summary.checkpoint)?;
    let vq = if mae.config.head == HeadKind::TokenLogits { Some(load_vq(cfg.tokenizer_path())?) } else { None };
    InpaintPredictor::new(name, mae, vq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule { total_steps: 1000, warmup_steps: 50, peak: 1e-3 };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(50), 1e-3);
        assert!((s.lr_at(25) - 5e-4).abs() < 1e-15);
        assert!(s.lr_at(999) <= 1e-6);
        for k in 50..999 {
            assert!(s.lr_at(k + 1) <= s.lr_at(k));
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("stage", "mae").unwrap();
        cfg.set("vq.widths", "32, 48").unwrap();
        cfg.set("tokenizer", "x/vq.ckpt").unwrap();
        cfg.set("mae.head", "pixel").unwrap();
        cfg.set("warmup_epochs", "2.5").unwrap();
        let text = cfg.to_kv();
        assert_eq!(TrainConfig::parse(&text).unwrap(), cfg);
        assert!(TrainConfig::parse("epochs = 3 # trailing\n\n# only comment\nseed=4").is_ok());
        assert!(TrainConfig::parse("nonsense = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for (k, v) in [("epochs", "0"), ("mask_ratio", "1"), ("mask_ratio", "0"), ("base_lr", "0"), ("answer_mask_prob", "2")] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k}={v}");
        }
    }
}
