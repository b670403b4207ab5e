//! Metrics, post-processing, baselines and the evaluation driver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{eval_seed, sample_task_styled, TaskInstance, TaskKind};
use crate::image::{Image, Rgb};
use crate::mae::{inpaint, inpaint_pixels, HeadKind, MaeModel};
use crate::mask::{BinaryMask, Rect};
use crate::prompt::{compose_prompt, extract_answer, GridLayout, LabelStyle, LayoutPreset, Palette, Rendering};
use crate::vq::VqModel;

/// Colours that synthetic-task predictions are snapped to.
pub const SYNTHETIC_PALETTE: [Rgb; 4] = [Rgb::BLACK, Rgb::WHITE, Rgb::BLUE, Rgb::GREEN];

/// Replaces each pixel by the nearest palette colour (squared RGB
/// distance, earliest entry on ties).
pub fn round_to_palette(image: &Image, palette: &[Rgb]) -> Result<Image> {
    if palette.is_empty() {
        return Err(Error::Config("empty palette".into()));
    }
    let (h, w) = image.dims();
    Image::from_fn(h, w, |r, c| {
        let px = image.get(r, c);
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (i, p) in palette.iter().enumerate() {
            let d = px.dist2(p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        palette[best]
    })
}

/// Foreground IoU; two empty masks score 1.
pub fn miou_binary(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", pred.dims(), gt.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(*a && *b);
        union += usize::from(*a || *b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU between the pixels that round to `target_color` and the
/// ground-truth shape region.
pub fn color_aware_miou(pred: &Image, gt_region: &BinaryMask, target_color: Rgb) -> Result<f64> {
    if !SYNTHETIC_PALETTE.contains(&target_color) {
        return Err(Error::Config(format!("target colour {:?} is not in the evaluation palette", target_color.0)));
    }
    if pred.dims() != gt_region.dims() {
        return Err(Error::Shape(format!("prediction {:?} and region {:?} differ", pred.dims(), gt_region.dims())));
    }
    let rounded = round_to_palette(pred, &SYNTHETIC_PALETTE)?;
    let (h, w) = pred.dims();
    let fg = BinaryMask::from_fn(h, w, |r, c| rounded.get(r, c) == target_color);
    miou_binary(&fg, gt_region)
}

/// Opens the mask with a 3x3 cross, labels 8-connected components and
/// returns the tight box of the largest one (the first found in raster
/// order on ties).
pub fn largest_component_bbox(mask: &BinaryMask) -> Result<Rect> {
    let opened = mask.open_cross();
    let (h, w) = opened.dims();
    let mut label = vec![0u32; h * w];
    let mut best: Option<(usize, Rect)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !opened.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let (mut area, mut top, mut left, mut bottom, mut right) = (0usize, h, w, 0usize, 0usize);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            area += 1;
            top = top.min(r);
            left = left.min(c);
            bottom = bottom.max(r);
            right = right.max(c);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if opened.data()[j] && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        if best.as_ref().map_or(true, |(a, _)| area > *a) {
            best = Some((area, Rect::new(top, left, bottom - top + 1, right - left + 1)));
        }
    }
    best.map(|(_, r)| r).ok_or(Error::NoDetection)
}

/// Axis-aligned box with real-valued coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

impl From<Rect> for BBox {
    fn from(r: Rect) -> Self {
        Self { top: r.top as f64, left: r.left as f64, height: r.height as f64, width: r.width as f64 }
    }
}

pub fn bbox_iou(a: impl Into<BBox>, b: impl Into<BBox>) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    if !(a.height > 0.0 && a.width > 0.0 && b.height > 0.0 && b.width > 0.0) {
        return Err(Error::Argument("boxes need positive height and width".into()));
    }
    let ih = ((a.top + a.height).min(b.top + b.height) - a.top.max(b.top)).max(0.0);
    let iw = ((a.left + a.width).min(b.left + b.width) - a.left.max(b.left)).max(0.0);
    let inter = ih * iw;
    Ok(inter / (a.height * a.width + b.height * b.width - inter))
}

/// Produces the answer-cell image for an instance under a layout.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, instance: &TaskInstance, layout: &GridLayout) -> Result<Image>;

    /// Canvas and patch size the predictor is bound to, if any.
    fn geometry(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Geometry of the answer cell for `layout` on the evaluation canvas.
pub fn answer_dims(layout: &GridLayout, canvas: usize, patch: usize) -> Result<(usize, usize)> {
    let r = crate::prompt::cell_map(layout, canvas, patch)?.answer_rect();
    Ok((r.height, r.width))
}

/// Returns the first example's output resized to the answer cell.
pub struct CopyBaseline {
    pub canvas: usize,
    pub patch: usize,
}

impl Predictor for CopyBaseline {
    fn name(&self) -> String {
        "copy".into()
    }

    fn predict(&self, instance: &TaskInstance, layout: &GridLayout) -> Result<Image> {
        copy_baseline(instance, answer_dims(layout, self.canvas, self.patch)?)
    }
}

pub fn copy_baseline(instance: &TaskInstance, (height, width): (usize, usize)) -> Result<Image> {
    let first = instance.examples.first().ok_or(Error::EmptyExamples)?;
    first.output.resize_bilinear(height, width)
}

/// Answers with the ground truth; useful as an upper bound.
pub struct OraclePredictor {
    pub canvas: usize,
    pub patch: usize,
}

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, instance: &TaskInstance, layout: &GridLayout) -> Result<Image> {
        let (h, w) = answer_dims(layout, self.canvas, self.patch)?;
        instance.ground_truth_at(h, w)
    }
}

/// Composes the prompt, inpaints the hole and crops the answer cell.
pub struct InpaintPredictor {
    pub id: String,
    pub mae: MaeModel<f32>,
    /// Required for the token head.
    pub vq: Option<VqModel<f32>>,
}

impl InpaintPredictor {
    pub fn new(id: impl Into<String>, mae: MaeModel<f32>, vq: Option<VqModel<f32>>) -> Result<Self> {
        let (h, w) = mae.config.image_dims();
        if h != w {
            return Err(Error::Config(format!("prompt canvas must be square, model input is {h}x{w}")));
        }
        match &vq {
            Some(vq) => crate::mae::check_tokenizer(&mae.config, &vq.config)?,
            None if mae.config.head == HeadKind::TokenLogits => {
                return Err(Error::Config("token-head model needs a tokenizer".into()));
            }
            None => {}
        }
        Ok(Self { id: id.into(), mae, vq })
    }

    pub fn canvas(&self) -> usize {
        self.mae.config.image_dims().0
    }

    pub fn inpaint(&self, canvas: &Image, mask: &crate::mask::PatchMask) -> Result<Image> {
        match &self.vq {
            Some(vq) if self.mae.config.head == HeadKind::TokenLogits => inpaint(&self.mae, vq, canvas, mask),
            _ => inpaint_pixels(&self.mae, canvas, mask),
        }
    }

    /// Completed canvas and the extracted answer.
    pub fn complete(&self, examples: &[crate::prompt::TaskExample], query: &Image, layout: &GridLayout) -> Result<(Image, Image)> {
        let prompt = compose_prompt(examples, query, layout, self.canvas(), self.mae.config.patch_size)?;
        let done = self.inpaint(&prompt.canvas, &prompt.mask)?;
        let answer = extract_answer(&done, &prompt.cell_map)?;
        Ok((done, answer))
    }
}

impl Predictor for InpaintPredictor {
    fn name(&self) -> String {
        self.id.clone()
    }

    fn predict(&self, instance: &TaskInstance, layout: &GridLayout) -> Result<Image> {
        Ok(self.complete(&instance.examples, &instance.query, layout)?.1)
    }

    fn geometry(&self) -> Option<(usize, usize)> {
        Some((self.canvas(), self.mae.config.patch_size))
    }
}

/// Averages the answers obtained under several layouts. With more than one
/// member every answer is resized to the horizontal layout's cell first.
pub fn ensemble_predict(
    predictor: &dyn Predictor,
    instance: &TaskInstance,
    layouts: &[GridLayout],
    canonical: (usize, usize),
) -> Result<Image> {
    let answers = layouts.iter().map(|l| predictor.predict(instance, l)).collect::<Result<Vec<_>>>()?;
    combine_answers(answers, canonical)
}

/// A single answer is returned untouched; several are resized to
/// `canonical` and averaged pixel-wise.
pub fn combine_answers(mut answers: Vec<Image>, canonical: (usize, usize)) -> Result<Image> {
    match answers.len() {
        0 => Err(Error::Argument("ensemble needs at least one layout".into())),
        1 => Ok(answers.pop().expect("one answer")),
        _ => {
            let resized = answers.iter().map(|a| a.resize_bilinear(canonical.0, canonical.1)).collect::<Result<Vec<_>>>()?;
            Image::mean_of(&resized)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ColorAwareMiou,
    Miou,
    BoxIou,
    Mse,
}

impl Metric {
    pub fn for_task(kind: TaskKind) -> Metric {
        match kind {
            k if k.is_change_task() => Metric::ColorAwareMiou,
            TaskKind::SingleObjectDetection => Metric::BoxIou,
            TaskKind::Colorization => Metric::Mse,
            _ => Metric::Miou,
        }
    }

    pub fn higher_is_better(&self) -> bool {
        *self != Metric::Mse
    }
}

/// Scores an answer-cell prediction against the instance ground truth
/// rendered at the prediction's size.
pub fn score_prediction(instance: &TaskInstance, prediction: &Image) -> Result<f64> {
    let (h, w) = prediction.dims();
    let style = instance.meta.style;
    let (fg, bg) = style.palette.colors();
    let label_mask = || -> Result<BinaryMask> {
        let rounded = round_to_palette(prediction, &[bg, fg])?;
        Ok(BinaryMask::from_fn(h, w, |r, c| rounded.get(r, c) == fg && fg != bg))
    };
    match Metric::for_task(instance.kind) {
        Metric::ColorAwareMiou => {
            let color = instance.target_color().ok_or_else(|| Error::Config("task has no target colour".into()))?;
            color_aware_miou(prediction, &instance.target_region(h, w)?, color)
        }
        Metric::Miou => miou_binary(&label_mask()?, &instance.target_region(h, w)?),
        Metric::BoxIou => {
            let gt = crate::forge::mask_bbox(&instance.target_region(h, w)?).ok_or(Error::NoDetection)?;
            match largest_component_bbox(&label_mask()?) {
                Ok(b) => bbox_iou(b, gt),
                Err(Error::NoDetection) => Ok(0.0),
                Err(e) => Err(e),
            }
        }
        Metric::Mse => prediction.mse(&instance.ground_truth_at(h, w)?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: TaskKind,
    pub n_examples: usize,
    pub layout: LayoutPreset,
    pub palette: Palette,
    /// Ensemble members; empty means the single `layout`.
    pub ensemble: Vec<LayoutPreset>,
    pub instances: usize,
    pub seed: u64,
    pub canvas: usize,
    pub patch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::ColorChange,
            n_examples: 2,
            layout: LayoutPreset::Horizontal,
            palette: Palette::BlackWhite,
            ensemble: Vec::new(),
            instances: 100,
            seed: 0,
            canvas: 128,
            patch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub model: String,
    pub metric: Metric,
    /// Foreground-class IoU only; background IoU is not averaged in.
    pub miou_convention: String,
    pub config: EvalConfig,
    pub scores: Vec<f64>,
    pub errors: Vec<InstanceError>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Sampled evaluation instances of a config.
pub fn eval_instances(config: &EvalConfig) -> Result<Vec<TaskInstance>> {
    let style = LabelStyle::new(config.palette, Rendering::Filled)?;
    (0..config.instances).map(|i| sample_task_styled(config.task, config.n_examples, eval_seed(config.seed, i), style)).collect()
}

/// Runs compose, inpaint, extract, round and score for every instance.
/// A failing instance scores 0 and is noted; the sweep continues.
pub fn evaluate(predictor: &dyn Predictor, config: &EvalConfig, jobs: usize) -> Result<EvalReport> {
    if config.instances == 0 {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    if let Some((canvas, patch)) = predictor.geometry() {
        if (canvas, patch) != (config.canvas, config.patch) {
            return Err(Error::Geometry(format!(
                "evaluation canvas {}/{} does not match the model's {canvas}/{patch}",
                config.canvas, config.patch
            )));
        }
    }
    let instances = eval_instances(config)?;
    let members: Vec<GridLayout> = if config.ensemble.is_empty() {
        vec![config.layout.layout(config.n_examples)]
    } else {
        config.ensemble.iter().map(|p| p.layout(config.n_examples)).collect()
    };
    let canonical = answer_dims(&GridLayout::horizontal(config.n_examples), config.canvas, config.patch)?;
    let run = |inst: &TaskInstance| -> Result<f64> {
        let pred = ensemble_predict(predictor, inst, &members, canonical)?;
        score_prediction(inst, &pred)
    };
    let results: Vec<Result<f64>> = if jobs <= 1 {
        instances.iter().map(run).collect()
    } else {
        let chunk = instances.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = instances.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut scores = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => {
                scores.push(0.0);
                errors.push(InstanceError { index, message: format!("{}: {e}", e.code()) });
            }
        }
    }
    let (mean, std) = mean_std(&scores);
    Ok(EvalReport {
        task: config.task,
        model: predictor.name(),
        metric: Metric::for_task(config.task),
        miou_convention: "foreground".into(),
        config: config.clone(),
        scores,
        errors,
        mean,
        std,
    })
}

/// Table with one row per model and one column per task; IoU-family
/// scores are shown x100.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut tasks: Vec<TaskKind> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
    }
    let width = models.iter().map(|m| m.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", "model");
    for t in &tasks {
        out.push_str(&format!(" {:>12}", t.name()));
    }
    out.push('\n');
    for m in &models {
        out.push_str(&format!("{m:<width$}"));
        for t in &tasks {
            let cell = reports.iter().find(|r| r.model == *m && r.task == *t).map_or("-".to_string(), |r| {
                if r.metric.higher_is_better() {
                    format!("{:.2}", r.mean * 100.0)
                } else {
                    format!("{:.4}", r.mean)
                }
            });
            out.push_str(&format!(" {cell:>12}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::sample_task;

    #[test]
    fn palette_rounding_examples() {
        let img = Image::from_fn(1, 2, |_, c| if c == 0 { Rgb::WHITE } else { Rgb([0.4, 0.4, 0.4]) }).unwrap();
        let out = round_to_palette(&img, &[Rgb::BLACK, Rgb::WHITE]).unwrap();
        assert_eq!(out.get(0, 0), Rgb::WHITE);
        assert_eq!(out.get(0, 1), Rgb::BLACK);
        assert!(round_to_palette(&img, &[]).is_err());
        // Exactly halfway goes to the earlier entry.
        let mid = Image::filled(1, 1, Rgb::GRAY).unwrap();
        assert_eq!(round_to_palette(&mid, &[Rgb::WHITE, Rgb::BLACK]).unwrap().get(0, 0), Rgb::WHITE);
    }

    #[test]
    fn miou_examples() {
        let a = BinaryMask::from_rect(4, 4, Rect::new(0, 0, 4, 2));
        let b = BinaryMask::from_rect(4, 4, Rect::new(0, 0, 4, 4));
        assert_eq!(miou_binary(&a, &b).unwrap(), 0.5);
        assert_eq!(miou_binary(&b, &b).unwrap(), 1.0);
        let c = BinaryMask::from_rect(4, 4, Rect::new(0, 2, 4, 2));
        assert_eq!(miou_binary(&a, &c).unwrap(), 0.0);
        assert_eq!(miou_binary(&BinaryMask::new(3, 3), &BinaryMask::new(3, 3)).unwrap(), 1.0);
        assert!(miou_binary(&a, &BinaryMask::new(3, 3)).is_err());
    }

    #[test]
    fn color_aware_examples() {
        let t = sample_task(TaskKind::ColorChange, 1, 2).unwrap();
        let region = t.target_region(64, 64).unwrap();
        assert_eq!(color_aware_miou(&t.ground_truth, &region, Rgb::BLUE).unwrap(), 1.0);
        assert_eq!(color_aware_miou(&t.query, &region, Rgb::BLUE).unwrap(), 0.0);
        assert!(color_aware_miou(&t.query, &region, Rgb::RED).is_err());
        // Black out a quarter of the disc pixels.
        let mut pred = t.ground_truth.clone();
        let total = region.count();
        let mut removed = 0;
        for r in 0..64 {
            for c in 0..64 {
                if region.get(r, c) && removed * 4 < total {
                    pred.set(r, c, Rgb::BLACK);
                    removed += 1;
                }
            }
        }
        let want = (total - removed) as f64 / total as f64;
        assert!((color_aware_miou(&pred, &region, Rgb::BLUE).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn component_box_examples() {
        let mut m = BinaryMask::from_rect(32, 32, Rect::new(3, 4, 10, 10));
        assert_eq!(largest_component_bbox(&m).unwrap(), Rect::new(3, 4, 10, 10));
        for (r, c) in [(20, 20), (20, 21), (21, 20), (21, 21)] {
            m.set(r, c, true);
        }
        assert_eq!(largest_component_bbox(&m).unwrap(), Rect::new(3, 4, 10, 10));
        assert!(matches!(largest_component_bbox(&BinaryMask::new(8, 8)), Err(Error::NoDetection)));
    }

    #[test]
    fn box_iou_examples() {
        let a = BBox { top: 0.0, left: 0.0, height: 1.0, width: 1.0 };
        let b = BBox { top: 0.0, left: 0.5, height: 1.0, width: 1.0 };
        assert!((bbox_iou(a, b).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(bbox_iou(a, a).unwrap(), 1.0);
        assert_eq!(bbox_iou(a, BBox { left: 3.0, ..a }).unwrap(), 0.0);
        assert!(bbox_iou(a, BBox { height: 0.0, ..a }).is_err());
    }

    struct Const(Rgb);

    impl Predictor for Const {
        fn name(&self) -> String {
            "const".into()
        }

        fn predict(&self, _: &TaskInstance, layout: &GridLayout) -> Result<Image> {
            let (h, w) = answer_dims(layout, 128, 8)?;
            let color = if layout.orientation == crate::prompt::Orientation::Vertical { Rgb::WHITE } else { self.0 };
            Image::filled(h, w, color)
        }
    }

    #[test]
    fn ensemble_means() {
        let t = sample_task(TaskKind::ColorChange, 2, 1).unwrap();
        let h = GridLayout::horizontal(2);
        let v = GridLayout::vertical(2);
        let canon = answer_dims(&h, 128, 8).unwrap();
        let p = Const(Rgb::BLACK);
        assert_eq!(ensemble_predict(&p, &t, &[h.clone()], canon).unwrap(), p.predict(&t, &h).unwrap());
        assert_eq!(ensemble_predict(&p, &t, &[h.clone(), h.clone(), h.clone()], canon).unwrap(), p.predict(&t, &h).unwrap());
        let mixed = ensemble_predict(&p, &t, &[h, v], canon).unwrap();
        assert_eq!(mixed.dims(), canon);
        assert!(mixed.pixels().all(|c| c == Rgb::GRAY));
    }

    #[test]
    fn oracle_and_copy_reports() {
        let cfg = EvalConfig { instances: 20, ..EvalConfig::default() };
        for task in [TaskKind::ColorChange, TaskKind::ShapeChange, TaskKind::ForegroundSeg, TaskKind::SingleObjectDetection] {
            let r = evaluate(&OraclePredictor { canvas: 128, patch: 8 }, &EvalConfig { task, ..cfg.clone() }, 1).unwrap();
            assert_eq!(r.mean, 1.0, "{task}");
        }
        let copy = CopyBaseline { canvas: 128, patch: 8 };
        let a = evaluate(&copy, &cfg, 1).unwrap();
        let b = evaluate(&copy, &cfg, 3).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!((a.mean - a.scores.iter().sum::<f64>() / 20.0).abs() < 1e-9);
        assert!(a.mean < 0.5);
        assert!(render_table(&[a]).contains("copy"));
    }
}
