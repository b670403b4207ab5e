//! Procedural figures: labelled task instances for evaluation and
//! grid-structured training figures in the style of paper figures.
//!
//! Scenes are described in normalised cell coordinates, so any image of an
//! instance can be re-rendered crisply at any cell size.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{BinaryMask, Rect};
use crate::prompt::{
    compose_filled, render_label, CellMap, GridLayout, LabelStyle, Orientation, Palette, RawLabel, Rendering,
    TaskExample,
};

/// Side of the square images inside a task instance.
pub const BASE_SIZE: usize = 64;
/// Instance seeds at or above this value are reserved for evaluation.
pub const EVAL_SEED_BASE: u64 = 1 << 40;
/// Default share of non-grid figures.
pub const DEFAULT_DISTRACTOR_FRACTION: f64 = 0.16;

const MARGIN_PX: f64 = 2.0;
const RADIUS_RANGE: (f64, f64) = (0.12, 0.30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ColorChange,
    ShapeChange,
    SizeChange,
    ColorAndShape,
    ColorAndSize,
    ShapeAndSize,
    ForegroundSeg,
    SingleObjectDetection,
    Colorization,
    EdgeMap,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::ColorChange,
        TaskKind::ShapeChange,
        TaskKind::SizeChange,
        TaskKind::ColorAndShape,
        TaskKind::ColorAndSize,
        TaskKind::ShapeAndSize,
        TaskKind::ForegroundSeg,
        TaskKind::SingleObjectDetection,
        TaskKind::Colorization,
        TaskKind::EdgeMap,
    ];

    /// Kinds that appear in training figures; combinations are held out.
    pub const TRAINING: [TaskKind; 7] = [
        TaskKind::ColorChange,
        TaskKind::ShapeChange,
        TaskKind::SizeChange,
        TaskKind::ForegroundSeg,
        TaskKind::SingleObjectDetection,
        TaskKind::Colorization,
        TaskKind::EdgeMap,
    ];

    pub const SYNTHETIC: [TaskKind; 3] = [TaskKind::ColorChange, TaskKind::ShapeChange, TaskKind::SizeChange];
    pub const COMBINATIONS: [TaskKind; 3] = [TaskKind::ColorAndShape, TaskKind::ColorAndSize, TaskKind::ShapeAndSize];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ColorChange => "color",
            TaskKind::ShapeChange => "shape",
            TaskKind::SizeChange => "size",
            TaskKind::ColorAndShape => "color_shape",
            TaskKind::ColorAndSize => "color_size",
            TaskKind::ShapeAndSize => "shape_size",
            TaskKind::ForegroundSeg => "seg",
            TaskKind::SingleObjectDetection => "det",
            TaskKind::Colorization => "colorization",
            TaskKind::EdgeMap => "edges",
        }
    }

    /// `(recolour, reshape, shrink)` for change tasks.
    fn changes(&self) -> Option<(bool, bool, bool)> {
        Some(match self {
            TaskKind::ColorChange => (true, false, false),
            TaskKind::ShapeChange => (false, true, false),
            TaskKind::SizeChange => (false, false, true),
            TaskKind::ColorAndShape => (true, true, false),
            TaskKind::ColorAndSize => (true, false, true),
            TaskKind::ShapeAndSize => (false, true, true),
            _ => return None,
        })
    }

    pub fn is_change_task(&self) -> bool {
        self.changes().is_some()
    }

    /// Constituent single-change tasks of a combination.
    pub fn constituents(&self) -> Vec<TaskKind> {
        match self.changes() {
            Some((c, s, z)) if [c, s, z].iter().filter(|b| **b).count() == 2 => {
                let mut out = Vec::new();
                if c {
                    out.push(TaskKind::ColorChange);
                }
                if s {
                    out.push(TaskKind::ShapeChange);
                }
                if z {
                    out.push(TaskKind::SizeChange);
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match k.as_str() {
            "color" | "color_change" => TaskKind::ColorChange,
            "shape" | "shape_change" => TaskKind::ShapeChange,
            "size" | "size_change" | "resize" => TaskKind::SizeChange,
            "color_shape" | "color_and_shape" => TaskKind::ColorAndShape,
            "color_size" | "color_and_size" => TaskKind::ColorAndSize,
            "shape_size" | "shape_and_size" => TaskKind::ShapeAndSize,
            "seg" | "foreground_seg" | "segmentation" => TaskKind::ForegroundSeg,
            "det" | "detection" | "single_object_detection" => TaskKind::SingleObjectDetection,
            "colorization" | "color_izing" => TaskKind::Colorization,
            "edges" | "edge_map" => TaskKind::EdgeMap,
            _ => return Err(Error::Config(format!("unknown task kind '{s}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rect,
}

/// A shape in normalised coordinates: centre and half-extents are fractions
/// of the image height (`cy`, `ry`) and width (`cx`, `rx`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub color: Rgb,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        match self.kind {
            ShapeKind::Disc => dy * dy + dx * dx <= 1.0,
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: Rgb,
    /// Painted in order, later shapes on top.
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn render(&self, height: usize, width: usize) -> Result<Image> {
        Image::from_fn(height, width, |r, c| {
            let (y, x) = ((r as f64 + 0.5) / height as f64, (c as f64 + 0.5) / width as f64);
            self.shapes.iter().rev().find(|s| s.contains(y, x)).map_or(self.background, |s| s.color)
        })
    }

    /// Union of all shapes.
    pub fn mask(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| {
            let (y, x) = ((r as f64 + 0.5) / height as f64, (c as f64 + 0.5) / width as f64);
            self.shapes.iter().any(|s| s.contains(y, x))
        })
    }
}

/// Tight bounding box of a mask, if any pixel is set.
pub fn mask_bbox(mask: &BinaryMask) -> Option<Rect> {
    let (h, w) = mask.dims();
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                top = top.min(r);
                left = left.min(c);
                bottom = bottom.max(r);
                right = right.max(c);
            }
        }
    }
    (top != usize::MAX).then(|| Rect::new(top, left, bottom - top + 1, right - left + 1))
}

/// Everything needed to re-render an instance at any resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub seed: u64,
    pub style: LabelStyle,
    /// `(input, output)` scenes of each example, then the query's.
    pub example_scenes: Vec<(Scene, Scene)>,
    pub query_scene: Scene,
    pub target_scene: Scene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub examples: Vec<TaskExample>,
    pub query: Image,
    pub ground_truth: Image,
    pub meta: TaskMeta,
}

impl TaskInstance {
    /// Ground truth rendered at `height x width`.
    pub fn ground_truth_at(&self, height: usize, width: usize) -> Result<Image> {
        render_pair(self.kind, &self.meta.query_scene, &self.meta.target_scene, &self.meta.style, height, width)
            .map(|(_, y)| y)
    }

    /// Foreground region of the ground truth at `height x width`: the target
    /// shape for change tasks, the object mask for segmentation, the filled
    /// box for detection.
    pub fn target_region(&self, height: usize, width: usize) -> Result<BinaryMask> {
        let m = self.meta.target_scene.mask(height, width);
        Ok(match self.kind {
            TaskKind::SingleObjectDetection => match mask_bbox(&m) {
                Some(b) => BinaryMask::from_rect(height, width, b),
                None => m,
            },
            TaskKind::EdgeMap => m.boundary(),
            _ => m,
        })
    }

    /// Colour of the target shape for change tasks.
    pub fn target_color(&self) -> Option<Rgb> {
        if self.kind.is_change_task() {
            self.meta.target_scene.shapes.first().map(|s| s.color)
        } else {
            None
        }
    }
}

fn render_pair(kind: TaskKind, src: &Scene, dst: &Scene, style: &LabelStyle, h: usize, w: usize) -> Result<(Image, Image)> {
    let input = src.render(h, w)?;
    let output = match kind {
        k if k.is_change_task() => dst.render(h, w)?,
        TaskKind::ForegroundSeg => render_label(&RawLabel::Mask(src.mask(h, w)), style)?,
        TaskKind::EdgeMap => {
            let edges = LabelStyle { rendering: Rendering::EdgesOnly, ..*style };
            render_label(&RawLabel::Mask(src.mask(h, w)), &edges)?
        }
        TaskKind::SingleObjectDetection => {
            let rect = mask_bbox(&src.mask(h, w)).ok_or_else(|| Error::Config("object vanished at this size".into()))?;
            render_label(&RawLabel::Box { height: h, width: w, rect }, style)?
        }
        _ => input.clone(),
    };
    Ok(match kind {
        TaskKind::Colorization => (input.to_grayscale(), input),
        _ => (input, output),
    })
}

const OBJECT_COLORS: [Rgb; 8] = [
    Rgb::RED,
    Rgb::GREEN,
    Rgb::BLUE,
    Rgb::YELLOW,
    Rgb::PURPLE,
    Rgb::WHITE,
    Rgb([1.0, 0.5, 0.0]),
    Rgb([0.0, 1.0, 1.0]),
];
const BACKGROUNDS: [Rgb; 4] = [Rgb::BLACK, Rgb([0.2, 0.2, 0.2]), Rgb([0.15, 0.1, 0.3]), Rgb([0.3, 0.2, 0.1])];
const SHAPE_TASK_COLORS: [Rgb; 3] = [Rgb::WHITE, Rgb::GREEN, Rgb::BLUE];

/// A disc or rectangle fully inside the image with a 2-pixel margin at the
/// base resolution.
fn sample_shape(kind: ShapeKind, color: Rgb, rng: &mut impl Rng) -> Shape {
    let r = rng.gen_range(RADIUS_RANGE.0..=RADIUS_RANGE.1);
    let m = r + MARGIN_PX / BASE_SIZE as f64;
    let cy = rng.gen_range(m..=1.0 - m);
    let cx = rng.gen_range(m..=1.0 - m);
    Shape { kind, cy, cx, ry: r, rx: r, color }
}

fn single(background: Rgb, shape: Shape) -> Scene {
    Scene { background, shapes: vec![shape] }
}

/// `(input scene, output scene)` for one pair of a task.
fn sample_scene_pair(kind: TaskKind, base_color: Rgb, rng: &mut impl Rng) -> (Scene, Scene) {
    if let Some((recolor, reshape, shrink)) = kind.changes() {
        let start = if recolor { Rgb::GREEN } else { base_color };
        let src = sample_shape(ShapeKind::Disc, start, rng);
        let mut dst = src;
        if recolor {
            dst.color = Rgb::BLUE;
        }
        if reshape {
            dst.kind = ShapeKind::Rect;
        }
        if shrink {
            dst.ry /= 2.0;
            dst.rx /= 2.0;
        }
        return (single(Rgb::BLACK, src), single(Rgb::BLACK, dst));
    }
    let background = *BACKGROUNDS.choose(rng).expect("non-empty");
    let kinds = [ShapeKind::Disc, ShapeKind::Rect];
    match kind {
        TaskKind::Colorization => {
            let n = rng.gen_range(1..=3);
            let shapes = (0..n)
                .map(|_| sample_shape(*kinds.choose(rng).expect("non-empty"), *OBJECT_COLORS.choose(rng).expect("non-empty"), rng))
                .collect();
            let scene = Scene { background, shapes };
            (scene.clone(), scene)
        }
        _ => {
            let color = loop {
                let c = *OBJECT_COLORS.choose(rng).expect("non-empty");
                if c != background {
                    break c;
                }
            };
            let scene = single(background, sample_shape(*kinds.choose(rng).expect("non-empty"), color, rng));
            (scene.clone(), scene)
        }
    }
}

fn instance_from_scenes(kind: TaskKind, seed: u64, style: LabelStyle, scenes: Vec<(Scene, Scene)>) -> Result<TaskInstance> {
    let mut scenes = scenes;
    let (query_scene, target_scene) = scenes.pop().expect("query scene");
    let mut examples = Vec::with_capacity(scenes.len());
    for (a, b) in &scenes {
        let (x, y) = render_pair(kind, a, b, &style, BASE_SIZE, BASE_SIZE)?;
        examples.push(TaskExample::new(x, y));
    }
    let (query, ground_truth) = render_pair(kind, &query_scene, &target_scene, &style, BASE_SIZE, BASE_SIZE)?;
    Ok(TaskInstance {
        kind,
        examples,
        query,
        ground_truth,
        meta: TaskMeta { seed, style, example_scenes: scenes, query_scene, target_scene },
    })
}

/// Samples a labelled instance with `n_examples` example pairs, rendering
/// labels with the default black/white filled style.
pub fn sample_task(kind: TaskKind, n_examples: usize, seed: u64) -> Result<TaskInstance> {
    sample_task_styled(kind, n_examples, seed, LabelStyle::default())
}

pub fn sample_task_styled(kind: TaskKind, n_examples: usize, seed: u64, style: LabelStyle) -> Result<TaskInstance> {
    if n_examples == 0 {
        return Err(Error::Config("a task needs at least one example".into()));
    }
    style.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_color = *SHAPE_TASK_COLORS.choose(&mut rng).expect("non-empty");
    let scenes = (0..=n_examples).map(|_| sample_scene_pair(kind, base_color, &mut rng)).collect();
    instance_from_scenes(kind, seed, style, scenes)
}

/// Seed of the `index`-th evaluation instance of a sweep.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    EVAL_SEED_BASE | (splitmix(seed ^ splitmix(index as u64)) >> 24)
}

/// Seed of the `index`-th training figure; always below [`EVAL_SEED_BASE`].
pub fn figure_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64)) % EVAL_SEED_BASE
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureConfig {
    pub canvas_size: usize,
    pub patch_size: usize,
    pub distractor_fraction: f64,
    pub kinds: Vec<TaskKind>,
    pub max_examples: usize,
}

impl Default for FigureConfig {
    fn default() -> Self {
        Self {
            canvas_size: 128,
            patch_size: 8,
            distractor_fraction: DEFAULT_DISTRACTOR_FRACTION,
            kinds: TaskKind::TRAINING.to_vec(),
            max_examples: 3,
        }
    }
}

impl FigureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return Err(Error::Config(format!("distractor fraction {} outside [0, 1]", self.distractor_fraction)));
        }
        if self.distractor_fraction < 1.0 && (self.kinds.is_empty() || self.max_examples == 0) {
            return Err(Error::Config("grid figures need at least one task kind and example".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FigureContent {
    Grid { kind: TaskKind, layout: GridLayout, cell_map: CellMap },
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    pub image: Image,
    pub content: FigureContent,
}

impl Figure {
    pub fn kind_name(&self) -> &'static str {
        match &self.content {
            FigureContent::Grid { kind, .. } => kind.name(),
            FigureContent::Single => "single",
        }
    }
}

fn sample_style(kind: TaskKind, rng: &mut impl Rng) -> LabelStyle {
    let palette = *Palette::NAMED.choose(rng).expect("non-empty");
    let rendering = match kind {
        TaskKind::ForegroundSeg => *[Rendering::Filled, Rendering::Filled, Rendering::EdgesOnly, Rendering::Textured]
            .choose(rng)
            .expect("non-empty"),
        TaskKind::SingleObjectDetection => *[Rendering::Filled, Rendering::Filled, Rendering::Textured].choose(rng).expect("non-empty"),
        _ => Rendering::Filled,
    };
    LabelStyle { palette, rendering }
}

/// One training figure: with probability `distractor_fraction` a single
/// full-canvas scene, otherwise a fully filled prompt grid of a random task.
pub fn render_training_figure(seed: u64, config: &FigureConfig) -> Result<Figure> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.canvas_size;
    if rng.gen_bool(config.distractor_fraction) {
        let background = *BACKGROUNDS.choose(&mut rng).expect("non-empty");
        let n = rng.gen_range(1..=4);
        let shapes = (0..n)
            .map(|_| {
                let kind = if rng.gen_bool(0.5) { ShapeKind::Disc } else { ShapeKind::Rect };
                let color = *OBJECT_COLORS.choose(&mut rng).expect("non-empty");
                let r = rng.gen_range(0.06..=0.25);
                Shape { kind, cy: rng.gen_range(0.0..1.0), cx: rng.gen_range(0.0..1.0), ry: r, rx: r * rng.gen_range(0.7..1.4), color }
            })
            .collect();
        let image = Scene { background, shapes }.render(s, s)?;
        return Ok(Figure { image, content: FigureContent::Single });
    }
    let kind = *config.kinds.choose(&mut rng).expect("validated");
    let n = rng.gen_range(1..=config.max_examples);
    let style = sample_style(kind, &mut rng);
    let inst = sample_task_styled(kind, n, rng.gen(), style)?;
    let orientation = if rng.gen_bool(0.5) { Orientation::Horizontal } else { Orientation::Vertical };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let layout = GridLayout::with_order(orientation, order);
    let prompt = compose_filled(&inst.examples, &inst.query, &inst.ground_truth, &layout, s, config.patch_size)?;
    Ok(Figure { image: prompt.canvas, content: FigureContent::Grid { kind, layout, cell_map: prompt.cell_map } })
}

/// Structural grid check: every cell of `cell_map` is bordered by a ring of
/// one uniform colour, so no content crosses a cell boundary.
pub fn is_tiled_grid(image: &Image, cell_map: &CellMap) -> bool {
    if image.dims() != (cell_map.canvas_height, cell_map.canvas_width) || cell_map.cells.len() < 4 {
        return false;
    }
    cell_map.cells.iter().all(|cell| {
        let corner = image.get(cell.top, cell.left);
        let same = |r: usize, c: usize| image.get(r, c).dist2(&corner) < 1e-9;
        (cell.left..cell.right()).all(|c| same(cell.top, c) && same(cell.bottom() - 1, c))
            && (cell.top..cell.bottom()).all(|r| same(r, cell.left) && same(r, cell.right() - 1))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub path: String,
    pub kind: String,
    pub seed: u64,
    /// Pixel rect of the answer cell, for grid figures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_cell: Option<Rect>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Renders `count` figures into `out_dir/figures/` and writes the manifest
/// next to them. A seeded shuffle assigns `floor(count / 10)` figures to
/// validation.
pub fn build_dataset(count: usize, out_dir: impl AsRef<Path>, seed: u64, config: &FigureConfig) -> Result<DatasetManifest> {
    if count < 10 {
        return Err(Error::Config(format!("dataset needs at least 10 figures, got {count}")));
    }
    config.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out.join("figures"))?;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; count];
    for &i in &order[..count / 10] {
        is_val[i] = true;
    }
    let mut records = Vec::with_capacity(count);
    for (i, val) in is_val.into_iter().enumerate() {
        let fseed = figure_seed(seed, i);
        let fig = render_training_figure(fseed, config)?;
        let rel: PathBuf = ["figures", &format!("{i:06}.png")].iter().collect();
        fig.image.save_png(out.join(&rel))?;
        records.push(ManifestRecord {
            id: format!("fig-{i:06}"),
            split: if val { Split::Val } else { Split::Train },
            path: rel.to_string_lossy().replace('\\', "/"),
            kind: fig.kind_name().to_string(),
            seed: fseed,
            answer_cell: match &fig.content {
                FigureContent::Grid { cell_map, .. } => Some(cell_map.answer_rect()),
                FigureContent::Single => None,
            },
        });
    }
    let manifest = DatasetManifest { records };
    let mut f = fs::File::create(out.join(MANIFEST_FILE))?;
    f.write_all(manifest.to_jsonl().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_task_green_to_blue() {
        let t = sample_task(TaskKind::ColorChange, 2, 11).unwrap();
        assert_eq!(t.examples.len(), 2);
        let src = &t.meta.query_scene.shapes[0];
        let dst = &t.meta.target_scene.shapes[0];
        assert_eq!((src.color, dst.color), (Rgb::GREEN, Rgb::BLUE));
        assert_eq!((src.cy, src.cx, src.ry, src.kind), (dst.cy, dst.cx, dst.ry, dst.kind));
        let colors: Vec<Rgb> = t.query.pixels().collect();
        assert!(colors.iter().all(|c| *c == Rgb::BLACK || *c == Rgb::GREEN));
        assert!(t.ground_truth.pixels().any(|c| c == Rgb::BLUE));
        assert_eq!(t.target_color(), Some(Rgb::BLUE));
    }

    #[test]
    fn size_task_halves_radius() {
        for seed in 0..20 {
            let t = sample_task(TaskKind::SizeChange, 1, seed).unwrap();
            for (a, b) in t.meta.example_scenes.iter().chain([(t.meta.query_scene.clone(), t.meta.target_scene.clone())].iter()) {
                let (s, d) = (a.shapes[0], b.shapes[0]);
                assert_eq!(d.ry, s.ry / 2.0);
                assert_eq!((d.cy, d.cx), (s.cy, s.cx));
            }
        }
    }

    #[test]
    fn shape_task_keeps_bounding_box() {
        let t = sample_task(TaskKind::ShapeChange, 1, 5).unwrap();
        let q = t.meta.query_scene.mask(64, 64);
        let g = t.meta.target_scene.mask(64, 64);
        let (bq, bg) = (mask_bbox(&q).unwrap(), mask_bbox(&g).unwrap());
        assert!(bq.top.abs_diff(bg.top) <= 1 && bq.height.abs_diff(bg.height) <= 2);
        assert!(g.count() > q.count());
    }

    #[test]
    fn combinations_compose_two_changes() {
        for k in TaskKind::COMBINATIONS {
            assert_eq!(k.constituents().len(), 2);
        }
        let t = sample_task(TaskKind::ColorAndShape, 1, 3).unwrap();
        let d = t.meta.target_scene.shapes[0];
        assert_eq!((d.kind, d.color), (ShapeKind::Rect, Rgb::BLUE));
        assert!(TaskKind::ColorChange.constituents().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        for k in TaskKind::ALL {
            assert_eq!(sample_task(k, 2, 77).unwrap(), sample_task(k, 2, 77).unwrap());
        }
        assert!(sample_task(TaskKind::ColorChange, 0, 1).is_err());
    }

    #[test]
    fn segmentation_meta_reproduces_ground_truth() {
        for seed in 0..30 {
            let t = sample_task(TaskKind::ForegroundSeg, 1, seed).unwrap();
            let m = t.target_region(64, 64);
            assert_eq!(m.unwrap().to_image(Rgb::WHITE, Rgb::BLACK), t.ground_truth);
            assert_eq!(t.ground_truth_at(64, 64).unwrap(), t.ground_truth);
        }
    }

    #[test]
    fn detection_objects_are_small() {
        for seed in 0..200 {
            let t = sample_task(TaskKind::SingleObjectDetection, 1, seed).unwrap();
            let area = t.meta.query_scene.mask(64, 64).count() as f64 / 4096.0;
            assert!(area <= 0.5, "{area}");
        }
    }

    #[test]
    fn grid_figures_pass_structure_check() {
        let cfg = FigureConfig { distractor_fraction: 0.0, ..FigureConfig::default() };
        for seed in 0..40 {
            let f = render_training_figure(seed, &cfg).unwrap();
            match &f.content {
                FigureContent::Grid { cell_map, .. } => assert!(is_tiled_grid(&f.image, cell_map), "seed {seed}"),
                FigureContent::Single => panic!("distractor at fraction 0"),
            }
            assert_eq!(f, render_training_figure(seed, &cfg).unwrap());
        }
    }

    #[test]
    fn seeds_are_disjoint() {
        for i in 0..1000 {
            assert!(figure_seed(3, i) < EVAL_SEED_BASE);
            assert!(eval_seed(3, i) >= EVAL_SEED_BASE);
        }
    }

    #[test]
    fn dataset_split_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FigureConfig::default();
        let m = build_dataset(25, dir.path().join("a"), 4, &cfg).unwrap();
        assert_eq!(m.split(Split::Val).count(), 2);
        assert_eq!(m.split(Split::Train).count(), 23);
        let again = build_dataset(25, dir.path().join("b"), 4, &cfg).unwrap();
        assert_eq!(m, again);
        let a = fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        let b = fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
        assert_eq!(DatasetManifest::from_jsonl(std::str::from_utf8(&a).unwrap()).unwrap(), m);
        let img = Image::load_png(dir.path().join("a").join(&m.records[0].path)).unwrap();
        assert_eq!(img.dims(), (128, 128));
        assert!(build_dataset(9, dir.path().join("c"), 4, &cfg).is_err());
    }
}
