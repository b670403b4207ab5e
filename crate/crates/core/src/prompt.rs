//! Visual prompt composition: example pairs and a query are tiled into a
//! single grid canvas whose answer cell is a patch-aligned hole.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{geometry, Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{BinaryMask, PatchMask, Rect};

/// Largest supported example count: a grid of at most nine rows.
pub const MAX_EXAMPLES: usize = 8;

/// Value written into the answer cell before inpainting.
pub const HOLE_FILL: Rgb = Rgb::GRAY;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub input: Image,
    pub output: Image,
}

impl TaskExample {
    pub fn new(input: Image, output: Image) -> Self {
        Self { input, output }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One example pair per row, query row last.
    Horizontal,
    /// One example pair per column, query column last.
    Vertical,
}

/// Placement of `n` example pairs plus the query in an `(n+1) x 2` grid
/// (or its transpose).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridLayout {
    pub orientation: Orientation,
    /// `row_order[slot]` is the example placed in grid slot `slot`.
    pub row_order: Vec<usize>,
}

impl GridLayout {
    pub fn horizontal(n: usize) -> Self {
        Self { orientation: Orientation::Horizontal, row_order: (0..n).collect() }
    }

    pub fn vertical(n: usize) -> Self {
        Self { orientation: Orientation::Vertical, row_order: (0..n).collect() }
    }

    pub fn with_order(orientation: Orientation, row_order: Vec<usize>) -> Self {
        Self { orientation, row_order }
    }

    pub fn n_examples(&self) -> usize {
        self.row_order.len()
    }

    /// `(rows, cols)` of the cell grid.
    pub fn grid_dims(&self) -> (usize, usize) {
        let n = self.row_order.len() + 1;
        match self.orientation {
            Orientation::Horizontal => (n, 2),
            Orientation::Vertical => (2, n),
        }
    }

    pub fn answer_cell(&self) -> (usize, usize) {
        let (rows, cols) = self.grid_dims();
        (rows - 1, cols - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.row_order.len();
        if n == 0 {
            return Err(Error::EmptyExamples);
        }
        if n > MAX_EXAMPLES {
            return Err(Error::Argument(format!("{n} examples exceed the {MAX_EXAMPLES}-example grid")));
        }
        let mut seen = vec![false; n];
        for &i in &self.row_order {
            if i >= n || seen[i] {
                return Err(Error::Argument(format!("row order {:?} is not a permutation", self.row_order)));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Named layout presets used by ensembling and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutPreset {
    Horizontal,
    Vertical,
    /// Vertical layout with the example order reversed.
    VerticalRowswap,
}

impl LayoutPreset {
    pub const ALL: [LayoutPreset; 3] =
        [LayoutPreset::Horizontal, LayoutPreset::Vertical, LayoutPreset::VerticalRowswap];

    pub fn layout(&self, n: usize) -> GridLayout {
        match self {
            LayoutPreset::Horizontal => GridLayout::horizontal(n),
            LayoutPreset::Vertical => GridLayout::vertical(n),
            LayoutPreset::VerticalRowswap => {
                GridLayout::with_order(Orientation::Vertical, (0..n).rev().collect())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayoutPreset::Horizontal => "horizontal",
            LayoutPreset::Vertical => "vertical",
            LayoutPreset::VerticalRowswap => "vertical-rowswap",
        }
    }
}

impl fmt::Display for LayoutPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayoutPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "horizontal" => Ok(LayoutPreset::Horizontal),
            "vertical" => Ok(LayoutPreset::Vertical),
            "vertical-rowswap" | "vertical_rowswap" => Ok(LayoutPreset::VerticalRowswap),
            other => Err(Error::Config(format!("unknown layout '{other}'"))),
        }
    }
}

/// Pixel rectangles of every grid cell plus the answer cell position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellMap {
    pub canvas_height: usize,
    pub canvas_width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Row-major over `(grid_rows, grid_cols)`.
    pub cells: Vec<Rect>,
    pub answer_cell: (usize, usize),
}

impl CellMap {
    pub fn cell(&self, row: usize, col: usize) -> Rect {
        self.cells[row * self.grid_cols + col]
    }

    pub fn answer_rect(&self) -> Rect {
        self.cell(self.answer_cell.0, self.answer_cell.1)
    }

    /// Checks that the cells tile the canvas without overlap and that every
    /// edge is a multiple of `patch`.
    pub fn check_tiling(&self, patch: usize) -> Result<()> {
        let mut cover = vec![0u8; self.canvas_height * self.canvas_width];
        for rect in &self.cells {
            for v in [rect.top, rect.left, rect.bottom(), rect.right()] {
                if v % patch != 0 {
                    return Err(geometry!("cell {rect:?} not aligned to patch {patch}"));
                }
            }
            if rect.bottom() > self.canvas_height || rect.right() > self.canvas_width {
                return Err(geometry!("cell {rect:?} leaves the canvas"));
            }
            for r in rect.top..rect.bottom() {
                for c in rect.left..rect.right() {
                    cover[r * self.canvas_width + c] += 1;
                }
            }
        }
        if cover.iter().any(|v| *v != 1) {
            return Err(geometry!("cells do not tile the canvas exactly"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualPrompt {
    pub canvas: Image,
    pub mask: PatchMask,
    pub cell_map: CellMap,
    pub patch_size: usize,
}

/// Splits `total` units into `parts` contiguous runs whose sizes differ by
/// at most one; the trailing runs take the remainder.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + usize::from(i >= parts - rem)).collect()
}

/// Computes the cell geometry for a layout on a square canvas.
pub fn cell_map(layout: &GridLayout, canvas_size: usize, patch_size: usize) -> Result<CellMap> {
    layout.validate()?;
    if patch_size == 0 || canvas_size == 0 || canvas_size % patch_size != 0 {
        return Err(geometry!("canvas {canvas_size} is not a multiple of patch {patch_size}"));
    }
    let (rows, cols) = layout.grid_dims();
    let patches = canvas_size / patch_size;
    if rows > patches || cols > patches {
        return Err(geometry!(
            "{rows}x{cols} grid does not fit {patches} patches per side (canvas {canvas_size}, patch {patch_size})"
        ));
    }
    let heights = split_even(patches, rows);
    let widths = split_even(patches, cols);
    let mut cells = Vec::with_capacity(rows * cols);
    let mut top = 0;
    for h in &heights {
        let mut left = 0;
        for w in &widths {
            cells.push(Rect::new(top * patch_size, left * patch_size, h * patch_size, w * patch_size));
            left += w;
        }
        top += h;
    }
    Ok(CellMap {
        canvas_height: canvas_size,
        canvas_width: canvas_size,
        grid_rows: rows,
        grid_cols: cols,
        cells,
        answer_cell: layout.answer_cell(),
    })
}

/// Grid positions of (input, output) for slot `slot`.
fn slot_cells(layout: &GridLayout, slot: usize) -> ((usize, usize), (usize, usize)) {
    match layout.orientation {
        Orientation::Horizontal => ((slot, 0), (slot, 1)),
        Orientation::Vertical => ((0, slot), (1, slot)),
    }
}

fn place(canvas: &mut Image, rect: Rect, img: &Image) -> Result<()> {
    let resized = img.resize_bilinear(rect.height, rect.width)?;
    canvas.paste(rect.top, rect.left, &resized)
}

fn compose_grid(
    examples: &[TaskExample],
    query: &Image,
    answer: Option<&Image>,
    layout: &GridLayout,
    canvas_size: usize,
    patch_size: usize,
) -> Result<VisualPrompt> {
    if examples.is_empty() {
        return Err(Error::EmptyExamples);
    }
    if layout.n_examples() != examples.len() {
        return Err(Error::Argument(format!(
            "layout orders {} examples but {} were given",
            layout.n_examples(),
            examples.len()
        )));
    }
    let map = cell_map(layout, canvas_size, patch_size)?;
    let mut canvas = Image::filled(canvas_size, canvas_size, HOLE_FILL)?;
    for (slot, &ex) in layout.row_order.iter().enumerate() {
        let ((ir, ic), (or, oc)) = slot_cells(layout, slot);
        place(&mut canvas, map.cell(ir, ic), &examples[ex].input)?;
        place(&mut canvas, map.cell(or, oc), &examples[ex].output)?;
    }
    let n = examples.len();
    let ((qr, qc), _) = slot_cells(layout, n);
    place(&mut canvas, map.cell(qr, qc), query)?;
    let hole = map.answer_rect();
    if let Some(ans) = answer {
        place(&mut canvas, hole, ans)?;
    }
    let p = canvas_size / patch_size;
    let mask = PatchMask::rect(
        p,
        p,
        hole.top / patch_size,
        hole.left / patch_size,
        hole.height / patch_size,
        hole.width / patch_size,
    );
    Ok(VisualPrompt { canvas, mask, cell_map: map, patch_size })
}

/// Builds the visual prompt for `examples` and `query`. Every image is
/// bilinearly resized to its cell; the answer cell is filled with mid-gray
/// and is exactly the masked region.
pub fn compose_prompt(
    examples: &[TaskExample],
    query: &Image,
    layout: &GridLayout,
    canvas_size: usize,
    patch_size: usize,
) -> Result<VisualPrompt> {
    compose_grid(examples, query, None, layout, canvas_size, patch_size)
}

/// Like [`compose_prompt`] but with the answer cell populated, as in a
/// complete figure.
pub fn compose_filled(
    examples: &[TaskExample],
    query: &Image,
    answer: &Image,
    layout: &GridLayout,
    canvas_size: usize,
    patch_size: usize,
) -> Result<VisualPrompt> {
    compose_grid(examples, query, Some(answer), layout, canvas_size, patch_size)
}

/// Crops the answer cell out of a completed canvas. No resizing.
pub fn extract_answer(completed: &Image, cell_map: &CellMap) -> Result<Image> {
    if completed.dims() != (cell_map.canvas_height, cell_map.canvas_width) {
        return Err(geometry!(
            "completed image {:?} does not match canvas {}x{}",
            completed.dims(),
            cell_map.canvas_height,
            cell_map.canvas_width
        ));
    }
    let r = cell_map.answer_rect();
    completed.crop(r.top, r.left, r.height, r.width)
}

/// Resizes `answer` to the answer cell and pastes it into a copy of `canvas`.
pub fn paste_answer(canvas: &Image, cell_map: &CellMap, answer: &Image) -> Result<Image> {
    if canvas.dims() != (cell_map.canvas_height, cell_map.canvas_width) {
        return Err(geometry!("canvas {:?} does not match cell map", canvas.dims()));
    }
    let mut out = canvas.clone();
    place(&mut out, cell_map.answer_rect(), answer)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    BlackWhite,
    PurpleYellow,
    GreenRed,
    Custom { fg: Rgb, bg: Rgb },
}

impl Palette {
    pub const NAMED: [Palette; 3] = [Palette::BlackWhite, Palette::PurpleYellow, Palette::GreenRed];

    /// `(foreground, background)`.
    pub fn colors(&self) -> (Rgb, Rgb) {
        match *self {
            Palette::BlackWhite => (Rgb::WHITE, Rgb::BLACK),
            Palette::PurpleYellow => (Rgb::PURPLE, Rgb::YELLOW),
            Palette::GreenRed => (Rgb::GREEN, Rgb::RED),
            Palette::Custom { fg, bg } => (fg, bg),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Palette::BlackWhite => "black-white".into(),
            Palette::PurpleYellow => "purple-yellow".into(),
            Palette::GreenRed => "green-red".into(),
            Palette::Custom { fg, bg } => format!("custom({:?},{:?})", fg.0, bg.0),
        }
    }
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "black-white" | "black_white" => Ok(Palette::BlackWhite),
            "purple-yellow" | "purple_yellow" => Ok(Palette::PurpleYellow),
            "green-red" | "green_red" => Ok(Palette::GreenRed),
            other => Err(Error::Config(format!("unknown palette '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rendering {
    Filled,
    EdgesOnly,
    Textured,
}

impl FromStr for Rendering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "filled" => Ok(Rendering::Filled),
            "edges" | "edges-only" | "edges_only" => Ok(Rendering::EdgesOnly),
            "textured" => Ok(Rendering::Textured),
            other => Err(Error::Config(format!("unknown rendering '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStyle {
    pub palette: Palette,
    pub rendering: Rendering,
}

impl Default for LabelStyle {
    fn default() -> Self {
        Self { palette: Palette::BlackWhite, rendering: Rendering::Filled }
    }
}

impl LabelStyle {
    pub fn new(palette: Palette, rendering: Rendering) -> Result<Self> {
        let style = Self { palette, rendering };
        style.validate()?;
        Ok(style)
    }

    pub fn validate(&self) -> Result<()> {
        let (fg, bg) = self.palette.colors();
        if fg == bg {
            return Err(Error::Config("label foreground and background colors coincide".into()));
        }
        if !fg.is_valid() || !bg.is_valid() {
            return Err(Error::Config("label colors outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Side of one checker square in textured label rendering.
pub const CHECKER_SIZE: usize = 4;

/// Task label before styling.
#[derive(Clone, Debug, PartialEq)]
pub enum RawLabel {
    Mask(BinaryMask),
    Box { height: usize, width: usize, rect: Rect },
    Color(Image),
}

/// Draws a raw label with a palette and rendering style.
pub fn render_label(raw: &RawLabel, style: &LabelStyle) -> Result<Image> {
    style.validate()?;
    let (fg, bg) = style.palette.colors();
    let mask = match (raw, style.rendering) {
        (RawLabel::Color(img), Rendering::Filled) => return Ok(img.clone()),
        (RawLabel::Color(_), r) => {
            return Err(Error::Config(format!("{r:?} rendering needs a mask label, got a color image")))
        }
        (RawLabel::Box { .. }, Rendering::EdgesOnly) => {
            return Err(Error::Config("edges-only rendering needs a binary mask label".into()))
        }
        (RawLabel::Box { height, width, rect }, _) => BinaryMask::from_rect(*height, *width, *rect),
        (RawLabel::Mask(m), _) => m.clone(),
    };
    if mask.height() == 0 || mask.width() == 0 {
        return Err(geometry!("empty label"));
    }
    Ok(match style.rendering {
        Rendering::Filled => mask.to_image(fg, bg),
        Rendering::EdgesOnly => mask.boundary().to_image(fg, bg),
        Rendering::Textured => Image::from_fn(mask.height(), mask.width(), |r, c| {
            let on = (r / CHECKER_SIZE + c / CHECKER_SIZE) % 2 == 0;
            if mask.get(r, c) && on {
                fg
            } else {
                bg
            }
        })?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, c: Rgb) -> Image {
        Image::filled(h, w, c).unwrap()
    }

    fn pair(c_in: Rgb, c_out: Rgb) -> TaskExample {
        TaskExample::new(solid(64, 64, c_in), solid(64, 64, c_out))
    }

    #[test]
    fn one_example_two_by_two() {
        let p = compose_prompt(&[pair(Rgb::RED, Rgb::BLUE)], &solid(50, 70, Rgb::GREEN), &GridLayout::horizontal(1), 128, 8)
            .unwrap();
        assert_eq!(p.cell_map.grid_rows, 2);
        assert_eq!(p.cell_map.grid_cols, 2);
        assert!(p.cell_map.cells.iter().all(|r| r.height == 64 && r.width == 64));
        assert_eq!(p.cell_map.answer_cell, (1, 1));
        assert_eq!(p.mask.masked_count(), 64);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(p.mask.is_masked(r, c), r >= 8 && c >= 8);
            }
        }
        assert_eq!(p.canvas.get(10, 10), Rgb::RED);
        assert_eq!(p.canvas.get(10, 100), Rgb::BLUE);
        assert_eq!(p.canvas.get(100, 10), Rgb::GREEN);
        assert_eq!(p.canvas.get(100, 100), HOLE_FILL);
        p.cell_map.check_tiling(8).unwrap();
    }

    #[test]
    fn empty_examples_rejected() {
        let err = compose_prompt(&[], &solid(8, 8, Rgb::RED), &GridLayout::horizontal(0), 128, 8).unwrap_err();
        assert!(matches!(err, Error::EmptyExamples));
    }

    #[test]
    fn divisibility_is_checked() {
        let err = compose_prompt(&[pair(Rgb::RED, Rgb::BLUE)], &solid(8, 8, Rgb::RED), &GridLayout::horizontal(1), 100, 8)
            .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn vertical_two_examples_roundtrip() {
        let exs = [pair(Rgb::RED, Rgb::BLUE), pair(Rgb::GREEN, Rgb::WHITE)];
        let p = compose_prompt(&exs, &solid(30, 30, Rgb::YELLOW), &GridLayout::vertical(2), 192, 8).unwrap();
        assert_eq!((p.cell_map.grid_rows, p.cell_map.grid_cols), (2, 3));
        assert!(p.cell_map.cells.iter().all(|r| r.height == 96 && r.width == 64));
        assert_eq!(p.cell_map.answer_cell, (1, 2));
        let fill = Image::from_fn(17, 23, |r, c| Rgb([r as f32 / 17.0, c as f32 / 23.0, 0.5])).unwrap();
        let done = paste_answer(&p.canvas, &p.cell_map, &fill).unwrap();
        assert_eq!(extract_answer(&done, &p.cell_map).unwrap(), fill.resize_bilinear(96, 64).unwrap());
    }

    #[test]
    fn three_rows_split_patch_aligned() {
        let exs = [pair(Rgb::RED, Rgb::BLUE), pair(Rgb::GREEN, Rgb::WHITE)];
        let p = compose_prompt(&exs, &solid(30, 30, Rgb::YELLOW), &GridLayout::horizontal(2), 128, 8).unwrap();
        let heights: Vec<usize> = (0..3).map(|r| p.cell_map.cell(r, 0).height).collect();
        assert_eq!(heights, vec![40, 40, 48]);
        p.cell_map.check_tiling(8).unwrap();
        assert_eq!(p.mask.masked_count(), 6 * 8);
    }

    #[test]
    fn hole_is_mid_gray() {
        let p = compose_prompt(&[pair(Rgb::RED, Rgb::BLUE)], &solid(8, 8, Rgb::RED), &GridLayout::horizontal(1), 64, 8).unwrap();
        let hole = extract_answer(&p.canvas, &p.cell_map).unwrap();
        assert!(hole.pixels().all(|px| px == HOLE_FILL));
    }

    #[test]
    fn row_order_permutes_slots() {
        let exs = [pair(Rgb::RED, Rgb::BLUE), pair(Rgb::GREEN, Rgb::WHITE)];
        let q = solid(8, 8, Rgb::YELLOW);
        let p = compose_prompt(&exs, &q, &GridLayout::with_order(Orientation::Horizontal, vec![1, 0]), 128, 8).unwrap();
        assert_eq!(p.canvas.get(0, 0), Rgb::GREEN);
        assert!(compose_prompt(&exs, &q, &GridLayout::with_order(Orientation::Horizontal, vec![1, 1]), 128, 8).is_err());
        assert!(compose_prompt(&exs, &q, &GridLayout::horizontal(3), 128, 8).is_err());
    }

    #[test]
    fn too_many_examples_rejected() {
        let exs: Vec<_> = (0..9).map(|_| pair(Rgb::RED, Rgb::BLUE)).collect();
        assert!(compose_prompt(&exs, &solid(8, 8, Rgb::RED), &GridLayout::horizontal(9), 160, 8).is_err());
    }

    #[test]
    fn extract_rejects_wrong_dims() {
        let p = compose_prompt(&[pair(Rgb::RED, Rgb::BLUE)], &solid(8, 8, Rgb::RED), &GridLayout::horizontal(1), 64, 8).unwrap();
        assert!(extract_answer(&solid(32, 64, Rgb::RED), &p.cell_map).is_err());
    }

    #[test]
    fn answer_painted_blue_extracts_blue() {
        let p = compose_prompt(&[pair(Rgb::RED, Rgb::GREEN)], &solid(8, 8, Rgb::RED), &GridLayout::horizontal(1), 128, 8).unwrap();
        let mut canvas = p.canvas.clone();
        let r = p.cell_map.answer_rect();
        canvas.paste(r.top, r.left, &solid(r.height, r.width, Rgb::BLUE)).unwrap();
        assert_eq!(extract_answer(&canvas, &p.cell_map).unwrap(), solid(64, 64, Rgb::BLUE));
    }

    fn disc(n: usize) -> BinaryMask {
        let c = (n as f64 - 1.0) / 2.0;
        BinaryMask::from_fn(n, n, |r, col| {
            let (dy, dx) = (r as f64 - c, col as f64 - c);
            dy * dy + dx * dx <= (n as f64 / 3.0).powi(2)
        })
    }

    #[test]
    fn filled_full_mask_is_white() {
        let m = BinaryMask::from_fn(5, 5, |_, _| true);
        let img = render_label(&RawLabel::Mask(m), &LabelStyle::default()).unwrap();
        assert!(img.pixels().all(|p| p == Rgb::WHITE));
    }

    #[test]
    fn edges_only_matches_erosion_oracle() {
        let m = disc(21);
        let style = LabelStyle::new(Palette::BlackWhite, Rendering::EdgesOnly).unwrap();
        let img = render_label(&RawLabel::Mask(m.clone()), &style).unwrap();
        // Oracle: a pixel is on the ring iff it is set and not all four
        // neighbours are set.
        for r in 0..21 {
            for c in 0..21 {
                let interior = r > 0
                    && c > 0
                    && r < 20
                    && c < 20
                    && m.get(r - 1, c)
                    && m.get(r + 1, c)
                    && m.get(r, c - 1)
                    && m.get(r, c + 1);
                let expect = if m.get(r, c) && !interior { Rgb::WHITE } else { Rgb::BLACK };
                assert_eq!(img.get(r, c), expect, "pixel {r},{c}");
            }
        }
        assert_eq!(img.get(10, 10), Rgb::BLACK);
    }

    #[test]
    fn purple_yellow_disc() {
        let m = disc(15);
        let style = LabelStyle::new(Palette::PurpleYellow, Rendering::Filled).unwrap();
        let img = render_label(&RawLabel::Mask(m), &style).unwrap();
        assert_eq!(img.get(7, 7), Rgb([0.5, 0.0, 0.5]));
        assert_eq!(img.get(0, 0), Rgb([1.0, 1.0, 0.0]));
    }

    #[test]
    fn style_errors() {
        assert!(LabelStyle::new(Palette::Custom { fg: Rgb::RED, bg: Rgb::RED }, Rendering::Filled).is_err());
        assert!("sepia".parse::<Palette>().is_err());
        assert!("dotted".parse::<Rendering>().is_err());
        let boxed = RawLabel::Box { height: 8, width: 8, rect: Rect::new(1, 1, 3, 3) };
        assert!(render_label(&boxed, &LabelStyle::new(Palette::BlackWhite, Rendering::EdgesOnly).unwrap()).is_err());
        let img = render_label(&boxed, &LabelStyle::default()).unwrap();
        assert_eq!(img.get(2, 2), Rgb::WHITE);
        assert_eq!(img.get(5, 5), Rgb::BLACK);
    }

    #[test]
    fn textured_stays_inside_mask() {
        let m = disc(16);
        let style = LabelStyle::new(Palette::BlackWhite, Rendering::Textured).unwrap();
        let img = render_label(&RawLabel::Mask(m.clone()), &style).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                if !m.get(r, c) {
                    assert_eq!(img.get(r, c), Rgb::BLACK);
                }
            }
        }
        assert!(img.pixels().any(|p| p == Rgb::WHITE));
    }
}
