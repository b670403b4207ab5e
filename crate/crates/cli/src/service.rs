//! Local HTTP API over loaded models.
//!
//! Images travel as base64 PNG (8-bit RGB). Every response body carries
//! `api_version`; failures are `{code, message}` with a 4xx status for
//! client faults and 5xx for model faults.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{FromRequest, Json, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use gridprompt::eval::{answer_dims, bbox_iou, color_aware_miou, combine_answers, largest_component_bbox, miou_binary, round_to_palette, InpaintPredictor, Metric, SYNTHETIC_PALETTE};
use gridprompt::forge::mask_bbox;
use gridprompt::mae::attention_maps;
use gridprompt::prompt::{compose_prompt, extract_answer, CellMap, GridLayout, LayoutPreset, Palette, TaskExample};
use gridprompt::{BinaryMask, Error, Image, PatchMask, Rgb};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const API_VERSION: &str = "1";
pub const DEFAULT_CANVAS: usize = 128;
pub const DEFAULT_PATCH: usize = 8;

#[derive(Clone, Copy, Debug)]
pub struct ServiceConfig {
    /// Inference jobs allowed to run at once.
    pub parallelism: usize,
    /// Inference requests allowed to wait or run; more are refused with 503.
    pub queue_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { parallelism: 1, queue_capacity: 64 }
    }
}

pub struct AppState {
    models: BTreeMap<String, Arc<InpaintPredictor>>,
    workers: Arc<Semaphore>,
    admission: Arc<Semaphore>,
    requests: AtomicU64,
}

impl AppState {
    pub fn new(models: Vec<InpaintPredictor>, config: ServiceConfig) -> Self {
        Self {
            models: models.into_iter().map(|m| (m.id.clone(), Arc::new(m))).collect(),
            workers: Arc::new(Semaphore::new(config.parallelism.max(1))),
            admission: Arc::new(Semaphore::new(config.queue_capacity.max(1))),
            requests: AtomicU64::new(0),
        }
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn model(&self, id: &str) -> Result<Arc<InpaintPredictor>, ApiError> {
        self.models.get(id).cloned().ok_or_else(|| ApiError {
            status: StatusCode::NOT_FOUND,
            code: "unknown_model".into(),
            message: format!("no model with id {id:?}"),
        })
    }

    /// Runs `job` on the blocking pool behind the bounded queue.
    async fn infer<T: Send + 'static>(&self, job: impl FnOnce() -> gridprompt::Result<T> + Send + 'static) -> Result<T, ApiError> {
        let _slot = self.admission.clone().try_acquire_owned().map_err(|_| ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "busy".into(),
            message: "inference queue is full".into(),
        })?;
        let _permit = self.workers.clone().acquire_owned().await.map_err(|_| ApiError::internal("worker pool closed"))?;
        match tokio::task::spawn_blocking(job).await {
            Ok(r) => r.map_err(ApiError::from),
            Err(_) => Err(ApiError::internal("inference task panicked")),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn internal(message: &str) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal".into(), message: message.into() }
    }

    fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: code.into(), message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Divergence(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Error::NoDetection => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_REQUEST,
        };
        Self { status, code: e.code().into(), message: e.to_string() }
    }
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub api_version: String,
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { api_version: API_VERSION.into(), code: self.code, message: self.message };
        (self.status, Json(body)).into_response()
    }
}

/// `Json` whose rejections use the `{code, message}` error body.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(rej) => Err(ApiError { status: rej.status(), code: "bad_request".into(), message: rej.body_text() }),
        }
    }
}

pub fn encode_image(img: &Image) -> gridprompt::Result<String> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

pub fn decode_image(text: &str) -> gridprompt::Result<Image> {
    let bytes = STANDARD.decode(text.trim()).map_err(|e| Error::Format(format!("image is not base64: {e}")))?;
    Image::from_png_bytes(&bytes)
}

/// Patch mask on the wire: row-major, `true` means masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl MaskJson {
    pub fn from_mask(m: &PatchMask) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.data().to_vec() }
    }

    pub fn to_mask(&self) -> gridprompt::Result<PatchMask> {
        PatchMask::from_vec(self.rows, self.cols, self.data.clone())
    }
}

/// A preset name or an explicit `{orientation, row_order}` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutSpec {
    Preset(String),
    Explicit(GridLayout),
}

impl LayoutSpec {
    pub fn resolve(&self, n: usize) -> gridprompt::Result<GridLayout> {
        let layout = match self {
            LayoutSpec::Preset(name) => name.parse::<LayoutPreset>()?.layout(n),
            LayoutSpec::Explicit(l) => l.clone(),
        };
        if layout.n_examples() != n {
            return Err(Error::Geometry(format!("layout orders {} examples but {n} were given", layout.n_examples())));
        }
        layout.validate()?;
        Ok(layout)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub input: String,
    pub output: String,
}

/// The prompt half of a request: examples, query, layout and palette.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptFields {
    #[serde(default)]
    pub examples: Option<Vec<ExamplePair>>,
    #[serde(default)]
    pub query: Option<String>,
    /// Defaults to horizontal.
    #[serde(default)]
    pub layout: Option<LayoutSpec>,
    /// Label palette; when given, answers are also snapped to it.
    #[serde(default)]
    pub palette: Option<String>,
}

struct DecodedPrompt {
    examples: Vec<TaskExample>,
    query: Image,
    layout: GridLayout,
    palette: Option<Palette>,
}

impl PromptFields {
    fn has_prompt(&self) -> bool {
        self.examples.is_some() || self.query.is_some()
    }

    fn palette(&self) -> gridprompt::Result<Option<Palette>> {
        self.palette.as_deref().map(str::parse).transpose()
    }

    fn decode(&self) -> gridprompt::Result<DecodedPrompt> {
        let pairs = self.examples.as_ref().ok_or(Error::EmptyExamples)?;
        let examples = pairs
            .iter()
            .map(|p| Ok(TaskExample::new(decode_image(&p.input)?, decode_image(&p.output)?)))
            .collect::<gridprompt::Result<Vec<_>>>()?;
        if examples.is_empty() {
            return Err(Error::EmptyExamples);
        }
        let query = decode_image(self.query.as_deref().ok_or_else(|| Error::Argument("missing query image".into()))?)?;
        let layout = self.layout.clone().unwrap_or(LayoutSpec::Preset("horizontal".into())).resolve(examples.len())?;
        Ok(DecodedPrompt { examples, query, layout, palette: self.palette()? })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ComposeRequest {
    #[serde(flatten)]
    pub prompt: PromptFields,
    /// Take canvas and patch size from this model.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub canvas_size: Option<usize>,
    #[serde(default)]
    pub patch_size: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComposeResponse {
    pub api_version: String,
    /// 8-bit canvas, hole filled with gray.
    pub canvas: String,
    pub mask: MaskJson,
    pub cell_map: CellMap,
    pub layout: GridLayout,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub model_id: String,
    /// Canvas mode: a composed canvas plus its mask (and optionally the cell
    /// map, to extract the answer).
    #[serde(default)]
    pub canvas: Option<String>,
    #[serde(default)]
    pub mask: Option<MaskJson>,
    #[serde(default)]
    pub cell_map: Option<CellMap>,
    #[serde(flatten)]
    pub prompt: PromptFields,
    /// Layouts whose answers are averaged; the completed canvas is the one
    /// from the first member.
    #[serde(default)]
    pub ensemble: Vec<LayoutSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub api_version: String,
    pub model_id: String,
    pub completed: String,
    pub answer: Option<String>,
    pub answer_rounded: Option<String>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prediction: String,
    pub ground_truth: String,
    pub metric: Metric,
    /// Label palette for `miou` and `box_iou`; defaults to black-white.
    #[serde(default)]
    pub palette: Option<String>,
    /// Needed for `color_aware_miou`.
    #[serde(default)]
    pub target_color: Option<[f32; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub api_version: String,
    pub metric: Metric,
    pub score: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionRequest {
    pub model_id: String,
    pub patch_row: usize,
    pub patch_col: usize,
    #[serde(default)]
    pub canvas: Option<String>,
    #[serde(default)]
    pub mask: Option<MaskJson>,
    #[serde(flatten)]
    pub prompt: PromptFields,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionResponse {
    pub api_version: String,
    pub rows: usize,
    pub cols: usize,
    pub patch_row: usize,
    pub patch_col: usize,
    /// Row-major over the patch grid; sums to 1.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub vocab: usize,
    pub head: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub api_version: String,
    pub models: Vec<ModelInfo>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/compose", post(compose))
        .route("/inpaint", post(inpaint))
        .route("/score", post(score))
        .route("/attention", get(attention).post(attention))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found".into(), message: "no such endpoint".into() }
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<ModelsResponse> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let models = state
        .models
        .values()
        .map(|m| {
            let c = &m.mae.config;
            let (h, w) = c.image_dims();
            ModelInfo {
                id: m.id.clone(),
                image_height: h,
                image_width: w,
                patch_size: c.patch_size,
                vocab: c.vocab,
                head: match c.head {
                    gridprompt::mae::HeadKind::TokenLogits => "token".into(),
                    gridprompt::mae::HeadKind::PixelRegression => "pixel".into(),
                },
            }
        })
        .collect();
    Json(ModelsResponse { api_version: API_VERSION.into(), models })
}

async fn compose(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<ComposeRequest>) -> Result<Json<ComposeResponse>, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let (canvas_size, patch) = match &req.model_id {
        Some(id) => {
            let m = state.model(id)?;
            (m.canvas(), m.mae.config.patch_size)
        }
        None => (req.canvas_size.unwrap_or(DEFAULT_CANVAS), req.patch_size.unwrap_or(DEFAULT_PATCH)),
    };
    let p = req.prompt.decode()?;
    let prompt = compose_prompt(&p.examples, &p.query, &p.layout, canvas_size, patch)?;
    Ok(Json(ComposeResponse {
        api_version: API_VERSION.into(),
        canvas: encode_image(&prompt.canvas)?,
        mask: MaskJson::from_mask(&prompt.mask),
        cell_map: prompt.cell_map,
        layout: p.layout,
    }))
}

struct InpaintResult {
    completed: Image,
    answer: Option<Image>,
    palette: Option<Palette>,
}

fn run_inpaint(model: &InpaintPredictor, req: InpaintRequest) -> gridprompt::Result<InpaintResult> {
    if let Some(canvas) = &req.canvas {
        if req.prompt.has_prompt() {
            return Err(Error::Argument("send either a canvas or examples and a query, not both".into()));
        }
        let canvas = decode_image(canvas)?;
        let mask = req.mask.as_ref().ok_or_else(|| Error::Argument("canvas mode needs a mask".into()))?.to_mask()?;
        let completed = model.inpaint(&canvas, &mask)?;
        let answer = req.cell_map.as_ref().map(|cm| extract_answer(&completed, cm)).transpose()?;
        return Ok(InpaintResult { completed, answer, palette: req.prompt.palette()? });
    }
    let p = req.prompt.decode()?;
    let n = p.examples.len();
    let layouts = if req.ensemble.is_empty() {
        vec![p.layout.clone()]
    } else {
        req.ensemble.iter().map(|l| l.resolve(n)).collect::<gridprompt::Result<Vec<_>>>()?
    };
    let mut completed = None;
    let mut answers = Vec::with_capacity(layouts.len());
    for layout in &layouts {
        let (done, answer) = model.complete(&p.examples, &p.query, layout)?;
        completed.get_or_insert(done);
        answers.push(answer);
    }
    let canonical = answer_dims(&GridLayout::horizontal(n), model.canvas(), model.mae.config.patch_size)?;
    let answer = combine_answers(answers, canonical)?;
    Ok(InpaintResult { completed: completed.expect("at least one layout"), answer: Some(answer), palette: p.palette })
}

async fn inpaint(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<InpaintRequest>) -> Result<Json<InpaintResponse>, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let model = state.model(&req.model_id)?;
    let model_id = req.model_id.clone();
    let start = Instant::now();
    let result = state.infer(move || run_inpaint(&model, req)).await?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let rounded = match (&result.answer, result.palette) {
        (Some(a), Some(p)) => {
            let (fg, bg) = p.colors();
            Some(encode_image(&round_to_palette(a, &[bg, fg])?)?)
        }
        _ => None,
    };
    Ok(Json(InpaintResponse {
        api_version: API_VERSION.into(),
        model_id,
        completed: encode_image(&result.completed)?,
        answer: result.answer.as_ref().map(encode_image).transpose()?,
        answer_rounded: rounded,
        latency_ms,
    }))
}

fn label_mask(img: &Image, fg: Rgb, bg: Rgb) -> gridprompt::Result<BinaryMask> {
    let rounded = round_to_palette(img, &[bg, fg])?;
    let (h, w) = img.dims();
    Ok(BinaryMask::from_fn(h, w, |r, c| rounded.get(r, c) == fg))
}

pub fn score_images(req: &ScoreRequest) -> gridprompt::Result<f64> {
    let pred = decode_image(&req.prediction)?;
    let gt = decode_image(&req.ground_truth)?;
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
    }
    let palette: Palette = req.palette.as_deref().unwrap_or("black-white").parse()?;
    let (fg, bg) = palette.colors();
    match req.metric {
        Metric::Miou => miou_binary(&label_mask(&pred, fg, bg)?, &label_mask(&gt, fg, bg)?),
        Metric::ColorAwareMiou => {
            let target = Rgb(req.target_color.ok_or_else(|| Error::Argument("color_aware_miou needs target_color".into()))?);
            let rounded = round_to_palette(&gt, &SYNTHETIC_PALETTE)?;
            let (h, w) = gt.dims();
            let region = BinaryMask::from_fn(h, w, |r, c| rounded.get(r, c) == target);
            color_aware_miou(&pred, &region, target)
        }
        Metric::BoxIou => {
            let gt_box = mask_bbox(&label_mask(&gt, fg, bg)?).ok_or_else(|| Error::Argument("ground truth has no foreground".into()))?;
            match largest_component_bbox(&label_mask(&pred, fg, bg)?) {
                Ok(b) => bbox_iou(b, gt_box),
                Err(Error::NoDetection) => Ok(0.0),
                Err(e) => Err(e),
            }
        }
        Metric::Mse => pred.mse(&gt),
    }
}

async fn score(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<ScoreRequest>) -> Result<Json<ScoreResponse>, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let score = score_images(&req)?;
    Ok(Json(ScoreResponse { api_version: API_VERSION.into(), metric: req.metric, score }))
}

fn run_attention(model: &InpaintPredictor, req: &AttentionRequest) -> gridprompt::Result<Vec<f64>> {
    let (canvas, mask) = match &req.canvas {
        Some(c) => {
            let mask = req.mask.as_ref().ok_or_else(|| Error::Argument("canvas mode needs a mask".into()))?.to_mask()?;
            (decode_image(c)?, mask)
        }
        None => {
            let p = req.prompt.decode()?;
            let prompt = compose_prompt(&p.examples, &p.query, &p.layout, model.canvas(), model.mae.config.patch_size)?;
            (prompt.canvas, prompt.mask)
        }
    };
    attention_maps(&model.mae, &canvas, &mask, (req.patch_row, req.patch_col))
}

async fn attention(State(state): State<Arc<AppState>>, ApiJson(req): ApiJson<AttentionRequest>) -> Result<Json<AttentionResponse>, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let model = state.model(&req.model_id)?;
    let (rows, cols) = (model.mae.config.grid_rows, model.mae.config.grid_cols);
    let (patch_row, patch_col) = (req.patch_row, req.patch_col);
    if patch_row >= rows || patch_col >= cols {
        return Err(ApiError::bad_request("index", format!("patch ({patch_row}, {patch_col}) outside the {rows}x{cols} grid")));
    }
    let weights = state.infer(move || run_attention(&model, &req)).await?;
    Ok(Json(AttentionResponse { api_version: API_VERSION.into(), rows, cols, patch_row, patch_col, weights }))
}
