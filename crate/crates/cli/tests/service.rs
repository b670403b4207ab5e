use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use gridprompt::eval::InpaintPredictor;
use gridprompt::forge::{sample_task, TaskInstance, TaskKind};
use gridprompt::mae::{HeadKind, MaeConfig, MaeModel};
use gridprompt::prompt::{compose_prompt, extract_answer, GridLayout, TaskExample};
use gridprompt::vq::{VqConfig, VqModel};
use gridprompt::Image;
use gridprompt_cli::service::{decode_image, encode_image, router, AppState, ServiceConfig, API_VERSION};
use serde_json::{json, Value};
use tower::ServiceExt;

const PATCH: usize = 8;
const GRID: usize = 4;

fn mae_config(head: HeadKind) -> MaeConfig {
    MaeConfig {
        patch_size: PATCH,
        grid_rows: GRID,
        grid_cols: GRID,
        enc_dim: 16,
        enc_depth: 1,
        enc_heads: 2,
        dec_dim: 16,
        dec_depth: 1,
        dec_heads: 2,
        head,
        vocab: 16,
        ..MaeConfig::default()
    }
}

fn token_model(id: &str, seed: u64) -> InpaintPredictor {
    let vq = VqModel::new(VqConfig { patch_size: PATCH, codebook_size: 16, dim: 8, widths: vec![8, 8], beta: 0.25 }, seed).unwrap();
    let mae = MaeModel::new(mae_config(HeadKind::TokenLogits), seed + 1).unwrap();
    InpaintPredictor::new(id, mae, Some(vq)).unwrap()
}

fn pixel_model(id: &str, seed: u64) -> InpaintPredictor {
    InpaintPredictor::new(id, MaeModel::new(mae_config(HeadKind::PixelRegression), seed).unwrap(), None).unwrap()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(vec![token_model("tok", 3), pixel_model("pix", 5)], ServiceConfig::default()))
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {}", String::from_utf8_lossy(&bytes)));
    assert_eq!(value["api_version"], API_VERSION, "{value}");
    (status, value)
}

/// Round-trips through the wire encoding, as a client would see it.
fn wire(img: &Image) -> Image {
    decode_image(&encode_image(img).unwrap()).unwrap()
}

fn prompt_json(instance: &TaskInstance) -> Value {
    let examples: Vec<Value> = instance
        .examples
        .iter()
        .map(|e| json!({"input": encode_image(&e.input).unwrap(), "output": encode_image(&e.output).unwrap()}))
        .collect();
    json!({"examples": examples, "query": encode_image(&instance.query).unwrap()})
}

fn wire_examples(instance: &TaskInstance) -> (Vec<TaskExample>, Image) {
    let ex = instance.examples.iter().map(|e| TaskExample::new(wire(&e.input), wire(&e.output))).collect();
    (ex, wire(&instance.query))
}

fn instance(i: usize) -> TaskInstance {
    let kinds = [TaskKind::ColorChange, TaskKind::ShapeChange, TaskKind::SizeChange, TaskKind::ForegroundSeg];
    sample_task(kinds[i % kinds.len()], 1 + i % 3, 100 + i as u64).unwrap()
}

fn image_field(v: &Value, key: &str) -> Image {
    decode_image(v[key].as_str().unwrap_or_else(|| panic!("missing {key} in {v}"))).unwrap()
}

#[tokio::test]
async fn models_lists_loaded_models() {
    let (status, v) = call(&state(), "GET", "/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let models = v["models"].as_array().unwrap();
    let ids: Vec<&str> = models.iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["pix", "tok"]);
    assert_eq!(models[1]["image_height"], 32);
    assert_eq!(models[1]["vocab"], 16);
    assert_eq!(models[1]["head"], "token");
}

#[tokio::test]
async fn compose_then_inpaint_matches_library() {
    let st = state();
    let model = token_model("tok", 3);
    for i in 0..20 {
        let inst = instance(i);
        let mut body = prompt_json(&inst);
        body["model_id"] = json!("tok");
        let (status, composed) = call(&st, "POST", "/compose", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{composed}");

        let (examples, query) = wire_examples(&inst);
        let lib = compose_prompt(&examples, &query, &GridLayout::horizontal(examples.len()), 32, PATCH).unwrap();
        let canvas = image_field(&composed, "canvas");
        assert_eq!(canvas.to_rgb8(), lib.canvas.to_rgb8());

        let req = json!({
            "model_id": "tok",
            "canvas": composed["canvas"],
            "mask": composed["mask"],
            "cell_map": composed["cell_map"],
        });
        let (status, done) = call(&st, "POST", "/inpaint", Some(req)).await;
        assert_eq!(status, StatusCode::OK, "{done}");
        let expected = model.inpaint(&lib.canvas.quantized_8bit(), &lib.mask).unwrap();
        let expected_answer = extract_answer(&expected, &lib.cell_map).unwrap();
        assert_eq!(image_field(&done, "completed").to_rgb8(), expected.to_rgb8(), "prompt {i}");
        assert_eq!(image_field(&done, "answer").to_rgb8(), expected_answer.to_rgb8(), "prompt {i}");
    }
}

#[tokio::test]
async fn prompt_mode_inpaint_matches_library() {
    let st = state();
    for (id, model) in [("tok", token_model("tok", 3)), ("pix", pixel_model("pix", 5))] {
        let inst = instance(1);
        let mut body = prompt_json(&inst);
        body["model_id"] = json!(id);
        body["layout"] = json!("vertical");
        let (status, v) = call(&st, "POST", "/inpaint", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let (examples, query) = wire_examples(&inst);
        let (done, answer) = model.complete(&examples, &query, &GridLayout::vertical(examples.len())).unwrap();
        assert_eq!(image_field(&v, "completed").to_rgb8(), done.to_rgb8());
        assert_eq!(image_field(&v, "answer").to_rgb8(), answer.to_rgb8());
        assert!(v["latency_ms"].as_f64().unwrap() >= 0.0);
    }
}

#[tokio::test]
async fn ensemble_of_one_matches_plain_request() {
    let st = state();
    let inst = instance(2);
    let mut plain = prompt_json(&inst);
    plain["model_id"] = json!("tok");
    plain["layout"] = json!("vertical");
    let mut single = plain.clone();
    single["ensemble"] = json!(["vertical"]);
    let (_, a) = call(&st, "POST", "/inpaint", Some(plain)).await;
    let (_, b) = call(&st, "POST", "/inpaint", Some(single)).await;
    assert_eq!(a["completed"], b["completed"]);
    assert_eq!(a["answer"], b["answer"]);
}

#[tokio::test]
async fn three_way_ensemble_uses_horizontal_cell_size() {
    let st = state();
    let inst = instance(4);
    let mut body = prompt_json(&inst);
    body["model_id"] = json!("tok");
    body["ensemble"] = json!(["horizontal", "vertical", {"orientation": "vertical", "row_order": [1, 0]}]);
    body["palette"] = json!("black-white");
    let (status, v) = call(&st, "POST", "/inpaint", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    body["ensemble"] = json!(["horizontal"]);
    let (_, h) = call(&st, "POST", "/inpaint", Some(body)).await;
    assert_eq!(image_field(&v, "answer").dims(), image_field(&h, "answer").dims());
    let rounded = image_field(&v, "answer_rounded");
    assert!(rounded.pixels().all(|p| p.0.iter().all(|c| *c == 0.0 || *c == 1.0)));
}

#[tokio::test]
async fn identical_requests_give_identical_images() {
    let st = state();
    let mut body = prompt_json(&instance(7));
    body["model_id"] = json!("tok");
    let (_, a) = call(&st, "POST", "/inpaint", Some(body.clone())).await;
    let (_, b) = call(&st, "POST", "/inpaint", Some(body)).await;
    assert_eq!(a["completed"], b["completed"]);
    assert_eq!(a["answer"], b["answer"]);
}

#[tokio::test]
async fn score_of_ground_truth_against_itself_is_one() {
    let st = state();
    let seg = sample_task(TaskKind::ForegroundSeg, 1, 4).unwrap();
    let gt = encode_image(&seg.ground_truth).unwrap();
    let (status, v) = call(&st, "POST", "/score", Some(json!({"prediction": gt, "ground_truth": gt, "metric": "miou"}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["score"].as_f64().unwrap(), 1.0);

    let det = sample_task(TaskKind::SingleObjectDetection, 1, 4).unwrap();
    let gt = encode_image(&det.ground_truth).unwrap();
    let (_, v) = call(&st, "POST", "/score", Some(json!({"prediction": gt, "ground_truth": gt, "metric": "box_iou"}))).await;
    assert_eq!(v["score"].as_f64().unwrap(), 1.0);

    let color = sample_task(TaskKind::ColorChange, 1, 4).unwrap();
    let target = color.target_color().unwrap();
    let gt = encode_image(&color.ground_truth).unwrap();
    let req = json!({"prediction": gt, "ground_truth": gt, "metric": "color_aware_miou", "target_color": target.0});
    let (status, v) = call(&st, "POST", "/score", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["score"].as_f64().unwrap(), 1.0);

    let (_, v) = call(&st, "POST", "/score", Some(json!({"prediction": gt, "ground_truth": gt, "metric": "mse"}))).await;
    assert_eq!(v["score"].as_f64().unwrap(), 0.0);
}

#[tokio::test]
async fn attention_is_a_distribution_over_patches() {
    let st = state();
    let mut body = prompt_json(&instance(0));
    body["model_id"] = json!("tok");
    body["patch_row"] = json!(GRID - 1);
    body["patch_col"] = json!(GRID - 1);
    for method in ["GET", "POST"] {
        let (status, v) = call(&st, method, "/attention", Some(body.clone())).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w.len(), GRID * GRID);
        assert!(w.iter().all(|x| *x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    body["patch_row"] = json!(GRID);
    let (status, v) = call(&st, "POST", "/attention", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["code"].is_string() && v["message"].is_string());
}

#[tokio::test]
async fn client_faults_are_4xx_with_code_and_message() {
    let st = state();
    let mut body = prompt_json(&instance(0));
    body["model_id"] = json!("nope");
    let (status, v) = call(&st, "POST", "/inpaint", Some(body.clone())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_model");

    // A canvas that does not match the model's input size.
    let big = Image::filled(48, 48, gridprompt::Rgb([0.5; 3])).unwrap();
    let req = json!({"model_id": "tok", "canvas": encode_image(&big).unwrap(), "mask": {"rows": 6, "cols": 6, "data": vec![false; 36]}});
    let (status, v) = call(&st, "POST", "/inpaint", Some(req)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");

    // Three layout rows for a single example.
    body["model_id"] = json!("tok");
    body["layout"] = json!({"orientation": "horizontal", "row_order": [0, 1, 2]});
    let (status, v) = call(&st, "POST", "/compose", Some(body)).await;
    assert!(status.is_client_error(), "{status} {v}");

    let (status, v) = call(&st, "POST", "/score", Some(json!({"prediction": "%%%", "ground_truth": "", "metric": "miou"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["message"].is_string());

    let (status, v) = call(&st, "POST", "/score", Some(json!({"metric": "miou"}))).await;
    assert!(status.is_client_error());
    assert_eq!(v["code"], "bad_request");

    let (status, v) = call(&st, "GET", "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn requests_are_counted() {
    let st = state();
    call(&st, "GET", "/models", None).await;
    call(&st, "GET", "/models", None).await;
    assert_eq!(st.request_count(), 2);
}
