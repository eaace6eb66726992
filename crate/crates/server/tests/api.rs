use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use famcount::checkpoint::{Checkpoint, CheckpointMeta};
use famcount::correlation::MatcherConfig;
use famcount::features::BackboneSpec;
use famcount::head::init_params;
use famcount::pipeline::CountingPipeline;
use famcount_server::{router, AppState, CountResponse, HealthResponse, Model, ServerConfig, UploadResponse};
use http_body_util::BodyExt;
use image::{ImageFormat, Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "famcount-test-boundary";

fn checkpoint() -> Checkpoint {
    let pipeline = CountingPipeline::new(BackboneSpec::Lite { seed: 0 }, MatcherConfig::default(), 64).unwrap();
    let mut params = init_params(1, 6);
    for v in params.tensors_mut()[8].iter_mut() {
        *v *= 0.01;
    }
    Checkpoint::new(params, pipeline.fingerprint(), CheckpointMeta::default()).unwrap()
}

fn app(with_model: bool) -> Router {
    let model = with_model.then(|| Model::from_checkpoint(checkpoint(), "memory".into()).unwrap());
    router(Arc::new(AppState::new(model, &ServerConfig::default())), None)
}

fn png(width: u32, height: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(width, height, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x / 7 + y / 5) % 2 * 200) as u8]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).unwrap();
    buf.into_inner()
}

fn multipart(bytes: &[u8], content_type: &str) -> Request<Body> {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!(
            "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"upload\"\r\nContent-Type: {content_type}\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/api/images")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn json_post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn upload(app: &Router, width: u32, height: u32) -> UploadResponse {
    let (status, body) = send(app, multipart(&png(width, height), "image/png")).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn upload_reports_dimensions() {
    let app = app(true);
    let up = upload(&app, 512, 384).await;
    assert_eq!((up.width, up.height), (512, 384));
    // Same bytes, same id.
    assert_eq!(upload(&app, 512, 384).await.image_id, up.image_id);
}

#[tokio::test]
async fn oversize_upload_is_413() {
    let app = app(true);
    let big = vec![0u8; 25 * 1024 * 1024];
    let (status, _) = send(&app, multipart(&big, "image/png")).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn text_upload_is_415() {
    let app = app(true);
    let (status, _) = send(&app, multipart(b"just some text", "text/plain")).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn count_with_and_without_adaptation() {
    let app = app(true);
    let up = upload(&app, 128, 96).await;
    let boxes = json!([[10, 10, 30, 30], [60, 40, 84, 70]]);
    let plain = json!({ "image_id": up.image_id, "boxes": boxes, "adapt": false, "steps": 7 });
    let zero = json!({ "image_id": up.image_id, "boxes": boxes, "adapt": true, "steps": 0 });
    let (s1, b1) = send(&app, json_post("/api/count", plain.clone())).await;
    let (s2, b2) = send(&app, json_post("/api/count", zero)).await;
    assert_eq!(s1, StatusCode::OK, "{}", String::from_utf8_lossy(&b1));
    assert_eq!(s2, StatusCode::OK);
    let r1: CountResponse = serde_json::from_slice(&b1).unwrap();
    let r2: CountResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.count, r2.count);
    assert_eq!(r1.trace.steps, 0);
    assert!((r1.count - r1.density_sum).abs() <= 1e-6);
    assert!(r1.heatmap.is_none());

    // Repeating a request gives the same answer.
    let (_, b3) = send(&app, json_post("/api/count", plain)).await;
    let r3: CountResponse = serde_json::from_slice(&b3).unwrap();
    assert_eq!(r3.count, r1.count);

    let adapted = json!({ "image_id": up.image_id, "boxes": boxes, "adapt": true, "steps": 3, "return_heatmap": true });
    let (s4, b4) = send(&app, json_post("/api/count", adapted)).await;
    assert_eq!(s4, StatusCode::OK);
    let r4: CountResponse = serde_json::from_slice(&b4).unwrap();
    assert_eq!(r4.trace.steps, 3);
    use base64::Engine;
    let png = base64::engine::general_purpose::STANDARD.decode(r4.heatmap.unwrap()).unwrap();
    let heat = image::load_from_memory(&png).unwrap();
    assert_eq!((heat.width(), heat.height()), (128, 96));
}

#[tokio::test]
async fn unknown_image_is_404_naming_the_id() {
    let app = app(true);
    let (status, body) = send(&app, json_post("/api/count", json!({ "image_id": "nope", "boxes": [[0, 0, 5, 5]] }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(String::from_utf8_lossy(&body).contains("nope"));
}

#[tokio::test]
async fn invalid_boxes_are_422_naming_the_index() {
    let app = app(true);
    let up = upload(&app, 128, 96).await;
    let cases = [
        (json!([[10, 10, 30, 30], [50, 10, 40, 30]]), "box 1"),
        (json!([[10, 10, 300, 30]]), "box 0"),
        (json!([]), "1 to 3"),
        (json!([[0, 0, 5, 5], [0, 0, 5, 5], [0, 0, 5, 5], [0, 0, 5, 5]]), "1 to 3"),
    ];
    for (boxes, needle) in cases {
        let (status, body) = send(&app, json_post("/api/count", json!({ "image_id": up.image_id, "boxes": boxes }))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        let text = String::from_utf8_lossy(&body);
        assert!(text.contains(needle), "{text}");
    }
    let (status, _) = send(
        &app,
        json_post("/api/count", json!({ "image_id": up.image_id, "boxes": [[0, 0, 5, 5]], "adapt": true, "steps": 1001 })),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn health_reflects_the_model() {
    let (status, body) = send(&app(true), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: HealthResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.fingerprint.unwrap(), checkpoint().fingerprint);

    let (status, _) = send(&app(false), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn count_without_model_is_503() {
    let app = app(false);
    let up = upload(&app, 64, 64).await;
    let (status, _) = send(&app, json_post("/api/count", json!({ "image_id": up.image_id, "boxes": [[0, 0, 8, 8]] }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn cors_and_static_ui() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let state = Arc::new(AppState::new(None, &ServerConfig::default()));
    let app = router(state, Some(dir.path().to_path_buf()));
    let (status, body) = send(&app, Request::get("/ui/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
    let resp = app
        .clone()
        .oneshot(
            Request::options("/api/count")
                .header("origin", "http://localhost:5173")
                .header("access-control-request-method", "POST")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}

#[tokio::test]
async fn slow_requests_time_out_with_504() {
    let cfg = ServerConfig {
        request_timeout: std::time::Duration::from_millis(1),
        ..ServerConfig::default()
    };
    let model = Model::from_checkpoint(checkpoint(), "memory".into()).unwrap();
    let app = router(Arc::new(AppState::new(Some(model), &cfg)), None);
    let up = upload(&app, 128, 96).await;
    let req = json!({ "image_id": up.image_id, "boxes": [[10, 10, 30, 30]], "adapt": true, "steps": 1000 });
    let (status, _) = send(&app, json_post("/api/count", req)).await;
    assert_eq!(status, StatusCode::GATEWAY_TIMEOUT);
}
