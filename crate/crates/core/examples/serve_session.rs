//! Drives the HTTP API in-process: create a session, reselect, query a point.
//!
//! `changekit serve --session-dir DIR` exposes the same router on a socket.

use axum::body::Body;
use axum::http::{Request, StatusCode};
use changekit::service::{router, ServiceConfig};
use changekit::synthetic::{two_cluster_fixture, write_session};
use changekit::Time;
use http_body_util::BodyExt;
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or_default())
}

#[tokio::main]
async fn main() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = two_cluster_fixture();
    write_session(dir.path(), "scene", &fixture.session).unwrap();
    let app = router(ServiceConfig {
        session_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    });

    let (status, created) = call(&app, "POST", "/sessions", r#"{"manifest_path":"scene.json"}"#).await;
    println!("{status} {created}");
    let id = created["session_id"].as_str().unwrap();

    for query in ["mode=threshold&angle=180", "mode=threshold&angle=155", "mode=topk&k=2"] {
        let (_, json) = call(&app, "GET", &format!("/sessions/{id}/changes?{query}"), "").await;
        println!("{query}: {} changes", json["count"]);
    }
    let p = fixture.point_on(0, 0, Time::T0);
    let body = format!(r#"{{"points":[{{"x":{},"y":{},"t":"t0"}}],"semantic_angle":45}}"#, p.x, p.y);
    let (status, json) = call(&app, "POST", &format!("/sessions/{id}/query"), &body).await;
    let kept: Vec<_> = json["changes"].as_array().unwrap().iter().map(|c| c["id"].clone()).collect();
    println!("point query: {status}, kept ids {kept:?}");
}
