mod common;

use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use cogs_core::raster::Raster;
use cogs_core::refine::retrieve;
use common::{app, call, fixture, inputs, val_ids};
use serde_json::{json, Value};

async fn generate(app: &axum::Router, class: Value, seed: Option<u64>) -> Value {
    let (sketch, style) = inputs(0);
    let mut body = json!({ "sketch": sketch, "style": style, "class": class });
    if let Some(s) = seed {
        body["seed"] = json!(s);
    }
    let (status, v) = call(app, "POST", "/generate", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn health_reports_config_hash() {
    let (app, _) = app();
    let (status, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["config_hash"], fixture().pipeline.config_hash());
}

#[tokio::test]
async fn classes_lists_names_in_order() {
    let (app, _) = app();
    let (status, v) = call(&app, "GET", "/classes", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = v["classes"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, fixture().pipeline.class_names());
    assert!(v["classes"].as_array().unwrap().iter().all(|c| c["refinable"] == true));
}

#[tokio::test]
async fn styles_returns_gallery_and_shortlist() {
    let (app, _) = app();
    let name = &fixture().pipeline.class_names()[1];
    let (status, v) = call(&app, "GET", &format!("/styles?class={name}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let styles = v["styles"].as_array().unwrap();
    let expected = fixture().manifest.images().filter(|r| r.class_label == 1).count();
    assert_eq!(styles.len(), expected);
    let shortlist = v["shortlist"].as_array().unwrap();
    assert_eq!(shortlist.len(), 3);
    let ids: Vec<&Value> = styles.iter().map(|s| &s["id"]).collect();
    assert!(shortlist.iter().all(|s| ids.contains(&s)));
    let thumb = STANDARD.decode(styles[0]["thumbnail"].as_str().unwrap()).unwrap();
    assert_eq!(Raster::from_png_bytes(&thumb, 3).unwrap().shape(), (32, 32, 3));

    let (status, _) = call(&app, "GET", "/styles?class=no-such-class", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn generate_roundtrip_and_seed_contract() {
    let (app, _) = app();
    let a = generate(&app, json!(0), Some(7)).await;
    let b = generate(&app, json!(fixture().pipeline.class_names()[0]), Some(7)).await;
    assert_eq!(a["image"], b["image"]);
    assert_eq!(a["tokens_digest"], b["tokens_digest"]);
    assert_ne!(a["generation_id"], b["generation_id"]);
    assert_eq!(a["config_hash"], fixture().pipeline.config_hash());
    let bytes = STANDARD.decode(a["image"].as_str().unwrap()).unwrap();
    assert_eq!(Raster::from_png_bytes(&bytes, 3).unwrap().shape(), (32, 32, 3));

    let drawn = generate(&app, json!(0), None).await;
    let seed = drawn["seed"].as_u64().expect("server returns the seed it drew");
    let again = generate(&app, json!(0), Some(seed)).await;
    assert_eq!(drawn["image"], again["image"]);
}

#[tokio::test]
async fn generate_accepts_style_ids_and_sessions() {
    let (app, state) = app();
    let (sketch, _) = inputs(1);
    let style_id = val_ids(1)[1].clone();
    let body = json!({ "sketch": sketch, "style_id": style_id, "class": 1, "seed": 3, "session_id": "tab-1" });
    let (status, first) = call(&app, "POST", "/generate", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let (_, second) = call(&app, "POST", "/generate", Some(body)).await;
    assert_eq!(first["session_id"], "tab-1");
    let store = state.read();
    let session = &store.sessions["tab-1"];
    assert_eq!(session.history, vec![first["generation_id"].as_str().unwrap(), second["generation_id"].as_str().unwrap()]);
    assert_eq!(session.active_class, 1);
}

#[tokio::test]
async fn generate_rejects_bad_input() {
    let (app, _) = app();
    let (sketch, style) = inputs(0);
    let cases = [
        json!({ "sketch": "not base64!", "style": style, "class": 0 }),
        json!({ "sketch": STANDARD.encode(b"not a png"), "style": style, "class": 0 }),
        json!({ "sketch": sketch, "style": style, "class": "no-such-class" }),
        json!({ "sketch": sketch, "style": style, "class": 99 }),
        json!({ "sketch": sketch, "class": 0 }),
        json!({ "sketch": sketch, "style": style, "style_id": val_ids(0)[0], "class": 0 }),
        json!({ "sketch": sketch, "style_id": "no-such-image", "class": 0 }),
        json!({ "sketch": sketch, "style": style, "class": 0, "top_k": 0 }),
        json!({ "sketch": common::png(&Raster::filled(16, 16, 1, 0.0)), "style": style, "class": 0 }),
    ];
    for body in cases {
        let (status, v) = call(&app, "POST", "/generate", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert!(v["error"].is_string());
    }
}

#[tokio::test]
async fn concurrent_generates_keep_the_index_consistent() {
    let (app, state) = app();
    let before: usize = state.read().indices.values().map(|i| i.len()).sum();
    let mut tasks = tokio::task::JoinSet::new();
    for i in 0..8u64 {
        let app = app.clone();
        tasks.spawn(async move {
            let (sketch, style) = inputs((i % 2) as usize);
            let sketch = if i == 5 { "garbage".to_string() } else { sketch };
            call(&app, "POST", "/generate", Some(json!({ "sketch": sketch, "style": style, "class": i % 2, "seed": i }))).await
        });
    }
    let mut ok = Vec::new();
    while let Some(r) = tasks.join_next().await {
        let (status, v) = r.unwrap();
        if status == StatusCode::OK {
            ok.push(v["generation_id"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(ok.len(), 7);
    let store = state.read();
    let after: usize = store.indices.values().map(|i| i.len()).sum();
    assert_eq!(after - before, ok.len());
    ok.sort();
    ok.dedup();
    assert_eq!(ok.len(), 7);
    assert_eq!(store.generations.len(), 7);
}

#[tokio::test]
async fn retrieve_matches_brute_force_and_excludes_the_query() {
    let (app, state) = app();
    let g = generate(&app, json!(0), Some(11)).await;
    let id = g["generation_id"].as_str().unwrap();

    let (status, v) = call(&app, "POST", "/retrieve", Some(json!({ "generation_id": id, "k": 0 }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["results"], json!([]));

    let (status, v) = call(&app, "POST", "/retrieve", Some(json!({ "generation_id": id, "k": 5 }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    let d: Vec<f64> = results.iter().map(|r| r["distance"].as_f64().unwrap()).collect();
    assert!(d.iter().all(|&x| x >= 0.0));
    assert!(d.windows(2).all(|w| w[0] <= w[1]));
    assert!(results.iter().all(|r| r["id"] != id && r["source"] == "real" && r["thumbnail"].is_string()));

    let store = state.read();
    let query = &store.generations[id];
    let brute = retrieve(&query.mean, &store.indices[&0], 6).unwrap();
    let expected: Vec<&str> = brute.hits.iter().map(|h| h.id.as_str()).filter(|h| *h != id).take(5).collect();
    let got: Vec<&str> = results.iter().map(|r| r["id"].as_str().unwrap()).collect();
    assert_eq!(got, expected);
}

#[tokio::test]
async fn retrieve_returns_prior_generations() {
    let (app, _) = app();
    let a = generate(&app, json!(0), Some(21)).await;
    let b = generate(&app, json!(0), Some(21)).await;
    let (_, v) = call(&app, "POST", "/retrieve", Some(json!({ "generation_id": a["generation_id"], "k": 1 }))).await;
    let top = &v["results"][0];
    assert_eq!(top["id"], b["generation_id"]);
    assert_eq!(top["source"], "generated");
    assert_eq!(top["distance"], 0.0);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let (app, _) = app();
    let (status, _) = call(&app, "POST", "/retrieve", Some(json!({ "generation_id": "gen-999999", "k": 3 }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/generations/gen-999999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) =
        call(&app, "POST", "/interpolate", Some(json!({ "generation_id": "gen-999999", "neighbor_id": "x", "t": 0.5 }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let g = generate(&app, json!(0), Some(1)).await;
    let (status, _) = call(
        &app,
        "POST",
        "/interpolate",
        Some(json!({ "generation_id": g["generation_id"], "neighbor_id": "no-such-image", "t": 0.5 })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn interpolation_endpoints_are_exact_over_the_wire() {
    let (app, _) = app();
    let g = generate(&app, json!(0), Some(5)).await;
    let id = g["generation_id"].as_str().unwrap();
    let neighbor = val_ids(0)[2].clone();
    let (status, v) =
        call(&app, "POST", "/interpolate", Some(json!({ "generation_id": id, "neighbor_id": neighbor, "t": [0.0, 1.0] }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (_, stored) = call(&app, "GET", &format!("/generations/{id}"), None).await;
    assert_eq!(v["results"][0]["t"], 0.0);
    assert_eq!(v["results"][0]["image"], stored["query_decode"]);
    assert_eq!(v["results"][0]["distance"], 0.0);

    let f = fixture();
    let record = f.manifest.image(&neighbor).unwrap();
    let tokens = f.pipeline.image_vq().tokenize(&[&record.pixels]).unwrap();
    let mean = f.pipeline.embed_tokens(0, &[&tokens[0]]).unwrap().remove(0).mean;
    let (grid, image) = f.pipeline.decode_point(0, &mean).unwrap();
    assert_eq!(v["results"][1]["image"], STANDARD.encode(image.to_png_bytes().unwrap()));
    assert_eq!(v["results"][1]["tokens_digest"], cogs_service::state::tokens_digest(&grid));
}

#[tokio::test]
async fn interpolation_samples_are_filtered_interior_points() {
    let (app, _) = app();
    let g = generate(&app, json!(1), Some(8)).await;
    let neighbor = val_ids(1)[0].clone();
    let body = json!({ "generation_id": g["generation_id"], "neighbor_id": neighbor, "n_samples": 3 });
    let (status, v) = call(&app, "POST", "/interpolate", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["requested"], 3);
    let ts: Vec<f64> = v["results"].as_array().unwrap().iter().map(|r| r["t"].as_f64().unwrap()).collect();
    let grid = [0.25, 0.5, 0.75];
    assert!(ts.len() <= 3);
    assert!(ts.iter().all(|t| grid.contains(t)));
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(v["empty"], ts.is_empty());

    let other = generate(&app, json!(1), Some(9)).await;
    let body = json!({ "generation_id": g["generation_id"], "neighbor_id": other["generation_id"], "n_samples": 2 });
    let (status, _) = call(&app, "POST", "/interpolate", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn interpolation_across_classes_conflicts() {
    let (app, _) = app();
    let a = generate(&app, json!(0), Some(2)).await;
    let b = generate(&app, json!(1), Some(2)).await;
    for neighbor in [b["generation_id"].clone(), json!(val_ids(1)[0])] {
        let body = json!({ "generation_id": a["generation_id"], "neighbor_id": neighbor, "t": 0.5 });
        let (status, v) = call(&app, "POST", "/interpolate", Some(body)).await;
        assert_eq!(status, StatusCode::CONFLICT, "{v}");
    }
}

#[tokio::test]
async fn interpolation_request_needs_one_mode() {
    let (app, _) = app();
    let g = generate(&app, json!(0), Some(4)).await;
    let n = val_ids(0)[0].clone();
    for extra in [json!({}), json!({ "t": 0.5, "n_samples": 2 }), json!({ "t": 1.5 }), json!({ "n_samples": 0 })] {
        let mut body = json!({ "generation_id": g["generation_id"], "neighbor_id": n });
        for (k, v) in extra.as_object().unwrap() {
            body[k] = v.clone();
        }
        let (status, _) = call(&app, "POST", "/interpolate", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn generation_record_carries_provenance() {
    let (app, _) = app();
    let g = generate(&app, json!(0), Some(13)).await;
    let (status, v) = call(&app, "GET", &format!("/generations/{}", g["generation_id"].as_str().unwrap()), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["seed"], 13);
    assert_eq!(v["image"], g["image"]);
    assert_eq!(v["config_hash"], g["config_hash"]);
    assert_eq!(v["top_k"], 4);
    assert_eq!(v["session_history"], json!([g["generation_id"]]));
}
