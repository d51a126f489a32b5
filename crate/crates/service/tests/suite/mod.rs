//! Request/response conformance against fixed partitions and models.
//!
//! Response bodies are pinned by SHA-256 in a cassette file (one JSON line per
//! named response). Set `TEXTGEO_BLESS=1` to re-record it.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use textgeo::dataset::{LabeledRecord, RawRecord};
use textgeo::decode::{train_baseline, LoadedScorer, ReplayScorer};
use textgeo::util::sha256_hex;
use textgeo::{build_partition, AdaptivePartition, LabelString, LatLon, PartitionParams};
use textgeo_service::{router, AppState, Loaded, ServiceConfig};
use tower::ServiceExt;

/// A dense cluster around northern France plus a sparse scatter.
pub fn fixture_partition() -> AdaptivePartition {
    let mut pts = Vec::new();
    for i in 0..20 {
        for j in 0..15 {
            pts.push(LatLon::new(47.0 + 0.1 * i as f64, 1.0 + 0.1 * j as f64).unwrap());
        }
    }
    for k in 0..40 {
        let lat = -60.0 + 3.0 * k as f64;
        let lon = -170.0 + 8.5 * k as f64;
        pts.push(LatLon::new(lat, lon).unwrap());
    }
    build_partition(pts, PartitionParams::new(8, 8).unwrap()).unwrap()
}

pub fn baseline_loaded() -> Loaded {
    let partition = fixture_partition();
    let places = [
        (48.85, 2.35, "paris cafe"),
        (48.85, 2.35, "paris museum"),
        (47.2, 1.4, "tours chateau"),
        (47.9, 1.9, "orleans cathedral"),
        (-33.9, 151.2, "sydney harbour"),
        (40.7, -74.0, "new york bridge"),
    ];
    let records: Vec<LabeledRecord> = places
        .iter()
        .enumerate()
        .map(|(i, (lat, lon, text))| {
            let record = RawRecord { id: i.to_string(), latitude: *lat, longitude: *lon, text: text.to_string() };
            let label = LabelString::from(partition.leaf_for(record.loc()));
            LabeledRecord { record, label }
        })
        .collect();
    let model = train_baseline(records, &partition, 1.0).unwrap();
    Loaded::new(partition, LoadedScorer::Baseline(model))
}

pub fn replay_loaded() -> Loaded {
    let scores = ReplayScorer::from_jsonl("{\"text_hash\":\"*\",\"prefix\":\"\",\"probs\":{\"3\":1.0}}\n").unwrap();
    Loaded::new(fixture_partition(), LoadedScorer::Replay(scores))
}

pub fn config() -> ServiceConfig {
    ServiceConfig::new("unused", "unused")
}

pub fn app(loaded: Loaded) -> Router {
    router(AppState::ready(&config(), loaded), &[])
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::builder()
        .method(Method::POST)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.into())
        .unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::builder().uri(uri).body(Body::empty()).unwrap()
}

pub fn geocode(body: Value) -> Request<Body> {
    post("/v1/geocode", body.to_string())
}

pub struct Cassette {
    path: PathBuf,
    recorded: BTreeMap<String, (u16, String)>,
    seen: Mutex<BTreeMap<String, (u16, String)>>,
}

impl Cassette {
    fn open(path: &Path) -> Self {
        let path = path.to_path_buf();
        let recorded = std::fs::read_to_string(&path)
            .unwrap_or_default()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["name"].as_str().unwrap().to_owned(), (v["status"].as_u64().unwrap() as u16, v["sha256"].as_str().unwrap().to_owned()))
            })
            .collect();
        Self { path, recorded, seen: Mutex::new(BTreeMap::new()) }
    }

    fn check(&self, name: &str, status: StatusCode, body: &[u8]) {
        let got = (status.as_u16(), sha256_hex(body));
        self.seen.lock().unwrap().insert(name.to_owned(), got.clone());
        if std::env::var_os("TEXTGEO_BLESS").is_none() {
            assert_eq!(self.recorded.get(name), Some(&got), "{name}: {}", String::from_utf8_lossy(body));
        }
    }

    fn finish(self) -> usize {
        let n = self.seen.lock().unwrap().len();
        if std::env::var_os("TEXTGEO_BLESS").is_some() {
            let lines: String = self
                .seen
                .into_inner()
                .unwrap()
                .into_iter()
                .map(|(name, (status, sha))| format!("{}\n", json!({"name": name, "status": status, "sha256": sha})))
                .collect();
            std::fs::create_dir_all(self.path.parent().unwrap()).unwrap();
            std::fs::write(&self.path, lines).unwrap();
        } else {
            let seen = self.seen.into_inner().unwrap();
            assert_eq!(seen.keys().collect::<Vec<_>>(), self.recorded.keys().collect::<Vec<_>>());
        }
        n
    }
}

pub fn json_of(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap()
}

/// Closed, counter-clockwise rings of `[lon, lat]` pairs in range.
pub fn assert_geojson_polygon(g: &Value) {
    let polygons: Vec<&Value> = match g["type"].as_str().unwrap() {
        "Polygon" => vec![&g["coordinates"]],
        "MultiPolygon" => g["coordinates"].as_array().unwrap().iter().collect(),
        other => panic!("unexpected geometry {other}"),
    };
    for poly in polygons {
        let ring: Vec<(f64, f64)> = poly[0]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| (p[0].as_f64().unwrap(), p[1].as_f64().unwrap()))
            .collect();
        assert!(ring.len() >= 4);
        assert_eq!(ring.first(), ring.last());
        assert!(ring.iter().all(|(x, y)| (-180.0..=180.0).contains(x) && (-90.0..=90.0).contains(y)));
        let area2: f64 = ring.windows(2).map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1).sum();
        assert!(area2 > 0.0, "ring is not counter-clockwise");
    }
}

/// Runs every recorded exchange against `cassette`; returns how many.
pub async fn conformance(cassette: &Path) -> usize {
    let tape = Cassette::open(cassette);
    let baseline = app(baseline_loaded());
    let replay = app(replay_loaded());
    let partition = fixture_partition();

    // health
    let (s, b) = call(&baseline, get("/v1/health")).await;
    assert_eq!(s, StatusCode::OK);
    let h = json_of(&b);
    assert_eq!(h["status"], "ok");
    assert_eq!(h["partition_checksum"], sha256_hex(partition.to_canonical_string().as_bytes()));
    assert_eq!(h["max_level"], 8);
    assert!(h["model_id"].as_str().unwrap().starts_with("baseline-"));
    tape.check("health", s, &b);

    let loading = router(AppState::loading(&config()), &[]);
    let (s, b) = call(&loading, get("/v1/health")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    tape.check("health_loading", s, &b);
    let (s, b) = call(&loading, geocode(json!({"text": "Paris"}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    tape.check("geocode_loading", s, &b);
    let (s, _) = call(&loading, get("/v1/partition/leaves?bbox=-180,-90,180,90")).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);

    // geocode
    let (s, b) = call(&baseline, geocode(json!({"text": "Paris"}))).await;
    assert_eq!(s, StatusCode::OK);
    let preds = json_of(&b)["predictions"].as_array().unwrap().clone();
    assert!(!preds.is_empty() && preds.len() <= 5);
    let paris_leaf = LabelString::from(partition.leaf_for(LatLon::new(48.85, 2.35).unwrap()));
    assert_eq!(preds[0]["label"], paris_leaf.as_str());
    let mut last = f64::INFINITY;
    for p in &preds {
        let label = LabelString::parse(p["label"].as_str().unwrap()).unwrap();
        assert!(partition.is_leaf(&label.cell()));
        let prob = p["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&prob) && prob <= last);
        last = prob;
        let c = label.cell().center();
        assert!((p["center"]["lat"].as_f64().unwrap() - c.lat()).abs() < 1e-12);
        assert!((p["center"]["lon"].as_f64().unwrap() - c.lon()).abs() < 1e-12);
        assert_geojson_polygon(&p["polygon"]);
        let ancestors = p["ancestors"].as_array().unwrap();
        assert_eq!(ancestors.len(), label.len() - 1);
        for (k, a) in ancestors.iter().enumerate() {
            assert_eq!(a["label"].as_str().unwrap(), &label.as_str()[..k + 1]);
            assert_geojson_polygon(&a["polygon"]);
        }
    }
    tape.check("geocode_paris", s, &b);
    let (s2, b2) = call(&baseline, geocode(json!({"text": "Paris"}))).await;
    assert_eq!((s2, &b2), (s, &b), "identical requests must give identical bytes");

    let (s, b) = call(&baseline, geocode(json!({"text": "cathedral near orleans", "top_k": 2, "beam_width": 3}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json_of(&b)["predictions"].as_array().unwrap().len(), 2);
    tape.check("geocode_top2", s, &b);

    let (s, b) = call(&replay, geocode(json!({"text": "anything at all"}))).await;
    assert_eq!(s, StatusCode::OK);
    let top = json_of(&b)["predictions"][0]["label"].as_str().unwrap().to_owned();
    assert!(top.starts_with('3'), "{top}");
    tape.check("geocode_forced_face3", s, &b);

    let exact = "a".repeat(2048);
    let (s, _) = call(&baseline, geocode(json!({ "text": exact }))).await;
    assert_eq!(s, StatusCode::OK);

    let errors: [(&str, Request<Body>, StatusCode); 9] = [
        ("empty_text", geocode(json!({"text": ""})), StatusCode::BAD_REQUEST),
        ("blank_text", geocode(json!({"text": "  \t "})), StatusCode::BAD_REQUEST),
        ("long_text", geocode(json!({"text": "a".repeat(2049)})), StatusCode::BAD_REQUEST),
        ("malformed_json", post("/v1/geocode", "{\"text\": "), StatusCode::BAD_REQUEST),
        ("missing_text", geocode(json!({"top_k": 1})), StatusCode::BAD_REQUEST),
        ("unknown_field", geocode(json!({"text": "x", "lang": "en"})), StatusCode::BAD_REQUEST),
        ("top_k_over_beam", geocode(json!({"text": "Paris", "top_k": 6, "beam_width": 5})), StatusCode::UNPROCESSABLE_ENTITY),
        ("zero_beam", geocode(json!({"text": "Paris", "beam_width": 0, "top_k": 0})), StatusCode::UNPROCESSABLE_ENTITY),
        ("unknown_route", get("/v2/geocode"), StatusCode::NOT_FOUND),
    ];
    for (name, req, want) in errors {
        let (s, b) = call(&baseline, req).await;
        assert_eq!(s, want, "{name}");
        assert!(json_of(&b)["error"].is_string(), "{name}");
        tape.check(name, s, &b);
    }

    // partition leaves
    let (s, b) = call(&baseline, get("/v1/partition/leaves?bbox=-180,-90,180,90")).await;
    assert_eq!(s, StatusCode::OK);
    let fc = json_of(&b);
    assert_eq!(fc["type"], "FeatureCollection");
    let features = fc["features"].as_array().unwrap();
    let labels: BTreeSet<&str> = features.iter().map(|f| f["properties"]["label"].as_str().unwrap()).collect();
    assert_eq!(labels.len(), features.len());
    assert_eq!(labels.len(), partition.len());
    for f in features {
        assert_eq!(f["type"], "Feature");
        let label = LabelString::parse(f["properties"]["label"].as_str().unwrap()).unwrap();
        assert_eq!(f["properties"]["count"].as_u64(), partition.count(&label.cell()));
        assert_eq!(f["properties"]["level"].as_u64().unwrap() as usize, label.len() - 1);
        assert_geojson_polygon(&f["geometry"]);
    }
    tape.check("leaves_world", s, &b);

    let empty = build_partition(std::iter::empty(), PartitionParams::default()).unwrap();
    let empty_app = app(Loaded::new(empty, LoadedScorer::Replay(ReplayScorer::from_jsonl("").unwrap())));
    let (s, b) = call(&empty_app, get("/v1/partition/leaves?bbox=-180,-90,180,90")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json_of(&b)["features"].as_array().unwrap().len(), 6);
    tape.check("leaves_world_empty_partition", s, &b);

    let (s, b) = call(&baseline, get("/v1/partition/leaves?bbox=2.35,48.85,2.35,48.85")).await;
    let point = json_of(&b);
    let hits: Vec<&str> = point["features"].as_array().unwrap().iter().map(|f| f["properties"]["label"].as_str().unwrap()).collect();
    assert!(hits.contains(&paris_leaf.as_str()));
    tape.check("leaves_point", s, &b);

    let mean_len = |body: &[u8]| {
        let v = json_of(body);
        let f = v["features"].as_array().unwrap();
        f.iter().map(|x| x["properties"]["label"].as_str().unwrap().len() as f64).sum::<f64>() / f.len() as f64
    };
    let (_, cluster) = call(&baseline, get("/v1/partition/leaves?bbox=1.2,47.2,2.2,48.6")).await;
    let (_, ocean) = call(&baseline, get("/v1/partition/leaves?bbox=-40,-40,-30,-30")).await;
    assert!(mean_len(&cluster) > mean_len(&ocean));
    tape.check("leaves_cluster", StatusCode::OK, &cluster);
    tape.check("leaves_ocean", StatusCode::OK, &ocean);

    for (name, uri) in [
        ("bbox_missing", "/v1/partition/leaves"),
        ("bbox_three_values", "/v1/partition/leaves?bbox=1,2,3"),
        ("bbox_not_numeric", "/v1/partition/leaves?bbox=a,b,c,d"),
        ("bbox_inverted", "/v1/partition/leaves?bbox=10,0,5,1"),
        ("bbox_out_of_range", "/v1/partition/leaves?bbox=-190,0,0,1"),
    ] {
        let (s, b) = call(&baseline, get(uri)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{name}");
        tape.check(name, s, &b);
    }

    tape.finish()
}
