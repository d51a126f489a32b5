//! HTTP API over a loaded partition and scorer.
//!
//! | route | |
//! |---|---|
//! | `POST /v1/geocode` | ranked cells for a text, with GeoJSON geometry |
//! | `GET /v1/partition/leaves?bbox=minLon,minLat,maxLon,maxLat` | leaves meeting a box |
//! | `GET /v1/health` | readiness, partition checksum, model id |
//!
//! The partition and scorer are loaded once and shared read-only. Until
//! loading finishes every route answers 503.

pub mod config;

use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use textgeo::decode::{beam_search, BeamConfig, DecodeError, LabelTrie, LoadedScorer, SequenceScorer};
use textgeo::geojson::{cell_geometry, leaves_in_bbox, Bbox, Feature, FeatureCollection, Geometry, GeometryOptions};
use textgeo::partition::PartitionError;
use textgeo::{AdaptivePartition, LabelString};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use config::{ConfigError, ServiceConfig};

/// Longest accepted query, in UTF-8 bytes.
pub const MAX_TEXT_BYTES: usize = 2048;
/// Largest beam a request may ask for.
pub const MAX_BEAM_WIDTH: usize = 1000;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Model(#[from] DecodeError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Everything a request needs, immutable once built.
pub struct Loaded {
    partition: AdaptivePartition,
    trie: LabelTrie,
    scorer: LoadedScorer,
    checksum: String,
    model_id: String,
}

impl Loaded {
    pub fn new(partition: AdaptivePartition, scorer: LoadedScorer) -> Self {
        Self {
            trie: LabelTrie::from_partition(&partition),
            checksum: partition.checksum(),
            model_id: scorer.id(),
            partition,
            scorer,
        }
    }

    /// Reads the partition, then the model, which must match it.
    pub fn from_files(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let partition = AdaptivePartition::load(&config.partition)?;
        let scorer = LoadedScorer::load(&config.model, &partition)?;
        Ok(Self::new(partition, scorer))
    }
}

struct Shared {
    loaded: OnceLock<Loaded>,
    beam_width: usize,
    top_k: usize,
    geometry: GeometryOptions,
}

/// Handle shared by all routes.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// A state that answers 503 until [`AppState::install`] is called.
    pub fn loading(config: &ServiceConfig) -> Self {
        Self(Arc::new(Shared {
            loaded: OnceLock::new(),
            beam_width: config.beam_width,
            top_k: config.top_k,
            geometry: config.geometry,
        }))
    }

    pub fn ready(config: &ServiceConfig, loaded: Loaded) -> Self {
        let state = Self::loading(config);
        state.install(loaded);
        state
    }

    /// Makes `loaded` live. Later calls are ignored.
    pub fn install(&self, loaded: Loaded) {
        let _ = self.0.loaded.set(loaded);
    }

    fn get(&self) -> Result<&Loaded, ApiError> {
        self.0.loaded.get().ok_or(ApiError::Unavailable)
    }
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    Unprocessable(String),
    Unavailable,
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match &self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m.as_str()),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m.as_str()),
            ApiError::Unavailable => (StatusCode::SERVICE_UNAVAILABLE, "model is loading"),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m.as_str()),
        };
        json_response(status, &ErrorBody { error: message })
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    let mut bytes = serde_json::to_vec(body).expect("response serializes");
    bytes.push(b'\n');
    (status, [(header::CONTENT_TYPE, HeaderValue::from_static("application/json"))], bytes).into_response()
}

pub fn router(state: AppState, cors_origins: &[String]) -> Router {
    let app = Router::new()
        .route("/v1/geocode", post(geocode))
        .route("/v1/partition/leaves", get(leaves))
        .route("/v1/health", get(health))
        .fallback(|| async { json_response(StatusCode::NOT_FOUND, &ErrorBody { error: "no such route" }) })
        .with_state(state);
    if cors_origins.is_empty() {
        return app;
    }
    let origin = if cors_origins.iter().any(|o| o == "*") {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    app.layer(
        CorsLayer::new()
            .allow_origin(origin)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    )
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeocodeRequest {
    text: String,
    top_k: Option<usize>,
    beam_width: Option<usize>,
}

#[derive(Serialize)]
struct LatLonBody {
    lat: f64,
    lon: f64,
}

#[derive(Serialize)]
struct AncestorBody {
    label: LabelString,
    polygon: Geometry,
}

#[derive(Serialize)]
struct PredictionBody {
    label: LabelString,
    probability: f64,
    center: LatLonBody,
    polygon: Geometry,
    ancestors: Vec<AncestorBody>,
}

#[derive(Serialize)]
struct GeocodeResponse {
    predictions: Vec<PredictionBody>,
}

async fn geocode(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    state.get()?;
    let req: GeocodeRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("text is empty".into()));
    }
    if req.text.len() > MAX_TEXT_BYTES {
        return Err(ApiError::BadRequest(format!("text exceeds {MAX_TEXT_BYTES} bytes")));
    }
    let beam_width = req.beam_width.unwrap_or(state.0.beam_width);
    let top_k = req.top_k.unwrap_or(state.0.top_k.min(beam_width));
    if beam_width == 0 || beam_width > MAX_BEAM_WIDTH {
        return Err(ApiError::Unprocessable(format!("beam_width must be between 1 and {MAX_BEAM_WIDTH}")));
    }
    if top_k == 0 || top_k > beam_width {
        return Err(ApiError::Unprocessable(format!("top_k must be between 1 and beam_width ({beam_width})")));
    }
    let config = BeamConfig::new(beam_width, top_k).map_err(|e| ApiError::Unprocessable(e.to_string()))?;

    let task_state = state.clone();
    let response = tokio::task::spawn_blocking(move || {
        let loaded = task_state.get()?;
        let geometry = task_state.0.geometry;
        let hyps = beam_search(&loaded.scorer, &req.text, &loaded.trie, config)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let predictions = hyps
            .into_iter()
            .map(|h| {
                let cell = h.label.cell();
                let center = cell.center();
                PredictionBody {
                    center: LatLonBody { lat: center.lat(), lon: center.lon() },
                    polygon: cell_geometry(&cell, &geometry),
                    ancestors: h
                        .label
                        .ancestors()
                        .into_iter()
                        .map(|a| AncestorBody { polygon: cell_geometry(&a.cell(), &geometry), label: a })
                        .collect(),
                    label: h.label,
                    probability: h.probability,
                }
            })
            .collect();
        Ok::<_, ApiError>(GeocodeResponse { predictions })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(json_response(StatusCode::OK, &response))
}

#[derive(Serialize)]
struct LeafProperties {
    label: LabelString,
    count: u64,
    level: u8,
}

async fn leaves(
    State(state): State<AppState>,
    Query(params): Query<Vec<(String, String)>>,
) -> Result<Response, ApiError> {
    state.get()?;
    let raw = params
        .iter()
        .find(|(k, _)| k == "bbox")
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| ApiError::BadRequest("missing bbox parameter".into()))?;
    let bbox: Bbox = raw.parse().map_err(|e: textgeo::geojson::BboxError| ApiError::BadRequest(e.to_string()))?;

    let task_state = state.clone();
    let collection = tokio::task::spawn_blocking(move || {
        let loaded = task_state.get()?;
        let geometry = task_state.0.geometry;
        let features = leaves_in_bbox(&loaded.partition, &bbox)
            .into_iter()
            .map(|(cell, count)| {
                Feature::new(
                    LeafProperties { label: cell.into(), count, level: cell.level() },
                    cell_geometry(&cell, &geometry),
                )
            })
            .collect();
        Ok::<_, ApiError>(FeatureCollection::new(features))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(json_response(StatusCode::OK, &collection))
}

#[derive(Serialize)]
struct HealthBody<'a> {
    status: &'static str,
    partition_checksum: Option<&'a str>,
    model_id: Option<&'a str>,
    max_level: Option<u8>,
}

async fn health(State(state): State<AppState>) -> Response {
    match state.get() {
        Ok(l) => json_response(
            StatusCode::OK,
            &HealthBody {
                status: "ok",
                partition_checksum: Some(&l.checksum),
                model_id: Some(&l.model_id),
                max_level: Some(l.partition.max_level()),
            },
        ),
        Err(_) => json_response(
            StatusCode::SERVICE_UNAVAILABLE,
            &HealthBody { status: "loading", partition_checksum: None, model_id: None, max_level: None },
        ),
    }
}

/// Binds, starts answering (503 while loading), loads the files and then
/// serves until ctrl-c. A load failure stops the server and is returned.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    config.validate()?;
    let state = AppState::loading(&config);
    let app = router(state.clone(), &config.cors_origins);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);

    let load_config = config.clone();
    let load = tokio::task::spawn_blocking(move || Loaded::from_files(&load_config));
    let mut server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });
    let joined = |r: Result<std::io::Result<()>, tokio::task::JoinError>| -> Result<(), ServiceError> {
        Ok(r.map_err(|e| std::io::Error::other(e.to_string()))??)
    };
    tokio::select! {
        res = &mut server => return joined(res),
        loaded = load => {
            let loaded = match loaded.map_err(|e| std::io::Error::other(e.to_string()))? {
                Ok(l) => l,
                Err(e) => {
                    server.abort();
                    return Err(e);
                }
            };
            eprintln!("loaded partition {} and model {}", loaded.checksum, loaded.model_id);
            state.install(loaded);
        }
    }
    joined(server.await)
}
