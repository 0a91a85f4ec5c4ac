//! JSON/HTTP routes over a [`ReviewStore`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::store::{ReviewItem, ReviewStore, Status, StoreError, Update};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub image_id: String,
    pub status: Status,
    pub revision: u64,
}

impl From<ReviewItem> for ItemSummary {
    fn from(it: ReviewItem) -> Self {
        ItemSummary {
            image_id: it.image_id,
            status: it.status,
            revision: it.revision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemBody {
    pub image_id: String,
    /// Base64 PGM.
    pub image: String,
    /// Base64 PGM.
    pub mask: String,
    pub status: Status,
    pub revision: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PutBody {
    #[serde(default)]
    pub mask: Option<String>,
    pub status: String,
    #[serde(default)]
    pub revision: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PutReply {
    pub revision: u64,
}

/// Error as seen by a client.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub revision: Option<u64>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            revision: None,
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let (status, revision) = match &e {
            StoreError::Uninitialized(_) => (StatusCode::SERVICE_UNAVAILABLE, None),
            StoreError::BadStatus(_) => (StatusCode::BAD_REQUEST, None),
            StoreError::NotFound(_) => (StatusCode::NOT_FOUND, None),
            StoreError::StaleRevision { current, .. } => (StatusCode::CONFLICT, Some(*current)),
            StoreError::IllegalTransition { .. } => (StatusCode::CONFLICT, None),
            StoreError::InvalidMask(_) => (StatusCode::UNPROCESSABLE_ENTITY, None),
            StoreError::Corrupt(_) | StoreError::Io { .. } | StoreError::Interrupted(..) => {
                (StatusCode::INTERNAL_SERVER_ERROR, None)
            }
        };
        ApiError {
            status,
            message: e.to_string(),
            revision,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(r) = self.revision {
            body["revision"] = json!(r);
        }
        (self.status, Json(body)).into_response()
    }
}

type Shared = Arc<ReviewStore>;

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/api/items", get(list_items))
        .route("/api/items/{id}", get(get_item).put(put_item))
        .with_state(store)
}

/// Serves the store until the process is stopped.
pub async fn serve(addr: SocketAddr, store: ReviewStore) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("review service on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(store))).await
}

/// Runs blocking store work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
        revision: None,
    })?
}

fn status_filter(query: Option<&str>) -> Result<Option<Status>, ApiError> {
    let mut filter = None;
    for pair in query.unwrap_or("").split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("status", v)) => filter = Some(v.parse::<Status>()?),
            _ => return Err(ApiError::bad_request(format!("unknown query parameter {pair:?}"))),
        }
    }
    Ok(filter)
}

async fn list_items(State(store): State<Shared>, RawQuery(query): RawQuery) -> Result<Json<Vec<ItemSummary>>, ApiError> {
    let filter = status_filter(query.as_deref())?;
    blocking(move || Ok(Json(store.list(filter)?.into_iter().map(ItemSummary::from).collect()))).await
}

async fn get_item(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<ItemBody>, ApiError> {
    blocking(move || {
        let d = store.get(&id)?;
        Ok(Json(ItemBody {
            image_id: d.item.image_id,
            image: STANDARD.encode(&d.image_pgm),
            mask: STANDARD.encode(&d.mask_pgm),
            status: d.item.status,
            revision: d.item.revision,
        }))
    })
    .await
}

async fn put_item(State(store): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Json<PutReply>, ApiError> {
    let body: PutBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    let status: Status = body.status.parse()?;
    let mask = match body.mask {
        Some(b64) => Some(STANDARD.decode(b64.as_bytes()).map_err(|e| ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: format!("mask is not valid base64: {e}"),
            revision: None,
        })?),
        None => None,
    };
    let update = Update {
        status,
        mask,
        revision: body.revision,
    };
    blocking(move || Ok(Json(PutReply { revision: store.update(&id, update)? }))).await
}
