//! HTTP front end. Each route turns into one [`ApiRequest`]; responses are
//! the JSON form of [`ApiResponse`], errors `{"error": code, "message"}`.

use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tts_core::service::{IncidentMessage, StreamPage, TelemetryMessage};
use tts_core::{Api, ApiError, ApiRequest, ApiResponse, LedgerQuery, SystemClock};

use crate::config::Settings;

/// Messages per stream poll.
const STREAM_BATCH: usize = 256;
const STREAM_POLL: Duration = Duration::from_millis(50);

pub fn status_for(e: &ApiError) -> StatusCode {
    match e.code() {
        "unauthenticated" | "expired" => StatusCode::UNAUTHORIZED,
        "unauthorized" => StatusCode::FORBIDDEN,
        "validation_failed" => StatusCode::UNPROCESSABLE_ENTITY,
        "not_found" => StatusCode::NOT_FOUND,
        "bad_request" => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_body(e: &ApiError) -> Value {
    let mut v = json!({"error": e.code(), "message": e.to_string()});
    if let ApiError::InvalidSpec(report) = e {
        v["findings"] = serde_json::to_value(&report.findings).unwrap_or(Value::Null);
    }
    v
}

fn error_response(e: ApiError) -> Response {
    (status_for(&e), Json(error_body(&e))).into_response()
}

fn bad_request(msg: impl Into<String>) -> Response {
    error_response(ApiError::BadRequest(msg.into()))
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    headers
        .get("authorization")?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(|s| s.trim().to_owned())
}

async fn call(api: Arc<Api>, session: Option<String>, req: ApiRequest) -> Response {
    let Some(session) = session else {
        return error_response(ApiError::Unauthenticated);
    };
    let res = tokio::task::spawn_blocking(move || api.handle(&session, req)).await;
    match res {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": "internal", "message": e.to_string()})),
        )
            .into_response(),
    }
}

/// Builds a request from a JSON object plus the op name and path fields.
#[allow(clippy::result_large_err)]
fn request_from(
    op: &str,
    mut obj: Map<String, Value>,
    extra: &[(&str, Value)],
) -> Result<ApiRequest, Response> {
    obj.insert("op".into(), Value::String(op.into()));
    for (k, v) in extra {
        obj.insert((*k).into(), v.clone());
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| bad_request(e.to_string()))
}

async fn rpc_with(
    api: Arc<Api>,
    headers: &HeaderMap,
    op: &str,
    body: Map<String, Value>,
    extra: &[(&str, Value)],
) -> Response {
    match request_from(op, body, extra) {
        Ok(req) => call(api, bearer(headers), req).await,
        Err(r) => r,
    }
}

type S = State<Arc<Api>>;
type Body = Json<Value>;

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

#[derive(Deserialize)]
struct LoginBody {
    token: String,
}

async fn login(State(api): S, Json(b): Json<LoginBody>) -> Response {
    match api.login(&b.token) {
        Ok(ctx) => (StatusCode::CREATED, Json(ctx)).into_response(),
        Err(e) => error_response(e),
    }
}

async fn logout(State(api): S, headers: HeaderMap) -> Response {
    match bearer(&headers) {
        Some(s) if api.logout(&s) => StatusCode::NO_CONTENT.into_response(),
        _ => error_response(ApiError::Unauthenticated),
    }
}

async fn rpc(State(api): S, headers: HeaderMap, Json(req): Json<ApiRequest>) -> Response {
    call(api, bearer(&headers), req).await
}

macro_rules! body_route {
    ($name:ident, $op:literal) => {
        async fn $name(State(api): S, headers: HeaderMap, Json(b): Body) -> Response {
            rpc_with(api, &headers, $op, object(b), &[]).await
        }
    };
    ($name:ident, $op:literal, $field:literal) => {
        async fn $name(State(api): S, headers: HeaderMap, Json(b): Body) -> Response {
            rpc_with(api, &headers, $op, Map::new(), &[($field, b)]).await
        }
    };
}

macro_rules! bare_route {
    ($name:ident, $req:expr) => {
        async fn $name(State(api): S, headers: HeaderMap) -> Response {
            call(api, bearer(&headers), $req).await
        }
    };
}

body_route!(validate_spec, "validate_spec", "spec");
body_route!(upload_spec, "upload_spec", "spec");
body_route!(upload_calibration, "upload_calibration", "calibration");
body_route!(plant_control, "plant_control");
body_route!(setpoint, "setpoint");
body_route!(inject_fault, "inject_fault", "fault");
body_route!(run_sim, "run_sim");
body_route!(replicate, "replicate");
body_route!(upsert_rule, "upsert_rule");
body_route!(verify_export, "ledger_verify_export");
body_route!(verify, "verify");

bare_route!(load_object, ApiRequest::LoadObject);
bare_route!(clear_faults, ApiRequest::ClearFaults);
bare_route!(plant_status, ApiRequest::PlantStatus);
bare_route!(list_runs, ApiRequest::ListRuns);
bare_route!(list_rules, ApiRequest::ListRules);
bare_route!(ledger_verify, ApiRequest::LedgerVerify);
bare_route!(ledger_export, ApiRequest::LedgerExport);

async fn tune(
    State(api): S,
    headers: HeaderMap,
    Path(id): Path<String>,
    Json(b): Body,
) -> Response {
    rpc_with(
        api,
        &headers,
        "tune",
        Map::new(),
        &[("run_id", Value::String(id)), ("config", b)],
    )
    .await
}

async fn get_run(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    call(api, bearer(&headers), ApiRequest::GetRun { run_id: id }).await
}

async fn run_trace(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    call(api, bearer(&headers), ApiRequest::RunTrace { run_id: id }).await
}

async fn rule_history(State(api): S, headers: HeaderMap, Path(id): Path<String>) -> Response {
    match id.parse() {
        Ok(rule_id) => call(api, bearer(&headers), ApiRequest::RuleHistory { rule_id }).await,
        Err(e) => bad_request(e),
    }
}

async fn ledger_entries(
    State(api): S,
    headers: HeaderMap,
    Query(query): Query<LedgerQuery>,
) -> Response {
    call(api, bearer(&headers), ApiRequest::LedgerQuery { query }).await
}

#[derive(Deserialize)]
struct BlocksQuery {
    #[serde(default)]
    from: u64,
    limit: Option<u64>,
}

async fn ledger_blocks(
    State(api): S,
    headers: HeaderMap,
    Query(q): Query<BlocksQuery>,
) -> Response {
    call(
        api,
        bearer(&headers),
        ApiRequest::LedgerBlocks {
            from: q.from,
            limit: q.limit,
        },
    )
    .await
}

#[derive(Deserialize)]
struct PageQuery {
    #[serde(default)]
    after: u64,
    limit: Option<usize>,
}

async fn telemetry(State(api): S, headers: HeaderMap, Query(q): Query<PageQuery>) -> Response {
    call(
        api,
        bearer(&headers),
        ApiRequest::Telemetry {
            after: q.after,
            limit: q.limit,
        },
    )
    .await
}

async fn incidents(State(api): S, headers: HeaderMap, Query(q): Query<PageQuery>) -> Response {
    call(
        api,
        bearer(&headers),
        ApiRequest::Incidents {
            after: q.after,
            limit: q.limit,
        },
    )
    .await
}

/// Stream subscription. Browsers cannot set headers on a websocket, so the
/// session may also be passed as `?session=`.
#[derive(Deserialize)]
struct StreamQuery {
    session: Option<String>,
    #[serde(default)]
    telemetry_after: u64,
    #[serde(default)]
    incidents_after: u64,
}

/// One message on the stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamMessage {
    Telemetry(TelemetryMessage),
    Incident(IncidentMessage),
    /// Telemetry between the subscriber's cursor and `first_available` was
    /// dropped.
    Gap {
        stream: String,
        resumed_at: u64,
    },
    Response {
        body: ApiResponse,
    },
    Error {
        error: String,
        message: String,
    },
}

/// Cursors of one subscriber.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cursor {
    pub telemetry: u64,
    pub incidents: u64,
}

/// Next batch for a subscriber: incidents first, then telemetry, with a
/// gap marker when telemetry was dropped. Advances the cursor.
pub fn next_batch(
    api: &Api,
    session: &str,
    cursor: &mut Cursor,
) -> Result<Vec<StreamMessage>, ApiError> {
    let mut out = Vec::new();
    let inc: StreamPage<IncidentMessage> = match api.handle(
        session,
        ApiRequest::Incidents {
            after: cursor.incidents,
            limit: Some(STREAM_BATCH),
        },
    )? {
        ApiResponse::Incidents(p) => p,
        _ => unreachable!("incidents request answers with incidents"),
    };
    for m in inc.messages {
        cursor.incidents = m.seq;
        out.push(StreamMessage::Incident(m));
    }
    let tel = match api.handle(
        session,
        ApiRequest::Telemetry {
            after: cursor.telemetry,
            limit: Some(STREAM_BATCH),
        },
    )? {
        ApiResponse::Telemetry(p) => p,
        _ => unreachable!("telemetry request answers with telemetry"),
    };
    if tel.first_available > cursor.telemetry + 1 && tel.latest > cursor.telemetry {
        out.push(StreamMessage::Gap {
            stream: "telemetry".into(),
            resumed_at: tel.first_available,
        });
    }
    for m in tel.messages {
        cursor.telemetry = m.seq;
        out.push(StreamMessage::Telemetry(m));
    }
    Ok(out)
}

async fn stream(
    State(api): S,
    headers: HeaderMap,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let Some(session) = bearer(&headers).or(q.session) else {
        return error_response(ApiError::Unauthenticated);
    };
    if let Err(e) = api.authorize(&session, tts_core::ApiOp::Telemetry) {
        return error_response(e);
    }
    let cursor = Cursor {
        telemetry: q.telemetry_after,
        incidents: q.incidents_after,
    };
    ws.on_upgrade(move |socket| stream_loop(api, session, cursor, socket))
}

async fn send(socket: &mut WebSocket, msg: &StreamMessage) -> bool {
    let text = serde_json::to_string(msg).expect("stream messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn stream_loop(api: Arc<Api>, session: String, mut cursor: Cursor, mut socket: WebSocket) {
    let mut tick = tokio::time::interval(STREAM_POLL);
    loop {
        tokio::select! {
            _ = tick.tick() => {
                match next_batch(&api, &session, &mut cursor) {
                    Ok(batch) => {
                        for m in &batch {
                            if !send(&mut socket, m).await {
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        let _ = send(&mut socket, &StreamMessage::Error { error: e.code().into(), message: e.to_string() }).await;
                        return;
                    }
                }
            }
            incoming = socket.recv() => {
                let Some(Ok(msg)) = incoming else { return };
                let Message::Text(text) = msg else { continue };
                let reply = match serde_json::from_str::<ApiRequest>(&text) {
                    Ok(req) => {
                        let api = api.clone();
                        let session = session.clone();
                        match tokio::task::spawn_blocking(move || api.handle(&session, req)).await {
                            Ok(Ok(body)) => StreamMessage::Response { body },
                            Ok(Err(e)) => StreamMessage::Error { error: e.code().into(), message: e.to_string() },
                            Err(e) => StreamMessage::Error { error: "internal".into(), message: e.to_string() },
                        }
                    }
                    Err(e) => StreamMessage::Error { error: "bad_request".into(), message: e.to_string() },
                };
                if !send(&mut socket, &reply).await {
                    return;
                }
            }
        }
    }
}

pub fn router(api: Arc<Api>) -> Router {
    Router::new()
        .route("/v1/sessions", post(login).delete(logout))
        .route("/v1/rpc", post(rpc))
        .route("/v1/spec/validate", post(validate_spec))
        .route("/v1/spec", put(upload_spec))
        .route("/v1/calibration", put(upload_calibration))
        .route("/v1/plant", get(plant_status))
        .route("/v1/plant/control", post(plant_control))
        .route("/v1/plant/setpoints", post(setpoint))
        .route("/v1/plant/load", post(load_object))
        .route("/v1/plant/faults", post(inject_fault).delete(clear_faults))
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/sim", post(run_sim))
        .route("/v1/runs/replicate", post(replicate))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/trace", get(run_trace))
        .route("/v1/runs/{id}/tune", post(tune))
        .route("/v1/rules", get(list_rules).post(upsert_rule))
        .route("/v1/rules/{id}/history", get(rule_history))
        .route("/v1/ledger/entries", get(ledger_entries))
        .route("/v1/ledger/verify", get(ledger_verify))
        .route("/v1/ledger/export", get(ledger_export))
        .route("/v1/ledger/blocks", get(ledger_blocks))
        .route("/v1/ledger/verify-export", post(verify_export))
        .route("/v1/verify", post(verify))
        .route("/v1/telemetry", get(telemetry))
        .route("/v1/incidents", get(incidents))
        .route("/v1/stream", get(stream))
        .with_state(api)
}

/// Steps the live plant at its configured rate until the process exits.
pub async fn stepper(api: Arc<Api>) {
    loop {
        let hz = api.step_rate_hz();
        tokio::time::sleep(Duration::from_secs_f64(1.0 / hz)).await;
        if let Err(e) = api.tick(1) {
            tracing::error!("live plant step failed: {e}");
        }
    }
}

pub fn serve_blocking(settings: Settings) -> Result<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("TTS_LOG")
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let api = Arc::new(Api::new(
            settings.service,
            settings.spec,
            Arc::new(SystemClock),
        )?);
        tokio::spawn(stepper(api.clone()));
        let listener = tokio::net::TcpListener::bind(&settings.addr).await?;
        tracing::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(api)).await?;
        Ok(())
    })
}
