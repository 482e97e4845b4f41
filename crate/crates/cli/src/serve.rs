use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clap::Args;
use serde_json::json;
use uspilot_core::planner::{PlanError, PlanRequest, Planner};

use crate::backend;
use crate::config::AppConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub host: Option<String>,
    /// Port to listen on; 0 picks a free one.
    #[arg(long)]
    pub port: Option<u16>,
}

async fn healthz() -> &'static str {
    "ok"
}

async fn plan(State(planner): State<Arc<Planner>>, Json(request): Json<PlanRequest>) -> Response {
    // Planning may block on HTTP backends; keep it off the async workers.
    let outcome = tokio::task::spawn_blocking(move || planner.plan(&request)).await;
    match outcome {
        Ok(Ok(result)) => Json(result).into_response(),
        Ok(Err(e)) => {
            let status = match &e {
                PlanError::EmptyInstruction => StatusCode::BAD_REQUEST,
                e if e.is_backend() => StatusCode::BAD_GATEWAY,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (status, Json(json!({"error": e.to_string()}))).into_response()
        }
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))).into_response(),
    }
}

pub fn app(planner: Arc<Planner>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/plan", post(plan))
        .with_state(planner)
}

pub fn serve_cmd(cfg: &AppConfig, args: &ServeArgs) -> CliResult<()> {
    let backends = backend::backends(cfg)?;
    let planner = Arc::new(backend::planner(cfg, &backends)?);
    let host = args.host.clone().unwrap_or_else(|| cfg.serve.host.clone());
    let port = args.port.unwrap_or(cfg.serve.port);
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::config)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AddrInUse => CliError::PortBusy(format!("{host}:{port}")),
                _ => CliError::Config(format!("cannot bind {host}:{port}: {e}")),
            })?;
        let addr = listener.local_addr().map_err(CliError::config)?;
        println!("listening on http://{addr}");
        tracing::info!(%addr, "serving");
        axum::serve(listener, app(planner))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::config)
    })
}
