//! HTTP front end: a [`Portal`] over a simulated testbed whose virtual
//! clock follows the wall clock at a configurable speed.

use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use meshbed::portal::{ApiRequest, ApiResponse, Method, Portal, TokenEntry};
use meshbed::scenario::{ScenarioConfig, ScenarioError, Testbed};
use meshbed::store::{Clock, Store, StoreError, SyncPolicy, SystemClock, VirtualClock};
use serde::Deserialize;
use serde_json::json;

pub const DEFAULT_PORT: u16 = 8470;

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    DEFAULT_PORT
}

fn default_speed() -> f64 {
    1.0
}

fn default_tick_ms() -> u64 {
    500
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Scenario file describing the fleet; relative to the service config.
    pub scenario: PathBuf,
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default = "default_port")]
    pub port: u16,
    /// Overrides the scenario's monitor cadence.
    #[serde(default)]
    pub poll_cadence_s: Option<u64>,
    /// Virtual seconds per wall-clock second.
    #[serde(default = "default_speed")]
    pub speed: f64,
    /// Wall-clock interval between scheduler ticks.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    /// Store timestamp at start-up; the current UTC time when absent.
    #[serde(default)]
    pub epoch: Option<u64>,
    /// Append-only log file; the store is in memory when absent.
    #[serde(default)]
    pub store: Option<PathBuf>,
    /// Export stream to preload an in-memory store from.
    #[serde(default)]
    pub import: Option<PathBuf>,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("service config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn read(path: &Path) -> Result<String, ServiceError> {
    std::fs::read_to_string(path).map_err(|source| ServiceError::Io { path: path.into(), source })
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Loads a config file, resolving its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let mut cfg = Self::from_toml(&read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.scenario = base.join(&cfg.scenario);
        cfg.store = cfg.store.map(|p| base.join(p));
        cfg.import = cfg.import.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn addr(&self) -> String {
        format!("{}:{}", self.bind, self.port)
    }
}

pub struct Service {
    portal: Mutex<Portal>,
    started: Instant,
    epoch: u64,
    speed: f64,
    tick: Duration,
}

impl Service {
    pub fn build(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        if !(cfg.speed > 0.0 && cfg.speed.is_finite()) {
            return Err(ServiceError::Config("speed must be positive".into()));
        }
        if cfg.store.is_some() && cfg.import.is_some() {
            return Err(ServiceError::Config("`store` and `import` are mutually exclusive".into()));
        }
        let mut scenario = ScenarioConfig::from_toml(&read(&cfg.scenario)?)?;
        if let Some(c) = cfg.poll_cadence_s {
            scenario.monitor.cadence_s = c;
        }
        let clock = VirtualClock::new(0);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let store = match (&cfg.store, &cfg.import) {
            (Some(p), _) => Store::open(p, shared, SyncPolicy::Always)?,
            (None, Some(p)) => {
                let f = File::open(p).map_err(|source| ServiceError::Io { path: p.clone(), source })?;
                Store::import(BufReader::new(f), shared)?
            }
            (None, None) => Store::in_memory(shared),
        };
        let last = store.get(store.last_id()).map_or(0, |r| r.timestamp);
        scenario.epoch = cfg.epoch.unwrap_or_else(|| SystemClock.now()).max(last);
        let testbed = Testbed::with_store(&scenario, Arc::new(store), clock)?;
        let mut s = Self::new(Portal::new(testbed, cfg.tokens.clone()), cfg.speed);
        s.tick = Duration::from_millis(cfg.tick_ms.max(1));
        Ok(s)
    }

    pub fn new(portal: Portal, speed: f64) -> Self {
        Self {
            epoch: portal.testbed().now(),
            portal: Mutex::new(portal),
            started: Instant::now(),
            speed,
            tick: Duration::from_millis(default_tick_ms()),
        }
    }

    pub fn virtual_now(&self) -> u64 {
        self.epoch + (self.started.elapsed().as_secs_f64() * self.speed) as u64
    }

    /// Brings the testbed up to the current virtual time.
    pub fn tick(&self) {
        let target = self.virtual_now();
        let mut p = self.portal.lock().unwrap();
        if target > p.testbed().now() {
            if let Err(e) = p.advance_to(target) {
                log::error!("scheduler tick to {target} failed: {e}");
            }
        }
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        self.tick();
        let resp = self.portal.lock().unwrap().handle(req);
        log::info!("{} {} -> {}", req.method.as_str(), req.path, resp.status);
        resp
    }
}

async fn dispatch(
    State(svc): State<Arc<Service>>,
    method: HttpMethod,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let method = match method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        HttpMethod::DELETE => Method::Delete,
        m => {
            let body = json!({"error": {"code": "METHOD_NOT_ALLOWED", "message": format!("{m} is not supported")}});
            return (StatusCode::METHOD_NOT_ALLOWED, Json(body)).into_response();
        }
    };
    let Ok(body) = String::from_utf8(body.to_vec()) else {
        let body = json!({"error": {"code": "BAD_REQUEST", "message": "body must be UTF-8"}});
        return (StatusCode::BAD_REQUEST, Json(body)).into_response();
    };
    let target = uri.path_and_query().map_or("/", |p| p.as_str());
    let mut req = ApiRequest::new(method, target);
    req.body = body;
    req.token = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    match tokio::task::spawn_blocking(move || svc.handle(&req)).await {
        Ok(r) => (StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), Json(r.body)).into_response(),
        Err(e) => {
            let body = json!({"error": {"code": "INTERNAL", "message": e.to_string()}});
            (StatusCode::INTERNAL_SERVER_ERROR, Json(body)).into_response()
        }
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new().fallback(dispatch).with_state(svc)
}

/// Serves until `shutdown` resolves, ticking the scheduler in the background.
pub async fn serve(
    svc: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = svc.clone();
    let every = svc.tick;
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(every);
        loop {
            iv.tick().await;
            let s = ticker.clone();
            if tokio::task::spawn_blocking(move || s.tick()).await.is_err() {
                break;
            }
        }
    });
    axum::serve(listener, router(svc)).with_graceful_shutdown(shutdown).await
}

/// Runs the service on its own thread and runtime; returns the bound address.
pub fn spawn(svc: Arc<Service>, addr: &str) -> std::io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = rt.block_on(serve(svc, listener, std::future::pending())) {
            log::error!("service stopped: {e}");
        }
    });
    Ok(local)
}
