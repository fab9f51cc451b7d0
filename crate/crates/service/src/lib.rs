//! HTTP service around the annotation platform, plus the HTTP client for
//! model backends and a server that exposes the mock backends.

pub mod api;
pub mod config;
pub mod http_backend;
pub mod mock_server;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::sync::Arc;

use gaa_core::backend::mock::Offline;
use gaa_core::backend::{CandidateExtractor, QaModel, QuestionGenerator};
use gaa_core::clock::SystemClock;
use gaa_core::corpus::{CorpusError, PassageStore};
use gaa_core::events::{read_log, FileSink, LogError};
use gaa_core::platform::{Backends, Platform, PlatformError};
use gaa_core::prompt::{prewarm, PromptCache, PrewarmReport};
use gaa_core::setting::GaaSource;
use thiserror::Error;

pub use api::{router, AppState};
pub use config::{ConfigError, ServiceConfig};
pub use http_backend::{ClientOptions, HttpBackend};
pub use mock_server::{mock_router, MockBackend};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot load passages from {path}: {source}")]
    Corpus { path: String, source: CorpusError },
    #[error("storage error at {path}: {source}")]
    Storage { path: String, source: std::io::Error },
    #[error("cannot read event log: {0}")]
    Log(#[from] LogError),
    #[error("cannot load prompt cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("refusing to prewarm: {0} already holds events, and replay needs the caches they were served from")]
    CachesInUse(String),
    #[error("server error: {0}")]
    Server(std::io::Error),
}

pub fn load_corpus(config: &ServiceConfig) -> Result<PassageStore, ServiceError> {
    let path = config.corpus_path.display().to_string();
    let file = File::open(&config.corpus_path)
        .map_err(|e| ServiceError::Corpus { path: path.clone(), source: CorpusError::Io(e) })?;
    let mut store = PassageStore::new();
    store.ingest(BufReader::new(file)).map_err(|source| ServiceError::Corpus { path, source })?;
    Ok(store)
}

/// HTTP backends named by the config, keyed by a display name.
pub fn http_backends(config: &ServiceConfig) -> (Backends, Vec<(String, Arc<HttpBackend>)>) {
    let options = config.client_options();
    let mut named = Vec::new();
    let mut generators: BTreeMap<GaaSource, Arc<dyn QuestionGenerator>> = BTreeMap::new();
    for gaa in GaaSource::ALL {
        if let Some(url) = config.generator_url(gaa) {
            let b = Arc::new(HttpBackend::new(gaa.as_str(), url, options));
            generators.insert(gaa, b.clone());
            named.push((format!("generator:{}", gaa.as_str()), b));
        }
    }
    let qa: Arc<dyn QaModel> = match &config.qa_url {
        Some(url) => {
            let b = Arc::new(HttpBackend::new("qa", url, options));
            named.push(("qa".to_owned(), b.clone()));
            b
        }
        None => Arc::new(Offline),
    };
    let candidates: Arc<dyn CandidateExtractor> = match &config.candidates_url {
        Some(url) => {
            let b = Arc::new(HttpBackend::new("candidates", url, options));
            named.push(("candidates".to_owned(), b.clone()));
            b
        }
        None => Arc::new(Offline),
    };
    (Backends { generators, qa, candidates }, named)
}

/// Loads the prewarmed caches from the storage directory; a missing file is
/// an empty cache.
pub fn load_caches(config: &ServiceConfig) -> Result<BTreeMap<GaaSource, PromptCache>, ServiceError> {
    let mut caches = BTreeMap::new();
    for gaa in GaaSource::ALL {
        let path = config.cache_path(gaa);
        let cache = match File::open(&path) {
            Ok(f) => PromptCache::load_jsonl(gaa.as_str(), BufReader::new(f))
                .map_err(|e| ServiceError::Cache { path: path.display().to_string(), message: e.to_string() })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => PromptCache::new(gaa.as_str()),
            Err(e) => return Err(ServiceError::Storage { path: path.display().to_string(), source: e }),
        };
        caches.insert(gaa, cache);
    }
    Ok(caches)
}

/// Opens the platform over the configured storage: replays the event log,
/// then appends to it.
pub fn open_platform(config: &ServiceConfig, backends: Backends) -> Result<Platform, ServiceError> {
    config.validate()?;
    std::fs::create_dir_all(&config.storage_dir)
        .map_err(|source| ServiceError::Storage { path: config.storage_dir.display().to_string(), source })?;
    let corpus = load_corpus(config)?;
    let events_path = config.events_path();
    let history = read_log(&events_path)?;
    let sink = FileSink::open(&events_path, config.fsync)
        .map_err(|source| ServiceError::Storage { path: events_path.display().to_string(), source })?;
    let caches = load_caches(config)?;
    let platform = Platform::open(
        config.platform_config()?,
        corpus,
        backends,
        caches,
        Arc::new(SystemClock),
        Box::new(sink),
        &history,
    )?;
    tracing::info!(events = history.len(), "event log replayed");
    Ok(platform)
}

pub fn build_state(config: &ServiceConfig) -> Result<AppState, ServiceError> {
    let (backends, probes) = http_backends(config);
    for (name, b) in &probes {
        if !b.probe() {
            tracing::warn!(backend = %name, url = %b.base_url(), "backend not reachable at startup");
        }
    }
    let platform = open_platform(config, backends)?;
    Ok(AppState { platform: Arc::new(platform), probes: Arc::new(probes) })
}

/// Prewarms one cache per configured generator and writes them to the
/// storage directory.
pub fn prewarm_to_disk(config: &ServiceConfig) -> Result<BTreeMap<GaaSource, PrewarmReport>, ServiceError> {
    config.validate()?;
    let events_path = config.events_path();
    if !read_log(&events_path)?.is_empty() {
        return Err(ServiceError::CachesInUse(events_path.display().to_string()));
    }
    let corpus = load_corpus(config)?;
    let (backends, _) = http_backends(config);
    let params = config.platform_config()?.prompt;
    let mut reports = BTreeMap::new();
    for gaa in GaaSource::ALL {
        let Some(b) = backends.for_source(gaa) else { continue };
        let cache = PromptCache::new(gaa.as_str());
        let mut total = PrewarmReport::default();
        for p in corpus.iter() {
            let r = prewarm(&cache, p, b, params).map_err(PlatformError::from)?;
            total.candidates += r.candidates;
            total.cached += r.cached;
            total.unscored += r.unscored;
            total.failures.extend(r.failures);
        }
        let path = config.cache_path(gaa);
        let write = || -> std::io::Result<()> {
            std::fs::create_dir_all(path.parent().expect("cache path has a parent"))?;
            std::fs::write(&path, cache.to_jsonl())
        };
        write().map_err(|source| ServiceError::Storage { path: path.display().to_string(), source })?;
        reports.insert(gaa, total);
    }
    Ok(reports)
}

/// Runs `app` on `listener` until `shutdown` resolves.
pub async fn run(
    listener: tokio::net::TcpListener,
    app: axum::Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await.map_err(ServiceError::Server)
}

/// Starts the service and blocks until Ctrl-C. The event log is appended
/// and flushed per request, so nothing is lost on shutdown.
pub fn serve(config: &ServiceConfig) -> Result<(), ServiceError> {
    let state = build_state(config)?;
    let addr: SocketAddr = config
        .bind
        .parse()
        .map_err(|e| ServiceError::Config(ConfigError::Invalid(format!("bind address: {e}"))))?;
    let runtime = tokio::runtime::Runtime::new().map_err(ServiceError::Server)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(ServiceError::Server)?;
        tracing::info!(%addr, "listening");
        run(listener, router(state), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

/// Serves one mock backend until Ctrl-C.
pub fn serve_mock(addr: SocketAddr, backend: MockBackend) -> Result<(), ServiceError> {
    let runtime = tokio::runtime::Runtime::new().map_err(ServiceError::Server)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(ServiceError::Server)?;
        tracing::info!(%addr, "mock backend listening");
        run(listener, mock_router(Arc::new(backend)), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}
