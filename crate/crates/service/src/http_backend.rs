//! Blocking HTTP client for model backends.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use gaa_core::backend::{
    BackendError, CandidateExtractor, CandidatesRequest, CandidatesResponse, ErrorBody, GenerateRequest,
    GenerateResponse, QaModel, QaRequest, QaResponse, QuestionGenerator,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientOptions {
    pub timeout: Duration,
    /// Attempts after the first one. All backend operations are read-only,
    /// so retrying is safe.
    pub retries: u32,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(100),
            max_in_flight: 8,
        }
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// One model backend addressed by base URL. Serves whichever of the three
/// protocol operations the remote process implements.
pub struct HttpBackend {
    id: String,
    base_url: String,
    agent: ureq::Agent,
    options: ClientOptions,
    limiter: Limiter,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("id", &self.id).field("base_url", &self.base_url).finish()
    }
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, base_url: impl Into<String>, options: ClientOptions) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(options.timeout))
            .http_status_as_error(false)
            .build();
        HttpBackend {
            id: id.into(),
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            agent: ureq::Agent::new_with_config(config),
            options,
            limiter: Limiter { in_flight: Mutex::new(0), freed: Condvar::new(), max: options.max_in_flight.max(1) },
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// True if anything answers HTTP at the base URL.
    pub fn probe(&self) -> bool {
        let _permit = self.limiter.acquire();
        self.agent.get(&self.base_url).call().is_ok()
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let endpoint = format!("{}{path}", self.base_url);
        let _permit = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let last = attempt > self.options.retries;
            let err = match self.agent.post(&endpoint).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp
                            .body_mut()
                            .read_json::<Resp>()
                            .map_err(|e| BackendError::Protocol(format!("{endpoint}: {e}")));
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
                    if status < 500 {
                        return Err(BackendError::Rejected { endpoint, status, message });
                    }
                    format!("HTTP {status}: {message}")
                }
                Err(e) => e.to_string(),
            };
            if last {
                return Err(BackendError::Transport { endpoint, attempts: attempt, message: err });
            }
            tracing::debug!(endpoint = %endpoint, attempt, error = %err, "retrying backend request");
            thread::sleep(self.options.backoff * attempt);
        }
    }
}

impl QuestionGenerator for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.post("/v1/generate", request)
    }
}

impl QaModel for HttpBackend {
    fn answer(&self, request: &QaRequest) -> Result<QaResponse, BackendError> {
        self.post("/v1/qa", request)
    }
}

impl CandidateExtractor for HttpBackend {
    fn candidates(&self, request: &CandidatesRequest) -> Result<CandidatesResponse, BackendError> {
        self.post("/v1/candidates", request)
    }
}
