//! Chat-completions backend over blocking HTTP.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, Role};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: String,
    /// Attempts per call on transport errors, 429 and 5xx.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    /// `0` disables rate limiting.
    pub requests_per_minute: u32,
}

impl HttpConfig {
    /// Reads the bearer token from `env_var`.
    pub fn from_env(base_url: &str, env_var: &str) -> Result<Self, BackendError> {
        let api_key = std::env::var(env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| BackendError::Config(format!("environment variable {env_var} is not set")))?;
        Ok(HttpConfig {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            max_attempts: 4,
            initial_backoff: Duration::from_millis(500),
            requests_per_minute: 0,
        })
    }
}

/// Token bucket holding at most one minute's worth of requests.
struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        RateLimiter {
            per_minute: per_minute as f64,
            state: Mutex::new((per_minute as f64, Instant::now())),
        }
    }

    fn acquire(&self) {
        if self.per_minute <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_minute / 60.0;
                state.0 = (state.0 + refill).min(self.per_minute);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) * 60.0 / self.per_minute)
            };
            std::thread::sleep(wait);
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    recorder: Option<Mutex<File>>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            limiter: RateLimiter::new(config.requests_per_minute),
            config,
            client,
            recorder: None,
        })
    }

    /// Appends one JSON line per completed call. Each line carries
    /// `report_id`, `turn`, `attempt` and `answer`, so the file doubles as
    /// a mock fixture, plus the raw request and response bodies.
    pub fn record_to(mut self, path: &Path) -> std::io::Result<Self> {
        self.recorder = Some(Mutex::new(File::create(path)?));
        Ok(self)
    }

    fn body(request: &ChatRequest<'_>) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        json!({
            "model": request.params.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "max_tokens": request.params.max_tokens,
        })
    }

    fn post_once(&self, body: &Value, timeout: Duration) -> Result<Value, BackendError> {
        self.limiter.acquire();
        let response = self
            .client
            .post(format!("{}/chat/completions", self.config.base_url))
            .bearer_auth(&self.config.api_key)
            .timeout(timeout)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))
    }
}

fn retryable(error: &BackendError) -> bool {
    match error {
        BackendError::Transport(_) => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        let body = Self::body(request);
        let mut backoff = self.config.initial_backoff;
        let mut attempt = 1;
        let response = loop {
            match self.post_once(&body, request.params.timeout) {
                Ok(v) => break v,
                Err(e) if retryable(&e) && attempt < self.config.max_attempts => {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let answer = response["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::BadResponse("missing choices[0].message.content".into()))?
            .to_string();
        if let Some(recorder) = &self.recorder {
            let line = json!({
                "report_id": request.report_id,
                "turn": request.turn,
                "attempt": request.attempt,
                "answer": answer,
                "request": body,
                "response": response,
            });
            let mut file = recorder.lock().unwrap();
            writeln!(file, "{line}").map_err(|e| BackendError::Transport(format!("recording failed: {e}")))?;
        }
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_is_a_config_error() {
        let err = HttpConfig::from_env("http://localhost", "RADPERT_TEST_KEY_THAT_IS_UNSET").unwrap_err();
        assert!(matches!(err, BackendError::Config(_)));
    }

    #[test]
    fn limiter_admits_a_full_bucket_immediately() {
        let limiter = RateLimiter::new(600);
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(100));
    }
}
