//! Blocking JSON-over-HTTP with bounded retries and an in-flight cap.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 250,
            max_delay_ms: 10_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubling, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Counting semaphore bounding concurrent requests to one endpoint.
#[derive(Debug, Clone)]
pub struct InflightLimiter {
    inner: Arc<(Mutex<usize>, Condvar)>,
    limit: usize,
}

impl InflightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            inner: Arc::new((Mutex::new(0), Condvar::new())),
            limit: limit.max(1),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let (lock, cvar) = &*self.inner;
        let mut busy = lock.lock().expect("limiter poisoned");
        while *busy >= self.limit {
            busy = cvar.wait(busy).expect("limiter poisoned");
        }
        *busy += 1;
        InflightGuard { limiter: self }
    }
}

pub struct InflightGuard<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.limiter.inner;
        if let Ok(mut busy) = lock.lock() {
            *busy -= 1;
            cvar.notify_one();
        }
    }
}

/// Response body and the number of attempts it took.
#[derive(Debug)]
pub struct JsonResponse {
    pub body: String,
    pub attempts: u32,
}

pub struct JsonClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
    limiter: InflightLimiter,
}

impl JsonClient {
    pub fn new(retry: RetryPolicy, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(retry.timeout_secs.max(1))))
            .build()
            .into();
        Self {
            agent,
            retry,
            limiter: InflightLimiter::new(max_in_flight),
        }
    }

    /// POST `body` as JSON. Connection failures, 429 and 5xx are retried
    /// with backoff; other non-2xx statuses fail immediately with the body.
    pub fn post<B: Serialize>(&self, url: &str, bearer: Option<&str>, body: &B) -> Result<JsonResponse> {
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            let outcome = {
                let _slot = self.limiter.acquire();
                self.send_once(url, bearer, body)
            };
            match outcome {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return Ok(JsonResponse { body: text, attempts: attempt });
                }
                Ok((status, text)) if status == 429 || status >= 500 => {
                    warn!(url, status, attempt, "retryable HTTP status");
                    last_error = format!("HTTP {status}: {text}");
                }
                Ok((status, text)) => return Err(Error::Http { status, body: text }),
                Err(e) => {
                    warn!(url, attempt, error = %e, "request failed");
                    last_error = e.to_string();
                }
            }
        }
        Err(Error::Transport {
            message: last_error,
            attempts: max_attempts,
        })
    }

    fn send_once<B: Serialize>(&self, url: &str, bearer: Option<&str>, body: &B) -> std::result::Result<(u16, String), ureq::Error> {
        let mut request = self.agent.post(url);
        if let Some(key) = bearer {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string()?;
        Ok((status, text))
    }
}
