//! Blocking JSON-over-HTTP client shared by the remote embedder and the
//! remote generation backend: bearer auth, a cap on in-flight requests, and
//! exponential backoff on transient failures.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request to {url} failed after {attempts} attempts: {last_error}")]
    Exhausted {
        url: String,
        attempts: u32,
        last_error: String,
    },
    #[error("{url} returned HTTP {status}: {body_excerpt}")]
    Api {
        url: String,
        status: u16,
        body_excerpt: String,
    },
    #[error("could not decode response from {url}: {message}")]
    Decode { url: String, message: String },
    #[error("could not build HTTP client: {0}")]
    Client(String),
}

impl TransportError {
    /// Whether the caller may reasonably try again later.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Exhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn attempts(max_attempts: u32) -> Self {
        Self {
            max_attempts: max_attempts.max(1),
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    active: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.released.wait(active).unwrap();
        }
        *active += 1;
        Permit(self)
    }

    pub fn active(&self) -> usize {
        *self.active.lock().unwrap()
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

#[derive(Debug)]
pub struct JsonClient {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
}

impl JsonClient {
    pub fn new(
        timeout: Duration,
        api_key: Option<String>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Client(e.to_string()))?;
        Ok(Self {
            client,
            api_key,
            retry,
            limiter: InFlightLimiter::new(max_in_flight),
        })
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    /// POSTs `body` and decodes the JSON response. Connection failures,
    /// timeouts, 429 and 5xx responses are retried; other statuses fail fast.
    pub fn post_json(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let _permit = self.limiter.acquire();
        let mut last_error = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                let delay = self.retry.delay(attempt - 1);
                debug!("retrying {url} in {delay:?} (attempt {})", attempt + 1);
                thread::sleep(delay);
            }
            let mut request = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| TransportError::Decode {
                            url: url.to_string(),
                            message: e.to_string(),
                        });
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("HTTP {}: {}", status.as_u16(), excerpt(&text));
                        warn!("{url}: {last_error}");
                        continue;
                    }
                    return Err(TransportError::Api {
                        url: url.to_string(),
                        status: status.as_u16(),
                        body_excerpt: excerpt(&text),
                    });
                }
                Err(e) => {
                    last_error = e.to_string();
                    warn!("{url}: {last_error}");
                }
            }
        }
        Err(TransportError::Exhausted {
            url: url.to_string(),
            attempts: self.retry.max_attempts,
            last_error,
        })
    }
}

#[cfg(test)]
pub(crate) mod test_server {
    //! Minimal scripted HTTP server for client tests.
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    pub struct Scripted {
        pub url: String,
        pub requests: Arc<Mutex<Vec<String>>>,
    }

    /// Serves the given `(status, body)` responses in order, one per connection.
    pub fn serve(responses: Vec<(u16, String)>) -> Scripted {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    head.push_str(&line);
                }
                let mut payload = vec![0u8; content_length];
                reader.read_exact(&mut payload).ok();
                seen.lock()
                    .unwrap()
                    .push(format!("{head}\n{}", String::from_utf8_lossy(&payload)));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).ok();
            }
        });
        Scripted { url, requests }
    }

    /// A URL on which nothing listens.
    pub fn dead_url() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        format!("http://{addr}/v1/endpoint")
    }
}

#[cfg(test)]
mod tests {
    use super::test_server::{dead_url, serve};
    use super::*;
    use serde_json::json;
    use std::sync::Arc;

    fn fast(attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: attempts,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
        assert_eq!(p.delay(40), Duration::from_millis(350));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let server = serve(vec![(503, "busy".into()), (200, r#"{"ok":true}"#.into())]);
        let client = JsonClient::new(Duration::from_secs(5), Some("k".into()), fast(3), 4).unwrap();
        let v = client.post_json(&server.url, &json!({"x": 1})).unwrap();
        assert_eq!(v, json!({"ok": true}));
        let reqs = server.requests.lock().unwrap();
        assert_eq!(reqs.len(), 2);
        assert!(reqs[0]
            .to_ascii_lowercase()
            .contains("authorization: bearer k"));
        assert!(reqs[0].contains(r#"{"x":1}"#));
    }

    #[test]
    fn client_errors_fail_fast_with_excerpt() {
        let server = serve(vec![(400, "bad request body".into())]);
        let client = JsonClient::new(Duration::from_secs(5), None, fast(3), 4).unwrap();
        match client.post_json(&server.url, &json!({})) {
            Err(TransportError::Api {
                status: 400,
                body_excerpt,
                ..
            }) => assert_eq!(body_excerpt, "bad request body"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(server.requests.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_endpoint_exhausts_attempts() {
        let client = JsonClient::new(Duration::from_secs(2), None, fast(3), 4).unwrap();
        let err = client.post_json(&dead_url(), &json!({})).unwrap_err();
        assert!(
            matches!(err, TransportError::Exhausted { attempts: 3, .. }),
            "{err}"
        );
        assert!(err.is_retryable());
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(InFlightLimiter::new(2));
        let peak = Arc::new(Mutex::new(0usize));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let limiter = limiter.clone();
                let peak = peak.clone();
                thread::spawn(move || {
                    let _p = limiter.acquire();
                    let now = limiter.active();
                    let mut m = peak.lock().unwrap();
                    *m = (*m).max(now);
                    drop(m);
                    thread::sleep(Duration::from_millis(5));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(*peak.lock().unwrap() <= 2);
        assert_eq!(limiter.active(), 0);
    }
}
