//! JSON-over-HTTP transport shared by the external backends.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no reply from {url} within {timeout:?}")]
    Timeout { url: String, timeout: Duration },
    #[error("{url} replied with HTTP {status}: {body}")]
    Status {
        url: String,
        status: u16,
        body: String,
    },
    #[error("invalid reply from {url}: {msg}")]
    InvalidReply { url: String, msg: String },
    #[error("could not build HTTP client: {0}")]
    Client(String),
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct HttpTransport {
    base: String,
    timeout: Duration,
    max_in_flight: usize,
    client: reqwest::blocking::Client,
    slots: Slots,
}

impl HttpTransport {
    /// `endpoint` is a base URL such as `http://127.0.0.1:8080`; a trailing slash is ignored.
    pub fn new(
        endpoint: &str,
        timeout: Duration,
        max_in_flight: usize,
    ) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .map_err(|e| TransportError::Client(e.to_string()))?;
        let base = endpoint.trim_end_matches('/');
        let base = if base.contains("://") {
            base.to_string()
        } else {
            format!("http://{base}")
        };
        Ok(Self {
            base,
            timeout,
            max_in_flight: max_in_flight.max(1),
            client,
            slots: Slots::new(max_in_flight),
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn post_json<Req, Resp>(&self, path: &str, body: &Req) -> Result<Resp, TransportError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{}", self.base, path);
        let _slot = self.slots.acquire();
        let resp = self.client.post(&url).json(body).send().map_err(|e| {
            // An unreachable endpoint is reported the same way as a silent one.
            if e.is_timeout() || e.is_connect() {
                TransportError::Timeout {
                    url: url.clone(),
                    timeout: self.timeout,
                }
            } else {
                TransportError::InvalidReply {
                    url: url.clone(),
                    msg: e.to_string(),
                }
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(TransportError::Status {
                url,
                status: status.as_u16(),
                body,
            });
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout {
                    url: url.clone(),
                    timeout: self.timeout,
                }
            } else {
                TransportError::InvalidReply {
                    url: url.clone(),
                    msg: e.to_string(),
                }
            }
        })?;
        serde_json::from_str(&text).map_err(|e| TransportError::InvalidReply {
            url,
            msg: e.to_string(),
        })
    }
}
