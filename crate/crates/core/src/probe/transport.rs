use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use thiserror::Error;
use tokio::time::Instant;

/// A received HTTP response.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("timed out")]
    Timeout,
    #[error("tls: {0}")]
    Tls(String),
    #[error("invalid url: {0}")]
    InvalidUrl(String),
    #[error("{0}")]
    Other(String),
}

/// A single HTTP GET, with no redirect handling. Implementations must not
/// follow redirects themselves; callers decide how many hops to take.
#[allow(async_fn_in_trait)]
pub trait Transport {
    async fn get(&self, url: &str, timeout: Duration) -> Result<HttpResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    async fn get(&self, url: &str, timeout: Duration) -> Result<HttpResponse, TransportError> {
        (**self).get(url, timeout).await
    }
}

/// Source of UTC timestamps for records.
pub trait Clock {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Wall time derived from tokio's clock, anchored at a fixed UTC instant.
/// Under a paused runtime this advances only as virtual time does.
#[derive(Debug, Clone, Copy)]
pub struct VirtualClock {
    anchor_utc: DateTime<Utc>,
    anchor: Instant,
}

impl VirtualClock {
    pub fn new(anchor_utc: DateTime<Utc>) -> Self {
        Self {
            anchor_utc,
            anchor: Instant::now(),
        }
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> DateTime<Utc> {
        let elapsed = chrono::Duration::from_std(self.anchor.elapsed()).unwrap_or_default();
        self.anchor_utc + elapsed
    }
}

/// Lowercased `host[:port]` of a URL, used as the politeness key.
pub fn host_key(url: &str) -> String {
    if let Ok(parsed) = url::Url::parse(url) {
        if let Some(host) = parsed.host_str() {
            return match parsed.port() {
                Some(p) => format!("{host}:{p}"),
                None => host.to_string(),
            };
        }
    }
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    let end = rest.find(['/', '?', '#']).unwrap_or(rest.len());
    rest[..end].to_ascii_lowercase()
}

/// Spaces out requests to the same host by at least `delay`.
#[derive(Debug)]
pub struct HostGate {
    delay: Duration,
    next_slot: Mutex<HashMap<String, Instant>>,
}

impl HostGate {
    pub fn new(delay: Duration) -> Self {
        Self {
            delay,
            next_slot: Mutex::new(HashMap::new()),
        }
    }

    /// Reserves the next dispatch slot for the URL's host and waits for it.
    pub async fn wait(&self, url: &str) {
        let slot = {
            let mut slots = self.next_slot.lock().expect("host gate poisoned");
            let now = Instant::now();
            let entry = slots.entry(host_key(url)).or_insert(now);
            let slot = (*entry).max(now);
            *entry = slot + self.delay;
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

/// Live HTTP transport: plain GET, no redirects, no cookies, capped body.
pub struct ReqwestTransport {
    client: reqwest::Client,
    body_cap: usize,
    allow_tls: bool,
}

impl ReqwestTransport {
    pub fn new(user_agent: &str, body_cap: usize, allow_tls: bool) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .user_agent(user_agent)
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .map_err(|e| TransportError::Other(e.to_string()))?;
        Ok(Self {
            client,
            body_cap,
            allow_tls,
        })
    }
}

impl Transport for ReqwestTransport {
    async fn get(&self, url: &str, timeout: Duration) -> Result<HttpResponse, TransportError> {
        if !self.allow_tls && url.to_ascii_lowercase().starts_with("https://") {
            return Err(TransportError::Tls("https disabled".into()));
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout
            } else if e.is_connect() {
                TransportError::Connect(e.to_string())
            } else if e.is_builder() {
                TransportError::InvalidUrl(e.to_string())
            } else {
                TransportError::Other(e.to_string())
            }
        };
        let mut resp = self
            .client
            .get(url)
            .timeout(timeout)
            .send()
            .await
            .map_err(classify)?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| {
                (
                    k.as_str().to_string(),
                    String::from_utf8_lossy(v.as_bytes()).into_owned(),
                )
            })
            .collect();
        let mut body = Vec::new();
        while let Some(chunk) = resp.chunk().await.map_err(classify)? {
            let room = self.body_cap.saturating_sub(body.len());
            body.extend_from_slice(&chunk[..chunk.len().min(room)]);
            if body.len() >= self.body_cap {
                break;
            }
        }
        Ok(HttpResponse {
            status,
            headers,
            body,
        })
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing transport script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("scripted response for {0} must set exactly one of status or error")]
    Ambiguous(String),
}

/// One canned reply of a [`ScriptedTransport`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedResponse {
    #[serde(default)]
    pub status: Option<u16>,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default)]
    pub body_file: Option<String>,
    /// Transport failure instead of a response: "timeout", "tls", or any
    /// other text for a refused connection.
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ScriptedResponse {
    pub fn ok(status: u16, body: impl Into<String>) -> Self {
        Self {
            status: Some(status),
            body: Some(body.into()),
            ..Default::default()
        }
    }

    pub fn fail(error: impl Into<String>) -> Self {
        Self {
            error: Some(error.into()),
            ..Default::default()
        }
    }

    pub fn redirect(status: u16, location: impl Into<String>) -> Self {
        Self {
            status: Some(status),
            headers: BTreeMap::from([("Location".to_string(), location.into())]),
            ..Default::default()
        }
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RouteSpec {
    One(ScriptedResponse),
    Many(Vec<ScriptedResponse>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    default: Option<ScriptedResponse>,
    #[serde(default)]
    routes: BTreeMap<String, RouteSpec>,
}

/// Offline transport answering from a fixed script. Each URL walks through
/// its list of responses; the last one repeats. URLs without a route get the
/// default, or a refused connection when there is none.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    routes: HashMap<String, Vec<ScriptedResponse>>,
    default: Option<ScriptedResponse>,
    cursor: Mutex<HashMap<String, usize>>,
}

impl ScriptedTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, url: impl Into<String>, responses: Vec<ScriptedResponse>) -> Self {
        self.routes.insert(url.into(), responses);
        self
    }

    pub fn with_default(mut self, response: ScriptedResponse) -> Self {
        self.default = Some(response);
        self
    }

    /// Loads a JSON script; `body_file` paths resolve against the script's
    /// directory.
    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(text)?;
        let load = |mut r: ScriptedResponse, url: &str| -> Result<ScriptedResponse, ScriptError> {
            if r.status.is_some() == r.error.is_some() {
                return Err(ScriptError::Ambiguous(url.to_string()));
            }
            if let Some(rel) = r.body_file.take() {
                let p = base.join(&rel);
                r.body = Some(
                    std::fs::read_to_string(&p).map_err(|source| ScriptError::Io {
                        path: p.display().to_string(),
                        source,
                    })?,
                );
            }
            Ok(r)
        };
        let mut transport = Self::new();
        if let Some(d) = file.default {
            transport.default = Some(load(d, "<default>")?);
        }
        for (url, spec) in file.routes {
            let list = match spec {
                RouteSpec::One(r) => vec![r],
                RouteSpec::Many(v) => v,
            };
            let list = list
                .into_iter()
                .map(|r| load(r, &url))
                .collect::<Result<Vec<_>, _>>()?;
            transport.routes.insert(url, list);
        }
        Ok(transport)
    }

    fn next_response(&self, url: &str) -> Option<ScriptedResponse> {
        match self.routes.get(url) {
            Some(list) if !list.is_empty() => {
                let mut cursor = self.cursor.lock().expect("script cursor poisoned");
                let i = cursor.entry(url.to_string()).or_insert(0);
                let r = list[(*i).min(list.len() - 1)].clone();
                *i += 1;
                Some(r)
            }
            _ => self.default.clone(),
        }
    }
}

impl Transport for ScriptedTransport {
    async fn get(&self, url: &str, timeout: Duration) -> Result<HttpResponse, TransportError> {
        let Some(r) = self.next_response(url) else {
            return Err(TransportError::Connect("connection refused".into()));
        };
        if r.latency_ms > 0 {
            let latency = Duration::from_millis(r.latency_ms);
            if latency > timeout {
                tokio::time::sleep(timeout).await;
                return Err(TransportError::Timeout);
            }
            tokio::time::sleep(latency).await;
        }
        if let Some(err) = r.error {
            return Err(match err.as_str() {
                "timeout" => TransportError::Timeout,
                "tls" => TransportError::Tls("handshake failed".into()),
                _ => TransportError::Connect(err),
            });
        }
        Ok(HttpResponse {
            status: r.status.unwrap_or(200),
            headers: r.headers.into_iter().collect(),
            body: r.body.unwrap_or_default().into_bytes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_keys() {
        assert_eq!(host_key("http://A.org/oai?verb=Identify"), "a.org");
        assert_eq!(host_key("https://b.edu:8443/x"), "b.edu:8443");
        assert_eq!(host_key("c.net/oai"), "c.net");
    }

    #[tokio::test(start_paused = true)]
    async fn scripted_sequence_repeats_last() {
        let t = ScriptedTransport::new().route(
            "u",
            vec![
                ScriptedResponse::ok(503, ""),
                ScriptedResponse::ok(200, "x"),
            ],
        );
        let d = Duration::from_secs(1);
        assert_eq!(t.get("u", d).await.unwrap().status, 503);
        assert_eq!(t.get("u", d).await.unwrap().status, 200);
        assert_eq!(t.get("u", d).await.unwrap().status, 200);
        assert!(matches!(
            t.get("other", d).await,
            Err(TransportError::Connect(_))
        ));
    }

    #[tokio::test(start_paused = true)]
    async fn scripted_latency_beyond_timeout() {
        let t = ScriptedTransport::new()
            .route("u", vec![ScriptedResponse::ok(200, "").with_latency(5_000)]);
        assert_eq!(
            t.get("u", Duration::from_secs(1)).await,
            Err(TransportError::Timeout)
        );
    }

    #[test]
    fn script_json_requires_status_or_error() {
        let bad = r#"{"routes": {"u": {"body": "x"}}}"#;
        assert!(matches!(
            ScriptedTransport::from_json(bad, Path::new(".")),
            Err(ScriptError::Ambiguous(_))
        ));
        let good = r#"{"default": {"error": "refused"}, "routes": {"u": [{"status": 404}]}}"#;
        assert!(ScriptedTransport::from_json(good, Path::new(".")).is_ok());
    }

    #[tokio::test(start_paused = true)]
    async fn host_gate_spaces_requests() {
        let gate = HostGate::new(Duration::from_millis(500));
        let start = Instant::now();
        gate.wait("http://a.org/1").await;
        gate.wait("http://b.org/1").await;
        assert_eq!(start.elapsed(), Duration::ZERO);
        gate.wait("http://a.org/2").await;
        assert_eq!(start.elapsed(), Duration::from_millis(500));
    }
}
