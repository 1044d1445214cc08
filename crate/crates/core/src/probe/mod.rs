//! Endpoint availability checks with the OAI-PMH `Identify` verb.
//!
//! [`probe_all`] sends one `?verb=Identify` GET per base URL through an
//! injected [`Transport`], spacing requests per host and bounding the number
//! in flight. Each final response is sorted into one of four outcomes by
//! [`classify_response`]; [`summarize_outcomes`] turns a batch of records
//! into success rates and an error distribution per status code.

mod schedule;
mod transport;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{ProbeOutcome, ProbeRecord};

pub use schedule::probe_all;
pub use transport::{
    host_key, Clock, HostGate, HttpResponse, ReqwestTransport, ScriptError, ScriptedResponse,
    ScriptedTransport, SystemClock, Transport, TransportError, VirtualClock,
};

pub const DEFAULT_USER_AGENT: &str = "metacat-identify-probe/0.1";

/// Statuses that are worth asking again after `retry_spacing`.
pub const RETRYABLE_STATUSES: [u16; 4] = [500, 502, 503, 504];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("probe url {0:?} already has a query string; normalize it first")]
    QueryPresent(String),
    #[error("probe url {0:?} has no comparison key: {1}")]
    NotNormalizable(String, String),
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_in_flight: usize,
    pub per_host_delay_ms: u64,
    pub timeout_secs: u64,
    pub retries: u32,
    pub retry_spacing_secs: u64,
    pub user_agent: String,
    pub follow_redirects: u32,
    pub allow_tls: bool,
    pub body_cap_bytes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 64,
            per_host_delay_ms: 1000,
            timeout_secs: 30,
            retries: 2,
            retry_spacing_secs: 3600,
            user_agent: DEFAULT_USER_AGENT.to_string(),
            follow_redirects: 5,
            allow_tls: true,
            body_cap_bytes: 1 << 20,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.max_in_flight == 0 {
            return Err(ProbeError::InvalidConfig(
                "max_in_flight must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn per_host_delay(&self) -> Duration {
        Duration::from_millis(self.per_host_delay_ms)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn retry_spacing(&self) -> Duration {
        Duration::from_secs(self.retry_spacing_secs)
    }
}

pub fn build_identify_url(probe_url: &str) -> Result<String, ProbeError> {
    if probe_url.contains('?') {
        return Err(ProbeError::QueryPresent(probe_url.to_string()));
    }
    Ok(format!("{probe_url}?verb=Identify"))
}

/// Fields of an `Identify` answer; each is optional in practice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentifyFields {
    pub repository_name: Option<String>,
    pub protocol_version: Option<String>,
    pub earliest_datestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub outcome: ProbeOutcome,
    pub identity: IdentifyFields,
}

impl Classification {
    fn of(outcome: ProbeOutcome) -> Self {
        Self {
            outcome,
            identity: IdentifyFields::default(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Name,
    Version,
    Earliest,
}

/// Parses an Identify body. `None` means it is not a usable Identify answer
/// (malformed XML, wrong root, no Identify element, or an OAI-PMH error).
fn parse_identify(body: &[u8]) -> Option<IdentifyFields> {
    let body = body.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(body);
    let mut reader = Reader::from_reader(body);
    reader.config_mut().check_end_names = true;
    let mut buf = Vec::new();
    // local names of open elements
    let mut stack: Vec<Vec<u8>> = Vec::new();
    let mut root_seen = false;
    let mut identify = false;
    let mut protocol_error = false;
    let mut fields = IdentifyFields::default();
    let mut capture: Option<(Field, String)> = None;

    loop {
        let event = reader.read_event_into(&mut buf).ok()?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let name = e.local_name().as_ref().to_vec();
                match stack.len() {
                    0 => {
                        if root_seen || name != b"OAI-PMH" {
                            return None;
                        }
                        root_seen = true;
                    }
                    1 if name == b"Identify" => identify = true,
                    1 if name == b"error" => protocol_error = true,
                    2 if stack[1] == b"Identify" => {
                        let field = match name.as_slice() {
                            b"repositoryName" => Some(Field::Name),
                            b"protocolVersion" => Some(Field::Version),
                            b"earliestDatestamp" => Some(Field::Earliest),
                            _ => None,
                        };
                        if let (Some(f), Event::Start(_)) = (field, &event) {
                            capture = Some((f, String::new()));
                        }
                    }
                    _ => {}
                }
                if matches!(event, Event::Start(_)) {
                    stack.push(name);
                }
            }
            Event::End(_) => {
                stack.pop();
                if stack.len() == 2 {
                    if let Some((field, text)) = capture.take() {
                        let text = text.trim();
                        let value = (!text.is_empty()).then(|| text.to_string());
                        let slot = match field {
                            Field::Name => &mut fields.repository_name,
                            Field::Version => &mut fields.protocol_version,
                            Field::Earliest => &mut fields.earliest_datestamp,
                        };
                        if slot.is_none() {
                            *slot = value;
                        }
                    }
                }
            }
            Event::Text(t) => {
                let text = t.unescape().ok()?;
                if let Some((_, buf)) = capture.as_mut() {
                    buf.push_str(&text);
                } else if stack.is_empty() && !text.trim().is_empty() {
                    return None;
                }
            }
            Event::CData(c) => {
                if let Some((_, buf)) = capture.as_mut() {
                    buf.push_str(&String::from_utf8_lossy(&c));
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    (root_seen && stack.is_empty() && identify && !protocol_error).then_some(fields)
}

/// Sorts a received response into an outcome. Total: every input classifies.
pub fn classify_response(http_status: u16, body: &[u8]) -> Classification {
    if http_status != 200 {
        return Classification::of(ProbeOutcome::HttpError);
    }
    match parse_identify(body) {
        Some(identity) => Classification {
            outcome: ProbeOutcome::Reachable,
            identity,
        },
        None => Classification::of(ProbeOutcome::WrongSuccess),
    }
}

/// Error category used in the per-code distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorBucket {
    Status(u16),
    WrongSuccess,
    Transport,
}

impl ErrorBucket {
    pub fn of(record: &ProbeRecord) -> Option<Self> {
        match record.outcome {
            ProbeOutcome::Reachable => None,
            ProbeOutcome::WrongSuccess => Some(Self::WrongSuccess),
            ProbeOutcome::HttpError => Some(Self::Status(record.http_status.unwrap_or(0))),
            ProbeOutcome::TransportError => Some(Self::Transport),
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ErrorBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Status(code) => write!(f, "{code}"),
            Self::WrongSuccess => f.write_str("wrong_success_200"),
            Self::Transport => f.write_str("transport"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OutcomeSummary {
    pub total: u64,
    pub success_count: u64,
    pub error_count: u64,
    pub error_counts: BTreeMap<ErrorBucket, u64>,
}

impl OutcomeSummary {
    pub fn success_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.success_count as f64 / self.total as f64
        }
    }

    pub fn error_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.error_count as f64 / self.total as f64
        }
    }

    /// Share of each bucket among errors, unrounded.
    pub fn error_distribution(&self) -> Vec<(ErrorBucket, f64)> {
        self.error_counts
            .iter()
            .map(|(b, &n)| (*b, n as f64 / self.error_count as f64))
            .collect()
    }
}

pub fn summarize_outcomes(records: &[ProbeRecord]) -> OutcomeSummary {
    let mut summary = OutcomeSummary {
        total: records.len() as u64,
        ..Default::default()
    };
    for r in records {
        match ErrorBucket::of(r) {
            None => summary.success_count += 1,
            Some(bucket) => {
                summary.error_count += 1;
                *summary.error_counts.entry(bucket).or_default() += 1;
            }
        }
    }
    summary
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::catalog::NormalizedUrl;

    pub const IDENTIFY_DEMO: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<OAI-PMH xmlns="http://www.openarchives.org/OAI/2.0/"
         xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance"
         xsi:schemaLocation="http://www.openarchives.org/OAI/2.0/ http://www.openarchives.org/OAI/2.0/OAI-PMH.xsd">
  <responseDate>2017-01-15T10:00:00Z</responseDate>
  <request verb="Identify">http://demo.org/oai</request>
  <Identify>
    <repositoryName>Demo</repositoryName>
    <baseURL>http://demo.org/oai</baseURL>
    <protocolVersion>2.0</protocolVersion>
    <adminEmail>admin@demo.org</adminEmail>
    <earliestDatestamp>2005-01-01</earliestDatestamp>
    <deletedRecord>no</deletedRecord>
    <granularity>YYYY-MM-DD</granularity>
  </Identify>
</OAI-PMH>"#;

    pub const HTML_PAGE: &str = "<!DOCTYPE html><html><head><title>Repository moved</title>\
<meta charset=\"utf-8\"></head><body><p>Welcome<br>to our new site</p></body></html>";

    #[test]
    fn identify_url() {
        assert_eq!(
            build_identify_url("http://a.org/oai").unwrap(),
            "http://a.org/oai?verb=Identify"
        );
        assert_eq!(
            build_identify_url("https://b.edu/cgi/oai2").unwrap(),
            "https://b.edu/cgi/oai2?verb=Identify"
        );
        assert!(matches!(
            build_identify_url("http://c.net/oai?x=1"),
            Err(ProbeError::QueryPresent(_))
        ));
    }

    #[test]
    fn classify_valid_identify() {
        let c = classify_response(200, IDENTIFY_DEMO.as_bytes());
        assert_eq!(c.outcome, ProbeOutcome::Reachable);
        assert_eq!(c.identity.repository_name.as_deref(), Some("Demo"));
        assert_eq!(c.identity.protocol_version.as_deref(), Some("2.0"));
        assert_eq!(c.identity.earliest_datestamp.as_deref(), Some("2005-01-01"));
    }

    #[test]
    fn classify_html_and_errors() {
        assert_eq!(
            classify_response(200, HTML_PAGE.as_bytes()).outcome,
            ProbeOutcome::WrongSuccess
        );
        assert_eq!(
            classify_response(404, b"anything").outcome,
            ProbeOutcome::HttpError
        );
        assert_eq!(
            classify_response(500, IDENTIFY_DEMO.as_bytes()).outcome,
            ProbeOutcome::HttpError
        );
        assert_eq!(
            classify_response(200, b"").outcome,
            ProbeOutcome::WrongSuccess
        );
    }

    #[test]
    fn classify_protocol_error_is_wrong_success() {
        let body = r#"<OAI-PMH xmlns="http://www.openarchives.org/OAI/2.0/">
<responseDate>2017-01-01T00:00:00Z</responseDate><request>http://x.org/oai</request>
<error code="badVerb">Illegal OAI verb</error></OAI-PMH>"#;
        assert_eq!(
            classify_response(200, body.as_bytes()).outcome,
            ProbeOutcome::WrongSuccess
        );
    }

    #[test]
    fn classify_prefixed_namespace_and_missing_fields() {
        let body = r#"<oai:OAI-PMH xmlns:oai="http://www.openarchives.org/OAI/2.0/">
<oai:Identify><oai:repositoryName> Spaced &amp; Escaped </oai:repositoryName></oai:Identify></oai:OAI-PMH>"#;
        let c = classify_response(200, body.as_bytes());
        assert_eq!(c.outcome, ProbeOutcome::Reachable);
        assert_eq!(
            c.identity.repository_name.as_deref(),
            Some("Spaced & Escaped")
        );
        assert_eq!(c.identity.protocol_version, None);
        assert_eq!(c.identity.earliest_datestamp, None);
    }

    #[test]
    fn classify_truncated_and_mismatched() {
        let truncated = &IDENTIFY_DEMO.as_bytes()[..IDENTIFY_DEMO.len() - 12];
        assert_eq!(
            classify_response(200, truncated).outcome,
            ProbeOutcome::WrongSuccess
        );
        let nested_wrong = b"<OAI-PMH><ListRecords><Identify/></ListRecords></OAI-PMH>";
        assert_eq!(
            classify_response(200, nested_wrong).outcome,
            ProbeOutcome::WrongSuccess
        );
        let bom = [b"\xEF\xBB\xBF".as_slice(), IDENTIFY_DEMO.as_bytes()].concat();
        assert_eq!(
            classify_response(200, &bom).outcome,
            ProbeOutcome::Reachable
        );
    }

    pub fn record(outcome: ProbeOutcome, status: Option<u16>) -> ProbeRecord {
        ProbeRecord {
            probe_url: "http://a.org/oai".into(),
            normalized: NormalizedUrl::parse("a.org/oai").unwrap(),
            outcome,
            http_status: status,
            repository_name: None,
            protocol_version: None,
            earliest_datestamp: None,
            attempts: 1,
            completed_at: chrono::DateTime::UNIX_EPOCH,
            detail: None,
        }
    }

    #[test]
    fn summary_all_reachable_and_all_transport() {
        let ok: Vec<_> = (0..4)
            .map(|_| record(ProbeOutcome::Reachable, Some(200)))
            .collect();
        let s = summarize_outcomes(&ok);
        assert_eq!(s.success_fraction(), 1.0);
        assert!(s.error_distribution().is_empty());

        let bad: Vec<_> = (0..3)
            .map(|_| record(ProbeOutcome::TransportError, None))
            .collect();
        let s = summarize_outcomes(&bad);
        assert_eq!(s.error_distribution(), vec![(ErrorBucket::Transport, 1.0)]);
        assert_eq!(s.success_fraction() + s.error_fraction(), 1.0);
        assert_eq!(summarize_outcomes(&[]).success_fraction(), 0.0);
    }
}
