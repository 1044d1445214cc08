//! Declarative source manifests and the harvest of registry listings.
//!
//! Every registry is described by a [`SourceManifest`]: one regex extraction
//! over a single document, or a link-follow step over an index page followed
//! by an extraction on each linked page. Manifests are JSON documents holding
//! a top-level list of sources.

use std::path::{Path, PathBuf};
use std::time::Duration;

use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{validate_order, CatalogId, ModelError, RawRepositoryEntry};
use crate::probe::{HostGate, Transport};

/// Concurrent page fetches inside one link-follow step.
pub const FOLLOW_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("source {source_id}: {message}")]
    Invalid { source_id: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    #[error("{location}: {message}")]
    Failed { location: String, message: String },
    #[error("{location}: network access is disabled in fixture mode")]
    NetworkDisabled { location: String },
}

#[derive(Debug, Error)]
pub enum HarvestError {
    #[error("{catalog}: root document unavailable: {source}")]
    RootUnavailable {
        catalog: String,
        #[source]
        source: FetchError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    PatternExtract,
    LinkFollow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    kind: StepKind,
    fetch_url: String,
    pattern: String,
    capture_group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    item_pattern: Option<String>,
}

/// One extraction rule. `pattern` must have the 1-based `capture_group`;
/// the optional `item_pattern` splits a listing into items so that items
/// without a URL still count toward `all_items`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawStep", into = "RawStep")]
pub struct ExtractionStep {
    pub kind: StepKind,
    pub fetch_url: String,
    pub capture_group: usize,
    pattern: Regex,
    item_pattern: Option<Regex>,
}

impl PartialEq for ExtractionStep {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.fetch_url == other.fetch_url
            && self.capture_group == other.capture_group
            && self.pattern.as_str() == other.pattern.as_str()
            && self.item_pattern.as_ref().map(Regex::as_str)
                == other.item_pattern.as_ref().map(Regex::as_str)
    }
}

impl TryFrom<RawStep> for ExtractionStep {
    type Error = String;

    fn try_from(raw: RawStep) -> Result<Self, Self::Error> {
        ExtractionStep::new(
            raw.kind,
            raw.fetch_url,
            &raw.pattern,
            raw.capture_group,
            raw.item_pattern.as_deref(),
        )
    }
}

impl From<ExtractionStep> for RawStep {
    fn from(step: ExtractionStep) -> Self {
        RawStep {
            kind: step.kind,
            fetch_url: step.fetch_url,
            pattern: step.pattern.as_str().to_string(),
            capture_group: step.capture_group,
            item_pattern: step.item_pattern.map(|r| r.as_str().to_string()),
        }
    }
}

impl ExtractionStep {
    pub fn new(
        kind: StepKind,
        fetch_url: impl Into<String>,
        pattern: &str,
        capture_group: usize,
        item_pattern: Option<&str>,
    ) -> Result<Self, String> {
        let pattern = Regex::new(pattern).map_err(|e| format!("pattern does not compile: {e}"))?;
        let groups = pattern.captures_len() - 1;
        if capture_group == 0 || capture_group > groups {
            return Err(format!(
                "capture_group {capture_group} does not exist (pattern has {groups} groups)"
            ));
        }
        let item_pattern = item_pattern
            .map(Regex::new)
            .transpose()
            .map_err(|e| format!("item_pattern does not compile: {e}"))?;
        Ok(Self {
            kind,
            fetch_url: fetch_url.into(),
            capture_group,
            pattern,
            item_pattern,
        })
    }

    pub fn pattern(&self) -> &str {
        self.pattern.as_str()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    id: String,
    display_name: String,
    steps: Vec<ExtractionStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSource", into = "RawSource")]
pub struct SourceManifest {
    pub catalog: CatalogId,
    pub steps: Vec<ExtractionStep>,
    pub notes: Option<String>,
}

impl TryFrom<RawSource> for SourceManifest {
    type Error = String;

    fn try_from(raw: RawSource) -> Result<Self, Self::Error> {
        let catalog = CatalogId::new(raw.id, raw.display_name).map_err(|e| e.to_string())?;
        let shape_ok = match raw.steps.as_slice() {
            [one] => one.kind == StepKind::PatternExtract,
            [first, second] => {
                first.kind == StepKind::LinkFollow && second.kind == StepKind::PatternExtract
            }
            _ => false,
        };
        if !shape_ok {
            return Err(format!(
                "source {catalog}: steps must be [PatternExtract] or [LinkFollow, PatternExtract]"
            ));
        }
        Ok(Self {
            catalog,
            steps: raw.steps,
            notes: raw.notes,
        })
    }
}

impl From<SourceManifest> for RawSource {
    fn from(m: SourceManifest) -> Self {
        RawSource {
            id: m.catalog.id().to_string(),
            display_name: m.catalog.display_name().to_string(),
            steps: m.steps,
            notes: m.notes,
        }
    }
}

/// Parses and validates a manifest document.
pub fn parse_manifest(text: &str) -> Result<Vec<SourceManifest>, ManifestError> {
    let sources: Vec<SourceManifest> =
        serde_json::from_str(text).map_err(|e| ManifestError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    let order: Vec<CatalogId> = sources.iter().map(|s| s.catalog.clone()).collect();
    validate_order(&order)?;
    Ok(sources)
}

pub fn manifest_to_json(sources: &[SourceManifest]) -> String {
    let mut text = serde_json::to_string_pretty(sources).expect("manifest serializes");
    text.push('\n');
    text
}

/// Captured URLs of every non-overlapping match, in document order, trimmed,
/// empty captures dropped.
pub fn extract_entries(document: &str, step: &ExtractionStep) -> Vec<String> {
    step.pattern
        .captures_iter(document)
        .filter_map(|c| c.get(step.capture_group))
        .map(|m| m.as_str().trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Extraction that also counts listing items. Each item counts once, or once
/// per URL when it carries several; without an item pattern every URL is an
/// item.
pub fn extract_items(document: &str, step: &ExtractionStep) -> (Vec<String>, u64) {
    match &step.item_pattern {
        None => {
            let urls = extract_entries(document, step);
            let n = urls.len() as u64;
            (urls, n)
        }
        Some(items) => {
            let mut urls = Vec::new();
            let mut count = 0u64;
            for item in items.find_iter(document) {
                let found = extract_entries(item.as_str(), step);
                count += found.len().max(1) as u64;
                urls.extend(found);
            }
            (urls, count)
        }
    }
}

/// Retrieves documents named by `fetch_url`s and followed links.
#[allow(async_fn_in_trait)]
pub trait Fetcher {
    async fn fetch(&self, location: &str) -> Result<String, FetchError>;
}

impl<F: Fetcher + ?Sized> Fetcher for &F {
    async fn fetch(&self, location: &str) -> Result<String, FetchError> {
        (**self).fetch(location).await
    }
}

/// Resolves `file:<relative path>` locations against a fixtures directory and
/// refuses everything else.
#[derive(Debug, Clone)]
pub struct FixtureFetcher {
    root: PathBuf,
}

impl FixtureFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl Fetcher for FixtureFetcher {
    async fn fetch(&self, location: &str) -> Result<String, FetchError> {
        let Some(rel) = location.strip_prefix("file:") else {
            return Err(FetchError::NetworkDisabled {
                location: location.to_string(),
            });
        };
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| FetchError::Failed {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Live fetcher over a [`Transport`]: follows redirects, requires a 200, and
/// spaces requests per host. `file:` locations go to the optional fixtures
/// directory, which is how pre-rendered pages are supplied.
pub struct HttpFetcher<T> {
    transport: T,
    gate: HostGate,
    timeout: Duration,
    max_redirects: u32,
    fixtures: Option<FixtureFetcher>,
}

impl<T: Transport> HttpFetcher<T> {
    pub fn new(
        transport: T,
        per_host_delay: Duration,
        timeout: Duration,
        max_redirects: u32,
    ) -> Self {
        Self {
            transport,
            gate: HostGate::new(per_host_delay),
            timeout,
            max_redirects,
            fixtures: None,
        }
    }

    pub fn with_fixtures(mut self, fixtures: FixtureFetcher) -> Self {
        self.fixtures = Some(fixtures);
        self
    }
}

impl<T: Transport> Fetcher for HttpFetcher<T> {
    async fn fetch(&self, location: &str) -> Result<String, FetchError> {
        if location.starts_with("file:") {
            return match &self.fixtures {
                Some(f) => f.fetch(location).await,
                None => Err(FetchError::Failed {
                    location: location.to_string(),
                    message: "no fixtures directory configured".into(),
                }),
            };
        }
        let fail = |message: String| FetchError::Failed {
            location: location.to_string(),
            message,
        };
        let mut current = location.to_string();
        for _ in 0..=self.max_redirects {
            self.gate.wait(&current).await;
            let resp = self
                .transport
                .get(&current, self.timeout)
                .await
                .map_err(|e| fail(e.to_string()))?;
            match resp.status {
                200 => return Ok(String::from_utf8_lossy(&resp.body).into_owned()),
                301 | 302 | 303 | 307 | 308 => {
                    let next = resp
                        .header("location")
                        .and_then(|l| url::Url::parse(&current).ok()?.join(l).ok())
                        .ok_or_else(|| fail("redirect without usable location".into()))?;
                    current = next.into();
                }
                other => return Err(fail(format!("http status {other}"))),
            }
        }
        Err(fail("too many redirects".into()))
    }
}

/// Resolves a link found on `base`'s page. Absolute and `file:` links pass
/// through; relative links on a `file:` page resolve next to that file.
pub fn resolve_link(base: &str, link: &str) -> String {
    if link.contains("://") || link.starts_with("file:") {
        return link.to_string();
    }
    if let Some(path) = base.strip_prefix("file:") {
        let dir = Path::new(path).parent().unwrap_or(Path::new(""));
        return format!("file:{}", dir.join(link).to_string_lossy());
    }
    match url::Url::parse(base).and_then(|b| b.join(link)) {
        Ok(u) => u.into(),
        Err(_) => link.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FollowResult {
    pub bodies: Vec<String>,
    pub failures: usize,
}

/// Fetches every page linked from `document`, in link order. A page that
/// cannot be fetched becomes an empty body and is counted as a failure.
pub async fn follow_links<F: Fetcher>(
    document: &str,
    step: &ExtractionStep,
    fetcher: &F,
) -> FollowResult {
    let links: Vec<String> = extract_entries(document, step)
        .into_iter()
        .map(|l| resolve_link(&step.fetch_url, &l))
        .collect();
    let fetched: Vec<Result<String, FetchError>> = stream::iter(links.iter())
        .map(|l| fetcher.fetch(l))
        .buffered(FOLLOW_CONCURRENCY)
        .collect()
        .await;
    let mut result = FollowResult::default();
    for r in fetched {
        match r {
            Ok(body) => result.bodies.push(body),
            Err(e) => {
                tracing::warn!(error = %e, "linked page unavailable");
                result.failures += 1;
                result.bodies.push(String::new());
            }
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Harvest {
    pub entries: Vec<RawRepositoryEntry>,
    pub all_items: u64,
    pub link_failures: usize,
}

/// Runs one manifest against a fetcher.
pub async fn harvest_catalog<F: Fetcher>(
    manifest: &SourceManifest,
    fetcher: &F,
) -> Result<Harvest, HarvestError> {
    let first = &manifest.steps[0];
    let root =
        fetcher
            .fetch(&first.fetch_url)
            .await
            .map_err(|source| HarvestError::RootUnavailable {
                catalog: manifest.catalog.id().to_string(),
                source,
            })?;

    let (urls, all_items, link_failures) = match manifest.steps.as_slice() {
        [single] => {
            let (urls, items) = extract_items(&root, single);
            (urls, items, 0)
        }
        [follow, extract] => {
            let pages = follow_links(&root, follow, fetcher).await;
            let mut urls = Vec::new();
            let mut items = 0u64;
            for body in &pages.bodies {
                let found = extract_entries(body, extract);
                items += found.len().max(1) as u64;
                urls.extend(found);
            }
            (urls, items, pages.failures)
        }
        _ => unreachable!("manifest shape validated at load"),
    };

    let entries = urls
        .into_iter()
        .map(|raw_url| RawRepositoryEntry {
            source: manifest.catalog.clone(),
            raw_url,
            name: None,
        })
        .collect();
    Ok(Harvest {
        entries,
        all_items,
        link_failures,
    })
}
