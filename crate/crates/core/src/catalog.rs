//! Shared vocabulary: catalog identities, harvested entries, snapshots, probe
//! records and the membership/overlap types the analytics run on.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize;

/// Upper bound on catalogs per run; each catalog owns one bit of a `u32` mask.
pub const MAX_CATALOGS: usize = 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid catalog id {0:?}: expected a non-empty token of [a-z0-9_-]")]
    InvalidCatalogId(String),
    #[error("unknown catalog id {0:?}")]
    UnknownCatalog(String),
    #[error("duplicate catalog id {0:?}")]
    DuplicateCatalog(String),
    #[error("too many catalogs: {0} (at most {MAX_CATALOGS})")]
    TooManyCatalogs(usize),
    #[error("invalid normalized url {0:?}")]
    InvalidNormalizedUrl(String),
    #[error("snapshot for {catalog} violates count chain: {detail}")]
    SnapshotCounts { catalog: String, detail: String },
    #[error("probe record for {url} is inconsistent: {detail}")]
    InconsistentProbe { url: String, detail: String },
    #[error("membership mask {mask:#b} for {key} is invalid for {catalogs} catalogs")]
    InvalidMask {
        key: String,
        mask: u32,
        catalogs: usize,
    },
}

/// Identity of one meta-catalog (registry) taking part in a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawCatalogId")]
pub struct CatalogId {
    id: String,
    display_name: String,
}

#[derive(Deserialize)]
struct RawCatalogId {
    id: String,
    display_name: String,
}

impl TryFrom<RawCatalogId> for CatalogId {
    type Error = ModelError;

    fn try_from(raw: RawCatalogId) -> Result<Self, Self::Error> {
        CatalogId::new(raw.id, raw.display_name)
    }
}

impl CatalogId {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Result<Self, ModelError> {
        let id = id.into();
        let valid = !id.is_empty()
            && id
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if !valid {
            return Err(ModelError::InvalidCatalogId(id));
        }
        Ok(Self {
            id,
            display_name: display_name.into(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn display_name(&self) -> &str {
        &self.display_name
    }
}

impl fmt::Display for CatalogId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// Checks that a catalog order is usable as a bit layout: unique ids and at
/// most [`MAX_CATALOGS`] entries.
pub fn validate_order(order: &[CatalogId]) -> Result<(), ModelError> {
    if order.len() > MAX_CATALOGS {
        return Err(ModelError::TooManyCatalogs(order.len()));
    }
    let mut seen = HashSet::new();
    for c in order {
        if !seen.insert(c.id()) {
            return Err(ModelError::DuplicateCatalog(c.id.clone()));
        }
    }
    Ok(())
}

/// Encodes a set of catalogs as a bitmask over `order` (bit i is `order[i]`).
pub fn mask_of<'a, I>(catalogs: I, order: &[CatalogId]) -> Result<u32, ModelError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut mask = 0u32;
    for id in catalogs {
        let pos = order
            .iter()
            .position(|c| c.id() == id)
            .ok_or_else(|| ModelError::UnknownCatalog(id.to_string()))?;
        mask |= 1 << pos;
    }
    Ok(mask)
}

/// Mask with every catalog of a `k`-catalog order set.
pub fn full_mask(k: usize) -> u32 {
    if k == 0 {
        0
    } else {
        u32::MAX >> (32 - k)
    }
}

/// A URL as captured from a source document, before any normalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRepositoryEntry {
    pub source: CatalogId,
    pub raw_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Strong-normalized comparison key of a repository base URL.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NormalizedUrl(String);

impl NormalizedUrl {
    /// Accepts `key` only if it already is a strong-normalization fixed point.
    pub fn parse(key: &str) -> Result<Self, ModelError> {
        match normalize::strong_normalize(key) {
            Ok(n) if n.0 == key => Ok(n),
            _ => Err(ModelError::InvalidNormalizedUrl(key.to_string())),
        }
    }

    pub(crate) fn new_unchecked(key: String) -> Self {
        Self(key)
    }

    pub fn key(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NormalizedUrl {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<NormalizedUrl> for String {
    fn from(value: NormalizedUrl) -> Self {
        value.0
    }
}

impl fmt::Display for NormalizedUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One catalog's harvest with its count ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSnapshot {
    pub catalog: CatalogId,
    pub harvested_at: DateTime<Utc>,
    pub all_items: u64,
    pub only_oai: u64,
    /// Simple-normalized probe URLs, deduplicated in first-occurrence order.
    pub entries_simple: Vec<String>,
    pub entries_strong: Vec<NormalizedUrl>,
}

/// An entry dropped while building a snapshot, with the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedEntry {
    pub raw_url: String,
    pub reason: String,
}

impl CatalogSnapshot {
    /// Builds a snapshot from raw harvested entries: simple normalization and
    /// deduplication give `entries_simple`, strong normalization of those gives
    /// `entries_strong`. Entries rejected by either normalization level are
    /// returned separately and appear in neither list.
    pub fn from_harvest(
        catalog: CatalogId,
        harvested_at: DateTime<Utc>,
        all_items: u64,
        raw: &[RawRepositoryEntry],
    ) -> Result<(Self, Vec<RejectedEntry>), ModelError> {
        let mut rejected = Vec::new();
        let mut simple = Vec::with_capacity(raw.len());
        for entry in raw {
            let checked = normalize::simple_normalize(&entry.raw_url)
                .and_then(|s| normalize::strong_normalize(&s).map(|_| s));
            match checked {
                Ok(s) => simple.push(s),
                Err(e) => rejected.push(RejectedEntry {
                    raw_url: entry.raw_url.clone(),
                    reason: e.to_string(),
                }),
            }
        }
        let (entries_simple, _) = normalize::dedupe(simple);
        let strong: Vec<NormalizedUrl> = entries_simple
            .iter()
            .map(|s| normalize::strong_normalize(s).expect("checked above"))
            .collect();
        let (entries_strong, _) = normalize::dedupe(strong);
        let snapshot = Self {
            catalog,
            harvested_at,
            all_items,
            only_oai: raw.len() as u64,
            entries_simple,
            entries_strong,
        };
        snapshot.validate()?;
        Ok((snapshot, rejected))
    }

    pub fn unique(&self) -> u64 {
        self.entries_simple.len() as u64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |detail: String| ModelError::SnapshotCounts {
            catalog: self.catalog.id.clone(),
            detail,
        };
        let simple = self.entries_simple.len() as u64;
        let strong = self.entries_strong.len() as u64;
        if !(self.all_items >= self.only_oai && self.only_oai >= simple && simple >= strong) {
            return Err(fail(format!(
                "all_items {} >= only_oai {} >= simple {} >= strong {} does not hold",
                self.all_items, self.only_oai, simple, strong
            )));
        }
        if self.entries_simple.iter().collect::<HashSet<_>>().len() != self.entries_simple.len() {
            return Err(fail("duplicate simple entry".into()));
        }
        if self.entries_strong.iter().collect::<HashSet<_>>().len() != self.entries_strong.len() {
            return Err(fail("duplicate strong entry".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Reachable,
    WrongSuccess,
    HttpError,
    TransportError,
}

/// Result of probing one URL with `?verb=Identify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe_url: String,
    pub normalized: NormalizedUrl,
    pub outcome: ProbeOutcome,
    pub http_status: Option<u16>,
    pub repository_name: Option<String>,
    pub protocol_version: Option<String>,
    pub earliest_datestamp: Option<String>,
    pub attempts: u32,
    pub completed_at: DateTime<Utc>,
    /// Transport error text or final URL after redirects, when relevant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ProbeRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |detail: &str| ModelError::InconsistentProbe {
            url: self.probe_url.clone(),
            detail: detail.to_string(),
        };
        if self.attempts == 0 {
            return Err(fail("attempts must be positive"));
        }
        match self.outcome {
            ProbeOutcome::Reachable | ProbeOutcome::WrongSuccess
                if self.http_status != Some(200) =>
            {
                return Err(fail("status must be 200"));
            }
            ProbeOutcome::HttpError if matches!(self.http_status, None | Some(200)) => {
                return Err(fail("http error needs a non-200 status"));
            }
            ProbeOutcome::TransportError if self.http_status.is_some() => {
                return Err(fail("transport error carries no status"));
            }
            _ => {}
        }
        let has_identity = self.repository_name.is_some()
            || self.protocol_version.is_some()
            || self.earliest_datestamp.is_some();
        if has_identity && self.outcome != ProbeOutcome::Reachable {
            return Err(fail("identity fields only allowed when reachable"));
        }
        Ok(())
    }
}

/// Normalized URL → bitmask of the catalogs listing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipMap {
    entries: BTreeMap<NormalizedUrl, u32>,
    catalog_order: Vec<CatalogId>,
}

impl MembershipMap {
    pub fn new(
        catalog_order: Vec<CatalogId>,
        entries: BTreeMap<NormalizedUrl, u32>,
    ) -> Result<Self, ModelError> {
        validate_order(&catalog_order)?;
        let full = full_mask(catalog_order.len());
        for (key, &mask) in &entries {
            if mask == 0 || mask & !full != 0 {
                return Err(ModelError::InvalidMask {
                    key: key.0.clone(),
                    mask,
                    catalogs: catalog_order.len(),
                });
            }
        }
        Ok(Self {
            entries,
            catalog_order,
        })
    }

    pub fn catalog_order(&self) -> &[CatalogId] {
        &self.catalog_order
    }

    pub fn entries(&self) -> &BTreeMap<NormalizedUrl, u32> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn full_mask(&self) -> u32 {
        full_mask(self.catalog_order.len())
    }
}

/// Every overlap statistic for one membership map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub catalog_order: Vec<CatalogId>,
    pub total_distinct: u64,
    /// Nonzero mask → count; only masks present in the data are stored.
    pub region_counts: BTreeMap<u32, u64>,
    pub pairwise: Vec<Vec<u64>>,
    pub per_catalog_total: Vec<u64>,
    pub ratio: Vec<Vec<f64>>,
    pub specificity_fraction: f64,
    pub specificity_count: u64,
    pub all_common_count: u64,
    pub all_common: Vec<NormalizedUrl>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(ids: &[&str]) -> Vec<CatalogId> {
        ids.iter()
            .map(|id| CatalogId::new(*id, id.to_uppercase()).unwrap())
            .collect()
    }

    #[test]
    fn mask_examples() {
        let abc = order(&["a", "b", "c"]);
        assert_eq!(mask_of([], &abc).unwrap(), 0b000);
        assert_eq!(mask_of(["a", "c"], &abc).unwrap(), 0b101);
        let six = order(&[
            "opendoar",
            "roar",
            "openarchives",
            "illinois",
            "oaister",
            "openaire",
        ]);
        let all: Vec<&str> = six.iter().map(|c| c.id()).collect();
        assert_eq!(mask_of(all, &six).unwrap(), 0b111111);
    }

    #[test]
    fn mask_unknown_id_is_named() {
        let abc = order(&["a", "b", "c"]);
        assert_eq!(
            mask_of(["zz"], &abc),
            Err(ModelError::UnknownCatalog("zz".into()))
        );
    }

    #[test]
    fn mask_injective_and_popcount_exhaustive() {
        for k in 0..=6usize {
            let ids: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let ord: Vec<CatalogId> = ids
                .iter()
                .map(|i| CatalogId::new(i.clone(), "").unwrap())
                .collect();
            let mut seen = HashSet::new();
            for subset in 0u32..(1 << k) {
                let members: Vec<&str> = (0..k)
                    .filter(|i| subset & (1 << i) != 0)
                    .map(|i| ids[i].as_str())
                    .collect();
                let m = mask_of(members.iter().copied(), &ord).unwrap();
                assert_eq!(m.count_ones() as usize, members.len());
                assert!(seen.insert(m), "mask collision for k={k}");
            }
        }
    }

    #[test]
    fn catalog_id_rules() {
        assert!(CatalogId::new("open-aire_2", "x").is_ok());
        assert!(CatalogId::new("", "x").is_err());
        assert!(CatalogId::new("OpenDOAR", "x").is_err());
        assert!(CatalogId::new("a b", "x").is_err());
        let dup = order(&["a", "a"]);
        assert_eq!(
            validate_order(&dup),
            Err(ModelError::DuplicateCatalog("a".into()))
        );
        let many: Vec<CatalogId> = (0..31)
            .map(|i| CatalogId::new(format!("c{i}"), "").unwrap())
            .collect();
        assert_eq!(validate_order(&many), Err(ModelError::TooManyCatalogs(31)));
    }

    #[test]
    fn full_mask_widths() {
        assert_eq!(full_mask(0), 0);
        assert_eq!(full_mask(1), 1);
        assert_eq!(full_mask(6), 0b111111);
        assert_eq!(full_mask(30), (1 << 30) - 1);
    }

    #[test]
    fn snapshot_count_chain() {
        let cat = CatalogId::new("roar", "ROAR").unwrap();
        let source = cat.clone();
        let raw: Vec<RawRepositoryEntry> = [
            "http://a.org/oai?verb=Identify",
            "http://a.org/oai",
            "https://www.a.org/oai/",
            "?junk",
            "http://b.org/oai",
        ]
        .iter()
        .map(|u| RawRepositoryEntry {
            source: source.clone(),
            raw_url: u.to_string(),
            name: None,
        })
        .collect();
        let (snap, rejected) = CatalogSnapshot::from_harvest(cat, Utc::now(), 7, &raw).unwrap();
        assert_eq!(snap.only_oai, 5);
        assert_eq!(
            snap.entries_simple,
            vec![
                "http://a.org/oai",
                "https://www.a.org/oai/",
                "http://b.org/oai"
            ]
        );
        let keys: Vec<&str> = snap.entries_strong.iter().map(|n| n.key()).collect();
        assert_eq!(keys, vec!["a.org/oai", "b.org/oai"]);
        assert_eq!(rejected.len(), 1);
        assert!(snap.validate().is_ok());
    }

    #[test]
    fn snapshot_rejects_broken_chain() {
        let cat = CatalogId::new("x", "X").unwrap();
        let snap = CatalogSnapshot {
            catalog: cat,
            harvested_at: Utc::now(),
            all_items: 1,
            only_oai: 2,
            entries_simple: vec![],
            entries_strong: vec![],
        };
        assert!(snap.validate().is_err());
    }

    #[test]
    fn normalized_url_parse_requires_fixed_point() {
        assert!(NormalizedUrl::parse("a.org/oai").is_ok());
        assert!(NormalizedUrl::parse("http://a.org/oai").is_err());
        assert!(NormalizedUrl::parse("a.org/oai/").is_err());
        assert!(NormalizedUrl::parse("").is_err());
    }

    #[test]
    fn membership_rejects_zero_and_out_of_range_masks() {
        let ab = order(&["a", "b"]);
        let key = NormalizedUrl::parse("x.org").unwrap();
        let bad = BTreeMap::from([(key.clone(), 0)]);
        assert!(MembershipMap::new(ab.clone(), bad).is_err());
        let wide = BTreeMap::from([(key.clone(), 0b100)]);
        assert!(MembershipMap::new(ab.clone(), wide).is_err());
        let ok = BTreeMap::from([(key, 0b11)]);
        assert_eq!(MembershipMap::new(ab, ok).unwrap().len(), 1);
    }

    #[test]
    fn probe_record_invariants() {
        let base = ProbeRecord {
            probe_url: "http://a.org/oai".into(),
            normalized: NormalizedUrl::parse("a.org/oai").unwrap(),
            outcome: ProbeOutcome::Reachable,
            http_status: Some(200),
            repository_name: Some("Demo".into()),
            protocol_version: None,
            earliest_datestamp: None,
            attempts: 1,
            completed_at: Utc::now(),
            detail: None,
        };
        assert!(base.validate().is_ok());
        let mut wrong = base.clone();
        wrong.outcome = ProbeOutcome::WrongSuccess;
        assert!(wrong.validate().is_err());
        wrong.repository_name = None;
        assert!(wrong.validate().is_ok());
        let mut http = wrong.clone();
        http.outcome = ProbeOutcome::HttpError;
        assert!(http.validate().is_err());
        http.http_status = Some(404);
        assert!(http.validate().is_ok());
        let mut transport = http.clone();
        transport.outcome = ProbeOutcome::TransportError;
        assert!(transport.validate().is_err());
        transport.http_status = None;
        assert!(transport.validate().is_ok());
        transport.attempts = 0;
        assert!(transport.validate().is_err());
    }
}
