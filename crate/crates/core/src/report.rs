//! Machine-readable tables: harvest counts, probe success rates, the error
//! distribution per status code, overlap analytics, Venn regions and growth
//! between runs.
//!
//! Every emitter is deterministic. Percentages carry one decimal and
//! fractions two, both rounded half away from zero on exact integer ratios.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    CatalogId, CatalogSnapshot, NormalizedUrl, OverlapReport, ProbeOutcome, ProbeRecord,
};
use crate::overlap::round_ratio;
use crate::probe::OutcomeSummary;

pub const SUBSET_SEPARATOR: &str = "&";
pub const NO_ERRORS_MARKER: &str = "no errors";

pub const COUNTS_CSV: &str = "counts.csv";
pub const PROBES_CSV: &str = "probes.csv";
pub const ERRORS_CSV: &str = "errors.csv";
pub const OVERLAP_JSON: &str = "overlap.json";
pub const REGIONS_CSV: &str = "regions.csv";
pub const DIFF_CSV: &str = "diff.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no catalog is shared between the two runs")]
    NoSharedCatalogs,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed table: {0}")]
    Malformed(String),
}

/// Rounds `num / den` to tenths of a percent, half away from zero.
pub fn percent_tenths(num: u64, den: u64) -> u64 {
    if den == 0 {
        return 0;
    }
    ((2000 * num as u128 + den as u128) / (2 * den as u128)) as u64
}

pub fn format_tenths(t: u64) -> String {
    format!("{}.{}", t / 10, t % 10)
}

pub fn format_hundredths(x: f64) -> String {
    format!("{x:.2}")
}

fn to_csv(rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        w.write_record(row).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 cells")
}

fn from_csv(text: &str) -> Result<Vec<Vec<String>>, ReportError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes());
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Harvest count ledger, one column per catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub catalog_order: Vec<String>,
    pub all_items: Vec<u64>,
    pub only_oai: Vec<u64>,
    pub unique: Vec<u64>,
}

pub fn emit_count_table(snapshots: &[CatalogSnapshot]) -> CountTable {
    CountTable {
        catalog_order: snapshots
            .iter()
            .map(|s| s.catalog.id().to_string())
            .collect(),
        all_items: snapshots.iter().map(|s| s.all_items).collect(),
        only_oai: snapshots.iter().map(|s| s.only_oai).collect(),
        unique: snapshots.iter().map(|s| s.unique()).collect(),
    }
}

impl CountTable {
    pub fn to_csv(&self) -> String {
        let mut rows = vec![std::iter::once("metric".to_string())
            .chain(self.catalog_order.iter().cloned())
            .collect::<Vec<_>>()];
        for (name, values) in [
            ("all_items", &self.all_items),
            ("only_oai", &self.only_oai),
            ("unique", &self.unique),
        ] {
            rows.push(
                std::iter::once(name.to_string())
                    .chain(values.iter().map(u64::to_string))
                    .collect(),
            );
        }
        to_csv(&rows)
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let rows = from_csv(text)?;
        let [header, all, only, unique] = rows.as_slice() else {
            return Err(ReportError::Malformed("count table needs 4 rows".into()));
        };
        let parse = |row: &Vec<String>| -> Result<Vec<u64>, ReportError> {
            row.iter()
                .skip(1)
                .map(|c| {
                    c.parse()
                        .map_err(|_| ReportError::Malformed(format!("not a count: {c:?}")))
                })
                .collect()
        };
        Ok(Self {
            catalog_order: header.iter().skip(1).cloned().collect(),
            all_items: parse(all)?,
            only_oai: parse(only)?,
            unique: parse(unique)?,
        })
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

/// Reachability figures for one catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogProbeStats {
    pub catalog: String,
    /// Unique probe URLs listed by the catalog.
    pub total: u64,
    pub success: u64,
    /// Distinct comparison keys among the reachable URLs.
    pub unique_success: u64,
}

impl CatalogProbeStats {
    pub fn pct_success_tenths(&self) -> u64 {
        if self.total == 0 {
            0
        } else {
            percent_tenths(self.success, self.total)
        }
    }

    pub fn pct_error_tenths(&self) -> u64 {
        if self.total == 0 {
            0
        } else {
            1000 - self.pct_success_tenths()
        }
    }
}

/// Joins probe outcomes back to one catalog's URLs.
pub fn catalog_probe_stats(
    snapshot: &CatalogSnapshot,
    records: &[ProbeRecord],
) -> CatalogProbeStats {
    let by_url: HashMap<&str, &ProbeRecord> =
        records.iter().map(|r| (r.probe_url.as_str(), r)).collect();
    let mut success = 0;
    let mut keys: BTreeSet<&NormalizedUrl> = BTreeSet::new();
    for url in &snapshot.entries_simple {
        if let Some(r) = by_url.get(url.as_str()) {
            if r.outcome == ProbeOutcome::Reachable {
                success += 1;
                keys.insert(&r.normalized);
            }
        }
    }
    CatalogProbeStats {
        catalog: snapshot.catalog.id().to_string(),
        total: snapshot.entries_simple.len() as u64,
        success,
        unique_success: keys.len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorShare {
    pub bucket: String,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub catalogs: Vec<CatalogProbeStats>,
    pub total: u64,
    pub success_count: u64,
    pub error_count: u64,
    pub errors: Vec<ErrorShare>,
}

pub fn emit_probe_table(catalogs: Vec<CatalogProbeStats>, overall: &OutcomeSummary) -> ProbeTable {
    let errors = overall
        .error_counts
        .iter()
        .map(|(bucket, &count)| ErrorShare {
            bucket: bucket.label(),
            count,
            fraction: round_ratio(count, overall.error_count),
        })
        .collect();
    ProbeTable {
        catalogs,
        total: overall.total,
        success_count: overall.success_count,
        error_count: overall.error_count,
        errors,
    }
}

impl ProbeTable {
    /// Per-catalog reachability, one column per catalog.
    pub fn to_csv(&self) -> String {
        let header = std::iter::once("metric".to_string())
            .chain(self.catalogs.iter().map(|c| c.catalog.clone()))
            .collect();
        let row = |name: &str, f: &dyn Fn(&CatalogProbeStats) -> String| -> Vec<String> {
            std::iter::once(name.to_string())
                .chain(self.catalogs.iter().map(f))
                .collect()
        };
        to_csv(&[
            header,
            row("nb_total", &|c| c.total.to_string()),
            row("nb_success", &|c| c.success.to_string()),
            row("nb_unique", &|c| c.unique_success.to_string()),
            row("pct_success", &|c| format_tenths(c.pct_success_tenths())),
            row("pct_error", &|c| format_tenths(c.pct_error_tenths())),
        ])
    }

    /// Share of each error kind among all errors.
    pub fn errors_csv(&self) -> String {
        let mut rows = vec![vec![
            "status".to_string(),
            "count".to_string(),
            "fraction".to_string(),
        ]];
        if self.errors.is_empty() {
            rows.push(vec![
                NO_ERRORS_MARKER.to_string(),
                "0".into(),
                "0.00".into(),
            ]);
        }
        for e in &self.errors {
            rows.push(vec![
                e.bucket.clone(),
                e.count.to_string(),
                format_hundredths(e.fraction),
            ]);
        }
        to_csv(&rows)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub mask: u32,
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specificity {
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllCommon {
    pub count: u64,
    pub keys: Vec<String>,
}

/// Serialized overlap report, in the set-region shape Venn tools consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapDocument {
    pub separator: String,
    pub catalog_order: Vec<String>,
    pub display_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
    pub total_distinct: u64,
    pub regions: Vec<RegionEntry>,
    pub pairwise: Vec<Vec<u64>>,
    pub per_catalog_total: Vec<u64>,
    pub ratio: Vec<Vec<f64>>,
    pub specificity: Specificity,
    pub all_common: AllCommon,
}

pub fn region_name(mask: u32, order: &[String]) -> String {
    order
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, id)| id.as_str())
        .collect::<Vec<_>>()
        .join(SUBSET_SEPARATOR)
}

pub fn emit_overlap_report(report: &OverlapReport, excluded: Option<&str>) -> OverlapDocument {
    let order: Vec<String> = report
        .catalog_order
        .iter()
        .map(|c| c.id().to_string())
        .collect();
    let full = crate::catalog::full_mask(order.len());
    let regions = (1..=full)
        .map(|mask| RegionEntry {
            mask,
            name: region_name(mask, &order),
            count: report.region_counts.get(&mask).copied().unwrap_or(0),
        })
        .collect();
    OverlapDocument {
        separator: SUBSET_SEPARATOR.to_string(),
        display_names: report
            .catalog_order
            .iter()
            .map(|c| c.display_name().to_string())
            .collect(),
        catalog_order: order,
        excluded: excluded.map(str::to_string),
        total_distinct: report.total_distinct,
        regions,
        pairwise: report.pairwise.clone(),
        per_catalog_total: report.per_catalog_total.clone(),
        ratio: report.ratio.clone(),
        specificity: Specificity {
            count: report.specificity_count,
            fraction: report.specificity_fraction,
        },
        all_common: AllCommon {
            count: report.all_common_count,
            keys: report
                .all_common
                .iter()
                .map(|k| k.key().to_string())
                .collect(),
        },
    }
}

impl OverlapDocument {
    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn regions_csv(&self) -> String {
        let mut rows = vec![vec![
            "mask".to_string(),
            "name".to_string(),
            "count".to_string(),
        ]];
        rows.extend(
            self.regions
                .iter()
                .map(|r| vec![r.mask.to_string(), r.name.clone(), r.count.to_string()]),
        );
        to_csv(&rows)
    }

    /// Rebuilds the in-memory report (zero regions are dropped again).
    pub fn to_report(&self) -> Result<OverlapReport, ReportError> {
        let bad = |e: crate::catalog::ModelError| ReportError::Malformed(e.to_string());
        let catalog_order = self
            .catalog_order
            .iter()
            .zip(&self.display_names)
            .map(|(id, name)| CatalogId::new(id.clone(), name.clone()).map_err(bad))
            .collect::<Result<Vec<_>, _>>()?;
        let all_common = self
            .all_common
            .keys
            .iter()
            .map(|k| NormalizedUrl::parse(k).map_err(bad))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(OverlapReport {
            catalog_order,
            total_distinct: self.total_distinct,
            region_counts: self
                .regions
                .iter()
                .filter(|r| r.count > 0)
                .map(|r| (r.mask, r.count))
                .collect(),
            pairwise: self.pairwise.clone(),
            per_catalog_total: self.per_catalog_total.clone(),
            ratio: self.ratio.clone(),
            specificity_fraction: self.specificity.fraction,
            specificity_count: self.specificity.count,
            all_common_count: self.all_common.count,
            all_common,
        })
    }
}

/// Comparison keys per catalog, the input of [`diff_runs`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub catalogs: Vec<(String, BTreeSet<String>)>,
}

impl RunSummary {
    pub fn from_snapshots(snapshots: &[CatalogSnapshot]) -> Self {
        Self {
            catalogs: snapshots
                .iter()
                .map(|s| {
                    let keys = s
                        .entries_strong
                        .iter()
                        .map(|k| k.key().to_string())
                        .collect();
                    (s.catalog.id().to_string(), keys)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub catalog: String,
    pub earlier_unique: u64,
    pub later_unique: u64,
    pub delta: i64,
    pub appeared: u64,
    pub disappeared: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthTable {
    pub rows: Vec<GrowthRow>,
}

/// Growth of each catalog present in both runs, in the earlier run's order.
pub fn diff_runs(earlier: &RunSummary, later: &RunSummary) -> Result<GrowthTable, ReportError> {
    let later_by_id: BTreeMap<&str, &BTreeSet<String>> = later
        .catalogs
        .iter()
        .map(|(id, keys)| (id.as_str(), keys))
        .collect();
    let rows: Vec<GrowthRow> = earlier
        .catalogs
        .iter()
        .filter_map(|(id, before)| {
            let after = later_by_id.get(id.as_str())?;
            Some(GrowthRow {
                catalog: id.clone(),
                earlier_unique: before.len() as u64,
                later_unique: after.len() as u64,
                delta: after.len() as i64 - before.len() as i64,
                appeared: after.difference(before).count() as u64,
                disappeared: before.difference(after).count() as u64,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(ReportError::NoSharedCatalogs);
    }
    Ok(GrowthTable { rows })
}

impl GrowthTable {
    pub fn to_csv(&self) -> String {
        let mut rows = vec![[
            "catalog",
            "earlier_unique",
            "later_unique",
            "delta",
            "appeared",
            "disappeared",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
        for r in &self.rows {
            rows.push(vec![
                r.catalog.clone(),
                r.earlier_unique.to_string(),
                r.later_unique.to_string(),
                format!("{:+}", r.delta),
                r.appeared.to_string(),
                r.disappeared.to_string(),
            ]);
        }
        to_csv(&rows)
    }
}
