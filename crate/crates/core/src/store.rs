//! Run directories.
//!
//! ```text
//! <root>/<run-id>/
//!   run-meta.json          start/end, mode, config digest, catalog order
//!   manifest.json          copy of the source manifest
//!   snapshots/<id>.jsonl   header line, then one entry per line
//!   probes.jsonl           one ProbeRecord per line
//!   probe-meta.json
//!   reports/               counts.csv, probes.csv, errors.csv, overlap.json, regions.csv, ...
//! ```
//!
//! A run is written once per artifact: probes and reports are added later,
//! but never replaced.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{CatalogId, CatalogSnapshot, NormalizedUrl, ProbeRecord};
use crate::probe::ProbeConfig;
use crate::sources::{manifest_to_json, parse_manifest, SourceManifest};

pub const RUN_META: &str = "run-meta.json";
pub const MANIFEST: &str = "manifest.json";
pub const SNAPSHOTS_DIR: &str = "snapshots";
pub const PROBES: &str = "probes.jsonl";
pub const PROBE_META: &str = "probe-meta.json";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Corrupt {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{0} already exists; run directories are immutable")]
    AlreadyPresent(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Live,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub mode: RunMode,
    pub config_digest: String,
    pub catalog_order: Vec<String>,
    #[serde(default)]
    pub failed_catalogs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub mode: RunMode,
    pub config: ProbeConfig,
}

/// Everything a run directory holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub meta: RunMeta,
    pub manifest: Option<Vec<SourceManifest>>,
    pub snapshots: Vec<CatalogSnapshot>,
    pub probes: Option<Vec<ProbeRecord>>,
    pub probe_meta: Option<ProbeMeta>,
    /// Report file name → content.
    pub reports: BTreeMap<String, String>,
}

pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn new_run_id(at: DateTime<Utc>) -> String {
    format!(
        "{}-{:06x}",
        at.format("%Y%m%dT%H%M%SZ"),
        rand::random::<u32>() & 0xff_ffff
    )
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SnapshotLine {
    Header {
        catalog: CatalogId,
        harvested_at: DateTime<Utc>,
        all_items: u64,
        only_oai: u64,
    },
    Simple {
        url: String,
    },
    Strong {
        key: NormalizedUrl,
    },
}

fn json_line<T: Serialize>(out: &mut String, value: &T) {
    out.push_str(&serde_json::to_string(value).expect("record serializes"));
    out.push('\n');
}

fn snapshot_jsonl(s: &CatalogSnapshot) -> String {
    let mut out = String::new();
    json_line(
        &mut out,
        &SnapshotLine::Header {
            catalog: s.catalog.clone(),
            harvested_at: s.harvested_at,
            all_items: s.all_items,
            only_oai: s.only_oai,
        },
    );
    for url in &s.entries_simple {
        json_line(&mut out, &SnapshotLine::Simple { url: url.clone() });
    }
    for key in &s.entries_strong {
        json_line(&mut out, &SnapshotLine::Strong { key: key.clone() });
    }
    out
}

fn probes_jsonl(records: &[ProbeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        json_line(&mut out, r);
    }
    out
}

fn write_file(path: &Path, content: &str) -> Result<(), StoreError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(content.as_bytes()).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("metadata serializes");
    s.push('\n');
    s
}

fn write_run_contents(dir: &Path, run: &Run) -> Result<(), StoreError> {
    write_file(&dir.join(RUN_META), &pretty(&run.meta))?;
    if let Some(m) = &run.manifest {
        write_file(&dir.join(MANIFEST), &manifest_to_json(m))?;
    }
    if !run.snapshots.is_empty() {
        let snaps = dir.join(SNAPSHOTS_DIR);
        fs::create_dir(&snaps).map_err(io_err(&snaps))?;
        for s in &run.snapshots {
            write_file(
                &snaps.join(format!("{}.jsonl", s.catalog.id())),
                &snapshot_jsonl(s),
            )?;
        }
    }
    if let Some(p) = &run.probes {
        write_file(&dir.join(PROBES), &probes_jsonl(p))?;
    }
    if let Some(pm) = &run.probe_meta {
        write_file(&dir.join(PROBE_META), &pretty(pm))?;
    }
    if !run.reports.is_empty() {
        write_reports_into(&dir.join(REPORTS_DIR), &run.reports)?;
    }
    Ok(())
}

fn write_reports_into(dir: &Path, reports: &BTreeMap<String, String>) -> Result<(), StoreError> {
    fs::create_dir(dir).map_err(io_err(dir))?;
    for (name, content) in reports {
        write_file(&dir.join(name), content)?;
    }
    Ok(())
}

/// Writes a complete run under `root/<run_id>` and returns its path. The run
/// is assembled in a hidden staging directory and renamed into place; on any
/// failure nothing is left behind.
pub fn save_run(run: &Run, root: &Path) -> Result<PathBuf, StoreError> {
    let final_dir = root.join(&run.meta.run_id);
    if final_dir.exists() {
        return Err(StoreError::AlreadyPresent(final_dir.display().to_string()));
    }
    let staging = root.join(format!(".staging-{}", run.meta.run_id));
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let result = write_run_contents(&staging, run)
        .and_then(|_| fs::rename(&staging, &final_dir).map_err(io_err(&final_dir)));
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|_| final_dir)
}

/// Adds probe records to an existing run. Refuses when probes exist already.
pub fn add_probes(
    run_dir: &Path,
    records: &[ProbeRecord],
    meta: &ProbeMeta,
) -> Result<(), StoreError> {
    let target = run_dir.join(PROBES);
    if target.exists() {
        return Err(StoreError::AlreadyPresent(target.display().to_string()));
    }
    let staging = run_dir.join(".probes.jsonl.partial");
    write_file(&staging, &probes_jsonl(records))?;
    write_file(&run_dir.join(PROBE_META), &pretty(meta))?;
    fs::rename(&staging, &target).map_err(io_err(&target))
}

/// Adds a set of report files to an existing run. Refuses when reports exist.
pub fn add_reports(run_dir: &Path, reports: &BTreeMap<String, String>) -> Result<(), StoreError> {
    let target = run_dir.join(REPORTS_DIR);
    if target.exists() {
        return Err(StoreError::AlreadyPresent(target.display().to_string()));
    }
    let staging = run_dir.join(".reports.partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let result = write_reports_into(&staging, reports)
        .and_then(|_| fs::rename(&staging, &target).map_err(io_err(&target)));
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip corrupt lines with a warning instead of failing.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub run: Run,
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = read(path)?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Parses a JSON-lines file; in lenient mode bad lines are skipped.
fn read_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
    opts: LoadOptions,
    warnings: &mut Vec<String>,
) -> Result<Vec<T>, StoreError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) => {
                let err = StoreError::Corrupt {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                };
                if !opts.lenient {
                    return Err(err);
                }
                warnings.push(err.to_string());
            }
        }
    }
    Ok(out)
}

fn load_snapshot(
    path: &Path,
    opts: LoadOptions,
    warnings: &mut Vec<String>,
) -> Result<CatalogSnapshot, StoreError> {
    let lines: Vec<SnapshotLine> = read_lines(path, opts, warnings)?;
    let corrupt = |message: &str| StoreError::Corrupt {
        file: path.display().to_string(),
        line: 1,
        message: message.to_string(),
    };
    let mut iter = lines.into_iter();
    let Some(SnapshotLine::Header {
        catalog,
        harvested_at,
        all_items,
        only_oai,
    }) = iter.next()
    else {
        return Err(corrupt("first line must be the snapshot header"));
    };
    let mut snap = CatalogSnapshot {
        catalog,
        harvested_at,
        all_items,
        only_oai,
        entries_simple: Vec::new(),
        entries_strong: Vec::new(),
    };
    for line in iter {
        match line {
            SnapshotLine::Simple { url } => snap.entries_simple.push(url),
            SnapshotLine::Strong { key } => snap.entries_strong.push(key),
            SnapshotLine::Header { .. } => return Err(corrupt("second header line")),
        }
    }
    if !opts.lenient {
        snap.validate().map_err(|e| corrupt(&e.to_string()))?;
    }
    Ok(snap)
}

pub fn load_run(dir: &Path, opts: LoadOptions) -> Result<Loaded, StoreError> {
    let mut warnings = Vec::new();
    let meta: RunMeta = read_json(&dir.join(RUN_META))?;

    let manifest_path = dir.join(MANIFEST);
    let manifest = if manifest_path.exists() {
        let text = read(&manifest_path)?;
        Some(parse_manifest(&text).map_err(|e| StoreError::Corrupt {
            file: manifest_path.display().to_string(),
            line: match &e {
                crate::sources::ManifestError::Parse { line, .. } => *line,
                _ => 0,
            },
            message: e.to_string(),
        })?)
    } else {
        None
    };

    let mut snapshots = Vec::with_capacity(meta.catalog_order.len());
    for id in &meta.catalog_order {
        let path = dir.join(SNAPSHOTS_DIR).join(format!("{id}.jsonl"));
        snapshots.push(load_snapshot(&path, opts, &mut warnings)?);
    }

    let probes_path = dir.join(PROBES);
    let probes = if probes_path.exists() {
        Some(read_lines::<ProbeRecord>(
            &probes_path,
            opts,
            &mut warnings,
        )?)
    } else {
        None
    };
    let probe_meta_path = dir.join(PROBE_META);
    let probe_meta = if probe_meta_path.exists() {
        Some(read_json(&probe_meta_path)?)
    } else {
        None
    };

    let mut reports = BTreeMap::new();
    let reports_dir = dir.join(REPORTS_DIR);
    if reports_dir.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&reports_dir)
            .map_err(io_err(&reports_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            let name = p
                .file_name()
                .expect("file name")
                .to_string_lossy()
                .into_owned();
            reports.insert(name, read(&p)?);
        }
    }

    let known = [
        RUN_META,
        MANIFEST,
        SNAPSHOTS_DIR,
        PROBES,
        PROBE_META,
        REPORTS_DIR,
    ];
    let mut entries: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !known.contains(&n.as_str()))
        .collect();
    entries.sort();
    for name in entries {
        let w = format!("ignoring unknown entry {name} in {}", dir.display());
        tracing::warn!("{w}");
        warnings.push(w);
    }

    Ok(Loaded {
        run: Run {
            meta,
            manifest,
            snapshots,
            probes,
            probe_meta,
            reports,
        },
        warnings,
    })
}
