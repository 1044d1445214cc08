//! Command-line front end.
//!
//! ```text
//! metacat harvest --manifest sources.json --out runs/ [--fixtures DIR] [--catalog ID]... [--live]
//! metacat probe   --run runs/<id> [--concurrency N] [--timeout S] [--retries K] ... [--live]
//! metacat analyze --run runs/<id> [--exclude-catalog ID]... [--include-unreachable]
//! metacat diff    --earlier runs/<a> --later runs/<b> [--out diff.csv]
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 partial harvest
//! failure, 3 refusal to modify an existing artifact.
//!
//! Without `--live` nothing touches the network: sources are read from the
//! fixtures directory and probes are answered by a scripted transport
//! (`<fixtures>/transport.json` unless `--transport-script` says otherwise),
//! with a virtual clock so politeness delays cost no wall time.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::catalog::{CatalogSnapshot, ModelError};
use crate::overlap::{self, OverlapError};
use crate::probe::{
    probe_all, summarize_outcomes, Clock, ProbeConfig, ProbeError, ReqwestTransport, ScriptError,
    ScriptedTransport, SystemClock, VirtualClock, DEFAULT_USER_AGENT,
};
use crate::report::{self, ReportError};
use crate::sources::{
    harvest_catalog, manifest_to_json, parse_manifest, Fetcher, FixtureFetcher, HttpFetcher,
    ManifestError, SourceManifest,
};
use crate::store::{self, LoadOptions, ProbeMeta, Run, RunMeta, RunMode, StoreError};

pub const TRANSPORT_SCRIPT: &str = "transport.json";

#[derive(Debug, Parser)]
#[command(
    name = "metacat",
    version,
    about = "Harvest, probe and compare OAI-PMH repository registries"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Harvest catalogs listed in a source manifest into a new run directory.
    Harvest(HarvestArgs),
    /// Send an Identify request to every harvested URL.
    Probe(ProbeArgs),
    /// Compute overlap statistics and write the report files.
    Analyze(AnalyzeArgs),
    /// Compare the catalogs of two runs.
    Diff(DiffArgs),
}

#[derive(Debug, Clone, Args)]
pub struct HarvestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory under which the run directory is created.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory that `file:` locations resolve against. Defaults to the
    /// manifest's directory.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Harvest only these catalogs (repeatable).
    #[arg(long = "catalog", value_name = "ID")]
    pub catalogs: Vec<String>,
    /// Fetch `http(s)` locations from the network.
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Maximum number of requests in flight.
    #[arg(long, default_value_t = ProbeConfig::default().max_in_flight)]
    pub concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = ProbeConfig::default().timeout_secs)]
    pub timeout: u64,
    /// Extra attempts after a transport error or a 500/502/503/504.
    #[arg(long, default_value_t = ProbeConfig::default().retries)]
    pub retries: u32,
    /// Seconds between a failed attempt and its retry.
    #[arg(long, default_value_t = ProbeConfig::default().retry_spacing_secs)]
    pub retry_spacing: u64,
    #[arg(long, env = "OMH_USER_AGENT", default_value = DEFAULT_USER_AGENT)]
    pub user_agent: String,
    /// Minimum gap between two requests to the same host, in milliseconds.
    #[arg(long, default_value_t = ProbeConfig::default().per_host_delay_ms)]
    pub per_host_delay: u64,
    /// Use real HTTP instead of the scripted transport.
    #[arg(long)]
    pub live: bool,
    /// Scripted transport file for fixture mode.
    #[arg(long)]
    pub transport_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Also write a variant of the overlap report without this catalog
    /// (repeatable).
    #[arg(long = "exclude-catalog", value_name = "ID")]
    pub exclude: Vec<String>,
    /// Count every harvested URL instead of only reachable ones.
    #[arg(long)]
    pub include_unreachable: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DiffArgs {
    #[arg(long)]
    pub earlier: PathBuf,
    #[arg(long)]
    pub later: PathBuf,
    /// Output file for the growth table.
    #[arg(long, default_value = report::DIFF_CSV)]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Manifest { path: String, source: ManifestError },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Overlap(#[from] OverlapError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Store(StoreError::AlreadyPresent(_)) => 3,
            _ => 1,
        }
    }
}

pub struct HarvestOutcome {
    pub run_dir: PathBuf,
    pub failed: Vec<String>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Harvest(a) => cmd_harvest(a).map(|o| if o.failed.is_empty() { 0 } else { 2 }),
        Command::Probe(a) => cmd_probe(a).map(|_| 0),
        Command::Analyze(a) => cmd_analyze(a).map(|_| 0),
        Command::Diff(a) => cmd_diff(a).map(|_| 0),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    })
}

/// A current-thread runtime. Fixture mode pauses time so that sleeps
/// complete instantly and the virtual clock stays deterministic.
fn runtime(live: bool) -> tokio::runtime::Runtime {
    let mut b = tokio::runtime::Builder::new_current_thread();
    b.enable_all();
    if !live {
        b.start_paused(true);
    }
    b.build().expect("tokio runtime")
}

pub fn cmd_harvest(args: &HarvestArgs) -> Result<HarvestOutcome, CliError> {
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.manifest.display())))?;
    let manifest = parse_manifest(&text).map_err(|source| CliError::Manifest {
        path: args.manifest.display().to_string(),
        source,
    })?;
    for id in &args.catalogs {
        if !manifest.iter().any(|m| m.catalog.id() == id) {
            return Err(CliError::Usage(format!(
                "catalog {id} is not in the manifest"
            )));
        }
    }
    let selected: Vec<&SourceManifest> = manifest
        .iter()
        .filter(|m| args.catalogs.is_empty() || args.catalogs.contains(&m.catalog.id().to_string()))
        .collect();

    let fixtures = match &args.fixtures {
        Some(dir) => dir.clone(),
        None => args
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let fixtures = fixtures.canonicalize().unwrap_or(fixtures);
    let started_at = Utc::now();

    let harvests = runtime(args.live).block_on(async {
        let fixture_fetcher = FixtureFetcher::new(&fixtures);
        if args.live {
            let config = ProbeConfig::default();
            let transport = ReqwestTransport::new(&config.user_agent, usize::MAX, true)
                .map_err(|e| CliError::Io(e.to_string()))?;
            let fetcher = HttpFetcher::new(
                transport,
                config.per_host_delay(),
                config.timeout(),
                config.follow_redirects,
            )
            .with_fixtures(fixture_fetcher);
            Ok::<_, CliError>(harvest_all(&selected, &fetcher).await)
        } else {
            Ok(harvest_all(&selected, &fixture_fetcher).await)
        }
    })?;

    let mut snapshots = Vec::new();
    let mut failed = Vec::new();
    for (source, result) in selected.iter().zip(harvests) {
        let id = source.catalog.id();
        match result {
            Ok(h) => {
                let (snap, rejected) = CatalogSnapshot::from_harvest(
                    source.catalog.clone(),
                    Utc::now(),
                    h.all_items,
                    &h.entries,
                )?;
                for r in &rejected {
                    tracing::warn!(catalog = id, url = %r.raw_url, reason = %r.reason, "entry rejected");
                }
                println!(
                    "{id}: all_items={} only_oai={} unique={} rejected={} link_failures={}",
                    snap.all_items,
                    snap.only_oai,
                    snap.unique(),
                    rejected.len(),
                    h.link_failures
                );
                snapshots.push(snap);
            }
            Err(e) => {
                println!("{id}: FAILED ({e})");
                failed.push(id.to_string());
            }
        }
    }

    let manifest_json = manifest_to_json(&manifest);
    let meta = RunMeta {
        run_id: store::new_run_id(started_at),
        started_at,
        finished_at: Utc::now(),
        mode: if args.live {
            RunMode::Live
        } else {
            RunMode::Fixture
        },
        config_digest: store::digest(&format!("{manifest_json}\n{:?}", args.catalogs)),
        catalog_order: snapshots
            .iter()
            .map(|s| s.catalog.id().to_string())
            .collect(),
        failed_catalogs: failed.clone(),
        fixtures_dir: (!args.live || args.fixtures.is_some())
            .then(|| fixtures.display().to_string()),
    };
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    let run_dir = store::save_run(
        &Run {
            meta,
            manifest: Some(manifest),
            snapshots,
            probes: None,
            probe_meta: None,
            reports: BTreeMap::new(),
        },
        &args.out,
    )?;
    println!("run: {}", run_dir.display());
    Ok(HarvestOutcome { run_dir, failed })
}

async fn harvest_all<F: Fetcher>(
    sources: &[&SourceManifest],
    fetcher: &F,
) -> Vec<Result<crate::sources::Harvest, crate::sources::HarvestError>> {
    futures::future::join_all(sources.iter().map(|m| harvest_catalog(m, fetcher))).await
}

/// Unique simple URLs across all catalogs, first occurrence wins.
pub fn probe_targets(snapshots: &[CatalogSnapshot]) -> Vec<String> {
    let mut seen = HashSet::new();
    snapshots
        .iter()
        .flat_map(|s| s.entries_simple.iter())
        .filter(|u| seen.insert(u.as_str()))
        .cloned()
        .collect()
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<usize, CliError> {
    let loaded = store::load_run(&args.run, LoadOptions::default())?;
    let existing = args.run.join(store::PROBES);
    if loaded.run.probes.is_some() {
        return Err(StoreError::AlreadyPresent(existing.display().to_string()).into());
    }
    let config = ProbeConfig {
        max_in_flight: args.concurrency,
        per_host_delay_ms: args.per_host_delay,
        timeout_secs: args.timeout,
        retries: args.retries,
        retry_spacing_secs: args.retry_spacing,
        user_agent: args.user_agent.clone(),
        ..ProbeConfig::default()
    };
    config.validate()?;
    let urls = probe_targets(&loaded.run.snapshots);
    let started_at = Utc::now();

    let records = if args.live {
        let transport =
            ReqwestTransport::new(&config.user_agent, config.body_cap_bytes, config.allow_tls)
                .map_err(|e| CliError::Io(e.to_string()))?;
        runtime(true).block_on(probe_all(&urls, &config, &SystemClock, &transport))?
    } else {
        let script = match &args.transport_script {
            Some(p) => p.clone(),
            None => {
                let dir = loaded.run.meta.fixtures_dir.as_ref().ok_or_else(|| {
                    CliError::Usage(
                        "run has no fixtures directory; pass --transport-script or --live".into(),
                    )
                })?;
                Path::new(dir).join(TRANSPORT_SCRIPT)
            }
        };
        let transport = ScriptedTransport::from_file(&script)?;
        runtime(false).block_on(async {
            let clock = VirtualClock::new(started_at);
            let records = probe_all(&urls, &config, &clock, &transport).await;
            tracing::debug!(virtual_end = %clock.now(), "probing finished");
            records
        })?
    };

    let summary = summarize_outcomes(&records);
    println!(
        "probed {} urls: {} reachable ({}%), {} errors",
        summary.total,
        summary.success_count,
        report::format_tenths(report::percent_tenths(summary.success_count, summary.total)),
        summary.error_count
    );
    for (bucket, fraction) in summary.error_distribution() {
        println!("  {bucket}: {fraction:.2}");
    }
    let meta = ProbeMeta {
        started_at,
        finished_at: Utc::now(),
        mode: if args.live {
            RunMode::Live
        } else {
            RunMode::Fixture
        },
        config,
    };
    store::add_probes(&args.run, &records, &meta)?;
    Ok(records.len())
}

/// Renders every report file for a loaded run.
pub fn build_reports(
    run: &Run,
    exclude: &[String],
    include_unreachable: bool,
) -> Result<BTreeMap<String, String>, CliError> {
    if run.probes.is_none() && !include_unreachable {
        return Err(CliError::Usage(
            "run has no probe results; run `metacat probe` first or pass --include-unreachable"
                .into(),
        ));
    }
    let probes = run.probes.as_deref().unwrap_or(&[]);
    let map = overlap::build_membership(&run.snapshots, !include_unreachable, probes)?;

    let mut out = BTreeMap::new();
    out.insert(
        report::COUNTS_CSV.to_string(),
        report::emit_count_table(&run.snapshots).to_csv(),
    );
    if run.probes.is_some() {
        let stats = run
            .snapshots
            .iter()
            .map(|s| report::catalog_probe_stats(s, probes))
            .collect();
        let table = report::emit_probe_table(stats, &summarize_outcomes(probes));
        out.insert(report::PROBES_CSV.to_string(), table.to_csv());
        out.insert(report::ERRORS_CSV.to_string(), table.errors_csv());
    }
    let doc = report::emit_overlap_report(&overlap::analyze(&map), None);
    out.insert(report::OVERLAP_JSON.to_string(), doc.to_json());
    out.insert(report::REGIONS_CSV.to_string(), doc.regions_csv());

    for id in exclude {
        let reduced = overlap::exclude_catalog(&map, id)?;
        let doc = report::emit_overlap_report(&overlap::analyze(&reduced), Some(id));
        out.insert(format!("overlap-without-{id}.json"), doc.to_json());
        out.insert(format!("regions-without-{id}.csv"), doc.regions_csv());
    }
    Ok(out)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<BTreeMap<String, String>, CliError> {
    let loaded = store::load_run(&args.run, LoadOptions::default())?;
    let reports_dir = args.run.join(store::REPORTS_DIR);
    if reports_dir.exists() {
        return Err(StoreError::AlreadyPresent(reports_dir.display().to_string()).into());
    }
    let reports = build_reports(&loaded.run, &args.exclude, args.include_unreachable)?;
    store::add_reports(&args.run, &reports)?;
    let doc = report::OverlapDocument::from_json(&reports[report::OVERLAP_JSON])?;
    println!(
        "{} distinct urls over {} catalogs; specific to one catalog: {} ({}); common to all: {}",
        doc.total_distinct,
        doc.catalog_order.len(),
        doc.specificity.count,
        report::format_hundredths(doc.specificity.fraction),
        doc.all_common.count
    );
    for name in reports.keys() {
        println!("wrote {}", reports_dir.join(name).display());
    }
    Ok(reports)
}

pub fn cmd_diff(args: &DiffArgs) -> Result<String, CliError> {
    let earlier = store::load_run(&args.earlier, LoadOptions::default())?;
    let later = store::load_run(&args.later, LoadOptions::default())?;
    let table = report::diff_runs(
        &report::RunSummary::from_snapshots(&earlier.run.snapshots),
        &report::RunSummary::from_snapshots(&later.run.snapshots),
    )?;
    let csv = table.to_csv();
    print!("{csv}");
    std::fs::write(&args.out, &csv)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.out.display())))?;
    Ok(csv)
}
