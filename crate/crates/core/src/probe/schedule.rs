use std::collections::{HashMap, VecDeque};

use futures::stream::{FuturesUnordered, StreamExt};
use tokio::time::{sleep_until, timeout, Instant};

use super::transport::{host_key, Clock, HttpResponse, Transport, TransportError};
use super::{build_identify_url, classify_response, ProbeConfig, ProbeError, RETRYABLE_STATUSES};
use crate::catalog::{NormalizedUrl, ProbeOutcome, ProbeRecord};
use crate::normalize;

#[derive(Debug, Clone)]
struct Job {
    idx: usize,
    url: String,
    hops: u32,
    attempt: u32,
    ready_at: Instant,
}

#[derive(Default)]
struct HostQueue {
    jobs: VecDeque<Job>,
    last_dispatch: Option<Instant>,
    busy: bool,
}

impl HostQueue {
    fn free_at(&self, delay: std::time::Duration) -> Option<Instant> {
        self.last_dispatch.map(|t| t + delay)
    }
}

struct Scheduler<'a> {
    config: &'a ProbeConfig,
    hosts: HashMap<String, HostQueue>,
    // first-seen order, for deterministic scans
    host_order: Vec<String>,
}

impl<'a> Scheduler<'a> {
    fn enqueue(&mut self, job: Job, front: bool) {
        let key = host_key(&job.url);
        let queue = self.hosts.entry(key.clone()).or_insert_with(|| {
            self.host_order.push(key);
            HostQueue::default()
        });
        if front {
            queue.jobs.push_front(job);
        } else {
            queue.jobs.push_back(job);
        }
    }

    fn pending(&self) -> bool {
        self.hosts.values().any(|q| !q.jobs.is_empty())
    }

    /// Picks the ready job with the lowest input index among idle hosts whose
    /// politeness delay has passed.
    fn take_ready(&mut self, now: Instant) -> Option<Job> {
        let delay = self.config.per_host_delay();
        let mut best: Option<(usize, &str, usize)> = None;
        for key in &self.host_order {
            let q = &self.hosts[key];
            if q.busy || q.free_at(delay).is_some_and(|t| t > now) {
                continue;
            }
            let candidate = q
                .jobs
                .iter()
                .enumerate()
                .filter(|(_, j)| j.ready_at <= now)
                .min_by_key(|(_, j)| j.idx);
            if let Some((pos, job)) = candidate {
                if best.is_none_or(|(idx, _, _)| job.idx < idx) {
                    best = Some((job.idx, key.as_str(), pos));
                }
            }
        }
        let (_, key, pos) = best?;
        let key = key.to_string();
        let q = self.hosts.get_mut(&key).expect("host exists");
        q.busy = true;
        q.last_dispatch = Some(now);
        q.jobs.remove(pos)
    }

    fn next_wake(&self) -> Option<Instant> {
        let delay = self.config.per_host_delay();
        self.hosts
            .values()
            .filter(|q| !q.busy)
            .filter_map(|q| {
                let ready = q.jobs.iter().map(|j| j.ready_at).min()?;
                Some(q.free_at(delay).map_or(ready, |t| t.max(ready)))
            })
            .min()
    }

    fn release(&mut self, url: &str) {
        if let Some(q) = self.hosts.get_mut(&host_key(url)) {
            q.busy = false;
        }
    }
}

fn is_redirect(status: u16) -> bool {
    matches!(status, 301 | 302 | 303 | 307 | 308)
}

fn resolve_location(base: &str, location: &str) -> Option<String> {
    let base = url::Url::parse(base).ok()?;
    base.join(location).ok().map(String::from)
}

/// Probes every URL once (plus retries), honouring the per-host delay and the
/// in-flight bound. Returns one record per input, in input order.
///
/// Each host is served by one request at a time and never twice within
/// `per_host_delay`. Redirect hops re-enter the queue of their target host so
/// they obey the same rules. Only transport failures and 500/502/503/504 are
/// retried, `retry_spacing` after the failed attempt.
pub async fn probe_all<T, C>(
    urls: &[String],
    config: &ProbeConfig,
    clock: &C,
    transport: &T,
) -> Result<Vec<ProbeRecord>, ProbeError>
where
    T: Transport,
    C: Clock,
{
    config.validate()?;
    let mut targets = Vec::with_capacity(urls.len());
    for u in urls {
        let identify = build_identify_url(u)?;
        let key = normalize::strong_normalize(u)
            .map_err(|e| ProbeError::NotNormalizable(u.clone(), e.to_string()))?;
        targets.push((identify, key));
    }

    let start = Instant::now();
    let mut sched = Scheduler {
        config,
        hosts: HashMap::new(),
        host_order: Vec::new(),
    };
    for (idx, (identify, _)) in targets.iter().enumerate() {
        sched.enqueue(
            Job {
                idx,
                url: identify.clone(),
                hops: 0,
                attempt: 1,
                ready_at: start,
            },
            false,
        );
    }

    let mut results: Vec<Option<ProbeRecord>> = vec![None; targets.len()];
    let mut in_flight = FuturesUnordered::new();
    let request_timeout = config.timeout();

    loop {
        let now = Instant::now();
        while in_flight.len() < config.max_in_flight {
            let Some(job) = sched.take_ready(now) else {
                break;
            };
            tracing::debug!(url = %job.url, attempt = job.attempt, hops = job.hops, "dispatch");
            let allow_tls = config.allow_tls;
            in_flight.push(async move {
                let result = if !allow_tls && job.url.to_ascii_lowercase().starts_with("https://") {
                    Err(TransportError::Tls("https disabled".into()))
                } else {
                    match timeout(request_timeout, transport.get(&job.url, request_timeout)).await {
                        Ok(r) => r,
                        Err(_) => Err(TransportError::Timeout),
                    }
                };
                (job, result)
            });
        }

        if in_flight.is_empty() && !sched.pending() {
            break;
        }
        let wake = if in_flight.len() < config.max_in_flight {
            sched.next_wake()
        } else {
            None
        };

        tokio::select! {
            Some((job, result)) = in_flight.next(), if !in_flight.is_empty() => {
                sched.release(&job.url);
                let (identify, key) = &targets[job.idx];
                let finished_at = Instant::now();
                if let Some(record) = settle(job, result, identify, key, config, clock, finished_at, &mut sched) {
                    let idx = record.0;
                    results[idx] = Some(record.1);
                }
            }
            _ = sleep_until(wake.unwrap_or(now)), if wake.is_some() => {}
            else => unreachable!("queued jobs without a wake time"),
        }
    }

    Ok(results
        .into_iter()
        .map(|r| r.expect("every job settles"))
        .collect())
}

/// Handles a completed request: follows a redirect, schedules a retry, or
/// produces the final record.
#[allow(clippy::too_many_arguments)]
fn settle<C: Clock>(
    job: Job,
    result: Result<HttpResponse, TransportError>,
    identify: &str,
    key: &NormalizedUrl,
    config: &ProbeConfig,
    clock: &C,
    now: Instant,
    sched: &mut Scheduler<'_>,
) -> Option<(usize, ProbeRecord)> {
    if let Ok(resp) = &result {
        if is_redirect(resp.status) && job.hops < config.follow_redirects {
            if let Some(next) = resp
                .header("location")
                .and_then(|l| resolve_location(&job.url, l))
            {
                sched.enqueue(
                    Job {
                        url: next,
                        hops: job.hops + 1,
                        ready_at: now,
                        ..job
                    },
                    true,
                );
                return None;
            }
        }
    }

    let retryable = match &result {
        Err(_) => true,
        Ok(resp) => RETRYABLE_STATUSES.contains(&resp.status),
    };
    if retryable && job.attempt <= config.retries {
        sched.enqueue(
            Job {
                idx: job.idx,
                url: identify.to_string(),
                hops: 0,
                attempt: job.attempt + 1,
                ready_at: now + config.retry_spacing(),
            },
            false,
        );
        return None;
    }

    let probe_url = identify
        .strip_suffix("?verb=Identify")
        .unwrap_or(identify)
        .to_string();
    let mut record = ProbeRecord {
        probe_url,
        normalized: key.clone(),
        outcome: ProbeOutcome::TransportError,
        http_status: None,
        repository_name: None,
        protocol_version: None,
        earliest_datestamp: None,
        attempts: job.attempt,
        completed_at: clock.now(),
        detail: None,
    };
    match result {
        Err(e) => record.detail = Some(e.to_string()),
        Ok(resp) => {
            let c = classify_response(resp.status, &resp.body);
            record.outcome = c.outcome;
            record.http_status = Some(resp.status);
            record.repository_name = c.identity.repository_name;
            record.protocol_version = c.identity.protocol_version;
            record.earliest_datestamp = c.identity.earliest_datestamp;
            if job.hops > 0 {
                record.detail = Some(format!("redirected to {}", job.url));
            }
        }
    }
    Some((job.idx, record))
}
