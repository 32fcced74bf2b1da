//! Append-only attempt log, sliding-window aggregation and the
//! freshness-stamped snapshot cache consumed by the router.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    read_jsonl, validate_event, AttemptEvent, BusinessKind, BusinessOutcome, EventViolation, JsonlError, LineWarning,
    Millis, OperationId, OutcomeClass, ProviderId, TransportOutcome,
};
use crate::factor_config::ControlParams;

/// Scope name that aggregates across regions.
pub const GLOBAL_SCOPE: &str = "global";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub operation: OperationId,
    pub provider: ProviderId,
    pub scope: String,
}

impl MetricKey {
    pub fn new(operation: OperationId, provider: ProviderId, scope: impl Into<String>) -> Self {
        Self { operation, provider, scope: scope.into() }
    }

    pub fn is_global(&self) -> bool {
        self.scope == GLOBAL_SCOPE
    }

    /// Whether an event recorded in `region` contributes to this key.
    fn covers_region(&self, region: &str) -> bool {
        self.is_global() || self.scope == region
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TelemetryError {
    #[error("invalid event: {0:?}")]
    InvalidEvent(Vec<EventViolation>),
    #[error("duplicate attempt {request_id}#{retry_count}")]
    DuplicateAttempt { request_id: String, retry_count: u32 },
    #[error("no attempt with request id `{0}`")]
    Unmatched(String),
    #[error("percentile of an empty sample")]
    EmptySample,
    #[error("invalid window config: {0}")]
    InvalidWindow(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_ms: u64,
    pub bucket_ms: u64,
    pub completion_link_timeout_ms: u64,
    pub incident_tau_ms: u64,
}

impl WindowConfig {
    pub fn new(window_ms: u64, bucket_ms: u64, completion_link_timeout_ms: u64, incident_tau_ms: u64) -> Result<Self, TelemetryError> {
        if bucket_ms == 0 || window_ms % bucket_ms != 0 || window_ms / bucket_ms < 2 {
            return Err(TelemetryError::InvalidWindow(format!(
                "window_ms {window_ms} must be a multiple (>= 2x) of bucket_ms {bucket_ms}"
            )));
        }
        if completion_link_timeout_ms == 0 || incident_tau_ms == 0 {
            return Err(TelemetryError::InvalidWindow("timeouts must be > 0".into()));
        }
        Ok(Self { window_ms, bucket_ms, completion_link_timeout_ms, incident_tau_ms })
    }

    pub fn from_control(c: &ControlParams) -> Result<Self, TelemetryError> {
        Self::new(c.window_ms, c.bucket_ms, c.completion_link_timeout_ms, c.incident_tau_ms)
    }

    pub fn bucket_count(&self) -> u64 {
        self.window_ms / self.bucket_ms
    }

    /// Start times in `(now - window_ms, now]`.
    pub fn contains(&self, now: Millis, t: Millis) -> bool {
        t <= now && t + self.window_ms > now
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window_ms: 60_000, bucket_ms: 5_000, completion_link_timeout_ms: 120_000, incident_tau_ms: 300_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub key: MetricKey,
    pub attempted: u64,
    pub completed: u64,
    pub completion_rate: Option<f64>,
    pub latency_p95_ms: Option<f64>,
    pub latency_p99_ms: Option<f64>,
    pub mean_cost: Option<f64>,
    pub incident_penalty: f64,
    pub sample_count: u64,
    pub freshness_ts: Millis,
    pub snapshot_id: String,
}

/// Index of the nearest-rank `q`-quantile in a sorted sample of length `n`.
pub fn nearest_rank_index(n: usize, q: f64) -> usize {
    let rank = (q * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Nearest-rank percentile: the value at 0-based index `ceil(q*n) - 1` of the
/// sorted sample.
pub fn percentile(samples: &[u64], q: f64) -> Result<u64, TelemetryError> {
    if samples.is_empty() {
        return Err(TelemetryError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[nearest_rank_index(sorted.len(), q)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentKind {
    CircuitOpened,
    CircuitHalfOpen,
    CircuitClosed,
    OperatorDeclared,
}

impl IncidentKind {
    /// Only openings and operator declarations feed the penalty.
    pub fn penalizes(self) -> bool {
        matches!(self, IncidentKind::CircuitOpened | IncidentKind::OperatorDeclared)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentMarker {
    pub ts: Millis,
    pub key: MetricKey,
    pub transition: IncidentKind,
}

/// `min(1, sum exp(-(now - t_i) / tau))` over penalizing markers for `key`
/// at or before `now`. Region-scoped keys also see global markers.
pub fn incident_penalty(markers: &[IncidentMarker], key: &MetricKey, now: Millis, tau_ms: u64) -> f64 {
    let tau = tau_ms as f64;
    let sum = markers
        .iter()
        .filter(|m| m.transition.penalizes() && m.ts <= now)
        .filter(|m| m.key.operation == key.operation && m.key.provider == key.provider)
        .filter(|m| key.is_global() || m.key.scope == key.scope || m.key.is_global())
        .map(|m| (-((now - m.ts) as f64) / tau).exp())
        .fold(0.0, |a, b| a + b);
    sum.min(1.0)
}

/// A downstream workflow outcome arriving after the attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_id: String,
    pub business_kind: BusinessKind,
    pub ts: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CompletionLink {
    counted: bool,
}

#[derive(Debug, Default)]
struct LogInner {
    events: Vec<AttemptEvent>,
    attempts: HashMap<(String, u32), usize>,
    latest: HashMap<String, usize>,
    links: HashMap<usize, CompletionLink>,
    completions: Vec<CompletionRecord>,
    incidents: Vec<IncidentMarker>,
}

/// Outcome of a successful [`EventLog::link_completion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkResult {
    pub seq: u64,
    /// Whether the completion arrived inside the link timeout and is a
    /// workflow success.
    pub counted: bool,
}

/// Whether an attempt counts as completed: either its own business outcome is
/// a workflow success, or a counted completion was linked to it.
fn inline_completed(e: &AttemptEvent) -> bool {
    e.outcome_class() == OutcomeClass::WorkflowSuccess
}

/// Append-only attempt log with completion links and incident markers.
#[derive(Debug)]
pub struct EventLog {
    inner: Mutex<LogInner>,
    link_timeout_ms: u64,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new(WindowConfig::default().completion_link_timeout_ms)
    }
}

impl EventLog {
    pub fn new(link_timeout_ms: u64) -> Self {
        Self { inner: Mutex::new(LogInner::default()), link_timeout_ms }
    }

    /// Validates and appends; returns the event's sequence number. An attempt
    /// is identified by `(request_id, retry_count)`, which must be unique.
    pub fn append_event(&self, event: AttemptEvent) -> Result<u64, TelemetryError> {
        validate_event(&event).map_err(TelemetryError::InvalidEvent)?;
        let mut inner = self.inner.lock();
        let id = (event.request_id.clone(), event.retry_count);
        if inner.attempts.contains_key(&id) {
            return Err(TelemetryError::DuplicateAttempt { request_id: id.0, retry_count: id.1 });
        }
        let seq = inner.events.len();
        inner.attempts.insert(id, seq);
        let replace = inner
            .latest
            .get(&event.request_id)
            .is_none_or(|&prev| inner_retry(&inner.events, prev) <= event.retry_count);
        if replace {
            inner.latest.insert(event.request_id.clone(), seq);
        }
        inner.events.push(event);
        Ok(seq as u64)
    }

    /// Associates a later workflow outcome with the most recent attempt of
    /// `request_id`. Completions past the link timeout are recorded but not
    /// counted.
    pub fn link_completion(&self, request_id: &str, business: BusinessOutcome, ts: Millis) -> Result<LinkResult, TelemetryError> {
        let mut inner = self.inner.lock();
        let idx = *inner.latest.get(request_id).ok_or_else(|| TelemetryError::Unmatched(request_id.to_string()))?;
        let start = inner.events[idx].start_time;
        let in_time = ts >= start && ts - start <= self.link_timeout_ms;
        let counted = in_time
            && crate::domain::classify_outcome(&TransportOutcome::success(), &business) == OutcomeClass::WorkflowSuccess;
        inner.completions.push(CompletionRecord { request_id: request_id.to_string(), business_kind: business.kind, ts });
        let link = inner.links.entry(idx).or_insert(CompletionLink { counted: false });
        link.counted |= counted;
        Ok(LinkResult { seq: idx as u64, counted })
    }

    pub fn record_incident(&self, marker: IncidentMarker) {
        self.inner.lock().incidents.push(marker);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events(&self) -> Vec<AttemptEvent> {
        self.inner.lock().events.clone()
    }

    pub fn event(&self, seq: u64) -> Option<AttemptEvent> {
        self.inner.lock().events.get(seq as usize).cloned()
    }

    pub fn completions(&self) -> Vec<CompletionRecord> {
        self.inner.lock().completions.clone()
    }

    pub fn incidents(&self) -> Vec<IncidentMarker> {
        self.inner.lock().incidents.clone()
    }

    /// Whether the attempt at `seq` counts as completed.
    pub fn is_completed(&self, seq: u64) -> bool {
        let inner = self.inner.lock();
        let idx = seq as usize;
        inner.events.get(idx).is_some_and(inline_completed) || inner.links.get(&idx).is_some_and(|l| l.counted)
    }

    /// Window statistics by rescanning the whole log.
    pub fn aggregate(&self, key: &MetricKey, wc: &WindowConfig, now: Millis) -> MetricSnapshot {
        let inner = self.inner.lock();
        let mut latencies = Vec::new();
        let mut completed = 0u64;
        let mut cost_micros = 0u128;
        for (idx, e) in inner.events.iter().enumerate() {
            if e.operation != key.operation || e.provider != key.provider || !key.covers_region(&e.region) {
                continue;
            }
            if !wc.contains(now, e.start_time) {
                continue;
            }
            latencies.push(e.latency_ms);
            cost_micros += u128::from(e.cost.micros());
            if inline_completed(e) || inner.links.get(&idx).is_some_and(|l| l.counted) {
                completed += 1;
            }
        }
        let penalty = incident_penalty(&inner.incidents, key, now, wc.incident_tau_ms);
        build_snapshot(key.clone(), latencies, completed, cost_micros, penalty, now, format!("t{now:013}"))
    }
}

fn inner_retry(events: &[AttemptEvent], idx: usize) -> u32 {
    events.get(idx).map_or(0, |e| e.retry_count)
}

fn build_snapshot(
    key: MetricKey,
    mut latencies: Vec<u64>,
    completed: u64,
    cost_micros: u128,
    incident_penalty: f64,
    now: Millis,
    snapshot_id: String,
) -> MetricSnapshot {
    let attempted = latencies.len() as u64;
    latencies.sort_unstable();
    let pct = |q: f64| (!latencies.is_empty()).then(|| latencies[nearest_rank_index(latencies.len(), q)] as f64);
    MetricSnapshot {
        key,
        attempted,
        completed,
        completion_rate: (attempted > 0).then(|| completed as f64 / attempted as f64),
        latency_p95_ms: pct(0.95),
        latency_p99_ms: pct(0.99),
        mean_cost: (attempted > 0).then(|| cost_micros as f64 / 1e6 / attempted as f64),
        incident_penalty,
        sample_count: attempted,
        freshness_ts: now,
        snapshot_id,
    }
}

/// Reads an AttemptEvent JSONL file. Lenient mode skips malformed lines and
/// reports them as warnings.
pub fn load_event_log(path: impl AsRef<Path>, strict: bool) -> Result<(Vec<AttemptEvent>, Vec<LineWarning>), TelemetryError> {
    let file = File::open(path.as_ref()).map_err(|e| TelemetryError::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_jsonl(BufReader::new(file), strict).map_err(|e| match e {
        JsonlError::Malformed { line, source } => TelemetryError::MalformedLine { line, message: source.to_string() },
        other => TelemetryError::Io(other.to_string()),
    })
}

/// Log-linear latency histogram bins: values below 64 get their own bin,
/// larger values keep the top six significant bits (relative width <= 1/32).
pub mod histogram {
    pub fn bin_index(v: u64) -> u32 {
        if v < 64 {
            return v as u32;
        }
        let exp = 63 - v.leading_zeros();
        let sub = ((v >> (exp - 5)) & 31) as u32;
        64 + (exp - 6) * 32 + sub
    }

    /// Inclusive `[lower, upper]` value range of a bin.
    pub fn bin_bounds(bin: u32) -> (u64, u64) {
        if bin < 64 {
            return (u64::from(bin), u64::from(bin));
        }
        let exp = (bin - 64) / 32 + 6;
        let sub = u64::from((bin - 64) % 32);
        let width = 1u64 << (exp - 5);
        let lower = (32 + sub) * width;
        (lower, lower + width - 1)
    }
}

/// How the streaming aggregator keeps latencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PercentileMode {
    /// Retain every in-window sample; all statistics are exact for any `now`.
    #[default]
    Exact,
    /// Counters plus a latency histogram per bucket; counts are exact for
    /// bucket-aligned `now`, percentiles are reported as the upper edge of the
    /// histogram bin holding the nearest-rank sample.
    Histogram,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    start: Millis,
    latency: u64,
    cost_micros: u64,
}

#[derive(Debug, Clone, Default)]
struct Bucket {
    index: i64,
    attempted: u64,
    completed: u64,
    cost_micros: u128,
    samples: Vec<Sample>,
    completion_starts: Vec<Millis>,
    histogram: BTreeMap<u32, u64>,
}

/// Ring of fixed-duration buckets for one metric key. Bucket `k` holds start
/// times in `(k * bucket_ms, (k + 1) * bucket_ms]`, so a bucket-aligned window
/// is an exact union of buckets.
#[derive(Debug, Clone)]
pub struct WindowAggregator {
    wc: WindowConfig,
    mode: PercentileMode,
    buckets: VecDeque<Bucket>,
}

impl WindowAggregator {
    pub fn new(wc: WindowConfig, mode: PercentileMode) -> Self {
        Self { wc, mode, buckets: VecDeque::new() }
    }

    fn bucket_of(&self, t: i64) -> i64 {
        let b = self.wc.bucket_ms as i64;
        (t + b - 1).div_euclid(b) - 1
    }

    fn bucket_mut(&mut self, index: i64) -> Option<&mut Bucket> {
        let front = self.buckets.front().map(|b| b.index);
        let back = self.buckets.back().map(|b| b.index);
        match (front, back) {
            (None, _) | (_, None) => {
                self.buckets.push_back(Bucket { index, ..Default::default() });
            }
            (Some(f), Some(l)) => {
                if index < f {
                    // Older than anything retained; only accept within one window.
                    if l - index >= self.wc.bucket_count() as i64 + 1 {
                        return None;
                    }
                    for i in (index..f).rev() {
                        self.buckets.push_front(Bucket { index: i, ..Default::default() });
                    }
                } else if index > l {
                    for i in l + 1..=index {
                        self.buckets.push_back(Bucket { index: i, ..Default::default() });
                    }
                }
            }
        }
        let f = self.buckets.front().expect("non-empty").index;
        self.buckets.get_mut((index - f) as usize)
    }

    /// Drops buckets that can no longer intersect a window ending at or after `now`.
    pub fn evict(&mut self, now: Millis) {
        let oldest_needed = self.bucket_of(now as i64 - self.wc.window_ms as i64 + 1);
        while self.buckets.front().is_some_and(|b| b.index < oldest_needed) {
            self.buckets.pop_front();
        }
    }

    pub fn ingest(&mut self, start: Millis, latency: u64, cost_micros: u64, completed: bool) {
        let idx = self.bucket_of(start as i64);
        let mode = self.mode;
        let Some(bucket) = self.bucket_mut(idx) else { return };
        bucket.attempted += 1;
        bucket.cost_micros += u128::from(cost_micros);
        match mode {
            PercentileMode::Exact => bucket.samples.push(Sample { start, latency, cost_micros }),
            PercentileMode::Histogram => *bucket.histogram.entry(histogram::bin_index(latency)).or_default() += 1,
        }
        if completed {
            bucket.completed += 1;
            if mode == PercentileMode::Exact {
                bucket.completion_starts.push(start);
            }
        }
    }

    /// Counts a completion linked after ingestion, keyed by the attempt's start.
    pub fn record_completion(&mut self, start: Millis) {
        let idx = self.bucket_of(start as i64);
        let mode = self.mode;
        if let Some(bucket) = self.bucket_mut(idx) {
            bucket.completed += 1;
            if mode == PercentileMode::Exact {
                bucket.completion_starts.push(start);
            }
        }
    }

    pub fn snapshot(&self, key: MetricKey, now: Millis, incident_penalty: f64, snapshot_id: String) -> MetricSnapshot {
        let hi = self.bucket_of(now as i64);
        let lo = self.bucket_of(now as i64 - self.wc.window_ms as i64 + 1);
        let in_range = |b: &&Bucket| b.index >= lo && b.index <= hi;
        match self.mode {
            PercentileMode::Exact => {
                let mut latencies = Vec::new();
                let mut cost = 0u128;
                let mut completed = 0u64;
                for b in self.buckets.iter().filter(in_range) {
                    for s in b.samples.iter().filter(|s| self.wc.contains(now, s.start)) {
                        latencies.push(s.latency);
                        cost += u128::from(s.cost_micros);
                    }
                    completed += b.completion_starts.iter().filter(|t| self.wc.contains(now, **t)).count() as u64;
                }
                build_snapshot(key, latencies, completed, cost, incident_penalty, now, snapshot_id)
            }
            PercentileMode::Histogram => {
                let mut attempted = 0u64;
                let mut completed = 0u64;
                let mut cost = 0u128;
                let mut merged: BTreeMap<u32, u64> = BTreeMap::new();
                for b in self.buckets.iter().filter(in_range) {
                    attempted += b.attempted;
                    completed += b.completed;
                    cost += b.cost_micros;
                    for (bin, n) in &b.histogram {
                        *merged.entry(*bin).or_default() += n;
                    }
                }
                let pct = |q: f64| -> Option<f64> {
                    if attempted == 0 {
                        return None;
                    }
                    let target = nearest_rank_index(attempted as usize, q) as u64;
                    let mut seen = 0u64;
                    for (bin, n) in &merged {
                        seen += n;
                        if seen > target {
                            return Some(histogram::bin_bounds(*bin).1 as f64);
                        }
                    }
                    None
                };
                MetricSnapshot {
                    key,
                    attempted,
                    completed,
                    completion_rate: (attempted > 0).then(|| completed as f64 / attempted as f64),
                    latency_p95_ms: pct(0.95),
                    latency_p99_ms: pct(0.99),
                    mean_cost: (attempted > 0).then(|| cost as f64 / 1e6 / attempted as f64),
                    incident_penalty,
                    sample_count: attempted,
                    freshness_ts: now,
                    snapshot_id,
                }
            }
        }
    }
}

/// Snapshots for every provider of one (operation, scope), published together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSet {
    pub operation: OperationId,
    pub scope: String,
    pub freshness_ts: Millis,
    pub snapshot_id: String,
    pub providers: BTreeMap<ProviderId, MetricSnapshot>,
}

/// What the router sees: the latest published set plus a staleness verdict.
#[derive(Debug, Clone)]
pub struct SnapshotView {
    pub set: Option<Arc<SnapshotSet>>,
    pub stale: bool,
}

impl SnapshotView {
    pub fn get(&self, provider: &ProviderId) -> Option<&MetricSnapshot> {
        self.set.as_ref().and_then(|s| s.providers.get(provider))
    }

    pub fn snapshot_id(&self) -> &str {
        self.set.as_ref().map_or("", |s| s.snapshot_id.as_str())
    }

    pub fn freshness_ts(&self) -> Option<Millis> {
        self.set.as_ref().map(|s| s.freshness_ts)
    }
}

/// Published snapshot sets. Readers clone an `Arc`; publishing swaps it.
#[derive(Debug, Default)]
pub struct SnapshotCache {
    sets: RwLock<BTreeMap<(OperationId, String), Arc<SnapshotSet>>>,
}

impl SnapshotCache {
    pub fn publish(&self, set: SnapshotSet) {
        self.sets.write().insert((set.operation.clone(), set.scope.clone()), Arc::new(set));
    }

    /// Stale iff nothing was ever published or `now - freshness_ts > stale_after_ms`.
    pub fn get(&self, op: &OperationId, scope: &str, now: Millis, stale_after_ms: u64) -> SnapshotView {
        let set = self.sets.read().get(&(op.clone(), scope.to_string())).cloned();
        let stale = set.as_ref().is_none_or(|s| now.saturating_sub(s.freshness_ts) > stale_after_ms);
        SnapshotView { set, stale }
    }

    pub fn all(&self) -> Vec<Arc<SnapshotSet>> {
        self.sets.read().values().cloned().collect()
    }
}

/// Streaming side of the feedback loop: ingests attempts into per-key window
/// aggregators and publishes snapshot sets on refresh.
#[derive(Debug)]
pub struct MetricsPipeline {
    wc: WindowConfig,
    mode: PercentileMode,
    aggregators: Mutex<BTreeMap<MetricKey, WindowAggregator>>,
    incidents: Mutex<Vec<IncidentMarker>>,
    cache: SnapshotCache,
    refreshes: AtomicU64,
}

impl MetricsPipeline {
    pub fn new(wc: WindowConfig, mode: PercentileMode) -> Self {
        Self {
            wc,
            mode,
            aggregators: Mutex::new(BTreeMap::new()),
            incidents: Mutex::new(Vec::new()),
            cache: SnapshotCache::default(),
            refreshes: AtomicU64::new(0),
        }
    }

    pub fn window(&self) -> &WindowConfig {
        &self.wc
    }

    pub fn cache(&self) -> &SnapshotCache {
        &self.cache
    }

    fn keys_for(e: &AttemptEvent) -> [MetricKey; 2] {
        [
            MetricKey::new(e.operation.clone(), e.provider.clone(), e.region.clone()),
            MetricKey::new(e.operation.clone(), e.provider.clone(), GLOBAL_SCOPE),
        ]
    }

    pub fn ingest(&self, e: &AttemptEvent) {
        let completed = inline_completed(e);
        let mut aggs = self.aggregators.lock();
        for key in Self::keys_for(e) {
            aggs.entry(key)
                .or_insert_with(|| WindowAggregator::new(self.wc, self.mode))
                .ingest(e.start_time, e.latency_ms, e.cost.micros(), completed);
        }
    }

    /// Counts a completion linked (within the timeout) to an earlier attempt.
    pub fn record_completion(&self, attempt: &AttemptEvent) {
        let mut aggs = self.aggregators.lock();
        for key in Self::keys_for(attempt) {
            if let Some(a) = aggs.get_mut(&key) {
                a.record_completion(attempt.start_time);
            }
        }
    }

    pub fn record_incident(&self, marker: IncidentMarker) {
        self.incidents.lock().push(marker);
    }

    pub fn incidents(&self) -> Vec<IncidentMarker> {
        self.incidents.lock().clone()
    }

    /// Aggregates every `(scope, provider)` pair and publishes one set per
    /// scope. Snapshot ids are a zero-padded refresh counter.
    pub fn refresh(&self, op: &OperationId, scopes: &[String], providers: &[ProviderId], now: Millis) -> Vec<Arc<SnapshotSet>> {
        let seq = self.refreshes.fetch_add(1, Ordering::SeqCst);
        let snapshot_id = format!("snap-{seq:08}");
        let incidents = self.incidents.lock().clone();
        let mut aggs = self.aggregators.lock();
        let mut published = Vec::with_capacity(scopes.len());
        for scope in scopes {
            let mut set = SnapshotSet {
                operation: op.clone(),
                scope: scope.clone(),
                freshness_ts: now,
                snapshot_id: snapshot_id.clone(),
                providers: BTreeMap::new(),
            };
            for p in providers {
                let key = MetricKey::new(op.clone(), p.clone(), scope.clone());
                let penalty = incident_penalty(&incidents, &key, now, self.wc.incident_tau_ms);
                let agg = aggs.entry(key.clone()).or_insert_with(|| WindowAggregator::new(self.wc, self.mode));
                agg.evict(now);
                set.providers.insert(p.clone(), agg.snapshot(key, now, penalty, snapshot_id.clone()));
            }
            self.cache.publish(set.clone());
            published.push(Arc::new(set));
        }
        published
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{event, op, pid};
    use crate::domain::{Cost, TransportOutcome};
    use proptest::prelude::*;

    fn key(scope: &str) -> MetricKey {
        MetricKey::new(op(), pid("alpha"), scope)
    }

    fn failed(request_id: &str, start: Millis) -> AttemptEvent {
        let mut e = event(request_id, "alpha", start, 100);
        e.transport = TransportOutcome::server_error();
        e.business = BusinessOutcome::default();
        e
    }

    #[test]
    fn append_assigns_increasing_sequence() {
        let log = EventLog::default();
        assert_eq!(log.append_event(event("a", "alpha", 0, 10)), Ok(0));
        assert_eq!(log.append_event(event("b", "alpha", 0, 10)), Ok(1));
    }

    #[test]
    fn invalid_event_leaves_log_unchanged() {
        let log = EventLog::default();
        let mut e = event("a", "alpha", 100, 10);
        e.end_time = 50;
        assert!(matches!(log.append_event(e), Err(TelemetryError::InvalidEvent(_))));
        assert!(log.is_empty());
    }

    #[test]
    fn reused_attempt_id_is_rejected() {
        let log = EventLog::default();
        log.append_event(event("a", "alpha", 0, 10)).unwrap();
        assert!(matches!(log.append_event(event("a", "alpha", 5, 10)), Err(TelemetryError::DuplicateAttempt { .. })));
        let mut retry = event("a", "beta", 20, 10);
        retry.retry_count = 1;
        assert_eq!(log.append_event(retry), Ok(1));
    }

    #[test]
    fn completion_link_inside_and_outside_timeout() {
        let log = EventLog::new(120_000);
        let mut send = event("r1", "alpha", 0, 100);
        send.business = BusinessOutcome::new(BusinessKind::Accepted);
        log.append_event(send.clone()).unwrap();
        let mut late = send.clone();
        late.request_id = "r2".into();
        log.append_event(late).unwrap();

        let done = BusinessOutcome::new(BusinessKind::Completed);
        assert!(log.link_completion("r1", done, 30_000).unwrap().counted);
        assert!(!log.link_completion("r2", done, 130_000).unwrap().counted);
        assert_eq!(log.completions().len(), 2);
        assert!(log.is_completed(0));
        assert!(!log.is_completed(1));
        assert_eq!(
            log.link_completion("nope", done, 1),
            Err(TelemetryError::Unmatched("nope".into()))
        );
        let snap = log.aggregate(&key("US"), &WindowConfig::default(), 1_000);
        assert_eq!((snap.attempted, snap.completed), (2, 1));
    }

    #[test]
    fn completion_links_to_latest_attempt() {
        let log = EventLog::default();
        log.append_event(failed("r1", 0)).unwrap();
        let mut retry = event("r1", "beta", 200, 100);
        retry.retry_count = 1;
        retry.business = BusinessOutcome::new(BusinessKind::Accepted);
        log.append_event(retry).unwrap();
        let res = log.link_completion("r1", BusinessOutcome::new(BusinessKind::Delivered), 1_000).unwrap();
        assert_eq!(res.seq, 1);
    }

    #[test]
    fn completion_rate_from_reported_counts() {
        let log = EventLog::default();
        for i in 0..10_000u64 {
            let e = if i < 9_900 { event(&format!("r{i}"), "alpha", i, 50) } else { failed(&format!("r{i}"), i) };
            log.append_event(e).unwrap();
        }
        let snap = log.aggregate(&key(GLOBAL_SCOPE), &WindowConfig::default(), 10_000);
        assert_eq!(snap.completion_rate, Some(0.99));
        assert_eq!(snap.sample_count, 10_000);

        let log = EventLog::default();
        log.append_event(event("a", "alpha", 0, 1)).unwrap();
        log.append_event(event("b", "alpha", 0, 1)).unwrap();
        let snap = log.aggregate(&key("US"), &WindowConfig::default(), 10);
        assert_eq!(snap.completion_rate, Some(1.0));
        assert_eq!(snap.sample_count, 2);
    }

    #[test]
    fn empty_window_has_absent_metrics() {
        let log = EventLog::default();
        log.append_event(event("a", "alpha", 0, 1)).unwrap();
        let snap = log.aggregate(&key("US"), &WindowConfig::default(), 60_000);
        assert_eq!(snap.attempted, 0);
        assert_eq!(snap.completion_rate, None);
        assert_eq!(snap.latency_p95_ms, None);
        assert_eq!(snap.mean_cost, None);
        // 59_999 still includes the event at t=0
        assert_eq!(log.aggregate(&key("US"), &WindowConfig::default(), 59_999).attempted, 1);
    }

    #[test]
    fn region_and_global_scopes() {
        let log = EventLog::default();
        log.append_event(event("a", "alpha", 0, 1)).unwrap();
        let mut br = event("b", "alpha", 0, 1);
        br.region = "BR".into();
        log.append_event(br).unwrap();
        let wc = WindowConfig::default();
        assert_eq!(log.aggregate(&key("US"), &wc, 10).attempted, 1);
        assert_eq!(log.aggregate(&key("BR"), &wc, 10).attempted, 1);
        assert_eq!(log.aggregate(&key(GLOBAL_SCOPE), &wc, 10).attempted, 2);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[100; 100], 0.95), Ok(100));
        let one_to_hundred: Vec<u64> = (1..=100).collect();
        // Oracle: walk the sorted list to the first value covering q of the mass.
        let brute = |q: f64| {
            let n = one_to_hundred.len() as f64;
            *one_to_hundred.iter().find(|&&v| v as f64 / n >= q - 1e-12).unwrap()
        };
        assert_eq!(brute(0.95), 95);
        assert_eq!(brute(0.99), 99);
        assert_eq!(percentile(&one_to_hundred, 0.95), Ok(95));
        assert_eq!(percentile(&one_to_hundred, 0.99), Ok(99));
        assert_eq!(percentile(&[], 0.95), Err(TelemetryError::EmptySample));
        assert_eq!(percentile(&[7], 0.99), Ok(7));
    }

    #[test]
    fn incident_penalty_examples() {
        let tau = 300_000;
        assert_eq!(incident_penalty(&[], &key("US"), 1_000, tau), 0.0);
        let at = |ts| IncidentMarker { ts, key: key("US"), transition: IncidentKind::CircuitOpened };
        assert_eq!(incident_penalty(&[at(1_000_000)], &key("US"), 1_000_000, tau), 1.0);
        let p = incident_penalty(&[at(700_000)], &key("US"), 1_000_000, tau);
        assert!((p - (-1.0f64).exp()).abs() < 1e-12);
        assert!((p - 0.3679).abs() < 1e-4);
        // two fresh incidents clamp at 1
        assert_eq!(incident_penalty(&[at(10), at(10)], &key("US"), 10, tau), 1.0);
        // non-penalizing transitions and other scopes are ignored
        let closed = IncidentMarker { ts: 10, key: key("US"), transition: IncidentKind::CircuitClosed };
        assert_eq!(incident_penalty(&[closed], &key("US"), 10, tau), 0.0);
        assert_eq!(incident_penalty(&[at(10)], &key("BR"), 10, tau), 0.0);
        assert_eq!(incident_penalty(&[at(10)], &key(GLOBAL_SCOPE), 10, tau), 1.0);
    }

    #[test]
    fn snapshot_cache_staleness() {
        let cache = SnapshotCache::default();
        assert!(cache.get(&op(), "US", 0, 30_000).stale);
        cache.publish(SnapshotSet {
            operation: op(),
            scope: "US".into(),
            freshness_ts: 100_000,
            snapshot_id: "snap-1".into(),
            providers: BTreeMap::new(),
        });
        assert!(!cache.get(&op(), "US", 102_000, 30_000).stale);
        assert!(cache.get(&op(), "US", 131_000, 30_000).stale);
        assert!(!cache.get(&op(), "US", 130_000, 30_000).stale);
        assert!(cache.get(&op(), "US", 102_000, 30_000).get(&pid("never")).is_none());
    }

    #[test]
    fn pipeline_refresh_ids_are_monotone() {
        let pipe = MetricsPipeline::new(WindowConfig::default(), PercentileMode::Exact);
        pipe.ingest(&event("a", "alpha", 0, 120));
        let scopes = vec!["US".to_string(), GLOBAL_SCOPE.to_string()];
        let first = pipe.refresh(&op(), &scopes, &[pid("alpha"), pid("beta")], 5_000);
        let second = pipe.refresh(&op(), &scopes, &[pid("alpha"), pid("beta")], 10_000);
        assert!(second[0].snapshot_id > first[0].snapshot_id);
        assert!(second[0].freshness_ts >= first[0].freshness_ts);
        let alpha = &first[0].providers[&pid("alpha")];
        assert_eq!((alpha.attempted, alpha.completed), (1, 1));
        assert_eq!(alpha.latency_p95_ms, Some(120.0));
        assert_eq!(first[0].providers[&pid("beta")].attempted, 0);
        assert!(!pipe.cache().get(&op(), "US", 6_000, 30_000).stale);
    }

    #[test]
    fn histogram_bins_partition_values() {
        let mut prev_upper: Option<u64> = None;
        for bin in 0..600 {
            let (lo, hi) = histogram::bin_bounds(bin);
            assert!(lo <= hi);
            if let Some(p) = prev_upper {
                assert_eq!(lo, p + 1, "bin {bin}");
            }
            assert_eq!(histogram::bin_index(lo), bin);
            assert_eq!(histogram::bin_index(hi), bin);
            prev_upper = Some(hi);
        }
    }

    #[test]
    fn load_event_log_lenient_and_strict() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let good = crate::domain::to_jsonl_string([&event("a", "alpha", 0, 1), &event("b", "alpha", 0, 1)]);
        std::fs::write(&path, format!("{good}not-json\n")).unwrap();
        let (events, warnings) = load_event_log(&path, false).unwrap();
        assert_eq!((events.len(), warnings.len()), (2, 1));
        assert!(matches!(load_event_log(&path, true), Err(TelemetryError::MalformedLine { line: 3, .. })));
        assert!(matches!(load_event_log(dir.path().join("missing"), false), Err(TelemetryError::Io(_))));
        let (three, _) = {
            std::fs::write(&path, crate::domain::to_jsonl_string([&event("a", "p", 0, 1), &event("b", "p", 0, 1), &event("c", "p", 0, 1)])).unwrap();
            load_event_log(&path, true).unwrap()
        };
        assert_eq!(three.len(), 3);
    }

    proptest! {
        #[test]
        fn outside_window_events_do_not_change_snapshot(
            starts in prop::collection::vec(0u64..120_000, 1..200),
            extra in 0u64..1_000_000,
            now in 60_000u64..120_000,
        ) {
            let wc = WindowConfig::default();
            prop_assume!(!wc.contains(now, extra));
            let mut agg = WindowAggregator::new(wc, PercentileMode::Exact);
            for (i, s) in starts.iter().enumerate() {
                agg.ingest(*s, 10 + i as u64, 1, i % 3 == 0);
            }
            let before = agg.snapshot(key("US"), now, 0.0, "x".into());
            agg.ingest(extra, 999, 5, true);
            prop_assert_eq!(before, agg.snapshot(key("US"), now, 0.0, "x".into()));
        }

        #[test]
        fn snapshot_invariants(
            samples in prop::collection::vec((0u64..60_000, 0u64..5_000, prop::bool::ANY), 1..300),
        ) {
            let mut agg = WindowAggregator::new(WindowConfig::default(), PercentileMode::Exact);
            for (s, l, c) in &samples {
                agg.ingest(*s, *l, Cost::from_f64(0.01).micros(), *c);
            }
            let snap = agg.snapshot(key("US"), 60_000, 0.0, "x".into());
            prop_assert!(snap.completed <= snap.attempted);
            if let Some(rate) = snap.completion_rate {
                prop_assert!((0.0..=1.0).contains(&rate));
            }
            if snap.attempted > 0 {
                let lats: Vec<u64> = samples.iter().filter(|(s, _, _)| *s > 0).map(|x| x.1).collect();
                let lo = *lats.iter().min().unwrap() as f64;
                let hi = *lats.iter().max().unwrap() as f64;
                let p95 = snap.latency_p95_ms.unwrap();
                let p99 = snap.latency_p99_ms.unwrap();
                prop_assert!(lo <= p95 && p95 <= p99 && p99 <= hi);
            }
        }
    }
}
