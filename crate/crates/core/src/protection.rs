//! Local fault containment: circuit breakers, bulkheads, retry budgets, quota
//! and rate limits, keyed per operation, provider and region.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CircuitState, Millis, OperationId, OutcomeClass, ProviderId, TransportKind};
use crate::factor_config::{ControlParams, ProviderSpec, QuotaSpec, RateLimitSpec, RetryPolicy};
use crate::telemetry::{IncidentKind, IncidentMarker, MetricKey};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitConfig {
    pub failure_threshold: f64,
    pub min_samples: u32,
    /// Count-based evaluation window (last N outcomes).
    pub window: u32,
    pub open_ms: u64,
    pub probe_budget: u32,
    pub probe_successes_to_close: u32,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        Self { failure_threshold: 0.5, min_samples: 20, window: 50, open_ms: 30_000, probe_budget: 1, probe_successes_to_close: 3 }
    }
}

impl CircuitConfig {
    pub fn from_control(c: &ControlParams) -> Self {
        Self {
            failure_threshold: c.circuit_failure_threshold,
            min_samples: c.circuit_min_samples,
            window: c.circuit_window,
            open_ms: c.circuit_open_ms,
            probe_budget: c.half_open_probe_budget,
            probe_successes_to_close: c.probe_successes_to_close,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitDecision {
    AllowNormal,
    AllowProbe,
    Deny,
}

impl CircuitDecision {
    pub fn allows(self) -> bool {
        self != CircuitDecision::Deny
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitTransition {
    pub ts: Millis,
    pub from: CircuitState,
    pub to: CircuitState,
}

impl CircuitTransition {
    pub fn incident_kind(&self) -> IncidentKind {
        match self.to {
            CircuitState::Open => IncidentKind::CircuitOpened,
            CircuitState::HalfOpen => IncidentKind::CircuitHalfOpen,
            CircuitState::Closed => IncidentKind::CircuitClosed,
        }
    }
}

/// Closed / open / half-open breaker over the last `window` outcomes.
#[derive(Debug, Clone)]
pub struct CircuitBreaker {
    pub key: MetricKey,
    pub config: CircuitConfig,
    state: CircuitState,
    outcomes: VecDeque<bool>,
    opened_at: Option<Millis>,
    probes_in_flight: u32,
    probe_successes: u32,
}

impl CircuitBreaker {
    pub fn new(key: MetricKey, config: CircuitConfig) -> Self {
        Self {
            key,
            config,
            state: CircuitState::Closed,
            outcomes: VecDeque::new(),
            opened_at: None,
            probes_in_flight: 0,
            probe_successes: 0,
        }
    }

    pub fn state(&self) -> CircuitState {
        self.state
    }

    pub fn opened_at(&self) -> Option<Millis> {
        self.opened_at
    }

    pub fn probes_in_flight(&self) -> u32 {
        self.probes_in_flight
    }

    pub fn sample_count(&self) -> u32 {
        self.outcomes.len() as u32
    }

    pub fn failure_count(&self) -> u32 {
        self.outcomes.iter().filter(|ok| !**ok).count() as u32
    }

    pub fn success_count(&self) -> u32 {
        self.sample_count() - self.failure_count()
    }

    /// What `allow` would answer, without transitioning or taking a probe slot.
    pub fn peek(&self, now: Millis) -> CircuitDecision {
        match self.state {
            CircuitState::Closed => CircuitDecision::AllowNormal,
            CircuitState::Open => {
                let opened = self.opened_at.expect("open circuit has opened_at");
                if now.saturating_sub(opened) >= self.config.open_ms && self.config.probe_budget > 0 {
                    CircuitDecision::AllowProbe
                } else {
                    CircuitDecision::Deny
                }
            }
            CircuitState::HalfOpen if self.probes_in_flight < self.config.probe_budget => CircuitDecision::AllowProbe,
            CircuitState::HalfOpen => CircuitDecision::Deny,
        }
    }

    /// Admission check. An expired open circuit moves to half-open and the
    /// call takes one probe slot.
    pub fn allow(&mut self, now: Millis) -> (CircuitDecision, Option<CircuitTransition>) {
        let decision = self.peek(now);
        let mut transition = None;
        if decision == CircuitDecision::AllowProbe {
            if self.state == CircuitState::Open {
                transition = Some(self.transition(CircuitState::HalfOpen, now));
                self.probe_successes = 0;
            }
            self.probes_in_flight += 1;
        }
        (decision, transition)
    }

    fn transition(&mut self, to: CircuitState, now: Millis) -> CircuitTransition {
        let t = CircuitTransition { ts: now, from: self.state, to };
        self.state = to;
        if to != CircuitState::HalfOpen {
            self.probes_in_flight = 0;
        }
        t
    }

    /// Records the outcome of an attempt previously admitted by [`allow`].
    /// Outcomes arriving while open (admitted before the trip) are ignored.
    ///
    /// [`allow`]: CircuitBreaker::allow
    pub fn record(&mut self, outcome: OutcomeClass, now: Millis) -> Option<CircuitTransition> {
        let success = outcome.is_success();
        match self.state {
            CircuitState::Closed => {
                self.outcomes.push_back(success);
                while self.outcomes.len() > self.config.window.max(1) as usize {
                    self.outcomes.pop_front();
                }
                let samples = self.sample_count();
                if samples >= self.config.min_samples
                    && f64::from(self.failure_count()) / f64::from(samples) >= self.config.failure_threshold
                {
                    self.opened_at = Some(now);
                    self.outcomes.clear();
                    return Some(self.transition(CircuitState::Open, now));
                }
                None
            }
            CircuitState::Open => None,
            CircuitState::HalfOpen => {
                self.probes_in_flight = self.probes_in_flight.saturating_sub(1);
                if success {
                    self.probe_successes += 1;
                    if self.probe_successes >= self.config.probe_successes_to_close {
                        self.outcomes.clear();
                        self.opened_at = None;
                        self.probe_successes = 0;
                        return Some(self.transition(CircuitState::Closed, now));
                    }
                    None
                } else {
                    self.opened_at = Some(now);
                    self.probe_successes = 0;
                    Some(self.transition(CircuitState::Open, now))
                }
            }
        }
    }
}

/// Counting semaphore; acquisition never waits.
#[derive(Debug)]
pub struct Bulkhead {
    capacity: u32,
    in_use: AtomicU32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("bulkhead full ({capacity} in use)")]
pub struct BulkheadRejected {
    pub capacity: u32,
}

/// Held while an attempt is in flight; dropping it releases the slot.
#[derive(Debug)]
pub struct BulkheadPermit {
    bulkhead: Arc<Bulkhead>,
}

impl Drop for BulkheadPermit {
    fn drop(&mut self) {
        self.bulkhead.in_use.fetch_sub(1, Ordering::AcqRel);
    }
}

impl Bulkhead {
    pub fn new(capacity: u32) -> Arc<Self> {
        Arc::new(Self { capacity: capacity.max(1), in_use: AtomicU32::new(0) })
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn in_use(&self) -> u32 {
        self.in_use.load(Ordering::Acquire)
    }

    pub fn acquire(self: &Arc<Self>) -> Result<BulkheadPermit, BulkheadRejected> {
        self.in_use
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < self.capacity).then_some(n + 1))
            .map(|_| BulkheadPermit { bulkhead: Arc::clone(self) })
            .map_err(|_| BulkheadRejected { capacity: self.capacity })
    }

    pub fn release(permit: BulkheadPermit) {
        drop(permit);
    }
}

/// Retries allowed per fixed window for one operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryBudget {
    pub budget_per_window: u32,
    pub window_ms: u64,
    consumed: u32,
    window_start: Millis,
}

impl RetryBudget {
    pub fn new(budget_per_window: u32, window_ms: u64) -> Self {
        Self { budget_per_window, window_ms: window_ms.max(1), consumed: 0, window_start: 0 }
    }

    fn roll(&mut self, now: Millis) {
        let start = now - now % self.window_ms;
        if start != self.window_start {
            self.window_start = start;
            self.consumed = 0;
        }
    }

    pub fn remaining(&mut self, now: Millis) -> u32 {
        self.roll(now);
        self.budget_per_window - self.consumed
    }

    pub fn consumed(&self) -> u32 {
        self.consumed
    }

    pub fn try_consume(&mut self, now: Millis) -> bool {
        self.roll(now);
        if self.consumed < self.budget_per_window {
            self.consumed += 1;
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryAction {
    RetrySame,
    RetryAlternate,
    Stop,
}

/// Decides whether attempt `attempt_no` (1-based, just failed) is retried.
/// Consumes budget on every retry.
pub fn retry_decision(
    budget: &mut RetryBudget,
    attempt_no: u32,
    idempotent: bool,
    policy: RetryPolicy,
    max_attempts: u32,
    now: Millis,
) -> RetryAction {
    if !idempotent || attempt_no > max_attempts {
        return RetryAction::Stop;
    }
    let action = match policy {
        RetryPolicy::SameProvider => RetryAction::RetrySame,
        RetryPolicy::AlternateProvider => RetryAction::RetryAlternate,
        RetryPolicy::None | RetryPolicy::Hedged => return RetryAction::Stop,
    };
    if budget.try_consume(now) {
        action
    } else {
        RetryAction::Stop
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaStatus {
    Available,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("quota exhausted: {used}/{limit} used, {requested} requested")]
pub struct QuotaExhausted {
    pub limit: u64,
    pub used: u64,
    pub requested: u64,
}

/// Periodic quota; `used` returns to zero at `reset_ts`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaState {
    pub limit: u64,
    pub used: u64,
    pub reset_ts: Millis,
    pub period_ms: u64,
}

impl QuotaState {
    pub fn new(limit: u64, period_ms: u64, now: Millis) -> Self {
        let period_ms = period_ms.max(1);
        Self { limit, used: 0, reset_ts: now + period_ms, period_ms }
    }

    fn apply_reset(&mut self, now: Millis) {
        if now >= self.reset_ts {
            self.used = 0;
            let periods = (now - self.reset_ts) / self.period_ms + 1;
            self.reset_ts += periods * self.period_ms;
        }
    }

    pub fn check(&mut self, now: Millis, n: u64) -> QuotaStatus {
        self.apply_reset(now);
        if self.used + n <= self.limit {
            QuotaStatus::Available
        } else {
            QuotaStatus::Exhausted
        }
    }

    /// All-or-nothing consumption.
    pub fn consume(&mut self, now: Millis, n: u64) -> Result<(), QuotaExhausted> {
        match self.check(now, n) {
            QuotaStatus::Available => {
                self.used += n;
                Ok(())
            }
            QuotaStatus::Exhausted => Err(QuotaExhausted { limit: self.limit, used: self.used, requested: n }),
        }
    }
}

/// Token bucket driven by caller-supplied time.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate_per_ms: f64,
    burst: f64,
    tokens: f64,
    last: Millis,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, burst: u32, now: Millis) -> Self {
        Self { rate_per_ms: rate_per_sec / 1000.0, burst: f64::from(burst), tokens: f64::from(burst), last: now }
    }

    fn refill(&mut self, now: Millis) {
        if now > self.last {
            self.tokens = (self.tokens + (now - self.last) as f64 * self.rate_per_ms).min(self.burst);
            self.last = now;
        }
    }

    pub fn available(&self, now: Millis) -> bool {
        let elapsed = now.saturating_sub(self.last) as f64;
        (self.tokens + elapsed * self.rate_per_ms).min(self.burst) >= 1.0
    }

    pub fn try_take(&mut self, now: Millis) -> bool {
        self.refill(now);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

/// Why an attempt was not admitted.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("bulkhead full")]
    BulkheadFull,
    #[error("circuit open")]
    CircuitOpen,
    #[error("quota exhausted")]
    QuotaExhausted,
    #[error("rate limited locally")]
    RateLimited,
}

/// An admitted attempt. Holds the bulkhead slot until finished.
#[derive(Debug)]
pub struct AttemptPermit {
    pub circuit_key: MetricKey,
    pub circuit_state: CircuitState,
    pub probe: bool,
    _bulkhead: BulkheadPermit,
}

type ScopedProvider = (ProviderId, String);

#[derive(Debug, Default)]
struct LimiterState {
    quotas: BTreeMap<ScopedProvider, QuotaState>,
    buckets: BTreeMap<ScopedProvider, TokenBucket>,
    throttled_until: BTreeMap<ScopedProvider, Millis>,
}

/// All protection primitives for a router instance.
#[derive(Debug, Default)]
pub struct Protection {
    circuits: Mutex<BTreeMap<MetricKey, CircuitBreaker>>,
    bulkheads: Mutex<BTreeMap<(OperationId, ProviderId), Arc<Bulkhead>>>,
    retry_budgets: Mutex<BTreeMap<OperationId, RetryBudget>>,
    limiters: Mutex<LimiterState>,
    transitions: Mutex<Vec<IncidentMarker>>,
}

impl Protection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn circuit_key(op: &OperationId, provider: &ProviderId, region: &str) -> MetricKey {
        MetricKey::new(op.clone(), provider.clone(), region)
    }

    fn with_circuit<R>(&self, key: &MetricKey, config: CircuitConfig, f: impl FnOnce(&mut CircuitBreaker) -> R) -> R {
        let mut circuits = self.circuits.lock();
        let cb = circuits.entry(key.clone()).or_insert_with(|| CircuitBreaker::new(key.clone(), config));
        cb.config = config;
        f(cb)
    }

    pub fn circuit_peek(&self, key: &MetricKey, control: &ControlParams, now: Millis) -> CircuitDecision {
        self.with_circuit(key, CircuitConfig::from_control(control), |cb| cb.peek(now))
    }

    pub fn circuit_state(&self, key: &MetricKey) -> CircuitState {
        self.circuits.lock().get(key).map_or(CircuitState::Closed, |cb| cb.state())
    }

    fn note(&self, key: &MetricKey, t: Option<CircuitTransition>) -> Option<IncidentMarker> {
        let t = t?;
        let marker = IncidentMarker { ts: t.ts, key: key.clone(), transition: t.incident_kind() };
        self.transitions.lock().push(marker.clone());
        Some(marker)
    }

    /// Every circuit transition so far, in order.
    pub fn transitions(&self) -> Vec<IncidentMarker> {
        self.transitions.lock().clone()
    }

    pub fn bulkhead(&self, op: &OperationId, provider: &ProviderId, capacity: u32) -> Arc<Bulkhead> {
        let mut map = self.bulkheads.lock();
        Arc::clone(map.entry((op.clone(), provider.clone())).or_insert_with(|| Bulkhead::new(capacity)))
    }

    fn scoped(provider: &ProviderSpec, region: &str) -> ScopedProvider {
        (provider.id.clone(), region.to_string())
    }

    fn quota_entry<'a>(state: &'a mut LimiterState, key: &ScopedProvider, spec: &QuotaSpec, now: Millis) -> &'a mut QuotaState {
        state.quotas.entry(key.clone()).or_insert_with(|| QuotaState::new(spec.limit, spec.period_ms, now))
    }

    fn bucket_entry<'a>(state: &'a mut LimiterState, key: &ScopedProvider, spec: &RateLimitSpec, now: Millis) -> &'a mut TokenBucket {
        state.buckets.entry(key.clone()).or_insert_with(|| TokenBucket::new(spec.rate_per_sec, spec.burst, now))
    }

    /// The quota gate: quota left, no active throttle flag and a local token.
    /// `Err` carries the failure reason.
    pub fn quota_gate(&self, provider: &ProviderSpec, region: &str, now: Millis) -> Result<(), String> {
        let key = Self::scoped(provider, region);
        let mut state = self.limiters.lock();
        if let Some(until) = state.throttled_until.get(&key) {
            if now < *until {
                return Err(format!("throttled by provider until {until}"));
            }
        }
        if let Some(spec) = &provider.quota {
            let q = Self::quota_entry(&mut state, &key, spec, now);
            if q.check(now, 1) == QuotaStatus::Exhausted {
                return Err(format!("quota exhausted ({}/{})", q.used, q.limit));
            }
        }
        if let Some(spec) = &provider.rate_limit {
            if !Self::bucket_entry(&mut state, &key, spec, now).available(now) {
                return Err("local rate limit".into());
            }
        }
        Ok(())
    }

    /// Admission for one attempt: bulkhead, circuit, quota and token bucket.
    /// With `enforce_circuit` off the circuit only observes outcomes.
    /// On rejection nothing is held.
    pub fn begin_attempt(
        &self,
        op: &OperationId,
        provider: &ProviderSpec,
        region: &str,
        control: &ControlParams,
        enforce_circuit: bool,
        now: Millis,
    ) -> Result<AttemptPermit, Rejection> {
        let bulkhead = self.bulkhead(op, &provider.id, control.bulkhead_capacity);
        let slot = bulkhead.acquire().map_err(|_| Rejection::BulkheadFull)?;
        let key = Self::circuit_key(op, &provider.id, region);
        let config = CircuitConfig::from_control(control);
        // Check limits before touching the circuit so a rejection takes no probe slot.
        {
            let scoped = Self::scoped(provider, region);
            let mut state = self.limiters.lock();
            if let Some(spec) = &provider.quota {
                if Self::quota_entry(&mut state, &scoped, spec, now).check(now, 1) == QuotaStatus::Exhausted {
                    return Err(Rejection::QuotaExhausted);
                }
            }
            if let Some(spec) = &provider.rate_limit {
                if !Self::bucket_entry(&mut state, &scoped, spec, now).available(now) {
                    return Err(Rejection::RateLimited);
                }
            }
        }
        let (decision, transition, state) = self.with_circuit(&key, config, |cb| {
            if !enforce_circuit {
                return (CircuitDecision::AllowNormal, None, cb.state());
            }
            let (d, t) = cb.allow(now);
            (d, t, cb.state())
        });
        self.note(&key, transition);
        if decision == CircuitDecision::Deny {
            return Err(Rejection::CircuitOpen);
        }
        {
            let scoped = Self::scoped(provider, region);
            let mut state = self.limiters.lock();
            if let Some(spec) = &provider.quota {
                let _ = Self::quota_entry(&mut state, &scoped, spec, now).consume(now, 1);
            }
            if let Some(spec) = &provider.rate_limit {
                Self::bucket_entry(&mut state, &scoped, spec, now).try_take(now);
            }
        }
        Ok(AttemptPermit {
            circuit_key: key,
            circuit_state: state,
            probe: decision == CircuitDecision::AllowProbe,
            _bulkhead: slot,
        })
    }

    /// The transition produced by admission, if any, is already recorded;
    /// this records the attempt's outcome and returns any new transition as
    /// an incident marker. A provider throttling response sets the throttle
    /// flag for `control.throttle_ms`.
    pub fn finish_attempt(
        &self,
        permit: AttemptPermit,
        outcome: OutcomeClass,
        transport: TransportKind,
        control: &ControlParams,
        now: Millis,
    ) -> Option<IncidentMarker> {
        if transport == TransportKind::RateLimited {
            let key = (permit.circuit_key.provider.clone(), permit.circuit_key.scope.clone());
            self.limiters.lock().throttled_until.insert(key, now + control.throttle_ms);
        }
        let key = permit.circuit_key.clone();
        let t = self.with_circuit(&key, CircuitConfig::from_control(control), |cb| cb.record(outcome, now));
        drop(permit);
        self.note(&key, t)
    }

    /// Transitions recorded after the first `index`, for forwarding
    /// admission-time half-open transitions to telemetry.
    pub fn transitions_since(&self, index: usize) -> Vec<IncidentMarker> {
        self.transitions.lock().get(index..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.lock().len()
    }

    pub fn retry(&self, op: &OperationId, attempt_no: u32, control: &ControlParams, now: Millis) -> RetryAction {
        let mut budgets = self.retry_budgets.lock();
        let budget = budgets
            .entry(op.clone())
            .or_insert_with(|| RetryBudget::new(control.retry_budget_per_window, control.retry_budget_window_ms));
        retry_decision(budget, attempt_no, control.idempotent, control.retry_policy, control.max_attempts, now)
    }
}
