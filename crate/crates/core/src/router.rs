//! Request-time provider selection: gates, normalized weighted scoring,
//! hysteresis, tie-breaking, fallback and protected invocation, with a
//! decision trace for every call.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::domain::{
    classify_outcome, AttemptEvent, BusinessOutcome, CircuitState, Cost, Millis, OperationId, OutcomeClass,
    ProviderId, RequestContext, TrafficClass, TransportKind, TransportOutcome, EVENT_SCHEMA_VERSION,
};
use crate::factor_config::{
    apply_overrides, ComplianceBlock, ConfigError, ConfigStore, ControlParams, FactorKind, FactorList,
    FallbackKind, GateKind, Orientation, ProviderSpec, ScoreFactorSpec, StaleMetricPolicy, TieBreakRule,
};
use crate::protection::{CircuitDecision, Protection, Rejection, RetryAction};
use crate::telemetry::{IncidentMarker, MetricsPipeline, SnapshotCache, SnapshotView};

/// Scores within this distance of the top score are tied.
pub const TIE_EPSILON: f64 = 1e-9;

/// Pseudo-gate reported for every provider when no factor list is usable.
pub const CONFIG_GATE: &str = "config_available";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateResult {
    pub provider: ProviderId,
    pub gate: String,
    pub passed: bool,
    pub reason: String,
}

impl GateResult {
    fn pass(provider: &ProviderId, gate: GateKind) -> Self {
        Self { provider: provider.clone(), gate: gate.as_str().into(), passed: true, reason: String::new() }
    }

    fn fail(provider: &ProviderId, gate: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { provider: provider.clone(), gate: gate.into(), passed: false, reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    pub factor: FactorKind,
    pub raw: Option<f64>,
    pub normalized: f64,
    pub weight: f64,
    pub used_default: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub provider: ProviderId,
    pub per_factor: Vec<FactorScore>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub trace_id: String,
    pub request_id: String,
    pub operation: OperationId,
    pub region: String,
    pub attempt: u32,
    pub factor_list_version: String,
    pub snapshot_id: String,
    pub snapshot_ts: Option<Millis>,
    pub snapshot_stale: bool,
    pub stale_policy_applied: Option<StaleMetricPolicy>,
    pub gate_results: Vec<GateResult>,
    pub candidates: Vec<ScoredCandidate>,
    pub avoided: Vec<ProviderId>,
    pub previous_choice: Option<ProviderId>,
    pub hysteresis_applied: bool,
    pub challenger_streak: u32,
    pub tie_break_applied: Option<TieBreakRule>,
    pub probe: bool,
    pub selected: Option<ProviderId>,
    pub fallback: Option<FallbackKind>,
    pub note: Option<String>,
    pub timestamp: Millis,
}

impl DecisionTrace {
    fn new(ctx: &RequestContext, attempt: u32, version: &str) -> Self {
        Self {
            trace_id: trace_id(&ctx.request_id, attempt),
            request_id: ctx.request_id.clone(),
            operation: ctx.operation.clone(),
            region: ctx.region.clone(),
            attempt,
            factor_list_version: version.to_string(),
            snapshot_id: String::new(),
            snapshot_ts: None,
            snapshot_stale: true,
            stale_policy_applied: None,
            gate_results: Vec::new(),
            candidates: Vec::new(),
            avoided: Vec::new(),
            previous_choice: None,
            hysteresis_applied: false,
            challenger_streak: 0,
            tie_break_applied: None,
            probe: false,
            selected: None,
            fallback: None,
            note: None,
            timestamp: ctx.timestamp,
        }
    }

    /// Whether every gate of `provider` passed.
    pub fn eligible(&self, provider: &ProviderId) -> bool {
        let mut gates = self.gate_results.iter().filter(|g| &g.provider == provider).peekable();
        gates.peek().is_some() && gates.all(|g| g.passed)
    }

    pub fn candidate(&self, provider: &ProviderId) -> Option<&ScoredCandidate> {
        self.candidates.iter().find(|c| &c.provider == provider)
    }

    pub fn is_config_fallback(&self) -> bool {
        self.gate_results.iter().any(|g| g.gate == CONFIG_GATE)
    }
}

pub fn trace_id(request_id: &str, attempt: u32) -> String {
    format!("{request_id}#{attempt}")
}

/// Checks the structural trace invariants against the configured providers.
pub fn validate_trace(trace: &DecisionTrace, configured: &[ProviderId]) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    if trace.selected.is_some() == trace.fallback.is_some() {
        errors.push("exactly one of selected and fallback must be set".to_string());
    }
    for p in configured {
        if !trace.gate_results.iter().any(|g| &g.provider == p) {
            errors.push(format!("provider {p} missing from gate results"));
        }
    }
    for g in &trace.gate_results {
        if !g.passed && g.reason.is_empty() {
            errors.push(format!("gate {} failed for {} without a reason", g.gate, g.provider));
        }
    }
    for c in &trace.candidates {
        let sum: f64 = c.per_factor.iter().map(|f| f.weight * f.normalized).sum();
        if (sum - c.total).abs() > TIE_EPSILON {
            errors.push(format!("candidate {} total {} != weighted sum {}", c.provider, c.total, sum));
        }
        if c.per_factor.iter().any(|f| !(0.0..=1.0).contains(&f.normalized)) {
            errors.push(format!("candidate {} has a normalized value outside [0, 1]", c.provider));
        }
    }
    if let Some(sel) = &trace.selected {
        if !trace.eligible(sel) {
            errors.push(format!("selected provider {sel} failed a gate"));
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Selected(ProviderId),
    Fallback(FallbackKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteOutcome {
    pub decision: Decision,
    pub trace: DecisionTrace,
}

impl RouteOutcome {
    pub fn selected(&self) -> Option<&ProviderId> {
        match &self.decision {
            Decision::Selected(p) => Some(p),
            Decision::Fallback(_) => None,
        }
    }
}

fn compliance_blocks(rule: &ComplianceBlock, provider: &ProviderId, ctx: &RequestContext) -> bool {
    rule.provider.as_ref().is_none_or(|p| p == provider)
        && rule.region.as_ref().is_none_or(|r| r == &ctx.region)
        && rule.tenant.as_ref().is_none_or(|t| ctx.tenant.as_ref().is_none_or(|ct| ct == t))
}

/// Evaluates every declared gate, in order, without short-circuiting.
pub fn evaluate_gates(
    fl: &FactorList,
    provider: &ProviderSpec,
    ctx: &RequestContext,
    view: &SnapshotView,
    protection: &Protection,
) -> Vec<GateResult> {
    let id = &provider.id;
    let now = ctx.timestamp;
    fl.gates
        .iter()
        .map(|gate| {
            let verdict: Result<(), String> = match gate.name {
                GateKind::CircuitClosed => {
                    let key = Protection::circuit_key(&ctx.operation, id, &ctx.region);
                    match protection.circuit_peek(&key, &fl.control, now) {
                        CircuitDecision::Deny => Err(format!("circuit {}", protection.circuit_state(&key))),
                        _ => Ok(()),
                    }
                }
                GateKind::RegionSupported => {
                    if provider.supported_regions.iter().any(|r| r == &ctx.region) {
                        Ok(())
                    } else {
                        Err(format!("region {} not supported", ctx.region))
                    }
                }
                GateKind::QuotaAvailable => protection.quota_gate(provider, &ctx.region, now),
                GateKind::ProviderEnabled => {
                    if provider.enabled {
                        Ok(())
                    } else {
                        Err("provider disabled".into())
                    }
                }
                GateKind::ComplianceAllowed => {
                    if !provider.compliance_approved {
                        Err("provider not compliance approved".into())
                    } else if gate.params.blocked.iter().any(|b| compliance_blocks(b, id, ctx)) {
                        Err("blocked by compliance policy".into())
                    } else {
                        Ok(())
                    }
                }
                GateKind::MaintenanceInactive => {
                    match gate.params.maintenance.iter().find(|w| &w.provider == id && w.start_ms <= now && now < w.end_ms) {
                        Some(w) => Err(format!("maintenance until {}", w.end_ms)),
                        None => Ok(()),
                    }
                }
                GateKind::MinSamplesMet => {
                    let min = gate.params.min_samples.unwrap_or(fl.control.min_sample_count);
                    let samples = view.get(id).map_or(0, |s| s.sample_count);
                    if samples == 0 || samples >= min {
                        Ok(())
                    } else {
                        Err(format!("{samples} samples < {min}"))
                    }
                }
            };
            match verdict {
                Ok(()) => GateResult::pass(id, gate.name),
                Err(reason) => GateResult::fail(id, gate.name.as_str(), reason),
            }
        })
        .collect()
}

/// Maps a raw metric to `[0, 1]`. Absent values take the factor default.
pub fn normalize(factor: &ScoreFactorSpec, raw: Option<f64>) -> f64 {
    let Some(y) = raw else {
        return factor.default_value;
    };
    match factor.orientation {
        Orientation::HigherIsBetter => y.clamp(0.0, 1.0),
        Orientation::LowerIsBetter => {
            let (l, u) = factor.bounds().unwrap_or((0.0, 1.0));
            if u <= l {
                return if y <= l { 1.0 } else { 0.0 };
            }
            1.0 - (y.clamp(l, u) - l) / (u - l)
        }
    }
}

/// Weighted score of one provider. Window metrics below the trusted sample
/// count are treated as absent; cost then falls back to the static cost.
pub fn score(fl: &FactorList, provider: &ProviderSpec, view: &SnapshotView) -> ScoredCandidate {
    let snap = view.get(&provider.id);
    let trusted = snap.filter(|s| s.sample_count > 0 && s.sample_count >= fl.control.min_sample_count);
    let per_factor: Vec<FactorScore> = fl
        .scores
        .iter()
        .map(|f| {
            let raw = match f.name {
                FactorKind::CompletionRate => trusted.and_then(|s| s.completion_rate),
                FactorKind::LatencyP95 => trusted.and_then(|s| s.latency_p95_ms),
                FactorKind::LatencyP99 => trusted.and_then(|s| s.latency_p99_ms),
                FactorKind::Cost => trusted.and_then(|s| s.mean_cost).or(Some(provider.static_cost)),
                FactorKind::IncidentPenalty => snap.map(|s| s.incident_penalty),
            };
            FactorScore { factor: f.name, raw, normalized: normalize(f, raw), weight: f.weight, used_default: raw.is_none() }
        })
        .collect();
    let total = per_factor.iter().map(|f| f.weight * f.normalized).sum();
    ScoredCandidate { provider: provider.id.clone(), per_factor, total }
}

/// Incumbency for one (operation, region).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StickyEntry {
    pub provider: ProviderId,
    pub last_switch_ts: Option<Millis>,
    pub challenger: Option<ProviderId>,
    pub challenger_streak: u32,
    /// Snapshot window in which the streak last advanced.
    pub last_window: Option<String>,
}

impl StickyEntry {
    pub fn new(provider: ProviderId) -> Self {
        Self { provider, last_switch_ts: None, challenger: None, challenger_streak: 0, last_window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HysteresisDecision {
    pub selected: ProviderId,
    pub previous: Option<ProviderId>,
    /// The incumbent was kept although another provider ranked first.
    pub applied: bool,
    pub switched: bool,
    pub streak: u32,
}

/// Decides between the top-ranked candidate and the incumbent and returns
/// the updated sticky entry. The streak counts distinct snapshot windows in
/// which the same challenger beat the incumbent by more than the margin.
pub fn apply_hysteresis(
    best: &ScoredCandidate,
    candidates: &[ScoredCandidate],
    sticky: Option<&StickyEntry>,
    control: &ControlParams,
    class: TrafficClass,
    window_id: &str,
    now: Millis,
) -> (HysteresisDecision, StickyEntry) {
    let Some(entry) = sticky else {
        let decision = HysteresisDecision { selected: best.provider.clone(), previous: None, applied: false, switched: false, streak: 0 };
        return (decision, StickyEntry::new(best.provider.clone()));
    };
    let previous = Some(entry.provider.clone());
    let Some(incumbent) = candidates.iter().find(|c| c.provider == entry.provider) else {
        let decision = HysteresisDecision { selected: best.provider.clone(), previous, applied: false, switched: true, streak: 0 };
        let next = StickyEntry { last_switch_ts: Some(now), ..StickyEntry::new(best.provider.clone()) };
        return (decision, next);
    };
    if incumbent.provider == best.provider {
        let decision = HysteresisDecision { selected: best.provider.clone(), previous, applied: false, switched: false, streak: 0 };
        let next = StickyEntry { challenger: None, challenger_streak: 0, last_window: None, ..entry.clone() };
        return (decision, next);
    }
    let mut next = entry.clone();
    if best.total > incumbent.total + control.hysteresis_delta {
        if next.challenger.as_ref() != Some(&best.provider) {
            next.challenger = Some(best.provider.clone());
            next.challenger_streak = 1;
            next.last_window = Some(window_id.to_string());
        } else if next.last_window.as_deref() != Some(window_id) {
            next.challenger_streak += 1;
            next.last_window = Some(window_id.to_string());
        }
    } else {
        next.challenger = None;
        next.challenger_streak = 0;
        next.last_window = None;
    }
    let streak = next.challenger_streak;
    let cooled = entry.last_switch_ts.is_none_or(|t| now.saturating_sub(t) >= control.cooldown_ms);
    if streak > 0 && cooled && streak >= control.sustained_windows_for(class) {
        let decision = HysteresisDecision { selected: best.provider.clone(), previous, applied: false, switched: true, streak };
        let next = StickyEntry { last_switch_ts: Some(now), ..StickyEntry::new(best.provider.clone()) };
        return (decision, next);
    }
    let decision = HysteresisDecision { selected: entry.provider.clone(), previous, applied: true, switched: false, streak };
    (decision, next)
}

/// Sticky, user-affinity and recency state shared by all routing calls.
#[derive(Debug, Default)]
pub struct StickyStore {
    inner: Mutex<StickyInner>,
}

#[derive(Debug, Default)]
struct StickyInner {
    entries: BTreeMap<(OperationId, String), StickyEntry>,
    users: BTreeMap<(OperationId, String), ProviderId>,
    last_selected: BTreeMap<(OperationId, String, ProviderId), Millis>,
}

impl StickyStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, op: &OperationId, scope: &str) -> Option<StickyEntry> {
        self.inner.lock().entries.get(&(op.clone(), scope.to_string())).cloned()
    }

    /// Runs `f` on the entry for `(op, scope)` under the store lock.
    pub fn update<R>(&self, op: &OperationId, scope: &str, f: impl FnOnce(Option<&StickyEntry>) -> (R, StickyEntry)) -> R {
        let mut inner = self.inner.lock();
        let key = (op.clone(), scope.to_string());
        let (r, next) = f(inner.entries.get(&key));
        inner.entries.insert(key, next);
        r
    }

    pub fn user_provider(&self, op: &OperationId, user_key: &str) -> Option<ProviderId> {
        self.inner.lock().users.get(&(op.clone(), user_key.to_string())).cloned()
    }

    pub fn last_selected(&self, op: &OperationId, scope: &str, provider: &ProviderId) -> Option<Millis> {
        self.inner.lock().last_selected.get(&(op.clone(), scope.to_string(), provider.clone())).copied()
    }

    fn note_selection(&self, ctx: &RequestContext, provider: &ProviderId) {
        let mut inner = self.inner.lock();
        inner
            .last_selected
            .insert((ctx.operation.clone(), ctx.region.clone(), provider.clone()), ctx.timestamp);
        if let Some(user) = &ctx.user_key {
            inner.users.insert((ctx.operation.clone(), user.clone()), provider.clone());
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in `[0, 1)` that is stable for a stickiness key within one
/// tie-break window.
pub fn tie_break_draw(ctx: &RequestContext, window_ms: u64) -> f64 {
    let epoch = ctx.timestamp / window_ms.max(1);
    let seed = crate::domain::fnv1a64(format!("{}|{epoch}", ctx.stickiness_key()).as_bytes());
    (mix64(seed) >> 11) as f64 / (1u64 << 53) as f64
}

/// Picks one of several candidates whose totals tie within [`TIE_EPSILON`].
pub fn tie_break(
    tied: &[&ScoredCandidate],
    ctx: &RequestContext,
    rule: TieBreakRule,
    fl: &FactorList,
    sticky: &StickyStore,
) -> ProviderId {
    let mut tied: Vec<&ScoredCandidate> = tied.to_vec();
    tied.sort_by(|a, b| a.provider.cmp(&b.provider));
    match rule {
        TieBreakRule::StickyThenLexicographic => ctx
            .user_key
            .as_ref()
            .and_then(|u| sticky.user_provider(&ctx.operation, u))
            .filter(|p| tied.iter().any(|c| &c.provider == p))
            .unwrap_or_else(|| tied[0].provider.clone()),
        TieBreakRule::WeightedRandom => {
            let u = tie_break_draw(ctx, fl.control.tie_break_window_ms);
            let sum: f64 = tied.iter().map(|c| c.total.max(0.0)).sum();
            if sum <= 0.0 {
                return tied[((u * tied.len() as f64) as usize).min(tied.len() - 1)].provider.clone();
            }
            let mut acc = 0.0;
            for c in &tied {
                acc += c.total.max(0.0) / sum;
                if u < acc {
                    return c.provider.clone();
                }
            }
            tied[tied.len() - 1].provider.clone()
        }
        TieBreakRule::PriorityOrder => tied
            .iter()
            .min_by_key(|c| (fl.provider(&c.provider).map_or(u32::MAX, |p| p.priority), c.provider.clone()))
            .map(|c| c.provider.clone())
            .expect("non-empty tie"),
        TieBreakRule::Lru => tied
            .iter()
            .min_by_key(|c| (sticky.last_selected(&ctx.operation, &ctx.region, &c.provider), c.provider.clone()))
            .map(|c| c.provider.clone())
            .expect("non-empty tie"),
    }
}

/// Everything `route` reads or updates.
#[derive(Clone, Copy)]
pub struct RouterDeps<'a> {
    pub config: &'a ConfigStore,
    pub snapshots: &'a SnapshotCache,
    pub protection: &'a Protection,
    pub sticky: &'a StickyStore,
}

/// Retry context for re-entry.
#[derive(Debug, Clone, Default)]
pub struct RouteOptions {
    pub attempt: u32,
    /// Providers already tried for this request, used only if nothing else is eligible.
    pub avoid: Vec<ProviderId>,
    /// Provider to reuse when still eligible.
    pub pin: Option<ProviderId>,
}

fn config_fallback(ctx: &RequestContext, deps: &RouterDeps<'_>, opts: &RouteOptions, err: &ConfigError) -> RouteOutcome {
    let lkg = deps.config.last_known_good(&ctx.operation);
    let mut trace = DecisionTrace::new(ctx, opts.attempt, lkg.as_ref().map_or("unavailable", |f| f.version.as_str()));
    if let Some(fl) = &lkg {
        trace.gate_results = fl.providers.iter().map(|p| GateResult::fail(&p.id, CONFIG_GATE, err.to_string())).collect();
    }
    trace.fallback = Some(FallbackKind::TypedError);
    trace.note = Some(format!("config unavailable: {err}"));
    RouteOutcome { decision: Decision::Fallback(FallbackKind::TypedError), trace }
}

/// Routes one request. Never fails: every path yields a selection or a
/// typed fallback with a complete trace.
pub fn route(ctx: &RequestContext, deps: &RouterDeps<'_>, opts: &RouteOptions) -> RouteOutcome {
    let now = ctx.timestamp;
    let base = match deps.config.get(&ctx.operation, now) {
        Ok(fl) => fl,
        Err(e) => return config_fallback(ctx, deps, opts, &e),
    };
    let fl = apply_overrides(&base, ctx);
    let control = &fl.control;
    let view = deps.snapshots.get(&ctx.operation, &ctx.region, now, control.stale_after_ms);
    let mut trace = DecisionTrace::new(ctx, opts.attempt, &fl.version);
    trace.snapshot_id = view.snapshot_id().to_string();
    trace.snapshot_ts = view.freshness_ts();
    trace.snapshot_stale = view.stale;
    trace.avoided = opts.avoid.clone();
    let incumbent = deps.sticky.get(&ctx.operation, &ctx.region);
    trace.previous_choice = incumbent.as_ref().map(|e| e.provider.clone());

    let mut eligible = Vec::new();
    for p in &fl.providers {
        let results = evaluate_gates(&fl, p, ctx, &view, deps.protection);
        if results.iter().all(|g| g.passed) {
            eligible.push(p);
        }
        trace.gate_results.extend(results);
    }
    if eligible.is_empty() {
        trace.fallback = Some(control.fallback);
        trace.note = Some("no eligible providers".into());
        return RouteOutcome { decision: Decision::Fallback(control.fallback), trace };
    }
    trace.candidates = eligible.iter().map(|p| score(&fl, p, &view)).collect();
    let candidates = trace.candidates.clone();
    let mut pool: Vec<&ScoredCandidate> = candidates.iter().filter(|c| !opts.avoid.contains(&c.provider)).collect();
    if pool.is_empty() {
        pool = candidates.iter().collect();
    }

    let finish = |mut trace: DecisionTrace, provider: ProviderId| {
        deps.sticky.note_selection(ctx, &provider);
        trace.selected = Some(provider.clone());
        RouteOutcome { decision: Decision::Selected(provider), trace }
    };

    if let Some(pin) = opts.pin.as_ref().filter(|p| pool.iter().any(|c| &c.provider == *p)) {
        trace.note = Some("retry on same provider".into());
        return finish(trace, pin.clone());
    }

    if fl.has_gate(GateKind::CircuitClosed) {
        let probe = pool.iter().find(|c| {
            let key = Protection::circuit_key(&ctx.operation, &c.provider, &ctx.region);
            deps.protection.circuit_peek(&key, control, now) == CircuitDecision::AllowProbe
        });
        if let Some(c) = probe {
            trace.probe = true;
            trace.note = Some("half-open probe".into());
            return finish(trace, c.provider.clone());
        }
    }

    if view.stale {
        trace.stale_policy_applied = Some(control.stale_metric_policy);
        let default = &control.default_provider;
        if control.stale_metric_policy == StaleMetricPolicy::PreferDefault && pool.iter().any(|c| &c.provider == default) {
            if opts.attempt == 0 {
                deps.sticky.update(&ctx.operation, &ctx.region, |entry| {
                    let next = match entry {
                        Some(e) if &e.provider == default => StickyEntry { challenger: None, challenger_streak: 0, last_window: None, ..e.clone() },
                        Some(_) => StickyEntry { last_switch_ts: Some(now), ..StickyEntry::new(default.clone()) },
                        None => StickyEntry::new(default.clone()),
                    };
                    ((), next)
                });
            }
            return finish(trace, default.clone());
        }
    }

    let top = pool.iter().map(|c| c.total).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&ScoredCandidate> = pool.iter().copied().filter(|c| top - c.total <= TIE_EPSILON).collect();
    let best_id = if tied.len() > 1 {
        trace.tie_break_applied = Some(control.tie_break);
        tie_break(&tied, ctx, control.tie_break, &fl, deps.sticky)
    } else {
        tied[0].provider.clone()
    };
    if opts.attempt > 0 {
        return finish(trace, best_id);
    }
    let best = pool.iter().find(|c| c.provider == best_id).copied().expect("best is in pool");
    let decision = deps.sticky.update(&ctx.operation, &ctx.region, |entry| {
        apply_hysteresis(best, &candidates, entry, control, ctx.traffic_class, &trace.snapshot_id, now)
    });
    trace.hysteresis_applied = decision.applied;
    trace.challenger_streak = decision.streak;
    finish(trace, decision.selected)
}

/// What a provider adapter reports for one call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallResult {
    pub transport: TransportOutcome,
    pub business: BusinessOutcome,
    pub latency_ms: u64,
    pub cost: Cost,
}

/// Builds the attempt event for an admitted or rejected attempt.
#[allow(clippy::too_many_arguments)]
pub fn attempt_event(
    ctx: &RequestContext,
    provider: &ProviderId,
    attempt: u32,
    start: Millis,
    latency_ms: u64,
    circuit_state: CircuitState,
    transport: TransportOutcome,
    business: BusinessOutcome,
    cost: Cost,
    version: &str,
) -> AttemptEvent {
    AttemptEvent {
        schema_version: EVENT_SCHEMA_VERSION,
        request_id: ctx.request_id.clone(),
        operation: ctx.operation.clone(),
        provider: provider.clone(),
        region: ctx.region.clone(),
        tenant: ctx.tenant.clone(),
        start_time: start,
        end_time: start + latency_ms,
        latency_ms,
        timeout: transport.kind == TransportKind::Timeout,
        retry_count: attempt,
        circuit_state,
        transport,
        business,
        cost,
        factor_list_version: version.to_string(),
        trace_id: trace_id(&ctx.request_id, attempt),
    }
}

/// Event for an attempt rejected before the provider was called.
pub fn rejection_event(ctx: &RequestContext, provider: &ProviderId, attempt: u32, rejection: &Rejection, state: CircuitState, version: &str) -> AttemptEvent {
    let category = match rejection {
        Rejection::BulkheadFull => "shed",
        Rejection::CircuitOpen => "circuit_open",
        Rejection::QuotaExhausted => "quota_exhausted",
        Rejection::RateLimited => "rate_limited_locally",
    };
    attempt_event(
        ctx,
        provider,
        attempt,
        ctx.timestamp,
        0,
        state,
        TransportOutcome::connection_error(category),
        BusinessOutcome::default(),
        Cost::default(),
        version,
    )
}

/// Applies the deadline: an over-deadline call becomes a timeout at the deadline.
pub fn enforce_deadline(mut result: CallResult, deadline_ms: u64) -> CallResult {
    if result.latency_ms > deadline_ms {
        result.latency_ms = deadline_ms;
        result.transport = TransportOutcome::timeout();
        result.business = BusinessOutcome::default();
    }
    result
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvokeResult {
    pub traces: Vec<DecisionTrace>,
    pub events: Vec<AttemptEvent>,
    pub incidents: Vec<IncidentMarker>,
    /// Final decision of the last routing call.
    pub decision: Decision,
    pub final_class: Option<OutcomeClass>,
}

impl InvokeResult {
    pub fn succeeded(&self) -> bool {
        self.final_class.is_some_and(OutcomeClass::is_success)
    }
}

/// Routes and invokes synchronously, retrying per the factor list's policy.
/// Every attempt yields exactly one event; events and incidents are fed to
/// `pipeline` when given.
pub fn invoke_protected(
    ctx: &RequestContext,
    deps: &RouterDeps<'_>,
    pipeline: Option<&MetricsPipeline>,
    call: &mut dyn FnMut(&ProviderId, &RequestContext) -> CallResult,
) -> InvokeResult {
    let mut result = InvokeResult {
        traces: Vec::new(),
        events: Vec::new(),
        incidents: Vec::new(),
        decision: Decision::Fallback(FallbackKind::TypedError),
        final_class: None,
    };
    let mut opts = RouteOptions::default();
    let mut attempt_ctx = ctx.clone();
    loop {
        let outcome = route(&attempt_ctx, deps, &opts);
        result.decision = outcome.decision.clone();
        result.traces.push(outcome.trace);
        let Decision::Selected(provider) = outcome.decision else {
            return result;
        };
        let Ok(fl) = deps.config.get(&ctx.operation, attempt_ctx.timestamp) else {
            return result;
        };
        let fl = apply_overrides(&fl, &attempt_ctx);
        let control = &fl.control;
        let spec = fl.provider(&provider).expect("selected provider is configured");
        let now = attempt_ctx.timestamp;
        let seen = deps.protection.transition_count();
        let new_incidents = result.incidents.len();
        let admitted = deps.protection.begin_attempt(
            &ctx.operation,
            spec,
            &ctx.region,
            control,
            fl.has_gate(GateKind::CircuitClosed),
            now,
        );
        result.incidents.extend(deps.protection.transitions_since(seen));
        let (event, class) = match admitted {
            Err(rejection) => {
                let key = Protection::circuit_key(&ctx.operation, &provider, &ctx.region);
                let event =
                    rejection_event(&attempt_ctx, &provider, opts.attempt, &rejection, deps.protection.circuit_state(&key), &fl.version);
                (event, OutcomeClass::AttemptFailure)
            }
            Ok(permit) => {
                let call_result = enforce_deadline(call(&provider, &attempt_ctx), control.deadline_for(ctx.traffic_class));
                let class = classify_outcome(&call_result.transport, &call_result.business);
                let end = now + call_result.latency_ms;
                let event = attempt_event(
                    &attempt_ctx,
                    &provider,
                    opts.attempt,
                    now,
                    call_result.latency_ms,
                    permit.circuit_state,
                    call_result.transport.clone(),
                    call_result.business,
                    call_result.cost,
                    &fl.version,
                );
                if let Some(m) = deps.protection.finish_attempt(permit, class, call_result.transport.kind, control, end) {
                    result.incidents.push(m);
                }
                (event, class)
            }
        };
        if let Some(p) = pipeline {
            p.ingest(&event);
            for m in &result.incidents[new_incidents..] {
                p.record_incident(m.clone());
            }
        }
        attempt_ctx.timestamp = event.end_time;
        result.events.push(event);
        result.final_class = Some(class);
        if class.is_success() {
            return result;
        }
        match deps.protection.retry(&ctx.operation, opts.attempt + 1, control, attempt_ctx.timestamp) {
            RetryAction::Stop => return result,
            RetryAction::RetrySame => opts.pin = Some(provider),
            RetryAction::RetryAlternate => {
                opts.pin = None;
                if !opts.avoid.contains(&provider) {
                    opts.avoid.push(provider);
                }
            }
        }
        opts.attempt += 1;
    }
}
