//! Discrete-event simulation of providers under injected faults, the
//! closed-form failover model, preference state-machine conformance and
//! counterfactual replay of recorded event logs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    classify_outcome, AttemptEvent, BusinessKind, BusinessOutcome, CircuitState, Cost, Millis, OperationId,
    OutcomeClass, ProviderId, RequestContext, TrafficClass, TransportOutcome, EVENT_SCHEMA_VERSION,
};
use crate::factor_config::{
    apply_overrides, validate_factor_list, ConfigStore, FactorKind, FactorList, FallbackKind, OverrideSpec,
    PatchSpec, ScopeSpec, StaleMetricPolicy, DEFAULT_LKG_BOUND_MS,
};
use crate::protection::{AttemptPermit, Protection, RetryAction};
use crate::router::{
    attempt_event, enforce_deadline, rejection_event, route, CallResult, Decision, DecisionTrace, RouteOptions,
    RouterDeps, StickyStore,
};
use crate::telemetry::{
    load_event_log, IncidentKind, IncidentMarker, MetricsPipeline, PercentileMode, TelemetryError, WindowConfig,
};

/// A switch that undoes the previous switch within this interval is a flap.
pub const FLAP_WINDOW_MS: u64 = 300_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("empty availability list")]
    Empty,
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

fn check_prob(name: &'static str, value: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { name, value })
    }
}

/// Availability of dependencies that must all succeed.
pub fn availability_serial(avails: &[f64]) -> Result<f64, ModelError> {
    if avails.is_empty() {
        return Err(ModelError::Empty);
    }
    for a in avails {
        check_prob("availability", *a)?;
    }
    Ok(avails.iter().product())
}

/// Availability of two independent alternatives.
pub fn availability_parallel(a1: f64, a2: f64) -> Result<f64, ModelError> {
    check_prob("a1", a1)?;
    check_prob("a2", a2)?;
    Ok(1.0 - (1.0 - a1) * (1.0 - a2))
}

/// Expected failed requests over an outage of `d_min` minutes when traffic
/// moves to the secondary after `t_switch_min` minutes.
pub fn expected_failures(lambda_per_min: f64, d_min: f64, t_switch_min: f64, p_f: f64, p_s: f64) -> Result<f64, ModelError> {
    if !(lambda_per_min >= 0.0 && lambda_per_min.is_finite()) {
        return Err(ModelError::InvalidParameter { name: "lambda", value: lambda_per_min });
    }
    if !(d_min >= 0.0 && d_min.is_finite()) {
        return Err(ModelError::InvalidParameter { name: "duration", value: d_min });
    }
    if !(t_switch_min >= 0.0) {
        return Err(ModelError::InvalidParameter { name: "switch", value: t_switch_min });
    }
    check_prob("p_f", p_f)?;
    check_prob("p_s", p_s)?;
    let t = d_min.min(t_switch_min);
    Ok(lambda_per_min * (t * (1.0 - p_f) + (d_min - t) * (1.0 - p_s)))
}

/// Delay terms whose sum bounds the time from degradation to traffic shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailoverTerms {
    pub detect_ms: u64,
    pub publish_ms: u64,
    pub aggregate_ms: u64,
    pub refresh_ms: u64,
    pub decision_ms: u64,
}

impl FailoverTerms {
    pub fn bound(&self) -> u64 {
        failover_latency_bound(self.detect_ms, self.publish_ms, self.aggregate_ms, self.refresh_ms, self.decision_ms)
    }
}

pub fn failover_latency_bound(t_detect: u64, t_publish: u64, t_aggregate: u64, t_refresh: u64, t_decision: u64) -> u64 {
    t_detect + t_publish + t_aggregate + t_refresh + t_decision
}

/// One row of the reference failover comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub label: String,
    pub switch_min: f64,
    pub expected_failures: f64,
    pub reference: Option<f64>,
}

pub const TABLE_LAMBDA: f64 = 1000.0;
pub const TABLE_DURATION_MIN: f64 = 10.0;
pub const TABLE_P_F: f64 = 0.05;
pub const TABLE_P_S: f64 = 0.99;

/// The five strategies of the reference table, from the closed form. Only the
/// 0.5-minute row disagrees with the printed reference value (595).
pub fn reference_table() -> Vec<ModelRow> {
    [
        ("No failover", 10.0, 9500.0),
        ("Manual failover", 8.0, 7620.0),
        ("Static health-check failover", 2.0, 1980.0),
        ("Dynamic telemetry routing", 0.5, 595.0),
        ("Ideal instant switch", 0.0, 100.0),
    ]
    .into_iter()
    .map(|(label, t, reference)| ModelRow {
        label: label.to_string(),
        switch_min: t,
        expected_failures: expected_failures(TABLE_LAMBDA, TABLE_DURATION_MIN, t, TABLE_P_F, TABLE_P_S)
            .expect("table parameters are valid"),
        reference: Some(reference),
    })
    .collect()
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("incompatible event schema version {0}")]
    IncompatibleSchema(u32),
    #[error("empty event log")]
    EmptyLog,
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("state machine check needs recorded traces")]
    NoTraces,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Error-diffusion outcomes plus fractional expected-failure accounting.
    #[default]
    Expectation,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    DeterministicUniform,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyDist {
    Constant { ms: u64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl LatencyDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatencyDist::Constant { ms } => ms as f64,
            LatencyDist::Lognormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
        }
    }

    fn valid(&self) -> bool {
        match *self {
            LatencyDist::Constant { .. } => true,
            LatencyDist::Lognormal { mu, sigma } => mu > 0.0 && sigma > 0.0 && mu.is_finite() && sigma.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    FullOutage,
    PartialRegional,
    RateLimit,
    LatencyOnly,
    RecoveryRamp,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPhase {
    pub kind: FaultKind,
    pub start_ms: Millis,
    pub end_ms: Millis,
    #[serde(default)]
    pub degraded_success_prob: f64,
    /// Empty means every region.
    #[serde(default)]
    pub affected_regions: Vec<String>,
    #[serde(default = "one")]
    pub latency_multiplier: f64,
    #[serde(default)]
    pub reject_fraction: f64,
    #[serde(default)]
    pub ramp_duration_ms: Option<u64>,
}

impl FaultPhase {
    fn active(&self, t: Millis, region: &str) -> bool {
        self.start_ms <= t && t < self.end_ms && (self.affected_regions.is_empty() || self.affected_regions.iter().any(|r| r == region))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionOverride {
    #[serde(default)]
    pub success_prob: Option<f64>,
    #[serde(default)]
    pub latency: Option<LatencyDist>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderModel {
    pub id: ProviderId,
    pub base_success_prob: f64,
    pub latency: LatencyDist,
    #[serde(default)]
    pub regions: BTreeMap<String, RegionOverride>,
    #[serde(default)]
    pub cost_per_attempt: f64,
    #[serde(default)]
    pub faults: Vec<FaultPhase>,
}

/// Success and rejection probabilities plus latency scale at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProviderCondition {
    pub success_prob: f64,
    pub reject_prob: f64,
    pub latency_multiplier: f64,
    pub latency: LatencyDist,
}

impl ProviderModel {
    pub fn base_success_in(&self, region: &str) -> f64 {
        self.regions.get(region).and_then(|o| o.success_prob).unwrap_or(self.base_success_prob)
    }

    pub fn condition(&self, t: Millis, region: &str) -> ProviderCondition {
        let base = self.base_success_in(region);
        let mut c = ProviderCondition {
            success_prob: base,
            reject_prob: 0.0,
            latency_multiplier: 1.0,
            latency: self.regions.get(region).and_then(|o| o.latency).unwrap_or(self.latency),
        };
        if let Some(phase) = self.faults.iter().find(|p| p.active(t, region)) {
            match phase.kind {
                FaultKind::FullOutage | FaultKind::PartialRegional => c.success_prob = phase.degraded_success_prob,
                FaultKind::RateLimit => c.reject_prob = phase.reject_fraction,
                FaultKind::LatencyOnly => c.latency_multiplier = phase.latency_multiplier,
                FaultKind::RecoveryRamp => {
                    let ramp = phase.ramp_duration_ms.unwrap_or(phase.end_ms - phase.start_ms).max(1);
                    let f = ((t - phase.start_ms) as f64 / ramp as f64).min(1.0);
                    c.success_prob = phase.degraded_success_prob + (base - phase.degraded_success_prob) * f;
                }
            }
        }
        c
    }
}

fn default_regions() -> Vec<RegionWeight> {
    vec![RegionWeight { name: "US".into(), weight: 1.0 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryImpairment {
    #[serde(default)]
    pub lag_ms: u64,
    #[serde(default)]
    pub frozen_from_ms: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigImpairment {
    pub unavailable_from_ms: Millis,
    pub unavailable_until_ms: Millis,
}

/// An emergency override installed at a point in virtual time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorAction {
    pub at_ms: Millis,
    #[serde(default)]
    pub scope: ScopeSpec,
    pub patch: PatchSpec,
    #[serde(default)]
    pub note: Option<String>,
}

/// One variant of a swept scenario: the default provider is disabled at
/// `switch_at_ms` (never when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub label: String,
    #[serde(default)]
    pub switch_at_ms: Option<Millis>,
    #[serde(default)]
    pub reference_failures: Option<f64>,
}

fn default_report_bucket() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    pub duration_ms: u64,
    pub arrival_rate_per_min: f64,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
    #[serde(default = "default_regions")]
    pub regions: Vec<RegionWeight>,
    #[serde(default)]
    pub traffic_class: TrafficClass,
    pub providers: Vec<ProviderModel>,
    pub factor_list: FactorList,
    #[serde(default)]
    pub telemetry_impairment: Option<TelemetryImpairment>,
    #[serde(default)]
    pub config_impairment: Option<ConfigImpairment>,
    #[serde(default)]
    pub config_lkg_bound_ms: Option<u64>,
    #[serde(default)]
    pub operator_actions: Vec<OperatorAction>,
    #[serde(default)]
    pub failover_terms: Option<FailoverTerms>,
    #[serde(default)]
    pub sweep: Vec<SweepRow>,
    #[serde(default)]
    pub mode: SimMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_report_bucket")]
    pub report_bucket_ms: u64,
}

impl Scenario {
    pub fn from_yaml(text: &str) -> Result<Self, SimError> {
        let mut s: Scenario = serde_yaml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.factor_list = s.factor_list.seal();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| SimError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_yaml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut errs = Vec::new();
        if self.providers.is_empty() {
            errs.push("at least one provider is required".to_string());
        }
        if !(self.arrival_rate_per_min > 0.0 && self.arrival_rate_per_min.is_finite()) {
            errs.push(format!("arrival rate must be positive (got {})", self.arrival_rate_per_min));
        }
        if self.duration_ms == 0 {
            errs.push("duration must be positive".into());
        }
        if self.report_bucket_ms == 0 {
            errs.push("report bucket must be positive".into());
        }
        if self.regions.is_empty() {
            errs.push("at least one region is required".into());
        }
        let weight: f64 = self.regions.iter().map(|r| r.weight).sum();
        if (weight - 1.0).abs() > 1e-9 || self.regions.iter().any(|r| r.weight < 0.0) {
            errs.push(format!("region weights must be non-negative and sum to 1 (got {weight})"));
        }
        for m in &self.providers {
            let probs = std::iter::once(m.base_success_prob).chain(m.regions.values().filter_map(|o| o.success_prob));
            if probs.into_iter().any(|p| !(0.0..=1.0).contains(&p)) {
                errs.push(format!("{}: success probabilities must lie in [0, 1]", m.id));
            }
            if !m.latency.valid() || m.regions.values().filter_map(|o| o.latency).any(|l| !l.valid()) {
                errs.push(format!("{}: lognormal parameters must be positive", m.id));
            }
            if m.cost_per_attempt < 0.0 {
                errs.push(format!("{}: negative cost", m.id));
            }
            let mut prev_end = 0;
            for (i, f) in m.faults.iter().enumerate() {
                if f.start_ms >= f.end_ms {
                    errs.push(format!("{}: fault {i} must start before it ends", m.id));
                }
                if i > 0 && f.start_ms < prev_end {
                    errs.push(format!("{}: fault {i} overlaps or precedes the previous phase", m.id));
                }
                prev_end = f.end_ms;
                if !(0.0..=1.0).contains(&f.degraded_success_prob) || !(0.0..=1.0).contains(&f.reject_fraction) {
                    errs.push(format!("{}: fault {i} probabilities must lie in [0, 1]", m.id));
                }
                if f.kind == FaultKind::PartialRegional && f.affected_regions.is_empty() {
                    errs.push(format!("{}: partial regional fault {i} needs affected regions", m.id));
                }
                if !(f.latency_multiplier > 0.0) {
                    errs.push(format!("{}: fault {i} latency multiplier must be positive", m.id));
                }
            }
        }
        if let Err(vs) = validate_factor_list(&self.factor_list) {
            errs.extend(vs.iter().map(|v| format!("factor list: {v}")));
        }
        for p in self.factor_list.provider_ids() {
            if !self.providers.iter().any(|m| &m.id == p) {
                errs.push(format!("provider {p} has no model"));
            }
        }
        if let Some(c) = &self.config_impairment {
            if c.unavailable_from_ms >= c.unavailable_until_ms {
                errs.push("config impairment must start before it ends".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SimError::InvalidScenario(errs))
        }
    }

    pub fn model(&self, id: &ProviderId) -> Option<&ProviderModel> {
        self.providers.iter().find(|m| &m.id == id)
    }

    pub fn primary(&self) -> &ProviderId {
        &self.factor_list.control.default_provider
    }

    /// The first configured provider other than the default.
    pub fn secondary(&self) -> Option<&ProviderId> {
        self.factor_list.provider_ids().find(|p| *p != self.primary())
    }

    /// One scenario per sweep row, each with the switch as an operator action.
    pub fn expand_sweep(&self) -> Vec<(SweepRow, Scenario)> {
        self.sweep
            .iter()
            .map(|row| {
                let mut s = self.clone();
                s.sweep.clear();
                s.name = format!("{} / {}", self.name, row.label);
                if let Some(at) = row.switch_at_ms {
                    let mut patch = PatchSpec::default();
                    patch.enabled.insert(self.primary().clone(), false);
                    s.operator_actions.push(OperatorAction { at_ms: at, scope: ScopeSpec::default(), patch, note: Some(row.label.clone()) });
                    s.operator_actions.sort_by_key(|a| a.at_ms);
                }
                (row.clone(), s)
            })
            .collect()
    }

    /// Configured failover terms, or terms derived from the control parameters.
    pub fn failover_terms(&self) -> FailoverTerms {
        self.failover_terms.unwrap_or_else(|| {
            let c = &self.factor_list.control;
            FailoverTerms {
                detect_ms: c.window_ms,
                publish_ms: self.telemetry_impairment.as_ref().map_or(0, |t| t.lag_ms),
                aggregate_ms: c.bucket_ms,
                refresh_ms: c.metric_refresh_interval_ms,
                decision_ms: u64::from(c.sustained_windows_for(self.traffic_class).saturating_sub(1)) * c.metric_refresh_interval_ms,
            }
        })
    }

    /// Deterministic request contexts for the whole run.
    pub fn arrivals(&self, seed: u64) -> Vec<RequestContext> {
        let mut arrival_rng = stream(seed, 1);
        let mut region_rng = stream(seed, 4);
        let op = self.factor_list.operation.clone();
        let per_ms = self.arrival_rate_per_min / 60_000.0;
        let mut out = Vec::new();
        let mut t = 0.0f64;
        let mut i = 0u64;
        loop {
            let ts = match self.arrival_process {
                ArrivalProcess::DeterministicUniform => (i as f64 * 60_000.0 / self.arrival_rate_per_min).floor(),
                ArrivalProcess::Poisson => {
                    let u: f64 = arrival_rng.random();
                    t += -(1.0 - u).ln() / per_ms;
                    t.floor()
                }
            };
            if ts >= self.duration_ms as f64 {
                break;
            }
            let region = if self.regions.len() == 1 {
                self.regions[0].name.clone()
            } else {
                let u: f64 = region_rng.random();
                let mut acc = 0.0;
                self.regions
                    .iter()
                    .find(|r| {
                        acc += r.weight;
                        u < acc
                    })
                    .unwrap_or(&self.regions[self.regions.len() - 1])
                    .name
                    .clone()
            };
            let mut ctx = RequestContext::new(format!("req-{i:07}"), op.clone(), region, ts as Millis);
            ctx.traffic_class = self.traffic_class;
            out.push(ctx);
            i += 1;
        }
        out
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Realizes a fractional failure probability deterministically: over any
/// prefix the realized count stays within one half of the expected sum.
fn diffuse(acc: &mut f64, q: f64) -> bool {
    *acc += q;
    if *acc >= 0.5 {
        *acc -= 1.0;
        true
    } else {
        false
    }
}

/// A provider outcome plus its failure probability for expected accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedOutcome {
    pub result: CallResult,
    pub fail_prob: f64,
    pub substituted: bool,
}

pub trait OutcomeSource {
    fn outcome(&mut self, ctx: &RequestContext, provider: &ProviderId, attempt: u32) -> SourcedOutcome;
}

fn success_result(latency_ms: u64, cost: f64) -> CallResult {
    CallResult {
        transport: TransportOutcome::success(),
        business: BusinessOutcome::new(BusinessKind::Delivered),
        latency_ms,
        cost: Cost::from_f64(cost),
    }
}

fn failure_result(latency_ms: u64, cost: f64) -> CallResult {
    CallResult {
        transport: TransportOutcome::server_error(),
        business: BusinessOutcome::new(BusinessKind::Failed),
        latency_ms,
        cost: Cost::from_f64(cost),
    }
}

struct ModelSource<'a> {
    models: BTreeMap<ProviderId, &'a ProviderModel>,
    mode: SimMode,
    outcome_rng: ChaCha8Rng,
    latency_rng: ChaCha8Rng,
    reject_acc: BTreeMap<ProviderId, f64>,
    fail_acc: BTreeMap<ProviderId, f64>,
}

impl OutcomeSource for ModelSource<'_> {
    fn outcome(&mut self, ctx: &RequestContext, provider: &ProviderId, _attempt: u32) -> SourcedOutcome {
        let model = self.models[provider];
        let c = model.condition(ctx.timestamp, &ctx.region);
        let latency = (c.latency.sample(&mut self.latency_rng) * c.latency_multiplier).round().max(1.0) as u64;
        let fail_prob = c.reject_prob + (1.0 - c.reject_prob) * (1.0 - c.success_prob);
        let (rejected, failed) = match self.mode {
            SimMode::Expectation => {
                let rejected = diffuse(self.reject_acc.entry(provider.clone()).or_default(), c.reject_prob);
                let failed = !rejected && diffuse(self.fail_acc.entry(provider.clone()).or_default(), 1.0 - c.success_prob);
                (rejected, failed)
            }
            SimMode::Sampled => {
                let rejected = c.reject_prob > 0.0 && self.outcome_rng.random::<f64>() < c.reject_prob;
                let failed = !rejected && self.outcome_rng.random::<f64>() >= c.success_prob;
                (rejected, failed)
            }
        };
        let result = if rejected {
            CallResult {
                transport: TransportOutcome::rate_limited(),
                business: BusinessOutcome::default(),
                latency_ms: latency.min(50),
                cost: Cost::default(),
            }
        } else if failed {
            failure_result(latency, model.cost_per_attempt)
        } else {
            success_result(latency, model.cost_per_attempt)
        };
        SourcedOutcome { result, fail_prob, substituted: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Complete(usize),
    Ingest(usize),
    Refresh,
    ConfigDown,
    ConfigUp,
    Operator(usize),
    Attempt { req: usize, attempt: u32 },
}

impl Ev {
    fn class(self) -> u8 {
        match self {
            Ev::Complete(_) => 0,
            Ev::Ingest(_) => 1,
            Ev::Refresh => 2,
            Ev::ConfigDown | Ev::ConfigUp | Ev::Operator(_) => 3,
            Ev::Attempt { .. } => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Success,
    Failure,
    Fallback,
}

struct ReqState {
    ctx: RequestContext,
    avoid: Vec<ProviderId>,
    pin: Option<ProviderId>,
    fail_product: f64,
    terminal: Option<Terminal>,
    substituted: bool,
}

struct InFlight {
    req: usize,
    permit: AttemptPermit,
    event: AttemptEvent,
    class: OutcomeClass,
    fail_prob: f64,
    control: crate::factor_config::ControlParams,
}

/// Attempt-0 decision summary kept for every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub ts: Millis,
    pub region: String,
    pub request_id: String,
    pub trace_id: String,
    pub probe: bool,
    pub selected: Option<ProviderId>,
    pub fallback: Option<FallbackKind>,
    pub config_fallback: bool,
    pub stale: bool,
}

struct EngineSetup {
    factor_list: FactorList,
    regions: Vec<String>,
    lag_ms: u64,
    frozen_from: Option<Millis>,
    horizon: Millis,
    record_traces: bool,
    lkg_bound_ms: u64,
    operator_actions: Vec<OperatorAction>,
    config_impairment: Option<ConfigImpairment>,
    arrivals: Vec<RequestContext>,
}

struct EngineOutput {
    requests: Vec<ReqState>,
    events: Vec<AttemptEvent>,
    traces: Vec<DecisionTrace>,
    decisions: Vec<DecisionRecord>,
    transitions: Vec<IncidentMarker>,
    substituted_attempts: u64,
}

struct Engine<'s> {
    op: OperationId,
    regions: Vec<String>,
    providers: Vec<ProviderId>,
    refresh_ms: u64,
    lag_ms: u64,
    frozen_from: Option<Millis>,
    horizon: Millis,
    record_traces: bool,
    config: ConfigStore,
    pipeline: MetricsPipeline,
    protection: Protection,
    sticky: StickyStore,
    queue: BinaryHeap<Reverse<(Millis, u8, u64, Ev)>>,
    seq: u64,
    requests: Vec<ReqState>,
    in_flight: BTreeMap<usize, InFlight>,
    next_flight: usize,
    events: Vec<AttemptEvent>,
    traces: Vec<DecisionTrace>,
    decisions: Vec<DecisionRecord>,
    operator_actions: Vec<OperatorAction>,
    config_impairment_from: Option<Millis>,
    source: &'s mut dyn OutcomeSource,
    substituted_attempts: u64,
}

impl<'s> Engine<'s> {
    fn new(setup: EngineSetup, source: &'s mut dyn OutcomeSource) -> Result<Self, SimError> {
        let fl = setup.factor_list;
        let wc = WindowConfig::from_control(&fl.control)?;
        let config = ConfigStore::new(setup.lkg_bound_ms);
        config.put(fl.clone()).map_err(|e| SimError::InvalidScenario(vec![e.to_string()]))?;
        let mut engine = Self {
            op: fl.operation.clone(),
            regions: setup.regions,
            providers: fl.provider_ids().cloned().collect(),
            refresh_ms: fl.control.metric_refresh_interval_ms.max(1),
            lag_ms: setup.lag_ms,
            frozen_from: setup.frozen_from,
            horizon: setup.horizon,
            record_traces: setup.record_traces,
            config,
            pipeline: MetricsPipeline::new(wc, PercentileMode::Exact),
            protection: Protection::new(),
            sticky: StickyStore::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            requests: Vec::with_capacity(setup.arrivals.len()),
            in_flight: BTreeMap::new(),
            next_flight: 0,
            events: Vec::new(),
            traces: Vec::new(),
            decisions: Vec::new(),
            operator_actions: setup.operator_actions,
            config_impairment_from: setup.config_impairment.as_ref().map(|c| c.unavailable_from_ms),
            source,
            substituted_attempts: 0,
        };
        engine.push(0, Ev::Refresh);
        if let Some(c) = setup.config_impairment {
            engine.push(c.unavailable_from_ms, Ev::ConfigDown);
            engine.push(c.unavailable_until_ms, Ev::ConfigUp);
        }
        for i in 0..engine.operator_actions.len() {
            engine.push(engine.operator_actions[i].at_ms, Ev::Operator(i));
        }
        for (i, ctx) in setup.arrivals.into_iter().enumerate() {
            engine.push(ctx.timestamp, Ev::Attempt { req: i, attempt: 0 });
            engine.requests.push(ReqState { ctx, avoid: Vec::new(), pin: None, fail_product: 1.0, terminal: None, substituted: false });
        }
        Ok(engine)
    }

    fn push(&mut self, t: Millis, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((t, ev.class(), self.seq, ev)));
    }

    fn deps(&self) -> RouterDeps<'_> {
        RouterDeps { config: &self.config, snapshots: self.pipeline.cache(), protection: &self.protection, sticky: &self.sticky }
    }

    fn run(mut self) -> EngineOutput {
        while let Some(Reverse((t, _, _, ev))) = self.queue.pop() {
            match ev {
                Ev::Refresh => {
                    if self.frozen_from.is_none_or(|f| t < f) {
                        self.pipeline.refresh(&self.op, &self.regions, &self.providers, t);
                    }
                    if t + self.refresh_ms <= self.horizon {
                        self.push(t + self.refresh_ms, Ev::Refresh);
                    }
                }
                Ev::ConfigDown => self.config.mark_unavailable(self.config_impairment_from.unwrap_or(t)),
                Ev::ConfigUp => self.config.mark_available(),
                Ev::Operator(i) => {
                    let a = &self.operator_actions[i];
                    let o = OverrideSpec { scope: a.scope.clone(), patch: a.patch.clone(), ramp_fraction: None, emergency: true };
                    self.config.install_emergency(&self.op, o);
                }
                Ev::Ingest(i) => self.pipeline.ingest(&self.events[i]),
                Ev::Complete(id) => self.complete(id, t),
                Ev::Attempt { req, attempt } => self.attempt(req, attempt, t),
            }
        }
        EngineOutput {
            requests: self.requests,
            events: self.events,
            traces: self.traces,
            decisions: self.decisions,
            transitions: self.protection.transitions(),
            substituted_attempts: self.substituted_attempts,
        }
    }

    fn attempt(&mut self, req: usize, attempt: u32, t: Millis) {
        let mut ctx = self.requests[req].ctx.clone();
        ctx.timestamp = t;
        let opts = RouteOptions { attempt, avoid: self.requests[req].avoid.clone(), pin: self.requests[req].pin.take() };
        let out = route(&ctx, &self.deps(), &opts);
        if attempt == 0 {
            self.decisions.push(DecisionRecord {
                ts: t,
                region: ctx.region.clone(),
                request_id: ctx.request_id.clone(),
                trace_id: out.trace.trace_id.clone(),
                probe: out.trace.probe,
                selected: out.trace.selected.clone(),
                fallback: out.trace.fallback,
                config_fallback: out.trace.is_config_fallback(),
                stale: out.trace.snapshot_stale,
            });
        }
        let version = out.trace.factor_list_version.clone();
        if self.record_traces {
            self.traces.push(out.trace);
        }
        let Decision::Selected(provider) = out.decision else {
            self.terminate(req, Terminal::Fallback);
            return;
        };
        let fl = apply_overrides(&self.config.get(&self.op, t).expect("route succeeded at this instant"), &ctx);
        let spec = fl.provider(&provider).expect("selected provider is configured").clone();
        let seen = self.protection.transition_count();
        let admitted = self.protection.begin_attempt(
            &self.op,
            &spec,
            &ctx.region,
            &fl.control,
            fl.has_gate(crate::factor_config::GateKind::CircuitClosed),
            t,
        );
        for m in self.protection.transitions_since(seen) {
            self.pipeline.record_incident(m);
        }
        match admitted {
            Err(rejection) => {
                let key = Protection::circuit_key(&self.op, &provider, &ctx.region);
                let event = rejection_event(&ctx, &provider, attempt, &rejection, self.protection.circuit_state(&key), &version);
                self.finish(req, event, OutcomeClass::AttemptFailure, 1.0, &fl.control, t);
            }
            Ok(permit) => {
                let sourced = self.source.outcome(&ctx, &provider, attempt);
                if sourced.substituted {
                    self.substituted_attempts += 1;
                    self.requests[req].substituted = true;
                }
                let deadline = fl.control.deadline_for(ctx.traffic_class);
                let timed_out = sourced.result.latency_ms > deadline;
                let result = enforce_deadline(sourced.result, deadline);
                let fail_prob = if timed_out { 1.0 } else { sourced.fail_prob };
                let class = classify_outcome(&result.transport, &result.business);
                let event = attempt_event(
                    &ctx,
                    &provider,
                    attempt,
                    t,
                    result.latency_ms,
                    permit.circuit_state,
                    result.transport,
                    result.business,
                    result.cost,
                    &version,
                );
                let id = self.next_flight;
                self.next_flight += 1;
                let end = event.end_time;
                self.in_flight.insert(id, InFlight { req, permit, event, class, fail_prob, control: fl.control.clone() });
                self.push(end, Ev::Complete(id));
            }
        }
    }

    fn complete(&mut self, id: usize, t: Millis) {
        let f = self.in_flight.remove(&id).expect("in-flight attempt");
        if let Some(m) = self.protection.finish_attempt(f.permit, f.class, f.event.transport.kind, &f.control, t) {
            self.pipeline.record_incident(m);
        }
        self.finish(f.req, f.event, f.class, f.fail_prob, &f.control, t);
    }

    fn finish(&mut self, req: usize, event: AttemptEvent, class: OutcomeClass, fail_prob: f64, control: &crate::factor_config::ControlParams, t: Millis) {
        let attempt = event.retry_count;
        let provider = event.provider.clone();
        self.events.push(event);
        let idx = self.events.len() - 1;
        self.push(t + self.lag_ms, Ev::Ingest(idx));
        self.requests[req].fail_product *= fail_prob;
        if class.is_success() {
            self.terminate(req, Terminal::Success);
            return;
        }
        match self.protection.retry(&self.op, attempt + 1, control, t) {
            RetryAction::Stop => self.terminate(req, Terminal::Failure),
            action => {
                let r = &mut self.requests[req];
                if action == RetryAction::RetrySame {
                    r.pin = Some(provider);
                } else if !r.avoid.contains(&provider) {
                    r.avoid.push(provider);
                }
                self.push(t, Ev::Attempt { req, attempt: attempt + 1 });
            }
        }
    }

    fn terminate(&mut self, req: usize, terminal: Terminal) {
        self.requests[req].terminal = Some(terminal);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderCounts {
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
    pub cost_total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchRecord {
    pub ts: Millis,
    pub region: String,
    pub from: ProviderId,
    pub to: ProviderId,
    pub trace_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketPoint {
    pub start_ms: Millis,
    pub requests: u64,
    pub succeeded: u64,
    pub completion_rate: Option<f64>,
}

/// Closed-form expectation for the scenario's primary outage next to the
/// simulated count over the same interval. The switch time is the first
/// decision after onset that routes away from the default provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticalRow {
    pub lambda_per_min: f64,
    pub duration_min: f64,
    pub switch_min: f64,
    pub p_f: f64,
    pub p_s: f64,
    pub expected_failures: f64,
    pub simulated_failures: u64,
    pub simulated_expected_failures: f64,
    pub reference_failures: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverCheck {
    pub terms: FailoverTerms,
    pub bound_ms: u64,
    pub onset_ms: Option<Millis>,
    pub observed_ms: Option<u64>,
    /// False when operator actions drive the switch.
    pub automatic: bool,
    pub respected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub mode: SimMode,
    pub seed: u64,
    pub requests: u64,
    pub total_attempts: u64,
    pub providers: BTreeMap<ProviderId, ProviderCounts>,
    pub succeeded_requests: u64,
    pub failed_request_count: u64,
    pub fallback_count: u64,
    pub shed_attempts: u64,
    pub expected_failed_requests: f64,
    pub completion_rate: f64,
    pub completion_series: Vec<BucketPoint>,
    pub switch_timeline: Vec<SwitchRecord>,
    pub observed_failover_delay_ms: Option<u64>,
    pub flap_count: u64,
    pub cost_total: f64,
    pub cost_per_success: Option<f64>,
    pub stale_decisions: u64,
    pub probe_decisions: u64,
    pub failover: FailoverCheck,
    pub analytical: Option<AnalyticalRow>,
}

impl SimReport {
    /// Per-bucket completion series as CSV.
    pub fn completion_csv(&self) -> String {
        let mut out = String::from("start_ms,requests,succeeded,completion_rate\n");
        for b in &self.completion_series {
            let rate = b.completion_rate.map_or(String::new(), |r| format!("{r:.6}"));
            out.push_str(&format!("{},{},{},{}\n", b.start_ms, b.requests, b.succeeded, rate));
        }
        out
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub report: SimReport,
    pub traces: Vec<DecisionTrace>,
    pub events: Vec<AttemptEvent>,
    pub decisions: Vec<DecisionRecord>,
    pub transitions: Vec<IncidentMarker>,
    pub terminals: Vec<Terminal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Option<SimMode>,
    pub seed: Option<u64>,
    pub record_traces: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { mode: None, seed: None, record_traces: true }
    }
}

/// Switches between consecutive non-probe attempt-0 selections per region.
pub fn switch_timeline(decisions: &[DecisionRecord]) -> Vec<SwitchRecord> {
    let mut last: BTreeMap<&str, &ProviderId> = BTreeMap::new();
    let mut out = Vec::new();
    for d in decisions.iter().filter(|d| !d.probe) {
        let Some(sel) = &d.selected else { continue };
        if let Some(prev) = last.insert(&d.region, sel) {
            if prev != sel {
                out.push(SwitchRecord { ts: d.ts, region: d.region.clone(), from: prev.clone(), to: sel.clone(), trace_id: d.trace_id.clone() });
            }
        }
    }
    out
}

/// Switches that revert the previous switch in the same region within
/// [`FLAP_WINDOW_MS`].
pub fn flap_count(switches: &[SwitchRecord]) -> u64 {
    let mut last: BTreeMap<&str, &SwitchRecord> = BTreeMap::new();
    let mut flaps = 0;
    for s in switches {
        if let Some(prev) = last.insert(&s.region, s) {
            if prev.from == s.to && prev.to == s.from && s.ts.abs_diff(prev.ts) <= FLAP_WINDOW_MS {
                flaps += 1;
            }
        }
    }
    flaps
}

fn fault_onset(scenario: &Scenario) -> Option<(Millis, &FaultPhase)> {
    let model = scenario.model(scenario.primary())?;
    model.faults.iter().find(|f| f.kind != FaultKind::RecoveryRamp).map(|f| (f.start_ms, f))
}

fn build_report(scenario: &Scenario, mode: SimMode, seed: u64, out: &EngineOutput, row: Option<&SweepRow>) -> SimReport {
    let mut providers: BTreeMap<ProviderId, ProviderCounts> =
        scenario.factor_list.provider_ids().map(|p| (p.clone(), ProviderCounts::default())).collect();
    let mut shed = 0;
    for e in &out.events {
        let c = providers.entry(e.provider.clone()).or_default();
        c.attempts += 1;
        if e.outcome_class().is_success() {
            c.successes += 1;
        } else {
            c.failures += 1;
        }
        c.cost_total += e.cost.as_f64();
        if e.transport.error_category.as_deref() == Some("shed") {
            shed += 1;
        }
    }
    let succeeded = out.requests.iter().filter(|r| r.terminal == Some(Terminal::Success)).count() as u64;
    let fallback = out.requests.iter().filter(|r| r.terminal == Some(Terminal::Fallback)).count() as u64;
    let requests = out.requests.len() as u64;
    let bucket = scenario.report_bucket_ms;
    let mut series: BTreeMap<Millis, (u64, u64)> = BTreeMap::new();
    for r in &out.requests {
        let b = series.entry(r.ctx.timestamp / bucket * bucket).or_default();
        b.0 += 1;
        b.1 += u64::from(r.terminal == Some(Terminal::Success));
    }
    let completion_series = series
        .into_iter()
        .map(|(start_ms, (n, ok))| BucketPoint { start_ms, requests: n, succeeded: ok, completion_rate: (n > 0).then(|| ok as f64 / n as f64) })
        .collect();
    let switches = switch_timeline(&out.decisions);
    let onset = fault_onset(scenario);
    let primary = scenario.primary();
    let observed = onset.and_then(|(start, phase)| {
        out.decisions
            .iter()
            .filter(|d| !d.probe && d.ts >= start)
            .filter(|d| phase.affected_regions.is_empty() || phase.affected_regions.contains(&d.region))
            .find(|d| d.selected.as_ref().is_some_and(|p| p != primary))
            .map(|d| d.ts - start)
    });
    let terms = scenario.failover_terms();
    let bound = terms.bound();
    // Operator-driven switches are not bounded by the telemetry pipeline.
    let automatic = scenario.operator_actions.is_empty();
    let cost_total: f64 = providers.values().map(|c| c.cost_total).sum();
    let analytical = onset.filter(|(_, p)| p.kind == FaultKind::FullOutage).and_then(|(start, phase)| {
        let secondary = scenario.secondary()?;
        let p_s = scenario.model(secondary)?.base_success_prob;
        let d_ms = phase.end_ms.min(scenario.duration_ms) - start;
        let switch_ms = observed.unwrap_or(d_ms).min(d_ms);
        let in_phase = |r: &&ReqState| r.ctx.timestamp >= start && r.ctx.timestamp < phase.end_ms;
        let simulated = out.requests.iter().filter(in_phase).filter(|r| r.terminal != Some(Terminal::Success)).count() as u64;
        let simulated_expected = out.requests.iter().filter(in_phase).map(|r| r.fail_product).sum();
        Some(AnalyticalRow {
            lambda_per_min: scenario.arrival_rate_per_min,
            duration_min: d_ms as f64 / 60_000.0,
            switch_min: switch_ms as f64 / 60_000.0,
            p_f: phase.degraded_success_prob,
            p_s,
            expected_failures: expected_failures(
                scenario.arrival_rate_per_min,
                d_ms as f64 / 60_000.0,
                switch_ms as f64 / 60_000.0,
                phase.degraded_success_prob,
                p_s,
            )
            .ok()?,
            simulated_failures: simulated,
            simulated_expected_failures: simulated_expected,
            reference_failures: row.and_then(|r| r.reference_failures),
        })
    });
    SimReport {
        scenario: scenario.name.clone(),
        mode,
        seed,
        requests,
        total_attempts: out.events.len() as u64,
        providers,
        succeeded_requests: succeeded,
        failed_request_count: requests - succeeded,
        fallback_count: fallback,
        shed_attempts: shed,
        expected_failed_requests: out.requests.iter().map(|r| r.fail_product).sum(),
        completion_rate: if requests == 0 { 1.0 } else { succeeded as f64 / requests as f64 },
        completion_series,
        observed_failover_delay_ms: observed,
        flap_count: flap_count(&switches),
        switch_timeline: switches,
        cost_total,
        cost_per_success: (succeeded > 0).then(|| cost_total / succeeded as f64),
        stale_decisions: out.decisions.iter().filter(|d| d.stale).count() as u64,
        probe_decisions: out.decisions.iter().filter(|d| d.probe).count() as u64,
        failover: FailoverCheck {
            terms,
            bound_ms: bound,
            onset_ms: onset.map(|o| o.0),
            observed_ms: observed,
            automatic,
            respected: !automatic || observed.is_none_or(|o| o <= bound),
        },
        analytical,
    }
}

/// Runs one scenario. Sweeps are expanded by the caller via
/// [`Scenario::expand_sweep`] or [`run_sweep`].
pub fn run_scenario(scenario: &Scenario, opts: RunOptions) -> Result<SimRun, SimError> {
    run_with_row(scenario, opts, None)
}

fn run_with_row(scenario: &Scenario, opts: RunOptions, row: Option<&SweepRow>) -> Result<SimRun, SimError> {
    scenario.validate()?;
    let mode = opts.mode.unwrap_or(scenario.mode);
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut source = ModelSource {
        models: scenario.providers.iter().map(|m| (m.id.clone(), m)).collect(),
        mode,
        outcome_rng: stream(seed, 2),
        latency_rng: stream(seed, 3),
        reject_acc: BTreeMap::new(),
        fail_acc: BTreeMap::new(),
    };
    let imp = scenario.telemetry_impairment.clone().unwrap_or_default();
    let setup = EngineSetup {
        factor_list: scenario.factor_list.clone(),
        regions: scenario.regions.iter().map(|r| r.name.clone()).collect(),
        lag_ms: imp.lag_ms,
        frozen_from: imp.frozen_from_ms,
        horizon: scenario.duration_ms,
        record_traces: opts.record_traces,
        lkg_bound_ms: scenario.config_lkg_bound_ms.unwrap_or(DEFAULT_LKG_BOUND_MS),
        operator_actions: scenario.operator_actions.clone(),
        config_impairment: scenario.config_impairment.clone(),
        arrivals: scenario.arrivals(seed),
    };
    let out = Engine::new(setup, &mut source)?.run();
    let report = build_report(scenario, mode, seed, &out, row);
    Ok(SimRun {
        report,
        terminals: out.requests.iter().map(|r| r.terminal.unwrap_or(Terminal::Failure)).collect(),
        traces: out.traces,
        events: out.events,
        decisions: out.decisions,
        transitions: out.transitions,
    })
}

/// Runs every sweep row (or the scenario itself when it has none).
pub fn run_sweep(scenario: &Scenario, opts: RunOptions) -> Result<Vec<(Option<SweepRow>, SimRun)>, SimError> {
    if scenario.sweep.is_empty() {
        return Ok(vec![(None, run_scenario(scenario, opts)?)]);
    }
    scenario
        .expand_sweep()
        .into_iter()
        .map(|(row, s)| run_with_row(&s, opts, Some(&row)).map(|run| (Some(row), run)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceState {
    Primary,
    Secondary,
    Probe,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateTransition {
    pub ts: Millis,
    pub region: String,
    pub label: String,
    pub from: PreferenceState,
    pub to: PreferenceState,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nonconformance {
    pub ts: Millis,
    pub region: String,
    pub state: PreferenceState,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conformance {
    pub transitions: Vec<StateTransition>,
    pub violations: Vec<Nonconformance>,
}

impl Conformance {
    pub fn conformant(&self) -> bool {
        self.violations.is_empty()
    }

    /// Transition labels in order, for one region.
    pub fn labels(&self, region: &str) -> Vec<&str> {
        self.transitions.iter().filter(|t| t.region == region).map(|t| t.label.as_str()).collect()
    }
}

enum Observation<'a> {
    Circuit(&'a IncidentMarker),
    Decision(&'a DecisionTrace),
}

/// Reconstructs the provider preference state per region from decisions and
/// primary circuit transitions and checks every move against T1..T6.
pub fn check_state_machine(run: &SimRun, scenario: &Scenario) -> Result<Conformance, SimError> {
    if run.traces.is_empty() && !run.decisions.is_empty() {
        return Err(SimError::NoTraces);
    }
    let primary = scenario.primary();
    let control = &scenario.factor_list.control;
    let required = control.sustained_windows_for(scenario.traffic_class);
    let mut result = Conformance { transitions: Vec::new(), violations: Vec::new() };
    let regions: BTreeSet<&str> = run.traces.iter().map(|t| t.region.as_str()).collect();
    for region in regions {
        let mut obs: Vec<(Millis, u8, Observation<'_>)> = run
            .transitions
            .iter()
            .filter(|m| &m.key.provider == primary && m.key.scope == region)
            .map(|m| (m.ts, 0, Observation::Circuit(m)))
            .collect();
        obs.extend(
            run.traces
                .iter()
                .filter(|t| t.region == region && t.attempt == 0 && !t.probe && !t.is_config_fallback())
                .map(|t| (t.timestamp, 1, Observation::Decision(t))),
        );
        obs.sort_by_key(|(ts, class, _)| (*ts, *class));
        let mut state = PreferenceState::Primary;
        let mut last_switch: Option<Millis> = None;
        let mut last_selected: Option<&ProviderId> = None;
        let push = |result: &mut Conformance, ts, label: &str, from, to, evidence: String| {
            result.transitions.push(StateTransition { ts, region: region.to_string(), label: label.into(), from, to, evidence });
        };
        for (ts, _, o) in obs {
            match o {
                Observation::Circuit(m) => match (state, m.transition) {
                    (PreferenceState::Secondary, IncidentKind::CircuitHalfOpen) => {
                        push(&mut result, ts, "T2", state, PreferenceState::Probe, "primary circuit half-open".into());
                        state = PreferenceState::Probe;
                    }
                    (PreferenceState::Probe, IncidentKind::CircuitOpened) => {
                        push(&mut result, ts, "T4", state, PreferenceState::Secondary, "primary probe failed".into());
                        state = PreferenceState::Secondary;
                    }
                    _ => {}
                },
                Observation::Decision(t) => {
                    if let Some(sel) = &t.selected {
                        if last_selected.is_some_and(|p| p != sel) {
                            last_switch = Some(ts);
                        }
                        last_selected = Some(sel);
                    }
                    let selected_primary = t.selected.as_ref() == Some(primary);
                    let incumbent_gated = t.previous_choice.as_ref().is_none_or(|p| !t.eligible(p));
                    let sustained = t.challenger_streak >= required
                        || incumbent_gated
                        || t.stale_policy_applied == Some(StaleMetricPolicy::PreferDefault);
                    match (state, &t.selected, selected_primary) {
                        (_, None, _) => match state {
                            PreferenceState::Secondary => {
                                push(&mut result, ts, "T5", state, PreferenceState::Degraded, format!("fallback {}", t.trace_id));
                                state = PreferenceState::Degraded;
                            }
                            PreferenceState::Degraded => {}
                            _ => result.violations.push(Nonconformance {
                                ts,
                                region: region.to_string(),
                                state,
                                evidence: format!("fallback from {state:?} without passing through secondary ({})", t.trace_id),
                            }),
                        },
                        (PreferenceState::Primary, Some(_), true) => {}
                        (PreferenceState::Primary, Some(sel), false) => {
                            let primary_gated = !t.eligible(primary);
                            let lower = match (t.candidate(primary), t.candidate(sel)) {
                                (Some(p), Some(s)) => p.total < s.total,
                                _ => false,
                            };
                            if primary_gated || lower {
                                let why = if primary_gated { "primary gated" } else { "primary scored lower" };
                                push(&mut result, ts, "T1", state, PreferenceState::Secondary, format!("{why} ({})", t.trace_id));
                                state = PreferenceState::Secondary;
                            } else {
                                result.violations.push(Nonconformance {
                                    ts,
                                    region: region.to_string(),
                                    state,
                                    evidence: format!("left primary while it was eligible and not outscored ({})", t.trace_id),
                                });
                            }
                        }
                        (PreferenceState::Secondary | PreferenceState::Probe, Some(_), false) => {}
                        (PreferenceState::Secondary, Some(_), true) => {
                            let cooled = incumbent_gated
                                || last_switch.is_none_or(|s| s == ts || ts.saturating_sub(s) >= control.cooldown_ms);
                            if cooled && sustained {
                                push(&mut result, ts, "T2", state, PreferenceState::Probe, format!("primary eligible after cooldown ({})", t.trace_id));
                                push(&mut result, ts, "T3", PreferenceState::Probe, PreferenceState::Primary, format!("sustained recovery ({})", t.trace_id));
                                state = PreferenceState::Primary;
                            } else {
                                result.violations.push(Nonconformance {
                                    ts,
                                    region: region.to_string(),
                                    state,
                                    evidence: format!("returned to primary without cooldown or sustained superiority ({})", t.trace_id),
                                });
                            }
                        }
                        (PreferenceState::Probe, Some(_), true) => {
                            if sustained {
                                push(&mut result, ts, "T3", state, PreferenceState::Primary, format!("streak {} ({})", t.challenger_streak, t.trace_id));
                                state = PreferenceState::Primary;
                            } else {
                                result.violations.push(Nonconformance {
                                    ts,
                                    region: region.to_string(),
                                    state,
                                    evidence: format!("probe promoted without sustained recovery ({})", t.trace_id),
                                });
                            }
                        }
                        (PreferenceState::Degraded, Some(sel), _) => {
                            let to = if selected_primary { PreferenceState::Primary } else { PreferenceState::Secondary };
                            push(&mut result, ts, "T6", state, to, format!("{sel} recovered ({})", t.trace_id));
                            state = to;
                        }
                    }
                }
            }
        }
    }
    Ok(result)
}

/// One attempt-0 decision that differs from the recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionDiff {
    pub request_id: String,
    pub ts: Millis,
    pub region: String,
    pub recorded: ProviderId,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub requests: u64,
    pub decision_diffs: u64,
    pub diff_fraction: f64,
    pub substituted_attempts: u64,
    pub substituted_requests: u64,
    pub recorded_switches: u64,
    pub replay_switches: u64,
    pub switches_added: u64,
    pub switches_removed: u64,
    pub recorded_flaps: u64,
    pub replay_flaps: u64,
    pub flap_delta: i64,
    pub recorded_failures: u64,
    pub replay_expected_failures: f64,
    pub expected_failure_delta: f64,
    pub diffs: Vec<DecisionDiff>,
    pub replay_switch_timeline: Vec<SwitchRecord>,
}

/// Per (provider, region) recorded first-attempt outcomes, sorted by start.
struct RecordedStats {
    series: BTreeMap<(ProviderId, String), (Vec<Millis>, Vec<u64>)>,
    global: BTreeMap<ProviderId, (u64, u64, Vec<u64>)>,
}

impl RecordedStats {
    fn new(events: &[AttemptEvent]) -> Self {
        let mut series: BTreeMap<(ProviderId, String), Vec<(Millis, bool)>> = BTreeMap::new();
        let mut global: BTreeMap<ProviderId, (u64, u64, Vec<u64>)> = BTreeMap::new();
        for e in events {
            let ok = e.outcome_class().is_success();
            series.entry((e.provider.clone(), e.region.clone())).or_default().push((e.start_time, ok));
            let g = global.entry(e.provider.clone()).or_default();
            g.0 += 1;
            g.1 += u64::from(ok);
            g.2.push(e.latency_ms);
        }
        for g in global.values_mut() {
            g.2.sort_unstable();
        }
        let series = series
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|(t, _)| *t);
                let times = v.iter().map(|(t, _)| *t).collect();
                let mut prefix = Vec::with_capacity(v.len() + 1);
                prefix.push(0);
                for (_, ok) in &v {
                    prefix.push(prefix.last().unwrap() + u64::from(*ok));
                }
                (k, (times, prefix))
            })
            .collect();
        Self { series, global }
    }

    /// Completion rate over `(now - window, now]`, else over the whole log.
    fn rate(&self, provider: &ProviderId, region: &str, now: Millis, window: u64) -> Option<f64> {
        if let Some((times, prefix)) = self.series.get(&(provider.clone(), region.to_string())) {
            let lo = times.partition_point(|t| *t + window <= now);
            let hi = times.partition_point(|t| *t <= now);
            if hi > lo {
                return Some((prefix[hi] - prefix[lo]) as f64 / (hi - lo) as f64);
            }
        }
        self.global.get(provider).filter(|g| g.0 > 0).map(|g| g.1 as f64 / g.0 as f64)
    }

    fn median_latency(&self, provider: &ProviderId) -> Option<u64> {
        self.global.get(provider).filter(|g| !g.2.is_empty()).map(|g| g.2[(g.2.len() - 1) / 2])
    }
}

struct ReplaySource<'a> {
    recorded: BTreeMap<(String, u32), &'a AttemptEvent>,
    stats: RecordedStats,
    fl: &'a FactorList,
    acc: BTreeMap<ProviderId, f64>,
}

impl OutcomeSource for ReplaySource<'_> {
    fn outcome(&mut self, ctx: &RequestContext, provider: &ProviderId, attempt: u32) -> SourcedOutcome {
        if let Some(e) = self.recorded.get(&(ctx.request_id.clone(), attempt)).filter(|e| &e.provider == provider) {
            let result = CallResult { transport: e.transport.clone(), business: e.business, latency_ms: e.latency_ms, cost: e.cost };
            let fail_prob = if e.outcome_class().is_success() { 0.0 } else { 1.0 };
            return SourcedOutcome { result, fail_prob, substituted: false };
        }
        let default = self.fl.scores.iter().find(|f| f.name == FactorKind::CompletionRate).map_or(0.5, |f| f.default_value);
        let p = self.stats.rate(provider, &ctx.region, ctx.timestamp, self.fl.control.window_ms).unwrap_or(default);
        let latency = self.stats.median_latency(provider).unwrap_or(100);
        let cost = self.fl.provider(provider).map_or(0.0, |s| s.static_cost);
        let failed = diffuse(self.acc.entry(provider.clone()).or_default(), 1.0 - p);
        let result = if failed { failure_result(latency, cost) } else { success_result(latency, cost) };
        SourcedOutcome { result, fail_prob: 1.0 - p, substituted: true }
    }
}

/// Switches implied by first attempts, in start-time order.
fn recorded_switches(events: &[AttemptEvent]) -> Vec<SwitchRecord> {
    let mut decisions: Vec<DecisionRecord> = events
        .iter()
        .filter(|e| e.retry_count == 0)
        .map(|e| DecisionRecord {
            ts: e.start_time,
            region: e.region.clone(),
            request_id: e.request_id.clone(),
            trace_id: e.trace_id.clone(),
            probe: e.circuit_state == CircuitState::HalfOpen,
            selected: Some(e.provider.clone()),
            fallback: None,
            config_fallback: false,
            stale: false,
        })
        .collect();
    decisions.sort_by(|a, b| (a.ts, &a.request_id).cmp(&(b.ts, &b.request_id)));
    switch_timeline(&decisions)
}

fn replay_switch_input(run: &SimRun) -> Vec<SwitchRecord> {
    recorded_switches(&run.events)
}

/// Counterfactual replay of recorded events against `candidate`.
///
/// Requests are re-driven at their recorded first-attempt times with fresh
/// router state. When a decision matches the recording the recorded outcome
/// is reused; otherwise an outcome is synthesized from the provider's
/// recorded completion rate around that time and labeled substituted.
/// Requests are assumed interactive without a user key.
pub fn replay_events(events: &[AttemptEvent], candidate: &FactorList) -> Result<(ReplayReport, SimRun), SimError> {
    if events.is_empty() {
        return Err(SimError::EmptyLog);
    }
    if let Some(e) = events.iter().find(|e| e.schema_version != EVENT_SCHEMA_VERSION) {
        return Err(SimError::IncompatibleSchema(e.schema_version));
    }
    let candidate = candidate.clone().seal();
    validate_factor_list(&candidate).map_err(|vs| SimError::InvalidScenario(vs.iter().map(|v| v.to_string()).collect()))?;
    let mut firsts: Vec<&AttemptEvent> = events.iter().filter(|e| e.retry_count == 0).collect();
    firsts.sort_by(|a, b| (a.start_time, &a.request_id).cmp(&(b.start_time, &b.request_id)));
    let arrivals: Vec<RequestContext> = firsts
        .iter()
        .map(|e| {
            let mut ctx = RequestContext::new(e.request_id.clone(), e.operation.clone(), e.region.clone(), e.start_time);
            ctx.tenant = e.tenant.clone();
            ctx
        })
        .collect();
    let regions: Vec<String> = events.iter().map(|e| e.region.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let horizon = events.iter().map(|e| e.end_time).max().unwrap_or(0);
    let mut source = ReplaySource {
        recorded: events.iter().map(|e| ((e.request_id.clone(), e.retry_count), e)).collect(),
        stats: RecordedStats::new(events),
        fl: &candidate,
        acc: BTreeMap::new(),
    };
    let setup = EngineSetup {
        factor_list: candidate.clone(),
        regions,
        lag_ms: 0,
        frozen_from: None,
        horizon,
        record_traces: true,
        lkg_bound_ms: DEFAULT_LKG_BOUND_MS,
        operator_actions: Vec::new(),
        config_impairment: None,
        arrivals,
    };
    let out = Engine::new(setup, &mut source)?.run();

    let recorded_by_id: BTreeMap<&str, &AttemptEvent> = firsts.iter().map(|e| (e.request_id.as_str(), *e)).collect();
    let mut diffs = Vec::new();
    for d in &out.decisions {
        let rec = recorded_by_id[d.request_id.as_str()];
        if d.selected.as_ref() != Some(&rec.provider) {
            let replayed = match (&d.selected, d.fallback) {
                (Some(p), _) => p.to_string(),
                (None, Some(f)) => format!("fallback:{}", f.as_str()),
                (None, None) => "none".into(),
            };
            diffs.push(DecisionDiff { request_id: d.request_id.clone(), ts: d.ts, region: d.region.clone(), recorded: rec.provider.clone(), replayed });
        }
    }
    let mut final_ok: BTreeMap<&str, (u32, bool)> = BTreeMap::new();
    for e in events {
        let entry = final_ok.entry(&e.request_id).or_insert((0, false));
        if e.retry_count >= entry.0 {
            *entry = (e.retry_count, e.outcome_class().is_success());
        }
    }
    let recorded_failures = final_ok.values().filter(|(_, ok)| !ok).count() as u64;
    let replay_expected: f64 = out.requests.iter().map(|r| r.fail_product).sum();
    let recorded_sw = recorded_switches(events);
    let fake_scenario_name = format!("replay:{}", candidate.label.as_deref().unwrap_or(&candidate.version));
    let run_report = SimReport {
        scenario: fake_scenario_name,
        mode: SimMode::Expectation,
        seed: 0,
        requests: out.requests.len() as u64,
        total_attempts: out.events.len() as u64,
        providers: BTreeMap::new(),
        succeeded_requests: out.requests.iter().filter(|r| r.terminal == Some(Terminal::Success)).count() as u64,
        failed_request_count: out.requests.iter().filter(|r| r.terminal != Some(Terminal::Success)).count() as u64,
        fallback_count: out.requests.iter().filter(|r| r.terminal == Some(Terminal::Fallback)).count() as u64,
        shed_attempts: 0,
        expected_failed_requests: replay_expected,
        completion_rate: 0.0,
        completion_series: Vec::new(),
        switch_timeline: switch_timeline(&out.decisions),
        observed_failover_delay_ms: None,
        flap_count: 0,
        cost_total: out.events.iter().map(|e| e.cost.as_f64()).sum(),
        cost_per_success: None,
        stale_decisions: out.decisions.iter().filter(|d| d.stale).count() as u64,
        probe_decisions: out.decisions.iter().filter(|d| d.probe).count() as u64,
        failover: FailoverCheck {
            terms: FailoverTerms::default(),
            bound_ms: 0,
            onset_ms: None,
            observed_ms: None,
            automatic: false,
            respected: true,
        },
        analytical: None,
    };
    let run = SimRun {
        report: run_report,
        terminals: out.requests.iter().map(|r| r.terminal.unwrap_or(Terminal::Failure)).collect(),
        traces: out.traces,
        events: out.events,
        decisions: out.decisions,
        transitions: out.transitions,
    };
    let replay_sw = replay_switch_input(&run);
    let key = |s: &SwitchRecord| (s.ts, s.region.clone(), s.from.clone(), s.to.clone());
    let rec_set: BTreeSet<_> = recorded_sw.iter().map(key).collect();
    let rep_set: BTreeSet<_> = replay_sw.iter().map(key).collect();
    let requests = run.decisions.len() as u64;
    let report = ReplayReport {
        requests,
        decision_diffs: diffs.len() as u64,
        diff_fraction: if requests == 0 { 0.0 } else { diffs.len() as f64 / requests as f64 },
        substituted_attempts: out.substituted_attempts,
        substituted_requests: out.requests.iter().filter(|r| r.substituted).count() as u64,
        recorded_switches: recorded_sw.len() as u64,
        replay_switches: replay_sw.len() as u64,
        switches_added: rep_set.difference(&rec_set).count() as u64,
        switches_removed: rec_set.difference(&rep_set).count() as u64,
        recorded_flaps: flap_count(&recorded_sw),
        replay_flaps: flap_count(&replay_sw),
        flap_delta: flap_count(&replay_sw) as i64 - flap_count(&recorded_sw) as i64,
        recorded_failures,
        replay_expected_failures: replay_expected,
        expected_failure_delta: replay_expected - recorded_failures as f64,
        diffs,
        replay_switch_timeline: replay_sw,
    };
    Ok((report, run))
}

/// [`replay_events`] over a JSONL event log file.
pub fn replay(event_log_path: impl AsRef<Path>, candidate: &FactorList) -> Result<(ReplayReport, SimRun), SimError> {
    let (events, _warnings) = load_event_log(event_log_path, true)?;
    replay_events(&events, candidate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_PROVIDERS: &str = r#"
name: unit
duration_ms: 120000
arrival_rate_per_min: 600
providers:
  - id: alpha
    base_success_prob: 1.0
    latency: {kind: constant, ms: 100}
    cost_per_attempt: 0.0075
  - id: beta
    base_success_prob: 1.0
    latency: {kind: constant, ms: 100}
    cost_per_attempt: 0.009
factor_list:
  operation: SEND_SMS
  providers:
    - id: alpha
      supported_regions: [US]
      static_cost: 0.0075
    - id: beta
      supported_regions: [US]
      static_cost: 0.009
  gates:
    - name: circuit_closed
  scores:
    - name: cost
      weight: 1.0
      orientation: lower_is_better
      lower_bound: 0.005
      upper_bound: 0.015
  control:
    default_provider: alpha
"#;

    #[test]
    fn availability_examples() {
        assert!((availability_serial(&[0.999; 3]).unwrap() - 0.997_003).abs() < 1e-9);
        assert!((availability_serial(&[0.999; 5]).unwrap() - 0.995).abs() < 1e-4);
        assert_eq!(availability_serial(&[1.0, 0.42]).unwrap(), 0.42);
        assert_eq!(availability_serial(&[]), Err(ModelError::Empty));
        assert!((availability_parallel(0.9, 0.9).unwrap() - 0.99).abs() < 1e-12);
        assert_eq!(availability_parallel(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(availability_parallel(0.7, 0.0).unwrap(), 0.7);
        assert!(availability_parallel(1.2, 0.0).is_err());
    }

    #[test]
    fn expected_failure_rows() {
        let e = |t| expected_failures(1000.0, 10.0, t, 0.05, 0.99).unwrap().round();
        assert_eq!([e(10.0), e(8.0), e(2.0), e(0.5), e(0.0)], [9500.0, 7620.0, 1980.0, 570.0, 100.0]);
        assert_eq!(e(25.0), 9500.0, "switch after the outage ends");
        assert!(expected_failures(1000.0, 10.0, 1.0, 1.5, 0.99).is_err());
    }

    #[test]
    fn failover_bound_examples() {
        assert_eq!(failover_latency_bound(30_000, 0, 5_000, 5_000, 0), 40_000);
        assert_eq!(failover_latency_bound(0, 0, 0, 0, 0), 0);
        assert_eq!(failover_latency_bound(1, 2, 3, 4, 1) - failover_latency_bound(1, 2, 3, 4, 0), 1);
    }

    #[test]
    fn uniform_arrivals_are_evenly_spaced() {
        let s = Scenario::from_yaml(TWO_PROVIDERS).unwrap();
        let a = s.arrivals(1);
        assert_eq!(a.len(), 1200);
        assert_eq!(a[1].timestamp, 100);
        assert_eq!(a[1199].timestamp, 119_900);
    }

    #[test]
    fn poisson_arrivals_are_seeded() {
        let mut s = Scenario::from_yaml(TWO_PROVIDERS).unwrap();
        s.arrival_process = ArrivalProcess::Poisson;
        let a = s.arrivals(7);
        assert_eq!(a, s.arrivals(7));
        assert_ne!(a, s.arrivals(8));
        assert!((1_050..=1_350).contains(&a.len()), "{}", a.len());
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn healthy_single_provider() {
        let mut s = Scenario::from_yaml(TWO_PROVIDERS).unwrap();
        s.factor_list.providers.truncate(1);
        s.providers.truncate(1);
        s.factor_list = s.factor_list.clone().seal();
        let run = run_scenario(&s, RunOptions::default()).unwrap();
        assert_eq!(run.report.requests, 1200);
        assert_eq!(run.report.completion_rate, 1.0);
        assert!(run.report.switch_timeline.is_empty());
        assert_eq!(run.report.providers[&ProviderId::new("alpha").unwrap()].attempts, 1200);
    }

    #[test]
    fn fault_conditions() {
        let m = ProviderModel {
            id: ProviderId::new("alpha").unwrap(),
            base_success_prob: 0.9,
            latency: LatencyDist::Constant { ms: 100 },
            regions: BTreeMap::new(),
            cost_per_attempt: 0.0,
            faults: vec![
                FaultPhase {
                    kind: FaultKind::PartialRegional,
                    start_ms: 0,
                    end_ms: 100,
                    degraded_success_prob: 0.2,
                    affected_regions: vec!["BR".into()],
                    latency_multiplier: 1.0,
                    reject_fraction: 0.0,
                    ramp_duration_ms: None,
                },
                FaultPhase {
                    kind: FaultKind::RecoveryRamp,
                    start_ms: 100,
                    end_ms: 300,
                    degraded_success_prob: 0.1,
                    affected_regions: vec![],
                    latency_multiplier: 1.0,
                    reject_fraction: 0.0,
                    ramp_duration_ms: Some(100),
                },
            ],
        };
        assert_eq!(m.condition(50, "BR").success_prob, 0.2);
        assert_eq!(m.condition(50, "US").success_prob, 0.9);
        assert!((m.condition(150, "US").success_prob - 0.5).abs() < 1e-12);
        assert!((m.condition(250, "US").success_prob - 0.9).abs() < 1e-12);
    }

    #[test]
    fn diffusion_realizes_expected_counts() {
        let mut acc = 0.0;
        let failures = (0..500).filter(|_| diffuse(&mut acc, 0.95)).count();
        assert_eq!(failures, 475);
        let mut acc = 0.0;
        assert_eq!((0..9500).filter(|_| diffuse(&mut acc, 0.01)).count(), 95);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut s = Scenario::from_yaml(TWO_PROVIDERS).unwrap();
        s.mode = SimMode::Sampled;
        s.providers[0].base_success_prob = 0.7;
        s.providers[0].latency = LatencyDist::Lognormal { mu: 4.6, sigma: 0.4 };
        let a = run_scenario(&s, RunOptions::default()).unwrap();
        let b = run_scenario(&s, RunOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.events.iter().all(|e| crate::domain::validate_event(e).is_ok()));
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let bad = TWO_PROVIDERS.replace("arrival_rate_per_min: 600", "arrival_rate_per_min: 0");
        assert!(matches!(Scenario::from_yaml(&bad), Err(SimError::InvalidScenario(_))));
        let bad = TWO_PROVIDERS.replace("base_success_prob: 1.0\n    latency: {kind: constant, ms: 100}\n    cost_per_attempt: 0.009", "base_success_prob: 1.5\n    latency: {kind: constant, ms: 100}\n    cost_per_attempt: 0.009");
        assert!(matches!(Scenario::from_yaml(&bad), Err(SimError::InvalidScenario(_))));
        assert!(matches!(Scenario::from_yaml("name: x"), Err(SimError::Parse(_))));
    }

    #[test]
    fn flaps_need_reversal_inside_window() {
        let p = |n: &str| ProviderId::new(n).unwrap();
        let sw = |ts, from: &str, to: &str| SwitchRecord { ts, region: "US".into(), from: p(from), to: p(to), trace_id: String::new() };
        assert_eq!(flap_count(&[sw(0, "alpha", "beta"), sw(1_000, "beta", "alpha")]), 1);
        assert_eq!(flap_count(&[sw(0, "alpha", "beta"), sw(400_000, "beta", "alpha")]), 0);
    }

    #[test]
    fn replay_fixed_point_on_small_run() {
        let mut s = Scenario::from_yaml(TWO_PROVIDERS).unwrap();
        s.providers[0].faults.push(FaultPhase {
            kind: FaultKind::FullOutage,
            start_ms: 30_000,
            end_ms: 60_000,
            degraded_success_prob: 0.1,
            affected_regions: vec![],
            latency_multiplier: 1.0,
            reject_fraction: 0.0,
            ramp_duration_ms: None,
        });
        let run = run_scenario(&s, RunOptions::default()).unwrap();
        assert!(!run.report.switch_timeline.is_empty());
        let (report, _) = replay_events(&run.events, &s.factor_list).unwrap();
        assert_eq!(report.decision_diffs, 0, "{:?}", report.diffs.first());
        assert_eq!(report.substituted_attempts, 0);
    }

    proptest! {
        #[test]
        fn expected_failures_monotone_in_switch_time(
            lambda in 1.0f64..5_000.0, d in 0.0f64..60.0, t1 in 0.0f64..60.0, t2 in 0.0f64..60.0,
            p_f in 0.0f64..1.0, gap in 0.0001f64..1.0,
        ) {
            let p_s = (p_f + gap).min(1.0);
            prop_assume!(p_s > p_f);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = expected_failures(lambda, d, lo, p_f, p_s).unwrap();
            let b = expected_failures(lambda, d, hi, p_f, p_s).unwrap();
            prop_assert!(b >= a - 1e-9);
        }
    }
}
