//! Factor lists: the declarative per-operation routing policy, its strict YAML
//! form, validation, scoped overrides and the versioned store the router reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{fnv1a64, Millis, OperationId, ProviderId, RequestContext, TrafficClass};

/// Tolerance on the sum of score weights.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Default bound on serving last-known-good config while the store is down.
pub const DEFAULT_LKG_BOUND_MS: u64 = 15 * 60 * 1000;

/// Shipped SEND_SMS factor list: three gates, four score factors with
/// completion rate weighted highest.
pub const DEFAULT_SEND_SMS_YAML: &str = r#"operation: SEND_SMS
version: sms-default
providers:
  - id: alpha
    supported_regions: [US, BR, DE]
    static_cost: 0.0075
    priority: 1
  - id: beta
    supported_regions: [US, BR, DE]
    static_cost: 0.0090
    priority: 2
gates:
  - name: circuit_closed
  - name: region_supported
  - name: quota_available
scores:
  - name: completion_rate
    weight: 0.5
    orientation: higher_is_better
    default_value: 0.5
  - name: latency_p95
    weight: 0.2
    orientation: lower_is_better
    lower_bound: 100
    upper_bound: 1100
    default_value: 0.5
  - name: cost
    weight: 0.15
    orientation: lower_is_better
    lower_bound: 0.005
    upper_bound: 0.015
    default_value: 0.5
  - name: incident_penalty
    weight: 0.15
    orientation: lower_is_better
    lower_bound: 0
    upper_bound: 1
    default_value: 1.0
control:
  default_provider: alpha
overrides: []
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    CircuitClosed,
    RegionSupported,
    QuotaAvailable,
    ProviderEnabled,
    ComplianceAllowed,
    MaintenanceInactive,
    MinSamplesMet,
}

impl GateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::CircuitClosed => "circuit_closed",
            GateKind::RegionSupported => "region_supported",
            GateKind::QuotaAvailable => "quota_available",
            GateKind::ProviderEnabled => "provider_enabled",
            GateKind::ComplianceAllowed => "compliance_allowed",
            GateKind::MaintenanceInactive => "maintenance_inactive",
            GateKind::MinSamplesMet => "min_samples_met",
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Matches when every present field matches; a tenant rule with no tenant on
/// the request counts as a match (compliance fails closed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaintenanceWindow {
    pub provider: ProviderId,
    pub start_ms: Millis,
    pub end_ms: Millis,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    /// Overrides `control.min_sample_count` for the min-samples gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocked: Vec<ComplianceBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maintenance: Vec<MaintenanceWindow>,
}

impl GateParams {
    fn is_empty(&self) -> bool {
        self == &GateParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub name: GateKind,
    #[serde(default, skip_serializing_if = "GateParams::is_empty")]
    pub params: GateParams,
}

impl GateSpec {
    pub fn new(name: GateKind) -> Self {
        Self { name, params: GateParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    CompletionRate,
    LatencyP95,
    LatencyP99,
    Cost,
    IncidentPenalty,
}

impl FactorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FactorKind::CompletionRate => "completion_rate",
            FactorKind::LatencyP95 => "latency_p95",
            FactorKind::LatencyP99 => "latency_p99",
            FactorKind::Cost => "cost",
            FactorKind::IncidentPenalty => "incident_penalty",
        }
    }
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

fn default_factor_default() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFactorSpec {
    pub name: FactorKind,
    pub weight: f64,
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<f64>,
    /// Normalized value substituted when the metric is absent or untrusted.
    #[serde(default = "default_factor_default")]
    pub default_value: f64,
}

impl ScoreFactorSpec {
    /// Bounds used by lower-is-better normalization. The incident penalty is
    /// already a fraction, so it falls back to `[0, 1]`.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match (self.lower_bound, self.upper_bound) {
            (Some(l), Some(u)) => Some((l, u)),
            _ if self.name == FactorKind::IncidentPenalty => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreakRule {
    StickyThenLexicographic,
    WeightedRandom,
    PriorityOrder,
    Lru,
}

impl TieBreakRule {
    pub fn as_str(self) -> &'static str {
        match self {
            TieBreakRule::StickyThenLexicographic => "sticky_then_lexicographic",
            TieBreakRule::WeightedRandom => "weighted_random",
            TieBreakRule::PriorityOrder => "priority_order",
            TieBreakRule::Lru => "lru",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackKind {
    TypedError,
    EnqueueRetry,
    AlternateChannel,
    Shed,
}

impl FallbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FallbackKind::TypedError => "typed_error",
            FallbackKind::EnqueueRetry => "enqueue_retry",
            FallbackKind::AlternateChannel => "alternate_channel",
            FallbackKind::Shed => "shed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleMetricPolicy {
    PreferDefault,
    HoldLastRanking,
}

/// `Hedged` is accepted by the parser so configs can name it, and rejected by
/// validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetryPolicy {
    None,
    SameProvider,
    AlternateProvider,
    Hedged,
}

macro_rules! default_fns {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

default_fns! {
    d_refresh: u64 = 5_000;
    d_min_samples: u64 = 20;
    d_cooldown: u64 = 60_000;
    d_delta: f64 = 0.05;
    d_sustained: u32 = 2;
    d_sustained_other: u32 = 1;
    d_cb_threshold: f64 = 0.5;
    d_cb_min_samples: u32 = 20;
    d_cb_window: u32 = 50;
    d_cb_open: u64 = 30_000;
    d_probe_budget: u32 = 1;
    d_probe_close: u32 = 3;
    d_tie: TieBreakRule = TieBreakRule::StickyThenLexicographic;
    d_tie_window: u64 = 60_000;
    d_fallback: FallbackKind = FallbackKind::TypedError;
    d_stale_policy: StaleMetricPolicy = StaleMetricPolicy::PreferDefault;
    d_stale_after: u64 = 30_000;
    d_window: u64 = 60_000;
    d_bucket: u64 = 5_000;
    d_link_timeout: u64 = 120_000;
    d_tau: u64 = 300_000;
    d_retry_policy: RetryPolicy = RetryPolicy::None;
    d_max_attempts: u32 = 2;
    d_retry_budget: u32 = 100;
    d_retry_window: u64 = 60_000;
    d_deadline_interactive: u64 = 2_000;
    d_deadline_background: u64 = 10_000;
    d_bulkhead: u32 = 64;
    d_throttle: u64 = 10_000;
}

/// Control parameters for one operation. Only `default_provider` is required;
/// everything else has a shipped default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    #[serde(default = "d_refresh")]
    pub metric_refresh_interval_ms: u64,
    #[serde(default = "d_min_samples")]
    pub min_sample_count: u64,
    #[serde(default = "d_cooldown")]
    pub cooldown_ms: u64,
    #[serde(default = "d_delta")]
    pub hysteresis_delta: f64,
    /// Consecutive superior metric windows a challenger needs (interactive traffic).
    #[serde(default = "d_sustained")]
    pub sustained_windows_required: u32,
    /// Same, for background and recovery traffic.
    #[serde(default = "d_sustained_other")]
    pub sustained_windows_required_non_interactive: u32,
    #[serde(default = "d_cb_threshold")]
    pub circuit_failure_threshold: f64,
    #[serde(default = "d_cb_min_samples")]
    pub circuit_min_samples: u32,
    #[serde(default = "d_cb_window")]
    pub circuit_window: u32,
    #[serde(default = "d_cb_open")]
    pub circuit_open_ms: u64,
    #[serde(default = "d_probe_budget")]
    pub half_open_probe_budget: u32,
    #[serde(default = "d_probe_close")]
    pub probe_successes_to_close: u32,
    #[serde(default = "d_tie")]
    pub tie_break: TieBreakRule,
    /// Epoch length for weighted-random tie-break draws.
    #[serde(default = "d_tie_window")]
    pub tie_break_window_ms: u64,
    pub default_provider: ProviderId,
    #[serde(default = "d_fallback")]
    pub fallback: FallbackKind,
    #[serde(default = "d_stale_policy")]
    pub stale_metric_policy: StaleMetricPolicy,
    #[serde(default = "d_stale_after")]
    pub stale_after_ms: u64,
    #[serde(default = "d_window")]
    pub window_ms: u64,
    #[serde(default = "d_bucket")]
    pub bucket_ms: u64,
    #[serde(default = "d_link_timeout")]
    pub completion_link_timeout_ms: u64,
    #[serde(default = "d_tau")]
    pub incident_tau_ms: u64,
    #[serde(default = "d_retry_policy")]
    pub retry_policy: RetryPolicy,
    #[serde(default)]
    pub idempotent: bool,
    #[serde(default = "d_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "d_retry_budget")]
    pub retry_budget_per_window: u32,
    #[serde(default = "d_retry_window")]
    pub retry_budget_window_ms: u64,
    #[serde(default = "d_deadline_interactive")]
    pub deadline_interactive_ms: u64,
    #[serde(default = "d_deadline_background")]
    pub deadline_background_ms: u64,
    #[serde(default = "d_bulkhead")]
    pub bulkhead_capacity: u32,
    /// How long a rate-limited response keeps the quota gate closed.
    #[serde(default = "d_throttle")]
    pub throttle_ms: u64,
}

impl ControlParams {
    pub fn with_default_provider(default_provider: ProviderId) -> Self {
        Self {
            metric_refresh_interval_ms: d_refresh(),
            min_sample_count: d_min_samples(),
            cooldown_ms: d_cooldown(),
            hysteresis_delta: d_delta(),
            sustained_windows_required: d_sustained(),
            sustained_windows_required_non_interactive: d_sustained_other(),
            circuit_failure_threshold: d_cb_threshold(),
            circuit_min_samples: d_cb_min_samples(),
            circuit_window: d_cb_window(),
            circuit_open_ms: d_cb_open(),
            half_open_probe_budget: d_probe_budget(),
            probe_successes_to_close: d_probe_close(),
            tie_break: d_tie(),
            tie_break_window_ms: d_tie_window(),
            default_provider,
            fallback: d_fallback(),
            stale_metric_policy: d_stale_policy(),
            stale_after_ms: d_stale_after(),
            window_ms: d_window(),
            bucket_ms: d_bucket(),
            completion_link_timeout_ms: d_link_timeout(),
            incident_tau_ms: d_tau(),
            retry_policy: d_retry_policy(),
            idempotent: false,
            max_attempts: d_max_attempts(),
            retry_budget_per_window: d_retry_budget(),
            retry_budget_window_ms: d_retry_window(),
            deadline_interactive_ms: d_deadline_interactive(),
            deadline_background_ms: d_deadline_background(),
            bulkhead_capacity: d_bulkhead(),
            throttle_ms: d_throttle(),
        }
    }

    pub fn sustained_windows_for(&self, class: TrafficClass) -> u32 {
        match class {
            TrafficClass::Interactive => self.sustained_windows_required,
            _ => self.sustained_windows_required_non_interactive,
        }
    }

    pub fn deadline_for(&self, class: TrafficClass) -> u64 {
        match class {
            TrafficClass::Interactive => self.deadline_interactive_ms,
            _ => self.deadline_background_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuotaSpec {
    pub limit: u64,
    pub period_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitSpec {
    pub rate_per_sec: f64,
    pub burst: u32,
}

fn yes() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

fn is_zero_f64(v: &f64) -> bool {
    *v == 0.0
}

fn is_zero_u32(v: &u32) -> bool {
    *v == 0
}

/// Static per-provider attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub id: ProviderId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub supported_regions: Vec<String>,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "is_zero_f64")]
    pub static_cost: f64,
    #[serde(default, skip_serializing_if = "is_zero_u32")]
    pub priority: u32,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub compliance_approved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit: Option<RateLimitSpec>,
}

impl ProviderSpec {
    pub fn new(id: ProviderId) -> Self {
        Self {
            id,
            supported_regions: Vec::new(),
            enabled: true,
            static_cost: 0.0,
            priority: 0,
            compliance_approved: true,
            quota: None,
            rate_limit: None,
        }
    }
}

/// Conjunction of request attributes an override applies to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic_class: Option<TrafficClass>,
}

impl ScopeSpec {
    pub fn is_concrete(&self) -> bool {
        self.region.is_some() || self.tenant.is_some() || self.traffic_class.is_some()
    }

    pub fn matches(&self, ctx: &RequestContext) -> bool {
        self.region.as_ref().is_none_or(|r| *r == ctx.region)
            && self.tenant.as_ref().is_none_or(|t| ctx.tenant.as_ref() == Some(t))
            && self.traffic_class.is_none_or(|c| c == ctx.traffic_class)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sample_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hysteresis_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sustained_windows_required: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_break: Option<TieBreakRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_provider: Option<ProviderId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_metric_policy: Option<StaleMetricPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_after_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_policy: Option<RetryPolicy>,
}

impl ControlPatch {
    fn is_empty(&self) -> bool {
        self == &ControlPatch::default()
    }

    fn apply(&self, c: &mut ControlParams) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { c.$f = v.clone(); })* };
        }
        set!(
            min_sample_count,
            cooldown_ms,
            hysteresis_delta,
            sustained_windows_required,
            tie_break,
            default_provider,
            fallback,
            stale_metric_policy,
            stale_after_ms,
            retry_policy
        );
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub enabled: BTreeMap<ProviderId, bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<FactorKind, f64>,
    #[serde(default, skip_serializing_if = "ControlPatch::is_empty")]
    pub control: ControlPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSpec {
    pub scope: ScopeSpec,
    pub patch: PatchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_fraction: Option<f64>,
    /// Emergency overrides bypass config caching and apply even while the
    /// store is serving last-known-good.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub emergency: bool,
}

impl OverrideSpec {
    /// Ramp membership: `fnv1a64(key) mod 10^6 < fraction * 10^6`.
    pub fn ramp_includes(&self, ctx: &RequestContext) -> bool {
        match self.ramp_fraction {
            None => true,
            Some(f) => ramp_member(ctx.stickiness_key(), f),
        }
    }

    pub fn applies_to(&self, ctx: &RequestContext) -> bool {
        self.scope.matches(ctx) && self.ramp_includes(ctx)
    }
}

pub fn ramp_member(key: &str, fraction: f64) -> bool {
    let bucket = fnv1a64(key.as_bytes()) % 1_000_000;
    (bucket as f64) < fraction * 1_000_000.0
}

/// Versioned routing policy for one operation.
///
/// `label` is the optional human-readable `version:` key of the document;
/// `version` is the content hash and is never read from the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorList {
    pub operation: OperationId,
    #[serde(rename = "version", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub providers: Vec<ProviderSpec>,
    pub gates: Vec<GateSpec>,
    pub scores: Vec<ScoreFactorSpec>,
    pub control: ControlParams,
    #[serde(default)]
    pub overrides: Vec<OverrideSpec>,
    #[serde(skip)]
    pub version: String,
}

impl FactorList {
    /// Recomputes the content-hash version.
    pub fn seal(mut self) -> Self {
        self.version = content_version(&self);
        self
    }

    pub fn provider(&self, id: &ProviderId) -> Option<&ProviderSpec> {
        self.providers.iter().find(|p| &p.id == id)
    }

    pub fn provider_ids(&self) -> impl Iterator<Item = &ProviderId> {
        self.providers.iter().map(|p| &p.id)
    }

    pub fn has_gate(&self, kind: GateKind) -> bool {
        self.gates.iter().any(|g| g.name == kind)
    }

    pub fn gate(&self, kind: GateKind) -> Option<&GateSpec> {
        self.gates.iter().find(|g| g.name == kind)
    }

    pub fn weight_sum(&self) -> f64 {
        self.scores.iter().map(|s| s.weight).sum()
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("factor list serializes")
    }
}

/// First 16 hex chars of SHA-256 over the canonical JSON form.
pub fn content_version(fl: &FactorList) -> String {
    let canonical = serde_json::to_vec(fl).expect("factor list serializes");
    let digest = Sha256::digest(&canonical);
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FactorListViolation {
    #[error("providers must not be empty")]
    NoProviders,
    #[error("duplicate provider `{0}`")]
    DuplicateProvider(ProviderId),
    #[error("scores must not be empty")]
    NoScores,
    #[error("duplicate score factor `{0}`")]
    DuplicateFactor(FactorKind),
    #[error("duplicate gate `{0}`")]
    DuplicateGate(GateKind),
    #[error("weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("factor `{0}` weight {1} outside [0, 1]")]
    WeightRange(FactorKind, f64),
    #[error("factor `{0}` default_value {1} outside [0, 1]")]
    DefaultValueRange(FactorKind, f64),
    #[error("factor `{0}` is lower_is_better and requires lower_bound and upper_bound")]
    MissingBounds(FactorKind),
    #[error("factor `{0}` bounds require lower_bound < upper_bound")]
    BoundsOrder(FactorKind),
    #[error("default_provider `{0}` is not a configured provider")]
    UnknownDefaultProvider(ProviderId),
    #[error("gate region_supported requires supported_regions for provider `{0}`")]
    MissingSupportedRegions(ProviderId),
    #[error("gate `{gate}` references unknown provider `{provider}`")]
    GateUnknownProvider { gate: GateKind, provider: ProviderId },
    #[error("maintenance window for `{0}` must have start_ms < end_ms")]
    MaintenanceOrder(ProviderId),
    #[error("compliance block must name at least one attribute")]
    EmptyComplianceBlock,
    #[error("control: {0}")]
    Control(String),
    #[error("retry policy `hedged` is not implemented")]
    HedgedNotImplemented,
    #[error("override {0}: scope must name at least one attribute")]
    OverrideScopeEmpty(usize),
    #[error("override {0}: ramp_fraction must be in [0, 1]")]
    OverrideRamp(usize),
    #[error("override {index}: unknown provider `{provider}`")]
    OverrideUnknownProvider { index: usize, provider: ProviderId },
    #[error("override {index}: weight for `{factor}` which is not a score factor")]
    OverrideUnknownFactor { index: usize, factor: FactorKind },
    #[error("override {index}: weights must sum to 1 after patch (got {sum})")]
    OverrideWeightSum { index: usize, sum: f64 },
    #[error("override {0}: patch is empty")]
    OverrideEmptyPatch(usize),
}

fn check_control(c: &ControlParams, out: &mut Vec<FactorListViolation>) {
    let mut bad = |msg: &str| out.push(FactorListViolation::Control(msg.to_string()));
    if c.metric_refresh_interval_ms == 0 {
        bad("metric_refresh_interval_ms must be > 0");
    }
    if c.min_sample_count < 1 {
        bad("min_sample_count must be >= 1");
    }
    if !(0.0..=1.0).contains(&c.hysteresis_delta) {
        bad("hysteresis_delta must be in [0, 1]");
    }
    if c.sustained_windows_required < 1 || c.sustained_windows_required_non_interactive < 1 {
        bad("sustained_windows_required must be >= 1");
    }
    if !(c.circuit_failure_threshold > 0.0 && c.circuit_failure_threshold <= 1.0) {
        bad("circuit_failure_threshold must be in (0, 1]");
    }
    if c.circuit_min_samples < 1 {
        bad("circuit_min_samples must be >= 1");
    }
    if c.circuit_window < c.circuit_min_samples {
        bad("circuit_window must be >= circuit_min_samples");
    }
    if c.circuit_open_ms == 0 {
        bad("circuit_open_ms must be > 0");
    }
    if c.half_open_probe_budget < 1 {
        bad("half_open_probe_budget must be >= 1");
    }
    if c.probe_successes_to_close < 1 {
        bad("probe_successes_to_close must be >= 1");
    }
    if c.tie_break_window_ms == 0 {
        bad("tie_break_window_ms must be > 0");
    }
    if c.stale_after_ms == 0 {
        bad("stale_after_ms must be > 0");
    }
    if c.window_ms == 0 || c.bucket_ms == 0 || c.window_ms % c.bucket_ms != 0 || c.window_ms / c.bucket_ms < 2 {
        bad("window_ms must be a multiple (>= 2x) of bucket_ms");
    }
    if c.completion_link_timeout_ms == 0 {
        bad("completion_link_timeout_ms must be > 0");
    }
    if c.incident_tau_ms == 0 {
        bad("incident_tau_ms must be > 0");
    }
    if c.retry_budget_window_ms == 0 {
        bad("retry_budget_window_ms must be > 0");
    }
    if c.deadline_interactive_ms == 0 || c.deadline_background_ms == 0 {
        bad("deadlines must be > 0");
    }
    if c.bulkhead_capacity < 1 {
        bad("bulkhead_capacity must be >= 1");
    }
}

fn patched_weight_sum(scores: &[ScoreFactorSpec], patches: &[&PatchSpec]) -> f64 {
    scores
        .iter()
        .map(|s| {
            patches
                .iter()
                .rev()
                .find_map(|p| p.weights.get(&s.name).copied())
                .unwrap_or(s.weight)
        })
        .sum()
}

/// Checks every factor-list invariant and the cross-references between
/// gates, providers, control parameters and overrides.
pub fn validate_factor_list(fl: &FactorList) -> Result<(), Vec<FactorListViolation>> {
    use FactorListViolation as V;
    let mut out = Vec::new();

    if fl.providers.is_empty() {
        out.push(V::NoProviders);
    }
    let mut seen = BTreeSet::new();
    for p in &fl.providers {
        if !seen.insert(&p.id) {
            out.push(V::DuplicateProvider(p.id.clone()));
        }
    }

    if fl.scores.is_empty() {
        out.push(V::NoScores);
    }
    let mut factors = BTreeSet::new();
    for s in &fl.scores {
        if !factors.insert(s.name) {
            out.push(V::DuplicateFactor(s.name));
        }
        if !(0.0..=1.0).contains(&s.weight) {
            out.push(V::WeightRange(s.name, s.weight));
        }
        if !(0.0..=1.0).contains(&s.default_value) {
            out.push(V::DefaultValueRange(s.name, s.default_value));
        }
        match (s.lower_bound, s.upper_bound) {
            (Some(l), Some(u)) if l >= u => out.push(V::BoundsOrder(s.name)),
            (Some(_), Some(_)) => {}
            (None, None) if s.orientation == Orientation::LowerIsBetter && s.bounds().is_none() => {
                out.push(V::MissingBounds(s.name))
            }
            (None, None) => {}
            _ => out.push(V::MissingBounds(s.name)),
        }
    }
    if !fl.scores.is_empty() {
        let sum = fl.weight_sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            out.push(V::WeightSum(sum));
        }
    }

    let mut gates = BTreeSet::new();
    for g in &fl.gates {
        if !gates.insert(g.name) {
            out.push(V::DuplicateGate(g.name));
        }
        match g.name {
            GateKind::RegionSupported => {
                for p in fl.providers.iter().filter(|p| p.supported_regions.is_empty()) {
                    out.push(V::MissingSupportedRegions(p.id.clone()));
                }
            }
            GateKind::ComplianceAllowed => {
                for b in &g.params.blocked {
                    if b.provider.is_none() && b.region.is_none() && b.tenant.is_none() {
                        out.push(V::EmptyComplianceBlock);
                    }
                    if let Some(p) = &b.provider {
                        if fl.provider(p).is_none() {
                            out.push(V::GateUnknownProvider { gate: g.name, provider: p.clone() });
                        }
                    }
                }
            }
            GateKind::MaintenanceInactive => {
                for w in &g.params.maintenance {
                    if fl.provider(&w.provider).is_none() {
                        out.push(V::GateUnknownProvider { gate: g.name, provider: w.provider.clone() });
                    }
                    if w.start_ms >= w.end_ms {
                        out.push(V::MaintenanceOrder(w.provider.clone()));
                    }
                }
            }
            GateKind::MinSamplesMet => {
                if g.params.min_samples == Some(0) {
                    out.push(V::Control("min_samples_met.min_samples must be >= 1".into()));
                }
            }
            _ => {}
        }
    }

    check_control(&fl.control, &mut out);
    if fl.control.retry_policy == RetryPolicy::Hedged {
        out.push(V::HedgedNotImplemented);
    }
    if fl.provider(&fl.control.default_provider).is_none() {
        out.push(V::UnknownDefaultProvider(fl.control.default_provider.clone()));
    }

    let mut chain: Vec<&PatchSpec> = Vec::new();
    for (i, o) in fl.overrides.iter().enumerate() {
        if !o.scope.is_concrete() {
            out.push(V::OverrideScopeEmpty(i));
        }
        if o.ramp_fraction.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            out.push(V::OverrideRamp(i));
        }
        if o.patch == PatchSpec::default() {
            out.push(V::OverrideEmptyPatch(i));
        }
        for p in o.patch.enabled.keys() {
            if fl.provider(p).is_none() {
                out.push(V::OverrideUnknownProvider { index: i, provider: p.clone() });
            }
        }
        if let Some(p) = &o.patch.control.default_provider {
            if fl.provider(p).is_none() {
                out.push(V::OverrideUnknownProvider { index: i, provider: p.clone() });
            }
        }
        if o.patch.control.retry_policy == Some(RetryPolicy::Hedged) {
            out.push(V::HedgedNotImplemented);
        }
        for f in o.patch.weights.keys() {
            if !factors.contains(f) {
                out.push(V::OverrideUnknownFactor { index: i, factor: *f });
            }
        }
        if !o.patch.weights.is_empty() {
            // The patch alone and the cumulative chain must both keep the sum.
            for sum in [
                patched_weight_sum(&fl.scores, &[&o.patch]),
                patched_weight_sum(&fl.scores, &[chain.as_slice(), &[&o.patch]].concat()),
            ] {
                if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                    out.push(V::OverrideWeightSum { index: i, sum });
                    break;
                }
            }
        }
        chain.push(&o.patch);
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Applies every matching override in list order. A patch whose weights would
/// break the sum-to-one invariant is skipped rather than renormalized.
pub fn apply_overrides(fl: &FactorList, ctx: &RequestContext) -> FactorList {
    let mut effective = fl.clone();
    for o in fl.overrides.iter().filter(|o| o.applies_to(ctx)) {
        apply_patch(&mut effective, &o.patch);
    }
    effective
}

fn apply_patch(fl: &mut FactorList, patch: &PatchSpec) {
    if !patch.weights.is_empty() {
        let sum = patched_weight_sum(&fl.scores, &[patch]);
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return;
        }
        for s in &mut fl.scores {
            if let Some(w) = patch.weights.get(&s.name) {
                s.weight = *w;
            }
        }
    }
    for p in &mut fl.providers {
        if let Some(enabled) = patch.enabled.get(&p.id) {
            p.enabled = *enabled;
        }
    }
    let before = fl.control.default_provider.clone();
    patch.control.apply(&mut fl.control);
    if fl.provider(&fl.control.default_provider).is_none() {
        fl.control.default_provider = before;
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("empty config document")]
    Empty,
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("missing required field: {0}")]
    MissingField(String),
    #[error("invalid factor list: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FactorListViolation>),
    #[error("config stale: store unavailable since {since} ms, last-known-good bound {bound_ms} ms exceeded")]
    Stale { since: Millis, bound_ms: u64 },
    #[error("unknown operation `{0}`")]
    UnknownOperation(OperationId),
    #[error("config store unavailable")]
    Unavailable,
    #[error("unknown version `{0}`")]
    UnknownVersion(String),
}

/// Parses a YAML factor-list document in strict mode. Does not run
/// [`validate_factor_list`]; see [`load_factor_list`].
pub fn parse_factor_list(text: &str) -> Result<FactorList, ConfigError> {
    if text.lines().all(|l| {
        let l = l.trim();
        l.is_empty() || l.starts_with('#') || l == "---"
    }) {
        return Err(ConfigError::Empty);
    }
    let fl: FactorList = serde_yaml::from_str(text).map_err(classify_yaml_error)?;
    Ok(fl.seal())
}

pub(crate) fn classify_yaml_error(e: serde_yaml::Error) -> ConfigError {
    let message = e.to_string();
    if message.contains("unknown field") {
        return ConfigError::UnknownKey(message);
    }
    if message.contains("missing field") {
        return ConfigError::MissingField(message);
    }
    let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
    ConfigError::Syntax { line, column, message }
}

/// Parse followed by validation.
pub fn load_factor_list(text: &str) -> Result<FactorList, ConfigError> {
    let fl = parse_factor_list(text)?;
    validate_factor_list(&fl).map_err(ConfigError::Invalid)?;
    Ok(fl)
}

pub fn default_send_sms() -> FactorList {
    load_factor_list(DEFAULT_SEND_SMS_YAML).expect("shipped default config is valid")
}

#[derive(Debug)]
struct OpEntry {
    versions: Vec<Arc<FactorList>>,
    active: usize,
    last_known_good: usize,
}

#[derive(Debug, Default)]
struct StoreInner {
    entries: BTreeMap<OperationId, OpEntry>,
    emergency: BTreeMap<OperationId, Vec<OverrideSpec>>,
    unavailable_since: Option<Millis>,
}

/// Versioned factor lists per operation. Readers get an `Arc` to a complete,
/// validated version; installs swap the active index under a write lock.
#[derive(Debug)]
pub struct ConfigStore {
    inner: RwLock<StoreInner>,
    lkg_bound_ms: u64,
}

impl Default for ConfigStore {
    fn default() -> Self {
        Self::new(DEFAULT_LKG_BOUND_MS)
    }
}

impl ConfigStore {
    pub fn new(lkg_bound_ms: u64) -> Self {
        Self { inner: RwLock::new(StoreInner::default()), lkg_bound_ms }
    }

    pub fn lkg_bound_ms(&self) -> u64 {
        self.lkg_bound_ms
    }

    /// Validates and installs `fl` as active and last-known-good.
    pub fn put(&self, fl: FactorList) -> Result<String, ConfigError> {
        let fl = fl.seal();
        validate_factor_list(&fl).map_err(ConfigError::Invalid)?;
        let mut inner = self.inner.write();
        if inner.unavailable_since.is_some() {
            return Err(ConfigError::Unavailable);
        }
        let version = fl.version.clone();
        match inner.entries.get_mut(&fl.operation) {
            Some(entry) => {
                let idx = match entry.versions.iter().position(|v| v.version == version) {
                    Some(idx) => idx,
                    None => {
                        entry.versions.push(Arc::new(fl));
                        entry.versions.len() - 1
                    }
                };
                entry.active = idx;
                entry.last_known_good = idx;
            }
            None => {
                inner.entries.insert(
                    fl.operation.clone(),
                    OpEntry { versions: vec![Arc::new(fl)], active: 0, last_known_good: 0 },
                );
            }
        }
        Ok(version)
    }

    /// Re-activates a previously installed version.
    pub fn activate(&self, op: &OperationId, version: &str) -> Result<(), ConfigError> {
        let mut inner = self.inner.write();
        let entry = inner.entries.get_mut(op).ok_or_else(|| ConfigError::UnknownOperation(op.clone()))?;
        let idx = entry
            .versions
            .iter()
            .position(|v| v.version == version)
            .ok_or_else(|| ConfigError::UnknownVersion(version.to_string()))?;
        entry.active = idx;
        entry.last_known_good = idx;
        Ok(())
    }

    pub fn versions(&self, op: &OperationId) -> Vec<String> {
        self.inner
            .read()
            .entries
            .get(op)
            .map(|e| e.versions.iter().map(|v| v.version.clone()).collect())
            .unwrap_or_default()
    }

    /// Returns the active list, or last-known-good while the store has been
    /// unavailable for at most the configured bound. Emergency overrides are
    /// appended on every read.
    pub fn get(&self, op: &OperationId, now: Millis) -> Result<Arc<FactorList>, ConfigError> {
        let inner = self.inner.read();
        let entry = inner.entries.get(op).ok_or_else(|| ConfigError::UnknownOperation(op.clone()))?;
        let base = match inner.unavailable_since {
            None => &entry.versions[entry.active],
            Some(since) if now.saturating_sub(since) <= self.lkg_bound_ms => &entry.versions[entry.last_known_good],
            Some(since) => return Err(ConfigError::Stale { since, bound_ms: self.lkg_bound_ms }),
        };
        match inner.emergency.get(op) {
            Some(extra) if !extra.is_empty() => {
                let mut fl = (**base).clone();
                fl.overrides.extend(extra.iter().cloned());
                Ok(Arc::new(fl))
            }
            _ => Ok(Arc::clone(base)),
        }
    }

    /// The last-known-good list regardless of availability (for trace context).
    pub fn last_known_good(&self, op: &OperationId) -> Option<Arc<FactorList>> {
        let inner = self.inner.read();
        inner.entries.get(op).map(|e| Arc::clone(&e.versions[e.last_known_good]))
    }

    pub fn mark_unavailable(&self, now: Millis) {
        let mut inner = self.inner.write();
        if inner.unavailable_since.is_none() {
            inner.unavailable_since = Some(now);
        }
    }

    pub fn mark_available(&self) {
        self.inner.write().unavailable_since = None;
    }

    pub fn unavailable_since(&self) -> Option<Millis> {
        self.inner.read().unavailable_since
    }

    /// Installs an emergency override; effective on the next `get`.
    pub fn install_emergency(&self, op: &OperationId, mut o: OverrideSpec) {
        o.emergency = true;
        self.inner.write().emergency.entry(op.clone()).or_default().push(o);
    }

    pub fn clear_emergency(&self, op: &OperationId) {
        self.inner.write().emergency.remove(op);
    }
}
