//! Shared vocabulary: identifiers, request context, the outcome taxonomy and
//! the attempt-event record every provider call produces.

use std::fmt;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Milliseconds since the Unix epoch (or since the start of a simulation run).
pub type Millis = u64;

/// Schema version stamped on every emitted [`AttemptEvent`].
pub const EVENT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("identifier must not be empty")]
    Empty,
    #[error("operation id `{0}` must be an uppercase token of A-Z, 0-9 and `_`")]
    BadOperationToken(String),
}

/// Name of a routed operation such as `SEND_SMS`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OperationId(String);

impl OperationId {
    pub fn new(name: impl Into<String>) -> Result<Self, IdError> {
        let name = name.into();
        if name.is_empty() {
            return Err(IdError::Empty);
        }
        let mut chars = name.chars();
        let first_ok = chars.next().is_some_and(|c| c.is_ascii_uppercase());
        if !first_ok
            || !name
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
        {
            return Err(IdError::BadOperationToken(name));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for OperationId {
    type Error = IdError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<OperationId> for String {
    fn from(value: OperationId) -> Self {
        value.0
    }
}

impl fmt::Display for OperationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Provider identifier. The derived `Ord` is the lexicographic order used for
/// deterministic tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ProviderId(String);

impl ProviderId {
    pub fn new(name: impl Into<String>) -> Result<Self, IdError> {
        let name = name.into();
        if name.is_empty() {
            return Err(IdError::Empty);
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ProviderId {
    type Error = IdError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ProviderId> for String {
    fn from(value: ProviderId) -> Self {
        value.0
    }
}

impl fmt::Display for ProviderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrafficClass {
    #[default]
    Interactive,
    Background,
    Recovery,
}

/// Everything the router may consult about a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestContext {
    pub request_id: String,
    pub operation: OperationId,
    pub region: String,
    #[serde(default)]
    pub tenant: Option<String>,
    #[serde(default)]
    pub traffic_class: TrafficClass,
    /// Stickiness key (opaque token).
    #[serde(default)]
    pub user_key: Option<String>,
    #[serde(default)]
    pub priority: u32,
    pub timestamp: Millis,
}

impl RequestContext {
    pub fn new(request_id: impl Into<String>, operation: OperationId, region: impl Into<String>, timestamp: Millis) -> Self {
        Self {
            request_id: request_id.into(),
            operation,
            region: region.into(),
            tenant: None,
            traffic_class: TrafficClass::Interactive,
            user_key: None,
            priority: 0,
            timestamp,
        }
    }

    /// Key used for ramp hashing and stable tie-break draws.
    pub fn stickiness_key(&self) -> &str {
        self.user_key.as_deref().unwrap_or(&self.request_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Success,
    Timeout,
    RateLimited,
    ServerError,
    ClientError,
    ConnectionError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportOutcome {
    pub kind: TransportKind,
    #[serde(default)]
    pub status_code: Option<u16>,
    #[serde(default)]
    pub error_category: Option<String>,
}

impl TransportOutcome {
    pub fn success() -> Self {
        Self { kind: TransportKind::Success, status_code: Some(200), error_category: None }
    }

    pub fn timeout() -> Self {
        Self { kind: TransportKind::Timeout, status_code: None, error_category: Some("deadline_exceeded".into()) }
    }

    pub fn rate_limited() -> Self {
        Self { kind: TransportKind::RateLimited, status_code: Some(429), error_category: Some("throttled".into()) }
    }

    pub fn server_error() -> Self {
        Self { kind: TransportKind::ServerError, status_code: Some(503), error_category: Some("unavailable".into()) }
    }

    pub fn connection_error(category: impl Into<String>) -> Self {
        Self { kind: TransportKind::ConnectionError, status_code: None, error_category: Some(category.into()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BusinessKind {
    Accepted,
    Delivered,
    Completed,
    Authorized,
    Declined,
    Failed,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct BusinessOutcome {
    pub kind: BusinessKind,
}

impl BusinessOutcome {
    pub const fn new(kind: BusinessKind) -> Self {
        Self { kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CircuitState {
    #[default]
    Closed,
    Open,
    HalfOpen,
}

impl fmt::Display for CircuitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CircuitState::Closed => "closed",
            CircuitState::Open => "open",
            CircuitState::HalfOpen => "half_open",
        })
    }
}

/// Abstract non-negative cost held as integer micro-units (six fractional
/// digits). Serialized as a plain JSON number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Cost(u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn from_micros(micros: u64) -> Self {
        Self(micros)
    }

    /// Rounds to the nearest micro-unit; negative and non-finite inputs clamp to zero.
    pub fn from_f64(value: f64) -> Self {
        if !value.is_finite() || value <= 0.0 {
            return Self(0);
        }
        Self((value * 1e6).round() as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Serialize for Cost {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Cost {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v < 0.0 || !v.is_finite() {
            return Err(serde::de::Error::custom("cost must be a non-negative number"));
        }
        Ok(Cost::from_f64(v))
    }
}

/// One record per provider attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttemptEvent {
    pub schema_version: u32,
    pub request_id: String,
    pub operation: OperationId,
    pub provider: ProviderId,
    pub region: String,
    pub tenant: Option<String>,
    pub start_time: Millis,
    pub end_time: Millis,
    pub latency_ms: u64,
    pub timeout: bool,
    pub retry_count: u32,
    pub circuit_state: CircuitState,
    pub transport: TransportOutcome,
    pub business: BusinessOutcome,
    pub cost: Cost,
    pub factor_list_version: String,
    pub trace_id: String,
}

impl AttemptEvent {
    pub fn outcome_class(&self) -> OutcomeClass {
        classify_outcome(&self.transport, &self.business)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeClass {
    AttemptSuccess,
    WorkflowSuccess,
    AttemptFailure,
}

impl OutcomeClass {
    pub fn is_success(self) -> bool {
        !matches!(self, OutcomeClass::AttemptFailure)
    }
}

/// Workflow success wins over transport status: a late delivery receipt counts
/// even if the transport leg looked unusual.
pub fn classify_outcome(transport: &TransportOutcome, business: &BusinessOutcome) -> OutcomeClass {
    match business.kind {
        BusinessKind::Completed | BusinessKind::Authorized | BusinessKind::Delivered => OutcomeClass::WorkflowSuccess,
        _ if transport.kind == TransportKind::Success => OutcomeClass::AttemptSuccess,
        _ => OutcomeClass::AttemptFailure,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EventViolation {
    #[error("schema version missing")]
    SchemaVersion,
    #[error("request id empty")]
    EmptyRequestId,
    #[error("region empty")]
    EmptyRegion,
    #[error("time order: end_time {end} < start_time {start}")]
    TimeOrder { start: Millis, end: Millis },
    #[error("latency mismatch: latency_ms {latency} != end_time - start_time ({expected})")]
    LatencyMismatch { latency: u64, expected: u64 },
    #[error("timeout consistency: timeout flag set with transport kind {0:?}")]
    TimeoutConsistency(TransportKind),
    #[error("timeout carries status code {0}")]
    TimeoutStatusCode(u16),
}

/// Returns every violated event invariant.
pub fn validate_event(event: &AttemptEvent) -> Result<(), Vec<EventViolation>> {
    let mut violations = Vec::new();
    if event.schema_version == 0 {
        violations.push(EventViolation::SchemaVersion);
    }
    if event.request_id.is_empty() {
        violations.push(EventViolation::EmptyRequestId);
    }
    if event.region.is_empty() {
        violations.push(EventViolation::EmptyRegion);
    }
    if event.end_time < event.start_time {
        violations.push(EventViolation::TimeOrder { start: event.start_time, end: event.end_time });
    } else if event.latency_ms != event.end_time - event.start_time {
        violations.push(EventViolation::LatencyMismatch {
            latency: event.latency_ms,
            expected: event.end_time - event.start_time,
        });
    }
    if event.timeout && event.transport.kind != TransportKind::Timeout {
        violations.push(EventViolation::TimeoutConsistency(event.transport.kind));
    }
    if event.transport.kind == TransportKind::Timeout {
        if let Some(code) = event.transport.status_code {
            violations.push(EventViolation::TimeoutStatusCode(code));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("serialize: {0}")]
    Serialize(#[source] serde_json::Error),
}

/// Writes one compact JSON object per line.
pub fn write_jsonl<'a, T, W, I>(mut out: W, records: I) -> Result<(), JsonlError>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(JsonlError::Serialize)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn to_jsonl_string<'a, T, I>(records: I) -> String
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records).expect("in-memory jsonl write");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

/// A line that failed to parse in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineWarning {
    pub line: usize,
    pub message: String,
}

/// Reads JSONL records. Blank lines are ignored. In strict mode the first
/// malformed line is fatal; otherwise it is reported and skipped.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R, strict: bool) -> Result<(Vec<T>, Vec<LineWarning>), JsonlError> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(record) => records.push(record),
            Err(source) if strict => return Err(JsonlError::Malformed { line: idx + 1, source }),
            Err(e) => warnings.push(LineWarning { line: idx + 1, message: e.to_string() }),
        }
    }
    Ok((records, warnings))
}

/// Stable 64-bit FNV-1a, used wherever routing needs reproducible hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn classify_examples() {
        let ok = TransportOutcome::success();
        assert_eq!(
            classify_outcome(&ok, &BusinessOutcome::new(BusinessKind::Completed)),
            OutcomeClass::WorkflowSuccess
        );
        assert_eq!(classify_outcome(&ok, &BusinessOutcome::default()), OutcomeClass::AttemptSuccess);
        assert_eq!(
            classify_outcome(&TransportOutcome::timeout(), &BusinessOutcome::default()),
            OutcomeClass::AttemptFailure
        );
        assert_eq!(
            classify_outcome(&ok, &BusinessOutcome::new(BusinessKind::Declined)),
            OutcomeClass::AttemptSuccess
        );
    }

    #[test]
    fn operation_ids_are_uppercase_tokens() {
        assert!(OperationId::new("SEND_SMS").is_ok());
        assert!(OperationId::new("VERIFY_OTP2").is_ok());
        assert_eq!(OperationId::new(""), Err(IdError::Empty));
        assert!(OperationId::new("send_sms").is_err());
        assert!(OperationId::new("_X").is_err());
        assert!(ProviderId::new("").is_err());
        assert!(serde_json::from_str::<OperationId>("\"bad op\"").is_err());
    }

    #[test]
    fn provider_order_is_lexicographic() {
        assert!(pid("alpha") < pid("beta"));
        assert!(pid("B") < pid("a"));
    }

    #[test]
    fn well_formed_event_validates() {
        assert_eq!(validate_event(&event("r1", "alpha", 1_000, 120)), Ok(()));
    }

    #[test]
    fn time_order_violation() {
        let mut e = event("r1", "alpha", 1_000, 120);
        e.end_time = 500;
        let v = validate_event(&e).unwrap_err();
        assert!(matches!(v[0], EventViolation::TimeOrder { .. }));
        assert!(v[0].to_string().starts_with("time order"));
    }

    #[test]
    fn timeout_consistency_violation() {
        let mut e = event("r1", "alpha", 1_000, 120);
        e.timeout = true;
        let v = validate_event(&e).unwrap_err();
        assert_eq!(v, vec![EventViolation::TimeoutConsistency(TransportKind::Success)]);
        assert!(v[0].to_string().starts_with("timeout consistency"));
    }

    #[test]
    fn collects_every_violation() {
        let mut e = event("", "alpha", 1_000, 120);
        e.schema_version = 0;
        e.region.clear();
        e.latency_ms = 7;
        e.transport = TransportOutcome { kind: TransportKind::Timeout, status_code: Some(504), error_category: None };
        let v = validate_event(&e).unwrap_err();
        assert_eq!(v.len(), 5, "{v:?}");
    }

    #[test]
    fn jsonl_keys_are_snake_case_field_names() {
        let line = to_jsonl_string([&event("r1", "alpha", 10, 5)]);
        assert!(line.ends_with("}\n"));
        for key in [
            "\"schema_version\"",
            "\"request_id\"",
            "\"start_time\"",
            "\"latency_ms\"",
            "\"retry_count\"",
            "\"circuit_state\":\"closed\"",
            "\"factor_list_version\"",
            "\"trace_id\"",
            "\"cost\":0.0075",
        ] {
            assert!(line.contains(key), "missing {key} in {line}");
        }
    }

    #[test]
    fn lenient_and_strict_reads() {
        let good = to_jsonl_string([&event("a", "p", 0, 1), &event("b", "p", 0, 1)]);
        let text = format!("{}{{not json}}\n", good);
        let (events, warnings) = read_jsonl::<AttemptEvent, _>(text.as_bytes(), false).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 3);
        let err = read_jsonl::<AttemptEvent, _>(text.as_bytes(), true).unwrap_err();
        assert!(matches!(err, JsonlError::Malformed { line: 3, .. }));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    fn arb_transport() -> impl Strategy<Value = TransportOutcome> {
        prop_oneof![
            Just(TransportOutcome::success()),
            Just(TransportOutcome::timeout()),
            Just(TransportOutcome::rate_limited()),
            Just(TransportOutcome::server_error()),
            Just(TransportOutcome::connection_error("reset")),
            Just(TransportOutcome { kind: TransportKind::ClientError, status_code: Some(400), error_category: None }),
        ]
    }

    fn arb_business() -> impl Strategy<Value = BusinessOutcome> {
        prop_oneof![
            Just(BusinessKind::Accepted),
            Just(BusinessKind::Delivered),
            Just(BusinessKind::Completed),
            Just(BusinessKind::Authorized),
            Just(BusinessKind::Declined),
            Just(BusinessKind::Failed),
            Just(BusinessKind::Unknown),
        ]
        .prop_map(BusinessOutcome::new)
    }

    proptest! {
        #[test]
        fn classify_is_deterministic(t in arb_transport(), b in arb_business()) {
            let first = classify_outcome(&t, &b);
            prop_assert_eq!(first, classify_outcome(&t, &b));
            let wf = matches!(b.kind, BusinessKind::Completed | BusinessKind::Authorized | BusinessKind::Delivered);
            prop_assert_eq!(first == OutcomeClass::WorkflowSuccess, wf);
        }

        #[test]
        fn event_json_round_trip(
            start in 0u64..10_000_000_000,
            latency in 0u64..100_000,
            retry in 0u32..5,
            cost_micros in 0u64..1_000_000_000,
            tenant in proptest::option::of("[a-z]{1,8}"),
            t in arb_transport(),
            b in arb_business(),
        ) {
            let mut e = event("req-1", "alpha", start, latency);
            e.retry_count = retry;
            e.cost = Cost::from_micros(cost_micros);
            e.tenant = tenant;
            e.transport = t;
            e.business = b;
            let text = to_jsonl_string([&e]);
            let (back, warnings) = read_jsonl::<AttemptEvent, _>(text.as_bytes(), true).unwrap();
            prop_assert!(warnings.is_empty());
            prop_assert_eq!(&back[0], &e);
        }
    }
}
