//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use factor_route::domain::{write_jsonl, CircuitState, Millis, OperationId, OutcomeClass, ProviderId, RequestContext};
use factor_route::factor_config::{
    load_factor_list, ConfigStore, FactorKind, FactorList, GateKind, GateSpec, Orientation, ProviderSpec, ScoreFactorSpec,
};
use factor_route::protection::{CircuitBreaker, CircuitConfig, CircuitDecision, Protection};
use factor_route::router::{route, validate_trace, RouteOptions, RouterDeps, StickyEntry, StickyStore};
use factor_route::simulator::{
    availability_serial, check_state_machine, replay_events, run_scenario, RunOptions, Scenario, SimMode,
    Terminal,
};
use factor_route::telemetry::{
    histogram, MetricKey, MetricSnapshot, PercentileMode, SnapshotCache, SnapshotSet, WindowAggregator, WindowConfig,
};

type Outcome = Result<String, String>;

fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

fn scenario(name: &str) -> Scenario {
    Scenario::load(asset(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn pid(s: &str) -> ProviderId {
    ProviderId::new(s).unwrap()
}

fn sms() -> OperationId {
    OperationId::new("SEND_SMS").unwrap()
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Closed form written out independently of the library.
fn oracle_failures(lambda: f64, d: f64, t: f64, pf: f64, ps: f64) -> f64 {
    let t = if t < d { t } else { d };
    lambda * t * (1.0 - pf) + lambda * (d - t) * (1.0 - ps)
}

const TABLE: [(f64, f64); 5] = [(10.0, 9500.0), (8.0, 7620.0), (2.0, 1980.0), (0.5, 570.0), (0.0, 100.0)];

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_factor-route")).args(["model", "--table2", "--format", "json"]).output().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(out.status.success(), "model --table2 failed")?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let rows = v["table"].as_array().ok_or("no table")?;
    ensure(rows.len() == 5, "expected five rows")?;
    for (row, (t, want)) in rows.iter().zip(TABLE) {
        let got = row["expected_failures"].as_f64().ok_or("missing value")?.round();
        ensure(got == want && oracle_failures(1000.0, 10.0, t, 0.05, 0.99).round() == want, format!("T={t}: got {got}, want {want}"))?;
    }
    ensure(rows[3]["reference"].as_f64() == Some(595.0), "0.5-minute row must carry the 595 reference")?;
    let text = Command::new(env!("CARGO_BIN_EXE_factor-route")).args(["model", "--table2"]).output().map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&text.stdout);
    ensure(text.contains("prints 595") && text.contains("570*"), "text output lacks the 595 footnote")?;
    ensure(elapsed < Duration::from_secs(1), format!("took {elapsed:?}"))?;
    Ok(format!("rows 9500/7620/1980/570/100 in {elapsed:.0?}; 595 footnoted"))
}

fn criterion_2() -> Outcome {
    let s = scenario("table2.yaml");
    let mut slowest = Duration::ZERO;
    for (row, variant) in s.expand_sweep() {
        let t_min = row.switch_at_ms.map_or(10.0, |ms| ms as f64 / 60_000.0);
        let expected = oracle_failures(1000.0, 10.0, t_min, 0.05, 0.99);
        let start = Instant::now();
        let run = run_scenario(&variant, RunOptions { mode: Some(SimMode::Expectation), seed: None, record_traces: false }).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed());
        let failed = run.report.failed_request_count as f64;
        ensure((failed - expected).abs() <= expected * 0.001, format!("{}: expectation mode {failed} vs {expected}", row.label))?;
        let n1 = 1000.0 * t_min;
        let n2 = 1000.0 * (10.0 - t_min);
        let sigma = (n1 * 0.95 * 0.05 + n2 * 0.01 * 0.99).sqrt();
        for seed in [1, 2, 3, 4, 5] {
            let start = Instant::now();
            let run = run_scenario(&variant, RunOptions { mode: Some(SimMode::Sampled), seed: Some(seed), record_traces: false }).map_err(|e| e.to_string())?;
            slowest = slowest.max(start.elapsed());
            let failed = run.report.failed_request_count as f64;
            ensure((failed - expected).abs() <= 3.0 * sigma, format!("{} seed {seed}: sampled {failed} vs {expected} +- {:.1}", row.label, 3.0 * sigma))?;
        }
    }
    ensure(slowest < Duration::from_secs(10), format!("slowest row took {slowest:?}"))?;
    Ok(format!("5 rows exact in expectation mode, 25 sampled runs within 3 sigma; slowest run {slowest:.0?}"))
}

const TWO_NINES: &str = r#"
name: independent_pair
duration_ms: 600000
arrival_rate_per_min: 10000
mode: sampled
seed: 2024
providers:
  - id: a1
    base_success_prob: 0.9
    latency: {kind: constant, ms: 50}
    cost_per_attempt: 0.001
  - id: a2
    base_success_prob: 0.9
    latency: {kind: constant, ms: 50}
    cost_per_attempt: 0.002
factor_list:
  operation: SEND_SMS
  providers:
    - id: a1
      static_cost: 0.001
    - id: a2
      static_cost: 0.002
  gates:
    - name: provider_enabled
  scores:
    - name: cost
      weight: 1.0
      orientation: lower_is_better
      lower_bound: 0.0
      upper_bound: 0.01
  control:
    default_provider: a1
    retry_policy: alternate_provider
    idempotent: true
    max_attempts: 1
    retry_budget_per_window: 1000000
    bulkhead_capacity: 100000
"#;

fn criterion_3() -> Outcome {
    let s3 = availability_serial(&[0.999; 3]).map_err(|e| e.to_string())?;
    let s5 = availability_serial(&[0.999; 5]).map_err(|e| e.to_string())?;
    ensure((0.9970..=0.9971).contains(&s3), format!("serial x3 = {s3}"))?;
    ensure((0.9950..=0.9951).contains(&s5), format!("serial x5 = {s5}"))?;
    let s = Scenario::from_yaml(TWO_NINES).map_err(|e| e.to_string())?;
    let run = run_scenario(&s, RunOptions { record_traces: false, ..RunOptions::default() }).map_err(|e| e.to_string())?;
    ensure(run.report.requests == 100_000, format!("{} requests", run.report.requests))?;
    let rate = run.report.completion_rate;
    ensure((rate - 0.99).abs() <= 0.005, format!("combined success {rate}"))?;
    Ok(format!("serial {s3:.6} / {s5:.6}; two-provider simulation {rate:.4} over 100000 requests"))
}

fn criterion_4() -> Outcome {
    let s = scenario("outage.yaml");
    let mut worst = 0;
    for seed in [42, 1, 2, 3, 4] {
        let run = run_scenario(&s, RunOptions { seed: Some(seed), record_traces: false, ..RunOptions::default() }).map_err(|e| e.to_string())?;
        let f = &run.report.failover;
        let observed = f.observed_ms.ok_or(format!("seed {seed}: no traffic shift observed"))?;
        ensure(f.automatic && f.respected && observed <= f.bound_ms, format!("seed {seed}: observed {observed} > bound {}", f.bound_ms))?;
        ensure(f.bound_ms == f.terms.detect_ms + f.terms.publish_ms + f.terms.aggregate_ms + f.terms.refresh_ms + f.terms.decision_ms, "bound is not the sum of its terms")?;
        worst = worst.max(observed);
    }
    Ok(format!("worst observed shift {worst}ms <= bound {}ms over 5 seeds", s.failover_terms().bound()))
}

fn criterion_5() -> Outcome {
    let mut summary = Vec::new();
    for (file, want) in [
        ("recovery.yaml", &["T1", "T2", "T3"][..]),
        ("recovery_probe_failure.yaml", &["T1", "T2", "T4", "T2", "T3"][..]),
        ("recovery_dual_outage.yaml", &["T1", "T5", "T6"][..]),
    ] {
        let s = scenario(file);
        let run = run_scenario(&s, RunOptions::default()).map_err(|e| e.to_string())?;
        let c = check_state_machine(&run, &s).map_err(|e| e.to_string())?;
        ensure(c.conformant(), format!("{file}: {} nonconforming: {:?}", c.violations.len(), c.violations.first()))?;
        let labels = c.labels("US");
        ensure(labels == want, format!("{file}: got {labels:?}, want {want:?}"))?;
        let status = Command::new(env!("CARGO_BIN_EXE_factor-route")).args(["simulate"]).arg(asset(file)).output().map_err(|e| e.to_string())?;
        ensure(status.status.code() == Some(0), format!("{file}: simulate exited {:?}", status.status.code()))?;
        summary.push(format!("{}: {}", file.trim_end_matches(".yaml"), labels.join(">")));
    }
    Ok(summary.join("; "))
}

fn two_provider_list(delta: f64, cooldown_ms: u64, sustained: u32) -> FactorList {
    let yaml = format!(
        r#"operation: SEND_SMS
providers:
  - id: alpha
  - id: beta
gates:
  - name: provider_enabled
scores:
  - name: completion_rate
    weight: 1.0
    orientation: higher_is_better
control:
  default_provider: alpha
  min_sample_count: 1
  hysteresis_delta: {delta}
  cooldown_ms: {cooldown_ms}
  sustained_windows_required: {sustained}
  stale_after_ms: 1000000000
"#
    );
    load_factor_list(&yaml).expect("valid test config")
}

fn metric(provider: &str, completion: f64, ts: Millis, id: &str, region: &str) -> MetricSnapshot {
    MetricSnapshot {
        key: MetricKey::new(sms(), pid(provider), region),
        attempted: 100,
        completed: (completion * 100.0).round() as u64,
        completion_rate: Some(completion),
        latency_p95_ms: Some(200.0),
        latency_p99_ms: Some(300.0),
        mean_cost: Some(0.01),
        incident_penalty: 0.0,
        sample_count: 100,
        freshness_ts: ts,
        snapshot_id: id.to_string(),
    }
}

struct World {
    config: ConfigStore,
    cache: SnapshotCache,
    protection: Protection,
    sticky: StickyStore,
}

impl World {
    fn new(fl: FactorList) -> Self {
        let config = ConfigStore::default();
        config.put(fl).expect("valid");
        Self { config, cache: SnapshotCache::default(), protection: Protection::new(), sticky: StickyStore::new() }
    }

    fn deps(&self) -> RouterDeps<'_> {
        RouterDeps { config: &self.config, snapshots: &self.cache, protection: &self.protection, sticky: &self.sticky }
    }

    fn publish(&self, ts: Millis, window: usize, scores: &[(&str, f64)]) {
        let id = format!("w{window}");
        let providers = scores.iter().map(|(p, c)| (pid(p), metric(p, *c, ts, &id, "US"))).collect();
        self.cache.publish(SnapshotSet { operation: sms(), scope: "US".into(), freshness_ts: ts, snapshot_id: id, providers });
    }
}

/// Routes one request per window over the given completion-rate pairs and
/// returns the number of provider switches.
fn count_switches(fl: FactorList, windows: &[(f64, f64)], spacing_ms: u64) -> u64 {
    let world = World::new(fl);
    let mut last: Option<ProviderId> = None;
    let mut switches = 0;
    for (i, (a, b)) in windows.iter().enumerate() {
        let ts = i as u64 * spacing_ms;
        world.publish(ts, i, &[("alpha", *a), ("beta", *b)]);
        let ctx = RequestContext::new(format!("r{i}"), sms(), "US", ts);
        let out = route(&ctx, &world.deps(), &RouteOptions::default());
        let sel = out.trace.selected.clone().expect("both providers eligible");
        if last.as_ref().is_some_and(|p| p != &sel) {
            switches += 1;
        }
        last = Some(sel);
    }
    switches
}

fn run_property<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new_with_rng(Config { cases, failure_persistence: None, ..Config::default() }, proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn criterion_6() -> Outcome {
    // (a) challenger always within the margin of the incumbent.
    run_property(100, (0.2f64..0.8, prop::collection::vec(-0.0499f64..0.0499, 1000)), |(base, noise)| {
        let delta = 0.05;
        let windows: Vec<(f64, f64)> = noise.iter().map(|n| (base, base + n)).collect();
        let mut first = windows.clone();
        first[0] = (base, base);
        let switches = count_switches(two_provider_list(delta, 60_000, 2), &first, 5_000);
        prop_assert_eq!(switches, 0);
        Ok(())
    })
    .map_err(|e| format!("(a) {e}"))?;
    // (b) switch count bounded by the cooldown.
    run_property(
        100,
        (prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 20..300), 1_000u64..120_000, 100u64..20_000, 0.0f64..0.2, 1u32..3),
        |(windows, cooldown, spacing, delta, sustained)| {
            let switches = count_switches(two_provider_list(delta, cooldown, sustained), &windows, spacing);
            let l = (windows.len() as u64 - 1) * spacing;
            prop_assert!(switches as f64 <= 1.0 + l as f64 / cooldown as f64, "{} switches over {}ms with cooldown {}", switches, l, cooldown);
            Ok(())
        },
    )
    .map_err(|e| format!("(b) {e}"))?;
    // (c) hysteresis removal strictly increases switching under noise.
    run_property(100, (0.3f64..0.7, prop::collection::vec((any::<bool>(), 0.001f64..0.04), 50..300)), |(base, noise)| {
        let mut windows: Vec<(f64, f64)> = noise.iter().map(|(up, m)| if *up { (base, base + m) } else { (base + m, base) }).collect();
        windows[0] = (base + 0.01, base);
        windows[1] = (base, base + 0.01);
        let with = count_switches(two_provider_list(0.05, 30_000, 2), &windows, 5_000);
        let without = count_switches(two_provider_list(0.0, 0, 1), &windows, 5_000);
        prop_assert!(without > with, "without={} with={}", without, with);
        Ok(())
    })
    .map_err(|e| format!("(c) {e}"))?;
    Ok("(a) 0 switches over 1000 in-margin windows, (b) switches <= 1 + L/cooldown, (c) removing hysteresis adds switches; 100 cases each".into())
}

#[derive(Debug, Clone)]
enum CbOp {
    Admit { dt: u64 },
    Finish { pick: usize, success: bool, dt: u64 },
}

fn cb_op() -> impl Strategy<Value = CbOp> {
    prop_oneof![
        (0u64..4_000).prop_map(|dt| CbOp::Admit { dt }),
        (any::<usize>(), prop::bool::weighted(0.55), 0u64..4_000).prop_map(|(pick, success, dt)| CbOp::Finish { pick, success, dt }),
    ]
}

fn criterion_7() -> Outcome {
    let strategy = (prop::collection::vec(cb_op(), 1..200), 1u32..10, 0.1f64..0.9, 1_000u64..20_000, 1u32..4, 1u32..4);
    run_property(10_000, strategy, |(ops, min_samples, threshold, open_ms, budget, to_close)| {
        let config = CircuitConfig { failure_threshold: threshold, min_samples, window: 20, open_ms, probe_budget: budget, probe_successes_to_close: to_close };
        let mut cb = CircuitBreaker::new(MetricKey::new(sms(), pid("alpha"), "US"), config);
        let mut now = 0u64;
        let mut in_flight: Vec<bool> = Vec::new();
        let legal = |from: CircuitState, to: CircuitState| {
            matches!(
                (from, to),
                (CircuitState::Closed, CircuitState::Open)
                    | (CircuitState::Open, CircuitState::HalfOpen)
                    | (CircuitState::HalfOpen, CircuitState::Closed)
                    | (CircuitState::HalfOpen, CircuitState::Open)
            )
        };
        for op in ops {
            let before = cb.state();
            match op {
                CbOp::Admit { dt } => {
                    now += dt;
                    let opened = cb.opened_at();
                    let (decision, t) = cb.allow(now);
                    if before == CircuitState::Open && opened.is_some_and(|o| now - o < open_ms) {
                        prop_assert_eq!(decision, CircuitDecision::Deny);
                    }
                    if let Some(t) = t {
                        prop_assert!(legal(t.from, t.to), "{:?}", t);
                    }
                    if decision.allows() {
                        in_flight.push(decision == CircuitDecision::AllowProbe);
                    }
                }
                CbOp::Finish { pick, success, dt } => {
                    if in_flight.is_empty() {
                        continue;
                    }
                    now += dt;
                    in_flight.remove(pick % in_flight.len());
                    let class = if success { OutcomeClass::AttemptSuccess } else { OutcomeClass::AttemptFailure };
                    if let Some(t) = cb.record(class, now) {
                        prop_assert!(legal(t.from, t.to), "{:?}", t);
                        prop_assert_eq!(t.from, before);
                    }
                }
            }
            prop_assert!(cb.probes_in_flight() <= budget);
            if cb.state() != CircuitState::HalfOpen {
                prop_assert_eq!(cb.probes_in_flight(), 0);
            }
        }
        Ok(())
    })?;
    Ok("10000 random sequences: only legal transitions, deny while open, probes within budget".into())
}

#[derive(Debug, Clone)]
struct RawEvent {
    start: Millis,
    latency: u64,
    completed: bool,
}

fn oracle_rank(sorted: &[u64], q: f64) -> u64 {
    let n = sorted.len();
    let mut rank = (q * n as f64).ceil() as usize;
    if rank < 1 {
        rank = 1;
    }
    sorted[rank.min(n) - 1]
}

fn criterion_8() -> Outcome {
    let log = prop::collection::vec((0u64..600_000, prop_oneof![1u64..500, 1u64..20_000], prop::bool::weighted(0.9)), 1..10_000)
        .prop_map(|v| {
            let mut v: Vec<RawEvent> = v.into_iter().map(|(start, latency, completed)| RawEvent { start, latency, completed }).collect();
            v.sort_by_key(|e| e.start);
            v
        });
    let strategy = (log, prop::collection::vec(0u64..700_000, 3), prop::collection::vec(0u64..140, 3));
    let wc = WindowConfig::new(60_000, 5_000, 120_000, 300_000).map_err(|e| e.to_string())?;
    run_property(500, strategy, |(events, nows, bucket_nows)| {
        let mut exact = WindowAggregator::new(wc, PercentileMode::Exact);
        let mut hist = WindowAggregator::new(wc, PercentileMode::Histogram);
        for e in &events {
            exact.ingest(e.start, e.latency, 0, e.completed);
            hist.ingest(e.start, e.latency, 0, e.completed);
        }
        let key = MetricKey::new(sms(), pid("alpha"), "US");
        let brute = |now: Millis| {
            let inside: Vec<&RawEvent> = events.iter().filter(|e| e.start <= now && now - e.start < 60_000).collect();
            let mut lat: Vec<u64> = inside.iter().map(|e| e.latency).collect();
            lat.sort_unstable();
            (inside.len() as u64, inside.iter().filter(|e| e.completed).count() as u64, lat)
        };
        for now in nows {
            let s = exact.snapshot(key.clone(), now, 0.0, "s".into());
            let (n, c, lat) = brute(now);
            prop_assert_eq!(s.attempted, n);
            prop_assert_eq!(s.completed, c);
            prop_assert_eq!(s.completion_rate, (n > 0).then(|| c as f64 / n as f64));
            if n > 0 {
                prop_assert_eq!(s.latency_p95_ms, Some(oracle_rank(&lat, 0.95) as f64));
                prop_assert_eq!(s.latency_p99_ms, Some(oracle_rank(&lat, 0.99) as f64));
            } else {
                prop_assert_eq!(s.latency_p95_ms, None);
            }
        }
        for b in bucket_nows {
            let now = b * 5_000;
            let s = hist.snapshot(key.clone(), now, 0.0, "s".into());
            let (n, c, lat) = brute(now);
            prop_assert_eq!(s.attempted, n);
            prop_assert_eq!(s.completed, c);
            if n > 0 {
                for (q, got) in [(0.95, s.latency_p95_ms), (0.99, s.latency_p99_ms)] {
                    let exact = oracle_rank(&lat, q);
                    let (lo, hi) = histogram::bin_bounds(histogram::bin_index(exact));
                    prop_assert!(lo <= exact && exact <= hi);
                    prop_assert_eq!(got, Some(hi as f64), "q={} exact={}", q, exact);
                }
            }
        }
        Ok(())
    })?;
    Ok("500 random logs: exact mode equals rescan; histogram percentiles land on the exact value's bin edge".into())
}

#[derive(Debug, Clone)]
struct RouterCase {
    providers: Vec<(bool, bool, f64, Option<(f64, f64, u64)>)>,
    factors: Vec<(usize, u32, f64)>,
    min_samples: u64,
    delta: f64,
    sustained: u32,
    cooldown: u64,
    incumbent: Option<(usize, u64)>,
}

fn router_case() -> impl Strategy<Value = RouterCase> {
    let provider = (
        prop::bool::weighted(0.85),
        prop::bool::weighted(0.85),
        prop_oneof![Just(0.008), 0.005f64..0.015],
        prop::option::weighted(0.85, (prop_oneof![Just(0.9), 0.0f64..1.0], prop_oneof![Just(400.0), 100.0f64..1500.0], 0u64..30)),
    );
    let factors = prop::sample::subsequence(vec![0usize, 1, 2], 1..=3).prop_flat_map(|kinds| {
        let n = kinds.len();
        (Just(kinds), prop::collection::vec(1u32..10, n), prop::collection::vec(prop_oneof![Just(0.5), 0.0f64..1.0], n))
    });
    (
        prop::collection::vec(provider, 1..=4),
        factors,
        1u64..20,
        prop_oneof![Just(0.0), 0.0f64..0.2],
        1u32..3,
        prop_oneof![Just(0u64), 1u64..100_000],
        prop::option::of((0usize..4, 0u64..200_000)),
    )
        .prop_map(|(providers, (kinds, raw_w, defaults), min_samples, delta, sustained, cooldown, incumbent)| {
            let total: u32 = raw_w.iter().sum();
            let mut assigned = 0u32;
            let factors = kinds
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    // Percent weights that sum to exactly 100.
                    let w = if i + 1 == kinds.len() { 100 - assigned } else { raw_w[i] * 100 / total };
                    assigned += w;
                    (*k, w, defaults[i])
                })
                .collect();
            let incumbent = incumbent.map(|(i, t)| (i % providers.len(), t));
            RouterCase { providers, factors, min_samples, delta, sustained, cooldown, incumbent }
        })
}

const NAMES: [&str; 4] = ["delta", "alpha", "charlie", "bravo"];
const NOW: Millis = 200_000;

fn build_list(case: &RouterCase) -> FactorList {
    let kinds = [FactorKind::CompletionRate, FactorKind::LatencyP95, FactorKind::Cost];
    let mut control = factor_route::factor_config::ControlParams::with_default_provider(pid(NAMES[0]));
    control.min_sample_count = case.min_samples;
    control.hysteresis_delta = case.delta;
    control.sustained_windows_required = case.sustained;
    control.cooldown_ms = case.cooldown;
    control.stale_after_ms = 1_000_000;
    FactorList {
        operation: sms(),
        label: None,
        providers: case
            .providers
            .iter()
            .enumerate()
            .map(|(i, (enabled, in_region, cost, _))| ProviderSpec {
                enabled: *enabled,
                static_cost: *cost,
                supported_regions: vec![if *in_region { "US".into() } else { "DE".into() }],
                ..ProviderSpec::new(pid(NAMES[i]))
            })
            .collect(),
        gates: vec![GateSpec::new(GateKind::ProviderEnabled), GateSpec::new(GateKind::RegionSupported)],
        scores: case
            .factors
            .iter()
            .map(|(k, w, default)| ScoreFactorSpec {
                name: kinds[*k],
                weight: f64::from(*w) / 100.0,
                orientation: if *k == 0 { Orientation::HigherIsBetter } else { Orientation::LowerIsBetter },
                lower_bound: match k {
                    1 => Some(100.0),
                    2 => Some(0.005),
                    _ => None,
                },
                upper_bound: match k {
                    1 => Some(1100.0),
                    2 => Some(0.015),
                    _ => None,
                },
                default_value: *default,
            })
            .collect(),
        control,
        overrides: vec![],
        version: String::new(),
    }
    .seal()
}

/// Exhaustive evaluator: gate conjunction, bounded normalization, weighted
/// sum, argmax with lexicographic ties, then the hysteresis rule against the
/// seeded incumbent.
fn oracle_select(case: &RouterCase) -> Option<String> {
    let eligible: Vec<usize> = (0..case.providers.len()).filter(|i| case.providers[*i].0 && case.providers[*i].1).collect();
    if eligible.is_empty() {
        return None;
    }
    let total = |i: usize| -> f64 {
        let (_, _, static_cost, snap) = case.providers[i];
        let trusted = snap.filter(|s| s.2 > 0 && s.2 >= case.min_samples);
        case.factors
            .iter()
            .map(|(k, w, default)| {
                let n = match (k, trusted) {
                    (0, Some((c, _, _))) => c.clamp(0.0, 1.0),
                    (1, Some((_, p95, _))) => 1.0 - (p95.clamp(100.0, 1100.0) - 100.0) / 1000.0,
                    (2, _) => {
                        let cost = trusted.map_or(static_cost, |_| 0.01);
                        1.0 - (cost.clamp(0.005, 0.015) - 0.005) / 0.01
                    }
                    _ => *default,
                };
                f64::from(*w) / 100.0 * n
            })
            .sum()
    };
    let scores: Vec<(usize, f64)> = eligible.iter().map(|i| (*i, total(*i))).collect();
    let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let best = scores.iter().filter(|s| s.1 >= max - 1e-9).map(|s| s.0).min_by_key(|i| NAMES[*i]).expect("non-empty");
    let Some((inc, last_switch)) = case.incumbent else {
        return Some(NAMES[best].to_string());
    };
    let Some(inc_score) = scores.iter().find(|s| s.0 == inc).map(|s| s.1) else {
        return Some(NAMES[best].to_string());
    };
    if best == inc {
        return Some(NAMES[inc].to_string());
    }
    let beats = total(best) > inc_score + case.delta;
    let cooled = NOW - last_switch >= case.cooldown;
    if beats && cooled && case.sustained <= 1 {
        Some(NAMES[best].to_string())
    } else {
        Some(NAMES[inc].to_string())
    }
}

fn criterion_9() -> Outcome {
    run_property(1_000, router_case(), |case| {
        let fl = build_list(&case);
        let world = World::new(fl.clone());
        let providers = case
            .providers
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                p.3.map(|(c, p95, n)| {
                    let mut m = metric(NAMES[i], c, NOW, "w1", "US");
                    m.latency_p95_ms = Some(p95);
                    m.sample_count = n;
                    m.attempted = n;
                    (pid(NAMES[i]), m)
                })
            })
            .collect::<BTreeMap<_, _>>();
        world.cache.publish(SnapshotSet { operation: sms(), scope: "US".into(), freshness_ts: NOW, snapshot_id: "w1".into(), providers });
        if let Some((inc, last)) = case.incumbent {
            world.sticky.update(&sms(), "US", |_| ((), StickyEntry { last_switch_ts: Some(last), ..StickyEntry::new(pid(NAMES[inc])) }));
        }
        let ctx = RequestContext::new("req", sms(), "US", NOW);
        let out = route(&ctx, &world.deps(), &RouteOptions::default());
        let got = out.trace.selected.as_ref().map(|p| p.to_string());
        prop_assert_eq!(&got, &oracle_select(&case), "{:?}", case);
        if let Some(sel) = &got {
            let i = NAMES.iter().position(|n| n == sel).expect("known");
            prop_assert!(case.providers[i].0 && case.providers[i].1, "gated provider {} selected", sel);
        }
        let configured: Vec<ProviderId> = fl.provider_ids().cloned().collect();
        prop_assert!(validate_trace(&out.trace, &configured).is_ok());
        Ok(())
    })?;
    Ok("1000 random configurations match the exhaustive evaluator; no gated provider selected".into())
}

fn criterion_10() -> Outcome {
    let mut checked = 0;
    for file in [
        "outage.yaml",
        "recovery.yaml",
        "partial_regional.yaml",
        "rate_limit.yaml",
        "latency_only.yaml",
        "stale_telemetry.yaml",
        "config_down.yaml",
        "recovery_probe_failure.yaml",
        "recovery_dual_outage.yaml",
    ] {
        let s = scenario(file);
        let a = run_scenario(&s, RunOptions::default()).map_err(|e| e.to_string())?;
        let b = run_scenario(&s, RunOptions::default()).map_err(|e| e.to_string())?;
        let bytes = |run: &factor_route::simulator::SimRun| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &run.traces).expect("in-memory");
            (buf, serde_json::to_vec(&run.report).expect("serializable"))
        };
        ensure(bytes(&a) == bytes(&b), format!("{file}: runs differ"))?;
        if s.config_impairment.is_none() && s.operator_actions.is_empty() && s.telemetry_impairment.is_none() {
            let (report, _) = replay_events(&a.events, &s.factor_list).map_err(|e| e.to_string())?;
            ensure(report.decision_diffs == 0, format!("{file}: {} replay diffs, first {:?}", report.decision_diffs, report.diffs.first()))?;
            checked += 1;
        }
    }
    let out1 = Command::new(env!("CARGO_BIN_EXE_factor-route")).args(["simulate", "--format", "json"]).arg(asset("outage.yaml")).output().map_err(|e| e.to_string())?;
    let out2 = Command::new(env!("CARGO_BIN_EXE_factor-route")).args(["simulate", "--format", "json"]).arg(asset("outage.yaml")).output().map_err(|e| e.to_string())?;
    ensure(out1.stdout == out2.stdout && !out1.stdout.is_empty(), "CLI reports differ")?;
    Ok(format!("9 scenarios byte-identical across runs; {checked} replayed against their own config with 0 diffs"))
}

fn criterion_11() -> Outcome {
    let mut total = 0;
    for file in ["config_down.yaml", "recovery_dual_outage.yaml"] {
        let s = scenario(file);
        let run = std::panic::catch_unwind(|| run_scenario(&s, RunOptions::default()))
            .map_err(|_| format!("{file}: panicked"))?
            .map_err(|e| e.to_string())?;
        ensure(run.terminals.len() as u64 == run.report.requests, format!("{file}: unresolved requests"))?;
        let configured: Vec<ProviderId> = s.factor_list.provider_ids().cloned().collect();
        let mut first: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &run.traces {
            validate_trace(t, &configured).map_err(|e| format!("{file}: {}: {e:?}", t.trace_id))?;
            ensure(t.selected.is_some() != t.fallback.is_some(), format!("{file}: {} neither selected nor fell back", t.trace_id))?;
            if t.attempt == 0 {
                *first.entry(&t.request_id).or_default() += 1;
            }
        }
        ensure(first.len() as u64 == run.report.requests && first.values().all(|n| *n == 1), format!("{file}: missing or duplicate first decisions"))?;
        let fallbacks = run.terminals.iter().filter(|t| **t == Terminal::Fallback).count();
        ensure(fallbacks > 0, format!("{file}: expected typed fallbacks"))?;
        total += run.traces.len();
    }
    Ok(format!("{total} traces complete and valid; every request selected or fell back"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("reference table closed form", criterion_1),
        ("reference table simulated", criterion_2),
        ("availability formulas", criterion_3),
        ("failover latency bound", criterion_4),
        ("preference state machine", criterion_5),
        ("anti-flapping properties", criterion_6),
        ("circuit breaker legality", criterion_7),
        ("aggregator oracle equivalence", criterion_8),
        ("router brute-force equivalence", criterion_9),
        ("replay fixed point and determinism", criterion_10),
        ("fallback totality", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
