//! Load measurement for the access-control pipeline: deterministic
//! fixtures, open-loop paced workers, commit-confirmed latency, and rate
//! sweeps.
//!
//! Workers pace submissions on a fixed schedule (transaction `i` fires at
//! `start + i / rate`) and never wait for a commit before firing the next
//! one, so the measured system, not the harness, sets the throughput
//! ceiling. A transaction's latency runs from the moment its worker
//! submitted it to the moment the committer confirmed its block. Every
//! scheduled transaction is accounted for: committed Valid, committed
//! Invalid, or an error.

use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::crypto::OrgKeypair;
use crate::policy::EntityKind;
use crate::service::{
    self, policy_approval_digest, CheckRequest, NodeConfig, Service, ServiceError,
};

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// A seeded population of policies, subjects, and resources in the
/// lending-library domain the service is usually exercised with.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub policies: Vec<Value>,
    pub subjects: Vec<Value>,
    pub objects: Vec<Value>,
}

impl Fixture {
    pub fn subject_id(&self, index: usize) -> &str {
        self.subjects[index]["subjectID"].as_str().expect("fixture subject has an id")
    }

    pub fn object_id(&self, index: usize) -> &str {
        self.objects[index]["resourceID"].as_str().expect("fixture object has an id")
    }
}

/// Generate a fixture deterministically from `seed`: same seed, same
/// population, byte for byte. Subjects are mostly in good standing with
/// expirations spread around the bench clock so decisions come out as a
/// mix of permits and denials; each resource is bound to one policy
/// round-robin.
pub fn generate_fixture(
    n_policies: usize,
    n_subjects: usize,
    n_objects: usize,
    seed: u64,
) -> Fixture {
    assert!(n_policies > 0 && n_subjects > 0 && n_objects > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let policies: Vec<Value> = (1..=n_policies)
        .map(|i| {
            // Half the policies pin the required group to a literal, half
            // compare against the resource's own group attribute.
            let group_rule = if i % 2 == 0 {
                json!({
                    "comparison_type": "numeric",
                    "comparison": "isStrictlyEqual",
                    "value": rng.gen_range(0..16),
                })
            } else {
                json!({
                    "comparison_type": "numeric",
                    "comparison": "isStrictlyEqual",
                    "field": "resource.libraryGroup",
                })
            };
            json!({
                "policyID": format!("POL{i:03}"),
                "attributes": {
                    "user": {"status": "", "expiration": "", "libraryGroup": ""},
                    "resource": {"policyID": "", "libraryGroup": ""},
                },
                "rules": {
                    "user.status": {
                        "comparison_type": "boolean",
                        "comparison": "boolAnd",
                        "value": true,
                    },
                    "user.expiration": {
                        "comparison_type": "datetime",
                        "comparison": "isMoreRecentThan",
                        "value": "0DAY",
                    },
                    "user.libraryGroup": group_rule,
                },
            })
        })
        .collect();

    let subjects: Vec<Value> = (1..=n_subjects)
        .map(|i| {
            let status = rng.gen_bool(0.9);
            // Day offsets from 2019-01-01 across three years.
            let day = rng.gen_range(0u32..1095);
            let expiration = DateTime::<Utc>::from_timestamp(1_546_300_800 + day as i64 * 86_400, 0)
                .unwrap()
                .format("%Y-%m-%dT%H:%M:%SZ")
                .to_string();
            json!({
                "subjectID": format!("SUB{i:05}"),
                "attributes": {
                    "status": status,
                    "expiration": expiration,
                    "libraryGroup": rng.gen_range(0..16),
                },
            })
        })
        .collect();

    let objects: Vec<Value> = (1..=n_objects)
        .map(|i| {
            json!({
                "resourceID": format!("OBJ{i:05}"),
                "attributes": {
                    "policyID": format!("POL{:03}", (i - 1) % n_policies + 1),
                    "libraryGroup": rng.gen_range(0..16),
                },
            })
        })
        .collect();

    Fixture { policies, subjects, objects }
}

/// Commit a fixture through the full pipeline before measurement starts.
/// Policies are approved by the first `threshold` configured
/// organizations.
pub fn load_fixture(
    service: &Service,
    fixture: &Fixture,
    keys: &[OrgKeypair],
) -> Result<(), ServiceError> {
    let threshold = service.config().endorsement.threshold;
    assert!(keys.len() >= threshold, "need at least {threshold} signing organizations");
    for document in &fixture.policies {
        let digest = policy_approval_digest(document);
        let approvals: Vec<(String, Vec<u8>)> =
            keys[..threshold].iter().map(|k| (k.org_id.clone(), k.sign(&digest))).collect();
        service.propose_policy("fixture", document, &approvals)?;
    }
    for document in &fixture.subjects {
        service.record_attributes("fixture", EntityKind::Subject, document)?;
    }
    for document in &fixture.objects {
        service.record_attributes("fixture", EntityKind::Object, document)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Workloads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadKind {
    /// Access decisions against random fixture subject/object pairs; the
    /// read-heavy transaction the service exists for.
    CheckAccess,
    /// Attribute upserts of fixture subjects; write-only.
    RecordAttributes,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::CheckAccess => "check_access",
            WorkloadKind::RecordAttributes => "record_attributes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "check_access" => Some(WorkloadKind::CheckAccess),
            "record_attributes" => Some(WorkloadKind::RecordAttributes),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub kind: WorkloadKind,
    pub total: usize,
    pub rate_tps: f64,
    pub clients: usize,
    pub seed: u64,
    /// Decision clock stamped into every check, so outcomes do not depend
    /// on when the benchmark runs.
    pub clock: DateTime<Utc>,
    /// How long the harvest phase waits on each unconfirmed transaction.
    pub confirm_timeout: Duration,
}

impl Workload {
    pub fn new(kind: WorkloadKind, total: usize, rate_tps: f64, clients: usize, seed: u64) -> Self {
        Self {
            kind,
            total,
            rate_tps,
            clients,
            seed,
            clock: crate::policy::parse_datetime("2020-06-01T00:00:00Z").unwrap(),
            confirm_timeout: Duration::from_secs(30),
        }
    }
}

/// The measured result of one workload run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub total: u64,
    pub valid: u64,
    pub invalid: u64,
    pub errors: u64,
    pub requested_rate_tps: f64,
    pub achieved_tps: f64,
    pub wall_seconds: f64,
    pub latency_avg_ms: f64,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub latency_p95_ms: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Value {
        json!({
            "total": self.total,
            "valid": self.valid,
            "invalid": self.invalid,
            "errors": self.errors,
            "requested_rate_tps": self.requested_rate_tps,
            "achieved_tps": self.achieved_tps,
            "wall_seconds": self.wall_seconds,
            "latency_ms": {
                "avg": self.latency_avg_ms,
                "min": self.latency_min_ms,
                "max": self.latency_max_ms,
                "p95": self.latency_p95_ms,
            },
        })
    }
}

struct WorkerStats {
    latencies_ms: Vec<f64>,
    valid: u64,
    invalid: u64,
    errors: u64,
    last_confirm: Option<Instant>,
}

/// Per-transaction randomness that depends only on the workload seed and
/// the transaction's global index, so the request stream is identical no
/// matter how work is spread over clients.
fn tx_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Run one workload against a loaded service and measure it.
pub fn run_workload(
    service: &Service,
    fixture: &Fixture,
    workload: &Workload,
) -> Result<RunReport, ServiceError> {
    assert!(workload.total > 0 && workload.clients > 0);
    assert!(workload.rate_tps > 0.0, "send rate must be positive");
    let start = Instant::now() + Duration::from_millis(20);

    let stats: Vec<WorkerStats> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(workload.clients);
        for client in 0..workload.clients {
            handles.push(scope.spawn(move || {
                run_worker(service, fixture, workload, client, start)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });

    let mut latencies: Vec<f64> = Vec::with_capacity(workload.total);
    let mut valid = 0;
    let mut invalid = 0;
    let mut errors = 0;
    let mut last_confirm: Option<Instant> = None;
    for s in stats {
        latencies.extend(s.latencies_ms);
        valid += s.valid;
        invalid += s.invalid;
        errors += s.errors;
        last_confirm = match (last_confirm, s.last_confirm) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let wall = last_confirm.unwrap_or_else(Instant::now).saturating_duration_since(start);
    let wall_seconds = wall.as_secs_f64().max(f64::EPSILON);
    let committed = valid + invalid;
    let (avg, min, max, p95) = if latencies.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let avg = latencies.iter().sum::<f64>() / latencies.len() as f64;
        let p95 = latencies[((latencies.len() as f64 * 0.95).ceil() as usize).max(1) - 1];
        (avg, latencies[0], *latencies.last().unwrap(), p95)
    };
    Ok(RunReport {
        total: workload.total as u64,
        valid,
        invalid,
        errors,
        requested_rate_tps: workload.rate_tps,
        achieved_tps: committed as f64 / wall_seconds,
        wall_seconds,
        latency_avg_ms: avg,
        latency_min_ms: min,
        latency_max_ms: max,
        latency_p95_ms: p95,
    })
}

fn run_worker(
    service: &Service,
    fixture: &Fixture,
    workload: &Workload,
    client: usize,
    start: Instant,
) -> WorkerStats {
    let client_id = format!("bench-w{client}");
    let mut pending = Vec::new();
    let mut errors = 0u64;
    let mut index = client;
    while index < workload.total {
        let due = start + Duration::from_secs_f64(index as f64 / workload.rate_tps);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let submitted = Instant::now();
        let begun = match workload.kind {
            WorkloadKind::CheckAccess => {
                let mut rng = tx_rng(workload.seed, index);
                let subject_id = fixture.subject_id(rng.gen_range(0..fixture.subjects.len()));
                let object_id = fixture.object_id(rng.gen_range(0..fixture.objects.len()));
                let request_id = format!("bench-{index}");
                let req = CheckRequest {
                    request_id: &request_id,
                    subject_id,
                    object_id,
                    clock: workload.clock,
                };
                service.begin(&client_id, |snapshot| service::simulate_check_access(snapshot, &req))
            }
            WorkloadKind::RecordAttributes => {
                let mut rng = tx_rng(workload.seed, index);
                let subject = rng.gen_range(0..fixture.subjects.len());
                let mut document = fixture.subjects[subject].clone();
                // Vary the record so repeated upserts of one subject stay
                // distinct transactions.
                document["attributes"]["visits"] = json!(index);
                service.begin(&client_id, |snapshot| {
                    service::simulate_record_attributes(snapshot, EntityKind::Subject, &document)
                })
            }
        };
        match begun {
            Ok((_, confirmation)) => pending.push((submitted, confirmation)),
            Err(_) => errors += 1,
        }
        index += workload.clients;
    }

    let mut stats = WorkerStats {
        latencies_ms: Vec::with_capacity(pending.len()),
        valid: 0,
        invalid: 0,
        errors,
        last_confirm: None,
    };
    for (submitted, confirmation) in pending {
        match confirmation.recv_timeout(workload.confirm_timeout) {
            Ok(outcome) => {
                let latency = outcome.at.saturating_duration_since(submitted);
                stats.latencies_ms.push(latency.as_secs_f64() * 1000.0);
                if outcome.valid {
                    stats.valid += 1;
                } else {
                    stats.invalid += 1;
                }
                stats.last_confirm = Some(match stats.last_confirm {
                    Some(prev) => prev.max(outcome.at),
                    None => outcome.at,
                });
            }
            Err(_) => stats.errors += 1,
        }
    }
    stats
}

// ---------------------------------------------------------------------------
// Rate sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub rate_tps: f64,
    pub report: RunReport,
}

/// Run the same workload shape across a ladder of send rates, each
/// against a freshly started in-memory node so no point inherits another
/// point's backlog.
pub fn run_sweep(
    config: &NodeConfig,
    keys: &[OrgKeypair],
    fixture: &Fixture,
    template: &Workload,
    rates: &[f64],
) -> Result<Vec<SweepPoint>, ServiceError> {
    let mut points = Vec::with_capacity(rates.len());
    for &rate_tps in rates {
        let service = Service::open_in_memory(config.clone())?;
        load_fixture(&service, fixture, keys)?;
        let workload = Workload { rate_tps, ..template.clone() };
        let report = run_workload(&service, fixture, &workload)?;
        service.shutdown();
        points.push(SweepPoint { rate_tps, report });
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("rate_tps,achieved_tps,avg_latency_ms,p95_latency_ms\n");
    for p in points {
        out.push_str(&format!(
            "{},{:.3},{:.3},{:.3}\n",
            p.rate_tps, p.report.achieved_tps, p.report.latency_avg_ms, p.report.latency_p95_ms
        ));
    }
    out
}

/// The first sweep point whose achieved throughput falls below
/// `tracking` of its requested rate: where the pipeline saturates.
pub fn knee_index(points: &[SweepPoint], tracking: f64) -> Option<usize> {
    points.iter().position(|p| p.report.achieved_tps < tracking * p.rate_tps)
}
