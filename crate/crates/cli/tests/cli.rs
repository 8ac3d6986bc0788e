//! End-to-end tests driving the compiled binary the way an operator
//! would: bootstrap a directory, load documents, check access, audit,
//! and verify the chain, asserting on exit codes and JSON output.

use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_abacus");

fn abacus(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn parse_stdout(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(&text).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {text}\nstderr: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    parse_stdout(out)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.display().to_string()
}

fn policy_doc() -> Value {
    json!({
        "policyID": "POL001",
        "attributes": {
            "user": {"status": "", "expiration": "", "libraryGroup": ""},
            "resource": {"libraryGroup": ""}
        },
        "rules": {
            "user.status": {"comparison_type": "boolean", "comparison": "boolAnd", "value": true},
            "user.expiration": {
                "comparison_type": "datetime",
                "comparison": "isMoreRecentThan",
                "value": "0DAY"
            },
            "user.libraryGroup": {
                "comparison_type": "string",
                "comparison": "isStrictlyEqual",
                "field": "resource.libraryGroup"
            }
        }
    })
}

fn subject_doc() -> Value {
    json!({
        "subjectID": "alice",
        "attributes": {
            "status": true,
            "expiration": "2021-01-01T00:00:00Z",
            "libraryGroup": "staff"
        }
    })
}

fn resource_doc() -> Value {
    json!({
        "resourceID": "fileA",
        "attributes": {"policyID": "POL001", "libraryGroup": "staff"}
    })
}

/// Bootstrap a node directory and load the standard fixture into it.
fn seeded_node(dir: &Path) {
    ok(&abacus(dir, &["bootstrap", "--orgs", "3", "--threshold", "2"]));
    let policy = write_json(dir, "policy.json", &policy_doc());
    let subject = write_json(dir, "subject.json", &subject_doc());
    let resource = write_json(dir, "resource.json", &resource_doc());
    ok(&abacus(dir, &["propose", "--file", &policy, "--sign-with", "org1,org2"]));
    ok(&abacus(dir, &["record", "--kind", "subject", "--file", &subject]));
    ok(&abacus(dir, &["record", "--kind", "resource", "--file", &resource]));
}

#[test]
fn lifecycle_permit_deny_and_audit() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    seeded_node(dir);

    let permit = ok(&abacus(
        dir,
        &["check", "--subject", "alice", "--resource", "fileA", "--clock", "2020-05-10T00:00:00Z"],
    ));
    assert_eq!(permit["outcome"], "Permit");
    assert_eq!(permit["failed_rules"].as_array().unwrap().len(), 0);

    // A denial is a served decision, not a failure: exit code stays zero.
    let deny_out = abacus(
        dir,
        &["check", "--subject", "alice", "--resource", "fileA", "--clock", "2022-01-01T00:00:00Z"],
    );
    assert_eq!(deny_out.status.code(), Some(0));
    let deny = parse_stdout(&deny_out);
    assert_eq!(deny["outcome"], "Deny");
    assert_eq!(deny["failed_rules"], json!(["user.expiration"]));

    let audit = ok(&abacus(dir, &["audit", "--resource", "fileA"]));
    let decisions = audit["decisions"].as_array().unwrap();
    assert_eq!(decisions.len(), 2);
    let outcomes: Vec<&str> =
        decisions.iter().map(|d| d["record"]["outcome"].as_str().unwrap()).collect();
    assert_eq!(outcomes, ["Permit", "Deny"]);

    let status = ok(&abacus(dir, &["status"]));
    assert_eq!(status["chain_height"], status["state_height"]);
    assert_eq!(status["committed_transactions"], 5);
}

#[test]
fn decisions_survive_reopen() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    seeded_node(dir);
    ok(&abacus(
        dir,
        &["check", "--subject", "alice", "--resource", "fileA", "--clock", "2020-05-10T00:00:00Z"],
    ));
    // Every command reopens the directory, so the audit below only works
    // if the decision went through the chain, not process memory.
    let audit = ok(&abacus(dir, &["audit", "--resource", "fileA"]));
    assert_eq!(audit["decisions"].as_array().unwrap().len(), 1);
}

#[test]
fn schema_violation_fails_with_stable_code() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&abacus(dir, &["bootstrap"]));
    let bad = write_json(dir, "bad.json", &json!({"subjectID": "bob"}));
    let out = abacus(dir, &["record", "--kind", "subject", "--file", &bad]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(&String::from_utf8_lossy(&out.stderr)).unwrap();
    assert_eq!(err["code"], "SCHEMA_VIOLATION");
}

#[test]
fn under_approved_policy_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&abacus(dir, &["bootstrap", "--threshold", "2"]));
    let policy = write_json(dir, "policy.json", &policy_doc());
    let out = abacus(dir, &["propose", "--file", &policy, "--sign-with", "org1"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(&String::from_utf8_lossy(&out.stderr)).unwrap();
    assert_eq!(err["code"], "INSUFFICIENT_APPROVALS");
    // Nothing reached the chain.
    let status = ok(&abacus(dir, &["status"]));
    assert_eq!(status["committed_transactions"], 0);
}

#[test]
fn sign_policy_produces_usable_approvals() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(&abacus(dir, &["bootstrap", "--threshold", "2"]));
    let policy = write_json(dir, "policy.json", &policy_doc());
    let mut approvals = Vec::new();
    for org in ["org1", "org3"] {
        let signed = ok(&abacus(dir, &["sign-policy", "--file", &policy, "--org", org]));
        approvals.push(format!("{}={}", org, signed["signature"].as_str().unwrap()));
    }
    let result = ok(&abacus(
        dir,
        &[
            "propose",
            "--file",
            &policy,
            "--approval",
            &approvals[0],
            "--approval",
            &approvals[1],
        ],
    ));
    assert_eq!(result["action"], "submit");
    let verified = ok(&abacus(dir, &["verify", "--governance"]));
    assert_eq!(verified["status"], "intact");
    assert_eq!(verified["governance"]["policy_transactions"], 1);
}

#[test]
fn verify_reports_corruption_and_exits_nonzero() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    seeded_node(dir);
    let intact = ok(&abacus(dir, &["verify"]));
    assert_eq!(intact["status"], "intact");

    // Flip one byte in the middle of the only segment file.
    let seg = dir.join("blocks").join("blocks-00000.seg");
    let mut bytes = std::fs::read(&seg).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&seg, &bytes).unwrap();

    let out = abacus(dir, &["verify"]);
    assert_eq!(out.status.code(), Some(1));
    let report = parse_stdout(&out);
    assert_eq!(report["status"], "corrupt");
    assert!(report["height"].as_u64().unwrap() >= 1);
}

#[test]
fn query_history_and_export_reflect_writes() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    seeded_node(dir);
    let mut updated = subject_doc();
    updated["attributes"]["libraryGroup"] = json!("alumni");
    let path = write_json(dir, "subject2.json", &updated);
    ok(&abacus(dir, &["record", "--kind", "subject", "--file", &path]));

    let queried = ok(&abacus(dir, &["query", "--key", "subject:alice"]));
    assert_eq!(queried["value"]["attributes"]["libraryGroup"], "alumni");

    let history = ok(&abacus(dir, &["history", "--key", "subject:alice"]));
    let entries = history["history"].as_array().unwrap();
    assert_eq!(entries.len(), 2, "one entry per recorded version");

    let export = ok(&abacus(dir, &["export"]));
    let keys: Vec<&str> =
        export["entries"].as_array().unwrap().iter().map(|e| e["key"].as_str().unwrap()).collect();
    assert!(keys.contains(&"subject:alice"));
    assert!(keys.contains(&"policy:POL001"));
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_answers_over_the_socket() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    seeded_node(dir);
    let socket = dir.join("node.sock");
    let child = Command::new(BIN)
        .arg("--data-dir")
        .arg(dir)
        .arg("serve")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .expect("serve starts");
    let _guard = ChildGuard(child);

    let deadline = Instant::now() + Duration::from_secs(10);
    while !socket.exists() {
        assert!(Instant::now() < deadline, "socket never appeared");
        std::thread::sleep(Duration::from_millis(50));
    }

    let out = Command::new(BIN)
        .arg("--socket")
        .arg(&socket)
        .args(["check", "--subject", "alice", "--resource", "fileA", "--clock", "2020-05-10T00:00:00Z"])
        .output()
        .unwrap();
    let decision = ok(&out);
    assert_eq!(decision["outcome"], "Permit");

    let status = Command::new(BIN).arg("--socket").arg(&socket).arg("status").output().unwrap();
    assert_eq!(ok(&status)["committed_transactions"], 4);
}

#[test]
fn bench_run_conserves_transactions() {
    let out = Command::new(BIN)
        .args([
            "bench", "run", "--transactions", "120", "--rate", "300", "--clients", "4",
            "--batch-timeout-ms", "25", "--subjects", "40", "--objects", "40", "--policies", "6",
        ])
        .output()
        .unwrap();
    let report = ok(&out);
    let total = report["total"].as_u64().unwrap();
    let accounted = report["valid"].as_u64().unwrap()
        + report["invalid"].as_u64().unwrap()
        + report["errors"].as_u64().unwrap();
    assert_eq!(total, 120);
    assert_eq!(accounted, total);
    assert!(report["achieved_tps"].as_f64().unwrap() > 0.0);
}

#[test]
fn sim_runs_a_fault_scenario_to_completion() {
    let tmp = TempDir::new().unwrap();
    let scenario = write_json(
        tmp.path(),
        "scenario.json",
        &json!({
            "seed": 7,
            "cluster": 5,
            "duration_ms": 5000,
            "submissions": {"start_ms": 300, "count": 5, "interval_ms": 100},
            "crashes": [{"at_ms": 1200, "restart_at_ms": 2600}]
        }),
    );
    let trace = tmp.path().join("trace.jsonl");
    let out = Command::new(BIN)
        .args(["sim", "--scenario", scenario.as_str()])
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    let report = ok(&out);
    assert_eq!(report["all_submissions_committed"], true);
    assert!(report["leaders_elected"].as_u64().unwrap() >= 1);
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    assert!(trace_text.lines().count() > 5);
    serde_json::from_str::<Value>(trace_text.lines().next().unwrap()).unwrap();
}

#[test]
fn missing_connection_and_bad_usage_distinguish_exit_codes() {
    // No --socket and no --data-dir: a reported error, exit 1.
    let out = Command::new(BIN).env_remove("ABACUS_DATA_DIR").arg("status").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // Unknown subcommand: usage error from the parser, exit 2.
    let out = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
