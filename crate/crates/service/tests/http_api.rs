mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{config, fixture, TestServer};
use serde_json::{json, Value};
use trialmatch_core::assessment::{AssessmentBackend, BackendError, OracleBackend, Scripted, ScriptedBackend};
use trialmatch_core::corpus::canonical_criteria;
use trialmatch_service::BackendSpec;

fn error_code(r: reqwest::blocking::Response) -> (u16, Value) {
    let status = r.status().as_u16();
    let body: Value = r.json().unwrap();
    (status, body["error"].clone())
}

#[test]
fn run_lifecycle_decisions_and_pagination() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, truth) = fixture(24);
    let server = TestServer::start(config(dir.path(), Some(corpus.clone())));

    let r = server.post("/runs", json!({"strategy": "ICAN", "k": 3, "backend": "oracle"}));
    assert_eq!(r.status(), 202);
    assert!(r.headers()["location"].to_str().unwrap().starts_with("/runs/"));
    let created: Value = r.json().unwrap();
    assert!(created["status"] == "PENDING" || created["status"] == "RUNNING" || created["status"] == "DONE");
    let run_id = created["run_id"].as_str().unwrap().to_string();

    let run = server.wait(&run_id);
    assert_eq!(run["status"], "DONE", "{run}");
    assert_eq!(run["config"]["strategy"], "ICAN");
    assert_eq!(run["config"]["k"], 3);
    assert_eq!(run["config"]["backend_id"], "oracle");
    assert_eq!(run["ledger"]["api_calls"], 24 * 13);
    assert_eq!(run["results"].as_array().unwrap().len(), 24);

    // decision=MET is exactly the planted MET pairs.
    let r = server.get(&format!("/runs/{run_id}/decisions?decision=MET&limit=1000"));
    let total: usize = r.headers()["x-total-count"].to_str().unwrap().parse().unwrap();
    let met: BTreeSet<(String, String)> = r
        .json::<Vec<Value>>()
        .unwrap()
        .iter()
        .map(|d| (d["patient_id"].as_str().unwrap().into(), d["criterion_id"].as_str().unwrap().into()))
        .collect();
    let planted: BTreeSet<(String, String)> = truth
        .iter()
        .filter(|(_, _, d)| d.is_met())
        .map(|(p, c, _)| (p.to_string(), c.to_string()))
        .collect();
    assert_eq!(met, planted);
    assert_eq!(total, planted.len());

    // Unfiltered pages are stable slices of the (patient, criterion) order.
    let r = server.get(&format!("/runs/{run_id}/decisions?limit=10"));
    assert_eq!(r.headers()["x-total-count"], (24 * 13).to_string().as_str());
    let first: Vec<Value> = r.json().unwrap();
    assert_eq!(first.len(), 10);
    let all: Vec<Value> = server.get_json(&format!("/runs/{run_id}/decisions?limit=1000")).as_array().unwrap().clone();
    let keys: Vec<(String, String)> = all
        .iter()
        .map(|d| (d["patient_id"].as_str().unwrap().into(), d["criterion_id"].as_str().unwrap().into()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(&all[..10], &first[..]);
    let second: Vec<Value> = server.get_json(&format!("/runs/{run_id}/decisions?limit=10&offset=10")).as_array().unwrap().clone();
    assert_eq!(&all[10..20], &second[..]);
    assert!(all.iter().all(|d| d["rationale"].is_string() && d["provenance"].as_array().is_some_and(|p| !p.is_empty())));

    let one: Vec<Value> = server
        .get_json(&format!("/runs/{run_id}/decisions?patient_id=P0003&criterion_id=HBA1C"))
        .as_array()
        .unwrap()
        .clone();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0]["decision"], truth.get("P0003", "HBA1C").unwrap().as_str());

    let listed = server.get_json("/runs");
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert!(listed[0].get("results").is_none());

    assert_eq!(error_code(server.get("/runs/nope")).0, 404);
    assert_eq!(error_code(server.get("/runs/nope/decisions")).1["code"], "UNKNOWN_RUN");
    assert_eq!(error_code(server.get(&format!("/runs/{run_id}/decisions?decision=maybe"))).0, 400);
    assert_eq!(error_code(server.get(&format!("/runs/{run_id}/decisions?limit=0"))).0, 400);

    let patients = server.get_json("/patients");
    assert_eq!(patients.as_array().unwrap().len(), 24);
    let p = server.get_json("/patients/P0001");
    assert_eq!(p["notes"].as_array().unwrap().len(), corpus.patient("P0001").unwrap().notes.len());
    assert_eq!(error_code(server.get("/patients/ZZZ")).1["code"], "UNKNOWN_PATIENT");
}

#[test]
fn validation_and_idempotency() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(config(dir.path(), Some(fixture(4).0)));

    let (status, err) = error_code(server.post("/runs", json!({"strategy": "xyz"})));
    assert_eq!((status, err["code"].as_str(), err["field"].as_str()), (400, Some("INVALID_CONFIG"), Some("strategy")));
    let (status, err) = error_code(server.post("/runs", json!({"strategy": "ACAN", "backend": "carrier-pigeon"})));
    assert_eq!((status, err["field"].as_str()), (400, Some("backend")));
    let (status, err) = error_code(server.post("/runs", json!({"strategy": "ACAN", "backend": "remote:http://localhost:1"})));
    assert_eq!((status, err["field"].as_str()), (400, Some("backend")), "remote needs a model");

    let body = json!({"strategy": "ACAN", "idempotency_key": "abc"});
    let a = server.create_run(body.clone());
    let b = server.create_run(body);
    assert_eq!(a, b);
    let c = server
        .client
        .post(format!("{}/runs", server.base))
        .header("Idempotency-Key", "abc")
        .json(&json!({"strategy": "ACAN"}))
        .send()
        .unwrap();
    assert_eq!(c.json::<Value>().unwrap()["run_id"], a.as_str());
    let (status, err) = error_code(server.post("/runs", json!({"strategy": "ICIN", "idempotency_key": "abc"})));
    assert_eq!((status, err["code"].as_str()), (409, Some("IDEMPOTENCY_CONFLICT")));
    assert_eq!(server.get_json("/runs").as_array().unwrap().len(), 1);
    server.wait(&a);
}

#[test]
fn no_corpus_means_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let server = TestServer::start(config(dir.path(), None));
    let (status, err) = error_code(server.post("/runs", json!({"strategy": "ACAN"})));
    assert_eq!((status, err["code"].as_str()), (409, Some("CORPUS_NOT_LOADED")));
    assert_eq!(error_code(server.get("/patients")).0, 409);
    assert_eq!(server.get_json("/runs"), json!([]));
}

#[test]
fn reviews_append_and_tally() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, truth) = fixture(6);
    let server = TestServer::start(config(dir.path(), Some(corpus)));
    let run_id = server.create_run(json!({"strategy": "ACAN"}));
    let before = server.wait(&run_id);
    let review = |verdict: &str, reviewer: &str, criterion: &str| {
        json!({"run_id": run_id, "patient_id": "P0002", "criterion_id": criterion, "verdict": verdict, "reviewer_id": reviewer})
    };

    let r = server.post("/reviews", review("CORRECT", "alice", "HBA1C"));
    assert_eq!(r.status(), 201);
    let stored: Value = r.json().unwrap();
    assert_eq!(stored["verdict"], "CORRECT");
    let summary = server.get_json(&format!("/runs/{run_id}/review-summary"));
    assert_eq!(summary["counts"], json!({"CORRECT": 1, "PARTIALLY_CORRECT": 0, "INCORRECT": 0}));

    let (status, err) = error_code(server.post("/reviews", review("MAYBE", "alice", "HBA1C")));
    assert_eq!((status, err["code"].as_str()), (400, Some("INVALID_VERDICT")));
    let (status, err) = error_code(server.post("/reviews", review("CORRECT", "alice", "NOPE")));
    assert_eq!((status, err["code"].as_str()), (404, Some("UNKNOWN_DECISION")));
    let mut missing = review("CORRECT", "alice", "HBA1C");
    missing.as_object_mut().unwrap().remove("reviewer_id");
    assert_eq!(error_code(server.post("/reviews", missing)).1["field"], "reviewer_id");

    // Second reviewer on the same decision, then a revision by the first.
    assert_eq!(server.post("/reviews", review("Partially Correct", "bob", "HBA1C")).status(), 201);
    assert_eq!(server.post("/reviews", review("incorrect", "alice", "HBA1C")).status(), 201);
    assert_eq!(server.post("/reviews", review("CORRECT", "alice", "ENGLISH")).status(), 201);

    let history = server.get_json(&format!("/reviews?run_id={run_id}"));
    assert_eq!(history.as_array().unwrap().len(), 4);
    let latest = server.get_json(&format!("/reviews?run_id={run_id}&latest=true"));
    assert_eq!(latest.as_array().unwrap().len(), 3);
    assert_eq!(server.get_json("/reviews?reviewer_id=bob").as_array().unwrap().len(), 1);

    let summary = server.get_json(&format!("/runs/{run_id}/review-summary"));
    assert_eq!(summary["history_rows"], 4);
    assert_eq!(summary["reviewed_decisions"], 2);
    assert_eq!(summary["counts"], json!({"CORRECT": 1, "PARTIALLY_CORRECT": 1, "INCORRECT": 1}));
    assert_eq!(summary["per_criterion"]["HBA1C"], json!({"CORRECT": 0, "PARTIALLY_CORRECT": 1, "INCORRECT": 1}));
    assert_eq!(summary["per_reviewer"]["alice"]["counts"], json!({"CORRECT": 1, "PARTIALLY_CORRECT": 0, "INCORRECT": 1}));
    assert_eq!(summary["per_reviewer"]["bob"]["counts"], json!({"CORRECT": 0, "PARTIALLY_CORRECT": 1, "INCORRECT": 0}));

    // Reviews never touch the run's results.
    assert_eq!(server.get_json(&format!("/runs/{run_id}")), before);

    let sample = server.get_json(&format!("/runs/{run_id}/review-sample?per_cell=2"));
    let cells = sample["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 13);
    for cell in cells {
        let c = cell["criterion_id"].as_str().unwrap();
        assert!(cell["correct"].as_array().unwrap().len() <= 2);
        for row in cell["correct"].as_array().unwrap() {
            assert_eq!(row["decision"], truth.get(row["patient_id"].as_str().unwrap(), c).unwrap().as_str());
        }
        // The oracle is perfect on full notes.
        assert!(cell["incorrect"].as_array().unwrap().is_empty());
    }
    assert_eq!(sample, server.get_json(&format!("/runs/{run_id}/review-sample?per_cell=2")));
}

#[test]
fn backend_failure_marks_run_failed_and_keeps_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), Some(fixture(5).0));
    cfg.backends = Arc::new(|spec: &BackendSpec| -> Result<Box<dyn AssessmentBackend>, String> {
        assert_eq!(spec.backend, "oracle");
        Ok(Box::new(ScriptedBackend::new(
            OracleBackend::new(&canonical_criteria()),
            [
                Scripted::Fail(BackendError::Transient("503 service unavailable".into())),
                Scripted::Fail(BackendError::Fatal("connection refused".into())),
            ],
        )))
    });
    let server = TestServer::start(cfg);
    let run_id = server.create_run(json!({"strategy": "ICAN", "max_in_flight": 1}));
    let run = server.wait(&run_id);
    assert_eq!(run["status"], "FAILED");
    assert_eq!(run["error"]["code"], "BACKEND_ERROR");
    assert!(run["error"]["message"].as_str().unwrap().contains("connection refused"));
    assert_eq!(run["ledger"]["api_calls"], 2);
    assert!(run.get("results").is_none());
    let (status, err) = error_code(server.get(&format!("/runs/{run_id}/decisions")));
    assert_eq!((status, err["code"].as_str()), (409, Some("RUN_NOT_DONE")));
}
