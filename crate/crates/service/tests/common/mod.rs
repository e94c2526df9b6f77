#![allow(dead_code)]

use std::path::Path;
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, Response};
use serde_json::Value;
use trialmatch_core::corpus::{canonical_criteria, generate_synthetic_corpus, Corpus, FactPlacement, GroundTruth, SyntheticConfig};
use trialmatch_service::{Service, ServiceConfig};

/// Balanced labels; every patient's facts sit in one chunk of the last note.
pub fn fixture(n_patients: usize) -> (Corpus, GroundTruth) {
    let config = SyntheticConfig {
        placement: FactPlacement::Clustered,
        ..SyntheticConfig::balanced(n_patients)
    };
    generate_synthetic_corpus(&config, 42).unwrap()
}

pub fn config(dir: &Path, corpus: Option<Corpus>) -> ServiceConfig {
    ServiceConfig::new(dir, corpus, canonical_criteria())
}

/// A service on an ephemeral port, served from its own runtime thread.
pub struct TestServer {
    pub base: String,
    pub client: Client,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl TestServer {
    pub fn start(config: ServiceConfig) -> TestServer {
        let service = Service::open(config).unwrap();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                service
                    .serve(listener, async {
                        let _ = stopped.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        TestServer {
            base: format!("http://{addr}"),
            client: Client::new(),
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    pub fn get(&self, path: &str) -> Response {
        self.client.get(format!("{}{path}", self.base)).send().unwrap()
    }

    pub fn get_json(&self, path: &str) -> Value {
        let r = self.get(path);
        assert!(r.status().is_success(), "GET {path}: {}", r.status());
        r.json().unwrap()
    }

    pub fn post(&self, path: &str, body: Value) -> Response {
        self.client.post(format!("{}{path}", self.base)).json(&body).send().unwrap()
    }

    pub fn create_run(&self, body: Value) -> String {
        let r = self.post("/runs", body);
        assert_eq!(r.status(), 202);
        r.json::<Value>().unwrap()["run_id"].as_str().unwrap().to_string()
    }

    /// Polls until the run is DONE or FAILED and returns it.
    pub fn wait(&self, run_id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let run = self.get_json(&format!("/runs/{run_id}"));
            if run["status"] == "DONE" || run["status"] == "FAILED" {
                return run;
            }
            assert!(Instant::now() < deadline, "run {run_id} still {}", run["status"]);
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join().unwrap();
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}
