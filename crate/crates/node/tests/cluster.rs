use std::io::{BufRead, BufReader};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use gradloom_core::coordinator::{BudgetMode, ProjectConfig};
use gradloom_core::datastore::encode_mlb1;
use gradloom_core::nn::Hyperparams;
use gradloom_core::protocol::{decode, Envelope, Message, Sender, WorkerMode, PROTOCOL_VERSION};
use gradloom_node::local::LocalCluster;
use gradloom_node::synthetic::Clusters;
use tokio_tungstenite::tungstenite::Message as WsMessage;

fn step_config(id: &str, data: &Clusters, steps: u64) -> ProjectConfig {
    let mut c = ProjectConfig::new(id, data.spec(8), 1.0);
    c.mode = BudgetMode::StepBudget;
    c.step_budget_steps = Some(steps);
    c.hyper = Some(Hyperparams {
        learning_rate: 0.05,
        ..Hyperparams::default()
    });
    c
}

fn cluster(dir: &tempfile::TempDir) -> LocalCluster {
    LocalCluster::start(dir.path(), 200).unwrap()
}

#[test]
fn trainers_and_tracker_run_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cluster(&dir);
    let data = Clusters::new(3, 4, 11);
    let manifest = c.ingest("train", &data.zip(300, 0).unwrap()).unwrap();
    assert_eq!(manifest.entries.len(), 300);
    c.create_project(&step_config("p", &data, 1000), &[]).unwrap();

    for w in ["a", "b"] {
        c.spawn_worker(c.worker_options("p", w));
    }
    let mut tracker = c.worker_options("p", "t");
    tracker.mode = WorkerMode::Track;
    tracker.test_set = data.items(60, 1);
    c.spawn_worker(tracker);
    assert!(c.wait_until(Duration::from_secs(30), |c| c.client().workers("p").is_ok_and(|w| w.len() == 3)));
    // registering after both joins deals 150 ids to each in one step
    c.client().register_dataset("p", "train", None).unwrap();

    let history = c.wait_for_iteration("p", 6, Duration::from_secs(60)).unwrap();
    let last = history.last().unwrap();
    assert!(last.iteration >= 6, "only reached {}", last.iteration);
    assert_eq!(last.allocated, 300);
    assert_eq!(last.unallocated, 0);
    assert_eq!(last.reports_received, 2);
    assert_eq!(last.total_examples, 300);
    assert!(last.wall_ms >= 1000.0 - 1.0);

    let alloc = c.client().allocation("p").unwrap();
    assert_eq!(alloc.workers.values().copied().collect::<Vec<_>>(), [150, 150]);

    // 150 ids per worker in batches of 256 is one request each
    assert_eq!(c.worker_status("a").unwrap().shard_requests, 1);
    assert_eq!(c.worker_status("a").unwrap().cached, 150);

    let errors: Vec<f64> = history
        .iter()
        .flat_map(|r| r.metrics.iter())
        .filter(|m| m.metric_name == "test_error" && m.worker_id == "t")
        .map(|m| m.value)
        .collect();
    assert!(!errors.is_empty());
    assert!(c.worker_status("t").unwrap().test_errors.len() >= errors.len());

    let workers = c.client().workers("p").unwrap();
    assert_eq!(workers.len(), 3);
    c.shutdown();
}

#[test]
fn snapshot_predict_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cluster(&dir);
    let data = Clusters::new(2, 3, 5);
    c.ingest("d", &data.zip(80, 0).unwrap()).unwrap();
    c.create_project(&step_config("src", &data, 40), &["d"]).unwrap();
    c.spawn_worker(c.worker_options("src", "w"));
    c.wait_for_iteration("src", 3, Duration::from_secs(30)).unwrap();

    let (archive, text) = c.client().snapshot("src").unwrap();
    assert!(archive.iteration >= 2);

    let body = c
        .client()
        .post_bytes("/projects?project_id=copy&T_seconds=1", "application/json", text.as_bytes())
        .unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(summary["iteration"], archive.iteration);

    let (copy, copy_text) = c.client().snapshot("copy").unwrap();
    assert_eq!(copy.params, archive.params);
    assert_eq!(copy_text, text);

    let (network, params) = (archive.validate().unwrap(), &archive.params);
    for (_, x) in data.items(10, 3) {
        let p = c.client().predict("copy", &encode_mlb1(&x)).unwrap();
        let (label, prob) = gradloom_core::worker::predict(&network, params, &x).unwrap();
        assert_eq!(p.label, label);
        assert_eq!(p.probability.to_bits(), prob.to_bits());
    }
    let err = c.client().predict("copy", b"not an image").unwrap_err();
    assert_eq!(err.status(), Some(400));
    c.shutdown();
}

#[test]
fn killed_worker_data_is_reassigned() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cluster(&dir);
    let data = Clusters::new(2, 3, 9);
    c.ingest("d", &data.zip(90, 0).unwrap()).unwrap();
    c.create_project(&step_config("p", &data, 1000), &["d"]).unwrap();
    for w in ["w1", "w2", "w3"] {
        c.spawn_worker(c.worker_options("p", w));
    }
    let h = c.wait_for_iteration("p", 3, Duration::from_secs(30)).unwrap();
    assert_eq!(h.last().unwrap().reports_received, 3);

    c.kill_worker("w2");
    assert!(c.wait_until(Duration::from_secs(10), |c| {
        c.client().allocation("p").unwrap().workers.len() == 2
    }));
    let alloc = c.client().allocation("p").unwrap();
    assert_eq!(alloc.allocated, 90);
    assert_eq!(alloc.workers.values().sum::<u64>(), 90);

    let before = c.client().history("p", 0).unwrap().last().unwrap().iteration;
    let h = c.wait_for_iteration("p", before + 3, Duration::from_secs(30)).unwrap();
    let last = h.last().unwrap();
    assert!(!last.stalled);
    assert_eq!(last.reports_received, 2);
    assert_eq!(last.total_examples, 90);
    c.shutdown();
}

#[test]
fn control_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(&dir);
    let data = Clusters::new(2, 2, 1);
    let cfg = step_config("p", &data, 10);
    c.client().create_project(&cfg).unwrap();
    let dup = c.client().create_project(&cfg).unwrap_err();
    assert_eq!(dup.status(), Some(409));
    assert_eq!(c.client().projects().unwrap().len(), 1);

    let bad = c
        .client()
        .post_bytes("/projects", "application/json", br#"{"project_id":"x","T_seconds":2,"colour":1}"#)
        .unwrap_err();
    assert_eq!(bad.status(), Some(400));

    let missing = c.client().get_bytes("/projects/nope").unwrap_err();
    assert_eq!(missing.status(), Some(404));

    c.client()
        .set_hyper("p", &Hyperparams {
            learning_rate: 0.2,
            ..Hyperparams::default()
        })
        .unwrap();
    let bad_hyper = c
        .client()
        .set_hyper("p", &Hyperparams {
            learning_rate: -1.0,
            ..Hyperparams::default()
        })
        .unwrap_err();
    assert_eq!(bad_hyper.status(), Some(400));
    c.client().set_period("p", 3.0).unwrap();
    assert_eq!(c.client().set_period("p", 100.0).unwrap_err().status(), Some(400));
    assert_eq!(c.client().projects().unwrap()[0].period_s, 3.0);

    c.ingest("d", &data.zip(10, 0).unwrap()).unwrap();
    let manifest = c.datastore_client().manifest("d").unwrap();
    c.client().register_manifest("p", &manifest).unwrap();
    let again = c.client().register_dataset("p", "d", None).unwrap_err();
    assert_eq!(again.status(), Some(409));
    assert_eq!(c.client().allocation("p").unwrap().unallocated, 10);
    assert_eq!(c.client().set_paused("p", "ghost", true).unwrap_err().status(), Some(404));
    c.shutdown();
}

async fn ws_join(url: &str, project: &str, worker: &str, version: u32) -> (Vec<Envelope>, bool) {
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let mut sender = Sender::new(project, worker);
    let join = sender.wrap(Message::Join {
        worker_id: worker.into(),
        mode: WorkerMode::Train,
        capacity: 10,
        protocol_version: version,
    });
    ws.send(WsMessage::Text(serde_json::to_string(&join).unwrap().into())).await.unwrap();
    let mut got = Vec::new();
    let closed = loop {
        match tokio::time::timeout(Duration::from_secs(3), ws.next()).await {
            Ok(Some(Ok(WsMessage::Text(t)))) => {
                let env = decode(t.as_bytes(), 1 << 26).unwrap();
                let bye = matches!(env.message, Message::Bye { .. });
                got.push(env);
                if bye {
                    break true;
                }
            }
            Ok(Some(Ok(WsMessage::Close(_)))) | Ok(None) | Ok(Some(Err(_))) => break true,
            Ok(Some(Ok(_))) => {}
            Err(_) => break false,
        }
    };
    (got, closed)
}

#[test]
fn join_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = LocalCluster::start(dir.path(), 1000).unwrap();
    let data = Clusters::new(2, 2, 1);
    c.client().create_project(&step_config("p", &data, 10)).unwrap();
    c.spawn_worker(c.worker_options("p", "w"));
    assert!(c.wait_until(Duration::from_secs(10), |c| c.client().workers("p").unwrap().len() == 1));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let url = c.ws_url();
    let (dup, closed) = rt.block_on(ws_join(&url, "p", "w", PROTOCOL_VERSION));
    assert!(closed);
    assert!(matches!(&dup.last().unwrap().message, Message::Bye { reason } if reason.contains("w")));

    let (old, closed) = rt.block_on(ws_join(&url, "p", "x", PROTOCOL_VERSION + 1));
    assert!(closed);
    assert!(matches!(&old[0].message, Message::Bye { reason } if reason.contains("protocol")));

    let (unknown, closed) = rt.block_on(ws_join(&url, "nope", "x", PROTOCOL_VERSION));
    assert!(closed);
    assert!(matches!(&unknown[0].message, Message::Bye { .. }));

    // accepted, then dropped for never answering pings
    let (ok, closed) = rt.block_on(ws_join(&url, "p", "fresh", PROTOCOL_VERSION));
    assert!(ok.iter().any(|e| matches!(e.message, Message::Welcome { .. })));
    assert!(ok.iter().any(|e| matches!(e.message, Message::Ping { .. })));
    assert!(closed);
    assert!(c.wait_until(Duration::from_secs(5), |c| c.client().workers("p").unwrap().len() == 1));
    c.shutdown();
}

#[test]
fn telemetry_streams() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cluster(&dir);
    let data = Clusters::new(2, 2, 3);
    c.ingest("d", &data.zip(20, 0).unwrap()).unwrap();
    c.create_project(&step_config("p", &data, 20), &["d"]).unwrap();
    c.spawn_worker(c.worker_options("p", "w"));
    c.wait_for_iteration("p", 2, Duration::from_secs(30)).unwrap();

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(20)))
        .build()
        .into();
    let resp = agent
        .get(format!("{}/projects/p/telemetry", c.client().base()))
        .call()
        .unwrap();
    assert!(resp
        .headers()
        .get("content-type")
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    let mut reader = BufReader::new(resp.into_body().into_reader());
    let mut iterations = Vec::new();
    let mut line = String::new();
    while iterations.len() < 4 {
        line.clear();
        reader.read_line(&mut line).unwrap();
        if let Some(data) = line.strip_prefix("data:") {
            let record: gradloom_core::protocol::IterationRecord = serde_json::from_str(data.trim()).unwrap();
            iterations.push(record.iteration);
        }
    }
    assert_eq!(iterations[0], 1);
    assert!(iterations.windows(2).all(|w| w[1] == w[0] + 1), "{iterations:?}");

    let after = c.client().history("p", 2).unwrap();
    assert!(after.iter().all(|r| r.iteration > 2));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let url = format!("ws://{}/projects/p/telemetry/ws", c.client().base().trim_start_matches("http://"));
    let kind = rt.block_on(async {
        let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        loop {
            if let Some(Ok(WsMessage::Text(t))) = ws.next().await {
                break decode(t.as_bytes(), 1 << 26).unwrap().message;
            }
        }
    });
    assert!(matches!(kind, Message::Telemetry { .. }));
    c.shutdown();
}
