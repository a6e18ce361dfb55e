use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use gradloom_node::Client;

fn gradloom() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gradloom"));
    c.env("RUST_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    gradloom().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a long-running subcommand and reads its "listening on" URL.
fn serve(args: &[&str]) -> Server {
    let mut child = gradloom().args(args).stdout(Stdio::piped()).spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://"), "unexpected banner {line:?}");
    Server(child, url)
}

fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    false
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["coordinator"]).status.code(), Some(1));

    let missing = run(&["coordinator", "--config", "/nonexistent/gradloom.toml"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));

    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let dir = tempfile::tempdir().unwrap();
    let busy = run(&["datastore", "--dir", dir.path().to_str().unwrap(), "--port", &port]);
    assert_eq!(busy.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "port = 0\nbogus = 1\n").unwrap();
    assert_eq!(run(&["coordinator", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(&["synth", "--classes", "3", "--dims", "4", "--count", "150", "--seed", "5", "--out", &p("train.zip")]);
    ok(&["synth", "--classes", "3", "--dims", "4", "--count", "30", "--seed", "5", "--stream", "1", "--out", &p("test.zip")]);

    std::fs::create_dir(p("store")).unwrap();
    let store = serve(&["datastore", "--dir", &p("store"), "--port", "0"]);
    let upload = ok(&["dataset", "upload", "--datastore", &store.1, "--id", "toy", &p("train.zip")]);
    let upload: serde_json::Value = serde_json::from_str(&upload).unwrap();
    assert_eq!(upload["items"], 150);

    std::fs::write(
        p("coordinator.toml"),
        format!("port = 0\nping_interval_ms = 300\ndatastore_url = \"{}\"\n", store.1),
    )
    .unwrap();
    let coord = serve(&["coordinator", "--config", &p("coordinator.toml")]);

    let spec = gradloom_node::synthetic::Clusters::new(3, 4, 5).spec(6);
    let config = serde_json::json!({
        "project_id": "toy",
        "spec": spec,
        "T_seconds": 1.0,
        "mode": "step_budget",
        "step_budget_steps": 20,
    });
    std::fs::write(p("project.json"), config.to_string()).unwrap();
    ok(&["project", "create", "--coordinator", &coord.1, "--config", &p("project.json")]);
    ok(&["dataset", "register", "--coordinator", &coord.1, "--project", "toy", "--id", "toy"]);
    let listed: serde_json::Value = serde_json::from_str(&ok(&["project", "list", "--coordinator", &coord.1])).unwrap();
    assert_eq!(listed[0]["project_id"], "toy");

    let ws = format!("{}/ws", coord.1.replace("http://", "ws://"));
    let mut workers: Vec<Server> = ["a", "b"]
        .iter()
        .map(|id| {
            let child = gradloom()
                .args(["worker", "--coordinator", &ws, "--datastore", &store.1, "--project", "toy", "--id", id])
                .stdout(Stdio::null())
                .spawn()
                .unwrap();
            Server(child, String::new())
        })
        .collect();
    let client = Client::new(&coord.1);
    assert!(wait_until(Duration::from_secs(60), || {
        client.history("toy", 0).is_ok_and(|h| h.iter().any(|r| r.iteration >= 3 && r.reports_received == 2))
    }));
    workers.clear();

    ok(&["model", "save", "--coordinator", &coord.1, "--project", "toy", "--out", &p("first.json")]);
    ok(&[
        "model", "load", "--coordinator", &coord.1, "--archive", &p("first.json"), "--project", "copy", "--period", "1",
    ]);
    ok(&["model", "save", "--coordinator", &coord.1, "--project", "copy", "--out", &p("second.json")]);
    assert_eq!(std::fs::read(p("first.json")).unwrap(), std::fs::read(p("second.json")).unwrap());

    let items = gradloom_node::synthetic::Clusters::new(3, 4, 5).items(3, 9);
    let mut files = Vec::new();
    for (i, (_, x)) in items.iter().enumerate() {
        let f = p(&format!("item{i}.mlb1"));
        std::fs::write(&f, gradloom_core::datastore::encode_mlb1(x)).unwrap();
        files.push(f);
    }
    let mut local = vec!["model", "predict", "--archive"];
    let archive = p("first.json");
    local.push(&archive);
    local.extend(files.iter().map(String::as_str));
    let mut remote = vec!["model", "predict", "--coordinator", &coord.1, "--project", "copy"];
    remote.extend(files.iter().map(String::as_str));
    let (local, remote) = (ok(&local), ok(&remote));
    assert_eq!(local.lines().count(), 3);
    assert_eq!(local, remote);
    for line in local.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["label"].as_str().unwrap().starts_with('c'));
        let prob = v["probability"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&prob));
    }

    let csv_path = p("conv.csv");
    let spec_path = p("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    ok(&[
        "bench", "convergence", "--train", &p("train.zip"), "--test", &p("test.zip"), "--spec", &spec_path, "--workers", "1",
        "--iterations", "2", "--period", "1", "--out", &csv_path,
    ]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("iteration,test_error\n"), "{csv}");
    assert!(csv.lines().count() >= 2);
}
