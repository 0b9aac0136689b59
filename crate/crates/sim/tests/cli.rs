use std::path::Path;
use std::process::{Command, Output};

use densesort_cli::cli::read_reference;
use densesort_core::metrics::ClassLabeling;
use densesort_oracles as oracle;
use serde_json::Value;

fn densesort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densesort")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = densesort(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn write_spec(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    std::fs::write(
        &spec,
        r#"{"class_count":3,"object_count":600,"zipf_exponent":1.0,"dim":4,"noise_fraction":0.02,"holdout_classes":[2],"holdout_fraction":0.1,"rng_seed":5}"#,
    )
    .unwrap();
    spec.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn simulate_prints_a_report_and_writes_it() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let out = dir.path().join("run");
    let report = ok_json(&["simulate", "--spec", &spec, "--policy", "default", "--schedule", "32,8,4", "--out", &s(&out)]);
    assert_eq!(report["object_count"], 600);
    assert_eq!(report["iterations"].as_array().unwrap().len(), 3);
    for key in ["m", "new_clusters", "validated_clusters", "objects_per_decision"] {
        assert!(report["iterations"][0].get(key).is_some(), "missing {key}");
    }
    let saved: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved["total_judgments"], report["total_judgments"]);

    // the simulated project is a regular workspace project
    let csv = densesort(&["export", "--out", &s(&out.join("projects"))]);
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(text.lines().count(), 601);
    assert!(text.lines().any(|l| l.ends_with(",class-00")));
}

#[test]
fn policies_are_read_inline_or_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let inline = r#"{"page_accept_rule":{"rule":"majority","theta":0.8},"turtle_enabled":true}"#;
    ok_json(&["simulate", "--spec", &spec, "--policy", inline, "--schedule", "32,8", "--out", &s(&dir.path().join("a"))]);
    let file = dir.path().join("policy.json");
    std::fs::write(&file, r#"{"cluster_purity_threshold":2.0}"#).unwrap();
    let out = densesort(&["simulate", "--spec", &spec, "--policy", &s(&file), "--out", &s(&dir.path().join("b"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cluster_purity_threshold"));
}

#[test]
fn step_by_step_commands() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    let gen = ok_json(&["generate", "--spec", &spec, "--seed", "9", "--out", &s(&data)]);
    assert_eq!(gen["objects"], 600);
    let ws = dir.path().join("ws");
    let features = s(&data.join("features.mcft"));
    let labels = s(&data.join("truth.csv"));
    let created = ok_json(&["ingest", "--features", &features, "--labels", &labels, "--schedule", "16,4", "--out", &s(&ws)]);
    assert_eq!(created["project"], "p1");

    // a fresh project exports a residual row per object and no tree
    let export = densesort(&["export", "--out", &s(&ws), "--project", "p1"]);
    let text = String::from_utf8(export.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("object_id,label_path"));
    assert_eq!(text.lines().count(), 601);
    assert_eq!(densesort(&["tree", "--out", &s(&ws)]).status.code(), Some(1));

    let first = ok_json(&["iterate", "--out", &s(&ws)]);
    assert_eq!(first["status"], "started");
    assert_eq!(first["m"], 16);
    // proposed clusters must be validated before the next iteration
    if !first["proposed"].as_array().unwrap().is_empty() {
        assert_eq!(densesort(&["iterate", "--out", &s(&ws)]).status.code(), Some(1));
    }
}

#[test]
fn export_of_an_empty_project_is_just_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let features = dir.path().join("empty.mcft");
    let store = densesort_core::FeatureStore::new(4).unwrap();
    densesort_core::features::save_features(&store, &features).unwrap();
    let ws = dir.path().join("ws");
    ok_json(&["ingest", "--features", &s(&features), "--out", &s(&ws)]);
    let out = densesort(&["export", "--out", &s(&ws), "--project", "p1"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "object_id,label_path\n");
    let dest = dir.path().join("labels.csv");
    assert!(densesort(&["export", "--out", &s(&ws), "--dest", &s(&dest)]).status.success());
    assert_eq!(std::fs::read_to_string(dest).unwrap(), "object_id,label_path\n");
}

#[test]
fn metrics_against_reproduce_counting() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let out = dir.path().join("run");
    ok_json(&["simulate", "--spec", &spec, "--schedule", "32,8,4", "--out", &s(&out)]);
    let ws = s(&out.join("projects"));
    let truth_file = out.join("truth.csv");
    let metrics = ok_json(&["metrics", "--out", &ws, "--against", &s(&truth_file)]);

    let csv = String::from_utf8(densesort(&["export", "--out", &ws]).stdout).unwrap();
    let labeling: ClassLabeling = csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .filter(|(_, p)| !p.is_empty())
        .map(|(o, p)| (o.to_string(), p.to_string()))
        .collect();
    let truth = read_reference(&truth_file).unwrap();
    let classes: std::collections::BTreeSet<&String> = labeling.values().collect();
    let labels: std::collections::BTreeSet<&String> = truth.values().collect();
    let mut sum = 0.0;
    let mut counted = 0;
    for class in classes {
        let best = labels.iter().filter_map(|l| oracle::precision(&labeling, &truth, class, l)).fold(None, |acc: Option<f64>, p| {
            Some(acc.map_or(p, |a| a.max(p)))
        });
        let got = &metrics["per_class_precision"][class.as_str()];
        match best {
            Some(p) => {
                assert_eq!(got.as_f64(), Some(p), "class {class}");
                sum += p;
                counted += 1;
            }
            None => assert!(got.is_null()),
        }
    }
    let macro_p = metrics["macro_precision"].as_f64().unwrap();
    assert!((macro_p - sum / counted as f64).abs() < 1e-15);
    assert_eq!(metrics["assigned_objects"].as_u64().unwrap() as usize, labeling.len());
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    assert_eq!(densesort(&[]).status.code(), Some(2));
    assert_eq!(densesort(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(densesort(&["ingest", "--out", "x"]).status.code(), Some(2));
    assert_eq!(densesort(&["iterate", "--out", "x", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = densesort(&["export", "--out", &s(&dir.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(1));
    let ws = densesort(&["export", "--out", &s(dir.path()), "--project", "p7"]);
    assert_eq!(ws.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&ws.stderr).contains("p7"));
    let bad = densesort(&["ingest", "--features", "/nonexistent.mcft", "--out", &s(&dir.path().join("w"))]);
    assert_eq!(bad.status.code(), Some(1));
    let zero = dir.path().join("zero.json");
    std::fs::write(&zero, r#"{"class_count":0}"#).unwrap();
    assert_eq!(densesort(&["generate", "--spec", &s(&zero), "--out", &s(dir.path())]).status.code(), Some(1));
}

#[test]
fn serve_answers_http() {
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};
    use std::time::{Duration, Instant};

    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_densesort"))
        .args(["serve", "--out", &s(dir.path()), "--addr", &addr, "--token", "t0k"])
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let response = loop {
        if let Ok(mut stream) = TcpStream::connect(&addr) {
            write!(stream, "GET /projects HTTP/1.1\r\nHost: x\r\nAuthorization: Bearer t0k\r\nConnection: close\r\n\r\n").unwrap();
            let mut buf = String::new();
            stream.read_to_string(&mut buf).unwrap();
            break buf;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    };
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /projects HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut denied = String::new();
    stream.read_to_string(&mut denied).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(denied.starts_with("HTTP/1.1 401"), "{denied}");
}
