use std::path::Path;
use std::process::{Command, Output};

use expool::evolve::{self, EvolveConfig};
use expool::pool::Pool;
use expool::simenv::{MockEncoder, MockLanguage, World};
use expool::types::Preference;
use serde_json::Value;

fn expool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expool")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = expool(args);
    assert!(
        out.status.success(),
        "expool {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_train_infer_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (world, pool, traces) = (d.join("world.json"), d.join("pool"), d.join("fine.jsonl"));

    let sim: Value = serde_json::from_str(&ok(&[
        "simulate", "--out", s(d), "--seed", "5", "--train-images", "120", "--test-images", "15",
    ]))
    .unwrap();
    assert_eq!(sim["train_images"], 120);
    assert!(world.exists() && d.join("manifest.json").exists());

    let acq: Value = serde_json::from_str(&ok(&["acquire", "--world", s(&world), "--pool", s(&pool)])).unwrap();
    assert!(acq["acquired"].as_u64().unwrap() > 0);

    let evo: Value = serde_json::from_str(&ok(&["evolve", "--world", s(&world), "--pool", s(&pool)])).unwrap();
    assert!(evo["rounds"].is_array());

    let info: Value = serde_json::from_str(&ok(&["inspect", "--pool", s(&pool)])).unwrap();
    assert_eq!(info["records"], acq["acquired"]);

    assert_eq!(ok(&["infer", "--world", s(&world), "--pool", s(&pool), "--out", s(&traces)]), "");
    let lines: Vec<Value> = std::fs::read_to_string(&traces)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 15);
    for t in &lines {
        assert!(t["status"].is_string());
        assert!(t["invocations"].as_u64().unwrap() <= 40);
    }

    let csv = ok(&["report", "traces", s(&traces)]);
    let mut rows = csv.lines();
    let header = rows.next().unwrap();
    assert!(header.ends_with(",uqi"), "{header}");
    assert!(rows.next().unwrap().starts_with("fine"));
}

#[test]
fn clean_images_need_no_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = d.join("base");
    ok(&["simulate", "--out", s(&base), "--preset", "dominant", "--train-images", "0", "--test-images", "0"]);
    let mut spec: Value = serde_json::from_str(&std::fs::read_to_string(base.join("world.json")).unwrap()).unwrap();
    spec["mixes"]
        .as_array_mut()
        .unwrap()
        .push(serde_json::json!({"degradations": [], "weight": 1.0}));
    let spec_path = d.join("spec.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    ok(&["simulate", "--out", s(d), "--preset", s(&spec_path), "--train-images", "0", "--test-images", "40"]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    let clean: Vec<&str> = manifest["splits"]["test"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|i| i["degradations"].as_array().unwrap().is_empty())
        .map(|i| i["id"].as_str().unwrap())
        .collect();
    assert!(!clean.is_empty(), "world generated no clean images");
    let mut args = vec!["infer", "--world"];
    let world = d.join("world.json");
    args.push(s(&world));
    for id in &clean {
        args.extend(["--image", id]);
    }
    for line in ok(&args).lines() {
        let t: Value = serde_json::from_str(line).unwrap();
        assert_eq!(t["invocations"], 0);
        assert_eq!(t["total_rollbacks"].as_u64().unwrap_or(0), 0);
        assert_eq!(t["final_image"], t["image"]);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(expool(&["bogus"]).status.code(), Some(1));
    assert_eq!(expool(&["infer", "--top-k", "many"]).status.code(), Some(1));
    assert_eq!(expool(&["--help"]).status.code(), Some(0));

    let missing = d.join("missing");
    assert_eq!(expool(&["inspect", "--pool", s(&missing)]).status.code(), Some(2));

    ok(&["simulate", "--out", s(d), "--preset", "dominant", "--train-images", "0", "--test-images", "5"]);
    let world = d.join("world.json");
    assert_eq!(
        expool(&["infer", "--world", s(&world), "--image", "no-such-image"]).status.code(),
        Some(2)
    );

    let sym = d.join("sym");
    ok(&["simulate", "--out", s(&sym), "--preset", "symmetric", "--train-images", "60", "--test-images", "3"]);
    let world = sym.join("world.json");
    let pool = sym.join("pool");
    ok(&["train", "--world", s(&world), "--pool", s(&pool)]);
    let info: Value = serde_json::from_str(&ok(&["inspect", "--pool", s(&pool)])).unwrap();
    assert!(!info["profiles"].as_object().unwrap().is_empty(), "{info}");

    let cfg = d.join("remote.json");
    std::fs::write(
        &cfg,
        r#"{"remote": {"endpoint": "http://127.0.0.1:9/v1", "model": "m", "embedding_model": "e",
            "api_key_env": "EXPOOL_CLI_TEST_KEY", "timeout_secs": 2, "max_attempts": 1, "backoff_ms": 0}}"#,
    )
    .unwrap();
    let remote = ["infer", "--config", s(&cfg), "--world", s(&world), "--pool", s(&pool), "--oracle", "remote"];
    let unset = Command::new(env!("CARGO_BIN_EXE_expool"))
        .args(remote)
        .env_remove("EXPOOL_CLI_TEST_KEY")
        .output()
        .unwrap();
    assert_eq!(unset.status.code(), Some(1));
    let down = Command::new(env!("CARGO_BIN_EXE_expool"))
        .args(remote)
        .env("EXPOOL_CLI_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(down.status.code(), Some(3), "{}", String::from_utf8_lossy(&down.stderr));

    std::fs::write(&cfg, r#"{"colour": "blue"}"#).unwrap();
    assert_eq!(expool(&["inspect", "--config", s(&cfg)]).status.code(), Some(1));
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            collect(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

fn pool_files(pool: &Pool) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    pool.save(dir.path()).unwrap();
    let mut files = Vec::new();
    collect(dir.path(), dir.path(), &mut files);
    files.sort();
    files
}

#[test]
fn evolving_in_two_halves_matches_one_pass() {
    let world = std::sync::Arc::new(World::preset("group-a", 11).unwrap());
    let language = MockLanguage::new(world.clone());
    let encoder = MockEncoder::new(world.clone());
    let config = EvolveConfig::default();
    let pref = Preference::Fidelity;
    let images = world.generate_images("e", 400, None).unwrap();

    let seed_pool = Pool::new();
    let records = evolve::acquire_all(world.as_ref(), &seed_pool, &images, pref).unwrap();
    let key = records[0].degradation_type.clone();
    let records: Vec<_> = records.into_iter().filter(|r| r.degradation_type == key).take(50).collect();
    assert_eq!(records.len(), 50, "not enough records for {key}");

    let mut once = Pool::new();
    for r in records.iter().cloned() {
        once.add_record(r);
    }
    evolve::evolve_all(&mut once, &config, &language, &encoder).unwrap();

    let mut twice = Pool::new();
    for half in records.chunks(25) {
        for r in half.iter().cloned() {
            twice.add_record(r);
        }
        evolve::evolve_all(&mut twice, &config, &language, &encoder).unwrap();
    }
    assert_eq!(pool_files(&once), pool_files(&twice));
}
