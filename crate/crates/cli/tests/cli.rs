use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_splitfed");

/// A small copy-task run that finishes in about a second.
const SMALL: &[&str] = &[
    "--set",
    "model.n_blocks=3",
    "--set",
    "model.hidden=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.vocab=24",
    "--set",
    "model.max_seq_len=8",
    "--set",
    "key_bits=256",
    "--set",
    "steps=20",
    "--set",
    "batch_size=2",
    "--set",
    "averaging.period_steps=5",
    "--set",
    r#"task={"kind":"copy","samples":64,"eval_samples":8,"seq_len":6,"alphabet":10}"#,
];

fn splitfed(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    splitfed(&args)
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// CSV rows without the wall-clock column.
fn rows_without_time(p: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,round,client_id,loss,wall_ms"));
    lines.map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn train_writes_metrics_summary_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--set", "strategy=client_batch"]);
    ok(&o);
    let rows = rows_without_time(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 40);
    let s = read_json(&dir.path().join("summary.json"));
    assert_eq!(s["config"]["strategy"], "client_batch");
    assert_eq!(s["config"]["model"]["hidden"], 16);
    assert_eq!(s["interrupted"], false);
    assert!(s["final_loss"].as_f64().unwrap() < s["initial_loss"].as_f64().unwrap());
    assert!(dir.path().join("model.ckpt").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(&train(a.path(), &["--set", "strategy=server_hierarchical"]));
    ok(&train(b.path(), &["--set", "strategy=server_hierarchical"]));
    assert_eq!(rows_without_time(&a.path().join("metrics.csv")), rows_without_time(&b.path().join("metrics.csv")));
    let c = tempfile::tempdir().unwrap();
    ok(&train(c.path(), &["--set", "strategy=server_hierarchical", "--set", "seed=1"]));
    assert_ne!(rows_without_time(&a.path().join("metrics.csv")), rows_without_time(&c.path().join("metrics.csv")));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [&["--set", "clientz=3"][..], &["--set", "clients=0"], &["--set", "novalue"]] {
        let o = train(dir.path(), extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = splitfed(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    let o = splitfed(&["train", "--role", "client", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn garbage_from_the_server_exits_3() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = std::thread::spawn(move || {
        use std::io::{Read, Write};
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 64];
        let _ = s.read(&mut buf);
        let _ = s.write_all(b"this is not a frame at all, not even close");
    });
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--connect", &addr]);
    server.join().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn separate_processes_over_tcp_match_loopback() {
    let dir = tempfile::tempdir().unwrap();
    let local = dir.path().join("local");
    ok(&train(&local, &["--set", "strategy=client_batch"]));

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let mut args: Vec<String> = vec!["train".into(), "--role".into(), "server".into(), "--out".into(), out("server")];
    args.extend(SMALL.iter().map(|s| s.to_string()));
    args.extend(["--set".into(), "strategy=client_batch".into()]);
    let server = Command::new(BIN)
        .args(&args)
        .env("SPLITFED_BIND", &addr)
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let clients: Vec<_> = (0..2)
        .map(|id| {
            let mut a: Vec<String> = vec![
                "train".into(),
                "--connect".into(),
                addr.clone(),
                "--client-id".into(),
                id.to_string(),
                "--out".into(),
                out("clients"),
            ];
            a.extend(SMALL.iter().map(|s| s.to_string()));
            a.extend(["--set".into(), "strategy=client_batch".into()]);
            Command::new(BIN).args(&a).stdout(Stdio::null()).spawn().unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    let mut server = server;
    assert!(server.wait().unwrap().success());
    let stats = read_json(&dir.path().join("server/server.json"));
    assert_eq!(stats["server"]["max_stack"], 2);

    let all = rows_without_time(&local.join("metrics.csv"));
    for id in 0..2 {
        let mine = rows_without_time(&dir.path().join(format!("clients/metrics-client{id}.csv")));
        let want: Vec<&String> = all.iter().filter(|r| r.split(',').nth(2) == Some(&id.to_string())).collect();
        assert_eq!(mine.iter().collect::<Vec<_>>(), want, "client {id}");
    }
}

#[test]
fn keygen_writes_a_working_key_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("key.json");
    ok(&splitfed(&["keygen", "--bits", "256", "--seed", "3", "--out", path.to_str().unwrap()]));
    let k = read_json(&path);
    assert_eq!(k["bits"], 256);
    let h = |f: &str| BigUint::parse_bytes(k[f].as_str().unwrap().as_bytes(), 16).unwrap();
    let (n, e, d) = (h("n"), h("e"), h("d"));
    assert_eq!(n.bits(), 256);
    for m in [2u64, 65, 123_456_789] {
        let m = BigUint::from(m);
        assert_eq!(m.modpow(&e, &n).modpow(&d, &n), m);
    }
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(std::fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
    }
    let again = dir.path().join("again.json");
    ok(&splitfed(&["keygen", "--bits", "256", "--seed", "3", "--out", again.to_str().unwrap()]));
    assert_eq!(read_json(&again), k);
}

#[test]
fn eval_of_the_checkpoint_matches_the_run_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(&train(dir.path(), &["--set", "seed=4"]));
    let summary = read_json(&dir.path().join("summary.json"));
    let task = serde_json::json!({ "task": summary["config"]["task"], "seed": 4 });
    let task_path = dir.path().join("task.json");
    std::fs::write(&task_path, task.to_string()).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let o = splitfed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", task_path.to_str().unwrap()]);
    ok(&o);
    let got: Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["loss", "token_accuracy"] {
        let (a, b) = (got[k].as_f64().unwrap(), summary["eval"][k].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9, "{k}: {a} vs {b}");
    }

    std::fs::write(&task_path, r#"{"samples": [{"input": [1, 2, 3], "target": [1, 2, 3]}]}"#).unwrap();
    ok(&splitfed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", task_path.to_str().unwrap()]));
    std::fs::write(&task_path, r#"{"samples": [{"input": [1, 99], "target": [1, 2]}]}"#).unwrap();
    let o = splitfed(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--task", task_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_emits_one_row_per_strategy_and_client_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let mut args = vec!["bench", "--clients", "1,2", "--samples", "40", "--csv", csv.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = splitfed(&args);
    ok(&o);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().count(), 4, "{table}");
    assert!(table.contains("client-batch") && table.contains("server-hierarchical"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("strategy,clients,steps_per_client,samples,mean_s,std_s,speedup_vs_serial"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("40")));
}

/// With one client every strategy does the same work.
#[test]
fn bench_strategies_agree_at_one_client() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let mut args = vec!["bench", "--clients", "1", "--samples", "600", "--repeats", "5", "--csv", csv.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&splitfed(&args));
    let text = std::fs::read_to_string(&csv).unwrap();
    let times: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    let (lo, hi) = times.iter().fold((f64::MAX, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    assert!(hi <= 1.1 * lo, "{times:?}");
}

#[test]
fn interrupt_flushes_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "steps=1000000"]);
    let mut child = Command::new(BIN).args(&args).stdout(Stdio::null()).stderr(Stdio::null()).spawn().unwrap();
    std::thread::sleep(Duration::from_millis(1500));
    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    let start = Instant::now();
    let code = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "run did not stop");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(code.success());
    let s = read_json(&dir.path().join("summary.json"));
    assert_eq!(s["interrupted"], true);
    let rows = rows_without_time(&dir.path().join("metrics.csv"));
    assert!(!rows.is_empty() && rows.len() < 2_000_000);
}

#[test]
fn attack_prints_and_writes_the_differential() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let caps = dir.path().join("caps");
    let o = splitfed(&[
        "attack",
        "--out",
        out.to_str().unwrap(),
        "--capture-dir",
        caps.to_str().unwrap(),
        "--set",
        "seeds=[0]",
        "--set",
        "sentences=60",
        "--set",
        "sentence_len=6",
        "--set",
        "epochs=1",
        "--set",
        "model.n_blocks=3",
        "--set",
        "model.hidden=16",
        "--set",
        "model.vocab=32",
        "--set",
        "model.max_seq_len=8",
    ]);
    ok(&o);
    let r = read_json(&out);
    assert_eq!(r["embedding_only"]["arch"]["kind"], "linear_decoder");
    assert_eq!(r["front_block"]["arch"]["kind"], "single_block_decoder");
    assert_eq!(r["per_seed"].as_array().unwrap().len(), 1);
    assert!(caps.join("capture-embedding_only-seed0.bin").exists());
    assert!(caps.join("capture-front_block-seed0.bin").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy ratio"));
    let o = splitfed(&["attack", "--out", out.to_str().unwrap(), "--set", "shadow_fraction=2"]);
    assert_eq!(o.status.code(), Some(2));
}
