use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use addlab::core::taskgen::{gen_addition, Exclusion, Interval, SplitSpec};
use addlab::core::vocab::{TaskKind, Vocabulary};
use addlab::dataset;
use addlab::run::RunSummary;
use serde_json::Value;

fn addlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_addlab"))
        .args(args)
        .env_remove("ADDLAB_ENDPOINT")
        .env_remove("ADDLAB_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/probe")
}

/// A few hundred examples on a 0..40 operand grid.
fn tiny_dataset(dir: &Path) {
    let spec = SplitSpec {
        train_range: Interval::new(10, 30),
        test_range: Interval::new(0, 40),
        n_train: 300,
        n_val: 60,
        n_test: 200,
        seed: 5,
        exclusion: Exclusion::ExcludeTrainSquare,
    };
    let splits = gen_addition(TaskKind::DecimalAddition, &spec).unwrap();
    dataset::write_splits(dir, &splits, &Vocabulary::build(TaskKind::DecimalAddition).unwrap(), false).unwrap();
}

#[test]
fn gen_is_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = addlab(&["gen", "--task", "small-digit", "--seed", "1", "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let (ha, hb) = (dataset::hashes(&a).unwrap(), dataset::hashes(&b).unwrap());
    assert_eq!(ha.len(), 5);
    assert_eq!(ha, hb);
    let again = addlab(&["gen", "--task", "small-digit", "--seed", "1", "--out", s(&a)]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"));
    let forced = addlab(&["gen", "--task", "small-digit", "--seed", "1", "--out", s(&a), "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(dataset::hashes(&a).unwrap(), hb);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&addlab(&["gen", "--task", "nbase", "--base", "1", "--out", s(&out)])), 2);
    assert_eq!(code(&addlab(&["gen", "--task", "nbase", "--out", s(&out)])), 2);
    assert_eq!(code(&addlab(&["gen", "--task", "sudoku", "--out", s(&out)])), 2);
    assert_eq!(code(&addlab(&["train", "--data", s(&out), "--out", s(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn other_generators() {
    let tmp = tempfile::tempdir().unwrap();
    let nb = tmp.path().join("nb");
    assert_eq!(code(&addlab(&["gen", "--task", "nbase", "--base", "2", "--out", s(&nb)])), 0);
    assert_eq!(dataset::load(&nb).unwrap().vocab.kind(), TaskKind::NbaseAddition { base: 2 });
    let bo = tmp.path().join("bo");
    let out = addlab(&["gen", "--task", "binop", "--modulus", "7", "--op", "poly", "--terms", "1:2:0,1:0:2", "--out", s(&bo)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let d = dataset::load(&bo).unwrap();
    assert_eq!(d.train.len() + d.test.len(), 49);
    let ld = tmp.path().join("ld");
    assert_eq!(code(&addlab(&["gen", "--task", "large-digit", "--pairs", "20", "--max-digits", "30", "--out", s(&ld)])), 0);
    assert_eq!(std::fs::read_to_string(ld.join("pairs.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn train_missing_dataset_names_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-data");
    let out = addlab(&["train", "--arch", "mlp", "--data", s(&missing), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no-such-data"), "{}", stderr(&out));
}

fn summary(run: &Path) -> RunSummary {
    serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn mlp_smoke_run_and_config_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let run1 = tmp.path().join("run1");
    let out = addlab(&["train", "--arch", "mlp", "--data", s(&data), "--epochs", "2", "--trials", "2", "--parallel", "2", "--batch-size", "32", "--out", s(&run1)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let first = summary(&run1);
    assert_eq!(first.trials, 2);
    assert!(first.val_em.is_some() && first.test_em.is_some());
    for t in ["trial_00", "trial_01"] {
        let metrics = std::fs::read_to_string(run1.join(t).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert!(metrics.starts_with("epoch,train_loss,val_em"));
        assert!(run1.join(t).join("best.ckpt").exists() && run1.join(t).join("record.json").exists());
    }
    let raw: Value = serde_json::from_str(&std::fs::read_to_string(run1.join("summary.json")).unwrap()).unwrap();
    for key in ["val_em", "test_em"] {
        assert!(raw[key]["mean"].is_number() && raw[key]["sd"].is_number(), "{key}");
    }

    let run2 = tmp.path().join("run2");
    let cfg = run1.join("config.json");
    let out = addlab(&["train", "--config", s(&cfg), "--out", s(&run2)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let second = summary(&run2);
    for (a, b) in first.records.iter().zip(&second.records) {
        assert_eq!(a.epochs, b.epochs);
        assert_eq!((a.best_epoch, a.best_val_em, a.test_em), (b.best_epoch, b.best_val_em, b.test_em));
    }
    for t in ["trial_00", "trial_01"] {
        for f in ["metrics.csv", "best.ckpt"] {
            assert_eq!(std::fs::read(run1.join(t).join(f)).unwrap(), std::fs::read(run2.join(t).join(f)).unwrap(), "{t}/{f}");
        }
    }

    let report = addlab(&["report", s(&run1)]);
    assert_eq!(code(&report), 0);
    let table = String::from_utf8(report.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(2).unwrap().starts_with("MLP"));
}

#[test]
fn transformer_checkpoint_reproduces_validation_em() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let run = tmp.path().join("run");
    let out = addlab(&["train", "--arch", "transformer", "--data", s(&data), "--epochs", "5", "--trials", "1", "--batch-size", "64", "--lr", "0.001", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let record = &summary(&run).records[0];
    let evald = tmp.path().join("eval");
    let out = addlab(&["eval", "--run", s(&run), "--split", "val", "--out", s(&evald)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(evald.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["em_percent"].as_f64(), record.best_val_em);
    assert_eq!(report["n"], 60);
}

#[test]
fn eval_writes_plot_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_dataset(&data);
    let run = tmp.path().join("run");
    let out = addlab(&["train", "--arch", "seq2seq", "--data", s(&data), "--epochs", "1", "--trials", "1", "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = run.join("trial_00/best.ckpt");
    let evald = tmp.path().join("eval");
    let out = addlab(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&evald)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let headers = [
        ("scatter.csv", "a,b,correct,regime"),
        ("pred_vs_truth.csv", "a,b,truth,pred,exact_match,truncated,class"),
        ("answer_hist.csv", "source,value,count"),
        ("top_errors.csv", "rank,error,count"),
    ];
    for (f, h) in headers {
        let text = std::fs::read_to_string(evald.join(f)).unwrap();
        assert_eq!(text.lines().next(), Some(h), "{f}");
    }
    let scatter = std::fs::read_to_string(evald.join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 201);
    assert!(scatter.contains("extrapolation"));
    assert!(evald.join("report.json").exists());
    let no_data = addlab(&["eval", "--checkpoint", s(&ckpt), "--out", s(&tmp.path().join("e2"))]);
    assert_eq!(code(&no_data), 2);
}

#[test]
fn report_merges_runs_in_table_order() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, arch, params) in [("t", "transformer", 3_178_255), ("m", "mlp", 1_166_411), ("s", "seq2seq", 3_174_927)] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let body = serde_json::json!({
            "architecture": arch, "param_count": params, "trials": 3, "completed": 3, "failed": 0,
            "val_em": {"mean": 50.0, "sd": 1.0}, "test_em": {"mean": 5.0, "sd": 0.5}, "records": []
        });
        std::fs::write(dir.join("summary.json"), body.to_string()).unwrap();
        dirs.push(dir);
    }
    let out_dir = tmp.path().join("table");
    let args: Vec<&str> = ["report"].into_iter().chain(dirs.iter().map(|d| s(d))).chain(["--out", s(&out_dir)]).collect();
    let out = addlab(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let models: Vec<&str> = text.lines().skip(2).map(|l| l.split(" | ").next().unwrap().trim()).collect();
    assert_eq!(models, ["MLP", "Seq2seq", "Transformer"]);
    assert_eq!(std::fs::read_to_string(out_dir.join("table.txt")).unwrap(), text);
    assert_eq!(std::fs::read_to_string(out_dir.join("table.csv")).unwrap().lines().count(), 4);
}

#[test]
fn probe_replay_matches_golden_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("probe");
    let fixture = fixture_dir().join("completions.jsonl");
    let out = addlab(&["probe", "--mode", "replay", "--fixture", s(&fixture), "--pairs", "1000", "--max-digits", "100", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(out_dir.join("summary.json")).unwrap(), std::fs::read(fixture_dir().join("summary.json")).unwrap());
    for f in ["responses.jsonl", "ratio_by_digits.csv", "pred_vs_truth.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn probe_replay_honours_pair_limit() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("probe");
    let fixture = fixture_dir().join("completions.jsonl");
    let out = addlab(&["probe", "--pairs", "100", "--max-digits", "10", "--mode", "replay", "--fixture", s(&fixture), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(out_dir.join("responses.jsonl")).unwrap().lines().count(), 100);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["responses"], 100);
}

#[test]
fn probe_malformed_fixture_is_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"prompt_id\": 0, \"raw_completion\": \"1\"}\n{\"prompt_id\": \"x\"}\n").unwrap();
    let out = addlab(&["probe", "--fixture", s(&bad), "--pairs", "5", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn probe_live_without_endpoint_is_actionable() {
    let tmp = tempfile::tempdir().unwrap();
    let out = addlab(&["probe", "--mode", "live", "--pairs", "3", "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("ADDLAB_ENDPOINT"), "{}", stderr(&out));
}

/// Serves `responses` in order, one per connection, and returns the
/// request texts.
fn mock_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut req_body = vec![0; len];
            reader.read_exact(&mut req_body).unwrap();
            seen.push(head + &String::from_utf8(req_body).unwrap());
            let mut stream = reader.into_inner();
            write!(stream, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn probe_live_retries_and_persists_raw_completions() {
    let pairs = addlab::core::taskgen::gen_large_digit_pairs(2, 5, 0).unwrap();
    let truth = |i: usize| pairs[i].c.to_string();
    let ok = |text: String| (200, serde_json::json!({"choices": [{"text": text}, {"text": "ignored"}]}).to_string());
    let (url, server) = mock_server(vec![(503, "{}".into()), ok(truth(0)), (429, "{}".into()), ok(format!("The answer is {}", truth(1)))]);
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("live");
    let out = Command::new(env!("CARGO_BIN_EXE_addlab"))
        .args(["probe", "--mode", "live", "--endpoint", &url, "--pairs", "2", "--max-digits", "5", "--concurrency", "1"])
        .args(["--initial-backoff-ms", "1", "--max-backoff-ms", "2", "--out", s(&out_dir)])
        .env("ADDLAB_API_KEY", "secret-token")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let requests = server.join().unwrap();
    assert_eq!(requests.len(), 4);
    assert!(requests[0].contains("Bearer secret-token"));
    let body: Value = serde_json::from_str(requests[0].split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(body["maximum_tokens"], 105);
    assert_eq!(body["temperature"], 0.1);
    assert_eq!(body["top_p"], 0.0);
    assert_eq!(body["top_k"], 0);

    let raw = std::fs::read_to_string(out_dir.join("raw_completions.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 2);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["counts"]["correct"], 1);
    assert_eq!(summary["counts"]["non_numerical"], 1);

    let replayed = tmp.path().join("replayed");
    let out = addlab(&["probe", "--fixture", s(&out_dir.join("raw_completions.jsonl")), "--pairs", "2", "--max-digits", "5", "--out", s(&replayed)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(replayed.join("summary.json")).unwrap(), std::fs::read(out_dir.join("summary.json")).unwrap());
}
