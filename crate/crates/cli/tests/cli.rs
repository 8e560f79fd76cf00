use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_speechbci");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn speechbci")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and an untrained checkpoint fitted to it.
struct Fixture {
    dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bcie");
    let model = dir.path().join("m.bcim");
    ok(&["synth", "--out", s(&data), "--trials-per-class", "5", "--channels", "4", "--seed", "3"]);
    ok(&["train", "--data", s(&data), "--out-model", s(&model), "--max-epochs", "0", "--base-width", "4"]);
    Fixture { dir, data, model }
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["synth", "--help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["synth"])), 1);
    assert_eq!(code(&run(&["synth", "--out", "x", "--trials-per-class", "many"])), 1);
    assert_eq!(code(&run(&["synth", "--out", "x", "--trials-per-class", "0"])), 1);
}

#[test]
fn synth_is_byte_identical_and_sized_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bcie");
    let b = dir.path().join("b.bcie");
    let text = ok(&["synth", "--out", s(&a), "--trials-per-class", "2", "--channels", "8"]);
    assert!(text.contains("wrote 8 trials"), "{text}");
    ok(&["synth", "--out", s(&b), "--trials-per-class", "2", "--channels", "8"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.bcie");
    ok(&["synth", "--out", s(&c), "--trials-per-class", "2", "--channels", "8", "--seed", "1"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 8);
}

#[test]
fn zero_epoch_training_saves_initial_parameters_deterministically() {
    let f = fixture();
    let again = f.dir.path().join("again.bcim");
    let history = f.dir.path().join("h.csv");
    let text = ok(&[
        "train", "--data", s(&f.data), "--out-model", s(&again), "--max-epochs", "0", "--base-width", "4", "--history",
        s(&history),
    ]);
    assert!(text.contains("stop_reason max_epochs"), "{text}");
    assert_eq!(std::fs::read(&f.model).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(std::fs::read_to_string(&history).unwrap(), "epoch,loss,ddpm,rec,ce,train_acc,val_acc,ms\n");
    assert_eq!(&std::fs::read(&f.model).unwrap()[..4], b"BCIM");
}

#[test]
fn eval_reports_a_table_and_topk_four_is_certain() {
    let f = fixture();
    let text = ok(&["eval", "--model", s(&f.model), "--data", s(&f.data)]);
    for row in ["Clock", "Toilet", "Water", "Resting state", "All", "top-2", "confusion"] {
        assert!(text.contains(row), "missing {row}\n{text}");
    }
    let text = ok(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--topk", "4"]);
    let all = text.lines().find(|l| l.starts_with("All")).unwrap();
    assert!(all.trim_end().ends_with("100.0%"), "{all}");
    assert_eq!(code(&run(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--topk", "5"])), 1);
}

#[test]
fn mismatched_data_is_a_config_mismatch() {
    let f = fixture();
    let other = f.dir.path().join("wide.bcie");
    ok(&["synth", "--out", s(&other), "--trials-per-class", "2", "--channels", "8"]);
    let out = run(&["eval", "--model", s(&f.model), "--data", s(&other)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config mismatch"));
    let out = run(&["online", "--model", s(&f.model), "--source", s(&other), "--trials", "2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_inputs_are_data_errors() {
    let f = fixture();
    let junk = f.dir.path().join("junk");
    std::fs::write(&junk, b"not a dataset").unwrap();
    assert_eq!(code(&run(&["eval", "--model", s(&f.model), "--data", s(&junk)])), 2);
    assert_eq!(code(&run(&["eval", "--model", s(&junk), "--data", s(&f.data)])), 2);
    assert_eq!(code(&run(&["train", "--data", s(&junk), "--out-model", s(&junk)])), 2);
    let missing = f.dir.path().join("missing");
    assert_eq!(code(&run(&["eval", "--model", s(&f.model), "--data", s(&missing)])), 2);
}

#[test]
fn non_finite_parameters_are_numeric_errors() {
    let f = fixture();
    let mut bytes = std::fs::read(&f.model).unwrap();
    let doc_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = 10 + doc_len + 8;
    for chunk in bytes[body..].chunks_exact_mut(4) {
        chunk.copy_from_slice(&f32::NAN.to_le_bytes());
    }
    let bad = f.dir.path().join("nan.bcim");
    std::fs::write(&bad, bytes).unwrap();
    let out = run(&["eval", "--model", s(&bad), "--data", s(&f.data)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn online_sessions_from_file_and_synth() {
    let f = fixture();
    let p1 = f.dir.path().join("p1.csv");
    let p2 = f.dir.path().join("p2.csv");
    let report = f.dir.path().join("r.txt");
    let text = ok(&[
        "online", "--model", s(&f.model), "--source", &format!("file:{}", s(&f.data)), "--trials", "20", "--report",
        s(&report), "--predictions", s(&p1),
    ]);
    assert!(text.contains("state machine ok"), "{text}");
    assert!(text.contains("trials 20  dropped 0"), "{text}");
    ok(&["online", "--model", s(&f.model), "--source", s(&f.data), "--trials", "20", "--predictions", s(&p2)]);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(std::fs::read_to_string(&p1).unwrap().lines().count(), 21);
    assert!(!std::fs::read_to_string(&report).unwrap().is_empty());

    let text = ok(&["online", "--model", s(&f.model), "--source", "synth", "--trials", "1", "--seed", "4"]);
    assert!(text.contains("trials 1  dropped 0"), "{text}");
    assert_eq!(code(&run(&["online", "--model", s(&f.model), "--source", "synth", "--trials", "0"])), 1);
}

#[test]
fn online_over_tcp_matches_file_replay() {
    let f = fixture();
    let mut server = Command::new(BIN)
        .args(["serve", "--data", s(&f.data), "--listen", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stderr.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let addr = first.rsplit(' ').next().unwrap().to_string();
    let tcp = f.dir.path().join("tcp.csv");
    let file = f.dir.path().join("file.csv");
    ok(&["online", "--model", s(&f.model), "--source", &format!("tcp:{addr}"), "--trials", "20", "--predictions", s(&tcp)]);
    assert!(server.wait().unwrap().success());
    ok(&["online", "--model", s(&f.model), "--source", s(&f.data), "--trials", "20", "--predictions", s(&file)]);
    assert_eq!(std::fs::read(&tcp).unwrap(), std::fs::read(&file).unwrap());
}

#[test]
fn unreachable_tcp_source_exits_with_data_error() {
    let f = fixture();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = run(&["online", "--model", s(&f.model), "--source", &format!("tcp:127.0.0.1:{port}"), "--trials", "1"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bench_reports_and_rejects_zero() {
    let f = fixture();
    let text = ok(&["bench", "--model", s(&f.model), "--n", "3"]);
    assert!(text.contains("mean_ms") && text.contains("p95_ms"), "{text}");
    assert_eq!(code(&run(&["bench", "--model", s(&f.model), "--n", "0"])), 1);
}

#[test]
fn filters_prints_both_cascades() {
    let text = ok(&["filters"]);
    assert!(text.contains("# low-pass") && text.contains("# notch"));
    assert_eq!(code(&run(&["filters", "--fs", "100"])), 1);
}
