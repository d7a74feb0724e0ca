use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bitline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitline"))
        .args(args)
        .env_remove("BITLINE_ENERGY_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bitline(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bitline(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> (PathBuf, PathBuf) {
    let (m, x) = (dir.join("toy.bcnm"), dir.join("input.txt"));
    ok(&["synth", "-o", s(&m), "--seed", "3", "--input", s(&x)]);
    (m, x)
}

#[test]
fn simulate_is_deterministic_and_verification_free() {
    let d = tempfile::tempdir().unwrap();
    let (m, x) = toy(d.path());
    let (a, b, c) = (
        d.path().join("a.json"),
        d.path().join("b.json"),
        d.path().join("c.json"),
    );
    ok(&[
        "simulate",
        s(&m),
        "--input",
        s(&x),
        "--subarrays",
        "4",
        "-o",
        s(&a),
    ]);
    ok(&[
        "simulate",
        s(&m),
        "--input",
        s(&x),
        "--subarrays",
        "4",
        "-o",
        s(&b),
    ]);
    ok(&[
        "simulate",
        s(&m),
        "--input",
        s(&x),
        "--subarrays",
        "4",
        "--no-verify",
        "-o",
        s(&c),
    ]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
    let csv = ok(&["report", s(&a), "--format", "csv"]);
    assert!(csv.starts_with(
        "layer,kind,macs,cycles_mac,cycles_transfer,cycles_merge,cycles_other,cycles_total,"
    ));
    assert!(csv.lines().last().unwrap().starts_with("total,network,"));
}

#[test]
fn compare_reports_speedup() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = toy(d.path());
    let (a, b) = (d.path().join("s1.json"), d.path().join("s8.json"));
    ok(&["simulate", s(&m), "--subarrays", "1", "-o", s(&a)]);
    ok(&["simulate", s(&m), "--subarrays", "8", "-o", s(&b)]);
    let csv = ok(&["report", s(&a), "--compare", s(&b), "--format", "csv"]);
    let total = csv.lines().last().unwrap();
    let f: Vec<&str> = total.split(',').collect();
    let (ca, cb): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
    let speedup: f64 = f[4].parse().unwrap();
    assert_eq!(speedup, ca / cb);
    assert!(speedup > 1.0);
}

#[test]
fn energy_config_from_file_and_env() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = toy(d.path());
    let cfg = d.path().join("array.toml");
    std::fs::write(&cfg, "subarrays = 2\n[energy]\ne_shift_add = 0.0\ne_read = 0.0\ne_write = 0.0\ne_decoder_cycle = 0.0\n").unwrap();
    let json = ok(&[
        "simulate",
        s(&m),
        "--energy-config",
        s(&cfg),
        "--format",
        "json",
    ]);
    assert!(json.contains("\"subarrays\": 2"));
    assert!(json.contains("\"total_energy_pj\": 0.0"));
    let out = Command::new(env!("CARGO_BIN_EXE_bitline"))
        .args(["simulate", s(&m), "--format", "json", "--subarrays", "3"])
        .env("BITLINE_ENERGY_CONFIG", &cfg)
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("\"subarrays\": 3") && text.contains("\"total_energy_pj\": 0.0"));
    std::fs::write(&cfg, "subarays = 2\n").unwrap();
    assert_eq!(code(&["simulate", s(&m), "--energy-config", s(&cfg)]), 2);
}

#[test]
fn quantize_floors_and_trace_replays() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = toy(d.path());
    let (q, t) = (d.path().join("q.bcnm"), d.path().join("trace.txt"));
    let out = ok(&[
        "quantize",
        s(&m),
        "-o",
        s(&q),
        "--evaluator",
        "constant:0.9",
        "--threshold",
        "0",
        "--trace",
        s(&t),
    ]);
    assert!(
        out.contains("0:2b/2x8") && out.contains("5:2b/2x8"),
        "{out}"
    );
    let trace = std::fs::read_to_string(&t).unwrap();
    assert!(trace
        .lines()
        .next()
        .unwrap()
        .starts_with("baseline layer=0 value=8"));
    // the quantized model still simulates bit-exactly
    ok(&["simulate", s(&q), "--subarrays", "2"]);
    let q2 = d.path().join("q2.bcnm");
    ok(&[
        "quantize",
        s(&m),
        "-o",
        s(&q2),
        "--evaluator",
        "constant:0.9",
        "--threshold",
        "0",
    ]);
    assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&q2).unwrap());
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = toy(d.path());
    assert_eq!(code(&["simulate"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["simulate", s(&m), "--nes", "0"]), 2);
    assert_eq!(
        code(&[
            "quantize",
            s(&m),
            "-o",
            "/dev/null",
            "--evaluator",
            "oracle"
        ]),
        2
    );
    assert_eq!(code(&["simulate", s(&d.path().join("missing.bcnm"))]), 3);
    let junk = d.path().join("junk.bcnm");
    std::fs::write(&junk, b"not a model").unwrap();
    assert_eq!(code(&["simulate", s(&junk)]), 3);
    let bad_input = d.path().join("bad.txt");
    std::fs::write(&bad_input, "shape 1 1 2\n0.1 0.2\n").unwrap();
    assert_eq!(code(&["simulate", s(&m), "--input", s(&bad_input)]), 3);
    let tiny = d.path().join("tiny.json");
    std::fs::write(&tiny, r#"{"subarray": {"rows_per_lg": 2, "ways": 1}}"#).unwrap();
    let out = bitline(&["simulate", s(&m), "--energy-config", s(&tiny)]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer 0 (conv)"));
    assert_eq!(code(&["plan", s(&m), "--energy-config", s(&tiny)]), 4);
    assert_eq!(code(&["report", s(&junk)]), 3);
}

#[test]
fn plan_lists_mac_layers() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = toy(d.path());
    let out = ok(&["plan", s(&m), "--subarrays", "4"]);
    assert_eq!(out.lines().count(), 1 + 3);
    assert!(out
        .lines()
        .nth(1)
        .unwrap()
        .trim_start()
        .starts_with("0 conv"));
}
