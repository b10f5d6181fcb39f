use std::process::Command;

fn freeaccess(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_freeaccess")).args(args).output().expect("spawn freeaccess")
}

fn json(out: &std::process::Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn bench_writes_csv_with_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    let out = freeaccess(&[
        "bench", "--scheme", "fa,hp,nr", "--threads", "1,2", "--range", "64", "--duration-secs", "0.05",
        "--repeats", "2", "--format", "csv", "--out", path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let records = freeaccess::harness::parse_csv(&text).unwrap();
    assert_eq!(records.len(), 6);
    for r in &records {
        assert!(r.mean_ops > 0.0);
        assert!(r.ratio_nr.is_some(), "{r:?}");
    }
    // hp cannot run hhs and falls back to hm
    assert!(records.iter().any(|r| r.scheme == freeaccess::Scheme::Hp && r.variant == freeaccess::Variant::Hm));
}

#[test]
fn bench_json_to_stdout() {
    let out = freeaccess(&["bench", "--scheme", "ebr", "--range", "32", "--duration-secs", "0.05", "--repeats", "1", "--format", "json"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v[0]["scheme"], "ebr");
    assert_eq!(v[0]["mix"], "50:25:25");
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(!freeaccess(&["bench", "--mix", "50:50:50"]).status.success());
    assert!(!freeaccess(&["bench", "--scheme", "gc"]).status.success());
    assert!(!freeaccess(&["bench", "--format", "xml"]).status.success());
    let out = freeaccess(&["bench", "--range", "0", "--duration-secs", "0.01"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_alternation_passes() {
    let out = freeaccess(&["verify", "alternation", "--ops", "5000", "--variant", "harris"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert!(v["injected"].as_u64().unwrap() > 0);
}

#[test]
fn verify_stuck_reads_script_file() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("park.txt");
    std::fs::write(&script, "# park one searcher\n2:entry:phases=6\n").unwrap();
    let out = freeaccess(&["verify", "stuck", "--scheme", "fa", "--script", script.to_str().unwrap(), "--min-phases", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(json(&out)["suspended"], serde_json::json!([2]));

    let out = freeaccess(&["verify", "stuck", "--scheme", "ebr"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], false);
}

#[test]
fn verify_poison_catches_mutation() {
    let out = freeaccess(&["verify", "poison", "--ops", "100000"]);
    assert!(out.status.success());
    let out = freeaccess(&["verify", "poison", "--ops", "1000000", "--mutation", "skip-validate"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn verify_swap_and_trace() {
    let out = freeaccess(&["verify", "swap", "--n", "4", "--trials", "500"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["violations"], 0);
    let out = freeaccess(&["verify", "trace", "--heaps", "100", "--helpers", "2"]);
    assert!(out.status.success());
    assert_eq!(json(&out)["mismatches"], 0);
}
