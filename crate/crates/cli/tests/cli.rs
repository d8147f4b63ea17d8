use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn rbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbnn"))
        .args(args)
        .env("RBNN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

/// Two noisy clusters in 6 dimensions, labels 0 and 1.
fn toy_csv(dir: &Path) -> PathBuf {
    let mut s = String::from("f0,f1,f2,f3,f4,f5,label\n");
    let mut state = 12345u64;
    let mut noise = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.5
    };
    for i in 0..80 {
        let label = i % 2;
        let side = if label == 1 { 1.0 } else { -1.0 };
        let row: Vec<String> = [0.8, -0.5, 0.3, 0.9, -0.7, 0.2]
            .iter()
            .map(|d| format!("{}", side * d + noise()))
            .collect();
        s.push_str(&format!("{},{label}\n", row.join(",")));
    }
    let p = dir.join("toy.csv");
    fs::write(&p, s).unwrap();
    p
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn train_toy(dir: &TempDir, tag: &str) -> (String, String) {
    let data = toy_csv(dir.path());
    let ckpt = path(dir, &format!("{tag}.ckpt"));
    let curve = path(dir, &format!("{tag}.jsonl"));
    ok(rbnn(&[
        "train",
        "--arch",
        "6,8,2",
        "--dataset",
        data.to_str().unwrap(),
        "--levels",
        "2",
        "--epochs",
        "3",
        "--batch-size",
        "16",
        "--lr",
        "0.01",
        "--seed",
        "7",
        "--out",
        &ckpt,
        "--curve",
        &curve,
    ]));
    (ckpt, curve)
}

fn exported_model(dir: &TempDir) -> (String, String) {
    let (ckpt, _) = train_toy(dir, "m");
    let model = path(dir, "m.rbnm");
    ok(rbnn(&["export", "--checkpoint", &ckpt, "--out", &model]));
    (model, dir.path().join("toy.csv").display().to_string())
}

#[test]
fn missing_dataset_is_an_input_error_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "no-such-mnist");
    fs::create_dir(&missing).unwrap();
    let o = rbnn(&["train", "--dataset", &missing, "--out", &path(&dir, "c")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-such-mnist"), "{}", stderr(&o));
    let o = rbnn(&["train", "--arch", "2,2", "--dataset", &path(&dir, "absent.csv"), "--out", &path(&dir, "c")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.csv"));
}

#[test]
fn same_seed_gives_identical_curves() {
    let dir = TempDir::new().unwrap();
    let (a_ckpt, a) = train_toy(&dir, "a");
    let (b_ckpt, b) = train_toy(&dir, "b");
    let a = fs::read(a).unwrap();
    assert_eq!(a, fs::read(b).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    assert_eq!(fs::read(a_ckpt).unwrap(), fs::read(b_ckpt).unwrap());
}

#[test]
fn resume_continues_training() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train_toy(&dir, "r");
    let data = path(&dir, "toy.csv");
    let more = path(&dir, "r2.ckpt");
    let curve = path(&dir, "r2.jsonl");
    ok(rbnn(&[
        "train", "--dataset", &data, "--resume", &ckpt, "--epochs", "2", "--out", &more, "--curve", &curve,
    ]));
    let text = fs::read_to_string(curve).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 4);
}

#[test]
fn corrupted_container_exits_with_integrity_code() {
    let dir = TempDir::new().unwrap();
    let (model, data) = exported_model(&dir);
    let mut bytes = fs::read(&model).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x01;
    fs::write(&model, bytes).unwrap();
    let o = rbnn(&["infer", "--model", &model, "--input", &data]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn reexport_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train_toy(&dir, "e");
    let a = path(&dir, "a.rbnm");
    let b = path(&dir, "b.rbnm");
    ok(rbnn(&["export", "--checkpoint", &ckpt, "--out", &a]));
    ok(rbnn(&["export", "--checkpoint", &ckpt, "--out", &b]));
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn bad_parallelism_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (ckpt, _) = train_toy(&dir, "p");
    let out = path(&dir, "p.rbnm");
    let o = rbnn(&["export", "--checkpoint", &ckpt, "--pe", "0,1", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = rbnn(&["export", "--checkpoint", &ckpt, "--simd", "65,8", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = rbnn(&["export", "--checkpoint", &ckpt, "--pe", "1", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    ok(rbnn(&["export", "--checkpoint", &ckpt, "--pe", "3,1", "--simd", "3,8", "--out", &out]));
}

#[test]
fn sim_predictions_match_infer() {
    let dir = TempDir::new().unwrap();
    let (model, data) = exported_model(&dir);
    let inf = path(&dir, "infer.txt");
    let sim = path(&dir, "sim.txt");
    let report = path(&dir, "report.json");
    let o = ok(rbnn(&["infer", "--model", &model, "--input", &data, "--predictions", &inf]));
    assert!(stdout(&o).contains("accuracy: "));
    ok(rbnn(&["sim", "--model", &model, "--input", &data, "--predictions", &sim, "--report", &report]));
    let inf = fs::read_to_string(inf).unwrap();
    assert_eq!(inf.lines().count(), 80);
    assert_eq!(inf, fs::read_to_string(sim).unwrap());

    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["layers"].as_array().unwrap().len(), 2);
    for key in ["initiation_interval", "latency_cycles", "throughput_per_second", "xnor_ops"] {
        assert!(r[key].is_number(), "{key}");
    }

    for i in ["0", "5"] {
        let a = ok(rbnn(&["infer", "--model", &model, "--input", &data, "--index", i]));
        let b = ok(rbnn(&["sim", "--model", &model, "--input", &data, "--index", i]));
        assert_eq!(stdout(&a), stdout(&b));
        assert!(stdout(&a).trim().parse::<usize>().unwrap() < 2);
    }
}

#[test]
fn mismatched_input_width_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (model, _) = exported_model(&dir);
    let bad = path(&dir, "bad.csv");
    fs::write(&bad, "1,2,0\n").unwrap();
    let o = rbnn(&["infer", "--model", &model, "--input", &bad]);
    assert_eq!(o.status.code(), Some(2));
}

fn report_json(args: &[&str]) -> serde_json::Value {
    let mut full = vec!["report"];
    full.extend_from_slice(args);
    serde_json::from_str(&stdout(&ok(rbnn(&full)))).unwrap()
}

#[test]
fn report_analyses() {
    let v = report_json(&["--xnor-overhead", "--kernel", "3", "--height", "3", "--filters", "64", "--bits", "24"]);
    assert_eq!(v["ratio"], 25.375);
    assert_eq!(v["analysis"], "xnornet_overhead");

    let v = report_json(&["--arch", "arch1", "--levels", "2", "--widen", "1"]);
    assert_eq!(v["ratio"], 1.0);
    let v = report_json(&["--arch", "arch2", "--levels", "1", "--widen", "2.25"]);
    assert!(v["ratio"].as_f64().unwrap() > 2.0);

    let v = report_json(&["--arch", "arch2", "--utilization", "0.1,0.1,0.1,0.1,0.1,0.1", "--bits", "24"]);
    assert_eq!(v["analysis"], "network_overhead");
    assert!(v["overhead"].as_f64().unwrap() > 0.0);

    let o = rbnn(&["report", "--arch", "arch1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = rbnn(&["report", "--arch", "arch9", "--widen", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Every documented field is present with the documented JSON type.
#[test]
fn reports_follow_schema_documents() {
    let docs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs");
    let analysis: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(docs.join("analysis.schema.json")).unwrap()).unwrap();
    let sim: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(docs.join("sim_report.schema.json")).unwrap()).unwrap();

    fn conforms(value: &serde_json::Value, schema: &serde_json::Value) {
        let props = schema["properties"].as_object().unwrap();
        for req in schema["required"].as_array().unwrap() {
            let key = req.as_str().unwrap();
            let v = &value[key];
            let ty = props[key]["type"].as_str().unwrap();
            let fits = match ty {
                "integer" => v.is_u64() || v.is_i64(),
                "number" => v.is_number(),
                "string" => v.is_string(),
                "array" => v.is_array(),
                "object" => v.is_object(),
                "boolean" => v.is_boolean(),
                other => panic!("unknown type {other}"),
            };
            assert!(fits, "{key}: expected {ty}, got {v}");
            if ty == "array" {
                if let Some(items) = props[key].get("items") {
                    if items.get("properties").is_some() {
                        for item in v.as_array().unwrap() {
                            conforms(item, items);
                        }
                    }
                }
            }
        }
        if let Some(c) = props.get("analysis").and_then(|p| p.get("const")) {
            assert_eq!(&value["analysis"], c);
        }
    }

    let variants = analysis["oneOf"].as_array().unwrap();
    let find = |name: &str| variants.iter().find(|v| v["properties"]["analysis"]["const"] == name).unwrap();
    conforms(&report_json(&["--xnor-overhead"]), find("xnornet_overhead"));
    conforms(&report_json(&["--arch", "arch1", "--widen", "2"]), find("widen_cost"));
    conforms(
        &report_json(&["--arch", "arch2", "--utilization", "0.2,0.2,0.2,0.2,0.2,0.2"]),
        find("network_overhead"),
    );

    let dir = TempDir::new().unwrap();
    let (model, data) = exported_model(&dir);
    let report = path(&dir, "r.json");
    ok(rbnn(&["sim", "--model", &model, "--input", &data, "--limit", "3", "--report", &report]));
    conforms(&serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap(), &sim);
}

#[test]
fn gradcheck_passes_and_reports_json() {
    let o = ok(rbnn(&["gradcheck", "--points", "5"]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["max_relative_error"].as_f64().unwrap() < 1e-4);
    let o = rbnn(&["gradcheck", "--points", "5", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(4));
}
