//! End-to-end runs of the `wm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn scratch(test: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("wm-cli-{test}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn wm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wm")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

#[test]
fn employee_table_round_trip() {
    let dir = scratch("employees");
    let plan = dir.join("plan.json");
    let marked = dir.join("marked.json");
    let answers = dir.join("answers.json");
    let (plan, marked, answers) = (plan.to_str().unwrap(), marked.to_str().unwrap(), answers.to_str().unwrap());
    let (s, q) = (data("employees.json"), data("city_query.json"));

    let o = wm(&["plan", "--mode", "mso", "--pairing", "direct", "-s", &s, "-q", &q, "-o", plan]);
    assert!(o.status.success(), "{o:?}");
    let o = wm(&["embed", "-p", plan, "-s", &s, "-m", "10", "-o", marked, "--answers", answers]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(marked).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["weights"]["John"], 10001);
    assert_eq!(v["weights"]["Pooja"], 14999);
    assert_eq!(v["weights"]["Arjun"], 19999);
    assert_eq!(v["weights"]["Padma"], 20001);
    assert_eq!(v["weights"]["Neha"], 30000);

    for oracle in [marked, answers] {
        let o = wm(&["detect", "-p", plan, "-s", &s, "--oracle", oracle, "--expect", "10"]);
        assert!(o.status.success(), "{o:?}");
        assert_eq!(stdout(&o), "10");
    }
    let o = wm(&["detect", "-p", plan, "-s", &s, "--oracle", marked, "--expect", "11"]);
    assert_eq!(o.status.code(), Some(1));

    let o = wm(&["verify", "--exhaustive", "-s", &s, "--marked", marked, "-q", &q]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((v["c_local"].as_u64(), v["d_global"].as_u64()), (Some(1), Some(0)));
}

#[test]
fn input_errors_exit_with_2() {
    assert_eq!(wm(&["generate", "bogus", "3"]).status.code(), Some(2));
    let o = wm(&["plan", "--mode", "fo", "-s", &data("employees.json"), "-q", &data("city_query.json")]);
    assert_eq!(o.status.code(), Some(2));
    let o = wm(&["gaifman", "-s", "/nonexistent/structure.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(wm(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn distortion_violation_exits_with_1() {
    let dir = scratch("violation");
    let s = data("employees.json");
    let text = std::fs::read_to_string(&s).unwrap().replace("\"John\": 10000", "\"John\": 10005");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, text).unwrap();
    let o = wm(&["verify", "-s", &s, "--marked", bad.to_str().unwrap(), "-q", &data("city_query.json")]);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
}

#[test]
fn compile_commands() {
    let dir = scratch("compile");
    let p = dir.join("path.json");
    let tq = dir.join("tree_query.json");
    let (p, tq) = (p.to_str().unwrap(), tq.to_str().unwrap());
    std::fs::write(tq, r#"{"r": 1, "formula": ["anc", "x", "y"]}"#).unwrap();
    let o = wm(&["compile", "-q", tq, "--alphabet", "a,b"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pebbles"], 2);

    assert!(wm(&["generate", "path", "3", "-o", p]).status.success());
    let o = wm(&["compile", "-q", &data("grid_gnf.json"), "-s", p]);
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn grid_first_order_plan() {
    let dir = scratch("grid");
    let g = dir.join("grid.json");
    let plan = dir.join("plan.json");
    let (g, plan) = (g.to_str().unwrap(), plan.to_str().unwrap());
    assert!(wm(&["generate", "grid", "60", "--seed", "3", "-o", g]).status.success());
    let o = wm(&["plan", "--mode", "fo", "-s", g, "-q", &data("grid_gnf.json"), "-o", plan]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(plan).unwrap()).unwrap();
    assert_eq!(v["fo"]["theta"], 6);
}

#[test]
fn structural_commands() {
    let s = data("employees.json");
    let o = wm(&["gaifman", "-s", &s]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["components"].as_array().unwrap().len(), 3);

    let o = wm(&["types", "-s", &s, "-q", "1", "--query", &data("city_query.json")]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["classes"][0].as_array().unwrap().len(), 5);

    let o = wm(&["decompose", "-s", &s, "--exact"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["width"], 2);

    let o = wm(&["compile", "-q", &data("city_query.json"), "-s", &s, "--max-table", "4096"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");

    let o = wm(&["bench", "--generator", "path", "--sizes", "8,16,32"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["scalable"], true);
}
