#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modeldisc"))
}

/// Runs the CLI against `store` and returns the raw output.
pub fn run(store: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--store")
        .arg(store)
        .args(args)
        .env_remove("MODELDISC_STORE")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs and demands exit code 0, returning stdout.
pub fn ok(store: &Path, args: &[&str]) -> String {
    let o = run(store, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

pub fn generate(dir: &Path, name: &str, model: &str, config: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("{name}.csv"));
    let out_s = out.to_str().unwrap().to_string();
    let mut args = vec!["generate", "--model", model, "--config", config, "--out", out_s.as_str()];
    args.extend_from_slice(extra);
    ok(dir, &args);
    out
}

pub fn session_file(store: &Path, id: &str) -> Value {
    let text = std::fs::read_to_string(store.join(format!("{id}.json"))).expect("session file");
    serde_json::from_str(&text).expect("session json")
}

/// Session JSON without the fields that record wall-clock facts.
pub fn untimed(mut v: Value) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.remove("timestamp");
                map.remove("wall_time");
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    strip(&mut v);
    v
}

/// A session over the standard LV experiment with a small search.
pub fn lv_session(dir: &Path, store: &Path, quick: &[&str]) -> String {
    let train = generate(dir, "lv-train", "lotka_volterra_full", "", &[]);
    let test = generate(dir, "lv-test", "lotka_volterra_full", "x0=1,y0=3", &[]);
    let train_arg = format!("{}:", train.display());
    let test_arg = format!("{}:x0=1,y0=3", test.display());
    let mut args = vec![
        "session",
        "new",
        "--model",
        "lotka_volterra_truncated",
        "--train",
        train_arg.as_str(),
        "--test",
        test_arg.as_str(),
    ];
    args.extend_from_slice(quick);
    ok(store, &args).trim().to_string()
}
