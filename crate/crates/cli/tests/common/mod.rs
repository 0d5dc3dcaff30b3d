#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

pub const REJECT: &str = "Image Description:\nTwo objects side by side.\n\nEvaluation Criteria:\n\
1. Single object:\n- Two objects are visible.\n- Result: Fail\n\
2. Single View:\n- One view.\n- Result: Meet\n\
3. Intact object:\n- Whole.\n- Result: Meet\n\
4. Plain Background:\n- Black.\n- Result: Meet\n\n\
Conclusion:\nMore than one object is shown, so the image is not suitable.\n\nResult: Filter Out";

pub const KEEP: &str = "Image Description:\nOne object.\n\nEvaluation Criteria:\n\
1. Single object:\n- One object.\n- Result: Meet\n\
2. Single View:\n- One view.\n- Result: Meet\n\
3. Intact object:\n- Whole.\n- Result: Meet\n\
4. Plain Background:\n- Black.\n- Result: Meet\n\n\
Conclusion:\nAll criteria are met.\n\nResult: Keep";

/// Recursively merges `patch` into `base`; `null` removes a key.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    b.remove(k);
                } else {
                    merge(b.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

pub struct Fixture {
    pub dir: TempDir,
}

impl Fixture {
    /// All-mock setup; `config` and `mocks` are merged over the defaults.
    pub fn new(config: Value, mocks: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let mut scripts = json!({
            "agent": {"rules": [{"contains": "kite", "replies": ["a single kite, isolated"]}], "replies": ["a single cup, isolated"]},
            "evaluator": {"replies": ["too vague about lighting"]},
            "rewriter": {"replies": ["sys-v1", "sys-v2", "sys-v3", "sys-v4", "sys-v5", "sys-v6", "sys-v7", "sys-v8", "sys-v9", "sys-v10"]},
            "prompt_validator": {"replies": ["Decision: YES"]},
            "vision": {"judge": "components"},
            "image": {}
        });
        merge(&mut scripts, &mocks);
        let roles = [
            ("agent", "mock_chat"),
            ("evaluator", "mock_chat"),
            ("rewriter", "mock_chat"),
            ("prompt_validator", "mock_chat"),
            ("vision", "mock_vision"),
            ("image", "mock_image"),
        ];
        let mut endpoints = serde_json::Map::new();
        for (name, role) in roles {
            let Some(script) = scripts.get_mut(name) else {
                continue;
            };
            script["log_path"] = format!("{name}.log").into();
            f.write(&format!("{name}.json"), script);
            endpoints.insert(
                name.into(),
                json!({"role": role, "base_url": format!("{name}.json")}),
            );
        }
        let mut cfg = json!({
            "seed": 1,
            "parallelism": 2,
            "categories": [{"id": 1, "name": "cup"}, {"id": 2, "name": "kite"}],
            "endpoints": endpoints,
            "prompts": {"optimize": false},
            "generation": {"width": 64, "height": 64},
            "filter": {"median_kernel": 5},
            "dataset": {"size": 4, "image_size": 128, "out_dir": "out"}
        });
        merge(&mut cfg, &config);
        f.write("gnv.json", &cfg);
        f
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn out(&self) -> PathBuf {
        self.path("out")
    }

    pub fn config(&self) -> PathBuf {
        self.path("gnv.json")
    }

    pub fn write(&self, rel: &str, value: &Value) {
        std::fs::write(self.path(rel), serde_json::to_string_pretty(value).unwrap()).unwrap();
    }

    pub fn read(&self, rel: &str) -> Value {
        read_json(&self.path(rel))
    }

    pub fn gnv(&self, args: &[&str]) -> Output {
        let out = Command::new(env!("CARGO_BIN_EXE_gnv"))
            .arg("--config")
            .arg(self.config())
            .args(args)
            .env_remove("GNV_CONFIG")
            .output()
            .unwrap();
        if !out.status.success() {
            eprintln!(
                "gnv {args:?} stderr:\n{}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        out
    }

    /// Mock invocation log of one endpoint, one entry per call.
    pub fn log(&self, name: &str) -> Vec<Value> {
        match std::fs::read_to_string(self.path(&format!("{name}.log"))) {
            Ok(text) => text
                .lines()
                .map(|l| serde_json::from_str(l).unwrap())
                .collect(),
            Err(_) => Vec::new(),
        }
    }
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(
        &std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())),
    )
    .unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
