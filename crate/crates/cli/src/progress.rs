//! Progress reporting: human lines on stderr, or JSON lines on stdout.

use serde_json::{json, Value};

#[derive(Debug, Clone, Copy)]
pub struct Progress {
    json: bool,
}

impl Progress {
    pub fn new(json: bool) -> Self {
        Self { json }
    }

    pub fn is_json(&self) -> bool {
        self.json
    }

    pub fn item(&self, stage: &str, id: &str, status: &str, detail: Option<&str>) {
        if self.json {
            let mut v = json!({"event": "item", "stage": stage, "id": id, "status": status});
            if let Some(d) = detail {
                v["detail"] = d.into();
            }
            println!("{v}");
        } else {
            match detail {
                Some(d) => log::info!("{stage} {id}: {status} ({d})"),
                None => log::info!("{stage} {id}: {status}"),
            }
        }
    }

    pub fn stage_start(&self, stage: &str, total: u64) {
        if self.json {
            println!(
                "{}",
                json!({"event": "stage_start", "stage": stage, "total": total})
            );
        } else {
            eprintln!("[{stage}] {total} item(s)");
        }
    }

    /// `summary` is an object of counters and notes.
    pub fn stage_done(&self, stage: &str, summary: Value) {
        if self.json {
            let mut v = json!({"event": "stage_done", "stage": stage});
            if let (Some(dst), Value::Object(src)) = (v.as_object_mut(), summary) {
                dst.extend(src);
            }
            println!("{v}");
        } else {
            eprintln!("[{stage}] done {summary}");
        }
    }

    pub fn error(&self, message: &str, exit_code: u8) {
        if self.json {
            println!(
                "{}",
                json!({"event": "error", "message": message, "exit_code": exit_code})
            );
        }
        eprintln!("error: {message}");
    }

    /// Prints a command result: JSON as is, or pretty-printed for humans.
    pub fn result(&self, value: &Value) {
        if self.json {
            println!("{}", json!({"event": "result", "result": value}));
        } else {
            println!(
                "{}",
                serde_json::to_string_pretty(value).expect("json value prints")
            );
        }
    }
}
