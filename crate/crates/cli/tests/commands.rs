mod common;

use std::collections::BTreeSet;
use std::process::Command;

use common::{code, stderr, Fixture, REJECT};
use serde_json::{json, Value};

fn seeds_of(entries: &[Value]) -> Vec<u64> {
    entries
        .iter()
        .filter(|e| e["op"] == "generate_image")
        .map(|e| e["seed"].as_u64().unwrap())
        .collect()
}

fn meta_seed(f: &Fixture, id: &str) -> u64 {
    f.read(&format!("out/instances/{id}/meta.json"))["seed"]
        .as_u64()
        .unwrap()
}

#[test]
fn optimize_prompts_approving_immediately() {
    let f = Fixture::new(json!({}), json!({}));
    let o = f.gnv(&["optimize-prompts"]);
    assert_eq!(code(&o), 0);
    let traces: Vec<_> = std::fs::read_dir(f.out().join("traces")).unwrap().collect();
    assert_eq!(traces.len(), 2);
    assert_eq!(
        std::fs::read_to_string(f.out().join("prompts/ld_agent.txt")).unwrap(),
        "sys-v1"
    );
    assert_eq!(
        std::fs::read_to_string(f.out().join("prompts/validation_agent.txt")).unwrap(),
        "sys-v2"
    );
    let s = f.read("out/prompts/summary.json");
    assert_eq!(s["ld_agent"]["accepted"], true);
    assert_eq!(s["ld_agent"]["iterations_used"], 1);

    // completed stage is not repeated
    let calls = f.log("agent").len();
    assert_eq!(code(&f.gnv(&["optimize-prompts"])), 0);
    assert_eq!(f.log("agent").len(), calls);
}

#[test]
fn optimize_prompts_without_evaluator_is_config_error() {
    let f = Fixture::new(json!({"endpoints": {"evaluator": null}}), json!({}));
    let o = f.gnv(&["optimize-prompts"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("endpoints.evaluator"), "{}", stderr(&o));
}

#[test]
fn optimize_prompts_always_rejected_is_not_fatal() {
    let f = Fixture::new(
        json!({"optimizer": {"max_iterations": 5}}),
        json!({"prompt_validator": {"replies": ["Decision: NO"]}}),
    );
    let o = f.gnv(&["optimize-prompts"]);
    assert_eq!(code(&o), 0);
    let s = f.read("out/prompts/summary.json");
    for role in ["ld_agent", "validation_agent"] {
        assert_eq!(s[role]["accepted"], false);
        assert_eq!(s[role]["iterations_used"], 5);
        let trace = f.read(&format!(
            "out/traces/{}",
            s[role]["trace"].as_str().unwrap()
        ));
        assert_eq!(trace["states"].as_array().unwrap().len(), 5);
    }
    // the rewriter's fifth reply is the final LD prompt
    assert_eq!(
        std::fs::read_to_string(f.out().join("prompts/ld_agent.txt")).unwrap(),
        "sys-v5"
    );
}

#[test]
fn generate_three_instances() {
    let f = Fixture::new(json!({}), json!({}));
    assert_eq!(code(&f.gnv(&["generate", "--count", "3"])), 0);
    for i in 0..3 {
        let d = f.out().join(format!("instances/{i:06}"));
        for name in ["image.png", "mask.png", "meta.json"] {
            assert!(d.join(name).is_file(), "{}", d.join(name).display());
        }
    }
    assert!(!f.out().join("instances/000003").exists());
    let cats: Vec<Value> = (0..3)
        .map(|i| f.read(&format!("out/instances/{i:06}/meta.json"))["category"].clone())
        .collect();
    assert_eq!(cats, ["cup", "kite", "cup"]);
    // two categories, two settings
    let bgs = std::fs::read_dir(f.out().join("backgrounds"))
        .unwrap()
        .count();
    assert_eq!(bgs, 8);
}

#[test]
fn empty_alpha_is_degenerate_and_not_validated() {
    let f = Fixture::new(
        json!({}),
        json!({"image": {"rules": [{"contains": "kite", "generator": "empty"}]}}),
    );
    assert_eq!(code(&f.gnv(&["generate", "--count", "4"])), 0);
    for (id, status) in [
        ("000000", "generated"),
        ("000001", "degenerate"),
        ("000003", "degenerate"),
    ] {
        assert_eq!(
            f.read(&format!("out/instances/{id}/meta.json"))["status"],
            status
        );
    }
    assert_eq!(code(&f.gnv(&["validate"])), 0);
    assert_eq!(f.log("vision").len(), 2);
    assert!(!f.out().join("instances/000001.verdict.json").exists());
    let stats = f.read("out/stats.json");
    assert_eq!(
        (stats["generated"].as_u64(), stats["degenerate"].as_u64()),
        (Some(2), Some(2))
    );
}

#[test]
fn rerun_skips_finished_items() {
    let f = Fixture::new(json!({}), json!({}));
    assert_eq!(code(&f.gnv(&["generate", "--count", "2"])), 0);
    let first = f.log("image");
    let before: BTreeSet<u64> = [meta_seed(&f, "000000"), meta_seed(&f, "000001")].into();

    assert_eq!(code(&f.gnv(&["generate", "--count", "5"])), 0);
    let log = f.log("image");
    let second = seeds_of(&log[first.len()..]);
    let expect: Vec<u64> = ["000002", "000003", "000004"]
        .iter()
        .map(|id| meta_seed(&f, id))
        .collect();
    assert_eq!(
        second.iter().copied().collect::<BTreeSet<_>>(),
        expect.iter().copied().collect()
    );
    assert_eq!(second.len(), 3);
    assert!(second.iter().all(|s| !before.contains(s)));

    // an item interrupted before its metadata was written is redone with the same seed
    let lost = meta_seed(&f, "000001");
    std::fs::remove_file(f.out().join("instances/000001/meta.json")).unwrap();
    let mark = f.log("image").len();
    assert_eq!(code(&f.gnv(&["generate", "--count", "5"])), 0);
    assert_eq!(seeds_of(&f.log("image")[mark..]), [lost]);
    assert_eq!(meta_seed(&f, "000001"), lost);
}

#[test]
fn rejecting_everything_leaves_nothing_to_compose() {
    let f = Fixture::new(
        json!({}),
        json!({"vision": {"judge": null, "replies": [REJECT]}}),
    );
    assert_eq!(code(&f.gnv(&["generate", "--count", "4"])), 0);
    assert_eq!(code(&f.gnv(&["validate"])), 0);
    let stats = f.read("out/stats.json");
    assert_eq!(stats["kept"], 0);
    assert_eq!(stats["filtered"], 4);
    let o = f.gnv(&["compose"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("NoValidInstances"), "{}", stderr(&o));
}

#[test]
fn backend_failure_exits_two() {
    let f = Fixture::new(json!({}), json!({"image": {"rules": [{"error": "auth"}]}}));
    let o = f.gnv(&["generate", "--count", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_prior_outputs_exit_one() {
    let f = Fixture::new(json!({}), json!({}));
    for (stage, hint) in [
        ("validate", "gnv generate"),
        ("compose", "gnv generate"),
        ("emit", "gnv compose"),
    ] {
        let o = f.gnv(&[stage]);
        assert_eq!(code(&o), 1, "{stage}");
        assert!(stderr(&o).contains(hint), "{stage}: {}", stderr(&o));
    }
}

#[test]
fn changed_config_refuses_to_resume() {
    let f = Fixture::new(json!({}), json!({}));
    assert_eq!(code(&f.gnv(&["generate", "--count", "1"])), 0);
    let o = f.gnv(&["generate", "--count", "1", "--seed", "99"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("config hash"));
    // a fresh output directory accepts it
    let other = f.path("other");
    let o = f.gnv(&[
        "generate",
        "--count",
        "1",
        "--seed",
        "99",
        "--out",
        other.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn json_progress_lines() {
    let f = Fixture::new(json!({}), json!({}));
    let o = f.gnv(&["generate", "--count", "2", "--json"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let events: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(events.first().unwrap()["event"], "stage_start");
    assert_eq!(events.last().unwrap()["event"], "stage_done");
    let items = events
        .iter()
        .filter(|e| e["event"] == "item" && e["stage"] == "generate")
        .count();
    assert_eq!(items, 2 + 4);
}

#[test]
fn config_from_environment() {
    let f = Fixture::new(json!({}), json!({}));
    let o = Command::new(env!("CARGO_BIN_EXE_gnv"))
        .args(["generate", "--count", "1"])
        .env("GNV_CONFIG", f.config())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_gnv"))
        .args(["generate"])
        .env_remove("GNV_CONFIG")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn run_then_check_and_corrupt() {
    let f = Fixture::new(json!({}), json!({}));
    assert_eq!(code(&f.gnv(&["run"])), 0);
    for name in [
        "annotations.json",
        "stats.json",
        "run_manifest.json",
        "state.json",
    ] {
        assert!(f.out().join(name).is_file(), "{name}");
    }
    assert_eq!(f.read("out/state.json")["stage"], "done");
    assert_eq!(code(&f.gnv(&["check"])), 0);
    assert_eq!(code(&f.gnv(&["stats"])), 0);

    let mut ann = f.read("out/annotations.json");
    let area = ann["annotations"][0]["area"].as_u64().unwrap();
    ann["annotations"][0]["area"] = (area + 1).into();
    f.write("out/annotations.json", &ann);
    let o = f.gnv(&["check", "--json"]);
    assert_eq!(code(&o), 1);
    let first: Value =
        serde_json::from_str(String::from_utf8_lossy(&o.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(first["result"]["violations"].as_array().unwrap().len(), 1);
}

#[test]
fn bad_config_exits_one() {
    let f = Fixture::new(json!({"parallelism": 0}), json!({}));
    assert_eq!(code(&f.gnv(&["generate"])), 1);
    let f = Fixture::new(
        json!({"endpoints": {"image": {"role": "mock_chat"}}}),
        json!({}),
    );
    let o = f.gnv(&["generate", "--count", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("image generation"), "{}", stderr(&o));
}
